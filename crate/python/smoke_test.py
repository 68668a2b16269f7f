"""Smoke test for the pypgode extension.

Build and run from the repository root:

    cargo build --release -p pgode-py --features extension-module
    cp target/release/libpypgode.so python/pypgode.so
    python3 python/smoke_test.py

or `maturin develop -m crates/py/Cargo.toml` followed by the last line.
"""

import math
import sys
import tempfile
from pathlib import Path

import pypgode

TINY = {
    "condition_length": 12,
    "prediction_length": 12,
    "batch_size": 16,
    "epochs": 2,
    "k": 2,
    "d": 8,
    "encoder_layers": 1,
    "decoder_hidden": 8,
    "critic_hidden": 8,
    "substeps": 1,
}


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    return cond


def main():
    results = []

    s = pypgode.simulate("charged", 5.0, 0.5, 1.0, 0.5, n_objects=5, n_frames=20, seed=1)
    results.append(check(len(s["positions"]) == 5 and len(s["positions"][0]) == 20, "simulate shapes"))
    results.append(check(s == pypgode.simulate("charged", 5.0, 0.5, 1.0, 0.5, n_objects=5, n_frames=20, seed=1),
                         "simulate is deterministic"))

    te = pypgode.temporal_embedding(3, 6)
    results.append(check(len(te) == 6 and abs(te[0] - math.sin(3.0)) < 1e-12, "temporal embedding"))
    results.append(check(abs(pypgode.gaussian_kl([0.0], [1.0])) < 1e-15, "KL of the prior is zero"))

    try:
        pypgode.temporal_embedding(1, 3)
        results.append(check(False, "odd width rejected"))
    except ValueError:
        results.append(check(True, "odd width rejected"))

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        manifest = pypgode.build_dataset(str(data), "springs", seed=0)
        results.append(check(manifest["counts"]["train"] > 0, "desk dataset written"))

        model, history = pypgode.Model.train(str(data), TINY)
        results.append(check(len(history) == 2 and all(math.isfinite(h["loss"]) for h in history),
                             "two finite training epochs"))
        gates = model.gates(str(data), "test_ood")
        results.append(check(all(abs(sum(g) - 1.0) < 1e-9 for sample in gates for g in sample), "gates on the simplex"))

        ckpt = Path(tmp) / "model.ckpt"
        model.save(str(ckpt))
        again = pypgode.Model.load(str(ckpt))
        same = model.predict(str(data), "test_id", 12) == again.predict(str(data), "test_id", 12)
        results.append(check(same, "checkpoint round trip"))

        report = model.evaluate(str(data), [12])
        q = report["splits"]["test_ood"]["12"]["q"]
        results.append(check(math.isfinite(q), f"OOD position MSE at 12 steps = {q:.4f}"))

    ly = pypgode.lyapunov({"seeds": 4})
    results.append(check(ly["status"] in ("pass", "fail", "premise not met"), f"lyapunov harness: {ly['status']}"))

    print(f"{sum(results)}/{len(results)} checks passed")
    return 0 if all(results) else 1


if __name__ == "__main__":
    sys.exit(main())
