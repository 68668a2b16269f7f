use pgode::simkit::{self, SplitCounts, SplitSpec, System};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn module(py: Python<'_>) -> Bound<'_, PyModule> {
    let m = PyModule::new(py, "pypgode").unwrap();
    pypgode::pypgode(&m).unwrap();
    m
}

fn with_module<F: for<'py> FnOnce(Python<'py>, Bound<'py, PyModule>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = module(py);
        f(py, m)
    });
}

fn tiny_dataset(dir: &std::path::Path) {
    let mut spec = SplitSpec::desk_scale(System::Springs);
    spec.counts = SplitCounts {
        train: 8,
        val: 4,
        test_id: 4,
        test_ood: 4,
    };
    spec.n_objects = 3;
    spec.n_frames = 16;
    simkit::build_dataset(&spec, System::Springs, 0, dir, false).unwrap();
}

#[test]
fn simulate_returns_trajectory_dict() {
    with_module(|_, m| {
        let s = m.getattr("simulate").unwrap().call1(("springs", 5.0, 0.5, 0.1, 0.5, 4, 10, 3)).unwrap();
        let pos = s.get_item("positions").unwrap();
        assert_eq!(pos.len().unwrap(), 4);
        assert_eq!(pos.get_item(0).unwrap().len().unwrap(), 10);
        let edges: Vec<Vec<f64>> = s.get_item("edges").unwrap().extract().unwrap();
        for i in 0..4 {
            assert_eq!(edges[i][i], 0.0);
            for j in 0..4 {
                assert_eq!(edges[i][j], edges[j][i]);
            }
        }
        let again = m.getattr("simulate").unwrap().call1(("springs", 5.0, 0.5, 0.1, 0.5, 4, 10, 3)).unwrap();
        assert!(s.eq(again).unwrap());
    });
}

#[test]
fn bad_inputs_raise_value_error() {
    with_module(|py, m| {
        let e = m.getattr("simulate").unwrap().call1(("gravity", 5.0, 0.5, 0.1, 0.5)).unwrap_err();
        assert!(e.is_instance_of::<PyValueError>(py));
        let e = m.getattr("temporal_embedding").unwrap().call1((3, 5)).unwrap_err();
        assert!(e.is_instance_of::<PyValueError>(py));
        let e = m.getattr("gaussian_kl").unwrap().call1((vec![0.0], vec![-1.0])).unwrap_err();
        assert!(e.is_instance_of::<PyValueError>(py), "{e}");
        let e = m.getattr("gaussian_kl").unwrap().call1((vec![0.0, 1.0], vec![1.0])).unwrap_err();
        assert!(e.is_instance_of::<PyValueError>(py), "{e}");
    });
}

#[test]
fn embedding_and_kl_values() {
    with_module(|_, m| {
        let te: Vec<f64> = m.getattr("temporal_embedding").unwrap().call1((0, 4)).unwrap().extract().unwrap();
        assert_eq!(te, vec![0.0, 1.0, 0.0, 1.0]);
        let kl: f64 = m
            .getattr("gaussian_kl")
            .unwrap()
            .call1((vec![0.0, 1.0], vec![1.0, 1.0]))
            .unwrap()
            .extract()
            .unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
    });
}

#[test]
fn missing_dataset_raises_os_error() {
    with_module(|py, m| {
        let dir = tempfile::tempdir().unwrap();
        let e = m
            .getattr("load_split")
            .unwrap()
            .call1((dir.path().join("nope"), "train"))
            .unwrap_err();
        assert!(e.is_instance_of::<PyOSError>(py), "{e}");
    });
}

#[test]
fn train_predict_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path());
    with_module(|py, m| {
        let cfg = PyDict::new(py);
        for (k, v) in [
            ("condition_length", 4),
            ("prediction_length", 4),
            ("batch_size", 4),
            ("epochs", 2),
            ("k", 2),
            ("d", 8),
            ("encoder_layers", 1),
            ("decoder_hidden", 8),
            ("critic_hidden", 8),
            ("substeps", 1),
        ] {
            cfg.set_item(k, v).unwrap();
        }
        let model_cls = m.getattr("Model").unwrap();
        let out = model_cls.getattr("train").unwrap().call1((dir.path(), &cfg)).unwrap();
        let model = out.get_item(0).unwrap();
        let history = out.get_item(1).unwrap();
        assert_eq!(history.len().unwrap(), 2);
        let k: usize = model.getattr("config").unwrap().get_item("k").unwrap().extract().unwrap();
        assert_eq!(k, 2);

        let gates: Vec<Vec<Vec<f64>>> = model.call_method1("gates", (dir.path(), "test_ood")).unwrap().extract().unwrap();
        assert_eq!(gates.len(), 4);
        for row in gates.iter().flatten() {
            assert_eq!(row.len(), 2);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        let pred: Vec<Vec<Vec<[f64; 4]>>> =
            model.call_method1("predict", (dir.path(), "test_id", 4)).unwrap().extract().unwrap();
        let path = dir.path().join("m.ckpt");
        model.call_method1("save", (&path,)).unwrap();
        let loaded = model_cls.getattr("load").unwrap().call1((&path,)).unwrap();
        let again: Vec<Vec<Vec<[f64; 4]>>> =
            loaded.call_method1("predict", (dir.path(), "test_id", 4)).unwrap().extract().unwrap();
        assert_eq!(pred, again);

        let report = model.call_method1("evaluate", (dir.path(), vec![4, 12])).unwrap();
        let q: f64 = report
            .get_item("splits")
            .unwrap()
            .get_item("test_ood")
            .unwrap()
            .get_item("12")
            .unwrap()
            .get_item("q")
            .unwrap()
            .extract()
            .unwrap();
        assert!(q.is_finite() && q >= 0.0);
    });
}

#[test]
fn lyapunov_accepts_partial_config() {
    with_module(|py, m| {
        let cfg = PyDict::new(py);
        cfg.set_item("seeds", 3).unwrap();
        let r = m.getattr("lyapunov").unwrap().call1((&cfg,)).unwrap();
        assert_eq!(r.get_item("per_seed").unwrap().len().unwrap(), 3);
        let status: String = r.get_item("status").unwrap().extract().unwrap();
        assert!(["pass", "fail", "premise not met"].contains(&status.as_str()));
    });
}
