use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_params, simulate, Split, SplitCounts, SplitSpec, System, TrajectorySample};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub system: System,
    pub seed: u64,
    pub spec: SplitSpec,
    pub counts: SplitCounts,
    pub format_version: u32,
}

/// Independent generator for sample `index` of `split`. Streams never
/// overlap, so samples can be produced in any order.
pub fn sample_stream(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.code() << 32) | index as u64);
    rng
}

fn generate(spec: &SplitSpec, system: System, seed: u64, split: Split, index: usize) -> Result<TrajectorySample> {
    let mut rng = sample_stream(seed, split, index);
    let params = sample_params(split, spec, &mut rng)?;
    let mut s = simulate(system, &params, spec.n_objects, spec.n_frames, &spec.sim, &mut rng)?;
    s.id = format!("{}-{index:05}", split.name());
    s.split = split;
    Ok(s)
}

/// Generates every split and writes `<split>.jsonl` plus `manifest.json`
/// into `out_dir`. Refuses to overwrite an existing dataset unless `force`.
pub fn build_dataset(
    spec: &SplitSpec,
    system: System,
    seed: u64,
    out_dir: &Path,
    force: bool,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            manifest_path.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    for split in Split::ALL {
        let samples: Vec<TrajectorySample> = (0..spec.counts.get(split))
            .into_par_iter()
            .map(|i| generate(spec, system, seed, split, i))
            .collect::<Result<_>>()?;
        let path = out_dir.join(format!("{}.jsonl", split.name()));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for s in &samples {
            serde_json::to_writer(&mut w, s).map_err(|e| Error::Format(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    let manifest = DatasetManifest {
        system,
        seed,
        spec: spec.clone(),
        counts: spec.counts,
        format_version: FORMAT_VERSION,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format_version {}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

/// Reads and validates one split file.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<TrajectorySample>> {
    let path = dir.join(format!("{}.jsonl", split.name()));
    let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: TrajectorySample = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}
