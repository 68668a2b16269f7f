//! The `pgode` command: data generation, training, evaluation, ablations,
//! theory checks and plotting.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::evalkit::{self, AblationConfig, AblationData, TheoryConfig, LENGTHS};
use crate::objectives::Variant;
use crate::simkit::{self, Split, SplitSpec, System};
use crate::trainer::{self, Model, TrainConfig};
use crate::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "pgode", version, about = "Prototypical graph ODEs for interacting systems")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "PGODE_WORKERS")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a dataset.
    Gen(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint on the test splits.
    Eval(EvalArgs),
    /// Train and score ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Run the perturbation-growth and solver-convergence harnesses.
    Theory(TheoryArgs),
    /// Write SVG and CSV views of one prediction.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub system: System,
    /// Split specification JSON; defaults to the desk-scale preset.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Preset used when no spec file is given: `desk` or `full`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub condition_length: Option<usize>,
    #[arg(long)]
    pub prediction_length: Option<usize>,
    /// Ablation variant: full, w/o-O, w/o-eps, w/o-F or w/o-D.
    #[arg(long)]
    pub variant: Option<Variant>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(seed, epochs, lr, batch_size, k, d, substeps, condition_length, prediction_length);
        if let Some(v) = self.variant {
            cfg.flags = v.flags();
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training configuration JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; required, checked after the configuration.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; required, checked after the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = LENGTHS)]
    pub lengths: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    #[arg(long, value_delimiter = ',', default_values_t = LENGTHS)]
    pub lengths: Vec<usize>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug)]
pub struct TheoryArgs {
    /// Harness configuration JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Single-network Lipschitz multiple.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test_id")]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv`, runs the command and maps the outcome to an exit code:
/// 0 on success, 1 for invalid input, 2 for runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Theory(a) => theory(a),
        Command::Plot(a) => plot(a),
    }
}

/// Reads a user-supplied JSON file; a missing or malformed file is invalid
/// input.
fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn manifest(dir: &Path, command: &str, config: serde_json::Value, seed: Option<u64>, inputs: serde_json::Value) -> Result<()> {
    write_json(
        &dir.join(RUN_MANIFEST),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config": config,
            "inputs": inputs,
        }),
    )
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => read_json::<SplitSpec>(p)?,
        None => match a.preset.as_str() {
            "desk" => SplitSpec::desk_scale(a.system),
            "full" => SplitSpec::full_scale(a.system),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        },
    };
    let m = simkit::build_dataset(&spec, a.system, a.seed, &a.out, a.force)?;
    manifest(
        &a.out,
        "gen",
        serde_json::to_value(&m).map_err(|e| Error::Format(e.to_string()))?,
        Some(a.seed),
        json!({ "spec": a.spec }),
    )?;
    log::info!("wrote dataset to {}", a.out.display());
    Ok(())
}

fn load_config(path: &Option<PathBuf>, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    o.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing required flag {flag}")))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let data = required(&a.data, "--data")?;
    let dir = required(&a.out, "--out")?;
    let train_set = simkit::load_split(data, Split::Train)?;
    let val_set = simkit::load_split(data, Split::Val)?;
    let out = trainer::fit(cfg.clone(), &train_set, &val_set)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.best.save(&dir.join("best.ckpt"))?;
    out.last.save(&dir.join("last.ckpt"))?;
    write_json(&dir.join("history.json"), &out.history)?;
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "best_epoch": out.best_epoch,
            "best_val_mse_q": out.history.get(out.best_epoch.saturating_sub(1)).and_then(|m| m.val_mse_q),
            "first_val_mse_q": out.history.first().and_then(|m| m.val_mse_q),
        }),
    )?;
    manifest(
        dir,
        "train",
        serde_json::to_value(&cfg).map_err(|e| Error::Format(e.to_string()))?,
        Some(cfg.seed),
        json!({ "data": a.data, "config": a.config }),
    )
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let id = simkit::load_split(&a.data, Split::TestId)?;
    let ood = simkit::load_split(&a.data, Split::TestOod)?;
    let report = evalkit::mse_report(&model, &[(Split::TestId, &id), (Split::TestOod, &ood)], &a.lengths)?;
    write_json(
        &a.out,
        &json!({ "raw": report, "hundredths": report.in_hundredths() }),
    )?;
    manifest(
        &parent_dir(&a.out),
        "eval",
        serde_json::to_value(&model.cfg).map_err(|e| Error::Format(e.to_string()))?,
        Some(model.cfg.seed),
        json!({ "checkpoint": a.checkpoint, "data": a.data, "lengths": a.lengths }),
    )
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = load_config(&a.config, &a.overrides)?;
    let cfg = AblationConfig {
        base,
        variants: a.variants.clone().unwrap_or_else(|| Variant::ALL.to_vec()),
        seeds: a.seeds.clone(),
        lengths: a.lengths.clone(),
    };
    let train = simkit::load_split(&a.data, Split::Train)?;
    let val = simkit::load_split(&a.data, Split::Val)?;
    let test_id = simkit::load_split(&a.data, Split::TestId)?;
    let test_ood = simkit::load_split(&a.data, Split::TestOod)?;
    let report = evalkit::run_ablations(
        &cfg,
        &AblationData {
            train: &train,
            val: &val,
            test_id: &test_id,
            test_ood: &test_ood,
        },
    )?;
    write_json(&a.out, &report)?;
    manifest(
        &parent_dir(&a.out),
        "ablate",
        serde_json::to_value(&cfg).map_err(|e| Error::Format(e.to_string()))?,
        None,
        json!({ "data": a.data }),
    )
}

fn theory(a: TheoryArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<TheoryConfig>(p)?,
        None => TheoryConfig::default(),
    };
    if let Some(v) = a.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = a.k {
        cfg.k = v;
    }
    if let Some(v) = a.scale {
        cfg.single_scale = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let lyapunov = evalkit::lyapunov_harness(&cfg)?;
    let uniqueness = theory_uniqueness(&cfg)?;
    write_json(&a.out, &json!({ "verdict": lyapunov.verdict, "lyapunov": lyapunov, "uniqueness": uniqueness }))?;
    manifest(
        &parent_dir(&a.out),
        "theory",
        serde_json::to_value(&cfg).map_err(|e| Error::Format(e.to_string()))?,
        Some(cfg.seed),
        json!({ "config": a.config }),
    )
}

/// Solver convergence on the linear decay field and on a random tanh bank.
fn theory_uniqueness(cfg: &TheoryConfig) -> Result<serde_json::Value> {
    use crate::diffcore::Tensor;
    use crate::nn::ParamStore;
    use crate::odecore::{prototype_field, GateColumns, InteractionGraph};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let z0 = Tensor::randn(vec![cfg.n_objects, cfg.width], 1.0, &mut rng);
    let linear = evalkit::uniqueness_check(|tape, z| tape.neg(z), &z0, cfg.horizon)?;

    let mut store = ParamStore::new();
    let bank = evalkit::random_bank(&mut store, "u", cfg.width, cfg.k, cfg.prototype_lipschitz, &mut rng);
    let n = cfg.n_objects;
    let edges: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i != j))).collect()).collect();
    let graph = InteractionGraph::from_dense(&edges);
    let gates = Tensor::filled(vec![n, cfg.k], 1.0 / cfg.k as f64);
    let bank_report = evalkit::uniqueness_check(
        |tape, z| {
            let p = store.bind(tape, false)?;
            let b = bank.bind(tape, &p)?;
            let g = tape.constant(gates.clone());
            let cols = GateColumns::new(tape, g, cfg.width)?;
            prototype_field(tape, &b, &graph, &cols, z, true)
        },
        &z0,
        cfg.horizon,
    )?;
    Ok(json!({ "linear_decay": linear, "prototype_bank": bank_report }))
}

fn plot(a: PlotArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let samples = simkit::load_split(&a.data, a.split)?;
    let sample = samples
        .get(a.index)
        .ok_or_else(|| Error::Config(format!("split {} has no sample {}", a.split.name(), a.index)))?;
    let cond = model.cfg.condition_length;
    let len = a.length.unwrap_or(sample.n_frames.saturating_sub(cond));
    let pred = model.predict(std::slice::from_ref(sample), len)?;
    let stem = format!("{}_{}", a.split.name(), a.index);
    evalkit::emit_plots(sample, &pred[0], cond, &a.out, &stem)?;
    manifest(
        &a.out,
        "plot",
        serde_json::to_value(&model.cfg).map_err(|e| Error::Format(e.to_string()))?,
        Some(model.cfg.seed),
        json!({ "checkpoint": a.checkpoint, "data": a.data, "split": a.split, "index": a.index, "length": len }),
    )
}
