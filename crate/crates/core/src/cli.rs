//! Command-line pipeline: generate → prepare → train → score → report.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::data::{
    prepare_droplet, prepare_karman, read_dataset, stack_temporal, write_dataset, DatasetManifest, NormalizationMode,
    Split,
};
use crate::detect::{self, emit_report, flag_with_buckets, ReportPaths, ScoreRecord};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nn::gradcheck::check_all;
use crate::nn::{load_checkpoint, save_checkpoint, ArchSpec, AutoencoderModel, ConfigId};
use crate::synth::{
    gen_droplet_series, gen_vortex_ensemble, inject_anomaly, labels_from_csv, labels_to_csv, profile_sum,
    AnomalyLabel, DropletParams, InjectOptions, VortexParams,
};
use crate::tensor::Shape;
use crate::train::{fit_with, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "cae-anomaly", version, about = "Autoencoder anomaly detection for simulation ensembles")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` settings file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set filters=32`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    patience: Option<usize>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic raw dataset and its anomaly labels
    Generate,
    /// Select, normalize and split the raw dataset
    Prepare,
    /// Fit the autoencoder on the prepared dataset
    Train,
    /// Score one split by reconstruction error
    Score,
    /// Threshold scores and write the report and slice dumps
    Report,
    /// Compare analytic and finite-difference gradients on toy models
    CheckGradients,
    /// Run every stage for a named experiment
    Reproduce {
        /// karman-2d, karman-3d, droplet or droplet-500
        experiment: String,
    },
}

/// Settings with their defaults; `auto` resolves from other settings.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "run"),
    ("threads", "0"),
    ("source", "karman"),
    ("n_sims", "20"),
    ("n_sims_selected", "auto"),
    ("n_steps", "auto"),
    ("frame_shape", "64x48"),
    ("droplet_side", "64"),
    ("droplet_count", "2"),
    ("droplet_radius", "2.5"),
    ("dispersal_rate", "0.0375"),
    ("droplet_mass", "auto"),
    ("inject", ""),
    ("config_id", "auto"),
    ("normalization", "auto"),
    ("filters", "16"),
    ("hidden_units", "256"),
    ("latent_units", "128"),
    ("droplet_widths", "8,16"),
    ("epochs", "auto"),
    ("batch_size", "auto"),
    ("learning_rate", "0.001"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_epsilon", "1e-8"),
    ("patience", "10"),
    ("threshold", "auto"),
    ("split", "test"),
    ("bucket_width", "10"),
    ("dumps", "true"),
    ("raw", "auto"),
    ("labels", "auto"),
    ("dataset", "auto"),
    ("model", "auto"),
    ("loss", "auto"),
    ("scores", "auto"),
    ("report", "auto"),
];

/// Flat `key = value` settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::config(key, "unknown setting"))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        known(key)?;
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {} is not `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{}`: {e}", self.raw(key))))
    }

    fn is_auto(&self, key: &str) -> bool {
        self.raw(key) == "auto"
    }

    fn fill(&mut self, key: &str, value: impl Into<String>) {
        if self.is_auto(key) {
            self.values.insert(key.to_string(), value.into());
        }
    }

    /// Replaces every `auto` with a concrete value.
    pub fn resolve(&mut self) -> Result<()> {
        let source = self.raw("source").to_string();
        let droplet = match source.as_str() {
            "karman" => false,
            "droplet" => true,
            other => return Err(Error::config("source", format!("expected karman or droplet, got `{other}`"))),
        };
        let n_sims = self.raw("n_sims").to_string();
        self.fill("n_sims_selected", n_sims);
        self.fill("n_steps", if droplet { "200" } else { "40" });
        self.fill("config_id", if droplet { "droplet-3d" } else { "karman-2d" });
        self.fill("normalization", if droplet { "byte" } else { "minmax" });
        self.fill("epochs", if droplet { "100" } else { "70" });
        self.fill("batch_size", if droplet { "8" } else { "16" });
        let mode: NormalizationMode = self.get("normalization")?;
        self.fill(
            "threshold",
            match mode {
                NormalizationMode::MinMax => format!("{:?}", detect::KARMAN_THRESHOLD),
                NormalizationMode::BytePassthrough => format!("{:?}", detect::DROPLET_THRESHOLD),
            },
        );
        if self.is_auto("droplet_mass") {
            let r: f64 = self.get("droplet_radius")?;
            let n: usize = self.get("droplet_count")?;
            self.fill("droplet_mass", format!("{:?}", n as f64 * 250.0 * profile_sum([0.0; 3], r)));
        }
        let out = PathBuf::from(self.raw("out"));
        for (key, file) in [
            ("raw", "raw.ds"),
            ("labels", "labels.csv"),
            ("dataset", "dataset.ds"),
            ("model", "model.ckpt"),
            ("loss", "loss.csv"),
            ("scores", "scores.csv"),
            ("report", "report.json"),
        ] {
            self.fill(key, out.join(file).to_string_lossy().into_owned());
        }
        self.config_id()?;
        self.check_types()
    }

    /// Parses every typed setting so bad values fail before any file is read.
    fn check_types(&self) -> Result<()> {
        self.train_config()?;
        self.droplet_params()?;
        self.frame_shape()?;
        self.labels_to_inject()?;
        for key in ["n_sims", "n_sims_selected", "n_steps", "threads", "filters", "hidden_units", "latent_units", "bucket_width"] {
            self.get::<usize>(key)?;
        }
        self.get::<f64>("threshold")?;
        self.get::<Split>("split")?;
        self.get::<bool>("dumps")?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# resolved settings\n");
        for (k, _) in KEYS {
            s.push_str(&format!("{k} = {}\n", self.raw(k)));
        }
        s
    }

    fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    fn config_id(&self) -> Result<ConfigId> {
        self.raw("config_id")
            .parse()
            .map_err(|e: Error| Error::config("config_id", e.to_string()))
    }

    fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            learning_rate: self.get("learning_rate")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            adam_epsilon: self.get("adam_epsilon")?,
            seed: self.get("seed")?,
            early_stop_patience: self.get("patience")?,
        })
    }

    fn droplet_params(&self) -> Result<DropletParams> {
        Ok(DropletParams {
            n_droplets_initial: self.get("droplet_count")?,
            initial_radius: self.get("droplet_radius")?,
            dispersal_rate: self.get("dispersal_rate")?,
            total_mass: self.get("droplet_mass")?,
            domain_side: self.get("droplet_side")?,
            seed: self.get("seed")?,
        })
    }

    fn frame_shape(&self) -> Result<[usize; 2]> {
        let s = Shape::parse(self.raw("frame_shape")).map_err(|e| Error::config("frame_shape", e.to_string()))?;
        match s.dims() {
            [h, w] => Ok([*h, *w]),
            _ => Err(Error::config("frame_shape", "expected HxW")),
        }
    }

    fn labels_to_inject(&self) -> Result<Vec<AnomalyLabel>> {
        let spec = self.raw("inject").trim();
        if spec.is_empty() {
            return Ok(Vec::new());
        }
        spec.split(';')
            .map(|item| {
                let f: Vec<&str> = item.split(':').map(str::trim).collect();
                let bad = || Error::config("inject", format!("`{item}` is not KIND:sim:t_start:t_end"));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(AnomalyLabel {
                    kind: f[0].parse().map_err(|_| bad())?,
                    sim_id: f[1].parse().map_err(|_| bad())?,
                    t_start: f[2].parse().map_err(|_| bad())?,
                    t_end: f[3].parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }
}

fn preset(experiment: &str) -> Result<Vec<(&'static str, &'static str)>> {
    Ok(match experiment {
        "karman-2d" => vec![("source", "karman"), ("config_id", "karman-2d")],
        "karman-3d" => vec![("source", "karman"), ("config_id", "karman-3d-stack")],
        "droplet" => vec![("source", "droplet"), ("normalization", "byte")],
        "droplet-500" => vec![("source", "droplet"), ("normalization", "byte"), ("epochs", "500")],
        other => {
            return Err(Error::config(
                "experiment",
                format!("unknown experiment `{other}` (karman-2d, karman-3d, droplet, droplet-500)"),
            ))
        }
    })
}

/// Layers defaults, `TRACE_SEED`, preset, config file, `--set` and flags.
fn build_config(common: &Common, preset_values: &[(&str, &str)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(s) = std::env::var("TRACE_SEED") {
        cfg.set("seed", s.trim())?;
    }
    for (k, v) in preset_values {
        cfg.set(k, *v)?;
    }
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.as_str(), "expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags: [(&str, Option<String>); 8] = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("out", common.out.as_ref().map(|p| p.to_string_lossy().into_owned())),
        ("threads", common.threads.map(|v| v.to_string())),
        ("epochs", common.epochs.map(|v| v.to_string())),
        ("batch_size", common.batch_size.map(|v| v.to_string())),
        ("learning_rate", common.learning_rate.map(|v| format!("{v:?}"))),
        ("patience", common.patience.map(|v| v.to_string())),
        ("threshold", common.threshold.map(|v| format!("{v:?}"))),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.get::<u64>("seed")?;
    cfg.resolve()?;
    Ok(cfg)
}

fn with_path<T>(r: Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_dataset(cfg: &RunConfig, key: &str) -> Result<DatasetManifest> {
    let p = cfg.path(key);
    with_path(read_dataset(&p), &p)
}

fn write_resolved(cfg: &RunConfig, stage: &str) -> Result<()> {
    write_atomic(&Path::new(cfg.raw("out")).join(format!("{stage}.conf")), cfg.to_text().as_bytes())
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let n_steps: usize = cfg.get("n_steps")?;
    let (mut samples, value_range) = match cfg.raw("source") {
        "karman" => {
            let frame = cfg.frame_shape()?;
            let params = VortexParams::ensemble(cfg.get("n_sims")?, frame, seed);
            (gen_vortex_ensemble(&params, n_steps, frame)?, (0.0, 255.0))
        }
        _ => (gen_droplet_series(&cfg.droplet_params()?, n_steps)?, (0.0, 255.0)),
    };
    let labels = cfg.labels_to_inject()?;
    for (i, l) in labels.iter().enumerate() {
        let opts = InjectOptions {
            value_range,
            seed: seed.wrapping_add(i as u64),
            ..InjectOptions::default()
        };
        inject_anomaly(&mut samples, l, &opts)?;
    }
    let n = samples.len();
    let m = DatasetManifest::raw(samples, format!("{} synthetic, seed {seed}", cfg.raw("source")));
    write_dataset(&m, &cfg.path("raw"))?;
    write_atomic(&cfg.path("labels"), labels_to_csv(&labels).as_bytes())?;
    eprintln!("generate: {n} samples, {} labels -> {}", labels.len(), cfg.raw("raw"));
    Ok(())
}

fn prepare(cfg: &RunConfig) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let raw = load_dataset(cfg, "raw")?;
    let mode: NormalizationMode = cfg.get("normalization")?;
    let ds = match cfg.raw("source") {
        "karman" => {
            if mode != NormalizationMode::MinMax {
                return Err(Error::config("normalization", "vortex frames are min-max normalized"));
            }
            let frames = prepare_karman(raw.samples, cfg.get("n_sims_selected")?, seed)?;
            match cfg.config_id()? {
                ConfigId::Karman3dStack => stack_temporal(&frames, seed)?,
                ConfigId::Karman2d => frames,
                ConfigId::Droplet3d => return Err(Error::config("config_id", "droplet-3d needs source = droplet")),
            }
        }
        _ => prepare_droplet(raw.samples, mode, seed)?,
    };
    write_dataset(&ds, &cfg.path("dataset"))?;
    eprintln!(
        "prepare: {} samples (train {}, val {}, test {}) -> {}",
        ds.len(),
        ds.count(Split::Train),
        ds.count(Split::Val),
        ds.count(Split::Test),
        cfg.raw("dataset")
    );
    Ok(())
}

fn arch_for(cfg: &RunConfig, ds: &DatasetManifest) -> Result<ArchSpec> {
    let first = ds
        .samples
        .first()
        .ok_or_else(|| Error::InsufficientData("empty dataset".into()))?;
    let d = first.values.dims();
    let wrong = || Error::shape(format!("{} samples do not fit {}", first.values.shape(), cfg.raw("config_id")));
    let spec = match cfg.config_id()? {
        ConfigId::Karman2d if d.len() == 3 => ArchSpec::karman_2d(d[1], d[2]),
        ConfigId::Karman3dStack if d.len() == 4 => ArchSpec::karman_3d_stack(d[2], d[3]),
        ConfigId::Droplet3d if d.len() == 4 => {
            let widths: Vec<usize> = cfg
                .raw("droplet_widths")
                .split(',')
                .map(|w| w.trim().parse().map_err(|_| Error::config("droplet_widths", "expected two integers")))
                .collect::<Result<_>>()?;
            if widths.len() != 2 {
                return Err(Error::config("droplet_widths", "expected two integers"));
            }
            ArchSpec::droplet_3d(d[1])
                .with_droplet_widths([widths[0], widths[1]])
                .with_output_range(0.0, ds.normalization.data_max())
        }
        _ => return Err(wrong()),
    };
    let spec = spec
        .with_filters(cfg.get("filters")?)
        .with_dense(cfg.get("hidden_units")?, cfg.get("latent_units")?);
    Ok(spec.with_input_shape(first.values.shape().clone()))
}

fn train(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg, "dataset")?;
    let spec = arch_for(cfg, &ds)?;
    let tc = cfg.train_config()?;
    let model = AutoencoderModel::new(spec, tc.seed)?;
    eprintln!("train: {} parameters, {} epochs", model.network().param_count(), tc.epochs);
    let (best, history) = fit_with(model, &ds, &tc, |e, l| {
        eprintln!("  epoch {e:>3}  train {:.6e}  val {:.6e}", l.train_mse, l.val_mse)
    })?;
    save_checkpoint(&best, &cfg.path("model"))?;
    write_atomic(&cfg.path("loss"), history.to_csv().as_bytes())?;
    if let Some((e, v)) = history.best_val() {
        eprintln!("train: best val {v:.6e} at epoch {} -> {}", e + 1, cfg.raw("model"));
    }
    Ok(())
}

fn scored(cfg: &RunConfig) -> Result<(DatasetManifest, AutoencoderModel<f32>, Vec<ScoreRecord>)> {
    let ds = load_dataset(cfg, "dataset")?;
    let model: AutoencoderModel<f32> = with_path(load_checkpoint(&cfg.path("model")), &cfg.path("model"))?;
    let split: Split = cfg.get("split")?;
    let records = detect::score(&model, &ds, split)?;
    Ok((ds, model, records))
}

fn threshold(cfg: &RunConfig) -> Result<f64> {
    let t: f64 = cfg.get("threshold")?;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config("threshold", "must be positive"));
    }
    Ok(t)
}

fn score(cfg: &RunConfig) -> Result<()> {
    let (_, _, records) = scored(cfg)?;
    let report = flag_with_buckets(&records, threshold(cfg)?, cfg.get("bucket_width")?);
    write_atomic(&cfg.path("scores"), detect::scores_csv(&report.records).as_bytes())?;
    eprintln!(
        "score: {} samples, {} above {:?} -> {}",
        records.len(),
        report.flagged.len(),
        report.threshold,
        cfg.raw("scores")
    );
    Ok(())
}

fn report(cfg: &RunConfig) -> Result<()> {
    let (ds, model, records) = scored(cfg)?;
    let report = flag_with_buckets(&records, threshold(cfg)?, cfg.get("bucket_width")?);
    let out = Path::new(cfg.raw("out"));
    let dumps: bool = cfg.get("dumps")?;
    let paths = ReportPaths {
        scores_csv: cfg.path("scores"),
        report_json: cfg.path("report"),
        dump_dir: dumps.then(|| out.join("dumps")),
    };
    let written = emit_report(&report, &ds, dumps.then_some(&model), &paths)?;
    let labels_path = cfg.path("labels");
    if labels_path.exists() {
        let labels = labels_from_csv(&std::fs::read_to_string(&labels_path)?)?;
        for l in &labels {
            let hit = report
                .flagged
                .iter()
                .any(|r| r.sim_id == l.sim_id && r.t_start <= l.t_end && r.t_end >= l.t_start);
            eprintln!(
                "report: label {} sim {} steps {}..={} {}",
                l.kind,
                l.sim_id,
                l.t_start,
                l.t_end,
                if hit { "flagged" } else { "not flagged" }
            );
        }
    }
    eprintln!(
        "report: {} of {} flagged at {:?}, {} files under {}",
        report.flagged.len(),
        report.records.len(),
        report.threshold,
        written.len(),
        out.display()
    );
    Ok(())
}

fn check_gradients(cfg: &RunConfig) -> Result<bool> {
    let results = check_all(1e-5, 1e-4, 3);
    let mut text = String::new();
    for (name, r) in &results {
        text.push_str(&format!("{name}\n{r}"));
    }
    let passed = results.iter().all(|(_, r)| r.passed());
    text.push_str(if passed { "all gradient checks passed\n" } else { "gradient check FAILED\n" });
    print!("{text}");
    write_atomic(&Path::new(cfg.raw("out")).join("gradients.txt"), text.as_bytes())?;
    Ok(passed)
}

fn init_threads(cfg: &RunConfig) -> Result<()> {
    let n: usize = cfg.get("threads")?;
    if n > 0 {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn execute(command: Command, common: &Common) -> Result<i32> {
    let (cfg, stage) = match &command {
        Command::Reproduce { experiment } => (build_config(common, &preset(experiment)?)?, "reproduce"),
        Command::Generate => (build_config(common, &[])?, "generate"),
        Command::Prepare => (build_config(common, &[])?, "prepare"),
        Command::Train => (build_config(common, &[])?, "train"),
        Command::Score => (build_config(common, &[])?, "score"),
        Command::Report => (build_config(common, &[])?, "report"),
        Command::CheckGradients => (build_config(common, &[])?, "check-gradients"),
    };
    init_threads(&cfg)?;
    write_resolved(&cfg, stage)?;
    match command {
        Command::Generate => generate(&cfg)?,
        Command::Prepare => prepare(&cfg)?,
        Command::Train => train(&cfg)?,
        Command::Score => score(&cfg)?,
        Command::Report => report(&cfg)?,
        Command::CheckGradients => return Ok(if check_gradients(&cfg)? { 0 } else { 1 }),
        Command::Reproduce { .. } => {
            generate(&cfg)?;
            prepare(&cfg)?;
            train(&cfg)?;
            report(&cfg)?;
        }
    }
    Ok(0)
}

/// Runs the command line and returns the process exit code: 0 on
/// success, 2 for usage or settings errors, 1 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, &cli.common) {
        Ok(code) => code,
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
