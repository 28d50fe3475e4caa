//! The `nigp` command line: train, eval, predict and synth.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_features, split, synth_blobs, write_csv, write_packed, BlobSpec, DataFormat, FeatureDataset};
use crate::denoise::DenoiseMethod;
use crate::kernels::{KernelFamily, KernelSpec};
use crate::metrics::Metrics;
use crate::tree::{train, EpochRecord, TrainConfig, TrainedModel};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "NIGP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "nigp", version, about = "Tree-structured GP classification with noisy-input correction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model as described by a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a model on a labelled feature file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// csv or packed; inferred from the extension by default.
        #[arg(long)]
        format: Option<DataFormat>,
        /// Also write the metrics as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the predicted label and class probabilities of every row.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        format: Option<DataFormat>,
    },
    /// Generate a synthetic Gaussian-blob dataset.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 60)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 6.0)]
        separation: f64,
        #[arg(long, default_value_t = 0.2)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Split off a stratified test set and write it here.
        #[arg(long)]
        test_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        test_fraction: f64,
        #[arg(long)]
        format: Option<DataFormat>,
    },
}

/// Where the training data comes from: a file, or generated blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    /// Hold out this fraction of the training data (stratified) for testing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_kernel")]
    pub kernel: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lengthscale: Option<f64>,
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
    #[serde(default = "default_inducing")]
    pub inducing: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_sweeps")]
    pub sweeps_per_epoch: usize,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iters: usize,
    #[serde(default = "default_denoiser")]
    pub denoiser: String,
    #[serde(default = "yes")]
    pub noisy: bool,
    #[serde(default = "yes")]
    pub train_on_denoised: bool,
}

fn default_kernel() -> String {
    "rbf".into()
}
fn default_output_scale() -> f64 {
    1.0
}
fn default_inducing() -> usize {
    2
}
fn default_learning_rate() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    20
}
fn default_sweeps() -> usize {
    5
}
fn default_kmeans_iters() -> usize {
    20
}
fn default_denoiser() -> String {
    "svd".into()
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub model: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

/// Contents of a `train --config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Reads TOML, or JSON when the file ends in `.json` (as echoed into
    /// training reports). Relative paths are resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        };
        let abs = std::path::absolute(path)?;
        let base = abs.parent().unwrap_or_else(|| Path::new("/"));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.train.as_mut().map(resolve);
        cfg.data.test.as_mut().map(resolve);
        resolve(&mut cfg.output.model);
        cfg.output.report.as_mut().map(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let m = &self.model;
        let family: KernelFamily = m.kernel.parse()?;
        let denoiser: DenoiseMethod = m.denoiser.parse()?;
        Ok(TrainConfig {
            epochs: m.epochs,
            learning_rate: m.learning_rate,
            inducing: m.inducing,
            kernel: KernelSpec { family, alpha: m.alpha, lengthscale: m.lengthscale, output_scale: m.output_scale },
            noisy: m.noisy,
            sweeps_per_epoch: m.sweeps_per_epoch,
            seed: self.seed,
            kmeans_iters: m.kmeans_iters,
            train_on_denoised: m.train_on_denoised,
            denoiser,
        })
    }

    fn data_format(&self, path: &Path) -> anyhow::Result<DataFormat> {
        match &self.data.format {
            Some(f) => Ok(f.parse()?),
            None => Ok(DataFormat::from_path(path)),
        }
    }

    /// Checks everything that can be checked before loading data.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.train_config()?.validate()?;
        let d = &self.data;
        match (&d.train, &d.synth) {
            (Some(_), Some(_)) => bail!("[data] takes either `train` or `synth`, not both"),
            (None, None) => bail!("[data] needs a `train` path or a `synth` table"),
            _ => {}
        }
        if let Some(f) = &d.format {
            f.parse::<DataFormat>()?;
        }
        if let Some(f) = d.test_fraction {
            if d.test.is_some() {
                bail!("[data] takes either `test` or `test_fraction`, not both");
            }
            if !(f > 0.0 && f < 1.0) {
                bail!("test_fraction must lie in (0, 1), got {f}");
            }
        }
        if let Some(s) = &d.synth {
            if s.classes < 2 || s.per_class < 2 || s.dim == 0 {
                bail!("synth needs classes >= 2, per_class >= 2 and dim >= 1");
            }
        }
        Ok(())
    }

    /// Training set and optional test set.
    fn datasets(&self) -> anyhow::Result<(FeatureDataset, Option<FeatureDataset>)> {
        let d = &self.data;
        let full = match (&d.train, &d.synth) {
            (Some(path), _) => {
                load_features(path, self.data_format(path)?).with_context(|| format!("loading {}", path.display()))?
            }
            (None, Some(s)) => synth_blobs(&BlobSpec {
                classes: s.classes,
                per_class: s.per_class,
                dim: s.dim,
                separation: s.separation,
                noise_sigma: s.noise_sigma,
                seed: s.seed,
            })?,
            (None, None) => unreachable!("validated"),
        };
        if let Some(f) = d.test_fraction {
            let (tr, te) = split(&full, f, self.seed)?;
            return Ok((tr, Some(te)));
        }
        let test = match &d.test {
            Some(path) => Some(
                load_features(path, self.data_format(path)?).with_context(|| format!("loading {}", path.display()))?,
            ),
            None => None,
        };
        Ok((full, test))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// Wall-clock prediction time in seconds.
    pub test_seconds: f64,
    pub instances: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: String,
    /// Effective configuration; saving it as JSON gives a config that
    /// reproduces the model.
    pub config: RunConfig,
    pub epochs: Vec<EpochRecord>,
    /// Wall-clock training time in seconds, denoising included.
    pub train_seconds: f64,
    /// Per-dimension input-noise variance estimated from the denoiser.
    pub sigma_x: Vec<f64>,
    pub train: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<EvalReport>,
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path.file_name().ok_or_else(|| anyhow!("{} is not a file path", path.display()))?.to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

/// Applies the thread cap from the environment, if set.
pub fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train { config } => cmd_train(&config).map(|_| ()),
        Command::Eval { model, data, format, report } => {
            let r = cmd_eval(&model, &data, format)?;
            print_metrics(&r);
            if let Some(path) = report {
                write_atomic(&path, to_json(&r)?.as_bytes())?;
            }
            Ok(())
        }
        Command::Predict { model, data, out, format } => cmd_predict(&model, &data, &out, format),
        Command::Synth {
            classes,
            per_class,
            dim,
            separation,
            noise_sigma,
            seed,
            out,
            test_out,
            test_fraction,
            format,
        } => {
            let spec = BlobSpec { classes, per_class, dim, separation, noise_sigma, seed };
            cmd_synth(&spec, &out, test_out.as_deref(), test_fraction, format)
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

pub fn load_model(path: &Path) -> anyhow::Result<TrainedModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    TrainedModel::from_json(&text).with_context(|| format!("loading model {}", path.display()))
}

fn check_compatible(model: &TrainedModel, data: &FeatureDataset) -> anyhow::Result<()> {
    if model.dim() != data.d() {
        bail!("model expects d={} features, data has d={}", model.dim(), data.d());
    }
    if data.num_classes() > model.num_classes() {
        bail!("data has C={} classes, model has C={}", data.num_classes(), model.num_classes());
    }
    Ok(())
}

fn evaluate(model: &TrainedModel, data: &FeatureDataset) -> anyhow::Result<EvalReport> {
    check_compatible(model, data)?;
    let start = Instant::now();
    let pred = model.predict(&data.features)?;
    let test_seconds = start.elapsed().as_secs_f64();
    let metrics = Metrics::compute(&data.labels, &pred, model.num_classes())?;
    Ok(EvalReport { metrics, test_seconds, instances: data.n() })
}

/// Trains per the config, writes the model and the report, and returns
/// the report.
pub fn cmd_train(config_path: &Path) -> anyhow::Result<TrainReport> {
    let cfg = RunConfig::load(config_path)?;
    let tc = cfg.train_config()?;
    let (train_set, test_set) = cfg.datasets()?;
    if let Some(t) = &test_set {
        if t.d() != train_set.d() {
            bail!("test data has d={} features, training data has d={}", t.d(), train_set.d());
        }
    }

    let start = Instant::now();
    let out = train(&train_set.features, &train_set.labels, train_set.class_names.clone(), &tc)?;
    let train_seconds = start.elapsed().as_secs_f64();
    write_atomic(&cfg.output.model, out.model.to_json()?.as_bytes())?;

    let train_eval = evaluate(&out.model, &train_set)?;
    let test_eval = test_set.as_ref().map(|t| evaluate(&out.model, t)).transpose()?;
    let report = TrainReport {
        task: cfg.task.clone(),
        config: cfg.clone(),
        epochs: out.history,
        train_seconds,
        sigma_x: out.denoised.sigma_x,
        train: train_eval,
        test: test_eval,
    };
    if let Some(path) = &cfg.output.report {
        write_atomic(path, to_json(&report)?.as_bytes())?;
    }
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "{}: {} epochs, bound {:.6}, train accuracy {:.4}, tr(s) {:.3}",
        report.task, last.epoch, last.elbo, report.train.metrics.accuracy, train_seconds
    );
    if let Some(t) = &report.test {
        println!(
            "test accuracy {:.4}, macro F1 {:.4}, ts(s) {:.3}",
            t.metrics.accuracy, t.metrics.macro_f1, t.test_seconds
        );
    }
    println!("model written to {}", cfg.output.model.display());
    Ok(report)
}

fn load_data(path: &Path, format: Option<DataFormat>) -> anyhow::Result<FeatureDataset> {
    let format = format.unwrap_or_else(|| DataFormat::from_path(path));
    load_features(path, format).with_context(|| format!("loading {}", path.display()))
}

pub fn cmd_eval(model: &Path, data: &Path, format: Option<DataFormat>) -> anyhow::Result<EvalReport> {
    let model = load_model(model)?;
    let data = load_data(data, format)?;
    let report = evaluate(&model, &data)?;
    let undefined = report.metrics.undefined_classes();
    if !undefined.is_empty() {
        eprintln!(
            "warning: classes {undefined:?} have no test instances or no predictions; their undefined ratios are reported as 0"
        );
    }
    Ok(report)
}

fn print_metrics(r: &EvalReport) {
    let m = &r.metrics;
    println!("instances        {}", r.instances);
    println!("accuracy         {:.6}", m.accuracy);
    println!("macro precision  {:.6}", m.macro_precision);
    println!("macro recall     {:.6}", m.macro_recall);
    println!("macro f1         {:.6}", m.macro_f1);
    println!("ts(s)            {:.6}", r.test_seconds);
    println!("class  precision  recall  f1");
    for c in 0..m.f1.len() {
        println!("{c:<5}  {:.6}   {:.6}  {:.6}", m.precision[c], m.recall[c], m.f1[c]);
    }
    println!("confusion (rows true, columns predicted)");
    for row in &m.confusion {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>6}")).collect();
        println!("{}", cells.join(""));
    }
}

pub fn cmd_predict(model: &Path, data: &Path, out: &Path, format: Option<DataFormat>) -> anyhow::Result<()> {
    let model = load_model(model)?;
    let data = load_data(data, format)?;
    check_compatible(&model, &data)?;
    let probs = model.predict_proba(&data.features)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((0..model.num_classes()).map(|c| format!("p{c}")));
    wtr.write_record(&header)?;
    for p in &probs {
        let mut row = vec![crate::tree::argmax(p).to_string()];
        row.extend(p.iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    let bytes = wtr.into_inner().map_err(|e| anyhow!("{e}"))?;
    write_atomic(out, &bytes)
}

fn encode(data: &FeatureDataset, format: DataFormat) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    match format {
        DataFormat::Csv => write_csv(&mut buf, data)?,
        DataFormat::Packed => write_packed(&mut buf, data)?,
    }
    Ok(buf)
}

pub fn cmd_synth(
    spec: &BlobSpec,
    out: &Path,
    test_out: Option<&Path>,
    test_fraction: f64,
    format: Option<DataFormat>,
) -> anyhow::Result<()> {
    let data = synth_blobs(spec)?;
    let fmt = |p: &Path| format.unwrap_or_else(|| DataFormat::from_path(p));
    match test_out {
        Some(t) => {
            let (train, test) = split(&data, test_fraction, spec.seed)?;
            write_atomic(out, &encode(&train, fmt(out))?)?;
            write_atomic(t, &encode(&test, fmt(t))?)?;
        }
        None => write_atomic(out, &encode(&data, fmt(out))?)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
task = "blobs"
seed = 3

[data]
test_fraction = 0.5

[data.synth]
classes = 3
per_class = 20
dim = 8
separation = 6.0
noise_sigma = 0.2
seed = 1

[model]
epochs = 4

[output]
model = "model.json"
"#;

    #[test]
    fn defaults_fill_the_model_section() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        let tc = cfg.train_config().unwrap();
        assert_eq!(tc.epochs, 4);
        assert_eq!(tc.inducing, 2);
        assert_eq!(tc.sweeps_per_epoch, 5);
        assert_eq!(tc.denoiser, DenoiseMethod::SvdThreshold);
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_epochs_is_rejected() {
        let mut cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.model.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("epochs = 4", "epochs = 4\nepoch = 5");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
