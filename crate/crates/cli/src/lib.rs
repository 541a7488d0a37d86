//! Run configuration and subcommand implementations behind the `gvpt` binary.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use gated_vpt::analysis::{export_attention_maps, ratio_bar_chart_svg, SelectionReport};
use gated_vpt::data::{generate_depth_selective, load_dataset, save_dataset, split, DepthSelectiveSpec, LabeledDataset};
use gated_vpt::gradcheck::{GradCheckOptions, GradCheckReport};
use gated_vpt::prompt::{ForwardOptions, GateMode, TunedModel, TuningConfig, TuningMode};
use gated_vpt::train::{
    evaluate, inference_gates, model_gradcheck, run_ablation, train, AblationCell, AblationSetup, Evaluation,
    TrainConfig,
};
use gated_vpt::util::{derive_rng, sha256_hex};
use gated_vpt::vit::{init_params, load_checkpoint, load_checkpoint_for, save_checkpoint, ParamStore, ViTConfig};
use gated_vpt::{Error, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Caps the worker threads used by `compare`.
pub const THREADS_ENV: &str = "GVPT_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("gradient check failed: {failed} of {total} coordinates exceed tolerance {tolerance:e}")]
    GradCheckFailed { failed: usize, total: usize, tolerance: f64 },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 0 success, 1 usage or config, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::ConfigParse { .. } => 1,
            CliError::GradCheckFailed { .. } => 2,
            CliError::Core(e) => match e {
                Error::Io { .. } | Error::Format { .. } => 3,
                Error::NonFinite(_)
                | Error::NonFiniteLoss { .. }
                | Error::Diverged { .. }
                | Error::Nondeterministic { .. }
                | Error::DegenerateGates => 2,
                _ => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    #[serde(default)]
    pub seed: u64,
    /// Pretrained weights; when absent the backbone is initialized from `seed`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "default_max_params")]
    pub max_params: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
}

fn default_max_params() -> usize {
    5000
}
fn default_tolerance() -> f64 {
    1e-4
}
fn default_step() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    2
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            max_params: default_max_params(),
            tolerance: default_tolerance(),
            step: default_step(),
            batch: default_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub modes: Vec<TuningMode>,
    pub attention_shaping: Vec<bool>,
    #[serde(default = "default_gate_modes")]
    pub gate_modes: Vec<GateMode>,
}

fn default_gate_modes() -> Vec<GateMode> {
    vec![GateMode::Soft]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub n: usize,
    pub depth: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
    /// Fraction kept for `data.train`; the rest goes to `data.val`. 1 keeps everything.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_noise() -> f64 {
    0.5
}
fn default_train_fraction() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "ViTConfig::toy")]
    pub model: ViTConfig,
    pub tuning: TuningConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    pub output: OutputSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    pub compare: Option<CompareSection>,
    pub generate: Option<GenerateSection>,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text, path)
    }

    /// `--seed` replaces the training seed, which also seeds the tuning
    /// parameters and dataset generation.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.train.seed = s;
            if let Some(g) = &mut self.generate {
                g.seed = s;
            }
        }
        if let Some(dir) = out {
            self.output.dir = dir;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tuning.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of the resolved config text. The output directory is left out
    /// because it does not influence any result.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        sha256_hex(c.to_toml().as_bytes())
    }

    fn require_train_data(&self) -> Result<&Path> {
        self.data
            .train
            .as_deref()
            .ok_or_else(|| CliError::Usage("config has no data.train path".into()))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Creates the output directory and writes the resolved config, its
/// fingerprint, and the first line of the sidecar log.
fn prepare_output(cfg: &RunConfig, command: &str) -> Result<(PathBuf, String)> {
    let dir = cfg.output.dir.clone();
    create_dir(&dir)?;
    let fingerprint = cfg.fingerprint();
    write(&dir.join("config.toml"), cfg.to_toml())?;
    write(&dir.join("fingerprint.txt"), format!("{fingerprint}\n"))?;
    log(&dir, &format!("{command} started, config {fingerprint}"))?;
    Ok((dir, fingerprint))
}

/// Appends a timestamped line to `run.log`, the only output allowed to vary
/// between identical runs.
fn log(dir: &Path, message: &str) -> Result<()> {
    use std::io::Write;
    let path = dir.join("run.log");
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .and_then(|mut f| writeln!(f, "[{secs:.3}] {message}"))
        .map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn backbone(cfg: &RunConfig) -> Result<ParamStore> {
    match &cfg.backbone.checkpoint {
        Some(path) => Ok(load_checkpoint_for(path, &cfg.model)?.params),
        None => Ok(init_params(&cfg.model, cfg.backbone.seed)?),
    }
}

pub fn build_model(cfg: &RunConfig) -> Result<TunedModel> {
    let params = backbone(cfg)?;
    Ok(TunedModel::new(
        cfg.model.clone(),
        cfg.tuning.clone(),
        &params,
        cfg.backbone.seed,
        cfg.train.seed,
    )?)
}

fn load_data(cfg: &RunConfig) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
    let train = load_dataset(cfg.require_train_data()?)?;
    let val = cfg.data.val.as_deref().map(load_dataset).transpose()?;
    Ok((train, val))
}

#[derive(Serialize)]
struct EvalSummary {
    config_fingerprint: String,
    train: Evaluation,
    val: Option<Evaluation>,
}

#[derive(Serialize)]
struct TrainSummary {
    config_fingerprint: String,
    trainable: usize,
    first_step_loss: Option<f64>,
    train: Evaluation,
    val: Option<Evaluation>,
    gates: Vec<f64>,
    temperatures: Vec<f64>,
}

fn json(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("summary serializes") + "\n"
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let gen = cfg
        .generate
        .as_ref()
        .ok_or_else(|| CliError::Usage("config has no [generate] section".into()))?;
    let spec = DepthSelectiveSpec {
        n: gen.n,
        classes: cfg.model.num_classes,
        depth: gen.depth,
        image_size: cfg.model.image_size,
        channels: cfg.model.channels,
        patch_size: cfg.model.patch_size,
        noise: gen.noise,
    };
    let data = generate_depth_selective(gen.seed, &spec)?;
    let train_path = cfg.require_train_data()?;
    let (train, val) = if gen.train_fraction < 1.0 {
        let (a, b) = split(&data, gen.train_fraction, gen.seed)?;
        (a, Some(b))
    } else {
        (data, None)
    };
    save_dataset(train_path, &train)?;
    println!("wrote {} ({} samples, {})", train_path.display(), train.len(), train.fingerprint());
    if let Some(val) = val {
        let path = cfg
            .data
            .val
            .as_deref()
            .ok_or_else(|| CliError::Usage("generate.train_fraction < 1 needs a data.val path".into()))?;
        save_dataset(path, &val)?;
        println!("wrote {} ({} samples, {})", path.display(), val.len(), val.fingerprint());
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let (data, val) = load_data(cfg)?;
    let model = build_model(cfg)?;
    let (dir, fingerprint) = prepare_output(cfg, "train")?;
    let (trained, metrics) = train(&model, &cfg.train, &data, val.as_ref())?;
    save_checkpoint(dir.join("model.ckpt"), &trained.to_checkpoint())?;
    write(&dir.join("metrics.csv"), metrics.to_csv())?;
    let summary = TrainSummary {
        config_fingerprint: fingerprint.clone(),
        trainable: trained.trainable_count(),
        first_step_loss: metrics.first_step_loss,
        train: evaluate(&trained, &data, cfg.train.batch_size)?,
        val: val.as_ref().map(|v| evaluate(&trained, v, cfg.train.batch_size)).transpose()?,
        gates: metrics.final_gates.clone(),
        temperatures: metrics.final_temperatures.clone(),
    };
    write(&dir.join("summary.json"), json(&summary))?;
    if trained.tuning.mode == TuningMode::Gated {
        let report = SelectionReport::from_gates(&fingerprint, &inference_gates(&trained))?;
        write(&dir.join("selection.json"), report.to_json())?;
    }
    log(&dir, &format!("train finished in {:.1}s", metrics.wall_time_secs))?;
    println!(
        "train accuracy {:.4}, loss {:.4}; outputs in {}",
        summary.train.accuracy,
        summary.train.loss,
        dir.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let path = checkpoint.map_or_else(|| cfg.output.dir.join("model.ckpt"), Path::to_path_buf);
    let model = TunedModel::from_checkpoint(&load_checkpoint(&path)?)?;
    let (data, val) = load_data(cfg)?;
    let batch = cfg.train.batch_size;
    let summary = EvalSummary {
        config_fingerprint: cfg.fingerprint(),
        train: evaluate(&model, &data, batch)?,
        val: val.as_ref().map(|v| evaluate(&model, v, batch)).transpose()?,
    };
    let (dir, _) = prepare_output(cfg, "eval")?;
    write(&dir.join("eval.json"), json(&summary))?;
    println!("train accuracy {:.4}, loss {:.4}", summary.train.accuracy, summary.train.loss);
    if let Some(v) = summary.val {
        println!("val accuracy {:.4}, loss {:.4}", v.accuracy, v.loss);
    }
    Ok(())
}

/// Options of `analyze`, which works from a checkpoint rather than a config.
pub struct AnalyzeOptions<'a> {
    pub checkpoint: &'a Path,
    pub out: &'a Path,
    /// Dataset whose first image drives the attention maps; skipped when absent.
    pub data: Option<&'a Path>,
    /// Blocks to export; all blocks when empty.
    pub blocks: Vec<usize>,
}

pub fn cmd_analyze(opts: &AnalyzeOptions<'_>) -> Result<()> {
    let bytes = std::fs::read(opts.checkpoint).map_err(|e| Error::Io {
        path: opts.checkpoint.to_path_buf(),
        source: e,
    })?;
    let model = TunedModel::from_checkpoint(&load_checkpoint(opts.checkpoint)?)?;
    if model.tuning.mode != TuningMode::Gated {
        return Err(Error::Mode(format!(
            "analyze needs a gated checkpoint, {} is {}",
            opts.checkpoint.display(),
            model.tuning.mode
        ))
        .into());
    }
    create_dir(opts.out)?;
    let report = SelectionReport::from_gates(sha256_hex(&bytes), &inference_gates(&model))?;
    write(&opts.out.join("selection.json"), report.to_json())?;
    write(&opts.out.join("selection.svg"), ratio_bar_chart_svg(&report.ratios, 200.0))?;
    if let Some(path) = opts.data {
        let data = load_dataset(path)?;
        let (image, _) = data.batch(&[0])?;
        let blocks: Vec<usize> = if opts.blocks.is_empty() {
            (0..model.vit.num_blocks).collect()
        } else {
            opts.blocks.clone()
        };
        export_attention_maps(&model, &blocks, &image, opts.out.join("attention"))?;
    }
    println!("ratios {:?}, residual weight {:.3e}", report.ratios, report.residual_weight);
    Ok(())
}

fn gradcheck_inputs(cfg: &RunConfig) -> (Tensor, Vec<usize>) {
    let m = &cfg.model;
    let batch = cfg.gradcheck.batch.max(1);
    let mut rng = derive_rng(cfg.train.seed, "gradcheck.images");
    let data = (0..batch * m.image_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let images = Tensor::new([batch, m.image_size, m.image_size, m.channels], data).expect("positive dims");
    let labels = (0..batch).map(|i| i % m.num_classes).collect();
    (images, labels)
}

/// Plain-text report: a summary line, then the worst ten coordinates.
pub fn gradcheck_report_text(report: &GradCheckReport, fingerprint: &str) -> String {
    let mut s = format!(
        "config {fingerprint}\ncoordinates {}\ntolerance {:e}\nstep {:e}\nmax_rel_error {:.6e}\npassed {}\n\nworst 10\nlabel,analytic,numeric,rel_error,passed\n",
        report.entries.len(),
        report.options.tolerance,
        report.options.step,
        report.max_rel_error(),
        report.passed()
    );
    for e in report.worst(10) {
        s.push_str(&format!(
            "{},{:.12e},{:.12e},{:.6e},{}\n",
            e.label, e.analytic, e.numeric, e.rel_error, e.passed
        ));
    }
    s
}

pub fn cmd_gradcheck(cfg: &RunConfig, tolerance: Option<f64>) -> Result<()> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let count = model.trainable_count();
    if count > cfg.gradcheck.max_params {
        return Err(CliError::Usage(format!(
            "gradcheck perturbs every trainable coordinate; this config has {count}, above the cap of {} \
             (raise gradcheck.max_params or use a smaller model)",
            cfg.gradcheck.max_params
        )));
    }
    let (dir, fingerprint) = prepare_output(cfg, "gradcheck")?;
    let (images, labels) = gradcheck_inputs(cfg);
    let options = GradCheckOptions {
        step: cfg.gradcheck.step,
        tolerance: tolerance.unwrap_or(cfg.gradcheck.tolerance),
    };
    let report = model_gradcheck(&model, &images, &labels, &ForwardOptions::default(), options)?;
    write(&dir.join("gradcheck.txt"), gradcheck_report_text(&report, &fingerprint))?;
    println!(
        "{} coordinates, max relative error {:.3e}: {}",
        count,
        report.max_rel_error(),
        if report.passed() { "pass" } else { "FAIL" }
    );
    if !report.passed() {
        return Err(CliError::GradCheckFailed {
            failed: report.failures().count(),
            total: count,
            tolerance: report.options.tolerance,
        });
    }
    Ok(())
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
    }
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let grid = cfg
        .compare
        .as_ref()
        .ok_or_else(|| CliError::Usage("config has no [compare] section".into()))?;
    let cells = AblationCell::grid(&grid.modes, &grid.attention_shaping, &grid.gate_modes);
    if cells.is_empty() {
        return Err(CliError::Usage("the [compare] grid has no cells".into()));
    }
    let (data, val) = load_data(cfg)?;
    let params = backbone(cfg)?;
    let (dir, _) = prepare_output(cfg, "compare")?;
    let setup = AblationSetup {
        vit: cfg.model.clone(),
        tuning: cfg.tuning.clone(),
        train: cfg.train.clone(),
        backbone_seed: cfg.backbone.seed,
    };
    let start = Instant::now();
    let run = || run_ablation(&setup, &params, &cells, &data, val.as_ref());
    let table = match thread_cap()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    write(&dir.join("ablation.csv"), table.to_csv())?;
    log(&dir, &format!("compare finished {} cells in {:.1}s", cells.len(), start.elapsed().as_secs_f64()))?;
    for row in &table.rows {
        println!(
            "{} shaping={} gate={}: train accuracy {:.4}",
            row.cell.mode, row.cell.attention_shaping, row.cell.gate_mode, row.train_eval.accuracy
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[tuning]
mode = "gated"
num_prompts = 4

[train]
lr = 0.1
batch_size = 8
epochs = 1
seed = 3

[output]
dir = "out"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::parse(MINIMAL, Path::new("c.toml")).unwrap();
        assert_eq!(cfg.model, ViTConfig::toy());
        assert_eq!(cfg.gradcheck.max_params, 5000);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.tuning.gate_init, 5.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::parse(MINIMAL, Path::new("c.toml")).unwrap();
        cfg.apply_overrides(Some(9), Some("elsewhere".into()));
        let back = RunConfig::parse(&cfg.to_toml(), Path::new("r.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.seed, 9);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let text = MINIMAL.replace("num_prompts = 4", "num_prompts = 4\ngaet_init = 3");
        let err = RunConfig::parse(&text, Path::new("c.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gaet_init") && msg.contains("line"), "{msg}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(Error::NonFiniteLoss { epoch: 1, step: 0, loss: f64::NAN }).exit_code(), 2);
        let io = Error::Io {
            path: "x".into(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        };
        assert_eq!(CliError::from(io).exit_code(), 3);
        assert_eq!(CliError::from(Error::Mode("m".into())).exit_code(), 1);
        let fail = CliError::GradCheckFailed {
            failed: 1,
            total: 2,
            tolerance: 1e-4,
        };
        assert_eq!(fail.exit_code(), 2);
    }
}
