//! Command-line pipeline driver: data generation, seen training, importance
//! extraction, map fitting, weight transfer, GZSL evaluation, explanations,
//! and the sweep experiments. Every command is deterministic given the same
//! config and seed, and each writes a machine-readable artifact plus a short
//! human-readable summary on stdout.

use crate::array::Array;
use crate::explain::{
    bbox_energy_fraction, explanation_fidelity, gradcam, neuron_name, textual_explanation,
    write_explanations_json, TextualExplanation,
};
use crate::importance::{importance_dataset, write_importance_csv, ImportanceVector, Source};
use crate::knowmap::{
    fit_forward_map, fit_inverse_map, load_map, predict_importance, save_map, FitConfig,
    KnowledgeSet, LinearMap, Modality,
};
use crate::model::{
    expand_head, load_checkpoint, save_checkpoint, train_seen, CheckpointMeta, LayerKind, Network,
    NetworkSpec, TrainConfig,
};
use crate::rng::SplitMix64;
use crate::synthbench::{
    audit_split, class_normalized_accuracy, generate_dataset, harmonic_mean, load_manifest,
    load_split, save_manifest, save_split, split_gzsl, ClassIndex, DatasetManifest, GlyphBox,
    GzslReport, GzslSplit, Role,
};
use crate::transfer::{
    recover_seen_weights, sample_probes, transfer_weights, transfer_weights_with_mean,
    write_trace_csv, ProbeMode, ProbePool, TransferConfig, TransferTarget,
};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write as _;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Bad config file, bad flag value, failed validation. Exit 2.
    Config(String),
    /// An upstream artifact this command depends on does not exist. Exit 3.
    MissingArtifact(PathBuf, &'static str),
    /// A loss or metric went non-finite. Exit 4.
    Numeric(String),
    /// Everything else. Exit 1.
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(..) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::MissingArtifact(path, produced_by) => write!(
                f,
                "missing prerequisite artifact {} (produced by `{produced_by}`)",
                path.display()
            ),
            CliError::Numeric(msg) => write!(f, "numerical failure: {msg}"),
            CliError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

impl From<crate::transfer::TransferError> for CliError {
    fn from(e: crate::transfer::TransferError) -> Self {
        match e {
            crate::transfer::TransferError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

macro_rules! impl_other_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self { CliError::Other(e.to_string()) }
        })*
    };
}
impl_other_from!(
    crate::model::ModelError,
    crate::synthbench::BenchError,
    crate::knowmap::KnowmapError,
    crate::importance::ImportanceError,
    crate::explain::ExplainError,
    std::io::Error
);

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

fn default_out() -> String {
    "runs/default".into()
}
fn default_seed() -> u64 {
    7
}
fn default_layer() -> String {
    "conv3".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataCfg {
    pub classes: usize,
    pub attributes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub unseen: usize,
    pub heldout: usize,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg { classes: 50, attributes: 16, images_per_class: 100, image_size: 32, unseen: 10, heldout: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCfg {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg { epochs: 8, lr: 1e-3, batch: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapCfg {
    pub lr: f64,
    pub max_epochs: usize,
}

impl Default for MapCfg {
    fn default() -> Self {
        MapCfg { lr: 1e-2, max_epochs: 2000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferCfg {
    /// Anchor-regularizer strength. The default is the best-H operating
    /// point at the reference layer: weaker values let unseen row norms
    /// inflate and crush seen-class accuracy. run-all replaces it with a
    /// validation-tuned value for the main transfer.
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub probes: usize,
    pub probe_mode: String,
    pub max_iters: usize,
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for TransferCfg {
    fn default() -> Self {
        TransferCfg {
            lambda: 3e-1,
            lr: 1e-3,
            batch: 32,
            probes: 512,
            probe_mode: "generic".into(),
            max_iters: 400,
            patience: 40,
            min_rel_improvement: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverCfg {
    pub probes: usize,
    pub max_iters: usize,
    /// Recovery starts from small random rows far from the optimum, so it
    /// takes a hotter learning rate than regular transfer.
    pub lr: f64,
    /// Importance layer for the recovery experiment. At the pooled-feature
    /// layer the observed importance of a head row equals the row itself, so
    /// row directions are exactly recoverable; deeper capture layers blur the
    /// correspondence through activation statistics.
    pub layer: String,
    pub eps_levels: Vec<f64>,
}

impl Default for RecoverCfg {
    fn default() -> Self {
        RecoverCfg {
            probes: 128,
            max_iters: 500,
            lr: 1e-2,
            layer: "gap".into(),
            eps_levels: vec![0.0, 10.0, 1000.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepCfg {
    /// Grid for the sweep-lambda report; wider than the tuning grid so the
    /// over-regularized collapse regime is visible.
    pub lambda_grid: Vec<f64>,
    /// Grid searched when run-all tunes lambda on pseudo-unseen validation.
    pub tune_grid: Vec<f64>,
    pub probe_modes: Vec<String>,
    /// Capture layers for sweep-layer; empty means all conv layers plus the
    /// pooled-feature layer (the pure knowledge-to-weights analogue).
    pub layers: Vec<String>,
    /// Iteration cap for the per-lambda validation grid search in run-all.
    pub grid_max_iters: usize,
}

impl Default for SweepCfg {
    fn default() -> Self {
        SweepCfg {
            lambda_grid: vec![0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            tune_grid: vec![0.0, 1e-5, 1e-4, 1e-3, 1e-2],
            probe_modes: vec!["noise".into(), "generic".into(), "seen".into()],
            layers: vec![],
            grid_max_iters: 400,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainCfg {
    /// Top-k size for textual explanations; 0 means the benchmark's
    /// active-attribute count.
    pub k: usize,
    pub max_instances: usize,
    pub heatmap_files: usize,
}

impl Default for ExplainCfg {
    fn default() -> Self {
        ExplainCfg { k: 0, max_instances: 60, heatmap_files: 12 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: String,
    pub seed: u64,
    /// Capture layer for importances and transfer.
    pub layer: String,
    pub data: DataCfg,
    pub train: TrainCfg,
    pub map: MapCfg,
    pub transfer: TransferCfg,
    pub recover: RecoverCfg,
    pub sweeps: SweepCfg,
    pub explain: ExplainCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: default_out(),
            seed: default_seed(),
            layer: default_layer(),
            data: DataCfg::default(),
            train: TrainCfg::default(),
            map: MapCfg::default(),
            transfer: TransferCfg::default(),
            recover: RecoverCfg::default(),
            sweeps: SweepCfg::default(),
            explain: ExplainCfg::default(),
        }
    }
}

fn parse_probe_mode(s: &str) -> Result<ProbeMode> {
    match s {
        "noise" => Ok(ProbeMode::Noise),
        "generic" => Ok(ProbeMode::Generic),
        "seen" => Ok(ProbeMode::Seen),
        other => Err(CliError::Config(format!(
            "probe mode must be noise|generic|seen, got {other:?}"
        ))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.classes < 2 || self.data.unseen == 0 {
            return Err(CliError::Config("need >= 2 classes and >= 1 unseen".into()));
        }
        if self.data.unseen + self.data.heldout >= self.data.classes {
            return Err(CliError::Config("unseen + heldout must be < classes".into()));
        }
        if self.data.attributes == 0 || self.data.attributes > 16 {
            return Err(CliError::Config("attributes must be in 1..=16".into()));
        }
        if self.data.image_size < 16 {
            return Err(CliError::Config("image_size must be >= 16".into()));
        }
        if self.transfer.lambda < 0.0 {
            return Err(CliError::Config("transfer.lambda must be >= 0".into()));
        }
        parse_probe_mode(&self.transfer.probe_mode)?;
        for m in &self.sweeps.probe_modes {
            parse_probe_mode(m)?;
        }
        if self.sweeps.lambda_grid.is_empty()
            || self.sweeps.tune_grid.is_empty()
            || self.sweeps.probe_modes.is_empty()
            || self.recover.eps_levels.is_empty()
        {
            return Err(CliError::Config("sweep grids must be non-empty".into()));
        }
        if self.transfer.probes == 0 || self.recover.probes == 0 {
            return Err(CliError::Config("probe counts must be >= 1".into()));
        }
        Ok(())
    }

    fn transfer_config(&self) -> Result<TransferConfig> {
        Ok(TransferConfig {
            lambda: self.transfer.lambda,
            lr: self.transfer.lr,
            batch: self.transfer.batch,
            probe_mode: parse_probe_mode(&self.transfer.probe_mode)?,
            min_rel_improvement: self.transfer.min_rel_improvement,
            patience: self.transfer.patience,
            max_iters: self.transfer.max_iters,
            layer: self.layer.clone(),
            seed: self.seed,
            reg_squared: false,
        })
    }

    fn sha256(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Artifact paths
// ---------------------------------------------------------------------------

struct Paths {
    out: PathBuf,
}

impl Paths {
    fn new(cfg: &RunConfig) -> Paths {
        Paths { out: PathBuf::from(&cfg.out) }
    }
    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }
    fn split(&self) -> PathBuf {
        self.out.join("split.json")
    }
    fn attributes(&self) -> PathBuf {
        self.data_dir().join("attributes.csv")
    }
    fn checkpoint_seen(&self) -> PathBuf {
        self.out.join("checkpoint_seen.niwt")
    }
    fn importance(&self) -> PathBuf {
        self.out.join("importance.csv")
    }
    fn map_forward(&self) -> PathBuf {
        self.out.join("map_forward.niwt")
    }
    fn map_inverse(&self) -> PathBuf {
        self.out.join("map_inverse.niwt")
    }
    fn checkpoint_full(&self) -> PathBuf {
        self.out.join("checkpoint_full.niwt")
    }
    fn trace(&self) -> PathBuf {
        self.out.join("trace.csv")
    }
    fn metrics(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }
    fn sweep(&self, name: &str) -> PathBuf {
        self.out.join(format!("sweep_{name}.csv"))
    }
    fn gridsearch(&self) -> PathBuf {
        self.out.join("gridsearch.csv")
    }
    fn explanations(&self) -> PathBuf {
        self.out.join("explanations.json")
    }
    fn heatmaps(&self) -> PathBuf {
        self.out.join("heatmaps")
    }
    fn explain_metrics(&self) -> PathBuf {
        self.out.join("explain_metrics.csv")
    }
    fn neuron_names(&self) -> PathBuf {
        self.out.join("neuron_names.csv")
    }
    fn train_log(&self) -> PathBuf {
        self.out.join("train_log.csv")
    }
    fn run_meta(&self) -> PathBuf {
        self.out.join("run_meta.json")
    }
}

fn require(path: PathBuf, produced_by: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact(path, produced_by))
    }
}

// ---------------------------------------------------------------------------
// CLI surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "niwt", version, about = "Importance-guided zero-shot weight transfer pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Capture layer for importances and transfer.
    #[arg(long, global = true)]
    layer: Option<String>,
    /// Regularizer strength for transfer.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true, value_name = "noise|generic|seen")]
    probe_mode: Option<String>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset and GZSL split.
    GenData,
    /// Train the seen-class network.
    TrainSeen,
    /// Extract per-instance neuron importances on seen training images.
    ExtractImportance,
    /// Fit the knowledge<->importance linear maps.
    FitMap,
    /// Synthesize unseen head rows from predicted importances.
    Transfer,
    /// Evaluate generalized zero-shot accuracy of the full head.
    EvalGzsl,
    /// Produce Grad-CAM heatmaps, textual explanations, and neuron names.
    Explain,
    /// Transfer + evaluate across the lambda grid.
    SweepLambda,
    /// Oracle seen-weight recovery across noise levels.
    SweepNoise,
    /// Transfer + evaluate at each capture layer.
    SweepLayer,
    /// Transfer + evaluate for each probe source.
    SweepProbes,
    /// Full pipeline: data, training, maps, validated transfer, evaluation,
    /// lambda sweep, and explanations.
    RunAll,
}

/// Entry point; returns a process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(layer) = &cli.layer {
        cfg.layer = layer.clone();
    }
    if let Some(lambda) = cli.lambda {
        cfg.transfer.lambda = lambda;
    }
    if let Some(mode) = &cli.probe_mode {
        cfg.transfer.probe_mode = mode.clone();
    }
    if let Some(out) = &cli.out {
        cfg.out = out.display().to_string();
    }
    cfg.validate()?;
    if let Some(n) = cli.threads {
        // Ignore failure: the global pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&cfg.out)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::TrainSeen => cmd_train_seen(&cfg),
        Command::ExtractImportance => cmd_extract_importance(&cfg),
        Command::FitMap => cmd_fit_map(&cfg),
        Command::Transfer => cmd_transfer(&cfg),
        Command::EvalGzsl => cmd_eval_gzsl(&cfg),
        Command::Explain => cmd_explain(&cfg),
        Command::SweepLambda => cmd_sweep_lambda(&cfg),
        Command::SweepNoise => cmd_sweep_noise(&cfg),
        Command::SweepLayer => cmd_sweep_layer(&cfg),
        Command::SweepProbes => cmd_sweep_probes(&cfg),
        Command::RunAll => cmd_run_all(&cfg),
    }
}

// ---------------------------------------------------------------------------
// Shared loading helpers
// ---------------------------------------------------------------------------

fn load_data(cfg: &RunConfig) -> Result<(DatasetManifest, GzslSplit)> {
    let paths = Paths::new(cfg);
    let dir = paths.data_dir();
    require(dir.join("manifest.json"), "gen-data")?;
    let manifest = load_manifest(&dir)?;
    let split_path = require(paths.split(), "gen-data")?;
    let split = load_split(&split_path)?;
    Ok((manifest, split))
}

fn load_seen_net(cfg: &RunConfig) -> Result<(Network, CheckpointMeta)> {
    let path = require(Paths::new(cfg).checkpoint_seen(), "train-seen")?;
    Ok(load_checkpoint(&path)?)
}

fn load_full_net(cfg: &RunConfig) -> Result<(Network, CheckpointMeta)> {
    let path = require(Paths::new(cfg).checkpoint_full(), "transfer")?;
    Ok(load_checkpoint(&path)?)
}

fn load_attributes(cfg: &RunConfig) -> Result<KnowledgeSet> {
    let path = require(Paths::new(cfg).attributes(), "gen-data")?;
    Ok(KnowledgeSet::from_csv(&path, Modality::Attributes)?)
}

fn probe_pool(
    cfg: &RunConfig,
    mode: ProbeMode,
    count: usize,
    manifest: &DatasetManifest,
    split: &GzslSplit,
) -> Result<ProbePool> {
    Ok(sample_probes(
        mode,
        count,
        manifest.image_size,
        cfg.seed ^ 0x70726f6265,
        Some((manifest, split)),
    )?)
}

/// Per-instance (importance, knowledge, class) pairs read back from the
/// importance CSV.
fn read_importance_csv(path: &Path) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let inst = fields.next().unwrap_or_default();
        let class = fields.next().unwrap_or_default();
        let _layer = fields.next();
        let Ok(inst) = inst.parse::<usize>() else {
            continue; // class-aggregate rows carry no instance id
        };
        let class: usize = class
            .parse()
            .map_err(|_| CliError::Other(format!("{}:{}: bad class id", path.display(), i + 1)))?;
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CliError::Other(format!("{}:{}: bad value", path.display(), i + 1)))?;
        out.push((inst, class, values));
    }
    if out.is_empty() {
        return Err(CliError::Other(format!("{} holds no instance rows", path.display())));
    }
    Ok(out)
}

fn check_finite_report(name: &str, r: &GzslReport) -> Result<()> {
    if !(r.acc_u.is_finite() && r.acc_s.is_finite() && r.h.is_finite()) {
        return Err(CliError::Numeric(format!(
            "{name}: non-finite metric (acc_u={}, acc_s={}, h={})",
            r.acc_u, r.acc_s, r.h
        )));
    }
    Ok(())
}

/// Print rows of (setting, report) in the paper's table layout.
fn emit_report(title: &str, rows: &[(String, GzslReport)]) {
    println!("{title}");
    println!("{:<16} {:>8} {:>8} {:>8}", "setting", "Acc_U", "Acc_S", "H");
    for (name, r) in rows {
        println!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4}",
            name, r.acc_u, r.acc_s, r.h
        );
    }
}

fn write_metric_rows(path: &Path, header: &str, rows: &[(String, GzslReport)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{header}")?;
    for (name, r) in rows {
        writeln!(f, "{},{},{},{}", name, r.acc_u, r.acc_s, r.h)?;
    }
    f.flush()?;
    Ok(())
}

fn write_run_meta(cfg: &RunConfig) -> Result<()> {
    let meta = serde_json::json!({
        "seed": cfg.seed,
        "config_sha256": cfg.sha256(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(
        Paths::new(cfg).run_meta(),
        serde_json::to_string_pretty(&meta).expect("serializable"),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let manifest = generate_dataset(
        cfg.data.classes,
        cfg.data.attributes,
        cfg.data.images_per_class,
        cfg.data.image_size,
        cfg.seed,
    )?;
    let split = split_gzsl(&manifest, cfg.data.unseen, cfg.data.heldout, cfg.seed)?;
    audit_split(&manifest, &split)?;
    save_manifest(&manifest, &paths.data_dir())?;
    save_split(&split, &paths.split())?;
    write_run_meta(cfg)?;
    println!(
        "gen-data: {} classes ({} seen / {} unseen / {} held-out), {} images -> {}",
        manifest.num_classes,
        split.seen.len(),
        split.unseen.len(),
        split.heldout.len(),
        manifest.records.len(),
        paths.data_dir().display()
    );
    Ok(())
}

/// (image, head-row label) pairs for the given role, seen classes only.
fn role_instances<'a>(
    manifest: &'a DatasetManifest,
    split: &GzslSplit,
    index: &ClassIndex,
    role: Role,
) -> Vec<(usize, &'a Array, usize)> {
    split
        .instances_with_role(role)
        .into_iter()
        .filter_map(|id| {
            let class = manifest.records[id].class_id;
            index.row_of(class).map(|row| (id, manifest.image(id), row))
        })
        .collect()
}

fn cmd_train_seen(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let (manifest, split) = load_data(cfg)?;
    let index = ClassIndex::seen_only(&split);
    let mut net = Network::build(NetworkSpec::default_desk(manifest.image_size, index.len()), cfg.seed)?;
    let train: Vec<(&Array, usize)> = role_instances(&manifest, &split, &index, Role::Train)
        .into_iter()
        .map(|(_, img, row)| (img, row))
        .collect();
    let val: Vec<(&Array, usize)> = role_instances(&manifest, &split, &index, Role::Val)
        .into_iter()
        .map(|(_, img, row)| (img, row))
        .collect();
    let report = train_seen(
        &mut net,
        &train,
        &val,
        &TrainConfig {
            epochs: cfg.train.epochs,
            lr: cfg.train.lr,
            batch: cfg.train.batch,
            seed: cfg.seed,
            freeze_below: None,
        },
    )?;
    let meta = CheckpointMeta {
        seed: cfg.seed,
        epochs: cfg.train.epochs,
        final_seen_acc: report.final_val_accuracy,
        head_classes: index.order().to_vec(),
    };
    save_checkpoint(&net, &meta, &paths.checkpoint_seen())?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(paths.train_log())?);
    writeln!(log, "epoch,mean_loss,val_accuracy")?;
    for e in &report.per_epoch {
        writeln!(log, "{},{},{}", e.epoch, e.mean_loss, e.val_accuracy)?;
    }
    log.flush()?;
    println!(
        "train-seen: {} epochs on {} images, val accuracy {:.4} -> {}",
        cfg.train.epochs,
        train.len(),
        report.final_val_accuracy,
        paths.checkpoint_seen().display()
    );
    Ok(())
}

/// Instance importances at `layer` on seen training images, with global class
/// ids restored for downstream grouping.
fn seen_train_importances(
    cfg: &RunConfig,
    net: &Network,
    layer: &str,
    manifest: &DatasetManifest,
    split: &GzslSplit,
) -> Result<Vec<ImportanceVector>> {
    let index = ClassIndex::seen_only(split);
    let instances = role_instances(manifest, split, &index, Role::Train);
    let mut vectors = importance_dataset(net, layer, &instances)?;
    for v in &mut vectors {
        v.class_id = index.class_of(v.class_id);
    }
    let _ = cfg;
    Ok(vectors)
}

fn cmd_extract_importance(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let (manifest, split) = load_data(cfg)?;
    let (net, _) = load_seen_net(cfg)?;
    if net.spec.layer(&cfg.layer).is_none() {
        return Err(CliError::Config(format!("unknown layer {:?}", cfg.layer)));
    }
    let vectors = seen_train_importances(cfg, &net, &cfg.layer, &manifest, &split)?;
    write_importance_csv(&paths.importance(), &vectors)?;
    println!(
        "extract-importance: {} vectors at {} -> {}",
        vectors.len(),
        cfg.layer,
        paths.importance().display()
    );
    Ok(())
}

fn fit_both_maps(
    cfg: &RunConfig,
    rows: &[(usize, usize, Vec<f64>)],
    knowledge: &KnowledgeSet,
    heldout: &[usize],
) -> Result<(LinearMap, LinearMap)> {
    let pairs: Vec<(&[f64], &[f64], usize)> = rows
        .iter()
        .map(|(_, class, values)| {
            let k = knowledge
                .get(*class)
                .ok_or_else(|| CliError::Other(format!("no knowledge vector for class {class}")))?;
            Ok((values.as_slice(), k.values.as_slice(), *class))
        })
        .collect::<Result<_>>()?;
    let fit_cfg = FitConfig { lr: cfg.map.lr, max_epochs: cfg.map.max_epochs, seed: cfg.seed };
    let (forward, _) = fit_forward_map(&pairs, heldout, &fit_cfg)?;
    let (inverse, _) = fit_inverse_map(&pairs, heldout, &fit_cfg)?;
    Ok((forward, inverse))
}

fn cmd_fit_map(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let (_, split) = load_data(cfg)?;
    let knowledge = load_attributes(cfg)?;
    let csv = require(paths.importance(), "extract-importance")?;
    let rows = read_importance_csv(&csv)?;
    let (forward, inverse) = fit_both_maps(cfg, &rows, &knowledge, &split.heldout)?;
    save_map(&forward, &paths.map_forward())?;
    save_map(&inverse, &paths.map_inverse())?;
    println!(
        "fit-map: forward held-out rho {:.4} ({} epochs), inverse rho {:.4} ({} epochs)",
        forward.meta.best_rho, forward.meta.epochs, inverse.meta.best_rho, inverse.meta.epochs
    );
    Ok(())
}

/// Predicted importance targets for `classes`, through the forward map.
fn predicted_targets(
    map: &LinearMap,
    knowledge: &KnowledgeSet,
    index: &ClassIndex,
    classes: &[usize],
) -> Result<Vec<TransferTarget>> {
    classes
        .iter()
        .map(|&class| {
            let k = knowledge
                .get(class)
                .ok_or_else(|| CliError::Other(format!("no knowledge vector for class {class}")))?;
            let row = index
                .row_of(class)
                .ok_or_else(|| CliError::Other(format!("class {class} has no head row")))?;
            Ok(TransferTarget {
                head_row: row,
                class_id: class,
                importance: predict_importance(map, &k.values)?,
            })
        })
        .collect()
}

fn expanded_net(cfg: &RunConfig, net: &Network, split: &GzslSplit) -> Result<Network> {
    Ok(expand_head(net, split.unseen.len(), cfg.seed)?)
}

fn cmd_transfer(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let (manifest, split) = load_data(cfg)?;
    let (net, _) = load_seen_net(cfg)?;
    let map_path = require(paths.map_forward(), "fit-map")?;
    let map = load_map(&map_path)?;
    let knowledge = load_attributes(cfg)?;
    let index = ClassIndex::new(&split);
    let expanded = expanded_net(cfg, &net, &split)?;
    let targets = predicted_targets(&map, &knowledge, &index, &split.unseen)?;
    let tcfg = cfg.transfer_config()?;
    let probes = probe_pool(cfg, tcfg.probe_mode, cfg.transfer.probes, &manifest, &split)?;
    let (full, trace) = transfer_weights(&expanded, index.num_seen(), &targets, &probes, &tcfg)?;
    let meta = CheckpointMeta {
        seed: cfg.seed,
        epochs: 0,
        final_seen_acc: 0.0,
        head_classes: index.order().to_vec(),
    };
    save_checkpoint(&full, &meta, &paths.checkpoint_full())?;
    write_trace_csv(&paths.trace(), &trace)?;
    println!(
        "transfer: {} unseen rows at {} (lambda {}) -> {}",
        targets.len(),
        tcfg.layer,
        tcfg.lambda,
        paths.checkpoint_full().display()
    );
    Ok(())
}

fn cmd_eval_gzsl(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let (manifest, split) = load_data(cfg)?;
    let (net, _) = load_full_net(cfg)?;
    let index = ClassIndex::new(&split);
    let report = crate::synthbench::evaluate_gzsl(&net, &manifest, &split, &index)?;
    check_finite_report("eval-gzsl", &report)?;
    let rows = vec![("default".to_string(), report)];
    write_metric_rows(&paths.metrics(), "setting,acc_u,acc_s,h", &rows)?;
    emit_report("eval-gzsl (test split, full label space)", &rows);
    write_run_meta(cfg)?;
    Ok(())
}

// --- explanations ----------------------------------------------------------

fn deepest_conv(net: &Network, preferred: &str) -> String {
    if matches!(net.spec.layer(preferred).map(|l| &l.kind), Some(LayerKind::Conv { .. })) {
        preferred.to_string()
    } else {
        net.spec.conv_layer_names().last().cloned().expect("desk nets have conv layers")
    }
}

/// Map a capture-layer cell's center into image pixel coordinates.
fn cell_center(cell: usize, cells: usize, pixels: usize) -> usize {
    (((cell as f64 + 0.5) * pixels as f64 / cells as f64) as usize).min(pixels - 1)
}

fn cmd_explain(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let (manifest, split) = load_data(cfg)?;
    let (net, _) = load_full_net(cfg)?;
    let inv_path = require(paths.map_inverse(), "fit-map")?;
    let inverse = load_map(&inv_path)?;
    let knowledge = load_attributes(cfg)?;
    let names = knowledge.names.clone();
    let index = ClassIndex::new(&split);
    let layer = deepest_conv(&net, &cfg.layer);
    let k = if cfg.explain.k == 0 {
        crate::synthbench::ACTIVE_PER_CLASS.min(manifest.d_k)
    } else {
        cfg.explain.k.min(manifest.d_k)
    };
    let (_, img_h, img_w) = manifest.image_size;

    // Correctly classified unseen test instances.
    let mut sampled: Vec<usize> = Vec::new();
    let unseen_test: Vec<usize> = split
        .instances_with_role(Role::Test)
        .into_iter()
        .filter(|&id| split.unseen.contains(&manifest.records[id].class_id))
        .collect();
    for chunk in unseen_test.chunks(256) {
        let imgs: Vec<&Array> = chunk.iter().map(|&id| manifest.image(id)).collect();
        for (row, &id) in net.predict(&imgs)?.into_iter().zip(chunk) {
            if index.class_of(row) == manifest.records[id].class_id {
                sampled.push(id);
            }
        }
    }
    sampled.truncate(cfg.explain.max_instances);
    if sampled.is_empty() {
        return Err(CliError::Other(
            "no correctly classified unseen test instances to explain".into(),
        ));
    }

    std::fs::create_dir_all(paths.heatmaps())?;
    let mut heatmaps = Vec::with_capacity(sampled.len());
    let mut records: Vec<(usize, TextualExplanation)> = Vec::new();
    let mut ground_truth: Vec<Vec<u8>> = Vec::new();
    for (i, &id) in sampled.iter().enumerate() {
        let class = manifest.records[id].class_id;
        let row = index.row_of(class).expect("class indexed");
        let hm = gradcam(&net, &layer, manifest.image(id), row, id)?.upsample(img_h, img_w);
        if i < cfg.explain.heatmap_files {
            hm.write_pgm(&paths.heatmaps().join(format!("instance_{id}.pgm")))?;
        }
        heatmaps.push(hm);
        let alpha = crate::importance::neuron_importance(&net, &layer, manifest.image(id), row)?;
        let expl = textual_explanation(&inverse, &alpha.values, class, k, names.as_deref())?;
        records.push((id, expl));
        ground_truth.push(
            manifest.classes[class]
                .attributes
                .iter()
                .enumerate()
                .filter(|&(_, &v)| v != 0)
                .map(|(j, _)| j as u8)
                .collect(),
        );
    }

    // Localization: real pairs vs mismatched (rotated) heatmap-box pairs.
    let n = sampled.len();
    let mut real = 0.0;
    let mut shuffled = 0.0;
    for (i, &id) in sampled.iter().enumerate() {
        real += bbox_energy_fraction(&heatmaps[i], &manifest.records[id].boxes) / n as f64;
        let other = sampled[(i + 1) % n];
        shuffled += bbox_energy_fraction(&heatmaps[i], &manifest.records[other].boxes) / n as f64;
    }

    let explanations: Vec<TextualExplanation> =
        records.iter().map(|(_, e)| e.clone()).collect();
    let fidelity = explanation_fidelity(&explanations, &ground_truth)?;
    write_explanations_json(&paths.explanations(), &records)?;

    // Neuron names plus the box-overlap diagnostic: does the named
    // attribute's glyph region contain the neuron's strongest activation?
    let width = net.spec.layer_width(&layer).expect("conv layer has width");
    let mut names_csv = std::io::BufWriter::new(std::fs::File::create(paths.neuron_names())?);
    writeln!(names_csv, "neuron,attribute,name,box_overlap")?;
    let mut overlap_hits = 0usize;
    let mut overlap_total = 0usize;
    let mut attr_example: Vec<Option<usize>> = vec![None; manifest.d_k];
    for &id in &unseen_test {
        for b in &manifest.records[id].boxes {
            let slot = &mut attr_example[b.attribute as usize];
            if slot.is_none() {
                *slot = Some(id);
            }
        }
    }
    let mut activation_cache: std::collections::BTreeMap<usize, Array> =
        std::collections::BTreeMap::new();
    for neuron in 0..width {
        let (attr, name) = neuron_name(&inverse, neuron, names.as_deref())?;
        let overlap = match attr_example.get(attr).copied().flatten() {
            Some(id) => {
                let act = match activation_cache.get(&id) {
                    Some(a) => a.clone(),
                    None => {
                        let a = captured_activation(&net, &layer, manifest.image(id))?;
                        activation_cache.insert(id, a.clone());
                        a
                    }
                };
                let shape = act.shape();
                let (c, h, w) = (shape[1], shape[2], shape[3]);
                debug_assert!(neuron < c);
                let plane = &act.data()[neuron * h * w..(neuron + 1) * h * w];
                let peak = plane
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let (pr, pc) = (cell_center(peak / w, h, img_h), cell_center(peak % w, w, img_w));
                let hit = manifest.records[id]
                    .boxes
                    .iter()
                    .any(|b: &GlyphBox| {
                        b.attribute as usize == attr
                            && pr >= b.row0
                            && pr < b.row1
                            && pc >= b.col0
                            && pc < b.col1
                    });
                overlap_total += 1;
                if hit {
                    overlap_hits += 1;
                }
                hit as u8
            }
            None => 0,
        };
        writeln!(names_csv, "{neuron},{attr},{name},{overlap}")?;
    }
    names_csv.flush()?;
    let overlap_frac = if overlap_total > 0 {
        overlap_hits as f64 / overlap_total as f64
    } else {
        0.0
    };

    let mut metrics = std::io::BufWriter::new(std::fs::File::create(paths.explain_metrics())?);
    writeln!(metrics, "metric,value")?;
    writeln!(metrics, "instances,{n}")?;
    writeln!(metrics, "k,{k}")?;
    writeln!(metrics, "bbox_energy_real,{real}")?;
    writeln!(metrics, "bbox_energy_shuffled,{shuffled}")?;
    writeln!(metrics, "explanation_fidelity,{fidelity}")?;
    writeln!(metrics, "neuron_name_box_overlap,{overlap_frac}")?;
    metrics.flush()?;
    println!(
        "explain: {n} instances at {layer}; bbox energy {real:.3} vs shuffled {shuffled:.3}; fidelity@{k} {fidelity:.3}; neuron-name overlap {overlap_frac:.3}"
    );
    Ok(())
}

/// Captured activation [1, c, h, w] of `layer` on one image.
fn captured_activation(net: &Network, layer: &str, image: &Array) -> Result<Array> {
    let g = crate::autodiff::Graph::new();
    let batch = g.constant(&crate::model::stack_images(&[image], net.spec.input)?);
    let params = net.graph_params(&g, |_| false);
    let trace = net.forward_with(&g, &batch, &params, Some(layer))?;
    Ok(trace.captured.expect("capture layer checked").value())
}

// --- sweeps ----------------------------------------------------------------

/// Shared scaffolding for sweeps that re-run transfer with one knob changed.
struct TransferLab {
    manifest: DatasetManifest,
    split: GzslSplit,
    index: ClassIndex,
    expanded: Network,
    forward: LinearMap,
    knowledge: KnowledgeSet,
}

impl TransferLab {
    fn load(cfg: &RunConfig) -> Result<TransferLab> {
        let paths = Paths::new(cfg);
        let (manifest, split) = load_data(cfg)?;
        let (net, _) = load_seen_net(cfg)?;
        let map_path = require(paths.map_forward(), "fit-map")?;
        let forward = load_map(&map_path)?;
        let knowledge = load_attributes(cfg)?;
        let index = ClassIndex::new(&split);
        let expanded = expanded_net(cfg, &net, &split)?;
        Ok(TransferLab { manifest, split, index, expanded, forward, knowledge })
    }

    /// Transfer the unseen rows under `tcfg` and evaluate GZSL on test.
    fn run(&self, cfg: &RunConfig, tcfg: &TransferConfig, probes: &ProbePool) -> Result<GzslReport> {
        let targets =
            predicted_targets(&self.forward, &self.knowledge, &self.index, &self.split.unseen)?;
        let (full, _) =
            transfer_weights(&self.expanded, self.index.num_seen(), &targets, probes, tcfg)?;
        let _ = cfg;
        let report =
            crate::synthbench::evaluate_gzsl(&full, &self.manifest, &self.split, &self.index)?;
        Ok(report)
    }
}

fn cmd_sweep_lambda(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let lab = TransferLab::load(cfg)?;
    let base = cfg.transfer_config()?;
    let probes = probe_pool(cfg, base.probe_mode, cfg.transfer.probes, &lab.manifest, &lab.split)?;
    let mut rows = Vec::new();
    for &lambda in &cfg.sweeps.lambda_grid {
        let tcfg = TransferConfig { lambda, ..base.clone() };
        let report = lab.run(cfg, &tcfg, &probes)?;
        check_finite_report("sweep-lambda", &report)?;
        rows.push((format!("{lambda}"), report));
    }
    write_metric_rows(&paths.sweep("lambda"), "lambda,acc_u,acc_s,h", &rows)?;
    emit_report("sweep-lambda", &rows);
    Ok(())
}

fn cmd_sweep_probes(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let lab = TransferLab::load(cfg)?;
    let base = cfg.transfer_config()?;
    let mut rows = Vec::new();
    for mode_name in &cfg.sweeps.probe_modes {
        let mode = parse_probe_mode(mode_name)?;
        let probes = probe_pool(cfg, mode, cfg.transfer.probes, &lab.manifest, &lab.split)?;
        let tcfg = TransferConfig { probe_mode: mode, ..base.clone() };
        let report = lab.run(cfg, &tcfg, &probes)?;
        check_finite_report("sweep-probes", &report)?;
        rows.push((mode_name.clone(), report));
    }
    write_metric_rows(&paths.sweep("probes"), "probe_mode,acc_u,acc_s,h", &rows)?;
    emit_report("sweep-probes", &rows);
    Ok(())
}

fn cmd_sweep_layer(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let (manifest, split) = load_data(cfg)?;
    let (net, _) = load_seen_net(cfg)?;
    let knowledge = load_attributes(cfg)?;
    let index = ClassIndex::new(&split);
    let expanded = expanded_net(cfg, &net, &split)?;
    let base = cfg.transfer_config()?;
    let probes = probe_pool(cfg, base.probe_mode, cfg.transfer.probes, &manifest, &split)?;
    let layers: Vec<String> = if cfg.sweeps.layers.is_empty() {
        let mut l = net.spec.conv_layer_names();
        // Pooled features: observed importance there is the head row itself,
        // so this is the pure knowledge-to-weights regression setting.
        l.push("gap".into());
        l
    } else {
        cfg.sweeps.layers.clone()
    };
    let mut rows = Vec::new();
    for layer in &layers {
        if net.spec.layer(layer).is_none() {
            return Err(CliError::Config(format!("unknown layer {layer:?} in sweep")));
        }
        // Each capture layer needs its own importances and forward map.
        let vectors = seen_train_importances(cfg, &net, layer, &manifest, &split)?;
        let rows_csv: Vec<(usize, usize, Vec<f64>)> = vectors
            .iter()
            .map(|v| {
                let id = match v.source {
                    Source::Instance(id) => id,
                    Source::ClassAggregate => 0,
                };
                (id, v.class_id, v.values.clone())
            })
            .collect();
        let (forward, _) = fit_both_maps(cfg, &rows_csv, &knowledge, &split.heldout)?;
        let targets = predicted_targets(&forward, &knowledge, &index, &split.unseen)?;
        let tcfg = TransferConfig { layer: layer.clone(), ..base.clone() };
        let (full, _) = transfer_weights(&expanded, index.num_seen(), &targets, &probes, &tcfg)?;
        let report = crate::synthbench::evaluate_gzsl(&full, &manifest, &split, &index)?;
        check_finite_report("sweep-layer", &report)?;
        rows.push((layer.clone(), report));
    }
    write_metric_rows(&paths.sweep("layer"), "layer,acc_u,acc_s,h", &rows)?;
    emit_report("sweep-layer", &rows);
    Ok(())
}

fn cmd_sweep_noise(cfg: &RunConfig) -> Result<()> {
    let paths = Paths::new(cfg);
    let (manifest, split) = load_data(cfg)?;
    let (net, _) = load_seen_net(cfg)?;
    let index = ClassIndex::seen_only(&split);
    let base = cfg.transfer_config()?;
    let tcfg = TransferConfig {
        max_iters: cfg.recover.max_iters,
        lr: cfg.recover.lr,
        layer: cfg.recover.layer.clone(),
        // Recovery measures pure supervision fidelity: no anchor prior.
        lambda: 0.0,
        ..base
    };
    let probes = probe_pool(cfg, tcfg.probe_mode, cfg.recover.probes, &manifest, &split)?;
    let curve = recover_seen_weights(
        &net,
        &manifest,
        &split,
        &index,
        &probes,
        &cfg.recover.eps_levels,
        &tcfg,
    )?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(paths.sweep("noise"))?);
    writeln!(f, "eps,accuracy")?;
    println!("sweep-noise (seen-test class-normalized accuracy)");
    for p in &curve {
        if !p.accuracy.is_finite() {
            return Err(CliError::Numeric(format!("eps {}: non-finite accuracy", p.eps)));
        }
        writeln!(f, "{},{}", p.eps, p.accuracy)?;
        println!("  eps {:>8}: {:.4}", p.eps, p.accuracy);
    }
    f.flush()?;
    Ok(())
}

// --- run-all ---------------------------------------------------------------

/// Pick the transfer lambda by pseudo-unseen validation: held-out seen classes
/// play the role of unseen classes (their head rows are re-initialized and
/// re-derived from map predictions), and H is measured on the validation
/// split over the seen label space only.
fn grid_search_lambda(
    cfg: &RunConfig,
    net: &Network,
    manifest: &DatasetManifest,
    split: &GzslSplit,
    forward: &LinearMap,
    knowledge: &KnowledgeSet,
    probes: &ProbePool,
) -> Result<f64> {
    let paths = Paths::new(cfg);
    let index = ClassIndex::seen_only(split);
    let (_, in_dim, _) = net.spec.head();
    let non_heldout: Vec<usize> = (0..index.len())
        .filter(|&row| !split.heldout.contains(&index.class_of(row)))
        .collect();

    // Statistics of the retained rows drive both the pseudo-unseen init and
    // the regularizer mean, mirroring the real unseen setting.
    let w = net.head_weight();
    let mut mean = vec![0.0; in_dim];
    let mut var = vec![0.0; in_dim];
    for &row in &non_heldout {
        for d in 0..in_dim {
            mean[d] += w.data()[row * in_dim + d];
        }
    }
    for m in &mut mean {
        *m /= non_heldout.len() as f64;
    }
    for &row in &non_heldout {
        for d in 0..in_dim {
            let diff = w.data()[row * in_dim + d] - mean[d];
            var[d] += diff * diff;
        }
    }
    for v in &mut var {
        *v /= non_heldout.len() as f64;
    }
    let mean_bias = non_heldout
        .iter()
        .map(|&row| net.head_bias().data()[row])
        .sum::<f64>()
        / non_heldout.len() as f64;

    let mut pseudo = net.clone();
    {
        let (head_name, _, _) = pseudo.spec.head();
        let head_name = head_name.to_string();
        let mut rng = SplitMix64::derive(cfg.seed, 0x76616c2d696e6974);
        let wm = pseudo.param_mut(&format!("{head_name}.weight")).unwrap();
        for &class in &split.heldout {
            let row = index.row_of(class).expect("heldout is seen");
            for d in 0..in_dim {
                wm.data_mut()[row * in_dim + d] = mean[d] + var[d].sqrt() * rng.normal();
            }
        }
        let bm = pseudo.param_mut(&format!("{head_name}.bias")).unwrap();
        for &class in &split.heldout {
            bm.data_mut()[index.row_of(class).unwrap()] = mean_bias;
        }
    }

    let targets = predicted_targets(forward, knowledge, &index, &split.heldout)?;
    let val = role_instances(manifest, split, &index, Role::Val);
    let pseudo_seen: Vec<usize> = split
        .seen
        .iter()
        .copied()
        .filter(|c| !split.heldout.contains(c))
        .collect();
    let base = cfg.transfer_config()?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &cfg.sweeps.tune_grid {
        let tcfg = TransferConfig {
            lambda,
            max_iters: cfg.sweeps.grid_max_iters,
            ..base.clone()
        };
        let (candidate, _) = transfer_weights_with_mean(&pseudo, &mean, &targets, probes, &tcfg)?;
        let mut preds = Vec::with_capacity(val.len());
        let mut labels = Vec::with_capacity(val.len());
        for chunk in val.chunks(256) {
            let imgs: Vec<&Array> = chunk.iter().map(|(_, img, _)| *img).collect();
            for (row, (id, _, _)) in candidate.predict(&imgs)?.into_iter().zip(chunk) {
                preds.push(index.class_of(row));
                labels.push(manifest.records[*id].class_id);
            }
        }
        let acc_u = class_normalized_accuracy(&preds, &labels, &split.heldout)?;
        let acc_s = class_normalized_accuracy(&preds, &labels, &pseudo_seen)?;
        let h = harmonic_mean(acc_u, acc_s);
        if !h.is_finite() {
            return Err(CliError::Numeric(format!("grid search lambda {lambda}: H = {h}")));
        }
        rows.push((format!("{lambda}"), GzslReport { acc_u, acc_s, h }));
        if best.map_or(true, |(_, bh)| h > bh) {
            best = Some((lambda, h));
        }
    }
    write_metric_rows(&paths.gridsearch(), "lambda,acc_u,acc_s,h", &rows)?;
    emit_report("lambda grid search (validation, pseudo-unseen held-out classes)", &rows);
    let (lambda, h) = best.expect("non-empty grid");
    println!("selected lambda {lambda} (validation H {h:.4})");
    Ok(lambda)
}

fn cmd_run_all(cfg: &RunConfig) -> Result<()> {
    cmd_gen_data(cfg)?;
    cmd_train_seen(cfg)?;
    cmd_extract_importance(cfg)?;
    cmd_fit_map(cfg)?;

    // Validation-driven lambda choice, then the real transfer with it.
    let paths = Paths::new(cfg);
    let (manifest, split) = load_data(cfg)?;
    let (net, _) = load_seen_net(cfg)?;
    let forward = load_map(&paths.map_forward())?;
    let knowledge = load_attributes(cfg)?;
    let base_mode = parse_probe_mode(&cfg.transfer.probe_mode)?;
    let probes = probe_pool(cfg, base_mode, cfg.transfer.probes, &manifest, &split)?;
    let lambda =
        grid_search_lambda(cfg, &net, &manifest, &split, &forward, &knowledge, &probes)?;
    let mut tuned = cfg.clone();
    tuned.transfer.lambda = lambda;

    cmd_transfer(&tuned)?;
    cmd_eval_gzsl(&tuned)?;
    cmd_sweep_lambda(&tuned)?;
    cmd_explain(&tuned)?;
    write_run_meta(cfg)?;
    println!("run-all complete: artifacts in {}", paths.out.display());
    Ok(())
}
