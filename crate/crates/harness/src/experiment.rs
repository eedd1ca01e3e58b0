//! Training runs, evaluation and reports on top of a built dataset.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nwn_core::encoding::EncodeError;
use nwn_core::Label;
use nwn_model::checkpoint::{read_checkpoint, write_checkpoint, CheckpointError, CheckpointHeader};
use nwn_model::train::{write_log_csv, Split, TrainOutcome};
use nwn_model::{predict, train, Model, ModelError, Sequence, TrainConfig, TrainError, Variant};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cases::{CaseError, CaseName, CaseSpec};
use crate::dataset::{build_dataset, Dataset, DatasetError, SplitName};
use crate::metrics::{Confusion, Metrics};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const DATA_DIR: &str = "data";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("encoding: {0}")]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint was trained on dataset {expected}, found {found}")]
    DatasetMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ExperimentError {
    /// 3 when generation ran out of attempts, 2 for bad inputs, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Dataset(DatasetError::ExhaustedBudget { .. }) => 3,
            ExperimentError::Io(_) | ExperimentError::Dataset(DatasetError::Io(_)) => 1,
            ExperimentError::Train(TrainError::Diverged { .. }) => 1,
            _ => 2,
        }
    }
}

/// Contents of a `train --config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    /// Drives dataset generation and training alike.
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `runs/<case>` when absent.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_n() -> usize {
    2000
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: default_n(),
            seed: 0,
            out: None,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        if cfg.train.seed != 0 && cfg.train.seed != cfg.seed {
            return Err(ExperimentError::Config(
                "set the seed at the top level, not under [train]".into(),
            ));
        }
        cfg.training().validate()?;
        Ok(cfg)
    }

    /// Training settings with the top-level seed applied.
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn out_dir(&self, case: CaseName) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("runs").join(case.slug()))
    }
}

/// Model inputs and 0/1 targets for one split.
#[derive(Clone, Debug)]
pub struct Features {
    pub seqs: Vec<Sequence>,
    pub labels: Vec<f64>,
}

impl Features {
    pub fn as_split(&self) -> Split<'_> {
        Split {
            seqs: &self.seqs,
            labels: &self.labels,
        }
    }
}

pub fn target(label: Label) -> f64 {
    match label {
        Label::Normal => 0.0,
        Label::Spurious => 1.0,
    }
}

pub fn featurize(spec: &CaseSpec, ds: &Dataset, which: SplitName, variant: Variant) -> Result<Features, EncodeError> {
    let idx = ds.split(which);
    let t_max = ds.manifest.t_max;
    let seqs = idx
        .iter()
        .map(|&i| variant.featurize(&ds.trajectories[i], spec.team(), spec.places(), spec.n_reg(), t_max))
        .collect::<Result<_, _>>()?;
    let labels = idx.iter().map(|&i| target(ds.trajectories[i].label)).collect();
    Ok(Features { seqs, labels })
}

/// Whether training sees the true labels or a shuffled copy of them.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    True,
    Permuted,
}

/// Shuffles the targets among the items; the class counts are unchanged.
pub fn permute_labels(f: &mut Features, seed: u64, stream: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    f.labels.shuffle(&mut rng);
}

pub fn confusion_on<T: nwn_model::Real>(model: &Model<T>, f: &Features) -> Result<Confusion, ExperimentError> {
    let probs = predict(model, &f.seqs)?;
    let predicted: Vec<bool> = probs.iter().map(|&p| nwn_model::train::is_spurious(p)).collect();
    let actual: Vec<bool> = f.labels.iter().map(|&y| y > 0.5).collect();
    Ok(Confusion::from_predictions(&predicted, &actual).expect("one prediction per item"))
}

#[derive(Clone, Debug)]
pub struct CaseRun {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

/// Trains on the train split, stops on validation loss and scores the test
/// split against its true labels.
pub fn run_case(spec: &CaseSpec, ds: &Dataset, cfg: &TrainConfig, labels: Labels) -> Result<CaseRun, ExperimentError> {
    let variant = cfg.variant;
    let mut tr = featurize(spec, ds, SplitName::Train, variant)?;
    let mut va = featurize(spec, ds, SplitName::Val, variant)?;
    let te = featurize(spec, ds, SplitName::Test, variant)?;
    if labels == Labels::Permuted {
        permute_labels(&mut tr, cfg.seed, 1);
        permute_labels(&mut va, cfg.seed, 2);
    }
    let arch = variant.config(spec.team(), spec.places(), spec.n_reg());
    let outcome = train(arch, cfg, tr.as_split(), va.as_split())?;
    let confusion = confusion_on(&outcome.model, &te)?;
    Ok(CaseRun {
        variant,
        metrics: confusion.metrics(),
        confusion,
        outcome,
    })
}

/// One training run per variant on the same dataset, splits and seed.
pub fn run_ablation(spec: &CaseSpec, ds: &Dataset, cfg: &TrainConfig, variants: &[Variant]) -> Result<Vec<CaseRun>, ExperimentError> {
    variants
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                variant,
                ..cfg.clone()
            };
            run_case(spec, ds, &cfg, Labels::True)
        })
        .collect()
}

pub fn checkpoint_header(spec: &CaseSpec, ds: &Dataset, cfg: &TrainConfig, model: &Model<f32>) -> CheckpointHeader {
    CheckpointHeader {
        config: model.cfg,
        variant: cfg.variant,
        n_reg: spec.n_reg(),
        t_max: ds.manifest.t_max,
        seed: cfg.seed,
        case: spec.name.slug().into(),
        n: ds.manifest.n,
        data_seed: ds.manifest.seed,
        dataset_digest: ds.manifest.digest.clone(),
        param_count: model.params.len(),
    }
}

/// Writes the checkpoint, the epoch log and the test report of a run.
pub fn save_run(dir: &Path, spec: &CaseSpec, ds: &Dataset, cfg: &TrainConfig, run: &CaseRun) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    let header = checkpoint_header(spec, ds, cfg, &run.outcome.model);
    let mut ckpt = io::BufWriter::new(fs::File::create(dir.join(CHECKPOINT_FILE))?);
    write_checkpoint(&mut ckpt, &header, &run.outcome.model)?;
    ckpt.flush()?;
    write_log_csv(fs::File::create(dir.join(LOG_FILE))?, &run.outcome.log)?;
    let row = ReportRow::new(spec.name, run.variant, cfg.seed, &run.confusion, &ds.manifest.test_digest);
    write_report_csv(fs::File::create(dir.join(REPORT_FILE))?, &[row])?;
    Ok(())
}

/// A checkpoint with the case and dataset it was trained on.
pub struct Loaded {
    pub header: CheckpointHeader,
    pub model: Model<f32>,
    pub spec: CaseSpec,
    pub dataset: Dataset,
}

/// Reads a checkpoint and recovers its dataset, from the `data` directory
/// beside it when present and by regeneration otherwise.
pub fn load_checkpoint(path: &Path) -> Result<Loaded, ExperimentError> {
    let (header, model) = read_checkpoint::<_, f32>(io::BufReader::new(fs::File::open(path)?))?;
    let case: CaseName = header
        .case
        .parse()
        .map_err(|e: crate::cases::UnknownCase| ExperimentError::Config(e.to_string()))?;
    let spec = case.load()?;
    let data = path.parent().unwrap_or(Path::new(".")).join(DATA_DIR);
    let dataset = if data.join("manifest.json").exists() {
        Dataset::load(&data, &spec)?
    } else {
        build_dataset(&spec, header.n, header.data_seed)?
    };
    if dataset.manifest.digest != header.dataset_digest {
        return Err(ExperimentError::DatasetMismatch {
            expected: header.dataset_digest,
            found: dataset.manifest.digest,
        });
    }
    Ok(Loaded {
        header,
        model,
        spec,
        dataset,
    })
}

pub fn evaluate_checkpoint(loaded: &Loaded, which: SplitName) -> Result<Confusion, ExperimentError> {
    let f = featurize(&loaded.spec, &loaded.dataset, which, loaded.header.variant)?;
    confusion_on(&loaded.model, &f)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub case: String,
    pub method: String,
    pub seed: u64,
    pub items: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub test_digest: String,
}

impl ReportRow {
    pub fn new(case: CaseName, variant: Variant, seed: u64, c: &Confusion, test_digest: &str) -> Self {
        let m = c.metrics();
        ReportRow {
            case: case.slug().into(),
            method: variant.title().into(),
            seed,
            items: c.total(),
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            test_digest: test_digest.into(),
        }
    }
}

pub fn write_report_csv<W: Write>(mut w: W, rows: &[ReportRow]) -> io::Result<()> {
    writeln!(w, "case,method,seed,items,accuracy,precision,recall,f1,test_digest")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{}",
            r.case, r.method, r.seed, r.items, r.accuracy, r.precision, r.recall, r.f1, r.test_digest
        )?;
    }
    Ok(())
}

/// Fixed-width table of the same rows, for the terminal.
pub fn format_table(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Method".len());
    let case_w = rows.iter().map(|r| r.case.len()).max().unwrap_or(0).max("Case".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:case_w$}  {:width$}  {:>4}  {:>8}  {:>9}  {:>6}  {:>6}",
        "Case", "Method", "Seed", "Accuracy", "Precision", "Recall", "F1"
    );
    let _ = writeln!(out, "{}", "-".repeat(case_w + width + 51));
    for r in rows {
        let _ = writeln!(
            out,
            "{:case_w$}  {:width$}  {:>4}  {:>8.3}  {:>9.3}  {:>6.3}  {:>6.3}",
            r.case, r.method, r.seed, r.accuracy, r.precision, r.recall, r.f1
        );
    }
    out
}

/// Median of a nonempty list; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}
