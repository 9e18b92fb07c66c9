//! Declarative training runs: dataset source, encoder and trainer settings in
//! one JSON document, optional parameter sweeps, and on-disk artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_multimodal, parse_idx, read_csv, relabel_even_odd, scatter_svg, Dataset, MultimodalConfig};
use crate::encoder::{init_params, EncoderParams, EncoderVariant};
use crate::error::{Error, Result};
use crate::mining::PositiveStrategy;
use crate::trainer::{embed_rows, train_stochastic, EvalRecord, SplitMetrics, TrainConfig, TrainMode, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Train on some digits, test on the others, with parity as the class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvenOddSplit {
    pub train_digits: Vec<usize>,
    pub test_digits: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(MultimodalConfig),
    Idx {
        /// Pairs are stacked in order.
        files: Vec<IdxFiles>,
        #[serde(default)]
        even_odd: Option<EvenOddSplit>,
    },
    Csv {
        path: PathBuf,
        /// Separate evaluation file; without it both splits cover `path`.
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(MultimodalConfig::default())
    }
}

impl DatasetSource {
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        match self {
            DatasetSource::Synthetic(_) => Vec::new(),
            DatasetSource::Idx { files, .. } => files.iter_mut().flat_map(|f| [&mut f.images, &mut f.labels]).collect(),
            DatasetSource::Csv { path, test_path } => std::iter::once(path).chain(test_path.as_mut()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableInit {
    #[default]
    Random,
    /// Copy the (scaled) input features; needs `feature_dim == dim`.
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Embedding dimension m.
    pub dim: usize,
    /// MLP hidden widths.
    pub hidden: Vec<usize>,
    /// Free table only.
    pub init: TableInit,
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { variant: EncoderVariant::Mlp, dim: 2, hidden: vec![128], init: TableInit::Random, init_scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Samples per class in a batch (K).
    PositiveK,
    /// Fraction of tuples trimmed from each batch.
    Trim,
    PositiveStrategy,
    Seed,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::PositiveK => "positive_k",
            SweepParam::Trim => "trim",
            SweepParam::PositiveStrategy => "positive_strategy",
            SweepParam::Seed => "seed",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        [SweepParam::PositiveK, SweepParam::Trim, SweepParam::PositiveStrategy, SweepParam::Seed]
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown sweep parameter '{name}', expected positive_k, trim, positive_strategy or seed"
                ))
            })
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        let bad = || Error::invalid(format!("bad value '{value}' for sweep parameter {}", self.name()));
        match self {
            SweepParam::PositiveK => cfg.train.miner.samples_per_class = value.parse().map_err(|_| bad())?,
            SweepParam::Trim => cfg.train.loss.trim_fraction = value.parse().map_err(|_| bad())?,
            SweepParam::PositiveStrategy => {
                cfg.train.miner.positive_strategy =
                    serde_json::from_value(serde_json::Value::String(value.into())).map_err(|_| bad())?
            }
            SweepParam::Seed => cfg.seed = value.parse().map_err(|_| bad())?,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives encoder initialisation and batch sampling; copied into
    /// `train.seed`.
    pub seed: u64,
    pub dataset: DatasetSource,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Sweeps combine as a grid, the last one varying fastest.
    pub sweeps: Vec<Sweep>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Makes relative dataset and output paths relative to `base` (usually the
    /// directory of the config file).
    pub fn rebase_paths(&mut self, base: &Path) {
        for p in self.dataset.paths_mut().into_iter().chain(self.output_dir.as_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Copy with the seed propagated into the trainer settings.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.train.seed = out.seed;
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.mode != TrainMode::Stochastic {
            return Err(Error::invalid(
                "train.mode: experiments run stochastic training; exact descent is driven by `verify`",
            ));
        }
        self.train.validate()?;
        if self.encoder.dim == 0 {
            return Err(Error::invalid("encoder.dim must be at least 1"));
        }
        if !(self.encoder.init_scale.is_finite() && self.encoder.init_scale > 0.0) {
            return Err(Error::invalid(format!(
                "encoder.init_scale must be positive, got {}",
                self.encoder.init_scale
            )));
        }
        if self.encoder.hidden.contains(&0) {
            return Err(Error::invalid("encoder.hidden widths must be positive"));
        }
        let mut dataset = self.dataset.clone();
        for p in dataset.paths_mut() {
            if !p.exists() {
                return Err(Error::invalid(format!("dataset path {} does not exist", p.display())));
            }
        }
        if let DatasetSource::Idx { files, .. } = &self.dataset {
            if files.is_empty() {
                return Err(Error::Empty("dataset.idx.files"));
            }
        }
        for s in &self.sweeps {
            if s.values.is_empty() {
                return Err(Error::invalid(format!("sweep over {} has no values", s.param.name())));
            }
            for v in &s.values {
                s.param.apply(&mut self.clone(), v)?;
            }
        }
        Ok(())
    }

    /// One resolved configuration per grid point, with its label. Point
    /// configs carry no sweeps and no output directory.
    pub fn sweep_points(&self) -> Result<Vec<(Vec<(SweepParam, String)>, ExperimentConfig)>> {
        let mut points = vec![(Vec::new(), self.clone())];
        for s in &self.sweeps {
            let mut next = Vec::with_capacity(points.len() * s.values.len());
            for (label, cfg) in &points {
                for v in &s.values {
                    let mut cfg = cfg.clone();
                    s.param.apply(&mut cfg, v)?;
                    let mut label = label.clone();
                    label.push((s.param, v.clone()));
                    next.push((label, cfg));
                }
            }
            points = next;
        }
        points
            .into_iter()
            .map(|(label, mut cfg)| {
                cfg.sweeps.clear();
                cfg.output_dir = None;
                let cfg = cfg.resolved();
                cfg.validate()?;
                Ok((label, cfg))
            })
            .collect()
    }
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Synthetic(cfg) => gen_multimodal(cfg),
        DatasetSource::Idx { files, even_odd } => {
            let mut ds: Option<Dataset> = None;
            for f in files {
                let part = parse_idx(&f.images, &f.labels)?;
                ds = Some(match ds {
                    None => part,
                    Some(acc) => {
                        let mut both = Dataset::concat_split(&acc, &part)?;
                        both.train = (0..both.len()).collect();
                        both.test = both.train.clone();
                        both
                    }
                });
            }
            let ds = ds.ok_or(Error::Empty("dataset.idx.files"))?;
            match even_odd {
                Some(split) => relabel_even_odd(&ds, &split.train_digits, &split.test_digits),
                None => Ok(ds),
            }
        }
        DatasetSource::Csv { path, test_path } => {
            let train = read_csv(path)?;
            match test_path {
                Some(t) => Dataset::concat_split(&train, &read_csv(t)?),
                None => Ok(train),
            }
        }
    }
}

pub fn build_encoder(cfg: &EncoderConfig, ds: &Dataset, seed: u64) -> Result<EncoderParams> {
    match (cfg.variant, cfg.init) {
        (EncoderVariant::FreeTable, TableInit::Features) => {
            if ds.feature_dim() != cfg.dim {
                return Err(Error::invalid(format!(
                    "encoder.init = features needs feature_dim ({}) equal to encoder.dim ({})",
                    ds.feature_dim(),
                    cfg.dim
                )));
            }
            EncoderParams::from_table(&ds.features * cfg.init_scale)
        }
        (EncoderVariant::FreeTable, TableInit::Random) => {
            let mut p = init_params(EncoderVariant::FreeTable, &[ds.len(), cfg.dim], seed)?;
            p.tensors_mut()[0] *= cfg.init_scale;
            Ok(p)
        }
        (EncoderVariant::Mlp, _) => {
            let dims: Vec<usize> =
                std::iter::once(ds.feature_dim()).chain(cfg.hidden.iter().copied()).chain([cfg.dim]).collect();
            init_params(EncoderVariant::Mlp, &dims, seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub samples: usize,
    pub feature_dim: usize,
    pub train: usize,
    pub test: usize,
}

impl DatasetSummary {
    fn of(ds: &Dataset) -> Self {
        Self { samples: ds.len(), feature_dim: ds.feature_dim(), train: ds.train.len(), test: ds.test.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub sweep: Vec<(SweepParam, String)>,
    pub dataset: DatasetSummary,
    pub num_params: usize,
    pub training: TrainReport,
}

impl RunReport {
    pub fn final_eval(&self) -> &EvalRecord {
        self.training.final_eval().expect("training always ends with an evaluation")
    }
}

pub struct RunOutput {
    pub config: ExperimentConfig,
    pub params: EncoderParams,
    pub report: RunReport,
}

/// Trains every sweep point; with `out_dir` each point writes its artifacts
/// to its own subdirectory (or `out_dir` itself without sweeps) and a
/// `summary.csv` collects the final metrics.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<RunOutput>> {
    cfg.validate()?;
    let points = cfg.sweep_points()?;
    let ds = load_dataset(&cfg.dataset)?;
    let mut outputs = Vec::with_capacity(points.len());
    for (label, point) in points {
        let params = build_encoder(&point.encoder, &ds, point.seed)?;
        let num_params = params.num_params();
        let (params, _beta, training) = train_stochastic(&ds, params, &point.train)?;
        let report = RunReport { sweep: label, dataset: DatasetSummary::of(&ds), num_params, training };
        let run = RunOutput { config: point, params, report };
        if let Some(dir) = out_dir {
            let sub =
                if cfg.sweeps.is_empty() { dir.to_path_buf() } else { dir.join(sweep_dir_name(&run.report.sweep)) };
            write_run(&run, &ds, &sub)?;
        }
        outputs.push(run);
    }
    if let Some(dir) = out_dir {
        write_text(&dir.join("summary.csv"), &summary_csv(&outputs))?;
    }
    Ok(outputs)
}

fn sweep_dir_name(label: &[(SweepParam, String)]) -> String {
    label.iter().map(|(p, v)| format!("{}={v}", p.name())).collect::<Vec<_>>().join(",")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn write_run(run: &RunOutput, ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("config.json"), &to_json(&run.config))?;
    write_text(&dir.join("report.json"), &to_json(&run.report))?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&run.report.training, &run.config.train.eval_ks))?;
    run.params.save(&dir.join("params.bin"))?;
    if run.config.encoder.dim == 2 {
        write_scatters(&run.params, ds, dir)?;
    }
    Ok(())
}

/// `scatter_train.svg`, plus `scatter_test.svg` when the test split differs.
pub fn write_scatters(params: &EncoderParams, ds: &Dataset, dir: &Path) -> Result<()> {
    let mut splits = vec![("train", &ds.train)];
    if ds.test != ds.train {
        splits.push(("test", &ds.test));
    }
    for (name, rows) in splits {
        let emb = embed_rows(params, ds, rows)?;
        let classes: Vec<usize> = rows.iter().map(|&i| ds.class_labels[i]).collect();
        let modes: Vec<usize> = rows.iter().map(|&i| ds.modes()[i]).collect();
        write_text(&dir.join(format!("scatter_{name}.svg")), &scatter_svg(&emb, &classes, &modes)?)?;
    }
    Ok(())
}

fn metric_header(ks: &[usize]) -> String {
    let mut h = String::new();
    for k in ks {
        write!(h, ",recall_class@{k}").unwrap();
    }
    for k in ks {
        write!(h, ",recall_mode@{k}").unwrap();
    }
    h.push_str(",nmi_class,nmi_plus_class,nmi_plus_mode,collapse_score");
    h
}

fn metric_cells(m: &SplitMetrics, ks: &[usize]) -> String {
    let mut row = String::new();
    // Ks at or above the split size are skipped by the evaluator.
    for rec in [&m.recall_class, &m.recall_mode] {
        for i in 0..ks.len() {
            match rec.get(i) {
                Some(v) => write!(row, ",{v}").unwrap(),
                None => row.push(','),
            }
        }
    }
    write!(row, ",{},{},{},", m.nmi_class, m.nmi_plus_class, m.nmi_plus_mode).unwrap();
    if let Some(c) = m.collapse_score {
        write!(row, "{c}").unwrap();
    }
    row
}

pub fn metrics_csv(report: &TrainReport, ks: &[usize]) -> String {
    let mut out = format!("epoch,step,split,samples{}\n", metric_header(ks));
    for e in &report.evals {
        for (name, m) in std::iter::once(("train", &e.train)).chain(e.test.as_ref().map(|t| ("test", t))) {
            writeln!(out, "{},{},{name},{}{}", e.epoch, e.step, m.samples, metric_cells(m, ks)).unwrap();
        }
    }
    out
}

fn summary_csv(runs: &[RunOutput]) -> String {
    let Some(first) = runs.first() else { return String::new() };
    let ks = &first.config.train.eval_ks;
    let params: Vec<&str> = first.report.sweep.iter().map(|(p, _)| p.name()).collect();
    let mut out = String::new();
    for p in &params {
        write!(out, "{p},").unwrap();
    }
    writeln!(out, "split,samples{}", metric_header(ks)).unwrap();
    for run in runs {
        let e = run.report.final_eval();
        for (name, m) in std::iter::once(("train", &e.train)).chain(e.test.as_ref().map(|t| ("test", t))) {
            for (_, v) in &run.report.sweep {
                write!(out, "{v},").unwrap();
            }
            writeln!(out, "{name},{}{}", m.samples, metric_cells(m, ks)).unwrap();
        }
    }
    out
}

/// Ready-made setting: two classes of three Gaussian modes each in the
/// plane, a free table started at the scaled features and a margin loss
/// whose positive boundary sits just above zero.
pub fn synthetic_preset(seed: u64, positive: PositiveStrategy) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        dataset: DatasetSource::Synthetic(MultimodalConfig { feature_dim: 2, seed, ..MultimodalConfig::default() }),
        encoder: EncoderConfig {
            variant: EncoderVariant::FreeTable,
            dim: 2,
            hidden: Vec::new(),
            init: TableInit::Features,
            init_scale: 0.1,
        },
        ..ExperimentConfig::default()
    };
    let t = &mut cfg.train;
    t.learning_rate = 0.01;
    t.epochs = 300;
    t.learn_beta = false;
    t.loss.variant = crate::losses::LossVariant::Margin;
    t.loss.alpha = 0.2;
    t.loss.beta_init = 0.201;
    t.miner.positive_strategy = positive;
    t.eval_ks = vec![1];
    cfg
}

/// Ready-made MNIST even/odd setting: digits 0–5 for training, 6–9 held
/// out, an MLP into the plane and a triplet loss.
pub fn mnist_preset(mnist_dir: &Path, seed: u64, positive: PositiveStrategy) -> ExperimentConfig {
    let pair = |stem: &str| IdxFiles {
        images: mnist_dir.join(format!("{stem}-images-idx3-ubyte")),
        labels: mnist_dir.join(format!("{stem}-labels-idx1-ubyte")),
    };
    let mut cfg = ExperimentConfig {
        seed,
        dataset: DatasetSource::Idx {
            files: vec![pair("train"), pair("t10k")],
            even_odd: Some(EvenOddSplit { train_digits: (0..6).collect(), test_digits: (6..10).collect() }),
        },
        encoder: EncoderConfig { variant: EncoderVariant::Mlp, dim: 2, hidden: vec![128], ..EncoderConfig::default() },
        ..ExperimentConfig::default()
    };
    let t = &mut cfg.train;
    t.learning_rate = 1e-3;
    t.epochs = 20;
    t.loss.alpha = 1.0;
    t.miner.positive_strategy = positive;
    t.eval_ks = vec![1, 2, 4, 8];
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_csv;

    fn small() -> ExperimentConfig {
        let mut cfg = synthetic_preset(1, PositiveStrategy::Random);
        if let DatasetSource::Synthetic(d) = &mut cfg.dataset {
            d.samples_per_mode = 6;
        }
        cfg.train.epochs = 3;
        cfg.train.miner.samples_per_class = 6;
        cfg
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = small();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        let bad = r#"{"seed": 1, "train": {"epochz": 3}}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
        let minimal: ExperimentConfig = serde_json::from_str(r#"{"dataset": {"synthetic": {"classes": 3}}}"#).unwrap();
        assert!(matches!(minimal.dataset, DatasetSource::Synthetic(MultimodalConfig { classes: 3, .. })));
    }

    #[test]
    fn sweep_grid_order_and_labels() {
        let mut cfg = small();
        cfg.sweeps = vec![
            Sweep { param: SweepParam::Seed, values: vec!["0".into(), "1".into()] },
            Sweep { param: SweepParam::PositiveStrategy, values: vec!["random".into(), "easy_positive".into()] },
        ];
        let pts = cfg.sweep_points().unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[1].1.train.miner.positive_strategy, PositiveStrategy::EasyPositive);
        assert_eq!(pts[2].1.train.seed, 1);
        assert_eq!(sweep_dir_name(&pts[3].0), "seed=1,positive_strategy=easy_positive");
        cfg.sweeps[1].values.push("hardest".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn validation_errors() {
        let mut cfg = small();
        cfg.dataset = DatasetSource::Csv { path: "/nonexistent/file.csv".into(), test_path: None };
        assert!(cfg.validate().unwrap_err().to_string().contains("does not exist"));
        let mut cfg = small();
        cfg.train.mode = TrainMode::ExactExpected;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.encoder.dim = 3;
        let ds = load_dataset(&cfg.dataset).unwrap();
        assert!(build_encoder(&cfg.encoder, &ds, 0).is_err());
    }

    #[test]
    fn artifacts_are_written_and_deterministic() {
        let mut cfg = small();
        cfg.sweeps = vec![Sweep { param: SweepParam::Trim, values: vec!["0".into(), "0.5".into()] }];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        run_experiment(&cfg, Some(a.path())).unwrap();
        run_experiment(&cfg, Some(b.path())).unwrap();
        for f in [
            "summary.csv",
            "trim=0/report.json",
            "trim=0.5/metrics.csv",
            "trim=0/scatter_train.svg",
            "trim=0.5/config.json",
            "trim=0/params.bin",
        ] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let summary = std::fs::read_to_string(a.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 3);
        assert!(summary.starts_with("trim,split,samples,recall_class@1"));
        let resolved: ExperimentConfig =
            serde_json::from_str(&std::fs::read_to_string(a.path().join("trim=0.5/config.json")).unwrap()).unwrap();
        assert_eq!(resolved.train.loss.trim_fraction, 0.5);
        assert!(resolved.sweeps.is_empty());
    }

    #[test]
    fn csv_source_with_separate_test_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds =
            gen_multimodal(&MultimodalConfig { samples_per_mode: 4, feature_dim: 3, ..Default::default() }).unwrap();
        write_csv(&ds, &dir.path().join("a.csv")).unwrap();
        write_csv(&ds, &dir.path().join("b.csv")).unwrap();
        let mut cfg = ExperimentConfig {
            dataset: DatasetSource::Csv { path: "a.csv".into(), test_path: Some("b.csv".into()) },
            ..ExperimentConfig::default()
        };
        cfg.rebase_paths(dir.path());
        cfg.validate().unwrap();
        let loaded = load_dataset(&cfg.dataset).unwrap();
        assert_eq!(loaded.len(), 2 * ds.len());
        assert_eq!(loaded.test[0], ds.len());
    }
}
