//! End-to-end run: ingest, clustering per day class, pattern distributions,
//! feature selection, model training and comparison, then report files.
//!
//! Every stage writes its artifacts into the output directory before the
//! next one starts, and `stage_marker.json` records how far the run got.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{self, ComparisonRow, FitContext, ModelHyper, ModelRegistry, PatternModel};
use crate::cluster::{self, CurvePoint, Distances, PatternDistribution, PatternSet};
use crate::featsel::{self, ColumnKind, CorrelationMatrix, FeatureColumn, MeritMode, SelectOptions};
use crate::ingest::{self, Cohort, DayClass, IngestReport, SocioRecord, FEATURE_NAMES, SQFT_INDEX};
use crate::neural::{Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Cluster,
    Distribution,
    Featsel,
    Train,
    Compare,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Cluster,
        Stage::Distribution,
        Stage::Featsel,
        Stage::Train,
        Stage::Compare,
        Stage::Report,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).expect("listed")
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Cluster => "cluster",
            Stage::Distribution => "distribution",
            Stage::Featsel => "featsel",
            Stage::Train => "train",
            Stage::Compare => "compare",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {cause}")]
    Stage { stage: Stage, cause: String },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
}

impl PipelineError {
    /// 0 success, 1 config error, 2 + stage index for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Stage { stage, .. } => 2 + stage.index() as i32,
            PipelineError::MissingArtifact(_) => 2 + Stage::Report.index() as i32,
        }
    }
}

fn fail(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |cause| PipelineError::Stage { stage, cause }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub meter: PathBuf,
    pub survey: PathBuf,
    pub out_dir: PathBuf,
    /// Drives clustering restarts, permutation floors, the data split and
    /// network initialization.
    pub seed: u64,
    /// Inclusive K range scanned by silhouette.
    pub k_range: (usize, usize),
    pub restarts: usize,
    pub max_iter: usize,
    /// Cap on the cached pairwise-distance matrix, per day class.
    pub distance_budget_mb: usize,
    pub bins: usize,
    pub merit_mode: MeritMode,
    pub permutations: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    /// Registered model names, in comparison-table order.
    pub models: Vec<String>,
    pub hyper: ModelHyper,
    /// Last stage to run.
    pub stage: Stage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            meter: PathBuf::from("meter.csv"),
            survey: PathBuf::from("survey.csv"),
            out_dir: PathBuf::from("out"),
            seed: 0,
            k_range: (2, 10),
            restarts: 10,
            max_iter: 100,
            distance_budget_mb: cluster::DEFAULT_DISTANCE_BUDGET_BYTES / (1024 * 1024),
            bins: featsel::DEFAULT_BINS,
            merit_mode: MeritMode::WithDiagonal,
            permutations: 20,
            split: [0.7, 0.15, 0.15],
            models: ["uniform", "gbt", "unified", "complement", "proposed"]
                .map(String::from)
                .to_vec(),
            hyper: ModelHyper::default(),
            stage: Stage::Report,
        }
    }
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.meter, &mut cfg.survey, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Sets a dotted key (`hyper.train.epochs`, `k-range`, `grid`, ...) from
    /// a command-line value. The value is read as JSON when possible, as a
    /// comma list when it contains commas, and as a string otherwise. Keys
    /// that only exist under `hyper` may omit the prefix.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), PipelineError> {
        let key = key.trim_start_matches("--").replace('-', "_");
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let path: Vec<&str> = key.split('.').collect();
        let path: Vec<&str> = if tree.get(path[0]).is_none() && tree["hyper"].get(path[0]).is_some() {
            std::iter::once("hyper").chain(path).collect()
        } else {
            path
        };
        let mut slot = &mut tree;
        for part in &path {
            slot = slot
                .get_mut(*part)
                .ok_or_else(|| PipelineError::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = parse_value(raw);
        *self = serde_json::from_value(tree)
            .map_err(|e| PipelineError::Config(format!("--{key} {raw}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.k_range.0 < 2 || self.k_range.1 < self.k_range.0 {
            return bad(format!("k_range must satisfy 2 <= lo <= hi, got {:?}", self.k_range));
        }
        if self.restarts == 0 || self.max_iter == 0 {
            return bad("restarts and max_iter must be positive".into());
        }
        if self.bins < 2 {
            return bad(format!("bins must be >= 2, got {}", self.bins));
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions must be positive and sum to 1, got {:?}", self.split));
        }
        if self.models.is_empty() {
            return bad("at least one model is required".into());
        }
        ModelRegistry::with_builtin()
            .resolve(&self.models)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.hyper.grid.cells().is_empty() {
            return bad("hyperparameter grid is empty".into());
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> Value {
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if raw.contains(',') {
        if let Ok(v) = serde_json::from_str::<Value>(&format!("[{raw}]")) {
            return v;
        }
        return Value::Array(raw.split(',').map(|s| Value::String(s.trim().to_string())).collect());
    }
    Value::String(raw.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub completed: Vec<Stage>,
    pub failed: Option<FailedStage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedStage {
    pub stage: Stage,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub day_class: DayClass,
    pub best_k: usize,
    pub curve: Vec<CurvePoint>,
    pub patterns: PatternSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSubset {
    pub day_class: DayClass,
    pub pattern: usize,
    pub members: Vec<String>,
    pub merit: f64,
    pub low_confidence: bool,
    pub noise_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub household_id: String,
    pub day_class: DayClass,
    pub model: String,
    pub true_p: Vec<f64>,
    pub predicted_p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub completed: Vec<Stage>,
    pub ingest: Option<IngestReport>,
    pub best_k: BTreeMap<String, usize>,
    pub comparison: Vec<ComparisonRow>,
}

/// Summary of a finished (possibly stage-gated) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub completed: Vec<Stage>,
    pub out_dir: PathBuf,
    pub report: RunReport,
}

struct Writer<'a> {
    dir: &'a Path,
}

impl Writer<'_> {
    fn text(&self, name: &str, body: &str) -> Result<(), String> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
        fs::write(&path, body).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), String> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
        s.push('\n');
        self.text(name, &s)
    }
}

/// Feature columns in the fixed survey order; only sqft is binned.
pub fn feature_columns(socio: &[&SocioRecord]) -> Vec<FeatureColumn> {
    let rows: Vec<Vec<f64>> = socio.iter().map(|s| s.feature_vector()).collect();
    FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| FeatureColumn {
            name: (*name).to_string(),
            kind: if j == SQFT_INDEX { ColumnKind::Continuous } else { ColumnKind::Discrete },
            values: rows.iter().map(|r| r[j]).collect(),
        })
        .collect()
}

/// Joins socio records with pattern distributions, ordered by household id.
pub fn build_dataset(socio: &[SocioRecord], dists: &[PatternDistribution]) -> Dataset {
    let by_id: BTreeMap<&str, &SocioRecord> = socio.iter().map(|s| (s.household_id.as_str(), s)).collect();
    let mut data = Dataset {
        household_ids: Vec::new(),
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        features: Vec::new(),
        targets: Vec::new(),
    };
    for d in dists {
        if let Some(s) = by_id.get(d.household_id.as_str()) {
            data.household_ids.push(d.household_id.clone());
            data.features.push(s.feature_vector());
            data.targets.push(d.probs.clone());
        }
    }
    data
}

fn profiles_csv(profiles: &[ingest::DayProfile]) -> String {
    let mut s = String::from("household_id,date");
    for h in 0..ingest::HOURS {
        let _ = write!(s, ",h{h:02}");
    }
    s.push('\n');
    for p in profiles {
        let _ = write!(s, "{},{}", p.household_id, p.date);
        for v in &p.values {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn distributions_csv(dists: &[PatternDistribution], k: usize) -> String {
    let mut s = String::from("household_id");
    for j in 0..k {
        let _ = write!(s, ",p{j}");
    }
    s.push('\n');
    for d in dists {
        s.push_str(&d.household_id);
        for p in &d.probs {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
    }
    s
}

struct State {
    cohort: Option<Cohort>,
    clusters: BTreeMap<DayClass, ClusterArtifact>,
    dists: BTreeMap<DayClass, Vec<PatternDistribution>>,
    subsets: BTreeMap<DayClass, Vec<Vec<String>>>,
    models: BTreeMap<DayClass, Vec<(String, Box<dyn PatternModel>)>>,
    splits: BTreeMap<DayClass, (Dataset, Split)>,
    report: RunReport,
}

/// Runs the pipeline up to `cfg.stage`, writing artifacts into `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", cfg.out_dir.display())))?;
    let w = Writer { dir: &cfg.out_dir };
    let mut st = State {
        cohort: None,
        clusters: BTreeMap::new(),
        dists: BTreeMap::new(),
        subsets: BTreeMap::new(),
        models: BTreeMap::new(),
        splits: BTreeMap::new(),
        report: RunReport {
            seed: cfg.seed,
            completed: Vec::new(),
            ingest: None,
            best_k: BTreeMap::new(),
            comparison: Vec::new(),
        },
    };
    let mut marker = StageMarker {
        completed: Vec::new(),
        failed: None,
    };
    for stage in Stage::ALL.into_iter().take_while(|s| *s <= cfg.stage) {
        log::info!("stage {stage}");
        let result = match stage {
            Stage::Ingest => ingest_stage(cfg, &w, &mut st),
            Stage::Cluster => cluster_stage(cfg, &w, &mut st),
            Stage::Distribution => distribution_stage(&w, &mut st),
            Stage::Featsel => featsel_stage(cfg, &w, &mut st),
            Stage::Train => train_stage(cfg, &w, &mut st),
            Stage::Compare => compare_stage(&w, &mut st),
            Stage::Report => emit_report(&cfg.out_dir).map(|_| ()).map_err(|e| e.to_string()),
        };
        if let Err(cause) = result {
            marker.failed = Some(FailedStage {
                stage,
                cause: cause.clone(),
            });
            let _ = w.json("stage_marker.json", &marker);
            return Err(fail(stage)(cause));
        }
        marker.completed.push(stage);
        st.report.completed.push(stage);
        w.json("stage_marker.json", &marker).map_err(fail(stage))?;
        w.json("run_report.json", &st.report).map_err(fail(stage))?;
    }
    Ok(RunOutcome {
        completed: marker.completed,
        out_dir: cfg.out_dir.clone(),
        report: st.report,
    })
}

fn ingest_stage(cfg: &PipelineConfig, w: &Writer<'_>, st: &mut State) -> Result<(), String> {
    let open = |p: &Path| fs::File::open(p).map_err(|e| format!("{}: {e}", p.display()));
    let meter = ingest::parse_meter(open(&cfg.meter)?).map_err(|e| format!("{}: {e}", cfg.meter.display()))?;
    let survey = ingest::parse_survey(open(&cfg.survey)?).map_err(|e| format!("{}: {e}", cfg.survey.display()))?;
    let (cohort, report) = ingest::build_cohort(&meter, &survey);
    if cohort.socio.is_empty() {
        return Err("no household has both meter data and a survey record".into());
    }
    w.json("ingest_report.json", &report)?;
    for class in DayClass::ALL {
        w.text(&format!("profiles_{}.csv", class.as_str()), &profiles_csv(cohort.profiles(class)))?;
    }
    st.report.ingest = Some(report);
    st.cohort = Some(cohort);
    Ok(())
}

fn cluster_stage(cfg: &PipelineConfig, w: &Writer<'_>, st: &mut State) -> Result<(), String> {
    let cohort = st.cohort.as_ref().expect("ingest ran");
    for class in DayClass::ALL {
        let values: Vec<[f64; ingest::HOURS]> = cohort.profiles(class).iter().map(|p| p.values).collect();
        let n = values.len();
        let hi = cfg.k_range.1.min(n.saturating_sub(1));
        if hi < cfg.k_range.0 {
            return Err(format!("{class}: {n} profiles cannot support K range {:?}", cfg.k_range));
        }
        if hi < cfg.k_range.1 {
            log::warn!("{class}: K range capped at {hi} by {n} profiles");
        }
        let dist = Distances::with_budget(&values, cfg.distance_budget_mb.saturating_mul(1024 * 1024))
            .map_err(|e| e.to_string())?;
        let sel = cluster::select_k(&dist, (cfg.k_range.0, hi), cfg.restarts, cfg.seed, cfg.max_iter)
            .map_err(|e| format!("{class}: {e}"))?;
        let mut patterns = sel.best_fit().clone();
        patterns.day_class = Some(class);
        log::info!("{class}: best K = {}", sel.best_k);
        let art = ClusterArtifact {
            day_class: class,
            best_k: sel.best_k,
            curve: sel.curve,
            patterns,
        };
        w.json(&format!("cluster_{}.json", class.as_str()), &art)?;
        st.report.best_k.insert(class.as_str().to_string(), art.best_k);
        st.clusters.insert(class, art);
    }
    Ok(())
}

fn distribution_stage(w: &Writer<'_>, st: &mut State) -> Result<(), String> {
    let cohort = st.cohort.as_ref().expect("ingest ran");
    for (class, art) in &st.clusters {
        let d = cluster::pattern_distributions(cohort.profiles(*class), &art.patterns, *class);
        w.text(
            &format!("distributions_{}.csv", class.as_str()),
            &distributions_csv(&d, art.patterns.k),
        )?;
        st.dists.insert(*class, d);
    }
    Ok(())
}

fn featsel_stage(cfg: &PipelineConfig, w: &Writer<'_>, st: &mut State) -> Result<(), String> {
    let cohort = st.cohort.as_ref().expect("ingest ran");
    let by_id: BTreeMap<&str, &SocioRecord> =
        cohort.socio.iter().map(|s| (s.household_id.as_str(), s)).collect();
    let mut selected = Vec::new();
    for (class, dists) in &st.dists {
        let socio: Vec<&SocioRecord> = dists.iter().map(|d| by_id[d.household_id.as_str()]).collect();
        let columns = feature_columns(&socio);
        let k = dists.first().map_or(0, |d| d.probs.len());
        let mut names = Vec::new();
        for pattern in 0..k {
            let target: Vec<f64> = dists.iter().map(|d| d.probs[pattern]).collect();
            let opts = SelectOptions {
                bins: cfg.bins,
                mode: cfg.merit_mode,
                permutations: cfg.permutations,
                seed: cfg.seed,
            };
            let sub = featsel::select_subset(&columns, &target, &opts).map_err(|e| format!("{class} pattern {pattern}: {e}"))?;
            if sub.low_confidence {
                log::warn!("{class} pattern {pattern}: selection does not beat the permutation floor");
            }
            names.push(sub.members.clone());
            selected.push(SelectedSubset {
                day_class: *class,
                pattern,
                members: sub.members,
                merit: sub.merit,
                low_confidence: sub.low_confidence,
                noise_floor: sub.noise_floor,
            });
        }
        st.subsets.insert(*class, names);
    }
    w.json("selected_subsets.json", &selected)?;
    w.json("pearson_matrix.json", &correlation(cohort, &st.dists))?;
    Ok(())
}

/// Pearson matrix over the survey features and every pattern target of both
/// day classes, on households present in both classes.
fn correlation(cohort: &Cohort, dists: &BTreeMap<DayClass, Vec<PatternDistribution>>) -> CorrelationMatrix {
    let lookup: BTreeMap<DayClass, BTreeMap<&str, &Vec<f64>>> = dists
        .iter()
        .map(|(c, ds)| (*c, ds.iter().map(|d| (d.household_id.as_str(), &d.probs)).collect()))
        .collect();
    let socio: Vec<&SocioRecord> = cohort
        .socio
        .iter()
        .filter(|s| lookup.values().all(|m| m.contains_key(s.household_id.as_str())))
        .collect();
    let mut columns: Vec<(String, Vec<f64>)> = feature_columns(&socio)
        .into_iter()
        .map(|c| (c.name, c.values))
        .collect();
    for class in DayClass::ALL {
        let Some(m) = lookup.get(&class) else { continue };
        let k = m.values().next().map_or(0, |p| p.len());
        for j in 0..k {
            columns.push((
                format!("{}_p{j}", class.as_str()),
                socio.iter().map(|s| m[s.household_id.as_str()][j]).collect(),
            ));
        }
    }
    featsel::pearson_matrix(&columns)
}

fn train_stage(cfg: &PipelineConfig, w: &Writer<'_>, st: &mut State) -> Result<(), String> {
    let cohort = st.cohort.as_ref().expect("ingest ran");
    let registry = ModelRegistry::with_builtin();
    let strategies = registry.resolve(&cfg.models).map_err(|e| e.to_string())?;
    let mut hyper = cfg.hyper.clone();
    hyper.train.seed = cfg.seed;
    for (class, dists) in &st.dists {
        let data = build_dataset(&cohort.socio, dists);
        let split = Split::random(data.len(), cfg.split, cfg.seed).map_err(|e| format!("{class}: {e}"))?;
        w.json(&format!("split_{}.json", class.as_str()), &split)?;
        let ctx = FitContext {
            data: &data,
            split: &split,
            subsets: &st.subsets[class],
            hyper: &hyper,
        };
        let mut fitted = Vec::new();
        for s in &strategies {
            log::info!("{class}: fitting {}", s.name());
            let model = s.fit(&ctx).map_err(|e| format!("{class} {}: {e}", s.name()))?;
            let stem = format!("models/{}_{}", class.as_str(), s.name());
            w.json(&format!("{stem}.json"), &model.checkpoint())?;
            if let Some(log) = model.training_log() {
                w.text(&format!("{stem}_training_log.csv"), &log.to_csv())?;
            }
            fitted.push((s.name().to_string(), model));
        }
        st.models.insert(*class, fitted);
        st.splits.insert(*class, (data, split));
    }
    Ok(())
}

fn compare_stage(w: &Writer<'_>, st: &mut State) -> Result<(), String> {
    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    for (class, models) in &st.models {
        let (data, split) = &st.splits[class];
        for (name, model) in models {
            let avg_loss = baselines::average_loss_on(model.as_ref(), data, &split.test).map_err(|e| e.to_string())?;
            rows.push(ComparisonRow {
                model: name.clone(),
                day_class: *class,
                avg_loss,
            });
        }
        // Predicted-vs-true table for the last listed model (the proposed one by default).
        if let Some((name, model)) = models.last() {
            let pred = baselines::predict_rows(model.as_ref(), data, &split.test).map_err(|e| e.to_string())?;
            for (&i, p) in split.test.iter().zip(pred) {
                predictions.push(PredictionRow {
                    household_id: data.household_ids[i].clone(),
                    day_class: *class,
                    model: name.clone(),
                    true_p: data.targets[i].clone(),
                    predicted_p: p,
                });
            }
        }
    }
    w.json("comparison.json", &rows)?;
    w.json("predictions.json", &predictions)?;
    st.report.comparison = rows;
    Ok(())
}

fn read_artifact<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T, PipelineError> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|_| PipelineError::MissingArtifact(path.clone()))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Stage {
        stage: Stage::Report,
        cause: format!("{}: {e}", path.display()),
    })
}

pub const REPORT_FILES: [&str; 6] = [
    "silhouette_curve.csv",
    "pattern_shares.csv",
    "pearson_matrix.csv",
    "predictions.csv",
    "comparison.csv",
    "selected_subsets.csv",
];

/// Writes the report tables into `<dir>/report/` from stage artifacts.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let clusters: Vec<ClusterArtifact> = DayClass::ALL
        .iter()
        .map(|c| read_artifact(dir, &format!("cluster_{}.json", c.as_str())))
        .collect::<Result<_, _>>()?;
    let pearson: CorrelationMatrix = read_artifact(dir, "pearson_matrix.json")?;
    let predictions: Vec<PredictionRow> = read_artifact(dir, "predictions.json")?;
    let comparison: Vec<ComparisonRow> = read_artifact(dir, "comparison.json")?;
    let subsets: Vec<SelectedSubset> = read_artifact(dir, "selected_subsets.json")?;

    let mut curve = String::from("day_class,K,mean_SC\n");
    for c in &clusters {
        for p in &c.curve {
            let _ = writeln!(curve, "{},{},{:.6}", c.day_class, p.k, p.mean_sc);
        }
    }

    let shares: Vec<Vec<f64>> = clusters
        .iter()
        .map(|c| {
            let n = c.patterns.assignments.len() as f64;
            c.patterns.cluster_sizes().iter().map(|&s| 100.0 * s as f64 / n).collect()
        })
        .collect();
    let mut share_csv = String::from("pattern,weekday_pct,weekend_pct\n");
    let rows = shares.iter().map(Vec::len).max().unwrap_or(0);
    for j in 0..rows {
        let cell = |s: &Vec<f64>| s.get(j).map(|v| format!("{v:.4}")).unwrap_or_default();
        let _ = writeln!(share_csv, "{},{},{}", j, cell(&shares[0]), cell(&shares[1]));
    }

    let mut pred_csv = String::from("household_id,day_class,pattern,true_p,predicted_p\n");
    for r in &predictions {
        for (j, (t, p)) in r.true_p.iter().zip(&r.predicted_p).enumerate() {
            let _ = writeln!(pred_csv, "{},{},{},{:.6},{:.6}", r.household_id, r.day_class, j, t, p);
        }
    }

    let mut subset_csv = String::from("day_class,pattern,features,merit,low_confidence\n");
    for s in &subsets {
        let _ = writeln!(
            subset_csv,
            "{},{},{},{:.6},{}",
            s.day_class,
            s.pattern,
            s.members.join(";"),
            s.merit,
            s.low_confidence
        );
    }

    let out = dir.join("report");
    let w = Writer { dir: &out };
    let bodies = [
        curve,
        share_csv,
        pearson.to_csv(),
        pred_csv,
        baselines::comparison_csv(&comparison),
        subset_csv,
    ];
    let mut written = Vec::new();
    for (name, body) in REPORT_FILES.iter().zip(bodies) {
        w.text(name, &body).map_err(|cause| PipelineError::Stage {
            stage: Stage::Report,
            cause,
        })?;
        written.push(out.join(name));
    }
    Ok(written)
}
