//! Interchangeable pattern-distribution models behind one trait, registered
//! by name so runs can pick the compared set from configuration.
//!
//! Built-in strategies:
//!
//! | name         | model                                                        |
//! |--------------|--------------------------------------------------------------|
//! | `proposed`   | pattern-dependent ensemble on each pattern's selected subset |
//! | `gbt`        | boosted regression trees per pattern, softmax-renormalized   |
//! | `unified`    | one network with K softmax outputs                           |
//! | `complement` | ensemble whose head k reads the features *not* selected for k |
//! | `uniform`    | predicts 1/K everywhere                                      |

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::gbt::{gbt_fit, BoostedTreeModel, GbtConfig, GbtError};
use crate::ingest::DayClass;
use crate::neural::{self, softmax, Dataset, Grid, NeuralError, SoftmaxModel, Split, TrainConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Gbt(#[from] GbtError),
    #[error("pattern {pattern}: every feature is selected, the complement is empty")]
    EmptyComplement { pattern: usize },
    #[error("no feature is left unselected by all patterns")]
    EmptyUnselected,
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("model {0:?} registered twice")]
    Duplicate(String),
    #[error("expected {expected} selected subsets, got {got}")]
    SubsetCount { expected: usize, got: usize },
}

/// Input set for the unified network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnifiedInputs {
    /// Every feature.
    #[default]
    All,
    /// Features selected for no pattern.
    Unselected,
}

/// Input set for the boosted-tree regressors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeInputs {
    /// Features not selected for the pattern.
    #[default]
    Complement,
    Selected,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    pub grid: Grid,
    pub train: TrainConfig,
    pub gbt: GbtConfig,
    pub unified_inputs: UnifiedInputs,
    pub gbt_inputs: TreeInputs,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self {
            grid: Grid::default(),
            train: TrainConfig::default(),
            gbt: GbtConfig::default(),
            unified_inputs: UnifiedInputs::All,
            gbt_inputs: TreeInputs::Complement,
        }
    }
}

/// Everything a strategy needs to fit: the joined dataset, its split, and
/// the selected feature subset of every pattern.
pub struct FitContext<'a> {
    pub data: &'a Dataset,
    pub split: &'a Split,
    pub subsets: &'a [Vec<String>],
    pub hyper: &'a ModelHyper,
}

impl FitContext<'_> {
    fn check(&self) -> Result<(), ModelError> {
        let k = self.data.num_patterns();
        if self.subsets.len() != k {
            return Err(ModelError::SubsetCount {
                expected: k,
                got: self.subsets.len(),
            });
        }
        Ok(())
    }

    fn complement(&self, pattern: usize) -> Result<Vec<String>, ModelError> {
        let selected = &self.subsets[pattern];
        let rest: Vec<String> = self
            .data
            .feature_names
            .iter()
            .filter(|f| !selected.contains(f))
            .cloned()
            .collect();
        if rest.is_empty() {
            Err(ModelError::EmptyComplement { pattern })
        } else {
            Ok(rest)
        }
    }
}

/// A fitted model mapping one household's full feature vector to a
/// K-vector distribution.
pub trait PatternModel: Send + Sync {
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>, ModelError>;

    /// JSON checkpoint of the fitted state.
    fn checkpoint(&self) -> serde_json::Value;

    /// Per-epoch training log, for models trained by gradient descent.
    fn training_log(&self) -> Option<&neural::TrainingLog> {
        None
    }
}

pub trait ModelStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn fit(&self, ctx: &FitContext<'_>) -> Result<Box<dyn PatternModel>, ModelError>;
}

impl PatternModel for SoftmaxModel {
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(SoftmaxModel::predict(self, features)?)
    }

    fn checkpoint(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("model serializes")
    }

    fn training_log(&self) -> Option<&neural::TrainingLog> {
        Some(&self.log)
    }
}

fn grid_trained<F>(ctx: &FitContext<'_>, build: F) -> Result<Box<dyn PatternModel>, ModelError>
where
    F: Fn(usize, usize) -> Result<SoftmaxModel, NeuralError> + Sync,
{
    let res = neural::grid_search(&ctx.hyper.grid, ctx.data, ctx.split, &ctx.hyper.train, |cell| {
        build(cell.hidden_layers, cell.width)
    })?;
    Ok(Box::new(res.model))
}

pub struct ProposedEnsemble;

impl ModelStrategy for ProposedEnsemble {
    fn name(&self) -> &'static str {
        "proposed"
    }

    fn fit(&self, ctx: &FitContext<'_>) -> Result<Box<dyn PatternModel>, ModelError> {
        ctx.check()?;
        grid_trained(ctx, |layers, width| {
            SoftmaxModel::ensemble(&ctx.data.feature_names, ctx.subsets, layers, width, ctx.hyper.train.seed)
        })
    }
}

pub struct ComplementEnsemble;

impl ModelStrategy for ComplementEnsemble {
    fn name(&self) -> &'static str {
        "complement"
    }

    fn fit(&self, ctx: &FitContext<'_>) -> Result<Box<dyn PatternModel>, ModelError> {
        ctx.check()?;
        let complements = (0..ctx.subsets.len())
            .map(|k| ctx.complement(k))
            .collect::<Result<Vec<_>, _>>()?;
        grid_trained(ctx, |layers, width| {
            SoftmaxModel::ensemble(&ctx.data.feature_names, &complements, layers, width, ctx.hyper.train.seed)
        })
    }
}

pub struct UnifiedNetwork;

impl UnifiedNetwork {
    pub fn inputs(ctx: &FitContext<'_>) -> Result<Vec<String>, ModelError> {
        match ctx.hyper.unified_inputs {
            UnifiedInputs::All => Ok(ctx.data.feature_names.clone()),
            UnifiedInputs::Unselected => {
                let rest: Vec<String> = ctx
                    .data
                    .feature_names
                    .iter()
                    .filter(|f| ctx.subsets.iter().all(|s| !s.contains(f)))
                    .cloned()
                    .collect();
                if rest.is_empty() {
                    Err(ModelError::EmptyUnselected)
                } else {
                    Ok(rest)
                }
            }
        }
    }
}

impl ModelStrategy for UnifiedNetwork {
    fn name(&self) -> &'static str {
        "unified"
    }

    fn fit(&self, ctx: &FitContext<'_>) -> Result<Box<dyn PatternModel>, ModelError> {
        ctx.check()?;
        let inputs = Self::inputs(ctx)?;
        let k = ctx.data.num_patterns();
        grid_trained(ctx, |layers, width| {
            SoftmaxModel::unified(&ctx.data.feature_names, &inputs, k, layers, width, ctx.hyper.train.seed)
        })
    }
}

/// Per-pattern boosted regressors whose raw outputs pass through a softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub inputs: Vec<Vec<usize>>,
    pub input_names: Vec<Vec<String>>,
    pub models: Vec<BoostedTreeModel>,
}

impl TreeEnsemble {
    pub fn raw(&self, features: &[f64]) -> Vec<f64> {
        self.models
            .iter()
            .zip(&self.inputs)
            .map(|(m, idx)| {
                let x: Vec<f64> = idx.iter().map(|&i| features[i]).collect();
                m.predict(&x)
            })
            .collect()
    }
}

impl PatternModel for TreeEnsemble {
    fn predict(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        let width = self.inputs.iter().flatten().max().map_or(0, |m| m + 1);
        if features.len() < width {
            return Err(NeuralError::ArityMismatch {
                expected: width,
                got: features.len(),
            }
            .into());
        }
        Ok(softmax(&self.raw(features)))
    }

    fn checkpoint(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("trees serialize")
    }
}

pub struct BoostedTrees;

impl ModelStrategy for BoostedTrees {
    fn name(&self) -> &'static str {
        "gbt"
    }

    fn fit(&self, ctx: &FitContext<'_>) -> Result<Box<dyn PatternModel>, ModelError> {
        ctx.check()?;
        let names = &ctx.data.feature_names;
        let mut out = TreeEnsemble {
            inputs: Vec::new(),
            input_names: Vec::new(),
            models: Vec::new(),
        };
        for k in 0..ctx.subsets.len() {
            let chosen = match ctx.hyper.gbt_inputs {
                TreeInputs::Complement => ctx.complement(k)?,
                TreeInputs::Selected => ctx.subsets[k].clone(),
                TreeInputs::All => names.clone(),
            };
            let idx: Vec<usize> = chosen
                .iter()
                .filter_map(|c| names.iter().position(|n| n == c))
                .collect();
            let rows: Vec<Vec<f64>> = ctx
                .split
                .train
                .iter()
                .map(|&i| idx.iter().map(|&j| ctx.data.features[i][j]).collect())
                .collect();
            let target: Vec<f64> = ctx.split.train.iter().map(|&i| ctx.data.targets[i][k]).collect();
            out.models.push(gbt_fit(&rows, &target, &ctx.hyper.gbt, ctx.hyper.train.seed)?);
            out.inputs.push(idx);
            out.input_names.push(chosen);
        }
        Ok(Box::new(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformModel {
    pub k: usize,
}

impl PatternModel for UniformModel {
    fn predict(&self, _features: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(vec![1.0 / self.k as f64; self.k])
    }

    fn checkpoint(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializes")
    }
}

pub struct Uniform;

impl ModelStrategy for Uniform {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn fit(&self, ctx: &FitContext<'_>) -> Result<Box<dyn PatternModel>, ModelError> {
        Ok(Box::new(UniformModel {
            k: ctx.data.num_patterns(),
        }))
    }
}

/// Name-keyed strategies in registration order.
#[derive(Default)]
pub struct ModelRegistry {
    strategies: Vec<Box<dyn ModelStrategy>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtin() -> Self {
        let mut r = Self::new();
        for s in [
            Box::new(Uniform) as Box<dyn ModelStrategy>,
            Box::new(BoostedTrees),
            Box::new(UnifiedNetwork),
            Box::new(ComplementEnsemble),
            Box::new(ProposedEnsemble),
        ] {
            r.register(s).expect("built-in names are unique");
        }
        r
    }

    pub fn register(&mut self, strategy: Box<dyn ModelStrategy>) -> Result<(), ModelError> {
        if self.get(strategy.name()).is_some() {
            return Err(ModelError::Duplicate(strategy.name().to_string()));
        }
        self.strategies.push(strategy);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&dyn ModelStrategy> {
        self.strategies
            .iter()
            .find(|s| s.name() == name)
            .map(|s| s.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.iter().map(|s| s.name()).collect()
    }

    pub fn resolve<'a>(&'a self, names: &[String]) -> Result<Vec<&'a dyn ModelStrategy>, ModelError> {
        names
            .iter()
            .map(|n| self.get(n).ok_or_else(|| ModelError::UnknownModel(n.clone())))
            .collect()
    }
}

/// Predictions of `model` on the given rows.
pub fn predict_rows(model: &dyn PatternModel, data: &Dataset, rows: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
    rows.iter().map(|&i| model.predict(&data.features[i])).collect()
}

/// Mean over patterns of the per-pattern loss on `rows`.
pub fn average_loss_on(model: &dyn PatternModel, data: &Dataset, rows: &[usize]) -> Result<f64, ModelError> {
    let pred = predict_rows(model, data, rows)?;
    let truth: Vec<Vec<f64>> = rows.iter().map(|&i| data.targets[i].clone()).collect();
    Ok(neural::average_loss(&pred, &truth)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub day_class: DayClass,
    pub avg_loss: f64,
}

/// Percentage error reduction of `ours` relative to `base`.
pub fn reduction_pct(base: f64, ours: f64) -> f64 {
    (base - ours) / base * 100.0
}

/// `model,day_class,avg_eq15_loss,reduction_vs_each_benchmark_pct`, where
/// the last column lists `name=pct` against every earlier row of the same
/// day class.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("model,day_class,avg_eq15_loss,reduction_vs_each_benchmark_pct\n");
    for (i, row) in rows.iter().enumerate() {
        let reductions: Vec<String> = rows[..i]
            .iter()
            .filter(|r| r.day_class == row.day_class)
            .map(|r| format!("{}={:.1}", r.model, reduction_pct(r.avg_loss, row.avg_loss)))
            .collect();
        let _ = writeln!(
            out,
            "{},{},{:.6},{}",
            row.model,
            row.day_class,
            row.avg_loss,
            reductions.join(";")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let names: Vec<String> = (0..4).map(|i| format!("f{i}")).collect();
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..4).map(|_| rng.random_range(0..3) as f64).collect())
            .collect();
        let targets = features
            .iter()
            .map(|x| softmax(&[0.4 * x[0], 0.4 * x[1], 0.0]))
            .collect();
        Dataset {
            household_ids: (0..n).map(|i| i.to_string()).collect(),
            feature_names: names,
            features,
            targets,
        }
    }

    fn hyper() -> ModelHyper {
        ModelHyper {
            grid: Grid {
                hidden_layers: vec![1],
                widths: vec![4],
                learning_rates: vec![0.5],
            },
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            gbt: GbtConfig {
                trees: 10,
                ..GbtConfig::default()
            },
            ..ModelHyper::default()
        }
    }

    #[test]
    fn registry_lookup() {
        let r = ModelRegistry::with_builtin();
        assert_eq!(r.names(), vec!["uniform", "gbt", "unified", "complement", "proposed"]);
        assert!(r.get("proposed").is_some());
        assert!(matches!(
            r.resolve(&["nope".to_string()]),
            Err(ModelError::UnknownModel(_))
        ));
        let mut r = r;
        assert!(matches!(r.register(Box::new(Uniform)), Err(ModelError::Duplicate(_))));
    }

    #[test]
    fn complement_arity() {
        let data = dataset(60);
        let split = Split::random(60, [0.7, 0.15, 0.15], 0).unwrap();
        let subsets = vec![
            vec!["f0".to_string(), "f1".to_string()],
            vec!["f1".to_string()],
            vec!["f2".to_string()],
        ];
        let h = hyper();
        let ctx = FitContext {
            data: &data,
            split: &split,
            subsets: &subsets,
            hyper: &h,
        };
        let model = ComplementEnsemble.fit(&ctx).unwrap();
        let ckpt: SoftmaxModel = serde_json::from_value(model.checkpoint()).unwrap();
        let arities: Vec<usize> = ckpt.heads.iter().map(|h| h.mlp.inputs()).collect();
        assert_eq!(arities, vec![2, 3, 3]);

        let all = vec![data.feature_names.clone(), vec!["f1".into()], vec!["f2".into()]];
        let ctx = FitContext {
            subsets: &all,
            ..ctx
        };
        assert!(matches!(
            ComplementEnsemble.fit(&ctx),
            Err(ModelError::EmptyComplement { pattern: 0 })
        ));
    }

    #[test]
    fn unified_input_variants() {
        let data = dataset(40);
        let split = Split::random(40, [0.7, 0.15, 0.15], 0).unwrap();
        let subsets = vec![vec!["f0".to_string()], vec!["f1".to_string()], vec!["f0".to_string()]];
        let h = hyper();
        let ctx = FitContext {
            data: &data,
            split: &split,
            subsets: &subsets,
            hyper: &h,
        };
        assert_eq!(UnifiedNetwork::inputs(&ctx).unwrap().len(), 4);
        let h2 = ModelHyper {
            unified_inputs: UnifiedInputs::Unselected,
            ..h.clone()
        };
        let ctx = FitContext { hyper: &h2, ..ctx };
        assert_eq!(UnifiedNetwork::inputs(&ctx).unwrap(), vec!["f2".to_string(), "f3".to_string()]);
    }

    #[test]
    fn every_strategy_emits_distributions() {
        let data = dataset(60);
        let split = Split::random(60, [0.7, 0.15, 0.15], 0).unwrap();
        let subsets = vec![vec!["f0".to_string()], vec!["f1".to_string()], vec!["f2".to_string()]];
        let h = hyper();
        let ctx = FitContext {
            data: &data,
            split: &split,
            subsets: &subsets,
            hyper: &h,
        };
        let registry = ModelRegistry::with_builtin();
        for name in registry.names() {
            let model = registry.get(name).unwrap().fit(&ctx).unwrap();
            for row in predict_rows(model.as_ref(), &data, &split.test).unwrap() {
                assert_eq!(row.len(), 3);
                assert!(row.iter().all(|&p| p > 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn reductions_are_relative_to_the_baseline() {
        assert!((reduction_pct(0.134, 0.017) - 87.3).abs() < 0.05);
        let rows = vec![
            ComparisonRow {
                model: "gbt".into(),
                day_class: DayClass::Weekday,
                avg_loss: 0.134,
            },
            ComparisonRow {
                model: "proposed".into(),
                day_class: DayClass::Weekday,
                avg_loss: 0.017,
            },
        ];
        let csv = comparison_csv(&rows);
        assert!(csv.lines().nth(2).unwrap().ends_with(",gbt=87.3"));
    }
}
