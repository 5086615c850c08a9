//! Two-stage optimization. Stage 1 trains the branches one level at a time,
//! coarsest first, with the trunk and every other branch frozen; stage 2
//! fine-tunes everything jointly on the summed objective.

pub mod augment;
pub mod optim;
pub mod schedule;

use serde::Serialize;

pub use augment::{augment_sample, AugmentConfig};
pub use optim::{sgd_update, OptimizerState};
pub use schedule::{plateau_lr, PlateauSchedule};

use crate::data::{batch_order, Dataset};
use crate::error::{HseError, Result};
use crate::eval::{level_predictions, per_level_accuracy, predict_dataset};
use crate::losses::LevelLoss;
use crate::model::{branch_prefix, predictions, HseModel, LevelOutput};
use crate::rng::SplitMix64;
use crate::taxonomy::{LabelPath, Taxonomy};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    /// 1 or 2.
    pub stage: u8,
    pub lr: f64,
    /// Epoch budget; per level in stage 1.
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub max_drops: usize,
    pub seed: u64,
}

impl StagePlan {
    pub fn stage1() -> Self {
        StagePlan {
            stage: 1,
            lr: 0.001,
            epochs: 10,
            patience: 5,
            min_delta: 1e-4,
            max_drops: 2,
            seed: 0,
        }
    }

    pub fn stage2() -> Self {
        StagePlan {
            stage: 2,
            lr: 0.0001,
            ..StagePlan::stage1()
        }
    }

    /// Whether `name` is optimized while training `level` (0-based; only
    /// meaningful in stage 1).
    pub fn trainable(&self, name: &str, level: usize) -> bool {
        match self.stage {
            1 => name.starts_with(&format!("{}.", branch_prefix(level))),
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stage == 1 || self.stage == 2) {
            return Err(HseError::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HseError::Config(format!("stage {} learning rate must be positive", self.stage)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub stage1: StagePlan,
    pub stage2: StagePlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 0.00005,
            augment: AugmentConfig::default(),
            stage1: StagePlan::stage1(),
            stage2: StagePlan::stage2(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HseError::Config("batch size must be positive".into()));
        }
        self.augment.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.stage1.seed = seed;
        self.stage2.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelLossRecord {
    pub level: usize,
    pub classification: f64,
    pub regularization: f64,
    pub combined: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub stage: u8,
    /// Level being trained (stage 1 only), 1-based.
    pub level: Option<usize>,
    pub epoch: usize,
    /// Batch-mean losses averaged over the epoch, for the levels in the objective.
    pub losses: Vec<LevelLossRecord>,
    pub total: f64,
    /// Accuracy on the augmented training batches, for every level evaluated.
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Rate used during this epoch.
    pub lr: f64,
    pub seed: u64,
}

/// JSON lines, keys sorted.
pub fn to_jsonl(records: &[EpochRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&serde_json::to_value(r)?)?);
        out.push('\n');
    }
    Ok(out)
}

/// Graph handles of one level's objective terms, each a batch mean.
#[derive(Debug, Clone, Copy)]
pub struct LevelObjective {
    pub classification: Var,
    pub regularization: Option<Var>,
    pub combined: Var,
}

/// Classification over every loss head plus, when label regularization is
/// on and a parent level exists, `γ ·` KL against the extended parent scores.
pub fn level_objective(
    g: &mut Graph,
    model: &HseModel,
    taxonomy: &Taxonomy,
    outs: &[LevelOutput],
    level: usize,
    targets: &[usize],
) -> Result<LevelObjective> {
    let n = targets.len() as f64;
    let mut classification: Option<Var> = None;
    for head in outs[level].loss_heads() {
        let ce = g.cross_entropy(head, targets)?;
        let ce = g.sum(ce);
        classification = Some(match classification {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    let classification = g.scale(classification.expect("every level has a head"), 1.0 / n);
    if level == 0 || !model.config.enable_sglr {
        return Ok(LevelObjective {
            classification,
            regularization: None,
            combined: classification,
        });
    }
    let extended = g.gather_cols(outs[level - 1].fused(), taxonomy.parents(level).to_vec())?;
    let kl = g.kl_divergence(extended, outs[level].fused(), model.config.temperature)?;
    let kl = g.sum(kl);
    let regularization = g.scale(kl, 1.0 / n);
    let weighted = g.scale(regularization, model.config.gamma());
    let combined = g.add(classification, weighted)?;
    Ok(LevelObjective {
        classification,
        regularization: Some(regularization),
        combined,
    })
}

/// Values of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub levels: Vec<(usize, LevelLoss)>,
    pub total: f64,
    /// Correct fused predictions per evaluated level.
    pub correct: Vec<usize>,
}

/// Forward, objective, backward on one batch; returns named gradients of
/// the trainable parameters. `objective_levels` are summed into the loss;
/// levels up to their maximum are evaluated.
pub fn compute_gradients(
    model: &HseModel,
    taxonomy: &Taxonomy,
    images: &Tensor,
    labels: &[LabelPath],
    trainable: &dyn Fn(&str) -> bool,
    objective_levels: &[usize],
) -> Result<(StepResult, Vec<(String, Tensor)>)> {
    let last = *objective_levels.iter().max().expect("non-empty objective");
    let mut g = Graph::new();
    let b = model.bind(&mut g, trainable);
    let x = g.constant(images.clone());
    let trunk = model.trunk_forward(&mut g, &b, x)?;
    let outs = model.branches_forward(&mut g, &b, trunk, last)?;

    let mut total: Option<Var> = None;
    let mut levels = Vec::new();
    for &level in objective_levels {
        let targets: Vec<usize> = labels.iter().map(|l| l.level(level)).collect();
        let obj = level_objective(&mut g, model, taxonomy, &outs, level, &targets)?;
        let value = |v: Var| g.value(v).data()[0];
        levels.push((
            level,
            LevelLoss {
                classification: value(obj.classification),
                regularization: obj.regularization.map_or(0.0, value),
                combined: value(obj.combined),
            },
        ));
        total = Some(match total {
            Some(t) => g.add(t, obj.combined)?,
            None => obj.combined,
        });
    }
    let total = total.expect("non-empty objective");
    let total_value = g.value(total).data()[0];
    if !total_value.is_finite() {
        return Err(HseError::NonFinite(format!("training loss ({total_value})")));
    }
    let correct = outs
        .iter()
        .enumerate()
        .map(|(level, o)| {
            predictions(g.value(o.fused()))
                .iter()
                .zip(labels)
                .filter(|(&p, l)| p == l.level(level))
                .count()
        })
        .collect();

    g.backward_scalar(total)?;
    let mut grads = Vec::new();
    for name in model.params.names() {
        let v = b.var(name)?;
        if g.requires_grad(v) {
            let grad = g.grad(v).expect("trainable parameter");
            grad.check_finite(name)?;
            grads.push((name.to_string(), grad));
        }
    }
    Ok((
        StepResult {
            levels,
            total: total_value,
            correct,
        },
        grads,
    ))
}

fn check_data(model: &HseModel, taxonomy: &Taxonomy, sets: &[&Dataset]) -> Result<()> {
    model.config.check_taxonomy(taxonomy)?;
    for d in sets {
        if let Some(s) = d.samples.iter().find(|s| !taxonomy.is_consistent(&s.label)) {
            return Err(HseError::Taxonomy(format!(
                "sample {} has a label path {:?} outside the taxonomy",
                s.path, s.label.0
            )));
        }
    }
    Ok(())
}

/// Augmented training batch for the given sample indices.
pub fn training_batch(data: &Dataset, idx: &[usize], aug: &AugmentConfig, seed: u64, keys: &[u64]) -> Result<Tensor> {
    let images = idx
        .iter()
        .map(|&i| {
            let mut k = keys.to_vec();
            k.push(i as u64);
            let mut rng = SplitMix64::derive(seed, &k);
            augment_sample(&data.samples[i].image.to_tensor(), aug, Some(&mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&images)
}

/// Shared epoch loop of both stages.
struct Phase<'a> {
    stage: u8,
    /// Level trained in stage 1.
    level: Option<usize>,
    objective_levels: Vec<usize>,
    plan: &'a StagePlan,
}

fn run_phase(
    model: &mut HseModel,
    taxonomy: &Taxonomy,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    phase: Phase,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let plan = phase.plan;
    let mut opt = OptimizerState::new(plan.lr, cfg.momentum, cfg.weight_decay)?;
    let mut schedule = PlateauSchedule::new(plan.lr, plan.patience, plan.min_delta, plan.max_drops);
    let level_key = phase.level.map_or(u64::MAX, |l| l as u64);
    let order_seed = SplitMix64::derive(plan.seed, &[phase.stage as u64, level_key]).next_u64();
    let trained_level = phase.level.unwrap_or(0);
    let trainable = |name: &str| plan.trainable(name, trained_level);
    let evaluated = phase.objective_levels.iter().max().unwrap() + 1;
    let mut records = Vec::with_capacity(plan.epochs);

    for epoch in 0..plan.epochs {
        let lr = opt.lr;
        let mut sums: Vec<LevelLoss> = vec![LevelLoss::default(); phase.objective_levels.len()];
        let mut total = 0.0;
        let mut correct = vec![0usize; evaluated];
        for idx in batch_order(train.len(), cfg.batch_size, order_seed, epoch as u64, true) {
            let keys = [phase.stage as u64, level_key, epoch as u64];
            let images = training_batch(train, &idx, &cfg.augment, plan.seed, &keys)?;
            let labels: Vec<LabelPath> = idx.iter().map(|&i| train.samples[i].label.clone()).collect();
            let (step, grads) =
                compute_gradients(model, taxonomy, &images, &labels, &trainable, &phase.objective_levels)?;
            opt.step(&mut model.params, &grads)?;
            let w = idx.len() as f64;
            for (acc, (_, l)) in sums.iter_mut().zip(&step.levels) {
                acc.classification += w * l.classification;
                acc.regularization += w * l.regularization;
                acc.combined += w * l.combined;
            }
            total += w * step.total;
            for (c, s) in correct.iter_mut().zip(&step.correct) {
                *c += s;
            }
        }
        let n = train.len().max(1) as f64;
        let val_accuracy = if val.is_empty() {
            Vec::new()
        } else {
            let scores = predict_dataset(model, val, &cfg.augment, 32)?;
            per_level_accuracy(&level_predictions(&scores), &val.labels())?
        };
        if !val_accuracy.is_empty() {
            let watched = match phase.level {
                Some(l) => val_accuracy[l],
                None => val_accuracy.iter().sum::<f64>() / val_accuracy.len() as f64,
            };
            opt.lr = schedule.observe(watched);
        }
        let record = EpochRecord {
            stage: phase.stage,
            level: phase.level.map(|l| l + 1),
            epoch: epoch + 1,
            losses: phase
                .objective_levels
                .iter()
                .zip(&sums)
                .map(|(&level, l)| LevelLossRecord {
                    level: level + 1,
                    classification: l.classification / n,
                    regularization: l.regularization / n,
                    combined: l.combined / n,
                })
                .collect(),
            total: total / n,
            train_accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
            val_accuracy,
            lr,
            seed: plan.seed,
        };
        on_epoch(&record)?;
        records.push(record);
    }
    Ok(records)
}

/// Level-wise branch training, coarsest level first; the trunk and all
/// branches other than the current one stay fixed.
pub fn train_stage1(
    model: &mut HseModel,
    taxonomy: &Taxonomy,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_data(model, taxonomy, &[train, val])?;
    let mut records = Vec::new();
    for level in 0..model.config.levels() {
        let phase = Phase {
            stage: 1,
            level: Some(level),
            objective_levels: vec![level],
            plan: &cfg.stage1,
        };
        records.extend(run_phase(model, taxonomy, train, val, cfg, phase, on_epoch)?);
    }
    Ok(records)
}

/// Joint fine-tuning of every parameter on the summed objective.
pub fn train_stage2(
    model: &mut HseModel,
    taxonomy: &Taxonomy,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    check_data(model, taxonomy, &[train, val])?;
    let phase = Phase {
        stage: 2,
        level: None,
        objective_levels: (0..model.config.levels()).collect(),
        plan: &cfg.stage2,
    };
    run_phase(model, taxonomy, train, val, cfg, phase, on_epoch)
}
