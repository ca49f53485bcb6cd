//! Two-phase training: each subnetwork with the front-end on its own density level,
//! then the whole network on every patch with `L = L_mse + lambda * L_ce`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use pandense_tensor::{AdamConfig, AdamState, NormMode, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{render_patch, Manifest};
use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::{generate_density_map, sum_pool_downsample, DensityMap, KernelPolicy, PointAnnotation};
use crate::metrics::mae_rmse;
use crate::model::PaDNet;
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the level-classification term.
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs_pretrain: usize,
    pub epochs_joint: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
    pub val_fraction: f64,
    /// Keep the front-end fixed in every stage.
    pub freeze_fen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs_pretrain: 200,
            epochs_joint: 200,
            batch_size: 8,
            seed: 0,
            eval_every: 1,
            val_fraction: 0.1,
            freeze_fen: false,
        }
    }
}

impl TrainConfig {
    /// Optimizer settings of the original recipe, which assumes a pretrained front-end.
    pub fn pretrained_front_end() -> Self {
        Self { lr: 1e-5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return invalid(format!("need lambda >= 0, lr > 0, weight_decay >= 0: {self:?}"));
        }
        if self.epochs_pretrain == 0 || self.epochs_joint == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return invalid("epochs, batch_size and eval_every must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return invalid(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr, self.weight_decay)
    }
}

/// One training example: planar pixels, the downsampled ground truth and its level.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub target: DensityMap,
    pub level: usize,
}

impl Sample {
    pub fn from_raster(raster: &Raster, points: &[[f64; 2]], level: usize, policy: &KernelPolicy, factor: usize) -> Result<Self> {
        let ann = PointAnnotation::new(raster.width, raster.height, points.to_vec());
        let full = generate_density_map(&ann, policy)?;
        let target = sum_pool_downsample(&full.pad_to_multiple(factor), factor)?;
        Ok(Self {
            image: raster.to_planar(),
            channels: raster.channels,
            height: raster.height,
            width: raster.width,
            target,
            level,
        })
    }

    pub fn count(&self) -> f64 {
        self.target.sum()
    }
}

/// Renders every manifest patch into a sample. `lookup` resolves a source image id.
pub fn build_samples<'a>(
    manifest: &Manifest,
    lookup: impl Fn(&str) -> Option<&'a Raster>,
    policy: &KernelPolicy,
    factor: usize,
) -> Result<Vec<Sample>> {
    manifest
        .patches
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let src = lookup(&rec.source_image)
                .ok_or_else(|| Error::Invalid(format!("patch {i}: unknown source image {:?}", rec.source_image)))?;
            let level = rec.level.ok_or_else(|| Error::Invalid(format!("patch {i} has no level")))?;
            let raster = render_patch(src, rec, manifest.resize_to)?;
            Sample::from_raster(&raster, &rec.points, level, policy, factor)
        })
        .collect()
}

/// Stacked inputs `[B, C, H, W]`, targets `[B, 1, h, w]` and levels of `idx`.
pub fn make_batch<T: Scalar>(samples: &[Sample], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
    let Some(&first) = idx.first() else { return invalid("empty batch") };
    let s0 = &samples[first];
    let (mut x, mut y, mut levels) = (Vec::new(), Vec::new(), Vec::with_capacity(idx.len()));
    for &i in idx {
        let s = &samples[i];
        if (s.channels, s.height, s.width) != (s0.channels, s0.height, s0.width) {
            return invalid("batch mixes sample sizes");
        }
        x.extend(s.image.iter().map(|&v| T::of(f64::from(v))));
        y.extend(s.target.values.iter().map(|&v| T::of(f64::from(v))));
        levels.push(s.level);
    }
    let b = idx.len();
    let xs = Tensor::new(&[b, s0.channels, s0.height, s0.width], x)?;
    let ys = Tensor::new(&[b, 1, s0.target.height, s0.target.width], y)?;
    Ok((xs, ys, levels))
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub ce: Option<Var>,
}

/// `L = L_mse + lambda * L_ce` on the tape. With `lambda = 0` the total is the MSE node
/// itself and no classification term is recorded.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    weights: Option<Var>,
    levels: &[usize],
    lambda: f64,
) -> Result<LossVars> {
    let mse = tape.mse_loss(pred, target)?;
    if lambda == 0.0 {
        return Ok(LossVars { total: mse, mse, ce: None });
    }
    let Some(w) = weights else {
        return invalid("lambda > 0 needs classifier weights, but the model has none");
    };
    let ce = tape.cross_entropy(w, levels)?;
    let scaled = tape.mul_scalar(ce, T::of(lambda));
    let total = tape.add(mse, scaled)?;
    Ok(LossVars { total, mse, ce: Some(ce) })
}

/// Loss values `(L, L_mse, L_ce)` for given tensors, independent of any model.
pub fn compute_loss<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    weights: Option<&Tensor<T>>,
    levels: &[usize],
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::inference();
    let p = tape.constant(pred.clone());
    let g = tape.constant(gt.clone());
    let w = weights.map(|w| tape.constant(w.clone()));
    let l = loss_on_tape(&mut tape, p, g, w, levels, lambda)?;
    let ce = match l.ce {
        Some(c) => tape.scalar_value(c)?.as_f64(),
        None => 0.0,
    };
    Ok((tape.scalar_value(l.total)?.as_f64(), tape.scalar_value(l.mse)?.as_f64(), ce))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub level: Option<usize>,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_mse")]
    pub mse: f64,
    #[serde(rename = "L_ce")]
    pub ce: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_mae: Option<f64>,
}

/// Per-step losses, streamed as JSON lines when a sink is attached.
#[derive(Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    sink: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends records to `path` as they are produced.
    pub fn streaming(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self { steps: Vec::new(), sink: Some(BufWriter::new(f)) })
    }

    fn push(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::Invalid(format!("train log: {e}")))?;
        }
        self.steps.push(rec);
        Ok(())
    }

    /// Attaches a validation MAE to the latest record.
    fn mark_validation(&mut self, mae: f64) -> Result<()> {
        if let Some(last) = self.steps.last_mut() {
            last.val_mae = Some(mae);
            if let Some(w) = &mut self.sink {
                let line = serde_json::json!({ "step": last.step, "phase": last.phase, "level": last.level, "val_mae": mae });
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::Invalid(format!("train log: {e}")))?;
            }
        }
        Ok(())
    }
}

/// Seeded split holding out `fraction` of every level (at least one sample when the
/// level has two or more). Returns `(train, validation)` indices, ascending.
pub fn split_validation(levels: &[usize], n_levels: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for l in 0..n_levels {
        let mut members: Vec<usize> = (0..levels.len()).filter(|&i| levels[i] == l).collect();
        members.shuffle(&mut rng);
        let mut k = (members.len() as f64 * fraction).round() as usize;
        if fraction > 0.0 && k == 0 && members.len() >= 2 {
            k = 1;
        }
        val.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub mse: f64,
    pub ce: f64,
}

/// One train-mode step of the full network. `zero_ids` have their gradients cleared
/// before the update.
pub fn joint_step<T: Scalar>(
    model: &mut PaDNet<T>,
    adam: &mut AdamState<T>,
    samples: &[Sample],
    idx: &[usize],
    lambda: f64,
    zero_ids: &[usize],
) -> Result<StepLoss> {
    let (x, y, levels) = make_batch::<T>(samples, idx)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, xv, NormMode::Train)?;
    let yv = tape.constant(y);
    let lambda = if out.weights.is_some() { lambda } else { 0.0 };
    let l = loss_on_tape(&mut tape, out.density, yv, out.weights, &levels, lambda)?;
    finish_step(model, adam, &mut tape, l, zero_ids)
}

/// One train-mode step of front-end plus subnetwork `level` on its own maps.
pub fn level_step<T: Scalar>(
    model: &mut PaDNet<T>,
    adam: &mut AdamState<T>,
    samples: &[Sample],
    idx: &[usize],
    level: usize,
    zero_ids: &[usize],
) -> Result<StepLoss> {
    let (x, y, _) = make_batch::<T>(samples, idx)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let pred = model.level_forward(&mut tape, level, xv, NormMode::Train)?;
    let yv = tape.constant(y);
    let l = loss_on_tape(&mut tape, pred, yv, None, &[], 0.0)?;
    finish_step(model, adam, &mut tape, l, zero_ids)
}

fn finish_step<T: Scalar>(
    model: &mut PaDNet<T>,
    adam: &mut AdamState<T>,
    tape: &mut Tape<T>,
    l: LossVars,
    zero_ids: &[usize],
) -> Result<StepLoss> {
    tape.backward(l.total)?;
    model.params.zero_grad();
    model.params.accumulate_grads(tape);
    for &id in zero_ids {
        model.params.get_mut(id).value.zero_grad();
    }
    adam.step(&mut model.params);
    model.params.zero_grad();
    let ce = match l.ce {
        Some(c) => tape.scalar_value(c)?.as_f64(),
        None => 0.0,
    };
    let loss = tape.scalar_value(l.total)?.as_f64();
    if !loss.is_finite() {
        return Err(Error::Invalid(format!("training diverged: loss {loss}")));
    }
    Ok(StepLoss { loss, mse: tape.scalar_value(l.mse)?.as_f64(), ce })
}

const EVAL_BATCH: usize = 16;

/// Eval-mode estimated counts of `idx`; `level` selects a single subnetwork.
pub fn predict_counts<T: Scalar>(model: &mut PaDNet<T>, samples: &[Sample], idx: &[usize], level: Option<usize>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _, _) = make_batch::<T>(samples, chunk)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let pred = match level {
            Some(l) => model.level_forward(&mut tape, l, xv, NormMode::Eval)?,
            None => model.forward(&mut tape, xv, NormMode::Eval)?.density,
        };
        let per = tape.value(pred).numel() / chunk.len();
        out.extend(tape.data(pred).chunks(per).map(|c| c.iter().map(|v| v.as_f64()).sum::<f64>()));
    }
    Ok(out)
}

/// Eval-mode count MAE and RMSE over `idx`.
pub fn evaluate<T: Scalar>(model: &mut PaDNet<T>, samples: &[Sample], idx: &[usize], level: Option<usize>) -> Result<(f64, f64)> {
    let est = predict_counts(model, samples, idx, level)?;
    let gt: Vec<f64> = idx.iter().map(|&i| samples[i].count()).collect();
    mae_rmse(&est, &gt)
}

/// Eval-mode classifier accuracy against sample levels over `idx`.
pub fn classifier_accuracy<T: Scalar>(model: &mut PaDNet<T>, samples: &[Sample], idx: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _, levels) = make_batch::<T>(samples, chunk)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, xv, NormMode::Eval)?;
        let Some(w) = out.weights else { return invalid("model has no classifier") };
        let n = model.levels();
        for (row, &l) in tape.data(w).chunks(n).zip(&levels) {
            let arg = (0..n).max_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite")).expect("n >= 1");
            correct += usize::from(arg == l);
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

fn shuffled(idx: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.shuffle(rng);
    v
}

/// Best validation results of phase one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub best_val_mae: Vec<f64>,
    pub best_epoch: Vec<usize>,
    /// Epoch whose front-end was kept (best mean validation MAE over levels).
    pub fen_epoch: usize,
}

/// Phase one. Epochs run outermost; within each, every level trains the front-end and
/// its own subnetwork on its training share with the MSE loss. Each subnetwork keeps its
/// best-validation state; the front-end keeps the state of the epoch with the lowest
/// mean validation MAE. Subnetworks of other levels are never touched.
pub fn pretrain_subnetworks<T: Scalar>(
    model: &mut PaDNet<T>,
    samples: &[Sample],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let n = model.levels();
    let by_level = |set: &[usize], l: usize| -> Vec<usize> { set.iter().copied().filter(|&i| samples[i].level == l).collect() };
    let train_l: Vec<Vec<usize>> = (0..n).map(|l| by_level(train, l)).collect();
    let val_l: Vec<Vec<usize>> = (0..n).map(|l| by_level(val, l)).collect();
    for l in 0..n {
        if train_l[l].is_empty() {
            return invalid(format!("density level {l} has no training patches"));
        }
    }
    let groups = model.groups().clone();
    let mut adams: Vec<AdamState<T>> = (0..n).map(|_| AdamState::new(cfg.adam(), &model.params)).collect();
    let zero: Vec<usize> = if cfg.freeze_fen { groups.fen.clone() } else { Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = model.clone();
    let mut outcome = PretrainOutcome { best_val_mae: vec![f64::INFINITY; n], best_epoch: vec![0; n], fen_epoch: 0 };
    let mut best_mean = f64::INFINITY;
    let mut step = log.steps.iter().filter(|s| s.phase == "pretrain").count();

    for epoch in 0..cfg.epochs_pretrain {
        let validate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs_pretrain;
        let mut maes = Vec::with_capacity(n);
        for l in 0..n {
            for batch in shuffled(&train_l[l], &mut rng).chunks(cfg.batch_size) {
                let s = level_step(model, &mut adams[l], samples, batch, l, &zero)?;
                log.push(StepRecord { step, phase: "pretrain".into(), level: Some(l), loss: s.loss, mse: s.mse, ce: s.ce, val_mae: None })?;
                step += 1;
            }
            if !validate {
                continue;
            }
            let eval_idx = if val_l[l].is_empty() { &train_l[l] } else { &val_l[l] };
            let (mae, _) = evaluate(model, samples, eval_idx, Some(l))?;
            log.mark_validation(mae)?;
            maes.push(mae);
            if mae < outcome.best_val_mae[l] {
                outcome.best_val_mae[l] = mae;
                outcome.best_epoch[l] = epoch;
                best.copy_from(model, &groups.dan[l]);
            }
        }
        if validate {
            let mean = maes.iter().sum::<f64>() / n as f64;
            if mean < best_mean {
                best_mean = mean;
                outcome.fen_epoch = epoch;
                best.copy_from(model, &groups.fen);
            }
            log::info!("pretrain epoch {epoch}: val mae {maes:?}");
        }
    }
    *model = best;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointOutcome {
    pub best_val_mae: f64,
    pub best_epoch: usize,
    pub final_loss: f64,
}

/// Phase two: every parameter trains on every training patch with the composite loss;
/// the best-validation state is kept.
pub fn joint_train<T: Scalar>(
    model: &mut PaDNet<T>,
    samples: &[Sample],
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<JointOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return invalid("no training patches");
    }
    let lambda = if model.spec().has_classifier() { cfg.lambda } else { 0.0 };
    let zero: Vec<usize> = if cfg.freeze_fen { model.groups().fen.clone() } else { Vec::new() };
    let mut adam = AdamState::new(cfg.adam(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a6f_696e_74);
    let eval_idx = if val.is_empty() { train } else { val };
    let mut best = model.clone();
    let mut outcome = JointOutcome { best_val_mae: f64::INFINITY, best_epoch: 0, final_loss: f64::NAN };
    let mut step = log.steps.iter().filter(|s| s.phase == "joint").count();
    for epoch in 0..cfg.epochs_joint {
        for batch in shuffled(train, &mut rng).chunks(cfg.batch_size) {
            let s = joint_step(model, &mut adam, samples, batch, lambda, &zero)?;
            log.push(StepRecord { step, phase: "joint".into(), level: None, loss: s.loss, mse: s.mse, ce: s.ce, val_mae: None })?;
            outcome.final_loss = s.loss;
            step += 1;
        }
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs_joint {
            let (mae, _) = evaluate(model, samples, eval_idx, None)?;
            log.mark_validation(mae)?;
            log::info!("joint epoch {epoch}: val mae {mae:.4}");
            if mae < outcome.best_val_mae {
                outcome.best_val_mae = mae;
                outcome.best_epoch = epoch;
                best = model.clone();
            }
        }
    }
    *model = best;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_loss() {
        let pred = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let gt = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        let (l, mse, ce) = compute_loss(&pred, &gt, Some(&w), &[0], 0.1).unwrap();
        assert_eq!(mse, 4.0);
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - (4.0 + 0.1 * std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_is_pure_mse() {
        let pred = Tensor::<f32>::new(&[1, 1, 1, 2], vec![0.3, -0.7]).unwrap();
        let gt = Tensor::<f32>::new(&[1, 1, 1, 2], vec![0.1, 0.2]).unwrap();
        let (l, mse, ce) = compute_loss(&pred, &gt, None, &[], 0.0).unwrap();
        assert_eq!(l, mse);
        assert_eq!(ce, 0.0);
        assert!(compute_loss(&pred, &gt, None, &[0], 0.5).is_err());
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        let pred = Tensor::<f64>::full(&[1, 1, 2, 2], 0.25);
        let w = Tensor::<f64>::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let (l, _, _) = compute_loss(&pred, &pred, Some(&w), &[0], 1.0).unwrap();
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn split_is_stratified() {
        let levels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let (train, val) = split_validation(&levels, 2, 0.1, 3);
        assert_eq!(val.len(), 4);
        assert_eq!(val.iter().filter(|&&i| levels[i] == 0).count(), 2);
        assert_eq!(train.len() + val.len(), 40);
        assert_eq!(split_validation(&levels, 2, 0.1, 3), (train, val));
    }
}
