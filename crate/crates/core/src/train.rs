//! Unsupervised training: loss construction on the autodiff tape, Adam, and
//! the spectral-efficiency and energy-efficiency training loops.
//!
//! Channels are handed to the loops in physical units together with the
//! power budget and noise power; the loops rescale them so that the network
//! always works with a unit budget and unit noise.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{precoders_from_edges, MultiCellBatch, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::gnn::{init_params, ArchSpec, GnnParams, ScaleAdapter};
use crate::linalg::ComplexMatrix;
use crate::scalar::Real;
use crate::scenario::MultiCellChannel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    NegativeSumRate,
    EeLagrangian,
}

/// Power-consumption model of the energy-efficiency objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    /// Inverse power-amplifier efficiency.
    pub rho: f64,
    /// Circuit power per antenna, W.
    pub p_c: f64,
    /// Static power, W.
    pub p_0: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self { rho: 1.0 / 0.311, p_c: 17.6, p_0: 43.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    /// Per-user minimum rate, bits/s/Hz.
    pub r_min: f64,
    /// Multiplier step size.
    pub beta: f64,
    pub lambda_init: f64,
    pub power: PowerModel,
    pub seed: u64,
    /// Saved after every epoch with a metadata record beside it.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
}

/// One-step schedule: the learning rate is multiplied by `factor` from
/// epoch `epoch` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub epoch: usize,
    pub factor: f64,
}

impl TrainConfig {
    pub fn se() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 100,
            epochs: 100,
            loss: LossKind::NegativeSumRate,
            r_min: 0.0,
            beta: 0.1,
            lambda_init: 1.0,
            power: PowerModel::default(),
            seed: 0,
            checkpoint: None,
            lr_decay: None,
        }
    }

    pub fn ee(r_min: f64) -> Self {
        Self { learning_rate: 0.001, loss: LossKind::EeLagrangian, r_min, ..Self::se() }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) if epoch >= d.epoch => self.learning_rate * d.factor,
            _ => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0) || !d.factor.is_finite() {
                return Err(invalid("lr_decay factor must be positive"));
            }
        }
        if !(self.r_min >= 0.0) {
            return Err(invalid("r_min must be >= 0"));
        }
        if !(self.beta >= 0.0) || !(self.lambda_init >= 0.0) {
            return Err(invalid("beta and lambda_init must be >= 0"));
        }
        let p = self.power;
        if !(p.rho > 0.0) || !(p.p_c >= 0.0) || !(p.p_0 >= 0.0) {
            return Err(invalid("power model constants must be non-negative with rho > 0"));
        }
        Ok(())
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_tensors(tensors: &[&Array2<T>]) -> Self {
        Self::new(&tensors.iter().map(|t| t.dim()).collect::<Vec<_>>())
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(params: &mut [&mut Array2<T>], grads: &[Array2<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != state.m[i].dim() {
            return Err(invalid(format!("shape mismatch at tensor {i}: {:?} vs {:?}", p.dim(), g.dim())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let c1 = T::one() - T::lit(state.beta1.powi(t));
    let c2 = T::one() - T::lit(state.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(state.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ndarray::Zip::from(&mut **p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Mean violation `relu(r_min - R_k)` over the epoch (EE only).
    pub violation: Option<f64>,
    /// Multiplier after the end-of-epoch update (EE only).
    pub lambda: Option<f64>,
    /// Validation metric: SE ratio in percent, or EE for the EE loss.
    pub validation: Option<f64>,
    /// Validation constraint-satisfaction ratio in percent (EE only).
    pub validation_csr: Option<f64>,
    /// Largest per-BS transmit power emitted, relative to the budget.
    pub max_power: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.lambda).collect()
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,loss,violation,lambda,validation,validation_csr,max_power,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.loss,
                opt(e.violation),
                opt(e.lambda),
                opt(e.validation),
                opt(e.validation_csr),
                e.max_power,
                e.seconds
            ));
        }
        s
    }
}

/// Metadata stored next to a training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub lambda: f64,
    pub adam_step: u64,
}

/// Channels plus the physical power budget and noise power.
#[derive(Debug, Clone)]
pub struct TrainSet<T> {
    pub channels: Vec<MultiCellChannel<T>>,
    pub p_max: T,
    pub sigma2: T,
}

impl<T: Real> TrainSet<T> {
    pub fn new(channels: Vec<MultiCellChannel<T>>, p_max: T, sigma2: T) -> Result<Self> {
        if !(p_max > T::zero()) || !(sigma2 > T::zero()) {
            return Err(invalid("p_max and sigma2 must be positive"));
        }
        Ok(Self { channels, p_max, sigma2 })
    }

    pub fn single_cell(channels: &[ComplexMatrix<T>], p_max: T, sigma2: T) -> Result<Self> {
        Self::new(channels.iter().cloned().map(MultiCellChannel::single).collect(), p_max, sigma2)
    }

    /// Channels scaled to the unit-budget, unit-noise convention.
    pub fn scaled(&self) -> Vec<MultiCellChannel<T>> {
        let s = (self.p_max / self.sigma2).sqrt();
        self.channels.iter().map(|h| h.scale(s)).collect()
    }
}

/// Held-out channels with the oracle sum-rate of each (SE validation).
#[derive(Debug, Clone)]
pub struct Validation<T> {
    pub set: TrainSet<T>,
    pub oracle_sum_rates: Option<Vec<f64>>,
}

/// Graph nodes of the loss for one same-shaped group of samples.
pub struct GroupLoss {
    /// Mean objective over the group (`-sum rate` or `-EE`).
    pub objective: Var,
    /// Mean `relu(r_min - R_k)` over users and samples.
    pub violation: Var,
    /// `B x M K` rates.
    pub rates: Var,
    /// Precoder edges after power normalization or projection.
    pub precoders: Var,
}

fn ones<T: Real>(tape: &Tape<T>, n: usize) -> Var {
    tape.constant(Array2::from_elem((n, 1), T::one()))
}

/// Builds the loss of one group of same-shaped, already-scaled channels.
/// `adapter` selects the energy-efficiency objective.
pub fn group_loss<T: Real>(
    tape: &Tape<T>,
    params: &GnnParams<T>,
    gnn_vars: &[Var],
    adapter: Option<(&ScaleAdapter<T>, &[Var])>,
    channels: &MultiCellBatch<T>,
    cfg: &TrainConfig,
    p_max: T,
) -> Result<GroupLoss> {
    let raw = params.forward_tape(tape, gnn_vars, channels)?;
    let h0 = &channels[0];
    let (batch, n, k, cells) = (channels.len(), h0.antennas(), h0.users(), h0.cells());
    let block = n * k;
    let r_min = T::lit(cfg.r_min);
    match (cfg.loss, adapter) {
        (LossKind::NegativeSumRate, _) => {
            let v = tape.normalize(raw, block, T::one(), T::zero());
            let rates = tape.rates(v, channels.clone(), T::one());
            let objective = tape.scale(tape.sum(rates), -T::one() / T::from_usize_lossy(batch));
            let violation = tape.mean(tape.relu(tape.add_const(tape.scale(rates, -T::one()), r_min)));
            Ok(GroupLoss { objective, violation, rates, precoders: v })
        }
        (LossKind::EeLagrangian, Some((a, avars))) => {
            if cells != 1 {
                return Err(invalid("energy-efficiency training is single-cell"));
            }
            let eta = a.forward_tape(tape, avars, k);
            let unit = tape.normalize(raw, block, T::one(), T::zero());
            let v = tape.project_power(tape.mul_scalar(eta, unit), block, T::one());
            let rates = tape.rates(v, channels.clone(), T::one());
            let sum_rate = tape.matmul(rates, ones(tape, k));
            let grid = crate::autodiff::Grid::batched(batch, block, 1);
            let power = tape.matmul(tape.sum_rows(tape.mul(v, v), grid, block), ones(tape, 2));
            let p = cfg.power;
            let denom = tape.add_const(
                tape.scale(power, T::lit(p.rho) * p_max),
                T::lit(n as f64 * p.p_c + p.p_0),
            );
            let ee = tape.div(sum_rate, denom);
            let objective = tape.scale(tape.mean(ee), -T::one());
            let violation = tape.mean(tape.relu(tape.add_const(tape.scale(rates, -T::one()), r_min)));
            Ok(GroupLoss { objective, violation, rates, precoders: v })
        }
        (LossKind::EeLagrangian, None) => Err(invalid("energy-efficiency loss needs a scale adapter")),
    }
}

/// Groups sample indices by channel shape, in first-seen-key order.
fn group_by_shape<T: Real>(channels: &[MultiCellChannel<T>], idx: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
    for &i in idx {
        let h = &channels[i];
        groups.entry((h.cells(), h.antennas(), h.users())).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Loss value, gradients and diagnostics for one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchGradient<T> {
    pub loss: T,
    /// GNN tensors followed by adapter tensors.
    pub grads: Vec<Array2<T>>,
    pub violation: T,
    pub max_power: T,
}

/// Loss `sum_g w_g (objective_g + lambda violation_g)` over the shape groups
/// of `idx`, with `w_g` the group's share of the batch, and its gradients.
pub fn batch_gradient<T: Real>(
    params: &GnnParams<T>,
    adapter: Option<&ScaleAdapter<T>>,
    scaled: &[MultiCellChannel<T>],
    idx: &[usize],
    cfg: &TrainConfig,
    lambda: T,
    p_max: T,
) -> Result<BatchGradient<T>> {
    if idx.is_empty() {
        return Err(invalid("empty batch"));
    }
    let tape = Tape::new();
    let gv = params.bind(&tape);
    let av = adapter.map(|a| a.bind(&tape));
    let total = T::from_usize_lossy(idx.len());
    let use_penalty = cfg.loss == LossKind::EeLagrangian;
    let mut terms = Vec::new();
    let mut violation = T::zero();
    let mut max_power = T::zero();
    for group in group_by_shape(scaled, idx) {
        let batch: MultiCellBatch<T> = Arc::new(group.iter().map(|&i| scaled[i].clone()).collect());
        let gl = group_loss(&tape, params, &gv, adapter.zip(av.as_deref()), &batch, cfg, p_max)?;
        let rates = tape.value(gl.rates);
        if let Some(bad) = rates.axis_iter(Axis(0)).position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric { sample: group[bad], message: "non-finite rate".into() });
        }
        let w = T::from_usize_lossy(group.len()) / total;
        let mut term = gl.objective;
        if use_penalty {
            term = tape.add(term, tape.scale(gl.violation, lambda));
        }
        terms.push(tape.scale(term, w));
        violation += w * tape.scalar_value(gl.violation);
        let v = tape.value(gl.precoders);
        let block = batch[0].antennas() * batch[0].users();
        for chunk in v.axis_chunks_iter(Axis(0), block) {
            max_power = max_power.max(chunk.iter().map(|x| *x * *x).sum());
        }
    }
    let loss = tape.add_all(&terms);
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(Error::Numeric { sample: idx[0], message: "non-finite loss".into() });
    }
    let mut g = tape.backward(loss);
    let mut grads: Vec<Array2<T>> = gv.iter().map(|&v| g.take(v)).collect();
    if let Some(av) = &av {
        grads.extend(av.iter().map(|&v| g.take(v)));
    }
    Ok(BatchGradient { loss: value, grads, violation, max_power })
}

fn save_checkpoint<T: Real>(
    cfg: &TrainConfig,
    params: &GnnParams<T>,
    adapter: Option<&ScaleAdapter<T>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    if let Some(path) = &cfg.checkpoint {
        crate::checkpoint::save(path, params, adapter)?;
        let json = serde_json::to_string_pretty(meta).map_err(|e| Error::Internal(e.to_string()))?;
        std::fs::write(meta_path(path), json)?;
    }
    Ok(())
}

/// Location of the metadata record written beside `checkpoint`.
pub fn meta_path(checkpoint: &std::path::Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Normalized (or projected) precoders of a trained policy in the
/// unit-budget convention, for already-scaled channels.
pub fn policy_precoders<T: Real>(
    params: &GnnParams<T>,
    adapter: Option<&ScaleAdapter<T>>,
    scaled: &[MultiCellChannel<T>],
) -> Result<Vec<Vec<ComplexMatrix<T>>>> {
    let mut out: Vec<Option<Vec<ComplexMatrix<T>>>> = vec![None; scaled.len()];
    let idx: Vec<usize> = (0..scaled.len()).collect();
    for group in group_by_shape(scaled, &idx) {
        for chunk in group.chunks(256) {
            let tape = Tape::new();
            let gv = params.bind(&tape);
            let batch: MultiCellBatch<T> = Arc::new(chunk.iter().map(|&i| scaled[i].clone()).collect());
            let raw = params.forward_tape(&tape, &gv, &batch)?;
            let block = batch[0].antennas() * batch[0].users();
            let unit = tape.normalize(raw, block, T::one(), T::zero());
            let v = match adapter {
                Some(a) => {
                    let av = a.bind(&tape);
                    let eta = a.forward_tape(&tape, &av, batch[0].users());
                    tape.project_power(tape.mul_scalar(eta, unit), block, T::one())
                }
                None => unit,
            };
            let vals = tape.value(v);
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric { sample: chunk[0], message: "non-finite precoder".into() });
            }
            for (pos, vs) in precoders_from_edges(&vals, &batch).into_iter().enumerate() {
                out[chunk[pos]] = Some(vs);
            }
        }
    }
    Ok(out.into_iter().map(|v| v.expect("every sample belongs to a group")).collect())
}

fn validate_se<T: Real>(params: &GnnParams<T>, val: &Validation<T>) -> Result<Option<f64>> {
    let Some(oracle) = &val.oracle_sum_rates else {
        return Ok(None);
    };
    let scaled = val.set.scaled();
    let vs = policy_precoders(params, None, &scaled)?;
    let mut learned = 0.0;
    for (h, v) in scaled.iter().zip(&vs) {
        learned += crate::wmmse::sum_rate_multicell(h, v, T::one())?.total.as_f64();
    }
    let oracle: f64 = oracle.iter().sum();
    if !(oracle > 0.0) {
        return Err(Error::Degenerate("oracle sum-rate is zero".into()));
    }
    Ok(Some(100.0 * learned / oracle))
}

fn validate_ee<T: Real>(
    params: &GnnParams<T>,
    adapter: &ScaleAdapter<T>,
    val: &Validation<T>,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let scaled = val.set.scaled();
    let vs = policy_precoders(params, Some(adapter), &scaled)?;
    let p = cfg.power;
    let (mut ee, mut met, mut users) = (0.0, 0usize, 0usize);
    for (h, v) in scaled.iter().zip(&vs) {
        let r = crate::wmmse::sum_rate_multicell(h, v, T::one())?;
        let tx = val.set.p_max.as_f64() * v[0].frobenius_norm_sqr().as_f64();
        ee += r.total.as_f64() / (p.rho * tx + h.antennas() as f64 * p.p_c + p.p_0);
        met += r.per_user.iter().filter(|x| x.as_f64() >= cfg.r_min).count();
        users += r.per_user.len();
    }
    Ok((ee / scaled.len().max(1) as f64, 100.0 * met as f64 / users.max(1) as f64))
}

/// Trained policy and its per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: GnnParams<T>,
    pub adapter: Option<ScaleAdapter<T>>,
    pub history: TrainHistory,
}

fn run<T: Real>(
    mut params: GnnParams<T>,
    mut adapter: Option<ScaleAdapter<T>>,
    data: &TrainSet<T>,
    cfg: &TrainConfig,
    validation: Option<&Validation<T>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.channels.is_empty() {
        return Err(invalid("empty training set"));
    }
    let scaled = data.scaled();
    let mut tensors: Vec<&Array2<T>> = params.tensors();
    if let Some(a) = &adapter {
        tensors.extend(a.tensors());
    }
    let mut adam = AdamState::for_tensors(&tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    let mut lambda = cfg.lambda_init;
    let ee = cfg.loss == LossKind::EeLagrangian;
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut viol_sum, mut max_power) = (0.0, 0.0, 0.0f64);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let lr = cfg.learning_rate_at(epoch);
        for idx in &batches {
            let bg = batch_gradient(&params, adapter.as_ref(), &scaled, idx, cfg, T::lit(lambda), data.p_max)?;
            loss_sum += bg.loss.as_f64();
            viol_sum += bg.violation.as_f64();
            max_power = max_power.max(bg.max_power.as_f64());
            let mut slots = params.tensors_mut();
            if let Some(a) = adapter.as_mut() {
                slots.extend(a.tensors_mut());
            }
            adam_step(&mut slots, &bg.grads, &mut adam, lr)?;
        }
        let nb = batches.len() as f64;
        let violation = viol_sum / nb;
        if ee {
            lambda = (lambda + cfg.beta * violation).max(0.0);
        }
        let (validation_metric, validation_csr) = match (validation, &adapter) {
            (Some(v), Some(a)) if ee => {
                let (e, c) = validate_ee(&params, a, v, cfg)?;
                (Some(e), Some(c))
            }
            (Some(v), _) => (validate_se(&params, v)?, None),
            _ => (None, None),
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / nb,
            violation: ee.then_some(violation),
            lambda: ee.then_some(lambda),
            validation: validation_metric,
            validation_csr,
            max_power,
            seconds: start.elapsed().as_secs_f64(),
        });
        let meta = CheckpointMeta { epoch, lambda, adam_step: adam.step };
        save_checkpoint(cfg, &params, adapter.as_ref(), &meta)?;
    }
    Ok(TrainOutcome { params, adapter, history })
}

/// Minimizes the mean negative sum-rate of `spec`'s GNN over `data`.
/// Single-cell and multi-cell architectures share this loop.
pub fn train_se<T: Real>(
    data: &TrainSet<T>,
    spec: &ArchSpec,
    cfg: &TrainConfig,
    validation: Option<&Validation<T>>,
) -> Result<TrainOutcome<T>> {
    if cfg.loss != LossKind::NegativeSumRate {
        return Err(invalid("train_se needs the negative sum-rate loss"));
    }
    let params = init_params(spec, cfg.seed)?;
    train_se_from(params, data, cfg, validation)
}

/// [`train_se`] starting from given parameters.
pub fn train_se_from<T: Real>(
    params: GnnParams<T>,
    data: &TrainSet<T>,
    cfg: &TrainConfig,
    validation: Option<&Validation<T>>,
) -> Result<TrainOutcome<T>> {
    run(params, None, data, cfg, validation)
}

/// Lagrangian energy-efficiency training of a GNN with a scale adapter.
pub fn train_ee<T: Real>(
    data: &TrainSet<T>,
    spec: &ArchSpec,
    cfg: &TrainConfig,
    validation: Option<&Validation<T>>,
) -> Result<TrainOutcome<T>> {
    if cfg.loss != LossKind::EeLagrangian {
        return Err(invalid("train_ee needs the Lagrangian EE loss"));
    }
    let params = init_params(spec, cfg.seed)?;
    let adapter = ScaleAdapter::new(cfg.seed.wrapping_add(1));
    run(params, Some(adapter), data, cfg, validation)
}
