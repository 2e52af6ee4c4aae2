//! Per-instance information bottleneck: noise injection after a chosen
//! encoder layer, variational KL information estimate, joint loss, gradient
//! descent on the keep-mask parameters, and the token attribution read-out.
//!
//! With T|x ~ N(mu*x + (1-mu)*m, (1-mu)^2 s^2) and Q = N(m, s^2), the
//! per-coordinate divergence has the closed form
//!     KL = -ln(1-mu) + ((1-mu)^2 + mu^2 z^2) / 2 - 1/2,   z = (x - m) / s,
//! which is validated against a Monte-Carlo estimator in the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::model::{
    forward_lower, logits_from_hidden, param_tensors, cross_entropy, Instance, ModelCheckpoint,
};
use crate::tensor::{sigmoid_scalar, Tape, Tensor};

pub const STD_FLOOR: f64 = 1e-6;
const ONE_MINUS_MU_FLOOR: f64 = 1e-12;

/// How noise statistics are pooled over the hidden representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    /// One (mean, std) per feature coordinate, pooled over token positions.
    PerFeature,
    /// One (mean, std) per (position, feature) coordinate.
    PerPosition,
}

/// Per-coordinate Gaussian statistics of the layer-l hidden representation,
/// estimated over a calibration set with PAD positions excluded.
#[derive(Clone, Debug)]
pub struct NoiseStats {
    pub mode: StatsMode,
    pub layer: usize,
    pub n_instances: usize,
    pub seq_len: usize,
    pub d_model: usize,
    /// Length d_model (per-feature) or seq_len * d_model (per-position).
    pub mean: Vec<f64>,
    /// Same length as mean; floored at STD_FLOOR.
    pub std: Vec<f64>,
}

impl NoiseStats {
    fn coord(&self, pos: usize, feat: usize) -> usize {
        match self.mode {
            StatsMode::PerFeature => feat,
            StatsMode::PerPosition => pos * self.d_model + feat,
        }
    }

    /// Mean and std expanded to the full [seq_len, d_model] layout.
    pub fn expanded(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.seq_len * self.d_model;
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for pos in 0..self.seq_len {
            for feat in 0..self.d_model {
                let c = self.coord(pos, feat);
                mean[pos * self.d_model + feat] = self.mean[c];
                std[pos * self.d_model + feat] = self.std[c];
            }
        }
        (mean, std)
    }
}

/// Estimates per-coordinate mean and population standard deviation of the
/// layer-l output across calibration instances, real-token positions only.
pub fn estimate_noise_stats(
    ckpt: &ModelCheckpoint,
    calibration: &[Instance],
    layer: usize,
    mode: StatsMode,
) -> Result<NoiseStats> {
    if calibration.is_empty() {
        return Err(Error::Input("empty calibration set".into()));
    }
    let cfg = &ckpt.config;
    let (seq, d) = (cfg.max_seq_len, cfg.d_model);
    let n_coords = match mode {
        StatsMode::PerFeature => d,
        StatsMode::PerPosition => seq * d,
    };
    let mut sum = vec![0.0; n_coords];
    let mut sumsq = vec![0.0; n_coords];
    let mut count = vec![0usize; n_coords];

    let params = param_tensors(ckpt, false);
    let mut used = 0usize;
    for inst in calibration {
        if inst.n_real() == 0 {
            continue; // all-PAD instances are excluded
        }
        used += 1;
        let tape = Tape::new();
        let hidden = forward_lower(&tape, &params, cfg, inst, layer)?;
        let hv = hidden.to_vec();
        for pos in 0..seq {
            if !inst.mask[pos] {
                continue;
            }
            for feat in 0..d {
                let c = match mode {
                    StatsMode::PerFeature => feat,
                    StatsMode::PerPosition => pos * d + feat,
                };
                let v = hv[pos * d + feat];
                sum[c] += v;
                sumsq[c] += v * v;
                count[c] += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::Input(
            "calibration set contains only all-PAD instances".into(),
        ));
    }
    let mut mean = vec![0.0; n_coords];
    let mut std = vec![STD_FLOOR; n_coords];
    for c in 0..n_coords {
        if count[c] > 0 {
            let m = sum[c] / count[c] as f64;
            mean[c] = m;
            let var = (sumsq[c] / count[c] as f64 - m * m).max(0.0);
            std[c] = var.sqrt().max(STD_FLOOR);
        }
    }
    Ok(NoiseStats {
        mode,
        layer,
        n_instances: used,
        seq_len: seq,
        d_model: d,
        mean,
        std,
    })
}

/// Bottleneck hyperparameters; defaults follow the method's reference
/// settings (alpha_init 5, 10 noise duplicates, lr 1, 10 steps).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub layer: usize,
    pub beta: f64,
    /// When set, beta is re-estimated per instance as 10 * ce / kl at
    /// initialization, falling back to `beta` if the estimate degenerates.
    pub auto_beta: bool,
    pub steps: usize,
    pub lr: f64,
    pub alpha_init: f64,
    pub duplicates: usize,
    pub seed: u64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            layer: 1,
            beta: 1e-5,
            auto_beta: false,
            steps: 10,
            lr: 1.0,
            alpha_init: 5.0,
            duplicates: 10,
            seed: 0,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::Input("beta must be > 0".into()));
        }
        if self.steps < 1 || self.duplicates < 1 {
            return Err(Error::Input("steps and duplicates must be >= 1".into()));
        }
        Ok(())
    }
}

/// (cross entropy, kl sum, total) per optimization step.
pub type LossRecord = (f64, f64, f64);

/// Result of one per-instance bottleneck optimization.
#[derive(Clone, Debug)]
pub struct BottleneckState {
    pub config: BottleneckConfig,
    /// Effective beta after optional auto estimation.
    pub beta_used: f64,
    /// Learned alpha, [seq_len, d_model] row-major.
    pub alpha: Vec<f64>,
    pub seq_len: usize,
    pub d_model: usize,
    /// steps + 1 entries; entry 0 is the initial evaluation.
    pub trace: Vec<LossRecord>,
}

impl BottleneckState {
    pub fn mu(&self) -> Vec<f64> {
        self.alpha.iter().map(|&a| sigmoid_scalar(a)).collect()
    }

    /// Mean keep-weight over real-token coordinates.
    pub fn mean_mu(&self, mask: &[bool]) -> f64 {
        let mu = self.mu();
        let mut sum = 0.0;
        let mut n = 0usize;
        for pos in 0..self.seq_len {
            if !mask[pos] {
                continue;
            }
            for feat in 0..self.d_model {
                sum += mu[pos * self.d_model + feat];
                n += 1;
            }
        }
        sum / n.max(1) as f64
    }
}

/// Per-coordinate closed-form KL of P(T|x) against Q(T).
pub fn kl_closed_form(mu: f64, z: f64) -> f64 {
    let om = (1.0 - mu).max(ONE_MINUS_MU_FLOOR);
    -om.ln() + (om * om + mu * mu * z * z) / 2.0 - 0.5
}

/// The reference empirical rule beta ~ 10 * ce / kl; None when degenerate
/// (caller falls back to the configured default).
pub fn estimate_beta(ce_at_init: f64, kl_at_init: f64) -> Option<f64> {
    if kl_at_init <= 0.0 {
        return None;
    }
    let beta = (10.0 * ce_at_init) / kl_at_init;
    (beta > 0.0).then_some(beta)
}

fn draw_noise(stats_mean: &[f64], stats_std: &[f64], rng: &mut ChaCha12Rng) -> Vec<f64> {
    stats_mean
        .iter()
        .zip(stats_std)
        .map(|(&m, &s)| {
            let n: f64 = rng.sample(StandardNormal);
            m + s * n
        })
        .collect()
}

/// T = mu (.) X + (1 - mu) (.) eps, with mu = sigmoid(alpha) and the noise
/// sample treated as a constant (reparameterization). PAD positions pass
/// through unchanged. Differentiable with respect to `alpha`.
pub fn inject_noise(
    tape: &Tape,
    x: &Tensor,
    alpha: &Tensor,
    stats: &NoiseStats,
    mask: &[bool],
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    let shape = x.shape();
    if alpha.shape() != shape {
        return Err(Error::Shape {
            op: "inject_noise",
            left: alpha.shape(),
            right: shape,
        });
    }
    let (mean, std) = stats.expanded();
    let eps = Tensor::new(shape.clone(), draw_noise(&mean, &std, rng))?;
    let mu = tape.sigmoid(alpha)?;
    let one_minus_mu = tape.add_scalar(&tape.neg(&mu), 1.0);
    let t = tape.add(&tape.mul(&mu, x)?, &tape.mul(&one_minus_mu, &eps)?)?;
    // PAD passthrough (mu forced to 1 there): T = m*T + (1-m)*X
    let m2 = mask_2d(&shape, mask)?;
    let inv = tape.add_scalar(&tape.neg(&m2), 1.0);
    tape.add(&tape.mul(&m2, &t)?, &tape.mul(&inv, x)?)
}

fn mask_2d(shape: &[usize], mask: &[bool]) -> Result<Tensor> {
    let (seq, d) = (shape[0], shape[1]);
    if mask.len() != seq {
        return Err(Error::Shape {
            op: "mask_2d",
            left: vec![mask.len()],
            right: shape.to_vec(),
        });
    }
    let mut data = vec![0.0; seq * d];
    for pos in 0..seq {
        if mask[pos] {
            data[pos * d..(pos + 1) * d].fill(1.0);
        }
    }
    Tensor::new(vec![seq, d], data)
}

/// Differentiable per-coordinate KL tensor; PAD coordinates contribute 0.
pub fn kl_tensor(tape: &Tape, alpha: &Tensor, z: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let mu = tape.sigmoid(alpha)?;
    let om = tape.clamp_min(&tape.add_scalar(&tape.neg(&mu), 1.0), ONE_MINUS_MU_FLOOR);
    let z2 = tape.mul(z, z)?;
    let quad = tape.add(&tape.mul(&om, &om)?, &tape.mul(&tape.mul(&mu, &mu)?, &z2)?)?;
    let kl = tape.add(
        &tape.neg(&tape.log(&om)),
        &tape.add_scalar(&tape.scale(&quad, 0.5), -0.5),
    )?;
    let m2 = mask_2d(&alpha.shape(), mask)?;
    tape.mul(&kl, &m2)
}

/// Joint loss: cross entropy plus beta times the masked KL sum, with the
/// cross entropy averaged over noise duplicates.
pub fn iba_loss(
    tape: &Tape,
    ce_mean: &Tensor,
    kl_sum: &Tensor,
    beta: f64,
) -> Result<(Tensor, f64, f64)> {
    if beta <= 0.0 {
        return Err(Error::Input("beta must be > 0".into()));
    }
    let total = tape.add(ce_mean, &tape.scale(kl_sum, beta))?;
    Ok((total, ce_mean.item()?, kl_sum.item()?))
}

struct StepEval {
    ce: f64,
    kl: f64,
    total: f64,
    grad: Option<Vec<f64>>,
}

/// Fits the bottleneck for one instance. The model checkpoint is read-only;
/// only alpha is updated, by plain gradient descent (no momentum).
pub fn fit_bottleneck(
    ckpt: &ModelCheckpoint,
    instance: &Instance,
    target: usize,
    config: &BottleneckConfig,
    stats: &NoiseStats,
) -> Result<BottleneckState> {
    config.validate()?;
    if stats.layer != config.layer {
        return Err(Error::Input(format!(
            "noise stats were calibrated for layer {}, config wants layer {}",
            stats.layer, config.layer
        )));
    }
    let cfg = &ckpt.config;
    if target >= cfg.n_classes {
        return Err(Error::Input(format!("target {target} out of range")));
    }
    let (seq, d) = (cfg.max_seq_len, cfg.d_model);
    let params = param_tensors(ckpt, false);

    // layer-l output, a constant during the bottleneck optimization
    let x_data = {
        let tape = Tape::new();
        forward_lower(&tape, &params, cfg, instance, config.layer)?.to_vec()
    };
    let x = Tensor::new(vec![seq, d], x_data.clone())?;
    let (mean, std) = stats.expanded();
    let z_data: Vec<f64> = x_data
        .iter()
        .zip(mean.iter().zip(&std))
        .map(|(&v, (&m, &s))| (v - m) / s)
        .collect();
    let z = Tensor::new(vec![seq, d], z_data)?;
    let (noise_mean, noise_std) = (mean, std);

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut alpha_data = vec![config.alpha_init; seq * d];

    let evaluate = |alpha_data: &[f64],
                        beta: f64,
                        with_grad: bool,
                        rng: &mut ChaCha12Rng|
     -> Result<StepEval> {
        let tape = Tape::new();
        let alpha = {
            let t = Tensor::new(vec![seq, d], alpha_data.to_vec())?;
            if with_grad {
                t.with_grad()
            } else {
                t
            }
        };
        let mu = tape.sigmoid(&alpha)?;
        let one_minus_mu = tape.add_scalar(&tape.neg(&mu), 1.0);
        let m2 = mask_2d(&[seq, d], &instance.mask)?;
        let inv_m2 = tape.add_scalar(&tape.neg(&m2), 1.0);

        let mut ce_sum: Option<Tensor> = None;
        for _ in 0..config.duplicates {
            let eps = Tensor::new(
                vec![seq, d],
                draw_noise(&noise_mean, &noise_std, rng),
            )?;
            let t_noised = tape.add(&tape.mul(&mu, &x)?, &tape.mul(&one_minus_mu, &eps)?)?;
            let t_full = tape.add(&tape.mul(&m2, &t_noised)?, &tape.mul(&inv_m2, &x)?)?;
            let logits =
                logits_from_hidden(&tape, &params, cfg, &t_full, &instance.mask, config.layer)?;
            let ce = cross_entropy(&tape, &logits, target)?;
            ce_sum = Some(match ce_sum {
                None => ce,
                Some(acc) => tape.add(&acc, &ce)?,
            });
        }
        let ce_mean = tape.scale(&ce_sum.expect("duplicates >= 1"), 1.0 / config.duplicates as f64);
        let kl = kl_tensor(&tape, &alpha, &z, &instance.mask)?;
        let kl_sum = tape.sum_all(&kl);
        let (total, ce_v, kl_v) = iba_loss(&tape, &ce_mean, &kl_sum, beta)?;
        let total_v = total.item()?;
        let grad = if with_grad {
            tape.backward(&total)?;
            Some(alpha.grad().unwrap_or_else(|| vec![0.0; seq * d]))
        } else {
            None
        };
        Ok(StepEval {
            ce: ce_v,
            kl: kl_v,
            total: total_v,
            grad,
        })
    };

    let mut beta = config.beta;
    if config.auto_beta {
        let probe = evaluate(&alpha_data, beta, false, &mut rng)?;
        match estimate_beta(probe.ce, probe.kl) {
            Some(b) => beta = b,
            None => {
                eprintln!(
                    "warning: beta estimate degenerate (ce={}, kl={}), using configured beta {}",
                    probe.ce, probe.kl, config.beta
                );
            }
        }
    }

    let mut trace: Vec<LossRecord> = Vec::with_capacity(config.steps + 1);
    for step in 0..config.steps {
        let eval = evaluate(&alpha_data, beta, true, &mut rng)?;
        if !eval.total.is_finite() {
            return Err(Error::Optimization {
                step,
                message: "non-finite loss".into(),
                trace,
            });
        }
        trace.push((eval.ce, eval.kl, eval.total));
        let grad = eval.grad.expect("gradient requested");
        for (a, g) in alpha_data.iter_mut().zip(&grad) {
            *a -= config.lr * g;
        }
    }
    let final_eval = evaluate(&alpha_data, beta, false, &mut rng)?;
    if !final_eval.total.is_finite() {
        return Err(Error::Optimization {
            step: config.steps,
            message: "non-finite loss".into(),
            trace,
        });
    }
    trace.push((final_eval.ce, final_eval.kl, final_eval.total));

    Ok(BottleneckState {
        config: config.clone(),
        beta_used: beta,
        alpha: alpha_data,
        seq_len: seq,
        d_model: d,
        trace,
    })
}

/// Token scores: per real token, the sum over feature coordinates of the
/// closed-form KL at the fitted alpha. PAD is excluded; the CLS entry leads.
pub fn attribution_from_state(
    state: &BottleneckState,
    x_data: &[f64],
    stats: &NoiseStats,
    instance: &Instance,
    ckpt: &ModelCheckpoint,
    target: usize,
) -> Result<AttributionMap> {
    let (seq, d) = (state.seq_len, state.d_model);
    let (mean, std) = stats.expanded();
    let mut scores = Vec::new();
    for pos in 0..seq {
        if !instance.mask[pos] {
            continue;
        }
        let mut s = 0.0;
        for feat in 0..d {
            let i = pos * d + feat;
            let mu = sigmoid_scalar(state.alpha[i]);
            let z = (x_data[i] - mean[i]) / std[i];
            s += kl_closed_form(mu, z);
        }
        scores.push(s);
    }
    let map = AttributionMap {
        method: "iba".into(),
        layer: state.config.layer,
        beta: state.beta_used,
        tokens: instance.real_tokens(&ckpt.vocab),
        scores,
        target,
        seed: state.config.seed,
    };
    map.validate()?;
    Ok(map)
}

/// Full per-instance pipeline: fit, then read out token scores.
pub fn iba_attribution(
    ckpt: &ModelCheckpoint,
    instance: &Instance,
    target: usize,
    config: &BottleneckConfig,
    stats: &NoiseStats,
) -> Result<(AttributionMap, BottleneckState)> {
    let state = fit_bottleneck(ckpt, instance, target, config, stats)?;
    let x_data = {
        let tape = Tape::new();
        let params = param_tensors(ckpt, false);
        forward_lower(&tape, &params, &ckpt.config, instance, config.layer)?.to_vec()
    };
    let map = attribution_from_state(&state, &x_data, stats, instance, ckpt, target)?;
    Ok((map, state))
}
