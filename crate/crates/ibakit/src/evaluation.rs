//! Degradation test: remove top-scored tokens, re-score with the original
//! model, average, normalize, and summarize as the absolute drop at 11%
//! removal. Also the layer and beta sweeps built on the same pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{instance_seed, AttributionMap};
use crate::baselines::{integrated_gradients, lime_lite, random_attribution, IGConfig, SurrogateConfig};
use crate::error::{Error, Result};
use crate::iba::{estimate_noise_stats, iba_attribution, BottleneckConfig, NoiseStats, StatsMode};
use crate::model::{argmax, forward_probs, Instance, ModelCheckpoint, CLS_ID, PAD_ID, UNK_ID};

pub const HEADLINE_FRACTION: f64 = 0.11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Iba,
    Ig,
    LimeLite,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Iba => "iba",
            Method::Ig => "ig",
            Method::LimeLite => "lime-lite",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iba" => Ok(Method::Iba),
            "ig" => Ok(Method::Ig),
            "lime-lite" => Ok(Method::LimeLite),
            "random" => Ok(Method::Random),
            other => Err(Error::Usage(format!(
                "unknown method '{other}'; valid methods: iba, ig, lime-lite, random"
            ))),
        }
    }
}

/// Whether attribution targets the gold label or the model's prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPolicy {
    Gold,
    Pred,
}

/// How token removal is realized; delete-and-shift is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RemovalMode {
    Delete,
    UnkSubstitute,
}

/// Settings shared by a batch of attribution/degradation jobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fractions: Vec<f64>,
    pub seed: u64,
    pub bottleneck: BottleneckConfig,
    pub ig: IGConfig,
    pub surrogate: SurrogateConfig,
    pub target: TargetPolicy,
    pub removal: RemovalMode,
    pub stats_mode: StatsMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fractions: default_fraction_grid(),
            seed: 0,
            bottleneck: BottleneckConfig::default(),
            ig: IGConfig::default(),
            surrogate: SurrogateConfig::default(),
            target: TargetPolicy::Gold,
            removal: RemovalMode::Delete,
            stats_mode: StatsMode::PerFeature,
        }
    }
}

/// Dense early where the headline metric lives: 0, 0.02..0.10, 0.11, 0.15,
/// then 0.20 to 1.00 in steps of 0.05.
pub fn default_fraction_grid() -> Vec<f64> {
    let mut grid = vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.11, 0.15];
    let mut f: f64 = 0.20;
    while f < 1.0 + 1e-9 {
        grid.push((f * 100.0).round() / 100.0);
        f += 0.05;
    }
    grid
}

fn validate_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.first() != Some(&0.0) || fractions.last() != Some(&1.0) {
        return Err(Error::Input("fraction grid must start at 0 and end at 1".into()));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("fractions must be strictly increasing".into()));
    }
    Ok(())
}

fn resolve_target(ckpt: &ModelCheckpoint, instance: &Instance, policy: TargetPolicy) -> Result<usize> {
    match policy {
        TargetPolicy::Gold => Ok(instance.label),
        TargetPolicy::Pred => Ok(argmax(&forward_probs(ckpt, instance)?)),
    }
}

/// Runs one method on one instance. IBA requires calibrated noise stats.
pub fn attribute_instance(
    ckpt: &ModelCheckpoint,
    instance: &Instance,
    index: usize,
    method: Method,
    cfg: &EvalConfig,
    stats: Option<&NoiseStats>,
) -> Result<AttributionMap> {
    let target = resolve_target(ckpt, instance, cfg.target)?;
    let seed = instance_seed(cfg.seed, index);
    match method {
        Method::Iba => {
            let stats = stats.ok_or_else(|| {
                Error::Contract("IBA attribution needs calibrated noise stats".into())
            })?;
            let mut bcfg = cfg.bottleneck.clone();
            bcfg.seed = seed;
            let (map, _) = iba_attribution(ckpt, instance, target, &bcfg, stats)?;
            Ok(map)
        }
        Method::Ig => integrated_gradients(ckpt, instance, target, &cfg.ig),
        Method::LimeLite => {
            let mut scfg = cfg.surrogate.clone();
            scfg.seed = seed;
            lime_lite(ckpt, instance, target, &scfg)
        }
        Method::Random => random_attribution(ckpt, instance, target, seed),
    }
}

/// Removes the k highest-scored real non-CLS tokens (ties: earlier position
/// first), shifts left, re-pads, rebuilds the mask. CLS is never removed.
pub fn degrade_instance(
    instance: &Instance,
    attribution: &AttributionMap,
    k: usize,
    mode: RemovalMode,
) -> Result<Instance> {
    let real_positions: Vec<usize> = (0..instance.mask.len())
        .filter(|&p| instance.mask[p])
        .collect();
    if attribution.scores.len() != real_positions.len() {
        return Err(Error::Contract(format!(
            "attribution covers {} tokens, instance has {} real tokens",
            attribution.scores.len(),
            real_positions.len()
        )));
    }
    // candidate list excludes the CLS entry at index 0
    let n_candidates = real_positions.len().saturating_sub(1);
    if k > n_candidates {
        return Err(Error::Range(format!(
            "k = {k} exceeds {n_candidates} removable tokens"
        )));
    }
    let mut order: Vec<usize> = (1..real_positions.len()).collect();
    order.sort_by(|&a, &b| {
        attribution.scores[b]
            .partial_cmp(&attribution.scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let removed: std::collections::HashSet<usize> =
        order[..k].iter().map(|&i| real_positions[i]).collect();

    let seq = instance.ids.len();
    let mut out = instance.clone();
    match mode {
        RemovalMode::Delete => {
            let mut ids = vec![CLS_ID];
            for &p in &real_positions[1..] {
                if !removed.contains(&p) {
                    ids.push(instance.ids[p]);
                }
            }
            let real = ids.len();
            ids.resize(seq, PAD_ID);
            out.ids = ids;
            out.mask = (0..seq).map(|i| i < real).collect();
        }
        RemovalMode::UnkSubstitute => {
            for &p in &removed {
                out.ids[p] = UNK_ID;
            }
        }
    }
    Ok(out)
}

/// Mean target-class probability per removal fraction, one method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub method: String,
    pub fractions: Vec<f64>,
    pub p_mean: Vec<f64>,
    pub n: usize,
}

impl DegradationCurve {
    /// Original (fraction 0) mean probability.
    pub fn original(&self) -> f64 {
        self.p_mean[0]
    }

    /// Fully degraded (fraction 1) mean probability.
    pub fn fully_degraded(&self) -> f64 {
        *self.p_mean.last().unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NormalizedCurve {
    pub method: String,
    pub fractions: Vec<f64>,
    pub d_norm: Vec<f64>,
}

/// Runs the degradation protocol for one method. Attribution is computed
/// once per instance and reused across fractions; every probability is
/// evaluated with the original checkpoint.
pub fn degradation_curve(
    ckpt: &ModelCheckpoint,
    dataset: &[Instance],
    method: Method,
    cfg: &EvalConfig,
    stats: Option<&NoiseStats>,
) -> Result<DegradationCurve> {
    if dataset.is_empty() {
        return Err(Error::Input("empty evaluation dataset".into()));
    }
    validate_fractions(&cfg.fractions)?;

    // per-instance probability rows, computed in parallel, reduced in order
    let rows: Vec<Vec<f64>> = dataset
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| -> Result<Vec<f64>> {
            let target = resolve_target(ckpt, inst, cfg.target)?;
            let map = attribute_instance(ckpt, inst, idx, method, cfg, stats)?;
            let n_removable = inst.n_real().saturating_sub(1);
            let mut row = Vec::with_capacity(cfg.fractions.len());
            for &f in &cfg.fractions {
                let k = (f * n_removable as f64).round() as usize;
                let degraded = degrade_instance(inst, &map, k.min(n_removable), cfg.removal)?;
                row.push(forward_probs(ckpt, &degraded)?[target]);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let n = rows.len();
    let mut p_mean = vec![0.0; cfg.fractions.len()];
    for row in &rows {
        for (acc, v) in p_mean.iter_mut().zip(row) {
            *acc += v / n as f64;
        }
    }
    Ok(DegradationCurve {
        method: method.name().to_string(),
        fractions: cfg.fractions.clone(),
        p_mean,
        n,
    })
}

/// d = (p - m) / (o - m), with m the minimum fully-degraded probability
/// across all curves. d is exactly 1 at fraction 0 and exactly 0 at
/// fraction 1 for the minimizing method.
pub fn normalize_curves(curves: &[DegradationCurve]) -> Result<Vec<NormalizedCurve>> {
    if curves.is_empty() {
        return Err(Error::Input("no curves to normalize".into()));
    }
    let m = curves
        .iter()
        .map(DegradationCurve::fully_degraded)
        .fold(f64::INFINITY, f64::min);
    curves
        .iter()
        .map(|c| {
            let o = c.original();
            if o <= m {
                return Err(Error::Numeric(format!(
                    "degenerate normalization: o = {o} <= m = {m} for {}",
                    c.method
                )));
            }
            let d_norm = c.p_mean.iter().map(|&p| (p - m) / (o - m)).collect();
            Ok(NormalizedCurve {
                method: c.method.clone(),
                fractions: c.fractions.clone(),
                d_norm,
            })
        })
        .collect()
}

/// o - p(fraction), linearly interpolating when the fraction is bracketed.
pub fn absolute_drop_at(curve: &DegradationCurve, fraction: f64) -> Result<f64> {
    let fr = &curve.fractions;
    if fraction < fr[0] || fraction > *fr.last().unwrap() {
        return Err(Error::Range(format!(
            "fraction {fraction} outside grid [{}, {}]",
            fr[0],
            fr.last().unwrap()
        )));
    }
    let p = interpolate(fr, &curve.p_mean, fraction);
    Ok(curve.original() - p)
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    for i in 0..xs.len() {
        if (xs[i] - x).abs() < 1e-12 {
            return ys[i];
        }
        if xs[i] > x {
            let (x0, x1) = (xs[i - 1], xs[i]);
            let t = (x - x0) / (x1 - x0);
            return ys[i - 1] + t * (ys[i] - ys[i - 1]);
        }
    }
    *ys.last().unwrap()
}

/// Sweep summary over one axis (layer index or beta).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: String,
    pub values: Vec<f64>,
    pub drop_at_11pct: Vec<f64>,
    /// Mean final keep-weight per point (recorded for beta sweeps).
    pub mean_mu_final: Vec<f64>,
}

fn check_axis(values: &[f64]) -> Result<Vec<f64>> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input("sweep axis values must be unique".into()));
    }
    Ok(sorted)
}

/// IBA degradation summary per insertion layer, fresh noise stats per layer.
pub fn layer_sweep(
    ckpt: &ModelCheckpoint,
    dataset: &[Instance],
    calibration: &[Instance],
    layers: &[usize],
    cfg: &EvalConfig,
) -> Result<SweepReport> {
    let values = check_axis(&layers.iter().map(|&l| l as f64).collect::<Vec<f64>>())?;
    let mut drops = Vec::new();
    let mut mus = Vec::new();
    for &lv in &values {
        let layer = lv as usize;
        if layer > ckpt.config.n_layers {
            return Err(Error::Range(format!(
                "layer {layer} out of 0..={}",
                ckpt.config.n_layers
            )));
        }
        let mut point_cfg = cfg.clone();
        point_cfg.bottleneck.layer = layer;
        let (drop, mu) = sweep_point(ckpt, dataset, calibration, &point_cfg)?;
        drops.push(drop);
        mus.push(mu);
    }
    Ok(SweepReport {
        axis: "layer".into(),
        values,
        drop_at_11pct: drops,
        mean_mu_final: mus,
    })
}

/// IBA degradation summary per beta at a fixed layer; also records the mean
/// final keep-weight, which decreases as beta grows.
pub fn beta_sweep(
    ckpt: &ModelCheckpoint,
    dataset: &[Instance],
    calibration: &[Instance],
    betas: &[f64],
    cfg: &EvalConfig,
) -> Result<SweepReport> {
    if betas.iter().any(|&b| b <= 0.0) {
        return Err(Error::Input("beta values must be > 0".into()));
    }
    let values = check_axis(betas)?;
    let mut drops = Vec::new();
    let mut mus = Vec::new();
    for &beta in &values {
        let mut point_cfg = cfg.clone();
        point_cfg.bottleneck.beta = beta;
        point_cfg.bottleneck.auto_beta = false;
        let (drop, mu) = sweep_point(ckpt, dataset, calibration, &point_cfg)?;
        drops.push(drop);
        mus.push(mu);
    }
    Ok(SweepReport {
        axis: "beta".into(),
        values,
        drop_at_11pct: drops,
        mean_mu_final: mus,
    })
}

fn sweep_point(
    ckpt: &ModelCheckpoint,
    dataset: &[Instance],
    calibration: &[Instance],
    cfg: &EvalConfig,
) -> Result<(f64, f64)> {
    let stats = estimate_noise_stats(ckpt, calibration, cfg.bottleneck.layer, cfg.stats_mode)?;
    let curve = degradation_curve(ckpt, dataset, Method::Iba, cfg, Some(&stats))?;
    let drop = absolute_drop_at(&curve, HEADLINE_FRACTION)?;

    let mus: Vec<f64> = dataset
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| -> Result<f64> {
            let target = resolve_target(ckpt, inst, cfg.target)?;
            let mut bcfg = cfg.bottleneck.clone();
            bcfg.seed = instance_seed(cfg.seed, idx);
            let state = crate::iba::fit_bottleneck(ckpt, inst, target, &bcfg, &stats)?;
            Ok(state.mean_mu(&inst.mask))
        })
        .collect::<Result<_>>()?;
    let mean_mu = mus.iter().sum::<f64>() / mus.len().max(1) as f64;
    Ok((drop, mean_mu))
}
