//! Comparison attribution methods: integrated gradients over the token
//! embeddings, a LIME-style ridge surrogate ("LIME-lite"), and random scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::model::{
    forward_probs, logits_from_hidden, param_tensors, Instance, ModelCheckpoint, UNK_ID,
};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IGConfig {
    /// Riemann points along the path (midpoint rule).
    pub steps: usize,
}

impl Default for IGConfig {
    fn default() -> Self {
        IGConfig { steps: 10 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub n_samples: usize,
    /// Probability a token is dropped (replaced by UNK) in a perturbation.
    pub mask_prob: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            n_samples: 100,
            mask_prob: 0.3,
            ridge: 1e-3,
            seed: 0,
        }
    }
}

/// Midpoint-rule path integral of d f / d input from `baseline` to `input`.
/// Returns per-coordinate attributions (input - baseline) * averaged gradient.
/// Generic over the scalar function so tests can run it on analytic models.
pub fn ig_path_integral<F>(
    f: F,
    shape: &[usize],
    input: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<Vec<f64>>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if steps < 1 {
        return Err(Error::Input("IG steps must be >= 1".into()));
    }
    if input.len() != baseline.len() {
        return Err(Error::Shape {
            op: "ig_path_integral",
            left: vec![input.len()],
            right: vec![baseline.len()],
        });
    }
    let n = input.len();
    let mut avg_grad = vec![0.0; n];
    for k in 0..steps {
        let t = (k as f64 + 0.5) / steps as f64;
        let point: Vec<f64> = input
            .iter()
            .zip(baseline)
            .map(|(&x, &b)| b + t * (x - b))
            .collect();
        let tape = Tape::new();
        let xt = Tensor::new(shape.to_vec(), point)?.with_grad();
        let out = f(&tape, &xt)?;
        if out.numel() != 1 {
            return Err(Error::Contract("IG target function must be scalar".into()));
        }
        tape.backward(&out)?;
        let g = xt.grad().unwrap_or_else(|| vec![0.0; n]);
        for (a, gi) in avg_grad.iter_mut().zip(&g) {
            *a += gi / steps as f64;
        }
    }
    Ok(input
        .iter()
        .zip(baseline)
        .zip(&avg_grad)
        .map(|((&x, &b), &g)| (x - b) * g)
        .collect())
}

/// Integrated gradients of the target log-probability with respect to the
/// token embeddings, zero-embedding baseline (positions kept).
pub fn integrated_gradients(
    ckpt: &ModelCheckpoint,
    instance: &Instance,
    target: usize,
    config: &IGConfig,
) -> Result<AttributionMap> {
    let cfg = &ckpt.config;
    let (seq, d) = (cfg.max_seq_len, cfg.d_model);
    let params = param_tensors(ckpt, false);
    let embed_rows = {
        let tape = Tape::new();
        tape.gather_rows(&params["embed.tok"], &instance.ids)?.to_vec()
    };
    let pos_rows = {
        let tape = Tape::new();
        let ids: Vec<usize> = (0..seq).collect();
        tape.gather_rows(&params["embed.pos"], &ids)?.to_vec()
    };
    let pos = Tensor::new(vec![seq, d], pos_rows)?;
    let mask = instance.mask.clone();
    let f = |tape: &Tape, tok_emb: &Tensor| -> Result<Tensor> {
        let hidden = tape.add(tok_emb, &pos)?;
        let logits = logits_from_hidden(tape, &params, cfg, &hidden, &mask, 0)?;
        // target log-probability
        let lse = tape.log_sum_exp_last(&logits);
        tape.sub(&tape.get(&logits, target)?, &lse)
    };
    let baseline = vec![0.0; seq * d];
    let attr = ig_path_integral(f, &[seq, d], &embed_rows, &baseline, config.steps)?;

    let mut scores = Vec::new();
    for p in 0..seq {
        if !instance.mask[p] {
            continue;
        }
        scores.push(attr[p * d..(p + 1) * d].iter().sum());
    }
    let map = AttributionMap {
        method: "ig".into(),
        layer: 0,
        beta: 0.0,
        tokens: instance.real_tokens(&ckpt.vocab),
        scores,
        target,
        seed: 0,
    };
    map.validate()?;
    Ok(map)
}

/// LIME-style surrogate: uniform binary masks over the non-CLS real tokens,
/// masked tokens replaced by UNK, ridge least squares from mask vectors to
/// the target probability. Simplified relative to full LIME: no locality
/// kernel, plain ridge. The CLS entry is never masked and scores 0.
pub fn lime_lite(
    ckpt: &ModelCheckpoint,
    instance: &Instance,
    target: usize,
    config: &SurrogateConfig,
) -> Result<AttributionMap> {
    if !(0.0..1.0).contains(&config.mask_prob) || config.mask_prob <= 0.0 {
        return Err(Error::Input("mask_prob must be in (0, 1)".into()));
    }
    // non-CLS real token positions
    let positions: Vec<usize> = (1..instance.mask.len())
        .filter(|&p| instance.mask[p])
        .collect();
    let k = positions.len();
    if config.n_samples < k + 1 {
        return Err(Error::Input(format!(
            "n_samples {} < real tokens + 1 ({})",
            config.n_samples,
            k + 1
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut design = Vec::with_capacity(config.n_samples); // rows of k keep-bits
    let mut response = Vec::with_capacity(config.n_samples);
    for _ in 0..config.n_samples {
        let keep: Vec<bool> = (0..k).map(|_| !rng.gen_bool(config.mask_prob)).collect();
        let mut perturbed = instance.clone();
        for (bit, &pos) in keep.iter().zip(&positions) {
            if !bit {
                perturbed.ids[pos] = UNK_ID;
            }
        }
        let p = forward_probs(ckpt, &perturbed)?[target];
        design.push(keep.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<f64>>());
        response.push(p);
    }
    let coefs = ridge_fit(&design, &response, config.ridge)?;

    let mut scores = vec![0.0]; // CLS
    scores.extend_from_slice(&coefs[..k]);
    let map = AttributionMap {
        method: "lime-lite".into(),
        layer: 0,
        beta: 0.0,
        tokens: instance.real_tokens(&ckpt.vocab),
        scores,
        target,
        seed: config.seed,
    };
    map.validate()?;
    Ok(map)
}

/// Solves (X'X + ridge I) w = X'y with an intercept column appended (the
/// intercept is not penalized). Returns the k feature coefficients then the
/// intercept.
fn ridge_fit(design: &[Vec<f64>], response: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let n = design.len();
    let k = design.first().map_or(0, Vec::len);
    let dim = k + 1;
    let mut ata = vec![0.0; dim * dim];
    let mut aty = vec![0.0; dim];
    for (row, &y) in design.iter().zip(response) {
        let full: Vec<f64> = row.iter().copied().chain(std::iter::once(1.0)).collect();
        for i in 0..dim {
            aty[i] += full[i] * y;
            for j in 0..dim {
                ata[i * dim + j] += full[i] * full[j];
            }
        }
    }
    for i in 0..k {
        ata[i * dim + i] += ridge;
    }
    solve_dense(&mut ata, &mut aty, dim)?;
    let _ = n;
    Ok(aty)
}

/// Gaussian elimination with partial pivoting; `b` receives the solution.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(Error::Numeric("singular normal equations in ridge fit".into()));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let factor = a[r * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            b[r] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for j in col + 1..n {
            s -= a[col * n + j] * b[j];
        }
        b[col] = s / a[col * n + col];
    }
    Ok(())
}

/// I.i.d. uniform [0,1) scores over the real tokens, seeded.
pub fn random_attribution(
    ckpt: &ModelCheckpoint,
    instance: &Instance,
    target: usize,
    seed: u64,
) -> Result<AttributionMap> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let tokens = instance.real_tokens(&ckpt.vocab);
    let scores: Vec<f64> = (0..tokens.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let map = AttributionMap {
        method: "random".into(),
        layer: 0,
        beta: 0.0,
        tokens,
        scores,
        target,
        seed,
    };
    map.validate()?;
    Ok(map)
}
