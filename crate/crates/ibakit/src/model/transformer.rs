//! Split forward passes over the encoder stack.
//!
//! Layer indexing: "after layer l" means after the l-th encoder block's final
//! residual + normalization; l = 0 is the embedding + positional output.
//! `forward` is defined as `forward_from(forward_lower(x, l), l)` with the
//! same op sequence for every l, so the split recomposes exactly.

use std::collections::BTreeMap;

use super::{Instance, ModelCheckpoint, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

const MASK_NEG: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

/// Leaf tensors for every checkpoint parameter, in one gradient job.
pub fn param_tensors(ckpt: &ModelCheckpoint, requires_grad: bool) -> BTreeMap<String, Tensor> {
    ckpt.params
        .iter()
        .map(|(name, p)| {
            let t = Tensor::new(p.shape.clone(), p.data.clone()).expect("validated checkpoint");
            let t = if requires_grad { t.with_grad() } else { t };
            (name.clone(), t)
        })
        .collect()
}

/// Additive attention bias per key position: 0 on real tokens, a large
/// negative constant on PAD so masked positions get exactly zero weight.
pub fn mask_bias(mask: &[bool]) -> Tensor {
    let data = mask
        .iter()
        .map(|&m| if m { 0.0 } else { MASK_NEG })
        .collect();
    Tensor::new(vec![mask.len()], data).unwrap()
}

fn p<'a>(params: &'a BTreeMap<String, Tensor>, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .ok_or_else(|| Error::Parameter(name.to_string()))
}

fn linear(tape: &Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    tape.add(&tape.matmul(x, w)?, b)
}

fn embed(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    instance: &Instance,
) -> Result<Tensor> {
    let tok = tape.gather_rows(p(params, "embed.tok")?, &instance.ids)?;
    let pos_ids: Vec<usize> = (0..instance.ids.len()).collect();
    let pos = tape.gather_rows(p(params, "embed.pos")?, &pos_ids)?;
    tape.add(&tok, &pos)
}

fn encoder_layer(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    layer: usize,
    hidden: &Tensor,
    key_bias: &Tensor,
) -> Result<Tensor> {
    let n = |s: &str| format!("layers.{layer}.{s}");
    let q = linear(tape, hidden, p(params, &n("attn.wq"))?, p(params, &n("attn.bq"))?)?;
    let k = linear(tape, hidden, p(params, &n("attn.wk"))?, p(params, &n("attn.bk"))?)?;
    let v = linear(tape, hidden, p(params, &n("attn.wv"))?, p(params, &n("attn.bv"))?)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads: Option<Tensor> = None;
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(&q, h * dh, dh)?;
        let kh = tape.slice_cols(&k, h * dh, dh)?;
        let vh = tape.slice_cols(&v, h * dh, dh)?;
        let scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale);
        // key-axis PAD masking, broadcast over query rows
        let scores = tape.add(&scores, key_bias)?;
        let weights = tape.softmax_last(&scores);
        let out_h = tape.matmul(&weights, &vh)?;
        heads = Some(match heads {
            None => out_h,
            Some(acc) => tape.concat_cols(&acc, &out_h)?,
        });
    }
    let attn = linear(
        tape,
        &heads.expect("n_heads >= 1"),
        p(params, &n("attn.wo"))?,
        p(params, &n("attn.bo"))?,
    )?;
    let hidden = tape.layer_norm(
        &tape.add(hidden, &attn)?,
        p(params, &n("ln1.gain"))?,
        p(params, &n("ln1.bias"))?,
        LN_EPS,
    )?;

    let ff = tape.relu(&linear(
        tape,
        &hidden,
        p(params, &n("ffn.w1"))?,
        p(params, &n("ffn.b1"))?,
    )?);
    let ff = linear(tape, &ff, p(params, &n("ffn.w2"))?, p(params, &n("ffn.b2"))?)?;
    tape.layer_norm(
        &tape.add(&hidden, &ff)?,
        p(params, &n("ln2.gain"))?,
        p(params, &n("ln2.bias"))?,
        LN_EPS,
    )
}

/// Activations after encoder layer `l` (l = 0: embedding + positional output).
pub fn forward_lower(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    instance: &Instance,
    l: usize,
) -> Result<Tensor> {
    if l > cfg.n_layers {
        return Err(Error::Range(format!(
            "layer {l} out of 0..={}",
            cfg.n_layers
        )));
    }
    let bias = mask_bias(&instance.mask);
    let mut hidden = embed(tape, params, instance)?;
    for layer in 0..l {
        hidden = encoder_layer(tape, params, cfg, layer, &hidden, &bias)?;
    }
    Ok(hidden)
}

/// Class logits from a hidden state at layer `l`: runs layers l+1..n plus the
/// CLS head. Differentiable with respect to `hidden`.
pub fn logits_from_hidden(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    hidden: &Tensor,
    mask: &[bool],
    l: usize,
) -> Result<Tensor> {
    if l > cfg.n_layers {
        return Err(Error::Range(format!(
            "layer {l} out of 0..={}",
            cfg.n_layers
        )));
    }
    if hidden.shape() != vec![cfg.max_seq_len, cfg.d_model] {
        return Err(Error::Shape {
            op: "forward_from",
            left: hidden.shape(),
            right: vec![cfg.max_seq_len, cfg.d_model],
        });
    }
    let bias = mask_bias(mask);
    let mut hidden = hidden.clone();
    for layer in l..cfg.n_layers {
        hidden = encoder_layer(tape, params, cfg, layer, &hidden, &bias)?;
    }
    let cls = tape.row(&hidden, 0)?;
    let cls = tape.reshape(&cls, vec![1, cfg.d_model])?;
    let logits = linear(tape, &cls, p(params, "head.w")?, p(params, "head.b")?)?;
    tape.reshape(&logits, vec![cfg.n_classes])
}

/// Class probabilities from a hidden state at layer `l`.
pub fn forward_from(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    hidden: &Tensor,
    mask: &[bool],
    l: usize,
) -> Result<Tensor> {
    let logits = logits_from_hidden(tape, params, cfg, hidden, mask, l)?;
    let probs = tape.softmax_last(&logits);
    probs.validate()?;
    Ok(probs)
}

/// Full forward pass to class probabilities.
pub fn forward(
    tape: &Tape,
    params: &BTreeMap<String, Tensor>,
    cfg: &ModelConfig,
    instance: &Instance,
) -> Result<Tensor> {
    let hidden = forward_lower(tape, params, cfg, instance, 0)?;
    forward_from(tape, params, cfg, &hidden, &instance.mask, 0)
}

/// Convenience: class probabilities without gradient tracking.
pub fn forward_probs(ckpt: &ModelCheckpoint, instance: &Instance) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let params = param_tensors(ckpt, false);
    Ok(forward(&tape, &params, &ckpt.config, instance)?.to_vec())
}

/// Cross entropy of `target` under the logits, log-sum-exp stabilized.
pub fn cross_entropy(tape: &Tape, logits: &Tensor, target: usize) -> Result<Tensor> {
    let n = logits.shape();
    if n.len() != 1 || target >= n[0] {
        return Err(Error::Input(format!(
            "target {target} out of range for {n:?} logits"
        )));
    }
    let lse = tape.log_sum_exp_last(logits);
    tape.sub(&lse, &tape.get(logits, target)?)
}
