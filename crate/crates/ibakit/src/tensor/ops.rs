//! Forward rules and recorded backward rules for the op catalog.
//!
//! Broadcasting rule (documented contract): for binary elementwise ops the
//! right operand's shape must equal the left operand's shape or be a trailing
//! suffix of it (a scalar counts as the empty suffix). Anything else is a
//! shape error. The right operand is tiled over the leading axes; its
//! gradient is the sum over those axes.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

/// b broadcastable onto a under the trailing-suffix rule.
fn check_suffix(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let sa = a.shape();
    let sb = b.shape();
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
        return Err(shape_err(op, a, b));
    }
    Ok(())
}

/// Sums a full-size gradient down to the broadcast operand's size.
fn reduce_to(g: &[f64], bn: usize) -> Vec<f64> {
    let mut out = vec![0.0; bn.max(1)];
    for (i, v) in g.iter().enumerate() {
        out[i % bn.max(1)] += v;
    }
    out
}

fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl Tape {
    fn binary(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        fwd: impl Fn(f64, f64) -> f64,
        // d(out)/da and d(out)/db as functions of (a_i, b_i, out_i)
        da: impl Fn(f64, f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        check_suffix(op, a, b)?;
        let bn = b.numel().max(1);
        let data: Vec<f64> = {
            let av = a.data();
            let bv = b.data();
            av.iter()
                .enumerate()
                .map(|(i, &x)| fwd(x, bv[i % bn]))
                .collect()
        };
        let out = Tensor::raw(a.shape(), data, false);
        if self.recording(&[a, b]) {
            out.mark_participating();
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let av = a2.to_vec();
                let bv = b2.to_vec();
                let ov = o2.to_vec();
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * da(av[i], bv[i % bn], ov[i]))
                    .collect();
                a2.accumulate(&ga);
                let gb_full: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * db(av[i], bv[i % bn], ov[i]))
                    .collect();
                b2.accumulate(&reduce_to(&gb_full, bn));
            }));
        }
        Ok(out)
    }

    fn unary(
        &self,
        a: &Tensor,
        fwd: impl Fn(f64) -> f64,
        // d(out)/da as a function of (a_i, out_i)
        dv: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|&x| fwd(x)).collect();
        let out = Tensor::raw(a.shape(), data, false);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let av = a2.to_vec();
                let ov = o2.to_vec();
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * dv(av[i], ov[i]))
                    .collect();
                a2.accumulate(&ga);
            }));
        }
        out
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |_, y, _| y, |x, _, _| x)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(
            "div",
            a,
            b,
            |x, y| x / y,
            |_, y, _| 1.0 / y,
            |x, y, _| -x / (y * y),
        )
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary(a, |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary(a, |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self, a: &Tensor) -> Tensor {
        self.scale(a, -1.0)
    }

    pub fn exp(&self, a: &Tensor) -> Tensor {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn log(&self, a: &Tensor) -> Tensor {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn power(&self, a: &Tensor, p: f64) -> Tensor {
        self.unary(a, move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    /// Numerically stable sigmoid; output strictly inside (0, 1) for finite
    /// input. NaN input is an invalid-value error.
    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        if a.data().iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidValue("NaN input to sigmoid".into()));
        }
        Ok(self.unary(a, stable_sigmoid, |_, y| y * (1.0 - y)))
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// max(a, c) elementwise; gradient passes through where a > c.
    pub fn clamp_min(&self, a: &Tensor, c: f64) -> Tensor {
        self.unary(a, move |x| x.max(c), move |x, _| if x > c { 1.0 } else { 0.0 })
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&a.data(), m, k, &b.data(), n);
        let out = Tensor::raw(vec![m, n], data, false);
        if self.recording(&[a, b]) {
            out.mark_participating();
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let av = a2.to_vec();
                let bv = b2.to_vec();
                // ga = g . b^T
                let bt = transpose_raw(&bv, k, n);
                a2.accumulate(&matmul_raw(&g, m, n, &bt, k));
                // gb = a^T . g
                let at = transpose_raw(&av, m, k);
                b2.accumulate(&matmul_raw(&at, k, m, &g, n));
            }));
        }
        Ok(out)
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: s,
                right: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let out = Tensor::raw(vec![n, m], transpose_raw(&a.data(), m, n), false);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                a2.accumulate(&transpose_raw(&g, n, m));
            }));
        }
        Ok(out)
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: a.shape(),
                right: shape,
            });
        }
        let out = Tensor::raw(shape, a.to_vec(), false);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                a2.accumulate(&g);
            }));
        }
        Ok(out)
    }

    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        let out = Tensor::raw(vec![], vec![s], false);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                a2.accumulate(&vec![g[0]; a2.numel()]);
            }));
        }
        out
    }

    pub fn mean_all(&self, a: &Tensor) -> Tensor {
        let n = a.numel() as f64;
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / n)
    }

    /// Sum of a 2D tensor over the given axis (0 or 1).
    pub fn sum_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 || axis > 1 {
            return Err(Error::Shape {
                op: "sum_axis",
                left: s,
                right: vec![axis],
            });
        }
        let (m, n) = (s[0], s[1]);
        let av = a.data();
        let out = if axis == 0 {
            let mut o = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    o[j] += av[i * n + j];
                }
            }
            Tensor::raw(vec![n], o, false)
        } else {
            let mut o = vec![0.0; m];
            for i in 0..m {
                o[i] = av[i * n..(i + 1) * n].iter().sum();
            }
            Tensor::raw(vec![m], o, false)
        };
        drop(av);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = if axis == 0 { g[j] } else { g[i] };
                    }
                }
                a2.accumulate(&ga);
            }));
        }
        Ok(out)
    }

    pub fn mean_axis(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 || axis > 1 {
            return Err(Error::Shape {
                op: "mean_axis",
                left: s,
                right: vec![axis],
            });
        }
        let denom = s[axis] as f64;
        let summed = self.sum_axis(a, axis)?;
        Ok(self.scale(&summed, 1.0 / denom))
    }

    /// Softmax over the last axis, log-sum-exp stabilized. Rows sum to 1 and
    /// the result is invariant to adding a constant per row.
    pub fn softmax_last(&self, a: &Tensor) -> Tensor {
        let (rows, cols) = rows_cols(&a.shape());
        let mut data = a.to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::raw(a.shape(), data, false);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let y = o2.to_vec();
                let mut ga = vec![0.0; y.len()];
                for r in 0..rows {
                    let lo = r * cols;
                    let dot: f64 = (0..cols).map(|j| g[lo + j] * y[lo + j]).sum();
                    for j in 0..cols {
                        ga[lo + j] = y[lo + j] * (g[lo + j] - dot);
                    }
                }
                a2.accumulate(&ga);
            }));
        }
        out
    }

    /// log(sum(exp(row))) per row of the last axis; [m,n] -> [m], [n] -> scalar.
    pub fn log_sum_exp_last(&self, a: &Tensor) -> Tensor {
        let s = a.shape();
        let (rows, cols) = rows_cols(&s);
        let av = a.to_vec();
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            data[r] = mx + z.ln();
        }
        let out_shape = if s.len() <= 1 { vec![] } else { s[..s.len() - 1].to_vec() };
        let out = Tensor::raw(out_shape, data, false);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let av = a2.to_vec();
                let lse = o2.to_vec();
                let mut ga = vec![0.0; av.len()];
                for r in 0..rows {
                    for j in 0..cols {
                        ga[r * cols + j] = g[r] * (av[r * cols + j] - lse[r]).exp();
                    }
                }
                a2.accumulate(&ga);
            }));
        }
        out
    }

    /// Embedding-row gather: rows of `table` [v, d] selected by `ids`.
    pub fn gather_rows(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let s = table.shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                left: s,
                right: vec![ids.len()],
            });
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Range(format!("gather id {bad} out of {v} rows")));
        }
        let tv = table.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        drop(tv);
        let out = Tensor::raw(vec![ids.len(), d], data, false);
        if self.recording(&[table]) {
            out.mark_participating();
            let (t2, o2) = (table.clone(), out.clone());
            let ids: Vec<usize> = ids.to_vec();
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut gt = vec![0.0; v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
                t2.accumulate(&gt);
            }));
        }
        Ok(out)
    }

    /// Row `i` of a 2D tensor as a 1D tensor.
    pub fn row(&self, a: &Tensor, i: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 || i >= s[0] {
            return Err(Error::Range(format!("row {i} of shape {s:?}")));
        }
        let n = s[1];
        let data = a.data()[i * n..(i + 1) * n].to_vec();
        let out = Tensor::raw(vec![n], data, false);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            let (m, idx) = (s[0], i);
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut ga = vec![0.0; m * n];
                ga[idx * n..(idx + 1) * n].copy_from_slice(&g);
                a2.accumulate(&ga);
            }));
        }
        Ok(out)
    }

    /// Element `i` of a 1D tensor as a scalar tensor.
    pub fn get(&self, a: &Tensor, i: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 1 || i >= s[0] {
            return Err(Error::Range(format!("index {i} of shape {s:?}")));
        }
        let out = Tensor::raw(vec![], vec![a.data()[i]], false);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            let n = s[0];
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut ga = vec![0.0; n];
                ga[i] = g[0];
                a2.accumulate(&ga);
            }));
        }
        Ok(out)
    }

    /// Column-axis concatenation of two 2D tensors with equal row counts.
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let sa = a.shape();
        let sb = b.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat_cols", a, b));
        }
        let (m, na, nb) = (sa[0], sa[1], sb[1]);
        let av = a.data();
        let bv = b.data();
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&av[i * na..(i + 1) * na]);
            data.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        drop(av);
        drop(bv);
        let out = Tensor::raw(vec![m, na + nb], data, false);
        if self.recording(&[a, b]) {
            out.mark_participating();
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let n = na + nb;
                let mut ga = vec![0.0; m * na];
                let mut gb = vec![0.0; m * nb];
                for i in 0..m {
                    ga[i * na..(i + 1) * na].copy_from_slice(&g[i * n..i * n + na]);
                    gb[i * nb..(i + 1) * nb].copy_from_slice(&g[i * n + na..(i + 1) * n]);
                }
                a2.accumulate(&ga);
                b2.accumulate(&gb);
            }));
        }
        Ok(out)
    }

    /// Columns [start, start+len) of a 2D tensor.
    pub fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Range(format!(
                "slice_cols {start}..{} of shape {s:?}",
                start + len
            )));
        }
        let (m, n) = (s[0], s[1]);
        let av = a.data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        drop(av);
        let out = Tensor::raw(vec![m, len], data, false);
        if self.recording(&[a]) {
            out.mark_participating();
            let (a2, o2) = (a.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                a2.accumulate(&ga);
            }));
        }
        Ok(out)
    }

    /// Per-row layer normalization of x [m, n] with learned gain/bias [n].
    pub fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || gain.shape() != vec![s[1]] || bias.shape() != vec![s[1]] {
            return Err(Error::Shape {
                op: "layer_norm",
                left: s,
                right: gain.shape(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let xv = x.to_vec();
        let gv = gain.to_vec();
        let bv = bias.to_vec();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mean) * istd;
            }
        }
        let data: Vec<f64> = (0..m * n).map(|i| gv[i % n] * xhat[i] + bv[i % n]).collect();
        let out = Tensor::raw(vec![m, n], data, false);
        if self.recording(&[x, gain, bias]) {
            out.mark_participating();
            let (x2, g2, b2, o2) = (x.clone(), gain.clone(), bias.clone(), out.clone());
            self.record(Box::new(move || {
                let Some(g) = o2.grad() else { return };
                let gv = g2.to_vec();
                let mut gx = vec![0.0; m * n];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for i in 0..m {
                    let lo = i * n;
                    // gy = g * gain; per-row means of gy and gy*xhat
                    let mut mean_gy = 0.0;
                    let mut mean_gyx = 0.0;
                    for j in 0..n {
                        let gy = g[lo + j] * gv[j];
                        mean_gy += gy;
                        mean_gyx += gy * xhat[lo + j];
                        ggain[j] += g[lo + j] * xhat[lo + j];
                        gbias[j] += g[lo + j];
                    }
                    mean_gy /= n as f64;
                    mean_gyx /= n as f64;
                    for j in 0..n {
                        let gy = g[lo + j] * gv[j];
                        gx[lo + j] = inv_std[i] * (gy - mean_gy - xhat[lo + j] * mean_gyx);
                    }
                }
                x2.accumulate(&gx);
                g2.accumulate(&ggain);
                b2.accumulate(&gbias);
            }));
        }
        Ok(out)
    }
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // keep the output strictly inside (0,1) even where f64 rounds to the ends
    y.clamp(f64::MIN_POSITIVE, ONE_BELOW_UNITY)
}

const ONE_BELOW_UNITY: f64 = 1.0 - f64::EPSILON / 2.0;

/// Closed-form sigmoid without a tape, for read-out paths.
pub fn sigmoid_scalar(x: f64) -> f64 {
    stable_sigmoid(x)
}
