//! Tensor operations with analytic gradients.
//!
//! Every operation here is checked against central finite differences in
//! `tests/gradients.rs`; keep forward and backward in one place so they can
//! be reviewed together.

use super::Tensor;

/// (rows, cols) view of a 1-D or 2-D tensor: a vector is one row.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => panic!("expected 1-D or 2-D tensor, got shape {:?}", other),
    }
}

impl Tensor {
    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "add: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, parents| {
                parents[0].accumulate_grad(g);
                parents[1].accumulate_grad(g);
            }),
        )
    }

    /// `[n, d] + [d]`: the bias row is added to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let (n, d) = rows_cols(self.shape());
        assert_eq!(
            bias.shape(),
            &[d],
            "add_bias: input {:?} vs bias {:?}",
            self.shape(),
            bias.shape()
        );
        let data = {
            let a = self.data();
            let b = bias.data();
            let mut out = a.clone();
            for r in 0..n {
                for c in 0..d {
                    out[r * d + c] += b[c];
                }
            }
            out
        };
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(g);
                if parents[1].requires_grad() {
                    let mut gb = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                    parents[1].accumulate_grad(&gb);
                }
            }),
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// `a * x + b` with constant coefficients.
    pub fn affine(&self, a: f64, b: f64) -> Tensor {
        let data = self.data().iter().map(|x| a * x + b).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx: Vec<f64> = g.iter().map(|v| v * a).collect();
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Broadcast-multiply by a single-element tensor (which may be trained,
    /// e.g. the learned relatedness/affectiveness tradeoff).
    pub fn mul_scalar(&self, scalar: &Tensor) -> Tensor {
        assert_eq!(
            scalar.len(),
            1,
            "mul_scalar: scalar operand has shape {:?}",
            scalar.shape()
        );
        let s = scalar.item();
        let data = self.data().iter().map(|x| x * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), scalar.clone()],
            Box::new(move |g, parents| {
                if parents[0].requires_grad() {
                    let gx: Vec<f64> = g.iter().map(|v| v * s).collect();
                    parents[0].accumulate_grad(&gx);
                }
                if parents[1].requires_grad() {
                    let x = parents[0].data();
                    let gs: f64 = g.iter().zip(x.iter()).map(|(v, xi)| v * xi).sum();
                    parents[1].accumulate_grad(&[gs]);
                }
            }),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(
            self.ndim() == 2 && other.ndim() == 2 && self.shape()[1] == other.shape()[0],
            "matmul: incompatible shapes {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let data = {
            let a = self.data();
            let b = other.data();
            matmul_raw(&a, &b, m, k, n)
        };
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                // dA = G B^T, dB = A^T G
                if parents[0].requires_grad() {
                    let b = parents[1].data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != 0.0 {
                                for p in 0..k {
                                    ga[i * k + p] += gij * b[p * n + j];
                                }
                            }
                        }
                    }
                    parents[0].accumulate_grad(&ga);
                }
                if parents[1].requires_grad() {
                    let a = parents[0].data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a[i * k + p];
                            if aip != 0.0 {
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                    parents[1].accumulate_grad(&gb);
                }
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "transpose: got shape {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let data = {
            let a = self.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            out
        };
        Tensor::from_op(
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// View with a different shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.len(),
            shape.iter().product::<usize>(),
            "reshape: {:?} -> {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, parents| parents[0].accumulate_grad(g)),
        )
    }

    /// Contiguous column slice of a 2-D tensor (per-head projections).
    pub fn narrow_cols(&self, start: usize, len: usize) -> Tensor {
        assert_eq!(self.ndim(), 2, "narrow_cols: got shape {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert!(
            start + len <= c,
            "narrow_cols: [{}, {}) out of {} columns",
            start,
            start + len,
            c
        );
        let data = {
            let a = self.data();
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&a[i * c + start..i * c + start + len]);
            }
            out
        };
        Tensor::from_op(
            vec![r, len],
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Contiguous row slice of a 2-D tensor.
    pub fn narrow_rows(&self, start: usize, len: usize) -> Tensor {
        assert_eq!(self.ndim(), 2, "narrow_rows: got shape {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert!(
            start + len <= r,
            "narrow_rows: [{}, {}) out of {} rows",
            start,
            start + len,
            r
        );
        let data = self.data()[start * c..(start + len) * c].to_vec();
        Tensor::from_op(
            vec![len, c],
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; r * c];
                gx[start * c..(start + len) * c].copy_from_slice(g);
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Zero out masked rows of a `[n, d]` tensor; `mask[i]` true keeps row i.
    pub fn mask_rows(&self, mask: &[bool]) -> Tensor {
        let (n, d) = rows_cols(self.shape());
        assert_eq!(mask.len(), n, "mask_rows: {} rows, {} flags", n, mask.len());
        let mask = mask.to_vec();
        let data = {
            let a = self.data();
            let mut out = a.clone();
            for (i, keep) in mask.iter().enumerate() {
                if !keep {
                    out[i * d..(i + 1) * d].fill(0.0);
                }
            }
            out
        };
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = g.to_vec();
                for (i, keep) in mask.iter().enumerate() {
                    if !keep {
                        gx[i * d..(i + 1) * d].fill(0.0);
                    }
                }
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Elementwise max(0, x).
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, parents| {
                let x = parents[0].to_vec();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(v, xi)| if *xi > 0.0 { *v } else { 0.0 })
                    .collect();
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Elementwise absolute value; subgradient 0 at x = 0.
    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|x| x.abs()).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, parents| {
                let x = parents[0].to_vec();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(v, xi)| {
                        if *xi > 0.0 {
                            *v
                        } else if *xi < 0.0 {
                            -*v
                        } else {
                            0.0
                        }
                    })
                    .collect();
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Elementwise logistic function.
    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let out = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(out.iter())
                    .map(|(v, y)| v * y * (1.0 - y))
                    .collect();
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.len();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, parents| {
                parents[0].accumulate_grad(&vec![g[0]; n]);
            }),
        )
    }

    /// Mean over rows of `[n, d]`, producing `[d]`.
    pub fn mean_rows(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "mean_rows: got shape {:?}", self.shape());
        let (n, d) = (self.shape()[0], self.shape()[1]);
        assert!(n > 0, "mean_rows: empty tensor");
        let data = {
            let a = self.data();
            let mut out = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    out[j] += a[i * d + j];
                }
            }
            for v in &mut out {
                *v /= n as f64;
            }
            out
        };
        Tensor::from_op(
            vec![d],
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        gx[i * d + j] = g[j] / n as f64;
                    }
                }
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Numerically stable softmax over the last axis with an optional keep
    /// mask shared by all rows. Masked positions get probability exactly 0;
    /// each row must keep at least one position.
    pub fn masked_softmax(&self, mask: Option<&[bool]>) -> Tensor {
        let (rows, n) = rows_cols(self.shape());
        if let Some(m) = mask {
            assert_eq!(
                m.len(),
                n,
                "masked_softmax: {} logits, {} flags",
                n,
                m.len()
            );
            assert!(
                m.iter().any(|k| *k),
                "masked_softmax: fully masked row (caller must guarantee at least one real position)"
            );
        }
        let keep: Vec<bool> = mask.map(|m| m.to_vec()).unwrap_or_else(|| vec![true; n]);
        let mut data = vec![0.0; rows * n];
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let max = row
                    .iter()
                    .zip(&keep)
                    .filter(|(_, k)| **k)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    if keep[j] {
                        let e = (row[j] - max).exp();
                        data[r * n + j] = e;
                        sum += e;
                    }
                }
                for j in 0..n {
                    if keep[j] {
                        data[r * n + j] /= sum;
                    }
                }
            }
        }
        let probs = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, parents| {
                // dx_i = y_i * (g_i - sum_j g_j y_j), per row; masked entries
                // have y = 0 and receive no gradient.
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    let y = &probs[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr.iter()).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        gx[r * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Layer normalization over the last axis, then per-feature affine.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
        let (rows, d) = rows_cols(self.shape());
        assert_eq!(
            gain.shape(),
            &[d],
            "layer_norm: gain shape {:?}",
            gain.shape()
        );
        assert_eq!(
            bias.shape(),
            &[d],
            "layer_norm: bias shape {:?}",
            bias.shape()
        );
        let mut data = vec![0.0; rows * d];
        let mut normed = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        {
            let x = self.data();
            let gn = gain.data();
            let bs = bias.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[r] = inv;
                for j in 0..d {
                    let xn = (row[j] - mean) * inv;
                    normed[r * d + j] = xn;
                    data[r * d + j] = xn * gn[j] + bs[j];
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, parents| {
                let gn = parents[1].to_vec();
                if parents[0].requires_grad() {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let xn = &normed[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // gradient through x_hat
                        let gh: Vec<f64> =
                            gr.iter().zip(gn.iter()).map(|(gi, wi)| gi * wi).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_gh_xn =
                            gh.iter().zip(xn.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (gh[j] - mean_gh - xn[j] * mean_gh_xn);
                        }
                    }
                    parents[0].accumulate_grad(&gx);
                }
                if parents[1].requires_grad() {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * normed[r * d + j];
                        }
                    }
                    parents[1].accumulate_grad(&gg);
                }
                if parents[2].requires_grad() {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    parents[2].accumulate_grad(&gb);
                }
            }),
        )
    }

    /// Columnwise max over unmasked rows of `[m, d]`; masked rows are
    /// ignored entirely. Ties route the gradient to the first maximizer.
    pub fn masked_max_pool(&self, mask: &[bool]) -> Tensor {
        assert_eq!(
            self.ndim(),
            2,
            "masked_max_pool: got shape {:?}",
            self.shape()
        );
        let (m, d) = (self.shape()[0], self.shape()[1]);
        assert_eq!(
            mask.len(),
            m,
            "masked_max_pool: {} rows, {} flags",
            m,
            mask.len()
        );
        assert!(
            mask.iter().any(|k| *k),
            "masked_max_pool: all rows masked (caller must guarantee at least one real position)"
        );
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut argmax = vec![0usize; d];
        {
            let x = self.data();
            for i in 0..m {
                if !mask[i] {
                    continue;
                }
                for j in 0..d {
                    let v = x[i * d + j];
                    if v > out[j] {
                        out[j] = v;
                        argmax[j] = i;
                    }
                }
            }
        }
        Tensor::from_op(
            vec![d],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; m * d];
                for j in 0..d {
                    gx[argmax[j] * d + j] += g[j];
                }
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Hierarchical n-gram pooling: elementwise max over every window of
    /// size 1..=max_n lying fully inside the unmasked span, then the mean of
    /// all window vectors. Returns zeros when every row is masked.
    pub fn hier_pool(&self, mask: &[bool], max_n: usize) -> Tensor {
        assert_eq!(self.ndim(), 2, "hier_pool: got shape {:?}", self.shape());
        let (m, d) = (self.shape()[0], self.shape()[1]);
        assert_eq!(mask.len(), m, "hier_pool: {} rows, {} flags", m, mask.len());
        assert!(max_n >= 1);
        let windows = ngram_windows(mask, max_n);
        if windows.is_empty() {
            return Tensor::zeros(&[d]);
        }
        let w = windows.len();
        let mut out = vec![0.0; d];
        let mut argmax = vec![0usize; w * d];
        {
            let x = self.data();
            for (wi, &(start, len)) in windows.iter().enumerate() {
                for j in 0..d {
                    let mut best = x[start * d + j];
                    let mut best_i = start;
                    for i in start + 1..start + len {
                        if x[i * d + j] > best {
                            best = x[i * d + j];
                            best_i = i;
                        }
                    }
                    argmax[wi * d + j] = best_i;
                    out[j] += best;
                }
            }
            for v in &mut out {
                *v /= w as f64;
            }
        }
        Tensor::from_op(
            vec![d],
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let mut gx = vec![0.0; m * d];
                for wi in 0..w {
                    for j in 0..d {
                        gx[argmax[wi * d + j] * d + j] += g[j] / w as f64;
                    }
                }
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Cosine similarity between two vectors, as a scalar tensor. Returns 0
    /// (with zero gradient) when either vector has zero norm, so all-zero
    /// embeddings cannot poison downstream attention with NaN.
    pub fn cosine_similarity(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "cosine_similarity: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        assert_eq!(self.ndim(), 1, "cosine_similarity: expected vectors");
        let (dot, na, nb) = {
            let a = self.data();
            let b = other.data();
            let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot, na, nb)
        };
        let degenerate = na == 0.0 || nb == 0.0;
        let cos = if degenerate { 0.0 } else { dot / (na * nb) };
        Tensor::from_op(
            vec![1],
            vec![cos],
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents| {
                if degenerate {
                    return;
                }
                let a = parents[0].to_vec();
                let b = parents[1].to_vec();
                let gc = g[0];
                if parents[0].requires_grad() {
                    let ga: Vec<f64> = a
                        .iter()
                        .zip(b.iter())
                        .map(|(ai, bi)| gc * (bi / (na * nb) - cos * ai / (na * na)))
                        .collect();
                    parents[0].accumulate_grad(&ga);
                }
                if parents[1].requires_grad() {
                    let gb: Vec<f64> = a
                        .iter()
                        .zip(b.iter())
                        .map(|(ai, bi)| gc * (ai / (na * nb) - cos * bi / (nb * nb)))
                        .collect();
                    parents[1].accumulate_grad(&gb);
                }
            }),
        )
    }
}

/// Windows (start, len) of size 1..=max_n whose positions are all unmasked.
fn ngram_windows(mask: &[bool], max_n: usize) -> Vec<(usize, usize)> {
    let m = mask.len();
    let mut windows = Vec::new();
    for n in 1..=max_n {
        for start in 0..m.saturating_sub(n - 1) {
            if mask[start..start + n].iter().all(|k| *k) {
                windows.push((start, n));
            }
        }
    }
    windows
}

/// Concatenate 1-D tensors along axis 0 or 2-D tensors along axis 0 (rows)
/// or 1 (columns).
pub fn concat(tensors: &[Tensor], axis: usize) -> Tensor {
    assert!(!tensors.is_empty(), "concat: no inputs");
    let ndim = tensors[0].ndim();
    assert!(
        tensors.iter().all(|t| t.ndim() == ndim),
        "concat: mixed ranks"
    );
    match (ndim, axis) {
        (1, 0) => {
            let mut data = Vec::new();
            let mut lens = Vec::new();
            for t in tensors {
                lens.push(t.len());
                data.extend_from_slice(&t.data());
            }
            Tensor::from_op(
                vec![data.len()],
                data,
                tensors.to_vec(),
                Box::new(move |g, parents| {
                    let mut off = 0;
                    for (p, len) in parents.iter().zip(&lens) {
                        p.accumulate_grad(&g[off..off + len]);
                        off += len;
                    }
                }),
            )
        }
        (2, 0) => {
            let cols = tensors[0].shape()[1];
            assert!(
                tensors.iter().all(|t| t.shape()[1] == cols),
                "concat axis 0: column counts differ: {:?}",
                tensors
                    .iter()
                    .map(|t| t.shape().to_vec())
                    .collect::<Vec<_>>()
            );
            let mut data = Vec::new();
            let mut row_counts = Vec::new();
            for t in tensors {
                row_counts.push(t.shape()[0]);
                data.extend_from_slice(&t.data());
            }
            let total_rows: usize = row_counts.iter().sum();
            Tensor::from_op(
                vec![total_rows, cols],
                data,
                tensors.to_vec(),
                Box::new(move |g, parents| {
                    let mut off = 0;
                    for (p, rows) in parents.iter().zip(&row_counts) {
                        let n = rows * cols;
                        p.accumulate_grad(&g[off..off + n]);
                        off += n;
                    }
                }),
            )
        }
        (2, 1) => {
            let rows = tensors[0].shape()[0];
            assert!(
                tensors.iter().all(|t| t.shape()[0] == rows),
                "concat axis 1: row counts differ: {:?}",
                tensors
                    .iter()
                    .map(|t| t.shape().to_vec())
                    .collect::<Vec<_>>()
            );
            let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; rows * total];
            let mut off = 0;
            for (t, w) in tensors.iter().zip(&widths) {
                let src = t.data();
                for r in 0..rows {
                    data[r * total + off..r * total + off + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                off += w;
            }
            Tensor::from_op(
                vec![rows, total],
                data,
                tensors.to_vec(),
                Box::new(move |g, parents| {
                    let mut off = 0;
                    for (p, w) in parents.iter().zip(&widths) {
                        if p.requires_grad() {
                            let mut gp = vec![0.0; rows * w];
                            for r in 0..rows {
                                gp[r * w..(r + 1) * w]
                                    .copy_from_slice(&g[r * total + off..r * total + off + w]);
                            }
                            p.accumulate_grad(&gp);
                        }
                        off += w;
                    }
                }),
            )
        }
        _ => panic!("concat: unsupported rank {} / axis {}", ndim, axis),
    }
}

/// Stack 1-D tensors of equal length into a `[n, d]` matrix.
pub fn stack_rows(rows: &[Tensor]) -> Tensor {
    assert!(!rows.is_empty(), "stack_rows: no inputs");
    let d = rows[0].len();
    assert!(
        rows.iter().all(|t| t.ndim() == 1 && t.len() == d),
        "stack_rows: inputs must be vectors of equal length"
    );
    let mut data = Vec::with_capacity(rows.len() * d);
    for t in rows {
        data.extend_from_slice(&t.data());
    }
    Tensor::from_op(
        vec![rows.len(), d],
        data,
        rows.to_vec(),
        Box::new(move |g, parents| {
            for (i, p) in parents.iter().enumerate() {
                p.accumulate_grad(&g[i * d..(i + 1) * d]);
            }
        }),
    )
}

/// Gather rows of an embedding table; gradients scatter back into the
/// looked-up rows.
pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Tensor {
    assert_eq!(
        table.ndim(),
        2,
        "embedding_lookup: table shape {:?}",
        table.shape()
    );
    let (v, d) = (table.shape()[0], table.shape()[1]);
    for &id in ids {
        assert!(
            id < v,
            "embedding_lookup: id {} out of vocabulary range {}",
            id,
            v
        );
    }
    let ids = ids.to_vec();
    let n = ids.len();
    let data = {
        let t = table.data();
        let mut out = Vec::with_capacity(n * d);
        for &id in &ids {
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        out
    };
    Tensor::from_op(
        vec![n, d],
        data,
        vec![table.clone()],
        Box::new(move |g, parents| {
            let mut gt = vec![0.0; v * d];
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += g[i * d + j];
                }
            }
            parents[0].accumulate_grad(&gt);
        }),
    )
}

/// Class-weighted cross-entropy over probability rows: the mean over the
/// batch of `-weight[y] * ln(max(p[y], 1e-12))`. Inputs are probabilities
/// (already softmaxed), matching the classifier head's output contract.
pub fn weighted_cross_entropy(probs: &Tensor, labels: &[usize], class_weights: &[f64]) -> Tensor {
    const LOG_CLAMP: f64 = 1e-12;
    let (batch, q) = rows_cols(probs.shape());
    assert_eq!(
        labels.len(),
        batch,
        "weighted_cross_entropy: {} rows, {} labels",
        batch,
        labels.len()
    );
    assert_eq!(
        class_weights.len(),
        q,
        "weighted_cross_entropy: weight vector length {} does not match {} classes",
        class_weights.len(),
        q
    );
    for &y in labels {
        assert!(
            y < q,
            "weighted_cross_entropy: label {} out of range {}",
            y,
            q
        );
    }
    let labels = labels.to_vec();
    let weights = class_weights.to_vec();
    // clamp from below but let NaN through, so a diverged forward pass
    // produces a NaN loss the training guard can catch
    let clamp = |p: f64| if p < LOG_CLAMP { LOG_CLAMP } else { p };
    let loss = {
        let p = probs.data();
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            total -= weights[y] * clamp(p[b * q + y]).ln();
        }
        total / batch as f64
    };
    Tensor::from_op(
        vec![1],
        vec![loss],
        vec![probs.clone()],
        Box::new(move |g, parents| {
            let p = parents[0].to_vec();
            let mut gp = vec![0.0; p.len()];
            for (b, &y) in labels.iter().enumerate() {
                let pv = p[b * q + y];
                if pv > LOG_CLAMP {
                    gp[b * q + y] = -g[0] * weights[y] / (pv * batch as f64);
                }
                // below the clamp the loss is flat in p, so the gradient is 0
            }
            parents[0].accumulate_grad(&gp);
        }),
    )
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!(
                (a - e).abs() < tol,
                "expected {:?}, got {:?}",
                expected,
                actual
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i.matmul(&b).to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_dot_product() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    #[should_panic(expected = "incompatible shapes")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        a.matmul(&b);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]);
        let p = x.masked_softmax(None);
        assert_close(&p.to_vec(), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1e-12);
    }

    #[test]
    fn softmax_single_survivor_gets_all_mass() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let p = x.masked_softmax(Some(&[true, false]));
        assert_eq!(p.to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_hand_values() {
        // softmax([0.9, 0.1]) = (0.68997..., 0.31002...)
        let x = Tensor::from_vec(&[2], vec![0.9, 0.1]);
        let p = x.masked_softmax(None);
        assert_close(
            &p.to_vec(),
            &[0.6899744811276125, 0.31002551887238755],
            1e-9,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_over_unmasked() {
        let x = Tensor::from_vec(&[2, 4], vec![0.3, -2.0, 1.4, 9.0, -3.0, 0.0, 0.1, 0.2]);
        let p = x.masked_softmax(Some(&[true, true, false, true]));
        let d = p.to_vec();
        for r in 0..2 {
            let s: f64 = d[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert_eq!(d[r * 4 + 2], 0.0);
        }
    }

    #[test]
    #[should_panic(expected = "fully masked")]
    fn softmax_rejects_fully_masked_row() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        x.masked_softmax(Some(&[false, false]));
    }

    #[test]
    fn layer_norm_constant_row_maps_to_bias() {
        let x = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]);
        let g = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]);
        let b = Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]);
        let y = x.layer_norm(&g, &b, 1e-5);
        assert_close(&y.to_vec(), &[0.0, 0.0, 0.0], 1e-12);
    }

    #[test]
    fn layer_norm_hand_two_values() {
        let x = Tensor::from_vec(&[2], vec![1.0, 3.0]);
        let g = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let b = Tensor::from_vec(&[2], vec![0.0, 0.0]);
        let y = x.layer_norm(&g, &b, 1e-5);
        assert_close(&y.to_vec(), &[-1.0, 1.0], 1e-4);
    }

    #[test]
    fn layer_norm_standardizes_high_variance_rows() {
        // with gain 1 / bias 0 the output is zero-mean, unit-variance up to
        // eps / var; use rows with variance >> eps so the bound is tight.
        let x = Tensor::from_vec(
            &[2, 4],
            vec![10.0, -20.0, 5.0, 40.0, 100.0, 0.0, -50.0, 30.0],
        );
        let g = Tensor::from_vec(&[4], vec![1.0; 4]);
        let b = Tensor::from_vec(&[4], vec![0.0; 4]);
        let y = x.layer_norm(&g, &b, 1e-5);
        let d = y.to_vec();
        for r in 0..2 {
            let row = &d[r * 4..(r + 1) * 4];
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9, "mean {}", mean);
            assert!((var - 1.0).abs() < 1e-6, "var {}", var);
        }
    }

    #[test]
    fn relu_clips_negatives() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_pool_columnwise() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]);
        let p = x.masked_max_pool(&[true, true]);
        assert_eq!(p.to_vec(), vec![3.0, 5.0]);
    }

    #[test]
    fn max_pool_ignores_masked_rows() {
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 5.0, 99.0, 99.0, 3.0, 2.0]);
        let p = x.masked_max_pool(&[true, false, true]);
        assert_eq!(p.to_vec(), vec![3.0, 5.0]);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let a = Tensor::from_vec(&[2], vec![1.0, 0.0]);
        let b = Tensor::from_vec(&[2], vec![0.0, 1.0]);
        assert_eq!(a.cosine_similarity(&b).item(), 0.0);
    }

    #[test]
    fn cosine_zero_norm_returns_zero() {
        let a = Tensor::from_vec(&[2], vec![0.0, 0.0]);
        let b = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        assert_eq!(a.cosine_similarity(&b).item(), 0.0);
    }

    #[test]
    fn cosine_stays_in_unit_interval() {
        let a = Tensor::from_vec(&[3], vec![1.0, 2.0, -0.5]);
        let b = Tensor::from_vec(&[3], vec![-2.0, 0.3, 0.9]);
        let c = a.cosine_similarity(&b).item();
        assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn cross_entropy_zero_on_confident_correct() {
        let p = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]);
        let l = weighted_cross_entropy(&p, &[0], &[1.0, 1.0, 1.0]);
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn cross_entropy_hand_weighted_value() {
        // -2 * ln(0.5) = 2 ln 2
        let p = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]);
        let l = weighted_cross_entropy(&p, &[0], &[2.0, 1.0]);
        assert!((l.item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "weight vector length")]
    fn cross_entropy_rejects_bad_weight_length() {
        let p = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]);
        weighted_cross_entropy(&p, &[0], &[1.0]);
    }

    #[test]
    #[should_panic(expected = "out of vocabulary range")]
    fn lookup_rejects_out_of_range_id() {
        let t = Tensor::zeros(&[3, 2]);
        embedding_lookup(&t, &[3]);
    }

    #[test]
    fn lookup_routes_grads_to_rows() {
        let t = Tensor::leaf(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let got = embedding_lookup(&t, &[2, 0, 2]);
        assert_eq!(got.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        got.sum().backward();
        assert_eq!(t.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_axis1_roundtrip() {
        let a = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]);
        let b = Tensor::from_vec(&[2, 2], vec![4.0, 5.0, 6.0, 7.0]);
        let c = concat(&[a, b], 1);
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 4.0, 5.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn hier_pool_single_token_is_identity() {
        let x = Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]);
        let p = x.hier_pool(&[true], 3);
        assert_eq!(p.to_vec(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn hier_pool_hand_two_tokens() {
        // tokens [1], [3]: windows {1}, {3}, {3} -> mean 7/3
        let x = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]);
        let p = x.hier_pool(&[true, true], 3);
        assert!((p.item() - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hier_pool_windows_never_cross_padding() {
        let x = Tensor::from_vec(&[3, 1], vec![1.0, 3.0, 100.0]);
        let p = x.hier_pool(&[true, true, false], 3);
        assert!((p.item() - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hier_pool_all_masked_is_zero() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0; 4]);
        let p = x.hier_pool(&[false, false], 3);
        assert_eq!(p.to_vec(), vec![0.0, 0.0]);
    }
}
