//! Forward rules for the differentiable primitives.
//!
//! These are plain functions over [`Tensor`]; the tape in [`super::tape`]
//! calls them for its forward pass and pairs each with a backward rule.

use super::{NnError, Tensor};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    if a.cols() != b.rows() {
        return Err(NnError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, m);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..n {
        let orow = &mut od[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    if a.cols() != b.cols() {
        return Err(NnError::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let brow = b.row(j);
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// `x W + b`, applied to every row of `x`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(NnError::Shape {
            op: "affine(bias)",
            left: w.shape(),
            right: b.shape(),
        });
    }
    let mut out = matmul(x, w)?;
    add_row_in_place(&mut out, b);
    Ok(out)
}

pub(crate) fn add_row_in_place(m: &mut Tensor, row: &Tensor) {
    let cols = m.cols();
    for chunk in m.data_mut().chunks_mut(cols) {
        for (o, b) in chunk.iter_mut().zip(row.data()) {
            *o += b;
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    softmax_rows_masked(m, None).expect("unmasked softmax is total")
}

/// Row-wise softmax where columns with `mask[j] == false` get weight exactly
/// zero (equivalent to a `-inf` logit).
pub fn softmax_rows_masked(m: &Tensor, mask: Option<&[bool]>) -> Result<Tensor, NnError> {
    let cols = m.cols();
    if let Some(mask) = mask {
        if mask.len() != cols {
            return Err(NnError::Shape {
                op: "softmax_rows(mask)",
                left: m.shape(),
                right: (1, mask.len()),
            });
        }
        if !mask.iter().any(|&b| b) {
            return Err(NnError::Config("softmax mask hides every column".into()));
        }
    }
    let keep = |j: usize| mask.map_or(true, |mk| mk[j]);
    let mut out = Tensor::zeros(m.rows(), cols);
    for r in 0..m.rows() {
        let row = m.row(r);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                out.set(r, j, e);
                total += e;
            }
        }
        for j in 0..cols {
            if keep(j) {
                out.set(r, j, out.get(r, j) / total);
            }
        }
    }
    Ok(out)
}

/// Scaled dot-product attention `softmax(Q Kᵀ / scale) V`.
pub fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor, NnError> {
    sdpa_masked(q, k, v, scale, None)
}

pub fn sdpa_masked(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: f64,
    key_mask: Option<&[bool]>,
) -> Result<Tensor, NnError> {
    if k.rows() != v.rows() {
        return Err(NnError::Shape {
            op: "sdpa(k,v)",
            left: k.shape(),
            right: v.shape(),
        });
    }
    if scale <= 0.0 || !scale.is_finite() {
        return Err(NnError::Config(format!("attention scale must be > 0, got {scale}")));
    }
    let logits = matmul_nt(q, k)?.map(|x| x / scale);
    let weights = softmax_rows_masked(&logits, key_mask)?;
    matmul(&weights, v)
}

/// Stacks every window of `window` consecutive rows into one row:
/// output row `i` is `E[i] ∥ E[i+1] ∥ … ∥ E[i+window-1]`.
pub fn unfold_rows(e: &Tensor, window: usize) -> Result<Tensor, NnError> {
    if window == 0 || window > e.rows() {
        return Err(NnError::Window {
            window,
            rows: e.rows(),
        });
    }
    let out_rows = e.rows() - window + 1;
    let width = window * e.cols();
    let mut data = Vec::with_capacity(out_rows * width);
    for i in 0..out_rows {
        data.extend_from_slice(&e.data()[i * e.cols()..(i + window) * e.cols()]);
    }
    Tensor::new(out_rows, width, data)
}

/// Flattens `n_c` kernels of shape `m x d` into an `(m*d) x n_c` matrix whose
/// column `j` is kernel `j` in row-major order.
pub fn stack_kernels(kernels: &[Tensor]) -> Result<Tensor, NnError> {
    let first = kernels
        .first()
        .ok_or_else(|| NnError::Config("no convolution kernels".into()))?;
    let n = first.len();
    let mut out = Tensor::zeros(n, kernels.len());
    for (j, k) in kernels.iter().enumerate() {
        k.same_shape(first, "stack_kernels")?;
        for (p, &v) in k.data().iter().enumerate() {
            out.set(p, j, v);
        }
    }
    Ok(out)
}

/// Valid convolution sliding over page rows.
///
/// `kernels` is the stacked `(m*d) x n_c` form from [`stack_kernels`]; the
/// result is `(K-m+1) x n_c`.
pub fn conv_page(e: &Tensor, kernels: &Tensor, window: usize, bias: &Tensor) -> Result<Tensor, NnError> {
    let unfolded = unfold_rows(e, window)?;
    affine(&unfolded, kernels, bias)
}

/// Column-wise mean, `r x c -> 1 x c`.
pub fn avg_pool_rows(m: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let n = m.rows() as f64;
    out.map(|v| v / n)
}
