//! Forward kernels and their vector-Jacobian products.
//!
//! Every kernel is a pure function of its inputs. The `*_vjp` companions take
//! the upstream gradient `g` (same shape as the forward output) and return the
//! gradient with respect to each input.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `sqrt(2/pi)` for the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = dims2(a);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose preserves size")
}

/// `A Bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a);
    let (n, k2) = dims2(b);
    if k != k2 {
        return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `Aᵀ B` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = dims2(a);
    let (k2, n) = dims2(b);
    if k != k2 {
        return Err(Error::shape("matmul_tn", format!("{:?}ᵀ x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for (i, &av) in ad[p * m..(p + 1) * m].iter().enumerate() {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `(G Bᵀ, Aᵀ G)` for `C = A B`.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(g, b)?, matmul_tn(a, g)?))
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = dims2(x);
    let mut out = x.data().to_vec();
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax preserves shape")
}

/// VJP expressed through the forward output `y`.
pub fn softmax_rows_vjp(y: &Tensor, g: &Tensor) -> Tensor {
    let (m, n) = dims2(y);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let r = i * n..(i + 1) * n;
        let dot: f64 = yd[r.clone()].iter().zip(&gd[r.clone()]).map(|(a, b)| a * b).sum();
        for j in r {
            out[j] = yd[j] * (gd[j] - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("softmax vjp preserves shape")
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (m, n) = dims2(x);
    if gamma.numel() != n || beta.numel() != n {
        return Err(Error::shape(
            "layer_norm",
            format!("x has {n} columns, gamma {} beta {}", gamma.numel(), beta.numel()),
        ));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = x.row(i);
        let (mean, inv) = row_stats(row, eps);
        out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * inv * g[j] + b[j]));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.numel() == 0 {
        return Err(Error::Empty("layer_norm input"));
    }
    let out = layer_norm_rows(&x.clone().reshape(vec![1, x.numel()])?, gamma, beta, eps)?;
    out.reshape(x.shape().to_vec())
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_rows_vjp(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (m, n) = dims2(x);
    let gam = gamma.data();
    let mut dx = Vec::with_capacity(m * n);
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    let mut xhat = vec![0.0; n];
    let mut dxhat = vec![0.0; n];
    for i in 0..m {
        let row = x.row(i);
        let grow = g.row(i);
        let (mean, inv) = row_stats(row, eps);
        for j in 0..n {
            xhat[j] = (row[j] - mean) * inv;
            dxhat[j] = grow[j] * gam[j];
            dgamma[j] += grow[j] * xhat[j];
            dbeta[j] += grow[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
        let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        dx.extend((0..n).map(|j| inv * (dxhat[j] - mean_d - xhat[j] * mean_dx)));
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(gamma.shape().to_vec(), dgamma).expect("shape"),
        Tensor::new(gamma.shape().to_vec(), dbeta).expect("shape"),
    )
}

pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_vjp(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| gelu_grad_scalar(xv) * gv)
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("gelu vjp preserves shape")
}

/// `-log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::Index {
            what: "class label",
            index: label,
            len: z.len(),
        });
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - z[label])
}

/// `softmax(logits) - onehot(label)`, shaped like `logits`.
pub fn cross_entropy_grad(logits: &Tensor, label: usize) -> Result<Tensor> {
    if label >= logits.numel() {
        return Err(Error::Index {
            what: "class label",
            index: label,
            len: logits.numel(),
        });
    }
    let flat = logits.clone().reshape(vec![1, logits.numel()])?;
    let mut p = softmax_rows(&flat).into_data();
    p[label] -= 1.0;
    Tensor::new(logits.shape().to_vec(), p)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    cosine_slices(a.data(), b.data())
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(a, b)` with respect to `b`, scaled by the upstream `g`.
pub fn cosine_grad_b(a: &[f64], b: &[f64], g: f64) -> Result<Vec<f64>> {
    let cos = cosine_slices(a, b)?;
    let na = dot(a, a).sqrt();
    let nb2 = dot(b, b);
    let nb = nb2.sqrt();
    Ok(a
        .iter()
        .zip(b)
        .map(|(&av, &bv)| g * (av / (na * nb) - cos * bv / nb2))
        .collect())
}

/// Returns `(d/da, d/db)` of `g * cos(a, b)`.
pub fn cosine_vjp(a: &Tensor, b: &Tensor, g: f64) -> Result<(Tensor, Tensor)> {
    let gb = cosine_grad_b(a.data(), b.data(), g)?;
    let ga = cosine_grad_b(b.data(), a.data(), g)?;
    Ok((
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
    ))
}
