//! Contrastive and distillation objectives with analytic gradients.
//!
//! Inputs are row-major `n x d` matrices in f64. Every loss has a `_grad`
//! variant returning the loss value together with the gradient of each input.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Default softmax temperature for the contrastive objective.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub dz: Array2<f64>,
    pub dz_prime: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MoclrGrad {
    pub loss: f64,
    pub dz_v: Array2<f64>,
    pub dzp_vp: Array2<f64>,
    pub dz_vp: Array2<f64>,
    pub dzp_v: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DistillGrad {
    pub loss: f64,
    pub d_pred_base: Array2<f64>,
    pub d_pred_expert: Array2<f64>,
    pub d_base_raw: Array2<f64>,
    pub d_expert_raw: Array2<f64>,
}

fn check_pair(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::invalid("batch must contain at least one row"));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite embedding".into()));
    }
    Ok(())
}

/// Unit-normalise rows, returning the normalised matrix and the row norms.
fn normalize_rows(x: &ArrayView2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::NumericDomain(format!("{what} row {i} has zero norm")));
    }
    let mut u = x.to_owned();
    Zip::from(u.rows_mut()).and(&norms).for_each(|mut r, &n| r /= n);
    Ok((u, norms))
}

/// Gradient through `u = x / |x|`: `dx = (du - u (u . du)) / |x|`.
fn normalize_backward(u: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let mut dx = du.clone();
    Zip::from(dx.rows_mut())
        .and(u.rows())
        .and(norms)
        .for_each(|mut d, u, &n| {
            let proj = u.dot(&d);
            d.zip_mut_with(&u, |a, &b| *a = (*a - b * proj) / n);
        });
    dx
}

pub fn info_nce(z: ArrayView2<f64>, z_prime: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    Ok(info_nce_grad(z, z_prime, temperature)?.loss)
}

/// Cross-view InfoNCE: row `i` of `z` is the anchor, row `i` of `z_prime` its
/// positive, every other row of `z_prime` a negative. Cosine similarities.
pub fn info_nce_grad(z: ArrayView2<f64>, z_prime: ArrayView2<f64>, temperature: f64) -> Result<InfoNceGrad> {
    check_pair(&z, &z_prime)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let n = z.nrows();
    let (u, nu) = normalize_rows(&z, "anchor")?;
    let (v, nv) = normalize_rows(&z_prime, "positive")?;
    let logits = u.dot(&v.t()) / temperature;

    let mut loss = 0.0;
    // d loss / d logits = (softmax - onehot) / n
    let mut g = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[[i, i]];
        for j in 0..n {
            g[[i, j]] = (logits[[i, j]] - lse).exp() / n as f64;
        }
        g[[i, i]] -= 1.0 / n as f64;
    }
    loss /= n as f64;
    let du = g.dot(&v) / temperature;
    let dv = g.t().dot(&u) / temperature;
    Ok(InfoNceGrad {
        loss,
        dz: normalize_backward(&u, &nu, &du),
        dz_prime: normalize_backward(&v, &nv, &dv),
    })
}

pub fn moclr_loss(
    z_v: ArrayView2<f64>,
    zp_vp: ArrayView2<f64>,
    z_vp: ArrayView2<f64>,
    zp_v: ArrayView2<f64>,
    temperature: f64,
) -> Result<f64> {
    Ok(moclr_loss_grad(z_v, zp_vp, z_vp, zp_v, temperature)?.loss)
}

/// Symmetrised objective: online(v) against momentum(v') plus online(v')
/// against momentum(v).
pub fn moclr_loss_grad(
    z_v: ArrayView2<f64>,
    zp_vp: ArrayView2<f64>,
    z_vp: ArrayView2<f64>,
    zp_v: ArrayView2<f64>,
    temperature: f64,
) -> Result<MoclrGrad> {
    let a = info_nce_grad(z_v, zp_vp, temperature)?;
    let b = info_nce_grad(z_vp, zp_v, temperature)?;
    Ok(MoclrGrad {
        loss: a.loss + b.loss,
        dz_v: a.dz,
        dzp_vp: a.dz_prime,
        dz_vp: b.dz,
        dzp_v: b.dz_prime,
    })
}

pub fn distill_loss(
    pred_base: ArrayView2<f64>,
    pred_expert: ArrayView2<f64>,
    base_raw: ArrayView2<f64>,
    expert_raw: ArrayView2<f64>,
) -> Result<f64> {
    Ok(distill_loss_grad(pred_base, pred_expert, base_raw, expert_raw)?.loss)
}

/// Batch mean of `0.5 |p_b - t_b|^2 + 0.5 |p_k - t_k|^2`, where the targets
/// are the unit-normalised teacher projections. Predictions stay raw.
pub fn distill_loss_grad(
    pred_base: ArrayView2<f64>,
    pred_expert: ArrayView2<f64>,
    base_raw: ArrayView2<f64>,
    expert_raw: ArrayView2<f64>,
) -> Result<DistillGrad> {
    check_pair(&pred_base, &pred_expert)?;
    let (lb, d_pred_base, d_base_raw) = regression_loss_grad(pred_base, base_raw)?;
    let (lk, d_pred_expert, d_expert_raw) = regression_loss_grad(pred_expert, expert_raw)?;
    Ok(DistillGrad {
        loss: lb + lk,
        d_pred_base,
        d_pred_expert,
        d_base_raw,
        d_expert_raw,
    })
}

/// One teacher's term: batch mean of `0.5 |p - t / |t||^2`. Returns the loss
/// and the gradients with respect to `pred` and `raw`.
pub fn regression_loss_grad(
    pred: ArrayView2<f64>,
    raw: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair(&pred, &raw)?;
    let n = pred.nrows() as f64;
    let (t, norms) = normalize_rows(&raw, "teacher")?;
    let r = &pred - &t;
    let loss = 0.5 * r.iter().map(|v| v * v).sum::<f64>() / n;
    let d_pred = &r / n;
    let d_raw = normalize_backward(&t, &norms, &(-&d_pred));
    Ok((loss, d_pred, d_raw))
}
