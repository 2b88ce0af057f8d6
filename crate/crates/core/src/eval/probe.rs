//! Linear evaluation of frozen pooled features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cluster::layer_features;
use crate::config::ProbeConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Layer, ModelState, Network};
use crate::rng::{derive_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    /// Only reported with more than five classes.
    pub top5: Option<f64>,
    /// Base learning rate picked on the validation split.
    pub chosen_lr: f64,
    /// Validation top-1 of every grid point, in grid order.
    pub validation: Vec<(f64, f64)>,
    /// Test accuracy per class; `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
}

/// Frozen pooled features of the online network on center crops.
pub fn probe_features(m: &ModelState, d: &Dataset, view_side: usize) -> Result<Array2<f64>> {
    let idx: Vec<usize> = (0..d.len()).collect();
    layer_features(m, d, &idx, Layer::Pool, Network::Online, view_side)
}

/// Train a linear classifier on the encoder's frozen features and report
/// test accuracy. The encoder is only read.
pub fn linear_probe(
    m: &ModelState,
    train: &Dataset,
    test: &Dataset,
    cfg: &ProbeConfig,
    view_side: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let ytr = train.dense_labels()?;
    let yte = test.dense_labels()?;
    let xtr = probe_features(m, train, view_side)?;
    let xte = probe_features(m, test, view_side)?;
    let classes = train.num_classes().max(test.num_classes());
    probe_on_features(xtr.view(), &ytr, xte.view(), &yte, classes, cfg, seed)
}

/// Standardisation statistics of the training features.
struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let var = x.var_axis(Axis(0), 0.0);
        Standardizer {
            mean,
            scale: var.mapv(|v| 1.0 / v.sqrt().max(1e-8)),
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) * &self.scale
    }
}

/// Multinomial logistic regression.
struct Linear {
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Linear {
    fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    fn predict_ranked(&self, x: ArrayView2<f64>) -> Vec<Vec<usize>> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                let mut order: Vec<usize> = (0..r.len()).collect();
                order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
                order
            })
            .collect()
    }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut r in z.rows_mut() {
        let m = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        r.mapv_inplace(|v| (v - m).exp());
        let s = r.sum();
        r /= s;
    }
    z
}

/// Mini-batch SGD with Nesterov momentum and a cosine learning-rate decay.
fn fit(x: ArrayView2<f64>, y: &[usize], classes: usize, base_lr: f64, cfg: &ProbeConfig, rng: &mut Rng) -> Linear {
    let (n, d) = x.dim();
    let mut model = Linear {
        w: Array2::zeros((classes, d)),
        b: Array1::zeros(classes),
    };
    let (mut vw, mut vb) = (model.w.clone(), model.b.clone());
    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let peak = base_lr * batch as f64 / 256.0;
    let mu = cfg.momentum;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let lr = peak * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            let xb = x.select(Axis(0), chunk);
            let mut p = softmax_rows(model.logits(xb.view()));
            for (r, &i) in chunk.iter().enumerate() {
                p[[r, y[i]]] -= 1.0;
            }
            p /= chunk.len() as f64;
            let gw = p.t().dot(&xb) + &model.w * cfg.weight_decay;
            let gb = p.sum_axis(Axis(0));
            vw = &vw * mu + &gw;
            vb = &vb * mu + &gb;
            model.w = &model.w - &((&gw + &(&vw * mu)) * lr);
            model.b = &model.b - &((&gb + &(&vb * mu)) * lr);
            step += 1;
        }
    }
    model
}

fn accuracy(model: &Linear, x: ArrayView2<f64>, y: &[usize]) -> f64 {
    let ranked = model.predict_ranked(x);
    ranked.iter().zip(y).filter(|(r, &t)| r[0] == t).count() as f64 / y.len() as f64
}

fn check_labels(x: ArrayView2<f64>, y: &[usize], classes: usize, what: &str) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.nrows(),
            right: y.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: classes,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!("non-finite {what} feature")));
    }
    Ok(())
}

/// The probe protocol on precomputed features: sweep the grid on a
/// validation split of `train`, refit on all of `train`, score `test`.
pub fn probe_on_features(
    xtr: ArrayView2<f64>,
    ytr: &[usize],
    xte: ArrayView2<f64>,
    yte: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    check_labels(xtr, ytr, classes, "train")?;
    check_labels(xte, yte, classes, "test")?;
    if xtr.ncols() != xte.ncols() {
        return Err(Error::shape(xtr.ncols(), xte.ncols()));
    }
    if ytr.iter().all(|&l| l == ytr[0]) {
        return Err(Error::Infeasible("probe train set has a single class".into()));
    }
    if cfg.lr_grid.is_empty() {
        return Err(Error::invalid("probe learning-rate grid is empty"));
    }

    let mut perm: Vec<usize> = (0..ytr.len()).collect();
    perm.shuffle(&mut derive_rng(seed, "probe-split", 0));
    let n_val = ((ytr.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, ytr.len() - 1);
    let (val_idx, fit_idx) = perm.split_at(n_val);
    let (fit_x, val_x) = (xtr.select(Axis(0), fit_idx), xtr.select(Axis(0), val_idx));
    let fit_y: Vec<usize> = fit_idx.iter().map(|&i| ytr[i]).collect();
    let val_y: Vec<usize> = val_idx.iter().map(|&i| ytr[i]).collect();
    let st = Standardizer::fit(fit_x.view());
    let (fit_x, val_x) = (st.apply(fit_x.view()), st.apply(val_x.view()));

    let mut validation = Vec::with_capacity(cfg.lr_grid.len());
    for (g, &lr) in cfg.lr_grid.iter().enumerate() {
        let model = fit(fit_x.view(), &fit_y, classes, lr, cfg, &mut derive_rng(seed, "probe-sweep", g as u64));
        validation.push((lr, accuracy(&model, val_x.view(), &val_y)));
    }
    // First grid point wins ties.
    let chosen_lr = validation
        .iter()
        .fold(None::<(f64, f64)>, |best, &(lr, acc)| match best {
            Some((_, b)) if b >= acc => best,
            _ => Some((lr, acc)),
        })
        .expect("nonempty grid")
        .0;

    let st = Standardizer::fit(xtr);
    let model = fit(st.apply(xtr).view(), ytr, classes, chosen_lr, cfg, &mut derive_rng(seed, "probe-final", 0));
    let ranked = model.predict_ranked(st.apply(xte).view());
    let n = yte.len() as f64;
    let top1 = ranked.iter().zip(yte).filter(|(r, &t)| r[0] == t).count() as f64 / n;
    let top5 = (classes > 5).then(|| ranked.iter().zip(yte).filter(|(r, t)| r[..5].contains(t)).count() as f64 / n);
    let mut hit = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (r, &t) in ranked.iter().zip(yte) {
        count[t] += 1;
        hit[t] += usize::from(r[0] == t);
    }
    Ok(ProbeResult {
        top1,
        top5,
        chosen_lr,
        validation,
        per_class: (0..classes)
            .map(|c| (count[c] > 0).then(|| hit[c] as f64 / count[c] as f64))
            .collect(),
    })
}
