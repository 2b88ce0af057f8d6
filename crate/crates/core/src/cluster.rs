//! Representation extraction, spherical k-means and dataset partitioning.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::eval_view;
use crate::container::{ArrayFile, NamedArray};
use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::model::{Layer, ModelState, Network};
use crate::rng::{derive_rng, Rng};

/// Stop when an iteration improves the objective by less than this.
pub const KMEANS_TOLERANCE: f64 = 1e-7;
const EXTRACT_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    pub rows: Array2<f64>,
    pub layer: Layer,
    /// Dataset index of each row.
    pub indices: Vec<usize>,
}

impl RepresentationMatrix {
    pub fn new(rows: Array2<f64>, layer: Layer) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("non-finite representation".into()));
        }
        let indices = (0..rows.nrows()).collect();
        Ok(RepresentationMatrix { rows, layer, indices })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// `K x d`, unit-norm rows.
    pub centroids: Array2<f64>,
    pub layer: Layer,
    /// Final objective `sum(1 - cos)` over the fitted rows.
    pub inertia: f64,
    /// Assignments of the fitted rows.
    pub assignments: Vec<usize>,
    /// Objective after each assignment step of the returned restart.
    pub history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClusterMeta {
    layer: Layer,
    k: usize,
    inertia: f64,
    history: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = ArrayFile::default();
        let (k, d) = self.centroids.dim();
        file.insert(
            "centroids",
            NamedArray::f64(vec![k, d], self.centroids.iter().copied().collect()),
        );
        file.insert(
            "assignments",
            NamedArray::i64(
                vec![self.assignments.len()],
                self.assignments.iter().map(|&a| a as i64).collect(),
            ),
        );
        file.meta = Some(serde_json::to_value(ClusterMeta {
            layer: self.layer,
            k,
            inertia: self.inertia,
            history: self.history.clone(),
        })?);
        file.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut file = ArrayFile::read(path)?;
        let meta: ClusterMeta = serde_json::from_value(
            file.meta
                .take()
                .ok_or_else(|| Error::Format(format!("{}: missing metadata", path.display())))?,
        )?;
        let (shape, c) = file.take_f64("centroids")?;
        if shape.len() != 2 || shape[0] != meta.k {
            return Err(Error::Integrity(format!("centroid shape {shape:?} vs k = {}", meta.k)));
        }
        let centroids = Array2::from_shape_vec((shape[0], shape[1]), c)
            .map_err(|e| Error::Integrity(e.to_string()))?;
        let (_, a) = file.take_i64("assignments")?;
        let assignments = a
            .into_iter()
            .map(|v| usize::try_from(v).ok().filter(|&v| v < meta.k))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Integrity("assignment outside [0, k)".into()))?;
        Ok(ClusterModel {
            centroids,
            layer: meta.layer,
            inertia: meta.inertia,
            assignments,
            history: meta.history,
        })
    }
}

/// Evaluation-mode momentum-network features of center-cropped images.
/// With `sample_size`, a uniformly drawn subset in ascending index order.
pub fn extract_representations(
    m: &ModelState,
    d: &Dataset,
    layer: Layer,
    sample_size: Option<usize>,
    view_side: usize,
    rng: &mut Rng,
) -> Result<RepresentationMatrix> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = match sample_size {
        Some(s) if s > d.len() => {
            return Err(Error::invalid(format!(
                "sample size {s} exceeds dataset size {}",
                d.len()
            )))
        }
        Some(0) => return Err(Error::invalid("sample size must be positive")),
        Some(s) => {
            let mut idx = rand::seq::index::sample(rng, d.len(), s).into_vec();
            idx.sort_unstable();
            idx
        }
        None => (0..d.len()).collect(),
    };
    let rows = layer_features(m, d, &indices, layer, Network::Momentum, view_side)?;
    let mut r = RepresentationMatrix::new(rows, layer)?;
    r.indices = indices;
    Ok(r)
}

/// Evaluation-mode features of the chosen layer for the given items.
pub fn layer_features(
    m: &ModelState,
    d: &Dataset,
    indices: &[usize],
    layer: Layer,
    net: Network,
    view_side: usize,
) -> Result<Array2<f64>> {
    let dim = match layer {
        Layer::Pool => m.arch.config().encoder.pooled_dim(),
        Layer::Hidden => m.arch.config().head.hidden_dim,
        Layer::Projection => m.arch.config().head.output_dim,
    };
    let mut out = Array2::<f64>::zeros((indices.len(), dim));
    for (c, chunk) in indices.chunks(EXTRACT_CHUNK).enumerate() {
        let views: Vec<Image> = chunk
            .iter()
            .map(|&i| eval_view(&d.get(i).image, view_side))
            .collect();
        let refs: Vec<&Image> = views.iter().collect();
        let o = m.embed(&refs, net)?;
        let act = match layer {
            Layer::Pool => o.pooled,
            Layer::Hidden => o.hidden,
            Layer::Projection => o.z,
        };
        for (r, row) in act.to_rows().into_iter().enumerate() {
            for (j, v) in row.into_iter().enumerate() {
                out[[c * EXTRACT_CHUNK + r, j]] = f64::from(v);
            }
        }
    }
    Ok(out)
}

fn unit_rows(r: &Array2<f64>) -> Result<Array2<f64>> {
    let mut u = r.clone();
    for (i, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::NumericDomain(format!("row {i} has zero or non-finite norm")));
        }
        row /= n;
    }
    Ok(u)
}

/// Index of the most similar centroid, lowest index on ties.
fn nearest(u: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in centroids.axis_iter(Axis(0)).enumerate() {
        let s = u.dot(&c);
        if s > best.1 {
            best = (k, s);
        }
    }
    best
}

fn assign_unit(u: &Array2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    u.axis_iter(Axis(0)).map(|row| nearest(row, centroids)).unzip()
}

/// Spherical k-means++ seeding: first centre uniform, later ones drawn with
/// weight `1 - max cos` to the chosen centres.
fn seed_centroids(u: &Array2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = u.nrows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut best_sim: Vec<f64> = u.axis_iter(Axis(0)).map(|r| r.dot(&u.row(chosen[0]))).collect();
    while chosen.len() < k {
        let weights: Vec<f64> = best_sim.iter().map(|s| (1.0 - s).max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    pick = i;
                    if t < *w {
                        break;
                    }
                    t -= w;
                }
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for (s, r) in best_sim.iter_mut().zip(u.axis_iter(Axis(0))) {
            *s = s.max(r.dot(&u.row(next)));
        }
    }
    let mut c = Array2::zeros((k, u.ncols()));
    for (j, &i) in chosen.iter().enumerate() {
        c.row_mut(j).assign(&u.row(i));
    }
    c
}

fn fit_once(u: &Array2<f64>, k: usize, max_iters: usize, rng: &mut Rng) -> (Array2<f64>, Vec<usize>, Vec<f64>) {
    let n = u.nrows();
    let mut centroids = seed_centroids(u, k, rng);
    let mut history = Vec::new();
    let mut prev: Option<Vec<usize>> = None;
    loop {
        let (labels, sims) = assign_unit(u, &centroids);
        let objective: f64 = sims.iter().map(|s| 1.0 - s).sum();
        let improvement = history.last().map(|p: &f64| p - objective);
        history.push(objective);
        let converged = prev.as_ref() == Some(&labels)
            || improvement.is_some_and(|d| d < KMEANS_TOLERANCE);
        if converged || history.len() >= max_iters {
            return (centroids, labels, history);
        }

        let mut sums = Array2::<f64>::zeros((k, u.ncols()));
        for (i, &l) in labels.iter().enumerate() {
            let mut row = sums.row_mut(l);
            row += &u.row(i);
        }
        let mut used = vec![false; n];
        for c in 0..k {
            let norm = sums.row(c).dot(&sums.row(c)).sqrt();
            if norm > 0.0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / norm));
                continue;
            }
            // Empty (or cancelling) cluster: reseed at the worst-served point.
            let far = (0..n)
                .filter(|&i| !used[i])
                .min_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)))
                .unwrap_or(0);
            used[far] = true;
            centroids.row_mut(c).assign(&u.row(far));
        }
        prev = Some(labels);
    }
}

/// Spherical k-means with cosine similarity; best of `n_init` restarts.
pub fn kmeans_cosine(
    r: &RepresentationMatrix,
    k: usize,
    max_iters: usize,
    n_init: usize,
    rng: &mut Rng,
) -> Result<ClusterModel> {
    if k == 0 || k > r.len() {
        return Err(Error::Infeasible(format!("cannot fit {k} clusters to {} rows", r.len())));
    }
    if max_iters == 0 || n_init == 0 {
        return Err(Error::invalid("max_iters and n_init must be positive"));
    }
    let u = unit_rows(&r.rows)?;
    let base: u64 = rng.gen();
    let mut best: Option<ClusterModel> = None;
    for restart in 0..n_init {
        let mut rr = derive_rng(base, "kmeans-restart", restart as u64);
        let (centroids, assignments, history) = fit_once(&u, k, max_iters, &mut rr);
        let inertia = *history.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(ClusterModel {
                centroids,
                layer: r.layer,
                inertia,
                assignments,
                history,
            });
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// Most similar centroid for every row; ties go to the lowest index.
pub fn assign(c: &ClusterModel, r: &RepresentationMatrix) -> Result<Vec<usize>> {
    if c.centroids.ncols() != r.dim() {
        return Err(Error::shape(c.centroids.ncols(), r.dim()));
    }
    Ok(assign_unit(&unit_rows(&r.rows)?, &c.centroids).0)
}

/// Split `d` into `k` order-preserving subsets by label; empty subsets allowed.
pub fn partition(d: &Dataset, labels: &[usize], k: usize) -> Result<Vec<Dataset>> {
    if labels.len() != d.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: d.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::IndexOutOfRange { index: bad, len: k });
    }
    Ok((0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..d.len()).filter(|&i| labels[i] == c).collect();
            d.select(format!("{}/cluster-{c}", d.name()), &idx)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_util::labelled;
    use crate::rng::rng_from_seed;
    use ndarray::array;

    fn rep(rows: Array2<f64>) -> RepresentationMatrix {
        RepresentationMatrix::new(rows, Layer::Hidden).unwrap()
    }

    #[test]
    fn single_cluster_is_normalised_mean() {
        let r = rep(array![[2.0, 0.0], [0.0, 3.0], [1.0, 1.0]]);
        let c = kmeans_cosine(&r, 1, 50, 2, &mut rng_from_seed(1)).unwrap();
        let s = 1.0 + 1.0 / 2f64.sqrt();
        let expect = array![s, s] / (2.0 * s * s).sqrt();
        assert!((&c.centroids.row(0) - &expect).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(c.assignments, vec![0, 0, 0]);
    }

    #[test]
    fn two_orthogonal_groups() {
        let r = rep(array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]);
        let c = kmeans_cosine(&r, 2, 50, 4, &mut rng_from_seed(2)).unwrap();
        let a = &c.assignments;
        assert!(a[0] == a[1] && a[1] == a[2] && a[3] == a[4] && a[4] == a[5] && a[0] != a[3]);
        assert!(c.inertia.abs() < 1e-12);
        let scaled = rep(&r.rows * 5.0);
        let c5 = kmeans_cosine(&scaled, 2, 50, 4, &mut rng_from_seed(2)).unwrap();
        assert_eq!(c5.assignments, c.assignments);
        assert_eq!(c5.centroids, c.centroids);
    }

    #[test]
    fn assign_ties_and_fixpoint() {
        let model = ClusterModel {
            centroids: array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]],
            layer: Layer::Hidden,
            inertia: 0.0,
            assignments: vec![],
            history: vec![],
        };
        let r = rep(array![[-2.0, 0.0], [1.0, 1.0]]);
        assert_eq!(assign(&model, &r).unwrap(), vec![2, 0]);
        let bad = rep(array![[1.0, 0.0, 0.0]]);
        assert!(matches!(assign(&model, &bad), Err(Error::ShapeMismatch { .. })));

        let mut rng = rng_from_seed(5);
        let rows = Array2::from_shape_fn((40, 4), |_| rng.gen_range(-1.0..1.0));
        let r = rep(rows);
        let fit = kmeans_cosine(&r, 3, 100, 3, &mut rng).unwrap();
        assert_eq!(assign(&fit, &r).unwrap(), fit.assignments);
        assert!(fit.history.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for c in fit.centroids.axis_iter(Axis(0)) {
            assert!((c.dot(&c).sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_requests() {
        let r = rep(array![[1.0, 0.0]]);
        assert!(matches!(
            kmeans_cosine(&r, 2, 10, 1, &mut rng_from_seed(0)),
            Err(Error::Infeasible(_))
        ));
        let z = rep(array![[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            kmeans_cosine(&z, 1, 10, 1, &mut rng_from_seed(0)),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn partition_keeps_order() {
        let d = labelled(&[0, 1, 2, 3], 4);
        let parts = partition(&d, &[0, 1, 0, 1], 3).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![2, 2, 0]);
        assert_eq!(parts[0].labels(), vec![Some(0), Some(2)]);
        let all = partition(&d, &[0; 4], 2).unwrap();
        assert_eq!(all[0].len(), 4);
        assert!(all[1].is_empty());
        assert!(matches!(partition(&d, &[0], 1), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = rep(array![[1.0, 0.1], [0.9, 0.0], [0.0, 1.0]]);
        let c = kmeans_cosine(&r, 2, 20, 2, &mut rng_from_seed(3)).unwrap();
        let path = dir.path().join("clusters.safetensors");
        c.write(&path).unwrap();
        assert_eq!(ClusterModel::read(&path).unwrap(), c);
    }
}
