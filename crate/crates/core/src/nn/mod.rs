//! Minimal CPU neural-network substrate with hand-written backward passes.
//!
//! Activations are stored channel-major, `[C][N][H][W]`, so that a
//! convolution is a single GEMM `W[Co, Ci*k*k] x cols[Ci*k*k, N*Ho*Wo]` and
//! a dense layer is `W[out, in] x X[in, N]`. Parameters live in a flat
//! `ParamStore` addressed by index; layers only hold indices, so the online
//! and momentum networks share one architecture value and differ only in
//! their stores.

mod layers;
mod store;

pub use layers::{BatchNorm, BnCache, Conv2d, ConvCache, Linear, BN_EPS};
pub use store::{Grads, ParamEntry, ParamKind, ParamStore, StoreBuilder};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// A channel-major activation tensor `[channels][n][height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub data: Vec<f32>,
    pub channels: usize,
    pub n: usize,
    pub height: usize,
    pub width: usize,
}

impl Act {
    pub fn zeros(channels: usize, n: usize, height: usize, width: usize) -> Self {
        Act {
            data: vec![0.0; channels * n * height * width],
            channels,
            n,
            height,
            width,
        }
    }

    /// A `[features][n]` matrix viewed as a 1x1 spatial map.
    pub fn dense(features: usize, n: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), features * n);
        Act {
            data,
            channels: features,
            n,
            height: 1,
            width: 1,
        }
    }

    /// Elements per channel.
    pub fn plane(&self) -> usize {
        self.n * self.height * self.width
    }

    pub fn same_shape(&self) -> Self {
        Act::zeros(self.channels, self.n, self.height, self.width)
    }

    /// Row-major `[n][features]` copy of a dense activation.
    pub fn to_rows(&self) -> Vec<Vec<f32>> {
        debug_assert_eq!(self.height * self.width, 1);
        (0..self.n)
            .map(|i| (0..self.channels).map(|c| self.data[c * self.n + i]).collect())
            .collect()
    }

    /// Build a dense `[features][n]` activation from row-major rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let n = rows.len();
        let features = rows.first().map_or(0, Vec::len);
        let mut data = vec![0.0; n * features];
        for (i, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                data[c * n + i] = *v;
            }
        }
        Act::dense(features, n, data)
    }

    pub fn add_assign(&mut self, other: &Act) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Whether normalisation layers use batch statistics (and record running
/// averages) or their stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic updates produced by a training-mode forward pass. They
/// are committed to the store after the pass so forward can borrow the store
/// immutably.
#[derive(Debug, Default)]
pub struct StatUpdates {
    updates: Vec<(usize, usize, Vec<f32>, Vec<f32>)>,
}

impl StatUpdates {
    pub(crate) fn push(&mut self, mean_idx: usize, var_idx: usize, mean: Vec<f32>, var: Vec<f32>) {
        self.updates.push((mean_idx, var_idx, mean, var));
    }

    pub fn commit(self, store: &mut ParamStore) {
        for (mi, vi, mean, var) in self.updates {
            store.blend_running(mi, &mean);
            store.blend_running(vi, &var);
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f32],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f32],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    let av = ArrayView2::from_shape((a_rows, a_cols), a).expect("gemm a shape");
    let bv = ArrayView2::from_shape((b_rows, b_cols), b).expect("gemm b shape");
    let av = if trans_a { av.reversed_axes() } else { av };
    let bv = if trans_b { bv.reversed_axes() } else { bv };
    let mut cv = ArrayViewMut2::from_shape((av.nrows(), bv.ncols()), c).expect("gemm c shape");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}

pub(crate) fn relu_forward(x: &mut Act) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Mask `grad` by the positive entries of the ReLU output.
pub(crate) fn relu_backward(output: &Act, grad: &mut Act) {
    grad.data
        .iter_mut()
        .zip(&output.data)
        .for_each(|(g, &y)| {
            if y <= 0.0 {
                *g = 0.0
            }
        });
}

/// Mean over the spatial extent: `[C][N][H][W] -> [C][N]`.
pub(crate) fn global_avg_pool(x: &Act) -> Act {
    let hw = x.height * x.width;
    let mut out = vec![0.0; x.channels * x.n];
    for (o, chunk) in out.iter_mut().zip(x.data.chunks_exact(hw)) {
        *o = chunk.iter().sum::<f32>() / hw as f32;
    }
    Act::dense(x.channels, x.n, out)
}

pub(crate) fn global_avg_pool_backward(grad: &Act, height: usize, width: usize) -> Act {
    let hw = height * width;
    let mut out = Act::zeros(grad.channels, grad.n, height, width);
    for (chunk, g) in out.data.chunks_exact_mut(hw).zip(&grad.data) {
        chunk.iter_mut().for_each(|v| *v = g / hw as f32);
    }
    out
}
