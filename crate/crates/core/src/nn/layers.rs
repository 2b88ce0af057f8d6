use super::{gemm, Act, Grads, Mode, ParamKind, ParamStore, StatUpdates, StoreBuilder};

pub const BN_EPS: f32 = 1e-5;

/// Bias-free 2-D convolution (every convolution is followed by BatchNorm).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: usize,
}

pub struct ConvCache {
    /// im2col matrix `[Ci*k*k][N*Ho*Wo]`, or the (possibly strided) input for 1x1.
    cols: Vec<f32>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        b: &mut StoreBuilder<'_>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = b.weight(
            &format!("{name}/weight"),
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
        );
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Multiply-accumulates per image.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let (ho, wo) = self.out_size(h, w);
        ho * wo * self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Act, ho: usize, wo: usize) -> Vec<f32> {
        let k = self.kernel;
        let (n, h, w) = (x.n, x.height, x.width);
        let cols_w = n * ho * wo;
        let mut cols = vec![0.0f32; self.in_channels * k * k * cols_w];
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                    for img in 0..n {
                        let src = &x.data[(c * n + img) * h * w..(c * n + img + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst_row = &mut dst[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride) as isize + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], shape: (usize, usize, usize, usize), ho: usize, wo: usize) -> Act {
        let (c_in, n, h, w) = shape;
        let k = self.kernel;
        let cols_w = n * ho * wo;
        let mut x = Act::zeros(c_in, n, h, w);
        let pad = self.padding as isize;
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * cols_w..(row + 1) * cols_w];
                    for img in 0..n {
                        let dst = &mut x.data[(c * n + img) * h * w..(c * n + img + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * self.stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
                            let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, s) in src_row.iter().enumerate() {
                                let ix = (ox * self.stride) as isize + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, store: &ParamStore, x: &Act) -> (Act, ConvCache) {
        debug_assert_eq!(x.channels, self.in_channels);
        let (ho, wo) = self.out_size(x.height, x.width);
        let cols = if self.kernel == 1 && self.stride == 1 {
            x.data.clone()
        } else {
            self.im2col(x, ho, wo)
        };
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols_w = x.n * ho * wo;
        let mut y = Act::zeros(self.out_channels, x.n, ho, wo);
        gemm(
            store.value(self.weight),
            self.out_channels,
            kk,
            false,
            &cols,
            kk,
            cols_w,
            false,
            &mut y.data,
            0.0,
        );
        (
            y,
            ConvCache {
                cols,
                in_shape: (x.channels, x.n, x.height, x.width),
            },
        )
    }

    pub fn backward(&self, store: &ParamStore, cache: &ConvCache, dy: &Act, grads: &mut Grads) -> Act {
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols_w = dy.n * dy.height * dy.width;
        // dW += dY * cols^T
        gemm(
            &dy.data,
            self.out_channels,
            cols_w,
            false,
            &cache.cols,
            kk,
            cols_w,
            true,
            grads.get_mut(self.weight),
            1.0,
        );
        let mut dcols = vec![0.0f32; kk * cols_w];
        gemm(
            store.value(self.weight),
            self.out_channels,
            kk,
            true,
            &dy.data,
            self.out_channels,
            cols_w,
            false,
            &mut dcols,
            0.0,
        );
        let (c, n, h, w) = cache.in_shape;
        if self.kernel == 1 && self.stride == 1 {
            Act {
                data: dcols,
                channels: c,
                n,
                height: h,
                width: w,
            }
        } else {
            self.col2im(&dcols, cache.in_shape, dy.height, dy.width)
        }
    }
}

/// Per-channel batch normalisation with affine scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    scale: usize,
    shift: usize,
    running_mean: usize,
    running_var: usize,
}

pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(b: &mut StoreBuilder<'_>, name: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            scale: b.constant(&format!("{name}/scale"), ParamKind::NormScale, channels, 1.0),
            shift: b.constant(&format!("{name}/shift"), ParamKind::NormShift, channels, 0.0),
            running_mean: b.constant(
                &format!("{name}/running_mean"),
                ParamKind::RunningMean,
                channels,
                0.0,
            ),
            running_var: b.constant(
                &format!("{name}/running_var"),
                ParamKind::RunningVar,
                channels,
                1.0,
            ),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &mut Act, mode: Mode, stats: &mut StatUpdates) -> BnCache {
        let m = x.plane();
        let gamma = store.value(self.scale);
        let beta = store.value(self.shift);
        let mut inv_std = vec![0.0f32; self.channels];
        let mut xhat = vec![0.0f32; x.data.len()];
        let (mut means, mut vars) = (vec![0.0f32; self.channels], vec![0.0f32; self.channels]);
        for c in 0..self.channels {
            let row = &mut x.data[c * m..(c + 1) * m];
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = (row.iter().map(|&v| f64::from(v)).sum::<f64>() / m as f64) as f32;
                    let var = (row
                        .iter()
                        .map(|&v| {
                            let d = f64::from(v - mean);
                            d * d
                        })
                        .sum::<f64>()
                        / m as f64) as f32;
                    (mean, var)
                }
                Mode::Eval => (
                    store.value(self.running_mean)[c],
                    store.value(self.running_var)[c],
                ),
            };
            means[c] = mean;
            vars[c] = var;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = is;
            let xh = &mut xhat[c * m..(c + 1) * m];
            for (v, h) in row.iter_mut().zip(xh.iter_mut()) {
                *h = (*v - mean) * is;
                *v = gamma[c] * *h + beta[c];
            }
        }
        if mode == Mode::Train {
            stats.push(self.running_mean, self.running_var, means, vars);
        }
        BnCache { xhat, inv_std, mode }
    }

    pub fn backward(&self, store: &ParamStore, cache: &BnCache, dy: &mut Act, grads: &mut Grads) {
        let m = dy.plane();
        let gamma = store.value(self.scale).to_vec();
        let mut dgamma = vec![0.0f32; self.channels];
        let mut dbeta = vec![0.0f32; self.channels];
        for c in 0..self.channels {
            let g = &mut dy.data[c * m..(c + 1) * m];
            let xh = &cache.xhat[c * m..(c + 1) * m];
            let sum_dy: f32 = g.iter().sum();
            let sum_dy_xh: f32 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            dgamma[c] = sum_dy_xh;
            dbeta[c] = sum_dy;
            let is = cache.inv_std[c];
            match cache.mode {
                Mode::Train => {
                    let k = gamma[c] * is / m as f32;
                    for (gi, &x) in g.iter_mut().zip(xh) {
                        *gi = k * (m as f32 * *gi - sum_dy - x * sum_dy_xh);
                    }
                }
                Mode::Eval => g.iter_mut().for_each(|gi| *gi *= gamma[c] * is),
            }
        }
        grads.get_mut(self.scale).iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
        grads.get_mut(self.shift).iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
    }
}

/// Dense layer `y = W x + b` on `[features][n]` activations.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn new(b: &mut StoreBuilder<'_>, name: &str, in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            weight: b.weight(
                &format!("{name}/weight"),
                vec![out_features, in_features],
                in_features,
            ),
            bias: b.constant(&format!("{name}/bias"), ParamKind::Bias, out_features, 0.0),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Act) -> Act {
        debug_assert_eq!(x.channels, self.in_features);
        let n = x.n;
        let mut data = vec![0.0f32; self.out_features * n];
        let bias = store.value(self.bias);
        for (o, row) in data.chunks_exact_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(
            store.value(self.weight),
            self.out_features,
            self.in_features,
            false,
            &x.data,
            self.in_features,
            n,
            false,
            &mut data,
            1.0,
        );
        Act::dense(self.out_features, n, data)
    }

    pub fn backward(&self, store: &ParamStore, x: &Act, dy: &Act, grads: &mut Grads) -> Act {
        let n = x.n;
        gemm(
            &dy.data,
            self.out_features,
            n,
            false,
            &x.data,
            self.in_features,
            n,
            true,
            grads.get_mut(self.weight),
            1.0,
        );
        for (db, row) in grads.get_mut(self.bias).iter_mut().zip(dy.data.chunks_exact(n)) {
            *db += row.iter().sum::<f32>();
        }
        let mut dx = vec![0.0f32; self.in_features * n];
        gemm(
            store.value(self.weight),
            self.out_features,
            self.in_features,
            true,
            &dy.data,
            self.out_features,
            n,
            false,
            &mut dx,
            0.0,
        );
        Act::dense(self.in_features, n, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn random_act(c: usize, n: usize, h: usize, w: usize, seed: u64) -> Act {
        let mut rng = rng_from_seed(seed);
        Act {
            data: (0..c * n * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            channels: c,
            n,
            height: h,
            width: w,
        }
    }

    /// Scalar objective sum(y * probe) and its gradient `probe`.
    fn probe_for(y: &Act, seed: u64) -> Act {
        random_act(y.channels, y.n, y.height, y.width, seed)
    }

    fn dot(a: &Act, b: &Act) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = rng_from_seed(1);
        let mut b = StoreBuilder::new(&mut rng);
        let conv = Conv2d::new(&mut b, "c", 2, 3, 3, 2);
        let store = b.finish();
        let x = random_act(2, 2, 7, 6, 2);
        let (y, _) = conv.forward(&store, &x);
        let (ho, wo) = conv.out_size(7, 6);
        assert_eq!((y.height, y.width), (ho, wo));
        let w = store.value(conv.weight);
        for co in 0..3 {
            for n in 0..2 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f32;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                                        continue;
                                    }
                                    let xv = x.data[((ci * 2 + n) * 7 + iy as usize) * 6 + ix as usize];
                                    acc += w[((co * 2 + ci) * 3 + ky) * 3 + kx] * xv;
                                }
                            }
                        }
                        let got = y.data[((co * 2 + n) * ho + oy) * wo + ox];
                        assert!((got - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for (k, stride) in [(3, 1), (3, 2), (1, 1), (1, 2)] {
            let mut rng = rng_from_seed(3);
            let mut b = StoreBuilder::new(&mut rng);
            let conv = Conv2d::new(&mut b, "c", 2, 3, k, stride);
            let mut store = b.finish();
            let x = random_act(2, 2, 5, 5, 4);
            let (y, cache) = conv.forward(&store, &x);
            let probe = probe_for(&y, 5);
            let mut grads = store.zero_grads();
            let dx = conv.backward(&store, &cache, &probe, &mut grads);
            let eps = 1e-2f32;
            for i in (0..x.data.len()).step_by(7) {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let fd = (dot(&conv.forward(&store, &xp).0, &probe) - dot(&conv.forward(&store, &xm).0, &probe))
                    / (2.0 * f64::from(eps));
                assert!((fd - f64::from(dx.data[i])).abs() < 1e-3, "dx k={k} s={stride}");
            }
            let widx = conv.weight;
            for i in (0..store.value(widx).len()).step_by(5) {
                let orig = store.entries()[widx].value[i];
                store.entries_mut()[widx].value[i] = orig + eps;
                let fp = dot(&conv.forward(&store, &x).0, &probe);
                store.entries_mut()[widx].value[i] = orig - eps;
                let fm = dot(&conv.forward(&store, &x).0, &probe);
                store.entries_mut()[widx].value[i] = orig;
                let fd = (fp - fm) / (2.0 * f64::from(eps));
                assert!((fd - f64::from(grads.tensors[widx][i])).abs() < 1e-3, "dw k={k} s={stride}");
            }
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = rng_from_seed(6);
        let mut b = StoreBuilder::new(&mut rng);
        let bn = BatchNorm::new(&mut b, "bn", 3);
        let mut store = b.finish();
        store.entries_mut()[bn.scale].value = vec![0.5, 1.5, -1.0];
        store.entries_mut()[bn.shift].value = vec![0.1, 0.0, -0.3];
        let x = random_act(3, 4, 2, 2, 7);
        let objective = |store: &ParamStore, x: &Act, probe: &Act| {
            let mut y = x.clone();
            bn.forward(store, &mut y, Mode::Train, &mut StatUpdates::default());
            dot(&y, probe)
        };
        let mut y = x.clone();
        let cache = bn.forward(&store, &mut y, Mode::Train, &mut StatUpdates::default());
        let probe = probe_for(&y, 8);
        let mut dy = probe.clone();
        let mut grads = store.zero_grads();
        bn.backward(&store, &cache, &mut dy, &mut grads);
        let eps = 1e-2f32;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (objective(&store, &xp, &probe) - objective(&store, &xm, &probe)) / (2.0 * f64::from(eps));
            assert!((fd - f64::from(dy.data[i])).abs() < 2e-3, "i={i} fd={fd} an={}", dy.data[i]);
        }
        for idx in [bn.scale, bn.shift] {
            for i in 0..3 {
                let orig = store.entries()[idx].value[i];
                store.entries_mut()[idx].value[i] = orig + eps;
                let fp = objective(&store, &x, &probe);
                store.entries_mut()[idx].value[i] = orig - eps;
                let fm = objective(&store, &x, &probe);
                store.entries_mut()[idx].value[i] = orig;
                let fd = (fp - fm) / (2.0 * f64::from(eps));
                assert!((fd - f64::from(grads.tensors[idx][i])).abs() < 2e-3);
            }
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats_and_commits_updates() {
        let mut rng = rng_from_seed(9);
        let mut b = StoreBuilder::new(&mut rng);
        let bn = BatchNorm::new(&mut b, "bn", 1);
        let mut store = b.finish();
        let x = Act::dense(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let mut y = x.clone();
        let mut stats = StatUpdates::default();
        bn.forward(&store, &mut y, Mode::Train, &mut stats);
        stats.commit(&mut store);
        assert!((store.value(bn.running_mean)[0] - 0.25).abs() < 1e-6);
        assert!((store.value(bn.running_var)[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-6);
        let mut e = x.clone();
        bn.forward(&store, &mut e, Mode::Eval, &mut StatUpdates::default());
        let expect = (1.0 - 0.25) / (1.025f32 + BN_EPS).sqrt();
        assert!((e.data[0] - expect).abs() < 1e-5);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = rng_from_seed(10);
        let mut b = StoreBuilder::new(&mut rng);
        let lin = Linear::new(&mut b, "fc", 4, 3);
        let mut store = b.finish();
        store.entries_mut()[lin.bias].value = vec![0.2, -0.1, 0.4];
        let x = random_act(4, 5, 1, 1, 11);
        let y = lin.forward(&store, &x);
        let probe = probe_for(&y, 12);
        let mut grads = store.zero_grads();
        let dx = lin.backward(&store, &x, &probe, &mut grads);
        let eps = 1e-2f32;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (dot(&lin.forward(&store, &xp), &probe) - dot(&lin.forward(&store, &xm), &probe))
                / (2.0 * f64::from(eps));
            assert!((fd - f64::from(dx.data[i])).abs() < 1e-3);
        }
        for idx in [lin.weight, lin.bias] {
            for i in 0..store.value(idx).len() {
                let orig = store.entries()[idx].value[i];
                store.entries_mut()[idx].value[i] = orig + eps;
                let fp = dot(&lin.forward(&store, &x), &probe);
                store.entries_mut()[idx].value[i] = orig - eps;
                let fm = dot(&lin.forward(&store, &x), &probe);
                store.entries_mut()[idx].value[i] = orig;
                assert!(((fp - fm) / (2.0 * f64::from(eps)) - f64::from(grads.tensors[idx][i])).abs() < 1e-3);
            }
        }
    }
}
