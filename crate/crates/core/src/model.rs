//! Residual encoder, projection head, momentum copy and distillation regressors.

use serde::{Deserialize, Serialize};

use crate::container::ArrayFile;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward, Act, BatchNorm, BnCache,
    Conv2d, ConvCache, Grads, Linear, Mode, ParamStore, StatUpdates, StoreBuilder,
};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    /// Channel width of each residual stage. The first stage keeps the input
    /// resolution, every later stage halves it.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_channels: 3,
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
        }
    }
}

impl EncoderConfig {
    pub fn pooled_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.input_channels, 1 | 3) {
            return Err(Error::invalid("encoder input_channels must be 1 or 3"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::invalid("encoder widths and blocks_per_stage must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub final_norm: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_dim: 512,
            output_dim: 64,
            final_norm: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Network {
    Online,
    Momentum,
}

/// Representation layers usable for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Pool,
    Hidden,
    Projection,
}

impl std::fmt::Display for Layer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layer::Pool => "pool",
            Layer::Hidden => "hidden",
            Layer::Projection => "projection",
        })
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

struct BlockTape {
    c1: ConvCache,
    b1: BnCache,
    a1: Act,
    c2: ConvCache,
    b2: BnCache,
    short: Option<(ConvCache, BnCache)>,
    out: Act,
}

impl Block {
    fn new(b: &mut StoreBuilder<'_>, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(b, "short_conv", cin, cout, 1, stride),
                BatchNorm::new(b, "short_bn", cout),
            )
        });
        Block {
            conv1: Conv2d::new(b, "conv1", cin, cout, 3, stride),
            bn1: BatchNorm::new(b, "bn1", cout),
            conv2: Conv2d::new(b, "conv2", cout, cout, 3, 1),
            bn2: BatchNorm::new(b, "bn2", cout),
            shortcut,
        }
    }

    fn forward(&self, s: &ParamStore, x: &Act, mode: Mode, stats: &mut StatUpdates) -> (Act, BlockTape) {
        let (mut h, c1) = self.conv1.forward(s, x);
        let b1 = self.bn1.forward(s, &mut h, mode, stats);
        relu_forward(&mut h);
        let a1 = h;
        let (mut out, c2) = self.conv2.forward(s, &a1);
        let b2 = self.bn2.forward(s, &mut out, mode, stats);
        let short = match &self.shortcut {
            Some((conv, bn)) => {
                let (mut sc, cc) = conv.forward(s, x);
                let bc = bn.forward(s, &mut sc, mode, stats);
                out.add_assign(&sc);
                Some((cc, bc))
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        relu_forward(&mut out);
        let tape = BlockTape {
            c1,
            b1,
            a1,
            c2,
            b2,
            short,
            out: out.clone(),
        };
        (out, tape)
    }

    fn backward(&self, s: &ParamStore, t: &BlockTape, dout: &Act, g: &mut Grads) -> Act {
        let mut d = dout.clone();
        relu_backward(&t.out, &mut d);
        let mut dx = match (&self.shortcut, &t.short) {
            (Some((conv, bn)), Some((cc, bc))) => {
                let mut ds = d.clone();
                bn.backward(s, bc, &mut ds, g);
                conv.backward(s, cc, &ds, g)
            }
            _ => d.clone(),
        };
        self.bn2.backward(s, &t.b2, &mut d, g);
        let mut da1 = self.conv2.backward(s, &t.c2, &d, g);
        relu_backward(&t.a1, &mut da1);
        self.bn1.backward(s, &t.b1, &mut da1, g);
        dx.add_assign(&self.conv1.backward(s, &t.c1, &da1, g));
        dx
    }

    fn macs(&self, h: usize, w: usize) -> usize {
        let (ho, wo) = self.conv1.out_size(h, w);
        self.conv1.macs(h, w)
            + self.conv2.macs(ho, wo)
            + self.shortcut.as_ref().map_or(0, |(c, _)| c.macs(h, w))
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Block>,
}

pub struct EncoderTape {
    stem: ConvCache,
    stem_bn: BnCache,
    stem_out: Act,
    blocks: Vec<BlockTape>,
    last_hw: (usize, usize),
}

impl Encoder {
    fn new(b: &mut StoreBuilder<'_>, cfg: &EncoderConfig) -> Self {
        b.push_scope("encoder");
        let stem = Conv2d::new(b, "stem_conv", cfg.input_channels, cfg.widths[0], 3, 1);
        let stem_bn = BatchNorm::new(b, "stem_bn", cfg.widths[0]);
        let mut blocks = Vec::new();
        let mut cin = cfg.widths[0];
        for (si, &w) in cfg.widths.iter().enumerate() {
            for bi in 0..cfg.blocks_per_stage {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                b.push_scope(&format!("stage{si}.block{bi}"));
                blocks.push(Block::new(b, cin, w, stride));
                b.pop_scope();
                cin = w;
            }
        }
        b.pop_scope();
        Encoder {
            stem,
            stem_bn,
            blocks,
        }
    }

    fn forward(&self, s: &ParamStore, x: &Act, mode: Mode, stats: &mut StatUpdates) -> (Act, EncoderTape) {
        let (mut h, stem) = self.stem.forward(s, x);
        let stem_bn = self.stem_bn.forward(s, &mut h, mode, stats);
        relu_forward(&mut h);
        let stem_out = h.clone();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, t) = block.forward(s, &h, mode, stats);
            tapes.push(t);
            h = next;
        }
        let last_hw = (h.height, h.width);
        (
            global_avg_pool(&h),
            EncoderTape {
                stem,
                stem_bn,
                stem_out,
                blocks: tapes,
                last_hw,
            },
        )
    }

    fn backward(&self, s: &ParamStore, t: &EncoderTape, dpooled: &Act, g: &mut Grads) {
        let mut d = global_avg_pool_backward(dpooled, t.last_hw.0, t.last_hw.1);
        for (block, bt) in self.blocks.iter().zip(&t.blocks).rev() {
            d = block.backward(s, bt, &d, g);
        }
        relu_backward(&t.stem_out, &mut d);
        self.stem_bn.backward(s, &t.stem_bn, &mut d, g);
        // The input gradient is not needed; only accumulate the stem weights.
        let _ = self.stem.backward(s, &t.stem, &d, g);
    }

    fn macs(&self, h: usize, w: usize) -> usize {
        let mut total = self.stem.macs(h, w);
        let (mut h, mut w) = self.stem.out_size(h, w);
        for block in &self.blocks {
            total += block.macs(h, w);
            (h, w) = block.conv1.out_size(h, w);
        }
        total
    }
}

/// Affine -> norm -> ReLU -> affine [-> norm]. Used for the projection head
/// (with the trailing norm) and the regressors (without).
#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: Option<BatchNorm>,
}

pub struct MlpTape {
    input: Act,
    b1: BnCache,
    hidden: Act,
    b2: Option<BnCache>,
}

impl Mlp {
    fn new(b: &mut StoreBuilder<'_>, scope: &str, din: usize, hidden: usize, dout: usize, final_norm: bool) -> Self {
        b.push_scope(scope);
        let mlp = Mlp {
            fc1: Linear::new(b, "fc1", din, hidden),
            bn1: BatchNorm::new(b, "bn1", hidden),
            fc2: Linear::new(b, "fc2", hidden, dout),
            bn2: final_norm.then(|| BatchNorm::new(b, "bn2", dout)),
        };
        b.pop_scope();
        mlp
    }

    fn forward(&self, s: &ParamStore, x: &Act, mode: Mode, stats: &mut StatUpdates) -> (Act, Act, MlpTape) {
        let mut h = self.fc1.forward(s, x);
        let b1 = self.bn1.forward(s, &mut h, mode, stats);
        relu_forward(&mut h);
        let mut z = self.fc2.forward(s, &h);
        let b2 = self.bn2.as_ref().map(|bn| bn.forward(s, &mut z, mode, stats));
        let tape = MlpTape {
            input: x.clone(),
            b1,
            hidden: h.clone(),
            b2,
        };
        (h, z, tape)
    }

    fn backward(&self, s: &ParamStore, t: &MlpTape, dz: &Act, g: &mut Grads) -> Act {
        let mut d = dz.clone();
        if let (Some(bn), Some(c)) = (&self.bn2, &t.b2) {
            bn.backward(s, c, &mut d, g);
        }
        let mut dh = self.fc2.backward(s, &t.hidden, &d, g);
        relu_backward(&t.hidden, &mut dh);
        self.bn1.backward(s, &t.b1, &mut dh, g);
        self.fc1.backward(s, &t.input, &dh, g)
    }

    fn macs(&self) -> usize {
        self.fc1.in_features * self.fc1.out_features + self.fc2.in_features * self.fc2.out_features
    }
}

/// Layer layout shared by the online network, its momentum copy and the
/// regressors. Layers hold indices into a `ParamStore`.
#[derive(Debug, Clone)]
pub struct Architecture {
    config: ModelConfig,
    encoder: Encoder,
    head: Mlp,
    regressor: Mlp,
}

pub struct NetOutput {
    pub pooled: Act,
    pub hidden: Act,
    pub z: Act,
}

pub struct NetTape {
    encoder: EncoderTape,
    head: MlpTape,
}

impl Architecture {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward(&self, s: &ParamStore, x: &Act, mode: Mode, stats: &mut StatUpdates) -> (NetOutput, NetTape) {
        let (pooled, encoder) = self.encoder.forward(s, x, mode, stats);
        let (hidden, z, head) = self.head.forward(s, &pooled, mode, stats);
        (NetOutput { pooled, hidden, z }, NetTape { encoder, head })
    }

    /// Accumulate parameter gradients given the gradient of the projection.
    pub fn backward(&self, s: &ParamStore, tape: &NetTape, dz: &Act, g: &mut Grads) {
        let dpooled = self.head.backward(s, &tape.head, dz, g);
        self.encoder.backward(s, &tape.encoder, &dpooled, g);
    }

    pub fn encode(&self, s: &ParamStore, x: &Act, mode: Mode, stats: &mut StatUpdates) -> Act {
        self.encoder.forward(s, x, mode, stats).0
    }

    pub fn regress_forward(&self, r: &ParamStore, z: &Act, mode: Mode, stats: &mut StatUpdates) -> (Act, MlpTape) {
        let (_, out, tape) = self.regressor.forward(r, z, mode, stats);
        (out, tape)
    }

    /// Returns the gradient with respect to the regressor input.
    pub fn regress_backward(&self, r: &ParamStore, tape: &MlpTape, dout: &Act, g: &mut Grads) -> Act {
        self.regressor.backward(r, tape, dout, g)
    }

    /// Backward through the projection head only, returning d(pooled).
    pub fn head_backward(&self, s: &ParamStore, tape: &NetTape, dz: &Act, g: &mut Grads) -> Act {
        self.head.backward(s, &tape.head, dz, g)
    }

    pub fn encoder_backward(&self, s: &ParamStore, tape: &NetTape, dpooled: &Act, g: &mut Grads) {
        self.encoder.backward(s, &tape.encoder, dpooled, g);
    }

    /// Multiply-accumulates of one encoder + head forward pass per image.
    pub fn forward_macs(&self, height: usize, width: usize) -> usize {
        self.encoder.macs(height, width) + self.head.macs()
    }

    pub fn regressor_macs(&self) -> usize {
        self.regressor.macs()
    }
}

/// Online parameters, momentum copy, optional regressors, and the step count.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub arch: Architecture,
    pub online: ParamStore,
    pub momentum: ParamStore,
    pub regressors: Vec<ParamStore>,
    pub step: u64,
}

pub fn init_model(config: &ModelConfig, num_regressors: usize, rng: &mut Rng) -> Result<ModelState> {
    config.encoder.validate()?;
    config.head.validate()?;
    let mut b = StoreBuilder::new(rng);
    let encoder = Encoder::new(&mut b, &config.encoder);
    let head = Mlp::new(
        &mut b,
        "head",
        config.encoder.pooled_dim(),
        config.head.hidden_dim,
        config.head.output_dim,
        config.head.final_norm,
    );
    let online = b.finish();
    let mut regressors = Vec::with_capacity(num_regressors);
    let mut regressor = None;
    // Build the regressor layout even when unused so the architecture is complete.
    for i in 0..num_regressors.max(1) {
        let mut b = StoreBuilder::new(rng);
        let r = Mlp::new(
            &mut b,
            "regressor",
            config.head.output_dim,
            config.head.hidden_dim,
            config.head.output_dim,
            false,
        );
        if i < num_regressors {
            regressors.push(b.finish());
        }
        regressor.get_or_insert(r);
    }
    Ok(ModelState {
        arch: Architecture {
            config: config.clone(),
            encoder,
            head,
            regressor: regressor.expect("built at least once"),
        },
        momentum: online.clone(),
        online,
        regressors,
        step: 0,
    })
}

/// Stack images into a channel-major batch, centring pixels around zero.
pub fn images_to_act(images: &[&Image]) -> Result<Act> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (h, w, c) = first.shape();
    let n = images.len();
    let mut act = Act::zeros(c, n, h, w);
    for (i, img) in images.iter().enumerate() {
        if img.shape() != (h, w, c) {
            return Err(Error::shape(format!("{h}x{w}x{c}"), {
                let (a, b, c) = img.shape();
                format!("{a}x{b}x{c}")
            }));
        }
        let px = img.pixels();
        for ch in 0..c {
            let plane = &mut act.data[(ch * n + i) * h * w..(ch * n + i + 1) * h * w];
            for (p, v) in plane.iter_mut().enumerate() {
                *v = px[p * c + ch] - 0.5;
            }
        }
    }
    Ok(act)
}

impl ModelState {
    pub fn store(&self, net: Network) -> &ParamStore {
        match net {
            Network::Online => &self.online,
            Network::Momentum => &self.momentum,
        }
    }

    fn check_input(&self, x: &Act) -> Result<()> {
        let want = self.arch.config.encoder.input_channels;
        if x.channels != want {
            return Err(Error::shape(format!("{want} input channels"), x.channels));
        }
        if x.height < 8 || x.width < 8 {
            return Err(Error::shape("spatial size >= 8", format!("{}x{}", x.height, x.width)));
        }
        Ok(())
    }

    /// Pooled features `[n][pooled_dim]`. In training mode normalisation uses
    /// batch statistics and the running averages are updated.
    pub fn encode(&mut self, images: &[&Image], net: Network, training: bool) -> Result<Vec<Vec<f32>>> {
        let x = images_to_act(images)?;
        self.check_input(&x)?;
        let mode = if training { Mode::Train } else { Mode::Eval };
        let mut stats = StatUpdates::default();
        let pooled = self.arch.encode(self.store(net), &x, mode, &mut stats);
        if training {
            stats.commit(match net {
                Network::Online => &mut self.online,
                Network::Momentum => &mut self.momentum,
            });
        }
        Ok(pooled.to_rows())
    }

    /// Evaluation-mode forward pass returning pooled, hidden and projection rows.
    pub fn embed(&self, images: &[&Image], net: Network) -> Result<NetOutput> {
        let x = images_to_act(images)?;
        self.check_input(&x)?;
        Ok(self
            .arch
            .forward(self.store(net), &x, Mode::Eval, &mut StatUpdates::default())
            .0)
    }

    /// Evaluation-mode projection head on pooled features: `(hidden, z)`.
    pub fn project(&self, features: &[Vec<f32>], net: Network) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let dim = self.arch.config.encoder.pooled_dim();
        if let Some(bad) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::shape(dim, bad.len()));
        }
        let x = Act::from_rows(features);
        let (h, z, _) = self
            .arch
            .head
            .forward(self.store(net), &x, Mode::Eval, &mut StatUpdates::default());
        Ok((h.to_rows(), z.to_rows()))
    }

    /// Evaluation-mode prediction of regressor `head` (0 = base, k = expert k).
    pub fn regress(&self, head: usize, z: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        let store = self.regressors.get(head).ok_or(Error::IndexOutOfRange {
            index: head,
            len: self.regressors.len(),
        })?;
        let dim = self.arch.config.head.output_dim;
        if let Some(bad) = z.iter().find(|f| f.len() != dim) {
            return Err(Error::shape(dim, bad.len()));
        }
        let (out, _) = self
            .arch
            .regress_forward(store, &Act::from_rows(z), Mode::Eval, &mut StatUpdates::default());
        Ok(out.to_rows())
    }

    pub fn ema_update(&mut self, tau: f64) {
        ema_blend(&mut self.momentum, &self.online, tau);
    }

    /// Arrays named `online/…`, `momentum/…` and `regressor.<i>/…`.
    pub fn write_arrays(&self, file: &mut ArrayFile) {
        let mut put = |prefix: &str, store: &ParamStore| {
            for e in store.entries() {
                file.insert(
                    format!("{prefix}/{}", e.name),
                    crate::container::NamedArray::f32(e.shape.clone(), e.value.clone()),
                );
            }
        };
        put("online", &self.online);
        put("momentum", &self.momentum);
        for (i, r) in self.regressors.iter().enumerate() {
            put(&format!("regressor.{i}"), r);
        }
    }

    /// Overwrite every tensor from `file`, checking names and shapes.
    pub fn read_arrays(&mut self, file: &mut ArrayFile) -> Result<()> {
        fn fill(prefix: &str, store: &mut ParamStore, file: &mut ArrayFile) -> Result<()> {
            for e in store.entries_mut() {
                let name = format!("{prefix}/{}", e.name);
                let (shape, values) = file.take_f32(&name)?;
                if shape != e.shape {
                    return Err(Error::Integrity(format!(
                        "tensor `{name}` has shape {shape:?}, expected {:?}",
                        e.shape
                    )));
                }
                e.value = values;
            }
            Ok(())
        }
        fill("online", &mut self.online, file)?;
        fill("momentum", &mut self.momentum, file)?;
        for (i, r) in self.regressors.iter_mut().enumerate() {
            fill(&format!("regressor.{i}"), r, file)?;
        }
        Ok(())
    }
}

/// `target = tau * target + (1 - tau) * source` over trainable tensors.
/// Running statistics belong to each network's own forward passes.
pub fn ema_blend(target: &mut ParamStore, source: &ParamStore, tau: f64) {
    let tau = tau as f32;
    for (t, s) in target.entries_mut().iter_mut().zip(source.entries()) {
        if !t.kind.is_trainable() {
            continue;
        }
        for (a, b) in t.value.iter_mut().zip(&s.value) {
            *a = tau * *a + (1.0 - tau) * b;
        }
    }
}

/// Momentum coefficient at step `k` of `total`, rising from `tau_base` to 1.
pub fn tau_schedule(k: u64, total: u64, tau_base: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("tau schedule needs at least one step"));
    }
    if k > total {
        return Err(Error::IndexOutOfRange {
            index: k as usize,
            len: total as usize + 1,
        });
    }
    let c = (std::f64::consts::PI * k as f64 / total as f64).cos();
    Ok(1.0 - (1.0 - tau_base) * (c + 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::test_util::constant_image;
    use crate::rng::rng_from_seed;

    fn toy() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_channels: 3,
                widths: vec![4, 6],
                blocks_per_stage: 1,
            },
            head: HeadConfig {
                hidden_dim: 10,
                output_dim: 5,
                final_norm: true,
            },
        }
    }

    fn images(n: usize) -> Vec<Image> {
        let mut rng = rng_from_seed(3);
        (0..n)
            .map(|_| {
                use rand::Rng as _;
                let px = (0..8 * 8 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
                Image::new(8, 8, 3, px).unwrap()
            })
            .collect()
    }

    #[test]
    fn init_copies_online_into_momentum() {
        let m = init_model(&toy(), 0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(m.online, m.momentum);
        assert!(m.regressors.is_empty());
        assert_eq!(m.step, 0);
        let again = init_model(&toy(), 0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(again.online, m.online);
    }

    #[test]
    fn shapes_of_every_layer() {
        let mut m = init_model(&toy(), 3, &mut rng_from_seed(2)).unwrap();
        let imgs = images(4);
        let refs: Vec<&Image> = imgs.iter().collect();
        let pooled = m.encode(&refs, Network::Online, false).unwrap();
        assert_eq!((pooled.len(), pooled[0].len()), (4, 6));
        let (h, z) = m.project(&pooled, Network::Momentum).unwrap();
        assert_eq!((h[0].len(), z[0].len()), (10, 5));
        let r = m.regress(2, &z).unwrap();
        assert_eq!(r[0].len(), 5);
        assert!(matches!(m.regress(3, &z), Err(Error::IndexOutOfRange { .. })));
        let r0 = m.regress(0, &z).unwrap();
        assert_ne!(r0, r);
        // Regressor outputs carry no normalisation.
        let norm: f32 = r[0].iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() > 1e-3);
    }

    #[test]
    fn eval_mode_is_a_pure_function_of_each_image() {
        let m = init_model(&toy(), 0, &mut rng_from_seed(2)).unwrap();
        let imgs = images(2);
        let batch = [&imgs[0], &imgs[1], &imgs[0]];
        let out = m.embed(&batch, Network::Online).unwrap().pooled.to_rows();
        assert_eq!(out[0], out[2]);
        let zero = vec![vec![0.0f32; 6]];
        let a = m.project(&zero, Network::Online).unwrap();
        let b = m.project(&zero, Network::Online).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let mut m = init_model(&toy(), 0, &mut rng_from_seed(2)).unwrap();
        let img = constant_image(8, 8, 1, 0.5);
        assert!(matches!(
            m.encode(&[&img], Network::Online, false),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let m = init_model(&toy(), 0, &mut rng_from_seed(4)).unwrap();
        let imgs = images(3);
        let refs: Vec<&Image> = imgs.iter().collect();
        let x = images_to_act(&refs).unwrap();
        let probe: Vec<f32> = (0..15).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect();
        let objective = |s: &ParamStore| -> f64 {
            let (o, _) = m.arch.forward(s, &x, Mode::Train, &mut StatUpdates::default());
            o.z.data.iter().zip(&probe).map(|(a, b)| f64::from(a * b)).sum()
        };
        let (_, tape) = m.arch.forward(&m.online, &x, Mode::Train, &mut StatUpdates::default());
        let mut g = m.online.zero_grads();
        m.arch.backward(&m.online, &tape, &Act::dense(5, 3, probe.clone()), &mut g);
        let mut s = m.online.clone();
        // Small step: ReLU kinks make wide differences unreliable.
        let eps = 3e-4f32;
        let mut checked = 0;
        for idx in 0..s.len() {
            if !s.entries()[idx].kind.is_trainable() {
                continue;
            }
            for i in [0, s.value(idx).len() / 2] {
                let orig = s.entries()[idx].value[i];
                s.entries_mut()[idx].value[i] = orig + eps;
                let fp = objective(&s);
                s.entries_mut()[idx].value[i] = orig - eps;
                let fm = objective(&s);
                s.entries_mut()[idx].value[i] = orig;
                let fd = (fp - fm) / (2.0 * f64::from(eps));
                let an = f64::from(g.tensors[idx][i]);
                assert!(
                    (fd - an).abs() < 2e-2 * (1.0 + an.abs()),
                    "{} [{i}]: fd {fd} analytic {an}",
                    s.entries()[idx].name
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn momentum_outputs_ignore_online_perturbations() {
        let mut m = init_model(&toy(), 0, &mut rng_from_seed(5)).unwrap();
        let imgs = images(2);
        let refs: Vec<&Image> = imgs.iter().collect();
        let before = m.embed(&refs, Network::Momentum).unwrap().z;
        m.online.entries_mut()[0].value[0] += 0.5;
        assert_eq!(m.embed(&refs, Network::Momentum).unwrap().z, before);
    }

    #[test]
    fn tau_schedule_endpoints() {
        assert_eq!(tau_schedule(0, 100, 0.996).unwrap(), 0.996);
        assert_eq!(tau_schedule(100, 100, 0.996).unwrap(), 1.0);
        assert!((tau_schedule(50, 100, 0.996).unwrap() - 0.998).abs() < 1e-12);
        assert!(tau_schedule(0, 0, 0.996).is_err());
        let mut prev = 0.0;
        for k in 0..=37 {
            let t = tau_schedule(k, 37, 0.99).unwrap();
            assert!(t >= prev && (0.99..=1.0).contains(&t));
            prev = t;
        }
    }

    #[test]
    fn ema_arithmetic_and_geometric_convergence() {
        let mut m = init_model(&toy(), 0, &mut rng_from_seed(6)).unwrap();
        m.momentum.entries_mut()[0].value[0] = 2.0;
        m.online.entries_mut()[0].value[0] = 0.0;
        m.ema_update(0.5);
        assert_eq!(m.momentum.value(0)[0], 1.0);
        let snapshot = m.momentum.clone();
        m.ema_update(1.0);
        assert_eq!(m.momentum, snapshot);
        let dist = |m: &ModelState| -> f64 {
            m.momentum
                .entries()
                .iter()
                .zip(m.online.entries())
                .flat_map(|(a, b)| a.value.iter().zip(&b.value))
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        for i in 0..m.online.len() {
            if m.online.entries()[i].kind.is_trainable() {
                m.online.entries_mut()[i].value.iter_mut().for_each(|v| *v += 0.25);
            }
        }
        let mut d = dist(&m);
        for _ in 0..5 {
            m.ema_update(0.8);
            let next = dist(&m);
            assert!((next - 0.8 * d).abs() < 1e-4 * d);
            d = next;
        }
        m.ema_update(0.0);
        assert!(dist(&m) < 1e-6);
    }

    #[test]
    fn arrays_round_trip() {
        let m = init_model(&toy(), 2, &mut rng_from_seed(7)).unwrap();
        let mut file = ArrayFile::default();
        m.write_arrays(&mut file);
        let mut other = init_model(&toy(), 2, &mut rng_from_seed(8)).unwrap();
        other.read_arrays(&mut file).unwrap();
        assert_eq!(other.online, m.online);
        assert_eq!(other.regressors, m.regressors);
    }
}
