use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Role of a stored tensor. Biases and normalisation parameters are excluded
/// from LARS adaptation and weight decay; running statistics are buffers that
/// receive no gradient and are not touched by the EMA update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Biases and normalisation affine parameters.
    pub fn is_bias_or_norm(self) -> bool {
        matches!(self, ParamKind::Bias | ParamKind::NormScale | ParamKind::NormShift)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::NormScale => "norm_scale",
            ParamKind::NormShift => "norm_shift",
            ParamKind::RunningMean => "running_mean",
            ParamKind::RunningVar => "running_var",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Some(match tag {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm_scale" => ParamKind::NormScale,
            "norm_shift" => ParamKind::NormShift,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

/// Flat, ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Running statistics decay: `running = m * running + (1 - m) * batch`.
pub const RUNNING_MOMENTUM: f32 = 0.9;

impl ParamStore {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn value(&self, idx: usize) -> &[f32] {
        &self.entries[idx].value
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self
                .entries
                .iter()
                .map(|e| {
                    if e.kind.is_trainable() {
                        vec![0.0; e.value.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }

    pub(crate) fn blend_running(&mut self, idx: usize, batch: &[f32]) {
        for (r, b) in self.entries[idx].value.iter_mut().zip(batch) {
            *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * b;
        }
    }

    /// Structural equality: same names, kinds and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.shape == b.shape)
    }

    /// Replace values from another store with the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::shape("matching parameter layout", "different layout"));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.value.copy_from_slice(&b.value);
        }
        Ok(())
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        ParamStore { entries }
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.is_trainable())
            .map(|e| e.value.len())
            .sum()
    }

    /// Order-sensitive FNV-1a hash over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        };
        for e in &self.entries {
            e.name.bytes().for_each(&mut feed);
            for v in &e.value {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut feed);
            }
        }
        h
    }
}

/// Gradients aligned with a `ParamStore`; buffers carry empty vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f32>>,
}

impl Grads {
    pub fn get_mut(&mut self, idx: usize) -> &mut [f32] {
        &mut self.tensors[idx]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f32) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }
}

/// Registers parameters while an architecture is being built.
pub struct StoreBuilder<'a> {
    prefix: Vec<String>,
    entries: Vec<ParamEntry>,
    rng: &'a mut Rng,
}

impl<'a> StoreBuilder<'a> {
    pub fn new(rng: &'a mut Rng) -> Self {
        StoreBuilder {
            prefix: Vec::new(),
            entries: Vec::new(),
            rng,
        }
    }

    pub fn push_scope(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    fn add(&mut self, name: &str, kind: ParamKind, shape: Vec<usize>, value: Vec<f32>) -> usize {
        let mut full = self.prefix.join("/");
        if !full.is_empty() {
            full.push('/');
        }
        full.push_str(name);
        self.entries.push(ParamEntry {
            name: full,
            kind,
            shape,
            value,
        });
        self.entries.len() - 1
    }

    /// He-normal initialised weight with the given fan-in.
    pub fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let len = shape.iter().product();
        let value = (0..len).map(|_| normal.sample(self.rng)).collect();
        self.add(name, ParamKind::Weight, shape, value)
    }

    pub fn constant(&mut self, name: &str, kind: ParamKind, len: usize, v: f32) -> usize {
        self.add(name, kind, vec![len], vec![v; len])
    }

    pub fn finish(self) -> ParamStore {
        ParamStore {
            entries: self.entries,
        }
    }
}
