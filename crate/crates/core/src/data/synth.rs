//! Procedural class prototypes for curated (balanced) and uncurated
//! (Zipf-distributed) synthetic corpora.
//!
//! Each class owns a mean colour and an oriented sinusoidal grating. An image
//! of a class is the grey background shifted towards the class colour, plus
//! the class grating at a random per-image phase, a random global brightness
//! offset and i.i.d. Gaussian pixel noise. `class_separation` scales both the
//! colour shift and the grating amplitude, so at zero every class renders from
//! the same distribution.
//!
//! With `coarse_groups = Some(g)` class `c` joins group `c % g` and takes the
//! group colour plus a small per-class perturbation. Classes of one group are
//! then told apart mainly by their gratings.

use std::f32::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Item};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            height: 32,
            width: 32,
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub image: ImageSpec,
    pub class_separation: f32,
    pub noise_std: f32,
    pub coarse_groups: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            image: ImageSpec::default(),
            class_separation: 1.0,
            noise_std: 0.08,
            coarse_groups: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes == 0 {
            problems.push("num_classes must be positive".to_string());
        }
        if self.image.height < super::MIN_IMAGE_SIDE || self.image.width < super::MIN_IMAGE_SIDE {
            problems.push(format!(
                "image sides must be >= {}, got {}x{}",
                super::MIN_IMAGE_SIDE,
                self.image.height,
                self.image.width
            ));
        }
        if self.image.channels != 1 && self.image.channels != 3 {
            problems.push(format!("channels must be 1 or 3, got {}", self.image.channels));
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            problems.push("class_separation must be finite and >= 0".to_string());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            problems.push("noise_std must be finite and >= 0".to_string());
        }
        if self.coarse_groups == Some(0) {
            problems.push("coarse_groups must be positive when set".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone)]
struct ClassPrototype {
    color: [f32; 3],
    /// Grating wave vector in radians per pixel.
    kx: f32,
    ky: f32,
}

/// The class "world": fixed prototypes from which any number of corpora can
/// be sampled. Pretraining corpora and probe splits drawn from the same
/// prototypes describe the same visual classes.
#[derive(Debug, Clone)]
pub struct Prototypes {
    spec: SynthSpec,
    classes: Vec<ClassPrototype>,
}

const GROUP_COLOR_SPREAD: f32 = 0.12;
const BRIGHTNESS_NUISANCE: f32 = 0.08;
const GRATING_AMPLITUDE: f32 = 0.22;

impl Prototypes {
    pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = derive_rng(seed, "prototypes", 0);
        let side = spec.image.height.min(spec.image.width) as f32;
        let group_colors: Vec<[f32; 3]> = (0..spec.coarse_groups.unwrap_or(0))
            .map(|_| random_color(&mut rng))
            .collect();
        let classes = (0..spec.num_classes)
            .map(|c| {
                let color = if group_colors.is_empty() {
                    random_color(&mut rng)
                } else {
                    let base = group_colors[c % group_colors.len()];
                    let mut col = [0.0; 3];
                    for (ch, b) in col.iter_mut().zip(base) {
                        *ch = (b + rng.gen_range(-GROUP_COLOR_SPREAD..GROUP_COLOR_SPREAD))
                            .clamp(0.0, 1.0);
                    }
                    col
                };
                let theta = rng.gen_range(0.0..PI);
                let cycles = rng.gen_range(1.0..4.5);
                let k = 2.0 * PI * cycles / side;
                ClassPrototype {
                    color,
                    kx: k * theta.cos(),
                    ky: k * theta.sin(),
                }
            })
            .collect();
        Ok(Prototypes {
            spec: spec.clone(),
            classes,
        })
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn render(&self, class: usize, rng: &mut Rng) -> Image {
        let ImageSpec {
            height,
            width,
            channels,
        } = self.spec.image;
        let proto = &self.classes[class];
        let sep = self.spec.class_separation;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let brightness = rng.gen_range(-BRIGHTNESS_NUISANCE..BRIGHTNESS_NUISANCE);
        let luma = (proto.color[0] + proto.color[1] + proto.color[2]) / 3.0;
        let mut pixels = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                let g = (proto.kx * x as f32 + proto.ky * y as f32 + phase).sin();
                for c in 0..channels {
                    let tint = if channels == 3 { proto.color[c] } else { luma };
                    let noise: f32 = StandardNormal.sample(rng);
                    let v = 0.5
                        + brightness
                        + sep * (tint - 0.5)
                        + sep * GRATING_AMPLITUDE * g
                        + self.spec.noise_std * noise;
                    pixels.push(v);
                }
            }
        }
        Image::from_clamped(height, width, channels, pixels)
    }

    fn sample_classes(&self, name: String, classes: &[usize], seed: u64) -> Result<Dataset> {
        let items = classes
            .iter()
            .enumerate()
            .map(|(i, &class)| {
                let mut rng = derive_rng(seed, "item", i as u64);
                Item {
                    image: Arc::new(self.render(class, &mut rng)),
                    label: Some(class),
                }
            })
            .collect();
        Dataset::new(name, self.num_classes(), items)
    }

    /// A balanced corpus with `per_class` items of every class, class-major.
    pub fn curated(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        if per_class == 0 || self.num_classes() == 0 {
            return Err(Error::invalid("curated corpus needs at least one item"));
        }
        let classes: Vec<usize> = (0..self.num_classes())
            .flat_map(|c| std::iter::repeat(c).take(per_class))
            .collect();
        self.sample_classes(format!("curated-{seed}"), &classes, seed)
    }

    /// A long-tailed corpus whose class sizes follow `zipf_class_sizes`.
    pub fn uncurated(&self, total: usize, zipf_exponent: f64, seed: u64) -> Result<Dataset> {
        let sizes = zipf_class_sizes(self.num_classes(), total, zipf_exponent)?;
        let classes: Vec<usize> = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect();
        self.sample_classes(format!("uncurated-{seed}"), &classes, seed)
    }
}

fn random_color(rng: &mut Rng) -> [f32; 3] {
    [
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
    ]
}

/// Balanced synthetic corpus; prototypes and samples both derive from `seed`.
pub fn synth_curated(spec: &SynthSpec, per_class: usize, seed: u64) -> Result<Dataset> {
    Prototypes::generate(spec, seed)?.curated(per_class, seed)
}

/// Zipf-distributed synthetic corpus over the same prototype machinery.
pub fn synth_uncurated(
    spec: &SynthSpec,
    total: usize,
    zipf_exponent: f64,
    seed: u64,
) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::invalid("uncurated corpus needs at least 2 classes"));
    }
    Prototypes::generate(spec, seed)?.uncurated(total, zipf_exponent, seed)
}

/// Class sizes proportional to `rank^-exponent`, rounded by largest remainder
/// so they sum to `total`, then repaired so that every class is nonempty.
pub fn zipf_class_sizes(num_classes: usize, total: usize, exponent: f64) -> Result<Vec<usize>> {
    if num_classes == 0 {
        return Err(Error::invalid("num_classes must be positive"));
    }
    if !(exponent.is_finite() && exponent >= 0.0) {
        return Err(Error::invalid(format!("zipf exponent must be >= 0, got {exponent}")));
    }
    if total < num_classes {
        return Err(Error::Infeasible(format!(
            "{total} items cannot cover {num_classes} nonempty classes"
        )));
    }
    let weights: Vec<f64> = (1..=num_classes).map(|r| (r as f64).powf(-exponent)).collect();
    let mut sizes = largest_remainder(&weights, total);
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let max = *sizes.iter().max().expect("nonempty");
        // Take from the last class holding the maximum so the sequence stays
        // nonincreasing.
        let donor = sizes.iter().rposition(|&s| s == max).expect("max exists");
        sizes[donor] -= 1;
        sizes[empty] += 1;
    }
    Ok(sizes)
}

/// Apportion `total` units proportionally to `weights`. Remainders are
/// handed out largest first, ties to the lower index.
pub(crate) fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(num_classes: usize) -> SynthSpec {
        SynthSpec {
            num_classes,
            image: ImageSpec {
                height: 8,
                width: 8,
                channels: 3,
            },
            ..SynthSpec::default()
        }
    }

    #[test]
    fn curated_is_balanced() {
        let d = synth_curated(&small_spec(4), 25, 1).unwrap();
        assert_eq!(d.len(), 100);
        assert_eq!(d.class_histogram(), vec![25, 25, 25, 25]);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = synth_uncurated(&small_spec(5), 60, 1.0, 9).unwrap();
        let b = synth_uncurated(&small_spec(5), 60, 1.0, 9).unwrap();
        assert_eq!(a.labels(), b.labels());
        for (x, y) in a.items().iter().zip(b.items()) {
            let bx: Vec<u32> = x.image.pixels().iter().map(|p| p.to_bits()).collect();
            let by: Vec<u32> = y.image.pixels().iter().map(|p| p.to_bits()).collect();
            assert_eq!(bx, by);
        }
        let c = synth_uncurated(&small_spec(5), 60, 1.0, 10).unwrap();
        assert_ne!(a.get(0).image.pixels(), c.get(0).image.pixels());
    }

    #[test]
    fn zipf_exponent_zero_is_balanced() {
        assert_eq!(zipf_class_sizes(4, 100, 0.0).unwrap(), vec![25, 25, 25, 25]);
    }

    #[test]
    fn zipf_exponent_one_four_classes() {
        // 1/r normalised over r = 1..4 is (12, 6, 4, 3) / 25.
        assert_eq!(zipf_class_sizes(4, 100, 1.0).unwrap(), vec![48, 24, 16, 12]);
    }

    #[test]
    fn zipf_infeasible_total() {
        assert!(matches!(zipf_class_sizes(5, 4, 1.0), Err(Error::Infeasible(_))));
        assert!(synth_uncurated(&small_spec(5), 4, 1.0, 0).is_err());
    }

    #[test]
    fn zipf_repairs_empty_tail() {
        let sizes = zipf_class_sizes(4, 4, 6.0).unwrap();
        assert_eq!(sizes, vec![1, 1, 1, 1]);
        let sizes = zipf_class_sizes(6, 9, 4.0).unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 9);
        assert!(sizes.iter().all(|&s| s >= 1));
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn zero_separation_renders_class_independent_distribution() {
        let spec = SynthSpec {
            class_separation: 0.0,
            ..small_spec(3)
        };
        let protos = Prototypes::generate(&spec, 3).unwrap();
        // Identical per-image rng stream => identical image whatever the class.
        let a = protos.render(0, &mut derive_rng(1, "x", 0));
        let b = protos.render(2, &mut derive_rng(1, "x", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn coarse_groups_share_colour_neighbourhood() {
        let spec = SynthSpec {
            coarse_groups: Some(2),
            ..small_spec(6)
        };
        let protos = Prototypes::generate(&spec, 11).unwrap();
        for c in 2..6 {
            let base = &protos.classes[c % 2].color;
            for ch in 0..3 {
                assert!((protos.classes[c].color[ch] - base[ch]).abs() <= 2.0 * GROUP_COLOR_SPREAD);
            }
        }
    }

    proptest! {
        #[test]
        fn zipf_sizes_sum_and_order(classes in 2usize..20, extra in 0usize..400, s in 0.0f64..3.0) {
            let total = classes + extra;
            let sizes = zipf_class_sizes(classes, total, s).unwrap();
            prop_assert_eq!(sizes.iter().sum::<usize>(), total);
            prop_assert!(sizes.iter().all(|&n| n >= 1));
            if s > 0.0 {
                prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }
}
