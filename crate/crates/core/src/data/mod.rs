//! Images, labelled datasets and class-based subsetting.

mod io;
pub(crate) mod synth;

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset, Storage};
pub use synth::{
    synth_curated, synth_uncurated, zipf_class_sizes, ImageSpec, Prototypes, SynthSpec,
};

/// An `height x width x channels` image, row-major with interleaved channels,
/// every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

pub const MIN_IMAGE_SIDE: usize = 8;

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::invalid(format!(
                "image sides must be >= {MIN_IMAGE_SIDE}, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("channels must be 1 or 3, got {channels}")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, pixels.len()));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Integrity(format!("pixel value {bad} outside [0,1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Build from values that are clamped into `[0,1]`. Used by the
    /// augmentation ops, whose arithmetic may overshoot slightly.
    pub(crate) fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut pixels: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(pixels.len(), height * width * channels);
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Image {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// One dataset entry. Images are reference counted so subsets and partitions
/// share pixel storage with their parent.
#[derive(Debug, Clone)]
pub struct Item {
    pub image: Arc<Image>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    name: String,
    num_classes: usize,
    items: Vec<Item>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, num_classes: usize, items: Vec<Item>) -> Result<Self> {
        let mut shape = None;
        for (i, item) in items.iter().enumerate() {
            if let Some(label) = item.label {
                if label >= num_classes {
                    return Err(Error::Integrity(format!(
                        "item {i} has label {label} but num_classes is {num_classes}"
                    )));
                }
            }
            match shape {
                None => shape = Some(item.image.shape()),
                Some(s) if s != item.image.shape() => {
                    return Err(Error::Integrity(format!(
                        "item {i} has shape {:?}, expected {s:?}",
                        item.image.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Dataset {
            name: name.into(),
            num_classes,
            items,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn get(&self, index: usize) -> &Item {
        &self.items[index]
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.items.first().map(|it| it.image.shape())
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.items.iter().map(|it| it.label).collect()
    }

    /// Labels of a fully labelled dataset.
    pub fn dense_labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                it.label
                    .ok_or_else(|| Error::Integrity(format!("item {i} is unlabelled")))
            })
            .collect()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.items.iter().all(|it| it.label.is_some())
    }

    /// Count of items per class; unlabelled items are not counted.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for label in self.items.iter().filter_map(|it| it.label) {
            hist[label] += 1;
        }
        hist
    }

    /// Items at the given positions, in the given order.
    pub fn select(&self, name: impl Into<String>, indices: &[usize]) -> Dataset {
        Dataset {
            name: name.into(),
            num_classes: self.num_classes,
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

/// Keep the items whose label is in `classes`, relabelled densely in
/// ascending order of the original label.
pub fn fine_subset(d: &Dataset, classes: &BTreeSet<usize>) -> Result<Dataset> {
    if let Some(&bad) = classes.iter().find(|&&c| c >= d.num_classes) {
        return Err(Error::invalid(format!(
            "class {bad} is not below num_classes {}",
            d.num_classes
        )));
    }
    let labels = d.dense_labels()?;
    let remap: std::collections::BTreeMap<usize, usize> =
        classes.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let items: Vec<Item> = d
        .items
        .iter()
        .zip(labels)
        .filter_map(|(it, label)| {
            remap.get(&label).map(|&new| Item {
                image: Arc::clone(&it.image),
                label: Some(new),
            })
        })
        .collect();
    if items.is_empty() {
        return Err(Error::EmptySubset);
    }
    Dataset::new(format!("{}-subset", d.name), classes.len(), items)
}
