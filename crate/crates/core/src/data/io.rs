//! On-disk dataset directories.
//!
//! ```text
//! <dir>/meta               JSON: format, version, name, num_classes, height, width, channels, storage
//! <dir>/manifest           one item per line: `<key>` or `<key> <label>`
//! <dir>/images.safetensors (storage = "packed") f32 entries of shape [h, w, c], named by key
//! <dir>/<key>              (storage = "files") 8-bit PNG, grey or RGB, key is a relative path
//! ```
//!
//! See `docs/formats.md` for the byte-level description.

use std::fs;
use std::path::{Component, Path};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Item};
use crate::container::{ArrayFile, NamedArray};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta";
pub const MANIFEST_FILE: &str = "manifest";
pub const PACK_FILE: &str = "images.safetensors";
const FORMAT_TAG: &str = "dnc-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    Packed,
    Files,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    version: u32,
    name: String,
    num_classes: usize,
    height: usize,
    width: usize,
    channels: usize,
    storage: Storage,
}

pub fn save_dataset(d: &Dataset, dir: &Path, storage: Storage) -> Result<()> {
    let (height, width, channels) = d.image_shape().ok_or(Error::EmptyDataset)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        name: d.name().to_string(),
        num_classes: d.num_classes(),
        height,
        width,
        channels,
        storage,
    };
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;

    let mut manifest = String::new();
    let mut pack = ArrayFile::default();
    for (i, item) in d.items().iter().enumerate() {
        let key = match storage {
            Storage::Packed => format!("img{i:06}"),
            Storage::Files => format!("images/{i:06}.png"),
        };
        match storage {
            Storage::Packed => pack.insert(
                key.clone(),
                NamedArray::f32(vec![height, width, channels], item.image.pixels().to_vec()),
            ),
            Storage::Files => write_png(&item.image, &dir.join(&key))?,
        }
        manifest.push_str(&key);
        if let Some(label) = item.label {
            manifest.push_str(&format!(" {label}"));
        }
        manifest.push('\n');
    }
    if storage == Storage::Packed {
        pack.write(&dir.join(PACK_FILE))?;
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = match fs::read_to_string(&manifest_path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Format(format!("no manifest in {}", dir.display())))
        }
        Err(e) => return Err(Error::io(&manifest_path, e)),
    };
    let meta_path = dir.join(META_FILE);
    let meta: Meta = match fs::read_to_string(&meta_path) {
        Ok(s) => serde_json::from_str(&s)
            .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Format(format!("no meta in {}", dir.display())))
        }
        Err(e) => return Err(Error::io(&meta_path, e)),
    };
    if meta.format != FORMAT_TAG || meta.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format {} v{}",
            meta.format, meta.version
        )));
    }

    let entries = parse_manifest(&manifest)?;
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut pack = match meta.storage {
        Storage::Packed => Some(ArrayFile::read(&dir.join(PACK_FILE))?),
        Storage::Files => None,
    };
    let expected = (meta.height, meta.width, meta.channels);
    let mut items = Vec::with_capacity(entries.len());
    for (line, (key, label)) in entries.into_iter().enumerate() {
        let image = match pack.as_mut() {
            Some(pack) => {
                let (shape, pixels) = pack.take_f32(&key)?;
                if shape != [meta.height, meta.width, meta.channels] {
                    return Err(Error::Integrity(format!(
                        "entry `{key}` has shape {shape:?}, meta declares {expected:?}"
                    )));
                }
                Image::new(meta.height, meta.width, meta.channels, pixels)?
            }
            None => read_png(dir, &key)?,
        };
        if image.shape() != expected {
            return Err(Error::Integrity(format!(
                "manifest line {}: image `{key}` has shape {:?}, meta declares {expected:?}",
                line + 1,
                image.shape()
            )));
        }
        items.push(Item {
            image: Arc::new(image),
            label,
        });
    }
    Dataset::new(meta.name, meta.num_classes, items)
}

fn parse_manifest(text: &str) -> Result<Vec<(String, Option<usize>)>> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let key = fields.next().expect("nonempty line").to_string();
        let label = match fields.next() {
            Some(tok) => Some(tok.parse::<usize>().map_err(|_| {
                Error::Format(format!("manifest line {}: bad label `{tok}`", n + 1))
            })?),
            None => None,
        };
        if fields.next().is_some() {
            return Err(Error::Format(format!(
                "manifest line {}: expected `<key> [label]`",
                n + 1
            )));
        }
        entries.push((key, label));
    }
    Ok(entries)
}

fn write_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let color = if img.channels() == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width() as u32,
        img.height() as u32,
        color,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

fn read_png(dir: &Path, key: &str) -> Result<Image> {
    let rel = Path::new(key);
    if rel
        .components()
        .any(|c| !matches!(c, Component::Normal(_)))
    {
        return Err(Error::Format(format!("image path `{key}` must be relative")));
    }
    let decoded = image::open(dir.join(rel))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = match decoded.color().channel_count() {
        1 | 2 => (1, decoded.into_luma8().into_raw()),
        _ => (3, decoded.into_rgb8().into_raw()),
    };
    let pixels = raw.into_iter().map(|b| f32::from(b) / 255.0).collect();
    Image::new(h, w, channels, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_curated, ImageSpec, SynthSpec};

    fn small() -> Dataset {
        let spec = SynthSpec {
            num_classes: 2,
            image: ImageSpec {
                height: 8,
                width: 10,
                channels: 3,
            },
            ..SynthSpec::default()
        };
        synth_curated(&spec, 5, 4).unwrap()
    }

    #[test]
    fn packed_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = small();
        save_dataset(&d, dir.path(), Storage::Packed).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back.num_classes(), 2);
        assert_eq!(back.labels(), d.labels());
        for (a, b) in back.items().iter().zip(d.items()) {
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn png_round_trip_quantises_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let d = small();
        save_dataset(&d, dir.path(), Storage::Files).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back.labels(), d.labels());
        for (a, b) in back.items().iter().zip(d.items()) {
            assert_eq!(a.image.shape(), b.image.shape());
            for (x, y) in a.image.pixels().iter().zip(b.image.pixels()) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn unlabelled_manifest_lines_load_without_labels() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path(), Storage::Packed).unwrap();
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let stripped: String = manifest
            .lines()
            .map(|l| l.split(' ').next().unwrap().to_string() + "\n")
            .collect();
        fs::write(dir.path().join(MANIFEST_FILE), stripped).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.labels().iter().all(Option::is_none));
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path(), Storage::Packed).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn label_beyond_num_classes_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path(), Storage::Packed).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "img000000 5\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn shape_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path(), Storage::Files).unwrap();
        let meta = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        fs::write(
            dir.path().join(META_FILE),
            meta.replace("\"width\": 10", "\"width\": 12"),
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));

        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path(), Storage::Packed).unwrap();
        let meta = fs::read_to_string(dir.path().join(META_FILE)).unwrap();
        fs::write(
            dir.path().join(META_FILE),
            meta.replace("\"height\": 8", "\"height\": 9"),
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
    }
}
