use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::container::{ArrayFile, NamedArray};
use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ModelState};
use crate::rng::{rng_from_seed, RngState};

pub const CHECKPOINT_FORMAT: &str = "dnc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
const LOSS_ARRAY: &str = "history/loss";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageTag {
    Base,
    Expert(usize),
    Distilled,
    Moclr,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageTag::Base => f.write_str("base"),
            StageTag::Expert(k) => write!(f, "expert-{k}"),
            StageTag::Distilled => f.write_str("distilled"),
            StageTag::Moclr => f.write_str("moclr"),
        }
    }
}

impl FromStr for StageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "base" => StageTag::Base,
            "distilled" => StageTag::Distilled,
            "moclr" => StageTag::Moclr,
            _ => match s.strip_prefix("expert-").and_then(|k| k.parse().ok()) {
                Some(k) => StageTag::Expert(k),
                None => return Err(Error::Format(format!("unknown stage tag `{s}`"))),
            },
        })
    }
}

impl Serialize for StageTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StageTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format: String,
    version: u32,
    stage: StageTag,
    step: u64,
    rng: RngState,
    config_digest: String,
    model: ModelConfig,
    num_regressors: usize,
}

/// A trained model plus what is needed to trust and continue it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: ModelState,
    pub stage: StageTag,
    /// Root generator of the stage; per-step streams derive from it.
    pub rng: RngState,
    pub config_digest: String,
    /// Training loss after every step.
    pub losses: Vec<f64>,
}

impl Checkpoint {
    pub fn new(state: ModelState, stage: StageTag, seed: u64, config_digest: String, losses: Vec<f64>) -> Self {
        Checkpoint {
            state,
            stage,
            rng: RngState::capture(&rng_from_seed(seed)),
            config_digest,
            losses,
        }
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn to_file(&self) -> Result<ArrayFile> {
        let mut file = ArrayFile::default();
        self.state.write_arrays(&mut file);
        file.insert(
            LOSS_ARRAY,
            NamedArray::f64(vec![self.losses.len()], self.losses.clone()),
        );
        file.meta = Some(serde_json::to_value(CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            step: self.state.step,
            rng: self.rng.clone(),
            config_digest: self.config_digest.clone(),
            model: self.state.arch.config().clone(),
            num_regressors: self.state.regressors.len(),
        })?);
        Ok(file)
    }

    /// Write through a temporary file so a partial checkpoint never appears.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("partial");
        self.to_file()?.write(&tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn from_file(mut file: ArrayFile) -> Result<Self> {
        let meta = file
            .meta
            .take()
            .ok_or_else(|| Error::Format("checkpoint has no metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                meta.format, meta.version
            )));
        }
        // The layout is rebuilt from the stored config; values come from the file.
        let mut state = init_model(&meta.model, meta.num_regressors, &mut rng_from_seed(0))?;
        state.read_arrays(&mut file)?;
        state.step = meta.step;
        let (_, losses) = file.take_f64(LOSS_ARRAY)?;
        Ok(Checkpoint {
            state,
            stage: meta.stage,
            rng: meta.rng,
            config_digest: meta.config_digest,
            losses,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Prerequisite(format!("no checkpoint at {}", path.display())));
        }
        Self::from_file(ArrayFile::read(path)?)
    }

    /// Load and require the given config digest.
    pub fn load_expecting(path: &Path, digest: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config_digest != digest {
            return Err(Error::DigestMismatch {
                path: path.to_path_buf(),
                found: ck.config_digest,
                expected: digest.to_string(),
            });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, HeadConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_channels: 3,
                widths: vec![4, 8],
                blocks_per_stage: 1,
            },
            head: HeadConfig {
                hidden_dim: 6,
                output_dim: 4,
                final_norm: true,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = init_model(&cfg(), 3, &mut rng_from_seed(4)).unwrap();
        state.step = 17;
        state.momentum.entries_mut()[0].value[0] = -0.123_456_7;
        let ck = Checkpoint::new(state, StageTag::Expert(2), 99, "abc".into(), vec![1.5, 1.25]);
        let path = dir.path().join(CHECKPOINT_FILE);
        ck.save(&path).unwrap();
        let back = Checkpoint::load_expecting(&path, "abc").unwrap();
        assert_eq!(back.state.online, ck.state.online);
        assert_eq!(back.state.momentum, ck.state.momentum);
        assert_eq!(back.state.regressors, ck.state.regressors);
        assert_eq!(back.step(), 17);
        assert_eq!(back.stage, StageTag::Expert(2));
        assert_eq!(back.losses, ck.losses);
        assert_eq!(back.rng, ck.rng);
        assert_eq!(
            std::fs::read(&path).unwrap(),
            back.to_file().unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn digest_mismatch_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let state = init_model(&cfg(), 0, &mut rng_from_seed(4)).unwrap();
        let path = dir.path().join(CHECKPOINT_FILE);
        Checkpoint::new(state, StageTag::Base, 1, "abc".into(), vec![])
            .save(&path)
            .unwrap();
        assert!(matches!(
            Checkpoint::load_expecting(&path, "xyz"),
            Err(Error::DigestMismatch { .. })
        ));
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::Prerequisite(_))
        ));
    }

    #[test]
    fn stage_tags_round_trip() {
        for t in [StageTag::Base, StageTag::Expert(11), StageTag::Distilled, StageTag::Moclr] {
            assert_eq!(t.to_string().parse::<StageTag>().unwrap(), t);
        }
        assert!("expert-x".parse::<StageTag>().is_err());
    }
}
