//! The ablation grid: variants of one run that differ downstream of a shared
//! base model, each in its own run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{run_dnc, run_moclr, share_upstream, RunOptions, StageTag};
use crate::config::{DistillTargets, PartitionMode, RunConfig, TeacherInput};
use crate::error::{Error, Result};
use crate::eval::{probe_run, EvalEntry};

/// Every variant `ablate` knows, in run order.
pub const VARIANTS: &[&str] = &[
    "dnc",
    "moclr",
    "random-partition",
    "ensemble",
    "base-only",
    "experts-only",
    "center-crop",
];

/// The configuration of a named variant of `cfg`.
pub fn variant_config(cfg: &RunConfig, variant: &str) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match variant {
        "dnc" | "moclr" => {}
        "random-partition" => c.method.partition = PartitionMode::Random,
        "ensemble" => c.method.partition = PartitionMode::Full,
        "base-only" => c.distill.targets = DistillTargets::BaseOnly,
        "experts-only" => c.distill.targets = DistillTargets::ExpertsOnly,
        "center-crop" => c.distill.teacher_input = TeacherInput::CenterCrop,
        _ => {
            return Err(Error::invalid(format!(
                "unknown variant `{variant}` (expected one of {})",
                VARIANTS.join(", ")
            )))
        }
    }
    c.name = format!("{}/{variant}", cfg.name);
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub eval: EvalEntry,
}

/// Run and probe the requested variants under `dir/<variant>`. The `dnc`
/// run goes first and its upstream artifacts are reused by the others.
pub fn ablate(cfg: &RunConfig, dir: &Path, variants: &[&str], opts: &RunOptions) -> Result<Vec<VariantResult>> {
    for v in variants {
        variant_config(cfg, v)?;
    }
    let reference = dir.join("dnc");
    let needs_reference = variants.iter().any(|&v| v != "moclr");
    if needs_reference {
        run_dnc(&variant_config(cfg, "dnc")?, &reference, opts)?;
    }
    let mut out = Vec::new();
    for &v in variants {
        let vc = variant_config(cfg, v)?;
        let vdir = dir.join(v);
        let stage = if v == "moclr" {
            run_moclr(&vc, &vdir)?;
            StageTag::Moclr
        } else {
            if v != "dnc" {
                share_upstream(&reference, &vdir, &vc)?;
                run_dnc(&vc, &vdir, opts)?;
            }
            StageTag::Distilled
        };
        let eval = probe_run(&vdir, &[stage])?.remove(0);
        out.push(VariantResult {
            variant: v.to_string(),
            eval,
        });
    }
    Ok(out)
}
