//! Probe results, metric records and figures for run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::{class_coherence, cluster_mi, cluster_top1};
use super::probe::{linear_probe, ProbeResult};
use super::svg;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{read_json, write_json, Checkpoint, ClusterLabels, RunLayout, RunSummary, StageTag};
use crate::rng::derive_seed;

pub const EVALS_FILE: &str = "evals.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// One probed checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub method: String,
    pub stage: StageTag,
    pub seed: u64,
    /// Training epochs behind the checkpoint, upstream stages included.
    pub epochs: f64,
    pub result: ProbeResult,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub stage: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub config_digest: String,
    pub records: Vec<MetricRecord>,
    pub evals: Vec<EvalEntry>,
    pub stages: RunSummary,
    pub figures: Vec<String>,
}

/// Series name of a checkpoint: the baseline keeps its own name.
pub fn method_of(cfg: &RunConfig, stage: StageTag) -> String {
    match stage {
        StageTag::Moclr => "moclr".into(),
        _ => cfg.name.clone(),
    }
}

/// Cumulative training epochs behind a stage's checkpoint.
pub fn stage_epochs(cfg: &RunConfig, stage: StageTag) -> f64 {
    let s = &cfg.schedule;
    match stage {
        StageTag::Base => s.n1,
        StageTag::Expert(_) => s.n1 + s.n2,
        StageTag::Distilled | StageTag::Moclr => s.n1 + s.n2 + s.n3,
    }
}

fn checkpoint_path(layout: &RunLayout, stage: StageTag) -> PathBuf {
    match stage {
        StageTag::Base => layout.base(),
        StageTag::Expert(k) => layout.expert(k),
        StageTag::Distilled => layout.distilled(),
        StageTag::Moclr => layout.moclr(),
    }
}

fn load_config(dir: &Path) -> Result<RunConfig> {
    let path = RunLayout::new(dir).config();
    if !path.exists() {
        return Err(Error::Prerequisite(format!("{} is not a run directory", dir.display())));
    }
    RunConfig::load(&path)
}

/// Probe the given stages of a run (every stage with a checkpoint when
/// empty) and merge the results into `evals.json`.
pub fn probe_run(dir: &Path, stages: &[StageTag]) -> Result<Vec<EvalEntry>> {
    let cfg = load_config(dir)?;
    let layout = RunLayout::new(dir);
    let stages: Vec<StageTag> = if stages.is_empty() {
        [StageTag::Base, StageTag::Distilled, StageTag::Moclr]
            .into_iter()
            .filter(|&s| checkpoint_path(&layout, s).exists())
            .collect()
    } else {
        stages.to_vec()
    };
    if stages.is_empty() {
        return Err(Error::Prerequisite(format!("no checkpoints to probe in {}", dir.display())));
    }
    let data = cfg.materialize()?;
    let mut entries = read_evals(dir)?;
    let mut out = Vec::new();
    for stage in stages {
        let ck = Checkpoint::load(&checkpoint_path(&layout, stage))?;
        let result = linear_probe(
            &ck.state,
            &data.probe_train,
            &data.probe_test,
            &cfg.probe,
            cfg.view_size(),
            derive_seed(cfg.seed, "probe", 0),
        )?;
        let e = EvalEntry {
            method: method_of(&cfg, stage),
            stage,
            seed: cfg.seed,
            epochs: stage_epochs(&cfg, stage),
            result,
        };
        entries.retain(|x| x.stage != stage);
        entries.push(e.clone());
        out.push(e);
    }
    entries.sort_by_key(|e| e.stage.to_string());
    write_json(&dir.join(EVALS_FILE), &entries)?;
    Ok(out)
}

pub fn read_evals(dir: &Path) -> Result<Vec<EvalEntry>> {
    let p = dir.join(EVALS_FILE);
    if p.exists() {
        read_json(&p)
    } else {
        Ok(Vec::new())
    }
}

fn rec(method: &str, stage: &str, seed: u64, metric: &str, value: f64) -> MetricRecord {
    MetricRecord {
        method: method.into(),
        stage: stage.into(),
        seed,
        metric: metric.into(),
        value,
    }
}

/// Regenerate the metrics, `report.json` and figures of a run directory.
/// Output depends only on the directory's contents.
pub fn emit_report(dir: &Path) -> Result<Report> {
    let cfg = load_config(dir)?;
    let layout = RunLayout::new(dir);
    if !layout.plan().exists() {
        return Err(Error::Prerequisite(format!("{} has no plan", dir.display())));
    }
    let mut stages: Vec<StageTag> = vec![StageTag::Base];
    stages.extend((0..cfg.schedule.k).map(StageTag::Expert));
    stages.extend([StageTag::Distilled, StageTag::Moclr]);
    let checkpoints: Vec<(StageTag, Checkpoint)> = stages
        .into_iter()
        .filter(|&s| checkpoint_path(&layout, s).exists())
        .map(|s| Checkpoint::load(&checkpoint_path(&layout, s)).map(|c| (s, c)))
        .collect::<Result<_>>()?;
    if checkpoints.is_empty() {
        return Err(Error::Prerequisite(format!("{} has no checkpoints", dir.display())));
    }

    let seed = cfg.seed;
    let mut records = Vec::new();
    let mut loss_series = Vec::new();
    for (stage, ck) in &checkpoints {
        let m = method_of(&cfg, *stage);
        let st = stage.to_string();
        records.push(rec(&m, &st, seed, "steps", ck.step() as f64));
        if let Some(&l) = ck.losses.last() {
            records.push(rec(&m, &st, seed, "final_loss", l));
        }
        loss_series.push((
            st,
            ck.losses.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect::<Vec<_>>(),
        ));
    }
    let mut figures = Vec::new();
    let mut write_fig = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        figures.push(name.to_string());
        Ok(())
    };
    write_fig("loss_curves.svg", svg::line_chart("Training loss", "step", "loss", &loss_series))?;

    if layout.labels().exists() {
        let labels: ClusterLabels = read_json(&layout.labels())?;
        let corpus = cfg.materialize()?.corpus;
        if corpus.is_fully_labeled() && corpus.len() == labels.labels.len() {
            let truth = corpus.dense_labels()?;
            let a = &labels.labels;
            records.push(rec(&cfg.name, "clusters", seed, "cluster_top1", cluster_top1(a, &truth, labels.k)?));
            records.push(rec(&cfg.name, "clusters", seed, "cluster_mi", cluster_mi(a, &truth)?));
            records.push(rec(&cfg.name, "clusters", seed, "class_coherence", class_coherence(a, &truth)?));
            let classes = corpus.num_classes();
            let mut counts = vec![vec![0usize; classes]; labels.k];
            for (&c, &t) in a.iter().zip(&truth) {
                counts[c][t] += 1;
            }
            let bars: Vec<Vec<(usize, f64)>> = counts
                .iter()
                .map(|row| row.iter().enumerate().map(|(c, &n)| (c, n as f64)).collect())
                .collect();
            let names: Vec<String> = (0..classes).map(|c| format!("class {c}")).collect();
            write_fig(
                "cluster_composition.svg",
                svg::stacked_bars("Class composition of clusters", "cluster", &bars, &names),
            )?;
        }
        for (k, &n) in labels.sizes.iter().enumerate() {
            records.push(rec(&cfg.name, &format!("expert-{k}"), seed, "cluster_size", n as f64));
        }
    }

    let evals = read_evals(dir)?;
    for e in &evals {
        let st = e.stage.to_string();
        records.push(rec(&e.method, &st, e.seed, "probe_top1", e.result.top1));
        if let Some(t5) = e.result.top5 {
            records.push(rec(&e.method, &st, e.seed, "probe_top5", t5));
        }
        records.push(rec(&e.method, &st, e.seed, "epochs", e.epochs));
    }
    write_fig(
        "accuracy_vs_epochs.svg",
        svg::line_chart("Linear probe top-1", "epochs", "top-1", &accuracy_series(&evals)),
    )?;

    let stages_run: RunSummary = if layout.run().exists() {
        read_json(&layout.run())?
    } else {
        RunSummary::default()
    };
    let mut jsonl = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.push(b'\n');
    }
    let p = dir.join(METRICS_FILE);
    std::fs::File::create(&p)
        .and_then(|mut f| f.write_all(&jsonl))
        .map_err(|e| Error::io(&p, e))?;
    let report = Report {
        name: cfg.name.clone(),
        seed,
        config_digest: cfg.digest(),
        records,
        evals,
        stages: stages_run,
        figures,
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Probe top-1 against epochs, one series per method.
fn accuracy_series(evals: &[EvalEntry]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for e in evals {
        by.entry(e.method.clone()).or_default().push((e.epochs, e.result.top1));
    }
    by.into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, v)
        })
        .collect()
}

/// Compare the probe results of several run directories: a markdown table
/// and an overlay plot with one series per method per run.
pub fn compare_runs(dirs: &[PathBuf], out: &Path) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::invalid("no run directories to compare"));
    }
    let mut table = String::from("| run | method | stage | epochs | top-1 | top-5 |\n|---|---|---|---|---|---|\n");
    let mut series = Vec::new();
    for dir in dirs {
        let cfg = load_config(dir)?;
        let evals = read_evals(dir)?;
        if evals.is_empty() {
            return Err(Error::Prerequisite(format!("{} has no probe results", dir.display())));
        }
        for e in &evals {
            let _ = writeln!(
                table,
                "| {} | {} | {} | {} | {:.4} | {} |",
                cfg.name,
                e.method,
                e.stage,
                e.epochs,
                e.result.top1,
                e.result.top5.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
        for (m, pts) in accuracy_series(&evals) {
            let name = if m == cfg.name { m } else { format!("{}:{m}", cfg.name) };
            series.push((name, pts));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = out.join("comparison.md");
    std::fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
    let p = out.join("comparison.svg");
    std::fs::write(&p, svg::line_chart("Linear probe top-1", "epochs", "top-1", &series))
        .map_err(|e| Error::io(&p, e))?;
    Ok(table)
}
