//! The three-stage run: base model, clustering, experts, distillation.
//!
//! Every stage writes its artifacts under the run directory and stamps them
//! with the digest of the configuration it depends on, so a rerun picks up
//! completed stages and refuses artifacts built from other settings.

mod ablate;
mod checkpoint;
mod train;

pub use ablate::{ablate, variant_config, VariantResult, VARIANTS};
pub use checkpoint::{Checkpoint, StageTag, CHECKPOINT_FILE, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use train::{distill, train_contrastive, TrainOutcome, TrainSettings};

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::cluster::{assign, extract_representations, kmeans_cosine, layer_features, ClusterModel, RepresentationMatrix};
use crate::config::{ClusterConfig, PartitionMode, RunConfig, RunData, StageDigests};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelState, Network};
use crate::rng::{derive_rng, derive_seed};
use crate::schedule::{allocate_expert_budget, ScheduleSpec, StagePlan};

pub const PLAN_FILE: &str = "plan.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const CLUSTER_MODEL_FILE: &str = "clusters/model.safetensors";
pub const LABELS_FILE: &str = "clusters/labels.json";
pub const BUDGETS_FILE: &str = "stage2/budgets.json";

/// The pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Base,
    Clusters,
    Experts,
    Distilled,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Clusters => "clusters",
            Stage::Experts => "experts",
            Stage::Distilled => "distilled",
        })
    }
}

/// Where each artifact of a run lives.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join(PLAN_FILE)
    }
    pub fn run(&self) -> PathBuf {
        self.root.join(RUN_FILE)
    }
    pub fn base(&self) -> PathBuf {
        self.root.join("stage1").join(CHECKPOINT_FILE)
    }
    pub fn cluster_model(&self) -> PathBuf {
        self.root.join(CLUSTER_MODEL_FILE)
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join(LABELS_FILE)
    }
    pub fn budgets(&self) -> PathBuf {
        self.root.join(BUDGETS_FILE)
    }
    pub fn expert(&self, k: usize) -> PathBuf {
        self.root.join("stage2").join(format!("expert-{k}")).join(CHECKPOINT_FILE)
    }
    pub fn distilled(&self) -> PathBuf {
        self.root.join("stage3").join(CHECKPOINT_FILE)
    }
    pub fn moclr(&self) -> PathBuf {
        self.root.join("moclr").join(CHECKPOINT_FILE)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Per-item cluster labels, as stored next to the cluster model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLabels {
    pub digest: String,
    pub k: usize,
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
}

/// The stage-2 plan: who trains on what, for how long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPlan {
    pub digest: String,
    pub partition: PartitionMode,
    /// Expert that teaches each corpus item during distillation.
    pub routes: Vec<usize>,
    /// Training-set size of each expert.
    pub sizes: Vec<usize>,
    pub budgets: Vec<f64>,
    pub stages: Vec<StagePlan>,
    /// Experts with no data; they are not trained.
    pub skipped: Vec<usize>,
}

impl ExpertPlan {
    /// Corpus indices each expert trains on.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let k = self.sizes.len();
        match self.partition {
            PartitionMode::Full => vec![(0..self.routes.len()).collect(); k],
            _ => (0..k)
                .map(|c| (0..self.routes.len()).filter(|&i| self.routes[i] == c).collect())
                .collect(),
        }
    }
}

/// The resolved plan written to `plan.json` before any compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub name: String,
    pub seed: u64,
    pub config_digest: String,
    pub stage_digests: StageDigests,
    pub schedule: ScheduleSpec,
    pub corpus: DatasetRef,
    pub base: StagePlan,
    pub distill: StagePlan,
    pub layout: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    pub len: usize,
    pub num_classes: usize,
}

impl DatasetRef {
    fn of(d: &Dataset) -> Self {
        DatasetRef {
            name: d.name().to_string(),
            len: d.len(),
            num_classes: d.num_classes(),
        }
    }
}

/// What happened to one stage in one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub steps: u64,
    pub wall_seconds: f64,
    /// Loaded from disk rather than computed.
    pub resumed: bool,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub records: Vec<StageRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Threads for stage 2; experts are independent so the result does not
    /// depend on this.
    pub workers: usize,
    /// Run up to and including this stage.
    pub stop_after: Stage,
    /// Train missing upstream stages instead of failing with a
    /// prerequisite error.
    pub compute_upstream: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: 1,
            stop_after: Stage::Distilled,
            compute_upstream: true,
        }
    }
}

pub fn settings(cfg: &RunConfig) -> TrainSettings {
    TrainSettings {
        model: cfg.model.clone(),
        spec: cfg.schedule.clone(),
        views: cfg.views(),
        simclr: cfg.method.simclr,
    }
}

/// Cluster the base model's representations and label every corpus item.
pub fn run_clustering(
    base: &ModelState,
    d: &Dataset,
    k: usize,
    ccfg: &ClusterConfig,
    view_side: usize,
    seed: u64,
) -> Result<(ClusterModel, Vec<usize>)> {
    let mut rng = derive_rng(seed, "clusters", 0);
    let r = extract_representations(base, d, ccfg.layer, ccfg.sample_size, view_side, &mut rng)?;
    let model = kmeans_cosine(&r, k, ccfg.max_iters, ccfg.n_init, &mut rng)?;
    let labels = if r.len() == d.len() {
        model.assignments.clone()
    } else {
        let all: Vec<usize> = (0..d.len()).collect();
        let rows = layer_features(base, d, &all, ccfg.layer, Network::Momentum, view_side)?;
        assign(&model, &RepresentationMatrix::new(rows, ccfg.layer)?)?
    };
    Ok((model, labels))
}

/// Stage plan of one expert: its share of the epochs, and at least one step
/// when it has any data.
pub fn expert_stage(spec: &ScheduleSpec, k: usize, epochs: f64, size: usize) -> StagePlan {
    let mut s = spec.stage(&format!("expert-{k}"), epochs);
    if size > 0 && s.steps == 0 {
        s.steps = 1;
        s.warmup_steps = 0;
    }
    if size == 0 {
        s.steps = 0;
    }
    s
}

/// Resolve stage 2 from the cluster labels and the partition mode.
pub fn plan_experts(cfg: &RunConfig, labels: &[usize], digest: &str) -> Result<ExpertPlan> {
    let k = cfg.schedule.k;
    let routes = match cfg.method.partition {
        PartitionMode::Clustered | PartitionMode::Full => labels.to_vec(),
        PartitionMode::Random => {
            let mut r = labels.to_vec();
            r.shuffle(&mut derive_rng(cfg.seed, "random-partition", 0));
            r
        }
    };
    let mut sizes = vec![0usize; k];
    for &r in &routes {
        sizes[r] += 1;
    }
    let (sizes, budgets) = match cfg.method.partition {
        PartitionMode::Full => (
            vec![routes.len(); k],
            allocate_expert_budget(cfg.schedule.n2, &vec![1; k])?,
        ),
        _ => {
            let b = allocate_expert_budget(cfg.schedule.n2, &sizes)?;
            (sizes, b)
        }
    };
    let stages = (0..k)
        .map(|c| expert_stage(&cfg.schedule, c, budgets[c], sizes[c]))
        .collect();
    Ok(ExpertPlan {
        digest: digest.to_string(),
        partition: cfg.method.partition,
        skipped: (0..k).filter(|&c| sizes[c] == 0).collect(),
        routes,
        sizes,
        budgets,
        stages,
    })
}

/// Train one expert per nonempty subset on up to `workers` threads. Expert
/// `k` depends only on its subset, its stage and `derive_seed(seed, "expert", k)`.
pub fn train_experts(
    subsets: &[Dataset],
    s: &TrainSettings,
    stages: &[StagePlan],
    seed: u64,
    workers: usize,
) -> Result<Vec<Option<TrainOutcome>>> {
    if subsets.len() != stages.len() {
        return Err(Error::LengthMismatch {
            left: subsets.len(),
            right: stages.len(),
        });
    }
    let todo: Vec<usize> = (0..subsets.len()).filter(|&k| !subsets[k].is_empty()).collect();
    let results: Mutex<Vec<Option<Result<TrainOutcome>>>> = Mutex::new((0..subsets.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&k) = todo.get(i) else { break };
        let out = train_contrastive(&subsets[k], s, &stages[k], None, derive_seed(seed, "expert", k as u64));
        results.lock().expect("no worker panicked")[k] = Some(out);
    };
    let workers = workers.clamp(1, todo.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|sc| {
            for _ in 0..workers {
                sc.spawn(work);
            }
        });
    }
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.transpose())
        .collect()
}

/// One run directory with its configuration and data.
pub struct Run {
    pub cfg: RunConfig,
    pub layout: RunLayout,
    pub digests: StageDigests,
    pub data: RunData,
    pub settings: TrainSettings,
    pub summary: RunSummary,
    base_cache: Option<Checkpoint>,
    labels_cache: Option<ClusterLabels>,
}

impl Run {
    /// Validate, materialize the data, and write the resolved config and plan.
    pub fn open(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let data = cfg.materialize()?;
        let layout = RunLayout::new(dir);
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(layout.config(), cfg.to_toml()).map_err(|e| Error::io(layout.config(), e))?;
        let digests = cfg.stage_digests();
        let spec = &cfg.schedule;
        let plan = RunPlan {
            name: cfg.name.clone(),
            seed: cfg.seed,
            config_digest: cfg.digest(),
            stage_digests: digests.clone(),
            schedule: spec.clone(),
            corpus: DatasetRef::of(&data.corpus),
            base: spec.stage("base", spec.n1),
            distill: spec.stage("distilled", spec.n3),
            layout: [
                ("config", CONFIG_FILE),
                ("plan", PLAN_FILE),
                ("base", "stage1/checkpoint.safetensors"),
                ("cluster_model", CLUSTER_MODEL_FILE),
                ("labels", LABELS_FILE),
                ("budgets", BUDGETS_FILE),
                ("experts", "stage2/expert-<k>/checkpoint.safetensors"),
                ("distilled", "stage3/checkpoint.safetensors"),
                ("moclr", "moclr/checkpoint.safetensors"),
                ("run", RUN_FILE),
            ]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect(),
        };
        write_json(&layout.plan(), &plan)?;
        Ok(Run {
            settings: settings(cfg),
            cfg: cfg.clone(),
            layout,
            digests,
            data,
            summary: RunSummary::default(),
            base_cache: None,
            labels_cache: None,
        })
    }

    fn record(&mut self, stage: String, steps: u64, seconds: f64, resumed: bool, losses: &[f64]) {
        let r = StageRecord {
            stage,
            steps,
            wall_seconds: seconds,
            resumed,
            final_loss: losses.last().copied(),
        };
        info!(
            "{}: {} steps, {:.1}s{}",
            r.stage,
            r.steps,
            r.wall_seconds,
            if resumed { " (resumed)" } else { "" }
        );
        self.summary.records.push(r);
    }

    fn missing(&self, what: &str, path: &Path) -> Error {
        Error::Prerequisite(format!("{what} not found at {}", path.display()))
    }

    /// Load or train a contrastive checkpoint.
    fn contrastive_stage(
        &mut self,
        path: PathBuf,
        tag: StageTag,
        digest: String,
        plan: StagePlan,
        d: &Dataset,
        seed: u64,
        compute: bool,
    ) -> Result<Checkpoint> {
        let started = Instant::now();
        if path.exists() {
            let ck = Checkpoint::load_expecting(&path, &digest)?;
            self.record(tag.to_string(), ck.step(), started.elapsed().as_secs_f64(), true, &ck.losses);
            return Ok(ck);
        }
        if !compute {
            return Err(self.missing(&format!("{tag} checkpoint"), &path));
        }
        let out = train_contrastive(d, &self.settings, &plan, None, seed)?;
        let ck = Checkpoint::new(out.state, tag, seed, digest, out.losses);
        ck.save(&path)?;
        self.record(tag.to_string(), plan.steps, started.elapsed().as_secs_f64(), false, &ck.losses);
        Ok(ck)
    }

    pub fn base(&mut self, compute: bool) -> Result<Checkpoint> {
        if let Some(ck) = &self.base_cache {
            return Ok(ck.clone());
        }
        let plan = self.cfg.schedule.stage("base", self.cfg.schedule.n1);
        let corpus = self.data.corpus.clone();
        let ck = self.contrastive_stage(
            self.layout.base(),
            StageTag::Base,
            self.digests.base.clone(),
            plan,
            &corpus,
            derive_seed(self.cfg.seed, "base", 0),
            compute,
        )?;
        self.base_cache = Some(ck.clone());
        Ok(ck)
    }

    /// The MoCLR baseline with the whole DnC budget.
    pub fn moclr(&mut self, compute: bool) -> Result<Checkpoint> {
        let s = &self.cfg.schedule;
        let plan = s.stage("moclr", s.n1 + s.n2 + s.n3);
        let corpus = self.data.corpus.clone();
        self.contrastive_stage(
            self.layout.moclr(),
            StageTag::Moclr,
            self.digests.moclr.clone(),
            plan,
            &corpus,
            derive_seed(self.cfg.seed, "moclr", 0),
            compute,
        )
    }

    pub fn clusters(&mut self, compute: bool, upstream: bool) -> Result<ClusterLabels> {
        if let Some(l) = &self.labels_cache {
            return Ok(l.clone());
        }
        let l = self.load_or_fit_clusters(compute, upstream)?;
        self.labels_cache = Some(l.clone());
        Ok(l)
    }

    fn load_or_fit_clusters(&mut self, compute: bool, upstream: bool) -> Result<ClusterLabels> {
        let started = Instant::now();
        let path = self.layout.labels();
        if path.exists() && self.layout.cluster_model().exists() {
            let l: ClusterLabels = read_json(&path)?;
            if l.digest != self.digests.clusters {
                return Err(Error::DigestMismatch {
                    path,
                    found: l.digest,
                    expected: self.digests.clusters.clone(),
                });
            }
            if l.labels.len() != self.data.corpus.len() {
                return Err(Error::Integrity(format!(
                    "{} labels for a corpus of {}",
                    l.labels.len(),
                    self.data.corpus.len()
                )));
            }
            self.record("clusters".into(), 0, started.elapsed().as_secs_f64(), true, &[]);
            return Ok(l);
        }
        if !compute {
            return Err(self.missing("cluster labels", &path));
        }
        let base = self.base(upstream)?;
        let started = Instant::now();
        let (model, labels) = run_clustering(
            &base.state,
            &self.data.corpus,
            self.cfg.schedule.k,
            &self.cfg.cluster,
            self.cfg.view_size(),
            self.cfg.seed,
        )?;
        std::fs::create_dir_all(path.parent().expect("labels live in a directory"))
            .map_err(|e| Error::io(&path, e))?;
        model.write(&self.layout.cluster_model())?;
        let mut sizes = vec![0; model.k()];
        for &l in &labels {
            sizes[l] += 1;
        }
        let l = ClusterLabels {
            digest: self.digests.clusters.clone(),
            k: model.k(),
            labels,
            sizes,
        };
        write_json(&path, &l)?;
        self.record("clusters".into(), model.history.len() as u64, started.elapsed().as_secs_f64(), false, &[]);
        Ok(l)
    }

    /// Load or train every expert; returns the plan and one state per cluster
    /// (`None` for skipped experts).
    pub fn experts(&mut self, workers: usize, compute: bool, upstream: bool) -> Result<(ExpertPlan, Vec<Option<ModelState>>)> {
        let labels = self.clusters(upstream, upstream)?;
        let plan = plan_experts(&self.cfg, &labels.labels, &self.digests.experts)?;
        let budgets = self.layout.budgets();
        if budgets.exists() {
            let stored: ExpertPlan = read_json(&budgets)?;
            if stored.digest != plan.digest {
                return Err(Error::DigestMismatch {
                    path: budgets,
                    found: stored.digest,
                    expected: plan.digest,
                });
            }
        } else if compute {
            write_json(&budgets, &plan)?;
        }

        let k = plan.sizes.len();
        let mut states: Vec<Option<ModelState>> = vec![None; k];
        let mut todo = Vec::new();
        for c in 0..k {
            if plan.sizes[c] == 0 {
                continue;
            }
            let p = self.layout.expert(c);
            if p.exists() {
                let started = Instant::now();
                let ck = Checkpoint::load_expecting(&p, &self.digests.experts)?;
                self.record(StageTag::Expert(c).to_string(), ck.step(), started.elapsed().as_secs_f64(), true, &ck.losses);
                states[c] = Some(ck.state);
            } else if compute {
                todo.push(c);
            } else {
                return Err(self.missing(&format!("expert {c} checkpoint"), &p));
            }
        }
        if !todo.is_empty() {
            let members = plan.members();
            let subsets: Vec<Dataset> = (0..k)
                .map(|c| {
                    if todo.contains(&c) {
                        self.data.corpus.select(format!("{}/expert-{c}", self.data.corpus.name()), &members[c])
                    } else {
                        self.data.corpus.select("skipped", &[])
                    }
                })
                .collect();
            let outs = train_experts(&subsets, &self.settings, &plan.stages, self.cfg.seed, workers)?;
            for (c, out) in outs.into_iter().enumerate() {
                let Some(out) = out else { continue };
                let ck = Checkpoint::new(
                    out.state,
                    StageTag::Expert(c),
                    derive_seed(self.cfg.seed, "expert", c as u64),
                    self.digests.experts.clone(),
                    out.losses,
                );
                ck.save(&self.layout.expert(c))?;
                self.record(StageTag::Expert(c).to_string(), plan.stages[c].steps, out.seconds, false, &ck.losses);
                states[c] = Some(ck.state);
            }
        }
        Ok((plan, states))
    }

    pub fn distilled(&mut self, workers: usize, upstream: bool) -> Result<Checkpoint> {
        let path = self.layout.distilled();
        let started = Instant::now();
        if path.exists() {
            let ck = Checkpoint::load_expecting(&path, &self.digests.distilled)?;
            self.record(StageTag::Distilled.to_string(), ck.step(), started.elapsed().as_secs_f64(), true, &ck.losses);
            return Ok(ck);
        }
        let base = self.base(upstream)?;
        let (plan, experts) = self.experts(workers, upstream, upstream)?;
        let started = Instant::now();
        let stage = self.cfg.schedule.stage("distilled", self.cfg.schedule.n3);
        let seed = derive_seed(self.cfg.seed, "distill", 0);
        let out = distill(
            &base.state,
            &experts,
            &plan.routes,
            &self.data.corpus,
            &self.settings,
            self.cfg.distill.teacher_input,
            self.cfg.distill.targets,
            &stage,
            seed,
        )?;
        let ck = Checkpoint::new(out.state, StageTag::Distilled, seed, self.digests.distilled.clone(), out.losses);
        ck.save(&path)?;
        self.record(StageTag::Distilled.to_string(), stage.steps, started.elapsed().as_secs_f64(), false, &ck.losses);
        Ok(ck)
    }

    /// Append this invocation's stage records to `run.json`.
    pub fn finish(&self) -> Result<()> {
        let path = self.layout.run();
        let mut all: RunSummary = if path.exists() {
            read_json(&path)?
        } else {
            RunSummary::default()
        };
        all.records.extend(self.summary.records.iter().cloned());
        write_json(&path, &all)
    }
}

/// Run the pipeline up to `opts.stop_after`. Returns the checkpoint of the
/// last stage that produces one (the base model when stopping after
/// clustering, `None` after stage 2).
pub fn run_dnc(cfg: &RunConfig, dir: &Path, opts: &RunOptions) -> Result<(Option<Checkpoint>, RunSummary)> {
    let mut run = Run::open(cfg, dir)?;
    let up = opts.compute_upstream;
    let out = match opts.stop_after {
        Stage::Base => Some(run.base(true)?),
        Stage::Clusters => {
            let base = run.base(up)?;
            run.clusters(true, up)?;
            Some(base)
        }
        Stage::Experts => {
            run.experts(opts.workers, true, up)?;
            None
        }
        Stage::Distilled => Some(run.distilled(opts.workers, up)?),
    };
    run.finish()?;
    Ok((out, run.summary))
}

/// Train (or load) the MoCLR baseline with budget `n1 + n2 + n3`.
pub fn run_moclr(cfg: &RunConfig, dir: &Path) -> Result<(Checkpoint, RunSummary)> {
    let mut run = Run::open(cfg, dir)?;
    let ck = run.moclr(true)?;
    run.finish()?;
    Ok((ck, run.summary))
}

/// Copy the artifacts of completed upstream stages from `src` into `dst`, so
/// a variant differing only downstream resumes from them. Only files whose
/// digests match the variant are copied.
pub fn share_upstream(src: &Path, dst: &Path, variant: &RunConfig) -> Result<()> {
    let (s, d) = (RunLayout::new(src), RunLayout::new(dst));
    let dg = variant.stage_digests();
    let copy = |from: PathBuf, to: PathBuf| -> Result<()> {
        if let Some(parent) = to.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
        Ok(())
    };
    let matches = |p: &Path, digest: &str| -> Result<bool> {
        Ok(p.exists() && Checkpoint::load(p)?.config_digest == digest)
    };
    if !matches(&s.base(), &dg.base)? {
        return Ok(());
    }
    copy(s.base(), d.base())?;
    if !s.labels().exists() || read_json::<ClusterLabels>(&s.labels())?.digest != dg.clusters {
        return Ok(());
    }
    copy(s.labels(), d.labels())?;
    copy(s.cluster_model(), d.cluster_model())?;
    if !s.budgets().exists() || read_json::<ExpertPlan>(&s.budgets())?.digest != dg.experts {
        return Ok(());
    }
    copy(s.budgets(), d.budgets())?;
    for k in 0..variant.schedule.k {
        if s.expert(k).exists() {
            copy(s.expert(k), d.expert(k))?;
        }
    }
    Ok(())
}
