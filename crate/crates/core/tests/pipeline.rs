use std::path::Path;

use dnc_core::cluster::partition;
use dnc_core::config::{DistillTargets, PartitionMode, RunConfig, TeacherInput};
use dnc_core::data::{synth_curated, Dataset, ImageSpec, SynthSpec};
use dnc_core::eval::{class_coherence, emit_report, linear_probe, probe_run};
use dnc_core::model::init_model;
use dnc_core::pipeline::*;
use dnc_core::rng::derive_rng;
use dnc_core::Error;

fn tiny(seed: u64) -> RunConfig {
    let mut c = RunConfig::preset("toy-uncurated").unwrap();
    c.name = "tiny".into();
    c.seed = seed;
    c.data.num_classes = 4;
    c.data.total = 96;
    c.data.height = 8;
    c.data.width = 8;
    c.data.coarse_groups = Some(2);
    c.data.probe_train_per_class = 12;
    c.data.probe_test_per_class = 8;
    c.model.encoder.widths = vec![4, 8];
    c.model.head.hidden_dim = 16;
    c.model.head.output_dim = 8;
    c.schedule.n1 = 2.0;
    c.schedule.n2 = 4.0;
    c.schedule.n3 = 2.0;
    c.schedule.k = 2;
    c.schedule.batch_size = 16;
    c.schedule.reference_size = 64;
    c.schedule.warmup_epochs = 0.5;
    c.probe.epochs = 10;
    c.probe.batch_size = 32;
    c.probe.lr_grid = vec![1.0];
    c
}

fn stage(c: &RunConfig, epochs: f64) -> dnc_core::schedule::StagePlan {
    c.schedule.stage("test", epochs)
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn contrastive_training_is_deterministic() {
    let c = tiny(1);
    let d = c.materialize().unwrap().corpus;
    let s = settings(&c);
    let a = train_contrastive(&d, &s, &stage(&c, 2.5), None, 7).unwrap();
    let b = train_contrastive(&d, &s, &stage(&c, 2.5), None, 7).unwrap();
    assert_eq!(a.losses.len(), 10);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.state.online, b.state.online);
    let init = init_model(&c.model, 0, &mut derive_rng(7, "init", 0)).unwrap();
    assert_ne!(a.state.momentum, init.momentum);
    assert_ne!(a.state.momentum, a.state.online);
}

#[test]
fn simclr_mode_keeps_branches_equal() {
    let mut c = tiny(1);
    c.method.simclr = true;
    let d = c.materialize().unwrap().corpus;
    let out = train_contrastive(&d, &settings(&c), &stage(&c, 1.0), None, 3).unwrap();
    assert_eq!(out.state.online, out.state.momentum);
    assert!(out.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn loss_falls_on_separable_data() {
    let mut drops = Vec::new();
    for seed in 0..3 {
        let mut c = tiny(seed);
        c.data.class_separation = 2.0;
        c.data.zipf_exponent = 0.0;
        let d = c.materialize().unwrap().corpus;
        let out = train_contrastive(&d, &settings(&c), &stage(&c, 4.0), None, seed).unwrap();
        let n = out.losses.len();
        let head: f64 = out.losses[..3].iter().sum::<f64>() / 3.0;
        let tail: f64 = out.losses[n - 3..].iter().sum::<f64>() / 3.0;
        drops.push(head - tail);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn zero_step_stage_is_rejected() {
    let c = tiny(0);
    let d = c.materialize().unwrap().corpus;
    let mut st = stage(&c, 1.0);
    st.steps = 0;
    assert!(train_contrastive(&d, &settings(&c), &st, None, 0).is_err());
}

#[test]
fn clustering_labels_every_item() {
    let c = tiny(2);
    let d = c.materialize().unwrap().corpus;
    let base = init_model(&c.model, 0, &mut derive_rng(0, "x", 0)).unwrap();
    let (m, labels) = run_clustering(&base, &d, 1, &c.cluster, 8, 0).unwrap();
    assert_eq!(m.k(), 1);
    assert_eq!(labels, vec![0; d.len()]);
    let mut cc = c.cluster.clone();
    cc.sample_size = Some(40);
    let (m, labels) = run_clustering(&base, &d, 3, &cc, 8, 0).unwrap();
    assert_eq!(m.assignments.len(), 40);
    assert_eq!(labels.len(), d.len());
    assert!(labels.iter().all(|&l| l < 3));
}

#[test]
fn clusters_follow_two_blobs() {
    let mut coh = Vec::new();
    for seed in 0..3 {
        let mut c = tiny(seed);
        c.data.num_classes = 2;
        c.data.coarse_groups = None;
        c.data.class_separation = 2.0;
        c.data.zipf_exponent = 0.0;
        let spec = SynthSpec {
            num_classes: 2,
            image: ImageSpec {
                height: 8,
                width: 8,
                channels: 3,
            },
            class_separation: 2.0,
            noise_std: 0.05,
            coarse_groups: None,
        };
        let d = synth_curated(&spec, 48, seed).unwrap();
        let base = train_contrastive(&d, &settings(&c), &stage(&c, 3.0), None, seed).unwrap();
        let (_, labels) = run_clustering(&base.state, &d, 2, &c.cluster, 8, seed).unwrap();
        coh.push(class_coherence(&labels, &d.dense_labels().unwrap()).unwrap());
    }
    coh.sort_by(f64::total_cmp);
    assert!(coh[1] >= 0.9, "{coh:?}");
}

fn two_subsets(c: &RunConfig) -> Vec<Dataset> {
    let d = c.materialize().unwrap().corpus;
    let labels: Vec<usize> = (0..d.len()).map(|i| i % 2).collect();
    partition(&d, &labels, 2).unwrap()
}

#[test]
fn experts_are_isolated_and_parallel_safe() {
    let c = tiny(4);
    let subsets = two_subsets(&c);
    let stages = vec![expert_stage(&c.schedule, 0, 2.0, 48), expert_stage(&c.schedule, 1, 2.0, 48)];
    // 2 epochs of 64 images at batch 16.
    assert!(stages.iter().all(|s| s.steps == 8));
    let s = settings(&c);
    let serial = train_experts(&subsets, &s, &stages, 9, 1).unwrap();
    let parallel = train_experts(&subsets, &s, &stages, 9, 2).unwrap();
    for (a, b) in serial.iter().zip(&parallel) {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert_eq!(a.state.online, b.state.online);
        assert_eq!(a.losses, b.losses);
    }
    assert_ne!(
        serial[0].as_ref().unwrap().losses,
        serial[1].as_ref().unwrap().losses
    );
    // Expert 1 alone, with the other slot empty, is unchanged.
    let alone = vec![subsets[0].select("empty", &[]), subsets[1].clone()];
    let only = train_experts(&alone, &s, &stages, 9, 1).unwrap();
    assert!(only[0].is_none());
    assert_eq!(
        only[1].as_ref().unwrap().state.online,
        serial[1].as_ref().unwrap().state.online
    );
}

#[test]
fn expert_steps_follow_budget() {
    let c = tiny(0);
    // 64 / 16 = 4 steps per epoch, rounded down.
    assert_eq!(expert_stage(&c.schedule, 0, 2.6, 10).steps, 10);
    assert_eq!(expert_stage(&c.schedule, 0, 0.1, 10).steps, 1);
    assert_eq!(expert_stage(&c.schedule, 0, 3.0, 0).steps, 0);
}

#[test]
fn expert_plan_modes() {
    let c = tiny(0);
    let labels: Vec<usize> = (0..96).map(|i| usize::from(i % 3 == 0)).collect();
    let p = plan_experts(&c, &labels, "d").unwrap();
    assert_eq!(p.sizes, vec![64, 32]);
    assert_eq!(p.budgets.iter().sum::<f64>(), 4.0);
    let mut r = c.clone();
    r.method.partition = PartitionMode::Random;
    let pr = plan_experts(&r, &labels, "d").unwrap();
    assert_eq!(pr.sizes, p.sizes);
    assert_ne!(pr.routes, p.routes);
    let mut f = c.clone();
    f.method.partition = PartitionMode::Full;
    let pf = plan_experts(&f, &labels, "d").unwrap();
    assert_eq!(pf.budgets, vec![2.0, 2.0]);
    assert!(pf.members().iter().all(|m| m.len() == 96));
    assert_eq!(pf.routes, labels);
}

#[test]
fn distillation_leaves_teachers_alone() {
    let c = tiny(5);
    let d = c.materialize().unwrap().corpus;
    let s = settings(&c);
    let base = train_contrastive(&d, &s, &stage(&c, 1.0), None, 1).unwrap().state;
    let e0 = train_contrastive(&d, &s, &stage(&c, 1.0), None, 2).unwrap().state;
    let e1 = train_contrastive(&d, &s, &stage(&c, 1.0), None, 3).unwrap().state;
    let sums = [base.online.checksum(), base.momentum.checksum(), e0.momentum.checksum()];
    let labels: Vec<usize> = (0..d.len()).map(|i| i % 2).collect();
    let experts = vec![Some(e0.clone()), Some(e1)];
    for input in [TeacherInput::Augmented, TeacherInput::CenterCrop] {
        for targets in [DistillTargets::Both, DistillTargets::BaseOnly, DistillTargets::ExpertsOnly] {
            let a = distill(&base, &experts, &labels, &d, &s, input, targets, &stage(&c, 1.0), 4).unwrap();
            let b = distill(&base, &experts, &labels, &d, &s, input, targets, &stage(&c, 1.0), 4).unwrap();
            assert_eq!(a.losses, b.losses);
            assert_eq!(a.state.regressors.len(), 3);
            assert!(a.losses.iter().all(|l| l.is_finite()));
        }
    }
    assert_eq!(sums, [base.online.checksum(), base.momentum.checksum(), e0.momentum.checksum()]);

    let missing = vec![Some(e0), None];
    assert!(matches!(
        distill(&base, &missing, &labels, &d, &s, TeacherInput::Augmented, DistillTargets::Both, &stage(&c, 1.0), 4),
        Err(Error::Prerequisite(_))
    ));
}

#[test]
fn run_dnc_resumes_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(6);
    let full = dir.path().join("full");
    let (ck, _) = run_dnc(&c, &full, &RunOptions::default()).unwrap();
    let layout = RunLayout::new(&full);
    for p in [
        layout.config(),
        layout.plan(),
        layout.base(),
        layout.cluster_model(),
        layout.labels(),
        layout.budgets(),
        layout.distilled(),
        layout.run(),
    ] {
        assert!(p.exists(), "{}", p.display());
    }
    assert_eq!(ck.unwrap().stage, StageTag::Distilled);

    // Stop after stage 2, then finish in a second invocation.
    let split = dir.path().join("split");
    let opts = RunOptions {
        stop_after: Stage::Experts,
        workers: 2,
        ..RunOptions::default()
    };
    run_dnc(&c, &split, &opts).unwrap();
    assert!(!RunLayout::new(&split).distilled().exists());
    let (_, summary) = run_dnc(&c, &split, &RunOptions::default()).unwrap();
    assert!(summary.records.iter().any(|r| r.stage == "base" && r.resumed));
    assert_eq!(bytes(&layout.distilled()), bytes(&RunLayout::new(&split).distilled()));

    // Total optimizer steps equal the three budgets within rounding.
    let plan: ExpertPlan = serde_json::from_slice(&bytes(&layout.budgets())).unwrap();
    let spec = &c.schedule;
    let expert_steps: u64 = plan.stages.iter().map(|s| s.steps).sum();
    let target = spec.steps_for_epochs(spec.n2);
    assert!(expert_steps.abs_diff(target) <= spec.k as u64, "{expert_steps} vs {target}");
}

#[test]
fn changed_settings_are_refused_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(7);
    let opts = RunOptions {
        stop_after: Stage::Base,
        ..RunOptions::default()
    };
    run_dnc(&c, dir.path(), &opts).unwrap();
    let mut other = c.clone();
    other.schedule.base_lr = 0.5;
    assert!(matches!(
        run_dnc(&other, dir.path(), &opts),
        Err(Error::DigestMismatch { .. })
    ));
    // Downstream-only changes keep the base model.
    let mut downstream = c.clone();
    downstream.schedule.n3 = 1.0;
    let (_, s) = run_dnc(&downstream, dir.path(), &opts).unwrap();
    assert!(s.records[0].resumed);
}

#[test]
fn partial_commands_need_upstream() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(8);
    let opts = RunOptions {
        stop_after: Stage::Clusters,
        compute_upstream: false,
        ..RunOptions::default()
    };
    assert!(matches!(run_dnc(&c, dir.path(), &opts), Err(Error::Prerequisite(_))));
    let distill_only = RunOptions {
        stop_after: Stage::Distilled,
        ..opts
    };
    assert!(matches!(
        run_dnc(&c, dir.path(), &distill_only),
        Err(Error::Prerequisite(_))
    ));
}

#[test]
fn invalid_config_enumerates_violations() {
    let mut c = tiny(0);
    c.schedule.k = 0;
    c.probe.lr_grid.clear();
    let dir = tempfile::tempdir().unwrap();
    match run_dnc(&c, dir.path(), &RunOptions::default()) {
        Err(Error::Config(v)) => assert!(v.len() >= 2, "{v:?}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(!RunLayout::new(dir.path()).plan().exists());
}

#[test]
fn ablation_variants_share_upstream() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(9);
    let out = ablate(&c, dir.path(), &["dnc", "random-partition", "center-crop"], &RunOptions::default()).unwrap();
    assert_eq!(out.len(), 3);
    let base = |v: &str| bytes(&RunLayout::new(dir.path().join(v)).base());
    assert_eq!(base("dnc"), base("random-partition"));
    assert_eq!(base("dnc"), base("center-crop"));
    let e = |v: &str| bytes(&RunLayout::new(dir.path().join(v)).expert(0));
    assert_eq!(e("dnc"), e("center-crop"));
    assert_ne!(e("dnc"), e("random-partition"));
    assert!(variant_config(&c, "nope").is_err());
}

#[test]
fn moclr_baseline_uses_the_whole_budget() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(10);
    let (ck, _) = run_moclr(&c, dir.path()).unwrap();
    let s = &c.schedule;
    assert_eq!(ck.step(), s.steps_for_epochs(s.n1 + s.n2 + s.n3));
    assert_eq!(ck.stage, StageTag::Moclr);
}

#[test]
fn probe_and_report_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(11);
    run_dnc(&c, dir.path(), &RunOptions::default()).unwrap();
    let ck = Checkpoint::load(&RunLayout::new(dir.path()).distilled()).unwrap();
    let data = c.materialize().unwrap();
    let before = ck.state.online.checksum();
    let r = linear_probe(&ck.state, &data.probe_train, &data.probe_test, &c.probe, 8, 0).unwrap();
    assert_eq!(before, ck.state.online.checksum());
    assert!((0.0..=1.0).contains(&r.top1));

    let evals = probe_run(dir.path(), &[]).unwrap();
    assert_eq!(evals.len(), 2);
    let first = emit_report(dir.path()).unwrap();
    let files = ["metrics.jsonl", "report.json", "loss_curves.svg", "cluster_composition.svg", "accuracy_vs_epochs.svg"];
    let snap: Vec<Vec<u8>> = files.iter().map(|f| bytes(&dir.path().join(f))).collect();
    let second = emit_report(dir.path()).unwrap();
    assert_eq!(first, second);
    for (f, b) in files.iter().zip(&snap) {
        assert_eq!(&bytes(&dir.path().join(f)), b, "{f}");
    }
    let metrics = String::from_utf8(snap[0].clone()).unwrap();
    for m in ["cluster_top1", "cluster_mi", "class_coherence", "probe_top1", "final_loss"] {
        assert!(metrics.contains(&format!("\"metric\":\"{m}\"")), "{m}");
    }
    assert!(matches!(
        emit_report(&dir.path().join("nothing")),
        Err(Error::Prerequisite(_))
    ));
}
