//! Stage budgets, learning-rate schedule, LARS and compute accounting.

use serde::{Deserialize, Serialize};

use crate::data::synth::largest_remainder;
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamEntry, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    /// Base-model epochs.
    pub n1: f64,
    /// Total expert epochs, shared out by cluster size.
    pub n2: f64,
    /// Distillation epochs.
    pub n3: f64,
    pub k: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// LARS trust coefficient: the trust ratio is `coef * |p| / |g|`.
    pub trust_coefficient: f64,
    pub tau_base: f64,
    pub temperature: f64,
    /// Images per epoch. One epoch is `reference_size / batch_size` steps
    /// whatever the size of the corpus being trained on.
    pub reference_size: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            n1: 200.0,
            n2: 600.0,
            n3: 200.0,
            k: 5,
            batch_size: 256,
            base_lr: 0.3,
            warmup_epochs: 10.0,
            weight_decay: 1.5e-6,
            momentum: 0.9,
            trust_coefficient: 1e-3,
            tau_base: 0.996,
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            reference_size: 10_000,
        }
    }
}

/// The stage layouts of the three published schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulePreset {
    #[serde(rename = "dnc-1000")]
    Dnc1000,
    #[serde(rename = "dnc-3000")]
    Dnc3000,
    #[serde(rename = "dnc-4500")]
    Dnc4500,
}

impl SchedulePreset {
    /// `(n1, n2, n3, k)`.
    pub fn stages(self) -> (f64, f64, f64, usize) {
        match self {
            SchedulePreset::Dnc1000 => (200.0, 600.0, 200.0, 5),
            SchedulePreset::Dnc3000 => (1000.0, 1500.0, 500.0, 5),
            SchedulePreset::Dnc4500 => (1000.0, 3000.0, 500.0, 10),
        }
    }

    pub fn apply(self, spec: &mut ScheduleSpec) {
        (spec.n1, spec.n2, spec.n3, spec.k) = self.stages();
    }
}

impl ScheduleSpec {
    /// Every violated constraint, prefixed with `prefix`.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                v.push(format!("{prefix}{msg}"));
            }
        };
        for (name, x) in [("n1", self.n1), ("n2", self.n2), ("n3", self.n3)] {
            check(x.is_finite() && x >= 0.0, &format!("{name} must be a nonnegative number"));
        }
        check(self.k >= 1, "k must be at least 1");
        check(self.batch_size >= 2, "batch_size must be at least 2");
        check(self.base_lr.is_finite() && self.base_lr > 0.0, "base_lr must be positive");
        check(
            self.warmup_epochs.is_finite() && self.warmup_epochs >= 0.0,
            "warmup_epochs must be nonnegative",
        );
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight_decay must be nonnegative",
        );
        check((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)");
        check(
            self.trust_coefficient.is_finite() && self.trust_coefficient > 0.0,
            "trust_coefficient must be positive",
        );
        check(
            self.tau_base > 0.0 && self.tau_base <= 1.0,
            "tau_base must lie in (0, 1]",
        );
        check(
            self.temperature.is_finite() && self.temperature > 0.0,
            "temperature must be positive",
        );
        check(self.reference_size >= 1, "reference_size must be positive");
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn steps_per_epoch(&self) -> f64 {
        self.reference_size as f64 / self.batch_size as f64
    }

    /// Optimizer steps for a budget in epochs, rounded down.
    pub fn steps_for_epochs(&self, epochs: f64) -> u64 {
        (epochs * self.steps_per_epoch() + 1e-9).floor() as u64
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    /// Resolve a stage of `epochs`. Warmup never exceeds half the stage, so
    /// very short stages (small experts) still decay.
    pub fn stage(&self, name: &str, epochs: f64) -> StagePlan {
        let steps = self.steps_for_epochs(epochs);
        let warmup = self.steps_for_epochs(self.warmup_epochs).min(steps / 2);
        StagePlan {
            name: name.to_string(),
            epochs,
            steps,
            warmup_steps: warmup,
            peak_lr: self.peak_lr(),
        }
    }
}

/// A resolved training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub name: String,
    pub epochs: f64,
    pub steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
}

impl StagePlan {
    pub fn lr(&self, step: u64) -> Result<f64> {
        lr_schedule(step, self.steps, self.warmup_steps, self.peak_lr)
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, peak: f64) -> Result<f64> {
    if warmup >= total && total > 0 || total == 0 {
        return Err(Error::invalid(format!(
            "warmup ({warmup} steps) must be shorter than training ({total} steps)"
        )));
    }
    if step > total {
        return Err(Error::IndexOutOfRange {
            index: step as usize,
            len: total as usize + 1,
        });
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Learning rate at `step` of `total_steps` with the warmup and peak of `spec`.
pub fn lr_at(step: u64, total_steps: u64, spec: &ScheduleSpec) -> Result<f64> {
    lr_schedule(
        step,
        total_steps,
        spec.steps_for_epochs(spec.warmup_epochs),
        spec.peak_lr(),
    )
}

/// Per-expert epochs proportional to cluster size, summing to `n2`.
pub fn allocate_expert_budget(n2: f64, cluster_sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = cluster_sizes.iter().sum();
    if total == 0 {
        return Err(Error::Infeasible("every cluster is empty".into()));
    }
    if !(n2.is_finite() && n2 >= 0.0) {
        return Err(Error::invalid("expert budget must be a nonnegative number"));
    }
    let mut b: Vec<f64> = cluster_sizes
        .iter()
        .map(|&s| n2 * s as f64 / total as f64)
        .collect();
    // Put the rounding residue on the last nonempty share, which is the last
    // addend of the left-to-right sum. `n2 - prefix` can round by half an ulp,
    // so finish with a short ulp walk on that share. When the prefix sits
    // exactly between two grid points of `n2` no value of the last share
    // lands on it; then nudge an earlier share by a few ulps and try again.
    let last = cluster_sizes.iter().rposition(|&s| s > 0).unwrap_or(0);
    let settle = |b: &mut Vec<f64>| {
        let prefix: f64 = b[..last].iter().sum();
        b[last] = (n2 - prefix).max(0.0);
        for _ in 0..8 {
            let sum: f64 = b.iter().sum();
            if sum == n2 {
                return true;
            }
            b[last] = if sum < n2 { b[last].next_up() } else { b[last].next_down().max(0.0) };
        }
        false
    };
    if settle(&mut b) {
        return Ok(b);
    }
    let earlier: Vec<usize> = (0..last).filter(|&o| b[o] > 0.0).collect();
    for o in earlier {
        let orig = b[o];
        for nudge in [1i32, -1, 2, -2, 3, -3] {
            let mut x = orig;
            for _ in 0..nudge.abs() {
                x = if nudge > 0 { x.next_up() } else { x.next_down() };
            }
            b[o] = x;
            if settle(&mut b) {
                return Ok(b);
            }
        }
        b[o] = orig;
    }
    Err(Error::NumericDomain(format!("expert budgets do not sum exactly to {n2}")))
}

/// Integer budgets by largest remainder (ties to the lower index), summing
/// to `round(n2)`.
pub fn allocate_expert_budget_integer(n2: f64, cluster_sizes: &[usize]) -> Result<Vec<u64>> {
    if cluster_sizes.iter().sum::<usize>() == 0 {
        return Err(Error::Infeasible("every cluster is empty".into()));
    }
    if !(n2.is_finite() && n2 >= 0.0) {
        return Err(Error::invalid("expert budget must be a nonnegative number"));
    }
    let weights: Vec<f64> = cluster_sizes.iter().map(|&s| s as f64).collect();
    Ok(largest_remainder(&weights, n2.round() as usize)
        .into_iter()
        .map(|v| v as u64)
        .collect())
}

/// Heavy-ball momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        OptimizerState {
            velocity: params
                .entries()
                .iter()
                .map(|e| {
                    if e.kind.is_trainable() {
                        vec![0.0; e.value.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
            step: 0,
        }
    }
}

/// Default exclusion: biases and normalisation parameters.
pub fn exclude_bias_and_norm(e: &ParamEntry) -> bool {
    e.kind.is_bias_or_norm()
}

/// One LARS step. Included tensors: `g = grad + wd * p`, trust ratio
/// `coef * |p| / |g|` (1 when either norm is 0), `v = m v + ratio * lr * g`,
/// `p -= v`. Excluded tensors: `v = m v + lr * grad`, `p -= v`.
pub fn lars_step(
    params: &mut ParamStore,
    grads: &Grads,
    opt: &mut OptimizerState,
    lr: f64,
    spec: &ScheduleSpec,
    exclude: impl Fn(&ParamEntry) -> bool,
) -> Result<()> {
    if opt.velocity.len() != params.len() || grads.tensors.len() != params.len() {
        return Err(Error::shape(params.len(), opt.velocity.len().min(grads.tensors.len())));
    }
    let m = spec.momentum;
    for ((e, g), v) in params
        .entries_mut()
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut opt.velocity)
    {
        if !e.kind.is_trainable() {
            continue;
        }
        if g.len() != e.value.len() || v.len() != e.value.len() {
            return Err(Error::shape(e.value.len(), g.len()));
        }
        if exclude(e) {
            for ((p, &gi), vi) in e.value.iter_mut().zip(g).zip(v.iter_mut()) {
                let nv = m * f64::from(*vi) + lr * f64::from(gi);
                *vi = nv as f32;
                *p = (f64::from(*p) - nv) as f32;
            }
            continue;
        }
        let wd = spec.weight_decay;
        let full: Vec<f64> = e
            .value
            .iter()
            .zip(g)
            .map(|(&p, &gi)| f64::from(gi) + wd * f64::from(p))
            .collect();
        let pn = e.value.iter().map(|&p| f64::from(p).powi(2)).sum::<f64>().sqrt();
        let gn = full.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ratio = if pn > 0.0 && gn > 0.0 { spec.trust_coefficient * pn / gn } else { 1.0 };
        for ((p, gi), vi) in e.value.iter_mut().zip(&full).zip(v.iter_mut()) {
            let nv = m * f64::from(*vi) + ratio * lr * gi;
            *vi = nv as f32;
            *p = (f64::from(*p) - nv) as f32;
        }
    }
    opt.step += 1;
    Ok(())
}

/// Per-image cost model of one network: forward FLOPs, backward multiplier
/// (backward = multiplier x forward) and the teacher forward FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub forward: f64,
    pub backward_multiplier: f64,
    pub teacher_forward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    /// Contrastive stage (base model, experts, or plain MoCLR) per image.
    pub contrastive: f64,
    /// Distillation stage per image.
    pub distillation: f64,
    /// Normalised stage weights `(n1, n2, n3) / (n1 + n2 + n3)`.
    pub weights: [f64; 3],
    pub weighted_average: f64,
}

pub fn flops_report(spec: &ScheduleSpec, cost: &CostModel) -> Result<FlopsReport> {
    let total = spec.n1 + spec.n2 + spec.n3;
    if total <= 0.0 {
        return Err(Error::invalid("schedule has no epochs"));
    }
    let views = 2.0;
    let contrastive = views * (cost.forward * (1.0 + cost.backward_multiplier) + cost.teacher_forward);
    // A base and an expert teacher forward per view instead of one momentum forward.
    let distillation = contrastive + views * cost.teacher_forward;
    let weights = [spec.n1 / total, spec.n2 / total, spec.n3 / total];
    Ok(FlopsReport {
        contrastive,
        distillation,
        weights,
        weighted_average: (weights[0] + weights[1]) * contrastive + weights[2] * distillation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamKind, StoreBuilder};
    use crate::rng::rng_from_seed;

    #[test]
    fn budgets_sum_exactly() {
        let mut rng = crate::rng::derive_rng(5, "budgets", 0);
        for _ in 0..2000 {
            let k = rand::Rng::gen_range(&mut rng, 1..=16);
            let sizes: Vec<usize> = (0..k).map(|_| rand::Rng::gen_range(&mut rng, 0..5000)).collect();
            if sizes.iter().all(|&s| s == 0) {
                continue;
            }
            let n2: f64 = rand::Rng::gen_range(&mut rng, 0.0..10_000.0);
            let b = allocate_expert_budget(n2, &sizes).unwrap();
            assert_eq!(b.iter().sum::<f64>(), n2, "{n2} {sizes:?}");
        }
    }

    #[test]
    fn budgets_are_proportional() {
        assert_eq!(allocate_expert_budget(1500.0, &[7; 5]).unwrap(), vec![300.0; 5]);
        assert_eq!(allocate_expert_budget(400.0, &[2, 1, 1]).unwrap(), vec![200.0, 100.0, 100.0]);
        assert_eq!(allocate_expert_budget_integer(100.0, &[1, 1, 1]).unwrap(), vec![34, 33, 33]);
        assert_eq!(allocate_expert_budget(10.0, &[0, 3, 0]).unwrap(), vec![0.0, 10.0, 0.0]);
        assert!(matches!(
            allocate_expert_budget(10.0, &[0, 0]),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn lr_endpoints_and_peak() {
        let spec = ScheduleSpec {
            base_lr: 0.3,
            batch_size: 4096,
            reference_size: 4096 * 10,
            warmup_epochs: 1.0,
            ..ScheduleSpec::default()
        };
        assert_eq!(spec.peak_lr(), 4.8);
        assert_eq!(lr_at(0, 100, &spec).unwrap(), 0.0);
        assert_eq!(lr_at(10, 100, &spec).unwrap(), 4.8);
        assert!(lr_at(100, 100, &spec).unwrap().abs() <= 1e-12 * 4.8);
        assert!(lr_at(5, 10, &spec).is_err());
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = lr_at(s, 100, &spec).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn short_stages_cap_warmup() {
        let spec = ScheduleSpec {
            batch_size: 64,
            reference_size: 640,
            warmup_epochs: 10.0,
            ..ScheduleSpec::default()
        };
        let st = spec.stage("expert-0", 3.0);
        assert_eq!((st.steps, st.warmup_steps), (30, 15));
        assert!(st.lr(30).unwrap().abs() < 1e-15);
        assert_eq!(spec.steps_for_epochs(2.55), 25);
    }

    fn store() -> ParamStore {
        let mut rng = rng_from_seed(1);
        let mut b = StoreBuilder::new(&mut rng);
        b.weight("w", vec![2], 1);
        b.constant("b", ParamKind::Bias, 1, 0.5);
        b.constant("rm", ParamKind::RunningMean, 1, 0.0);
        b.finish()
    }

    #[test]
    fn excluded_scalar_is_plain_sgd() {
        let mut p = store();
        let mut g = p.zero_grads();
        g.tensors[1][0] = 2.0;
        let mut opt = OptimizerState::new(&p);
        let spec = ScheduleSpec {
            momentum: 0.0,
            ..ScheduleSpec::default()
        };
        lars_step(&mut p, &g, &mut opt, 0.1, &spec, exclude_bias_and_norm).unwrap();
        assert!((p.value(1)[0] - 0.3).abs() < 1e-7);
        assert_eq!(p.value(2)[0], 0.0);
    }

    #[test]
    fn equal_norms_give_a_plain_sgd_step() {
        let mut p = store();
        p.entries_mut()[0].value = vec![3.0, 4.0];
        let mut g = p.zero_grads();
        g.tensors[0] = vec![0.0, 5.0];
        let mut opt = OptimizerState::new(&p);
        let spec = ScheduleSpec {
            weight_decay: 0.0,
            momentum: 0.0,
            trust_coefficient: 1.0,
            ..ScheduleSpec::default()
        };
        lars_step(&mut p, &g, &mut opt, 0.1, &spec, exclude_bias_and_norm).unwrap();
        assert_eq!(p.value(0), &[3.0, 3.5]);
    }

    #[test]
    fn trust_coefficient_scales_the_step() {
        let mut p = store();
        p.entries_mut()[0].value = vec![3.0, 4.0];
        let mut g = p.zero_grads();
        g.tensors[0] = vec![0.0, 5.0];
        let mut opt = OptimizerState::new(&p);
        let spec = ScheduleSpec {
            weight_decay: 0.0,
            momentum: 0.0,
            trust_coefficient: 1e-3,
            ..ScheduleSpec::default()
        };
        lars_step(&mut p, &g, &mut opt, 100.0, &spec, exclude_bias_and_norm).unwrap();
        assert!((p.value(0)[1] - 3.5).abs() < 1e-6);
    }

    #[test]
    fn two_step_worked_example() {
        // p = (3, 4), wd = 0.1, momentum 0.9, lr 0.5, grad (1, 0) both steps.
        let mut p = store();
        p.entries_mut()[0].value = vec![3.0, 4.0];
        let mut g = p.zero_grads();
        g.tensors[0] = vec![1.0, 0.0];
        let mut opt = OptimizerState::new(&p);
        let spec = ScheduleSpec {
            weight_decay: 0.1,
            momentum: 0.9,
            trust_coefficient: 1.0,
            ..ScheduleSpec::default()
        };
        let (mut pe, mut v) = ([3.0f64, 4.0], [0.0f64; 2]);
        for _ in 0..2 {
            lars_step(&mut p, &g, &mut opt, 0.5, &spec, exclude_bias_and_norm).unwrap();
            let gg = [1.0 + 0.1 * pe[0], 0.1 * pe[1]];
            let ratio = (pe[0] * pe[0] + pe[1] * pe[1]).sqrt() / (gg[0] * gg[0] + gg[1] * gg[1]).sqrt();
            for i in 0..2 {
                v[i] = 0.9 * v[i] + ratio * 0.5 * gg[i];
                pe[i] -= v[i];
            }
        }
        for i in 0..2 {
            assert!((f64::from(p.value(0)[i]) - pe[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn flops_weighting() {
        let spec = ScheduleSpec {
            n1: 1000.0,
            n2: 1500.0,
            n3: 500.0,
            ..ScheduleSpec::default()
        };
        let cost = CostModel {
            forward: 1.0,
            backward_multiplier: 2.0,
            teacher_forward: 1.0,
        };
        let r = flops_report(&spec, &cost).unwrap();
        assert!(r.distillation > r.contrastive);
        let delta = r.distillation - r.contrastive;
        assert!((r.weighted_average - (r.contrastive + delta / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn presets_match_published_rows() {
        let mut s = ScheduleSpec::default();
        SchedulePreset::Dnc3000.apply(&mut s);
        assert_eq!((s.n1, s.n2, s.n3, s.k), (1000.0, 1500.0, 500.0, 5));
        assert!(ScheduleSpec { k: 0, batch_size: 0, ..s }.violations("").len() == 2);
    }
}
