//! The contrastive and distillation training loops.

use std::collections::BTreeMap;

use log::debug;
use ndarray::Array2;
use rand::Rng as _;

use crate::augment::{eval_view, make_view, AugmentDistribution};
use crate::config::{DistillTargets, TeacherInput};
use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::losses::{distill_loss_grad, moclr_loss_grad, regression_loss_grad};
use crate::model::{images_to_act, init_model, tau_schedule, ModelConfig, ModelState};
use crate::nn::{Act, Grads, Mode, ParamStore, StatUpdates};
use crate::rng::{derive_rng, Rng};
use crate::schedule::{exclude_bias_and_norm, lars_step, OptimizerState, ScheduleSpec, StagePlan};

/// Everything a training loop needs besides data, budget and seed.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub spec: ScheduleSpec,
    /// The two view distributions, T and T'.
    pub views: (AugmentDistribution, AugmentDistribution),
    /// Use the online network for both branches and skip the momentum update.
    pub simclr: bool,
}

impl TrainSettings {
    pub fn view_side(&self) -> usize {
        self.views.0.output_size.0
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub losses: Vec<f64>,
    /// Wall time of the loop.
    pub seconds: f64,
}

/// `[d][n]` activation to an `n x d` f64 matrix.
pub(crate) fn act_to_array(a: &Act) -> Array2<f64> {
    let (d, n) = (a.channels, a.n);
    Array2::from_shape_fn((n, d), |(i, j)| f64::from(a.data[j * n + i]))
}

pub(crate) fn array_to_act(m: &Array2<f64>) -> Act {
    let (n, d) = m.dim();
    let mut data = vec![0.0f32; n * d];
    for ((i, j), v) in m.indexed_iter() {
        data[j * n + i] = *v as f32;
    }
    Act::dense(d, n, data)
}

fn sample_batch(len: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    if len >= batch {
        rand::seq::index::sample(rng, len, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// The two augmented views of each sampled item; every (step, slot, view)
/// has its own generator.
fn make_views(d: &Dataset, idx: &[usize], s: &TrainSettings, seed: u64, step: u64) -> [Vec<Image>; 2] {
    let b = idx.len() as u64;
    let mut out = [Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len())];
    for (j, &i) in idx.iter().enumerate() {
        let slot = step * b + j as u64;
        let img = &d.get(i).image;
        out[0].push(make_view(img, &s.views.0, &mut derive_rng(seed, "view-t", slot)));
        out[1].push(make_view(img, &s.views.1, &mut derive_rng(seed, "view-t-prime", slot)));
    }
    out
}

fn batch_act(images: &[Image]) -> Result<Act> {
    let refs: Vec<&Image> = images.iter().collect();
    images_to_act(&refs)
}

fn check_finite(step: u64, loss: f64, grads: &[&Grads]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NumericDivergence {
            step: step as usize,
            detail: format!("loss is {loss}"),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericDivergence {
            step: step as usize,
            detail: "non-finite gradient".into(),
        });
    }
    Ok(())
}

/// Contrastive training for `stage.steps` steps, from `init` or from scratch.
pub fn train_contrastive(
    d: &Dataset,
    s: &TrainSettings,
    stage: &StagePlan,
    init: Option<ModelState>,
    seed: u64,
) -> Result<TrainOutcome> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if stage.steps == 0 {
        return Err(Error::invalid(format!("stage `{}` has no steps", stage.name)));
    }
    let mut m = match init {
        Some(m) => m,
        None => init_model(&s.model, 0, &mut derive_rng(seed, "init", 0))?,
    };
    let mut opt = OptimizerState::new(&m.online);
    let started = std::time::Instant::now();
    let mut losses = Vec::with_capacity(stage.steps as usize);
    let t = s.spec.temperature;
    for step in 0..stage.steps {
        let idx = sample_batch(d.len(), s.spec.batch_size, &mut derive_rng(seed, "batch", step));
        let [v, vp] = make_views(d, &idx, s, seed, step);
        let (xv, xvp) = (batch_act(&v)?, batch_act(&vp)?);

        let mut stats = StatUpdates::default();
        let (ov, tape_v) = m.arch.forward(&m.online, &xv, Mode::Train, &mut stats);
        let (ovp, tape_vp) = m.arch.forward(&m.online, &xvp, Mode::Train, &mut stats);
        let (z_v, z_vp) = (act_to_array(&ov.z), act_to_array(&ovp.z));

        let (loss, dz_v, dz_vp) = if s.simclr {
            let g = moclr_loss_grad(z_v.view(), z_vp.view(), z_vp.view(), z_v.view(), t)?;
            (g.loss, g.dz_v + g.dzp_v, g.dz_vp + g.dzp_vp)
        } else {
            let mut mstats = StatUpdates::default();
            let (pv, _) = m.arch.forward(&m.momentum, &xv, Mode::Train, &mut mstats);
            let (pvp, _) = m.arch.forward(&m.momentum, &xvp, Mode::Train, &mut mstats);
            mstats.commit(&mut m.momentum);
            let (zp_v, zp_vp) = (act_to_array(&pv.z), act_to_array(&pvp.z));
            let g = moclr_loss_grad(z_v.view(), zp_vp.view(), z_vp.view(), zp_v.view(), t)?;
            (g.loss, g.dz_v, g.dz_vp)
        };

        let mut grads = m.online.zero_grads();
        m.arch.backward(&m.online, &tape_v, &array_to_act(&dz_v), &mut grads);
        m.arch.backward(&m.online, &tape_vp, &array_to_act(&dz_vp), &mut grads);
        check_finite(step, loss, &[&grads])?;
        stats.commit(&mut m.online);

        let lr = stage.lr(step)?;
        lars_step(&mut m.online, &grads, &mut opt, lr, &s.spec, exclude_bias_and_norm)?;
        if s.simclr {
            m.momentum = m.online.clone();
        } else {
            m.ema_update(tau_schedule(step + 1, stage.steps, s.spec.tau_base)?);
        }
        m.step += 1;
        losses.push(loss);
        debug!("{} step {step}: loss {loss:.5} lr {lr:.4}", stage.name);
    }
    Ok(TrainOutcome {
        state: m,
        losses,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Momentum-network projections of `images` in evaluation mode.
fn teacher_projection(t: &ModelState, x: &Act) -> Act {
    t.arch
        .forward(&t.momentum, x, Mode::Eval, &mut StatUpdates::default())
        .0
        .z
}

/// Teacher projections for the items of a batch: base rows and expert rows.
struct TeacherTargets {
    base: Array2<f64>,
    expert: Array2<f64>,
}

fn teacher_targets_for(
    base: &ModelState,
    experts: &[&ModelState],
    routes: &[usize],
    x: &Act,
    images: &[Image],
) -> Result<TeacherTargets> {
    let base_z = act_to_array(&teacher_projection(base, x));
    let mut expert_z = Array2::<f64>::zeros(base_z.dim());
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &k) in routes.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    for (k, rows) in groups {
        let sub: Vec<&Image> = rows.iter().map(|&i| &images[i]).collect();
        let z = act_to_array(&teacher_projection(experts[k], &images_to_act(&sub)?));
        for (r, &i) in rows.iter().enumerate() {
            expert_z.row_mut(i).assign(&z.row(r));
        }
    }
    Ok(TeacherTargets {
        base: base_z,
        expert: expert_z,
    })
}

/// Center-crop teacher projections of every item, computed once.
fn cache_teacher_targets(
    d: &Dataset,
    base: &ModelState,
    experts: &[&ModelState],
    labels: &[usize],
    side: usize,
) -> Result<TeacherTargets> {
    let dim = base.arch.config().head.output_dim;
    let mut all = TeacherTargets {
        base: Array2::zeros((d.len(), dim)),
        expert: Array2::zeros((d.len(), dim)),
    };
    let idx: Vec<usize> = (0..d.len()).collect();
    for chunk in idx.chunks(128) {
        let images: Vec<Image> = chunk.iter().map(|&i| eval_view(&d.get(i).image, side)).collect();
        let x = batch_act(&images)?;
        let routes: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let t = teacher_targets_for(base, experts, &routes, &x, &images)?;
        for (r, &i) in chunk.iter().enumerate() {
            all.base.row_mut(i).assign(&t.base.row(r));
            all.expert.row_mut(i).assign(&t.expert.row(r));
        }
    }
    Ok(all)
}

/// Train a fresh student with `K + 1` regressors to predict the base and
/// the per-item expert projections.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    base: &ModelState,
    experts: &[Option<ModelState>],
    labels: &[usize],
    d: &Dataset,
    s: &TrainSettings,
    teacher_input: TeacherInput,
    targets: DistillTargets,
    stage: &StagePlan,
    seed: u64,
) -> Result<TrainOutcome> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if labels.len() != d.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: d.len(),
        });
    }
    if stage.steps == 0 {
        return Err(Error::invalid(format!("stage `{}` has no steps", stage.name)));
    }
    let mut teachers: Vec<&ModelState> = Vec::with_capacity(experts.len());
    for (k, e) in experts.iter().enumerate() {
        match e {
            Some(e) => teachers.push(e),
            // Placeholder for clusters without items; never routed to.
            None => teachers.push(base),
        }
        if e.is_none() && labels.contains(&k) {
            return Err(Error::Prerequisite(format!("no expert for cluster {k}")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= experts.len()) {
        return Err(Error::Prerequisite(format!("no expert for cluster {bad}")));
    }

    let k = experts.len();
    let mut m = init_model(&s.model, k + 1, &mut derive_rng(seed, "init", 0))?;
    let mut opt = OptimizerState::new(&m.online);
    let mut reg_opt: Vec<OptimizerState> = m.regressors.iter().map(OptimizerState::new).collect();
    let cache = match teacher_input {
        TeacherInput::CenterCrop => Some(cache_teacher_targets(d, base, &teachers, labels, s.view_side())?),
        TeacherInput::Augmented => None,
    };

    let started = std::time::Instant::now();
    let mut losses = Vec::with_capacity(stage.steps as usize);
    for step in 0..stage.steps {
        let idx = sample_batch(d.len(), s.spec.batch_size, &mut derive_rng(seed, "batch", step));
        let routes: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let present: Vec<usize> = {
            let mut p = routes.clone();
            p.sort_unstable();
            p.dedup();
            p
        };
        let views = make_views(d, &idx, s, seed, step);

        let mut grads = m.online.zero_grads();
        let mut reg_grads: Vec<Grads> = m.regressors.iter().map(ParamStore::zero_grads).collect();
        let mut stats = StatUpdates::default();
        let mut reg_stats: Vec<StatUpdates> = (0..=k).map(|_| StatUpdates::default()).collect();
        let mut loss = 0.0;
        for images in &views {
            let x = batch_act(images)?;
            let (out, tape) = m.arch.forward(&m.online, &x, Mode::Train, &mut stats);
            let tgt = match &cache {
                Some(c) => TeacherTargets {
                    base: c.base.select(ndarray::Axis(0), &idx),
                    expert: c.expert.select(ndarray::Axis(0), &idx),
                },
                None => teacher_targets_for(base, &teachers, &routes, &x, images)?,
            };

            let (pb, tape_b) = m.arch.regress_forward(&m.regressors[0], &out.z, Mode::Train, &mut reg_stats[0]);
            let pb = act_to_array(&pb);
            let mut pk = Array2::<f64>::zeros(pb.dim());
            let mut expert_tapes = Vec::with_capacity(present.len());
            for &c in &present {
                let (p, tape_c) =
                    m.arch
                        .regress_forward(&m.regressors[c + 1], &out.z, Mode::Train, &mut reg_stats[c + 1]);
                let p = act_to_array(&p);
                for (i, _) in routes.iter().enumerate().filter(|(_, &r)| r == c) {
                    pk.row_mut(i).assign(&p.row(i));
                }
                expert_tapes.push((c, tape_c));
            }

            let (l, dpb, dpk) = match targets {
                DistillTargets::Both => {
                    let g = distill_loss_grad(pb.view(), pk.view(), tgt.base.view(), tgt.expert.view())?;
                    (g.loss, Some(g.d_pred_base), Some(g.d_pred_expert))
                }
                DistillTargets::BaseOnly => {
                    let (l, dp, _) = regression_loss_grad(pb.view(), tgt.base.view())?;
                    (l, Some(dp), None)
                }
                DistillTargets::ExpertsOnly => {
                    let (l, dp, _) = regression_loss_grad(pk.view(), tgt.expert.view())?;
                    (l, None, Some(dp))
                }
            };
            // The two views' losses are averaged.
            loss += 0.5 * l;
            let mut dz = Act::zeros(out.z.channels, out.z.n, 1, 1);
            if let Some(dpb) = dpb {
                let d = array_to_act(&(dpb * 0.5));
                dz.add_assign(&m.arch.regress_backward(&m.regressors[0], &tape_b, &d, &mut reg_grads[0]));
            }
            if let Some(dpk) = dpk {
                for (c, tape_c) in &expert_tapes {
                    let mut rows = Array2::<f64>::zeros(dpk.dim());
                    for (i, _) in routes.iter().enumerate().filter(|(_, &r)| r == *c) {
                        rows.row_mut(i).assign(&dpk.row(i));
                    }
                    let d = array_to_act(&(rows * 0.5));
                    dz.add_assign(&m.arch.regress_backward(
                        &m.regressors[c + 1],
                        tape_c,
                        &d,
                        &mut reg_grads[c + 1],
                    ));
                }
            }
            m.arch.backward(&m.online, &tape, &dz, &mut grads);
        }
        let mut all: Vec<&Grads> = vec![&grads];
        all.extend(reg_grads.iter());
        check_finite(step, loss, &all)?;
        stats.commit(&mut m.online);
        for (st, r) in reg_stats.into_iter().zip(m.regressors.iter_mut()) {
            st.commit(r);
        }
        let lr = stage.lr(step)?;
        lars_step(&mut m.online, &grads, &mut opt, lr, &s.spec, exclude_bias_and_norm)?;
        for ((r, g), o) in m.regressors.iter_mut().zip(&reg_grads).zip(&mut reg_opt) {
            lars_step(r, g, o, lr, &s.spec, exclude_bias_and_norm)?;
        }
        m.step += 1;
        losses.push(loss);
        debug!("{} step {step}: loss {loss:.5} lr {lr:.4}", stage.name);
    }
    // The student has no momentum branch; keep the copy in sync for evaluation.
    m.momentum = m.online.clone();
    Ok(TrainOutcome {
        state: m,
        losses,
        seconds: started.elapsed().as_secs_f64(),
    })
}
