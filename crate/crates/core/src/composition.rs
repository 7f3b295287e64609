//! Multi-subject generation: one denoising branch per subject plus a
//! background branch, merged with instance masks after every step.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backend::{AttentionControl, BackendBundle, Segmenter};
use crate::lora::{Adaptation, LoraDelta};
use crate::losses::DiffusionLatent;
use crate::pipeline::{
    assemble_slots, initial_noise, sample, BranchRecord, ConditioningSource, GenerationConfig,
    GenerationTrace, PromptTemplate, SlotBinding, StepRecord,
};
use crate::training::{Environment, SubjectProfile};
use crate::{Error, Result, Tensor};

/// Largest per-pixel deviation from a unit mask sum that is accepted.
pub const PARTITION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchId {
    /// Zero-based subject index.
    Subject(usize),
    Background,
}

/// Which weights a branch runs with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelBinding {
    Base,
    /// The LoRA deltas of subject `i`.
    Subject(usize),
}

/// Per-subject masks followed by the background mask, at latent resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskSet {
    grid: [usize; 2],
    masks: Vec<Tensor>,
}

impl InstanceMaskSet {
    /// Accepts `subjects + 1` masks (background last) that already form a
    /// partition of unity.
    pub fn new(masks: Vec<Tensor>) -> Result<Self> {
        if masks.len() < 2 {
            return Err(Error::invalid("a mask set needs at least one subject and a background"));
        }
        let grid = match *masks[0].shape() {
            [h, w] => [h, w],
            ref other => return Err(Error::dim("mask", &[0, 0], other)),
        };
        let mut worst = (0usize, 0.0f64);
        for (i, m) in masks.iter().enumerate() {
            m.ensure_shape(&grid, "mask")?;
            if let Some(p) = m
                .data()
                .iter()
                .position(|v| !v.is_finite() || *v < -PARTITION_TOLERANCE || *v > 1.0 + PARTITION_TOLERANCE)
            {
                return Err(Error::invalid(format!(
                    "mask {i} value {} at pixel ({}, {}) outside [0, 1]",
                    m.data()[p],
                    p / grid[1],
                    p % grid[1]
                )));
            }
        }
        for p in 0..grid[0] * grid[1] {
            let sum: f64 = masks.iter().map(|m| m.data()[p]).sum();
            let dev = (sum - 1.0).abs();
            if dev > worst.1 {
                worst = (p, dev);
            }
        }
        if worst.1 > PARTITION_TOLERANCE {
            return Err(Error::invalid(format!(
                "masks do not sum to 1: worst pixel ({}, {}) deviates by {:e}",
                worst.0 / grid[1],
                worst.0 % grid[1],
                worst.1
            )));
        }
        Ok(Self { grid, masks })
    }

    /// Adds the background `max(0, 1 − Σ subjects)` and renormalizes each
    /// pixel to sum to one.
    pub fn from_subject_masks(subjects: Vec<Tensor>) -> Result<Self> {
        let Some(first) = subjects.first() else {
            return Err(Error::invalid("no subject masks"));
        };
        let grid = first.shape().to_vec();
        let mut masks: Vec<Tensor> = Vec::with_capacity(subjects.len() + 1);
        for m in subjects {
            m.ensure_shape(&grid, "subject mask")?;
            m.ensure_finite("subject mask")?;
            masks.push(m.map(|v| v.clamp(0.0, 1.0)));
        }
        let n = grid.iter().product::<usize>();
        let background = Tensor::from_fn(grid.clone(), |p| {
            let s: f64 = masks.iter().map(|m| m.data()[p]).sum();
            (1.0 - s).max(0.0)
        });
        masks.push(background);
        for p in 0..n {
            let sum: f64 = masks.iter().map(|m| m.data()[p]).sum();
            if sum != 1.0 {
                for m in masks.iter_mut() {
                    m.data_mut()[p] /= sum;
                }
            }
        }
        Self::new(masks)
    }

    pub fn grid(&self) -> [usize; 2] {
        self.grid
    }

    pub fn subject_count(&self) -> usize {
        self.masks.len() - 1
    }

    /// All masks, background last.
    pub fn masks(&self) -> &[Tensor] {
        &self.masks
    }

    pub fn mask(&self, branch: BranchId) -> Result<&Tensor> {
        match branch {
            BranchId::Background => Ok(self.masks.last().expect("non-empty")),
            BranchId::Subject(i) if i < self.subject_count() => Ok(&self.masks[i]),
            BranchId::Subject(i) => Err(Error::Lookup {
                kind: "subject mask",
                name: format!("{i}"),
            }),
        }
    }

    /// Largest per-pixel deviation of the mask sum from one.
    pub fn partition_error(&self) -> f64 {
        (0..self.grid[0] * self.grid[1])
            .map(|p| (self.masks.iter().map(|m| m.data()[p]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Area-average downsampling of an `[H, W]` map to `[h, w]`.
pub fn downsample_area(mask: &Tensor, grid: [usize; 2]) -> Result<Tensor> {
    let [hh, ww] = match *mask.shape() {
        [a, b] => [a, b],
        ref other => return Err(Error::dim("mask", &[0, 0], other)),
    };
    let [h, w] = grid;
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 {
        return Err(Error::invalid(format!(
            "mask {hh}×{ww} is not an integer multiple of the latent grid {h}×{w}"
        )));
    }
    let (fy, fx) = (hh / h, ww / w);
    let area = (fy * fx) as f64;
    Ok(Tensor::from_fn([h, w], |p| {
        let (i, j) = (p / w, p % w);
        let mut s = 0.0;
        for a in 0..fy {
            for b in 0..fx {
                s += mask.data()[(i * fy + a) * ww + j * fx + b];
            }
        }
        s / area
    }))
}

fn centroid_x(mask: &Tensor) -> f64 {
    let w = mask.shape()[1];
    let (mut num, mut den) = (0.0, 0.0);
    for (p, &v) in mask.data().iter().enumerate() {
        num += v * (p % w) as f64;
        den += v;
    }
    if den > 0.0 {
        num / den
    } else {
        f64::INFINITY
    }
}

/// Segments the layout image and binds the `n_subjects` largest instances
/// to subject slots left to right.
pub fn derive_masks(
    layout_trace: &GenerationTrace,
    n_subjects: usize,
    segmenter: &dyn Segmenter,
    latent_grid: [usize; 2],
) -> Result<InstanceMaskSet> {
    if n_subjects == 0 {
        return Err(Error::invalid("n_subjects must be ≥ 1"));
    }
    let found = segmenter.segment(&layout_trace.image)?;
    if found.len() < n_subjects {
        return Err(Error::InsufficientInstances {
            needed: n_subjects,
            found: found.len(),
        });
    }
    let mut ranked: Vec<(f64, Tensor)> = found
        .into_iter()
        .map(|m| (m.data().iter().sum::<f64>(), m))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    ranked.truncate(n_subjects);
    let mut chosen: Vec<Tensor> = ranked.into_iter().map(|(_, m)| m).collect();
    chosen.sort_by(|a, b| centroid_x(a).total_cmp(&centroid_x(b)));
    let small = chosen
        .iter()
        .map(|m| downsample_area(m, latent_grid))
        .collect::<Result<Vec<_>>>()?;
    InstanceMaskSet::from_subject_masks(small)
}

/// One branch's latent at a barrier.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchState {
    pub branch: BranchId,
    pub latent: DiffusionLatent,
    pub binding: ModelBinding,
}

/// `Σᵢ maskᵢ ⊙ latentᵢ` in branch order.
pub fn merge_latents(branches: &[BranchState], masks: &InstanceMaskSet) -> Result<DiffusionLatent> {
    let Some(first) = branches.first() else {
        return Err(Error::invalid("no branches to merge"));
    };
    let t = first.latent.timestep;
    if let Some(b) = branches.iter().find(|b| b.latent.timestep != t) {
        return Err(Error::Synchronization(format!(
            "branch {:?} is at timestep {} while {:?} is at {t}",
            b.branch, b.latent.timestep, first.branch
        )));
    }
    let [h, w] = masks.grid();
    let shape = first.latent.data.shape().to_vec();
    if shape.len() != 3 || shape[0] != h || shape[1] != w {
        return Err(Error::dim("branch latent", &[h, w, 0], &shape));
    }
    let c = shape[2];
    let mut out: Option<Vec<f64>> = None;
    for b in branches {
        b.latent.data.ensure_shape(&shape, "branch latent")?;
        let m = masks.mask(b.branch)?.data();
        let x = b.latent.data.data();
        match out.as_mut() {
            None => out = Some(x.iter().enumerate().map(|(k, v)| m[k / c] * v).collect()),
            Some(acc) => {
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += m[k / c] * x[k];
                }
            }
        }
    }
    Ok(DiffusionLatent::new(
        Tensor::new(shape, out.expect("at least one branch"))?,
        t,
    ))
}

/// Executes the per-branch work of one step. Results come back in branch
/// order whatever the execution order.
pub trait BranchRunner: Sync {
    fn run_all(&self, n: usize, job: &(dyn Fn(usize) -> Result<Tensor> + Sync)) -> Vec<Result<Tensor>>;
}

/// Runs branches one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct SequentialRunner;

impl BranchRunner for SequentialRunner {
    fn run_all(&self, n: usize, job: &(dyn Fn(usize) -> Result<Tensor> + Sync)) -> Vec<Result<Tensor>> {
        (0..n).map(job).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionPlan {
    pub subjects: Vec<SubjectProfile>,
    pub template: PromptTemplate,
    pub masks: InstanceMaskSet,
    pub cfg: GenerationConfig,
}

impl CompositionPlan {
    pub fn validate(&self) -> Result<()> {
        let n = self.subjects.len();
        if n == 0 {
            return Err(Error::invalid("composition needs at least one subject"));
        }
        if self.template.slot_count() != n {
            return Err(Error::invalid(format!(
                "template has {} slot(s) but {n} subject(s) were given",
                self.template.slot_count()
            )));
        }
        if self.masks.subject_count() != n {
            return Err(Error::invalid(format!(
                "{} mask(s) for {n} subject(s) plus background",
                self.masks.masks().len()
            )));
        }
        let fp = self.subjects[0].config_fingerprint();
        if let Some(p) = self.subjects.iter().find(|p| p.config_fingerprint() != fp) {
            return Err(Error::Compatibility {
                expected: fp.into(),
                found: p.config_fingerprint().into(),
            });
        }
        Ok(())
    }
}

/// Placeholder-only sample used to lay out an `n`-subject scene.
pub fn layout_generation(template: &PromptTemplate, cfg: &GenerationConfig, env: &Environment) -> Result<GenerationTrace> {
    let slots: Vec<SlotBinding<'_>> = (0..template.slot_count()).map(|_| SlotBinding::Placeholder).collect();
    sample(env.bundle(), template, &slots, &[], 0.0, cfg, None)
}

/// Layout pass followed by [`derive_masks`].
pub fn auto_masks(template: &PromptTemplate, cfg: &GenerationConfig, env: &Environment) -> Result<InstanceMaskSet> {
    let layout = layout_generation(template, cfg, env)?;
    let [h, w, _] = env.bundle().latent_shape();
    derive_masks(&layout, template.slot_count(), &*env.bundle().segmenter, [h, w])
}

struct BranchSpec<'a> {
    id: BranchId,
    slots: Vec<SlotBinding<'a>>,
    lora: &'a [LoraDelta],
    alpha: f64,
}

/// Runs `N + 1` branches from the same noise, merging after every step.
pub fn compose(plan: &CompositionPlan, env: &Environment, runner: &dyn BranchRunner) -> Result<GenerationTrace> {
    plan.validate()?;
    for p in &plan.subjects {
        env.check_profile(p)?;
    }
    let bundle: &BackendBundle = env.bundle();
    let timesteps = bundle.timesteps();
    plan.cfg.validate(timesteps)?;
    let [h, w, _] = bundle.latent_shape();
    if plan.masks.grid() != [h, w] {
        return Err(Error::dim("mask grid", &[h, w], &plan.masks.grid()));
    }
    let n = plan.subjects.len();
    let mut specs: Vec<BranchSpec<'_>> = (0..n)
        .map(|i| BranchSpec {
            id: BranchId::Subject(i),
            slots: (0..n)
                .map(|j| {
                    if j == i {
                        SlotBinding::Learned(plan.subjects[i].token_schedule())
                    } else {
                        SlotBinding::Placeholder
                    }
                })
                .collect(),
            lora: plan.subjects[i].lora(),
            alpha: plan.subjects[i].alpha(),
        })
        .collect();
    specs.push(BranchSpec {
        id: BranchId::Background,
        slots: (0..n).map(|_| SlotBinding::Placeholder).collect(),
        lora: &[],
        alpha: 0.0,
    });

    let ts = bundle.schedule.sampling_timesteps(plan.cfg.steps)?;
    let mut x = initial_noise(bundle.latent_shape(), plan.cfg.seed);
    let mut records = Vec::with_capacity(ts.len());
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let input_checksum = x.checksum();
        let input = &x;
        let job = |i: usize| -> Result<Tensor> {
            let spec = &specs[i];
            let (cond, _) = assemble_slots(
                &plan.template,
                &spec.slots,
                t,
                timesteps,
                plan.cfg.tau,
                &*bundle.text_encoder,
            )?;
            let adaptation = Adaptation::new(spec.lora, spec.alpha);
            let out = bundle
                .denoiser
                .predict(input, t, &cond, &adaptation, AttentionControl::Compute)?;
            let next = bundle.schedule.ddim_step(input, &out.eps, t, t_prev)?;
            next.ensure_finite("branch latent")?;
            Ok(next)
        };
        let outputs = runner.run_all(specs.len(), &job);
        if outputs.len() != specs.len() {
            return Err(Error::Synchronization(format!(
                "runner returned {} results for {} branches",
                outputs.len(),
                specs.len()
            ))
            .at_step(k));
        }
        let mut states = Vec::with_capacity(specs.len());
        let mut branch_records = Vec::with_capacity(specs.len());
        for (spec, out) in specs.iter().zip(outputs) {
            let latent = out.map_err(|e| e.at_step(k))?;
            let source = if spec.slots.iter().any(|s| matches!(s, SlotBinding::Learned(_))) {
                crate::pipeline::conditioning_source(t, timesteps, plan.cfg.tau)
            } else {
                ConditioningSource::Placeholder
            };
            branch_records.push(BranchRecord {
                branch: spec.id,
                timestep: t,
                conditioning_source: source,
                input_checksum,
                output_checksum: latent.checksum(),
            });
            states.push(BranchState {
                branch: spec.id,
                latent: DiffusionLatent::new(latent, t_prev),
                binding: match spec.id {
                    BranchId::Subject(i) => ModelBinding::Subject(i),
                    BranchId::Background => ModelBinding::Base,
                },
            });
        }
        let merged = merge_latents(&states, &plan.masks).map_err(|e| e.at_step(k))?;
        x = merged.data;
        records.push(StepRecord {
            t,
            t_prev,
            conditioning_source: branch_records[0].conditioning_source,
            latent_checksum: x.checksum(),
            branches: branch_records,
        });
    }
    let image = bundle.image_codec.decode(&x)?;
    Ok(GenerationTrace {
        seed: plan.cfg.seed,
        steps: records,
        self_attention: None,
        final_latent: x,
        image,
    })
}

/// Checks the barrier evidence of a composition trace: every step has one
/// record per branch, all at that step's timestep, all fed the previous
/// merged latent.
pub fn verify_barriers(trace: &GenerationTrace, branches: usize, seed_checksum: u64) -> Result<()> {
    let mut expected_input = seed_checksum;
    for (k, step) in trace.steps.iter().enumerate() {
        if step.branches.len() != branches {
            return Err(Error::Synchronization(format!(
                "step {k} has {} branch records, expected {branches}",
                step.branches.len()
            )));
        }
        for b in &step.branches {
            if b.timestep != step.t {
                return Err(Error::Synchronization(format!(
                    "step {k}: branch {:?} ran timestep {} instead of {}",
                    b.branch, b.timestep, step.t
                )));
            }
            if b.input_checksum != expected_input {
                return Err(Error::Synchronization(format!(
                    "step {k}: branch {:?} did not start from the merged latent",
                    b.branch
                )));
            }
        }
        expected_input = step.latent_checksum;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn halves() -> InstanceMaskSet {
        let left = Tensor::from_fn([4, 4], |p| if p % 4 < 2 { 1.0 } else { 0.0 });
        let right = left.map(|v| 1.0 - v);
        InstanceMaskSet::from_subject_masks(vec![left, right]).unwrap()
    }

    #[test]
    fn half_masks_have_empty_background() {
        let m = halves();
        assert_eq!(m.masks().len(), 3);
        assert!(m.mask(BranchId::Background).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(m.partition_error(), 0.0);
    }

    #[test]
    fn rejects_bad_partition() {
        let a = Tensor::filled([2, 2], 0.6);
        let b = Tensor::filled([2, 2], 0.6);
        let err = InstanceMaskSet::new(vec![a, b]).unwrap_err();
        assert!(format!("{err}").contains("worst pixel"));
    }

    #[test]
    fn merge_requires_same_timestep() {
        let m = halves();
        let s = |b, t| BranchState {
            branch: b,
            latent: DiffusionLatent::new(Tensor::zeros([4, 4, 2]), t),
            binding: ModelBinding::Base,
        };
        let err = merge_latents(&[s(BranchId::Subject(0), 5), s(BranchId::Subject(1), 4)], &m).unwrap_err();
        assert!(matches!(err, Error::Synchronization(_)));
    }

    #[test]
    fn downsampling_averages_blocks() {
        let m = Tensor::from_fn([4, 4], |p| (p % 4) as f64);
        let d = downsample_area(&m, [2, 2]).unwrap();
        assert_eq!(d.data(), &[0.5, 2.5, 0.5, 2.5]);
        assert!(downsample_area(&m, [3, 3]).is_err());
    }
}
