use std::path::Path;

use pc_core::adaptor::{AdaptorConfig, AdaptorWeights, TokenEmbeddingPair, TokenEmbeddingSchedule};
use pc_core::composition::InstanceMaskSet;
use pc_core::latent::{DirectionCatalog, EditDirection, Provenance, SourceTag, WPlusLatent, WPlusShape};
use pc_core::lora::LoraDelta;
use pc_core::training::{ProfileParts, SubjectProfile};
use pc_core::Tensor;
use serde::{Deserialize, Serialize};

use super::Container;
use crate::{PcError, PcResult};

pub const KIND_PROFILE: &str = "subject_profile";
pub const KIND_WEIGHTS: &str = "adaptor_weights";
pub const KIND_CATALOG: &str = "direction_catalog";
pub const KIND_MASKS: &str = "instance_masks";

#[derive(Serialize, Deserialize)]
struct LoraMeta {
    target: String,
    rank: usize,
}

pub fn profile_to_container(p: &SubjectProfile) -> PcResult<Container> {
    let mut c = Container::new(KIND_PROFILE);
    let shape = p.w().shape();
    let sched = p.token_schedule();
    c.set_meta("subject_id", p.subject_id())?;
    c.set_meta("config_fingerprint", p.config_fingerprint())?;
    c.set_meta("alpha", p.alpha())?;
    c.set_meta("T", sched.len())?;
    c.set_meta("token_dim", sched.token_dim())?;
    c.set_meta("created_at", p.created_at())?;
    c.set_meta("w_shape", shape)?;
    c.set_meta("w_source", p.w().source_tag())?;
    let lora: Vec<LoraMeta> = p
        .lora()
        .iter()
        .map(|d| LoraMeta {
            target: d.target().to_owned(),
            rank: d.rank(),
        })
        .collect();
    c.set_meta("lora", lora)?;
    c.set_meta("adaptor_config", p.adaptor().map(|a| a.config().clone()))?;

    c.insert("w", Tensor::new([shape.layers, shape.dims], p.w().styles().to_vec())?);
    let (t, d) = (sched.len(), sched.token_dim());
    let stack = |f: fn(&TokenEmbeddingPair) -> &Vec<f64>| -> PcResult<Tensor> {
        let data = sched.pairs().iter().flat_map(|pair| f(pair).iter().copied()).collect();
        Ok(Tensor::new([t, d], data)?)
    };
    c.insert("tokens.v1", stack(|p| &p.v1)?);
    c.insert("tokens.v2", stack(|p| &p.v2)?);
    for delta in p.lora() {
        c.insert(format!("lora.{}.a", delta.target()), delta.a());
        c.insert(format!("lora.{}.b", delta.target()), delta.b());
    }
    if let Some(a) = p.adaptor() {
        for (name, t) in a.named_tensors() {
            c.insert(format!("adaptor.{name}"), t);
        }
    }
    if let Some(img) = p.source_image() {
        c.insert("source_image", img.clone());
    }
    Ok(c)
}

pub fn profile_from_container(c: &Container) -> PcResult<SubjectProfile> {
    expect_kind(c, KIND_PROFILE)?;
    let shape: WPlusShape = c.meta_value("w_shape")?;
    let source: SourceTag = c.meta_value("w_source")?;
    let w = WPlusLatent::new(shape, c.tensor("w")?.data().to_vec(), source)?;
    let t: usize = c.meta_value("T")?;
    let d: usize = c.meta_value("token_dim")?;
    let v1 = c.tensor("tokens.v1")?;
    let v2 = c.tensor("tokens.v2")?;
    v1.ensure_shape(&[t, d], "tokens.v1")?;
    v2.ensure_shape(&[t, d], "tokens.v2")?;
    let pairs = (0..t)
        .map(|i| TokenEmbeddingPair {
            v1: v1.data()[i * d..(i + 1) * d].to_vec(),
            v2: v2.data()[i * d..(i + 1) * d].to_vec(),
            timestep: i + 1,
        })
        .collect();
    let token_schedule = TokenEmbeddingSchedule::new(pairs)?;

    let lora_meta: Vec<LoraMeta> = c.meta_value("lora")?;
    let mut lora = Vec::with_capacity(lora_meta.len());
    for m in lora_meta {
        let a = c.tensor(&format!("lora.{}.a", m.target))?.clone();
        let b = c.tensor(&format!("lora.{}.b", m.target))?.clone();
        let delta = LoraDelta::new(m.target.clone(), a, b)?;
        if delta.rank() != m.rank {
            return Err(PcError::format(
                c.kind(),
                format!("LoRA '{}' has rank {}, manifest says {}", m.target, delta.rank(), m.rank),
            ));
        }
        lora.push(delta);
    }
    let adaptor = match c.meta_opt::<AdaptorConfig>("adaptor_config")? {
        Some(cfg) => Some(AdaptorWeights::from_named_tensors(&cfg, &c.tensors_with_prefix("adaptor."))?),
        None => None,
    };
    let source_image = c.tensors().get("source_image").cloned();
    Ok(SubjectProfile::from_parts(ProfileParts {
        subject_id: c.meta_value("subject_id")?,
        w,
        token_schedule,
        lora,
        alpha: c.meta_value("alpha")?,
        created_at: c.meta_value("created_at")?,
        config_fingerprint: c.meta_value("config_fingerprint")?,
        adaptor,
        source_image,
    })?)
}

pub fn weights_to_container(w: &AdaptorWeights) -> PcResult<Container> {
    let mut c = Container::new(KIND_WEIGHTS);
    c.set_meta("adaptor_config", w.config())?;
    c.set_meta("num_parameters", w.num_parameters())?;
    for (name, t) in w.named_tensors() {
        c.insert(name, t);
    }
    Ok(c)
}

pub fn weights_from_container(c: &Container) -> PcResult<AdaptorWeights> {
    expect_kind(c, KIND_WEIGHTS)?;
    let cfg: AdaptorConfig = c.meta_value("adaptor_config")?;
    Ok(AdaptorWeights::from_named_tensors(&cfg, c.tensors())?)
}

#[derive(Serialize, Deserialize)]
struct DirectionMeta {
    name: String,
    shape: WPlusShape,
    num_pairs: usize,
    provenance: Provenance,
}

pub fn catalog_to_container(catalog: &DirectionCatalog) -> PcResult<Container> {
    let mut c = Container::new(KIND_CATALOG);
    let mut entries = Vec::with_capacity(catalog.len());
    for d in catalog.iter() {
        let s = d.shape();
        entries.push(DirectionMeta {
            name: d.name().to_owned(),
            shape: s,
            num_pairs: d.num_pairs(),
            provenance: d.provenance(),
        });
        c.insert(format!("direction.{}", d.name()), Tensor::new([s.layers, s.dims], d.delta().to_vec())?);
    }
    c.set_meta("directions", entries)?;
    Ok(c)
}

pub fn catalog_from_container(c: &Container) -> PcResult<DirectionCatalog> {
    expect_kind(c, KIND_CATALOG)?;
    let entries: Vec<DirectionMeta> = c.meta_value("directions")?;
    let mut catalog = DirectionCatalog::new();
    for e in entries {
        let t = c.tensor(&format!("direction.{}", e.name))?;
        t.ensure_shape(&e.shape.as_array(), "direction")?;
        catalog.insert(EditDirection::new(
            e.name,
            e.shape,
            t.data().to_vec(),
            e.provenance,
            e.num_pairs,
        )?)?;
    }
    Ok(catalog)
}

/// Branch names in merge order: `subject_0 .. subject_{n-1}`, `background`.
pub fn branch_names(subjects: usize) -> Vec<String> {
    (0..subjects)
        .map(|i| format!("subject_{i}"))
        .chain(std::iter::once("background".to_owned()))
        .collect()
}

pub fn masks_to_container(masks: &InstanceMaskSet) -> PcResult<Container> {
    let mut c = Container::new(KIND_MASKS);
    let names = branch_names(masks.subject_count());
    c.set_meta("grid", masks.grid())?;
    c.set_meta("branches", &names)?;
    for (name, m) in names.iter().zip(masks.masks()) {
        c.insert(format!("mask.{name}"), m.clone());
    }
    Ok(c)
}

pub fn masks_from_container(c: &Container) -> PcResult<InstanceMaskSet> {
    expect_kind(c, KIND_MASKS)?;
    let names: Vec<String> = c.meta_value("branches")?;
    let grid: [usize; 2] = c.meta_value("grid")?;
    if names.len() < 2 || names != branch_names(names.len() - 1) {
        return Err(PcError::format(c.kind(), format!("unexpected branch list {names:?}")));
    }
    let masks = names
        .iter()
        .map(|n| {
            let m = c.tensor(&format!("mask.{n}"))?;
            m.ensure_shape(&grid, "mask")?;
            Ok(m.clone())
        })
        .collect::<PcResult<Vec<_>>>()?;
    Ok(InstanceMaskSet::new(masks)?)
}

fn expect_kind(c: &Container, kind: &str) -> PcResult<()> {
    if c.kind() != kind {
        return Err(PcError::format(c.kind(), format!("expected a '{kind}' container")));
    }
    Ok(())
}

pub fn write_profile(p: &SubjectProfile, path: &Path) -> PcResult<()> {
    profile_to_container(p)?.write(path)
}

pub fn read_profile(path: &Path) -> PcResult<SubjectProfile> {
    profile_from_container(&Container::read_kind(path, KIND_PROFILE)?)
}

pub fn write_weights(w: &AdaptorWeights, path: &Path) -> PcResult<()> {
    weights_to_container(w)?.write(path)
}

pub fn read_weights(path: &Path) -> PcResult<AdaptorWeights> {
    weights_from_container(&Container::read_kind(path, KIND_WEIGHTS)?)
}

pub fn write_catalog(catalog: &DirectionCatalog, path: &Path) -> PcResult<()> {
    catalog_to_container(catalog)?.write(path)
}

pub fn read_catalog(path: &Path) -> PcResult<DirectionCatalog> {
    catalog_from_container(&Container::read_kind(path, KIND_CATALOG)?)
}

pub fn write_masks(masks: &InstanceMaskSet, path: &Path) -> PcResult<()> {
    masks_to_container(masks)?.write(path)
}

pub fn read_masks(path: &Path) -> PcResult<InstanceMaskSet> {
    masks_from_container(&Container::read_kind(path, KIND_MASKS)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_names_end_with_background() {
        assert_eq!(branch_names(2), ["subject_0", "subject_1", "background"]);
    }

    #[test]
    fn kind_is_checked() {
        let c = Container::new(KIND_WEIGHTS);
        assert!(profile_from_container(&c).is_err());
    }
}
