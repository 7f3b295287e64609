#![allow(dead_code)]

use pc_core::adaptor::AdaptorConfig;
use pc_core::backend::toy::{toy_bundle, toy_face_pairs, ToyBackendConfig};
use pc_core::latent::WPlusLatent;
use pc_core::training::{Environment, SubjectProfile};
use pc_core::Tensor;

pub fn env() -> Environment {
    env_with(&ToyBackendConfig::default())
}

pub fn env_with(cfg: &ToyBackendConfig) -> Environment {
    let bundle = toy_bundle(cfg).unwrap();
    Environment::with_initial_adaptor(bundle, &AdaptorConfig::toy(), 1).unwrap()
}

pub fn faces(n: usize, seed: u64) -> Vec<(Tensor, WPlusLatent)> {
    toy_face_pairs(&ToyBackendConfig::default(), n, seed).unwrap()
}

/// Embedded profile of toy face `index` from stream `seed`.
pub fn profile(env: &Environment, id: &str, seed: u64) -> SubjectProfile {
    let (image, _) = faces(1, seed).remove(0);
    env.embed_image(id, &image, 0).unwrap()
}
