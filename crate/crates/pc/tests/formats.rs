mod common;

use std::fs;

use pc::container::{self, Container, MANIFEST};
use pc_core::backend::toy::toy_catalog;
use pc_core::composition::InstanceMaskSet;
use pc_core::latent::{DirectionCatalog, EditDirection};
use pc_core::training::{tune_subject, TuneConfig};
use pc_core::{round_f32, Tensor};
use proptest::prelude::*;

fn tuned_profile() -> pc_core::training::SubjectProfile {
    let env = common::env();
    let (image, w) = common::faces(1, 4).remove(0);
    let cfg = TuneConfig {
        iterations: 3,
        ..TuneConfig::default()
    };
    tune_subject(&env, "alice", &image, &w, &cfg, 1_700_000_000).unwrap().profile
}

#[test]
fn profiles_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let env = common::env();
    let embedded = env.embed_image("bob", &common::faces(1, 2)[0].0, 5).unwrap();
    for p in [tuned_profile(), embedded] {
        let path = dir.path().join(format!("{}.pcs", p.subject_id()));
        container::write_profile(&p, &path).unwrap();
        let back = container::read_profile(&path).unwrap();
        assert_eq!(back, p);
        for (a, b) in back.w().styles().iter().zip(p.w().styles()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Overwriting in place leaves a single readable container.
        container::write_profile(&p, &path).unwrap();
        assert_eq!(container::read_profile(&path).unwrap(), p);
    }
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with('.'))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn tuned_profile_manifest_names_its_parts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.pcs");
    let p = tuned_profile();
    container::write_profile(&p, &path).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(path.join(MANIFEST)).unwrap()).unwrap();
    assert_eq!(manifest["kind"], "subject_profile");
    assert_eq!(manifest["version"], 1);
    assert_eq!(manifest["T"], 10);
    assert_eq!(manifest["alpha"], 0.3);
    assert_eq!(manifest["subject_id"], "alice");
    let names: Vec<&str> = manifest["tensors"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    for needed in ["w", "tokens.v1", "tokens.v2", "lora.cross_attn.to_v.a", "lora.cross_attn.to_out.b", "source_image"] {
        assert!(names.contains(&needed), "{needed} missing from {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("adaptor.")));
    assert!(manifest["tensors"].as_array().unwrap().iter().all(|t| t["dtype"] == "f32"));
}

#[test]
fn weights_catalog_and_masks_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let env = common::env();
    let w = env.adaptor().to_f32_precision();
    container::write_weights(&w, &dir.path().join("a.pcw")).unwrap();
    assert_eq!(container::read_weights(&dir.path().join("a.pcw")).unwrap(), w);

    let mut catalog = toy_catalog(env.wplus_shape(), 7).unwrap();
    let (a, b) = (common::faces(2, 1).remove(0).1, common::faces(2, 1).remove(1).1);
    catalog
        .insert(pc_core::latent::extract_direction(&[(a, b)], "custom").unwrap())
        .unwrap();
    container::write_catalog(&catalog, &dir.path().join("d.pcd")).unwrap();
    let back = container::read_catalog(&dir.path().join("d.pcd")).unwrap();
    assert_eq!(back, catalog);
    assert_eq!(back.get("custom").unwrap().num_pairs(), 1);

    let left = Tensor::from_fn([4, 4], |k| if k % 4 < 2 { 1.0 } else { 0.0 });
    let right = Tensor::from_fn([4, 4], |k| if k % 4 >= 2 { 0.75 } else { 0.0 });
    let masks = InstanceMaskSet::from_subject_masks(vec![left, right]).unwrap();
    container::write_masks(&masks, &dir.path().join("m.msk")).unwrap();
    assert_eq!(container::read_masks(&dir.path().join("m.msk")).unwrap(), masks);
}

#[test]
fn corrupted_or_mislabeled_containers_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.pcw");
    container::write_weights(&common::env().adaptor().to_f32_precision(), &path).unwrap();
    assert!(container::read_profile(&path).is_err());

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(path.join(MANIFEST)).unwrap()).unwrap();
    let blob = path.join(manifest["tensors"][0]["file"].as_str().unwrap());
    let mut bytes = fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    fs::write(&blob, &bytes).unwrap();
    let err = container::read_weights(&path).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
    bytes.pop();
    fs::write(&blob, &bytes).unwrap();
    assert!(container::read_weights(&path).is_err());
    assert!(container::read_weights(&dir.path().join("missing.pcw")).is_err());
}

#[test]
fn masks_that_are_not_a_partition_do_not_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Container::new(container::KIND_MASKS);
    c.set_meta("grid", [2, 2]).unwrap();
    c.set_meta("branches", container::branch_names(1)).unwrap();
    c.insert("mask.subject_0", Tensor::filled([2, 2], 0.5));
    c.insert("mask.background", Tensor::filled([2, 2], 0.25));
    c.write(&dir.path().join("bad.msk")).unwrap();
    let err = container::read_masks(&dir.path().join("bad.msk")).unwrap_err().to_string();
    assert!(err.contains("worst pixel"), "{err}");
}

#[test]
fn empty_catalog_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    container::write_catalog(&DirectionCatalog::new(), &dir.path().join("e.pcd")).unwrap();
    assert!(container::read_catalog(&dir.path().join("e.pcd")).unwrap().is_empty());
    let shape = common::env().wplus_shape();
    assert!(EditDirection::external("x", shape, vec![0.0; shape.numel()]).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn f32_exact_tensors_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..64), cols in 1usize..4) {
        let rows = values.len().div_ceil(cols);
        let data: Vec<f64> = (0..rows * cols).map(|k| round_f32(*values.get(k).unwrap_or(&0.0))).collect();
        let t = Tensor::new([rows, cols], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut c = Container::new("test");
        c.set_meta("note", "x").unwrap();
        c.insert("t/with odd:name", t.clone());
        c.write(&dir.path().join("c")).unwrap();
        let back = Container::read(&dir.path().join("c")).unwrap();
        prop_assert!(back.tensor("t/with odd:name").unwrap().bit_eq(&t));
        prop_assert_eq!(back, c);
    }
}
