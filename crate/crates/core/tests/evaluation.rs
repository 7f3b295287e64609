mod common;

use pc_core::backend::toy::{ToyBackendConfig, ToyClipScorer, ToyFaceEmbedder, ToyLpips};
use pc_core::backend::ClipScorer;
use pc_core::evaluation::{
    delta_clip, evaluate_edit, evaluate_personalization, identity_similarity, lpips, Aggregate, EvalRow,
};
use pc_core::pipeline::{GenerationConfig, PromptTemplate};
use pc_core::{rng, Tensor};
use proptest::prelude::*;

fn image(seed: u64) -> Tensor {
    Tensor::randn([8, 8, 3], 0.5, &mut rng::stream(seed, "metric-test"))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn identity_similarity_is_reflexive_and_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let face = ToyFaceEmbedder::new(&ToyBackendConfig::default());
        let (a, b) = (image(s1), image(s2));
        prop_assert!((identity_similarity(&a, &a, &face).unwrap() - 1.0).abs() <= 1e-6);
        let ab = identity_similarity(&a, &b, &face).unwrap();
        let ba = identity_similarity(&b, &a, &face).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn delta_clip_of_identical_images_is_zero(s in any::<u64>(), text in "[a-z]{1,8}( [a-z]{1,8}){0,4}") {
        let clip = ToyClipScorer::new(&ToyBackendConfig::default());
        let a = image(s);
        prop_assert_eq!(delta_clip(&a, &a, &text, &clip).unwrap(), 0.0);
        prop_assert_eq!(lpips(&a, &a, &ToyLpips::new(&ToyBackendConfig::default())).unwrap(), 0.0);
    }

    #[test]
    fn aggregates_are_hand_means(values in prop::collection::vec(prop::option::of(-1.0f64..1.0), 1..20)) {
        let rows: Vec<EvalRow> = values.iter().enumerate().map(|(i, v)| {
            let mut r = EvalRow::new(format!("s{i}"), "p");
            r.cs = *v;
            r.ps = Some(i as f64 / 10.0);
            r
        }).collect();
        let agg = Aggregate::of(&rows);
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        match agg.cs_mean {
            None => prop_assert!(present.is_empty()),
            Some(m) => {
                let mut s = 0.0;
                for v in &present {
                    s += v;
                }
                prop_assert!((m - s / present.len() as f64).abs() <= 1e-9);
            }
        }
        prop_assert_eq!(agg.cs_excluded, values.len() - present.len());
        let n = values.len() as f64;
        let ps_hand = (0..values.len()).map(|i| i as f64 / 10.0).sum::<f64>() / n;
        prop_assert!((agg.ps_mean.unwrap() - ps_hand).abs() <= 1e-9);

        let mut reversed = rows.clone();
        reversed.reverse();
        prop_assert_eq!(Aggregate::of(&reversed), agg);
    }
}

#[test]
fn clip_score_is_the_feature_cosine() {
    let clip = ToyClipScorer::new(&ToyBackendConfig::default());
    let a = image(1);
    for text in ["a person with a beard", "smiling", "A photo of a person on the beach"] {
        let expected = cosine(&clip.image_features(&a).unwrap(), &clip.text_features(text).unwrap());
        assert!((clip.score(&a, text).unwrap() - expected).abs() <= 1e-12);
    }
}

#[test]
fn faceless_images_fail_identity_similarity() {
    let face = ToyFaceEmbedder::new(&ToyBackendConfig::default());
    let blank = Tensor::zeros([8, 8, 3]);
    assert!(matches!(
        identity_similarity(&blank, &image(1), &face),
        Err(pc_core::Error::FaceNotDetected(_))
    ));
}

#[test]
fn personalization_report_scores_every_pair() {
    let env = common::env();
    let good = common::profile(&env, "a", 1);
    // A profile whose reference image has no face keeps its row with an error.
    let mut parts = common::profile(&env, "b", 2).into_parts();
    parts.source_image = Some(Tensor::zeros([8, 8, 3]));
    let faceless = pc_core::training::SubjectProfile::from_parts(parts).unwrap();
    let prompts = vec![
        PromptTemplate::with_default_placeholder("A photo of {S1} on the beach").unwrap(),
        PromptTemplate::with_default_placeholder("{S1} wearing a hat").unwrap(),
    ];
    let report = evaluate_personalization(&[good, faceless], &prompts, &GenerationConfig::default(), &env).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert!(report.rows[..2].iter().all(|r| r.cs.is_some() && r.ps.is_some()));
    assert!(report.rows[2..].iter().all(|r| r.cs.is_none() && r.error.is_some() && r.ps.is_some()));
    assert_eq!(report.aggregate.cs_excluded, 2);
    assert_eq!(report.config.environment_fingerprint, env.fingerprint());
    assert_eq!(report.config.face_embedder, "toy-face-embedder/v1");
}

#[test]
fn edit_rows_carry_all_metrics() {
    let env = common::env();
    let (a, b) = (image(3), image(4));
    let row = evaluate_edit("s", "a person with a beard", &a, &b, &env);
    assert!(row.delta_clip.is_some() && row.lpips.is_some() && row.cs.is_some() && row.ps.is_some());
    assert!(row.error.is_none());
    let same = evaluate_edit("s", "beard", &a, &a, &env);
    assert_eq!(same.delta_clip, Some(0.0));
    assert_eq!(same.lpips, Some(0.0));
}
