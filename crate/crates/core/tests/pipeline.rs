mod common;

use pc_core::backend::toy::toy_catalog;
use pc_core::latent::EditRequest;
use pc_core::pipeline::{
    conditioning_source, edit_generate, edited_profile, generate, interpolation_strip, ConditioningSource,
    GenerationConfig, PromptTemplate,
};
use pc_core::training::NEUTRAL_TEMPLATE;
use pc_core::Error;
use proptest::prelude::*;

use ConditioningSource::{Learned, Placeholder};

fn template() -> PromptTemplate {
    PromptTemplate::with_default_placeholder("A photo of {S1} on the beach").unwrap()
}

fn cfg(tau: f64, seed: u64) -> GenerationConfig {
    GenerationConfig {
        steps: 10,
        tau,
        seed,
        capture_attention: false,
    }
}

#[test]
fn injection_switch_follows_the_threshold() {
    let env = common::env();
    let p = common::profile(&env, "a", 1);
    let expected: [(f64, [ConditioningSource; 10]); 3] = [
        (0.0, [Placeholder; 10]),
        (
            0.7,
            [
                Placeholder, Placeholder, Placeholder, Placeholder, Learned, Learned, Learned, Learned, Learned,
                Learned,
            ],
        ),
        (
            1.0,
            [
                Placeholder, Learned, Learned, Learned, Learned, Learned, Learned, Learned, Learned, Learned,
            ],
        ),
    ];
    for (tau, pattern) in expected {
        let trace = generate(&p, &template(), &cfg(tau, 0), &env).unwrap();
        let ts: Vec<usize> = trace.steps.iter().map(|s| s.t).collect();
        assert_eq!(ts, (1..=10).rev().collect::<Vec<_>>());
        let got: Vec<ConditioningSource> = trace.steps.iter().map(|s| s.conditioning_source).collect();
        assert_eq!(got, pattern, "tau = {tau}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn switch_is_two_phase_with_boundary_at_threshold(tau in 0.0f64..=1.0, t_max in 1usize..40) {
        let sources: Vec<_> = (1..=t_max).rev().map(|t| conditioning_source(t, t_max, tau)).collect();
        let first_learned = sources.iter().position(|s| *s == Learned).unwrap_or(sources.len());
        prop_assert!(sources[..first_learned].iter().all(|s| *s == Placeholder));
        prop_assert!(sources[first_learned..].iter().all(|s| *s == Learned));
        if first_learned < sources.len() {
            let boundary = t_max - first_learned;
            // Largest t with t/T < τ.
            prop_assert!((boundary as f64) / (t_max as f64) < tau);
            prop_assert!(boundary == t_max || (boundary + 1) as f64 / t_max as f64 >= tau);
        }
    }
}

#[test]
fn generation_is_seed_deterministic() {
    let env = common::env();
    let p = common::profile(&env, "a", 1);
    let a = generate(&p, &template(), &cfg(0.7, 5), &env).unwrap();
    let b = generate(&p, &template(), &cfg(0.7, 5), &env).unwrap();
    assert!(a.image.bit_eq(&b.image));
    assert_eq!(a.steps, b.steps);
    let c = generate(&p, &template(), &cfg(0.7, 6), &env).unwrap();
    assert!(!a.image.bit_eq(&c.image));
}

#[test]
fn zero_edit_regenerates_the_base_bit_for_bit() {
    let env = common::env();
    let catalog = toy_catalog(env.wplus_shape(), 7).unwrap();
    let (image, w) = common::faces(1, 3).remove(0);
    let embedded = env.embed_image("e", &image, 0).unwrap();
    let tuned = pc_core::training::tune_subject(
        &env,
        "t",
        &image,
        &w,
        &pc_core::training::TuneConfig {
            iterations: 5,
            ..Default::default()
        },
        0,
    )
    .unwrap()
    .profile;
    let gen = GenerationConfig {
        capture_attention: true,
        ..cfg(0.7, 9)
    };
    for p in [embedded, tuned] {
        let base = generate(&p, &template(), &gen, &env).unwrap();
        let zero = EditRequest::single("smile", 0.0).unwrap();
        let again = edit_generate(&p, &zero, &catalog, &base, &template(), &gen, &env).unwrap();
        assert!(again.final_latent.bit_eq(&base.final_latent));
        assert!(again.image.bit_eq(&base.image));

        let smile = EditRequest::single("smile", 2.0).unwrap();
        let edited = edit_generate(&p, &smile, &catalog, &base, &template(), &gen, &env).unwrap();
        assert!(!edited.image.bit_eq(&base.image));
        // Injected maps are the base run's maps.
        assert_eq!(edited.self_attention, base.self_attention);
    }
}

#[test]
fn halves_of_an_edit_compose() {
    let env = common::env();
    let catalog = toy_catalog(env.wplus_shape(), 7).unwrap();
    let p = common::profile(&env, "a", 2);
    let half = EditRequest::single("age", 0.5).unwrap();
    let twice = edited_profile(&edited_profile(&p, &half, &catalog, &env).unwrap(), &half, &catalog, &env).unwrap();
    let once = edited_profile(&p, &EditRequest::single("age", 1.0).unwrap(), &catalog, &env).unwrap();
    for (a, b) in twice.w().styles().iter().zip(once.w().styles()) {
        // Each hop rounds to f32 storage.
        assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
    }
}

#[test]
fn edit_needs_captured_attention_and_matching_seed() {
    let env = common::env();
    let catalog = toy_catalog(env.wplus_shape(), 7).unwrap();
    let p = common::profile(&env, "a", 1);
    let edit = EditRequest::single("beard", 1.0).unwrap();
    let plain = generate(&p, &template(), &cfg(0.7, 1), &env).unwrap();
    assert!(matches!(
        edit_generate(&p, &edit, &catalog, &plain, &template(), &cfg(0.7, 1), &env),
        Err(Error::Precondition(_))
    ));
    let gen = GenerationConfig {
        capture_attention: true,
        ..cfg(0.7, 1)
    };
    let base = generate(&p, &template(), &gen, &env).unwrap();
    assert!(matches!(
        edit_generate(&p, &edit, &catalog, &base, &template(), &cfg(0.7, 2), &env),
        Err(Error::Precondition(_))
    ));
    let unknown = EditRequest::single("wings", 1.0).unwrap();
    assert!(matches!(
        edit_generate(&p, &unknown, &catalog, &base, &template(), &gen, &env),
        Err(Error::Lookup { .. })
    ));
}

#[test]
fn strip_endpoints_match_single_subject_generations() {
    let env = common::env();
    let a = common::profile(&env, "a", 1);
    let b = common::profile(&env, "b", 2);
    let t = PromptTemplate::with_default_placeholder(NEUTRAL_TEMPLATE).unwrap();
    let gen = cfg(0.7, 4);
    let strip = interpolation_strip(&a, &b, 5, &t, &gen, &env).unwrap();
    assert_eq!(strip.len(), 5);
    assert_eq!(strip.iter().map(|f| f.lam).collect::<Vec<_>>(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let ga = generate(&a, &t, &gen, &env).unwrap();
    let gb = generate(&b, &t, &gen, &env).unwrap();
    assert!(strip[0].image.bit_eq(&ga.image));
    assert!(strip[4].image.bit_eq(&gb.image));
    assert!(!strip[2].image.bit_eq(&ga.image));
    assert!(interpolation_strip(&a, &b, 1, &t, &gen, &env).is_err());
}

#[test]
fn incompatible_profiles_are_refused() {
    let env = common::env();
    let p = common::profile(&env, "a", 1);
    let other = common::env_with(&pc_core::backend::toy::ToyBackendConfig::with_seed(99));
    assert!(matches!(
        generate(&p, &template(), &cfg(0.7, 0), &other),
        Err(Error::Compatibility { .. })
    ));
    let two = PromptTemplate::with_default_placeholder("{S1} and {S2}").unwrap();
    assert!(generate(&p, &two, &cfg(0.7, 0), &env).is_err());
    assert!(generate(&p, &template(), &GenerationConfig { steps: 0, ..cfg(0.7, 0) }, &env).is_err());
}
