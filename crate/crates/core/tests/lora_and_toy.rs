use pc_core::backend::toy::{ToyBackendConfig, ToyDenoiser, ToyImageCodec, TOY_TO_OUT, TOY_TO_V};
use pc_core::backend::{AttentionControl, Denoiser, ImageCodec};
use pc_core::lora::{lora_effective, Adaptation, LoraDelta};
use pc_core::{rng, Tensor};
use proptest::prelude::*;

fn dyadic(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-32i32..=32).prop_map(|k| k as f64 / 8.0), len)
}

proptest! {
    #[test]
    fn effective_weight_matches_triple_loop(base in dyadic(12), a in dyadic(8), b in dyadic(6), alpha in -2.0f64..2.0) {
        let (out, inp, rank) = (3, 4, 2);
        let w = Tensor::new([out, inp], base.clone()).unwrap();
        let d = LoraDelta::new("t", Tensor::new([rank, inp], a.clone()).unwrap(), Tensor::new([out, rank], b.clone()).unwrap()).unwrap();
        let eff = lora_effective(&w, &d, alpha).unwrap();
        for i in 0..out {
            for j in 0..inp {
                let mut s = 0.0;
                for r in 0..rank {
                    s += b[i * rank + r] * a[r * inp + j];
                }
                let expected = base[i * inp + j] + alpha * s;
                prop_assert!((eff.data()[i * inp + j] - expected).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn effective_weight_is_linear_in_alpha(base in dyadic(12), a in dyadic(8), b in dyadic(6),
                                           k1 in -8i32..=8, k2 in -8i32..=8) {
        let (a1, a2) = (k1 as f64 / 4.0, k2 as f64 / 4.0);
        let w = Tensor::new([3, 4], base).unwrap();
        let d = LoraDelta::new("t", Tensor::new([2, 4], a).unwrap(), Tensor::new([3, 2], b).unwrap()).unwrap();
        let e1 = lora_effective(&w, &d, a1).unwrap();
        let e2 = lora_effective(&w, &d, a2).unwrap();
        let e12 = lora_effective(&w, &d, a1 + a2).unwrap();
        for k in 0..12 {
            let lhs = e12.data()[k] - w.data()[k];
            let rhs = (e1.data()[k] - w.data()[k]) + (e2.data()[k] - w.data()[k]);
            prop_assert_eq!(lhs, rhs);
        }
        prop_assert!(lora_effective(&w, &d, 0.0).unwrap().bit_eq(&w));
    }
}

fn cfg() -> ToyBackendConfig {
    ToyBackendConfig::default()
}

fn predict(den: &ToyDenoiser, z: &Tensor, t: usize, c: &Tensor, adapt: &Adaptation<'_>) -> Tensor {
    den.predict(z, t, c, adapt, AttentionControl::Compute).unwrap().eps
}

#[test]
fn zero_latent_and_conditioning_give_zero_noise() {
    let den = ToyDenoiser::new(&cfg()).unwrap();
    let eps = predict(&den, &Tensor::zeros([4, 4, 2]), 5, &Tensor::zeros([16, 16]), &Adaptation::NONE);
    assert!(eps.data().iter().all(|&v| v == 0.0));
}

#[test]
fn latent_basis_columns_are_the_time_blocks() {
    let den = ToyDenoiser::new(&cfg()).unwrap();
    let zero_c = Tensor::zeros([16, 16]);
    for t in [1, 6, 10] {
        for k in 0..32 {
            let mut z = Tensor::zeros([4, 4, 2]);
            z.data_mut()[k] = 1.0;
            let eps = predict(&den, &z, t, &zero_c, &Adaptation::NONE);
            let (p, ch) = (k / 2, k % 2);
            let block = den.a_block(t, p);
            for q in 0..32 {
                let expected = if q / 2 == p { block[(q % 2) * 2 + ch] } else { 0.0 };
                assert_eq!(eps.data()[q], expected, "t={t} k={k} q={q}");
            }
        }
    }
}

#[test]
fn conditioning_basis_columns_follow_the_projections() {
    let den = ToyDenoiser::new(&cfg()).unwrap();
    let to_v = den.base_weight(TOY_TO_V).unwrap().data().to_vec();
    let to_out = den.base_weight(TOY_TO_OUT).unwrap().data().to_vec();
    let z = Tensor::zeros([4, 4, 2]);
    for j in 0..16 {
        // Every sequence position carries e_j, so the mean is e_j.
        let c = Tensor::from_fn([16, 16], |k| if k % 16 == j { 1.0 } else { 0.0 });
        let eps = predict(&den, &z, 3, &c, &Adaptation::NONE);
        for q in 0..32 {
            let mut u = 0.0;
            for m in 0..16 {
                u += to_out[q * 16 + m] * to_v[m * 16 + j];
            }
            // The gate is σ(0) = 1/2 at a zero latent.
            assert!((eps.data()[q] - 0.5 * u).abs() <= 1e-12);
        }
    }
}

#[test]
fn lora_changes_only_through_the_effective_matrix() {
    let den = ToyDenoiser::new(&cfg()).unwrap();
    let mut r = rng::stream(3, "lora-test");
    let a = Tensor::randn([2, 16], 1.0, &mut r);
    let b = Tensor::randn([16, 2], 1.0, &mut r);
    let deltas = vec![LoraDelta::new(TOY_TO_V, a, b).unwrap()];
    let z = Tensor::randn([4, 4, 2], 1.0, &mut r);
    let c = Tensor::randn([16, 16], 1.0, &mut r);
    let base = predict(&den, &z, 4, &c, &Adaptation::NONE);
    assert!(predict(&den, &z, 4, &c, &Adaptation::new(&deltas, 0.0)).bit_eq(&base));
    let full = predict(&den, &z, 4, &c, &Adaptation::new(&deltas, 1.0));
    let half = predict(&den, &z, 4, &c, &Adaptation::new(&deltas, 0.5));
    assert!(!full.bit_eq(&base));
    // ε̂ is affine in the adapted matrix, so half the scale lands halfway.
    for k in 0..32 {
        let mid = 0.5 * (base.data()[k] + full.data()[k]);
        assert!((half.data()[k] - mid).abs() <= 1e-12);
    }
    let bad = vec![LoraDelta::new("nope", Tensor::zeros([1, 16]), Tensor::zeros([16, 1])).unwrap()];
    assert!(den.predict(&z, 4, &c, &Adaptation::new(&bad, 1.0), AttentionControl::Compute).is_err());
}

#[test]
fn codec_round_trips_latents() {
    let codec = ToyImageCodec::new(&cfg()).unwrap();
    let z = Tensor::randn([4, 4, 2], 1.0, &mut rng::stream(9, "codec-test"));
    let image = codec.decode(&z).unwrap();
    assert_eq!(image.shape(), &[8, 8, 3]);
    assert!(codec.encode(&image).unwrap().max_abs_diff(&z) <= 1e-12);
}
