use pc_core::latent::{
    combine_directions, edit_latent, extract_direction, interpolate, DirectionCatalog, EditDirection,
    EditRequest, SourceTag, WPlusLatent, WPlusShape,
};
use proptest::prelude::*;

const SHAPE: WPlusShape = WPlusShape { layers: 3, dims: 8 };

fn latent(v: Vec<f64>) -> WPlusLatent {
    WPlusLatent::new(SHAPE, v, SourceTag::Synthetic).unwrap()
}

/// Multiples of 1/8 in [-8, 8]: sums and products with quarter-step
/// strengths stay exactly representable.
fn dyadic_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-64i32..=64).prop_map(|k| k as f64 / 8.0), SHAPE.numel())
}

fn dyadic_beta() -> impl Strategy<Value = f64> {
    (-16i32..=16).prop_map(|k| k as f64 / 4.0)
}

fn real_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, SHAPE.numel())
}

proptest! {
    #[test]
    fn edits_add_exactly(w in dyadic_vec(), d in dyadic_vec(), b1 in dyadic_beta(), b2 in dyadic_beta()) {
        let w = latent(w);
        let d = EditDirection::external("d", SHAPE, d).unwrap();
        let twice = edit_latent(&edit_latent(&w, &d, b1).unwrap(), &d, b2).unwrap();
        let once = edit_latent(&w, &d, b1 + b2).unwrap();
        prop_assert_eq!(twice.styles(), once.styles());
    }

    #[test]
    fn zero_strength_is_identity(w in real_vec(), d in real_vec()) {
        let w = latent(w);
        let d = EditDirection::external("d", SHAPE, d).unwrap();
        let e = edit_latent(&w, &d, 0.0).unwrap();
        prop_assert_eq!(e.styles(), w.styles());
    }

    #[test]
    fn interpolation_endpoints_are_exact(a in real_vec(), b in real_vec()) {
        let (a, b) = (latent(a), latent(b));
        let (at0, at1) = (interpolate(&a, &b, 0.0).unwrap(), interpolate(&a, &b, 1.0).unwrap());
        prop_assert_eq!(at0.styles(), a.styles());
        prop_assert_eq!(at1.styles(), b.styles());
    }

    #[test]
    fn interpolation_is_symmetric(a in real_vec(), b in real_vec(), lam in 0.0f64..=1.0) {
        let (a, b) = (latent(a), latent(b));
        let ab = interpolate(&a, &b, lam).unwrap();
        let ba = interpolate(&b, &a, 1.0 - lam).unwrap();
        for (x, y) in ab.styles().iter().zip(ba.styles()) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn extraction_is_the_mean_difference(
        pairs in prop::collection::vec((real_vec(), real_vec()), 1..12),
        rotate in 0usize..12,
    ) {
        let pairs: Vec<_> = pairs.into_iter().map(|(a, b)| (latent(a), latent(b))).collect();
        let d = extract_direction(&pairs, "attr").unwrap();
        prop_assert_eq!(d.num_pairs(), pairs.len());
        let n = pairs.len() as f64;
        for k in 0..SHAPE.numel() {
            let mut acc = 0.0;
            for (after, before) in &pairs {
                acc += after.styles()[k] - before.styles()[k];
            }
            prop_assert!((d.delta()[k] - acc / n).abs() <= 1e-12);
        }

        let mut shuffled = pairs.clone();
        shuffled.rotate_left(rotate % pairs.len());
        shuffled.reverse();
        let d2 = extract_direction(&shuffled, "attr").unwrap();
        prop_assert_eq!(d.delta(), d2.delta());
    }

    #[test]
    fn combined_request_matches_sequential_edits(w in dyadic_vec(), d1 in dyadic_vec(), d2 in dyadic_vec(),
                                                  b1 in dyadic_beta(), b2 in dyadic_beta()) {
        let w = latent(w);
        let mut catalog = DirectionCatalog::new();
        catalog.insert(EditDirection::external("a", SHAPE, d1).unwrap()).unwrap();
        catalog.insert(EditDirection::external("b", SHAPE, d2).unwrap()).unwrap();
        let req = EditRequest::new(vec![("a".into(), b1), ("b".into(), b2)]).unwrap();
        let combined = edit_latent(&w, &combine_directions(&req, &catalog).unwrap(), 1.0).unwrap();
        let step = edit_latent(&w, catalog.get("a").unwrap(), b1).unwrap();
        let step = edit_latent(&step, catalog.get("b").unwrap(), b2).unwrap();
        prop_assert_eq!(combined.styles(), step.styles());
    }
}

#[test]
fn single_pair_extraction_is_the_difference() {
    let after = latent((0..24).map(|i| i as f64 * 0.5).collect());
    let before = latent(vec![1.0; 24]);
    let d = extract_direction(&[(after.clone(), before.clone())], "x").unwrap();
    for k in 0..24 {
        assert_eq!(d.delta()[k], after.styles()[k] - 1.0);
    }
}

#[test]
fn algebra_rejects_bad_inputs() {
    let w = latent(vec![0.0; 24]);
    let other = WPlusLatent::zeros(WPlusShape::new(2, 8).unwrap());
    let d = EditDirection::external("d", SHAPE, vec![1.0; 24]).unwrap();
    assert!(edit_latent(&w, &d, f64::NAN).is_err());
    assert!(edit_latent(&other, &d, 1.0).is_err());
    assert!(interpolate(&w, &w, 1.5).is_err());
    assert!(interpolate(&w, &other, 0.5).is_err());
    assert!(extract_direction(&[], "x").is_err());
    let catalog = DirectionCatalog::new();
    let err = combine_directions(&EditRequest::single("missing", 1.0).unwrap(), &catalog).unwrap_err();
    assert!(format!("{err}").contains("missing"));
}
