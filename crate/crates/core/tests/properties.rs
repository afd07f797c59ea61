use proptest::prelude::*;
use vssd_core::io::{decode, encode};
use vssd_core::ncssd::route::ScanRoute;
use vssd_core::ncssd::{
    self, apply_scan_route, ncssd_contraction, ncssd_fused, ncssd_hidden_state,
};
use vssd_core::ssd::{self, Dims};
use vssd_core::{Rng, Tensor};

fn dims() -> impl Strategy<Value = Dims> {
    (1usize..40, 1usize..4, 1usize..5, 1usize..9).prop_map(|(l, hd, p, n)| Dims { l, hd, p, n })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nctd_round_trip_is_bitwise(shape in prop::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
        let t = Tensor::<f64>::randn(&shape, 1.0, &mut Rng::new(seed));
        let back = decode(&encode(&t)).unwrap().into_dtype::<f64>();
        prop_assert!(back.bitwise_eq(&t));
        let t32 = t.cast::<f32>();
        prop_assert!(decode(&encode(&t32)).unwrap().into_dtype::<f32>().bitwise_eq(&t32));
    }

    #[test]
    fn route_inverse_composes_to_identity(l in 1usize..64, seed in any::<u64>()) {
        let r = ScanRoute::random(l, &mut Rng::new(seed));
        let id = r.then(&r.inverse()).unwrap();
        prop_assert!(id.perm().iter().copied().eq(0..l));
        let x = Tensor::<f64>::randn(&[l, 3], 1.0, &mut Rng::new(seed ^ 1));
        prop_assert!(r.inverse().apply(&r.apply(&x, 0).unwrap(), 0).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn ncssd_forms_agree(d in dims(), seed in any::<u64>()) {
        let inp = ncssd::random_inputs::<f64>(d, &mut Rng::new(seed));
        let diff = ncssd_fused(&inp).unwrap().max_abs_diff(&ncssd_contraction(&inp).unwrap()).unwrap();
        prop_assert!(diff < 1e-12, "{}", diff);
    }

    #[test]
    fn ncssd_is_permutation_equivariant(d in dims(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let inp = ncssd::random_inputs::<f64>(d, &mut rng);
        let r = ScanRoute::random(d.l, &mut rng);
        let routed = apply_scan_route(&inp, &r).unwrap();
        let y = ncssd_fused(&routed).unwrap();
        prop_assert!(y.bitwise_eq(&r.apply(&ncssd_fused(&inp).unwrap(), 0).unwrap()));
        let h = ncssd_hidden_state(&inp).unwrap().h;
        prop_assert!(h.bitwise_eq(&ncssd_hidden_state(&routed).unwrap().h));
    }

    #[test]
    fn causal_forms_agree(d in dims(), seed in any::<u64>()) {
        let inp = ssd::random_inputs::<f64>(d, &mut Rng::new(seed));
        let y = ssd::ssd_recurrent(&inp).unwrap();
        prop_assert!(y.max_abs_diff(&ssd::ssd_quadratic(&inp).unwrap()).unwrap() < 1e-10);
        prop_assert!(y.max_abs_diff(&ssd::ssd_matrix_apply(&inp).unwrap()).unwrap() < 1e-10);
    }

    #[test]
    fn causal_output_ignores_future_tokens(d in dims(), seed in any::<u64>(), cut in 0usize..40) {
        let mut rng = Rng::new(seed);
        let inp = ssd::random_inputs::<f64>(d, &mut rng);
        let cut = cut % d.l;
        let mut x = inp.x.clone();
        let row = d.hd * d.p;
        for v in &mut x.data_mut()[(cut + 1) * row..] {
            *v += 1.0;
        }
        let moved = ssd::SsdSequenceInputs::new(x, inp.b.clone(), inp.c.clone(), inp.a.clone()).unwrap();
        let (y0, y1) = (ssd::ssd_recurrent(&inp).unwrap(), ssd::ssd_recurrent(&moved).unwrap());
        prop_assert_eq!(&y0.data()[..(cut + 1) * row], &y1.data()[..(cut + 1) * row]);
    }
}
