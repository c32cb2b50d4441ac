use mmsl::embedding::{EmbeddingNet, Modality, NetSpec};
use mmsl::fusion::{FusionHead, FusionMode};
use mmsl::nn::{BatchNorm, NormMode};
use mmsl::Vector;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;

fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, dim)
}

proptest! {
    #[test]
    fn fusion_gates_are_open_intervals_and_dim_doubles(
        dim in 1usize..8,
        seed in any::<u64>(),
        raw in prop::collection::vec(-50.0f64..50.0, 16),
    ) {
        let head = FusionHead::init(dim, FusionMode::Attention, seed);
        let r = Vector::new(raw[..dim].to_vec()).unwrap();
        let t = Vector::new(raw[8..8 + dim].to_vec()).unwrap();
        let f = head.fuse(&r, &t).unwrap();
        prop_assert_eq!(f.components.len(), 2 * dim);
        for g in f.gates_r.iter().chain(&f.gates_t) {
            prop_assert!(*g > 0.0 && *g < 1.0);
        }
        prop_assert_eq!(head.fuse(&r, &t).unwrap(), f);
    }

    #[test]
    fn zero_modality_masks_exactly_its_half(x in vec_strategy(5), seed in any::<u64>(), which in any::<bool>()) {
        let head = FusionHead::init(5, FusionMode::Attention, seed);
        let x = Vector::new(x).unwrap();
        let zero = Vector::zeros(5);
        let (r, t) = if which { (&zero, &x) } else { (&x, &zero) };
        let f = head.fuse(r, t).unwrap();
        let (masked, kept) = if which { (&f.components[..5], &f.components[5..]) } else { (&f.components[5..], &f.components[..5]) };
        prop_assert!(masked.iter().all(|v| *v == 0.0));
        for (k, xi) in kept.iter().zip(x.as_slice()) {
            prop_assert_eq!(*k == 0.0, *xi == 0.0);
        }
    }
}

proptest! {
    #[test]
    fn train_mode_batch_norm_hits_shift_and_scale(
        z in prop::collection::vec(-20.0f64..20.0, 24),
        scale in prop::collection::vec(0.2f64..3.0, 3),
        shift in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let mut bn = BatchNorm::new(3, 1e-12, 0.1);
        bn.scale = Array1::from(scale.clone());
        bn.shift = Array1::from(shift.clone());
        let z = Array2::from_shape_vec((8, 3), z).unwrap();
        let var_in = z.var_axis(Axis(0), 0.0);
        prop_assume!(var_in.iter().all(|v| *v > 1e-3));
        let (y, _) = bn.forward(z.view(), NormMode::Train).unwrap();
        let mean = y.mean_axis(Axis(0)).unwrap();
        let var = y.var_axis(Axis(0), 0.0);
        for k in 0..3 {
            prop_assert!((mean[k] - shift[k]).abs() < 1e-6);
            prop_assert!((var[k] - scale[k] * scale[k]).abs() < 1e-6);
        }
    }
}

#[test]
fn infer_mode_is_a_pure_function() {
    let mut net = EmbeddingNet::init(NetSpec::default_for(7), Modality::Thermal, 4).unwrap();
    let x = Array2::from_shape_fn((5, 7), |(i, j)| (i as f64 - j as f64) * 0.2);
    net.forward(x.view(), NormMode::Train).unwrap();
    let frozen = net.clone();
    let a = net.forward(x.view(), NormMode::Infer).unwrap().0;
    let b = net.forward(x.view(), NormMode::Infer).unwrap().0;
    assert_eq!(a, b);
    assert_eq!(net, frozen);
}
