use numcore::{Adam, AdamConfig, Graph, Tensor};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-20.0f32..20.0, 24), axis in 0usize..3) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[2, 3, 4], data).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let s = g.sum(y, axis).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&p| p > 0.0));
        for &total in g.value(s).data() {
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_fixed_point(vals in prop::collection::vec(-5.0f32..5.0, 1..16), lr in 1e-5f64..1.0) {
        let n = vals.len();
        let mut p = Tensor::new(&[n], vals).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[n]);
        let mut opt = Adam::new(AdamConfig::new(lr));
        for _ in 0..3 {
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn forward_and_backward_are_deterministic(data in prop::collection::vec(-3.0f32..3.0, 12)) {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.param(Tensor::new(&[3, 4], data.clone()).unwrap());
            let w = g.constant(Tensor::full(&[4, 4], 0.25));
            let h = g.matmul(x, w).unwrap();
            let h = g.layer_norm(h, 1e-5).unwrap();
            let h = g.softmax(h, 1).unwrap();
            let l = g.sum_all(h);
            let sq = g.mul(l, l).unwrap();
            let grads = g.backward(sq).unwrap();
            (g.value(h).clone(), grads.get(x).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(ga.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
