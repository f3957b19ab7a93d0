use cropformer_autodiff::{Graph, Real, Tensor};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..8).prop_flat_map(|(r, c)| {
        prop::collection::vec(-50.0f32..50.0, r * c)
            .prop_map(move |v| Tensor::new(vec![r, c], v.into_iter().map(|x| x as Real).collect()).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(t in tensor_strategy(), axis in 0usize..2) {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.softmax(x, axis).unwrap();
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = g.value(y);
        let (outer, len) = if axis == 1 { (r, c) } else { (c, r) };
        for o in 0..outer {
            let row: Vec<Real> = (0..len)
                .map(|i| if axis == 1 { out.at(&[o, i]) } else { out.at(&[i, o]) })
                .collect();
            let s: f64 = row.iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "sum {}", s);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn replay_is_bit_identical_and_inputs_untouched(a in tensor_strategy(), seed in 0u64..1000) {
        let c = a.shape()[1];
        let w = Tensor::from_fn(&[c, 3], |i| ((i as u64 * 2654435761 + seed) % 97) as Real / 97.0 - 0.5);
        let run = || {
            let mut g = Graph::new();
            let x = g.variable(a.clone());
            let wv = g.variable(w.clone());
            let h = g.matmul(x, wv).unwrap();
            let h = g.layer_norm(h, 1, 1e-5).unwrap();
            let h = g.softmax(h, 1).unwrap();
            let l = g.mul(h, h).unwrap();
            let l = g.sum_all(l);
            g.backward(l).unwrap();
            prop_assert_eq!(g.value(x), &a);
            prop_assert_eq!(g.value(wv), &w);
            Ok((g.value(l).clone(), g.grad_tensor(x).unwrap(), g.grad_tensor(wv).unwrap()))
        };
        let first = run()?;
        let second = run()?;
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits() as u64).collect::<Vec<_>>();
        prop_assert_eq!(bits(&first.0), bits(&second.0));
        prop_assert_eq!(bits(&first.1), bits(&second.1));
        prop_assert_eq!(bits(&first.2), bits(&second.2));
    }
}
