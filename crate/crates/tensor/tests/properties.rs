use pandense_tensor::{AdamConfig, AdamState, ParamSet, Tape, Tensor};
use proptest::prelude::*;

fn conv(x: &[f64], k: &[f64], shape: (usize, usize, usize, usize)) -> Vec<f64> {
    let (cin, cout, h, ks) = shape;
    let mut tape = Tape::<f64>::inference();
    let xv = tape.constant(Tensor::new(&[1, cin, h, h], x.to_vec()).unwrap());
    let kv = tape.constant(Tensor::new(&[cout, cin, ks, ks], k.to_vec()).unwrap());
    let bv = tape.constant(Tensor::zeros(&[cout]));
    let y = tape.conv2d(xv, kv, bv, (ks - 1) / 2).unwrap();
    tape.data(y).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_input(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        x in prop::collection::vec(-1.0f64..1.0, 2 * 25),
        y in prop::collection::vec(-1.0f64..1.0, 2 * 25),
        k in prop::collection::vec(-1.0f64..1.0, 3 * 2 * 9),
    ) {
        let shape = (2, 3, 5, 3);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = conv(&mix, &k, shape);
        let cx = conv(&x, &k, shape);
        let cy = conv(&y, &k, shape);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * cx[i] + b * cy[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 4), 1..6),
    ) {
        let b = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::new(&[b, 4], flat).unwrap());
        let p = tape.softmax(x).unwrap();
        for row in tape.data(p).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn adam_zero_grad_zero_decay_is_identity(
        init in prop::collection::vec(-10.0f64..10.0, 1..8),
        lr in 1e-5f64..1.0,
        steps in 1usize..6,
    ) {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(&[init.len()], init.clone()).unwrap());
        let mut adam = AdamState::new(AdamConfig::with_lr(lr, 0.0), &ps);
        for _ in 0..steps {
            ps.get_mut(0).value.accumulate_grad(&vec![0.0; init.len()]);
            adam.step(&mut ps);
            ps.zero_grad();
        }
        prop_assert_eq!(ps.tensor(0).data(), &init[..]);
        prop_assert!(adam.second_moment(0).iter().all(|&v| v >= 0.0));
    }
}
