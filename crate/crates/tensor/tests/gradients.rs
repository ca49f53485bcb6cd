//! Finite-difference checks for every differentiable op, 20 random trials each.

use pandense_tensor::{BatchNormStats, GradCheck, NormMode, PoolKind, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const EPS: f64 = 1e-5;

/// Reduces `out` to a scalar through fixed random weights so every output
/// coordinate gets a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Values bounded away from zero so ReLU kinks stay outside the difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) { mag } else { -mag }
    })
}

fn check<F>(name: &str, tol: f64, mut make: F)
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>>),
{
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let (inputs, f) = make(&mut rng);
        let report = GradCheck::new(EPS).unwrap().run(f, &inputs).unwrap();
        assert!(
            report.max_rel_error < tol,
            "{name} trial {trial}: rel err {} at {:?} (analytic {}, numeric {})",
            report.max_rel_error,
            report.worst,
            report.analytic,
            report.numeric
        );
    }
}

#[test]
fn conv2d_gradients() {
    check("conv2d", 1e-5, |rng| {
        let x = Tensor::randn(&[1, 2, 4, 4], 1.0, rng);
        let k = Tensor::randn(&[3, 2, 3, 3], 1.0, rng);
        let b = Tensor::randn(&[3], 1.0, rng);
        let seed = rng.random();
        (vec![x, k, b], Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1)?;
            project(t, y, seed)
        }))
    });
}

#[test]
fn conv2d_large_kernel_batch_gradients() {
    check("conv2d k5 batch", 1e-4, |rng| {
        let x = Tensor::randn(&[2, 2, 5, 3], 1.0, rng);
        let k = Tensor::randn(&[2, 2, 5, 5], 1.0, rng);
        let b = Tensor::randn(&[2], 1.0, rng);
        let seed = rng.random();
        (vec![x, k, b], Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2)?;
            project(t, y, seed)
        }))
    });
}

#[test]
fn batch_norm_train_gradients() {
    check("batch_norm train", 1e-4, |rng| {
        let x = Tensor::randn(&[2, 3, 3, 3], 1.0, rng);
        let g = Tensor::uniform(&[3], 0.5, 1.5, rng);
        let b = Tensor::randn(&[3], 1.0, rng);
        let seed = rng.random();
        (vec![x, g, b], Box::new(move |t, v| {
            let mut stats = BatchNormStats::new(3);
            let y = t.batch_norm2d(v[0], v[1], v[2], &mut stats, NormMode::Train)?;
            project(t, y, seed)
        }))
    });
}

#[test]
fn batch_norm_eval_gradients() {
    check("batch_norm eval", 1e-4, |rng| {
        let x = Tensor::randn(&[2, 2, 2, 3], 1.0, rng);
        let g = Tensor::uniform(&[2], 0.5, 1.5, rng);
        let b = Tensor::randn(&[2], 1.0, rng);
        let mut stats = BatchNormStats::<f64>::new(2);
        stats.mean = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        stats.var = vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
        let seed = rng.random();
        (vec![x, g, b], Box::new(move |t, v| {
            let y = t.batch_norm2d(v[0], v[1], v[2], &mut stats.clone(), NormMode::Eval)?;
            project(t, y, seed)
        }))
    });
}

#[test]
fn relu_gradients() {
    check("relu", 1e-6, |rng| {
        let x = away_from_zero(&[1, 2, 3, 3], rng);
        let seed = rng.random();
        (vec![x], Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, seed)
        }))
    });
}

#[test]
fn max_pool_gradients() {
    check("max_pool2", 1e-6, |rng| {
        let x = Tensor::randn(&[2, 2, 4, 6], 1.0, rng);
        let seed = rng.random();
        (vec![x], Box::new(move |t, v| {
            let y = t.max_pool2(v[0])?;
            project(t, y, seed)
        }))
    });
}

#[test]
fn region_pool_gradients() {
    for kind in [PoolKind::Avg, PoolKind::Max] {
        check("region_pool", 1e-6, |rng| {
            let x = Tensor::randn(&[2, 2, 7, 5], 1.0, rng);
            let seed = rng.random();
            let grid = rng.random_range(1..=3);
            (vec![x], Box::new(move |t, v| {
                let y = t.region_pool(v[0], grid, kind)?;
                project(t, y, seed)
            }))
        });
    }
}

#[test]
fn linear_softmax_gradients() {
    check("linear+softmax", 1e-5, |rng| {
        let x = Tensor::randn(&[3, 5], 1.0, rng);
        let w = Tensor::randn(&[4, 5], 1.0, rng);
        let b = Tensor::randn(&[4], 1.0, rng);
        let seed = rng.random();
        (vec![x, w, b], Box::new(move |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            let p = t.softmax(y)?;
            project(t, p, seed)
        }))
    });
}

#[test]
fn softmax_cross_entropy_gradients() {
    check("softmax+cross_entropy", 1e-5, |rng| {
        let x = Tensor::randn(&[4, 3], 2.0, rng);
        let classes: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        (vec![x], Box::new(move |t, v| {
            let p = t.softmax(v[0])?;
            t.cross_entropy(p, &classes)
        }))
    });
}

#[test]
fn mse_gradients() {
    check("mse", 1e-6, |rng| {
        let p = Tensor::randn(&[2, 1, 3, 3], 1.0, rng);
        let q = Tensor::randn(&[2, 1, 3, 3], 1.0, rng);
        (vec![p, q], Box::new(|t, v| t.mse_loss(v[0], v[1])))
    });
}

#[test]
fn concat_scale_gradients() {
    check("concat+scale_channels", 1e-6, |rng| {
        let a = Tensor::randn(&[2, 1, 3, 2], 1.0, rng);
        let b = Tensor::randn(&[2, 2, 3, 2], 1.0, rng);
        let s = Tensor::randn(&[2, 3], 1.0, rng);
        let seed = rng.random();
        (vec![a, b, s], Box::new(move |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let s1 = t.add_scalar(v[2], 1.0);
            let y = t.scale_channels(c, s1)?;
            let r = t.reshape(y, &[2, 18])?;
            project(t, r, seed)
        }))
    });
}

#[test]
fn conv_mse_kernel_gradient() {
    check("mse(conv(x,k), t)", 1e-5, |rng| {
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, rng);
        let k = Tensor::randn(&[1, 2, 3, 3], 1.0, rng);
        let b = Tensor::randn(&[1], 1.0, rng);
        let target = Tensor::randn(&[2, 1, 4, 4], 1.0, rng);
        (vec![k, b], Box::new(move |t, v| {
            let xv = t.constant(x.clone());
            let tv = t.constant(target.clone());
            let y = t.conv2d(xv, v[0], v[1], 1)?;
            t.mse_loss(y, tv)
        }))
    });
}

/// A tensor feeding two consumers (the skip-connection pattern).
fn two_path(tape: &mut Tape<f64>, x: Var, k: Var, b: Var, m1: f64, m2: f64) -> Result<Var> {
    let conv = tape.conv2d(x, k, b, 1)?;
    let act = tape.relu(conv)?;
    let skip = tape.mul_scalar(x, m2);
    let main = tape.mul_scalar(act, m1);
    let cat = tape.concat(&[main, skip])?;
    let sq = tape.mul(cat, cat)?;
    Ok(tape.sum(sq))
}

#[test]
fn shared_tensor_gradient_is_sum_of_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = Tensor::<f64>::randn(&[1, 1, 4, 4], 1.0, &mut rng).with_requires_grad(true);
    let k = Tensor::<f64>::randn(&[1, 1, 3, 3], 1.0, &mut rng);
    let b = Tensor::<f64>::randn(&[1], 1.0, &mut rng);
    let grad_for = |m1: f64, m2: f64| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let kv = tape.constant(k.clone());
        let bv = tape.constant(b.clone());
        let l = two_path(&mut tape, xv, kv, bv, m1, m2).unwrap();
        tape.backward(l).unwrap();
        tape.grad(xv).unwrap().to_vec()
    };
    let both = grad_for(1.0, 1.0);
    let main_only = grad_for(1.0, 0.0);
    let skip_only = grad_for(0.0, 1.0);
    for i in 0..both.len() {
        assert!((both[i] - main_only[i] - skip_only[i]).abs() < 1e-12);
    }
    let report = GradCheck::new(EPS)
        .unwrap()
        .run(
            |t, v| {
                let kv = t.constant(k.clone());
                let bv = t.constant(b.clone());
                two_path(t, v[0], kv, bv, 1.0, 1.0)
            },
            &[x],
        )
        .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}
