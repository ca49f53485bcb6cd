//! Quick self-checks behind `pandense verify`.

use pandense_tensor::{GradCheck, GradCheckReport, NormMode, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{generate_density_map, sum_pool_downsample, KernelPolicy, PointAnnotation};
use crate::metrics::{mae_rmse, pmae_prmse};
use crate::model::{ModelSpec, PaDNet};
use crate::persist::{load_checkpoint, save_checkpoint};
use crate::training::loss_on_tape;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Finite-difference check of a full train-mode forward plus composite loss, over the
/// input image and up to `coords` evenly spaced entries of every parameter tensor.
pub fn model_grad_check(spec: &ModelSpec, seed: u64, side: usize, coords: usize, lambda: f64) -> Result<GradCheckReport> {
    let model = PaDNet::<f64>::build(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe5);
    let d = spec.downsample();
    let x = Tensor::<f64>::uniform(&[1, spec.input_channels, side, side], 0.0, 1.0, &mut rng);
    let target = Tensor::<f64>::uniform(&[1, 1, side / d, side / d], 0.0, 0.2, &mut rng);
    let mut inputs = vec![x];
    inputs.extend(model.params.iter().map(|p| p.value.clone()));
    let level = rng.random_range(0..spec.levels);
    let lambda = if spec.has_classifier() { lambda } else { 0.0 };
    let other = |e: crate::Error| TensorError::Other(e.to_string());
    Ok(GradCheck::new(1e-5)?.max_coords_per_input(coords).kink_aware(1e-4).run(
        |tape, vars| {
            let mut m = model.clone();
            for (id, &v) in vars[1..].iter().enumerate() {
                tape.bind_param(id, v);
            }
            let out = m.forward(tape, vars[0], NormMode::Train).map_err(other)?;
            let t = tape.constant(target.clone());
            Ok(loss_on_tape(tape, out.density, t, out.weights, &[level], lambda).map_err(other)?.total)
        },
        &inputs,
    )?)
}

fn check(name: &'static str, result: Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

pub fn run_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    out.push(check("model gradient", (|| {
        let r = model_grad_check(&ModelSpec::default(), seed, 32, 4, 0.1)?;
        Ok((r.max_rel_error < 1e-4, format!("max rel error {:.2e} over {} coords", r.max_rel_error, r.coords_checked)))
    })()));
    out.push(check("density mass", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let p = rng.random_range(0..=120);
            let pts = (0..p).map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..48.0)]).collect();
            let ann = PointAnnotation::new(64, 48, pts);
            let map = generate_density_map(&ann, &KernelPolicy::default())?;
            let pooled = sum_pool_downsample(&map, 4)?;
            worst = worst.max((map.sum() - p as f64).abs() / (p.max(1) as f64));
            worst = worst.max((pooled.sum() - map.sum()).abs() / map.sum().max(1.0));
        }
        Ok((worst < 1e-4, format!("worst relative mass error {worst:.2e}")))
    })()));
    out.push(check("metric degeneracy", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<_> = (0..8)
            .map(|_| crate::geometry::DensityMap::new(8, 8, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()))
            .collect::<Result<_>>()?;
        let (est, gt) = maps.split_at(4);
        let e: Vec<_> = est.iter().collect();
        let g: Vec<_> = gt.iter().collect();
        let counts = |v: &[&crate::geometry::DensityMap]| v.iter().map(|m| m.sum()).collect::<Vec<_>>();
        let whole = mae_rmse(&counts(&e), &counts(&g))?;
        let split = pmae_prmse(&e, &g, 1)?;
        Ok((whole == split, format!("mae/rmse {whole:?}, n=1 {split:?}")))
    })()));
    out.push(check("live parameters", (|| {
        let model = PaDNet::<f32>::build(&ModelSpec::default(), seed)?;
        let dead = model.dead_parameters(32, seed)?;
        Ok((dead.is_empty(), format!("{} dead: {dead:?}", dead.len())))
    })()));
    out.push(check("checkpoint round trip", (|| {
        let mut model = PaDNet::<f32>::build(&ModelSpec::default(), seed)?;
        let dir = std::env::temp_dir().join(format!("pandense-verify-{}-{seed}", std::process::id()));
        save_checkpoint(&model, &dir)?;
        let mut back = load_checkpoint(&dir)?;
        let _ = std::fs::remove_dir_all(&dir);
        let x = Tensor::uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let same = model.predict(&x)?.data().iter().zip(back.predict(&x)?.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        Ok((same, "eval-mode outputs bit-identical".to_string()))
    })()));
    out
}
