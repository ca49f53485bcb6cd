//! Both training phases on a small mixed dataset: per-level pretraining, then joint
//! training with the composite loss, then whole-image evaluation.

use pandense::geometry::KernelPolicy;
use pandense::datapipe::{prepare_patches, PatchConfig, SourceImage};
use pandense::model::{ModelSpec, PaDNet};
use pandense::pipeline::{evaluate_sources, samples_for};
use pandense::synth::{generate_dataset, Profile, SynthConfig};
use pandense::training::{evaluate, joint_train, pretrain_subnetworks, split_validation, TrainConfig, TrainLog};

fn sources(m: usize, seed: u64) -> pandense::Result<Vec<SourceImage>> {
    Ok(generate_dataset(Profile::Mixed, m, seed, &SynthConfig::default())?
        .into_iter()
        .enumerate()
        .map(|(i, s)| SourceImage { id: format!("s{seed}_{i}"), image: s.image, annotation: s.annotation })
        .collect())
}

fn main() -> pandense::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let spec = ModelSpec::with_levels(2);
    let cfg = TrainConfig { epochs_pretrain: epochs, epochs_joint: epochs, lr: 1e-3, ..TrainConfig::default() };
    let train_src = sources(12, 0)?;
    let manifest = prepare_patches(&train_src, &PatchConfig { resize_to: 128, q: 5 }, spec.levels, 0)?;
    let samples = samples_for(&manifest, &train_src, &KernelPolicy::default(), spec.downsample())?;
    let levels: Vec<usize> = samples.iter().map(|s| s.level).collect();
    let (train, val) = split_validation(&levels, spec.levels, cfg.val_fraction, cfg.seed);
    println!("{} train / {} val patches, level sizes {:?}", train.len(), val.len(), manifest.level_sizes());

    let mut model = PaDNet::<f32>::build(&spec, cfg.seed)?;
    let pre = pretrain_subnetworks(&mut model, &samples, &train, &val, &cfg, &mut TrainLog::new())?;
    println!("pretrain best val MAE per level {:?}", pre.best_val_mae);
    for j in 0..spec.levels {
        println!("subnetwork {j} alone: val MAE {:.3}", evaluate(&mut model, &samples, &val, Some(j))?.0);
    }
    let joint = joint_train(&mut model, &samples, &train, &val, &cfg, &mut TrainLog::new())?;
    println!("joint best val MAE {:.3} (epoch {})", joint.best_val_mae, joint.best_epoch);

    let report = evaluate_sources(&mut model, &sources(4, 1)?, &KernelPolicy::default(), &[1, 4, 16])?;
    println!("test MAE {:.2} RMSE {:.2} PMAE {:?}", report.mae, report.rmse, report.pmae);
    Ok(())
}
