//! Cuts patches from a mixed synthetic dataset, clusters them into density levels
//! and balances the levels.

use pandense::datapipe::{prepare_patches, PatchConfig, SourceImage};
use pandense::synth::{generate_dataset, Profile, SynthConfig};

fn main() -> pandense::Result<()> {
    let levels: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let sources: Vec<SourceImage> = generate_dataset(Profile::Mixed, 16, 1, &SynthConfig::default())?
        .into_iter()
        .enumerate()
        .map(|(i, s)| SourceImage { id: format!("img_{i:04}"), image: s.image, annotation: s.annotation })
        .collect();
    let manifest = prepare_patches(&sources, &PatchConfig { resize_to: 128, q: 5 }, levels, 0)?;
    println!("{} patches, centroids {:?}", manifest.patches.len(), manifest.centroids);
    for (l, size) in manifest.level_sizes().iter().enumerate() {
        let counts: Vec<usize> = manifest.patches.iter().filter(|p| p.level == Some(l)).map(|p| p.count).collect();
        let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
        println!("level {l}: {size} patches, mean count {mean:.1}");
    }
    Ok(())
}
