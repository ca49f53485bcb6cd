//! Generates a seeded synthetic crowd dataset and writes it as PNG + JSON pairs.
//!
//! `cargo run --example synth_dataset -- [profile] [count] [out_dir]`

use std::path::PathBuf;

use pandense::synth::{generate_dataset, write_dataset, Profile, SynthConfig};

fn main() -> pandense::Result<()> {
    let mut args = std::env::args().skip(1);
    let profile: Profile = args.next().unwrap_or_else(|| "mixed".into()).parse()?;
    let m: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synth_out".into()));

    let scenes = generate_dataset(profile, m, 0, &SynthConfig::default())?;
    for (i, s) in scenes.iter().enumerate() {
        println!("{i:>3} {:?}: {:>3} heads, dense degree {:.2}", s.kind, s.annotation.count(), s.annotation.dense_degree(5));
    }
    let files = write_dataset(&out, &scenes, "png")?;
    println!("wrote {} annotated images to {}", files.len(), out.display());
    Ok(())
}
