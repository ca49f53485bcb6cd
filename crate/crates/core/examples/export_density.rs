//! Predicts a density map for one image and writes it as DMAP and heatmap PNG.
//!
//! `cargo run --example export_density -- [checkpoint_dir] [image]`
//! Without arguments an untrained model runs on a synthetic image.

use std::path::Path;

use pandense::model::{ModelSpec, PaDNet};
use pandense::persist::{heatmap, load_checkpoint, read_dmap, write_dmap};
use pandense::pipeline::predict_map;
use pandense::raster::Raster;
use pandense::synth::{generate_dataset, Profile, SynthConfig};

fn main() -> pandense::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (mut model, image) = match args.as_slice() {
        [ckpt, img, ..] => (load_checkpoint(Path::new(ckpt))?, Raster::load(Path::new(img), 1)?),
        _ => {
            let scene = generate_dataset(Profile::Pan, 1, 3, &SynthConfig::default())?.remove(0);
            (PaDNet::<f32>::build(&ModelSpec::with_levels(2), 0)?, scene.image)
        }
    };
    let map = predict_map(&mut model, &image)?;
    write_dmap(Path::new("prediction.dmap"), &map)?;
    heatmap(&map).save(Path::new("prediction.png"))?;
    let back = read_dmap(Path::new("prediction.dmap"))?;
    println!("{}x{} image -> {}x{} map, count {:.2}, round trip exact: {}", image.width, image.height, map.width, map.height, map.sum(), back == map);
    Ok(())
}
