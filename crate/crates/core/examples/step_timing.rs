//! Times forward and backward passes of the default model on a batch of patches.

use std::time::Instant;

use pandense::model::{ModelSpec, PaDNet};
use pandense_tensor::{NormMode, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> pandense::Result<()> {
    let levels: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let spec = ModelSpec::with_levels(levels);
    let mut model = PaDNet::<f32>::build(&spec, 0)?;
    println!("N={levels} params={}", model.parameter_count());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[batch, 1, 64, 64], 0.0, 1.0, &mut rng);
    let t = Tensor::uniform(&[batch, 1, 16, 16], 0.0, 0.1, &mut rng);
    for _ in 0..3 {
        let start = Instant::now();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, xv, NormMode::Train)?;
        let tv = tape.constant(t.clone());
        let loss = tape.mse_loss(out.density, tv)?;
        let fwd = start.elapsed();
        tape.backward(loss)?;
        println!("forward {:?} total {:?}", fwd, start.elapsed());
    }
    Ok(())
}
