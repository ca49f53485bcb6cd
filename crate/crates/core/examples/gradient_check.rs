//! Finite-difference check of a full PaDNet forward pass plus composite loss in f64.

use pandense::model::ModelSpec;
use pandense::verify::model_grad_check;

fn main() -> pandense::Result<()> {
    let levels: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let r = model_grad_check(&ModelSpec::with_levels(levels), 1, 32, 6, 0.1)?;
    println!(
        "{} coords, max relative error {:.2e} (central only {:.2e}, {} at a kink)",
        r.coords_checked, r.max_rel_error, r.max_central_error, r.nonsmooth
    );
    Ok(())
}
