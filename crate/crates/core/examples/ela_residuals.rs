//! Error level analysis of one synthetic spliced image. The pasted region was
//! compressed differently, so its residual stands out.

use std::path::Path;

use forgelens::dataset::{self, FixtureSpec, FAKE};
use forgelens::ela::{self, ElaConfig};
use forgelens::rng;
use forgelens::Result;

/// Mean residual inside and outside the splice; writes the image, its
/// residual and a brightened view into `out`.
pub fn run_example(out: &Path) -> Result<(f64, f64)> {
    let (img, rect) = dataset::fixture_image(&FixtureSpec::default(), FAKE, &mut rng::stream(3, "ela_example"))?;
    let rect = rect.expect("fakes carry a splice");
    let residual = ela::ela_transform(&img, &ElaConfig::default())?;
    std::fs::create_dir_all(out).map_err(|e| forgelens::Error::Io { path: out.into(), source: e })?;
    img.save_png(&out.join("spliced.png"))?;
    residual.as_image().save_png(&out.join("residual.png"))?;
    residual.to_display(20.0).save_png(&out.join("residual_x20.png"))?;
    Ok((residual.mean_region(rect, true), residual.mean_region(rect, false)))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("forgelens_ela_example");
    let (inside, outside) = run_example(&dir)?;
    println!("mean residual inside splice {inside:.3}, outside {outside:.3}");
    println!("images written to {}", dir.display());
    Ok(())
}
