//! Baseline JPEG encode/decode at a few qualities: file size and mean error.

use forgelens::imaging::ImageBuffer;
use forgelens::jpeg::{self, Subsampling};
use forgelens::Result;

/// `(quality, encoded bytes, mean absolute sample error)` per quality.
pub fn run_example(qualities: &[u8]) -> Result<Vec<(u8, usize, f64)>> {
    let img = ImageBuffer::from_fn(48, 40, |x, y| {
        let ripple = ((x as f64 / 3.0).sin() * 20.0) as i32;
        [(60 + 3 * x as i32 + ripple) as u8, (200 - 4 * y as i32) as u8, (90 + x + y) as u8]
    })?;
    let mut out = Vec::new();
    for &q in qualities {
        let bytes = jpeg::encode(&img, q, Subsampling::S420)?;
        let back = jpeg::decode(&bytes)?;
        let err: u64 = img.pixels().iter().zip(back.pixels()).map(|(&a, &b)| a.abs_diff(b) as u64).sum();
        out.push((q, bytes.len(), err as f64 / img.pixels().len() as f64));
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    for (q, size, err) in run_example(&[30, 50, 75, 90, 95])? {
        println!("q={q:3}  {size:6} bytes  mean abs error {err:.3}");
    }
    Ok(())
}
