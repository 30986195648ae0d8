//! Dataset discovery, stratified splitting, batch loading and the synthetic
//! fixture generator.
//!
//! Layout on disk is `<root>/real/*.{jpg,jpeg,png}` and `<root>/fake/*`. Labels
//! come only from the directory: real = 0, fake = 1.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor};
use crate::ela::is_image_file;
use crate::error::{config_err, Error, Result};
use crate::imaging::ImageBuffer;
use crate::jpeg::{self, Subsampling};
use crate::rng::{self, Rng};

pub const REAL: usize = 0;
pub const FAKE: usize = 1;
pub const CLASS_DIRS: [&str; 2] = ["real", "fake"];
pub const DEFAULT_SPLIT_RATIO: f64 = 0.8;
pub const DEFAULT_IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(config_err!("unknown split '{}' (expected train or test)", s)),
        }
    }
}

/// One labeled image; `path` is relative to the manifest root, `/`-separated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    pub seed: u64,
    pub split_ratio: f64,
}

/// Lists `(relative path, label)` for every image under `real/` and `fake/`,
/// sorted by path.
pub fn scan_dataset(root: &Path) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for (label, dir) in CLASS_DIRS.iter().enumerate() {
        let class_root = root.join(dir);
        if !class_root.is_dir() {
            return Err(Error::Data(format!("missing class directory {}", class_root.display())));
        }
        for entry in walkdir::WalkDir::new(&class_root) {
            let entry = entry.map_err(|e| {
                Error::io(&class_root, e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")))
            })?;
            if entry.file_type().is_file() && is_image_file(entry.path()) {
                let rel = entry.path().strip_prefix(root).expect("under root");
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.push((rel, label));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no images under {}", root.display())));
    }
    out.sort();
    Ok(out)
}

/// Stratified seeded split: each class contributes `round(ratio · n_class)`
/// records to train, chosen by a seeded shuffle.
pub fn split(root: &Path, records: &[(String, usize)], ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(config_err!("split ratio must lie in (0, 1), got {}", ratio));
    }
    let mut rng = rng::stream(seed, "dataset_split");
    let mut split = vec![Split::Test; records.len()];
    for class in [REAL, FAKE] {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].1 == class).collect();
        if idx.is_empty() {
            return Err(Error::Data(format!("class '{}' has no records", CLASS_DIRS[class])));
        }
        idx.shuffle(&mut rng);
        let n_train = (ratio * idx.len() as f64).round() as usize;
        for &i in &idx[..n_train] {
            split[i] = Split::Train;
        }
    }
    if let Some((p, l)) = records.iter().find(|r| r.1 > FAKE) {
        return Err(Error::Data(format!("record {p} has label {l}; only 0 and 1 are valid")));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        records: records
            .iter()
            .zip(split)
            .map(|((path, label), split)| ImageRecord {
                path: path.clone(),
                label: *label,
                split,
            })
            .collect(),
        seed,
        split_ratio: ratio,
    })
}

impl DatasetManifest {
    /// Scans `root` and splits it in one go.
    pub fn build(root: &Path, ratio: f64, seed: u64) -> Result<Self> {
        split(root, &scan_dataset(root)?, ratio, seed)
    }

    /// Record indices belonging to `split`, in record order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.records[i].label).collect()
    }

    pub fn path_of(&self, index: usize) -> PathBuf {
        self.root.join(&self.records[index].path)
    }

    /// One JSON object `{path,label,split}` per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(root: &Path, path: &Path, seed: u64, split_ratio: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ImageRecord>, _>>()?;
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            records,
            seed,
            split_ratio,
        })
    }
}

/// Per-channel affine normalization applied after scaling to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Converts decoded images to a normalized `[N, 3, S, S]` tensor.
pub fn images_to_tensor<F: Element>(images: &[ImageBuffer], size: usize, norm: &Normalization) -> Result<Tensor<F>> {
    if size == 0 {
        return Err(config_err!("image size must be positive"));
    }
    let plane = size * size;
    let mut data = vec![F::zero(); images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        let px = img.resize_bilinear(size, size);
        for p in 0..plane {
            for c in 0..3 {
                let v = (px[p * 3 + c] / 255.0 - norm.mean[c]) / norm.std[c];
                data[(n * 3 + c) * plane + p] = F::from_f64(v);
            }
        }
    }
    Tensor::new(&[images.len(), 3, size, size], data)
}

/// Decodes, resizes and normalizes the records at `indices` (decoding runs in
/// parallel; output order follows `indices`).
pub fn load_batch<F: Element>(
    manifest: &DatasetManifest,
    indices: &[usize],
    size: usize,
    norm: &Normalization,
) -> Result<(Tensor<F>, Vec<usize>)> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= manifest.records.len()) {
        return Err(Error::Data(format!("record index {bad} out of range ({} records)", manifest.records.len())));
    }
    let images = indices
        .par_iter()
        .map(|&i| ImageBuffer::open(&manifest.path_of(i)))
        .collect::<Result<Vec<_>>>()?;
    let x = images_to_tensor(&images, size, norm)?;
    if !x.all_finite() {
        return Err(Error::NonFinite("normalized batch (check normalization std)".into()));
    }
    Ok((x, manifest.labels(indices)))
}

/// Synthetic stand-in for a real/fake face corpus.
///
/// Real images are smooth color gradients with Gaussian noise, saved after one
/// JPEG pass at quality 90. Fakes are the same kind of image with a rectangle
/// pasted from a different source that went through a near-lossless JPEG pass,
/// so the splice carries a different compression history than its surroundings.
/// With `splice_probability < 1` some fakes carry no splice at all and look
/// exactly like reals, which caps the achievable test accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub size: usize,
    pub base_quality: u8,
    pub splice_quality: u8,
    pub noise_sigma: f64,
    pub splice_probability: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            size: 64,
            base_quality: 90,
            splice_quality: 99,
            noise_sigma: 6.0,
            splice_probability: 1.0,
        }
    }
}

fn gradient_image(size: usize, sigma: f64, rng: &mut Rng) -> Result<ImageBuffer> {
    let base: [f64; 3] = [rng.random_range(40.0..200.0), rng.random_range(40.0..200.0), rng.random_range(40.0..200.0)];
    let gx: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let gy: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let noise = Normal::new(0.0, sigma).map_err(|e| config_err!("noise sigma: {e}"))?;
    let c = size as f64 / 2.0;
    ImageBuffer::from_fn(size, size, |x, y| {
        let mut px = [0u8; 3];
        for ch in 0..3 {
            let v = base[ch] + gx[ch] * (x as f64 - c) + gy[ch] * (y as f64 - c) + noise.sample(rng);
            px[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
        px
    })
}

/// Splice rectangle `(x0, y0, x1, y1)` used for fake `index` of a fixture.
fn splice_rect(size: usize, rng: &mut Rng) -> (usize, usize, usize, usize) {
    let w = rng.random_range(size * 3 / 8..=size / 2);
    let h = rng.random_range(size * 3 / 8..=size / 2);
    let x0 = rng.random_range(2..size - w - 1);
    let y0 = rng.random_range(2..size - h - 1);
    (x0, y0, x0 + w, y0 + h)
}

/// One fixture image pair member. Returns the image and, for fakes, the
/// splice rectangle.
pub fn fixture_image(
    spec: &FixtureSpec,
    label: usize,
    rng: &mut Rng,
) -> Result<(ImageBuffer, Option<(usize, usize, usize, usize)>)> {
    let base = gradient_image(spec.size, spec.noise_sigma, rng)?;
    let mut img = jpeg::roundtrip(&base, spec.base_quality, Subsampling::S420)?;
    if label == REAL || (spec.splice_probability < 1.0 && !rng.random_bool(spec.splice_probability)) {
        return Ok((img, None));
    }
    let donor = gradient_image(spec.size, spec.noise_sigma * 2.0, rng)?;
    let donor = jpeg::roundtrip(&donor, spec.splice_quality, Subsampling::S420)?;
    let rect = splice_rect(spec.size, rng);
    for y in rect.1..rect.3 {
        for x in rect.0..rect.2 {
            img.set_pixel(x, y, donor.pixel(x, y));
        }
    }
    Ok((img, Some(rect)))
}

/// Writes `n_per_class` PNG images into each of `out_root/real` and
/// `out_root/fake`. Same seed, same bytes.
pub fn make_fixture_dataset(out_root: &Path, n_per_class: usize, seed: u64) -> Result<PathBuf> {
    make_fixture_dataset_with(out_root, n_per_class, seed, &FixtureSpec::default())
}

pub fn make_fixture_dataset_with(out_root: &Path, n_per_class: usize, seed: u64, spec: &FixtureSpec) -> Result<PathBuf> {
    if n_per_class == 0 {
        return Err(config_err!("fixture needs at least one image per class"));
    }
    if !(0.0..=1.0).contains(&spec.splice_probability) {
        return Err(config_err!("splice probability must lie in [0, 1], got {}", spec.splice_probability));
    }
    if spec.size < 16 {
        return Err(config_err!("fixture image size must be at least 16, got {}", spec.size));
    }
    for (label, dir) in CLASS_DIRS.iter().enumerate() {
        let class_dir = out_root.join(dir);
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let mut rng = rng::stream(seed, &format!("fixture_{dir}"));
        let width = n_per_class.to_string().len().max(4);
        for i in 0..n_per_class {
            let (img, _) = fixture_image(spec, label, &mut rng)?;
            img.save_png(&class_dir.join(format!("{dir}_{i:0width$}.png")))?;
        }
    }
    Ok(out_root.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ela::{ela_transform, ElaConfig};

    fn tree(n_real: usize, n_fake: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (n, d) in [(n_real, "real"), (n_fake, "fake")] {
            std::fs::create_dir_all(dir.path().join(d)).unwrap();
            for i in 0..n {
                ImageBuffer::filled(4, 4, [i as u8; 3]).unwrap().save_png(&dir.path().join(format!("{d}/{i}.png"))).unwrap();
            }
        }
        dir
    }

    #[test]
    fn scan_labels_by_directory() {
        let dir = tree(3, 2);
        let recs = scan_dataset(dir.path()).unwrap();
        let mut labels: Vec<usize> = recs.iter().map(|r| r.1).collect();
        labels.sort();
        assert_eq!(labels, vec![0, 0, 0, 1, 1]);
        assert!(recs.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(recs, scan_dataset(dir.path()).unwrap());
    }

    #[test]
    fn scan_rejects_missing_or_empty() {
        let empty = tempfile::tempdir().unwrap();
        assert!(scan_dataset(empty.path()).is_err());
        assert!(scan_dataset(tree(0, 0).path()).is_err());
    }

    #[test]
    fn split_is_a_stratified_partition() {
        let dir = tree(5, 5);
        let recs = scan_dataset(dir.path()).unwrap();
        let m = split(dir.path(), &recs, 0.8, 7).unwrap();
        assert_eq!(m.indices(Split::Train).len(), 8);
        assert_eq!(m.indices(Split::Test).len(), 2);
        assert_eq!(m, split(dir.path(), &recs, 0.8, 7).unwrap());

        let recs: Vec<(String, usize)> = (0..100).map(|i| (format!("{i:03}"), i % 2)).collect();
        let m = split(dir.path(), &recs, 0.8, 3).unwrap();
        for class in [REAL, FAKE] {
            let n = m.records.iter().filter(|r| r.label == class && r.split == Split::Train).count();
            assert!(n.abs_diff(40) <= 1);
        }
        assert!(split(dir.path(), &recs, 1.0, 3).is_err());
        let only_real: Vec<(String, usize)> = vec![("a".into(), 0)];
        assert!(split(dir.path(), &only_real, 0.5, 3).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tree(2, 2);
        let m = DatasetManifest::build(dir.path(), 0.5, 1).unwrap();
        let path = dir.path().join("m.jsonl");
        m.write_jsonl(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
        assert_eq!(DatasetManifest::read_jsonl(dir.path(), &path, 1, 0.5).unwrap(), m);
    }

    #[test]
    fn constant_image_normalizes_near_zero() {
        let dir = tempfile::tempdir().unwrap();
        for d in CLASS_DIRS {
            ImageBuffer::filled(8, 8, [128; 3]).unwrap().save_png(&dir.path().join(format!("{d}/a.png"))).unwrap();
        }
        let m = DatasetManifest::build(dir.path(), 0.5, 1).unwrap();
        let (x, y) = load_batch::<f32>(&m, &[0], 16, &Normalization::default()).unwrap();
        assert_eq!(x.shape(), &[1, 3, 16, 16]);
        let expected = (128.0 / 255.0 - 0.5) / 0.5;
        assert!(x.data().iter().all(|&v| (f64::from(v) - expected).abs() < 1e-6));
        assert_eq!(y.len(), 1);
    }

    #[test]
    fn checkerboard_resize_matches_reference() {
        let img = ImageBuffer::from_fn(6, 6, |x, y| if (x + y) % 2 == 0 { [255; 3] } else { [0; 3] }).unwrap();
        let out = img.resize_bilinear(4, 4);
        // Reference: half-pixel mapping, written out per output pixel.
        for oy in 0..4 {
            for ox in 0..4 {
                let src = |o: usize| ((o as f64 + 0.5) * 1.5 - 0.5).max(0.0);
                let (sx, sy) = (src(ox), src(oy));
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(5), (y0 + 1).min(5));
                let v = |x: usize, y: usize| if (x + y).is_multiple_of(2) { 255.0 } else { 0.0 };
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let r = v(x0, y0) * (1.0 - fx) * (1.0 - fy) + v(x1, y0) * fx * (1.0 - fy) + v(x0, y1) * (1.0 - fx) * fy + v(x1, y1) * fx * fy;
                assert!((out[(oy * 4 + ox) * 3] - r).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn fixture_layout_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_fixture_dataset(a.path(), 2, 11).unwrap();
        make_fixture_dataset(b.path(), 2, 11).unwrap();
        let recs = scan_dataset(a.path()).unwrap();
        assert_eq!(recs.len(), 4);
        for (p, _) in recs {
            assert_eq!(std::fs::read(a.path().join(&p)).unwrap(), std::fs::read(b.path().join(&p)).unwrap());
        }
        assert!(make_fixture_dataset(a.path(), 0, 1).is_err());
    }

    #[test]
    fn fixture_fakes_light_up_under_ela() {
        let spec = FixtureSpec::default();
        let mut rng = rng::rng_from_seed(5);
        for _ in 0..10 {
            let (img, rect) = fixture_image(&spec, FAKE, &mut rng).unwrap();
            let ela = ela_transform(&img, &ElaConfig::default()).unwrap();
            let rect = rect.unwrap();
            let (inside, outside) = (ela.mean_region(rect, true), ela.mean_region(rect, false));
            assert!(inside > outside, "inside {inside} outside {outside}");
        }
    }
}
