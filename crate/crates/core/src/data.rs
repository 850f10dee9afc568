//! Image classification datasets: the `CAVD` file format and synthetic generators.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binfmt::{len_u32, put_u32, Reader};
use crate::error::{Error, FormatError, Result};
use crate::model::ModelConfig;
use crate::tensor::{Real, Tensor};

pub const DATASET_MAGIC: &str = "CAVD";
pub const DATASET_VERSION: u32 = 1;
/// Amplitude of the additive uniform noise in the synthetic sets.
pub const NOISE_AMPLITUDE: f64 = 0.1;

/// Labelled u8 images stored `[count, in_channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    in_channels: usize,
    height: usize,
    width: usize,
    n_classes: usize,
    labels: Vec<u8>,
    pixels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        n_classes: usize,
        labels: Vec<u8>,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if labels.is_empty() || in_channels == 0 || height == 0 || width == 0 {
            return Err(Error::config("dataset needs at least one non-empty image"));
        }
        if n_classes == 0 || n_classes > 256 {
            return Err(Error::config(format!("n_classes must be in 1..=256, got {n_classes}")));
        }
        if pixels.len() != labels.len() * in_channels * height * width {
            return Err(Error::config(format!(
                "{} pixels do not fill {} images of {in_channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::config(format!("label {l} out of range for {n_classes} classes")));
        }
        Ok(Dataset {
            in_channels,
            height,
            width,
            n_classes,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixels per image.
    pub fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    /// New dataset holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut labels = Vec::with_capacity(indices.len());
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    op: "subset",
                    index: i,
                    extent: self.len(),
                });
            }
            labels.push(self.labels[i]);
            pixels.extend_from_slice(self.image(i));
        }
        Dataset::new(self.in_channels, self.height, self.width, self.n_classes, labels, pixels)
    }

    /// Shuffle with `seed` and cut off the last `val_fraction` (rounded) as validation.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
            return Err(Error::config(format!("validation fraction must be in (0, 1), got {val_fraction}")));
        }
        let n_val = (self.len() as f64 * val_fraction).round() as usize;
        if n_val == 0 || n_val >= self.len() {
            return Err(Error::config(format!(
                "cannot split {} samples with validation fraction {val_fraction}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (train, val) = idx.split_at(self.len() - n_val);
        Ok((self.subset(train)?, self.subset(val)?))
    }

    /// Images of `indices` scaled to `[0, 1]` by `x / 255`, with their labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        let scale = T::lit(1.0 / 255.0);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    op: "batch",
                    index: i,
                    extent: self.len(),
                });
            }
            data.extend(self.image(i).iter().map(|&p| T::lit(p as f64) * scale));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::new([indices.len(), self.in_channels, self.height, self.width], data)?;
        Ok((t, labels))
    }

    /// Check that the images fit `cfg` and every label is a valid class.
    pub fn check_geometry(&self, cfg: &ModelConfig) -> Result<()> {
        if self.in_channels != cfg.in_channels || self.height != cfg.image_size || self.width != cfg.image_size {
            return Err(Error::config(format!(
                "dataset images are {}x{}x{}, model expects {}x{}x{}",
                self.in_channels, self.height, self.width, cfg.in_channels, cfg.image_size, cfg.image_size
            )));
        }
        if self.n_classes > cfg.n_classes {
            return Err(Error::config(format!(
                "dataset has {} classes, model head has {}",
                self.n_classes, cfg.n_classes
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(28 + self.labels.len() + self.pixels.len());
        out.extend_from_slice(DATASET_MAGIC.as_bytes());
        put_u32(&mut out, DATASET_VERSION);
        put_u32(&mut out, len_u32("count", self.len())?);
        put_u32(&mut out, len_u32("in_channels", self.in_channels)?);
        put_u32(&mut out, len_u32("height", self.height)?);
        put_u32(&mut out, len_u32("width", self.width)?);
        put_u32(&mut out, len_u32("n_classes", self.n_classes)?);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let count = r.positive("count")? as usize;
        let in_channels = r.positive("in_channels")? as usize;
        let height = r.positive("height")? as usize;
        let width = r.positive("width")? as usize;
        let classes_at = r.offset();
        let n_classes = r.positive("n_classes")?;
        if n_classes > 256 {
            return Err(FormatError::InvalidHeader {
                field: "n_classes",
                offset: classes_at,
                value: n_classes.into(),
            });
        }
        let image_len = in_channels * height * width;
        let mut labels = Vec::with_capacity(count.min(bytes.len()));
        let mut pixels = Vec::with_capacity((count * image_len).min(bytes.len()));
        for _ in 0..count {
            let at = r.offset();
            let label = r.u8()?;
            if label as u32 >= n_classes {
                return Err(FormatError::LabelOutOfRange {
                    offset: at,
                    label,
                    n_classes,
                });
            }
            labels.push(label);
            pixels.extend_from_slice(r.take(image_len)?);
        }
        r.finish()?;
        Ok(Dataset {
            in_channels,
            height,
            width,
            n_classes: n_classes as usize,
            labels,
            pixels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Dataset::decode(&bytes)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Horizontal (class 0) or vertical (class 1) stripes.
    Bars,
    /// One Gaussian blob in the quadrant named by the label.
    Blobs,
}

impl SyntheticKind {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::Bars => "bars",
            SyntheticKind::Blobs => "blobs",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            SyntheticKind::Bars => 2,
            SyntheticKind::Blobs => 4,
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bars" => Ok(SyntheticKind::Bars),
            "blobs" => Ok(SyntheticKind::Blobs),
            _ => Err(Error::config(format!("unknown dataset kind {s:?} (expected bars or blobs)"))),
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministic single-channel synthetic images. Sample `i` gets label
/// `i mod n_classes`; every pixel is `clamp(signal + u, 0, 1)` quantized to u8 with
/// `u ~ U(-0.1, 0.1)`.
///
/// * bars: stripes of thickness `t = max(1, ⌊3W/32⌋)` starting with a bright stripe
///   at the top (class 0, `signal = 1` iff `(y / t)` is even) or left edge (class 1,
///   same rule on `x`). At `W = 32` the period of 6 does not divide an 8-pixel
///   patch, so patches differ across the image.
/// * blobs: `signal = exp(-((x-cx)² + (y-cy)²) / (2σ²))` with `σ = W / 8` and the
///   centre at the middle of quadrant `label` (row-major: top-left, top-right,
///   bottom-left, bottom-right), jittered by up to `W / 16` in each axis.
pub fn gen_synthetic(kind: SyntheticKind, count: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if count < 2 {
        return Err(Error::config(format!("synthetic datasets need at least 2 samples, got {count}")));
    }
    if image_size < 2 {
        return Err(Error::config(format!("image_size must be at least 2, got {image_size}")));
    }
    let w = image_size;
    let k = kind.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * w * w);
    for i in 0..count {
        let label = i % k;
        labels.push(label as u8);
        match kind {
            SyntheticKind::Bars => {
                let t = (3 * w / 32).max(1);
                for y in 0..w {
                    for x in 0..w {
                        let coord = if label == 0 { y } else { x };
                        let signal = if (coord / t) % 2 == 0 { 1.0 } else { 0.0 };
                        let noise = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                        pixels.push(quantize(signal + noise));
                    }
                }
            }
            SyntheticKind::Blobs => {
                let wf = w as f64;
                let sigma = wf / 8.0;
                let jitter = wf / 16.0;
                let cx = if label % 2 == 0 { 0.25 } else { 0.75 } * wf + rng.random_range(-jitter..=jitter);
                let cy = if label < 2 { 0.25 } else { 0.75 } * wf + rng.random_range(-jitter..=jitter);
                for y in 0..w {
                    for x in 0..w {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        let signal = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        let noise = rng.random_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                        pixels.push(quantize(signal + noise));
                    }
                }
            }
        }
    }
    Dataset::new(1, w, w, k, labels, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Dataset {
        Dataset::new(1, 4, 4, 2, vec![1], (0..16).collect()).unwrap()
    }

    #[test]
    fn minimal_round_trip() {
        let d = minimal();
        let bytes = d.encode().unwrap();
        assert_eq!(bytes.len(), 28 + 1 + 16);
        let back = Dataset::decode(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn corrupt_headers() {
        let bytes = minimal().encode().unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"CAVT");
        let err = Dataset::decode(&bad).unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { expected: "CAVD", .. }));
        assert!(err.to_string().contains("CAVD"));

        let mut bad = bytes.clone();
        bad[28] = 2;
        assert_eq!(
            Dataset::decode(&bad),
            Err(FormatError::LabelOutOfRange {
                offset: 28,
                label: 2,
                n_classes: 2
            })
        );

        assert!(matches!(
            Dataset::decode(&bytes[..40]),
            Err(FormatError::Truncated { offset: 29, .. })
        ));

        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Dataset::decode(&bad),
            Err(FormatError::InvalidHeader { field: "count", offset: 8, .. })
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Dataset::decode(&long), Err(FormatError::TrailingBytes { .. })));
    }

    #[test]
    fn rejects_bad_labels_on_construction() {
        assert!(Dataset::new(1, 2, 2, 2, vec![2], vec![0; 4]).is_err());
        assert!(Dataset::new(1, 2, 2, 2, vec![0], vec![0; 3]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        for kind in [SyntheticKind::Bars, SyntheticKind::Blobs] {
            let a = gen_synthetic(kind, 101, 16, 42).unwrap();
            let b = gen_synthetic(kind, 101, 16, 42).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, gen_synthetic(kind, 101, 16, 43).unwrap());
            let counts = a.class_counts();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{kind}: {counts:?}");
        }
        assert!(gen_synthetic(SyntheticKind::Bars, 1, 16, 0).is_err());
    }

    #[test]
    fn bars_pattern() {
        let d = gen_synthetic(SyntheticKind::Bars, 2, 32, 0).unwrap();
        // thickness 3: rows 0-2 bright, 3-5 dark, 6-8 bright in the horizontal image
        let bright = |p: u8| p >= 229;
        let dark = |p: u8| p <= 26;
        let h = d.image(0);
        assert!(bright(h[0]) && bright(h[64 + 7]) && dark(h[96]) && dark(h[160 + 31]) && bright(h[192]));
        let v = d.image(1);
        assert!(bright(v[0]) && bright(v[2]) && dark(v[3]) && dark(v[32 + 5]) && bright(v[6]));
        for p in d.pixels() {
            assert!(bright(*p) || dark(*p));
        }
    }

    #[test]
    fn blob_peaks_in_its_quadrant() {
        let d = gen_synthetic(SyntheticKind::Blobs, 8, 32, 1).unwrap();
        for i in 0..8 {
            let img = d.image(i);
            let argmax = (0..img.len()).max_by_key(|&j| img[j]).unwrap();
            let (y, x) = (argmax / 32, argmax % 32);
            let quadrant = (y >= 16) as usize * 2 + (x >= 16) as usize;
            assert_eq!(quadrant, d.labels()[i] as usize);
        }
    }

    #[test]
    fn split_and_batch() {
        let d = gen_synthetic(SyntheticKind::Bars, 640, 32, 42).unwrap();
        let (tr, va) = d.split(0.2, 42).unwrap();
        assert_eq!((tr.len(), va.len()), (512, 128));
        let (tr2, _) = d.split(0.2, 42).unwrap();
        assert_eq!(tr, tr2);
        let (x, y) = tr.batch::<f32>(&[0, 3]).unwrap();
        assert_eq!(x.dims(), &[2, 1, 32, 32]);
        assert_eq!(y, vec![tr.labels()[0] as usize, tr.labels()[3] as usize]);
        assert_eq!(x.data()[0], tr.image(0)[0] as f32 / 255.0);
        assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(d.split(0.0, 1).is_err());
        assert!(tr.batch::<f32>(&[512]).is_err());
    }

    #[test]
    fn geometry_check() {
        let d = gen_synthetic(SyntheticKind::Bars, 4, 32, 0).unwrap();
        d.check_geometry(&ModelConfig::desk()).unwrap();
        let small = gen_synthetic(SyntheticKind::Bars, 4, 16, 0).unwrap();
        assert!(matches!(small.check_geometry(&ModelConfig::desk()), Err(Error::Config(_))));
        let blobs = gen_synthetic(SyntheticKind::Blobs, 4, 32, 0).unwrap();
        assert!(blobs.check_geometry(&ModelConfig::desk()).is_err());
    }
}
