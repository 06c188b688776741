//! Synthetic segmentation data and PGM/PPM dataset ingestion.
//!
//! Dataset directory layout: `<root>/images/<id>.pgm` (or `.ppm` for RGB)
//! and `<root>/masks/<id>.pgm`. Images load scaled to [0,1]; masks binarize
//! at 0.5.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image/mask pair. `image` is [C,H,W] in [0,1]; `mask` is [H,W] with
/// values exactly 0 or 1.
#[derive(Clone)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
    pub id: String,
}

impl Sample {
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.mask.shape();
        (s[0], s[1])
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }
}

impl fmt::Debug for Sample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sample({}, {:?})", self.id, self.image.shape())
    }
}

/// Foreground shape families for the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Ellipse,
    BlobUnion,
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "ellipse" => Ok(ShapeKind::Ellipse),
            "blob" | "blob_union" => Ok(ShapeKind::BlobUnion),
            other => Err(Error::Configuration(format!(
                "unknown shape kind '{other}' (expected disk|ellipse|blob)"
            ))),
        }
    }
}

/// Parameters of a synthetic dataset. Foreground fraction is kept within
/// [0.05, 0.5] by rejection sampling.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub count: usize,
    pub resolution: usize,
    pub kinds: Vec<ShapeKind>,
    /// Intensity gap between foreground and background, in (0, 1].
    pub contrast: f64,
    /// Multiplicative speckle level: v *= 1 + noise * N(0,1), clipped.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(count: usize, resolution: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            count,
            resolution,
            kinds: vec![ShapeKind::Disk, ShapeKind::Ellipse, ShapeKind::BlobUnion],
            contrast: 0.6,
            noise: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Configuration("synthetic count must be >= 1".into()));
        }
        if self.resolution == 0 || self.resolution % 32 != 0 {
            return Err(Error::Configuration(format!(
                "synthetic resolution {} must be a positive multiple of 32",
                self.resolution
            )));
        }
        if self.kinds.is_empty() {
            return Err(Error::Configuration("no shape kinds configured".into()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Configuration(format!(
                "contrast {} must lie in (0, 1]",
                self.contrast
            )));
        }
        Ok(())
    }
}

const FG_FRACTION_BOUNDS: (f64, f64) = (0.05, 0.5);

fn draw_mask(kind: ShapeKind, res: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = res as f64;
    let mut mask = vec![0.0; res * res];
    let paint_ellipse = |mask: &mut Vec<f64>, cy: f64, cx: f64, ry: f64, rx: f64| {
        for y in 0..res {
            for x in 0..res {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                if dy * dy + dx * dx <= 1.0 {
                    mask[y * res + x] = 1.0;
                }
            }
        }
    };
    match kind {
        ShapeKind::Disk => {
            let r = rng.gen_range(0.15..0.32) * n;
            let cy = rng.gen_range(0.3..0.7) * n;
            let cx = rng.gen_range(0.3..0.7) * n;
            paint_ellipse(&mut mask, cy, cx, r, r);
        }
        ShapeKind::Ellipse => {
            let ry = rng.gen_range(0.12..0.35) * n;
            let rx = rng.gen_range(0.12..0.35) * n;
            let cy = rng.gen_range(0.3..0.7) * n;
            let cx = rng.gen_range(0.3..0.7) * n;
            paint_ellipse(&mut mask, cy, cx, ry, rx);
        }
        ShapeKind::BlobUnion => {
            let blobs = rng.gen_range(2..=4);
            let (ay, ax) = (rng.gen_range(0.35..0.65) * n, rng.gen_range(0.35..0.65) * n);
            for _ in 0..blobs {
                let r = rng.gen_range(0.08..0.2) * n;
                let cy = (ay + rng.gen_range(-0.15..0.15) * n).clamp(0.0, n - 1.0);
                let cx = (ax + rng.gen_range(-0.15..0.15) * n).clamp(0.0, n - 1.0);
                paint_ellipse(&mut mask, cy, cx, r, r);
            }
        }
    }
    mask
}

/// Deterministic synthetic dataset: each image contains its mask's shape at
/// the configured contrast plus multiplicative speckle noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let res = spec.resolution;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
        let mut mask = draw_mask(kind, res, &mut rng);
        for _ in 0..64 {
            let frac = mask.iter().sum::<f64>() / (res * res) as f64;
            if (FG_FRACTION_BOUNDS.0..=FG_FRACTION_BOUNDS.1).contains(&frac) {
                break;
            }
            mask = draw_mask(kind, res, &mut rng);
        }
        let bg = 0.5 - spec.contrast / 2.0;
        let fg = 0.5 + spec.contrast / 2.0;
        let image: Vec<f64> = mask
            .iter()
            .map(|&m| {
                let v = if m > 0.5 { fg } else { bg };
                let speckled = v * (1.0 + spec.noise * normal.sample(&mut rng));
                speckled.clamp(0.0, 1.0)
            })
            .collect();
        samples.push(Sample {
            image: Tensor::from_vec(&[1, res, res], image)?,
            mask: Tensor::from_vec(&[res, res], mask)?,
            id: format!("syn{i:05}"),
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// netpbm (PGM/PPM) parsing and writing
// ---------------------------------------------------------------------------

struct PnmHeader {
    magic: u8, // 2, 3, 5, or 6
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected an unsigned integer"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("integer out of range"))
    }
}

fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(c.err("missing netpbm magic"));
    }
    let magic = match bytes[1] {
        b'2' => 2,
        b'3' => 3,
        b'5' => 5,
        b'6' => 6,
        other => {
            c.pos = 1;
            return Err(c.err(format!(
                "unsupported netpbm type 'P{}' (expected P2/P3/P5/P6)",
                other as char
            )));
        }
    };
    c.pos = 2;
    let width = c.read_uint()? as usize;
    let height = c.read_uint()? as usize;
    let maxval = c.read_uint()?;
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(c.err(format!("maxval {maxval} unsupported (must be 1..=255)")));
    }
    // exactly one whitespace byte separates header and raster in raw formats
    if magic == 5 || magic == 6 {
        if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
            return Err(c.err("missing whitespace before raster"));
        }
        c.pos += 1;
    }
    Ok(PnmHeader {
        magic,
        width,
        height,
        maxval,
        data_offset: c.pos,
    })
}

/// Parsed netpbm image: channel count (1 or 3) plus [0,1]-scaled samples in
/// channel-major [C,H,W] order.
#[derive(Debug)]
pub struct PnmImage {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Parse a PGM (P2/P5) or PPM (P3/P6) buffer.
pub fn parse_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let header = parse_pnm_header(bytes)?;
    let channels = if header.magic == 3 || header.magic == 6 { 3 } else { 1 };
    let count = header.width * header.height * channels;
    let scale = 1.0 / header.maxval as f64;
    let mut interleaved = Vec::with_capacity(count);
    match header.magic {
        2 | 3 => {
            let mut c = Cursor {
                bytes,
                pos: header.data_offset,
            };
            for _ in 0..count {
                let v = c.read_uint()?;
                if v > header.maxval {
                    return Err(c.err(format!("sample {v} exceeds maxval {}", header.maxval)));
                }
                interleaved.push(v as f64 * scale);
            }
        }
        _ => {
            let raster = &bytes[header.data_offset..];
            if raster.len() < count {
                return Err(Error::Parse {
                    offset: bytes.len(),
                    message: format!(
                        "raster truncated: need {count} bytes, have {}",
                        raster.len()
                    ),
                });
            }
            for i in 0..count {
                let v = raster[i] as u32;
                if v > header.maxval {
                    return Err(Error::Parse {
                        offset: header.data_offset + i,
                        message: format!("sample {v} exceeds maxval {}", header.maxval),
                    });
                }
                interleaved.push(v as f64 * scale);
            }
        }
    }
    // interleaved RGB -> channel-major
    let mut data = vec![0.0; count];
    let plane = header.width * header.height;
    for p in 0..plane {
        for ch in 0..channels {
            data[ch * plane + p] = interleaved[p * channels + ch];
        }
    }
    Ok(PnmImage {
        channels,
        width: header.width,
        height: header.height,
        data,
    })
}

/// Write binary PGM (1 channel) or PPM (3 channels) from channel-major
/// [0,1] data.
pub fn write_pnm(channels: usize, width: usize, height: usize, data: &[f64]) -> Result<Vec<u8>> {
    if channels != 1 && channels != 3 {
        return Err(Error::Data(format!(
            "netpbm output supports 1 or 3 channels, got {channels}"
        )));
    }
    if data.len() != channels * width * height {
        return Err(Error::Data(format!(
            "pixel buffer has {} values, expected {}",
            data.len(),
            channels * width * height
        )));
    }
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    let plane = width * height;
    for p in 0..plane {
        for ch in 0..channels {
            let v = (data[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(v);
        }
    }
    Ok(out)
}

/// Write samples under `<dir>/images` and `<dir>/masks`.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;
    for s in samples {
        let (h, w) = s.resolution();
        let channels = s.channels();
        let ext = if channels == 3 { "ppm" } else { "pgm" };
        let img_bytes = write_pnm(channels, w, h, &s.image.data())?;
        fs::write(images.join(format!("{}.{ext}", s.id)), img_bytes)?;
        let mask_bytes = write_pnm(1, w, h, &s.mask.data())?;
        fs::write(masks.join(format!("{}.pgm", s.id)), mask_bytes)?;
    }
    Ok(())
}

fn parse_pnm_file(path: &Path) -> Result<PnmImage> {
    let bytes = fs::read(path)?;
    parse_pnm(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Load a dataset directory. Images may be PGM or PPM;每 mask must be a PGM
/// named after its image. Masks binarize at 0.5.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    if !images_dir.is_dir() {
        return Err(Error::Data(format!(
            "missing images directory {}",
            images_dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&images_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| e == "pgm" || e == "ppm")
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no PGM/PPM images found in {}",
            images_dir.display()
        )));
    }
    let mut samples = Vec::with_capacity(paths.len());
    for path in paths {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let mask_path = masks_dir.join(format!("{id}.pgm"));
        if !mask_path.is_file() {
            return Err(Error::Data(format!(
                "missing mask for image '{}': expected {}",
                path.display(),
                mask_path.display()
            )));
        }
        let img = parse_pnm_file(&path)?;
        let mask = parse_pnm_file(&mask_path)?;
        if mask.channels != 1 {
            return Err(Error::Data(format!(
                "mask {} must be grayscale",
                mask_path.display()
            )));
        }
        if (mask.width, mask.height) != (img.width, img.height) {
            return Err(Error::Data(format!(
                "image '{id}' is {}x{} but its mask is {}x{}",
                img.width, img.height, mask.width, mask.height
            )));
        }
        let mask_bits: Vec<f64> = mask
            .data
            .iter()
            .map(|&v| if v > 0.5 { 1.0 } else { 0.0 })
            .collect();
        samples.push(Sample {
            image: Tensor::from_vec(&[img.channels, img.height, img.width], img.data)?,
            mask: Tensor::from_vec(&[img.height, img.width], mask_bits)?,
            id,
        });
    }
    Ok(samples)
}

/// Deterministic random split: `train` gets round(fraction * n) samples
/// (clamped so both sides stay nonempty).
pub fn split(samples: &[Sample], fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if samples.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 samples to split, got {}",
            samples.len()
        )));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Data(format!(
            "split fraction {fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = samples.len();
    let train_n = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train = order[..train_n].iter().map(|&i| samples[i].clone()).collect();
    let val = order[train_n..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(count: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec::new(count, 32, seed)
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = generate_synthetic(&spec(4, 9)).unwrap();
        let b = generate_synthetic(&spec(4, 9)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data_vec(), y.image.data_vec());
            assert_eq!(x.mask.data_vec(), y.mask.data_vec());
        }
        let c = generate_synthetic(&spec(4, 10)).unwrap();
        assert_ne!(a[0].image.data_vec(), c[0].image.data_vec());
    }

    #[test]
    fn synthetic_noise_free_full_contrast_thresholds_to_mask() {
        let mut s = spec(3, 4);
        s.noise = 0.0;
        s.contrast = 1.0;
        for sample in generate_synthetic(&s).unwrap() {
            let img = sample.image.data_vec();
            let mask = sample.mask.data_vec();
            for (v, m) in img.iter().zip(&mask) {
                assert_eq!(if *v > 0.5 { 1.0 } else { 0.0 }, *m);
            }
        }
    }

    #[test]
    fn synthetic_foreground_fraction_in_bounds() {
        let samples = generate_synthetic(&spec(100, 7)).unwrap();
        for s in samples {
            let frac = s.mask.data().iter().sum::<f64>() / s.mask.numel() as f64;
            assert!(
                (0.05..=0.5).contains(&frac),
                "sample {} fraction {frac}",
                s.id
            );
            // masks are strictly binary with nonempty foreground
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(frac > 0.0);
        }
    }

    #[test]
    fn synthetic_rejects_bad_resolution() {
        let mut s = spec(1, 0);
        s.resolution = 48;
        assert!(matches!(
            generate_synthetic(&s),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn pnm_plain_and_binary_agree() {
        let plain = b"P2\n# comment\n2 2\n255\n0 64\n128 255\n";
        let raw = b"P5\n2 2\n255\n\x00\x40\x80\xff";
        let a = parse_pnm(plain).unwrap();
        let b = parse_pnm(raw).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.channels, 1);
        assert!((a.data[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pnm_rgb_is_channel_major() {
        let raw = b"P6\n2 1\n255\n\xff\x00\x00\x00\xff\x00";
        let img = parse_pnm(raw).unwrap();
        assert_eq!(img.channels, 3);
        // red plane, then green, then blue
        assert_eq!(img.data, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pnm_errors_carry_byte_offsets() {
        let err = parse_pnm(b"P5\n2 2\n70000\n....").unwrap_err();
        match err {
            Error::Parse { offset, message } => {
                assert!(offset > 0 && message.contains("maxval"), "{offset} {message}");
            }
            other => panic!("expected parse error, got {other}"),
        }
        let truncated = parse_pnm(b"P5\n4 4\n255\nxx").unwrap_err();
        assert!(matches!(truncated, Error::Parse { .. }));
        let bad_magic = parse_pnm(b"P7\n1 1\n255\n\x00").unwrap_err();
        assert!(matches!(bad_magic, Error::Parse { offset: 1, .. }));
    }

    #[test]
    fn dataset_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&spec(3, 21)).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.mask.data_vec(), back.mask.data_vec());
            for (a, b) in orig.image.data().iter().zip(back.image.data().iter()) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn load_empty_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
        fs::create_dir_all(dir.path().join("images")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn load_missing_mask_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic(&spec(2, 3)).unwrap();
        save_dataset(dir.path(), &samples).unwrap();
        fs::remove_file(dir.path().join("masks/syn00001.pgm")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("syn00001"), "{err}");
    }

    #[test]
    fn load_dimension_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        fs::write(dir.path().join("images/a.pgm"), b"P5\n2 2\n255\nabcd").unwrap();
        fs::write(dir.path().join("masks/a.pgm"), b"P5\n2 1\n255\nab").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn split_sizes_and_partition() {
        let samples = generate_synthetic(&spec(10, 5)).unwrap();
        let (train, val) = split(&samples, 0.8, 13).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut ids: Vec<&str> = train.iter().chain(&val).map(|s| s.id.as_str()).collect();
        ids.sort();
        let mut expect: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        expect.sort();
        assert_eq!(ids, expect); // exhaustive and (by count) disjoint
    }

    #[test]
    fn split_varies_with_seed() {
        let samples = generate_synthetic(&spec(8, 6)).unwrap();
        let baseline: Vec<String> = split(&samples, 0.5, 0)
            .unwrap()
            .0
            .iter()
            .map(|s| s.id.clone())
            .collect();
        let distinct = (1..=10)
            .filter(|&seed| {
                let ids: Vec<String> = split(&samples, 0.5, seed)
                    .unwrap()
                    .0
                    .iter()
                    .map(|s| s.id.clone())
                    .collect();
                ids != baseline
            })
            .count();
        assert!(distinct >= 5, "only {distinct} of 10 seeds differed");
    }

    #[test]
    fn split_rejects_tiny_sets() {
        let samples = generate_synthetic(&spec(1, 0)).unwrap();
        assert!(matches!(split(&samples, 0.8, 0), Err(Error::Data(_))));
    }
}
