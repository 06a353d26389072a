//! Hyperspectral cubes, spatial masks and their on-disk formats.
//!
//! Cube files (`HSC1`) are a 16-byte header followed by little-endian `f32`
//! samples in band-sequential order:
//!
//! ```text
//! 0..4    b"HSC1"
//! 4..8    height   (u32 LE)
//! 8..12   width    (u32 LE)
//! 12..16  bands    (u32 LE)
//! 16..    height * width * bands f32 LE, band-major then row-major
//! ```
//!
//! Mask files (`HSM1`) share the layout, without the band count, and carry one
//! byte per pixel (`0` missing, `1` observed).

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8; 4] = b"HSC1";
pub const MASK_MAGIC: &[u8; 4] = b"HSM1";
const CUBE_HEADER_LEN: usize = 16;
const MASK_HEADER_LEN: usize = 12;

/// Dense `height × width × bands` cube stored band-sequentially.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    /// Wraps band-sequential data. Values must be finite.
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(bands))
            .ok_or_else(|| Error::Capacity("cube dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "cube {height}x{width}x{bands} needs {expected} samples, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite sample {} at index {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Result<Self> {
        Self::new(height, width, bands, vec![0.0; height * width * bands])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major samples of one band.
    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &HsiCube) -> bool {
        self.height == other.height && self.width == other.width && self.bands == other.bands
    }
}

/// Binary spatial map shared by every band; `0` marks a missing pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl SpatialMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Validation(format!(
                "mask entry {} at index {pos} is not 0 or 1",
                bits[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn observed_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn missing_count(&self) -> usize {
        self.bits.len() - self.observed_count()
    }
}

/// Parameters of the synthetic low-rank cube generator.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Number of spectral signatures mixed into the scene.
    pub rank: usize,
    /// Gaussian low-pass sigma (pixels) applied to abundance maps.
    pub smoothness: f64,
    pub seed: u64,
}

impl CubeSpec {
    pub fn new(height: usize, width: usize, bands: usize, rank: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            bands,
            rank,
            smoothness: 2.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 || self.rank == 0 {
            return Err(Error::Config(
                "height, width, bands and rank must all be positive".into(),
            ));
        }
        if self.rank > self.bands {
            return Err(Error::Config(format!(
                "rank {} exceeds band count {} (rank must be <= bands)",
                self.rank, self.bands
            )));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::Config(format!(
                "smoothness must be a finite non-negative number, got {}",
                self.smoothness
            )));
        }
        Ok(())
    }
}

/// Mask family produced by [`make_mask`].
#[derive(Debug, Clone, PartialEq)]
pub enum MaskKind {
    /// Zero out every pixel in the given half-open column ranges.
    Stripe { columns: Vec<Range<usize>> },
    /// Zero out a `height × width` rectangle whose top-left corner is `(top, left)`.
    Rect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// Zero out `round(ratio · H · W)` pixels drawn without replacement.
    Random { ratio: f64 },
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}

/// Parses an in-memory `HSC1` file.
pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    if bytes.len() < 4 || &bytes[..4] != CUBE_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HSC1\""));
    }
    if bytes.len() < CUBE_HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            "truncated header, expected 16 bytes",
        ));
    }
    let h = read_u32(bytes, 4) as usize;
    let w = read_u32(bytes, 8) as usize;
    let c = read_u32(bytes, 12) as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::format(4, format!("zero dimension in {h}x{w}x{c}")));
    }
    let payload_len = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(4, format!("dimensions {h}x{w}x{c} overflow")))?;
    let expected = CUBE_HEADER_LEN
        .checked_add(payload_len)
        .ok_or_else(|| Error::format(4, "dimensions overflow"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!("{} trailing bytes after payload", bytes.len() - expected),
        ));
    }
    let data: Vec<f32> = bytes[CUBE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(
            (CUBE_HEADER_LEN + 4 * pos) as u64,
            "non-finite sample",
        ));
    }
    HsiCube::new(h, w, c, data)
}

pub fn encode_cube(cube: &HsiCube) -> Result<Vec<u8>> {
    if let Some(pos) = cube.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "refusing to save non-finite sample at index {pos}"
        )));
    }
    let dims = [cube.height, cube.width, cube.bands].map(u32::try_from);
    let [Ok(h), Ok(w), Ok(c)] = dims else {
        return Err(Error::Capacity("cube dimension exceeds u32".into()));
    };
    let mut out = Vec::with_capacity(CUBE_HEADER_LEN + 4 * cube.data.len());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    for v in &cube.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Writes an `HSC1` file. Nothing is written if the cube fails validation.
pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_cube(cube)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SpatialMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes)
}

pub fn decode_mask(bytes: &[u8]) -> Result<SpatialMask> {
    if bytes.len() < 4 || &bytes[..4] != MASK_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HSM1\""));
    }
    if bytes.len() < MASK_HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            "truncated header, expected 12 bytes",
        ));
    }
    let h = read_u32(bytes, 4) as usize;
    let w = read_u32(bytes, 8) as usize;
    if h == 0 || w == 0 {
        return Err(Error::format(4, format!("zero dimension in {h}x{w}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_add(MASK_HEADER_LEN))
        .ok_or_else(|| Error::format(4, format!("dimensions {h}x{w} overflow")))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(
            expected as u64,
            format!("{} trailing bytes after payload", bytes.len() - expected),
        ));
    }
    let bits = bytes[MASK_HEADER_LEN..].to_vec();
    if let Some(pos) = bits.iter().position(|&b| b > 1) {
        return Err(Error::format(
            (MASK_HEADER_LEN + pos) as u64,
            format!("mask byte {} is not 0 or 1", bits[pos]),
        ));
    }
    SpatialMask::new(h, w, bits)
}

pub fn encode_mask(mask: &SpatialMask) -> Result<Vec<u8>> {
    let (Ok(h), Ok(w)) = (u32::try_from(mask.height), u32::try_from(mask.width)) else {
        return Err(Error::Capacity("mask dimension exceeds u32".into()));
    };
    let mut out = Vec::with_capacity(MASK_HEADER_LEN + mask.bits.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&mask.bits);
    Ok(out)
}

pub fn save_mask(mask: &SpatialMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_mask(mask)?;
    write_atomic(path.as_ref(), &bytes)
}

/// Global min-max rescale onto `[0, 1]`.
pub fn normalize(cube: &HsiCube) -> Result<HsiCube> {
    let (lo, hi) = cube
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if lo >= hi {
        return Err(Error::Degenerate(format!(
            "cannot normalize a constant cube (all samples = {lo})"
        )));
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    let data = cube
        .data
        .iter()
        .map(|&v| (((v as f64 - lo) / span) as f32).clamp(0.0, 1.0))
        .collect();
    HsiCube::new(cube.height, cube.width, cube.bands, data)
}

/// Deterministic low-rank synthetic scene.
///
/// Construction, all in `f64` from a `ChaCha8` stream seeded with `spec.seed`:
///
/// 1. `rank` spectral signatures, each band drawn uniformly from `[0.05, 1)`.
/// 2. `rank` abundance maps: uniform white noise, Gaussian-blurred with sigma
///    `smoothness` (symmetric boundaries), then min-max rescaled to `[0, 1]`.
/// 3. An illumination envelope built the same way, raised to the power 1/4.
///    Its minimum is exactly zero, so the scene contains one black pixel.
/// 4. `x[p, b] = envelope[p] · Σ_r abundance_r[p] · signature_r[b]`.
/// 5. The cube is normalized. Because the global minimum is exactly zero this
///    is a pure scaling and the `(H·W) × bands` matrix keeps rank `rank`.
pub fn synth_cube(spec: &CubeSpec) -> Result<HsiCube> {
    spec.validate()?;
    let (h, w, c, r) = (spec.height, spec.width, spec.bands, spec.rank);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let signatures: Vec<Vec<f64>> = (0..r)
        .map(|_| (0..c).map(|_| rng.random_range(0.05..1.0)).collect())
        .collect();
    let smooth_field = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let noise: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let blurred = gaussian_blur(&noise, h, w, spec.smoothness);
        let (lo, hi) = blurred
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        blurred.iter().map(|v| (v - lo) / span).collect()
    };
    let abundances: Vec<Vec<f64>> = (0..r).map(|_| smooth_field(&mut rng)).collect();
    let envelope: Vec<f64> = smooth_field(&mut rng)
        .into_iter()
        .map(|v| v.powf(0.25))
        .collect();

    let mut data = vec![0f32; n * c];
    for b in 0..c {
        for p in 0..n {
            let mix: f64 = (0..r).map(|k| abundances[k][p] * signatures[k][b]).sum();
            data[b * n + p] = (envelope[p] * mix) as f32;
        }
    }
    normalize(&HsiCube::new(h, w, c, data)?)
}

/// Separable Gaussian blur with half-sample symmetric boundaries.
fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return field.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();

    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            rows[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * field[i * w + symmetric_index(j as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[symmetric_index(i as isize + k as isize - radius, h) * w + j])
                .sum();
        }
    }
    out
}

/// Half-sample symmetric reflection: `-1 → 0`, `n → n-1`, periodic in `2n`.
pub(crate) fn symmetric_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn make_mask(kind: &MaskKind, height: usize, width: usize, seed: u64) -> Result<SpatialMask> {
    if height == 0 || width == 0 {
        return Err(Error::Config("mask dimensions must be positive".into()));
    }
    let mut bits = vec![1u8; height * width];
    match kind {
        MaskKind::Stripe { columns } => {
            for range in columns {
                if range.start >= range.end || range.end > width {
                    return Err(Error::Config(format!(
                        "stripe columns {}:{} must be a non-empty range inside width {width}",
                        range.start, range.end
                    )));
                }
                for row in bits.chunks_exact_mut(width) {
                    row[range.clone()].fill(0);
                }
            }
        }
        MaskKind::Rect {
            top,
            left,
            height: rh,
            width: rw,
        } => {
            if *rh == 0 || *rw == 0 || top + rh > height || left + rw > width {
                return Err(Error::Config(format!(
                    "rectangle ({top},{left},{rh},{rw}) must be non-empty and inside {height}x{width}"
                )));
            }
            for i in *top..top + rh {
                bits[i * width + left..i * width + left + rw].fill(0);
            }
        }
        MaskKind::Random { ratio } => {
            if !(*ratio > 0.0 && *ratio < 1.0) {
                return Err(Error::Config(format!(
                    "random mask ratio must lie in (0, 1), got {ratio}"
                )));
            }
            let n = height * width;
            let missing = (ratio * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            for &p in &order[..missing] {
                bits[p] = 0;
            }
        }
    }
    if bits.iter().all(|&b| b == 0) {
        return Err(Error::Config(
            "mask leaves no observed pixels".into(),
        ));
    }
    SpatialMask::new(height, width, bits)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Writes through a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(h: usize, w: usize, c: usize, data: Vec<f32>) -> HsiCube {
        HsiCube::new(h, w, c, data).unwrap()
    }

    #[test]
    fn decode_small_cube_in_row_major_order() {
        let c = cube(2, 2, 1, vec![0.0, 0.5, 1.0, 0.25]);
        let bytes = encode_cube(&c).unwrap();
        let back = decode_cube(&bytes).unwrap();
        assert_eq!(back.data(), &[0.0, 0.5, 1.0, 0.25]);
        assert_eq!(back.get(0, 1, 0), 1.0);
        assert_eq!(back.get(0, 0, 1), 0.5);
    }

    #[test]
    fn file_size_matches_header_plus_payload() {
        let c = cube(3, 5, 2, vec![0.1; 30]);
        assert_eq!(encode_cube(&c).unwrap().len(), 16 + 4 * 30);
        let one = cube(1, 1, 1, vec![0.0]);
        assert_eq!(encode_cube(&one).unwrap().len(), 20);
    }

    #[test]
    fn altered_magic_reports_offset_zero() {
        let mut bytes = encode_cube(&cube(1, 1, 1, vec![0.0])).unwrap();
        bytes[1] = b'X';
        match decode_cube(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_and_trailing_bytes_are_rejected() {
        let bytes = encode_cube(&cube(2, 2, 2, vec![0.5; 8])).unwrap();
        match decode_cube(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 3),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            decode_cube(&longer),
            Err(Error::Format { offset: 48, .. })
        ));
    }

    #[test]
    fn overflowing_dims_are_a_format_error() {
        let mut bytes = CUBE_MAGIC.to_vec();
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        let err = decode_cube(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err:?}");
    }

    #[test]
    fn nan_cube_is_not_saved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hsc");
        let bad = HsiCube {
            height: 1,
            width: 2,
            bands: 1,
            data: vec![0.0, f32::NAN],
        };
        assert!(matches!(save_cube(&bad, &path), Err(Error::Validation(_))));
        assert!(!path.exists());
    }

    #[test]
    fn normalize_maps_affinely() {
        let c = cube(1, 3, 1, vec![2.0, 4.0, 6.0]);
        assert_eq!(normalize(&c).unwrap().data(), &[0.0, 0.5, 1.0]);
        let unit = cube(1, 3, 1, vec![0.0, 0.3, 1.0]);
        assert_eq!(normalize(&unit).unwrap(), unit);
        assert!(matches!(
            normalize(&cube(2, 2, 1, vec![3.0; 4])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn synth_is_deterministic_and_normalized() {
        let spec = CubeSpec::new(16, 12, 6, 2, 99);
        let a = synth_cube(&spec).unwrap();
        let b = synth_cube(&spec).unwrap();
        assert_eq!(encode_cube(&a).unwrap(), encode_cube(&b).unwrap());
        let min = a.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let max = a.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((min, max), (0.0, 1.0));
        let other = synth_cube(&CubeSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn synth_rejects_rank_above_bands() {
        let err = synth_cube(&CubeSpec::new(8, 8, 8, 9, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("rank")));
    }

    #[test]
    fn stripe_rect_and_random_masks() {
        let stripe = make_mask(&MaskKind::Stripe { columns: vec![3..5] }, 8, 8, 0).unwrap();
        assert_eq!((stripe.missing_count(), stripe.observed_count()), (16, 48));
        assert!(!stripe.is_observed(7, 4));
        assert!(stripe.is_observed(7, 5));

        let full = MaskKind::Rect {
            top: 0,
            left: 0,
            height: 8,
            width: 8,
        };
        assert!(matches!(make_mask(&full, 8, 8, 0), Err(Error::Config(_))));

        let random = make_mask(&MaskKind::Random { ratio: 0.25 }, 100, 100, 1).unwrap();
        assert_eq!(random.missing_count(), 2500);
        let again = make_mask(&MaskKind::Random { ratio: 0.25 }, 100, 100, 1).unwrap();
        assert_eq!(random, again);
    }

    #[test]
    fn mask_out_of_bounds_is_config_error() {
        let k = MaskKind::Stripe { columns: vec![6..9] };
        assert!(matches!(make_mask(&k, 8, 8, 0), Err(Error::Config(_))));
        let k = MaskKind::Random { ratio: 1.0 };
        assert!(matches!(make_mask(&k, 8, 8, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mask_rejects_non_binary_bytes() {
        let mut bytes = encode_mask(&SpatialMask::ones(2, 2)).unwrap();
        bytes[14] = 7;
        assert!(matches!(
            decode_mask(&bytes),
            Err(Error::Format { offset: 14, .. })
        ));
    }

    #[test]
    fn symmetric_index_reflects_half_sample() {
        let got: Vec<usize> = (-3..8).map(|i| symmetric_index(i, 5)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 4, 4, 3, 2]);
    }
}
