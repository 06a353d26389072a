//! Measurement and group operators.
//!
//! `M` zeroes missing pixels in every band. `T_g` is a cyclic spatial shift,
//! an exact permutation of samples, so `T_g⁻¹ T_g = I` holds bit-for-bit.
//! The matrix builders materialize both as dense matrices on small grids;
//! they are verification tools, not the training path.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::hsio::{HsiCube, SpatialMask};

/// Largest `H·W` for which the matrix builders will materialize anything.
pub const MATRIX_PIXEL_LIMIT: usize = 4096;
/// Cap on the entries of a stacked coverage matrix.
const STACK_ENTRY_LIMIT: usize = 1 << 24;
/// Pivots of the rank-revealing QR below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Cyclic shift by `(dx, dy)` pixels: the sample at `(row, col)` moves to
/// `((row + dy) mod H, (col + dx) mod W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupAction {
    pub dx: i64,
    pub dy: i64,
}

impl GroupAction {
    pub const IDENTITY: GroupAction = GroupAction { dx: 0, dy: 0 };

    pub fn new(dx: i64, dy: i64) -> Self {
        Self { dx, dy }
    }

    pub fn inverse(self) -> Self {
        Self {
            dx: -self.dx,
            dy: -self.dy,
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(self, other: GroupAction) -> Self {
        Self {
            dx: self.dx + other.dx,
            dy: self.dy + other.dy,
        }
    }

    /// Offsets reduced into `[0, W) × [0, H)`.
    pub fn reduced(self, height: usize, width: usize) -> (usize, usize) {
        (
            self.dx.rem_euclid(width as i64) as usize,
            self.dy.rem_euclid(height as i64) as usize,
        )
    }

    pub fn is_identity_on(self, height: usize, width: usize) -> bool {
        self.reduced(height, width) == (0, 0)
    }
}

impl fmt::Display for GroupAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.dx, self.dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Shift,
}

/// Shift group with offsets `dx, dy ∈ {0, …, size-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupConfig {
    pub size: usize,
    pub kind: GroupKind,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            size: 7,
            kind: GroupKind::Shift,
        }
    }
}

impl GroupConfig {
    pub fn shift(size: usize) -> Self {
        Self {
            size,
            kind: GroupKind::Shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config(format!(
                "group size must be at least 2, got {}",
                self.size
            )));
        }
        Ok(())
    }

    /// Every non-identity action, `dy`-major.
    pub fn actions(&self) -> Vec<GroupAction> {
        let t = self.size as i64;
        (0..t)
            .flat_map(|dy| (0..t).map(move |dx| GroupAction::new(dx, dy)))
            .filter(|g| *g != GroupAction::IDENTITY)
            .collect()
    }
}

/// `y[b, i, j] = mask[i, j] · x[b, i, j]`.
pub fn apply_mask(cube: &HsiCube, mask: &SpatialMask) -> Result<HsiCube> {
    check_mask_dims(cube, mask)?;
    let n = cube.pixels();
    let bits = mask.bits();
    let mut out = cube.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        if bits[k % n] == 0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

pub(crate) fn check_mask_dims(cube: &HsiCube, mask: &SpatialMask) -> Result<()> {
    if cube.height() != mask.height() || cube.width() != mask.width() {
        return Err(Error::Shape(format!(
            "mask is {}x{} but cube is {}x{}",
            mask.height(),
            mask.width(),
            cube.height(),
            cube.width()
        )));
    }
    Ok(())
}

/// Cyclic shift of every band by `g`.
pub fn apply_shift(cube: &HsiCube, g: GroupAction) -> HsiCube {
    let (h, w) = (cube.height(), cube.width());
    let (dx, dy) = g.reduced(h, w);
    let mut out = vec![0f32; cube.data().len()];
    shift_planes(cube.data(), &mut out, h, w, dx, dy);
    HsiCube::new(h, w, cube.bands(), out).expect("shift preserves cube invariants")
}

/// Rolls each `h × w` plane of `src` into `dst`.
pub(crate) fn shift_planes<T: Copy>(src: &[T], dst: &mut [T], h: usize, w: usize, dx: usize, dy: usize) {
    let n = h * w;
    for (sp, dp) in src.chunks_exact(n).zip(dst.chunks_exact_mut(n)) {
        for i in 0..h {
            let ti = (i + dy) % h;
            let srow = &sp[i * w..(i + 1) * w];
            let drow = &mut dp[ti * w..(ti + 1) * w];
            drow[dx..].copy_from_slice(&srow[..w - dx]);
            drow[..dx].copy_from_slice(&srow[w - dx..]);
        }
    }
}

/// Draws `(dx, dy)` uniformly from `{0..T-1}²`, redrawing the identity.
pub fn sample_group<R: Rng + ?Sized>(rng: &mut R, config: &GroupConfig) -> GroupAction {
    let t = config.size as i64;
    loop {
        let dx = rng.random_range(0..t);
        let dy = rng.random_range(0..t);
        if (dx, dy) != (0, 0) {
            return GroupAction::new(dx, dy);
        }
    }
}

/// Dense matrix representation of a linear operator on one band.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix(DMatrix<f64>);

impl OperatorMatrix {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols() {
            return Err(Error::Shape(format!(
                "matrix has {} columns, vector has {} entries",
                self.cols(),
                v.len()
            )));
        }
        Ok((&self.0 * nalgebra::DVector::from_column_slice(v))
            .iter()
            .copied()
            .collect())
    }

    pub fn matmul(&self, other: &OperatorMatrix) -> Result<OperatorMatrix> {
        if self.cols() != other.rows() {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        Ok(OperatorMatrix(&self.0 * &other.0))
    }

    pub fn identity(n: usize) -> Self {
        OperatorMatrix(DMatrix::identity(n, n))
    }

    /// Numerical rank at [`RANK_TOLERANCE`] relative to the largest pivot.
    pub fn rank(&self) -> usize {
        numerical_rank(&self.0)
    }
}

// Column-pivoted QR. nalgebra's SVD can emit NaN on some exactly sparse 0/1
// stacks, and a Gram eigensolve squares the tolerance below its own noise.
fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let tall = if m.nrows() >= m.ncols() { m.clone() } else { m.transpose() };
    let r = tall.col_piv_qr().r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&d| d > RANK_TOLERANCE * max).count()
}

fn guard(height: usize, width: usize) -> Result<usize> {
    let n = height
        .checked_mul(width)
        .filter(|&n| n <= MATRIX_PIXEL_LIMIT)
        .ok_or_else(|| {
            Error::Capacity(format!(
                "{height}x{width} grid exceeds the {MATRIX_PIXEL_LIMIT}-pixel matrix limit"
            ))
        })?;
    if n == 0 {
        return Err(Error::Shape("empty grid".into()));
    }
    Ok(n)
}

/// `(#observed) × (H·W)` selection matrix, observed pixels in row-major order.
pub fn mask_matrix(mask: &SpatialMask) -> Result<OperatorMatrix> {
    let n = guard(mask.height(), mask.width())?;
    let observed: Vec<usize> = mask
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == 1)
        .map(|(p, _)| p)
        .collect();
    let mut m = DMatrix::zeros(observed.len(), n);
    for (r, &p) in observed.iter().enumerate() {
        m[(r, p)] = 1.0;
    }
    Ok(OperatorMatrix(m))
}

/// Permutation matrix with `shift_matrix(g) · vec(x) = vec(apply_shift(x, g))`.
pub fn shift_matrix(g: GroupAction, height: usize, width: usize) -> Result<OperatorMatrix> {
    let n = guard(height, width)?;
    let (dx, dy) = g.reduced(height, width);
    let mut m = DMatrix::zeros(n, n);
    for i in 0..height {
        for j in 0..width {
            let to = ((i + dy) % height) * width + (j + dx) % width;
            m[(to, i * width + j)] = 1.0;
        }
    }
    Ok(OperatorMatrix(m))
}

/// Matrix of the virtual operator `M ∘ T_g⁻¹`.
pub fn virtual_operator(
    mask: &SpatialMask,
    g: GroupAction,
    height: usize,
    width: usize,
) -> Result<OperatorMatrix> {
    if mask.height() != height || mask.width() != width {
        return Err(Error::Shape(format!(
            "mask is {}x{} but grid is {height}x{width}",
            mask.height(),
            mask.width()
        )));
    }
    mask_matrix(mask)?.matmul(&shift_matrix(g.inverse(), height, width)?)
}

/// Rank of the stacked measurement operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoverageReport {
    pub stacked_rank: usize,
    pub full: bool,
    pub missing_dims: usize,
}

impl CoverageReport {
    pub const CSV_HEADER: &'static str = "mask_kind,group_desc,rank,full,missing_dims";

    pub fn csv_line(&self, mask_kind: &str, group_desc: &str) -> String {
        format!(
            "{mask_kind},{group_desc},{},{},{}",
            self.stacked_rank, self.full, self.missing_dims
        )
    }
}

/// Stacks the real operator `M` with `M ∘ T_g⁻¹` for every listed action and
/// reports whether their joint row space is the whole single-band signal space.
pub fn nullspace_coverage(
    mask: &SpatialMask,
    group_actions: &[GroupAction],
    height: usize,
    width: usize,
) -> Result<CoverageReport> {
    let n = guard(height, width)?;
    let mut blocks = vec![mask_matrix(mask)?];
    if mask.height() != height || mask.width() != width {
        return Err(Error::Shape(format!(
            "mask is {}x{} but grid is {height}x{width}",
            mask.height(),
            mask.width()
        )));
    }
    for &g in group_actions {
        blocks.push(virtual_operator(mask, g, height, width)?);
    }
    let rows: usize = blocks.iter().map(|b| b.rows()).sum();
    if rows.saturating_mul(n) > STACK_ENTRY_LIMIT {
        return Err(Error::Capacity(format!(
            "stacked operator would have {rows}x{n} entries"
        )));
    }
    let mut stacked = DMatrix::zeros(rows, n);
    let mut at = 0;
    for b in &blocks {
        stacked.rows_mut(at, b.rows()).copy_from(b.as_matrix());
        at += b.rows();
    }
    let stacked_rank = numerical_rank(&stacked);
    Ok(CoverageReport {
        stacked_rank,
        full: stacked_rank == n,
        missing_dims: n - stacked_rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsio::{make_mask, MaskKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, c: usize) -> HsiCube {
        let data = (0..h * w * c).map(|v| v as f32 / 100.0).collect();
        HsiCube::new(h, w, c, data).unwrap()
    }

    fn stripe(h: usize, w: usize, cols: std::ops::Range<usize>) -> SpatialMask {
        make_mask(&MaskKind::Stripe { columns: vec![cols] }, h, w, 0).unwrap()
    }

    #[test]
    fn mask_identity_and_idempotence() {
        let x = ramp(4, 5, 3);
        assert_eq!(apply_mask(&x, &SpatialMask::ones(4, 5)).unwrap(), x);
        let m = stripe(4, 5, 1..3);
        let y = apply_mask(&x, &m).unwrap();
        assert_eq!(apply_mask(&y, &m).unwrap(), y);
        for b in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let want = if (1..3).contains(&j) { 0.0 } else { x.get(b, i, j) };
                    assert_eq!(y.get(b, i, j), want);
                }
            }
        }
    }

    #[test]
    fn mask_dimension_mismatch() {
        let err = apply_mask(&ramp(4, 5, 1), &SpatialMask::ones(5, 4)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn shift_moves_samples_cyclically() {
        let x = ramp(3, 4, 2);
        assert_eq!(apply_shift(&x, GroupAction::IDENTITY), x);
        let s = apply_shift(&x, GroupAction::new(1, 2));
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    assert_eq!(s.get(b, (i + 2) % 3, (j + 1) % 4), x.get(b, i, j));
                }
            }
        }
        let back = apply_shift(&apply_shift(&x, GroupAction::new(1, 0)), GroupAction::new(-1, 0));
        assert_eq!(back, x);
    }

    #[test]
    fn sampler_excludes_identity_and_covers_t2() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GroupConfig::shift(2);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let g = sample_group(&mut rng, &cfg);
            assert_ne!(g, GroupAction::IDENTITY);
            seen.insert((g.dx, g.dy));
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![(0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn group_config_validation_and_enumeration() {
        assert!(GroupConfig::shift(1).validate().is_err());
        assert_eq!(GroupConfig::default().actions().len(), 48);
    }

    #[test]
    fn small_matrices() {
        let all = mask_matrix(&SpatialMask::ones(2, 2)).unwrap();
        assert_eq!(all, OperatorMatrix::identity(4));
        let one_missing = SpatialMask::new(2, 2, vec![1, 0, 1, 1]).unwrap();
        let m = mask_matrix(&one_missing).unwrap();
        assert_eq!((m.rows(), m.cols(), m.rank()), (3, 4, 3));
        assert_eq!(shift_matrix(GroupAction::IDENTITY, 3, 3).unwrap(), OperatorMatrix::identity(9));
        assert_eq!(
            virtual_operator(&one_missing, GroupAction::IDENTITY, 2, 2).unwrap(),
            m
        );
    }

    #[test]
    fn capacity_guard() {
        let big = SpatialMask::ones(65, 64);
        assert!(matches!(mask_matrix(&big), Err(Error::Capacity(_))));
        assert!(matches!(
            shift_matrix(GroupAction::new(1, 0), 128, 64),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn coverage_of_small_stripes() {
        let one = stripe(4, 4, 1..2);
        let r = nullspace_coverage(&one, &[GroupAction::new(1, 0)], 4, 4).unwrap();
        assert!(r.full);
        assert_eq!(r.stacked_rank, 16);
        let two = stripe(4, 4, 1..3);
        let r = nullspace_coverage(&two, &[GroupAction::new(1, 0)], 4, 4).unwrap();
        assert!(!r.full);
        assert_eq!(r.missing_dims, 4);
        let r = nullspace_coverage(&SpatialMask::ones(3, 5), &[], 3, 5).unwrap();
        assert_eq!((r.stacked_rank, r.full), (15, true));
        assert_eq!(r.csv_line("ones", "none"), "ones,none,15,true,0");
    }
}
