//! Dense degradation operators and their singular value decomposition.
//!
//! Every operator is an explicit `M x N` matrix. The factories build the
//! operators used for deblurring, super-resolution, compressive sensing and
//! inpainting on square single-channel images stored in raster order.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{argument, check_dim, Result, SnipsError};

const OPERATOR_MAGIC: &[u8; 4] = b"SNOP";
const OPERATOR_VERSION: u16 = 1;

/// A dense linear operator `H` mapping signals in `R^N` to measurements in `R^M`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOperator {
    matrix: DMatrix<f64>,
}

impl LinearOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(argument("operator must have at least one row and one column"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(argument("operator entries must be finite"));
        }
        Ok(Self { matrix })
    }

    /// Builds an operator from row-major entries.
    pub fn from_row_major(rows: usize, cols: usize, entries: &[f64]) -> Result<Self> {
        check_dim(rows * cols, entries.len(), "operator entries")?;
        Self::new(DMatrix::from_row_slice(rows, cols, entries))
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::new(DMatrix::identity(n, n))
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(rows, cols))
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.cols(), x.len(), "operator input")?;
        Ok(&self.matrix * x)
    }

    pub fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.rows(), y.len(), "operator adjoint input")?;
        Ok(self.matrix.tr_mul(y))
    }

    /// Writes the `SNOP` container: magic, `u16` version, `u32` rows, `u32`
    /// cols, then the entries in row-major order as little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let rows = u32::try_from(self.rows()).map_err(|_| argument("too many rows"))?;
        let cols = u32::try_from(self.cols()).map_err(|_| argument("too many columns"))?;
        let mut buf = Vec::with_capacity(14 + 8 * self.rows() * self.cols());
        buf.extend_from_slice(OPERATOR_MAGIC);
        buf.extend_from_slice(&OPERATOR_VERSION.to_le_bytes());
        buf.extend_from_slice(&rows.to_le_bytes());
        buf.extend_from_slice(&cols.to_le_bytes());
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                buf.extend_from_slice(&self.matrix[(r, c)].to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 14];
        r.read_exact(&mut header)
            .map_err(|e| SnipsError::Format(format!("truncated operator header: {e}")))?;
        if &header[..4] != OPERATOR_MAGIC {
            return Err(SnipsError::Format(format!(
                "bad operator magic {:02x?}",
                &header[..4]
            )));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != OPERATOR_VERSION {
            return Err(SnipsError::Format(format!(
                "unsupported operator version {version}"
            )));
        }
        let rows = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| SnipsError::Format("operator dimensions overflow".into()))?;
        let mut body = vec![0u8; count * 8];
        r.read_exact(&mut body)
            .map_err(|e| SnipsError::Format(format!("truncated operator body: {e}")))?;
        let entries: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_row_major(rows, cols, &entries)
    }
}

/// Boundary handling for the blur operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    #[default]
    Circular,
}

/// Uniform `kernel x kernel` box blur over a `side x side` image with
/// wrap-around boundaries. Every row sums to one.
pub fn make_uniform_blur(side: usize, kernel: usize, boundary: Boundary) -> Result<LinearOperator> {
    if side == 0 {
        return Err(argument("image side must be positive"));
    }
    if kernel.is_multiple_of(2) {
        return Err(argument(format!("blur kernel width must be odd, got {kernel}")));
    }
    if kernel > side {
        return Err(argument(format!(
            "blur kernel width {kernel} exceeds image side {side}"
        )));
    }
    let Boundary::Circular = boundary;
    let n = side * side;
    let half = (kernel / 2) as isize;
    let weight = 1.0 / (kernel * kernel) as f64;
    let s = side as isize;
    let mut m = DMatrix::zeros(n, n);
    for r in 0..s {
        for c in 0..s {
            let row = (r * s + c) as usize;
            for dr in -half..=half {
                for dc in -half..=half {
                    let rr = (r + dr).rem_euclid(s);
                    let cc = (c + dc).rem_euclid(s);
                    m[(row, (rr * s + cc) as usize)] += weight;
                }
            }
        }
    }
    LinearOperator::new(m)
}

/// Averages each non-overlapping `block x block` tile into one pixel.
pub fn make_block_average(side: usize, block: usize) -> Result<LinearOperator> {
    if side == 0 || block == 0 || !side.is_multiple_of(block) {
        return Err(argument(format!(
            "block width {block} must divide image side {side}"
        )));
    }
    let low = side / block;
    let weight = 1.0 / (block * block) as f64;
    let mut m = DMatrix::zeros(low * low, side * side);
    for br in 0..low {
        for bc in 0..low {
            let row = br * low + bc;
            for r in br * block..(br + 1) * block {
                for c in bc * block..(bc + 1) * block {
                    m[(row, r * side + c)] = weight;
                }
            }
        }
    }
    LinearOperator::new(m)
}

/// Random `M x n` projection with orthonormal rows, `M = round(keep_fraction * n)`.
pub fn make_random_projection(n: usize, keep_fraction: f64, seed: u64) -> Result<LinearOperator> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(argument(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let m = (keep_fraction * n as f64).round() as usize;
    if m == 0 {
        return Err(argument(format!(
            "keep fraction {keep_fraction} of {n} leaves no measurements"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
    let q = gaussian.qr().q();
    LinearOperator::new(q.transpose())
}

/// Selection operator keeping the listed signal entries, in the given order.
pub fn make_inpainting_mask(n: usize, kept_indices: &[usize]) -> Result<LinearOperator> {
    if kept_indices.is_empty() {
        return Err(argument("inpainting mask keeps no entries"));
    }
    let mut seen = vec![false; n];
    for &k in kept_indices {
        if k >= n {
            return Err(argument(format!("kept index {k} out of range for length {n}")));
        }
        if std::mem::replace(&mut seen[k], true) {
            return Err(argument(format!("kept index {k} listed twice")));
        }
    }
    let mut m = DMatrix::zeros(kept_indices.len(), n);
    for (row, &k) in kept_indices.iter().enumerate() {
        m[(row, k)] = 1.0;
    }
    LinearOperator::new(m)
}

/// `H = U diag(s) V^T` with full square orthogonal factors.
#[derive(Debug, Clone)]
pub struct DegradationSVD {
    u: DMatrix<f64>,
    singulars: DVector<f64>,
    v: DMatrix<f64>,
    extended: DVector<f64>,
}

impl DegradationSVD {
    /// Assembles a decomposition from explicit factors. `singulars` holds the
    /// `min(M, N)` diagonal entries of the rectangular `M x N` middle factor.
    pub fn from_parts(u: DMatrix<f64>, singulars: DVector<f64>, v: DMatrix<f64>) -> Result<Self> {
        if !u.is_square() || !v.is_square() {
            return Err(argument("singular vector factors must be square"));
        }
        let (m, n) = (u.nrows(), v.nrows());
        check_dim(m.min(n), singulars.len(), "singular values")?;
        if singulars.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(argument("singular values must be finite and non-negative"));
        }
        if singulars.as_slice().windows(2).any(|w| w[0] < w[1]) {
            return Err(argument("singular values must be sorted in descending order"));
        }
        let mut extended = DVector::zeros(n);
        extended.rows_mut(0, singulars.len()).copy_from(&singulars);
        Ok(Self {
            u,
            singulars,
            v,
            extended,
        })
    }

    /// Measurement dimension `M`.
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    /// Signal dimension `N`.
    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// The `min(M, N)` singular values in descending order.
    pub fn singulars(&self) -> &DVector<f64> {
        &self.singulars
    }

    /// Singular values padded with zeros to the signal dimension.
    pub fn extended_singulars(&self) -> &DVector<f64> {
        &self.extended
    }

    pub fn rank(&self) -> usize {
        self.singulars.iter().filter(|s| **s > 0.0).count()
    }

    /// `U^T y`.
    pub fn to_measurement_domain(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.rows(), y.len(), "measurement")?;
        Ok(self.u.tr_mul(y))
    }

    /// `V^T x`.
    pub fn to_spectral(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.cols(), x.len(), "signal")?;
        Ok(self.v.tr_mul(x))
    }

    /// `V x_t`.
    pub fn from_spectral(&self, xt: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.cols(), xt.len(), "spectral signal")?;
        Ok(&self.v * xt)
    }

    /// Applies `U Σ V^T` factor by factor.
    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let xt = self.to_spectral(x)?;
        let mut scaled = DVector::zeros(self.rows());
        for (j, s) in self.singulars.iter().enumerate() {
            scaled[j] = s * xt[j];
        }
        Ok(&self.u * scaled)
    }

    /// Rebuilds the dense operator from the factors.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let (m, n) = (self.rows(), self.cols());
        let mut sigma = DMatrix::zeros(m, n);
        for (j, s) in self.singulars.iter().enumerate() {
            sigma[(j, j)] = *s;
        }
        &self.u * sigma * self.v.transpose()
    }
}

/// Decomposes `op` into full orthogonal factors with descending singular values.
///
/// Singular values below `max(M, N) * eps * s_max` are set to exactly zero so
/// that numerically rank-deficient operators expose a clean null space.
pub fn svd_decompose(op: &LinearOperator) -> Result<DegradationSVD> {
    let (m, n) = (op.rows(), op.cols());
    let fail = || SnipsError::Decomposition { rows: m, cols: n };
    let svd = op
        .matrix()
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(fail)?;
    let thin_u = svd.u.ok_or_else(fail)?;
    let thin_vt = svd.v_t.ok_or_else(fail)?;
    let raw = svd.singular_values;
    if raw.iter().any(|s| !s.is_finite()) {
        return Err(fail());
    }

    let k = raw.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));

    let s_max = order.first().map(|&i| raw[i]).unwrap_or(0.0);
    let cutoff = m.max(n) as f64 * f64::EPSILON * s_max;
    let singulars = DVector::from_iterator(
        k,
        order
            .iter()
            .map(|&i| if raw[i] <= cutoff { 0.0 } else { raw[i] }),
    );
    let u_cols = DMatrix::from_fn(m, k, |r, c| thin_u[(r, order[c])]);
    let v_cols = DMatrix::from_fn(n, k, |r, c| thin_vt[(order[c], r)]);

    let u = complete_orthonormal_basis(&u_cols);
    let v = complete_orthonormal_basis(&v_cols);
    DegradationSVD::from_parts(u, singulars, v)
}

/// Extends `k` orthonormal columns of length `n` to a full `n x n` orthogonal
/// matrix, keeping the given columns first.
///
/// Picks, at each step, the standard basis vector with the largest residual
/// outside the current span and orthogonalises it twice.
pub(crate) fn complete_orthonormal_basis(cols: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = cols.shape();
    let mut basis = DMatrix::zeros(n, n);
    basis.columns_mut(0, k).copy_from(cols);
    let mut residual: Vec<f64> = (0..n)
        .map(|i| 1.0 - cols.row(i).iter().map(|v| v * v).sum::<f64>())
        .collect();
    for filled in k..n {
        let pick = (0..n)
            .max_by(|&a, &b| residual[a].total_cmp(&residual[b]))
            .expect("non-empty basis");
        let mut q = DVector::zeros(n);
        q[pick] = 1.0;
        for _ in 0..2 {
            let span = basis.columns(0, filled);
            let coeffs = span.tr_mul(&q);
            q -= span * coeffs;
        }
        let norm = q.norm();
        q /= norm;
        for i in 0..n {
            residual[i] -= q[i] * q[i];
        }
        residual[pick] = f64::NEG_INFINITY;
        basis.set_column(filled, &q);
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    fn assert_factorisation(op: &LinearOperator, svd: &DegradationSVD) {
        let (m, n) = (op.rows(), op.cols());
        assert!(max_abs(&(svd.u().transpose() * svd.u() - DMatrix::identity(m, m))) < 1e-8);
        assert!(max_abs(&(svd.v().transpose() * svd.v() - DMatrix::identity(n, n))) < 1e-8);
        assert!(max_abs(&(svd.reconstruct() - op.matrix())) < 1e-8);
        let s = svd.singulars().as_slice();
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn identity_has_unit_singulars() {
        let op = LinearOperator::identity(4).unwrap();
        let svd = svd_decompose(&op).unwrap();
        assert_factorisation(&op, &svd);
        assert_eq!(svd.singulars().as_slice(), &[1.0; 4]);
        let uvt = svd.u() * svd.v().transpose();
        assert!(max_abs(&(uvt - DMatrix::identity(4, 4))) < 1e-12);
    }

    #[test]
    fn pairwise_average_singulars() {
        // H H^T = I / 2, so both singular values are sqrt(1/2).
        let op = LinearOperator::from_row_major(
            2,
            4,
            &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5],
        )
        .unwrap();
        let svd = svd_decompose(&op).unwrap();
        assert_factorisation(&op, &svd);
        for s in svd.singulars().iter() {
            assert!((s - 0.5f64.sqrt()).abs() < 1e-12);
        }
        assert_eq!(svd.extended_singulars().len(), 4);
        assert_eq!(svd.extended_singulars()[3], 0.0);
    }

    #[test]
    fn zero_operator() {
        let op = LinearOperator::zeros(2, 3).unwrap();
        let svd = svd_decompose(&op).unwrap();
        assert_factorisation(&op, &svd);
        assert_eq!(svd.singulars().as_slice(), &[0.0, 0.0]);
        assert_eq!(svd.rank(), 0);
    }

    #[test]
    fn tall_operator_factorises() {
        let op = LinearOperator::from_row_major(3, 2, &[1.0, 2.0, 0.0, 1.0, 3.0, -1.0]).unwrap();
        let svd = svd_decompose(&op).unwrap();
        assert_factorisation(&op, &svd);
        assert_eq!(svd.singulars().len(), 2);
    }

    #[test]
    fn blur_degenerate_and_rows() {
        let op = make_uniform_blur(1, 1, Boundary::Circular).unwrap();
        assert_eq!(op.matrix(), &DMatrix::identity(1, 1));

        let op = make_uniform_blur(4, 3, Boundary::Circular).unwrap();
        assert_eq!((op.rows(), op.cols()), (16, 16));
        for r in 0..16 {
            let row = op.matrix().row(r);
            let nonzero: Vec<f64> = row.iter().copied().filter(|v| *v != 0.0).collect();
            assert_eq!(nonzero.len(), 9);
            assert!(nonzero.iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-15));
        }

        let op = make_uniform_blur(8, 5, Boundary::Circular).unwrap();
        let out = op.apply(&DVector::from_element(64, 0.3)).unwrap();
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-14));
    }

    #[test]
    fn blur_rejects_bad_kernels() {
        assert!(matches!(
            make_uniform_blur(4, 2, Boundary::Circular),
            Err(SnipsError::Argument(_))
        ));
        assert!(matches!(
            make_uniform_blur(3, 5, Boundary::Circular),
            Err(SnipsError::Argument(_))
        ));
    }

    #[test]
    fn block_average_cases() {
        let op = make_block_average(2, 2).unwrap();
        assert_eq!(op.matrix().as_slice(), &[0.25; 4]);
        let svd = svd_decompose(&op).unwrap();
        assert!((svd.singulars()[0] - 0.5).abs() < 1e-14);

        let op = make_block_average(4, 1).unwrap();
        assert_eq!(op.matrix(), &DMatrix::identity(16, 16));

        let op = make_block_average(4, 2).unwrap();
        let out = op.apply(&DVector::from_element(16, 1.0)).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let svd = svd_decompose(&op).unwrap();
        assert!(svd.singulars().iter().all(|s| (s - 0.5).abs() < 1e-12));

        assert!(make_block_average(5, 2).is_err());
    }

    #[test]
    fn random_projection_cases() {
        let op = make_random_projection(4, 1.0, 7).unwrap();
        let hht = op.matrix() * op.matrix().transpose();
        assert!(max_abs(&(hht - DMatrix::identity(4, 4))) < 1e-12);

        let op = make_random_projection(16, 0.25, 11).unwrap();
        assert_eq!((op.rows(), op.cols()), (4, 16));
        let svd = svd_decompose(&op).unwrap();
        assert!(svd.singulars().iter().all(|s| (s - 1.0).abs() < 1e-8));

        let again = make_random_projection(16, 0.25, 11).unwrap();
        assert_eq!(op, again);
        let other = make_random_projection(16, 0.25, 12).unwrap();
        assert_ne!(op, other);

        assert!(make_random_projection(16, 0.01, 1).is_err());
        assert!(make_random_projection(16, 0.0, 1).is_err());
        assert!(make_random_projection(16, 1.5, 1).is_err());
    }

    #[test]
    fn inpainting_cases() {
        let op = make_inpainting_mask(4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(op.matrix(), &DMatrix::identity(4, 4));

        let op = make_inpainting_mask(4, &[0, 2]).unwrap();
        let svd = svd_decompose(&op).unwrap();
        assert_eq!(svd.singulars().as_slice(), &[1.0, 1.0]);
        let out = op.apply(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 3.0]);

        assert!(make_inpainting_mask(4, &[]).is_err());
        assert!(make_inpainting_mask(4, &[4]).is_err());
        assert!(make_inpainting_mask(4, &[1, 1]).is_err());
    }

    #[test]
    fn factory_spectra() {
        let blur = make_uniform_blur(6, 3, Boundary::Circular).unwrap();
        let svd = svd_decompose(&blur).unwrap();
        assert_factorisation(&blur, &svd);
        // A row-stochastic circulant has the constant vector as its top singular vector.
        assert!((svd.singulars()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snop_round_trip_and_rejection() {
        let op = make_block_average(4, 2).unwrap();
        let mut bytes = Vec::new();
        op.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SNOP");
        assert_eq!(bytes.len(), 14 + 8 * 4 * 16);
        // Row-major: the first row's second entry is pixel (0, 1).
        let second = f64::from_le_bytes(bytes[22..30].try_into().unwrap());
        assert_eq!(second, 0.25);
        let back = LinearOperator::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, op);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            LinearOperator::read_from(bad.as_slice()),
            Err(SnipsError::Format(_))
        ));
        assert!(LinearOperator::read_from(&bytes[..20]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn operator() -> impl Strategy<Value = LinearOperator> {
            (1usize..=32, 1usize..=32).prop_flat_map(|(m, n)| {
                prop::collection::vec(-2.0f64..2.0, m * n)
                    .prop_map(move |e| LinearOperator::from_row_major(m, n, &e).unwrap())
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn svd_round_trip(op in operator()) {
                let svd = svd_decompose(&op).unwrap();
                assert_factorisation(&op, &svd);
            }

            #[test]
            fn factor_application_matches_dense(op in operator(), seed in 0u64..1000) {
                let svd = svd_decompose(&op).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = DVector::from_fn(op.cols(), |_, _| StandardNormal.sample(&mut rng));
                let dense = op.apply(&x).unwrap();
                let factored = svd.apply(&x).unwrap();
                let scale = dense.norm().max(1e-300);
                prop_assert!((dense - factored).norm() / scale < 1e-10 || scale < 1e-12);
            }
        }
    }
}
