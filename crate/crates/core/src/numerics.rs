//! Seeded random generation and the small dense linear algebra used by the
//! simulator and the neural engine.
//!
//! All arithmetic is `f64`. Random streams are ChaCha8; an `Rng` is built
//! from a 64-bit seed and an optional stream id, and distinct stream ids
//! under one seed give independent sequences.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Largest Poisson rate accepted by [`sample_poisson`].
pub const POISSON_MAX_RATE: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Sub-stream `stream` of `seed`. ChaCha's native 64-bit stream
    /// selector keeps sub-streams of one seed non-overlapping.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Child generator seeded from this one's next output. Consumes one draw.
    pub fn fork(&mut self, stream: u64) -> Rng {
        let seed = self.inner.next_u64();
        Rng::with_stream(seed, stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Unit diagonal, constant off-diagonal.
    pub fn compound_symmetry(n: usize, diag: f64, offdiag: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = if i == j { diag } else { offdiag };
            }
        }
        m
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            false,
            &other.data,
            false,
            &mut out.data,
            0.0,
        );
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "vector of length {} against {} columns",
                x.len(),
                self.cols
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = a·b + beta·c` for row-major operands, `a` is m×k and `b` is k×n
/// after the optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    lower: DenseMatrix,
}

impl CholFactor {
    /// The degenerate factor L = 0 of order `n`; sampling returns the mean.
    pub fn zero(n: usize) -> Self {
        Self {
            lower: DenseMatrix::zeros(n, n),
        }
    }

    pub fn order(&self) -> usize {
        self.lower.rows()
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    /// L·Lᵀ.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.order();
        let mut out = DenseMatrix::zeros(n, n);
        gemm(
            n,
            n,
            n,
            self.lower.as_slice(),
            false,
            self.lower.as_slice(),
            true,
            out.as_mut_slice(),
            0.0,
        );
        out
    }

    /// `out = L·z`, exploiting the triangular structure.
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        let n = self.order();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            *o = dot(&self.lower.row(i)[..=i], &z[..=i]);
        }
    }
}

pub fn cholesky(sigma: &DenseMatrix) -> Result<CholFactor> {
    if !sigma.is_square() {
        return Err(Error::Shape(format!(
            "cholesky needs a square matrix, got {}x{}",
            sigma.rows(),
            sigma.cols()
        )));
    }
    let asym = sigma.max_asymmetry();
    if asym > 1e-12 {
        return Err(Error::Shape(format!(
            "matrix is not symmetric (max |a_ij - a_ji| = {asym:e})"
        )));
    }
    let n = sigma.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let pivot = sigma[(j, j)] - l.row(j)[..j].iter().map(|v| v * v).sum::<f64>();
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let diag = pivot.sqrt();
        l[(j, j)] = diag;
        for i in j + 1..n {
            let s = sigma[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / diag;
        }
    }
    Ok(CholFactor { lower: l })
}

/// One draw of `mean + L·z` with `z` standard normal.
pub fn sample_mvn(mean: &[f64], factor: &CholFactor, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut out = vec![0.0; mean.len()];
    sample_mvn_into(mean, factor, rng, &mut out)?;
    Ok(out)
}

pub fn sample_mvn_into(
    mean: &[f64],
    factor: &CholFactor,
    rng: &mut Rng,
    out: &mut [f64],
) -> Result<()> {
    let n = factor.order();
    if mean.len() != n || out.len() != n {
        return Err(Error::Shape(format!(
            "mean of dimension {} against factor of order {n}",
            mean.len()
        )));
    }
    let z: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    factor.apply(&z, out);
    for (o, m) in out.iter_mut().zip(mean) {
        *o += m;
    }
    Ok(())
}

/// Poisson draw by CDF inversion. Rates above [`POISSON_MAX_RATE`] are
/// rejected.
pub fn sample_poisson(lambda: f64, rng: &mut Rng) -> Result<u64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "poisson rate must be finite and non-negative, got {lambda}"
        )));
    }
    if lambda > POISSON_MAX_RATE {
        return Err(Error::InvalidArgument(format!(
            "poisson rate {lambda} exceeds the supported maximum {POISSON_MAX_RATE}"
        )));
    }
    if lambda == 0.0 {
        return Ok(0);
    }
    let u = rng.uniform();
    let mut k = 0u64;
    let mut pmf = (-lambda).exp();
    let mut cdf = pmf;
    while u >= cdf {
        k += 1;
        pmf *= lambda / k as f64;
        cdf += pmf;
        // cdf can stall just below 1 in floating point
        if pmf < f64::MIN_POSITIVE {
            break;
        }
    }
    Ok(k)
}

pub fn sample_bernoulli(p: f64, rng: &mut Rng) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "bernoulli probability must lie in [0, 1], got {p}"
        )));
    }
    Ok(u8::from(rng.uniform() < p))
}
