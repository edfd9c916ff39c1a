//! Dense linear algebra for compressors, models and spectral diagnostics.
//!
//! Everything is row-major `f64`. A tensor with `cols == 1` is a vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Columns whose norm falls below this after projection are treated as
/// linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Deterministic generator used for every random initialisation.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a sub-stream index (worker, layer, epoch, ...).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Column vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, data)
    }

    /// Standard-normal entries drawn from `seed`.
    pub fn random_normal(rows: usize, cols: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        for (r, v) in values.iter().enumerate() {
            self.set(r, c, *v);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        matmul(self, rhs)
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn scale_mut(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.data)
    }
}

impl std::ops::Index<(usize, usize)> for Tensor {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor {
        rows: m,
        cols: n,
        data: out,
    })
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(Tensor {
        rows: m,
        cols: n,
        data: out,
    })
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Euclidean norm (Frobenius for matrices), scaled to avoid overflow.
pub fn norm2(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * sum.sqrt()
}

/// Result of [`orthonormalize`].
#[derive(Debug, Clone)]
pub struct Orthonormalized {
    pub q: Tensor,
    /// Columns that were numerically dependent and got replaced by a
    /// deterministic random direction.
    pub replaced: Vec<usize>,
}

fn project_out(v: &mut [f64], basis: &Tensor, upto: usize) {
    for j in 0..upto {
        let mut c = 0.0;
        for (r, x) in v.iter().enumerate() {
            c += basis.get(r, j) * x;
        }
        for (r, x) in v.iter_mut().enumerate() {
            *x -= c * basis.get(r, j);
        }
    }
}

/// Two-pass modified Gram–Schmidt over the columns of `m`.
///
/// A column left with (relative) norm below [`RANK_TOLERANCE`] after
/// projection is replaced by a pseudo-random unit vector drawn from `seed`
/// and orthogonalised against the columns before it.
pub fn orthonormalize(m: &Tensor, seed: u64) -> Result<Orthonormalized> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(Error::Shape(format!(
            "cannot orthonormalize {cols} columns in dimension {rows}"
        )));
    }
    let mut q = m.clone();
    let mut replaced = Vec::new();
    for j in 0..cols {
        let mut v = q.column(j);
        let original = norm2(&v);
        project_out(&mut v, &q, j);
        project_out(&mut v, &q, j);
        let mut n = norm2(&v);
        if n < RANK_TOLERANCE * original.max(1.0) || !n.is_finite() {
            replaced.push(j);
            let mut rng = seeded_rng(derive_seed(seed, j as u64));
            loop {
                v = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
                let before = norm2(&v);
                project_out(&mut v, &q, j);
                project_out(&mut v, &q, j);
                n = norm2(&v);
                if n > 1e-6 * before {
                    break;
                }
            }
        }
        for x in v.iter_mut() {
            *x /= n;
        }
        q.set_column(j, &v);
    }
    Ok(Orthonormalized { q, replaced })
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Dominant eigenpair of a symmetric operator by power iteration.
///
/// Converged when successive Rayleigh quotients agree to `tol` (relative to
/// `max(1, |λ|)`). On exhaustion the best-so-far pair is returned with
/// `converged == false`.
pub fn power_iteration_top_eig<F>(matvec: F, dim: usize, iters: usize, tol: f64, seed: u64) -> EigenPair
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut rng = seeded_rng(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n);

    let mut lambda = f64::NAN;
    for it in 1..=iters.max(1) {
        let av = matvec(&v);
        let rq = dot(&v, &av);
        let n = norm2(&av);
        if n == 0.0 {
            return EigenPair {
                value: 0.0,
                vector: v,
                converged: true,
                iterations: it,
            };
        }
        let done = (rq - lambda).abs() <= tol * rq.abs().max(1.0);
        lambda = rq;
        if done {
            return EigenPair {
                value: lambda,
                vector: v,
                converged: true,
                iterations: it,
            };
        }
        v = av.into_iter().map(|x| x / n).collect();
    }
    EigenPair {
        value: lambda,
        vector: v,
        converged: false,
        iterations: iters.max(1),
    }
}

/// Top-`k` eigenpairs by repeated power iteration on the deflated operator
/// `A − Σ λᵢ vᵢ vᵢᵀ`.
pub fn top_eigs_deflated<F>(matvec: F, dim: usize, k: usize, iters: usize, tol: f64, seed: u64) -> Vec<EigenPair>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut found: Vec<EigenPair> = Vec::with_capacity(k);
    for i in 0..k.min(dim) {
        let deflated = |x: &[f64]| {
            let mut y = matvec(x);
            for p in &found {
                let c = p.value * dot(&p.vector, x);
                for (yj, vj) in y.iter_mut().zip(&p.vector) {
                    *yj -= c * vj;
                }
            }
            y
        };
        let pair = power_iteration_top_eig(deflated, dim, iters, tol, derive_seed(seed, i as u64));
        found.push(pair);
    }
    found
}
