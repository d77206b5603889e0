//! Echo-state reservoir computer.
//!
//! A fixed sparse adjacency matrix `A` and a one-entry-per-row input matrix
//! `W_in` drive the state update `r' = tanh(A r + W_in u)`. Only the linear
//! readout `v = W_out f(r)` is trained, by ridge regression on streamed
//! normal equations.

use std::io::{Read, Write};

use faer::linalg::matmul::triangular::BlockStructure;
use faer::linalg::solvers::Solve;
use faer::{Accum, Mat, Side};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::series::Series;

/// Draws of `A` attempted before giving up on a nilpotent matrix.
pub const MAX_ADJACENCY_DRAWS: usize = 16;

/// Relative change in the dominant-eigenvalue magnitude that stops power iteration.
pub const SPECTRAL_TOLERANCE: f64 = 1e-8;

const POWER_ITER_MAX: usize = 200_000;
const ACCUMULATOR_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReservoirParams {
    /// `D_r`.
    pub size: usize,
    /// `a`: input weights are uniform in `[-a, a]`.
    pub input_scale: f64,
    /// `d`: fraction of nonzero entries of `A`.
    pub density: f64,
    /// `rho`.
    pub spectral_radius: f64,
    /// `beta`.
    pub ridge: f64,
    /// Width of the input and output vectors.
    pub input_dim: usize,
}

impl Default for ReservoirParams {
    fn default() -> Self {
        Self {
            size: 5000,
            input_scale: 0.5,
            density: 0.0006,
            spectral_radius: 0.1,
            ridge: 1e-4,
            input_dim: 8,
        }
    }
}

impl ReservoirParams {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::invalid("reservoir size must be >= 2"));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::invalid("reservoir density must be in (0, 1]"));
        }
        if !(self.spectral_radius > 0.0) || !self.spectral_radius.is_finite() {
            return Err(Error::invalid("spectral radius must be > 0"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::invalid("ridge parameter must be >= 0"));
        }
        if !(self.input_scale > 0.0) {
            return Err(Error::invalid("input scale must be > 0"));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid("input dimension must be >= 1"));
        }
        Ok(())
    }
}

/// Compressed sparse row matrix; only what the reservoir needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Triplets must be sorted by row, then column, without duplicates.
    pub fn from_sorted_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::format("sparse matrix", format!("entry ({r}, {c}) out of bounds")));
            }
            if last.is_some_and(|l| l >= (r, c)) {
                return Err(Error::format("sparse matrix", "triplets not sorted or duplicated"));
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            cols: triplets.iter().map(|t| t.1).collect(),
            vals: triplets.iter().map(|t| t.2).collect(),
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    #[inline]
    pub fn row_dot(&self, r: usize, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in self.row_ptr[r]..self.row_ptr[r + 1] {
            s += self.vals[k] * x[self.cols[k]];
        }
        s
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate().take(self.nrows) {
            *out = self.row_dot(r, x);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.vals {
            *v *= factor;
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            d[(r, c)] = v;
        }
        d
    }
}

/// Magnitude of the dominant eigenvalue of `a` by power iteration.
///
/// The estimate is the two-step growth `sqrt(|A^2 x| / |x|)`, which settles
/// for a real dominant eigenvalue as well as for a `±lambda` or complex
/// conjugate dominant pair where the one-step ratio oscillates. Returns 0
/// for a nilpotent matrix.
pub fn spectral_radius(a: &SparseMatrix, tol: f64) -> f64 {
    let n = a.nrows();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut prev = f64::NAN;
    for _ in 0..POWER_ITER_MAX {
        a.matvec(&x, &mut y);
        a.matvec(&y, &mut z);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let est = norm.sqrt();
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi = zi / norm;
        }
        if (est - prev).abs() <= tol * est {
            return est;
        }
        prev = est;
    }
    log::warn!("power iteration did not converge; last estimate {prev}");
    prev
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirState(Vec<f64>);

impl ReservoirState {
    pub fn zeros(size: usize) -> Self {
        Self(vec![0.0; size])
    }

    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `f(r)` with one-based `i`: `f_i = r_i` for odd `i`, `f_i = r_{i-1} r_{i-2}`
/// for even `i`, indices taken modulo `D_r` (so `f_2 = r_1 r_{D_r}`).
pub fn readout_transform(r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r.len()];
    readout_transform_into(r, &mut out);
    out
}

pub fn readout_transform_into(r: &[f64], out: &mut [f64]) {
    let n = r.len();
    for j in 0..n {
        // zero-based j even <=> one-based index odd
        out[j] = if j % 2 == 0 {
            r[j]
        } else {
            r[j - 1] * r[(j + n - 2) % n]
        };
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReservoirNet {
    params: ReservoirParams,
    seed: u64,
    /// Column and value of the single nonzero in each row of `W_in`.
    input_cols: Vec<usize>,
    input_vals: Vec<f64>,
    adjacency: SparseMatrix,
    /// `W_out`, row-major `input_dim x size`.
    readout: Option<Vec<f64>>,
}

pub fn init_network(params: &ReservoirParams, seed: u64) -> Result<ReservoirNet> {
    params.validate()?;
    let n = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_val = Uniform::new_inclusive(-params.input_scale, params.input_scale)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut input_cols = Vec::with_capacity(n);
    let mut input_vals = Vec::with_capacity(n);
    for _ in 0..n {
        input_cols.push(rng.random_range(0..params.input_dim));
        input_vals.push(in_val.sample(&mut rng));
    }

    let per_row = Binomial::new(n as u64, params.density).map_err(|e| Error::invalid(e.to_string()))?;
    for _ in 0..MAX_ADJACENCY_DRAWS {
        let mut triplets = Vec::new();
        for r in 0..n {
            let k = per_row.sample(&mut rng) as usize;
            let mut cols = index::sample(&mut rng, n, k).into_vec();
            cols.sort_unstable();
            for c in cols {
                let mut v: f64 = rng.random();
                while v == 0.0 {
                    v = rng.random();
                }
                triplets.push((r, c, v));
            }
        }
        let mut adjacency = SparseMatrix::from_sorted_triplets(n, n, &triplets)?;
        let radius = spectral_radius(&adjacency, SPECTRAL_TOLERANCE);
        if radius > 0.0 {
            adjacency.scale(params.spectral_radius / radius);
            return Ok(ReservoirNet {
                params: *params,
                seed,
                input_cols,
                input_vals,
                adjacency,
                readout: None,
            });
        }
        log::debug!("adjacency draw is nilpotent, redrawing");
    }
    Err(Error::DegenerateReservoir {
        attempts: MAX_ADJACENCY_DRAWS,
    })
}

impl ReservoirNet {
    /// Assembles a network from explicit matrices. `w_in` must hold exactly
    /// one nonzero per row.
    pub fn from_parts(
        params: ReservoirParams,
        seed: u64,
        w_in: &[(usize, usize, f64)],
        adjacency: SparseMatrix,
        readout: Option<Vec<f64>>,
    ) -> Result<Self> {
        params.validate()?;
        let n = params.size;
        if adjacency.nrows() != n || adjacency.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: adjacency.nrows(),
            });
        }
        if w_in.len() != n || w_in.iter().enumerate().any(|(i, t)| t.0 != i || t.1 >= params.input_dim) {
            return Err(Error::format("input matrix", "need exactly one entry per row"));
        }
        if let Some(w) = &readout {
            if w.len() != n * params.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: n * params.input_dim,
                    got: w.len(),
                });
            }
        }
        Ok(Self {
            params,
            seed,
            input_cols: w_in.iter().map(|t| t.1).collect(),
            input_vals: w_in.iter().map(|t| t.2).collect(),
            adjacency,
            readout,
        })
    }

    pub fn params(&self) -> &ReservoirParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    /// `(row, col, value)` of every nonzero of `W_in`.
    pub fn input_triplets(&self) -> Vec<(usize, usize, f64)> {
        self.input_cols
            .iter()
            .zip(&self.input_vals)
            .enumerate()
            .map(|(r, (&c, &v))| (r, c, v))
            .collect()
    }

    pub fn readout(&self) -> Option<&[f64]> {
        self.readout.as_deref()
    }

    pub fn set_readout(&mut self, w_out: Vec<f64>) -> Result<()> {
        let expected = self.params.size * self.params.input_dim;
        if w_out.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: w_out.len(),
            });
        }
        self.readout = Some(w_out);
        Ok(())
    }

    fn check_input(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.params.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.params.input_dim,
                got: u.len(),
            });
        }
        Ok(())
    }

    fn advance_into(&self, r: &[f64], u: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let drive = self.adjacency.row_dot(i, r) + self.input_vals[i] * u[self.input_cols[i]];
            *o = drive.tanh();
        }
    }

    /// `tanh(A r + W_in u)`.
    pub fn advance(&self, r: &ReservoirState, u: &[f64]) -> Result<ReservoirState> {
        self.check_input(u)?;
        if r.len() != self.params.size {
            return Err(Error::DimensionMismatch {
                expected: self.params.size,
                got: r.len(),
            });
        }
        let mut out = vec![0.0; self.params.size];
        self.advance_into(&r.0, u, &mut out);
        Ok(ReservoirState(out))
    }

    /// Readout applied to an already transformed state.
    fn output_into(&self, w_out: &[f64], features: &[f64], out: &mut [f64]) {
        let n = self.params.size;
        for (row, o) in out.iter_mut().enumerate() {
            let w = &w_out[row * n..(row + 1) * n];
            *o = w.iter().zip(features).map(|(a, b)| a * b).sum();
        }
    }

    /// `W_out f(r)`.
    pub fn output(&self, r: &ReservoirState) -> Result<Vec<f64>> {
        let w = self.readout.as_deref().ok_or(Error::Untrained)?;
        let f = readout_transform(&r.0);
        let mut v = vec![0.0; self.params.input_dim];
        self.output_into(w, &f, &mut v);
        Ok(v)
    }

    /// Teacher-forced pass over `series`: the state built from inputs up to
    /// `u_{k-1}` is paired with target `u_k` for every `k > washout`.
    pub fn accumulate<'a>(
        &self,
        series: impl IntoIterator<Item = &'a [f64]>,
        washout: usize,
        exec: Execution,
    ) -> Result<TrainAccumulator> {
        let n = self.params.size;
        let mut acc = TrainAccumulator::new(n, self.params.input_dim);
        let mut r = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut len = 0usize;
        for (k, u) in series.into_iter().enumerate() {
            self.check_input(u)?;
            if k > washout {
                readout_transform_into(&r, &mut f);
                acc.push(&f, u, exec);
            }
            self.advance_into(&r, u, &mut next);
            std::mem::swap(&mut r, &mut next);
            len = k + 1;
        }
        if len < washout + 2 {
            return Err(Error::invalid(format!(
                "training series of {len} steps is too short for washout {washout}"
            )));
        }
        acc.flush(exec);
        Ok(acc)
    }

    /// Single-pass ridge training of `W_out`.
    pub fn train<'a>(
        &mut self,
        series: impl IntoIterator<Item = &'a [f64]>,
        washout: usize,
        exec: Execution,
    ) -> Result<()> {
        let acc = self.accumulate(series, washout, exec)?;
        let w = acc.solve(self.params.ridge, exec)?;
        self.readout = Some(w);
        Ok(())
    }

    /// Folds `advance` over `warm` starting from the zero state.
    pub fn spin_up<'a>(&self, warm: impl IntoIterator<Item = &'a [f64]>) -> Result<ReservoirState> {
        let mut r = vec![0.0; self.params.size];
        let mut next = vec![0.0; self.params.size];
        for u in warm {
            self.check_input(u)?;
            self.advance_into(&r, u, &mut next);
            std::mem::swap(&mut r, &mut next);
        }
        Ok(ReservoirState(r))
    }

    /// Closed-loop prediction: each output is fed back as the next input.
    pub fn predict(&self, r0: &ReservoirState, u0: &[f64], horizon: usize) -> Result<Series> {
        let w = self.readout.as_deref().ok_or(Error::Untrained)?;
        self.check_input(u0)?;
        let n = self.params.size;
        let mut out = Series::with_capacity(self.params.input_dim, horizon);
        let mut r = r0.0.clone();
        let mut next = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut u = u0.to_vec();
        let mut v = vec![0.0; self.params.input_dim];
        for step in 1..=horizon {
            self.advance_into(&r, &u, &mut next);
            std::mem::swap(&mut r, &mut next);
            readout_transform_into(&r, &mut f);
            self.output_into(w, &f, &mut v);
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::ReservoirBlowUp { step });
            }
            out.push(&v);
            u.copy_from_slice(&v);
        }
        Ok(out)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&NetHeader {
            params: self.params,
            seed: self.seed,
        })
        .map_err(|e| Error::format("reservoir header", e.to_string()))?;
        w.write_all(NET_MAGIC)?;
        put_u64(&mut w, header.len() as u64)?;
        w.write_all(&header)?;
        put_u64(&mut w, self.params.size as u64)?;
        for (r, c, v) in self.input_triplets() {
            put_triplet(&mut w, r, c, v)?;
        }
        put_u64(&mut w, self.adjacency.nnz() as u64)?;
        for (r, c, v) in self.adjacency.triplets() {
            put_triplet(&mut w, r, c, v)?;
        }
        match &self.readout {
            None => w.write_all(&[0u8])?,
            Some(out) => {
                w.write_all(&[1u8])?;
                put_u64(&mut w, self.params.input_dim as u64)?;
                put_u64(&mut w, self.params.size as u64)?;
                for v in out {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(Error::format("reservoir file", "bad magic"));
        }
        let hlen = get_u64(&mut r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: NetHeader =
            serde_json::from_slice(&hbuf).map_err(|e| Error::format("reservoir header", e.to_string()))?;
        let n_in = get_u64(&mut r)? as usize;
        let w_in = (0..n_in).map(|_| get_triplet(&mut r)).collect::<Result<Vec<_>>>()?;
        let nnz = get_u64(&mut r)? as usize;
        let a = (0..nnz).map(|_| get_triplet(&mut r)).collect::<Result<Vec<_>>>()?;
        let size = header.params.size;
        let adjacency = SparseMatrix::from_sorted_triplets(size, size, &a)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let readout = match flag[0] {
            0 => None,
            1 => {
                let rows = get_u64(&mut r)? as usize;
                let cols = get_u64(&mut r)? as usize;
                Some((0..rows * cols).map(|_| get_f64(&mut r)).collect::<Result<Vec<_>>>()?)
            }
            _ => return Err(Error::format("reservoir file", "bad readout flag")),
        };
        Self::from_parts(header.params, header.seed, &w_in, adjacency, readout)
    }
}

const NET_MAGIC: &[u8; 8] = b"RCNET\0\0\x01";

#[derive(Serialize, Deserialize)]
struct NetHeader {
    params: ReservoirParams,
    seed: u64,
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_triplet<W: Write>(w: &mut W, r: usize, c: usize, v: f64) -> Result<()> {
    put_u64(w, r as u64)?;
    put_u64(w, c as u64)?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_triplet<R: Read>(r: &mut R) -> Result<(usize, usize, f64)> {
    Ok((get_u64(r)? as usize, get_u64(r)? as usize, get_f64(r)?))
}

/// Streaming normal equations `sum f f^T` and `sum u f^T`.
///
/// Columns are buffered and folded in with blocked products; only the lower
/// triangle of the `D_r x D_r` sum is maintained.
pub struct TrainAccumulator {
    rrt: Mat<f64>,
    urt: Mat<f64>,
    pending_f: Mat<f64>,
    pending_u: Mat<f64>,
    fill: usize,
    count: usize,
}

impl TrainAccumulator {
    pub fn new(size: usize, output_dim: usize) -> Self {
        Self {
            rrt: Mat::zeros(size, size),
            urt: Mat::zeros(output_dim, size),
            pending_f: Mat::zeros(size, ACCUMULATOR_BATCH),
            pending_u: Mat::zeros(output_dim, ACCUMULATOR_BATCH),
            fill: 0,
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds one `(f(r_k), u_k)` pair.
    pub fn push(&mut self, features: &[f64], target: &[f64], exec: Execution) {
        let j = self.fill;
        for (i, &v) in features.iter().enumerate() {
            self.pending_f[(i, j)] = v;
        }
        for (i, &v) in target.iter().enumerate() {
            self.pending_u[(i, j)] = v;
        }
        self.fill += 1;
        self.count += 1;
        if self.fill == ACCUMULATOR_BATCH {
            self.flush(exec);
        }
    }

    pub fn flush(&mut self, exec: Execution) {
        if self.fill == 0 {
            return;
        }
        let par = exec.faer_par();
        let f = self.pending_f.as_ref().subcols(0, self.fill);
        let u = self.pending_u.as_ref().subcols(0, self.fill);
        faer::linalg::matmul::triangular::matmul(
            self.rrt.as_mut(),
            BlockStructure::TriangularLower,
            Accum::Add,
            f,
            BlockStructure::Rectangular,
            f.transpose(),
            BlockStructure::Rectangular,
            1.0,
            par,
        );
        faer::linalg::matmul::matmul(self.urt.as_mut(), Accum::Add, u, f.transpose(), 1.0, par);
        self.fill = 0;
    }

    /// Full symmetric `sum f f^T` (flushes pending columns first).
    pub fn normal_matrix(&mut self, exec: Execution) -> nalgebra::DMatrix<f64> {
        self.flush(exec);
        let n = self.rrt.nrows();
        nalgebra::DMatrix::from_fn(n, n, |i, j| {
            if i >= j {
                self.rrt[(i, j)]
            } else {
                self.rrt[(j, i)]
            }
        })
    }

    /// `sum u f^T` (flushes pending columns first).
    pub fn cross_matrix(&mut self, exec: Execution) -> nalgebra::DMatrix<f64> {
        self.flush(exec);
        nalgebra::DMatrix::from_fn(self.urt.nrows(), self.urt.ncols(), |i, j| self.urt[(i, j)])
    }

    /// `W_out = URt (RRt + beta I)^{-1}` by Cholesky solve; returned row-major.
    pub fn solve(mut self, beta: f64, exec: Execution) -> Result<Vec<f64>> {
        self.flush(exec);
        if self.count == 0 {
            return Err(Error::invalid("no training pairs accumulated"));
        }
        let n = self.rrt.nrows();
        let mut a = std::mem::replace(&mut self.rrt, Mat::zeros(0, 0));
        for i in 0..n {
            a[(i, i)] += beta;
        }
        let condition = diagonal_condition(&a);
        let llt = a.llt(Side::Lower).map_err(|_| Error::IllConditioned { condition })?;
        drop(a);
        let rhs = self.urt.transpose().to_owned();
        let x = llt.solve(&rhs);
        let dim = x.ncols();
        let mut w = Vec::with_capacity(dim * n);
        for row in 0..dim {
            for col in 0..n {
                w.push(x[(col, row)]);
            }
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::IllConditioned { condition });
        }
        Ok(w)
    }
}

/// Cheap condition proxy: ratio of extreme diagonal entries.
fn diagonal_condition(a: &Mat<f64>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..a.nrows() {
        let d = a[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}
