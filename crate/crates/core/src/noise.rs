//! Exact sampling of noise increments on uniform square grids by circulant
//! embedding, dyadic subsampling for coupling across levels, and a dense
//! pivoted-Cholesky sampler used as a reference.
//!
//! Random numbers: every pair of consecutive increments `(2k, 2k + 1)` of a
//! stream comes from one ChaCha8 generator seeded with a SplitMix64 mix of
//! `(master_seed, sample_index, k)`. Gaussians use the ziggurat sampler of
//! `rand_distr::StandardNormal`, so increments are reproducible bit for bit
//! regardless of evaluation order.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::geometry::{Point2, MAX_LEVEL};
use crate::kernels::KernelSpec;

/// Eigenvalues below `-NEGATIVE_TOL * max` count as negative.
pub const NEGATIVE_TOL: f64 = 1e-10;
/// Default number of torus doublings tried before giving up.
pub const DEFAULT_MAX_PADDING: u32 = 4;

const DUMP_MAGIC: [u8; 4] = *b"ISPN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingMode {
    Strict,
    #[default]
    Clip,
}

impl EmbeddingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strict" => Ok(EmbeddingMode::Strict),
            "clip" => Ok(EmbeddingMode::Clip),
            other => Err(Error::config(format!("unknown embedding mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingMode::Strict => "strict",
            EmbeddingMode::Clip => "clip",
        }
    }
}

/// Nonnegative eigenvalues of the block-circulant extension of the grid covariance.
pub struct CirculantSpectrum {
    grid_level: u32,
    embed_size: usize,
    doublings: u32,
    eigenvalues: Vec<f64>,
    amplitude: Vec<f64>,
    clip_count: usize,
    clipped_mass: f64,
    min_raw_eigenvalue: f64,
    kernel: KernelSpec,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CirculantSpectrum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CirculantSpectrum")
            .field("grid_level", &self.grid_level)
            .field("embed_size", &self.embed_size)
            .field("doublings", &self.doublings)
            .field("clip_count", &self.clip_count)
            .field("clipped_mass", &self.clipped_mass)
            .field("min_raw_eigenvalue", &self.min_raw_eigenvalue)
            .field("kernel", &self.kernel)
            .finish()
    }
}

impl CirculantSpectrum {
    pub fn grid_level(&self) -> u32 {
        self.grid_level
    }

    /// Nodes per axis of the sampled grid, `2^level + 1`.
    pub fn grid_points(&self) -> usize {
        (1usize << self.grid_level) + 1
    }

    pub fn embed_size(&self) -> usize {
        self.embed_size
    }

    pub fn doublings(&self) -> u32 {
        self.doublings
    }

    /// Row-major `embed_size x embed_size` eigenvalues after clipping.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn clip_count(&self) -> usize {
        self.clip_count
    }

    /// `sum |clipped| / sum(eigenvalues)`.
    pub fn clipped_fraction(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if total > 0.0 {
            self.clipped_mass / total
        } else {
            0.0
        }
    }

    pub fn min_raw_eigenvalue(&self) -> f64 {
        self.min_raw_eigenvalue
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
}

fn transpose(buf: &mut [Complex64], m: usize) {
    for i in 0..m {
        for j in (i + 1)..m {
            buf.swap(i * m + j, j * m + i);
        }
    }
}

/// In-place unnormalized 2D transform by rows then columns.
fn fft2(fft: &dyn Fft<f64>, buf: &mut [Complex64], scratch: &mut [Complex64], m: usize) {
    fft.process_with_scratch(buf, scratch);
    transpose(buf, m);
    fft.process_with_scratch(buf, scratch);
    transpose(buf, m);
}

/// Builds the circulant embedding spectrum of `kernel` on the level-`grid_level` grid.
pub fn build_spectrum(
    kernel: &KernelSpec,
    grid_level: u32,
    max_padding: u32,
    mode: EmbeddingMode,
) -> Result<CirculantSpectrum> {
    kernel.validate()?;
    if grid_level > MAX_LEVEL {
        return Err(Error::config(format!(
            "noise grid level {grid_level} exceeds {MAX_LEVEL}"
        )));
    }
    let spacing = 1.0 / (1u64 << grid_level) as f64;
    let mut planner = FftPlanner::<f64>::new();
    let mut doublings = 0;
    loop {
        let m = 1usize << (grid_level + 1 + doublings);
        let lag = |i: usize| i.min(m - i) as f64 * spacing;
        let mut buf: Vec<Complex64> = (0..m * m)
            .map(|idx| {
                let (i, j) = (idx % m, idx / m);
                Complex64::new(kernel.eval_lag(lag(i), lag(j)), 0.0)
            })
            .collect();
        let forward = planner.plan_fft_forward(m);
        let mut scratch = vec![Complex64::default(); forward.get_inplace_scratch_len()];
        fft2(forward.as_ref(), &mut buf, &mut scratch, m);
        let mut eig: Vec<f64> = buf.iter().map(|c| c.re).collect();
        let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let negative = min < -NEGATIVE_TOL * max;
        if negative && doublings < max_padding {
            doublings += 1;
            continue;
        }
        if negative && mode == EmbeddingMode::Strict {
            return Err(Error::NotEmbeddable {
                doublings,
                embed_size: m,
                min_eigenvalue: min,
            });
        }
        let mut clip_count = 0;
        let mut clipped_mass = 0.0;
        for v in eig.iter_mut() {
            if *v < 0.0 {
                if *v < -NEGATIVE_TOL * max {
                    clip_count += 1;
                }
                clipped_mass += -*v;
                *v = 0.0;
            }
        }
        let norm = 1.0 / m as f64;
        let amplitude = eig.iter().map(|&l| l.sqrt() * norm).collect();
        return Ok(CirculantSpectrum {
            grid_level,
            embed_size: m,
            doublings,
            eigenvalues: eig,
            amplitude,
            clip_count,
            clipped_mass,
            min_raw_eigenvalue: min,
            kernel: *kernel,
            inverse: planner.plan_fft_inverse(m),
        });
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the generator behind increments `2 * pair` and `2 * pair + 1`.
pub fn stream_seed(master_seed: u64, sample_index: u64, pair: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ sample_index) ^ pair)
}

/// Increments of one Monte Carlo sample, indexed by step.
pub struct NoiseStream {
    spectrum: Arc<CirculantSpectrum>,
    master_seed: u64,
    sample_index: u64,
    dt: f64,
    step_index: u64,
    cached_pair: Option<u64>,
    cached: [Vec<f64>; 2],
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl NoiseStream {
    pub fn new(
        spectrum: Arc<CirculantSpectrum>,
        master_seed: u64,
        sample_index: u64,
        dt: f64,
    ) -> Result<Self> {
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::config(format!(
                "time step must be nonnegative, got {dt}"
            )));
        }
        let m = spectrum.embed_size;
        let n = spectrum.grid_points();
        let scratch = vec![Complex64::default(); spectrum.inverse.get_inplace_scratch_len()];
        Ok(NoiseStream {
            spectrum,
            master_seed,
            sample_index,
            dt,
            step_index: 0,
            cached_pair: None,
            cached: [vec![0.0; n * n], vec![0.0; n * n]],
            buf: vec![Complex64::default(); m * m],
            scratch,
        })
    }

    pub fn spectrum(&self) -> &Arc<CirculantSpectrum> {
        &self.spectrum
    }

    pub fn grid_level(&self) -> u32 {
        self.spectrum.grid_level
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Repositions the stream; the next call to [`NoiseStream::sample_increment`] returns increment `step`.
    pub fn seek(&mut self, step: u64) {
        self.step_index = step;
    }

    fn fill_pair(&mut self, pair: u64) {
        let spec = &self.spectrum;
        let m = spec.embed_size;
        let n = spec.grid_points();
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(self.master_seed, self.sample_index, pair));
        for (c, &a) in self.buf.iter_mut().zip(&spec.amplitude) {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *c = Complex64::new(a * re, a * im);
        }
        fft2(spec.inverse.as_ref(), &mut self.buf, &mut self.scratch, m);
        let sdt = self.dt.sqrt();
        for j in 0..n {
            for i in 0..n {
                let c = self.buf[j * m + i];
                self.cached[0][j * n + i] = sdt * c.re;
                self.cached[1][j * n + i] = sdt * c.im;
            }
        }
        self.cached_pair = Some(pair);
    }

    /// Increment number `step` as row-major nodal values on the `(2^level + 1)^2` grid.
    pub fn increment_at(&mut self, step: u64) -> &[f64] {
        let pair = step / 2;
        if self.cached_pair != Some(pair) {
            self.fill_pair(pair);
        }
        &self.cached[(step % 2) as usize]
    }

    /// Next increment in sequence; advances the step index.
    pub fn sample_increment(&mut self) -> Vec<f64> {
        let step = self.step_index;
        self.step_index += 1;
        self.increment_at(step).to_vec()
    }
}

/// Restricts row-major nodal values on a level-`fine_level` grid to the nested level-`target_level` grid.
pub fn subsample(fine: &[f64], fine_level: u32, target_level: u32) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    subsample_into(fine, fine_level, target_level, &mut out)?;
    Ok(out)
}

pub fn subsample_into(
    fine: &[f64],
    fine_level: u32,
    target_level: u32,
    out: &mut Vec<f64>,
) -> Result<()> {
    if target_level > fine_level {
        return Err(Error::config(format!(
            "cannot subsample level {fine_level} to finer level {target_level}"
        )));
    }
    let nf = (1usize << fine_level) + 1;
    if fine.len() != nf * nf {
        return Err(Error::config(format!(
            "expected {} values on a level-{fine_level} grid, got {}",
            nf * nf,
            fine.len()
        )));
    }
    let stride = 1usize << (fine_level - target_level);
    let nc = (1usize << target_level) + 1;
    out.clear();
    out.reserve(nc * nc);
    for j in 0..nc {
        for i in 0..nc {
            out.push(fine[j * stride * nf + i * stride]);
        }
    }
    Ok(())
}

/// Pivoted Cholesky factor `L` (n x rank, column-major) of a positive semidefinite matrix.
fn pivoted_cholesky(a: &[f64], n: usize) -> Result<(Vec<f64>, usize)> {
    let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0f64, f64::max);
    let mut diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = Vec::with_capacity(n * n);
    let mut rank = 0;
    while rank < n {
        let (k, &best) = perm[rank..]
            .iter()
            .enumerate()
            .map(|(k, &p)| (k + rank, &diag[p]))
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        if best <= 1e-12 * max_diag {
            break;
        }
        perm.swap(rank, k);
        let p = perm[rank];
        let pivot = best.sqrt();
        let mut col = vec![0.0; n];
        col[p] = pivot;
        for &i in &perm[rank + 1..] {
            let mut s = a[i * n + p];
            for c in 0..rank {
                s -= l[c * n + i] * l[c * n + p];
            }
            col[i] = s / pivot;
            diag[i] -= col[i] * col[i];
        }
        l.extend_from_slice(&col);
        rank += 1;
    }
    if let Some(&worst) = perm[rank..]
        .iter()
        .map(|&p| &diag[p])
        .min_by(|a, b| a.total_cmp(b))
    {
        if worst < -1e-8 * max_diag {
            return Err(Error::KernelNotPsd {
                pivot: worst,
                max_diag,
            });
        }
    }
    Ok((l, rank))
}

/// Reference sampler from a pivoted Cholesky factor of `dt * q(p_i, p_j)`.
#[derive(Debug, Clone)]
pub struct DenseSampler {
    n: usize,
    rank: usize,
    factor: Vec<f64>,
}

pub const DENSE_MAX_POINTS: usize = 4096;

impl DenseSampler {
    pub fn new(kernel: &KernelSpec, points: &[Point2], dt: f64) -> Result<Self> {
        let n = points.len();
        if n == 0 || n > DENSE_MAX_POINTS {
            return Err(Error::config(format!(
                "dense sampler supports 1..={DENSE_MAX_POINTS} points, got {n}"
            )));
        }
        if !(dt >= 0.0 && dt.is_finite()) {
            return Err(Error::config(format!(
                "time step must be nonnegative, got {dt}"
            )));
        }
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = dt * kernel.eval(points[i], points[j]);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        if dt == 0.0 {
            return Ok(DenseSampler {
                n,
                rank: 0,
                factor: Vec::new(),
            });
        }
        let (factor, rank) = pivoted_cholesky(&a, n)?;
        Ok(DenseSampler { n, rank, factor })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Entry `(i, c)` of the factor.
    pub fn factor(&self, i: usize, c: usize) -> f64 {
        self.factor[c * self.n + i]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for c in 0..self.rank {
            let z: f64 = rng.sample(StandardNormal);
            let col = &self.factor[c * self.n..(c + 1) * self.n];
            for (o, &v) in out.iter_mut().zip(col) {
                *o += v * z;
            }
        }
        out
    }
}

/// Writes an increment as a 16-byte header (magic, level u32, step u64) and little-endian f64 values.
pub fn write_increment_dump(path: &Path, level: u32, step: u64, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 8 * values.len());
    bytes.extend_from_slice(&DUMP_MAGIC);
    bytes.extend_from_slice(&level.to_le_bytes());
    bytes.extend_from_slice(&step.to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a dump written by [`write_increment_dump`]: `(level, step, values)`.
pub fn read_increment_dump(path: &Path) -> Result<(u32, u64, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || bytes[..4] != DUMP_MAGIC || (bytes.len() - 16) % 8 != 0 {
        return Err(Error::config(format!(
            "{} is not an increment dump",
            path.display()
        )));
    }
    let level = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let step = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((level, step, values))
}
