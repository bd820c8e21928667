//! Euler–Maruyama simulation of augmented systems.
//!
//! Path `k` draws its Brownian increments from its own ChaCha8 stream
//! (`stream = k`) keyed by the master seed, so an ensemble is a pure function
//! of `(seed, grid, system, n_paths)` and does not depend on how paths are
//! scheduled across workers.

use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::field_model::{AugmentedSystem, Block, Layout, ModelError};
use crate::linalg;

/// Voided-path fraction above which a simulation is aborted.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid time grid: t_end = {t_end}, n_steps = {n_steps}")]
    InvalidGrid { t_end: f64, n_steps: usize },
    #[error("n_paths must be positive")]
    NoPaths,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("state has {got} coordinates, layout expects {expected}")]
    LayoutMismatch { expected: usize, got: usize },
    #[error("layout has no {0:?} block")]
    MissingBlock(Block),
    #[error("{excluded} of {n_paths} paths produced non-finite states")]
    TooManyExcluded { excluded: usize, n_paths: usize },
    #[error("trajectories were not recorded")]
    TrajectoriesNotRecorded,
    #[error("failed to build worker pool: {0}")]
    ThreadPool(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self, SimError> {
        if !(t_end > 0.0 && t_end.is_finite()) || n_steps == 0 {
            return Err(SimError::InvalidGrid { t_end, n_steps });
        }
        Ok(Self { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn step(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_end * k as f64 / self.n_steps as f64
    }

    pub fn refined(&self) -> Self {
        Self {
            t_end: self.t_end,
            n_steps: 2 * self.n_steps,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Keep every grid state of every path (`n_paths × (n_steps + 1) × len`).
    pub record_trajectories: bool,
    /// Worker count; `None` uses the global rayon pool.
    pub threads: Option<usize>,
    /// Each step's increment is the sum of this many finer increments
    /// (`0` is read as `1`). A run with `n` steps and `substeps = 2` sees the
    /// same Brownian path as a run with `2n` steps, coarsened.
    pub substeps: usize,
}

/// Per-path Brownian increments: the noise source shared by every simulation.
pub struct NoiseStream {
    rng: ChaCha8Rng,
    sqrt_sub: f64,
    substeps: usize,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_from_seed(seed: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    key
}

impl NoiseStream {
    pub fn new(master_seed: u64, path: u64, dt: f64) -> Self {
        Self::with_substeps(master_seed, path, dt, 1)
    }

    pub fn with_substeps(master_seed: u64, path: u64, dt: f64, substeps: usize) -> Self {
        let substeps = substeps.max(1);
        let mut rng = ChaCha8Rng::from_seed(key_from_seed(master_seed));
        rng.set_stream(path);
        Self {
            rng,
            sqrt_sub: (dt / substeps as f64).sqrt(),
            substeps,
        }
    }

    /// Fills `dw` with one step's increments (variance `dt` each).
    #[inline]
    pub fn fill(&mut self, dw: &mut [f64]) {
        dw.iter_mut().for_each(|w| *w = 0.0);
        for _ in 0..self.substeps {
            for w in dw.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut self.rng);
                *w += self.sqrt_sub * g;
            }
        }
    }
}

/// All increments of one path, flat `n_steps × m`, exactly as `simulate` uses them.
pub fn path_increments(master_seed: u64, path: u64, grid: &TimeGrid, m: usize) -> Vec<f64> {
    let mut noise = NoiseStream::new(master_seed, path, grid.step());
    let mut out = vec![0.0; grid.n_steps * m];
    for step in out.chunks_mut(m) {
        noise.fill(step);
    }
    out
}

/// `N` simulated paths of one augmented system.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    system: Arc<AugmentedSystem>,
    grid: TimeGrid,
    master_seed: u64,
    n_paths: usize,
    initial: Vec<f64>,
    states: Vec<f64>,
    valid: Vec<bool>,
    excluded: usize,
    trajectories: Option<Vec<f64>>,
}

impl PathEnsemble {
    pub fn system(&self) -> &AugmentedSystem {
        &self.system
    }

    pub fn layout(&self) -> &Layout {
        self.system.layout()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.initial
    }

    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn is_valid(&self, path: usize) -> bool {
        self.valid[path]
    }

    /// Terminal states, flat `n_paths × len`. Excluded paths hold whatever
    /// non-finite state voided them.
    pub fn terminal_states(&self) -> &[f64] {
        &self.states
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        let n = self.layout().len();
        &self.states[path * n..(path + 1) * n]
    }

    pub fn has_trajectories(&self) -> bool {
        self.trajectories.is_some()
    }

    /// States of `path` at every grid time, flat `(n_steps + 1) × len`.
    pub fn trajectory(&self, path: usize) -> Result<&[f64], SimError> {
        let traj = self.trajectories.as_ref().ok_or(SimError::TrajectoriesNotRecorded)?;
        let per = (self.grid.n_steps + 1) * self.layout().len();
        Ok(&traj[path * per..(path + 1) * per])
    }

    fn require(&self, blocks: &[Block]) -> Result<(), SimError> {
        for b in blocks {
            if !self.layout().has(*b) {
                return Err(SimError::MissingBlock(*b));
            }
        }
        Ok(())
    }

    /// Evaluates `f` on every terminal state, in path order. Excluded paths
    /// yield `NaN` so that samples from ensembles with common noise stay
    /// aligned by index.
    pub fn pathwise_functional<F>(&self, required: &[Block], f: F) -> Result<Vec<f64>, SimError>
    where
        F: Fn(&Layout, &[f64]) -> f64 + Sync,
    {
        self.require(required)?;
        let lay = self.layout();
        Ok((0..self.n_paths)
            .into_par_iter()
            .map(|p| {
                if self.valid[p] {
                    f(lay, self.terminal(p))
                } else {
                    f64::NAN
                }
            })
            .collect())
    }

    /// Vector-valued variant; returns flat `n_paths × k`.
    pub fn pathwise_vector<F>(&self, required: &[Block], k: usize, f: F) -> Result<Vec<f64>, SimError>
    where
        F: Fn(&Layout, &[f64], &mut [f64]) + Sync,
    {
        self.require(required)?;
        let lay = self.layout();
        let mut out = vec![f64::NAN; self.n_paths * k];
        out.par_chunks_mut(k.max(1)).enumerate().for_each(|(p, o)| {
            if self.valid[p] {
                f(lay, self.terminal(p), o)
            }
        });
        Ok(out)
    }

    /// Per-path trajectory functional.
    pub fn trajectory_functional<F>(&self, required: &[Block], f: F) -> Result<Vec<f64>, SimError>
    where
        F: Fn(&Layout, &TimeGrid, &[f64]) -> f64 + Sync,
    {
        self.require(required)?;
        if self.trajectories.is_none() {
            return Err(SimError::TrajectoriesNotRecorded);
        }
        let lay = self.layout();
        (0..self.n_paths)
            .into_par_iter()
            .map(|p| {
                Ok(if self.valid[p] {
                    f(lay, &self.grid, self.trajectory(p)?)
                } else {
                    f64::NAN
                })
            })
            .collect()
    }

    /// Writes recorded trajectories of the first `max_paths` paths as CSV:
    /// `path,step,t,<component names>`.
    pub fn write_trajectories_csv<W: Write>(&self, out: W, max_paths: usize) -> Result<(), SimError> {
        if self.trajectories.is_none() {
            return Err(SimError::TrajectoriesNotRecorded);
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "step".into(), "t".into()];
        header.extend(self.layout().component_names());
        w.write_record(&header).map_err(csv_err)?;
        let n = self.layout().len();
        for p in 0..self.n_paths.min(max_paths) {
            let traj = self.trajectory(p)?;
            for k in 0..=self.grid.n_steps {
                let mut row = vec![p.to_string(), k.to_string(), self.grid.time(k).to_string()];
                row.extend(traj[k * n..(k + 1) * n].iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e))
}

/// Runs `f` on a dedicated pool of `threads` workers, or inline on the
/// global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, SimError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| SimError::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

pub fn simulate(
    system: &AugmentedSystem,
    z0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble, SimError> {
    simulate_with(system, z0, grid, n_paths, seed, &SimOptions::default())
}

pub fn simulate_with(
    system: &AugmentedSystem,
    z0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<PathEnsemble, SimError> {
    let len = system.layout().len();
    if z0.len() != len {
        return Err(SimError::LayoutMismatch {
            expected: len,
            got: z0.len(),
        });
    }
    if n_paths == 0 {
        return Err(SimError::NoPaths);
    }
    let d = system.layout().dim();
    let lip = system.local_lipschitz(&z0[..d]);
    if lip * grid.step() >= 1.0 {
        log::warn!(
            "step {} times local Lipschitz bound {lip:.3} at the initial point is not below 1",
            grid.step()
        );
    }
    let m = system.num_noise();
    let n_steps = grid.n_steps;
    let dt = grid.step();
    let per_traj = (n_steps + 1) * len;
    let record = opts.record_trajectories;
    let substeps = opts.substeps;

    let mut states = vec![0.0; n_paths * len];
    let mut valid = vec![true; n_paths];
    let mut trajectories = if record {
        Some(vec![0.0; n_paths * per_traj])
    } else {
        None
    };

    let run = || {
        let mut traj_chunks: Vec<Option<&mut [f64]>> = match trajectories.as_mut() {
            Some(t) => t.chunks_mut(CHUNK * per_traj).map(Some).collect(),
            None => (0..n_paths.div_ceil(CHUNK)).map(|_| None).collect(),
        };
        states
            .par_chunks_mut(CHUNK * len)
            .zip(valid.par_chunks_mut(CHUNK))
            .zip(traj_chunks.par_iter_mut())
            .enumerate()
            .for_each(|(c, ((st, ok), tr))| {
                let mut ws = system.workspace();
                let mut dw = vec![0.0; m];
                for (j, z) in st.chunks_mut(len).enumerate() {
                    let path = c * CHUNK + j;
                    let mut noise = NoiseStream::with_substeps(seed, path as u64, dt, substeps);
                    z.copy_from_slice(z0);
                    let mut tr_path = tr.as_deref_mut().map(|t| &mut t[j * per_traj..(j + 1) * per_traj]);
                    if let Some(t) = tr_path.as_deref_mut() {
                        t[..len].copy_from_slice(z);
                    }
                    let mut finite = true;
                    for k in 0..n_steps {
                        noise.fill(&mut dw);
                        system.step(grid.time(k), dt, z, &dw, &mut ws);
                        if let Some(t) = tr_path.as_deref_mut() {
                            t[(k + 1) * len..(k + 2) * len].copy_from_slice(z);
                        }
                        if !z.iter().all(|v| v.is_finite()) {
                            finite = false;
                            break;
                        }
                    }
                    ok[j] = finite;
                }
            });
    };
    with_threads(opts.threads, run)?;

    let excluded = valid.iter().filter(|v| !**v).count();
    if excluded > 0 {
        log::warn!("{excluded} of {n_paths} paths voided by non-finite states");
    }
    if excluded as f64 > MAX_EXCLUDED_FRACTION * n_paths as f64 {
        return Err(SimError::TooManyExcluded { excluded, n_paths });
    }
    Ok(PathEnsemble {
        system: Arc::new(system.clone()),
        grid: *grid,
        master_seed: seed,
        n_paths,
        initial: z0.to_vec(),
        states,
        valid,
        excluded,
        trajectories,
    })
}

/// `|U W − I|` (Frobenius) of the co-simulated inverse at the terminal state.
pub fn inverse_residual(layout: &Layout, z: &[f64]) -> f64 {
    let d = layout.dim();
    let u = layout.get(z, Block::Jacobian).expect("jacobian block");
    let w = layout.get(z, Block::InverseJacobian).expect("inverse block");
    let mut p = vec![0.0; d * d];
    linalg::matmul(u, w, &mut p, d);
    linalg::distance_from_identity(&p, d)
}

/// Per path, `|\hat V_T − U_T (V_0 + ∫_0^T U_s^{-1} Y_s ds)|` where
/// `Y_s = U_s M_s`, `M_s = Σ (U_s^{-1}X_i(x_s))(U_s^{-1}X_i(x_s))^T`, is the
/// forcing of the lifted covariance `\hat V`, the solution of the
/// inhomogeneous linear SDE whose variation-of-constants form this is. `M_s`
/// is evaluated with the simulated inverse block, exactly as in the forcing,
/// so `U_s^{-1} Y_s = M_s`; the integral is the trapezoid rule on the grid.
pub fn variation_of_constants_residual(ensemble: &PathEnsemble) -> Result<Vec<f64>, SimError> {
    let base = ensemble.system().base().clone();
    let required = [Block::Jacobian, Block::InverseJacobian, Block::LiftedCovariance];
    ensemble.trajectory_functional(&required, |lay, grid, traj| {
        let d = lay.dim();
        let d2 = d * d;
        let n = lay.len();
        let dt = grid.step();
        let ur = lay.range(Block::Jacobian).unwrap();
        let wr = lay.range(Block::InverseJacobian).unwrap();
        let vr = lay.range(Block::LiftedCovariance).unwrap();
        let mut integral = traj[vr.clone()].to_vec();
        let mut xi = vec![0.0; d];
        let mut wx = vec![0.0; d];
        let mut cov = vec![0.0; d2];
        let mut wy = vec![0.0; d2];
        let mut integrand = |z: &[f64], out: &mut [f64]| {
            cov.iter_mut().for_each(|v| *v = 0.0);
            for f in &base.fields()[1..] {
                f.eval(&z[..d], &mut xi);
                linalg::matvec(&z[wr.clone()], &xi, &mut wx, d);
                for r in 0..d {
                    for c in 0..d {
                        cov[r * d + c] += wx[r] * wx[c];
                    }
                }
            }
            out.copy_from_slice(&cov);
        };
        let steps = grid.n_steps();
        for k in 0..=steps {
            integrand(&traj[k * n..(k + 1) * n], &mut wy);
            let wgt = if k == 0 || k == steps { 0.5 * dt } else { dt };
            for e in 0..d2 {
                integral[e] += wgt * wy[e];
            }
        }
        let last = &traj[steps * n..(steps + 1) * n];
        let mut rhs = vec![0.0; d2];
        linalg::matmul(&last[ur.clone()], &integral, &mut rhs, d);
        last[vr.clone()]
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    })
}
