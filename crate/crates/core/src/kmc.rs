//! Potts-model kinetic Monte Carlo grain growth.
//!
//! Each site carries a spin in `0..q`. The energy of a site is the number of
//! neighbors whose spin differs from its own; the system boundary energy is
//! the number of dissimilar neighbor bonds, each bond counted once. Sweeps
//! visit every site once in a fresh random permutation, propose the spin of a
//! uniformly chosen neighbor, and accept by the Metropolis rule, optionally
//! gated by a position-dependent mobility.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{self, Dims, LabelVolume, Provenance, VolumeMeta, VoxelError};

#[derive(Debug, Error)]
pub enum KmcError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("site {0:?} out of bounds")]
    IndexError([usize; 3]),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    #[default]
    Moore26,
    VonNeumann6,
}

impl Neighborhood {
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Neighborhood::Moore26 => manhattan > 0,
                        Neighborhood::VonNeumann6 => manhattan == 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Periodic,
    /// Sites outside the domain are not neighbors.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PottsConfig {
    /// Number of spin states.
    pub q: u32,
    /// Simulation temperature with k_B = 1.
    pub temperature: f64,
    #[serde(default)]
    pub neighborhood: Neighborhood,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PottsConfig {
    fn default() -> Self {
        Self {
            q: 200,
            temperature: 0.5,
            neighborhood: Neighborhood::Moore26,
            boundary: Boundary::Periodic,
            seed: 0,
        }
    }
}

impl PottsConfig {
    pub fn validate(&self) -> Result<(), KmcError> {
        if self.q < 2 {
            return Err(KmcError::InvalidConfig(format!("q must be >= 2, got {}", self.q)));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(KmcError::InvalidConfig(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Precomputed neighbor indices for every site.
#[derive(Debug, Clone)]
pub struct Lattice {
    dims: Dims,
    /// Flattened per-site neighbor lists of fixed stride (`ABSENT` marks a missing neighbor).
    neighbors: Vec<u32>,
    stride: usize,
}

const ABSENT: u32 = u32::MAX;

impl Lattice {
    pub fn new(dims: Dims, neighborhood: Neighborhood, boundary: Boundary) -> Self {
        assert!(dims.len() < ABSENT as usize, "lattice too large");
        let offsets = neighborhood.offsets();
        let stride = offsets.len();
        let n = [dims.nx as i64, dims.ny as i64, dims.nz as i64];
        let mut neighbors = Vec::with_capacity(dims.len() * stride);
        for i in 0..dims.len() {
            let [x, y, z] = dims.coords(i);
            for o in &offsets {
                let mut p = [x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]];
                let inside = match boundary {
                    Boundary::Periodic => {
                        for a in 0..3 {
                            p[a] = p[a].rem_euclid(n[a]);
                        }
                        true
                    }
                    Boundary::Fixed => dims.contains(p),
                };
                let j = if inside {
                    dims.index(p[0] as usize, p[1] as usize, p[2] as usize)
                } else {
                    i
                };
                // periodic wrap on a unit axis maps a site onto itself
                neighbors.push(if j != i { j as u32 } else { ABSENT });
            }
        }
        Self {
            dims,
            neighbors,
            stride,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn neighbors(&self, site: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbors[site * self.stride..(site + 1) * self.stride]
            .iter()
            .filter(|&&j| j != ABSENT)
            .map(|&j| j as usize)
    }
}

/// Distance-to-melt-pool field and the mobility it induces.
#[derive(Debug, Clone)]
pub struct MobilityField {
    dims: Dims,
    distance: Vec<f64>,
    mz: f64,
}

impl MobilityField {
    pub fn new(dims: Dims, distance: Vec<f64>, mz: f64) -> Result<Self, KmcError> {
        if !(mz > 0.0) {
            return Err(KmcError::InvalidConfig(format!("mz must be > 0, got {mz}")));
        }
        if distance.len() != dims.len() {
            return Err(KmcError::InvalidConfig("distance field size mismatch".into()));
        }
        if distance.iter().any(|&d| !(d >= 0.0)) {
            return Err(KmcError::InvalidConfig("distances must be >= 0".into()));
        }
        Ok(Self { dims, distance, mz })
    }

    pub fn uniform(dims: Dims, distance: f64, mz: f64) -> Result<Self, KmcError> {
        Self::new(dims, vec![distance; dims.len()], mz)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn mz(&self) -> f64 {
        self.mz
    }

    pub fn distance(&self, site: usize) -> f64 {
        self.distance[site]
    }

    #[inline]
    pub fn mobility(&self, site: usize) -> f64 {
        mobility_from_distance(self.distance[site], self.mz)
    }
}

/// `1 - d/mz` inside the cutoff, zero beyond it.
pub fn mobility_from_distance(d: f64, mz: f64) -> f64 {
    if d <= mz {
        1.0 - d / mz
    } else {
        0.0
    }
}

/// Ellipsoidal melt pool: center and semi-axes in voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeltPool {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

/// Sequence of melt-pool positions along a scan path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub pools: Vec<MeltPool>,
}

impl PathSpec {
    /// Back-and-forth raster in the x-y plane at height `z`: hatch lines along
    /// x spaced `hatch` apart in y, with pool centers every `step` along x.
    pub fn raster(dims: Dims, z: f64, hatch: f64, step: f64, semi_axes: [f64; 3]) -> Self {
        let mut pools = Vec::new();
        let mut y = 0.0;
        let mut forward = true;
        while y < dims.ny as f64 {
            let mut xs = Vec::new();
            let mut x = 0.0;
            while x < dims.nx as f64 {
                xs.push(x);
                x += step;
            }
            if !forward {
                xs.reverse();
            }
            pools.extend(xs.into_iter().map(|x| MeltPool {
                center: [x, y, z],
                semi_axes,
            }));
            forward = !forward;
            y += hatch;
        }
        Self { pools }
    }
}

/// Builds the distance field `d(x) = max(0, distance to nearest pool surface)`
/// over site coordinates.
pub fn raster_meltpool_distance(
    dims: Dims,
    path: &PathSpec,
    mz: f64,
) -> Result<MobilityField, KmcError> {
    if path.pools.is_empty() {
        return Err(KmcError::InvalidConfig("empty melt-pool path".into()));
    }
    for p in &path.pools {
        if p.semi_axes.iter().any(|&s| !(s > 0.0)) {
            return Err(KmcError::InvalidConfig("semi-axes must be > 0".into()));
        }
    }
    let distance = (0..dims.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = dims.coords(i);
            let p = [x as f64, y as f64, z as f64];
            path.pools
                .iter()
                .map(|pool| ellipsoid_distance(pool, p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    MobilityField::new(dims, distance, mz)
}

/// Distance from `p` to the surface of `pool`, or 0 if `p` is inside.
pub fn ellipsoid_distance(pool: &MeltPool, p: [f64; 3]) -> f64 {
    let q: [f64; 3] = std::array::from_fn(|a| (p[a] - pool.center[a]).abs());
    let e = pool.semi_axes;
    let inside: f64 = (0..3).map(|a| (q[a] / e[a]).powi(2)).sum();
    if inside <= 1.0 {
        return 0.0;
    }
    // Closest point on an axis-aligned ellipsoid: find t >= 0 with
    // sum((e_a q_a / (t + e_a^2))^2) = 1 by bisection.
    let f = |t: f64| -> f64 {
        (0..3)
            .map(|a| (e[a] * q[a] / (t + e[a] * e[a])).powi(2))
            .sum::<f64>()
            - 1.0
    };
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
    let emax = e.iter().cloned().fold(0.0, f64::max);
    let mut lo = 0.0;
    let mut hi = emax * norm + emax * emax;
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    (0..3)
        .map(|a| {
            let closest = e[a] * e[a] * q[a] / (t + e[a] * e[a]);
            (q[a] - closest).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub labels: LabelVolume,
    pub sweeps: u64,
    rng: ChaCha8Rng,
}

impl SimState {
    pub fn dims(&self) -> Dims {
        self.labels.dims()
    }
}

pub fn init_random_spins(dims: Dims, q: u32, seed: u64) -> Result<SimState, KmcError> {
    if q < 2 {
        return Err(KmcError::InvalidConfig(format!("q must be >= 2, got {q}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.len()).map(|_| rng.random_range(0..q)).collect();
    let labels = LabelVolume::from_vec(dims, data)?.with_meta(VolumeMeta {
        provenance: Provenance::Kmc,
        seed,
        ..VolumeMeta::default()
    });
    Ok(SimState {
        labels,
        sweeps: 0,
        rng,
    })
}

#[inline]
fn energy_with_spin(lattice: &Lattice, spins: &[u32], site: usize, spin: u32) -> i64 {
    lattice.neighbors(site).filter(|&j| spins[j] != spin).count() as i64
}

/// Number of neighbors of `site` whose spin differs from the site's own.
pub fn site_energy(
    state: &SimState,
    site: [usize; 3],
    config: &PottsConfig,
) -> Result<i64, KmcError> {
    let dims = state.dims();
    if site[0] >= dims.nx || site[1] >= dims.ny || site[2] >= dims.nz {
        return Err(KmcError::IndexError(site));
    }
    let lattice = Lattice::new(dims, config.neighborhood, config.boundary);
    let i = dims.index(site[0], site[1], site[2]);
    let spins = state.labels.data();
    Ok(energy_with_spin(&lattice, spins, i, spins[i]))
}

/// Boundary energy by full summation: half the sum of all site energies.
pub fn total_energy(labels: &LabelVolume, lattice: &Lattice) -> i64 {
    let spins = labels.data();
    let sum: i64 = (0..spins.len())
        .map(|i| energy_with_spin(lattice, spins, i, spins[i]))
        .sum();
    sum / 2
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepStats {
    /// Proposals that changed a spin.
    pub accepted_flips: u64,
    /// Sum of site-energy changes over accepted flips; equals the change in
    /// total boundary energy.
    pub delta_energy: i64,
}

/// One Monte Carlo sweep over all sites in a random permutation.
pub fn metropolis_sweep(
    state: &mut SimState,
    config: &PottsConfig,
    lattice: &Lattice,
    mobility: Option<&MobilityField>,
) -> SweepStats {
    let n = state.labels.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut state.rng);
    let mut stats = SweepStats::default();
    let temperature = config.temperature;
    let mut candidates: Vec<usize> = Vec::with_capacity(26);
    for &site in &order {
        let site = site as usize;
        let m = mobility.map_or(1.0, |f| f.mobility(site));
        if m <= 0.0 {
            continue;
        }
        candidates.clear();
        candidates.extend(lattice.neighbors(site));
        if candidates.is_empty() {
            continue;
        }
        let spins = state.labels.data();
        let pick = candidates[state.rng.random_range(0..candidates.len())];
        let current = spins[site];
        let proposed = spins[pick];
        if proposed == current {
            continue;
        }
        let mut old_e = 0i64;
        let mut new_e = 0i64;
        for &j in &candidates {
            let s = spins[j];
            old_e += (s != current) as i64;
            new_e += (s != proposed) as i64;
        }
        let delta = new_e - old_e;
        let base = if delta <= 0 {
            1.0
        } else if temperature > 0.0 {
            (-(delta as f64) / temperature).exp()
        } else {
            0.0
        };
        let p = base * m;
        let accept = p >= 1.0 || (p > 0.0 && state.rng.random::<f64>() < p);
        if accept {
            state.labels.data_mut()[site] = proposed;
            stats.accepted_flips += 1;
            stats.delta_energy += delta;
        }
    }
    state.sweeps += 1;
    stats
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryPoint {
    pub sweep: u64,
    /// Face-connected same-spin regions.
    pub grain_count: usize,
    pub total_energy: i64,
}

#[derive(Debug, Clone)]
pub struct GrowthRun {
    pub state: SimState,
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Runs `sweeps` sweeps from a random initial state, recording the grain
/// count and boundary energy before the first and after every sweep.
pub fn run_growth(
    dims: Dims,
    config: &PottsConfig,
    sweeps: u64,
    mobility: Option<&MobilityField>,
) -> Result<GrowthRun, KmcError> {
    run_growth_with(dims, config, sweeps, mobility, true)
}

fn run_growth_with(
    dims: Dims,
    config: &PottsConfig,
    sweeps: u64,
    mobility: Option<&MobilityField>,
    record_grains: bool,
) -> Result<GrowthRun, KmcError> {
    config.validate()?;
    if let Some(m) = mobility {
        if m.dims() != dims {
            return Err(KmcError::InvalidConfig("mobility field dims mismatch".into()));
        }
    }
    let lattice = Lattice::new(dims, config.neighborhood, config.boundary);
    let mut state = init_random_spins(dims, config.q, config.seed)?;
    let grains = |s: &SimState| {
        if record_grains {
            s.labels.connected_components().distinct_labels()
        } else {
            0
        }
    };
    let mut energy = total_energy(&state.labels, &lattice);
    let mut trajectory = vec![TrajectoryPoint {
        sweep: 0,
        grain_count: grains(&state),
        total_energy: energy,
    }];
    for _ in 0..sweeps {
        let stats = metropolis_sweep(&mut state, config, &lattice, mobility);
        energy += stats.delta_energy;
        trajectory.push(TrajectoryPoint {
            sweep: state.sweeps,
            grain_count: grains(&state),
            total_energy: energy,
        });
    }
    Ok(GrowthRun { state, trajectory })
}

pub fn dataset_file_name(run: usize) -> String {
    format!("kmc_{run:05}.gvox")
}

/// Writes `n_runs` simulations to `out_dir`; run `k` uses seed
/// `base_seed + k`. Runs execute in parallel.
pub fn generate_dataset(
    n_runs: usize,
    dims: Dims,
    config: &PottsConfig,
    sweeps: u64,
    base_seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, KmcError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(VoxelError::from)?;
    (0..n_runs)
        .into_par_iter()
        .map(|k| {
            let cfg = PottsConfig {
                seed: base_seed.wrapping_add(k as u64),
                ..config.clone()
            };
            let run = run_growth_with(dims, &cfg, sweeps, None, false)?;
            let path = out_dir.join(dataset_file_name(k));
            voxel::write_gvox(&run.state.labels, &path)?;
            Ok(path)
        })
        .collect()
}
