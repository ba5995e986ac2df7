//! Large-volume generation: runs windowed inpainting over a plan, batch by
//! batch, with resumable checkpoints.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendEndpoint, RemoteDenoiser};
use crate::ddpm::{
    analytic_gaussian_denoiser, repaint, CovarianceSpec, DdpmError, Denoiser, IdentityDenoiser, InpaintProblem,
    NoiseSchedule, RepaintConfig, ScheduleParams, ZeroDenoiser,
};
use crate::planner::{block_mask, GenerationPlan, PlanError};
use crate::voxel::{
    read_mask, read_scalar, write_gvox, Dims, MaskVolume, Provenance, ScalarVolume, VolumeMeta, VoxelError,
    SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Ddpm(#[from] DdpmError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error("invalid backend spec: {0}")]
    BackendSpec(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub schedule: ScheduleParams,
    pub resamples: usize,
    pub no_resample_tail: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let r = RepaintConfig::default();
        Self {
            schedule: ScheduleParams::default(),
            resamples: r.resamples,
            no_resample_tail: r.no_resample_tail,
            seed: 0,
        }
    }
}

impl GenerateConfig {
    /// Seed for one block, independent of execution order.
    pub fn block_seed(&self, point: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(point as u64);
        rng.next_u64()
    }
}

/// Volume under construction plus the set of voxels already generated.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationState {
    pub volume: ScalarVolume,
    pub generated: MaskVolume,
    pub completed_batches: usize,
}

impl GenerationState {
    pub fn new(plan: &GenerationPlan) -> Result<Self, GenerateError> {
        let dims = Dims::from_array(plan.domain_dims)?;
        Ok(Self {
            volume: ScalarVolume::filled(dims, 0.0),
            generated: MaskVolume::filled(dims, 0),
            completed_batches: 0,
        })
    }
}

/// Generates every block of one batch concurrently and writes the results back.
pub fn run_batch(
    plan: &GenerationPlan,
    batch: usize,
    state: &mut GenerationState,
    denoiser: &dyn Denoiser,
    config: &GenerateConfig,
) -> Result<(), GenerateError> {
    let schedule = NoiseSchedule::from_params(config.schedule)?;
    let points = plan
        .batches
        .get(batch)
        .ok_or(PlanError::NoSuchPoint(batch))?;
    let results: Vec<(usize, ScalarVolume)> = points
        .par_iter()
        .map(|&p| -> Result<_, GenerateError> {
            let window = plan.window(p);
            let problem = InpaintProblem {
                known: state.volume.extract_window(&window)?,
                mask: block_mask(plan, p, &state.generated)?,
                config: RepaintConfig {
                    resamples: config.resamples,
                    jump_size: 1,
                    no_resample_tail: config.no_resample_tail,
                    seed: config.block_seed(p),
                },
            };
            Ok((p, repaint(denoiser, &problem, &schedule)?))
        })
        .collect::<Result<_, _>>()?;
    let ones = MaskVolume::filled(Dims::cube(plan.config.block_size)?, 1);
    for (p, block) in results {
        let window = plan.window(p);
        state.volume.insert_window(&window, &block)?;
        state.generated.insert_window(&window, &ones)?;
    }
    state.completed_batches = state.completed_batches.max(batch + 1);
    Ok(())
}

/// Runs the remaining batches in order, calling `checkpoint` after each.
/// With `jobs`, blocks of a batch use at most that many threads.
pub fn generate(
    plan: &GenerationPlan,
    state: &mut GenerationState,
    denoiser: &dyn Denoiser,
    config: &GenerateConfig,
    jobs: Option<usize>,
    stop_after: Option<usize>,
    mut checkpoint: impl FnMut(&GenerationState) -> Result<(), GenerateError>,
) -> Result<(), GenerateError> {
    let pool = match jobs {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| GenerateError::Manifest(e.to_string()))?,
        ),
        None => None,
    };
    let end = match stop_after {
        Some(limit) => (state.completed_batches + limit).min(plan.batches.len()),
        None => plan.batches.len(),
    };
    for b in state.completed_batches..end {
        match &pool {
            Some(pool) => pool.install(|| run_batch(plan, b, state, denoiser, config))?,
            None => run_batch(plan, b, state, denoiser, config)?,
        }
        checkpoint(state)?;
    }
    Ok(())
}

/// How to obtain a noise predictor:
/// `tcp:HOST:PORT`, `stdio:CMD ARGS`, `analytic:zero`, `analytic:identity`,
/// `analytic:iso:MEAN:VAR`, `analytic:ar1:MEAN:VAR:RHO`.
pub fn denoiser_from_spec(
    spec: &str,
    schedule: &NoiseSchedule,
    timeout: Duration,
) -> Result<Arc<dyn Denoiser>, GenerateError> {
    let bad = || GenerateError::BackendSpec(spec.to_string());
    if spec.starts_with("tcp:") || spec.starts_with("stdio:") {
        let endpoint = BackendEndpoint::parse(spec, timeout).map_err(|e| GenerateError::BackendSpec(e.to_string()))?;
        let remote = RemoteDenoiser::connect(endpoint).map_err(DdpmError::from)?;
        return Ok(Arc::new(remote));
    }
    let rest = spec.strip_prefix("analytic:").ok_or_else(bad)?;
    let parts: Vec<&str> = rest.split(':').collect();
    let nums = |s: &[&str]| -> Result<Vec<f64>, GenerateError> {
        s.iter().map(|v| v.parse::<f64>().map_err(|_| bad())).collect()
    };
    let (mean, cov) = match parts.as_slice() {
        ["zero"] => return Ok(Arc::new(ZeroDenoiser)),
        ["identity"] => return Ok(Arc::new(IdentityDenoiser)),
        ["iso", a, b] => {
            let v = nums(&[a, b])?;
            (v[0], CovarianceSpec::Isotropic { variance: v[1] })
        }
        ["ar1", a, b, c] => {
            let v = nums(&[a, b, c])?;
            (v[0], CovarianceSpec::Ar1 { variance: v[1], rho: v[2] })
        }
        _ => return Err(bad()),
    };
    Ok(Arc::new(analytic_gaussian_denoiser(mean, cov, schedule)?))
}

/// Everything needed to resume an interrupted generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub plan_path: PathBuf,
    pub backend: String,
    pub config: GenerateConfig,
    pub completed_batches: usize,
    pub total_batches: usize,
    pub checkpoint_volume: PathBuf,
    pub checkpoint_mask: PathBuf,
    pub output: PathBuf,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GenerateError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| GenerateError::Manifest(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GenerateError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_state(&self) -> Result<GenerationState, GenerateError> {
        Ok(GenerationState {
            volume: read_scalar(&self.checkpoint_volume)?,
            generated: read_mask(&self.checkpoint_mask)?,
            completed_batches: self.completed_batches,
        })
    }

    /// Writes the checkpoint volumes, then the manifest pointing at them.
    pub fn checkpoint(&mut self, state: &GenerationState, manifest_path: &Path) -> Result<(), GenerateError> {
        write_atomic(&state.volume, &self.checkpoint_volume)?;
        write_atomic(&state.generated, &self.checkpoint_mask)?;
        self.completed_batches = state.completed_batches;
        self.save(manifest_path)
    }
}

fn write_atomic<T: crate::voxel::GvoxElement>(
    vol: &crate::voxel::Volume<T>,
    path: &Path,
) -> Result<(), GenerateError> {
    let tmp = path.with_extension("gvox.tmp");
    write_gvox(vol, &tmp)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Metadata stamped on generated volumes.
pub fn generated_meta(seed: u64) -> VolumeMeta {
    VolumeMeta {
        provenance: Provenance::Diffusion,
        seed,
        schema_version: SCHEMA_VERSION,
        voxel_pitch: None,
    }
}
