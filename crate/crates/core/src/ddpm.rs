//! DDPM noise schedules, forward/reverse processes and RePaint inpainting.
//!
//! Steps are 1-based: `t = 1..=T`, with `alpha_bar(0) = 1` for clean data.
//! Arithmetic runs in `f64` per voxel; volumes store `f32`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{Dims, MaskVolume, ScalarVolume};

#[derive(Debug, Error)]
pub enum DdpmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("step {t} outside 1..={steps}")]
    InvalidStep { t: usize, steps: usize },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("backend error: {0}")]
    Backend(String),
}

/// Linear variance schedule with derived `alpha` and cumulative `alpha_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleParams", into = "ScheduleParams")]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleParams {
    /// Linear schedule endpoints `(1e-4, 0.02)` rescaled by `1000 / steps`,
    /// so shorter schedules still end close to pure noise.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        Self {
            steps,
            beta_start: 1e-4 * scale,
            beta_end: (0.02 * scale).min(0.999),
        }
    }
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self::scaled_linear(250)
    }
}

impl TryFrom<ScheduleParams> for NoiseSchedule {
    type Error = DdpmError;
    fn try_from(p: ScheduleParams) -> Result<Self, DdpmError> {
        build_linear_schedule(p.steps, p.beta_start, p.beta_end)
    }
}

impl From<NoiseSchedule> for ScheduleParams {
    fn from(s: NoiseSchedule) -> Self {
        s.params
    }
}

/// Betas interpolated linearly from `beta_start` to `beta_end` inclusive.
pub fn build_linear_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule, DdpmError> {
    if steps < 1 {
        return Err(DdpmError::InvalidConfig("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DdpmError::InvalidConfig(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        params: ScheduleParams {
            steps,
            beta_start,
            beta_end,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn from_params(p: ScheduleParams) -> Result<Self, DdpmError> {
        build_linear_schedule(p.steps, p.beta_start, p.beta_end)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas up to `t`; 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<(), DdpmError> {
        if t == 0 || t > self.steps() {
            return Err(DdpmError::InvalidStep {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

/// A noise predictor `eps(x_t, t)`.
///
/// Implementations receive a batch of equally sized volumes and must return
/// one prediction per input with matching dims.
pub trait Denoiser: Send + Sync {
    fn predict_noise(&self, batch: &[ScalarVolume], t: usize)
        -> Result<Vec<ScalarVolume>, DdpmError>;
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict_noise(
        &self,
        batch: &[ScalarVolume],
        t: usize,
    ) -> Result<Vec<ScalarVolume>, DdpmError> {
        (**self).predict_noise(batch, t)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_noise(
        &self,
        batch: &[ScalarVolume],
        t: usize,
    ) -> Result<Vec<ScalarVolume>, DdpmError> {
        (**self).predict_noise(batch, t)
    }
}

/// Predicts zero noise everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDenoiser;

impl Denoiser for ZeroDenoiser {
    fn predict_noise(&self, batch: &[ScalarVolume], _t: usize) -> Result<Vec<ScalarVolume>, DdpmError> {
        Ok(batch
            .iter()
            .map(|x| ScalarVolume::filled(x.dims(), 0.0))
            .collect())
    }
}

/// Returns its input unchanged as the noise prediction.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn predict_noise(&self, batch: &[ScalarVolume], _t: usize) -> Result<Vec<ScalarVolume>, DdpmError> {
        Ok(batch.to_vec())
    }
}

#[inline]
fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Samples `x_t ~ N(sqrt(alpha_bar_t) x_0, (1 - alpha_bar_t) I)`.
pub fn forward_diffuse(
    x0: &ScalarVolume,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<ScalarVolume, DdpmError> {
    schedule.check_step(t)?;
    Ok(gaussian_step(x0, schedule.alpha_bar(t), rng))
}

/// Samples `x_t ~ N(sqrt(alpha_t) x_{t-1}, (1 - alpha_t) I)`.
pub fn single_step_forward(
    x_prev: &ScalarVolume,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<ScalarVolume, DdpmError> {
    schedule.check_step(t)?;
    Ok(gaussian_step(x_prev, schedule.alpha(t), rng))
}

fn gaussian_step(x: &ScalarVolume, keep: f64, rng: &mut impl Rng) -> ScalarVolume {
    let scale = keep.sqrt();
    let noise = (1.0 - keep).sqrt();
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = (scale * *v as f64 + noise * normal(rng)) as f32;
    }
    out
}

fn check_prediction(
    inputs: &[ScalarVolume],
    outputs: &[ScalarVolume],
) -> Result<(), DdpmError> {
    if inputs.len() != outputs.len() {
        return Err(DdpmError::Backend(format!(
            "denoiser returned {} volumes for a batch of {}",
            outputs.len(),
            inputs.len()
        )));
    }
    for (x, e) in inputs.iter().zip(outputs) {
        if x.dims() != e.dims() {
            return Err(DdpmError::Backend(format!(
                "denoiser returned dims {:?} for input {:?}",
                e.dims().as_array(),
                x.dims().as_array()
            )));
        }
        if !e.all_finite() {
            return Err(DdpmError::Backend("denoiser returned non-finite values".into()));
        }
    }
    Ok(())
}

/// One ancestral step `x_t -> x_{t-1}` using the predicted noise, with
/// `sigma_t^2 = beta_t` for `t > 1` and no noise at `t = 1`.
pub fn reverse_step(
    denoiser: &dyn Denoiser,
    x_t: &ScalarVolume,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<ScalarVolume, DdpmError> {
    schedule.check_step(t)?;
    let eps = denoiser.predict_noise(std::slice::from_ref(x_t), t)?;
    check_prediction(std::slice::from_ref(x_t), &eps)?;
    Ok(reverse_update(x_t, &eps[0], t, schedule, rng))
}

fn reverse_update(
    x_t: &ScalarVolume,
    eps: &ScalarVolume,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> ScalarVolume {
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let eps_coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
    let mut out = x_t.clone();
    for (v, &e) in out.data_mut().iter_mut().zip(eps.data()) {
        let mean = inv_sqrt_alpha * (*v as f64 - eps_coef * e as f64);
        let z = if t > 1 { normal(rng) } else { 0.0 };
        *v = (mean + sigma * z) as f32;
    }
    out
}

/// Runs the full reverse chain from `x_T ~ N(0, I)`.
pub fn sample_unconditional(
    denoiser: &dyn Denoiser,
    dims: Dims,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ScalarVolume, DdpmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = ScalarVolume::filled(dims, 0.0);
    for v in x.data_mut() {
        *v = normal(&mut rng) as f32;
    }
    for t in (1..=schedule.steps()).rev() {
        x = reverse_step(denoiser, &x, t, schedule, &mut rng)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepaintConfig {
    /// Extra (forward, reverse) pairs per step.
    pub resamples: usize,
    /// Only 1 is supported.
    pub jump_size: usize,
    /// Final steps run without resampling.
    pub no_resample_tail: usize,
    pub seed: u64,
}

impl Default for RepaintConfig {
    fn default() -> Self {
        Self {
            resamples: 10,
            jump_size: 1,
            no_resample_tail: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InpaintProblem {
    pub known: ScalarVolume,
    /// 1 where `known` is kept, 0 where it is generated.
    pub mask: MaskVolume,
    pub config: RepaintConfig,
}

impl InpaintProblem {
    fn validate(&self, schedule: &NoiseSchedule) -> Result<(), DdpmError> {
        if self.mask.dims() != self.known.dims() {
            return Err(DdpmError::InvalidMask(format!(
                "mask dims {:?} differ from known dims {:?}",
                self.mask.dims().as_array(),
                self.known.dims().as_array()
            )));
        }
        if let Some(v) = self.mask.data().iter().find(|&&m| m > 1) {
            return Err(DdpmError::InvalidMask(format!("mask value {v} is not 0 or 1")));
        }
        if !self.known.all_finite() {
            return Err(DdpmError::InvalidConfig("known data is not finite".into()));
        }
        if self.config.jump_size != 1 {
            return Err(DdpmError::InvalidConfig(format!(
                "jump_size {} unsupported (only 1)",
                self.config.jump_size
            )));
        }
        if self.config.no_resample_tail > schedule.steps() {
            return Err(DdpmError::InvalidConfig(format!(
                "no_resample_tail {} exceeds schedule length {}",
                self.config.no_resample_tail,
                schedule.steps()
            )));
        }
        Ok(())
    }
}

/// RePaint: at every step the known region is re-noised from the clean data
/// and the unknown region comes from the reverse process; above the tail,
/// each step is repeated `resamples` more times after pushing the combined
/// state one step forward again.
pub fn repaint(
    denoiser: &dyn Denoiser,
    problem: &InpaintProblem,
    schedule: &NoiseSchedule,
) -> Result<ScalarVolume, DdpmError> {
    problem.validate(schedule)?;
    let known = &problem.known;
    let mask = problem.mask.data();
    let cfg = &problem.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = ScalarVolume::filled(known.dims(), 0.0);
    for v in x.data_mut() {
        *v = normal(&mut rng) as f32;
    }
    for t in (1..=schedule.steps()).rev() {
        let passes = if t > cfg.no_resample_tail {
            cfg.resamples + 1
        } else {
            1
        };
        for pass in 0..passes {
            let unknown = reverse_step(denoiser, &x, t, schedule, &mut rng)?;
            x = unknown;
            let keep = schedule.alpha_bar(t - 1);
            let (scale, noise) = (keep.sqrt(), (1.0 - keep).sqrt());
            for ((v, &k), &m) in x.data_mut().iter_mut().zip(known.data()).zip(mask) {
                if m == 1 {
                    *v = if t > 1 {
                        (scale * k as f64 + noise * normal(&mut rng)) as f32
                    } else {
                        k
                    };
                }
            }
            if pass + 1 < passes {
                x = single_step_forward(&x, t, schedule, &mut rng)?;
            }
        }
    }
    Ok(x)
}

/// Prior covariance for [`AnalyticGaussianDenoiser`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovarianceSpec {
    Isotropic { variance: f64 },
    /// One variance per voxel in linear order.
    Diagonal { variances: Vec<f64> },
    /// Stationary AR(1) along x with `Cov(i, j) = variance * rho^|i - j|`;
    /// independent across rows.
    Ar1 { variance: f64, rho: f64 },
}

impl CovarianceSpec {
    fn validate(&self) -> Result<(), DdpmError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = match self {
            CovarianceSpec::Isotropic { variance } => positive(*variance),
            CovarianceSpec::Diagonal { variances } => {
                !variances.is_empty() && variances.iter().all(|&v| positive(v))
            }
            CovarianceSpec::Ar1 { variance, rho } => positive(*variance) && rho.abs() < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(DdpmError::InvalidConfig(format!("invalid covariance {self:?}")))
        }
    }
}

/// Exact posterior-mean noise predictor for Gaussian data
/// `x_0 ~ N(mean * 1, Sigma)`:
///
/// `E[x_0 | x_t] = mean + sqrt(ab) Sigma (ab Sigma + (1 - ab) I)^-1 (x_t - sqrt(ab) mean)`
/// and `eps = (x_t - sqrt(ab) E[x_0 | x_t]) / sqrt(1 - ab)`.
#[derive(Debug)]
pub struct AnalyticGaussianDenoiser {
    mean: f64,
    covariance: CovarianceSpec,
    schedule: NoiseSchedule,
    /// Per-row gain matrices for AR(1), keyed by row length.
    ar_gains: Mutex<HashMap<usize, Arc<Vec<DMatrix<f64>>>>>,
}

pub fn analytic_gaussian_denoiser(
    mean: f64,
    covariance: CovarianceSpec,
    schedule: &NoiseSchedule,
) -> Result<AnalyticGaussianDenoiser, DdpmError> {
    covariance.validate()?;
    if !mean.is_finite() {
        return Err(DdpmError::InvalidConfig("mean must be finite".into()));
    }
    Ok(AnalyticGaussianDenoiser {
        mean,
        covariance,
        schedule: schedule.clone(),
        ar_gains: Mutex::new(HashMap::new()),
    })
}

impl AnalyticGaussianDenoiser {
    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn covariance(&self) -> &CovarianceSpec {
        &self.covariance
    }

    fn ar_gains(&self, len: usize, variance: f64, rho: f64) -> Arc<Vec<DMatrix<f64>>> {
        let mut cache = self.ar_gains.lock().expect("gain cache poisoned");
        cache
            .entry(len)
            .or_insert_with(|| {
                let sigma =
                    DMatrix::from_fn(len, len, |i, j| variance * rho.powi(i.abs_diff(j) as i32));
                let gains = (1..=self.schedule.steps())
                    .map(|t| {
                        let ab = self.schedule.alpha_bar(t);
                        let m = &sigma * ab + DMatrix::identity(len, len) * (1.0 - ab);
                        // Sigma and M commute, so Sigma M^-1 = M^-1 Sigma.
                        let solved = m
                            .cholesky()
                            .expect("shifted covariance is positive definite")
                            .solve(&sigma);
                        solved * ab.sqrt()
                    })
                    .collect();
                Arc::new(gains)
            })
            .clone()
    }

    fn predict_one(&self, x: &ScalarVolume, t: usize) -> Result<ScalarVolume, DdpmError> {
        let ab = self.schedule.alpha_bar(t);
        let sab = ab.sqrt();
        let denom = (1.0 - ab).sqrt();
        let mu = self.mean;
        let xs = x.data();
        let mut x0 = vec![0.0f64; xs.len()];
        match &self.covariance {
            CovarianceSpec::Isotropic { variance } => {
                let k = sab * variance / (ab * variance + 1.0 - ab);
                for (o, &v) in x0.iter_mut().zip(xs) {
                    *o = mu + k * (v as f64 - sab * mu);
                }
            }
            CovarianceSpec::Diagonal { variances } => {
                if variances.len() != xs.len() {
                    return Err(DdpmError::Backend(format!(
                        "diagonal covariance has {} entries for {} voxels",
                        variances.len(),
                        xs.len()
                    )));
                }
                for ((o, &v), &s2) in x0.iter_mut().zip(xs).zip(variances) {
                    let k = sab * s2 / (ab * s2 + 1.0 - ab);
                    *o = mu + k * (v as f64 - sab * mu);
                }
            }
            CovarianceSpec::Ar1 { variance, rho } => {
                let nx = x.dims().nx;
                let gains = self.ar_gains(nx, *variance, *rho);
                let gain = &gains[t - 1];
                for (row_out, row_in) in x0.chunks_mut(nx).zip(xs.chunks(nx)) {
                    for (i, o) in row_out.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (j, &v) in row_in.iter().enumerate() {
                            acc += gain[(i, j)] * (v as f64 - sab * mu);
                        }
                        *o = mu + acc;
                    }
                }
            }
        }
        let eps = xs
            .iter()
            .zip(&x0)
            .map(|(&v, &m)| ((v as f64 - sab * m) / denom) as f32)
            .collect();
        Ok(ScalarVolume::from_vec(x.dims(), eps).expect("same length"))
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn predict_noise(
        &self,
        batch: &[ScalarVolume],
        t: usize,
    ) -> Result<Vec<ScalarVolume>, DdpmError> {
        self.schedule.check_step(t)?;
        batch.iter().map(|x| self.predict_one(x, t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(values: &[f32]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn schedule_single_step_and_errors() {
        let s = build_linear_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.beta(1), 0.01);
        assert_eq!(s.alpha_bar(1), 1.0 - 0.01);
        assert!(build_linear_schedule(10, 1e-4, 1.0).is_err());
        assert!(build_linear_schedule(10, 0.0, 0.5).is_err());
        assert!(build_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(build_linear_schedule(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn schedule_identities_and_monotonicity() {
        let s = NoiseSchedule::from_params(ScheduleParams::default()).unwrap();
        assert_eq!(s.steps(), 250);
        assert_eq!(s.beta(1), 4e-4);
        assert!((s.beta(250) - 0.08).abs() < 1e-15);
        for t in 1..=250 {
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn schedule_serializes_as_params() {
        let s = build_linear_schedule(50, 1e-3, 0.05).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<NoiseSchedule>(
            r#"{"steps":5,"beta_start":0.5,"beta_end":0.1}"#
        )
        .is_err());
    }

    #[test]
    fn forward_diffuse_variance_and_determinism() {
        let s = NoiseSchedule::from_params(ScheduleParams::default()).unwrap();
        let x0 = ScalarVolume::filled(Dims::new(100, 10, 10).unwrap(), 0.0);
        for t in [1, 20, 125, 250] {
            let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
            let xt = forward_diffuse(&x0, t, &s, &mut rng).unwrap();
            let (_, var) = mean_var(xt.data());
            let target = 1.0 - s.alpha_bar(t);
            assert!((var / target - 1.0).abs() < 0.05, "t={t}: {var} vs {target}");
            let mut rng2 = ChaCha8Rng::seed_from_u64(t as u64);
            assert_eq!(forward_diffuse(&x0, t, &s, &mut rng2).unwrap(), xt);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            forward_diffuse(&x0, 0, &s, &mut rng),
            Err(DdpmError::InvalidStep { .. })
        ));
        assert!(forward_diffuse(&x0, 251, &s, &mut rng).is_err());
    }

    #[test]
    fn forward_diffuse_decorrelates_at_final_step() {
        let s = NoiseSchedule::from_params(ScheduleParams::default()).unwrap();
        let dims = Dims::cube(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut sxy, mut sxx, mut syy, mut sx, mut sy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..100 {
            let mut x0 = ScalarVolume::filled(dims, 0.0);
            for v in x0.data_mut() {
                *v = normal(&mut rng) as f32;
            }
            let xt = forward_diffuse(&x0, 250, &s, &mut rng).unwrap();
            for (&a, &b) in x0.data().iter().zip(xt.data()) {
                let (a, b) = (a as f64, b as f64);
                sxy += a * b;
                sxx += a * a;
                syy += b * b;
                sx += a;
                sy += b;
                n += 1.0;
            }
        }
        let cov = sxy / n - sx * sy / n / n;
        let corr = cov / ((sxx / n - (sx / n).powi(2)) * (syy / n - (sy / n).powi(2))).sqrt();
        // 3 standard errors of a null correlation over n pairs
        assert!(corr.abs() < 3.0 / n.sqrt(), "corr {corr}");
    }

    #[test]
    fn single_step_variance_and_composition() {
        let s = NoiseSchedule::from_params(ScheduleParams::scaled_linear(40)).unwrap();
        let dims = Dims::new(100, 10, 10).unwrap();
        let zero = ScalarVolume::filled(dims, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = single_step_forward(&zero, 40, &s, &mut rng).unwrap();
        let (_, var) = mean_var(x.data());
        assert!((var / s.beta(40) - 1.0).abs() < 0.05);

        // Compose steps 1..=t from x_0 = 1 and compare with the marginal.
        let ones = ScalarVolume::filled(dims, 1.0);
        for t in [5, 20, 40] {
            let mut x = ones.clone();
            for k in 1..=t {
                x = single_step_forward(&x, k, &s, &mut rng).unwrap();
            }
            let direct = forward_diffuse(&ones, t, &s, &mut rng).unwrap();
            let (m1, v1) = mean_var(x.data());
            let (m2, v2) = mean_var(direct.data());
            let target_var = 1.0 - s.alpha_bar(t);
            let se_var = target_var * (2.0 / dims.len() as f64).sqrt();
            assert!((v1 - v2).abs() < 4.0 * se_var * 2f64.sqrt(), "t={t} {v1} {v2}");
            assert!((m1 - s.alpha_bar(t).sqrt()).abs() < 4.0 * (target_var / 1e4).sqrt());
            assert!((m2 - s.alpha_bar(t).sqrt()).abs() < 4.0 * (target_var / 1e4).sqrt());
        }
    }

    #[test]
    fn reverse_step_formula_at_last_step() {
        let s = build_linear_schedule(10, 0.01, 0.1).unwrap();
        let x1 = ScalarVolume::filled(Dims::cube(2).unwrap(), 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = reverse_step(&ZeroDenoiser, &x1, 1, &s, &mut rng).unwrap();
        let expected = (0.7f32 as f64 / s.alpha(1).sqrt()) as f32;
        assert!(x0.data().iter().all(|&v| v == expected));
    }

    struct WrongDims;
    impl Denoiser for WrongDims {
        fn predict_noise(&self, batch: &[ScalarVolume], _t: usize) -> Result<Vec<ScalarVolume>, DdpmError> {
            Ok(batch
                .iter()
                .map(|_| ScalarVolume::filled(Dims::cube(3).unwrap(), 0.0))
                .collect())
        }
    }

    #[test]
    fn reverse_step_rejects_wrong_dims() {
        let s = build_linear_schedule(10, 0.01, 0.1).unwrap();
        let x = ScalarVolume::filled(Dims::cube(2).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            reverse_step(&WrongDims, &x, 5, &s, &mut rng),
            Err(DdpmError::Backend(_))
        ));
    }

    #[test]
    fn standard_normal_prior_sampling() {
        let s = NoiseSchedule::from_params(ScheduleParams::scaled_linear(100)).unwrap();
        let d = analytic_gaussian_denoiser(0.0, CovarianceSpec::Isotropic { variance: 1.0 }, &s)
            .unwrap();
        let dims = Dims::cube(4).unwrap();
        let mut values = Vec::new();
        for seed in 0..160 {
            values.extend_from_slice(sample_unconditional(&d, dims, &s, seed).unwrap().data());
        }
        let (mean, var) = mean_var(&values);
        let se = (1.0 / values.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn unconditional_sampling_seeds() {
        let s = NoiseSchedule::from_params(ScheduleParams::scaled_linear(50)).unwrap();
        let d = analytic_gaussian_denoiser(2.0, CovarianceSpec::Isotropic { variance: 0.25 }, &s)
            .unwrap();
        let dims = Dims::cube(4).unwrap();
        let a = sample_unconditional(&d, dims, &s, 1).unwrap();
        let b = sample_unconditional(&d, dims, &s, 1).unwrap();
        let c = sample_unconditional(&d, dims, &s, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn analytic_denoiser_identity_prior_and_mode() {
        let s = NoiseSchedule::from_params(ScheduleParams::scaled_linear(50)).unwrap();
        let d = analytic_gaussian_denoiser(0.0, CovarianceSpec::Isotropic { variance: 1.0 }, &s)
            .unwrap();
        let dims = Dims::cube(4).unwrap();
        let x = ScalarVolume::from_vec(dims, (0..64).map(|i| (i as f32 - 32.0) / 10.0).collect())
            .unwrap();
        for t in [1, 10, 50] {
            let eps = d.predict_noise(std::slice::from_ref(&x), t).unwrap();
            let k = (1.0 - s.alpha_bar(t)).sqrt();
            for (&e, &v) in eps[0].data().iter().zip(x.data()) {
                assert!((e as f64 - v as f64 * k).abs() < 1e-6);
            }
        }
        let mu = 1.5;
        for cov in [
            CovarianceSpec::Isotropic { variance: 0.3 },
            CovarianceSpec::Ar1 { variance: 0.5, rho: 0.8 },
            CovarianceSpec::Diagonal { variances: (1..=64).map(|i| i as f64 / 64.0).collect() },
        ] {
            let d = analytic_gaussian_denoiser(mu, cov, &s).unwrap();
            for t in [3, 30] {
                let at_mode = ScalarVolume::filled(dims, (s.alpha_bar(t).sqrt() * mu) as f32);
                let eps = d.predict_noise(std::slice::from_ref(&at_mode), t).unwrap();
                assert!(eps[0].data().iter().all(|e| e.abs() < 1e-5));
            }
        }
    }

    #[test]
    fn analytic_denoiser_rejects_bad_variance() {
        let s = build_linear_schedule(10, 0.01, 0.1).unwrap();
        for cov in [
            CovarianceSpec::Isotropic { variance: 0.0 },
            CovarianceSpec::Isotropic { variance: -1.0 },
            CovarianceSpec::Diagonal { variances: vec![1.0, 0.0] },
            CovarianceSpec::Ar1 { variance: 0.0, rho: 0.5 },
            CovarianceSpec::Ar1 { variance: 1.0, rho: 1.0 },
        ] {
            assert!(matches!(
                analytic_gaussian_denoiser(0.0, cov, &s),
                Err(DdpmError::InvalidConfig(_))
            ));
        }
    }

    /// Dense oracle over the whole 4^3 volume: builds the 64x64 covariance
    /// and solves the posterior mean with an explicit inverse.
    #[test]
    fn analytic_denoiser_matches_dense_oracle() {
        let s = NoiseSchedule::from_params(ScheduleParams::scaled_linear(30)).unwrap();
        let dims = Dims::cube(4).unwrap();
        let n = dims.len();
        let mu = -0.4;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = ScalarVolume::from_vec(dims, (0..n).map(|_| normal(&mut rng) as f32).collect())
            .unwrap();
        let specs = [
            CovarianceSpec::Isotropic { variance: 0.25 },
            CovarianceSpec::Diagonal { variances: (0..n).map(|i| 0.1 + i as f64 / 50.0).collect() },
            CovarianceSpec::Ar1 { variance: 0.7, rho: 0.9 },
        ];
        for spec in specs {
            let sigma = DMatrix::from_fn(n, n, |i, j| match &spec {
                CovarianceSpec::Isotropic { variance } => {
                    if i == j { *variance } else { 0.0 }
                }
                CovarianceSpec::Diagonal { variances } => {
                    if i == j { variances[i] } else { 0.0 }
                }
                CovarianceSpec::Ar1 { variance, rho } => {
                    let (a, b) = (dims.coords(i), dims.coords(j));
                    if a[1] == b[1] && a[2] == b[2] {
                        variance * rho.powi(a[0].abs_diff(b[0]) as i32)
                    } else {
                        0.0
                    }
                }
            });
            let d = analytic_gaussian_denoiser(mu, spec.clone(), &s).unwrap();
            for t in [1, 7, 30] {
                let ab = s.alpha_bar(t);
                let m = &sigma * ab + DMatrix::<f64>::identity(n, n) * (1.0 - ab);
                let inv = m.try_inverse().unwrap();
                let xv = nalgebra::DVector::from_iterator(n, x.data().iter().map(|&v| v as f64));
                let centered = xv.map(|v| v - ab.sqrt() * mu);
                let x0 = (&sigma * inv * centered) * ab.sqrt() + nalgebra::DVector::from_element(n, mu);
                let eps_oracle = (xv - x0 * ab.sqrt()) / (1.0 - ab).sqrt();
                let eps = d.predict_noise(std::slice::from_ref(&x), t).unwrap();
                for i in 0..n {
                    let diff = (eps[0].data()[i] as f64 - eps_oracle[i]).abs();
                    assert!(diff < 1e-5 * (1.0 + eps_oracle[i].abs()), "{spec:?} t={t} i={i}");
                }
            }
        }
    }

    fn half_mask(dims: Dims) -> MaskVolume {
        let mut m = MaskVolume::filled(dims, 0);
        for i in 0..dims.len() {
            if dims.coords(i)[0] < dims.nx / 2 {
                m.data_mut()[i] = 1;
            }
        }
        m
    }

    #[test]
    fn repaint_full_mask_is_identity() {
        let s = NoiseSchedule::from_params(ScheduleParams::scaled_linear(20)).unwrap();
        let dims = Dims::cube(4).unwrap();
        let known = ScalarVolume::from_vec(dims, (0..64).map(|i| i as f32 * 0.37 - 3.0).collect())
            .unwrap();
        let problem = InpaintProblem {
            known: known.clone(),
            mask: MaskVolume::filled(dims, 1),
            config: RepaintConfig {
                resamples: 2,
                no_resample_tail: 5,
                seed: 4,
                ..RepaintConfig::default()
            },
        };
        assert_eq!(repaint(&IdentityDenoiser, &problem, &s).unwrap(), known);
    }

    #[test]
    fn repaint_validation() {
        let s = NoiseSchedule::from_params(ScheduleParams::scaled_linear(20)).unwrap();
        let dims = Dims::cube(2).unwrap();
        let mut problem = InpaintProblem {
            known: ScalarVolume::filled(dims, 0.0),
            mask: MaskVolume::filled(dims, 2),
            config: RepaintConfig::default(),
        };
        assert!(matches!(
            repaint(&ZeroDenoiser, &problem, &s),
            Err(DdpmError::InvalidMask(_))
        ));
        problem.mask = MaskVolume::filled(dims, 1);
        problem.config.no_resample_tail = 5;
        problem.config.jump_size = 2;
        assert!(matches!(
            repaint(&ZeroDenoiser, &problem, &s),
            Err(DdpmError::InvalidConfig(_))
        ));
        problem.config.jump_size = 1;
        problem.config.no_resample_tail = 21;
        assert!(repaint(&ZeroDenoiser, &problem, &s).is_err());
        problem.mask = MaskVolume::filled(Dims::cube(3).unwrap(), 1);
        problem.config.no_resample_tail = 0;
        assert!(matches!(
            repaint(&ZeroDenoiser, &problem, &s),
            Err(DdpmError::InvalidMask(_))
        ));
    }

    #[test]
    fn repaint_determinism_and_resample_sensitivity() {
        let s = NoiseSchedule::from_params(ScheduleParams::scaled_linear(30)).unwrap();
        let dims = Dims::new(8, 2, 2).unwrap();
        let d = analytic_gaussian_denoiser(0.0, CovarianceSpec::Ar1 { variance: 1.0, rho: 0.9 }, &s)
            .unwrap();
        let problem = |resamples| InpaintProblem {
            known: ScalarVolume::filled(dims, 1.0),
            mask: half_mask(dims),
            config: RepaintConfig {
                resamples,
                no_resample_tail: 5,
                seed: 77,
                ..RepaintConfig::default()
            },
        };
        let a = repaint(&d, &problem(2), &s).unwrap();
        let b = repaint(&d, &problem(2), &s).unwrap();
        let c = repaint(&d, &problem(3), &s).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for i in 0..dims.len() {
            if dims.coords(i)[0] < 4 {
                assert_eq!(a.data()[i], 1.0);
            }
        }
    }

    #[test]
    fn repaint_empty_mask_matches_unconditional_law() {
        let s = NoiseSchedule::from_params(ScheduleParams::scaled_linear(40)).unwrap();
        let d = analytic_gaussian_denoiser(2.0, CovarianceSpec::Isotropic { variance: 0.25 }, &s)
            .unwrap();
        let dims = Dims::cube(4).unwrap();
        let mut inpainted = Vec::new();
        let mut plain = Vec::new();
        for seed in 0..160u64 {
            let problem = InpaintProblem {
                known: ScalarVolume::filled(dims, 0.0),
                mask: MaskVolume::filled(dims, 0),
                config: RepaintConfig {
                    resamples: 1,
                    no_resample_tail: 10,
                    seed,
                    ..RepaintConfig::default()
                },
            };
            inpainted.extend_from_slice(repaint(&d, &problem, &s).unwrap().data());
            plain.extend_from_slice(sample_unconditional(&d, dims, &s, seed + 1000).unwrap().data());
        }
        let (m1, v1) = mean_var(&inpainted);
        let (m2, v2) = mean_var(&plain);
        let se = (0.25 / inpainted.len() as f64).sqrt();
        assert!((m1 - m2).abs() < 4.0 * se * 2f64.sqrt(), "{m1} vs {m2}");
        assert!((v1 / v2 - 1.0).abs() < 0.1);
    }
}
