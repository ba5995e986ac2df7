//! Block placement plans for tiling a fixed-size generation window over an
//! arbitrarily large domain.
//!
//! Two strategies are provided. `Isotropic8` places blocks on a sparse grid
//! (spacing `delta` block units) and fills the gaps in seven further offset
//! stages. `CenterOut` seeds one block in the middle, grows axis-aligned arms
//! to the domain faces, and fills the remainder in L-infinity rings.
//!
//! Blocks that would overrun the domain are shifted inward so every window
//! has exactly `block_size` voxels per side.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{BlockWindow, Dims, MaskVolume, VoxelError};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("domain {dims:?} is smaller than one {block}-voxel block")]
    DomainTooSmall { dims: [usize; 3], block: usize },
    #[error("invalid planner config: {0}")]
    InvalidConfig(String),
    #[error("dependency cycle among {remaining} unscheduled points")]
    Cycle { remaining: usize },
    #[error("point index {0} out of range")]
    NoSuchPoint(usize),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[serde(alias = "isotropic")]
    Isotropic8,
    #[serde(alias = "center_out", alias = "centerout")]
    CenterOut,
}

impl std::str::FromStr for Strategy {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self, PlanError> {
        match s {
            "isotropic8" | "isotropic" => Ok(Strategy::Isotropic8),
            "center-out" | "center_out" | "centerout" => Ok(Strategy::CenterOut),
            other => Err(PlanError::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub block_size: usize,
    /// Grid spacing in block units.
    pub delta: f64,
    pub strategy: Strategy,
    /// Overlap between consecutive arm blocks (center-out), voxels.
    pub arm_overlap: usize,
    /// Overlap between neighbouring fill blocks (center-out), voxels.
    pub fill_overlap: usize,
    pub max_batch: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            block_size: 32,
            delta: 1.5,
            strategy: Strategy::Isotropic8,
            arm_overlap: 16,
            fill_overlap: 8,
            max_batch: 16,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        let bad = |m: &str| Err(PlanError::InvalidConfig(m.to_string()));
        if self.block_size == 0 {
            return bad("block_size must be > 0");
        }
        if self.max_batch == 0 {
            return bad("max_batch must be >= 1");
        }
        match self.strategy {
            Strategy::Isotropic8 => {
                if !(self.delta > 1.0 && self.delta <= 1.75) {
                    return bad("delta must lie in (1, 1.75]");
                }
                let stride = self.delta * self.block_size as f64;
                if (stride - stride.round()).abs() > 1e-9 {
                    return bad("block_size * delta must be a whole number of voxels");
                }
            }
            Strategy::CenterOut => {
                if self.arm_overlap == 0 || self.arm_overlap >= self.block_size {
                    return bad("arm_overlap must lie in [1, block_size)");
                }
                if self.fill_overlap == 0 || self.fill_overlap >= self.block_size {
                    return bad("fill_overlap must lie in [1, block_size)");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPoint {
    /// Nominal position in block units.
    pub coords: [f64; 3],
    /// Window origin in voxels after clamping into the domain.
    pub origin: [usize; 3],
    /// Isotropic stage 1..=8, or center-out distance from the seed.
    pub stage: u32,
    /// Indices of earlier points this one must wait for.
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub domain_dims: [usize; 3],
    pub config: PlannerConfig,
    pub points: Vec<PlanPoint>,
    pub batches: Vec<Vec<usize>>,
}

impl GenerationPlan {
    pub fn window(&self, point: usize) -> BlockWindow {
        BlockWindow::cube(self.points[point].origin, self.config.block_size)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PlanError> {
        serde_json::from_str(s).map_err(|e| PlanError::InvalidConfig(e.to_string()))
    }
}

/// Stage offsets and limit reductions of the isotropic strategy.
pub const ISOTROPIC_STAGES: [([f64; 3], [i64; 3]); 8] = [
    ([0.0, 0.0, 0.0], [0, 0, 0]),
    ([0.0, 0.0, 0.75], [0, 0, 1]),
    ([0.75, 0.75, 0.75], [1, 1, 1]),
    ([0.75, 0.75, 0.0], [1, 1, 0]),
    ([0.75, 0.0, 0.75], [1, 0, 1]),
    ([0.0, 0.75, 0.75], [0, 1, 1]),
    ([0.75, 0.0, 0.0], [1, 0, 0]),
    ([0.0, 0.75, 0.0], [0, 1, 0]),
];

fn chebyshev(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

/// Grid `{i*delta + offset}` for `0 <= i <= limit` per axis (x fastest).
/// Each point's deps are the `prev` points within Chebyshev distance 1.
/// A negative limit on any axis yields no points.
pub fn generate_points(limit: [i64; 3], delta: f64, offset: [f64; 3], prev: &[PlanPoint]) -> Vec<PlanPoint> {
    let mut out = Vec::new();
    if limit.iter().any(|&l| l < 0) {
        return out;
    }
    for k in 0..=limit[2] {
        for j in 0..=limit[1] {
            for i in 0..=limit[0] {
                let coords = [
                    i as f64 * delta + offset[0],
                    j as f64 * delta + offset[1],
                    k as f64 * delta + offset[2],
                ];
                let deps = prev
                    .iter()
                    .enumerate()
                    .filter(|(_, q)| chebyshev(coords, q.coords) <= 1.0 + 1e-12)
                    .map(|(idx, _)| idx)
                    .collect();
                out.push(PlanPoint {
                    coords,
                    origin: [0; 3],
                    stage: 0,
                    deps,
                });
            }
        }
    }
    out
}

fn check_domain(dims: [usize; 3], block: usize) -> Result<(), PlanError> {
    if dims.iter().any(|&d| d < block) {
        return Err(PlanError::DomainTooSmall { dims, block });
    }
    Ok(())
}

/// Clamps origins, drops windows identical to an earlier one, and
/// recomputes deps from the clamped positions against every earlier point.
fn finalize(raw: Vec<([f64; 3], u32)>, dims: [usize; 3], block: usize) -> Vec<PlanPoint> {
    let mut seen = HashSet::new();
    let mut points: Vec<PlanPoint> = Vec::with_capacity(raw.len());
    for (coords, stage) in raw {
        let mut origin = [0usize; 3];
        for a in 0..3 {
            let o = (coords[a] * block as f64).round().max(0.0) as usize;
            origin[a] = o.min(dims[a] - block);
        }
        if !seen.insert(origin) {
            continue;
        }
        let deps = points
            .iter()
            .enumerate()
            .filter(|(_, q)| (0..3).all(|a| origin[a].abs_diff(q.origin[a]) <= block))
            .map(|(i, _)| i)
            .collect();
        points.push(PlanPoint {
            coords,
            origin,
            stage,
            deps,
        });
    }
    points
}

pub fn build_isotropic_plan(domain_dims: [usize; 3], config: &PlannerConfig) -> Result<GenerationPlan, PlanError> {
    let config = PlannerConfig {
        strategy: Strategy::Isotropic8,
        ..config.clone()
    };
    config.validate()?;
    let bs = config.block_size;
    check_domain(domain_dims, bs)?;
    let stride = (config.delta * bs as f64).round() as usize;
    let initial: [i64; 3] = std::array::from_fn(|a| (domain_dims[a] - bs).div_ceil(stride) as i64);

    let mut raw = Vec::new();
    for (s, (offset, reduction)) in ISOTROPIC_STAGES.iter().enumerate() {
        let limit = std::array::from_fn(|a| initial[a] - reduction[a]);
        for p in generate_points(limit, config.delta, *offset, &[]) {
            raw.push((p.coords, s as u32 + 1));
        }
    }
    let points = finalize(raw, domain_dims, bs);
    let batches = schedule_batches(&points, config.max_batch)?;
    Ok(GenerationPlan {
        domain_dims,
        config,
        points,
        batches,
    })
}

/// Positions `seed + k*stride` (k of either sign) reaching both faces,
/// clamped and deduplicated, each tagged with |k|.
fn axis_positions(seed: usize, stride: usize, max_origin: usize) -> Vec<(i64, usize)> {
    let mut out = vec![(0i64, seed)];
    let mut k = 1i64;
    loop {
        let mut grew = false;
        let up = seed + k as usize * stride;
        if up - stride < max_origin {
            out.push((k, up.min(max_origin)));
            grew = true;
        }
        let down = seed as i64 - k * stride as i64;
        if down + (stride as i64) > 0 {
            out.push((-k, down.max(0) as usize));
            grew = true;
        }
        if !grew {
            break;
        }
        k += 1;
    }
    out
}

pub fn build_centerout_plan(domain_dims: [usize; 3], config: &PlannerConfig) -> Result<GenerationPlan, PlanError> {
    let config = PlannerConfig {
        strategy: Strategy::CenterOut,
        ..config.clone()
    };
    config.validate()?;
    let bs = config.block_size;
    check_domain(domain_dims, bs)?;
    let seed: [usize; 3] = std::array::from_fn(|a| (domain_dims[a] - bs) / 2);
    let max_origin: [usize; 3] = std::array::from_fn(|a| domain_dims[a] - bs);
    let to_coords = |o: [usize; 3]| o.map(|v| v as f64 / bs as f64);

    let mut raw: Vec<([f64; 3], u32)> = vec![(to_coords(seed), 0)];

    // arms: step k along +x, -x, +y, -y, +z, -z in turn
    let arm_stride = bs - config.arm_overlap;
    let arms: [Vec<(i64, usize)>; 3] =
        std::array::from_fn(|a| axis_positions(seed[a], arm_stride, max_origin[a]));
    let longest = arms.iter().flatten().map(|(k, _)| k.unsigned_abs()).max().unwrap_or(0);
    for step in 1..=longest as i64 {
        for (axis, positions) in arms.iter().enumerate() {
            for sign in [1, -1] {
                if let Some(&(_, pos)) = positions.iter().find(|(k, _)| *k == sign * step) {
                    let mut o = seed;
                    o[axis] = pos;
                    raw.push((to_coords(o), step as u32));
                }
            }
        }
    }

    // fill: product grid around the seed, ordered by ring then lexicographically
    let fill_stride = bs - config.fill_overlap;
    let grid: [Vec<(i64, usize)>; 3] =
        std::array::from_fn(|a| axis_positions(seed[a], fill_stride, max_origin[a]));
    let mut fill = Vec::new();
    for &(i, x) in &grid[0] {
        for &(j, y) in &grid[1] {
            for &(k, z) in &grid[2] {
                let ring = i.abs().max(j.abs()).max(k.abs());
                fill.push((ring, [i, j, k], [x, y, z]));
            }
        }
    }
    fill.sort_by_key(|&(ring, idx, _)| (ring, idx));
    raw.extend(fill.into_iter().map(|(ring, _, o)| (to_coords(o), ring as u32)));

    let points = finalize(raw, domain_dims, bs);
    let batches = schedule_batches(&points, config.max_batch)?;
    Ok(GenerationPlan {
        domain_dims,
        config,
        points,
        batches,
    })
}

pub fn build_plan(domain_dims: [usize; 3], config: &PlannerConfig) -> Result<GenerationPlan, PlanError> {
    match config.strategy {
        Strategy::Isotropic8 => build_isotropic_plan(domain_dims, config),
        Strategy::CenterOut => build_centerout_plan(domain_dims, config),
    }
}

/// Greedy level batching: each batch takes up to `max_batch` points, in
/// order, whose deps all sit in earlier batches.
pub fn schedule_batches(points: &[PlanPoint], max_batch: usize) -> Result<Vec<Vec<usize>>, PlanError> {
    if max_batch == 0 {
        return Err(PlanError::InvalidConfig("max_batch must be >= 1".into()));
    }
    for p in points {
        if let Some(&d) = p.deps.iter().find(|&&d| d >= points.len()) {
            return Err(PlanError::NoSuchPoint(d));
        }
    }
    let mut done = vec![false; points.len()];
    let mut remaining = points.len();
    let mut batches = Vec::new();
    while remaining > 0 {
        let batch: Vec<usize> = (0..points.len())
            .filter(|&i| !done[i] && points[i].deps.iter().all(|&d| done[d]))
            .take(max_batch)
            .collect();
        if batch.is_empty() {
            return Err(PlanError::Cycle { remaining });
        }
        for &i in &batch {
            done[i] = true;
        }
        remaining -= batch.len();
        batches.push(batch);
    }
    Ok(batches)
}

/// Inpainting mask for one block: 1 where the window already holds
/// generated voxels.
pub fn block_mask(plan: &GenerationPlan, point: usize, generated: &MaskVolume) -> Result<MaskVolume, PlanError> {
    if point >= plan.points.len() {
        return Err(PlanError::NoSuchPoint(point));
    }
    let expected = Dims::from_array(plan.domain_dims)?;
    if generated.dims() != expected {
        return Err(VoxelError::ShapeMismatch {
            expected: expected.as_array(),
            actual: generated.dims().as_array(),
        }
        .into());
    }
    let mut mask = generated.extract_window(&plan.window(point))?;
    for v in mask.data_mut() {
        *v = u8::from(*v != 0);
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    CoverageGap { first_voxel: [usize; 3], uncovered: usize },
    WindowOutOfDomain { point: usize },
    BatchOverlap { batch: usize, a: usize, b: usize },
    DependencyOrder { point: usize, dep: usize },
    InvalidDependency { point: usize, dep: usize },
    MissingDependency { point: usize, overlaps: usize },
    BatchTooLarge { batch: usize, size: usize },
    Unscheduled { point: usize },
    ScheduledTwice { point: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanReport {
    pub violations: Vec<Violation>,
}

impl PlanReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks coverage, batch disjointness, dependency ordering and batch sizes.
pub fn verify_plan(plan: &GenerationPlan) -> PlanReport {
    let mut v = Vec::new();
    let n = plan.points.len();
    let Ok(dims) = Dims::from_array(plan.domain_dims) else {
        v.push(Violation::CoverageGap {
            first_voxel: [0; 3],
            uncovered: 0,
        });
        return PlanReport { violations: v };
    };

    let windows: Vec<BlockWindow> = (0..n).map(|i| plan.window(i)).collect();
    let mut covered = vec![false; dims.len()];
    for (i, w) in windows.iter().enumerate() {
        if !w.fits(dims) {
            v.push(Violation::WindowOutOfDomain { point: i });
            continue;
        }
        let e = w.end();
        for z in w.origin[2]..e[2] {
            for y in w.origin[1]..e[1] {
                let row = dims.index(0, y, z);
                covered[row + w.origin[0]..row + e[0]].fill(true);
            }
        }
    }
    let uncovered = covered.iter().filter(|c| !**c).count();
    if let Some(first) = covered.iter().position(|c| !*c) {
        v.push(Violation::CoverageGap {
            first_voxel: dims.coords(first),
            uncovered,
        });
    }

    let mut batch_of = vec![usize::MAX; n];
    for (b, batch) in plan.batches.iter().enumerate() {
        if batch.len() > plan.config.max_batch {
            v.push(Violation::BatchTooLarge { batch: b, size: batch.len() });
        }
        for &p in batch {
            if p >= n {
                continue;
            }
            if batch_of[p] != usize::MAX {
                v.push(Violation::ScheduledTwice { point: p });
            }
            batch_of[p] = b;
        }
        for (x, &a) in batch.iter().enumerate() {
            for &c in &batch[x + 1..] {
                if a < n && c < n && windows[a].intersect(&windows[c]).is_some() {
                    v.push(Violation::BatchOverlap { batch: b, a, b: c });
                }
            }
        }
    }
    for (p, &b) in batch_of.iter().enumerate() {
        if b == usize::MAX {
            v.push(Violation::Unscheduled { point: p });
        }
    }

    for (p, point) in plan.points.iter().enumerate() {
        for &d in &point.deps {
            if d >= p {
                v.push(Violation::InvalidDependency { point: p, dep: d });
            } else if batch_of[p] != usize::MAX && batch_of[d] >= batch_of[p] {
                v.push(Violation::DependencyOrder { point: p, dep: d });
            }
        }
        for q in 0..p {
            if windows[p].intersect(&windows[q]).is_some() && !point.deps.contains(&q) {
                v.push(Violation::MissingDependency { point: p, overlaps: q });
            }
        }
    }
    PlanReport { violations: v }
}
