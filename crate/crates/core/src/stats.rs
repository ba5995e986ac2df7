//! Per-grain descriptors and histogram comparison between sets of
//! microstructures.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{LabelVolume, NOISE};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("empty input")]
    EmptyInput,
    #[error("need at least two grains, found {0}")]
    InsufficientGrains(usize),
    #[error("histogram shapes differ")]
    ShapeMismatch,
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrainRecord {
    pub id: u32,
    pub volume: usize,
    pub centroid: [f64; 3],
    /// RMS extents along the principal axes, `a >= b >= c`.
    pub axes: [f64; 3],
    pub touches_boundary: bool,
}

#[derive(Default)]
struct Moments {
    n: usize,
    anchor: [f64; 3],
    s: [f64; 3],
    ss: [[f64; 3]; 3],
    boundary: bool,
}

/// One record per non-noise label, ordered by label.
pub fn grain_records(labels: &LabelVolume, exclude_boundary: bool) -> Vec<GrainRecord> {
    let dims = labels.dims();
    let extent = dims.as_array();
    let mut acc: BTreeMap<u32, Moments> = BTreeMap::new();
    for (i, &l) in labels.data().iter().enumerate() {
        if l == NOISE {
            continue;
        }
        let c = dims.coords(i);
        let m = acc.entry(l).or_insert_with(|| Moments {
            anchor: c.map(|v| v as f64),
            ..Default::default()
        });
        // shift by the first voxel to keep the sums small
        let d = [0, 1, 2].map(|a| c[a] as f64 - m.anchor[a]);
        m.n += 1;
        for a in 0..3 {
            m.s[a] += d[a];
            for b in 0..3 {
                m.ss[a][b] += d[a] * d[b];
            }
            if c[a] == 0 || c[a] + 1 == extent[a] {
                m.boundary = true;
            }
        }
    }
    acc.into_iter()
        .filter(|(_, m)| !(exclude_boundary && m.boundary))
        .map(|(id, m)| {
            let n = m.n as f64;
            let mean = m.s.map(|v| v / n);
            let cov = Matrix3::from_fn(|a, b| m.ss[a][b] / n - mean[a] * mean[b]);
            let eig = SymmetricEigen::new(cov).eigenvalues;
            let mut axes = [0, 1, 2].map(|k| eig[k].max(0.0).sqrt());
            axes.sort_by(|x, y| y.total_cmp(x));
            GrainRecord {
                id,
                volume: m.n,
                centroid: [0, 1, 2].map(|a| m.anchor[a] + mean[a]),
                axes,
                touches_boundary: m.boundary,
            }
        })
        .collect()
}

/// Distance from each grain's centroid to the nearest other centroid.
pub fn nn_centroid_distances(records: &[GrainRecord]) -> Result<Vec<f64>, StatsError> {
    if records.len() < 2 {
        return Err(StatsError::InsufficientGrains(records.len()));
    }
    let pts: Vec<Vector3<f64>> = records.iter().map(|r| Vector3::from(r.centroid)).collect();
    Ok(pts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            pts.iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Probability mass per bin, summing to 1.
    pub masses: Vec<f64>,
    pub epsilon: f64,
}

fn check_edges(edges: &[f64]) -> Result<(), StatsError> {
    if edges.len() < 2 {
        return Err(StatsError::InvalidHistogram("need at least two edges".into()));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(StatsError::InvalidHistogram("edges must be strictly increasing".into()));
    }
    Ok(())
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    // right-open bins, last bin closed, out-of-range clipped
    edges[1..bins].partition_point(|&e| e <= v)
}

fn normalize(counts: &mut [f64], epsilon: f64) {
    for c in counts.iter_mut() {
        *c += epsilon;
    }
    let total: f64 = counts.iter().sum();
    for c in counts.iter_mut() {
        *c /= total;
    }
}

pub fn histogram_pdf(values: &[f64], edges: &[f64], epsilon: f64) -> Result<Histogram, StatsError> {
    check_edges(edges)?;
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let mut counts = vec![0.0; edges.len() - 1];
    for &v in values {
        counts[bin_of(edges, v)] += 1.0;
    }
    normalize(&mut counts, epsilon);
    Ok(Histogram {
        edges: edges.to_vec(),
        masses: counts,
        epsilon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// Row-major over x bins, y fastest.
    pub masses: Vec<f64>,
    pub epsilon: f64,
}

pub fn histogram2d_pdf(
    values: &[(f64, f64)],
    x_edges: &[f64],
    y_edges: &[f64],
    epsilon: f64,
) -> Result<Histogram2d, StatsError> {
    check_edges(x_edges)?;
    check_edges(y_edges)?;
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let ny = y_edges.len() - 1;
    let mut counts = vec![0.0; (x_edges.len() - 1) * ny];
    for &(x, y) in values {
        counts[bin_of(x_edges, x) * ny + bin_of(y_edges, y)] += 1.0;
    }
    normalize(&mut counts, epsilon);
    Ok(Histogram2d {
        x_edges: x_edges.to_vec(),
        y_edges: y_edges.to_vec(),
        masses: counts,
        epsilon,
    })
}

/// `sum p ln(p/q)` with `0 ln 0 = 0`; infinite where `q = 0 < p`.
pub fn kl_masses(p: &[f64], q: &[f64]) -> Result<f64, StatsError> {
    if p.len() != q.len() {
        return Err(StatsError::ShapeMismatch);
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else if qi == 0.0 {
                f64::INFINITY
            } else {
                pi * (pi / qi).ln()
            }
        })
        .sum())
}

pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64, StatsError> {
    if p.edges != q.edges {
        return Err(StatsError::ShapeMismatch);
    }
    kl_masses(&p.masses, &q.masses)
}

pub fn kl_divergence_2d(p: &Histogram2d, q: &Histogram2d) -> Result<f64, StatsError> {
    if p.x_edges != q.x_edges || p.y_edges != q.y_edges {
        return Err(StatsError::ShapeMismatch);
    }
    kl_masses(&p.masses, &q.masses)
}

pub fn linear_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub bins: usize,
    /// Bins per axis of the aspect-ratio histogram.
    pub aspect_bins: usize,
    pub epsilon: f64,
    pub exclude_boundary: bool,
    /// Split every label into its face-connected pieces first.
    pub connected_components: bool,
    /// Label treated as empty space and ignored.
    pub void_label: Option<u32>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            bins: 50,
            aspect_bins: 10,
            epsilon: 1e-10,
            exclude_boundary: false,
            connected_components: true,
            void_label: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Descriptors {
    pub volumes: Vec<f64>,
    pub aspect: Vec<(f64, f64)>,
    pub nn_distances: Vec<f64>,
    pub grains: usize,
}

/// Pooled descriptors over a set of volumes; nearest-neighbour distances
/// are computed within each volume.
pub fn descriptors(volumes: &[LabelVolume], config: &StatsConfig) -> Descriptors {
    let per: Vec<Descriptors> = volumes
        .par_iter()
        .map(|v| {
            let mut v = v.clone();
            if let Some(void) = config.void_label {
                v.data_mut().iter_mut().filter(|l| **l == void).for_each(|l| *l = NOISE);
            }
            if config.connected_components {
                v = v.connected_components();
            }
            let recs = grain_records(&v, config.exclude_boundary);
            Descriptors {
                volumes: recs.iter().map(|r| r.volume as f64).collect(),
                aspect: recs
                    .iter()
                    .filter(|r| r.axes[0] > 0.0)
                    .map(|r| (r.axes[1] / r.axes[0], r.axes[2] / r.axes[0]))
                    .collect(),
                nn_distances: nn_centroid_distances(&recs).unwrap_or_default(),
                grains: recs.len(),
            }
        })
        .collect();
    let mut out = Descriptors::default();
    for d in per {
        out.volumes.extend(d.volumes);
        out.aspect.extend(d.aspect);
        out.nn_distances.extend(d.nn_distances);
        out.grains += d.grains;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorComparison {
    pub kld: f64,
    pub a: Histogram,
    pub b: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectComparison {
    pub kld: f64,
    pub a: Histogram2d,
    pub b: Histogram2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub grains_a: usize,
    pub grains_b: usize,
    pub volume: DescriptorComparison,
    pub aspect_ratio: AspectComparison,
    pub nn_distance: DescriptorComparison,
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn compare_1d(a: &[f64], b: &[f64], config: &StatsConfig) -> Result<DescriptorComparison, StatsError> {
    let (lo, hi) = range(a.iter().chain(b).copied()).ok_or(StatsError::EmptyInput)?;
    let edges = linear_edges(lo, hi, config.bins);
    let ha = histogram_pdf(a, &edges, config.epsilon)?;
    let hb = histogram_pdf(b, &edges, config.epsilon)?;
    Ok(DescriptorComparison {
        kld: kl_divergence(&ha, &hb)?,
        a: ha,
        b: hb,
    })
}

/// KL divergences `KL(A || B)` of pooled grain-volume, aspect-ratio and
/// nearest-centroid-distance distributions on shared bin edges.
pub fn compare_sets(
    set_a: &[LabelVolume],
    set_b: &[LabelVolume],
    config: &StatsConfig,
) -> Result<ComparisonReport, StatsError> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let da = descriptors(set_a, config);
    let db = descriptors(set_b, config);
    let volume = compare_1d(&da.volumes, &db.volumes, config)?;
    let nn_distance = compare_1d(&da.nn_distances, &db.nn_distances, config)?;
    let all = da.aspect.iter().chain(&db.aspect);
    let (xlo, xhi) = range(all.clone().map(|p| p.0)).ok_or(StatsError::EmptyInput)?;
    let (ylo, yhi) = range(all.map(|p| p.1)).ok_or(StatsError::EmptyInput)?;
    let xe = linear_edges(xlo, xhi, config.aspect_bins);
    let ye = linear_edges(ylo, yhi, config.aspect_bins);
    let ha = histogram2d_pdf(&da.aspect, &xe, &ye, config.epsilon)?;
    let hb = histogram2d_pdf(&db.aspect, &xe, &ye, config.epsilon)?;
    Ok(ComparisonReport {
        grains_a: da.grains,
        grains_b: db.grains,
        volume,
        aspect_ratio: AspectComparison {
            kld: kl_divergence_2d(&ha, &hb)?,
            a: ha,
            b: hb,
        },
        nn_distance,
    })
}

impl ComparisonReport {
    /// One row per bin: `descriptor,x_lo,x_hi,y_lo,y_hi,p_a,p_b`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("descriptor,x_lo,x_hi,y_lo,y_hi,p_a,p_b\n");
        for (name, c) in [("volume", &self.volume), ("nn_distance", &self.nn_distance)] {
            for i in 0..c.a.masses.len() {
                out.push_str(&format!(
                    "{name},{},{},,,{},{}\n",
                    c.a.edges[i],
                    c.a.edges[i + 1],
                    c.a.masses[i],
                    c.b.masses[i]
                ));
            }
        }
        let h = &self.aspect_ratio;
        let ny = h.a.y_edges.len() - 1;
        for (k, (pa, pb)) in h.a.masses.iter().zip(&h.b.masses).enumerate() {
            let (i, j) = (k / ny, k % ny);
            out.push_str(&format!(
                "aspect_ratio,{},{},{},{},{pa},{pb}\n",
                h.a.x_edges[i],
                h.a.x_edges[i + 1],
                h.a.y_edges[j],
                h.a.y_edges[j + 1]
            ));
        }
        out
    }
}
