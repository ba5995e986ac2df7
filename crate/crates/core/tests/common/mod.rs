#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use grainforge::voxel::{Dims, ScalarVolume, NOISE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Voronoi grains on a jittered seed grid; each grain gets a distinct value
/// `3 * index` plus uniform scatter of +-`scatter`.
pub fn voronoi_volume(dims: [usize; 3], spacing: usize, scatter: f32, seed: u64) -> (ScalarVolume, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Dims::from_array(dims).unwrap();
    let mut seeds = Vec::new();
    let per_axis: [usize; 3] = std::array::from_fn(|a| dims[a].div_ceil(spacing));
    for k in 0..per_axis[2] {
        for j in 0..per_axis[1] {
            for i in 0..per_axis[0] {
                let c = [i, j, k].map(|v| v as f64 * spacing as f64 + spacing as f64 / 2.0);
                let jitter = spacing as f64 / 5.0;
                seeds.push(c.map(|v| v + rng.random_range(-jitter..=jitter)));
            }
        }
    }
    let mut order: Vec<u32> = (0..seeds.len() as u32).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut owner = Vec::with_capacity(d.len());
    let mut data = Vec::with_capacity(d.len());
    for idx in 0..d.len() {
        let p = d.coords(idx).map(|v| v as f64);
        let g = (0..seeds.len())
            .min_by(|&a, &b| {
                let da: f64 = (0..3).map(|x| (p[x] - seeds[a][x]).powi(2)).sum();
                let db: f64 = (0..3).map(|x| (p[x] - seeds[b][x]).powi(2)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        owner.push(g as u32);
        let s = if scatter > 0.0 { rng.random_range(-scatter..=scatter) } else { 0.0 };
        data.push(3.0 * order[g] as f32 + s);
    }
    (ScalarVolume::from_vec(d, data).unwrap(), owner)
}

fn points4(vol: &ScalarVolume, gain: f64) -> Vec<[f64; 4]> {
    let d = vol.dims();
    (0..d.len())
        .map(|i| {
            let c = d.coords(i);
            [c[0] as f64, c[1] as f64, c[2] as f64, gain * vol.data()[i] as f64]
        })
        .collect()
}

fn dist2(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let s3: f64 = (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum();
    s3 + (a[3] - b[3]) * (a[3] - b[3])
}

/// Textbook DBSCAN over explicit 4-D points with an all-pairs neighbour scan.
pub fn brute_force_dbscan(vol: &ScalarVolume, eps: f64, min_samples: usize, gain: f64) -> Vec<u32> {
    let pts = points4(vol, gain);
    let n = pts.len();
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist2(&pts[i], &pts[j]) <= eps * eps).collect())
        .collect();
    expand_clusters(&nbrs, min_samples)
}

/// Same as [`brute_force_dbscan`], but each voxel only scans the axis-aligned
/// cube of half-width `floor(eps)` around it. Lossless, since the 4-D distance
/// is never smaller than the spatial one.
pub fn windowed_brute_dbscan(vol: &ScalarVolume, eps: f64, min_samples: usize, gain: f64) -> Vec<u32> {
    let pts = points4(vol, gain);
    let d = vol.dims();
    let r = eps.floor() as i64;
    let nbrs: Vec<Vec<usize>> = (0..pts.len())
        .map(|i| {
            let c = d.coords(i).map(|v| v as i64);
            let mut out = Vec::new();
            for z in (c[2] - r).max(0)..=(c[2] + r).min(d.nz as i64 - 1) {
                for y in (c[1] - r).max(0)..=(c[1] + r).min(d.ny as i64 - 1) {
                    for x in (c[0] - r).max(0)..=(c[0] + r).min(d.nx as i64 - 1) {
                        let j = d.index(x as usize, y as usize, z as usize);
                        if dist2(&pts[i], &pts[j]) <= eps * eps {
                            out.push(j);
                        }
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect();
    expand_clusters(&nbrs, min_samples)
}

fn expand_clusters(nbrs: &[Vec<usize>], min_samples: usize) -> Vec<u32> {
    let n = nbrs.len();
    let mut labels = vec![NOISE; n];
    let mut next = 0u32;
    for s in 0..n {
        if labels[s] != NOISE || nbrs[s].len() < min_samples {
            continue;
        }
        labels[s] = next;
        let mut q = VecDeque::from([s]);
        while let Some(i) = q.pop_front() {
            if nbrs[i].len() < min_samples {
                continue;
            }
            for &j in &nbrs[i] {
                if labels[j] == NOISE {
                    labels[j] = next;
                    q.push_back(j);
                }
            }
        }
        next += 1;
    }
    labels
}

/// True when both labelings induce the same partition and the same noise set.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut fwd = HashMap::new();
    let mut bwd = HashMap::new();
    a.len() == b.len()
        && a.iter().zip(b).all(|(&x, &y)| {
            if (x == NOISE) != (y == NOISE) {
                return false;
            }
            *fwd.entry(x).or_insert(y) == y && *bwd.entry(y).or_insert(x) == x
        })
}

/// Closed UV sphere with `rings` latitude bands and `segments` longitudes.
pub fn uv_sphere(center: [f64; 3], r: f64, rings: usize, segments: usize) -> Vec<[[f64; 3]; 3]> {
    use std::f64::consts::PI;
    let point = |i: usize, j: usize| {
        let th = PI * i as f64 / rings as f64;
        let ph = 2.0 * PI * (j % segments) as f64 / segments as f64;
        [
            center[0] + r * th.sin() * ph.cos(),
            center[1] + r * th.sin() * ph.sin(),
            center[2] + r * th.cos(),
        ]
    };
    let mut tris = Vec::new();
    for i in 0..rings {
        for j in 0..segments {
            let (a, b, c, d) = (point(i, j), point(i + 1, j), point(i + 1, j + 1), point(i, j + 1));
            if i != 0 {
                tris.push([a, b, d]);
            }
            if i + 1 != rings {
                tris.push([b, c, d]);
            }
        }
    }
    tris
}
