//! Grain segmentation of continuous sampler output by DBSCAN over the 4-D
//! points `(x, y, z, value_gain * value)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{Dims, LabelVolume, ScalarVolume, VoxelError, NOISE};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error("volume contains no clusters")]
    NoClusters,
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_samples: usize,
    pub value_gain: f64,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: 1.9,
            min_samples: 15,
            value_gain: 1.0,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(SegmentError::InvalidConfig("eps must be positive".into()));
        }
        if self.min_samples == 0 {
            return Err(SegmentError::InvalidConfig("min_samples must be >= 1".into()));
        }
        if !(self.value_gain > 0.0 && self.value_gain.is_finite()) {
            return Err(SegmentError::InvalidConfig("value_gain must be positive".into()));
        }
        Ok(())
    }

    /// Largest per-axis voxel offset that can fall within `eps`.
    pub fn reach(&self) -> usize {
        self.eps.floor() as usize
    }

    fn offsets(&self) -> Vec<[i64; 3]> {
        let r = self.reach() as i64;
        let mut out = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dx * dx + dy * dy + dz * dz) as f64) <= self.eps * self.eps {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// Squared 4-D distance between two voxels.
#[inline]
pub fn distance2(a: [usize; 3], va: f32, b: [usize; 3], vb: f32, gain: f64) -> f64 {
    let mut d = 0.0;
    for i in 0..3 {
        let t = a[i] as f64 - b[i] as f64;
        d += t * t;
    }
    let t = gain * va as f64 - gain * vb as f64;
    d + t * t
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub labels: LabelVolume,
    /// Noise voxels before any noise assignment.
    pub noise_count: usize,
    pub cluster_count: usize,
}

struct RawClusters {
    labels: Vec<u32>,
    core: Vec<bool>,
    clusters: u32,
}

fn neighbors<'a>(
    vol: &'a ScalarVolume,
    offsets: &'a [[i64; 3]],
    params: &'a DbscanParams,
    i: usize,
) -> impl Iterator<Item = usize> + 'a {
    let dims = vol.dims();
    let p = dims.coords(i);
    let v = vol.data()[i];
    let eps2 = params.eps * params.eps;
    offsets.iter().filter_map(move |o| {
        let q = [p[0] as i64 + o[0], p[1] as i64 + o[1], p[2] as i64 + o[2]];
        if !dims.contains(q) {
            return None;
        }
        let q = [q[0] as usize, q[1] as usize, q[2] as usize];
        let j = dims.index(q[0], q[1], q[2]);
        (distance2(p, v, q, vol.data()[j], params.value_gain) <= eps2).then_some(j)
    })
}

fn dbscan_raw(vol: &ScalarVolume, params: &DbscanParams) -> RawClusters {
    let offsets = params.offsets();
    let n = vol.len();
    let core: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| neighbors(vol, &offsets, params, i).count() >= params.min_samples)
        .collect();
    let mut labels = vec![NOISE; n];
    let mut clusters = 0u32;
    let mut stack = Vec::new();
    for start in 0..n {
        if !core[start] || labels[start] != NOISE {
            continue;
        }
        let c = clusters;
        clusters += 1;
        labels[start] = c;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for j in neighbors(vol, &offsets, params, i) {
                if labels[j] == NOISE {
                    labels[j] = c;
                    if core[j] {
                        stack.push(j);
                    }
                }
            }
        }
    }
    RawClusters { labels, core, clusters }
}

/// DBSCAN with a voxel-grid neighbourhood. Core points have at least
/// `min_samples` points (self included) within `eps`; border points join the
/// first cluster, in scan order of cluster seeds, that reaches them. Labels
/// are renumbered by first voxel in scan order.
pub fn dbscan4d(volume: &ScalarVolume, params: &DbscanParams) -> Result<SegmentationResult, SegmentError> {
    params.validate()?;
    let raw = dbscan_raw(volume, params);
    let mut labels = LabelVolume::from_vec(volume.dims(), raw.labels)?.with_meta(volume.meta.clone());
    let noise_count = labels.noise_count();
    let cluster_count = labels.canonicalize();
    Ok(SegmentationResult {
        labels,
        noise_count,
        cluster_count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub tile_size: usize,
    pub overlap: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tile_size: 32,
            overlap: 8,
        }
    }
}

fn tile_positions(dim: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut out = vec![0];
    while out.last().unwrap() + tile < dim {
        let next = (out.last().unwrap() + stride).min(dim - tile);
        out.push(next);
    }
    out
}

/// `[lo, hi)` of the voxels owned by each tile along one axis; boundaries sit
/// at overlap midpoints.
fn owned_ranges(pos: &[usize], tile: usize, dim: usize) -> Vec<(usize, usize)> {
    let tile = tile.min(dim);
    (0..pos.len())
        .map(|i| {
            let lo = if i == 0 { 0 } else { (pos[i] + pos[i - 1] + tile) / 2 };
            let hi = if i + 1 == pos.len() {
                dim
            } else {
                (pos[i + 1] + pos[i] + tile) / 2
            };
            (lo, hi)
        })
        .collect()
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn add(&mut self, n: u32) -> u32 {
        let base = self.parent.len() as u32;
        self.parent.extend(base..base + n);
        base
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            let (lo, hi) = (a.min(b), a.max(b));
            self.parent[hi as usize] = lo;
        }
    }
}

struct Tile {
    idx: [usize; 3],
    origin: [usize; 3],
    dims: Dims,
    labels: Vec<u32>,
    core: Vec<bool>,
    base: u32,
}

/// Tiled DBSCAN: each tile is clustered independently, clusters that share a
/// core voxel inside an overlap are merged, and every voxel takes its label
/// from the tile that owns it. Only one z-layer of tiles is held at a time.
pub fn hierarchical_segment(
    volume: &ScalarVolume,
    tiles: TileConfig,
    params: &DbscanParams,
) -> Result<SegmentationResult, SegmentError> {
    params.validate()?;
    let TileConfig { tile_size, overlap } = tiles;
    if tile_size <= 2 * overlap {
        return Err(SegmentError::InvalidConfig(format!(
            "tile_size {tile_size} must exceed twice the overlap {overlap}"
        )));
    }
    let min_overlap = 4 * params.reach().max(1);
    if overlap < min_overlap {
        return Err(SegmentError::InvalidConfig(format!(
            "overlap {overlap} is below {min_overlap} voxels for eps {}",
            params.eps
        )));
    }
    let dims = volume.dims();
    let da = dims.as_array();
    if da.iter().all(|&d| d <= tile_size) {
        return dbscan4d(volume, params);
    }

    let pos: [Vec<usize>; 3] = std::array::from_fn(|a| tile_positions(da[a], tile_size, overlap));
    let own: [Vec<(usize, usize)>; 3] = std::array::from_fn(|a| owned_ranges(&pos[a], tile_size, da[a]));
    let mut out = vec![NOISE; dims.len()];
    let mut uf = UnionFind { parent: Vec::new() };
    let mut prev_layer: Vec<Tile> = Vec::new();

    for kz in 0..pos[2].len() {
        let specs: Vec<[usize; 3]> = (0..pos[1].len())
            .flat_map(|ky| (0..pos[0].len()).map(move |kx| [kx, ky, kz]))
            .collect();
        let mut layer: Vec<Tile> = specs
            .par_iter()
            .map(|&idx| -> Result<Tile, SegmentError> {
                let origin = [pos[0][idx[0]], pos[1][idx[1]], pos[2][idx[2]]];
                let size = std::array::from_fn(|a| tile_size.min(da[a]));
                let window = crate::voxel::BlockWindow::new(origin, size);
                let sub = volume.extract_window(&window)?;
                let raw = dbscan_raw(&sub, params);
                Ok(Tile {
                    idx,
                    origin,
                    dims: sub.dims(),
                    labels: raw.labels,
                    core: raw.core,
                    base: raw.clusters,
                })
            })
            .collect::<Result<_, _>>()?;

        for t in 0..layer.len() {
            let n = layer[t].base;
            layer[t].base = uf.add(n);
            let tile = &layer[t];
            // owned region
            let [ix, iy, iz] = tile.idx;
            let (x0, x1) = own[0][ix];
            let (y0, y1) = own[1][iy];
            let (z0, z1) = own[2][iz];
            for z in z0..z1 {
                for y in y0..y1 {
                    for x in x0..x1 {
                        let l = tile.labels[tile.dims.index(x - tile.origin[0], y - tile.origin[1], z - tile.origin[2])];
                        out[dims.index(x, y, z)] = if l == NOISE { NOISE } else { tile.base + l };
                    }
                }
            }
            // merges with adjacent, already-processed tiles
            for other in prev_layer.iter().chain(layer[..t].iter()) {
                if (0..3).any(|a| other.idx[a].abs_diff(tile.idx[a]) > 1) {
                    continue;
                }
                merge_tiles(&mut uf, tile, other);
            }
        }
        prev_layer = layer;
    }

    let mut roots = std::collections::HashMap::new();
    for l in out.iter_mut() {
        if *l != NOISE {
            *l = *roots.entry(*l).or_insert_with(|| uf.find(*l));
        }
    }
    let mut labels = LabelVolume::from_vec(dims, out)?.with_meta(volume.meta.clone());
    let noise_count = labels.noise_count();
    let cluster_count = labels.canonicalize();
    Ok(SegmentationResult {
        labels,
        noise_count,
        cluster_count,
    })
}

fn merge_tiles(uf: &mut UnionFind, a: &Tile, b: &Tile) {
    let lo: [usize; 3] = std::array::from_fn(|i| a.origin[i].max(b.origin[i]));
    let hi: [usize; 3] =
        std::array::from_fn(|i| (a.origin[i] + a.dims.as_array()[i]).min(b.origin[i] + b.dims.as_array()[i]));
    if (0..3).any(|i| lo[i] >= hi[i]) {
        return;
    }
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                let ia = a.dims.index(x - a.origin[0], y - a.origin[1], z - a.origin[2]);
                let ib = b.dims.index(x - b.origin[0], y - b.origin[1], z - b.origin[2]);
                if a.core[ia] && b.core[ib] {
                    uf.union(a.base + a.labels[ia], b.base + b.labels[ib]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    KeepNoise,
    NearestCluster,
}

impl std::str::FromStr for NoisePolicy {
    type Err = SegmentError;
    fn from_str(s: &str) -> Result<Self, SegmentError> {
        match s {
            "keep" | "keep_noise" | "keep-noise" => Ok(NoisePolicy::KeepNoise),
            "nearest" | "nearest_cluster" | "nearest-cluster" => Ok(NoisePolicy::NearestCluster),
            other => Err(SegmentError::InvalidConfig(format!("unknown noise policy {other:?}"))),
        }
    }
}

/// Gives each noise voxel the label of its nearest (Euclidean) labelled
/// voxel, preferring the smallest label on ties.
pub fn assign_noise(labels: &LabelVolume, policy: NoisePolicy) -> Result<LabelVolume, SegmentError> {
    if policy == NoisePolicy::KeepNoise || labels.noise_count() == 0 {
        return Ok(labels.clone());
    }
    if labels.data().iter().all(|&l| l == NOISE) {
        return Err(SegmentError::NoClusters);
    }
    let dims = labels.dims();
    let src = labels.data();
    let max_r = dims.as_array().into_iter().max().unwrap() as i64;
    let filled: Vec<u32> = (0..src.len())
        .into_par_iter()
        .map(|i| {
            if src[i] != NOISE {
                return src[i];
            }
            let p = dims.coords(i).map(|v| v as i64);
            let mut best: Option<(i64, u32)> = None;
            for r in 1..=max_r {
                if let Some((d2, _)) = best {
                    if r * r > d2 {
                        break;
                    }
                }
                for dz in -r..=r {
                    for dy in -r..=r {
                        let on_face = dz.abs() == r || dy.abs() == r;
                        let step = if on_face { 1 } else { 2 * r };
                        let mut dx = -r;
                        while dx <= r {
                            let q = [p[0] + dx, p[1] + dy, p[2] + dz];
                            if dims.contains(q) {
                                let l = src[dims.index(q[0] as usize, q[1] as usize, q[2] as usize)];
                                if l != NOISE {
                                    let d2 = dx * dx + dy * dy + dz * dz;
                                    if best.is_none_or(|(bd, bl)| d2 < bd || (d2 == bd && l < bl)) {
                                        best = Some((d2, l));
                                    }
                                }
                            }
                            dx += step;
                        }
                    }
                }
            }
            best.expect("at least one labelled voxel").1
        })
        .collect();
    Ok(LabelVolume::from_vec(dims, filled)?.with_meta(labels.meta.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook DBSCAN with exhaustive pairwise neighbour search.
    pub(crate) fn brute_dbscan(vol: &ScalarVolume, params: &DbscanParams) -> Vec<u32> {
        let dims = vol.dims();
        let n = vol.len();
        let eps2 = params.eps * params.eps;
        let nbrs: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| {
                        distance2(dims.coords(i), vol.data()[i], dims.coords(j), vol.data()[j], params.value_gain)
                            <= eps2
                    })
                    .collect()
            })
            .collect();
        let core: Vec<bool> = nbrs.iter().map(|v| v.len() >= params.min_samples).collect();
        let mut labels = vec![NOISE; n];
        let mut c = 0;
        for s in 0..n {
            if !core[s] || labels[s] != NOISE {
                continue;
            }
            labels[s] = c;
            let mut queue = std::collections::VecDeque::from([s]);
            while let Some(i) = queue.pop_front() {
                for &j in &nbrs[i] {
                    if labels[j] == NOISE {
                        labels[j] = c;
                        if core[j] {
                            queue.push_back(j);
                        }
                    }
                }
            }
            c += 1;
        }
        labels
    }

    pub(crate) fn same_partition(a: &[u32], b: &[u32]) -> bool {
        let mut fwd = std::collections::HashMap::new();
        let mut bwd = std::collections::HashMap::new();
        a.len() == b.len()
            && a.iter().zip(b).all(|(&x, &y)| {
                if (x == NOISE) != (y == NOISE) {
                    return false;
                }
                *fwd.entry(x).or_insert(y) == y && *bwd.entry(y).or_insert(x) == x
            })
    }

    fn vol_from(dims: [usize; 3], f: impl Fn([usize; 3]) -> f32) -> ScalarVolume {
        let d = Dims::from_array(dims).unwrap();
        ScalarVolume::from_vec(d, (0..d.len()).map(|i| f(d.coords(i))).collect()).unwrap()
    }

    #[test]
    fn constant_volume_is_one_cluster() {
        let v = vol_from([8; 3], |_| 0.5);
        let r = dbscan4d(&v, &DbscanParams::default()).unwrap();
        assert_eq!(r.cluster_count, 1);
        assert_eq!(r.noise_count, 0);
    }

    #[test]
    fn split_halves_are_two_clusters() {
        let p = DbscanParams::default();
        let v = vol_from([8, 8, 16], |[_, _, z]| if z < 8 { 0.0 } else { (100.0 * p.eps) as f32 });
        let r = dbscan4d(&v, &p).unwrap();
        assert_eq!(r.cluster_count, 2);
        assert!(same_partition(r.labels.data(), &brute_dbscan(&v, &p)));
    }

    #[test]
    fn outlier_voxel_is_noise() {
        let p = DbscanParams {
            value_gain: 50.0,
            ..Default::default()
        };
        let v = vol_from([6; 3], |c| if c == [3, 3, 3] { 1.0 } else { 0.0 });
        let r = dbscan4d(&v, &p).unwrap();
        assert_eq!(r.labels.get(3, 3, 3), NOISE);
        assert_eq!(r.noise_count, 1);
        assert!(same_partition(r.labels.data(), &brute_dbscan(&v, &p)));
    }

    #[test]
    fn invalid_params_rejected() {
        let v = vol_from([4; 3], |_| 0.0);
        for p in [
            DbscanParams { eps: 0.0, ..Default::default() },
            DbscanParams { min_samples: 0, ..Default::default() },
            DbscanParams { value_gain: -1.0, ..Default::default() },
        ] {
            assert!(matches!(dbscan4d(&v, &p), Err(SegmentError::InvalidConfig(_))));
        }
        let tiles = TileConfig { tile_size: 16, overlap: 8 };
        assert!(matches!(
            hierarchical_segment(&v, tiles, &DbscanParams::default()),
            Err(SegmentError::InvalidConfig(_))
        ));
    }

    #[test]
    fn single_tile_equals_flat() {
        let v = vol_from([20, 18, 12], |[x, y, z]| ((x / 5 + y / 6 + z / 4) % 3) as f32 * 4.0);
        let p = DbscanParams::default();
        let flat = dbscan4d(&v, &p).unwrap();
        let tiled = hierarchical_segment(&v, TileConfig::default(), &p).unwrap();
        assert_eq!(flat, tiled);
    }

    #[test]
    fn grain_spanning_three_tiles_keeps_one_label() {
        // a slab through the whole x extent crosses three tiles
        let v = vol_from([72, 24, 24], |[_, y, z]| if (8..16).contains(&y) && (8..16).contains(&z) { 5.0 } else { 0.0 });
        let p = DbscanParams::default();
        let r = hierarchical_segment(&v, TileConfig { tile_size: 32, overlap: 8 }, &p).unwrap();
        assert_eq!(tile_positions(72, 32, 8).len(), 3);
        let slab = r.labels.get(0, 12, 12);
        assert!((0..72).all(|x| r.labels.get(x, 12, 12) == slab));
        assert!(same_partition(r.labels.data(), dbscan4d(&v, &p).unwrap().labels.data()));
    }

    #[test]
    fn tiling_geometry() {
        assert_eq!(tile_positions(32, 32, 8), vec![0]);
        assert_eq!(tile_positions(48, 32, 8), vec![0, 16]);
        assert_eq!(tile_positions(100, 32, 8), vec![0, 24, 48, 68]);
        let own = owned_ranges(&[0, 24, 48, 68], 32, 100);
        assert_eq!(own, vec![(0, 28), (28, 52), (52, 74), (74, 100)]);
    }

    #[test]
    fn noise_assignment_rules() {
        let d = Dims::new(5, 1, 1).unwrap();
        let base = LabelVolume::from_vec(d, vec![1, NOISE, 2, 2, 2]).unwrap();
        assert_eq!(assign_noise(&base, NoisePolicy::KeepNoise).unwrap(), base);
        let tie = assign_noise(&base, NoisePolicy::NearestCluster).unwrap();
        assert_eq!(tie.data(), &[1, 1, 2, 2, 2]);
        let one = LabelVolume::from_vec(d, vec![NOISE, NOISE, 3, NOISE, NOISE]).unwrap();
        assert_eq!(assign_noise(&one, NoisePolicy::NearestCluster).unwrap().data(), &[3; 5]);
        let clean = LabelVolume::from_vec(d, vec![0, 0, 1, 1, 1]).unwrap();
        assert_eq!(assign_noise(&clean, NoisePolicy::NearestCluster).unwrap(), clean);
        let none = LabelVolume::from_vec(d, vec![NOISE; 5]).unwrap();
        assert!(matches!(assign_noise(&none, NoisePolicy::NearestCluster), Err(SegmentError::NoClusters)));
    }

    #[test]
    fn noise_assignment_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = Dims::new(9, 7, 6).unwrap();
        for _ in 0..5 {
            let data: Vec<u32> = (0..d.len())
                .map(|_| if rng.random_bool(0.8) { NOISE } else { rng.random_range(0..4) })
                .collect();
            let lv = LabelVolume::from_vec(d, data.clone()).unwrap();
            let got = assign_noise(&lv, NoisePolicy::NearestCluster).unwrap();
            for i in 0..d.len() {
                if data[i] != NOISE {
                    continue;
                }
                let p = d.coords(i);
                let want = (0..d.len())
                    .filter(|&j| data[j] != NOISE)
                    .map(|j| {
                        let q = d.coords(j);
                        let d2: i64 = (0..3).map(|a| (p[a] as i64 - q[a] as i64).pow(2)).sum();
                        (d2, data[j])
                    })
                    .min()
                    .unwrap()
                    .1;
                assert_eq!(got.data()[i], want);
            }
        }
    }
}
