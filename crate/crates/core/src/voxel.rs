//! Dense voxel volumes, window extraction/insertion and on-disk formats.
//!
//! Every volume in the crate uses the same linear order: x varies fastest,
//! then y, then z (`index = x + nx * (y + ny * z)`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label value marking voxels that belong to no grain.
pub const NOISE: u32 = u32::MAX;

/// Current on-disk schema version.
pub const SCHEMA_VERSION: u32 = 1;

const GVOX_MAGIC: &[u8; 8] = b"GVOX\x001\x00\x00";

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("invalid dimensions {0:?}")]
    InvalidDims([usize; 3]),
    #[error("window origin {origin:?} size {size:?} exceeds volume {dims:?}")]
    WindowOutOfBounds {
        origin: [usize; 3],
        size: [usize; 3],
        dims: [usize; 3],
    },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self, VoxelError> {
        let dims = Self { nx, ny, nz };
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VoxelError::InvalidDims(dims.as_array()));
        }
        nx.checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .and_then(|v| v.checked_mul(8))
            .ok_or(VoxelError::InvalidDims(dims.as_array()))?;
        Ok(dims)
    }

    pub fn cube(n: usize) -> Result<Self, VoxelError> {
        Self::new(n, n, n)
    }

    pub fn from_array(d: [usize; 3]) -> Result<Self, VoxelError> {
        Self::new(d[0], d[1], d[2])
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.nx;
        let rest = index / self.nx;
        [x, rest % self.ny, rest / self.ny]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        p.iter()
            .zip(self.as_array())
            .all(|(&c, n)| c >= 0 && (c as usize) < n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Kmc,
    Diffusion,
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub provenance: Provenance,
    pub seed: u64,
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_pitch: Option<f64>,
}

impl Default for VolumeMeta {
    fn default() -> Self {
        Self {
            provenance: Provenance::default(),
            seed: 0,
            schema_version: SCHEMA_VERSION,
            voxel_pitch: None,
        }
    }
}

/// Axis-aligned sub-box of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockWindow {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl BlockWindow {
    pub fn new(origin: [usize; 3], size: [usize; 3]) -> Self {
        Self { origin, size }
    }

    pub fn cube(origin: [usize; 3], side: usize) -> Self {
        Self::new(origin, [side; 3])
    }

    pub fn end(&self) -> [usize; 3] {
        [
            self.origin[0] + self.size[0],
            self.origin[1] + self.size[1],
            self.origin[2] + self.size[2],
        ]
    }

    pub fn fits(&self, dims: Dims) -> bool {
        let end = self.end();
        end[0] <= dims.nx && end[1] <= dims.ny && end[2] <= dims.nz
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.size[a])
    }

    /// Overlapping box of two windows, if any.
    pub fn intersect(&self, other: &BlockWindow) -> Option<BlockWindow> {
        let mut origin = [0; 3];
        let mut size = [0; 3];
        for a in 0..3 {
            let lo = self.origin[a].max(other.origin[a]);
            let hi = (self.origin[a] + self.size[a]).min(other.origin[a] + other.size[a]);
            if hi <= lo {
                return None;
            }
            origin[a] = lo;
            size[a] = hi - lo;
        }
        Some(BlockWindow { origin, size })
    }

    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }
}

/// A dense row-major voxel array.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    data: Vec<T>,
    pub meta: VolumeMeta,
}

/// Continuous model values.
pub type ScalarVolume = Volume<f32>;
/// Integer grain IDs, with [`NOISE`] for unassigned voxels.
pub type LabelVolume = Volume<u32>;
/// Binary voxel mask (0 or 1).
pub type MaskVolume = Volume<u8>;

impl<T: Copy> Volume<T> {
    pub fn filled(dims: Dims, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
            meta: VolumeMeta::default(),
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self, VoxelError> {
        if data.len() != dims.len() {
            return Err(VoxelError::Format(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims.as_array()
            )));
        }
        Ok(Self {
            dims,
            data,
            meta: VolumeMeta::default(),
        })
    }

    pub fn with_meta(mut self, meta: VolumeMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.dims.index(x, y, z);
        self.data[i] = value;
    }

    fn check_window(&self, window: &BlockWindow) -> Result<(), VoxelError> {
        if window.size.contains(&0) || !window.fits(self.dims) {
            return Err(VoxelError::WindowOutOfBounds {
                origin: window.origin,
                size: window.size,
                dims: self.dims.as_array(),
            });
        }
        Ok(())
    }

    /// Copies the voxels under `window` into a new volume.
    pub fn extract_window(&self, window: &BlockWindow) -> Result<Self, VoxelError> {
        self.check_window(window)?;
        let [sx, sy, sz] = window.size;
        let [ox, oy, oz] = window.origin;
        let mut data = Vec::with_capacity(sx * sy * sz);
        for z in oz..oz + sz {
            for y in oy..oy + sy {
                let start = self.dims.index(ox, y, z);
                data.extend_from_slice(&self.data[start..start + sx]);
            }
        }
        Ok(Self {
            dims: Dims::from_array(window.size)?,
            data,
            meta: self.meta.clone(),
        })
    }

    /// Overwrites the voxels under `window` with `patch`.
    pub fn insert_window(&mut self, window: &BlockWindow, patch: &Self) -> Result<(), VoxelError> {
        if patch.dims.as_array() != window.size {
            return Err(VoxelError::ShapeMismatch {
                expected: window.size,
                actual: patch.dims.as_array(),
            });
        }
        self.check_window(window)?;
        let [sx, sy, sz] = window.size;
        let [ox, oy, oz] = window.origin;
        for z in 0..sz {
            for y in 0..sy {
                let dst = self.dims.index(ox, oy + y, oz + z);
                let src = patch.dims.index(0, y, z);
                self.data[dst..dst + sx].copy_from_slice(&patch.data[src..src + sx]);
            }
        }
        Ok(())
    }
}

/// Creates a scalar volume filled with `fill_value`.
pub fn create_volume(dims: [usize; 3], fill_value: f32) -> Result<ScalarVolume, VoxelError> {
    Ok(ScalarVolume::filled(Dims::from_array(dims)?, fill_value))
}

impl ScalarVolume {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl LabelVolume {
    pub fn noise_count(&self) -> usize {
        self.data.iter().filter(|&&l| l == NOISE).count()
    }

    /// Renumbers non-noise labels to `0..K` in order of first appearance in
    /// scan order. Returns the number of distinct labels `K`.
    pub fn canonicalize(&mut self) -> usize {
        let mut map = std::collections::HashMap::new();
        for l in self.data.iter_mut() {
            if *l == NOISE {
                continue;
            }
            let next = map.len() as u32;
            *l = *map.entry(*l).or_insert(next);
        }
        map.len()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut seen: Vec<u32> = self.data.iter().copied().filter(|&l| l != NOISE).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Relabels so each face-connected region of equal label gets its own ID,
    /// numbered in scan order. Noise stays noise.
    pub fn connected_components(&self) -> LabelVolume {
        let dims = self.dims;
        let mut out = LabelVolume::filled(dims, NOISE).with_meta(self.meta.clone());
        let mut next = 0u32;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            let label = self.data[start];
            if label == NOISE || out.data[start] != NOISE {
                continue;
            }
            out.data[start] = next;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let [x, y, z] = dims.coords(i);
                let mut visit = |j: usize| {
                    if out.data[j] == NOISE && self.data[j] == label {
                        out.data[j] = next;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < dims.nx {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - dims.nx);
                }
                if y + 1 < dims.ny {
                    visit(i + dims.nx);
                }
                if z > 0 {
                    visit(i - dims.nx * dims.ny);
                }
                if z + 1 < dims.nz {
                    visit(i + dims.nx * dims.ny);
                }
            }
            next += 1;
        }
        out
    }
}

/// Element types storable in a GVOX file.
pub trait GvoxElement: Copy + Sized {
    const DTYPE: u32;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const SIZE: usize;
}

impl GvoxElement for f32 {
    const DTYPE: u32 = 0;
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl GvoxElement for u32 {
    const DTYPE: u32 = 1;
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        u32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl GvoxElement for u8 {
    const DTYPE: u32 = 2;
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// A volume of any storable element type, as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
    Mask(MaskVolume),
}

impl AnyVolume {
    pub fn dims(&self) -> Dims {
        match self {
            AnyVolume::Scalar(v) => v.dims(),
            AnyVolume::Label(v) => v.dims(),
            AnyVolume::Mask(v) => v.dims(),
        }
    }
}

/// Serializes a volume into the GVOX container:
///
/// ```text
/// magic      8 bytes  "GVOX" 0x00 "1" 0x00 0x00
/// dtype      u32      0 = f32, 1 = u32, 2 = u8
/// dims       3 x u64
/// meta_len   u64
/// meta       meta_len bytes of JSON
/// payload    dims product elements, little-endian
/// ```
pub fn encode_gvox<T: GvoxElement>(vol: &Volume<T>) -> Vec<u8> {
    let meta = serde_json::to_vec(&vol.meta).expect("volume meta serializes");
    let mut out = Vec::with_capacity(8 + 4 + 24 + 8 + meta.len() + vol.len() * T::SIZE);
    out.extend_from_slice(GVOX_MAGIC);
    out.extend_from_slice(&T::DTYPE.to_le_bytes());
    for d in vol.dims.as_array() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for &v in &vol.data {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8], VoxelError> {
    if bytes.len() < n {
        return Err(VoxelError::Format(format!("truncated {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn decode_payload<T: GvoxElement>(
    dims: Dims,
    meta: VolumeMeta,
    payload: &[u8],
) -> Result<Volume<T>, VoxelError> {
    let expected = dims.len() * T::SIZE;
    if payload.len() != expected {
        return Err(VoxelError::Format(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let data = payload.chunks_exact(T::SIZE).map(T::read_le).collect();
    Ok(Volume { dims, data, meta })
}

pub fn decode_gvox(mut bytes: &[u8]) -> Result<AnyVolume, VoxelError> {
    let magic = take(&mut bytes, 8, "magic")?;
    if magic != GVOX_MAGIC {
        return Err(VoxelError::Format("bad magic".into()));
    }
    let dtype = u32::from_le_bytes(take(&mut bytes, 4, "header")?.try_into().unwrap());
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let raw = u64::from_le_bytes(take(&mut bytes, 8, "header")?.try_into().unwrap());
        *d = usize::try_from(raw).map_err(|_| VoxelError::Format("dims overflow".into()))?;
    }
    let dims = Dims::from_array(dims).map_err(|e| VoxelError::Format(e.to_string()))?;
    let meta_len = u64::from_le_bytes(take(&mut bytes, 8, "header")?.try_into().unwrap());
    let meta_len =
        usize::try_from(meta_len).map_err(|_| VoxelError::Format("meta length overflow".into()))?;
    let meta: VolumeMeta = serde_json::from_slice(take(&mut bytes, meta_len, "meta")?)
        .map_err(|e| VoxelError::Format(format!("meta: {e}")))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(VoxelError::Format(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    match dtype {
        0 => decode_payload(dims, meta, bytes).map(AnyVolume::Scalar),
        1 => decode_payload(dims, meta, bytes).map(AnyVolume::Label),
        2 => decode_payload(dims, meta, bytes).map(AnyVolume::Mask),
        other => Err(VoxelError::Format(format!("unknown dtype {other}"))),
    }
}

pub fn write_gvox<T: GvoxElement>(vol: &Volume<T>, path: impl AsRef<Path>) -> Result<(), VoxelError> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_gvox(vol))?;
    f.flush()?;
    Ok(())
}

pub fn read_gvox(path: impl AsRef<Path>) -> Result<AnyVolume, VoxelError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_gvox(&bytes)
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume, VoxelError> {
    match read_gvox(path)? {
        AnyVolume::Scalar(v) => Ok(v),
        _ => Err(VoxelError::Format("expected a scalar (f32) volume".into())),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume, VoxelError> {
    match read_gvox(path)? {
        AnyVolume::Label(v) => Ok(v),
        _ => Err(VoxelError::Format("expected a label (u32) volume".into())),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume, VoxelError> {
    match read_gvox(path)? {
        AnyVolume::Mask(v) => Ok(v),
        _ => Err(VoxelError::Format("expected a mask (u8) volume".into())),
    }
}

/// Writes labels as an ASCII legacy VTK `STRUCTURED_POINTS` dataset.
/// Noise voxels are written as -1.
pub fn write_vtk_legacy(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<(), VoxelError> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(VoxelError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "empty output path",
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    write_vtk_to(labels, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn write_vtk_to(labels: &LabelVolume, out: &mut impl Write) -> std::io::Result<()> {
    let Dims { nx, ny, nz } = labels.dims();
    let pitch = labels.meta.voxel_pitch.unwrap_or(1.0);
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "grain labels")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET STRUCTURED_POINTS")?;
    writeln!(out, "DIMENSIONS {nx} {ny} {nz}")?;
    writeln!(out, "ORIGIN 0 0 0")?;
    writeln!(out, "SPACING {pitch} {pitch} {pitch}")?;
    writeln!(out, "POINT_DATA {}", labels.len())?;
    writeln!(out, "SCALARS grain_id int 1")?;
    writeln!(out, "LOOKUP_TABLE default")?;
    for row in labels.data().chunks(nx) {
        let line: Vec<String> = row
            .iter()
            .map(|&l| if l == NOISE { "-1".to_string() } else { l.to_string() })
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}
