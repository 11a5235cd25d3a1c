//! Binary voxel occupancy and the edge-blocking rule that conditions the
//! factor graph.
//!
//! A [`VoxelGrid`] stores one bit per voxel. Voxel `(ix, iy, iz)` lives at bit
//! `ix + iy*nx + iz*nx*ny`, little-endian within each byte, which is also the
//! on-disk layout of the `OCCGRID v1` format.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Integer lattice coordinates of a voxel. Resolution lives on the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
}

impl VoxelIndex {
    pub const fn new(ix: i64, iy: i64, iz: i64) -> Self {
        Self { ix, iy, iz }
    }

    /// True when the two voxels share a face.
    pub fn is_adjacent(&self, other: &VoxelIndex) -> bool {
        let d = (self.ix - other.ix).abs() + (self.iy - other.iy).abs() + (self.iz - other.iz).abs();
        d == 1
    }

    pub fn offset(&self, d: (i64, i64, i64)) -> VoxelIndex {
        VoxelIndex::new(self.ix + d.0, self.iy + d.1, self.iz + d.2)
    }
}

impl fmt::Display for VoxelIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.ix, self.iy, self.iz)
    }
}

/// Lattice neighbourhood used when building the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    /// Full 3D face adjacency, up to six neighbours.
    #[default]
    Six,
    /// Planar mode: only the x/y faces, up to four neighbours.
    Four,
}

const OFFSETS_6: [(i64, i64, i64); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

impl Connectivity {
    pub fn offsets(self) -> &'static [(i64, i64, i64)] {
        match self {
            Connectivity::Six => &OFFSETS_6,
            Connectivity::Four => &OFFSETS_6[..4],
        }
    }

    pub fn degree(self) -> usize {
        self.offsets().len()
    }
}

#[derive(Debug, Error)]
pub enum OccupancyError {
    #[error("voxel {0} is outside the grid")]
    OutOfBounds(VoxelIndex),
    #[error("voxels {0} and {1} are not lattice-adjacent")]
    NotAdjacent(VoxelIndex, VoxelIndex),
    #[error("point ({x}, {y}, {z}) lies outside the grid extent on the {axis} axis")]
    OutsideExtent { x: f64, y: f64, z: f64, axis: char },
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("malformed occupancy file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box of voxels, inclusive on both corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub min: [i64; 3],
    pub max: [i64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    resolution: f64,
    origin: [f64; 3],
    bits: Vec<u8>,
}

impl VoxelGrid {
    /// An all-free grid.
    pub fn new(dims: [usize; 3], resolution: f64, origin: [f64; 3]) -> Result<Self, OccupancyError> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(OccupancyError::Invalid(format!("resolution must be positive, got {resolution}")));
        }
        if dims.contains(&0) {
            return Err(OccupancyError::Invalid(format!("dims must be non-zero, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            dims,
            resolution,
            origin,
            bits: vec![0; n.div_ceil(8)],
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, v: VoxelIndex) -> bool {
        v.ix >= 0
            && v.iy >= 0
            && v.iz >= 0
            && (v.ix as usize) < self.dims[0]
            && (v.iy as usize) < self.dims[1]
            && (v.iz as usize) < self.dims[2]
    }

    /// Linear bit index of an in-bounds voxel.
    pub fn linear(&self, v: VoxelIndex) -> Option<usize> {
        self.contains(v)
            .then(|| v.ix as usize + v.iy as usize * self.dims[0] + v.iz as usize * self.dims[0] * self.dims[1])
    }

    pub fn voxel_at(&self, linear: usize) -> VoxelIndex {
        let nx = self.dims[0];
        let nxy = nx * self.dims[1];
        VoxelIndex::new(
            (linear % nx) as i64,
            ((linear % nxy) / nx) as i64,
            (linear / nxy) as i64,
        )
    }

    pub fn is_occupied(&self, v: VoxelIndex) -> Result<bool, OccupancyError> {
        let i = self.linear(v).ok_or(OccupancyError::OutOfBounds(v))?;
        Ok(self.bits[i / 8] >> (i % 8) & 1 == 1)
    }

    /// Occupancy query that treats out-of-bounds voxels as walls.
    pub fn is_free(&self, v: VoxelIndex) -> bool {
        matches!(self.is_occupied(v), Ok(false))
    }

    pub fn set_occupied(&mut self, v: VoxelIndex, occupied: bool) -> Result<(), OccupancyError> {
        let i = self.linear(v).ok_or(OccupancyError::OutOfBounds(v))?;
        if occupied {
            self.bits[i / 8] |= 1 << (i % 8);
        } else {
            self.bits[i / 8] &= !(1 << (i % 8));
        }
        Ok(())
    }

    /// Marks every in-bounds voxel of the box occupied.
    pub fn fill_box(&mut self, b: &VoxelBox) {
        for iz in b.min[2].max(0)..=b.max[2].min(self.dims[2] as i64 - 1) {
            for iy in b.min[1].max(0)..=b.max[1].min(self.dims[1] as i64 - 1) {
                for ix in b.min[0].max(0)..=b.max[0].min(self.dims[0] as i64 - 1) {
                    let _ = self.set_occupied(VoxelIndex::new(ix, iy, iz), true);
                }
            }
        }
    }

    pub fn occupied_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.bits[i / 8] >> (i % 8) & 1 == 1).count()
    }

    pub fn free_voxels(&self) -> impl Iterator<Item = VoxelIndex> + '_ {
        (0..self.len())
            .filter(|&i| self.bits[i / 8] >> (i % 8) & 1 == 0)
            .map(|i| self.voxel_at(i))
    }

    /// Edge-blocking rule: a face between two adjacent voxels is blocked iff
    /// either voxel is occupied.
    pub fn is_blocked(&self, a: VoxelIndex, b: VoxelIndex) -> Result<bool, OccupancyError> {
        if !a.is_adjacent(&b) {
            return Err(OccupancyError::NotAdjacent(a, b));
        }
        Ok(self.is_occupied(a)? || self.is_occupied(b)?)
    }

    /// World point to voxel, `floor((p - origin) / resolution)` per axis.
    /// The lower face of each voxel is inclusive, the upper face belongs to the
    /// next voxel.
    pub fn voxel_of(&self, p: [f64; 3]) -> Result<VoxelIndex, OccupancyError> {
        let mut idx = [0i64; 3];
        for (axis, name) in ['x', 'y', 'z'].into_iter().enumerate() {
            let f = ((p[axis] - self.origin[axis]) / self.resolution).floor();
            if !f.is_finite() || f < 0.0 || f >= self.dims[axis] as f64 {
                return Err(OccupancyError::OutsideExtent {
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    axis: name,
                });
            }
            idx[axis] = f as i64;
        }
        Ok(VoxelIndex::new(idx[0], idx[1], idx[2]))
    }

    /// World coordinates of the voxel centre.
    pub fn world_of(&self, v: VoxelIndex) -> [f64; 3] {
        let r = self.resolution;
        [
            self.origin[0] + (v.ix as f64 + 0.5) * r,
            self.origin[1] + (v.iy as f64 + 0.5) * r,
            self.origin[2] + (v.iz as f64 + 0.5) * r,
        ]
    }

    /// Extent as `[min, max]` corners in world coordinates.
    pub fn extent(&self) -> ([f64; 3], [f64; 3]) {
        let max = [
            self.origin[0] + self.dims[0] as f64 * self.resolution,
            self.origin[1] + self.dims[1] as f64 * self.resolution,
            self.origin[2] + self.dims[2] as f64 * self.resolution,
        ];
        (self.origin, max)
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        self.voxel_of(p).is_ok()
    }

    /// Free lattice neighbours of `v` under the given connectivity.
    pub fn free_neighbors(&self, v: VoxelIndex, conn: Connectivity) -> impl Iterator<Item = VoxelIndex> + '_ {
        conn.offsets().iter().map(move |&d| v.offset(d)).filter(|n| self.is_free(*n))
    }

    /// Writes the `OCCGRID v1` format: four ASCII header lines followed by the
    /// raw bit payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), OccupancyError> {
        writeln!(w, "OCCGRID v1")?;
        writeln!(w, "dims {} {} {}", self.dims[0], self.dims[1], self.dims[2])?;
        writeln!(w, "resolution {}", self.resolution)?;
        writeln!(w, "origin {} {} {}", self.origin[0], self.origin[1], self.origin[2])?;
        w.write_all(&self.bits)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, OccupancyError> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String, OccupancyError> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(OccupancyError::Format("unexpected end of header".into()));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        };
        let magic = next_line(&mut r)?;
        if magic != "OCCGRID v1" {
            return Err(OccupancyError::Format(format!("bad magic line {magic:?}")));
        }
        let dims_line = next_line(&mut r)?;
        let dims: Vec<usize> = parse_fields(&dims_line, "dims", 3)?;
        let res_line = next_line(&mut r)?;
        let res: Vec<f64> = parse_fields(&res_line, "resolution", 1)?;
        let origin_line = next_line(&mut r)?;
        let origin: Vec<f64> = parse_fields(&origin_line, "origin", 3)?;

        let mut grid = VoxelGrid::new([dims[0], dims[1], dims[2]], res[0], [origin[0], origin[1], origin[2]])?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != grid.bits.len() {
            return Err(OccupancyError::Format(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                grid.bits.len()
            )));
        }
        grid.bits = payload;
        Ok(grid)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), OccupancyError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OccupancyError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn parse_fields<T: std::str::FromStr>(line: &str, key: &str, n: usize) -> Result<Vec<T>, OccupancyError> {
    let mut it = line.split_whitespace();
    if it.next() != Some(key) {
        return Err(OccupancyError::Format(format!("expected `{key}` line, got {line:?}")));
    }
    let vals: Vec<T> = it
        .map(|s| s.parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| OccupancyError::Format(format!("unparsable `{key}` line {line:?}")))?;
    if vals.len() != n {
        return Err(OccupancyError::Format(format!("`{key}` needs {n} values, got {line:?}")));
    }
    Ok(vals)
}
