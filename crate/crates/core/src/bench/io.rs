//! File formats: measurement logs, map exports and per-insertion rows.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::graph::HyperParams;
use crate::occupancy::VoxelIndex;

/// One row of a measurement log: world position, time and reading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub value: f64,
}

pub fn write_measurement_log<W: Write>(rows: &[LogRow], w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_measurement_log<R: Read>(r: R) -> Result<Vec<LogRow>, BenchError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for rec in rd.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
    pub mean: f64,
    pub variance: f64,
}

impl MapRow {
    pub fn voxel(&self) -> VoxelIndex {
        VoxelIndex::new(self.ix, self.iy, self.iz)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapHeader {
    pub scenario: String,
    pub variant: String,
    pub dims: [usize; 3],
    pub resolution: f64,
    pub origin: [f64; 3],
    pub params: HyperParams,
    /// Simulated time of the export in seconds.
    pub timestamp: f64,
    pub nodes: usize,
}

/// Marginals of every node present in the graph, sorted by voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct MapExport {
    pub header: MapHeader,
    pub rows: Vec<MapRow>,
}

impl MapExport {
    /// Sidecar header path: `map.csv` → `map.header.toml`.
    pub fn header_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("header.toml")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), BenchError> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, csv_path: &Path) -> Result<(), BenchError> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        let header = toml::to_string(&self.header).map_err(|e| BenchError::Config(e.to_string()))?;
        std::fs::write(Self::header_path(csv_path), header)?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(Self::header_path(csv_path))?;
        let header: MapHeader = toml::from_str(&text).map_err(|e| BenchError::Config(e.to_string()))?;
        let mut rd = csv::Reader::from_path(csv_path)?;
        let rows = rd.deserialize().collect::<Result<Vec<MapRow>, _>>()?;
        Ok(Self { header, rows })
    }
}

/// Per-measurement insertion row as exported by `bench`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InsertionRow {
    pub t: f64,
    pub ix: i64,
    pub iy: i64,
    pub iz: i64,
    pub nodes_created: usize,
    pub edges_created: usize,
    pub messages_sent: u64,
    /// Simulated resolve time used for gating.
    pub resolve_s: f64,
    /// Measured wall-clock resolve time.
    pub resolve_time_ns: u64,
}

pub fn write_rows<W: Write, T: Serialize>(rows: &[T], w: W) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurement_log_round_trip() {
        let rows = vec![
            LogRow { t: 0.0, x: 1.5, y: 2.0, z: 0.25, value: 3.0 },
            LogRow { t: 0.5, x: 1.0, y: 2.0, z: 0.25, value: 0.0 },
        ];
        let mut buf = Vec::new();
        write_measurement_log(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x,y,z,value\n"));
        assert_eq!(read_measurement_log(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn map_export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        let map = MapExport {
            header: MapHeader {
                scenario: "s".into(),
                variant: "gabp-dynamic".into(),
                dims: [2, 2, 1],
                resolution: 0.5,
                origin: [0.0; 3],
                params: HyperParams::default(),
                timestamp: 12.0,
                nodes: 1,
            },
            rows: vec![MapRow { ix: 1, iy: 0, iz: 0, mean: 0.25, variance: 0.1 }],
        };
        map.save(&path).unwrap();
        assert!(dir.path().join("map.header.toml").exists());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ix,iy,iz,mean,variance\n"));
        assert_eq!(MapExport::load(&path).unwrap(), map);
    }
}
