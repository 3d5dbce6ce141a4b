use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

/// NGSIM tables store positions in feet; everything downstream is metric.
pub const FEET_TO_METERS: f64 = 0.3048;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Coordinate unit of a dataset. NGSIM converts to meters at load time;
/// image-space datasets stay in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Meters,
    Pixels,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Meters => write!(f, "meters"),
            Unit::Pixels => write!(f, "pixels"),
        }
    }
}

impl std::str::FromStr for Unit {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "meters" => Ok(Unit::Meters),
            "pixels" => Ok(Unit::Pixels),
            other => Err(DataError::Format(format!("unknown unit '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Ngsim,
    Chd,
    Canonical,
}

/// One observed position of one vehicle at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub vehicle_id: u64,
    pub frame: i64,
    pub x: f64,
    pub y: f64,
}

/// Points from one contiguous recording; `(vehicle_id, frame)` is unique
/// within a recording and points are sorted by that key.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: u64,
    pub points: Vec<TrackPoint>,
}

/// A set of recordings sharing one unit and (nominally) one frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTable {
    pub unit: Unit,
    pub recordings: Vec<Recording>,
}

impl TrackTable {
    pub fn total_points(&self) -> usize {
        self.recordings.iter().map(|r| r.points.len()).sum()
    }
}

/// Column-name overrides for the tabular adapters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ColumnMap {
    pub vehicle_id: String,
    pub frame: String,
    pub x: String,
    pub y: String,
}

pub const NGSIM_COLUMNS: &[&str] = &["Vehicle_ID", "Frame_ID", "Local_X", "Local_Y"];
pub const CHD_COLUMNS: &[&str] = &["track_id", "frame", "center_x", "center_y"];

impl ColumnMap {
    pub fn ngsim() -> Self {
        ColumnMap {
            vehicle_id: NGSIM_COLUMNS[0].into(),
            frame: NGSIM_COLUMNS[1].into(),
            x: NGSIM_COLUMNS[2].into(),
            y: NGSIM_COLUMNS[3].into(),
        }
    }

    pub fn chd() -> Self {
        ColumnMap {
            vehicle_id: CHD_COLUMNS[0].into(),
            frame: CHD_COLUMNS[1].into(),
            x: CHD_COLUMNS[2].into(),
            y: CHD_COLUMNS[3].into(),
        }
    }
}

/// Load a trajectory table.
///
/// * `ngsim`: headered CSV with configurable columns, feet converted to
///   meters, single recording.
/// * `chd`: headered CSV with configurable columns, pixel coordinates,
///   single recording.
/// * `canonical`: the crate's own interchange CSV
///   (`scene_id,vehicle_id,frame,x,y,unit`), one recording per scene_id.
///
/// Points come back sorted by `(vehicle_id, frame)` inside each recording;
/// duplicated `(vehicle_id, frame)` keys within a recording are a parse
/// error.
pub fn load_tracks(
    path: &Path,
    format: SourceFormat,
    columns: Option<&ColumnMap>,
) -> Result<TrackTable, DataError> {
    match format {
        SourceFormat::Canonical => load_canonical(path),
        SourceFormat::Ngsim => {
            let cols = columns.cloned().unwrap_or_else(ColumnMap::ngsim);
            let mut table = load_tabular(path, &cols, Unit::Meters)?;
            for rec in &mut table.recordings {
                for p in &mut rec.points {
                    p.x *= FEET_TO_METERS;
                    p.y *= FEET_TO_METERS;
                }
            }
            Ok(table)
        }
        SourceFormat::Chd => {
            let cols = columns.cloned().unwrap_or_else(ColumnMap::chd);
            load_tabular(path, &cols, Unit::Pixels)
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn finalize_recordings(
    path: &Path,
    by_scene: BTreeMap<u64, Vec<(usize, TrackPoint)>>,
) -> Result<Vec<Recording>, DataError> {
    let mut recordings = Vec::with_capacity(by_scene.len());
    for (id, mut pts) in by_scene {
        pts.sort_by_key(|(_, p)| (p.vehicle_id, p.frame));
        for w in pts.windows(2) {
            let (_, a) = w[0];
            let (line, b) = w[1];
            if a.vehicle_id == b.vehicle_id && a.frame == b.frame {
                return Err(parse_err(
                    path,
                    line,
                    format!(
                        "duplicate (vehicle_id, frame) = ({}, {}) in recording {}",
                        b.vehicle_id, b.frame, id
                    ),
                ));
            }
        }
        recordings.push(Recording {
            id,
            points: pts.into_iter().map(|(_, p)| p).collect(),
        });
    }
    Ok(recordings)
}

fn load_canonical(path: &Path) -> Result<TrackTable, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => DataError::Format(format!("{other:?}")),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Format(e.to_string()))?
        .clone();
    let want = ["scene_id", "vehicle_id", "frame", "x", "y", "unit"];
    let idx: Vec<usize> = want
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| DataError::Format(format!("canonical CSV missing column '{name}'")))
        })
        .collect::<Result<_, _>>()?;

    let mut unit: Option<Unit> = None;
    let mut by_scene: BTreeMap<u64, Vec<(usize, TrackPoint)>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2; // 1-based, after the header
        let record = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        let field = |k: usize| record.get(idx[k]).unwrap_or("");
        let scene_id: u64 = field(0)
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad scene_id '{}'", field(0))))?;
        let point = TrackPoint {
            vehicle_id: field(1)
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad vehicle_id '{}'", field(1))))?,
            frame: field(2)
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad frame '{}'", field(2))))?,
            x: field(3)
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad x '{}'", field(3))))?,
            y: field(4)
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad y '{}'", field(4))))?,
        };
        let row_unit: Unit = field(5).parse()?;
        match unit {
            None => unit = Some(row_unit),
            Some(u) if u != row_unit => {
                return Err(parse_err(path, line, "mixed units in one file"));
            }
            _ => {}
        }
        by_scene.entry(scene_id).or_default().push((line, point));
    }
    let unit = unit.ok_or_else(|| DataError::Format("empty canonical CSV".into()))?;
    Ok(TrackTable {
        unit,
        recordings: finalize_recordings(path, by_scene)?,
    })
}

fn load_tabular(path: &Path, cols: &ColumnMap, unit: Unit) -> Result<TrackTable, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => DataError::Format(format!("{other:?}")),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Format(e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Format(format!("missing column '{name}'")))
    };
    let (vi, fi, xi, yi) = (
        find(&cols.vehicle_id)?,
        find(&cols.frame)?,
        find(&cols.x)?,
        find(&cols.y)?,
    );

    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        let get = |idx: usize, name: &str| -> Result<&str, DataError> {
            record
                .get(idx)
                .ok_or_else(|| parse_err(path, line, format!("missing field '{name}'")))
        };
        points.push((
            line,
            TrackPoint {
                vehicle_id: get(vi, &cols.vehicle_id)?.parse().map_err(|_| {
                    parse_err(path, line, format!("bad vehicle id '{}'", record.get(vi).unwrap_or("")))
                })?,
                frame: get(fi, &cols.frame)?.parse().map_err(|_| {
                    parse_err(path, line, format!("bad frame '{}'", record.get(fi).unwrap_or("")))
                })?,
                x: get(xi, &cols.x)?.parse().map_err(|_| {
                    parse_err(path, line, format!("bad x '{}'", record.get(xi).unwrap_or("")))
                })?,
                y: get(yi, &cols.y)?.parse().map_err(|_| {
                    parse_err(path, line, format!("bad y '{}'", record.get(yi).unwrap_or("")))
                })?,
            },
        ));
    }
    let mut by_scene = BTreeMap::new();
    by_scene.insert(0u64, points);
    Ok(TrackTable {
        unit,
        recordings: finalize_recordings(path, by_scene)?,
    })
}

/// Write a [`TrackTable`] as canonical CSV. Loading the result back yields
/// identical points (floats are printed in shortest round-trip form).
pub fn save_canonical_csv(table: &TrackTable, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => DataError::Format(format!("{other:?}")),
    })?;
    writer
        .write_record(["scene_id", "vehicle_id", "frame", "x", "y", "unit"])
        .map_err(|e| DataError::Format(e.to_string()))?;
    let unit = table.unit.to_string();
    for rec in &table.recordings {
        for p in &rec.points {
            writer
                .write_record([
                    rec.id.to_string(),
                    p.vehicle_id.to_string(),
                    p.frame.to_string(),
                    format!("{}", p.x),
                    format!("{}", p.y),
                    unit.clone(),
                ])
                .map_err(|e| DataError::Format(e.to_string()))?;
        }
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}
