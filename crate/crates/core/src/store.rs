//! Append-only telemetry store.
//!
//! On disk every house owns a directory of newline-delimited JSON segments,
//! one per UTC day: `<root>/<house>/<YYYY-MM-DD>.ndjson`. The in-memory
//! index is rebuilt from the segments on open; a torn final line left by a
//! crash is truncated away.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::gateway::TelemetryPoint;

pub const DEFAULT_BUCKET_S: i64 = 1800;
pub const CSV_HEADER: [&str; 8] = [
    "house",
    "ts",
    "seq",
    "east_wh",
    "eait_wh",
    "sinsts_va",
    "sinsti_va",
    "tariff",
];

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("point at {ts} is older than the last accepted point at {last} for house {house}")]
    OutOfOrder {
        house: String,
        ts: Timestamp,
        last: Timestamp,
    },
    #[error("energy register decreased for house {house} at {ts}")]
    MonotonicityViolation { house: String, ts: Timestamp },
    #[error("unknown house {0}")]
    UnknownHouse(String),
    #[error("invalid house id {0:?}")]
    InvalidHouse(String),
    #[error("invalid window [{0}, {1})")]
    InvalidWindow(Timestamp, Timestamp),
    #[error("bucket width {0} s does not divide 3600")]
    InvalidBucket(i64),
    #[error("csv line {line}: {reason}")]
    CsvSchemaError { line: u64, reason: String },
    #[error("corrupt segment {path} line {line}")]
    Corrupt { path: PathBuf, line: usize },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// One downsampled interval `[start, start + width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub start: Timestamp,
    pub consumed_wh: u64,
    pub injected_wh: u64,
    pub mean_apparent_va: f64,
    pub sample_count: u64,
}

pub fn validate_house_id(house: &str) -> Result<(), StoreError> {
    let ok = !house.is_empty()
        && house.len() <= 64
        && house
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidHouse(house.to_string()))
    }
}

pub fn validate_bucket(bucket_s: i64) -> Result<(), StoreError> {
    if bucket_s > 0 && 3600 % bucket_s == 0 {
        Ok(())
    } else {
        Err(StoreError::InvalidBucket(bucket_s))
    }
}

fn segment_date(ts: Timestamp) -> NaiveDate {
    DateTime::from_timestamp(ts, 0).map_or(NaiveDate::MIN, |d| d.date_naive())
}

/// Checks `p` against the series tail. Returns true when `p` replaces the
/// last point (equal timestamp).
fn admit(points: &[TelemetryPoint], p: &TelemetryPoint) -> Result<bool, StoreError> {
    let Some(last) = points.last() else {
        return Ok(false);
    };
    if p.ts < last.ts {
        return Err(StoreError::OutOfOrder {
            house: p.house_id.clone(),
            ts: p.ts,
            last: last.ts,
        });
    }
    let replaces = p.ts == last.ts;
    let prev = if replaces {
        points.len().checked_sub(2).map(|i| &points[i])
    } else {
        Some(last)
    };
    if let Some(prev) = prev {
        if p.east_wh < prev.east_wh || p.eait_wh < prev.eait_wh {
            return Err(StoreError::MonotonicityViolation {
                house: p.house_id.clone(),
                ts: p.ts,
            });
        }
    }
    Ok(replaces)
}

fn insert(points: &mut Vec<TelemetryPoint>, p: TelemetryPoint, replaces: bool) {
    if replaces {
        *points.last_mut().expect("replace implies a tail") = p;
    } else {
        points.push(p);
    }
}

struct Series {
    points: Vec<TelemetryPoint>,
    segment: Option<(NaiveDate, File)>,
}

/// Options controlling write durability.
#[derive(Debug, Clone, Copy, Default)]
pub struct StoreOptions {
    /// `fsync` each appended line. Without it an append survives a process
    /// crash but not a power loss.
    pub fsync: bool,
}

pub struct Store {
    root: PathBuf,
    options: StoreOptions,
    series: RwLock<HashMap<String, Arc<Mutex<Series>>>>,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: impl AsRef<Path>, options: StoreOptions) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut series = HashMap::new();
        for entry in fs::read_dir(&root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let Some(house) = entry.file_name().to_str().map(str::to_string) else {
                continue;
            };
            if validate_house_id(&house).is_err() {
                continue;
            }
            let points = load_house(&entry.path())?;
            series.insert(house, Arc::new(Mutex::new(Series { points, segment: None })));
        }
        Ok(Store {
            root,
            options,
            series: RwLock::new(series),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn get(&self, house: &str) -> Option<Arc<Mutex<Series>>> {
        self.series.read().expect("store index poisoned").get(house).cloned()
    }

    fn get_or_create(&self, house: &str) -> Result<Arc<Mutex<Series>>, StoreError> {
        if let Some(s) = self.get(house) {
            return Ok(s);
        }
        validate_house_id(house)?;
        fs::create_dir_all(self.root.join(house))?;
        let mut map = self.series.write().expect("store index poisoned");
        Ok(map
            .entry(house.to_string())
            .or_insert_with(|| {
                Arc::new(Mutex::new(Series {
                    points: Vec::new(),
                    segment: None,
                }))
            })
            .clone())
    }

    /// Writes the point to its segment before it becomes visible to
    /// queries. An equal timestamp replaces the previous point.
    pub fn append(&self, p: TelemetryPoint) -> Result<(), StoreError> {
        let series = self.get_or_create(&p.house_id)?;
        let mut s = series.lock().expect("series poisoned");
        let replaces = admit(&s.points, &p)?;
        let date = segment_date(p.ts);
        if s.segment.as_ref().is_none_or(|(d, _)| *d != date) {
            let path = self.root.join(&p.house_id).join(format!("{date}.ndjson"));
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            s.segment = Some((date, file));
        }
        let mut line = serde_json::to_vec(&p).expect("telemetry serializes");
        line.push(b'\n');
        let (_, file) = s.segment.as_mut().expect("segment opened above");
        file.write_all(&line)?;
        if self.options.fsync {
            file.sync_data()?;
        }
        insert(&mut s.points, p, replaces);
        Ok(())
    }

    pub fn houses(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .series
            .read()
            .expect("store index poisoned")
            .keys()
            .cloned()
            .collect();
        v.sort();
        v
    }

    pub fn len(&self, house: &str) -> usize {
        self.get(house)
            .map_or(0, |s| s.lock().expect("series poisoned").points.len())
    }

    pub fn is_empty(&self) -> bool {
        self.houses().iter().all(|h| self.len(h) == 0)
    }

    pub fn last(&self, house: &str) -> Result<Option<TelemetryPoint>, StoreError> {
        let s = self
            .get(house)
            .ok_or_else(|| StoreError::UnknownHouse(house.to_string()))?;
        let s = s.lock().expect("series poisoned");
        Ok(s.points.last().cloned())
    }

    /// Last `n` points of a series, oldest first.
    pub fn tail(&self, house: &str, n: usize) -> Result<Vec<TelemetryPoint>, StoreError> {
        let s = self
            .get(house)
            .ok_or_else(|| StoreError::UnknownHouse(house.to_string()))?;
        let s = s.lock().expect("series poisoned");
        Ok(s.points[s.points.len().saturating_sub(n)..].to_vec())
    }

    /// Points with `t0 <= ts < t1`, in order.
    pub fn query(&self, house: &str, t0: Timestamp, t1: Timestamp) -> Result<Vec<TelemetryPoint>, StoreError> {
        if t0 >= t1 {
            return Err(StoreError::InvalidWindow(t0, t1));
        }
        let s = self
            .get(house)
            .ok_or_else(|| StoreError::UnknownHouse(house.to_string()))?;
        let s = s.lock().expect("series poisoned");
        let lo = s.points.partition_point(|p| p.ts < t0);
        let hi = s.points.partition_point(|p| p.ts < t1);
        Ok(s.points[lo..hi].to_vec())
    }

    pub fn query_all(&self, house: &str) -> Result<Vec<TelemetryPoint>, StoreError> {
        let s = self
            .get(house)
            .ok_or_else(|| StoreError::UnknownHouse(house.to_string()))?;
        let s = s.lock().expect("series poisoned");
        Ok(s.points.clone())
    }

    /// Register values (consumed, injected) in effect at `t`; see
    /// [`downsample_points`] for the boundary rule.
    pub fn registers_at(&self, house: &str, t: Timestamp) -> Result<Option<(u64, u64)>, StoreError> {
        let s = self
            .get(house)
            .ok_or_else(|| StoreError::UnknownHouse(house.to_string()))?;
        let s = s.lock().expect("series poisoned");
        Ok((!s.points.is_empty()).then(|| registers_at(&s.points, t)))
    }

    pub fn first(&self, house: &str) -> Result<Option<TelemetryPoint>, StoreError> {
        let s = self
            .get(house)
            .ok_or_else(|| StoreError::UnknownHouse(house.to_string()))?;
        let s = s.lock().expect("series poisoned");
        Ok(s.points.first().cloned())
    }

    /// Buckets covering `[t0, t1)` widened to bucket boundaries.
    pub fn downsample(
        &self,
        house: &str,
        t0: Timestamp,
        t1: Timestamp,
        bucket_s: i64,
    ) -> Result<Vec<Bucket>, StoreError> {
        if t0 >= t1 {
            return Err(StoreError::InvalidWindow(t0, t1));
        }
        validate_bucket(bucket_s)?;
        let s = self
            .get(house)
            .ok_or_else(|| StoreError::UnknownHouse(house.to_string()))?;
        let s = s.lock().expect("series poisoned");
        Ok(downsample_points(&s.points, t0, t1, bucket_s))
    }

    /// CSV of one house or of every house (sorted by house, then time).
    pub fn export_csv(&self, house: Option<&str>, t0: Timestamp, t1: Timestamp) -> Result<Vec<u8>, StoreError> {
        let houses = match house {
            Some(h) => {
                self.get(h).ok_or_else(|| StoreError::UnknownHouse(h.to_string()))?;
                vec![h.to_string()]
            }
            None => self.houses(),
        };
        let mut points = Vec::new();
        for h in houses {
            points.extend(self.query(&h, t0, t1)?);
        }
        points_to_csv(&points)
    }

    /// Appends every row; returns the number of rows imported.
    pub fn import_csv(&self, bytes: &[u8]) -> Result<usize, StoreError> {
        let points = points_from_csv(bytes)?;
        let n = points.len();
        for p in points {
            self.append(p)?;
        }
        Ok(n)
    }
}

fn load_house(dir: &Path) -> Result<Vec<TelemetryPoint>, StoreError> {
    let mut segments: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ndjson") {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                segments.insert(name.to_string(), path);
            }
        }
    }
    let mut points = Vec::new();
    for path in segments.values() {
        let mut reader = BufReader::new(File::open(path)?);
        let mut good_len = 0u64;
        let mut buf = Vec::new();
        let mut line_no = 0;
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                break;
            }
            line_no += 1;
            let complete = buf.last() == Some(&b'\n');
            let parsed = serde_json::from_slice::<TelemetryPoint>(&buf);
            match parsed {
                Ok(p) if complete => {
                    let replaces = admit(&points, &p).map_err(|_| StoreError::Corrupt {
                        path: path.clone(),
                        line: line_no,
                    })?;
                    insert(&mut points, p, replaces);
                    good_len += n as u64;
                }
                _ => {
                    let at_end = reader.fill_buf()?.is_empty();
                    if !at_end {
                        return Err(StoreError::Corrupt {
                            path: path.clone(),
                            line: line_no,
                        });
                    }
                    OpenOptions::new().write(true).open(path)?.set_len(good_len)?;
                    break;
                }
            }
        }
    }
    Ok(points)
}

/// Register values (consumed, injected) in effect at `x`: those of the last
/// point with `ts <= x`, or of the first point when none precedes `x`.
fn registers_at(points: &[TelemetryPoint], x: Timestamp) -> (u64, u64) {
    let i = points.partition_point(|p| p.ts <= x);
    let p = if i == 0 { &points[0] } else { &points[i - 1] };
    (p.east_wh, p.eait_wh)
}

/// Pure form of [`Store::downsample`] over an ordered series.
pub fn downsample_points(points: &[TelemetryPoint], t0: Timestamp, t1: Timestamp, bucket_s: i64) -> Vec<Bucket> {
    let start = t0.div_euclid(bucket_s) * bucket_s;
    let end = (t1 + bucket_s - 1).div_euclid(bucket_s) * bucket_s;
    let mut out = Vec::with_capacity(((end - start) / bucket_s) as usize);
    let mut b = start;
    while b < end {
        let (consumed_wh, injected_wh, mean, count) = if points.is_empty() {
            (0, 0, 0.0, 0)
        } else {
            let (c0, i0) = registers_at(points, b);
            let (c1, i1) = registers_at(points, b + bucket_s);
            let lo = points.partition_point(|p| p.ts < b);
            let hi = points.partition_point(|p| p.ts < b + bucket_s);
            let inside = &points[lo..hi];
            let mean = if inside.is_empty() {
                0.0
            } else {
                inside.iter().map(|p| p.sinsts_va as f64).sum::<f64>() / inside.len() as f64
            };
            (c1 - c0, i1 - i0, mean, inside.len() as u64)
        };
        out.push(Bucket {
            start: b,
            consumed_wh,
            injected_wh,
            mean_apparent_va: mean,
            sample_count: count,
        });
        b += bucket_s;
    }
    out
}

pub fn points_to_csv(points: &[TelemetryPoint]) -> Result<Vec<u8>, StoreError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let io_err = |e: csv::Error| StoreError::Io(io::Error::other(e));
    w.write_record(CSV_HEADER).map_err(io_err)?;
    for p in points {
        w.write_record([
            p.house_id.as_str(),
            &p.ts.to_string(),
            &p.seq.to_string(),
            &p.east_wh.to_string(),
            &p.eait_wh.to_string(),
            &p.sinsts_va.to_string(),
            &p.sinsti_va.to_string(),
            &p.tariff,
        ])
        .map_err(io_err)?;
    }
    w.into_inner()
        .map_err(|e| StoreError::Io(io::Error::other(e.to_string())))
}

pub fn points_from_csv(bytes: &[u8]) -> Result<Vec<TelemetryPoint>, StoreError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut out = Vec::new();
    let mut header_seen = false;
    for rec in r.records() {
        let rec = rec.map_err(|e| StoreError::CsvSchemaError {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let schema = |reason: String| StoreError::CsvSchemaError { line, reason };
        if !header_seen {
            if rec.iter().ne(CSV_HEADER) {
                return Err(schema(format!("expected header {}", CSV_HEADER.join(","))));
            }
            header_seen = true;
            continue;
        }
        if rec.len() != CSV_HEADER.len() {
            return Err(schema(format!(
                "expected {} columns, found {}",
                CSV_HEADER.len(),
                rec.len()
            )));
        }
        fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T, String> {
            rec[i]
                .parse()
                .map_err(|_| format!("column {} is not a number: {:?}", CSV_HEADER[i], &rec[i]))
        }
        let parse = || -> Result<TelemetryPoint, String> {
            validate_house_id(&rec[0]).map_err(|e| e.to_string())?;
            Ok(TelemetryPoint {
                house_id: rec[0].to_string(),
                ts: num(&rec, 1)?,
                seq: num(&rec, 2)?,
                east_wh: num(&rec, 3)?,
                eait_wh: num(&rec, 4)?,
                sinsts_va: num(&rec, 5)?,
                sinsti_va: num(&rec, 6)?,
                tariff: rec[7].to_string(),
            })
        };
        out.push(parse().map_err(schema)?);
    }
    if !header_seen {
        return Err(StoreError::CsvSchemaError {
            line: 1,
            reason: "missing header".into(),
        });
    }
    Ok(out)
}

/// Groups points by house, preserving order.
pub fn group_by_house(points: Vec<TelemetryPoint>) -> BTreeMap<String, Vec<TelemetryPoint>> {
    let mut m: BTreeMap<String, Vec<TelemetryPoint>> = BTreeMap::new();
    for p in points {
        m.entry(p.house_id.clone()).or_default().push(p);
    }
    m
}
