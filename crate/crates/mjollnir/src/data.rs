//! Gridded dataset container and pipeline: the MGRID binary format,
//! per-channel z-score statistics over the training split, year-based
//! splits, and batch assembly.
//!
//! MGRID layout: a `u32` little-endian header length, a JSON header
//! (magic, grid spec, declared dims, channel names/units, date list), then
//! one fixed-size block per day in date order. Each block is raw
//! little-endian `f32`: predictor channels, target plane, mask plane.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

pub const MGRID_MAGIC: &str = "MGRID1";

/// Regular lat/lon grid with cell-center convention; latitude index 0 is
/// the southernmost row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
    pub resolution: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::global_1deg()
    }
}

impl GridSpec {
    /// 1-degree global grid from 60S to 60N: 120 x 360 cells.
    pub fn global_1deg() -> Self {
        Self {
            lat_min: -60.0,
            lat_max: 60.0,
            lon_min: -180.0,
            lon_max: 180.0,
            resolution: 1.0,
        }
    }

    /// Coarsened full-longitude grid for synthetic runs.
    pub fn global_coarse(resolution: f64) -> Self {
        Self {
            resolution,
            ..Self::global_1deg()
        }
    }

    fn extent_cells(span: f64, res: f64) -> Result<usize> {
        let n = span / res;
        let r = n.round();
        if (n - r).abs() > 1e-9 || r < 1.0 {
            return Err(Error::Config(format!(
                "grid extent {span} is not a positive multiple of resolution {res}"
            )));
        }
        Ok(r as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) {
            return Err(Error::Config(format!(
                "grid resolution must be > 0, got {}",
                self.resolution
            )));
        }
        if self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(Error::Config("grid ranges must be non-empty".into()));
        }
        if self.lat_min < -90.0 || self.lat_max > 90.0 {
            return Err(Error::Config("latitude range must lie within [-90, 90]".into()));
        }
        self.h()?;
        self.w()?;
        Ok(())
    }

    pub fn h(&self) -> Result<usize> {
        Self::extent_cells(self.lat_max - self.lat_min, self.resolution)
    }

    pub fn w(&self) -> Result<usize> {
        Self::extent_cells(self.lon_max - self.lon_min, self.resolution)
    }

    pub fn lat_center(&self, i: usize) -> f64 {
        self.lat_min + (i as f64 + 0.5) * self.resolution
    }

    pub fn lon_center(&self, j: usize) -> f64 {
        self.lon_min + (j as f64 + 0.5) * self.resolution
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub name: String,
    pub unit: String,
}

impl ChannelMeta {
    pub fn new(name: &str, unit: &str) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
        }
    }
}

/// JSON header of an MGRID file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgridHeader {
    pub magic: String,
    pub grid: GridSpec,
    /// Declared grid dims; must match the grid spec.
    pub h: usize,
    pub w: usize,
    pub channels: Vec<ChannelMeta>,
    pub target: ChannelMeta,
    pub dates: Vec<NaiveDate>,
}

impl MgridHeader {
    pub fn new(
        grid: GridSpec,
        channels: Vec<ChannelMeta>,
        target: ChannelMeta,
        dates: Vec<NaiveDate>,
    ) -> Result<Self> {
        grid.validate()?;
        Ok(Self {
            magic: MGRID_MAGIC.into(),
            h: grid.h()?,
            w: grid.w()?,
            channels,
            target,
            grid,
            dates,
        })
    }
}

/// One day of predictors, target flash density, and validity mask.
#[derive(Debug, Clone)]
pub struct GridSample {
    pub date: NaiveDate,
    /// `C * H * W`, channel-major.
    pub predictors: Vec<f32>,
    /// `H * W`.
    pub target: Vec<f32>,
    /// `H * W`, entries 0 or 1.
    pub mask: Vec<f32>,
}

/// Streaming MGRID writer. Days must arrive in exactly the header's date
/// order. Non-finite values are stored as 0 with the mask forced to 0;
/// negative target values on valid pixels are rejected.
pub struct MgridWriter {
    out: BufWriter<File>,
    header: MgridHeader,
    hw: usize,
    written: usize,
}

impl MgridWriter {
    pub fn create(path: &Path, header: MgridHeader) -> Result<Self> {
        header.grid.validate()?;
        if header.channels.is_empty() {
            return Err(Error::Config("MGRID needs at least one predictor channel".into()));
        }
        for pair in header.dates.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Data(format!(
                    "dates must be strictly ascending: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        let hw = header.grid.h()? * header.grid.w()?;
        let mut out = BufWriter::new(File::create(path)?);
        let json = serde_json::to_vec(&header)?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        Ok(Self {
            out,
            header,
            hw,
            written: 0,
        })
    }

    pub fn append(&mut self, sample: &GridSample) -> Result<()> {
        if self.written >= self.header.dates.len() {
            return Err(Error::Data("more samples than header dates".into()));
        }
        if sample.date != self.header.dates[self.written] {
            return Err(Error::Data(format!(
                "sample date {} does not match header date {}",
                sample.date, self.header.dates[self.written]
            )));
        }
        let c = self.header.channels.len();
        if sample.predictors.len() != c * self.hw
            || sample.target.len() != self.hw
            || sample.mask.len() != self.hw
        {
            return Err(Error::Data(format!(
                "sample {} has wrong plane sizes",
                sample.date
            )));
        }
        // Missing-value rule: non-finite anywhere forces mask 0, value 0.
        let mut mask = sample.mask.clone();
        for (i, &mv) in sample.mask.iter().enumerate() {
            if mv != 0.0 && mv != 1.0 {
                return Err(Error::Data(format!(
                    "mask value {mv} at pixel {i} of {} is not 0 or 1",
                    sample.date
                )));
            }
        }
        for ci in 0..c {
            for i in 0..self.hw {
                if !sample.predictors[ci * self.hw + i].is_finite() {
                    mask[i] = 0.0;
                }
            }
        }
        for i in 0..self.hw {
            let t = sample.target[i];
            if !t.is_finite() {
                mask[i] = 0.0;
            } else if mask[i] != 0.0 && t < 0.0 {
                return Err(Error::Data(format!(
                    "negative flash density {t} at valid pixel {i} of {}",
                    sample.date
                )));
            }
        }
        let mut buf = Vec::with_capacity((c + 2) * self.hw * 4);
        for ci in 0..c {
            for i in 0..self.hw {
                let v = sample.predictors[ci * self.hw + i];
                buf.extend_from_slice(&(if v.is_finite() { v } else { 0.0 }).to_le_bytes());
            }
        }
        for i in 0..self.hw {
            let v = sample.target[i];
            buf.extend_from_slice(&(if v.is_finite() { v } else { 0.0 }).to_le_bytes());
        }
        for i in 0..self.hw {
            buf.extend_from_slice(&mask[i].to_le_bytes());
        }
        self.out.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.header.dates.len() {
            return Err(Error::Data(format!(
                "header lists {} dates but {} samples were written",
                self.header.dates.len(),
                self.written
            )));
        }
        self.out.flush()?;
        Ok(())
    }
}

/// Convenience wrapper writing a whole dataset at once.
pub fn write_dataset(path: &Path, header: MgridHeader, samples: &[GridSample]) -> Result<()> {
    let mut w = MgridWriter::create(path, header)?;
    for s in samples {
        w.append(s)?;
    }
    w.finish()
}

/// Read-only MGRID handle with constant-time random access by day index and
/// an access log for split-hygiene audits.
#[derive(Debug)]
pub struct Dataset {
    file: File,
    header: MgridHeader,
    payload_off: u64,
    day_bytes: usize,
    hw: usize,
    accessed: Vec<AtomicBool>,
}

impl Dataset {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes).map_err(|_| Error::Format {
            offset: 0,
            msg: "file too short for header length".into(),
        })?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        if header_len == 0 || header_len > 1 << 26 {
            return Err(Error::Format {
                offset: 0,
                msg: format!("implausible header length {header_len}"),
            });
        }
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes).map_err(|_| Error::Format {
            offset: 4,
            msg: format!("truncated header (expected {header_len} bytes)"),
        })?;
        let header: MgridHeader =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::Format {
                offset: 4,
                msg: format!("header is not valid MGRID JSON: {e}"),
            })?;
        if header.magic != MGRID_MAGIC {
            return Err(Error::Format {
                offset: 4,
                msg: format!("magic/version mismatch: `{}`", header.magic),
            });
        }
        header.grid.validate().map_err(|e| Error::Format {
            offset: 4,
            msg: format!("invalid grid spec: {e}"),
        })?;
        let (h, w) = (header.grid.h()?, header.grid.w()?);
        if header.h != h || header.w != w {
            return Err(Error::Format {
                offset: 4,
                msg: format!(
                    "declared dims {}x{} do not match grid spec dims {h}x{w}",
                    header.h, header.w
                ),
            });
        }
        if header.channels.is_empty() {
            return Err(Error::Format {
                offset: 4,
                msg: "no predictor channels declared".into(),
            });
        }
        for pair in header.dates.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Format {
                    offset: 4,
                    msg: format!("dates not strictly ascending: {} then {}", pair[0], pair[1]),
                });
            }
        }
        let hw = h * w;
        let day_bytes = (header.channels.len() + 2) * hw * 4;
        let payload_off = 4 + header_len as u64;
        let expected = payload_off + (header.dates.len() * day_bytes) as u64;
        let actual = file.metadata()?.len();
        if actual != expected {
            return Err(Error::Format {
                offset: actual.min(expected),
                msg: format!(
                    "payload size mismatch: file has {actual} bytes, header implies {expected}"
                ),
            });
        }
        let n = header.dates.len();
        Ok(Self {
            file,
            header,
            payload_off,
            day_bytes,
            hw,
            accessed: (0..n).map(|_| AtomicBool::new(false)).collect(),
        })
    }

    pub fn header(&self) -> &MgridHeader {
        &self.header
    }

    pub fn grid(&self) -> &GridSpec {
        &self.header.grid
    }

    pub fn len(&self) -> usize {
        self.header.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.header.dates.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.header.channels.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.header.dates
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.header.dates.binary_search(&date).ok()
    }

    /// Reads one day. Thread-safe; records the access for audits.
    pub fn get(&self, index: usize) -> Result<GridSample> {
        if index >= self.len() {
            return Err(Error::Data(format!(
                "day index {index} out of range ({} days)",
                self.len()
            )));
        }
        self.accessed[index].store(true, Ordering::Relaxed);
        let mut buf = vec![0u8; self.day_bytes];
        let off = self.payload_off + (index * self.day_bytes) as u64;
        self.file.read_exact_at(&mut buf, off).map_err(|_| Error::Format {
            offset: off,
            msg: format!("truncated payload for day index {index}"),
        })?;
        let floats: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let c = self.n_channels();
        Ok(GridSample {
            date: self.header.dates[index],
            predictors: floats[..c * self.hw].to_vec(),
            target: floats[c * self.hw..(c + 1) * self.hw].to_vec(),
            mask: floats[(c + 1) * self.hw..].to_vec(),
        })
    }

    /// Dates whose payload has been read since the last reset.
    pub fn accessed_dates(&self) -> Vec<NaiveDate> {
        self.accessed
            .iter()
            .enumerate()
            .filter(|(_, a)| a.load(Ordering::Relaxed))
            .map(|(i, _)| self.header.dates[i])
            .collect()
    }

    pub fn reset_access_log(&self) {
        for a in &self.accessed {
            a.store(false, Ordering::Relaxed);
        }
    }
}

/// Inclusive year ranges of the train/validation/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_years: (i32, i32),
    pub val_years: (i32, i32),
    pub test_years: (i32, i32),
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_years: (2010, 2016),
            val_years: (2017, 2017),
            test_years: (2018, 2018),
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (a, b)) in [
            ("train_years", self.train_years),
            ("val_years", self.val_years),
            ("test_years", self.test_years),
        ] {
            if a > b {
                return Err(Error::Config(format!("{name}: range {a}..={b} is empty")));
            }
        }
        let ranges = [self.train_years, self.val_years, self.test_years];
        for i in 0..3 {
            for j in i + 1..3 {
                let (a, b) = ranges[i];
                let (c, d) = ranges[j];
                if a <= d && c <= b {
                    return Err(Error::Config(format!(
                        "split year ranges overlap: {a}..={b} and {c}..={d}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Day indices of each split, in date order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions every day by the calendar year of its date. A date outside
/// all configured ranges is rejected.
pub fn split_by_year(ds: &Dataset, cfg: &SplitConfig) -> Result<Splits> {
    cfg.validate()?;
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let in_range = |y: i32, (a, b): (i32, i32)| y >= a && y <= b;
    for (i, date) in ds.dates().iter().enumerate() {
        let y = date.year();
        if in_range(y, cfg.train_years) {
            splits.train.push(i);
        } else if in_range(y, cfg.val_years) {
            splits.val.push(i);
        } else if in_range(y, cfg.test_years) {
            splits.test.push(i);
        } else {
            return Err(Error::Data(format!(
                "date {date} (year {y}) falls outside every configured split range"
            )));
        }
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Per-channel z-score statistics over training-split valid pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<ChannelStat>,
}

/// Streaming single-pass (Welford) mean/std per predictor channel over the
/// valid pixels of the given days.
pub fn compute_norm_stats(ds: &Dataset, indices: &[usize]) -> Result<NormStats> {
    if indices.is_empty() {
        return Err(Error::Data("normalization stats over an empty split".into()));
    }
    let c = ds.n_channels();
    let hw = ds.header.h * ds.header.w;
    let mut count = vec![0u64; c];
    let mut mean = vec![0.0f64; c];
    let mut m2 = vec![0.0f64; c];
    for &ix in indices {
        let s = ds.get(ix)?;
        for ci in 0..c {
            let plane = &s.predictors[ci * hw..(ci + 1) * hw];
            for (i, &v) in plane.iter().enumerate() {
                if s.mask[i] == 0.0 {
                    continue;
                }
                let x = v as f64;
                count[ci] += 1;
                let d = x - mean[ci];
                mean[ci] += d / count[ci] as f64;
                m2[ci] += d * (x - mean[ci]);
            }
        }
    }
    let mut channels = Vec::with_capacity(c);
    for ci in 0..c {
        let name = ds.header.channels[ci].name.clone();
        if count[ci] == 0 {
            return Err(Error::Data(format!(
                "channel `{name}` has no valid pixels in the training split"
            )));
        }
        let var = m2[ci] / count[ci] as f64;
        let std = libm::sqrt(var);
        if !(std > 0.0) {
            return Err(Error::Data(format!(
                "channel `{name}` is constant over the training split (std = {std})"
            )));
        }
        channels.push(ChannelStat {
            name,
            mean: mean[ci],
            std,
        });
    }
    Ok(NormStats { channels })
}

/// Where the anomaly-threshold quantile population comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalySource {
    /// All valid pixels of the training split.
    AllValid,
    /// Only valid pixels with positive flash density.
    PositiveOnly,
}

/// Collects the flash-density values feeding the anomaly quantile.
pub fn target_values(ds: &Dataset, indices: &[usize], source: AnomalySource) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &ix in indices {
        let s = ds.get(ix)?;
        for (i, &y) in s.target.iter().enumerate() {
            if s.mask[i] == 0.0 {
                continue;
            }
            let y = y as f64;
            if matches!(source, AnomalySource::PositiveOnly) && y <= 0.0 {
                continue;
            }
            out.push(y);
        }
    }
    Ok(out)
}

/// Normalization sidecar: z-score stats plus the precomputed anomaly
/// threshold and its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsFile {
    pub norm: NormStats,
    pub anomaly_threshold: f64,
    pub quantile_q: f64,
    pub anomaly_source: AnomalySource,
    pub train_years: (i32, i32),
    pub n_train_days: usize,
}

impl StatsFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Stacks the given days into `(x, y, m)` tensors. Predictors are z-scored
/// per channel; targets stay in raw flash-density units. Any non-finite
/// normalized predictor or target zeroes the value and the mask at that
/// pixel.
pub fn make_batch<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    stats: &NormStats,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    if indices.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let c = ds.n_channels();
    if stats.channels.len() != c {
        return Err(Error::Config(format!(
            "stats cover {} channels, dataset has {c}",
            stats.channels.len()
        )));
    }
    for (cs, cm) in stats.channels.iter().zip(ds.header.channels.iter()) {
        if cs.name != cm.name {
            return Err(Error::Config(format!(
                "stats channel `{}` does not match dataset channel `{}`",
                cs.name, cm.name
            )));
        }
    }
    let (h, w) = (ds.header.h, ds.header.w);
    let hw = h * w;
    let b = indices.len();
    let mut x = Tensor4::<T>::zeros([b, c, h, w]);
    let mut y = Tensor4::<T>::zeros([b, 1, h, w]);
    let mut m = Tensor4::<T>::zeros([b, 1, h, w]);
    for (bi, &ix) in indices.iter().enumerate() {
        let s = ds.get(ix)?;
        let mut mask: Vec<f64> = s.mask.iter().map(|&v| v as f64).collect();
        let mut norm = vec![0.0f64; c * hw];
        for ci in 0..c {
            let st = &stats.channels[ci];
            for i in 0..hw {
                let z = (s.predictors[ci * hw + i] as f64 - st.mean) / st.std;
                if z.is_finite() {
                    norm[ci * hw + i] = z;
                } else {
                    norm[ci * hw + i] = 0.0;
                    mask[i] = 0.0;
                }
            }
        }
        let mut target = vec![0.0f64; hw];
        for i in 0..hw {
            let t = s.target[i] as f64;
            if t.is_finite() {
                target[i] = t;
            } else {
                target[i] = 0.0;
                mask[i] = 0.0;
            }
        }
        for ci in 0..c {
            let dst = x.plane_mut(bi, ci);
            for i in 0..hw {
                dst[i] = T::from_f64(if mask[i] == 0.0 && !norm[ci * hw + i].is_finite() {
                    0.0
                } else {
                    norm[ci * hw + i]
                });
            }
        }
        let dy = y.plane_mut(bi, 0);
        let dm = m.plane_mut(bi, 0);
        for i in 0..hw {
            dy[i] = T::from_f64(target[i]);
            dm[i] = T::from_f64(mask[i]);
        }
    }
    Ok((x, y, m))
}
