//! Evaluation diagnostics: log(1+x) annual-mean correlation, regional
//! monthly scatter and climatology, zonal profiles with a tropics /
//! extra-tropics split, hemispheric monthly series, and subregional
//! analysis. All arithmetic is `f64`; aggregations run in fixed order so a
//! report is a pure function of its inputs.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GridSpec};
use crate::error::{Error, Result};
use crate::regions::{subregion_split, RegionBox, SubregionScheme};

/// One 2-D plane of the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape {
                op: "Field::new",
                msg: format!("{} values for {h}x{w} plane", data.len()),
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn from_f32(h: usize, w: usize, plane: &[f32]) -> Result<Self> {
        Self::new(h, w, plane.iter().map(|&v| v as f64).collect())
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.w + j] = v;
    }
}

/// Sample Pearson correlation (two-pass, mean-centered).
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "pearson_r",
            msg: format!("series lengths {} vs {}", a.len(), b.len()),
        });
    }
    if a.len() < 2 {
        return Err(Error::Data(format!(
            "pearson_r needs at least 2 points, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a series is constant; correlation is undefined".into(),
        ));
    }
    Ok(cov / (libm::sqrt(va) * libm::sqrt(vb)))
}

/// Root-mean-square error.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "rmse",
            msg: format!("series lengths {} vs {}", a.len(), b.len()),
        });
    }
    if a.is_empty() {
        return Err(Error::Data("rmse over empty series".into()));
    }
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    Ok(libm::sqrt(acc / a.len() as f64))
}

/// Elementwise `ln(1 + x)` on valid pixels; masked pixels become 0.
/// Negative values on valid pixels are a data error.
pub fn log1p_field(field: &Field, mask: &Field) -> Result<Field> {
    if field.data.len() != mask.data.len() {
        return Err(Error::Shape {
            op: "log1p_field",
            msg: "field and mask sizes differ".into(),
        });
    }
    let mut out = Field::zeros(field.h, field.w);
    for (i, (&v, &m)) in field.data.iter().zip(mask.data.iter()).enumerate() {
        if m == 0.0 {
            continue;
        }
        if v < 0.0 {
            return Err(Error::Data(format!(
                "log1p of negative value {v} at valid pixel {i}"
            )));
        }
        out.data[i] = libm::log1p(v);
    }
    Ok(out)
}

/// Per-pixel mean over each calendar month of one year. Every day of the
/// year must be present exactly once.
pub fn monthly_climatology(days: &[(NaiveDate, Field)]) -> Result<[Field; 12]> {
    if days.is_empty() {
        return Err(Error::Coverage("no daily fields supplied".into()));
    }
    let year = days[0].0.year();
    let (h, w) = (days[0].1.h, days[0].1.w);
    let mut seen = std::collections::BTreeSet::new();
    for (d, f) in days {
        if d.year() != year {
            return Err(Error::Coverage(format!(
                "mixed years in daily stream: {year} and {}",
                d.year()
            )));
        }
        if f.h != h || f.w != w {
            return Err(Error::Shape {
                op: "monthly_climatology",
                msg: format!("field for {d} has different dims"),
            });
        }
        if !seen.insert(*d) {
            return Err(Error::Coverage(format!("duplicate day {d}")));
        }
    }
    let start = NaiveDate::from_ymd_opt(year, 1, 1).unwrap();
    let n_days = if start.leap_year() { 366 } else { 365 };
    let mut missing = Vec::new();
    for k in 0..n_days {
        let d = start + chrono::Duration::days(k as i64);
        if !seen.contains(&d) {
            missing.push(d);
        }
    }
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(5).map(|d| d.to_string()).collect();
        return Err(Error::Coverage(format!(
            "{} missing days in {year}, first few: {}",
            missing.len(),
            shown.join(", ")
        )));
    }
    let mut sums: Vec<Field> = (0..12).map(|_| Field::zeros(h, w)).collect();
    let mut counts = [0usize; 12];
    for (d, f) in days {
        let m = d.month0() as usize;
        counts[m] += 1;
        for (acc, &v) in sums[m].data.iter_mut().zip(f.data.iter()) {
            *acc += v;
        }
    }
    let mut out = Vec::with_capacity(12);
    for (m, mut s) in sums.into_iter().enumerate() {
        let inv = 1.0 / counts[m] as f64;
        for v in s.data.iter_mut() {
            *v *= inv;
        }
        out.push(s);
    }
    Ok(out.try_into().unwrap())
}

/// Unweighted mean of the 12 monthly fields (not day-weighted).
pub fn annual_mean(months: &[Field]) -> Result<Field> {
    if months.len() != 12 {
        return Err(Error::Shape {
            op: "annual_mean",
            msg: format!("expected 12 monthly fields, got {}", months.len()),
        });
    }
    let (h, w) = (months[0].h, months[0].w);
    let mut out = Field::zeros(h, w);
    for m in months {
        for (acc, &v) in out.data.iter_mut().zip(m.data.iter()) {
            *acc += v;
        }
    }
    for v in out.data.iter_mut() {
        *v /= 12.0;
    }
    Ok(out)
}

fn cell_weight(grid: &GridSpec, i: usize, cos_weighting: bool) -> f64 {
    if cos_weighting {
        libm::cos(grid.lat_center(i).to_radians())
    } else {
        1.0
    }
}

/// Mean over the box's valid cells. With `cos_weighting` the mean is
/// cosine-latitude weighted; the default is a plain cell mean.
pub fn region_mean(
    field: &Field,
    mask: &Field,
    region: &RegionBox,
    grid: &GridSpec,
    cos_weighting: bool,
) -> Result<f64> {
    let cells = region.cells(grid)?;
    if cells.is_empty() {
        return Err(Error::Data(format!("region `{}` is empty on this grid", region.name)));
    }
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (i, j) in cells {
        if mask.at(i, j) == 0.0 {
            continue;
        }
        let w = cell_weight(grid, i, cos_weighting);
        acc += w * field.at(i, j);
        wsum += w;
    }
    if wsum == 0.0 {
        return Err(Error::Data(format!(
            "region `{}` has no valid cells under the mask",
            region.name
        )));
    }
    Ok(acc / wsum)
}

/// Mean over all valid longitudes at each latitude row; `None` where the
/// whole row is masked out.
pub fn zonal_lat_profile(field: &Field, mask: &Field) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(field.h);
    for i in 0..field.h {
        let mut acc = 0.0;
        let mut n = 0usize;
        for j in 0..field.w {
            if mask.at(i, j) == 0.0 {
                continue;
            }
            acc += field.at(i, j);
            n += 1;
        }
        out.push(if n == 0 { None } else { Some(acc / n as f64) });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatBand {
    /// Latitudes in [-30, +30] (inclusive at the boundary).
    Tropics,
    /// Latitudes strictly poleward of 30 degrees.
    Extratropics,
}

fn in_band(lat: f64, band: LatBand) -> bool {
    match band {
        LatBand::Tropics => (-30.0..=30.0).contains(&lat),
        LatBand::Extratropics => lat.abs() > 30.0,
    }
}

/// Mean over the band's valid latitudes at each longitude column.
pub fn zonal_lon_profile(
    field: &Field,
    mask: &Field,
    grid: &GridSpec,
    band: LatBand,
) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(field.w);
    for j in 0..field.w {
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in 0..field.h {
            if !in_band(grid.lat_center(i), band) || mask.at(i, j) == 0.0 {
                continue;
            }
            acc += field.at(i, j);
            n += 1;
        }
        out.push(if n == 0 { None } else { Some(acc / n as f64) });
    }
    out
}

/// Per-month hemispheric means: rows north of the equator, then south.
pub fn hemisphere_series(
    months: &[Field],
    mask: &Field,
    grid: &GridSpec,
    cos_weighting: bool,
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>)> {
    if months.len() != 12 {
        return Err(Error::Shape {
            op: "hemisphere_series",
            msg: format!("expected 12 monthly fields, got {}", months.len()),
        });
    }
    let mut north = Vec::with_capacity(12);
    let mut south = Vec::with_capacity(12);
    for m in months {
        let mut acc = [0.0f64; 2];
        let mut wsum = [0.0f64; 2];
        for i in 0..m.h {
            let lat = grid.lat_center(i);
            let hemi = if lat > 0.0 { 0 } else { 1 };
            let w = cell_weight(grid, i, cos_weighting);
            for j in 0..m.w {
                if mask.at(i, j) == 0.0 {
                    continue;
                }
                acc[hemi] += w * m.at(i, j);
                wsum[hemi] += w;
            }
        }
        north.push((wsum[0] > 0.0).then(|| acc[0] / wsum[0]));
        south.push((wsum[1] > 0.0).then(|| acc[1] / wsum[1]));
    }
    Ok((north, south))
}

// ---- full report ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub cos_lat_weighting: bool,
    pub regions: Vec<RegionBox>,
    /// Subregion scheme per region name; regions absent here use the
    /// default mapping.
    pub schemes: Vec<(String, SubregionScheme)>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cos_lat_weighting: false,
            regions: crate::regions::default_regions(),
            schemes: Vec::new(),
        }
    }
}

impl EvalOptions {
    fn scheme_for(&self, name: &str) -> SubregionScheme {
        self.schemes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| *s)
            .unwrap_or_else(|| crate::regions::default_scheme_for(name))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalMetrics {
    /// Pearson r between log(1+x) annual means over valid cells.
    pub r_log1p: Option<f64>,
    /// Pearson r between raw annual means.
    pub r_raw: Option<f64>,
    pub rmse_log1p: f64,
    pub rmse_raw: f64,
    pub n_valid_cells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesPair {
    pub obs: Vec<Option<f64>>,
    pub pred: Vec<Option<f64>>,
    pub r: Option<f64>,
    pub rmse: Option<f64>,
}

impl SeriesPair {
    fn from_options(obs: Vec<Option<f64>>, pred: Vec<Option<f64>>) -> Self {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, y) in obs.iter().zip(pred.iter()) {
            if let (Some(x), Some(y)) = (x, y) {
                a.push(*x);
                b.push(*y);
            }
        }
        let r = pearson_r(&a, &b).ok();
        let e = rmse(&a, &b).ok();
        Self {
            obs,
            pred,
            r,
            rmse: e,
        }
    }

    fn from_values(obs: Vec<f64>, pred: Vec<f64>) -> Self {
        Self::from_options(
            obs.into_iter().map(Some).collect(),
            pred.into_iter().map(Some).collect(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionReport {
    pub region: String,
    pub monthly: SeriesPair,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubregionReport {
    pub region: String,
    pub subregion: String,
    pub monthly: SeriesPair,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileReport {
    pub axis: Vec<f64>,
    pub series: SeriesPair,
}

/// Every diagnostic of the evaluation protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub year: i32,
    pub grid: GridSpec,
    pub cos_lat_weighting: bool,
    pub global: GlobalMetrics,
    pub regional: Vec<RegionReport>,
    pub lat_profile: ProfileReport,
    pub lon_profile_tropics: ProfileReport,
    pub lon_profile_extratropics: ProfileReport,
    pub hemisphere_north: SeriesPair,
    pub hemisphere_south: SeriesPair,
    pub subregional: Vec<SubregionReport>,
}

fn dataset_daily_fields(ds: &Dataset) -> Result<(Vec<(NaiveDate, Field)>, Field)> {
    let h = ds.header().h;
    let w = ds.header().w;
    let mut days = Vec::with_capacity(ds.len());
    let mut mask = Field::constant(h, w, 1.0);
    for i in 0..ds.len() {
        let s = ds.get(i)?;
        for (mv, &sv) in mask.data.iter_mut().zip(s.mask.iter()) {
            if sv == 0.0 {
                *mv = 0.0;
            }
        }
        days.push((s.date, Field::from_f32(h, w, &s.target)?));
    }
    Ok((days, mask))
}

/// Runs the full evaluation protocol on aligned observation and prediction
/// datasets covering one complete year.
pub fn evaluate(obs: &Dataset, pred: &Dataset, opts: &EvalOptions) -> Result<Report> {
    if obs.grid() != pred.grid() {
        return Err(Error::Data(format!(
            "grids differ: {:?} vs {:?}",
            obs.grid(),
            pred.grid()
        )));
    }
    if obs.dates() != pred.dates() {
        let only_obs: Vec<_> = obs
            .dates()
            .iter()
            .filter(|d| pred.date_index(**d).is_none())
            .take(3)
            .collect();
        let only_pred: Vec<_> = pred
            .dates()
            .iter()
            .filter(|d| obs.date_index(**d).is_none())
            .take(3)
            .collect();
        return Err(Error::DateMismatch(format!(
            "observation and prediction dates differ (e.g. obs-only {only_obs:?}, pred-only {only_pred:?})"
        )));
    }
    let grid = *obs.grid();
    let (obs_days, obs_mask) = dataset_daily_fields(obs)?;
    let (pred_days, pred_mask) = dataset_daily_fields(pred)?;
    // static mask: intersection over both sources and every day
    let mut mask = obs_mask;
    for (mv, &pv) in mask.data.iter_mut().zip(pred_mask.data.iter()) {
        if pv == 0.0 {
            *mv = 0.0;
        }
    }
    let year = obs_days[0].0.year();

    let obs_months = monthly_climatology(&obs_days)?;
    let pred_months = monthly_climatology(&pred_days)?;
    let obs_annual = annual_mean(&obs_months)?;
    let pred_annual = annual_mean(&pred_months)?;

    // global annual-mean correlation over valid cells
    let obs_log = log1p_field(&obs_annual, &mask)?;
    let pred_log = log1p_field(&pred_annual, &mask)?;
    let mut raw_o = Vec::new();
    let mut raw_p = Vec::new();
    let mut log_o = Vec::new();
    let mut log_p = Vec::new();
    for i in 0..mask.data.len() {
        if mask.data[i] == 0.0 {
            continue;
        }
        raw_o.push(obs_annual.data[i]);
        raw_p.push(pred_annual.data[i]);
        log_o.push(obs_log.data[i]);
        log_p.push(pred_log.data[i]);
    }
    if raw_o.is_empty() {
        return Err(Error::EmptyMask);
    }
    let global = GlobalMetrics {
        r_log1p: pearson_r(&log_o, &log_p).ok(),
        r_raw: pearson_r(&raw_o, &raw_p).ok(),
        rmse_log1p: rmse(&log_o, &log_p)?,
        rmse_raw: rmse(&raw_o, &raw_p)?,
        n_valid_cells: raw_o.len(),
    };

    // per-region monthly series
    let monthly_series = |region: &RegionBox| -> Result<SeriesPair> {
        let mut o = Vec::with_capacity(12);
        let mut p = Vec::with_capacity(12);
        for m in 0..12 {
            o.push(region_mean(&obs_months[m], &mask, region, &grid, opts.cos_lat_weighting)?);
            p.push(region_mean(&pred_months[m], &mask, region, &grid, opts.cos_lat_weighting)?);
        }
        Ok(SeriesPair::from_values(o, p))
    };
    let mut regional = Vec::new();
    for region in &opts.regions {
        region.validate(&grid)?;
        regional.push(RegionReport {
            region: region.name.clone(),
            monthly: monthly_series(region)?,
        });
    }

    // zonal profiles of the annual means
    let lat_axis: Vec<f64> = (0..obs_annual.h).map(|i| grid.lat_center(i)).collect();
    let lon_axis: Vec<f64> = (0..obs_annual.w).map(|j| grid.lon_center(j)).collect();
    let lat_profile = ProfileReport {
        axis: lat_axis,
        series: SeriesPair::from_options(
            zonal_lat_profile(&obs_annual, &mask),
            zonal_lat_profile(&pred_annual, &mask),
        ),
    };
    let lon_profile_tropics = ProfileReport {
        axis: lon_axis.clone(),
        series: SeriesPair::from_options(
            zonal_lon_profile(&obs_annual, &mask, &grid, LatBand::Tropics),
            zonal_lon_profile(&pred_annual, &mask, &grid, LatBand::Tropics),
        ),
    };
    let lon_profile_extratropics = ProfileReport {
        axis: lon_axis,
        series: SeriesPair::from_options(
            zonal_lon_profile(&obs_annual, &mask, &grid, LatBand::Extratropics),
            zonal_lon_profile(&pred_annual, &mask, &grid, LatBand::Extratropics),
        ),
    };

    // hemispheric monthly climatology
    let (obs_n, obs_s) = hemisphere_series(&obs_months, &mask, &grid, opts.cos_lat_weighting)?;
    let (pred_n, pred_s) = hemisphere_series(&pred_months, &mask, &grid, opts.cos_lat_weighting)?;
    let hemisphere_north = SeriesPair::from_options(obs_n, pred_n);
    let hemisphere_south = SeriesPair::from_options(obs_s, pred_s);

    // subregional analysis
    let mut subregional = Vec::new();
    for region in &opts.regions {
        let scheme = opts.scheme_for(&region.name);
        let subs = subregion_split(region, scheme, &grid)?;
        for sub in subs {
            subregional.push(SubregionReport {
                region: region.name.clone(),
                subregion: sub.name.clone(),
                monthly: monthly_series(&sub)?,
            });
        }
    }

    Ok(Report {
        year,
        grid,
        cos_lat_weighting: opts.cos_lat_weighting,
        global,
        regional,
        lat_profile,
        lon_profile_tropics,
        lon_profile_extratropics,
        hemisphere_north,
        hemisphere_south,
        subregional,
    })
}

fn fmt_opt(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Writes the CSV bundle and JSON summary. Returns the file list.
pub fn write_report(report: &Report, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, contents)?;
        files.push(path);
        Ok(())
    };

    let mut global = String::from("metric,value\n");
    for (k, v) in [
        ("r_log1p", report.global.r_log1p),
        ("r_raw", report.global.r_raw),
        ("rmse_log1p", Some(report.global.rmse_log1p)),
        ("rmse_raw", Some(report.global.rmse_raw)),
    ] {
        global.push_str(&format!("{k},{}\n", fmt_opt(&v)));
    }
    global.push_str(&format!("n_valid_cells,{}\n", report.global.n_valid_cells));
    emit("global.csv", global)?;

    let monthly_csv = |rows: &[(&str, &str, &SeriesPair)]| {
        let mut s = String::from("region,subregion,month,observed,predicted\n");
        for (region, subregion, pair) in rows {
            for m in 0..12 {
                s.push_str(&format!(
                    "{region},{subregion},{},{},{}\n",
                    m + 1,
                    fmt_opt(&pair.obs[m]),
                    fmt_opt(&pair.pred[m])
                ));
            }
        }
        s
    };
    let regional_rows: Vec<(&str, &str, &SeriesPair)> = report
        .regional
        .iter()
        .map(|r| (r.region.as_str(), "", &r.monthly))
        .collect();
    emit("regional_scatter.csv", monthly_csv(&regional_rows))?;
    emit("regional_climatology.csv", monthly_csv(&regional_rows))?;
    let sub_rows: Vec<(&str, &str, &SeriesPair)> = report
        .subregional
        .iter()
        .map(|r| (r.region.as_str(), r.subregion.as_str(), &r.monthly))
        .collect();
    emit("subregional_monthly.csv", monthly_csv(&sub_rows))?;

    let profile_csv = |axis_name: &str, p: &ProfileReport| {
        let mut s = format!("{axis_name},observed,predicted\n");
        for (i, x) in p.axis.iter().enumerate() {
            s.push_str(&format!(
                "{x},{},{}\n",
                fmt_opt(&p.series.obs[i]),
                fmt_opt(&p.series.pred[i])
            ));
        }
        s
    };
    emit("lat_profile.csv", profile_csv("lat", &report.lat_profile))?;
    emit(
        "lon_profile_tropics.csv",
        profile_csv("lon", &report.lon_profile_tropics),
    )?;
    emit(
        "lon_profile_extratropics.csv",
        profile_csv("lon", &report.lon_profile_extratropics),
    )?;

    let mut hemi = String::from("hemisphere,month,observed,predicted\n");
    for (name, pair) in [
        ("north", &report.hemisphere_north),
        ("south", &report.hemisphere_south),
    ] {
        for m in 0..12 {
            hemi.push_str(&format!(
                "{name},{},{},{}\n",
                m + 1,
                fmt_opt(&pair.obs[m]),
                fmt_opt(&pair.pred[m])
            ));
        }
    }
    emit("hemispheric_monthly.csv", hemi)?;

    let summary = serde_json::to_string_pretty(report)?;
    emit("summary.json", summary + "\n")?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_affine_and_errors() {
        let a = vec![1.0, 2.0, 3.0, 5.0];
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 3.0).collect();
        assert!((pearson_r(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson_r(&a, &c).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson_r(&a, &[1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(pearson_r(&[1.0], &[2.0]).is_err());
        assert!(pearson_r(&a, &b[..3]).is_err());
    }

    #[test]
    fn rmse_analytic() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let got = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((got - (12.5f64).sqrt()).abs() < 1e-12);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn log1p_values_and_negative_rejection() {
        let f = Field::new(1, 3, vec![0.0, std::f64::consts::E - 1.0, -0.5]).unwrap();
        let m_all = Field::constant(1, 3, 1.0);
        assert!(log1p_field(&f, &m_all).is_err());
        let m_ok = Field::new(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        let out = log1p_field(&f, &m_ok).unwrap();
        assert_eq!(out.data[0], 0.0);
        assert!((out.data[1] - 1.0).abs() < 1e-12);
        assert_eq!(out.data[2], 0.0);
    }

    fn date(y: i32, ord: u32) -> NaiveDate {
        NaiveDate::from_yo_opt(y, ord).unwrap()
    }

    #[test]
    fn climatology_constant_and_missing_days() {
        let days: Vec<(NaiveDate, Field)> = (1..=365)
            .map(|o| (date(2018, o), Field::constant(2, 3, 4.5)))
            .collect();
        let months = monthly_climatology(&days).unwrap();
        for m in &months {
            assert!(m.data.iter().all(|&v| (v - 4.5).abs() < 1e-12));
        }
        let annual = annual_mean(&months).unwrap();
        assert!(annual.data.iter().all(|&v| (v - 4.5).abs() < 1e-12));

        let partial: Vec<(NaiveDate, Field)> = days[..300].to_vec();
        match monthly_climatology(&partial) {
            Err(Error::Coverage(msg)) => assert!(msg.contains("65 missing"), "{msg}"),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn climatology_monthly_separation() {
        // January days all 2, everything else 0
        let days: Vec<(NaiveDate, Field)> = (1..=365)
            .map(|o| {
                let v = if o <= 31 { 2.0 } else { 0.0 };
                (date(2015, o), Field::constant(1, 2, v))
            })
            .collect();
        let months = monthly_climatology(&days).unwrap();
        assert!(months[0].data.iter().all(|&v| (v - 2.0).abs() < 1e-12));
        for m in &months[1..] {
            assert!(m.data.iter().all(|&v| v == 0.0));
        }
        let annual = annual_mean(&months).unwrap();
        assert!(annual.data.iter().all(|&v| (v - 2.0 / 12.0).abs() < 1e-12));
    }

    #[test]
    fn annual_mean_spot_case() {
        let mut months: Vec<Field> = (0..12).map(|_| Field::zeros(1, 1)).collect();
        months[4] = Field::constant(1, 1, 12.0);
        let a = annual_mean(&months).unwrap();
        assert!((a.data[0] - 1.0).abs() < 1e-12);
        assert!(annual_mean(&months[..11]).is_err());
    }

    #[test]
    fn hemisphere_split_has_no_equator_row() {
        let grid = GridSpec::global_coarse(10.0); // centers at -55..-5, 5..55
        let mask = Field::constant(12, 36, 1.0);
        let mut f = Field::zeros(12, 36);
        // fill northern rows (lat > 0) with 3
        for i in 0..12 {
            if grid.lat_center(i) > 0.0 {
                for j in 0..36 {
                    f.set(i, j, 3.0);
                }
            }
        }
        let months: Vec<Field> = (0..12).map(|_| f.clone()).collect();
        let (north, south) = hemisphere_series(&months, &mask, &grid, false).unwrap();
        assert!(north.iter().all(|v| (v.unwrap() - 3.0).abs() < 1e-12));
        assert!(south.iter().all(|v| v.unwrap() == 0.0));
    }
}
