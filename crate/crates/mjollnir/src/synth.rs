//! Deterministic synthetic dataset generator.
//!
//! Flash density is a fixed smooth nonlinear function of nine synthetic
//! predictor channels plus multiplicative log-normal noise, so a trained
//! network can be scored against a known signal. Each day's fields depend
//! only on `(seed, date)`, never on generation order.

use chrono::{Datelike, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelMeta, GridSample, GridSpec, MgridHeader, MgridWriter};
use crate::error::Result;

pub const SYNTH_CHANNELS: usize = 9;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub grid: GridSpec,
    pub start_year: i32,
    pub end_year: i32,
    /// Days generated per year outside `full_years`, spread evenly.
    pub sparse_days_per_year: usize,
    /// Years generated with every calendar day present.
    pub full_years: Vec<i32>,
    pub seed: u64,
    /// Standard deviation of the multiplicative log-normal target noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::global_coarse(15.0),
            start_year: 2010,
            end_year: 2018,
            sparse_days_per_year: 48,
            full_years: vec![2018],
            seed: 7,
            noise: 0.15,
        }
    }
}

/// Per-channel harmonic coefficients, fixed once per generator seed.
struct ChannelLaw {
    a: f64,
    k_lon: f64,
    alpha: f64,
    m_lat: f64,
    beta: f64,
    b: f64,
    n_lat: f64,
    delta: f64,
    phase: f64,
    day_noise: f64,
}

struct TargetLaw {
    weights: Vec<f64>,
    z0: f64,
    scale: f64,
}

fn channel_laws(seed: u64) -> (Vec<ChannelLaw>, TargetLaw) {
    let mut r = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let laws: Vec<ChannelLaw> = (0..SYNTH_CHANNELS)
        .map(|c| ChannelLaw {
            a: r.random_range(0.6..1.4),
            k_lon: r.random_range(1.0..4.0_f64).round(),
            alpha: r.random_range(0.0..std::f64::consts::TAU),
            m_lat: r.random_range(1.0..3.0_f64).round(),
            beta: r.random_range(0.0..std::f64::consts::TAU),
            b: r.random_range(0.5..1.2),
            n_lat: r.random_range(1.0..2.0_f64).round(),
            delta: r.random_range(0.0..std::f64::consts::TAU),
            phase: r.random_range(0.0..std::f64::consts::TAU),
            // the first channel acts as static terrain: no day noise
            day_noise: if c == 0 { 0.0 } else { 0.05 },
        })
        .collect();
    let weights: Vec<f64> = (0..SYNTH_CHANNELS)
        .map(|_| r.random_range(-1.0..1.0))
        .collect();
    let target = TargetLaw {
        weights,
        z0: 0.35,
        scale: 8.0,
    };
    (laws, target)
}

fn day_fraction(date: NaiveDate) -> f64 {
    (date.ordinal() as f64 - 0.5) / 365.25
}

/// Dates generated for one year: all days, or `n` evenly spaced ones.
pub fn year_dates(year: i32, sparse_n: Option<usize>) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(year, 1, 1).unwrap();
    let days_in_year = if start.leap_year() { 366 } else { 365 };
    match sparse_n {
        None => (0..days_in_year)
            .map(|d| start + chrono::Duration::days(d as i64))
            .collect(),
        Some(n) => {
            let n = n.min(days_in_year);
            (0..n)
                .map(|i| start + chrono::Duration::days((i * days_in_year / n) as i64))
                .collect()
        }
    }
}

/// All dates of the configured span, ascending.
pub fn synth_dates(cfg: &SynthConfig) -> Vec<NaiveDate> {
    let mut dates = Vec::new();
    for year in cfg.start_year..=cfg.end_year {
        let sparse = if cfg.full_years.contains(&year) {
            None
        } else {
            Some(cfg.sparse_days_per_year)
        };
        dates.extend(year_dates(year, sparse));
    }
    dates
}

pub fn synth_header(cfg: &SynthConfig) -> Result<MgridHeader> {
    let channels = (0..SYNTH_CHANNELS)
        .map(|c| ChannelMeta::new(&format!("syn{c}"), "1"))
        .collect();
    MgridHeader::new(
        cfg.grid,
        channels,
        ChannelMeta::new("flash_density", "flashes km-2 yr-1"),
        synth_dates(cfg),
    )
}

/// Generates one day. Deterministic in `(cfg.seed, date)`.
pub fn generate_day(cfg: &SynthConfig, date: NaiveDate) -> Result<GridSample> {
    let (laws, target_law) = channel_laws(cfg.seed);
    let h = cfg.grid.h()?;
    let w = cfg.grid.w()?;
    let hw = h * w;
    let tau = day_fraction(date);
    let epoch_day = date.num_days_from_ce() as u64;
    let mut day_rng = ChaCha20Rng::seed_from_u64(
        cfg.seed ^ epoch_day.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    let mut predictors = vec![0.0f32; SYNTH_CHANNELS * hw];
    for (c, law) in laws.iter().enumerate() {
        for i in 0..h {
            let lat = cfg.grid.lat_center(i).to_radians();
            for j in 0..w {
                let lon = cfg.grid.lon_center(j).to_radians();
                let spatial = law.a
                    * libm::sin(law.k_lon * lon + law.alpha)
                    * libm::cos(law.m_lat * lat + law.beta);
                let seasonal = law.b
                    * libm::cos(std::f64::consts::TAU * tau + law.phase)
                    * libm::sin(law.n_lat * lat + law.delta);
                let eta: f64 = day_rng.sample(StandardNormal);
                predictors[c * hw + i * w + j] =
                    (spatial + seasonal + law.day_noise * eta) as f32;
            }
        }
    }

    let mut target = vec![0.0f32; hw];
    for px in 0..hw {
        let mut z = 0.0f64;
        for (c, &wgt) in target_law.weights.iter().enumerate() {
            z += wgt * predictors[c * hw + px] as f64;
        }
        let excess = z - target_law.z0;
        if excess > 0.0 {
            let eps: f64 = day_rng.sample(StandardNormal);
            let y = target_law.scale * excess * excess * libm::exp(cfg.noise * eps);
            target[px] = y as f32;
        }
    }

    Ok(GridSample {
        date,
        predictors,
        target,
        mask: vec![1.0; hw],
    })
}

/// Writes the full synthetic dataset to an MGRID file.
pub fn write_synth(path: &std::path::Path, cfg: &SynthConfig) -> Result<()> {
    cfg.grid.validate()?;
    let header = synth_header(cfg)?;
    let dates = header.dates.clone();
    let mut writer = MgridWriter::create(path, header)?;
    for date in dates {
        writer.append(&generate_day(cfg, date)?)?;
    }
    writer.finish()
}
