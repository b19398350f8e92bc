//! Command-line surface: `synth`, `check`, `stats`, `train`, `predict`,
//! `evaluate`, `report`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error. No command overwrites existing outputs without `--force`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::checkpoint;
use crate::config::{Dtype, ResolvedConfig, RunConfig};
use crate::data::{
    compute_norm_stats, make_batch, split_by_year, target_values, ChannelMeta,
    Dataset, MgridHeader, MgridWriter, StatsFile,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_report, Report};
use crate::loss::{anomaly_threshold, LossConfig};
use crate::model::{forward_eval, predict_density, ModelParams, PredictMode};
use crate::optim::OptimState;
use crate::plot::render_report_plots;
use crate::scalar::Scalar;
use crate::synth::{write_synth, SynthConfig};
use crate::tensor::Tensor4;
use crate::trainer::{train, ResumeState, TrainSnapshot};

#[derive(Parser, Debug)]
#[command(
    name = "mjollnir",
    version,
    about = "Global lightning flash-density parameterization toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic MGRID dataset with a known predictor-to-density law.
    Synth {
        /// Output MGRID path.
        #[arg(long)]
        out: PathBuf,
        /// Optional TOML file with generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Validate an MGRID file against the format contract.
    Check {
        dataset: PathBuf,
        /// Skip the full payload scan (header and size checks only).
        #[arg(long)]
        quick: bool,
    },
    /// Compute normalization statistics and the anomaly threshold over the
    /// training years only.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config (split years, quantile, anomaly source).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train the model; writes checkpoints, an NDJSON log, and the
    /// resolved config into the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a `last.ckpt` written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run inference and write predicted daily fields as MGRID.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one calendar year.
        #[arg(long)]
        year: Option<i32>,
        /// Head combination: `gated` or `expected`.
        #[arg(long, default_value = "gated")]
        mode: String,
        /// Gating threshold for `gated` mode.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        force: bool,
    },
    /// Compare predictions against observations and emit the report bundle.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Run config (region boxes, weighting flag).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also render SVG plots.
        #[arg(long)]
        plots: bool,
        #[arg(long)]
        force: bool,
    },
    /// Re-render plots and print a summary table from an existing report
    /// directory.
    Report {
        #[arg(long)]
        report_dir: PathBuf,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap uses exit code 2 for usage errors and 0 for --help/--version
            e.exit();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Test entry point: run with explicit arguments.
pub fn run_with_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    dispatch(cli)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { out, config, force } => cmd_synth(&out, config.as_deref(), force),
        Cmd::Check { dataset, quick } => cmd_check(&dataset, quick),
        Cmd::Stats {
            dataset,
            out,
            config,
            force,
        } => cmd_stats(&dataset, &out, config.as_deref(), force),
        Cmd::Train {
            config,
            dataset,
            stats,
            out_dir,
            resume,
            force,
        } => cmd_train(config.as_deref(), &dataset, &stats, &out_dir, resume.as_deref(), force),
        Cmd::Predict {
            checkpoint,
            dataset,
            stats,
            out,
            year,
            mode,
            tau,
            force,
        } => cmd_predict(&checkpoint, &dataset, &stats, &out, year, &mode, tau, force),
        Cmd::Evaluate {
            pred,
            obs,
            out_dir,
            config,
            plots,
            force,
        } => cmd_evaluate(&pred, &obs, &out_dir, config.as_deref(), plots, force),
        Cmd::Report { report_dir } => cmd_report(&report_dir),
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "{what} not found: {}",
            path.display()
        )));
    }
    Ok(())
}

fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "output {} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<ResolvedConfig> {
    match path {
        Some(p) => {
            require_exists(p, "config")?;
            RunConfig::load(p)?.resolve()
        }
        None => RunConfig::default().resolve(),
    }
}

fn cmd_synth(out: &Path, config: Option<&Path>, force: bool) -> Result<()> {
    guard_overwrite(out, force)?;
    let cfg: SynthConfig = match config {
        Some(p) => {
            require_exists(p, "synth config")?;
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("bad synth config: {e}")))?
        }
        None => SynthConfig::default(),
    };
    write_synth(out, &cfg)?;
    let ds = Dataset::open(out)?;
    println!(
        "wrote {} days ({} .. {}) on a {}x{} grid to {}",
        ds.len(),
        ds.dates().first().unwrap(),
        ds.dates().last().unwrap(),
        ds.header().h,
        ds.header().w,
        out.display()
    );
    Ok(())
}

fn cmd_check(dataset: &Path, quick: bool) -> Result<()> {
    require_exists(dataset, "dataset")?;
    let ds = Dataset::open(dataset)?;
    let mut valid_px = 0u64;
    let mut total_px = 0u64;
    if !quick {
        for i in 0..ds.len() {
            let s = ds.get(i)?;
            for (px, &m) in s.mask.iter().enumerate() {
                if m != 0.0 && m != 1.0 {
                    return Err(Error::Data(format!(
                        "day {} pixel {px}: mask value {m} is not 0 or 1",
                        s.date
                    )));
                }
                total_px += 1;
                if m == 1.0 {
                    valid_px += 1;
                    let y = s.target[px];
                    if !y.is_finite() || y < 0.0 {
                        return Err(Error::Data(format!(
                            "day {} pixel {px}: invalid flash density {y} on a valid pixel",
                            s.date
                        )));
                    }
                }
            }
            for (k, &v) in s.predictors.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "day {} predictor flat index {k}: non-finite value",
                        s.date
                    )));
                }
            }
        }
    }
    println!(
        "ok: {} days ({} .. {}), {} channels [{}], grid {}x{} at {} deg",
        ds.len(),
        ds.dates().first().map(|d| d.to_string()).unwrap_or_default(),
        ds.dates().last().map(|d| d.to_string()).unwrap_or_default(),
        ds.n_channels(),
        ds.header()
            .channels
            .iter()
            .map(|c| c.name.as_str())
            .collect::<Vec<_>>()
            .join(","),
        ds.header().h,
        ds.header().w,
        ds.grid().resolution
    );
    if !quick {
        println!(
            "payload scan clean; valid-pixel fraction {:.4}",
            valid_px as f64 / total_px.max(1) as f64
        );
    }
    Ok(())
}

fn cmd_stats(dataset: &Path, out: &Path, config: Option<&Path>, force: bool) -> Result<()> {
    require_exists(dataset, "dataset")?;
    guard_overwrite(out, force)?;
    let cfg = load_run_config(config)?;
    let ds = Dataset::open(dataset)?;
    let splits = split_by_year(&ds, cfg.split())?;
    if splits.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    ds.reset_access_log();
    let norm = compute_norm_stats(&ds, &splits.train)?;
    let values = target_values(&ds, &splits.train, cfg.loss_section().anomaly_source)?;
    let threshold = anomaly_threshold(values, cfg.loss_section().quantile_q)?;
    // the training years are the only thing this command may read
    let train_dates: std::collections::BTreeSet<_> =
        splits.train.iter().map(|&i| ds.dates()[i]).collect();
    for d in ds.accessed_dates() {
        if !train_dates.contains(&d) {
            return Err(Error::Data(format!(
                "statistics computation read non-training day {d}"
            )));
        }
    }
    let stats = StatsFile {
        norm,
        anomaly_threshold: threshold,
        quantile_q: cfg.loss_section().quantile_q,
        anomaly_source: cfg.loss_section().anomaly_source,
        train_years: cfg.split().train_years,
        n_train_days: splits.train.len(),
    };
    stats.save(out)?;
    println!(
        "stats over {} training days ({}..{}); anomaly threshold {} (q = {})",
        splits.train.len(),
        cfg.split().train_years.0,
        cfg.split().train_years.1,
        threshold,
        cfg.loss_section().quantile_q
    );
    Ok(())
}

fn optim_state_tensors<T: Scalar>(state: &OptimState<T>) -> Vec<(String, &Tensor4<T>)> {
    let mut out = Vec::with_capacity(2 * state.slots.len());
    for slot in &state.slots {
        out.push((format!("optim.m.{}", slot.name), &slot.m));
        out.push((format!("optim.v.{}", slot.name), &slot.v));
    }
    out
}

fn restore_optim_state<T: Scalar>(
    params: &ModelParams<T>,
    leftovers: Vec<(String, Tensor4<T>)>,
    step: u64,
) -> Result<OptimState<T>> {
    let mut by_name: std::collections::HashMap<String, Tensor4<T>> =
        leftovers.into_iter().collect();
    let mut state = OptimState::init(params);
    state.t = step;
    for slot in &mut state.slots {
        let m = by_name
            .remove(&format!("optim.m.{}", slot.name))
            .ok_or_else(|| {
                Error::Format {
                    offset: 12,
                    msg: format!("checkpoint lacks optimizer moment for `{}`", slot.name),
                }
            })?;
        let v = by_name
            .remove(&format!("optim.v.{}", slot.name))
            .ok_or_else(|| Error::Format {
                offset: 12,
                msg: format!("checkpoint lacks optimizer variance for `{}`", slot.name),
            })?;
        slot.m = m;
        slot.v = v;
    }
    Ok(state)
}

fn run_train<T: Scalar>(
    cfg: &ResolvedConfig,
    dataset: &Path,
    stats_path: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let ds = Dataset::open(dataset)?;
    let stats_file = StatsFile::load(stats_path)?;
    let splits = split_by_year(&ds, cfg.split())?;
    let loss_cfg: LossConfig = cfg
        .loss_section()
        .to_loss_config(stats_file.anomaly_threshold);

    let resume_state: Option<ResumeState<T>> = match resume {
        Some(path) => {
            require_exists(path, "resume checkpoint")?;
            let (params, extra, leftovers) = checkpoint::load_model::<T>(path)?;
            let next_epoch = extra["next_epoch"].as_u64().ok_or_else(|| Error::Format {
                offset: 12,
                msg: "resume checkpoint lacks `next_epoch`".into(),
            })? as usize;
            let step = extra["step"].as_u64().unwrap_or(0);
            let best_val = extra["best_val"].as_f64().unwrap_or(f64::INFINITY);
            let optim = restore_optim_state(&params, leftovers, step)?;
            Some(ResumeState {
                params,
                optim,
                next_epoch,
                best_val,
            })
        }
        None => None,
    };

    let log_path = out_dir.join("train_log.ndjson");
    let mut log = std::io::BufWriter::new(if resume_state.is_some() {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?
    } else {
        std::fs::File::create(&log_path)?
    });
    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    ds.reset_access_log();
    let result = train::<T>(
        &ds,
        &splits,
        &stats_file.norm,
        cfg.model(),
        cfg.optim(),
        &loss_cfg,
        resume_state,
        |record, snap: &TrainSnapshot<'_, T>| {
            let line = serde_json::to_string(record)?;
            log.write_all(line.as_bytes())?;
            log.write_all(b"\n")?;
            log.flush()?;
            let extra = json!({
                "next_epoch": snap.epoch,
                "step": snap.optim.t,
                "best_val": snap.best_val,
                "seed": cfg.seed,
            });
            let aux = optim_state_tensors(snap.optim);
            checkpoint::save_model(&last_path, snap.params, extra.clone(), &aux)?;
            if snap.is_best {
                checkpoint::save_model(&best_path, snap.params, extra, &[])?;
            }
            eprintln!(
                "epoch {:>3}: train {:.6} (cls {:.6}, reg {:.6})  val {:.6}  best {:.6}  [{:.1}s]",
                record.epoch,
                record.train.total,
                record.train.cls,
                record.train.reg,
                record.val.total,
                record.best_val,
                record.wall_time_s
            );
            Ok(())
        },
    )?;

    // training must never touch the test split
    let test_dates: std::collections::BTreeSet<_> =
        splits.test.iter().map(|&i| ds.dates()[i]).collect();
    for d in ds.accessed_dates() {
        if test_dates.contains(&d) {
            return Err(Error::Data(format!("training read test-split day {d}")));
        }
    }

    println!(
        "trained {} epochs; best val {:.6} at epoch {}; checkpoints in {}",
        result.records.len(),
        result.best_val,
        result.best_epoch,
        out_dir.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    dataset: &Path,
    stats: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    force: bool,
) -> Result<()> {
    require_exists(dataset, "dataset")?;
    require_exists(stats, "stats file")?;
    let cfg = load_run_config(config)?;
    std::fs::create_dir_all(out_dir)?;
    if resume.is_none() {
        for name in ["train_log.ndjson", "best.ckpt", "last.ckpt"] {
            guard_overwrite(&out_dir.join(name), force)?;
        }
    }
    let echo = out_dir.join("resolved_config.toml");
    std::fs::write(&echo, cfg.to_toml()?)?;
    match cfg.dtype {
        Dtype::F32 => run_train::<f32>(&cfg, dataset, stats, out_dir, resume),
        Dtype::F64 => run_train::<f64>(&cfg, dataset, stats, out_dir, resume),
    }
}

fn run_predict<T: Scalar>(
    ckpt: &Path,
    dataset: &Path,
    stats_path: &Path,
    out: &Path,
    year: Option<i32>,
    mode: PredictMode,
    tau: f64,
) -> Result<()> {
    use chrono::Datelike;
    let (params, _, _) = checkpoint::load_model::<T>(ckpt)?;
    let ds = Dataset::open(dataset)?;
    let stats_file = StatsFile::load(stats_path)?;
    let indices: Vec<usize> = (0..ds.len())
        .filter(|&i| year.map(|y| ds.dates()[i].year() == y).unwrap_or(true))
        .collect();
    if indices.is_empty() {
        return Err(Error::Config(match year {
            Some(y) => format!("dataset has no days in year {y}"),
            None => "dataset is empty".into(),
        }));
    }
    let dates: Vec<_> = indices.iter().map(|&i| ds.dates()[i]).collect();
    let header = MgridHeader::new(
        *ds.grid(),
        vec![
            ChannelMeta::new("logit", "1"),
            ChannelMeta::new("magnitude", "flashes km-2 yr-1"),
        ],
        ChannelMeta::new("pred_flash_density", "flashes km-2 yr-1"),
        dates,
    )?;
    let mut writer = MgridWriter::create(out, header)?;
    let hw = ds.header().h * ds.header().w;
    for chunk in indices.chunks(8) {
        let (x, _, m) = make_batch::<T>(&ds, chunk, &stats_file.norm)?;
        let (logits, mags) = forward_eval(&params, &x)?;
        let density = predict_density(&logits, &mags, mode, tau)?;
        for (bi, &ix) in chunk.iter().enumerate() {
            let mut predictors = Vec::with_capacity(2 * hw);
            predictors.extend(logits.plane(bi, 0).iter().map(|v| v.to_f64() as f32));
            predictors.extend(mags.plane(bi, 0).iter().map(|v| v.to_f64() as f32));
            let target: Vec<f32> = density.plane(bi, 0).iter().map(|v| v.to_f64() as f32).collect();
            let mask: Vec<f32> = m.plane(bi, 0).iter().map(|v| v.to_f64() as f32).collect();
            writer.append(&crate::data::GridSample {
                date: ds.dates()[ix],
                predictors,
                target,
                mask,
            })?;
        }
    }
    writer.finish()?;
    println!("wrote predictions to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    ckpt: &Path,
    dataset: &Path,
    stats: &Path,
    out: &Path,
    year: Option<i32>,
    mode: &str,
    tau: f64,
    force: bool,
) -> Result<()> {
    require_exists(ckpt, "checkpoint")?;
    require_exists(dataset, "dataset")?;
    require_exists(stats, "stats file")?;
    guard_overwrite(out, force)?;
    let mode: PredictMode = mode.parse()?;
    let (_, entries) = checkpoint::peek(ckpt)?;
    let dtype = entries
        .first()
        .map(|e| e.dtype.clone())
        .unwrap_or_else(|| "f32".into());
    match dtype.as_str() {
        "f32" => run_predict::<f32>(ckpt, dataset, stats, out, year, mode, tau),
        "f64" => run_predict::<f64>(ckpt, dataset, stats, out, year, mode, tau),
        other => Err(Error::Format {
            offset: 12,
            msg: format!("unsupported checkpoint dtype `{other}`"),
        }),
    }
}

fn cmd_evaluate(
    pred: &Path,
    obs: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    plots: bool,
    force: bool,
) -> Result<()> {
    require_exists(pred, "predictions")?;
    require_exists(obs, "observations")?;
    let cfg = load_run_config(config)?;
    std::fs::create_dir_all(out_dir)?;
    guard_overwrite(&out_dir.join("summary.json"), force)?;
    let pred_ds = Dataset::open(pred)?;
    let obs_ds = Dataset::open(obs)?;
    let opts = cfg.eval_section().to_options();
    let report = evaluate(&obs_ds, &pred_ds, &opts)?;
    write_report(&report, out_dir)?;
    if plots {
        render_report_plots(&report, out_dir)?;
    }
    print_report_summary(&report);
    println!("report written to {}", out_dir.display());
    Ok(())
}

fn cmd_report(report_dir: &Path) -> Result<()> {
    let summary = report_dir.join("summary.json");
    require_exists(&summary, "report summary")?;
    let report: Report = serde_json::from_slice(&std::fs::read(&summary)?)?;
    render_report_plots(&report, report_dir)?;
    print_report_summary(&report);
    println!("plots rendered into {}", report_dir.display());
    Ok(())
}

fn fmt_r(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

fn print_report_summary(report: &Report) {
    println!("evaluation year: {}", report.year);
    println!(
        "global annual-mean r (log1p): {}   r (raw): {}   rmse (log1p): {:.6}",
        fmt_r(&report.global.r_log1p),
        fmt_r(&report.global.r_raw),
        report.global.rmse_log1p
    );
    for r in &report.regional {
        println!("region {:<18} monthly r: {}", r.region, fmt_r(&r.monthly.r));
    }
    println!(
        "latitudinal profile r: {}  rmse: {}",
        fmt_r(&report.lat_profile.series.r),
        fmt_r(&report.lat_profile.series.rmse)
    );
    println!(
        "longitudinal (tropics) r: {}  rmse: {}",
        fmt_r(&report.lon_profile_tropics.series.r),
        fmt_r(&report.lon_profile_tropics.series.rmse)
    );
    println!(
        "longitudinal (extra-tropics) r: {}  rmse: {}",
        fmt_r(&report.lon_profile_extratropics.series.r),
        fmt_r(&report.lon_profile_extratropics.series.rmse)
    );
    println!(
        "hemispheric monthly r: north {}  south {}",
        fmt_r(&report.hemisphere_north.r),
        fmt_r(&report.hemisphere_south.r)
    );
    for s in &report.subregional {
        println!(
            "subregion {:<18} {:<6} r: {}",
            s.region,
            s.subregion,
            fmt_r(&s.monthly.r)
        );
    }
}
