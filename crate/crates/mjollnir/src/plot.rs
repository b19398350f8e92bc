//! Minimal SVG renderer for report line and scatter charts. The CSV files
//! are the data contract; these plots are a convenience.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: [&str; 6] = [
    "#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#111111",
];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn from_series(series: &[Series<'_>]) -> Self {
        let mut x0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y0 = f64::INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for s in series {
            for &(x, y) in &s.points {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x0 == x1 {
            x1 = x0 + 1.0;
        }
        if y0 == y1 {
            y1 = y0 + 1.0;
        }
        let pad = (y1 - y0) * 0.05;
        Self {
            x0,
            x1,
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn chart_scaffold(title: &str, x_label: &str, y_label: &str, frame: &Frame) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        esc(title)
    );
    // axes
    s.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"#333\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B,
        HEIGHT - MARGIN_B
    ));
    for k in 0..=4 {
        let xv = frame.x0 + (frame.x1 - frame.x0) * k as f64 / 4.0;
        let yv = frame.y0 + (frame.y1 - frame.y0) * k as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            frame.px(xv),
            HEIGHT - MARGIN_B + 16.0,
            fmt_tick(xv)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            MARGIN_L - 6.0,
            frame.py(yv) + 4.0,
            fmt_tick(yv)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0,
        esc(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        esc(y_label)
    ));
    s
}

fn legend(series: &[Series<'_>]) -> String {
    let mut s = String::new();
    for (i, sr) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_T + 6.0 + 16.0 * i as f64;
        s.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_R - 150.0,
            y,
            WIDTH - MARGIN_R - 135.0,
            y + 9.0,
            esc(sr.label)
        ));
    }
    s
}

/// Polyline chart; one color per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let frame = Frame::from_series(series);
    let mut s = chart_scaffold(title, x_label, y_label, &frame);
    for (i, sr) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if sr.points.is_empty() {
            continue;
        }
        let pts: Vec<String> = sr
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
            pts.join(" ")
        ));
    }
    s.push_str(&legend(series));
    s.push_str("</svg>\n");
    s
}

/// Scatter chart with a dashed 1:1 reference line.
pub fn scatter_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let frame = Frame::from_series(series);
    let mut s = chart_scaffold(title, x_label, y_label, &frame);
    let lo = frame.x0.max(frame.y0);
    let hi = frame.x1.min(frame.y1);
    if hi > lo {
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#999\" stroke-dasharray=\"5,4\"/>\n",
            frame.px(lo),
            frame.py(lo),
            frame.px(hi),
            frame.py(hi)
        ));
    }
    for (i, sr) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y) in &sr.points {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.2\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n",
                frame.px(x),
                frame.py(y)
            ));
        }
    }
    s.push_str(&legend(series));
    s.push_str("</svg>\n");
    s
}

/// Renders the standard plot bundle for a report into `dir`.
pub fn render_report_plots(
    report: &crate::eval::Report,
    dir: &std::path::Path,
) -> crate::error::Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut emit = |name: String, svg: String| -> crate::error::Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, svg)?;
        files.push(path);
        Ok(())
    };

    let month_points = |vals: &[Option<f64>]| -> Vec<(f64, f64)> {
        vals.iter()
            .enumerate()
            .filter_map(|(m, v)| v.map(|y| ((m + 1) as f64, y)))
            .collect()
    };

    for r in &report.regional {
        let series = [
            Series {
                label: "observed",
                points: month_points(&r.monthly.obs),
            },
            Series {
                label: "predicted",
                points: month_points(&r.monthly.pred),
            },
        ];
        let title = match r.monthly.r {
            Some(rv) => format!("{} monthly climatology (r = {rv:.3})", r.region),
            None => format!("{} monthly climatology", r.region),
        };
        emit(
            format!("climatology_{}.svg", r.region),
            line_chart(&title, "month", "flash density", &series),
        )?;
        let scatter_pts: Vec<(f64, f64)> = r
            .monthly
            .obs
            .iter()
            .zip(r.monthly.pred.iter())
            .filter_map(|(o, p)| Some((((*o)?), ((*p)?))))
            .collect();
        emit(
            format!("scatter_{}.svg", r.region),
            scatter_chart(
                &format!("{} monthly means", r.region),
                "observed",
                "predicted",
                &[Series {
                    label: &r.region,
                    points: scatter_pts,
                }],
            ),
        )?;
    }

    let profile_series = |p: &crate::eval::ProfileReport| {
        vec![
            Series {
                label: "observed",
                points: p
                    .axis
                    .iter()
                    .zip(p.series.obs.iter())
                    .filter_map(|(&x, v)| v.map(|y| (x, y)))
                    .collect(),
            },
            Series {
                label: "predicted",
                points: p
                    .axis
                    .iter()
                    .zip(p.series.pred.iter())
                    .filter_map(|(&x, v)| v.map(|y| (x, y)))
                    .collect(),
            },
        ]
    };
    emit(
        "lat_profile.svg".into(),
        line_chart(
            "latitudinal profile",
            "latitude",
            "flash density",
            &profile_series(&report.lat_profile),
        ),
    )?;
    emit(
        "lon_profile_tropics.svg".into(),
        line_chart(
            "longitudinal profile (tropics)",
            "longitude",
            "flash density",
            &profile_series(&report.lon_profile_tropics),
        ),
    )?;
    emit(
        "lon_profile_extratropics.svg".into(),
        line_chart(
            "longitudinal profile (extra-tropics)",
            "longitude",
            "flash density",
            &profile_series(&report.lon_profile_extratropics),
        ),
    )?;

    for (name, pair) in [
        ("north", &report.hemisphere_north),
        ("south", &report.hemisphere_south),
    ] {
        let series = [
            Series {
                label: "observed",
                points: month_points(&pair.obs),
            },
            Series {
                label: "predicted",
                points: month_points(&pair.pred),
            },
        ];
        emit(
            format!("hemisphere_{name}.svg"),
            line_chart(
                &format!("{name}ern hemisphere monthly climatology"),
                "month",
                "flash density",
                &series,
            ),
        )?;
    }
    Ok(files)
}
