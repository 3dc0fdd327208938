//! Kaplan–Meier curve export for the median-split risk groups: a CSV of the
//! step points and a small SVG step plot (high risk red, low risk blue) with
//! the log-rank p-value annotated.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use survfuse_core::cv::Prediction;
use survfuse_core::head::SurvivalRecord;
use survfuse_core::metrics::{kaplan_meier, log_rank, lower_median, survival_at, KmPoint, LogRank, RiskGroup};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCurve {
    pub group: RiskGroup,
    pub points: Vec<KmPoint>,
    /// Largest observed time in the group; the plot extends the last step to it.
    pub last_time: f64,
}

/// Difference `S_low(t) − S_high(t)` at time `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveGap {
    pub time: f64,
    pub low: f64,
    pub high: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmFigure {
    /// Non-empty groups, low first.
    pub curves: Vec<GroupCurve>,
    /// Present only when both groups are non-empty.
    pub log_rank: Option<LogRank>,
    /// Gap at the median follow-up time, when both groups are present.
    pub gap: Option<CurveGap>,
}

pub fn curve_gap(low: &[KmPoint], high: &[KmPoint], time: f64) -> CurveGap {
    let (l, h) = (survival_at(low, time), survival_at(high, time));
    CurveGap {
        time,
        low: l,
        high: h,
        gap: l - h,
    }
}

pub fn figure_from_predictions(predictions: &[Prediction]) -> Result<KmFigure> {
    if predictions.is_empty() {
        return Err(Error::Usage("no predictions to plot".into()));
    }
    let mut split: [Vec<SurvivalRecord>; 2] = [Vec::new(), Vec::new()];
    for p in predictions {
        let idx = usize::from(p.group == RiskGroup::High);
        split[idx].push(SurvivalRecord::new(p.patient_id.clone(), p.time, p.event)?);
    }
    let mut curves = Vec::new();
    for (records, group) in split.iter().zip([RiskGroup::Low, RiskGroup::High]) {
        if !records.is_empty() {
            curves.push(GroupCurve {
                group,
                points: kaplan_meier(records)?,
                last_time: records.iter().map(|r| r.time).fold(0.0, f64::max),
            });
        }
    }
    let (log_rank, gap) = if curves.len() == 2 {
        let times: Vec<f64> = predictions.iter().map(|p| p.time).collect();
        let median = lower_median(&times).expect("non-empty");
        (
            Some(log_rank(&split[1], &split[0])?),
            Some(curve_gap(&curves[0].points, &curves[1].points, median)),
        )
    } else {
        (None, None)
    };
    Ok(KmFigure { curves, log_rank, gap })
}

/// Three significant digits in scientific notation, e.g. `1.23e-4`.
pub fn format_p(p: f64) -> String {
    format!("{p:.2e}")
}

pub fn curves_csv(figure: &KmFigure) -> String {
    let mut out = String::from("group,time,survival,at_risk\n");
    for c in &figure.curves {
        for p in &c.points {
            writeln!(out, "{},{},{},{}", c.group.as_str(), p.time, p.survival, p.at_risk).expect("write to String");
        }
    }
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn colour(group: RiskGroup) -> &'static str {
    match group {
        RiskGroup::High => "#d62728",
        RiskGroup::Low => "#1f77b4",
    }
}

/// Step plot of both curves; `None` unless both groups are present.
pub fn render_svg(figure: &KmFigure) -> Option<String> {
    let lr = figure.log_rank?;
    let t_max = figure.curves.iter().map(|c| c.last_time).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |t: f64| LEFT + pw * t / t_max;
    let y = |s: f64| TOP + ph * (1.0 - s);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{:.2} {:.2} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        LEFT,
        TOP,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=4 {
        let s = i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{s:.2}</text>"#,
            LEFT - 6.0,
            y(s) + 4.0
        );
        let t = t_max * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t:.1}</text>"#,
            x(t),
            TOP + ph + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">time</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">survival probability</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for (k, c) in figure.curves.iter().enumerate() {
        let mut d = format!("M{:.2} {:.2}", x(0.0), y(1.0));
        for p in c.points.iter().skip(1) {
            let _ = write!(d, " H{:.2} V{:.2}", x(p.time), y(p.survival));
        }
        let _ = write!(d, " H{:.2}", x(c.last_time));
        let _ = writeln!(
            svg,
            r#"<path d="{d}" fill="none" stroke="{}" stroke-width="2"/>"#,
            colour(c.group)
        );
        let ly = TOP + 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="2"/>"#,
            LEFT + pw - 130.0,
            ly - 4.0,
            LEFT + pw - 110.0,
            ly - 4.0,
            colour(c.group)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{} risk</text>"#,
            LEFT + pw - 104.0,
            ly,
            c.group.as_str()
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}">log-rank p = {}</text>"#,
        LEFT + 10.0,
        TOP + ph - 10.0,
        format_p(lr.p_value)
    );
    svg.push_str("</svg>\n");
    Some(svg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmFiles {
    pub csv: PathBuf,
    pub svg: Option<PathBuf>,
}

/// Writes `km.csv` and, when both groups are present, `km.svg` into `dir`.
pub fn emit(figure: &KmFigure, dir: &Path) -> Result<KmFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("km.csv");
    fs::write(&csv, curves_csv(figure)).map_err(|e| Error::io(&csv, e))?;
    let svg = match render_svg(figure) {
        Some(text) => {
            let path = dir.join("km.svg");
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Some(path)
        }
        None => None,
    };
    Ok(KmFiles { csv, svg })
}
