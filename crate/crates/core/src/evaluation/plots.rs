//! Plain SVG plots with sidecar CSV tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{error_sd, mae, PredictionRow};
use crate::error::{Error, Result};
use crate::volume::Sex;

/// Half-width of the residual band in SDs (95% under normality).
pub const BAND_Z: f64 = 1.96;

const W: f64 = 480.0;
const H: f64 = 420.0;
const M: f64 = 56.0;
const MALE: &str = "#1f77b4";
const FEMALE: &str = "#d62728";

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub scatter_svg: PathBuf,
    pub scatter_csv: PathBuf,
    pub band_half_width: f64,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Predicted-vs-true scatter coloured by sex, with the identity line, a
/// band of `BAND_Z` residual SDs around it and an MAE ± SD annotation.
pub fn scatter_svg(y: &[f64], y_hat: &[f64], sexes: &[Sex], title: &str) -> Result<String> {
    let m = mae(y, y_hat)?;
    let sd = error_sd(y, y_hat)?;
    let band = BAND_Z * sd;
    let lo = y.iter().chain(y_hat).copied().fold(f64::INFINITY, f64::min) - band - 1.0;
    let hi = y.iter().chain(y_hat).copied().fold(f64::NEG_INFINITY, f64::max) + band + 1.0;
    let sx = |v: f64| M + (v - lo) / (hi - lo) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
    // band: parallelogram between y = x - band and y = x + band
    let _ = writeln!(
        s,
        r#"<polygon points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="gray" fill-opacity="0.25" stroke="none"/>"#,
        sx(lo),
        sy(lo + band),
        sx(hi),
        sy(hi + band),
        sx(hi),
        sy(hi - band),
        sx(lo),
        sy(lo - band)
    );
    let _ = writeln!(s, r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - 2.0 * M, H - 2.0 * M);
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-dasharray="4 3"/>"#,
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    );
    for ((&t, &p), &sex) in y.iter().zip(y_hat).zip(sexes) {
        let c = if sex == Sex::Male { MALE } else { FEMALE };
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}" fill-opacity="0.7"/>"#, sx(t), sy(p));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">True age (years)</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">Predicted age (years)</text>"#,
        H / 2.0,
        H / 2.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">MAE = {m:.2} ± {sd:.2}</text>"#, M + 8.0, M + 18.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">band ±{band:.2}</text>"#, M + 8.0, M + 34.0);
    let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="4" fill="{MALE}"/><text x="{}" y="{}" font-size="11">male</text>"#, W - M - 70.0, H - M - 30.0, W - M - 60.0, H - M - 26.0);
    let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="4" fill="{FEMALE}"/><text x="{}" y="{}" font-size="11">female</text>"#, W - M - 70.0, H - M - 14.0, W - M - 60.0, H - M - 10.0);
    let _ = writeln!(s, r#"<text x="{M}" y="{}" font-size="10" text-anchor="middle">{lo:.0}</text>"#, H - M + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{hi:.0}</text>"#, W - M, H - M + 14.0);
    s.push_str("</svg>\n");
    Ok(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::Io)
}

/// Writes `<stem>.svg` and `<stem>.csv` for the scatter plot of the
/// reported (ensemble) prediction.
pub fn emit_plots(rows: &[PredictionRow], out_dir: &Path, stem: &str, title: &str) -> Result<PlotFiles> {
    create_dir(out_dir)?;
    let y: Vec<f64> = rows.iter().map(|r| r.y_true).collect();
    let y_hat: Vec<f64> = rows.iter().map(|r| r.y_pred_ensemble).collect();
    let sexes: Vec<Sex> = rows.iter().map(|r| r.sex).collect();
    let svg = scatter_svg(&y, &y_hat, &sexes, title)?;
    let scatter_svg = out_dir.join(format!("{stem}.svg"));
    fs::write(&scatter_svg, svg)?;

    let sd = error_sd(&y, &y_hat)?;
    let scatter_csv = out_dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&scatter_csv)?;
    w.write_record(["subject_id", "y_true", "y_pred", "residual", "sex", "band_lower", "band_upper"])?;
    for r in rows {
        let res = r.y_true - r.y_pred_ensemble;
        w.write_record([
            r.subject_id.clone(),
            r.y_true.to_string(),
            r.y_pred_ensemble.to_string(),
            res.to_string(),
            r.sex.to_string(),
            (r.y_true - BAND_Z * sd).to_string(),
            (r.y_true + BAND_Z * sd).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(PlotFiles { scatter_svg, scatter_csv, band_half_width: BAND_Z * sd })
}

/// One model's per-bracket errors: `(bracket label, MAE, SD)`, `None` for
/// empty brackets.
#[derive(Debug, Clone, PartialEq)]
pub struct BracketSeries {
    pub model: String,
    pub values: Vec<(String, Option<(f64, f64)>)>,
}

/// Grouped bars of MAE per bracket per model with SD error bars.
pub fn bracket_bars_svg(series: &[BracketSeries], title: &str) -> String {
    let palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3"];
    let n_groups = series.first().map_or(0, |s| s.values.len()).max(1);
    let n_series = series.len().max(1);
    let width = (M * 2.0 + n_groups as f64 * (n_series as f64 * 12.0 + 18.0)).max(W);
    let top = series
        .iter()
        .flat_map(|s| s.values.iter().filter_map(|(_, v)| v.map(|(m, sd)| m + sd)))
        .fold(1.0_f64, f64::max)
        * 1.1;
    let plot_w = width - 2.0 * M;
    let group_w = plot_w / n_groups as f64;
    let bar_w = group_w * 0.8 / n_series as f64;
    let sy = |v: f64| H - M - v / top * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{H}" viewBox="0 0 {width:.0} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#, width / 2.0, esc(title));
    let _ = writeln!(s, r#"<line x1="{M}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, H - M, width - M, H - M);
    let _ = writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{:.2}" stroke="black"/>"#, H - M);
    for k in 0..=4 {
        let v = top * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.2}" font-size="10" text-anchor="end">{v:.1}</text>"#, M - 4.0, sy(v) + 3.0);
    }
    for (si, ser) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        for (g, (_, v)) in ser.values.iter().enumerate() {
            let Some((m, sd)) = v else { continue };
            let x = M + g as f64 * group_w + group_w * 0.1 + si as f64 * bar_w;
            let _ = writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#, sy(*m), bar_w * 0.9, sy(0.0) - sy(*m));
            let cx = x + bar_w * 0.45;
            let _ = writeln!(s, r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#, sy(m + sd), sy((m - sd).max(0.0)));
        }
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            width - M - 90.0,
            M + 14.0 * si as f64,
            width - M - 76.0,
            M + 9.0 + 14.0 * si as f64,
            esc(&ser.model)
        );
    }
    if let Some(first) = series.first() {
        for (g, (label, _)) in first.values.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
                M + (g as f64 + 0.5) * group_w,
                H - M + 16.0,
                esc(label)
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="12">Age bracket</text>"#, width / 2.0, H - 14.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">MAE (years)</text>"#, H / 2.0, H / 2.0);
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.svg` and `<stem>.csv` for the bracket bar chart.
pub fn emit_bracket_bars(series: &[BracketSeries], out_dir: &Path, stem: &str, title: &str) -> Result<(PathBuf, PathBuf)> {
    create_dir(out_dir)?;
    let svg = out_dir.join(format!("{stem}.svg"));
    fs::write(&svg, bracket_bars_svg(series, title))?;
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["model", "bracket", "mae", "sd"])?;
    for ser in series {
        for (label, v) in &ser.values {
            let (m, sd) = v.map_or((String::new(), String::new()), |(m, sd)| (m.to_string(), sd.to_string()));
            w.write_record([ser.model.as_str(), label.as_str(), &m, &sd])?;
        }
    }
    w.flush()?;
    Ok((svg, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn row(id: usize, t: f64, p: f64, sex: Sex) -> PredictionRow {
        PredictionRow { subject_id: format!("s{id}"), y_true: t, y_pred_final: p, y_pred_d: BTreeMap::new(), y_pred_ensemble: p, sex, sex_prob: None }
    }

    #[test]
    fn perfect_predictions_have_zero_band() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<_> = (0..5).map(|i| row(i, 20.0 + i as f64, 20.0 + i as f64, Sex::Male)).collect();
        let f = emit_plots(&rows, dir.path(), "scatter", "t").unwrap();
        assert_eq!(f.band_half_width, 0.0);
        let text = fs::read_to_string(&f.scatter_csv).unwrap();
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn band_is_196_sd() {
        let dir = tempfile::tempdir().unwrap();
        // residuals +2, -2 -> SD 2
        let rows = vec![row(0, 30.0, 28.0, Sex::Female), row(1, 40.0, 42.0, Sex::Male)];
        let f = emit_plots(&rows, dir.path(), "scatter", "t").unwrap();
        assert!((f.band_half_width - 3.92).abs() < 1e-12);
        assert!(fs::read_to_string(&f.scatter_svg).unwrap().contains("MAE = 2.00 ± 2.00"));
    }

    #[test]
    fn bar_chart_writes_one_row_per_bar() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![
            BracketSeries { model: "A".into(), values: vec![("<=25".into(), Some((2.0, 1.0))), (">25".into(), None)] },
            BracketSeries { model: "B".into(), values: vec![("<=25".into(), Some((3.0, 0.5))), (">25".into(), Some((1.0, 0.2)))] },
        ];
        let (svg, csv) = emit_bracket_bars(&series, dir.path(), "bars", "t").unwrap();
        assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));
        assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 5);
    }
}
