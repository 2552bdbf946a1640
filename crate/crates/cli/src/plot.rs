//! Static SVG line charts over summary CSV logs. Output is a pure function
//! of the input rows, so regenerating a chart is byte-stable.

use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 62.0;
const RIGHT: f64 = 620.0;
const TOP: f64 = 34.0;
const BOTTOM: f64 = 356.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One labeled line.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads `(t, <metric>)` pairs from `dir/summary.csv`, skipping rows where
/// the metric is not finite.
pub fn read_series(dir: &Path, metric: &str) -> Result<Series, String> {
    let path = dir.join("summary.csv");
    let text =
        std::fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format!("{} is empty", path.display()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let t_col = cols
        .iter()
        .position(|c| *c == "t")
        .ok_or_else(|| format!("{} has no t column", path.display()))?;
    let m_col = cols.iter().position(|c| *c == metric).ok_or_else(|| {
        format!(
            "{} has no column {metric:?} (available: {})",
            path.display(),
            cols.join(", ")
        )
    })?;
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(format!("{} row {} has {} fields", path.display(), i + 2, fields.len()));
        }
        let t: f64 = fields[t_col]
            .parse()
            .map_err(|e| format!("{} row {}: bad t: {e}", path.display(), i + 2))?;
        let v: f64 = fields[m_col]
            .parse()
            .map_err(|e| format!("{} row {}: bad {metric}: {e}", path.display(), i + 2))?;
        if v.is_finite() {
            points.push((t, v));
        }
    }
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(Series { label, points })
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn ranges(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if xmax - xmin < 1e-12 {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if ymax - ymin < 1e-12 {
        ymin -= 0.5;
        ymax += 0.5;
    }
    ((xmin, xmax), (ymin, ymax))
}

/// Renders the series as a minimal line chart: axes with five ticks each, a
/// legend, and one polyline per series.
pub fn line_chart(metric: &str, series: &[Series]) -> String {
    let ((xmin, xmax), (ymin, ymax)) = ranges(series);
    let sx = |x: f64| LEFT + (x - xmin) / (xmax - xmin) * (RIGHT - LEFT);
    let sy = |y: f64| BOTTOM - (y - ymin) / (ymax - ymin) * (BOTTOM - TOP);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"20\" font-size=\"14\">{metric} vs t</text>\n"
    ));
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));
    out.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{RIGHT}\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = xmin + f * (xmax - xmin);
        let yv = ymin + f * (ymax - ymin);
        let xp = sx(xv);
        let yp = sy(yv);
        out.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{BOTTOM}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            xp,
            xp,
            BOTTOM + 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            xp,
            BOTTOM + 20.0,
            fmt_tick(xv)
        ));
        out.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{LEFT}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            LEFT - 5.0,
            yp,
            yp
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 8.0,
            yp + 4.0,
            fmt_tick(yv)
        ));
    }
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">t</text>\n",
        (LEFT + RIGHT) / 2.0,
        BOTTOM + 38.0
    ));
    // Series lines.
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if !s.points.is_empty() {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            out.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        // Legend entry.
        let ly = TOP + 14.0 + 16.0 * i as f64;
        out.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            LEFT + 10.0,
            ly - 9.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            LEFT + 26.0,
            ly,
            s.label
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_series() -> Vec<Series> {
        vec![
            Series {
                label: "a".into(),
                points: vec![(0.0, 1.0), (10.0, 0.5), (20.0, 0.25)],
            },
            Series {
                label: "b".into(),
                points: vec![(0.0, 0.9), (10.0, 0.7), (20.0, 0.6)],
            },
        ]
    }

    #[test]
    fn chart_is_deterministic_and_has_all_series() {
        let a = line_chart("global_loss", &demo_series());
        let b = line_chart("global_loss", &demo_series());
        assert_eq!(a, b);
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains(">a</text>"));
        assert!(a.contains(">b</text>"));
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn degenerate_ranges_are_padded() {
        let s = vec![Series {
            label: "flat".into(),
            points: vec![(0.0, 1.0), (5.0, 1.0)],
        }];
        let svg = line_chart("id_acc", &s);
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(0.25), "0.25");
        assert_eq!(fmt_tick(10.0), "10");
        assert_eq!(fmt_tick(1e-6), "1.0e-6");
    }

    #[test]
    fn read_series_skips_nan_rows() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("summary.csv"),
            "t,global_loss,global_penalty_mean,id_acc,ood_acc\n0,1.5,0,NaN,NaN\n10,0.5,0,0.9,0.8\n",
        )
        .unwrap();
        let s = read_series(dir.path(), "id_acc").unwrap();
        assert_eq!(s.points, vec![(10.0, 0.9)]);
        let s = read_series(dir.path(), "global_loss").unwrap();
        assert_eq!(s.points.len(), 2);
        assert!(read_series(dir.path(), "nope").unwrap_err().contains("available"));
    }
}
