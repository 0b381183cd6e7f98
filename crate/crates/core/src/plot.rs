//! Minimal SVG output: particle quantile bands over time and metric bars.

use std::fmt::Write as _;

use crate::eval::quantile;
use crate::filter::TrajectoryFile;

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

/// Per-timestep quantiles `(5, 25, 50, 75, 95)` of one state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub t: usize,
    pub q: [f64; 5],
    pub truth: Option<f64>,
}

pub fn band_rows(traj: &TrajectoryFile, dim: usize, truth: Option<&[Vec<f64>]>) -> Option<Vec<BandRow>> {
    traj.steps
        .iter()
        .map(|s| {
            let parts = s.particles.as_ref()?;
            let v: Vec<f64> = parts.iter().map(|p| p[dim]).collect();
            let q = [0.05, 0.25, 0.5, 0.75, 0.95].map(|p| quantile(&v, p));
            Some(BandRow {
                t: s.t,
                q,
                truth: truth.and_then(|x| x.get(s.t)).map(|x| x[dim]),
            })
        })
        .collect()
}

pub fn band_csv(rows: &[BandRow]) -> String {
    let mut s = String::from("t,q05,q25,q50,q75,q95,truth\n");
    for r in rows {
        let truth = r.truth.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.t, r.q[0], r.q[1], r.q[2], r.q[3], r.q[4], truth);
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0).max(1e-12) * (W - 2.0 * PAD)
    }
    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0).max(1e-12) * (H - 2.0 * PAD)
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn axes(f: &Frame, s: &mut String) {
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    );
    for (v, y) in [(f.y0, H - PAD), (f.y1, PAD)] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.3}</text>",
            PAD - 4.0,
            y + 4.0,
            v
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
        W - PAD,
        H - PAD + 16.0,
        f.x1
    );
}

fn polygon(f: &Frame, rows: &[BandRow], lo: usize, hi: usize, fill: &str, opacity: f64) -> String {
    let mut pts = String::new();
    for r in rows {
        let _ = write!(pts, "{:.2},{:.2} ", f.px(r.t as f64), f.py(r.q[hi]));
    }
    for r in rows.iter().rev() {
        let _ = write!(pts, "{:.2},{:.2} ", f.px(r.t as f64), f.py(r.q[lo]));
    }
    format!("<polygon points=\"{}\" fill=\"{fill}\" fill-opacity=\"{opacity}\" stroke=\"none\"/>\n", pts.trim_end())
}

fn polyline(f: &Frame, pts: impl Iterator<Item = (f64, f64)>, stroke: &str, dash: bool) -> String {
    let p: Vec<String> = pts.map(|(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
    let d = if dash { " stroke-dasharray=\"4 3\"" } else { "" };
    format!("<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"{d}/>\n", p.join(" "))
}

/// 5–95% and 25–75% bands, median, and ground truth when present.
pub fn band_svg(title: &str, rows: &[BandRow]) -> String {
    let mut s = header(title);
    if rows.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for r in rows {
        for v in r.q.iter().chain(r.truth.iter()) {
            y0 = y0.min(*v);
            y1 = y1.max(*v);
        }
    }
    let f = Frame {
        x0: rows[0].t as f64,
        x1: rows[rows.len() - 1].t as f64,
        y0,
        y1,
    };
    axes(&f, &mut s);
    s.push_str(&polygon(&f, rows, 0, 4, "#4477aa", 0.2));
    s.push_str(&polygon(&f, rows, 1, 3, "#4477aa", 0.35));
    s.push_str(&polyline(&f, rows.iter().map(|r| (r.t as f64, r.q[2])), "#4477aa", false));
    if rows.iter().all(|r| r.truth.is_some()) {
        s.push_str(&polyline(
            &f,
            rows.iter().map(|r| (r.t as f64, r.truth.unwrap_or_default())),
            "black",
            true,
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Bars with optional whiskers of half-width `spread / 2`.
pub fn bar_svg(title: &str, labels: &[String], values: &[f64], spread: Option<&[f64]>) -> String {
    let mut s = header(title);
    if values.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let half = |i: usize| spread.map_or(0.0, |v| v[i] / 2.0);
    let lo = values.iter().enumerate().map(|(i, v)| v - half(i)).fold(0.0, f64::min);
    let hi = values.iter().enumerate().map(|(i, v)| v + half(i)).fold(0.0, f64::max);
    let f = Frame {
        x0: 0.0,
        x1: values.len() as f64,
        y0: lo,
        y1: if hi > lo { hi } else { lo + 1.0 },
    };
    axes(&f, &mut s);
    let bw = (W - 2.0 * PAD) / values.len() as f64;
    for (i, v) in values.iter().enumerate() {
        let (a, b) = (f.py(0.0), f.py(*v));
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4477aa\"/>",
            f.px(i as f64) + 0.15 * bw,
            a.min(b),
            0.7 * bw,
            (a - b).abs()
        );
        if spread.is_some() {
            let x = f.px(i as f64 + 0.5);
            let _ = writeln!(
                s,
                "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
                f.py(v - half(i)),
                f.py(v + half(i))
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            f.px(i as f64 + 0.5),
            H - PAD + 14.0,
            escape(&labels[i])
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed_enough() {
        let rows: Vec<BandRow> = (0..5)
            .map(|t| BandRow {
                t,
                q: [0.0, 1.0, 2.0, 3.0, 4.0].map(|v| v + t as f64),
                truth: Some(2.0),
            })
            .collect();
        let s = band_svg("a < b", &rows);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a &lt; b"));
        assert_eq!(s.matches("<polygon").count(), 2);
        assert_eq!(band_csv(&rows).lines().count(), 6);
        let b = bar_svg("m", &["x".into(), "y".into()], &[1.0, -0.5], Some(&[0.2, 0.1]));
        assert_eq!(b.matches("<rect").count(), 3);
    }
}
