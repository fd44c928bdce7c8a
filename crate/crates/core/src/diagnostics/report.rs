use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::score::ScoreCard;
use crate::error::{Error, Result};
use crate::spectral::write_text;

fn e(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn scorecard_csv(card: &ScoreCard) -> String {
    let mut s = String::from("metric,scope,value,flag\n");
    for b in &card.bands {
        let _ = writeln!(s, "spatial_log_spectral_distance,{},{},{}", b.band.name, e(b.distance), b.flag());
    }
    for l in &card.temporal {
        let _ = writeln!(s, "temporal_log_spectral_distance,{}_{},{},", l.location.0, l.location.1, e(l.distance));
    }
    if let Some(w1) = card.vorticity_w1 {
        let _ = writeln!(s, "vorticity_wasserstein1,all,{},", e(w1));
    }
    s
}

pub fn spatial_csv(card: &ScoreCard) -> String {
    let mut s = String::from("k,truth,pred\n");
    for (k, (t, p)) in card.spatial_truth.iter().zip(&card.spatial_pred).enumerate() {
        let _ = writeln!(s, "{k},{},{}", e(*t), e(*p));
    }
    s
}

pub fn pdf_csv(card: &ScoreCard) -> String {
    let mut s = String::from("bin_lo,bin_hi,truth,pred\n");
    if let (Some(t), Some(p)) = (&card.pdf_truth, &card.pdf_pred) {
        let edges = t.bins.edges();
        for (i, (a, b)) in t.mass.iter().zip(&p.mass).enumerate() {
            let _ = writeln!(s, "{},{},{},{}", e(edges[i]), e(edges[i + 1]), e(*a), e(*b));
        }
    }
    s
}

pub fn storms_csv(card: &ScoreCard) -> String {
    let p = &card.storm_params;
    let mut s = String::from("region,truth,pred,threshold,min_area,min_lifetime,max_travel\n");
    for r in &card.storms {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.region,
            r.truth,
            r.pred,
            e(p.threshold),
            p.min_area,
            p.min_lifetime,
            e(p.max_travel)
        );
    }
    s
}

/// A named polyline.
pub struct Series<'a> {
    pub name: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Self-contained SVG line chart; with `log` both axes are base-10 logarithmic and
/// non-positive points are dropped.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log: bool) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let tx = |v: f64| if log { v.log10() } else { v };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.x.iter()
                .zip(s.y)
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log || (**x > 0.0 && **y > 0.0)))
                .map(|(&x, &y)| (tx(x), tx(y)))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{L} {T} V{} H{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (vx, vy) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let lab = |v: f64| if log { format!("1e{v:.1}") } else { format!("{v:.3}") };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            px(vx),
            H - B + 16.0,
            lab(vx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#,
            L - 6.0,
            py(vy) + 4.0,
            lab(vy)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, (L + W - R) / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (k, (ser, p)) in series.iter().zip(&pts).enumerate() {
        let color = colors[k % colors.len()];
        if !p.is_empty() {
            let mut d = String::new();
            for (i, &(x, y)) in p.iter().enumerate() {
                let _ = write!(d, "{}{:.2} {:.2}", if i == 0 { "M" } else { " L" }, px(x), py(y));
            }
            let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        }
        let ly = T + 14.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="12" fill="{color}">{}</text>"#,
            W - R - 120.0,
            escape(ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the report files into `out_dir`, creating it if needed.
pub fn emit_report(card: &ScoreCard, out_dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir).map_err(|err| Error::io(out_dir, err))?;
    let mut files: Vec<(String, String)> = vec![
        ("scorecard.csv".into(), scorecard_csv(card)),
        ("spatial_spectrum.csv".into(), spatial_csv(card)),
        ("vorticity_pdf.csv".into(), pdf_csv(card)),
        ("storms.csv".into(), storms_csv(card)),
    ];
    let ks: Vec<f64> = (0..card.spatial_truth.len()).map(|k| k as f64).collect();
    files.push((
        "spatial_spectrum.svg".into(),
        line_plot(
            "Spatial spectrum",
            "wavenumber",
            "power",
            &[
                Series {
                    name: "truth",
                    x: &ks,
                    y: &card.spatial_truth,
                },
                Series {
                    name: "pred",
                    x: &ks,
                    y: &card.spatial_pred,
                },
            ],
            true,
        ),
    ));
    for l in &card.temporal {
        let tag = format!("{}_{}", l.location.0, l.location.1);
        let mut csv = String::from("freq,truth,pred\n");
        for ((f, t), p) in l.freqs.iter().zip(&l.truth).zip(&l.pred) {
            let _ = writeln!(csv, "{},{},{}", e(*f), e(*t), e(*p));
        }
        files.push((format!("temporal_spectrum_{tag}.csv"), csv));
        files.push((
            format!("temporal_spectrum_{tag}.svg"),
            line_plot(
                &format!("Temporal spectrum at ({}, {})", l.location.0, l.location.1),
                "frequency",
                "power",
                &[
                    Series {
                        name: "truth",
                        x: &l.freqs,
                        y: &l.truth,
                    },
                    Series {
                        name: "pred",
                        x: &l.freqs,
                        y: &l.pred,
                    },
                ],
                true,
            ),
        ));
    }
    let (centers, pt, pp) = match (&card.pdf_truth, &card.pdf_pred) {
        (Some(t), Some(p)) => {
            let edges = t.bins.edges();
            let c: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            (c, t.mass.clone(), p.mass.clone())
        }
        _ => (Vec::new(), Vec::new(), Vec::new()),
    };
    files.push((
        "vorticity_pdf.svg".into(),
        line_plot(
            "Vorticity distribution",
            "vorticity",
            "probability",
            &[
                Series {
                    name: "truth",
                    x: &centers,
                    y: &pt,
                },
                Series {
                    name: "pred",
                    x: &centers,
                    y: &pp,
                },
            ],
            false,
        ),
    ));
    let mut names = Vec::new();
    for (name, text) in files {
        write_text(out_dir.join(&name), &text)?;
        names.push(name);
    }
    Ok(names)
}
