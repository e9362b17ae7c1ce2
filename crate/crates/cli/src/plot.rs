//! Static SVG chart of needle and stage depth over time.

use std::fmt::Write as _;

use b5sim::experiment::{Event, Trace};

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;

const NEEDLE_COLOR: &str = "#1f77b4";
const STAGE_COLOR: &str = "#ff7f0e";

/// Step from {1, 2, 5}·10^k giving about `target` ticks over `span`.
fn nice_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let m = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let step = nice_step(hi - lo, 6.0);
    let mut v = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while v <= hi + 1e-9 * step {
        out.push(if v.abs() < 1e-9 * step { 0.0 } else { v });
        v += step;
    }
    out
}

fn label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Renders the trace as an SVG document. Needle and stage are both zeroed
/// at their first sample. Output depends only on the trace.
pub fn render_svg(trace: &Trace, title: &str) -> anyhow::Result<String> {
    anyhow::ensure!(!trace.is_empty(), "cannot plot an empty trace");
    let rows = &trace.rows;
    let (n0, s0) = (rows[0].needle_tip_z_um, rows[0].stage_z_um);
    let needle: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.needle_tip_z_um - n0)).collect();
    let stage: Vec<(f64, f64)> = rows.iter().map(|r| (r.t, r.stage_z_um - s0)).collect();

    let (t0, t1) = (rows[0].t, rows[rows.len() - 1].t);
    let (t0, t1) = if t1 > t0 { (t0, t1) } else { (t0, t0 + 1.0) };
    let (mut y0, mut y1) = needle
        .iter()
        .chain(&stage)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if y1 - y0 < 1.0 {
        let mid = 0.5 * (y0 + y1);
        (y0, y1) = (mid - 1.0, mid + 1.0);
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |t: f64| LEFT + (t - t0) / (t1 - t0) * plot_w;
    // Depth grows into the tissue; draw it downward like the images.
    let sy = |z: f64| TOP + (z - y0) / (y1 - y0) * plot_h;

    let mut svg = String::new();
    let w = &mut svg;
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#)?;
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(w, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title))?;

    for t in ticks(t0, t1) {
        let x = sx(t);
        writeln!(w, r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e5e5e5"/>"##, TOP + plot_h)?;
        writeln!(w, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, TOP + plot_h + 16.0, label(t))?;
    }
    for z in ticks(y0, y1) {
        let y = sy(z);
        writeln!(w, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e5e5e5"/>"##, LEFT + plot_w)?;
        writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, label(z))?;
    }
    writeln!(w, r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#)?;
    writeln!(w, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Time (s)</text>"#, LEFT + plot_w / 2.0, HEIGHT - 12.0)?;
    writeln!(
        w,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Z position (µm, zeroed, deeper down)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    )?;

    for (event, color, text) in [
        (Event::InsertionComplete, "#2ca02c", "insertion complete"),
        (Event::InjectionEnd, "#d62728", "injection end"),
    ] {
        for row in rows.iter().filter(|r| r.events.contains(event)) {
            let x = sx(row.t);
            writeln!(w, r#"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#, TOP + plot_h)?;
            writeln!(w, r#"<text x="{:.2}" y="{:.2}" fill="{color}">{text}</text>"#, x + 4.0, TOP + 14.0)?;
        }
    }

    for (series, color) in [(&stage, STAGE_COLOR), (&needle, NEEDLE_COLOR)] {
        write!(w, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points=""#)?;
        for (i, (t, z)) in series.iter().enumerate() {
            if i > 0 {
                w.push(' ');
            }
            write!(w, "{:.2},{:.2}", sx(*t), sy(*z))?;
        }
        writeln!(w, r#""/>"#)?;
    }

    let lx = LEFT + plot_w - 150.0;
    for (i, (name, color)) in [("needle tip", NEEDLE_COLOR), ("stage", STAGE_COLOR)].iter().enumerate() {
        let y = TOP + 16.0 + 16.0 * i as f64;
        writeln!(w, r#"<line x1="{lx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 24.0)?;
        writeln!(w, r#"<text x="{:.2}" y="{:.2}">{name}</text>"#, lx + 30.0, y + 4.0)?;
    }
    writeln!(w, "</svg>")?;
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use b5sim::experiment::{Events, TraceRow};

    fn trace(points: &[(f64, f64, f64)]) -> Trace {
        let mut t = Trace::default();
        for &(time, stage, needle) in points {
            t.push(TraceRow {
                t: time,
                stage_z_um: stage,
                true_ilm_z_um: 2500.0 + stage,
                true_rpe_z_um: 2750.0 + stage,
                needle_tip_z_um: needle,
                measured_median_ilm_z_um: None,
                commanded_velocity_um_s: 0.0,
                events: Events::only(Event::Sample),
            });
        }
        t
    }

    fn polylines(svg: &str) -> Vec<&str> {
        svg.split("points=\"").skip(1).map(|s| &s[..s.find('"').unwrap()]).collect()
    }

    #[test]
    fn constant_trace_gives_overlapping_flat_lines() {
        let svg = render_svg(&trace(&[(0.0, 5.0, 2200.0), (1.0, 5.0, 2200.0), (2.0, 5.0, 2200.0)]), "flat").unwrap();
        let lines = polylines(&svg);
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], lines[1]);
        let ys: Vec<&str> = lines[0].split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]));
        assert!(svg.contains("Time (s)") && svg.contains("µm"));
    }

    #[test]
    fn deterministic_and_marked() {
        let mut tr = trace(&[(0.0, 0.0, 2200.0), (1.0, 10.0, 2205.0), (2.0, 0.0, 2201.0)]);
        tr.rows[1].events.insert(Event::InsertionComplete);
        let a = render_svg(&tr, "x").unwrap();
        assert_eq!(a, render_svg(&tr, "x").unwrap());
        assert!(a.contains("insertion complete"));
        assert!(render_svg(&Trace::default(), "x").is_err());
    }

    #[test]
    fn tick_steps() {
        assert_eq!(nice_step(60.0, 6.0), 10.0);
        assert_eq!(ticks(0.0, 60.0).len(), 7);
        assert_eq!(label(-0.0), "0");
        assert_eq!(label(12.5), "12.5");
    }
}
