//! Minimal static SVG renderings: enough to eyeball a curve, nothing more.

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub errors: Vec<f64>,
    /// Render as a line (model overlay) instead of markers.
    pub line: bool,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 64.0;
const MR: f64 = 24.0;
const MT: f64 = 40.0;
const MB: f64 = 52.0;

const COLORS: [&str; 6] = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085"];

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let mut (x0, x1, y0, y1): (f64, f64, f64, f64);
    x0 = f64::INFINITY;
    x1 = f64::NEG_INFINITY;
    y0 = f64::INFINITY;
    y1 = f64::NEG_INFINITY;
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            let e = s.errors.get(i).copied().unwrap_or(0.0);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y - e);
            y1 = y1.max(y + e);
        }
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let pad = 0.06 * (y1 - y0);
    (x0, x1, y0 - pad, y1 + pad)
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    ));
    // Axes with four ticks each.
    out.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB,
        H - MB
    ));
    for k in 0..=4 {
        let xv = x0 + (x1 - x0) * k as f64 / 4.0;
        let yv = y0 + (y1 - y0) * k as f64 / 4.0;
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n\
             <text x=\"{0}\" y=\"{3}\" text-anchor=\"middle\" font-size=\"11\">{4:.2}</text>\n",
            sx(xv),
            H - MB,
            H - MB + 5.0,
            H - MB + 18.0,
            xv
        ));
        out.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n\
             <text x=\"{3}\" y=\"{4}\" text-anchor=\"end\" font-size=\"11\">{5:.2}</text>\n",
            ML - 5.0,
            sy(yv),
            ML,
            ML - 8.0,
            sy(yv) + 4.0,
            yv
        ));
    }
    if y0 < 0.0 && y1 > 0.0 {
        out.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
            sy(0.0),
            W - MR
        ));
    }
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{xlabel}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{ylabel}</text>\n",
        (ML + W - MR) / 2.0,
        H - 14.0,
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    ));
    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        if s.line {
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" stroke-dasharray=\"6 3\"/>\n",
                path.join(" ")
            ));
        } else {
            for (i, &(x, y)) in s.points.iter().enumerate() {
                let e = s.errors.get(i).copied().unwrap_or(0.0);
                if e > 0.0 {
                    out.push_str(&format!(
                        "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"{color}\"/>\n",
                        sx(x),
                        sy(y - e),
                        sy(y + e)
                    ));
                }
                out.push_str(&format!(
                    "<circle cx=\"{}\" cy=\"{}\" r=\"3.4\" fill=\"{color}\"/>\n",
                    sx(x),
                    sy(y)
                ));
            }
        }
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            W - MR - 170.0,
            MT + 16.0 * si as f64,
            W - MR - 152.0,
            MT + 16.0 * si as f64 + 5.0,
            s.label
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Photon-number bar panels: rows = displacement settings, columns =
/// overlap settings; reconstructed bars with the forward model as outlines.
/// Input rows: (amp, overlap, n, p, std, p_forward).
pub fn pn_grid(rows: &[Vec<f64>]) -> String {
    let mut amps: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    amps.sort_by(f64::total_cmp);
    amps.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut overlaps: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    overlaps.sort_by(|a, b| b.total_cmp(a));
    overlaps.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let (pw, ph) = (300.0, 180.0);
    let width = 60.0 + pw * overlaps.len() as f64;
    let height = 40.0 + ph * amps.len() as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    );
    let n_max = rows.iter().map(|r| r[2] as usize).max().unwrap_or(0);
    let p_max = rows
        .iter()
        .map(|r| r[3].max(r[5]))
        .fold(0.0_f64, f64::max)
        .max(1e-6);
    for (ai, &amp) in amps.iter().enumerate() {
        for (oi, &overlap) in overlaps.iter().enumerate() {
            let x0 = 60.0 + pw * oi as f64;
            let y0 = 40.0 + ph * ai as f64;
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">amp {amp:.2}, M = {overlap:.2}</text>\n",
                x0 + pw / 2.0,
                y0 + 12.0
            ));
            out.push_str(&format!(
                "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n",
                x0 + 10.0,
                y0 + ph - 24.0,
                x0 + pw - 10.0
            ));
            let bw = (pw - 20.0) / (n_max + 1) as f64;
            for r in rows.iter().filter(|r| {
                (r[0] - amp).abs() < 1e-12 && (r[1] - overlap).abs() < 1e-12
            }) {
                let n = r[2] as usize;
                let bx = x0 + 10.0 + bw * n as f64;
                let bh = (r[3] / p_max) * (ph - 50.0);
                let fh = (r[5] / p_max) * (ph - 50.0);
                out.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#2980b9\" fill-opacity=\"0.7\"/>\n",
                    bx + bw * 0.15,
                    y0 + ph - 24.0 - bh,
                    bw * 0.7,
                    bh
                ));
                out.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#c0392b\"/>\n",
                    bx + bw * 0.15,
                    y0 + ph - 24.0 - fh,
                    bw * 0.7,
                    fh
                ));
                let err = (r[4] / p_max) * (ph - 50.0);
                if err > 0.0 {
                    let cx = bx + bw * 0.5;
                    out.push_str(&format!(
                        "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                        y0 + ph - 24.0 - bh - err,
                        y0 + ph - 24.0 - (bh - err).max(0.0)
                    ));
                }
                if ai + 1 == amps.len() {
                    out.push_str(&format!(
                        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{n}</text>\n",
                        bx + bw * 0.5,
                        y0 + ph - 10.0
                    ));
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
