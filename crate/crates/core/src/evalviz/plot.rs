use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LneError, Result};

use super::pca::{pca_2d, Pca2};
use super::robust::{robust_quadratic_fit, QuadraticFit};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 540.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 30.0;
const PLOT_W: f64 = 500.0;
const PLOT_H: f64 = 460.0;
const CURVE_SAMPLES: usize = 200;

/// Per-arrow colour key.
#[derive(Clone, Debug, PartialEq)]
pub enum ColorKey {
    /// Continuous key (age at the first scan), viridis-mapped.
    Age(Vec<f64>),
    /// Categorical key (group name).
    Group(Vec<String>),
}

impl ColorKey {
    fn len(&self) -> usize {
        match self {
            ColorKey::Age(v) => v.len(),
            ColorKey::Group(v) => v.len(),
        }
    }

    fn label(&self, i: usize) -> String {
        match self {
            ColorKey::Age(v) => format!("{}", v[i]),
            ColorKey::Group(v) => v[i].clone(),
        }
    }
}

/// Trajectory vectors projected onto the top two principal axes of the
/// union of start and end latents, with a robust quadratic through all
/// projected points (first axis as abscissa).
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFieldPlot {
    pub start: Vec<[f64; 2]>,
    pub end: Vec<[f64; 2]>,
    pub key: ColorKey,
    pub curve: QuadraticFit,
    pub pca: Pca2,
}

pub fn build_field_plot(z_t: &[Vec<f64>], z_s: &[Vec<f64>], key: ColorKey) -> Result<TrajectoryFieldPlot> {
    if z_t.len() != z_s.len() || key.len() != z_t.len() {
        return Err(LneError::Shape(format!(
            "{} start points, {} end points, {} colour keys",
            z_t.len(),
            z_s.len(),
            key.len()
        )));
    }
    let union: Vec<Vec<f64>> = z_t.iter().chain(z_s).cloned().collect();
    let pca = pca_2d(&union)?;
    let start = pca.project_all(z_t);
    let end = pca.project_all(z_s);
    let (xs, ys): (Vec<f64>, Vec<f64>) = start.iter().chain(&end).map(|p| (p[0], p[1])).unzip();
    let curve = robust_quadratic_fit(&xs, &ys)?;
    Ok(TrajectoryFieldPlot {
        start,
        end,
        key,
        curve,
        pca,
    })
}

/// Data → pixel map: uniform scale, y axis flipped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMap {
    pub x0: f64,
    pub y0: f64,
    pub scale: f64,
    pub px0: f64,
    pub py0: f64,
}

impl PixelMap {
    fn fit(points: &[[f64; 2]]) -> Self {
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            xmin = xmin.min(p[0]);
            xmax = xmax.max(p[0]);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
        }
        let span_x = (xmax - xmin).max(1e-12);
        let span_y = (ymax - ymin).max(1e-12);
        let scale = (PLOT_W / span_x).min(PLOT_H / span_y) * 0.95;
        PixelMap {
            x0: (xmin + xmax) / 2.0,
            y0: (ymin + ymax) / 2.0,
            scale,
            px0: LEFT + PLOT_W / 2.0,
            py0: TOP + PLOT_H / 2.0,
        }
    }

    pub fn to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        [self.px0 + (p[0] - self.x0) * self.scale, self.py0 - (p[1] - self.y0) * self.scale]
    }

    pub fn to_data(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.px0) / self.scale + self.x0, (self.py0 - p[1]) / self.scale + self.y0]
    }
}

/// Viridis sampled at nine evenly spaced points; linear interpolation in between.
const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

const CATEGORY10: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn viridis(t: f64) -> [u8; 3] {
    let x = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for k in 0..3 {
        let (a, b) = (VIRIDIS[i][k] as f64, VIRIDIS[i + 1][k] as f64);
        out[k] = (a + (b - a) * f).round() as u8;
    }
    out
}

fn group_names(v: &[String]) -> Vec<String> {
    let mut names = v.to_vec();
    names.sort();
    names.dedup();
    names
}

fn colors(key: &ColorKey) -> Vec<String> {
    match key {
        ColorKey::Age(v) => {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            v.iter()
                .map(|a| {
                    let t = if hi > lo { (a - lo) / (hi - lo) } else { 0.5 };
                    hex(viridis(t))
                })
                .collect()
        }
        ColorKey::Group(v) => {
            let names = group_names(v);
            v.iter()
                .map(|g| {
                    let k = names.iter().position(|n| n == g).expect("name present");
                    hex(CATEGORY10[k % CATEGORY10.len()])
                })
                .collect()
        }
    }
}

/// Vector-graphics rendering. Arrow endpoints are written in pixel space
/// at full precision; the `data-*` attributes of the arrow group give the
/// affine map back to data coordinates.
pub fn render_svg(plot: &TrajectoryFieldPlot) -> String {
    let all: Vec<[f64; 2]> = plot.start.iter().chain(&plot.end).copied().collect();
    let map = PixelMap::fit(&all);
    let cols = colors(&plot.key);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<defs><clipPath id="plot-area"><rect x="{LEFT}" y="{TOP}" width="{PLOT_W}" height="{PLOT_H}"/></clipPath></defs>"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{PLOT_W}" height="{PLOT_H}" fill="none" stroke="#444444"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">PC1</text>"#,
        LEFT + PLOT_W / 2.0,
        TOP + PLOT_H + 25.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">PC2</text>"#,
        TOP + PLOT_H / 2.0,
        TOP + PLOT_H / 2.0
    );
    let _ = writeln!(
        s,
        r#"<g id="arrows" clip-path="url(#plot-area)" stroke-width="1.2" data-x0="{}" data-y0="{}" data-scale="{}" data-px0="{}" data-py0="{}">"#,
        map.x0, map.y0, map.scale, map.px0, map.py0
    );
    for i in 0..plot.start.len() {
        let a = map.to_pixel(plot.start[i]);
        let b = map.to_pixel(plot.end[i]);
        let _ = writeln!(
            s,
            r#"<line class="arrow" x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}"/>"#,
            a[0], a[1], b[0], b[1], cols[i]
        );
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = (dx * dx + dy * dy).sqrt();
        if len > 1e-9 {
            let (ux, uy) = (dx / len, dy / len);
            let h = 6.0f64.min(0.5 * len.max(2.0));
            let base = [b[0] - ux * h, b[1] - uy * h];
            let l = [base[0] - uy * h * 0.4, base[1] + ux * h * 0.4];
            let r = [base[0] + uy * h * 0.4, base[1] - ux * h * 0.4];
            let _ = writeln!(
                s,
                r#"<polygon class="head" points="{:.3},{:.3} {:.3},{:.3} {:.3},{:.3}" fill="{}"/>"#,
                b[0], b[1], l[0], l[1], r[0], r[1], cols[i]
            );
        }
    }
    s.push_str("</g>\n");
    let x_lo = map.to_data([LEFT, 0.0])[0];
    let x_hi = map.to_data([LEFT + PLOT_W, 0.0])[0];
    let mut pts = String::new();
    for k in 0..=CURVE_SAMPLES {
        let x = x_lo + (x_hi - x_lo) * k as f64 / CURVE_SAMPLES as f64;
        let p = map.to_pixel([x, plot.curve.eval(x)]);
        let _ = write!(pts, "{:.3},{:.3} ", p[0], p[1]);
    }
    let _ = writeln!(
        s,
        r##"<polyline id="curve" clip-path="url(#plot-area)" points="{}" fill="none" stroke="#d62728" stroke-width="2.5" data-a="{}" data-b="{}" data-c="{}"/>"##,
        pts.trim_end(),
        plot.curve.a,
        plot.curve.b,
        plot.curve.c
    );
    legend(&mut s, &plot.key);
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String, key: &ColorKey) {
    let x = LEFT + PLOT_W + 30.0;
    let _ = writeln!(s, r#"<g id="legend">"#);
    match key {
        ColorKey::Age(v) => {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(s, r#"<text x="{x}" y="{}">age</text>"#, TOP + 10.0);
            let steps = 10;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let y = TOP + 20.0 + k as f64 * 20.0;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="18" height="18" fill="{}"/><text x="{}" y="{}">{:.1}</text>"#,
                    hex(viridis(t)),
                    x + 24.0,
                    y + 13.0,
                    lo + (hi - lo) * t
                );
            }
        }
        ColorKey::Group(v) => {
            for (k, g) in group_names(v).iter().enumerate() {
                let y = TOP + 20.0 + k as f64 * 20.0;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="18" height="18" fill="{}"/><text x="{}" y="{}">{g}</text>"#,
                    hex(CATEGORY10[k % CATEGORY10.len()]),
                    x + 24.0,
                    y + 13.0
                );
            }
        }
    }
    s.push_str("</g>\n");
}

/// Plain table of arrows in projected (data) coordinates.
pub fn render_csv(plot: &TrajectoryFieldPlot) -> String {
    let mut s = String::from("x_t,y_t,x_s,y_s,color_key\n");
    for i in 0..plot.start.len() {
        let (a, b) = (plot.start[i], plot.end[i]);
        let _ = writeln!(s, "{},{},{},{},{}", a[0], a[1], b[0], b[1], plot.key.label(i));
    }
    s
}

/// Write `field.svg`-style and `field.csv`-style outputs.
pub fn export_field_plot(plot: &TrajectoryFieldPlot, svg_path: &Path, csv_path: &Path) -> Result<()> {
    std::fs::write(svg_path, render_svg(plot)).map_err(|e| LneError::io(svg_path, e))?;
    std::fs::write(csv_path, render_csv(plot)).map_err(|e| LneError::io(csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> TrajectoryFieldPlot {
        let z_t: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i as f64).powi(2) * 0.1, (i as f64 * 0.3).sin()]).collect();
        let z_s: Vec<Vec<f64>> = z_t.iter().map(|z| vec![z[0] + 0.5, z[1] + 0.2, z[2] - 0.1]).collect();
        let ages = (0..12).map(|i| 60.0 + i as f64).collect();
        build_field_plot(&z_t, &z_s, ColorKey::Age(ages)).unwrap()
    }

    #[test]
    fn one_arrow_per_pair_and_deterministic() {
        let p = demo();
        let svg = render_svg(&p);
        assert_eq!(svg.matches(r#"class="arrow""#).count(), 12);
        assert_eq!(render_csv(&p).lines().count(), 13);
        assert_eq!(render_svg(&demo()), svg);
    }

    #[test]
    fn pixel_map_inverts() {
        let m = PixelMap::fit(&[[-1.0, 2.0], [3.0, 5.0]]);
        let p = [0.25, 4.5];
        let back = m.to_data(m.to_pixel(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
    }

    #[test]
    fn age_legend_is_monotone() {
        let svg = render_svg(&demo());
        let legend = &svg[svg.find(r#"<g id="legend">"#).unwrap()..];
        let labels: Vec<f64> = legend
            .split("\">")
            .filter_map(|t| t.split('<').next().and_then(|v| v.parse().ok()))
            .collect();
        assert_eq!(labels.len(), 11);
        assert!(labels.windows(2).all(|w| w[0] < w[1]));
    }
}
