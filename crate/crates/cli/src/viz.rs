//! Static SVG plots of the matches between two views of one seed image.

use std::fmt::Write;

use ndarray::Array3;
use vicregl::geometry::{CropRect, PositionGrid};
use vicregl::matching::MatchSet;

/// Pixels per seed-image pixel.
const SCALE: f64 = 4.0;
const GAP: f64 = 16.0;
const TITLE: f64 = 20.0;
const VIEW_COLORS: [&str; 2] = ["#e4572e", "#2e86ab"];
const LINE_COLOR: &str = "#f3c614";

/// Everything one plot shows: the seed image, the two views and the matches
/// from view 0 to view 1 under each matching rule.
#[derive(Debug, Clone)]
pub struct Scene {
    /// `3 x H x W` in `[0, 1]`.
    pub image: Array3<f64>,
    pub crops: [CropRect; 2],
    pub grids: [PositionGrid; 2],
    pub location: MatchSet,
    pub feature: MatchSet,
    pub max_lines: usize,
}

impl Scene {
    /// Lines drawn per panel: the best `max_lines` pairs of each set.
    pub fn lines_per_panel(&self) -> [usize; 2] {
        [
            self.location.len().min(self.max_lines),
            self.feature.len().min(self.max_lines),
        ]
    }
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn draw_image(out: &mut String, img: &Array3<f64>, ox: f64, oy: f64) {
    let (_, h, w) = img.dim();
    for i in 0..h {
        let mut j = 0;
        while j < w {
            let rgb = [byte(img[[0, i, j]]), byte(img[[1, i, j]]), byte(img[[2, i, j]])];
            let mut end = j + 1;
            while end < w && [byte(img[[0, i, end]]), byte(img[[1, i, end]]), byte(img[[2, i, end]])] == rgb {
                end += 1;
            }
            writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#{:02x}{:02x}{:02x}"/>"##,
                ox + j as f64 * SCALE,
                oy + i as f64 * SCALE,
                (end - j) as f64 * SCALE,
                SCALE,
                rgb[0],
                rgb[1],
                rgb[2]
            )
            .unwrap();
            j = end;
        }
    }
}

fn draw_view(out: &mut String, crop: &CropRect, grid: &PositionGrid, color: &str, ox: f64, oy: f64) {
    let (h, w) = grid.dims();
    let (x0, y0) = (ox + crop.x0 * SCALE, oy + crop.y0 * SCALE);
    let (cw, ch) = (crop.crop_w * SCALE, crop.crop_h * SCALE);
    writeln!(out, r#"<g stroke="{color}" fill="none">"#).unwrap();
    for i in 1..h {
        let y = y0 + ch * i as f64 / h as f64;
        writeln!(
            out,
            r#"<line x1="{x0:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke-width="0.5"/>"#,
            x0 + cw
        )
        .unwrap();
    }
    for j in 1..w {
        let x = x0 + cw * j as f64 / w as f64;
        writeln!(
            out,
            r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke-width="0.5"/>"#,
            y0 + ch
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<rect x="{x0:.2}" y="{y0:.2}" width="{cw:.2}" height="{ch:.2}" stroke-width="2"/>"#
    )
    .unwrap();
    out.push_str("</g>\n");
}

fn draw_panel(out: &mut String, scene: &Scene, title: &str, matches: &MatchSet, lines: usize, ox: f64) {
    let oy = TITLE;
    writeln!(
        out,
        r#"<text x="{:.2}" y="14" font-family="monospace" font-size="12">{title}</text>"#,
        ox
    )
    .unwrap();
    draw_image(out, &scene.image, ox, oy);
    for v in 0..2 {
        draw_view(out, &scene.crops[v], &scene.grids[v], VIEW_COLORS[v], ox, oy);
    }
    writeln!(out, r#"<g stroke="{LINE_COLOR}" stroke-width="1.5">"#).unwrap();
    for m in matches.pairs.iter().take(lines) {
        let (ya, xa) = scene.grids[0].at(m.src.0, m.src.1);
        let (yb, xb) = scene.grids[1].at(m.dst.0, m.dst.1);
        writeln!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
            ox + xa * SCALE,
            oy + ya * SCALE,
            ox + xb * SCALE,
            oy + yb * SCALE
        )
        .unwrap();
    }
    out.push_str("</g>\n");
    for (v, color) in VIEW_COLORS.iter().enumerate() {
        let ends: Vec<(f64, f64)> = matches
            .pairs
            .iter()
            .take(lines)
            .map(|m| {
                if v == 0 {
                    scene.grids[0].at(m.src.0, m.src.1)
                } else {
                    scene.grids[1].at(m.dst.0, m.dst.1)
                }
            })
            .collect();
        for (y, x) in ends {
            writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                ox + x * SCALE,
                oy + y * SCALE
            )
            .unwrap();
        }
    }
}

/// Renders the location-based panel left of the feature-based panel.
pub fn render_svg(scene: &Scene) -> String {
    let (_, h, w) = scene.image.dim();
    let pw = w as f64 * SCALE;
    let width = 2.0 * pw + GAP;
    let height = h as f64 * SCALE + TITLE;
    let [nl, nf] = scene.lines_per_panel();
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    )
    .unwrap();
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    draw_panel(&mut out, scene, "location", &scene.location, nl, 0.0);
    draw_panel(&mut out, scene, "feature", &scene.feature, nf, pw + GAP);
    out.push_str("</svg>\n");
    out
}
