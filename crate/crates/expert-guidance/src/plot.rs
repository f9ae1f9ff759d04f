//! Minimal SVG renderings of the CSV outputs. Best-effort visuals only;
//! nothing downstream reads these files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::denoiser::BackendKind;
use crate::error::Result;
use crate::eval::TrajectoryReport;
use crate::mixture::GaussianMixture;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 48.0;

struct Mapper {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Mapper {
    fn new(xs: impl Iterator<Item = (f64, f64)>) -> Mapper {
        let mut x0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y0 = f64::INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for (x, y) in xs {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y1 = y0 + 1.0;
        }
        Mapper { x0, x1, y0, y1 }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let px = MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN);
        let py = H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN);
        (px, py)
    }
}

fn svg_header() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    )
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// 2-D scatter of samples over the mixture's 1- and 2-sigma component
/// ellipses. Only emitted for two-dimensional observations.
pub fn scatter_svg(path: &Path, samples: &[DVector<f64>], mixture: &GaussianMixture) -> Result<()> {
    if samples.first().is_none_or(|s| s.len() != 2) || mixture.dim() != 2 {
        return Ok(());
    }
    let pts = samples.iter().map(|s| (s[0], s[1]));
    let means = mixture.components().iter().map(|c| (c.mean[0], c.mean[1]));
    let spread = mixture
        .components()
        .iter()
        .flat_map(|c| {
            let r = 2.5 * c.cov.diagonal().amax().sqrt();
            [(c.mean[0] - r, c.mean[1] - r), (c.mean[0] + r, c.mean[1] + r)]
        })
        .collect::<Vec<_>>();
    let m = Mapper::new(pts.clone().chain(means).chain(spread));

    let mut out = svg_header();
    for (k, c) in mixture.components().iter().enumerate() {
        let eig = c.cov.clone().symmetric_eigen();
        let (l0, l1) = (eig.eigenvalues[0].sqrt(), eig.eigenvalues[1].sqrt());
        let angle = eig.eigenvectors[(1, 0)].atan2(eig.eigenvectors[(0, 0)]).to_degrees();
        let (cx, cy) = m.map(c.mean[0], c.mean[1]);
        let sx = (W - 2.0 * MARGIN) / (m.x1 - m.x0);
        let sy = (H - 2.0 * MARGIN) / (m.y1 - m.y0);
        for scale in [1.0, 2.0] {
            let _ = writeln!(
                out,
                "<ellipse cx=\"{cx:.2}\" cy=\"{cy:.2}\" rx=\"{:.2}\" ry=\"{:.2}\" \
                 transform=\"rotate({:.2} {cx:.2} {cy:.2})\" fill=\"none\" \
                 stroke=\"{}\" stroke-width=\"1\" opacity=\"0.6\"/>",
                scale * l0 * sx,
                scale * l1 * sy,
                -angle,
                PALETTE[k % PALETTE.len()],
            );
        }
    }
    for s in samples {
        let (px, py) = m.map(s[0], s[1]);
        let _ = writeln!(
            out,
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"black\" opacity=\"0.55\"/>"
        );
    }
    out.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn draw_panel<F>(out: &mut String, report: &TrajectoryReport, panel: usize, label: &str, value_of: F)
where
    F: Fn(&crate::eval::TrajectoryRow) -> f64,
{
    let m = Mapper::new(report.rows.iter().map(|r| (r.step_index as f64, value_of(r))));
    let y_off = panel as f64 * H / 2.0;
    for (kind, color) in [
        (BackendKind::PosteriorMean, PALETTE[0]),
        (BackendKind::Consistency, PALETTE[1]),
    ] {
        let pts: Vec<(f64, f64)> = report
            .rows_for(kind)
            .iter()
            .map(|r| {
                let (px, py) = m.map(r.step_index as f64, value_of(r));
                (px, py / 2.0 + y_off)
            })
            .collect();
        polyline(out, &pts, color, kind == BackendKind::Consistency);
    }
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{:.2}\" font-size=\"13\" font-family=\"sans-serif\">{label} \
         (solid posterior, dashed consistency)</text>",
        MARGIN,
        y_off + 18.0
    );
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, dashed: bool) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
        coords.join(" ")
    );
}

/// Two-panel line chart of the trajectory report: distribution distance and
/// embedding cosine per step, one series per backend.
pub fn trajectory_svg(path: &Path, report: &TrajectoryReport) -> Result<()> {
    if report.rows.is_empty() {
        return Ok(());
    }
    let mut out = svg_header();
    // Upper panel: sw. Lower panel: cosine. Each gets half the canvas.
    draw_panel(&mut out, report, 0, "sliced Wasserstein", |r| r.sw);
    draw_panel(&mut out, report, 1, "embedding cosine", |r| r.cosine);
    out.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;

    #[test]
    fn scatter_emits_valid_svg() {
        let dir = std::env::temp_dir().join("eg_plot_test");
        let path = dir.join("scatter.svg");
        let gm = benchmark::two_component();
        let samples = gm
            .sample(&crate::mixture::Conditioning::Unrestricted, 1, 50)
            .unwrap();
        scatter_svg(&path, &samples, &gm).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("<ellipse"));
        assert!(text.trim_end().ends_with("</svg>"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
