//! Minimal SVG scatter plots for 2-D point sets.

use crate::error::{Error, Result};
use crate::points::Points;

const SIZE: f64 = 480.0;
const PAD: f64 = 24.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter of the first two coordinates on a square canvas scaled to the
/// data's bounding box.
pub fn scatter(points: &Points, title: &str) -> Result<String> {
    if points.dim() != 2 {
        return Err(Error::InvalidParameter(format!(
            "scatter plots need 2-D points, got dim {}",
            points.dim()
        )));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in points.rows().filter(|r| r.iter().all(|v| v.is_finite())) {
        for j in 0..2 {
            lo[j] = lo[j].min(r[j]);
            hi[j] = hi[j].max(r[j]);
        }
    }
    if !lo[0].is_finite() {
        lo = [-1.0, -1.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let scale = (SIZE - 2.0 * PAD) / span;
    let mut out = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<title>{}</title>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<g fill=\"steelblue\" fill-opacity=\"0.5\">\n",
        escape(title)
    );
    for r in points.rows().filter(|r| r.iter().all(|v| v.is_finite())) {
        let cx = PAD + (r[0] - lo[0]) * scale;
        let cy = SIZE - PAD - (r[1] - lo[1]) * scale;
        out.push_str(&format!("<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"1.5\"/>\n"));
    }
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}
