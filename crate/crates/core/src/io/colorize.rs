//! Flow visualization on the HSV color wheel.

use crate::color::hsv_to_rgb;
use crate::imaging::{FlowField, Image};

/// 99th percentile of the flow magnitude (nearest rank).
pub fn magnitude_percentile(flow: &FlowField, q: f64) -> f32 {
    let mut mags: Vec<f32> = flow.vectors().iter().map(|[u, v]| u.hypot(*v)).collect();
    if mags.is_empty() {
        return 0.0;
    }
    let rank = ((q * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    let (_, kth, _) = mags.select_nth_unstable_by(rank - 1, f32::total_cmp);
    *kth
}

/// Hue follows `atan2(v, u)`, saturation grows with the magnitude relative
/// to `max_magnitude` (the 99th percentile when `None`). Zero motion is
/// white; magnitudes beyond the maximum saturate and are dimmed.
pub fn colorize_flow(flow: &FlowField, max_magnitude: Option<f32>) -> Image {
    let max = max_magnitude.unwrap_or_else(|| magnitude_percentile(flow, 0.99));
    let (h, w) = flow.dims();
    let mut data = Vec::with_capacity(3 * h * w);
    for &[u, v] in flow.vectors() {
        let mag = u.hypot(v);
        let rgb = if max > 0.0 && mag > 0.0 {
            let rel = mag / max;
            let hue = (v.atan2(u) / std::f32::consts::TAU).rem_euclid(1.0);
            let value = if rel > 1.0 { 0.75 } else { 1.0 };
            hsv_to_rgb([hue, rel.min(1.0), value])
        } else {
            [1.0; 3]
        };
        data.extend_from_slice(&rgb);
    }
    Image::from_data(h, w, 3, data).expect("colorized raster matches flow dims")
}
