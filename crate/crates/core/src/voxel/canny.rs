//! Classical Canny edge detection over a class map rendered as grayscale.
//!
//! Pipeline: 5×5 Gaussian (σ = 1.4), Sobel gradients, non-maximum suppression
//! along the quantized gradient direction, then double-threshold hysteresis.
//! Borders replicate the nearest pixel, so adding a constant to every input
//! value leaves the result unchanged.

use super::{ClassMap, Map2};
use crate::{invalid, Result};

pub const EDGE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyThresholds {
    pub low: f64,
    pub high: f64,
}

impl Default for CannyThresholds {
    fn default() -> Self {
        Self { low: 50.0, high: 100.0 }
    }
}

/// Spreads class IDs over 0..=255 so thresholds are comparable across class counts.
pub fn class_map_to_gray(map: &ClassMap, num_classes: u16) -> Map2<f64> {
    let step = 255.0 / f64::from(num_classes.saturating_sub(1).max(1));
    map.map(|c| f64::from(c) * step)
}

fn gaussian_kernel() -> [f64; 5] {
    const SIGMA: f64 = 1.4;
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn clamped(img: &Map2<f64>, x: isize, y: isize) -> f64 {
    let x = x.clamp(0, img.rows() as isize - 1) as usize;
    let y = y.clamp(0, img.cols() as isize - 1) as usize;
    img.get(x, y)
}

fn smooth(img: &Map2<f64>) -> Map2<f64> {
    let k = gaussian_kernel();
    let (r, c) = (img.rows(), img.cols());
    let mut tmp = Map2::filled(r, c, 0.0);
    for x in 0..r {
        for y in 0..c {
            let v = (0..5).map(|i| k[i] * clamped(img, x as isize, y as isize + i as isize - 2)).sum();
            tmp.set(x, y, v);
        }
    }
    let mut out = Map2::filled(r, c, 0.0);
    for x in 0..r {
        for y in 0..c {
            let v = (0..5).map(|i| k[i] * clamped(&tmp, x as isize + i as isize - 2, y as isize)).sum();
            out.set(x, y, v);
        }
    }
    out
}

/// Edge map with values in {0, 255}.
pub fn canny_sketch(gray: &Map2<f64>, th: CannyThresholds) -> Result<Map2<u8>> {
    if !(th.low >= 0.0 && th.high >= th.low) {
        return Err(invalid("canny thresholds", format!("need high >= low >= 0, got {th:?}")));
    }
    let (rows, cols) = (gray.rows(), gray.cols());
    let s = smooth(gray);
    let mut mag = Map2::filled(rows, cols, 0.0);
    let mut dir = Map2::filled(rows, cols, (0isize, 1isize));
    for x in 0..rows as isize {
        for y in 0..cols as isize {
            let p = |dx: isize, dy: isize| clamped(&s, x + dx, y + dy);
            // gx differentiates across columns, gy across rows.
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            // Snapped so equal plateaus stay equal under rounding noise.
            let m = (gx.hypot(gy) * 1e9).round() / 1e9;
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let d = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            mag.set(x as usize, y as usize, m);
            dir.set(x as usize, y as usize, d);
        }
    }

    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= rows as isize || y >= cols as isize {
            0.0
        } else {
            mag.get(x as usize, y as usize)
        }
    };
    // Strict against the trailing neighbour, non-strict against the leading one,
    // so a plateau of two equal maxima yields a single-pixel line.
    let mut thin = Map2::filled(rows, cols, 0.0);
    for x in 0..rows as isize {
        for y in 0..cols as isize {
            let m = at(x, y);
            if m <= 0.0 {
                continue;
            }
            let (dx, dy) = dir.get(x as usize, y as usize);
            if m > at(x - dx, y - dy) && m >= at(x + dx, y + dy) {
                thin.set(x as usize, y as usize, m);
            }
        }
    }

    let mut out = Map2::filled(rows, cols, 0u8);
    let mut stack = Vec::new();
    for x in 0..rows {
        for y in 0..cols {
            if thin.get(x, y) >= th.high && th.high > 0.0 && out.get(x, y) == 0 {
                out.set(x, y, EDGE);
                stack.push((x, y));
                while let Some((cx, cy)) = stack.pop() {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(rows - 1) {
                        for ny in cy.saturating_sub(1)..=(cy + 1).min(cols - 1) {
                            let v = thin.get(nx, ny);
                            if out.get(nx, ny) == 0 && v > 0.0 && v >= th.low {
                                out.set(nx, ny, EDGE);
                                stack.push((nx, ny));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
