//! Procedural stand-in for the six NEU surface-defect classes.
//!
//! Every image is an uneven, noisy steel background (random level, tilt and
//! grain) with one defect texture drawn at a random position and
//! orientation. The background level varies more than any defect shifts
//! the mean intensity, so global brightness carries little class signal.

use std::f64::consts::{PI, TAU};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::LabeledImage;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Class names in label order; also lexicographically sorted, so writing and
/// re-loading a folder keeps the labels.
pub const SYNTH_CLASSES: [&str; 6] = [
    "Crack",
    "Inclusion",
    "Patch",
    "Pitted_Surface",
    "Rolled-in_Scale",
    "Scratches",
];

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Area relative to a 64x64 image; object counts scale with it.
    fn area_scale(&self) -> f64 {
        (self.h * self.w) as f64 / 4096.0
    }

    fn len_scale(&self) -> f64 {
        self.area_scale().sqrt()
    }

    /// Adds `amount · coverage` for a thick anti-aliased segment.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), width: f64, amount: f64) {
        let reach = width / 2.0 + 1.0;
        let (x0, x1) = (a.0.min(b.0) - reach, a.0.max(b.0) + reach);
        let (y0, y1) = (a.1.min(b.1) - reach, a.1.max(b.1) + reach);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in clip(y0, self.h)..clip(y1 + 1.0, self.h) {
            for x in clip(x0, self.w)..clip(x1 + 1.0, self.w) {
                let (px, py) = (x as f64, y as f64);
                let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
                let d = ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt();
                let cov = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                self.px[y * self.w + x] += amount * cov;
            }
        }
    }

    /// Rotated filled ellipse with a one-pixel soft edge.
    fn ellipse(&mut self, c: (f64, f64), axes: (f64, f64), angle: f64, amount: f64) {
        let r = axes.0.max(axes.1) + 1.0;
        let (s, co) = angle.sin_cos();
        for y in clip(c.1 - r, self.h)..clip(c.1 + r + 1.0, self.h) {
            for x in clip(c.0 - r, self.w)..clip(c.0 + r + 1.0, self.w) {
                let (dx, dy) = (x as f64 - c.0, y as f64 - c.1);
                let u = (dx * co + dy * s) / axes.0;
                let v = (-dx * s + dy * co) / axes.1;
                let rho = (u * u + v * v).sqrt();
                let cov = ((1.0 - rho) * axes.0.min(axes.1) + 0.5).clamp(0.0, 1.0);
                self.px[y * self.w + x] += amount * cov;
            }
        }
    }

    /// Union of discs, added once where they overlap.
    fn blob(&mut self, discs: &[(f64, f64, f64)], amount: f64) {
        for y in 0..self.h {
            for x in 0..self.w {
                let cov = discs
                    .iter()
                    .map(|&(cx, cy, r)| {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        (r + 0.5 - d).clamp(0.0, 1.0)
                    })
                    .fold(0.0, f64::max);
                self.px[y * self.w + x] += amount * cov;
            }
        }
    }
}

fn clip(v: f64, len: usize) -> usize {
    v.floor().clamp(0.0, len as f64) as usize
}

fn point(r: &mut Rng, c: &Canvas, margin: f64) -> (f64, f64) {
    (
        r.random_range(margin..(c.w as f64 - margin).max(margin + 1.0)),
        r.random_range(margin..(c.h as f64 - margin).max(margin + 1.0)),
    )
}

fn background(r: &mut Rng, h: usize, w: usize) -> Canvas {
    let level = r.random_range(-0.25..0.25);
    let tilt = r.random_range(0.0..0.25);
    let tilt_dir = r.random_range(0.0..TAU);
    let sigma = r.random_range(0.04..0.08);
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let (ts, tc) = tilt_dir.sin_cos();
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 / w as f64 - 0.5;
            let v = y as f64 / h as f64 - 0.5;
            px.push(level + tilt * (u * tc + v * ts) + noise.sample(r));
        }
    }
    Canvas { h, w, px }
}

fn crack(r: &mut Rng, c: &mut Canvas) {
    let amount = -r.random_range(0.6..0.9);
    let width = r.random_range(1.2..2.0);
    let segments = r.random_range(8..14);
    let step = 7.0 * c.len_scale();
    let mut p = point(r, c, 8.0 * c.len_scale());
    let mut heading = r.random_range(0.0..TAU);
    for _ in 0..segments {
        heading += r.random_range(-0.7..0.7);
        let len = step * r.random_range(0.7..1.3);
        let mut q = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
        // Turn back into the image instead of leaving it.
        if q.0 < 0.0 || q.0 >= c.w as f64 || q.1 < 0.0 || q.1 >= c.h as f64 {
            heading += PI;
            q = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
        }
        c.segment(p, q, width, amount);
        p = q;
    }
}

fn inclusion(r: &mut Rng, c: &mut Canvas) {
    let count = (r.random_range(6.0..10.0) * c.area_scale()).round().max(1.0) as usize;
    let s = c.len_scale();
    for _ in 0..count {
        let centre = point(r, c, 4.0 * s);
        let axes = (r.random_range(2.0..3.5) * s, r.random_range(1.6..2.6) * s);
        let amount = r.random_range(0.5..0.8);
        c.ellipse(centre, axes, r.random_range(0.0..PI), amount);
    }
}

fn patch(r: &mut Rng, c: &mut Canvas) {
    let s = c.len_scale();
    let centre = point(r, c, 16.0 * s);
    let discs: Vec<_> = (0..r.random_range(4..8))
        .map(|_| {
            (
                centre.0 + r.random_range(-8.0..8.0) * s,
                centre.1 + r.random_range(-8.0..8.0) * s,
                r.random_range(7.0..12.0) * s,
            )
        })
        .collect();
    c.blob(&discs, r.random_range(0.45..0.7));
}

fn pitted(r: &mut Rng, c: &mut Canvas) {
    let count = (r.random_range(120.0..220.0) * c.area_scale()).round() as usize;
    let s = c.len_scale();
    for _ in 0..count {
        let centre = point(r, c, 0.0);
        let rad = r.random_range(0.8..1.4) * s;
        c.ellipse(centre, (rad, rad), 0.0, -r.random_range(0.4..0.7));
    }
}

fn rolled_in(r: &mut Rng, c: &mut Canvas) {
    let amplitude = r.random_range(0.2..0.35);
    let period = r.random_range(5.0..10.0) * c.len_scale();
    let phase = r.random_range(0.0..TAU);
    let wobble = r.random_range(0.5..2.0);
    let wobble_period = r.random_range(20.0..60.0) * c.len_scale();
    let wobble_phase = r.random_range(0.0..TAU);
    for y in 0..c.h {
        for x in 0..c.w {
            let yy = y as f64 + wobble * (TAU * x as f64 / wobble_period + wobble_phase).sin();
            c.px[y * c.w + x] += amplitude * (TAU * yy / period + phase).sin();
        }
    }
}

fn scratches(r: &mut Rng, c: &mut Canvas) {
    let base_angle = r.random_range(0.0..PI);
    let diag = ((c.w * c.w + c.h * c.h) as f64).sqrt();
    for _ in 0..r.random_range(3..6) {
        let angle = base_angle + r.random_range(-0.08..0.08);
        let (s, co) = angle.sin_cos();
        let centre = point(r, c, 16.0 * c.len_scale());
        let half = diag * r.random_range(0.5..0.7);
        let a = (centre.0 - half * co, centre.1 - half * s);
        let b = (centre.0 + half * co, centre.1 + half * s);
        c.segment(a, b, r.random_range(0.8..1.1), r.random_range(0.6..0.8));
    }
}

fn render(label: usize, size: [usize; 2], r: &mut Rng) -> Vec<f64> {
    let mut c = background(r, size[0], size[1]);
    match label {
        0 => crack(r, &mut c),
        1 => inclusion(r, &mut c),
        2 => patch(r, &mut c),
        3 => pitted(r, &mut c),
        4 => rolled_in(r, &mut c),
        _ => scratches(r, &mut c),
    }
    c.px.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect()
}

/// `n_per_class` single-channel images for each of the six classes, class by
/// class. Image `i` of class `c` depends only on `(seed, c, i)`.
pub fn generate_synthetic(n_per_class: usize, size: [usize; 2], seed: u64) -> Vec<LabeledImage> {
    assert!(size[0] > 0 && size[1] > 0, "image size must be positive");
    let mut out = Vec::with_capacity(n_per_class * SYNTH_CLASSES.len());
    for (label, name) in SYNTH_CLASSES.iter().enumerate() {
        let class_seed = rng::derive(seed, label as u64);
        for i in 0..n_per_class {
            let mut r = rng::seeded(rng::derive(class_seed, i as u64));
            let px = render(label, size, &mut r);
            out.push(LabeledImage {
                pixels: Tensor::new(vec![1, size[0], size[1]], px).expect("positive size"),
                label,
                source_id: format!("synth/{name}/{i:05}"),
            });
        }
    }
    out
}

pub fn synth_class_names() -> Vec<String> {
    SYNTH_CLASSES.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_labels_and_range() {
        let imgs = generate_synthetic(3, [32, 32], 5);
        assert_eq!(imgs.len(), 18);
        for c in 0..6 {
            assert_eq!(imgs.iter().filter(|i| i.label == c).count(), 3);
        }
        assert!(imgs
            .iter()
            .all(|i| i.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn seeded() {
        assert_eq!(generate_synthetic(2, [16, 24], 1), generate_synthetic(2, [16, 24], 1));
        assert_ne!(generate_synthetic(2, [16, 24], 1), generate_synthetic(2, [16, 24], 2));
    }

    #[test]
    fn class_names_are_sorted() {
        let mut sorted = SYNTH_CLASSES;
        sorted.sort();
        assert_eq!(sorted, SYNTH_CLASSES);
    }
}
