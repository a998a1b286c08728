//! Deterministic synthetic digit dataset.
//!
//! Renders the ten digits as stroke glyphs at 28x28 with randomized affine
//! jitter, stroke width, blur, contrast, and pixel noise, so the full
//! training and verification pipeline runs without any downloaded data. A
//! slice of each split is rendered heavily blurred and low-contrast on
//! purpose: those hard samples are what give the norm-bucket diagnostics
//! something to separate.
//!
//! Everything is a pure function of `(count, seed)`; the images are emitted
//! as `u8` pixels so they round-trip bit-exactly through IDX files.

use crate::data::LabeledDataset;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMG_SIDE: usize = 28;
const GLYPH_OFFSET: f64 = 4.0;
const GLYPH_SCALE: f64 = 20.0;
/// Fraction of samples rendered as hard (heavy blur, low contrast).
const HARD_FRACTION: f64 = 0.18;

type Point = (f64, f64);

/// Append an elliptical arc sampled as a polyline. Angles are in degrees in
/// a y-down frame: 0 points right, 90 down, 270 up.
fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64, steps: usize) -> Vec<Point> {
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn line(a: Point, b: Point) -> Vec<Point> {
    vec![a, b]
}

/// Stroke polylines for one digit in the unit glyph box (y down).
fn glyph(digit: u8) -> Vec<Vec<Point>> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.26, 0.36, 0.0, 360.0, 24)],
        1 => vec![
            line((0.55, 0.15), (0.55, 0.85)),
            line((0.55, 0.15), (0.40, 0.30)),
        ],
        2 => vec![
            arc(0.5, 0.34, 0.24, 0.19, 180.0, 395.0, 14),
            line((0.70, 0.43), (0.27, 0.85)),
            line((0.27, 0.85), (0.76, 0.85)),
        ],
        3 => vec![
            arc(0.45, 0.32, 0.24, 0.18, 200.0, 440.0, 14),
            arc(0.45, 0.67, 0.26, 0.19, 280.0, 520.0, 14),
        ],
        4 => vec![
            line((0.65, 0.15), (0.65, 0.85)),
            line((0.65, 0.15), (0.30, 0.60)),
            line((0.30, 0.60), (0.80, 0.60)),
        ],
        5 => vec![
            line((0.70, 0.17), (0.33, 0.17)),
            line((0.33, 0.17), (0.31, 0.47)),
            arc(0.48, 0.64, 0.24, 0.20, 240.0, 520.0, 16),
        ],
        6 => vec![
            arc(0.55, 0.42, 0.24, 0.30, 300.0, 160.0, 14),
            arc(0.50, 0.66, 0.20, 0.18, 0.0, 360.0, 20),
        ],
        7 => vec![
            line((0.27, 0.17), (0.74, 0.17)),
            line((0.74, 0.17), (0.42, 0.85)),
        ],
        8 => vec![
            arc(0.5, 0.32, 0.19, 0.16, 0.0, 360.0, 20),
            arc(0.5, 0.66, 0.23, 0.19, 0.0, 360.0, 20),
        ],
        9 => vec![
            arc(0.5, 0.34, 0.20, 0.17, 0.0, 360.0, 20),
            vec![(0.70, 0.36), (0.66, 0.62), (0.56, 0.85)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

struct Affine {
    m: [f64; 4],
    t: [f64; 2],
}

impl Affine {
    fn apply(&self, p: Point) -> Point {
        let (x, y) = (p.0 - 0.5, p.1 - 0.5);
        (
            self.m[0] * x + self.m[1] * y + 0.5 + self.t[0],
            self.m[2] * x + self.m[3] * y + 0.5 + self.t[1],
        )
    }
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn gaussian_blur(img: &mut [f64], side: usize, sigma: f64) {
    if sigma < 0.05 {
        return;
    }
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let w = (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        sum += w;
    }
    kernel.iter_mut().for_each(|w| *w /= sum);

    let mut tmp = vec![0.0; img.len()];
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sx = (x as isize + k as isize - radius).clamp(0, side as isize - 1) as usize;
                acc += w * img[y * side + sx];
            }
            tmp[y * side + x] = acc;
        }
    }
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sy = (y as isize + k as isize - radius).clamp(0, side as isize - 1) as usize;
                acc += w * tmp[sy * side + x];
            }
            img[y * side + x] = acc;
        }
    }
}

fn render_digit(digit: u8, rng: &mut Rng) -> [u8; IMG_SIDE * IMG_SIDE] {
    let angle = rng.next_range(-0.22, 0.22);
    let scale_x = rng.next_range(0.82, 1.12);
    let scale_y = rng.next_range(0.82, 1.12);
    let shear = rng.next_range(-0.12, 0.12);
    let affine = Affine {
        m: [
            scale_x * (angle.cos() + shear * angle.sin()),
            scale_x * (shear * angle.cos() - angle.sin()),
            scale_y * angle.sin(),
            scale_y * angle.cos(),
        ],
        t: [rng.next_range(-0.08, 0.08), rng.next_range(-0.08, 0.08)],
    };
    let thickness = rng.next_range(1.3, 2.3);
    let hard = rng.next_f64() < HARD_FRACTION;
    let sigma = if hard {
        rng.next_range(1.1, 1.9)
    } else {
        rng.next_range(0.25, 0.75)
    };
    let contrast = if hard {
        rng.next_range(0.35, 0.65)
    } else {
        rng.next_range(0.8, 1.0)
    };
    let noise = rng.next_range(0.01, 0.04);

    // Transform stroke points into pixel space.
    let mut segments: Vec<(Point, Point)> = Vec::new();
    for polyline in glyph(digit) {
        let pts: Vec<Point> = polyline
            .into_iter()
            .map(|p| {
                let q = affine.apply(p);
                (
                    GLYPH_OFFSET + GLYPH_SCALE * q.0,
                    GLYPH_OFFSET + GLYPH_SCALE * q.1,
                )
            })
            .collect();
        for w in pts.windows(2) {
            segments.push((w[0], w[1]));
        }
    }

    let mut img = [0.0f64; IMG_SIDE * IMG_SIDE];
    let half = thickness / 2.0;
    let aa = 0.9;
    for y in 0..IMG_SIDE {
        for x in 0..IMG_SIDE {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = f64::INFINITY;
            for &(a, b) in &segments {
                // Cheap bounding-box reject before the exact distance.
                let reach = half + aa;
                if p.0 < a.0.min(b.0) - reach
                    || p.0 > a.0.max(b.0) + reach
                    || p.1 < a.1.min(b.1) - reach
                    || p.1 > a.1.max(b.1) + reach
                {
                    continue;
                }
                best = best.min(dist_to_segment(p, a, b));
                if best <= half - aa {
                    break;
                }
            }
            img[y * IMG_SIDE + x] = ((half + aa / 2.0 - best) / aa).clamp(0.0, 1.0);
        }
    }

    gaussian_blur(&mut img, IMG_SIDE, sigma);
    let mut out = [0u8; IMG_SIDE * IMG_SIDE];
    for (o, v) in out.iter_mut().zip(img.iter()) {
        let jittered = (v * contrast + rng.next_gaussian(0.0, noise)).clamp(0.0, 1.0);
        *o = (jittered * 255.0).round() as u8;
    }
    out
}

/// Raw pixels and labels for `count` samples. Labels cycle 0..9 so every
/// class is represented whenever `count >= 10`.
pub fn synth_digits_bytes(count: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = Rng::new(seed);
    let mut pixels = Vec::with_capacity(count * IMG_SIDE * IMG_SIDE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let digit = (i % 10) as u8;
        pixels.extend_from_slice(&render_digit(digit, &mut rng));
        labels.push(digit);
    }
    (pixels, labels)
}

/// Generate a ready-to-train dataset.
pub fn synth_digits(count: usize, seed: u64, split: &str) -> LabeledDataset {
    let (pixels, labels) = synth_digits_bytes(count, seed);
    let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    LabeledDataset::new(
        Tensor::new(&[count, 1, IMG_SIDE, IMG_SIDE], data).expect("shape"),
        labels.iter().map(|&l| l as usize).collect(),
        split,
    )
    .expect("consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let (a, la) = synth_digits_bytes(30, 7);
        let (b, lb) = synth_digits_bytes(30, 7);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = synth_digits_bytes(30, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn labels_cycle_and_pixels_in_range() {
        let ds = synth_digits(25, 3, "train");
        assert_eq!(ds.len(), 25);
        assert_eq!(&ds.labels[..12], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.split, "train");
    }

    #[test]
    fn every_digit_has_visible_ink() {
        let (pixels, labels) = synth_digits_bytes(40, 1);
        for (i, &label) in labels.iter().enumerate() {
            let img = &pixels[i * IMG_SIDE * IMG_SIDE..(i + 1) * IMG_SIDE * IMG_SIDE];
            // Total pixel mass survives blur even on hard samples.
            let mass: u64 = img.iter().map(|&p| p as u64).sum();
            assert!(mass > 1500, "digit {label} nearly blank (mass {mass})");
        }
    }

    #[test]
    fn glyph_shapes_are_distinct() {
        // Average inter-class pixel distance should comfortably exceed
        // intra-class distance on clean renders.
        let per = 6usize;
        let (pixels, labels) = synth_digits_bytes(per * 10, 5);
        let img = |i: usize| &pixels[i * 784..(i + 1) * 784];
        let dist = |a: &[u8], b: &[u8]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..per * 10 {
            for j in (i + 1)..per * 10 {
                let d = dist(img(i), img(j));
                if labels[i] == labels[j] {
                    intra = (intra.0 + d, intra.1 + 1);
                } else {
                    inter = (inter.0 + d, inter.1 + 1);
                }
            }
        }
        let intra_avg = intra.0 / intra.1 as f64;
        let inter_avg = inter.0 / inter.1 as f64;
        assert!(
            inter_avg > 1.05 * intra_avg,
            "inter {inter_avg} vs intra {intra_avg}"
        );
    }
}
