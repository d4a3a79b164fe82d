//! Procedural 28x28 handwritten-digit corpus.
//!
//! Renders stroke skeletons of the ten digits under random affine
//! deformation (rotation, scale, shear, translation), per-stroke control
//! point jitter, variable stroke width, and speckle noise. The rotations and
//! shears make raw-pixel classes curved manifolds rather than linearly
//! separable clusters, which is the regime graph interpolation targets.
//! Serves as a deterministic stand-in where the real MNIST IDX files are not
//! available; pixels follow the same byte/255 convention as [`super::load_idx`].

use rand::Rng;
use rayon::prelude::*;

use crate::matrix::{FeatureMatrix, LabelMatrix, Matrix};
use crate::rng;

use super::one_hot;

pub const IMAGE_SIDE: usize = 28;

type Point = (f64, f64);

/// Polyline strokes per digit, in a unit box with y pointing down.
fn glyph(digit: usize) -> Vec<Vec<Point>> {
    let arc = |cx: f64, cy: f64, rx: f64, ry: f64, t0: f64, t1: f64, n: usize| -> Vec<Point> {
        (0..=n)
            .map(|i| {
                let t = t0 + (t1 - t0) * i as f64 / n as f64;
                (cx + rx * t.cos(), cy + ry * t.sin())
            })
            .collect()
    };
    use std::f64::consts::PI;
    match digit {
        0 => vec![arc(0.50, 0.50, 0.26, 0.36, 0.0, 2.0 * PI, 20)],
        1 => vec![vec![(0.40, 0.30), (0.58, 0.14), (0.58, 0.86)]],
        2 => {
            let mut path = arc(0.50, 0.36, 0.22, 0.20, PI, 2.0 * PI, 12);
            path.push((0.28, 0.84));
            path.push((0.74, 0.84));
            vec![path]
        }
        3 => vec![
            arc(0.45, 0.33, 0.22, 0.16, 1.20 * PI, 2.50 * PI, 14),
            arc(0.45, 0.66, 0.24, 0.18, 1.50 * PI, 2.80 * PI, 14),
        ],
        4 => vec![
            vec![(0.60, 0.12), (0.60, 0.88)],
            vec![(0.60, 0.12), (0.24, 0.60)],
            vec![(0.24, 0.60), (0.80, 0.60)],
        ],
        5 => {
            let mut path = vec![(0.70, 0.14), (0.32, 0.14), (0.30, 0.46)];
            path.extend(arc(0.47, 0.64, 0.24, 0.21, 1.28 * PI, 2.70 * PI, 14));
            vec![path]
        }
        6 => vec![
            arc(0.50, 0.50, 0.25, 0.37, 1.70 * PI, 0.50 * PI, 16),
            arc(0.50, 0.68, 0.20, 0.185, 0.0, 2.0 * PI, 16),
        ],
        7 => vec![vec![(0.26, 0.16), (0.76, 0.16), (0.42, 0.86)]],
        8 => vec![
            arc(0.50, 0.31, 0.19, 0.16, 0.0, 2.0 * PI, 16),
            arc(0.50, 0.68, 0.23, 0.19, 0.0, 2.0 * PI, 16),
        ],
        9 => vec![
            arc(0.48, 0.36, 0.21, 0.19, 0.0, 2.0 * PI, 16),
            vec![(0.69, 0.36), (0.66, 0.60), (0.55, 0.86)],
        ],
        _ => unreachable!("digit out of range"),
    }
}

fn dist_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (px, py) = p;
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn render_sample(digit: usize, sample_seed: u64) -> Vec<u8> {
    let mut rng = rng::stream(sample_seed, &[]);
    let theta: f64 = rng.random_range(-0.55..0.55);
    let sx: f64 = rng.random_range(0.68..1.18);
    let sy: f64 = rng.random_range(0.68..1.18);
    let shear: f64 = rng.random_range(-0.30..0.30);
    let tx: f64 = rng.random_range(-0.12..0.12);
    let ty: f64 = rng.random_range(-0.12..0.12);
    let width: f64 = rng.random_range(0.030..0.085);
    let ink: f64 = rng.random_range(0.70..1.0);

    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    // rotation * [scale, shear; 0, scale] about the box center
    let transform = |(x, y): Point| -> Point {
        let (ux, uy) = (x - 0.5, y - 0.5);
        let (vx, vy) = (sx * ux + shear * uy, sy * uy);
        (
            0.5 + cos_t * vx - sin_t * vy + tx,
            0.5 + sin_t * vx + cos_t * vy + ty,
        )
    };

    let mut segments: Vec<(Point, Point)> = Vec::new();
    for stroke in glyph(digit) {
        let jittered: Vec<Point> = stroke
            .into_iter()
            .map(|p| {
                let q = transform(p);
                (
                    q.0 + rng.random_range(-0.015..0.015),
                    q.1 + rng.random_range(-0.015..0.015),
                )
            })
            .collect();
        for pair in jittered.windows(2) {
            segments.push((pair[0], pair[1]));
        }
    }

    let soft = 0.45 * width;
    let reach = width + soft;
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &((ax, ay), (bx, by)) in &segments {
        min_x = min_x.min(ax.min(bx));
        min_y = min_y.min(ay.min(by));
        max_x = max_x.max(ax.max(bx));
        max_y = max_y.max(ay.max(by));
    }

    let side = IMAGE_SIDE;
    let mut pixels = vec![0u8; side * side];
    for row in 0..side {
        let v = (row as f64 + 0.5) / side as f64;
        if v < min_y - reach || v > max_y + reach {
            continue;
        }
        for col in 0..side {
            let u = (col as f64 + 0.5) / side as f64;
            if u < min_x - reach || u > max_x + reach {
                continue;
            }
            let mut d = f64::MAX;
            for &(a, b) in &segments {
                d = d.min(dist_to_segment((u, v), a, b));
                if d == 0.0 {
                    break;
                }
            }
            let level = ((width - d) / soft + 1.0).clamp(0.0, 1.0);
            if level > 0.0 {
                pixels[row * side + col] = (255.0 * ink * level).round() as u8;
            }
        }
    }

    // speckle noise
    for px in pixels.iter_mut() {
        if rng.random_range(0.0..1.0) < 0.02 {
            let spot: f64 = rng.random_range(0.2..0.9);
            *px = px.saturating_add((255.0 * spot) as u8);
        }
    }
    pixels
}

/// Deterministic digit corpus of `n` samples with balanced classes in
/// shuffled row order. Returns [0,1] features (byte/255) and one-hot labels.
pub fn synth_digits(n: usize, seed: u64) -> (FeatureMatrix, LabelMatrix) {
    let rendered: Vec<(Vec<u8>, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let digit = i % 10;
            let bytes = render_sample(digit, rng::derive_seed(seed, &[0x5d, i as u64]));
            (bytes, digit)
        })
        .collect();

    // deterministic row shuffle so prefixes are class-mixed
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::stream(seed, &[0x51]);
    use rand::seq::SliceRandom;
    order.shuffle(&mut shuffle_rng);

    let width = IMAGE_SIDE * IMAGE_SIDE;
    let mut features = Matrix::zeros(n, width);
    let mut classes = Vec::with_capacity(n);
    for (row, &src) in order.iter().enumerate() {
        let (bytes, digit) = &rendered[src];
        for (j, &b) in bytes.iter().enumerate() {
            features[(row, j)] = b as f64 / 255.0;
        }
        classes.push(*digit);
    }
    (features, one_hot(&classes, 10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::classes_of;

    #[test]
    fn deterministic_and_in_range() {
        let (a, la) = synth_digits(40, 9);
        let (b, lb) = synth_digits(40, 9);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.shape(), (40, 784));
    }

    #[test]
    fn classes_balanced() {
        let (_, labels) = synth_digits(100, 3);
        let classes = classes_of(&labels);
        for c in 0..10 {
            assert_eq!(classes.iter().filter(|&&x| x == c).count(), 10);
        }
    }

    #[test]
    fn digits_have_ink_and_differ() {
        let (f, _) = synth_digits(20, 1);
        for i in 0..20 {
            let ink: f64 = f.row(i).iter().sum();
            assert!(ink > 5.0, "sample {i} nearly blank: {ink}");
        }
        assert!(f.row(0) != f.row(10));
    }
}
