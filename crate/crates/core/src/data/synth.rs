//! Procedural stand-in for CIFAR-10: one coloured shape on a textured
//! background, class = shape type.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ImageRecord, IMAGE_SIZE, NUM_CLASSES, PIXELS};

pub const SHAPE_NAMES: [&str; NUM_CLASSES] = [
    "disk", "square", "triangle", "plus", "ring", "hbar", "vbar", "diamond", "cross", "frame",
];

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let d = (dx * dx + dy * dy).sqrt();
    match class {
        0 => d <= r,
        1 => ax.max(ay) <= 0.8 * r,
        2 => {
            let h = 0.85 * r;
            dy >= -h && dy <= h && ax <= 0.5 * (dy + h) * r / h
        }
        3 => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
        4 => d <= r && d >= 0.55 * r,
        5 => ax <= r && ay <= r / 3.5,
        6 => ay <= r && ax <= r / 3.5,
        7 => ax + ay <= r,
        8 => (ax - ay).abs() <= r / 4.0 && ax.max(ay) <= 0.85 * r,
        _ => ax.max(ay) <= 0.85 * r && ax.max(ay) >= 0.5 * r,
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn render(class: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let s = IMAGE_SIZE as f64;
    let bg = random_color(rng);
    let mut fg = random_color(rng);
    while distance(&bg, &fg) < 0.45 {
        fg = random_color(rng);
    }
    // background texture: 0 flat noise, 1 stripes, 2 checker
    let texture = rng.gen_range(0..3);
    let amp = rng.gen_range(0.05..0.2);
    let freq = rng.gen_range(0.3..1.2);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let r = rng.gen_range(7.0..12.0);
    let cx = rng.gen_range(r * 0.8..s - r * 0.8);
    let cy = rng.gen_range(r * 0.8..s - r * 0.8);

    let mut px = vec![0u8; PIXELS];
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (xf, yf) = (x as f64, y as f64);
            let tex = match texture {
                0 => 0.0,
                1 => (freq * (xf * ca + yf * sa)).sin(),
                _ => {
                    let k = (2.0 + 4.0 * freq) as usize;
                    if (x / k + y / k).is_multiple_of(2) { 1.0 } else { -1.0 }
                }
            };
            let noise: f64 = rng.gen_range(-0.04..0.04);
            // 2x2 supersampled coverage
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if inside(class, xf + ox - cx, yf + oy - cy, r) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let back = bg[c] + amp * tex;
                let v = (cover * fg[c] + (1.0 - cover) * back + noise).clamp(0.0, 1.0);
                px[c * plane + y * IMAGE_SIZE + x] = (v * 255.0).round() as u8;
            }
        }
    }
    px
}

/// `n` images, deterministic in `seed`. With `stratified`, image `i` has
/// class `i % 10`; otherwise classes are drawn uniformly.
pub fn synth_dataset(n: usize, seed: u64, stratified: bool) -> Dataset {
    let records = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let class = if stratified { i % NUM_CLASSES } else { rng.gen_range(0..NUM_CLASSES) };
            ImageRecord::new(class as u8, render(class, &mut rng)).expect("valid by construction")
        })
        .collect();
    Dataset { records }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_stratified() {
        let a = synth_dataset(10, 42, true);
        assert_eq!(a, synth_dataset(10, 42, true));
        assert_ne!(a, synth_dataset(10, 43, true));
        let mut labels = a.labels();
        labels.sort_unstable();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
        let img = a.records[0].to_image();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn prefix_stable() {
        // image i does not depend on n
        let small = synth_dataset(5, 1, false);
        let big = synth_dataset(20, 1, false);
        assert_eq!(small.records[..], big.records[..5]);
    }

    #[test]
    fn every_shape_covers_pixels() {
        for class in 0..NUM_CLASSES {
            let hits = (-12..=12)
                .flat_map(|y| (-12..=12).map(move |x| (x, y)))
                .filter(|&(x, y)| inside(class, f64::from(x), f64::from(y), 10.0))
                .count();
            assert!(hits > 30, "{}: {hits}", SHAPE_NAMES[class]);
        }
    }
}
