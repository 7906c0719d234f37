//! Seeded synthetic head-like volumes: a bright shell around a softer
//! interior with a handful of ellipsoidal structures and a smooth bias
//! field. Used where real scans are unavailable.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{AcquisitionPlane, Volume};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
}

impl Ellipsoid {
    /// Normalised radius: below 1 inside, above 1 outside.
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.centre[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Soft indicator with an edge width of roughly `sharpness` in radius units.
fn inside(r: f64, sharpness: f64) -> f64 {
    1.0 / (1.0 + ((r - 1.0) / sharpness).exp())
}

/// Synthetic `h x w x d` volume with intensities in `[0, 1]`.
pub fn phantom_volume(
    h: usize,
    w: usize,
    d: usize,
    spacing: [f64; 3],
    seed: u64,
) -> Result<Volume> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng, s: f64| 1.0 + rng.gen_range(-s..s);
    let head = Ellipsoid {
        centre: [0.0, 0.0, 0.0],
        radii: [
            0.9 * jitter(&mut rng, 0.05),
            0.75 * jitter(&mut rng, 0.05),
            0.95,
        ],
        intensity: 0.85,
    };
    let brain = Ellipsoid {
        centre: [0.0, 0.0, 0.0],
        radii: [head.radii[0] * 0.88, head.radii[1] * 0.86, 0.85],
        intensity: 0.45,
    };
    let n_structures = rng.gen_range(4..8);
    let structures: Vec<Ellipsoid> = (0..n_structures)
        .map(|_| Ellipsoid {
            centre: [
                rng.gen_range(-0.45..0.45),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.5..0.5),
            ],
            radii: [
                rng.gen_range(0.08..0.3),
                rng.gen_range(0.08..0.3),
                rng.gen_range(0.2..0.6),
            ],
            intensity: rng.gen_range(0.1..0.95),
        })
        .collect();
    let bias = [
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.05..0.05),
    ];
    let ripple = (
        rng.gen_range(3.0..6.0),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );

    let coord = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        }
    };
    let voxels = Array3::from_shape_fn((h, w, d), |(y, x, z)| {
        // Depth spans the central part of the head so every slice has anatomy.
        let p = [coord(y, h), coord(x, w), 0.7 * coord(z, d)];
        let shell = inside(head.radius(p), 0.02);
        let interior = inside(brain.radius(p), 0.02);
        let mut v = head.intensity * shell * (1.0 - interior);
        let mut tissue = brain.intensity + 0.05 * (ripple.0 * (p[0] + p[1]) + ripple.1).sin();
        for s in &structures {
            let m = inside(s.radius(p), 0.05);
            tissue = tissue * (1.0 - m) + s.intensity * m;
        }
        v += tissue * interior;
        let field = 1.0 + bias[0] * p[0] + bias[1] * p[1] + bias[2] * p[2];
        (v * field).clamp(0.0, 1.0)
    });
    Volume::new(
        voxels,
        spacing,
        format!("phantom-{seed}"),
        AcquisitionPlane::Axial,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = phantom_volume(16, 12, 5, [1.0, 1.0, 2.0], 7).unwrap();
        let b = phantom_volume(16, 12, 5, [1.0, 1.0, 2.0], 7).unwrap();
        let c = phantom_volume(16, 12, 5, [1.0, 1.0, 2.0], 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.voxels(), c.voxels());
        assert!(a.voxels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.dim(), (16, 12, 5));
        let max = a.voxels().iter().cloned().fold(0.0, f64::max);
        assert!(max > 0.5);
    }
}
