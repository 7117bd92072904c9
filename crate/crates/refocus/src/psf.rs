//! Defocus point spread functions and the monotone focus-radius schedule.
//!
//! A defocused circular aperture blurs a point source into (approximately) a
//! uniform disk; the kernel here estimates per-pixel disk coverage with
//! subpixel sampling so small radii stay symmetric instead of collapsing to
//! a jagged binary mask. A truncated Gaussian is provided as the comparison
//! kernel.

use crate::error::{Error, Result};

/// Normalized 2D convolution kernel with odd square support `(2r+1)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    radius_support: usize,
    weights: Vec<f64>,
}

impl Kernel {
    fn from_unnormalized(radius_support: usize, mut weights: Vec<f64>) -> Kernel {
        let side = 2 * radius_support + 1;
        assert_eq!(weights.len(), side * side);
        let total: f64 = weights.iter().sum();
        assert!(total > 0.0, "kernel mass must be positive");
        for w in &mut weights {
            *w /= total;
        }
        Kernel {
            radius_support,
            weights,
        }
    }

    /// The 1x1 delta kernel (identity under convolution).
    pub fn identity() -> Kernel {
        Kernel {
            radius_support: 0,
            weights: vec![1.0],
        }
    }

    pub fn radius_support(&self) -> usize {
        self.radius_support
    }

    /// Kernel side length `2r + 1`.
    pub fn side(&self) -> usize {
        2 * self.radius_support + 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at signed offset `(dx, dy)`, both in `[-r, r]`.
    #[inline]
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius_support as isize;
        debug_assert!(dx.abs() <= r && dy.abs() <= r);
        self.weights[((dy + r) * (2 * r + 1) + (dx + r)) as usize]
    }

    /// CSV form: one kernel row per line, full-precision values.
    pub fn to_csv(&self) -> String {
        let side = self.side();
        let mut out = String::new();
        for row in 0..side {
            let cells: Vec<String> = (0..side)
                .map(|col| format!("{}", self.weights[row * side + col]))
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Disk PSF of radius `rho`, with per-pixel coverage estimated on a
/// `supersample x supersample` subpixel grid. `rho = 0` is the identity.
///
/// The subpixel sample offsets are symmetric about each pixel center, so the
/// coverage counts (and therefore the weights) are exactly invariant under
/// flips and transposition.
pub fn disk_kernel(rho: f64, supersample: usize) -> Result<Kernel> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "disk radius {rho} must be finite and nonnegative"
        )));
    }
    if supersample == 0 {
        return Err(Error::InvalidArgument(
            "supersample factor must be positive".into(),
        ));
    }
    if rho == 0.0 {
        return Ok(Kernel::identity());
    }
    // Smallest support such that cells beyond it cannot intersect the disk:
    // a cell at Chebyshev offset m has Euclidean clearance m - 0.5.
    let r = (rho - 0.5).ceil().max(0.0) as usize;
    let side = 2 * r + 1;
    let ss = supersample;
    let rho2 = rho * rho;
    let mut weights = vec![0.0f64; side * side];
    for dy in -(r as isize)..=(r as isize) {
        for dx in -(r as isize)..=(r as isize) {
            let mut hits = 0u64;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = dx as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64;
                    let y = dy as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64;
                    if x * x + y * y <= rho2 {
                        hits += 1;
                    }
                }
            }
            weights[((dy + r as isize) * side as isize + (dx + r as isize)) as usize] =
                hits as f64;
        }
    }
    Ok(Kernel::from_unnormalized(r, weights))
}

/// Truncated Gaussian kernel: support `r = ceil(truncate * sigma)`, weights
/// proportional to `exp(-(i^2 + j^2) / (2 sigma^2))`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Result<Kernel> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma {sigma} must be positive"
        )));
    }
    if !(truncate > 0.0 && truncate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian truncation {truncate} must be positive"
        )));
    }
    let r = (truncate * sigma).ceil() as usize;
    let side = 2 * r + 1;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut weights = vec![0.0f64; side * side];
    for dy in -(r as isize)..=(r as isize) {
        for dx in -(r as isize)..=(r as isize) {
            let d2 = (dx * dx + dy * dy) as f64;
            weights[((dy + r as isize) * side as isize + (dx + r as isize)) as usize] =
                (-d2 * inv).exp();
        }
    }
    Ok(Kernel::from_unnormalized(r, weights))
}

/// Monotone focus-radius schedule.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FocusSchedule {
    pub k: usize,
    pub rho_max: f64,
    pub radii: Vec<f64>,
}

/// Cosine-profile schedule from fully defocused to in focus:
/// `radii[k] = rho_max * (1 - cos(pi (K-k)/(K-1))) / 2` for `k = 1..=K`,
/// so `radii[1] = rho_max` and `radii[K] = 0`.
pub fn focus_schedule(k: usize, rho_max: f64) -> Result<FocusSchedule> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs at least 2 focus states, got {k}"
        )));
    }
    if !(rho_max > 0.0 && rho_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "rho_max {rho_max} must be positive"
        )));
    }
    let radii = (1..=k)
        .map(|i| rho_max * half_one_minus_cos_pi_frac(k - i, k - 1))
        .collect();
    Ok(FocusSchedule {
        k,
        rho_max,
        radii,
    })
}

/// `(1 - cos(pi * num/den)) / 2` evaluated on the exact rational grid point.
///
/// The grid fractions whose cosines are exactly representable (0, 1/3, 1/2,
/// 2/3, 1 after reduction) are resolved by integer arithmetic, so schedule
/// endpoints, midpoints, and third-points come out bit-exact; everything
/// else falls through to libm. Monotonicity is preserved because the exact
/// values agree with the correctly rounded ones at those points.
fn half_one_minus_cos_pi_frac(num: usize, den: usize) -> f64 {
    debug_assert!(num <= den && den > 0);
    let g = gcd(num, den);
    let (n, d) = (num / g, den / g);
    let cos = match (n, d) {
        (0, _) => 1.0,
        (1, 1) => -1.0,
        (1, 2) => 0.0,
        (1, 3) => 0.5,
        (2, 3) => -0.5,
        _ => (std::f64::consts::PI * n as f64 / d as f64).cos(),
    };
    (1.0 - cos) / 2.0
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}
