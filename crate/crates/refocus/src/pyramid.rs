//! Dual-path progressive-refocusing pyramid.
//!
//! Each scale holds three aligned views of the input: the focused view `L`
//! (defocus blur, then decimation, then optional noise), the naive view `D`
//! (bare decimation, aliasing and all), and the residual `A = D - L` that
//! carries exactly the folded high-frequency content. The decomposition
//! `D = L + A` is exact by construction when no noise is injected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{write_atomic, Image};
use crate::psf::{disk_kernel, gaussian_kernel, FocusSchedule, Kernel};
use crate::rng::CounterRng;

/// Boundary handling for spatial convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Mirror without repeating the edge sample: `-1 -> 1`, `n -> n-2`.
    Reflect,
    /// Treat everything outside the image as zero.
    Zero,
}

/// Which PSF family the pyramid blurs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Disk,
    Gaussian,
}

/// Subpixel sampling density used for disk kernels throughout the pyramid.
pub const DEFAULT_SUPERSAMPLE: usize = 8;

fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Direct spatial convolution. Kernels here are flip-symmetric, so this
/// equals correlation; the loop still applies the kernel in convolution
/// orientation (`out(p) = sum_q k(q) x(p - q)`).
pub fn convolve(img: &Image, kernel: &Kernel, boundary: Boundary) -> Image {
    let (w, h) = (img.width(), img.height());
    let r = kernel.radius_support() as isize;
    if r == 0 {
        return img.clone();
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let wgt = kernel.at(dx, dy);
                    if wgt == 0.0 {
                        continue;
                    }
                    let sx = x - dx;
                    let sy = y - dy;
                    let v = match boundary {
                        Boundary::Reflect => {
                            img.get(mirror_index(sx, w), mirror_index(sy, h))
                        }
                        Boundary::Zero => {
                            if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                                0.0
                            } else {
                                img.get(sx as usize, sy as usize)
                            }
                        }
                    };
                    acc += wgt * v;
                }
            }
            out[(y as usize) * w + x as usize] = acc;
        }
    }
    Image::from_raw(w, h, out).expect("convolution preserves shape and finiteness")
}

/// Pure subsampling: `out(i, j) = in(i s, j s)`, no prefilter of any kind.
/// This operator aliases by design.
pub fn decimate(img: &Image, s: usize) -> Result<Image> {
    if s == 0 {
        return Err(Error::InvalidArgument("decimation factor must be positive".into()));
    }
    let (w, h) = (img.width(), img.height());
    if w % s != 0 || h % s != 0 {
        return Err(Error::NonDivisible {
            width: w,
            height: h,
            factor: s,
        });
    }
    if s == 1 {
        return Ok(img.clone());
    }
    let (ow, oh) = (w / s, h / s);
    let mut data = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            data.push(img.get(x * s, y * s));
        }
    }
    Image::from_raw(ow, oh, data)
}

/// One pyramid scale: focused view, naive view, and their residual.
#[derive(Debug, Clone)]
pub struct ScaleTriple {
    /// Focused view: blur, decimate, plus `beta * eps` noise.
    pub l: Image,
    /// Naive decimated view.
    pub d: Image,
    /// Alias residual `D - L_noiseless`; values may be negative.
    pub a: Image,
    /// Decimation factor of this scale.
    pub s: usize,
    /// PSF radius used.
    pub rho: f64,
    /// Noise amplitude used.
    pub beta: f64,
    /// Seed of the generator the noise was drawn from.
    pub noise_seed: u64,
}

/// The full schedule of scales, coarse (blurred) to fine (sharp).
#[derive(Debug, Clone)]
pub struct FocusPyramid {
    pub scales: Vec<ScaleTriple>,
    pub schedule: FocusSchedule,
    pub factors: Vec<usize>,
}

/// Dyadic decimation factors `[2^(K-1), ..., 4, 2, 1]`.
pub fn dyadic_factors(k: usize) -> Vec<usize> {
    (0..k).map(|i| 1usize << (k - 1 - i)).collect()
}

/// Linear noise ramp `beta[k] = lo + (hi - lo) (k-1)/(K-1)`.
pub fn beta_schedule(k: usize, beta_lo: f64, beta_hi: f64) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "beta schedule needs at least 2 scales, got {k}"
        )));
    }
    if !(0.0 <= beta_lo && beta_lo <= beta_hi && beta_hi.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta range [{beta_lo}, {beta_hi}] must satisfy 0 <= lo <= hi"
        )));
    }
    Ok((0..k)
        .map(|i| beta_lo + (beta_hi - beta_lo) * i as f64 / (k - 1) as f64)
        .collect())
}

fn pyramid_kernel(kind: KernelKind, rho: f64, supersample: usize) -> Result<Kernel> {
    if rho == 0.0 {
        return Ok(Kernel::identity());
    }
    match kind {
        KernelKind::Disk => disk_kernel(rho, supersample),
        // Comparison kernel: sigma = rho / 2 matches the disk's per-axis
        // second moment, so the two families blur comparably at equal rho.
        KernelKind::Gaussian => gaussian_kernel(rho / 2.0, 3.0),
    }
}

/// Build the dual-path pyramid.
///
/// For each scale `k`: `L_nl = (k_rho * x) down s_k`, `D = x down s_k`,
/// `A = D - L_nl`, and the emitted focused view is `L = L_nl + beta_k eps`
/// with `eps` i.i.d. standard normal from a counter-based generator keyed by
/// `seed` and split per `(scale, pixel)`. The residual is computed from the
/// noiseless view, so `A` carries folded frequency content only.
pub fn build_pyramid(
    x: &Image,
    schedule: &FocusSchedule,
    factors: &[usize],
    beta: &[f64],
    kernel_kind: KernelKind,
    seed: u64,
) -> Result<FocusPyramid> {
    let k = schedule.k;
    if factors.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} factors for {k} focus states",
            factors.len()
        )));
    }
    if beta.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} noise amplitudes for {k} focus states",
            beta.len()
        )));
    }
    if beta.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
        return Err(Error::InvalidArgument(
            "noise amplitudes must be finite and nonnegative".into(),
        ));
    }
    if factors.windows(2).any(|w| w[0] < w[1]) || factors.last() != Some(&1) {
        return Err(Error::InvalidArgument(format!(
            "decimation factors must be non-increasing and end at 1, got {factors:?}"
        )));
    }
    let rng = CounterRng::new(seed);
    let mut scales = Vec::with_capacity(k);
    for (idx, (&s, &b)) in factors.iter().zip(beta).enumerate() {
        let rho = schedule.radii[idx];
        let kernel = pyramid_kernel(kernel_kind, rho, DEFAULT_SUPERSAMPLE)?;
        let blurred = convolve(x, &kernel, Boundary::Reflect);
        let l_noiseless = decimate(&blurred, s)?;
        let d = decimate(x, s)?;
        let a = d.sub(&l_noiseless)?;
        let l = if b == 0.0 {
            l_noiseless
        } else {
            let (w, h) = (l_noiseless.width(), l_noiseless.height());
            let data = l_noiseless
                .data()
                .iter()
                .enumerate()
                .map(|(p, &v)| v + b * rng.normal(idx as u64 + 1, p as u64))
                .collect();
            Image::from_raw(w, h, data)?
        };
        scales.push(ScaleTriple {
            l,
            d,
            a,
            s,
            rho,
            beta: b,
            noise_seed: seed,
        });
    }
    Ok(FocusPyramid {
        scales,
        schedule: schedule.clone(),
        factors: factors.to_vec(),
    })
}

/// Spatial alias energy `sum A^2` of one scale. Equals the spectral energy
/// `(1/N) |DFT(A)|^2` by Parseval.
pub fn alias_energy(triple: &ScaleTriple) -> f64 {
    triple.a.energy()
}

/// Serialized description of a pyramid dump directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PyramidManifest {
    pub schema: String,
    pub seed: u64,
    pub kernel: KernelKind,
    pub supersample: usize,
    pub schedule: FocusSchedule,
    pub factors: Vec<usize>,
    pub betas: Vec<f64>,
    pub width: usize,
    pub height: usize,
}

pub const PYRAMID_SCHEMA: &str = "refocus/pyramid-dump/v1";

/// Full-precision CSV of a real grid, one image row per line.
pub fn grid_to_csv(img: &Image) -> String {
    let mut out = String::new();
    for y in 0..img.height() {
        let cells: Vec<String> = (0..img.width()).map(|x| format!("{}", img.get(x, y))).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parse a grid CSV produced by [`grid_to_csv`].
pub fn grid_from_csv(text: &str) -> Result<Image> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|c| c.trim().parse::<f64>()).collect();
        rows.push(row.map_err(|e| Error::InvalidArgument(format!("bad grid csv: {e}")))?);
    }
    let height = rows.len();
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if height == 0 || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidArgument("ragged or empty grid csv".into()));
    }
    Image::from_raw(width, height, rows.into_iter().flatten().collect())
}

/// Dump a pyramid to a directory: per scale `L_k.pgm`, `D_k.pgm`, `A_k.csv`
/// (the residual may be negative, so it goes to CSV at full precision),
/// plus `manifest.json`.
pub fn write_pyramid_dir(
    pyramid: &FocusPyramid,
    kernel: KernelKind,
    input_width: usize,
    input_height: usize,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for (idx, scale) in pyramid.scales.iter().enumerate() {
        let k = idx + 1;
        crate::image::save_image(&scale.l, &dir.join(format!("L_{k}.pgm")))?;
        crate::image::save_image(&scale.d, &dir.join(format!("D_{k}.pgm")))?;
        write_atomic(&dir.join(format!("A_{k}.csv")), grid_to_csv(&scale.a).as_bytes())?;
    }
    let manifest = PyramidManifest {
        schema: PYRAMID_SCHEMA.to_string(),
        seed: pyramid.scales.first().map(|s| s.noise_seed).unwrap_or(0),
        kernel,
        supersample: DEFAULT_SUPERSAMPLE,
        schedule: pyramid.schedule.clone(),
        factors: pyramid.factors.clone(),
        betas: pyramid.scales.iter().map(|s| s.beta).collect(),
        width: input_width,
        height: input_height,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest encode: {e}")))?;
    write_atomic(&dir.join("manifest.json"), json.as_bytes())
}
