//! DFT machinery and executable checks of the aliasing decomposition.
//!
//! Conventions, used everywhere in this module:
//!
//! * Unnormalized forward transform `X[m] = sum_n x[n] exp(-2 pi i m n / N)`;
//!   the inverse carries the `1/N`.
//! * Bin `m` sits at normalized frequency `omega = 2 pi m / N`; the signed
//!   frequency of bin `m` is `m` for `m <= N/2` and `m - N` above. For real
//!   input, `X[m] = conj(X[N - m mod N])`.
//! * 2:1 decimation folds bin pairs `{m, m + N/2}`:
//!   `DFT(x down 2)[m] = (X[m] + X[m + N/2]) / 2`.
//! * An ideal lowpass at cutoff fraction `c` keeps bins with
//!   `|omega| < c pi` and zeroes the boundary bin at exactly `c pi`
//!   (open passband). At `c = 1/2` the boundary is the ambiguity point of
//!   2:1 decimation: its two folding partners coincide in frequency, so no
//!   passband statement can hold there and the bin is removed instead.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::psf::Kernel;
use crate::pyramid::decimate;

/// Complex DFT coefficients of a 1D signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub coeffs: Vec<Complex64>,
}

/// Complex DFT coefficients of a 2D grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum2 {
    pub width: usize,
    pub height: usize,
    pub coeffs: Vec<Complex64>,
}

impl Spectrum2 {
    #[inline]
    pub fn at(&self, mx: usize, my: usize) -> Complex64 {
        self.coeffs[my * self.width + mx]
    }

    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Brute-force O(N^2) DFT. Retained deliberately: it is the cross-check
/// oracle for the fast path and the fallback for non-power-of-two lengths.
pub fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (m * i % n) as f64 / n as f64;
            acc += v * Complex64::from_polar(1.0, ang);
        }
        out.push(acc);
    }
    out
}

fn naive_inverse(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &v) in x.iter().enumerate() {
            let ang = 2.0 * std::f64::consts::PI * (m * i % n) as f64 / n as f64;
            acc += v * Complex64::from_polar(1.0, ang);
        }
        out.push(acc / n as f64);
    }
    out
}

/// Iterative radix-2 transform. Twiddles are evaluated directly per
/// butterfly (no running product), which keeps the error near machine level
/// and the summation order fixed.
fn fft_pow2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        for start in (0..n).step_by(len) {
            for off in 0..len / 2 {
                let w = Complex64::from_polar(1.0, ang * off as f64);
                let u = buf[start + off];
                let v = buf[start + off + len / 2] * w;
                buf[start + off] = u + v;
                buf[start + off + len / 2] = u - v;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// Forward DFT of complex data: radix-2 when the length is a power of two,
/// the naive sum otherwise.
pub fn dft_complex(x: &[Complex64]) -> Vec<Complex64> {
    assert!(!x.is_empty(), "dft of empty signal");
    if x.len().is_power_of_two() {
        let mut buf = x.to_vec();
        fft_pow2(&mut buf, false);
        buf
    } else {
        naive_dft(x)
    }
}

/// Inverse DFT (with the `1/N` factor).
pub fn idft(spec: &[Complex64]) -> Vec<Complex64> {
    assert!(!spec.is_empty(), "idft of empty spectrum");
    if spec.len().is_power_of_two() {
        let mut buf = spec.to_vec();
        fft_pow2(&mut buf, true);
        buf
    } else {
        naive_inverse(spec)
    }
}

/// Forward DFT of a real signal.
pub fn dft(x: &[f64]) -> Spectrum {
    let complex: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    Spectrum {
        coeffs: dft_complex(&complex),
    }
}

/// Inverse DFT of a conjugate-symmetric spectrum, real part only.
pub fn idft_real(spec: &Spectrum) -> Vec<f64> {
    idft(&spec.coeffs).iter().map(|c| c.re).collect()
}

/// 2D forward DFT: rows, then columns.
pub fn dft2(img: &Image) -> Spectrum2 {
    let (w, h) = (img.width(), img.height());
    let mut rows: Vec<Complex64> = img
        .data()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    for y in 0..h {
        let row = dft_complex(&rows[y * w..(y + 1) * w]);
        rows[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    let mut coeffs = rows;
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = coeffs[y * w + x];
        }
        let t = dft_complex(&col);
        for y in 0..h {
            coeffs[y * w + x] = t[y];
        }
    }
    Spectrum2 {
        width: w,
        height: h,
        coeffs,
    }
}

/// 2D inverse DFT, real part only.
pub fn idft2_real(spec: &Spectrum2) -> Vec<f64> {
    let (w, h) = (spec.width, spec.height);
    let mut coeffs = spec.coeffs.clone();
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = coeffs[y * w + x];
        }
        let t = idft(&col);
        for y in 0..h {
            coeffs[y * w + x] = t[y];
        }
    }
    let mut out = vec![0.0f64; w * h];
    for y in 0..h {
        let row = idft(&coeffs[y * w..(y + 1) * w]);
        for x in 0..w {
            out[y * w + x] = row[x].re;
        }
    }
    out
}

/// CSV export of a 1D spectrum: `bin,real,imag,magnitude` per line.
pub fn spectrum_to_csv(spec: &Spectrum) -> String {
    let mut out = String::from("bin,real,imag,magnitude\n");
    for (m, c) in spec.coeffs.iter().enumerate() {
        out.push_str(&format!("{m},{},{},{}\n", c.re, c.im, c.norm()));
    }
    out
}

fn require_even(n: usize) -> Result<()> {
    if n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "length {n} must be even for 2:1 decimation checks"
        )));
    }
    Ok(())
}

fn decimate_seq(x: &[f64], s: usize) -> Result<Vec<f64>> {
    if s == 0 || x.len() % s != 0 {
        return Err(Error::NonDivisible {
            width: x.len(),
            height: 1,
            factor: s,
        });
    }
    Ok(x.iter().step_by(s).copied().collect())
}

/// Check the discrete 2:1 folding identity
/// `DFT(x down 2)[m] = (X[m] + X[m + N/2]) / 2` and return the largest
/// absolute deviation over baseband bins.
pub fn verify_decimation_identity(x: &[f64]) -> Result<f64> {
    require_even(x.len())?;
    let n = x.len();
    let full = dft(x);
    let down = dft(&decimate_seq(x, 2)?);
    let mut worst = 0.0f64;
    for m in 0..n / 2 {
        let folded = 0.5 * (full.coeffs[m] + full.coeffs[m + n / 2]);
        worst = worst.max((down.coeffs[m] - folded).norm());
    }
    Ok(worst)
}

/// Whether bin `m` of an `n`-point spectrum survives an ideal lowpass at
/// cutoff fraction `c` of the full band (open passband: the bin at exactly
/// `c pi` is removed).
#[inline]
fn bin_passes(m: usize, n: usize, cutoff: f64) -> bool {
    let signed = m.min(n - m) as f64;
    signed < cutoff * n as f64 / 2.0
}

/// Ideal lowpass: zero every DFT bin at or above `cutoff * pi`, inverse
/// transform. `cutoff` is a fraction of the full band, in `(0, 1]`.
pub fn ideal_lowpass(x: &[f64], cutoff: f64) -> Result<Vec<f64>> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cutoff fraction {cutoff} outside (0, 1]"
        )));
    }
    let n = x.len();
    let mut spec = dft(x);
    for m in 0..n {
        if !bin_passes(m, n, cutoff) {
            spec.coeffs[m] = Complex64::new(0.0, 0.0);
        }
    }
    Ok(idft_real(&spec))
}

/// 2D ideal lowpass with a separable (per-axis) open passband.
pub fn ideal_lowpass2(img: &Image, cutoff: f64) -> Result<Image> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "cutoff fraction {cutoff} outside (0, 1]"
        )));
    }
    let mut spec = dft2(img);
    let (w, h) = (spec.width, spec.height);
    for my in 0..h {
        for mx in 0..w {
            if !(bin_passes(mx, w, cutoff) && bin_passes(my, h, cutoff)) {
                spec.coeffs[my * w + mx] = Complex64::new(0.0, 0.0);
            }
        }
    }
    Image::from_raw(w, h, idft2_real(&spec))
}

/// Discrete alias spectrum for decimation by `s` (the folding sum without
/// its baseband term): `A[m] = (1/s) sum_{u=1..s-1} X[m + u N / s]`.
///
/// Together with the baseband term this decomposes the decimation spectrum
/// exactly: `DFT(x down s)[m] = (1/s) X[m] + A[m]` for every signal.
pub fn alias_spectrum(x: &[f64], s: usize) -> Result<Spectrum> {
    let n = x.len();
    if s == 0 || n % s != 0 {
        return Err(Error::NonDivisible {
            width: n,
            height: 1,
            factor: s,
        });
    }
    let full = dft(x);
    let step = n / s;
    let coeffs = (0..step)
        .map(|m| {
            let mut acc = Complex64::new(0.0, 0.0);
            for u in 1..s {
                acc += full.coeffs[m + u * step];
            }
            acc / s as f64
        })
        .collect();
    Ok(Spectrum { coeffs })
}

/// Energy-conservation check for 2:1 decimation.
///
/// `lhs` runs the spatial pipeline: decimate the ideal-lowpass view, decimate
/// the raw signal, and measure the spectral energy of their difference.
/// `rhs` is computed from the full-length spectrum alone: the stop-band
/// content folded pairwise onto the decimated grid, `(1/4) sum_m
/// |Xs[m] + Xs[m + N/2]|^2` with `Xs` the spectrum restricted to the
/// stop-band. The two routes agree identically for real signals; the
/// boundary bin at exactly `pi/2` enters the fold coherently on both sides.
pub fn alias_energy_identity(x: &[f64]) -> Result<(f64, f64)> {
    require_even(x.len())?;
    let n = x.len();

    let low = ideal_lowpass(x, 0.5)?;
    let l_down = dft(&decimate_seq(&low, 2)?);
    let d_down = dft(&decimate_seq(x, 2)?);
    let lhs: f64 = l_down
        .coeffs
        .iter()
        .zip(&d_down.coeffs)
        .map(|(l, d)| (l - d).norm_sqr())
        .sum();

    let full = dft(x);
    let stop = |m: usize| -> Complex64 {
        if bin_passes(m, n, 0.5) {
            Complex64::new(0.0, 0.0)
        } else {
            full.coeffs[m]
        }
    };
    let rhs: f64 = (0..n / 2)
        .map(|m| (stop(m) + stop(m + n / 2)).norm_sqr() / 4.0)
        .sum();
    Ok((lhs, rhs))
}

/// Alias-free passband check: after an ideal half-band lowpass and 2:1
/// decimation, every surviving bin must be exactly half the original
/// coefficient at the same signed frequency, and the boundary bin must be
/// zero. Returns the largest absolute deviation.
pub fn passband_preservation_check(x: &[f64]) -> Result<f64> {
    require_even(x.len())?;
    let n = x.len();
    let full = dft(x);
    let low = ideal_lowpass(x, 0.5)?;
    let down = dft(&decimate_seq(&low, 2)?);
    let quarter = n as f64 / 4.0;
    let mut worst = 0.0f64;
    for m in 0..n / 2 {
        // Signed-frequency bookkeeping: decimated bin m above the quarter
        // line carries the original negative frequency m - N/2, which lives
        // at original index m + N/2.
        let expected = if (m as f64) < quarter {
            0.5 * full.coeffs[m]
        } else if (m as f64) > quarter {
            0.5 * full.coeffs[m + n / 2]
        } else {
            Complex64::new(0.0, 0.0)
        };
        worst = worst.max((down.coeffs[m] - expected).norm());
    }
    Ok(worst)
}

/// Wiener gain with a flag for the degenerate all-zero case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WienerGain {
    pub gain: f64,
    /// True when both spectral densities were zero and the gain fell back
    /// to the documented convention of 0.
    pub degenerate: bool,
}

/// MSE-optimal mixing gain `S_xx / (S_xx + S_nn)`, in `[0, 1]`.
pub fn wiener_gain(s_xx: f64, s_nn: f64) -> Result<WienerGain> {
    if !(s_xx >= 0.0) || !(s_nn >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "spectral densities must be nonnegative, got ({s_xx}, {s_nn})"
        )));
    }
    if s_xx == 0.0 && s_nn == 0.0 {
        return Ok(WienerGain {
            gain: 0.0,
            degenerate: true,
        });
    }
    Ok(WienerGain {
        gain: s_xx / (s_xx + s_nn),
        degenerate: false,
    })
}

/// Circular (periodic) 2D convolution, computed as a DFT product. This is
/// the convolution the folding identities assume; the pyramid's spatial
/// path uses reflect boundaries instead, a visual-quality concern that does
/// not belong in a spectral statistic.
pub fn circular_convolve(img: &Image, kernel: &Kernel) -> Image {
    let (w, h) = (img.width(), img.height());
    let r = kernel.radius_support() as isize;
    // Embed the kernel at the origin with wraparound.
    let mut k_grid = vec![0.0f64; w * h];
    for dy in -r..=r {
        for dx in -r..=r {
            let x = dx.rem_euclid(w as isize) as usize;
            let y = dy.rem_euclid(h as isize) as usize;
            k_grid[y * w + x] += kernel.at(dx, dy);
        }
    }
    let k_spec = dft2(&Image::from_raw(w, h, k_grid).expect("kernel grid is finite"));
    let mut spec = dft2(img);
    for (c, k) in spec.coeffs.iter_mut().zip(&k_spec.coeffs) {
        *c *= k;
    }
    Image::from_raw(w, h, idft2_real(&spec)).expect("convolution output is finite")
}

/// Spectral energy of the aliasing introduced by decimating `img` by `s`,
/// optionally after a prefilter (applied circularly).
///
/// The prefiltered signal is decimated twice: once raw, once through the
/// ideal per-axis lowpass at cutoff `pi/s`. The returned value is the
/// squared spectral energy of the difference; zero means the (prefiltered)
/// signal was already alias-free at this factor.
pub fn folded_energy_metric(img: &Image, s: usize, prefilter: Option<&Kernel>) -> Result<f64> {
    if s == 0 || img.width() % s != 0 || img.height() % s != 0 {
        return Err(Error::NonDivisible {
            width: img.width(),
            height: img.height(),
            factor: s,
        });
    }
    let filtered;
    let y = match prefilter {
        Some(k) => {
            filtered = circular_convolve(img, k);
            &filtered
        }
        None => img,
    };
    let naive = decimate(y, s)?;
    let clean = decimate(&ideal_lowpass2(y, 1.0 / s as f64)?, s)?;
    let diff = naive.sub(&clean)?;
    Ok(dft2(&diff).energy())
}

/// One identity checked over one signal population.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub identity: String,
    pub size: usize,
    pub signals: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl IdentityCheck {
    fn new(identity: &str, size: usize, signals: usize, max_error: f64, tolerance: f64) -> Self {
        IdentityCheck {
            identity: identity.to_string(),
            size,
            signals,
            max_error,
            tolerance,
            pass: max_error <= tolerance,
        }
    }
}

/// Run the spectral identity suite over seeded random signals.
///
/// `corrupt` is a negative control: it flips the sign of one decimated-
/// spectrum bin inside the decimation-identity check, which must make the
/// suite fail.
pub fn run_verification_suite(
    sizes: &[usize],
    signals_per_size: usize,
    seed: u64,
    corrupt: bool,
) -> Result<Vec<IdentityCheck>> {
    let rng = crate::rng::CounterRng::new(seed);
    let mut checks = Vec::new();
    for (si, &n) in sizes.iter().enumerate() {
        require_even(n)?;
        let mut e_parseval = 0.0f64;
        let mut e_decim = 0.0f64;
        let mut e_pass = 0.0f64;
        let mut e_energy = 0.0f64;
        let mut e_alias = 0.0f64;
        for sig in 0..signals_per_size {
            let stream = (si * signals_per_size + sig) as u64;
            let x: Vec<f64> = (0..n).map(|i| rng.uniform(stream, i as u64)).collect();

            let spec = dft(&x);
            let time_energy: f64 = x.iter().map(|v| v * v).sum();
            let freq_energy: f64 =
                spec.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
            e_parseval = e_parseval.max((time_energy - freq_energy).abs());

            let decim_err = if corrupt {
                let mut down = dft(&decimate_seq(&x, 2)?);
                down.coeffs[1] = -down.coeffs[1]; // intentional sign flip
                let mut worst = 0.0f64;
                for m in 0..n / 2 {
                    let folded = 0.5 * (spec.coeffs[m] + spec.coeffs[m + n / 2]);
                    worst = worst.max((down.coeffs[m] - folded).norm());
                }
                worst
            } else {
                verify_decimation_identity(&x)?
            };
            e_decim = e_decim.max(decim_err);

            e_pass = e_pass.max(passband_preservation_check(&x)?);

            let (lhs, rhs) = alias_energy_identity(&x)?;
            e_energy = e_energy.max((lhs - rhs).abs() / rhs.max(1.0));

            // Exact split of the decimation spectrum into baseband and
            // alias terms, checked for every factor that divides N.
            for s in [2usize, 4] {
                if n % s != 0 {
                    continue;
                }
                let alias = alias_spectrum(&x, s)?;
                let down = dft(&decimate_seq(&x, s)?);
                for m in 0..n / s {
                    let expected = spec.coeffs[m] / s as f64 + alias.coeffs[m];
                    e_alias = e_alias.max((down.coeffs[m] - expected).norm());
                }
            }
        }
        checks.push(IdentityCheck::new(
            "parseval",
            n,
            signals_per_size,
            e_parseval,
            1e-9,
        ));
        checks.push(IdentityCheck::new(
            "decimation-identity",
            n,
            signals_per_size,
            e_decim,
            1e-9,
        ));
        checks.push(IdentityCheck::new(
            "passband-preservation",
            n,
            signals_per_size,
            e_pass,
            1e-9,
        ));
        checks.push(IdentityCheck::new(
            "energy-conservation",
            n,
            signals_per_size,
            e_energy,
            1e-6,
        ));
        checks.push(IdentityCheck::new(
            "alias-spectrum-decomposition",
            n,
            signals_per_size,
            e_alias,
            1e-9,
        ));
    }

    // 2D spot checks: the same identities fold independently per axis.
    let n2 = 8usize;
    let mut e2_decim = 0.0f64;
    let mut e2_parseval = 0.0f64;
    let mut e2_energy = 0.0f64;
    for sig in 0..signals_per_size.min(20) {
        let stream = 0xD2 + sig as u64;
        let data: Vec<f64> = (0..n2 * n2).map(|i| rng.uniform(stream, i as u64)).collect();
        let img = Image::from_raw(n2, n2, data)?;
        let spec = dft2(&img);

        let time_energy = img.energy();
        let freq_energy = spec.energy() / (n2 * n2) as f64;
        e2_parseval = e2_parseval.max((time_energy - freq_energy).abs());

        let down = dft2(&decimate(&img, 2)?);
        for my in 0..n2 / 2 {
            for mx in 0..n2 / 2 {
                let mut folded = Complex64::new(0.0, 0.0);
                for uy in [0, n2 / 2] {
                    for ux in [0, n2 / 2] {
                        folded += spec.at(mx + ux, my + uy);
                    }
                }
                folded /= 4.0;
                e2_decim = e2_decim.max((down.at(mx, my) - folded).norm());
            }
        }

        // 2D energy conservation: pipeline difference vs the per-axis fold
        // of the stop-band spectrum.
        let lhs = folded_energy_metric(&img, 2, None)?;
        let stop = |mx: usize, my: usize| -> Complex64 {
            if bin_passes(mx, n2, 0.5) && bin_passes(my, n2, 0.5) {
                Complex64::new(0.0, 0.0)
            } else {
                spec.at(mx, my)
            }
        };
        let mut rhs = 0.0f64;
        for my in 0..n2 / 2 {
            for mx in 0..n2 / 2 {
                let mut folded = Complex64::new(0.0, 0.0);
                for uy in [0, n2 / 2] {
                    for ux in [0, n2 / 2] {
                        folded += stop(mx + ux, my + uy);
                    }
                }
                rhs += folded.norm_sqr() / 16.0;
            }
        }
        e2_energy = e2_energy.max((lhs - rhs).abs() / rhs.max(1.0));
    }
    checks.push(IdentityCheck::new(
        "parseval-2d",
        n2,
        signals_per_size.min(20),
        e2_parseval,
        1e-9,
    ));
    checks.push(IdentityCheck::new(
        "decimation-identity-2d",
        n2,
        signals_per_size.min(20),
        e2_decim,
        1e-9,
    ));
    checks.push(IdentityCheck::new(
        "energy-conservation-2d",
        n2,
        signals_per_size.min(20),
        e2_energy,
        1e-6,
    ));
    Ok(checks)
}
