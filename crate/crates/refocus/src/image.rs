//! Grayscale images, file I/O, and synthetic test patterns.
//!
//! Intensities live in `[0, 1]` after load or generation; intermediate
//! computation (residuals in particular) may leave that range, and clamping
//! happens only at save time. Pixel data is row-major `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// 2D grid of real-valued intensities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Build from raw parts. Dimensions must be at least 1x1 and the buffer
    /// length must equal `width * height`; every value must be finite.
    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "buffer length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "image contains non-finite values".into(),
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, level: f64) -> Result<Self> {
        Image::from_raw(width, height, vec![level; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    /// Sum of squared values over all pixels.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Per-pixel difference `self - other`.
    pub fn sub(&self, other: &Image) -> Result<Image> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Image::from_raw(self.width, self.height, data)
    }

    /// Center crop to `w x h` (both must not exceed the current size).
    pub fn center_crop(&self, w: usize, h: usize) -> Result<Image> {
        if w > self.width || h > self.height || w == 0 || h == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot crop {}x{} to {w}x{h}",
                self.width, self.height
            )));
        }
        let x0 = (self.width - w) / 2;
        let y0 = (self.height - h) / 2;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = (y0 + y) * self.width + x0;
            data.extend_from_slice(&self.data[row..row + w]);
        }
        Image::from_raw(w, h, data)
    }
}

/// Synthetic test pattern. The sinusoid, zone plate, and checkerboard are
/// the classic aliasing provocateurs: they concentrate energy at and above
/// the Nyquist limits of the decimated grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatternKind {
    /// Flat field at `level`.
    Constant { level: f64 },
    /// Single 1.0 pixel at the center of a zero field.
    Impulse,
    /// `0.5 + 0.5 cos(2 pi f (x cos t + y sin t))`, `f` in cycles/pixel.
    Sinusoid { freq: f64, angle: f64 },
    /// Radial chirp `0.5 + 0.5 cos(a (xc^2 + yc^2))` in centered coordinates.
    ZonePlate { chirp: f64 },
    /// Alternating `cell x cell` squares of 0 and 1.
    Checkerboard { cell: usize },
    /// i.i.d. uniform `[0, 1)` noise, deterministic given the seed.
    WhiteNoise { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub size: usize,
}

/// Generate a deterministic test pattern. Pure in the spec: the same spec
/// yields bit-identical pixels on every run.
pub fn gen_pattern(spec: &PatternSpec) -> Result<Image> {
    let n = spec.size;
    if n == 0 {
        return Err(Error::InvalidPattern("size must be positive".into()));
    }
    match spec.kind {
        PatternKind::Constant { level } => {
            if !(0.0..=1.0).contains(&level) {
                return Err(Error::InvalidPattern(format!(
                    "constant level {level} outside [0, 1]"
                )));
            }
            Image::constant(n, n, level)
        }
        PatternKind::Impulse => {
            let mut img = Image::constant(n, n, 0.0)?;
            img.set(n / 2, n / 2, 1.0);
            Ok(img)
        }
        PatternKind::Sinusoid { freq, angle } => {
            if !(freq > 0.0 && freq <= 0.5) {
                return Err(Error::InvalidPattern(format!(
                    "sinusoid frequency {freq} outside (0, 0.5] cycles/pixel"
                )));
            }
            let (c, s) = (angle.cos(), angle.sin());
            let mut data = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    let phase = 2.0 * std::f64::consts::PI
                        * freq
                        * (x as f64 * c + y as f64 * s);
                    data.push(0.5 + 0.5 * phase.cos());
                }
            }
            Image::from_raw(n, n, data)
        }
        PatternKind::ZonePlate { chirp } => {
            if !(chirp > 0.0 && chirp.is_finite()) {
                return Err(Error::InvalidPattern(format!(
                    "zone plate chirp rate {chirp} must be positive"
                )));
            }
            // Centered so the pattern is symmetric under horizontal and
            // vertical flips; odd sizes place the chirp origin on a pixel.
            let mid = (n as f64 - 1.0) / 2.0;
            let mut data = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    let xc = x as f64 - mid;
                    let yc = y as f64 - mid;
                    data.push(0.5 + 0.5 * (chirp * (xc * xc + yc * yc)).cos());
                }
            }
            Image::from_raw(n, n, data)
        }
        PatternKind::Checkerboard { cell } => {
            if cell == 0 {
                return Err(Error::InvalidPattern(
                    "checker cell size must be at least 1".into(),
                ));
            }
            let mut data = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    data.push(((x / cell + y / cell) % 2) as f64);
                }
            }
            Image::from_raw(n, n, data)
        }
        PatternKind::WhiteNoise { seed } => {
            let rng = CounterRng::new(seed);
            let data = (0..n * n).map(|i| rng.uniform(0, i as u64)).collect();
            Image::from_raw(n, n, data)
        }
    }
}

/// Clamp to `[0, 1]` and quantize with round-half-up to a byte.
#[inline]
pub fn quantize_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Load a grayscale image from a PGM (P5) or PNG file, dispatching on the
/// file extension. Intensities are `byte / 255` exactly; 8-bit color PNG is
/// reduced by the fixed luma weights `0.299 R + 0.587 G + 0.114 B`.
pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match extension_of(path)?.as_str() {
        "pgm" => load_pgm(path),
        "png" => load_png(path),
        other => Err(Error::UnsupportedFormat(format!(
            "extension .{other} (expected .pgm or .png)"
        ))),
    }
}

/// Save as PGM (P5) or PNG by extension. Values are clamped to `[0, 1]` and
/// quantized by `round(v * 255)`; the write goes through a temp file and a
/// rename so readers never observe a partial file.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    match extension_of(path)?.as_str() {
        "pgm" => save_pgm(img, path),
        "png" => save_png(img, path),
        other => Err(Error::UnsupportedFormat(format!(
            "extension .{other} (expected .pgm or .png)"
        ))),
    }
}

fn extension_of(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::UnsupportedFormat(format!("{} has no extension", path.display())))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn save_pgm(img: &Image, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(img.width * img.height + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", img.width, img.height).as_bytes());
    out.extend(img.data.iter().map(|&v| quantize_byte(v)));
    write_atomic(path, &out)
}

fn load_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_pgm(&bytes)
}

/// Parse a binary PGM (P5) byte stream.
pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    fn skip_space(bytes: &[u8], pos: &mut usize) {
        // Whitespace and '#'-comments are both legal between header tokens.
        while *pos < bytes.len() {
            match bytes[*pos] {
                b' ' | b'\t' | b'\r' | b'\n' => *pos += 1,
                b'#' => {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn read_uint(bytes: &[u8], pos: &mut usize) -> Result<usize> {
        skip_space(bytes, pos);
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::UnsupportedFormat(
                "malformed PGM header token".into(),
            ));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::UnsupportedFormat("malformed PGM header token".into()))
    }

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        let magic = String::from_utf8_lossy(bytes.get(0..2).unwrap_or(b"")).into_owned();
        return Err(Error::UnsupportedFormat(format!(
            "PGM magic {magic:?} (only binary P5 is supported)"
        )));
    }
    let mut pos = 2usize;
    let width = read_uint(bytes, &mut pos)?;
    let height = read_uint(bytes, &mut pos)?;
    let maxval = read_uint(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PGM maxval {maxval} (only 8-bit depth is supported)"
        )));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| Error::UnsupportedFormat("PGM dimensions overflow".into()))?;
    let pixels = bytes.get(pos..).unwrap_or(&[]);
    if pixels.len() < expected {
        return Err(Error::TruncatedStream {
            expected,
            got: pixels.len(),
        });
    }
    let data = pixels[..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_raw(width, height, data)
}

fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| Error::UnsupportedFormat(format!("PNG decode: {e}")))?;
    match dynimg {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
            Image::from_raw(w, h, data)
        }
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data = rgb
                .pixels()
                .map(|p| luma_f64(p.0[0], p.0[1], p.0[2]))
                .collect();
            Image::from_raw(w, h, data)
        }
        image::DynamicImage::ImageRgba8(rgba) => {
            let (w, h) = (rgba.width() as usize, rgba.height() as usize);
            let data = rgba
                .pixels()
                .map(|p| luma_f64(p.0[0], p.0[1], p.0[2]))
                .collect();
            Image::from_raw(w, h, data)
        }
        image::DynamicImage::ImageLumaA8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            Image::from_raw(w, h, data)
        }
        other => Err(Error::UnsupportedFormat(format!(
            "PNG with {:?} pixels (only 8-bit gray or color is supported)",
            other.color()
        ))),
    }
}

fn luma_f64(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let buf: Vec<u8> = img.data.iter().map(|&v| quantize_byte(v)).collect();
    let gray = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer length matches dimensions");
    let mut bytes = Vec::new();
    gray.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::UnsupportedFormat(format!("PNG encode: {e}")))?;
    write_atomic(path, &bytes)
}
