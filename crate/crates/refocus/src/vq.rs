//! Dual-path vector quantization.
//!
//! Two codebooks with different jobs: a structure codebook over patches of
//! the focused views, and a much smaller alias codebook over patches of the
//! residuals (folded high-frequency content is sparse and low-variance, so
//! it needs far fewer codes). Training is k-means++ seeded Lloyd iteration;
//! quantization is exact nearest-centroid with a fixed tie-break.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::pyramid::FocusPyramid;
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookRole {
    Structure,
    Alias,
}

/// Finite set of centroids, `size x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub size: usize,
    pub centroids: Vec<f64>,
    pub role: CodebookRole,
}

impl Codebook {
    #[inline]
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// CSV form: one centroid per row, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.size {
            let cells: Vec<String> = self.centroid(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, role: CodebookRole) -> Result<Codebook> {
        let mut centroids = Vec::new();
        let mut dim = None;
        let mut size = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| Error::InvalidArgument(format!("bad codebook csv: {e}")))?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::ShapeMismatch("ragged codebook csv".into()))
                }
                _ => {}
            }
            centroids.extend(row);
            size += 1;
        }
        let dim = dim.ok_or_else(|| Error::InvalidArgument("empty codebook csv".into()))?;
        Ok(Codebook {
            dim,
            size,
            centroids,
            role,
        })
    }
}

/// Per-position code ids over a token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub gh: usize,
    pub gw: usize,
    pub indices: Vec<usize>,
    pub role: CodebookRole,
}

impl TokenGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for y in 0..self.gh {
            let cells: Vec<String> = (0..self.gw)
                .map(|x| self.indices[y * self.gw + x].to_string())
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Flattened non-overlapping patches of an image, in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub gh: usize,
    pub gw: usize,
    pub dim: usize,
    /// `(gh * gw) x dim`, row-major.
    pub vectors: Vec<f64>,
}

impl PatchGrid {
    #[inline]
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn count(&self) -> usize {
        self.gh * self.gw
    }
}

/// Configuration of the dual tokenizer pair. The reference full-scale sizes
/// are 8192 structure and 512 alias codes; the defaults here are desk-scale
/// so toy corpora do not degenerate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualVQConfig {
    pub patch: usize,
    pub structure_size: usize,
    pub alias_size: usize,
    pub iters: usize,
    pub seed: u64,
}

/// Full-scale reference codebook sizes.
pub const REFERENCE_STRUCTURE_SIZE: usize = 8192;
pub const REFERENCE_ALIAS_SIZE: usize = 512;

impl Default for DualVQConfig {
    fn default() -> Self {
        DualVQConfig {
            patch: 4,
            structure_size: 256,
            alias_size: 32,
            iters: 20,
            seed: 0,
        }
    }
}

/// Cut an image into non-overlapping `patch x patch` blocks, each flattened
/// row-major; block order is row-major over the grid.
pub fn patchify(img: &Image, patch: usize) -> Result<PatchGrid> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let (w, h) = (img.width(), img.height());
    if w % patch != 0 || h % patch != 0 {
        return Err(Error::NonDivisible {
            width: w,
            height: h,
            factor: patch,
        });
    }
    let (gw, gh) = (w / patch, h / patch);
    let dim = patch * patch;
    let mut vectors = Vec::with_capacity(gw * gh * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    vectors.push(img.get(gx * patch + px, gy * patch + py));
                }
            }
        }
    }
    Ok(PatchGrid {
        gh,
        gw,
        dim,
        vectors,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(grid: &PatchGrid, patch: usize) -> Result<Image> {
    if patch * patch != grid.dim {
        return Err(Error::ShapeMismatch(format!(
            "patch {patch} does not match vector dim {}",
            grid.dim
        )));
    }
    let (w, h) = (grid.gw * patch, grid.gh * patch);
    let mut data = vec![0.0f64; w * h];
    for gy in 0..grid.gh {
        for gx in 0..grid.gw {
            let v = grid.vector(gy * grid.gw + gx);
            for py in 0..patch {
                for px in 0..patch {
                    data[(gy * patch + py) * w + gx * patch + px] = v[py * patch + px];
                }
            }
        }
    }
    Image::from_raw(w, h, data)
}

#[inline]
fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid index with ties broken toward the lowest index.
fn nearest(cb: &Codebook, v: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for i in 0..cb.size {
        let d = dist_sq(cb.centroid(i), v);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// k-means++ initialization: first centroid uniform, the rest sampled with
/// probability proportional to squared distance from the chosen set.
pub fn kmeans_pp_init(vectors: &[f64], dim: usize, size: usize, seed: u64) -> Vec<f64> {
    let n = vectors.len() / dim;
    assert!(n >= 1 && vectors.len() % dim == 0);
    let mut seq = CounterRng::new(seed).sequence(0);
    let vec_at = |i: usize| &vectors[i * dim..(i + 1) * dim];

    let mut centroids: Vec<f64> = Vec::with_capacity(size * dim);
    let first = seq.next_below(n);
    centroids.extend_from_slice(vec_at(first));

    let mut best_d: Vec<f64> = (0..n).map(|i| dist_sq(vec_at(i), vec_at(first))).collect();
    for _ in 1..size {
        let total: f64 = best_d.iter().sum();
        let pick = if total > 0.0 {
            let threshold = seq.next_f64() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in best_d.iter().enumerate() {
                acc += d;
                if acc >= threshold {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // Every point already coincides with a centroid; duplicates are
            // allowed, pick uniformly.
            seq.next_below(n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(vec_at(pick));
        let new = &centroids[start..start + dim];
        for i in 0..n {
            let d = dist_sq(vec_at(i), new);
            if d < best_d[i] {
                best_d[i] = d;
            }
        }
    }
    centroids
}

/// Training outcome diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean squared distance to the assigned centroid, recorded after each
    /// assignment step. Non-increasing by construction.
    pub objective_trace: Vec<f64>,
    /// Set when the codebook holds duplicate centroids (more codes than
    /// distinct vectors).
    pub duplicate_centroids: bool,
}

/// Lloyd's k-means over flat `count x dim` vectors.
pub fn train_codebook(
    vectors: &[f64],
    dim: usize,
    size: usize,
    iters: usize,
    seed: u64,
    role: CodebookRole,
) -> Result<(Codebook, TrainReport)> {
    if dim == 0 || size == 0 {
        return Err(Error::InvalidArgument(
            "codebook dim and size must be positive".into(),
        ));
    }
    if vectors.is_empty() || vectors.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "vector buffer of length {} is not a multiple of dim {dim}",
            vectors.len()
        )));
    }
    let n = vectors.len() / dim;
    let vec_at = |i: usize| &vectors[i * dim..(i + 1) * dim];

    let mut cb = Codebook {
        dim,
        size,
        centroids: kmeans_pp_init(vectors, dim, size, seed),
        role,
    };
    let mut trace = Vec::with_capacity(iters);
    let mut assignment = vec![0usize; n];

    for _ in 0..iters {
        let mut sse = 0.0;
        for i in 0..n {
            let idx = nearest(&cb, vec_at(i));
            assignment[i] = idx;
            sse += dist_sq(cb.centroid(idx), vec_at(i));
        }
        trace.push(sse / n as f64);

        let mut sums = vec![0.0f64; size * dim];
        let mut counts = vec![0usize; size];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(vec_at(i)) {
                *s += v;
            }
        }
        for c in 0..size {
            if counts[c] > 0 {
                for d in 0..dim {
                    cb.centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
        // Re-seed empty clusters to the farthest point from its centroid;
        // ties go to the lowest point index.
        for c in 0..size {
            if counts[c] == 0 {
                let mut far = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = dist_sq(cb.centroid(assignment[i]), vec_at(i));
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                let (c0, v) = (c * dim, vec_at(far));
                cb.centroids[c0..c0 + dim].copy_from_slice(v);
            }
        }
    }

    let mut duplicate = false;
    'outer: for i in 0..size {
        for j in (i + 1)..size {
            if cb.centroid(i) == cb.centroid(j) {
                duplicate = true;
                break 'outer;
            }
        }
    }
    Ok((
        cb,
        TrainReport {
            objective_trace: trace,
            duplicate_centroids: duplicate,
        },
    ))
}

/// Map every patch to its nearest centroid. Returns the token grid and the
/// centroid-lookup reconstruction.
pub fn quantize(cb: &Codebook, patches: &PatchGrid) -> Result<(TokenGrid, PatchGrid)> {
    if patches.dim != cb.dim {
        return Err(Error::ShapeMismatch(format!(
            "patch dim {} vs codebook dim {}",
            patches.dim, cb.dim
        )));
    }
    let mut indices = Vec::with_capacity(patches.count());
    let mut recon = Vec::with_capacity(patches.vectors.len());
    for i in 0..patches.count() {
        let idx = nearest(cb, patches.vector(i));
        indices.push(idx);
        recon.extend_from_slice(cb.centroid(idx));
    }
    Ok((
        TokenGrid {
            gh: patches.gh,
            gw: patches.gw,
            indices,
            role: cb.role,
        },
        PatchGrid {
            gh: patches.gh,
            gw: patches.gw,
            dim: cb.dim,
            vectors: recon,
        },
    ))
}

/// Centroid lookup for a token grid.
pub fn reconstruct(cb: &Codebook, grid: &TokenGrid) -> Result<PatchGrid> {
    let mut vectors = Vec::with_capacity(grid.indices.len() * cb.dim);
    for &idx in &grid.indices {
        if idx >= cb.size {
            return Err(Error::TokenOutOfRange {
                id: idx,
                size: cb.size,
            });
        }
        vectors.extend_from_slice(cb.centroid(idx));
    }
    Ok(PatchGrid {
        gh: grid.gh,
        gw: grid.gw,
        dim: cb.dim,
        vectors,
    })
}

/// Code-usage histogram and perplexity (`exp` of the empirical entropy).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookStats {
    pub usage: Vec<usize>,
    pub perplexity: f64,
}

pub fn codebook_stats(grid: &TokenGrid, cb: &Codebook) -> CodebookStats {
    let mut usage = vec![0usize; cb.size];
    for &i in &grid.indices {
        if i < cb.size {
            usage[i] += 1;
        }
    }
    let total: usize = usage.iter().sum();
    let mut entropy = 0.0;
    if total > 0 {
        for &c in &usage {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
    }
    CodebookStats {
        usage,
        perplexity: entropy.exp(),
    }
}

/// Mean per-dimension variance of a vector population; the diagnostic that
/// motivates the small alias codebook.
pub fn variance_per_dim(vectors: &[f64], dim: usize) -> f64 {
    if vectors.is_empty() || dim == 0 {
        return 0.0;
    }
    let n = vectors.len() / dim;
    let mut total = 0.0;
    for d in 0..dim {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let v = vectors[i * dim + d];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        total += (sumsq / n as f64 - mean * mean).max(0.0);
    }
    total / dim as f64
}

/// The trained pair of tokenizers plus their reports.
#[derive(Debug, Clone)]
pub struct DualCodebooks {
    pub structure: Codebook,
    pub alias: Codebook,
    pub structure_report: TrainReport,
    pub alias_report: TrainReport,
    pub structure_variance: f64,
    pub alias_variance: f64,
}

/// Train the structure codebook on patches of the (noisy) focused views and
/// the alias codebook on patches of the (noiseless) residuals, pooling every
/// scale whose dimensions divide by the patch size.
pub fn train_dual_codebooks(
    pyramids: &[&FocusPyramid],
    cfg: &DualVQConfig,
) -> Result<DualCodebooks> {
    if cfg.alias_size >= cfg.structure_size {
        return Err(Error::InvalidArgument(format!(
            "alias codebook ({}) must be smaller than the structure codebook ({})",
            cfg.alias_size, cfg.structure_size
        )));
    }
    let mut structure_vecs: Vec<f64> = Vec::new();
    let mut alias_vecs: Vec<f64> = Vec::new();
    for pyr in pyramids {
        for scale in &pyr.scales {
            if scale.l.width() % cfg.patch != 0 || scale.l.height() % cfg.patch != 0 {
                continue;
            }
            structure_vecs.extend_from_slice(&patchify(&scale.l, cfg.patch)?.vectors);
            alias_vecs.extend_from_slice(&patchify(&scale.a, cfg.patch)?.vectors);
        }
    }
    if structure_vecs.is_empty() {
        return Err(Error::InvalidArgument(
            "no scale was divisible by the patch size; nothing to train on".into(),
        ));
    }
    let dim = cfg.patch * cfg.patch;
    let (structure, structure_report) = train_codebook(
        &structure_vecs,
        dim,
        cfg.structure_size,
        cfg.iters,
        cfg.seed,
        CodebookRole::Structure,
    )?;
    let (alias, alias_report) = train_codebook(
        &alias_vecs,
        dim,
        cfg.alias_size,
        cfg.iters,
        cfg.seed.wrapping_add(1),
        CodebookRole::Alias,
    )?;
    Ok(DualCodebooks {
        structure_variance: variance_per_dim(&structure_vecs, dim),
        alias_variance: variance_per_dim(&alias_vecs, dim),
        structure,
        alias,
        structure_report,
        alias_report,
    })
}
