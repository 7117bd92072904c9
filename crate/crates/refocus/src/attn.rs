//! The teacher's alias-gate cross-attention block.
//!
//! The teacher representation is the sum of two branches over one shared
//! output projection:
//!
//! * windowed self-attention over the embedded structure tokens (causal
//!   within the window), and
//! * full cross-attention from structure queries to alias keys/values.
//!
//! The student keeps only the first branch, so zeroing the cross value
//! projection makes the teacher bit-equal to the student. Alias keys carry
//! no positional encoding (alias evidence is treated as a set); structure
//! embeddings get learned absolute positions.
//!
//! Everything here is explicit forward/backward with softmax-attention
//! rules; gradients are verified against central finite differences.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::CounterRng;

/// One branch's Q/K/V projections, each `d x d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
}

impl Projections {
    fn zeros(d: usize, d_h: usize) -> Projections {
        Projections {
            w_q: Mat::zeros(d, d_h),
            w_k: Mat::zeros(d, d_h),
            w_v: Mat::zeros(d, d_h),
        }
    }
}

/// Shape of the block, independent of its weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub d: usize,
    pub d_h: usize,
    pub window: usize,
    pub max_len: usize,
    pub structure_vocab: usize,
    pub alias_vocab: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        AttnConfig {
            d: 16,
            d_h: 8,
            window: 4,
            max_len: 64,
            structure_vocab: 256,
            alias_vocab: 32,
        }
    }
}

/// Embedding tables and projections of the teacher block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub cfg: AttnConfig,
    /// Structure token embeddings, `structure_vocab x d`.
    pub e_struct: Mat,
    /// Alias token embeddings, `alias_vocab x d`.
    pub e_alias: Mat,
    /// Learned absolute positions for structure tokens, `max_len x d`.
    pub pos: Mat,
    pub wsa: Projections,
    pub cross: Projections,
    /// Shared output projection `d_h x d`, initialized near zero so the
    /// residual stream dominates early in training.
    pub w_o: Mat,
}

pub const PARAM_TENSOR_NAMES: [&str; 10] = [
    "e_struct", "e_alias", "pos", "wsa.w_q", "wsa.w_k", "wsa.w_v", "cross.w_q", "cross.w_k",
    "cross.w_v", "w_o",
];

impl AttnParams {
    /// Seeded initialization: projections `N(0, 1)/sqrt(d)`, embeddings and
    /// positions uniform in `[-0.1, 0.1]`, output projection near zero.
    pub fn init(cfg: AttnConfig, seed: u64) -> AttnParams {
        let rng = CounterRng::new(seed);
        let scale = 1.0 / (cfg.d as f64).sqrt();
        let mut stream = 0u64;
        let mut normal_mat = |rows: usize, cols: usize, s: f64| {
            stream += 1;
            let st = stream;
            Mat::from_fn(rows, cols, |i, j| rng.normal(st, (i * cols + j) as u64) * s)
        };
        let wsa = Projections {
            w_q: normal_mat(cfg.d, cfg.d_h, scale),
            w_k: normal_mat(cfg.d, cfg.d_h, scale),
            w_v: normal_mat(cfg.d, cfg.d_h, scale),
        };
        let cross = Projections {
            w_q: normal_mat(cfg.d, cfg.d_h, scale),
            w_k: normal_mat(cfg.d, cfg.d_h, scale),
            w_v: normal_mat(cfg.d, cfg.d_h, scale),
        };
        let w_o = normal_mat(cfg.d_h, cfg.d, 1e-3);
        let mut uniform_mat = |rows: usize, cols: usize| {
            stream += 1;
            let st = stream;
            Mat::from_fn(rows, cols, |i, j| {
                0.2 * rng.uniform(st, (i * cols + j) as u64) - 0.1
            })
        };
        AttnParams {
            e_struct: uniform_mat(cfg.structure_vocab, cfg.d),
            e_alias: uniform_mat(cfg.alias_vocab, cfg.d),
            pos: uniform_mat(cfg.max_len, cfg.d),
            wsa,
            cross,
            w_o,
            cfg,
        }
    }

    pub fn tensor(&self, name: &str) -> &Mat {
        match name {
            "e_struct" => &self.e_struct,
            "e_alias" => &self.e_alias,
            "pos" => &self.pos,
            "wsa.w_q" => &self.wsa.w_q,
            "wsa.w_k" => &self.wsa.w_k,
            "wsa.w_v" => &self.wsa.w_v,
            "cross.w_q" => &self.cross.w_q,
            "cross.w_k" => &self.cross.w_k,
            "cross.w_v" => &self.cross.w_v,
            "w_o" => &self.w_o,
            _ => panic!("unknown tensor {name}"),
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Mat {
        match name {
            "e_struct" => &mut self.e_struct,
            "e_alias" => &mut self.e_alias,
            "pos" => &mut self.pos,
            "wsa.w_q" => &mut self.wsa.w_q,
            "wsa.w_k" => &mut self.wsa.w_k,
            "wsa.w_v" => &mut self.wsa.w_v,
            "cross.w_q" => &mut self.cross.w_q,
            "cross.w_k" => &mut self.cross.w_k,
            "cross.w_v" => &mut self.cross.w_v,
            "w_o" => &mut self.w_o,
            _ => panic!("unknown tensor {name}"),
        }
    }
}

/// Gradients with the same tensor layout as [`AttnParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    pub e_struct: Mat,
    pub e_alias: Mat,
    pub pos: Mat,
    pub wsa: Projections,
    pub cross: Projections,
    pub w_o: Mat,
}

impl AttnGrads {
    pub fn zeros(cfg: &AttnConfig) -> AttnGrads {
        AttnGrads {
            e_struct: Mat::zeros(cfg.structure_vocab, cfg.d),
            e_alias: Mat::zeros(cfg.alias_vocab, cfg.d),
            pos: Mat::zeros(cfg.max_len, cfg.d),
            wsa: Projections::zeros(cfg.d, cfg.d_h),
            cross: Projections::zeros(cfg.d, cfg.d_h),
            w_o: Mat::zeros(cfg.d_h, cfg.d),
        }
    }

    pub fn tensor(&self, name: &str) -> &Mat {
        match name {
            "e_struct" => &self.e_struct,
            "e_alias" => &self.e_alias,
            "pos" => &self.pos,
            "wsa.w_q" => &self.wsa.w_q,
            "wsa.w_k" => &self.wsa.w_k,
            "wsa.w_v" => &self.wsa.w_v,
            "cross.w_q" => &self.cross.w_q,
            "cross.w_k" => &self.cross.w_k,
            "cross.w_v" => &self.cross.w_v,
            "w_o" => &self.w_o,
            _ => panic!("unknown tensor {name}"),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for name in PARAM_TENSOR_NAMES {
            let t = match name {
                "e_struct" => &mut self.e_struct,
                "e_alias" => &mut self.e_alias,
                "pos" => &mut self.pos,
                "wsa.w_q" => &mut self.wsa.w_q,
                "wsa.w_k" => &mut self.wsa.w_k,
                "wsa.w_v" => &mut self.wsa.w_v,
                "cross.w_q" => &mut self.cross.w_q,
                "cross.w_k" => &mut self.cross.w_k,
                "cross.w_v" => &mut self.cross.w_v,
                "w_o" => &mut self.w_o,
                _ => unreachable!(),
            };
            for v in &mut t.data {
                *v *= s;
            }
        }
    }
}

/// Paired structure and alias token ids for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub structure_ids: Vec<usize>,
    pub alias_ids: Vec<usize>,
}

/// Row-gather of embedding vectors: row `i` of the result is
/// `table[ids[i]]`.
pub fn embed(ids: &[usize], table: &Mat) -> Result<Mat> {
    let mut out = Mat::zeros(ids.len(), table.cols);
    for (i, &id) in ids.iter().enumerate() {
        if id >= table.rows {
            return Err(Error::TokenOutOfRange {
                id,
                size: table.rows,
            });
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Embedded structure sequence: token embedding plus learned position.
pub fn embed_structure(ids: &[usize], params: &AttnParams) -> Result<Mat> {
    if ids.len() > params.cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} exceeds max_len {}",
            ids.len(),
            params.cfg.max_len
        )));
    }
    let mut x = embed(ids, &params.e_struct)?;
    for i in 0..x.rows {
        for (xv, pv) in x.row_mut(i).iter_mut().zip(params.pos.row(i)) {
            *xv += pv;
        }
    }
    Ok(x)
}

/// Saved forward intermediates of one attention branch.
#[derive(Debug, Clone)]
pub struct AttnCache {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Post-softmax probabilities, `N x M`; masked entries are exactly 0.
    pub probs: Mat,
    /// `probs * V`, `N x d_h` (pre output projection).
    pub h: Mat,
}

fn attention_forward(
    x_q: &Mat,
    y_kv: &Mat,
    proj: &Projections,
    w_o: &Mat,
    mask: impl Fn(usize, usize) -> bool,
) -> (Mat, AttnCache) {
    let d_h = proj.w_q.cols;
    let n = x_q.rows;
    let m = y_kv.rows;
    let q = x_q.matmul(&proj.w_q);
    let k = y_kv.matmul(&proj.w_k);
    let v = y_kv.matmul(&proj.w_v);
    let scale = 1.0 / (d_h as f64).sqrt();

    let mut probs = Mat::zeros(n, m);
    for i in 0..n {
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..m {
            if mask(i, j) {
                let s: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                let s = s * scale;
                probs.set(i, j, s);
                row_max = row_max.max(s);
            }
        }
        if row_max == f64::NEG_INFINITY {
            continue; // no keys visible: the row stays all-zero
        }
        let mut total = 0.0;
        for j in 0..m {
            if mask(i, j) {
                let e = (probs.at(i, j) - row_max).exp();
                probs.set(i, j, e);
                total += e;
            }
        }
        for j in 0..m {
            if mask(i, j) {
                probs.set(i, j, probs.at(i, j) / total);
            }
        }
    }
    let h = probs.matmul(&v);
    let out = h.matmul(w_o);
    (out, AttnCache { q, k, v, probs, h })
}

/// Backward through one attention branch. Returns `(dX_q, dY_kv,
/// dProjections, dW_o)`; for self-attention the caller adds `dX_q` and
/// `dY_kv` together.
fn attention_backward(
    x_q: &Mat,
    y_kv: &Mat,
    proj: &Projections,
    w_o: &Mat,
    cache: &AttnCache,
    d_out: &Mat,
) -> (Mat, Mat, Projections, Mat) {
    let scale = 1.0 / (proj.w_q.cols as f64).sqrt();

    let d_wo = cache.h.matmul_at(d_out);
    let d_h = d_out.matmul_bt(w_o);

    let d_probs = d_h.matmul_bt(&cache.v);
    let d_v = cache.probs.matmul_at(&d_h);

    // Softmax backward per row; masked entries have prob 0 and stay 0.
    let n = cache.probs.rows;
    let m = cache.probs.cols;
    let mut d_scores = Mat::zeros(n, m);
    for i in 0..n {
        let dot: f64 = d_probs
            .row(i)
            .iter()
            .zip(cache.probs.row(i))
            .map(|(a, b)| a * b)
            .sum();
        for j in 0..m {
            let p = cache.probs.at(i, j);
            d_scores.set(i, j, p * (d_probs.at(i, j) - dot));
        }
    }

    let d_q = d_scores.matmul(&cache.k).scale(scale);
    let d_k = d_scores.matmul_at(&cache.q).scale(scale);

    let d_wq = x_q.matmul_at(&d_q);
    let d_wk = y_kv.matmul_at(&d_k);
    let d_wv = y_kv.matmul_at(&d_v);

    let d_xq = d_q.matmul_bt(&proj.w_q);
    let mut d_ykv = d_k.matmul_bt(&proj.w_k);
    d_ykv.add_assign(&d_v.matmul_bt(&proj.w_v));

    (
        d_xq,
        d_ykv,
        Projections {
            w_q: d_wq,
            w_k: d_wk,
            w_v: d_wv,
        },
        d_wo,
    )
}

fn wsa_mask(window: usize) -> impl Fn(usize, usize) -> bool {
    move |i, j| j <= i && i - j < window
}

/// Windowed self-attention branch: causal within a window of `cfg.window`
/// positions.
pub fn wsa_forward(x: &Mat, params: &AttnParams) -> Mat {
    attention_forward(x, x, &params.wsa, &params.w_o, wsa_mask(params.cfg.window)).0
}

/// Cross-attention branch: structure queries against all alias keys/values.
/// An empty alias sequence contributes exactly zero.
pub fn cross_attn_forward(x_l: &Mat, a_emb: &Mat, params: &AttnParams) -> Mat {
    if a_emb.rows == 0 {
        return Mat::zeros(x_l.rows, params.w_o.cols);
    }
    attention_forward(x_l, a_emb, &params.cross, &params.w_o, |_, _| true).0
}

/// Teacher forward: windowed self-attention plus the alias cross branch.
pub fn agx_forward(seq: &TokenSequence, params: &AttnParams) -> Result<Mat> {
    let x = embed_structure(&seq.structure_ids, params)?;
    let wsa_out = wsa_forward(&x, params);
    let a_emb = embed(&seq.alias_ids, &params.e_alias)?;
    let cross_out = cross_attn_forward(&x, &a_emb, params);
    Ok(wsa_out.add(&cross_out))
}

/// Student (deployment) forward: the identical computation with the cross
/// branch omitted. Alias ids are never read.
pub fn student_forward(seq: &TokenSequence, params: &AttnParams) -> Result<Mat> {
    let x = embed_structure(&seq.structure_ids, params)?;
    Ok(wsa_forward(&x, params))
}

/// Analytic gradients of `sum(upstream .* Z)` with respect to every
/// parameter tensor.
pub fn agx_backward(
    seq: &TokenSequence,
    params: &AttnParams,
    upstream: &Mat,
) -> Result<AttnGrads> {
    let (grads, _) = agx_backward_with_input_grad(seq, params, upstream)?;
    Ok(grads)
}

/// As [`agx_backward`], additionally returning the gradient that reaches the
/// embedded structure input (useful for stacking a head on top).
pub fn agx_backward_with_input_grad(
    seq: &TokenSequence,
    params: &AttnParams,
    upstream: &Mat,
) -> Result<(AttnGrads, Mat)> {
    let x = embed_structure(&seq.structure_ids, params)?;
    let a_emb = embed(&seq.alias_ids, &params.e_alias)?;
    let mut grads = AttnGrads::zeros(&params.cfg);

    // WSA branch.
    let (_, wsa_cache) = attention_forward(
        &x,
        &x,
        &params.wsa,
        &params.w_o,
        wsa_mask(params.cfg.window),
    );
    let (d_xq, d_xkv, d_wsa, d_wo) =
        attention_backward(&x, &x, &params.wsa, &params.w_o, &wsa_cache, upstream);
    let mut d_x = d_xq;
    d_x.add_assign(&d_xkv);
    grads.wsa = d_wsa;
    grads.w_o.add_assign(&d_wo);

    // Cross branch.
    if a_emb.rows > 0 {
        let (_, cross_cache) =
            attention_forward(&x, &a_emb, &params.cross, &params.w_o, |_, _| true);
        let (d_xq, d_a, d_cross, d_wo) = attention_backward(
            &x,
            &a_emb,
            &params.cross,
            &params.w_o,
            &cross_cache,
            upstream,
        );
        d_x.add_assign(&d_xq);
        grads.cross = d_cross;
        grads.w_o.add_assign(&d_wo);
        for (i, &id) in seq.alias_ids.iter().enumerate() {
            for (g, dv) in grads.e_alias.row_mut(id).iter_mut().zip(d_a.row(i)) {
                *g += dv;
            }
        }
    }

    // Scatter the structure-input gradient into embeddings and positions.
    for (i, &id) in seq.structure_ids.iter().enumerate() {
        for (g, dv) in grads.e_struct.row_mut(id).iter_mut().zip(d_x.row(i)) {
            *g += dv;
        }
        for (g, dv) in grads.pos.row_mut(i).iter_mut().zip(d_x.row(i)) {
            *g += dv;
        }
    }
    Ok((grads, d_x))
}

/// Student-path gradients: identical graph with no cross branch. Alias
/// tensors receive exactly zero.
pub fn student_backward_with_input_grad(
    seq: &TokenSequence,
    params: &AttnParams,
    upstream: &Mat,
) -> Result<(AttnGrads, Mat)> {
    let x = embed_structure(&seq.structure_ids, params)?;
    let mut grads = AttnGrads::zeros(&params.cfg);
    let (_, cache) = attention_forward(
        &x,
        &x,
        &params.wsa,
        &params.w_o,
        wsa_mask(params.cfg.window),
    );
    let (d_xq, d_xkv, d_wsa, d_wo) =
        attention_backward(&x, &x, &params.wsa, &params.w_o, &cache, upstream);
    let mut d_x = d_xq;
    d_x.add_assign(&d_xkv);
    grads.wsa = d_wsa;
    grads.w_o = d_wo;
    for (i, &id) in seq.structure_ids.iter().enumerate() {
        for (g, dv) in grads.e_struct.row_mut(id).iter_mut().zip(d_x.row(i)) {
            *g += dv;
        }
        for (g, dv) in grads.pos.row_mut(i).iter_mut().zip(d_x.row(i)) {
            *g += dv;
        }
    }
    Ok((grads, d_x))
}

/// One tensor's worst finite-difference deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub param: String,
    pub max_rel_err: f64,
}

/// Verify every analytic parameter gradient against central finite
/// differences of the probe loss `L = sum(G .* Z)`, with `G` fixed random.
/// Relative error uses `max(|analytic|, |numeric|, 1e-6)` in the
/// denominator so dead entries compare as exact.
pub fn grad_check(seq: &TokenSequence, params: &AttnParams, seed: u64) -> Result<Vec<GradCheckResult>> {
    let n = seq.structure_ids.len();
    let d = params.cfg.d;
    let rng = CounterRng::new(seed);
    let g = Mat::from_fn(n, d, |i, j| rng.normal(0xC0FFEE, (i * d + j) as u64));

    let loss = |p: &AttnParams| -> f64 {
        let z = agx_forward(seq, p).expect("forward in grad check");
        z.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
    };
    let analytic = agx_backward(seq, params, &g)?;

    let eps = 1e-5;
    let mut results = Vec::new();
    let mut probe = params.clone();
    for name in PARAM_TENSOR_NAMES {
        let len = params.tensor(name).data.len();
        let mut worst = 0.0f64;
        for idx in 0..len {
            let orig = probe.tensor(name).data[idx];
            probe.tensor_mut(name).data[idx] = orig + eps;
            let up = loss(&probe);
            probe.tensor_mut(name).data[idx] = orig - eps;
            let down = loss(&probe);
            probe.tensor_mut(name).data[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.tensor(name).data[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        results.push(GradCheckResult {
            param: name.to_string(),
            max_rel_err: worst,
        });
    }
    Ok(results)
}

/// Per-dimension least-squares fit of the gated-residual reading
/// `Z = X_L + alpha .* A_tilde`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateDiagnostic {
    /// Raw least-squares gains; `None` marks an all-zero residual column
    /// where the gain is undefined.
    pub raw: Vec<Option<f64>>,
    /// The same gains clamped into `[0, 1]`.
    pub clamped: Vec<Option<f64>>,
}

pub fn fit_gate_diagnostic(z: &Mat, x_l: &Mat, a_tilde: &Mat) -> Result<GateDiagnostic> {
    if z.rows != x_l.rows || z.cols != x_l.cols || z.rows != a_tilde.rows || z.cols != a_tilde.cols
    {
        return Err(Error::ShapeMismatch(
            "gate diagnostic inputs must share shape".into(),
        ));
    }
    let mut raw = Vec::with_capacity(z.cols);
    let mut clamped = Vec::with_capacity(z.cols);
    for j in 0..z.cols {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..z.rows {
            let a = a_tilde.at(i, j);
            num += (z.at(i, j) - x_l.at(i, j)) * a;
            den += a * a;
        }
        if den == 0.0 {
            raw.push(None);
            clamped.push(None);
        } else {
            let alpha = num / den;
            raw.push(Some(alpha));
            clamped.push(Some(alpha.clamp(0.0, 1.0)));
        }
    }
    Ok(GateDiagnostic { raw, clamped })
}

/// Multiply-add count of one attention block forward pass at sequence
/// length `n` (and `m` alias tokens when the cross branch is present).
pub fn block_flops(cfg: &AttnConfig, n: usize, m: usize, include_cross: bool) -> u64 {
    let (n, d, d_h, w) = (n as u64, cfg.d as u64, cfg.d_h as u64, cfg.window as u64);
    // Positions added to embeddings.
    let mut flops = n * d;
    // WSA: Q, K, V projections; windowed scores; weighted values; output
    // projection. Visible keys per query: min(i + 1, window), summed over i.
    let visible: u64 = (0..n).map(|i| (i + 1).min(w)).sum();
    flops += 3 * n * d * d_h; // projections
    flops += visible * d_h; // scores
    flops += visible; // softmax normalization
    flops += visible * d_h; // probs * V
    flops += n * d_h * d; // W_O
    if include_cross {
        let m = m as u64;
        flops += 2 * m * d * d_h + n * d * d_h; // K, V on alias; Q on structure
        flops += n * m * d_h; // scores
        flops += n * m; // softmax
        flops += n * m * d_h; // probs * V
        flops += n * d_h * d; // W_O
        flops += n * d; // branch sum
    }
    flops
}

/// Flop count of the deployed student at sequence length `n`. Independent
/// of the alias path by construction.
pub fn student_inference_flops(cfg: &AttnConfig, n: usize) -> u64 {
    block_flops(cfg, n, 0, false)
}

/// Flop count of a vanilla (structure-only) block at sequence length `n`.
pub fn vanilla_block_flops(cfg: &AttnConfig, n: usize) -> u64 {
    block_flops(cfg, n, 0, false)
}

const PARAM_MAGIC: &[u8; 8] = b"AGXPRM01";

#[derive(Debug, Serialize, Deserialize)]
struct BlobHeader {
    schema: String,
    cfg: AttnConfig,
    tensors: Vec<(String, usize, usize)>,
}

/// Serialize parameters as a JSON shape header followed by little-endian
/// `f64` data.
pub fn save_params(params: &AttnParams, path: &Path) -> Result<()> {
    let header = BlobHeader {
        schema: "refocus/agx-params/v1".to_string(),
        cfg: params.cfg,
        tensors: PARAM_TENSOR_NAMES
            .iter()
            .map(|&n| {
                let t = params.tensor(n);
                (n.to_string(), t.rows, t.cols)
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::InvalidArgument(format!("header encode: {e}")))?;
    let mut blob = Vec::new();
    blob.extend_from_slice(PARAM_MAGIC);
    blob.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    blob.extend_from_slice(&header_json);
    for name in PARAM_TENSOR_NAMES {
        for v in &params.tensor(name).data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::image::write_atomic(path, &blob)
}

/// Inverse of [`save_params`], validating magic, header, and data length.
pub fn load_params(path: &Path) -> Result<AttnParams> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() < 16 || &bytes[0..8] != PARAM_MAGIC {
        return Err(Error::MalformedBlob("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(Error::MalformedBlob("truncated header".into()));
    }
    let header: BlobHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::MalformedBlob(format!("header decode: {e}")))?;
    let mut params = AttnParams::init(header.cfg, 0);
    let mut offset = header_end;
    for (name, rows, cols) in &header.tensors {
        let len = rows * cols;
        let end = offset + len * 8;
        if bytes.len() < end {
            return Err(Error::MalformedBlob(format!("truncated tensor {name}")));
        }
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let start = offset + i * 8;
            data.push(f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap()));
        }
        let t = params.tensor_mut(name);
        if t.rows != *rows || t.cols != *cols {
            return Err(Error::MalformedBlob(format!(
                "tensor {name} shape {rows}x{cols} does not match config"
            )));
        }
        t.data = data;
        offset = end;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> AttnConfig {
        AttnConfig {
            d: 6,
            d_h: 4,
            window: 2,
            max_len: 8,
            structure_vocab: 10,
            alias_vocab: 5,
        }
    }

    fn tiny_seq() -> TokenSequence {
        TokenSequence {
            structure_ids: vec![1, 4, 2, 7],
            alias_ids: vec![0, 3, 1],
        }
    }

    #[test]
    fn embed_gathers_rows() {
        let table = Mat::from_fn(4, 3, |i, j| (i * 10 + j) as f64);
        let out = embed(&[2, 0, 2], &table).unwrap();
        assert_eq!(out.row(0), table.row(2));
        assert_eq!(out.row(1), table.row(0));
        assert_eq!(out.row(2), table.row(2));
        assert!(matches!(
            embed(&[4], &table),
            Err(Error::TokenOutOfRange { id: 4, size: 4 })
        ));
    }

    #[test]
    fn single_token_wsa_is_value_projection() {
        let params = AttnParams::init(tiny_cfg(), 3);
        let x = Mat::from_fn(1, 6, |_, j| 0.3 * j as f64 - 0.7);
        let out = wsa_forward(&x, &params);
        let expected = x.matmul(&params.wsa.w_v).matmul(&params.w_o);
        for (a, b) in out.data.iter().zip(&expected.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_value_projection_zeroes_wsa() {
        let mut params = AttnParams::init(tiny_cfg(), 4);
        params.wsa.w_v = Mat::zeros(6, 4);
        let x = Mat::from_fn(3, 6, |i, j| (i + j) as f64 * 0.1);
        let out = wsa_forward(&x, &params);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    /// Independent per-position loop: recompute windowed causal attention
    /// the slow way.
    fn naive_wsa(x: &Mat, params: &AttnParams) -> Mat {
        let (n, d_h) = (x.rows, params.cfg.d_h);
        let q = x.matmul(&params.wsa.w_q);
        let k = x.matmul(&params.wsa.w_k);
        let v = x.matmul(&params.wsa.w_v);
        let mut h = Mat::zeros(n, d_h);
        for i in 0..n {
            let lo = (i + 1).saturating_sub(params.cfg.window);
            let scores: Vec<f64> = (lo..=i)
                .map(|j| {
                    q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>()
                        / (d_h as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (jj, j) in (lo..=i).enumerate() {
                let w = exps[jj] / total;
                for c in 0..d_h {
                    h.data[i * d_h + c] += w * v.at(j, c);
                }
            }
        }
        h.matmul(&params.w_o)
    }

    #[test]
    fn wsa_matches_naive_loop_oracle() {
        let params = AttnParams::init(tiny_cfg(), 5);
        let x = Mat::from_fn(3, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4);
        let fast = wsa_forward(&x, &params);
        let slow = naive_wsa(&x, &params);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn cross_single_alias_token_broadcasts() {
        let params = AttnParams::init(tiny_cfg(), 6);
        let x = Mat::from_fn(4, 6, |i, j| (i as f64 - j as f64) * 0.15);
        let a = Mat::from_fn(1, 6, |_, j| 0.1 * j as f64);
        let out = cross_attn_forward(&x, &a, &params);
        let expected = a.matmul(&params.cross.w_v).matmul(&params.w_o);
        for i in 0..4 {
            for (got, want) in out.row(i).iter().zip(&expected.data) {
                assert!((got - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cross_zero_embeddings_give_zero_output() {
        let params = AttnParams::init(tiny_cfg(), 7);
        let x = Mat::from_fn(2, 6, |i, j| (i + j) as f64 * 0.1);
        let a = Mat::zeros(3, 6);
        let out = cross_attn_forward(&x, &a, &params);
        assert!(out.data.iter().all(|&v| v.abs() <= 1e-15));
    }

    #[test]
    fn cross_matches_naive_softmax_oracle() {
        let params = AttnParams::init(tiny_cfg(), 8);
        let x = Mat::from_fn(2, 6, |i, j| ((i * 5 + j) % 7) as f64 * 0.1 - 0.3);
        let a = Mat::from_fn(3, 6, |i, j| ((i * 3 + j) % 4) as f64 * 0.2 - 0.1);
        let fast = cross_attn_forward(&x, &a, &params);

        let q = x.matmul(&params.cross.w_q);
        let k = a.matmul(&params.cross.w_k);
        let v = a.matmul(&params.cross.w_v);
        let d_h = params.cfg.d_h;
        let mut h = Mat::zeros(2, d_h);
        for i in 0..2 {
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    q.row(i).iter().zip(k.row(j)).map(|(p, r)| p * r).sum::<f64>()
                        / (d_h as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..3 {
                for c in 0..d_h {
                    h.data[i * d_h + c] += exps[j] / total * v.at(j, c);
                }
            }
        }
        let slow = h.matmul(&params.w_o);
        for (p, r) in fast.data.iter().zip(&slow.data) {
            assert!((p - r).abs() <= 1e-10);
        }
    }

    #[test]
    fn teacher_is_branch_sum() {
        let params = AttnParams::init(tiny_cfg(), 9);
        let seq = tiny_seq();
        let z = agx_forward(&seq, &params).unwrap();
        let x = embed_structure(&seq.structure_ids, &params).unwrap();
        let a = embed(&seq.alias_ids, &params.e_alias).unwrap();
        let expected = wsa_forward(&x, &params).add(&cross_attn_forward(&x, &a, &params));
        for (p, r) in z.data.iter().zip(&expected.data) {
            assert!((p - r).abs() <= 1e-10);
        }
    }

    #[test]
    fn zeroed_cross_value_collapses_teacher_to_student() {
        let mut params = AttnParams::init(tiny_cfg(), 10);
        params.cross.w_v = Mat::zeros(6, 4);
        let seq = tiny_seq();
        let teacher = agx_forward(&seq, &params).unwrap();
        let student = student_forward(&seq, &params).unwrap();
        assert_eq!(teacher.data, student.data, "must be bit-equal");
    }

    #[test]
    fn empty_alias_sequence_degenerates_to_wsa() {
        let params = AttnParams::init(tiny_cfg(), 11);
        let seq = TokenSequence {
            structure_ids: vec![0, 1, 2],
            alias_ids: vec![],
        };
        let z = agx_forward(&seq, &params).unwrap();
        let s = student_forward(&seq, &params).unwrap();
        assert_eq!(z.data, s.data);
    }

    #[test]
    fn student_ignores_alias_ids_bitwise() {
        let params = AttnParams::init(tiny_cfg(), 12);
        let a = TokenSequence {
            structure_ids: vec![3, 1, 4],
            alias_ids: vec![0, 0, 0],
        };
        let b = TokenSequence {
            structure_ids: vec![3, 1, 4],
            alias_ids: vec![4, 2, 1],
        };
        let za = student_forward(&a, &params).unwrap();
        let zb = student_forward(&b, &params).unwrap();
        assert_eq!(za.data, zb.data);
    }

    #[test]
    fn alias_tokens_are_order_invariant() {
        let params = AttnParams::init(tiny_cfg(), 13);
        let seq = TokenSequence {
            structure_ids: vec![1, 2, 3],
            alias_ids: vec![0, 1, 2, 3],
        };
        let permuted = TokenSequence {
            structure_ids: vec![1, 2, 3],
            alias_ids: vec![3, 0, 2, 1],
        };
        let za = agx_forward(&seq, &params).unwrap();
        let zb = agx_forward(&permuted, &params).unwrap();
        for (a, b) in za.data.iter().zip(&zb.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_convex_weights() {
        let params = AttnParams::init(tiny_cfg(), 14);
        let x = Mat::from_fn(4, 6, |i, j| (i * j) as f64 * 0.07 - 0.2);
        let (_, cache) = attention_forward(
            &x,
            &x,
            &params.wsa,
            &params.w_o,
            wsa_mask(params.cfg.window),
        );
        for i in 0..cache.probs.rows {
            let sum: f64 = cache.probs.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(cache.probs.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn scaled_alias_embeddings_stay_in_value_hull() {
        // With w_o = identity the cross output is the convex mix of value
        // rows; blowing the alias embeddings up by 10 must keep each output
        // coordinate inside the per-coordinate value range.
        let cfg = AttnConfig {
            d: 4,
            d_h: 4,
            window: 2,
            max_len: 8,
            structure_vocab: 6,
            alias_vocab: 6,
        };
        let mut params = AttnParams::init(cfg, 15);
        params.w_o = Mat::identity(4);
        let x = Mat::from_fn(3, 4, |i, j| (i as f64 + 1.0) * 0.2 - 0.1 * j as f64);
        for scale in [1.0, 10.0] {
            let a = Mat::from_fn(5, 4, |i, j| ((i * 2 + j) as f64 * 0.3 - 0.5) * scale);
            let v = a.matmul(&params.cross.w_v);
            let out = cross_attn_forward(&x, &a, &params);
            for c in 0..4 {
                let lo = (0..5).map(|r| v.at(r, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..5).map(|r| v.at(r, c)).fold(f64::NEG_INFINITY, f64::max);
                for i in 0..3 {
                    let val = out.at(i, c);
                    assert!(
                        val >= lo - 1e-12 && val <= hi + 1e-12,
                        "scale {scale}: {val} outside [{lo}, {hi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let params = AttnParams::init(tiny_cfg(), 16);
        let seq = tiny_seq();
        let upstream = Mat::zeros(4, 6);
        let grads = agx_backward(&seq, &params, &upstream).unwrap();
        for name in PARAM_TENSOR_NAMES {
            assert_eq!(grads.tensor(name).max_abs(), 0.0, "{name}");
        }
    }

    #[test]
    fn single_token_gradients_match_hand_derivation() {
        // One token, no alias: Z = x0 Wv Wo with softmax == 1, so
        // dWv = x0^T (G Wo^T), dWo = (x0 Wv)^T G, dx0 = G Wo^T Wv^T.
        let cfg = AttnConfig {
            d: 3,
            d_h: 2,
            window: 1,
            max_len: 4,
            structure_vocab: 4,
            alias_vocab: 2,
        };
        let params = AttnParams::init(cfg, 17);
        let seq = TokenSequence {
            structure_ids: vec![2],
            alias_ids: vec![],
        };
        let g = Mat::from_fn(1, 3, |_, j| 0.5 - 0.3 * j as f64);
        let grads = agx_backward(&seq, &params, &g).unwrap();

        let x0 = embed_structure(&seq.structure_ids, &params).unwrap();
        let d_h_mat = g.matmul_bt(&params.w_o); // 1 x d_h
        let d_wv = x0.matmul_at(&d_h_mat);
        for (a, b) in grads.wsa.w_v.data.iter().zip(&d_wv.data) {
            assert!((a - b).abs() <= 1e-12);
        }
        let h = x0.matmul(&params.wsa.w_v);
        let d_wo = h.matmul_at(&g);
        for (a, b) in grads.w_o.data.iter().zip(&d_wo.data) {
            assert!((a - b).abs() <= 1e-12);
        }
        let d_x = d_h_mat.matmul_bt(&params.wsa.w_v);
        for (a, b) in grads.e_struct.row(2).iter().zip(&d_x.data) {
            assert!((a - b).abs() <= 1e-12);
        }
        // Scores depend on W_Q and W_K but the singleton softmax does not.
        assert_eq!(grads.wsa.w_q.max_abs(), 0.0);
        assert_eq!(grads.wsa.w_k.max_abs(), 0.0);
    }

    #[test]
    fn finite_differences_confirm_all_gradients() {
        for seed in 0..5u64 {
            let params = AttnParams::init(tiny_cfg(), 20 + seed);
            let seq = tiny_seq();
            let results = grad_check(&seq, &params, 99 + seed).unwrap();
            for r in &results {
                assert!(
                    r.max_rel_err <= 1e-4,
                    "seed {seed} param {} err {}",
                    r.param,
                    r.max_rel_err
                );
            }
        }
    }

    #[test]
    fn gate_diagnostic_reference_cases() {
        let x_l = Mat::from_fn(6, 3, |i, j| (i as f64 * 0.3) - (j as f64 * 0.2));
        let a = Mat::from_fn(6, 3, |i, j| ((i + j) % 3) as f64 * 0.4 - 0.2);

        let diag = fit_gate_diagnostic(&x_l, &x_l, &a).unwrap();
        for v in diag.raw.iter().flatten() {
            assert!(v.abs() <= 1e-12);
        }

        let z = x_l.add(&a);
        let diag = fit_gate_diagnostic(&z, &x_l, &a).unwrap();
        for v in diag.raw.iter().flatten() {
            assert!((v - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gate_diagnostic_recovers_gain_under_noise() {
        let rng = CounterRng::new(31);
        let n = 64;
        let d = 4;
        let x_l = Mat::from_fn(n, d, |i, j| rng.normal(1, (i * d + j) as u64));
        let a = Mat::from_fn(n, d, |i, j| rng.normal(2, (i * d + j) as u64));
        let z = Mat::from_fn(n, d, |i, j| {
            x_l.at(i, j) + 0.6 * a.at(i, j) + 1e-3 * rng.normal(3, (i * d + j) as u64)
        });
        let diag = fit_gate_diagnostic(&z, &x_l, &a).unwrap();
        for v in diag.raw.iter().flatten() {
            assert!((v - 0.6).abs() <= 1e-2, "alpha {v}");
        }
    }

    #[test]
    fn gate_diagnostic_flags_zero_columns() {
        let z = Mat::from_fn(4, 2, |i, _| i as f64);
        let x_l = Mat::zeros(4, 2);
        let mut a = Mat::from_fn(4, 2, |i, _| i as f64 + 1.0);
        for i in 0..4 {
            a.set(i, 1, 0.0);
        }
        let diag = fit_gate_diagnostic(&z, &x_l, &a).unwrap();
        assert!(diag.raw[0].is_some());
        assert!(diag.raw[1].is_none(), "undefined, not zero");
    }

    #[test]
    fn student_flops_match_vanilla_and_ignore_alias_count() {
        let cfg = tiny_cfg();
        for n in [1usize, 4, 8] {
            let student = student_inference_flops(&cfg, n);
            assert_eq!(student, vanilla_block_flops(&cfg, n));
            assert_eq!(student, block_flops(&cfg, n, 0, false));
            assert_eq!(student, block_flops(&cfg, n, 17, false));
            let teacher = block_flops(&cfg, n, 4, true);
            assert!(teacher > student);
        }
    }

    #[test]
    fn params_blob_round_trips_bit_exactly() {
        let dir = std::env::temp_dir().join("refocus-attn-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.agx");
        let params = AttnParams::init(tiny_cfg(), 55);
        save_params(&params, &path).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(params, back);
    }
}
