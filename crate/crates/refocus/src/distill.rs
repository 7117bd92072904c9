//! Teacher-student distillation objective and a toy end-to-end run.
//!
//! The student is trained on three terms: its own autoregressive
//! cross-entropy, feature alignment against stop-gradient teacher features,
//! and a KL term toward the teacher's output distribution. The teacher is
//! trained online by its own AR loss alone, so its update never depends on
//! the distillation weights. At deployment only the student runs, with no
//! alias inputs and no teacher anywhere in its path.

use serde::{Deserialize, Serialize};

use crate::attn::{
    agx_backward_with_input_grad, agx_forward, student_backward_with_input_grad, student_forward,
    AttnConfig, AttnGrads, AttnParams, TokenSequence, PARAM_TENSOR_NAMES,
};
use crate::error::{Error, Result};
use crate::image::{gen_pattern, PatternKind, PatternSpec};
use crate::mat::Mat;
use crate::psf::focus_schedule;
use crate::pyramid::{beta_schedule, build_pyramid, KernelKind};
use crate::rng::CounterRng;
use crate::vq::{patchify, quantize, train_dual_codebooks, DualVQConfig};

/// Weights of the distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_feat: f64,
    pub lambda_logit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_feat: 1.0,
            lambda_logit: 0.5,
        }
    }
}

/// One evaluation of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ar: f64,
    pub feat: f64,
    pub logit_kl: f64,
    pub total: f64,
}

/// Weighted composition `ar + lambda_feat * feat + lambda_logit * kl`.
pub fn total_loss(ar: f64, feat: f64, logit_kl: f64, weights: &LossWeights) -> LossReport {
    LossReport {
        ar,
        feat,
        logit_kl,
        total: ar + weights.lambda_feat * feat + weights.lambda_logit * logit_kl,
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Mean over positions of `-log softmax(logits)[target]`.
pub fn ar_cross_entropy(logits: &Mat, targets: &[usize]) -> Result<f64> {
    if logits.rows != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} targets",
            logits.rows,
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= logits.cols {
            return Err(Error::TokenOutOfRange {
                id: t,
                size: logits.cols,
            });
        }
        total -= log_softmax_row(logits.row(i))[t];
    }
    Ok(total / targets.len().max(1) as f64)
}

/// Sum over levels of the mean squared feature difference. Gradients flow
/// only to the student side; the teacher features are treated as constants
/// (stop-gradient) by every caller in this module.
pub fn feature_mse(f_stu: &[&Mat], f_tea: &[&Mat]) -> Result<f64> {
    if f_stu.len() != f_tea.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} student levels vs {} teacher levels",
            f_stu.len(),
            f_tea.len()
        )));
    }
    let mut total = 0.0;
    for (s, t) in f_stu.iter().zip(f_tea) {
        if s.rows != t.rows || s.cols != t.cols {
            return Err(Error::ShapeMismatch(format!(
                "feature level {}x{} vs {}x{}",
                s.rows, s.cols, t.rows, t.cols
            )));
        }
        let n = (s.rows * s.cols).max(1);
        total += s
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n as f64;
    }
    Ok(total)
}

/// Mean over positions of `KL(softmax(tea) || softmax(stu))`, computed in
/// log space.
pub fn kl_divergence(tea_logits: &Mat, stu_logits: &Mat) -> f64 {
    assert_eq!(
        (tea_logits.rows, tea_logits.cols),
        (stu_logits.rows, stu_logits.cols),
        "kl shape mismatch"
    );
    let mut total = 0.0;
    for i in 0..tea_logits.rows {
        let lp_tea = log_softmax_row(tea_logits.row(i));
        let lp_stu = log_softmax_row(stu_logits.row(i));
        for (lt, ls) in lp_tea.iter().zip(&lp_stu) {
            total += lt.exp() * (lt - ls);
        }
    }
    total / tea_logits.rows.max(1) as f64
}

/// Configuration of the toy distillation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDistillConfig {
    pub seq_len: usize,
    pub d: usize,
    pub d_h: usize,
    pub window: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub structure_size: usize,
    pub alias_size: usize,
}

impl Default for ToyDistillConfig {
    fn default() -> Self {
        ToyDistillConfig {
            seq_len: 16,
            d: 16,
            d_h: 8,
            window: 4,
            steps: 200,
            lr: 0.3,
            seed: 0,
            weights: LossWeights::default(),
            structure_size: 64,
            alias_size: 16,
        }
    }
}

/// One model: an attention block plus a linear output head.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: AttnParams,
    /// `d x vocab` output head.
    pub head: Mat,
}

impl Model {
    fn init(cfg: AttnConfig, vocab: usize, seed: u64) -> Model {
        let rng = CounterRng::new(seed);
        let scale = 1.0 / (cfg.d as f64).sqrt();
        Model {
            params: AttnParams::init(cfg, seed),
            head: Mat::from_fn(cfg.d, vocab, |i, j| {
                rng.normal(0x4EAD, (i * vocab + j) as u64) * scale
            }),
        }
    }
}

/// Per-step record of the training trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub teacher_ar: f64,
    pub student: LossReport,
}

/// Everything a toy run produces.
#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub steps: Vec<StepRecord>,
    /// Step index at which a non-finite loss aborted the run, if any.
    pub diverged_at: Option<usize>,
    pub teacher: Model,
    pub student: Model,
    pub sequences: Vec<TokenSequence>,
}

/// CSV form of the trace: one row per step.
pub fn trace_to_csv(trace: &TrainingTrace) -> String {
    let mut out = String::from("step,student_ar,student_feat,student_kl,student_total,teacher_ar\n");
    for r in &trace.steps {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.student.ar, r.student.feat, r.student.logit_kl, r.student.total, r.teacher_ar
        ));
    }
    out
}

/// Tokenized pyramid corpus for the toy task: dual-VQ token grids of a few
/// synthetic patterns, flattened row-major, truncated to `seq_len`.
pub fn build_toy_token_dataset(
    cfg: &ToyDistillConfig,
) -> Result<(Vec<TokenSequence>, usize, usize)> {
    let patterns = [
        PatternSpec {
            kind: PatternKind::ZonePlate { chirp: 0.05 },
            size: 32,
        },
        PatternSpec {
            kind: PatternKind::Checkerboard { cell: 3 },
            size: 32,
        },
        PatternSpec {
            kind: PatternKind::Sinusoid {
                freq: 0.45,
                angle: 30f64.to_radians(),
            },
            size: 32,
        },
        PatternSpec {
            kind: PatternKind::Sinusoid {
                freq: 0.35,
                angle: 0.0,
            },
            size: 32,
        },
        PatternSpec {
            kind: PatternKind::WhiteNoise { seed: cfg.seed ^ 0x57A7 },
            size: 32,
        },
    ];
    let schedule = focus_schedule(3, 6.0)?;
    let factors = [4usize, 2, 1];
    let betas = beta_schedule(3, 1e-3, 1e-2)?;
    let mut pyramids = Vec::new();
    for (i, spec) in patterns.iter().enumerate() {
        let img = gen_pattern(spec)?;
        pyramids.push(build_pyramid(
            &img,
            &schedule,
            &factors,
            &betas,
            KernelKind::Disk,
            cfg.seed.wrapping_add(i as u64),
        )?);
    }
    let vq_cfg = DualVQConfig {
        patch: 4,
        structure_size: cfg.structure_size,
        alias_size: cfg.alias_size,
        iters: 10,
        seed: cfg.seed,
    };
    let books = train_dual_codebooks(&pyramids.iter().collect::<Vec<_>>(), &vq_cfg)?;

    let mut sequences = Vec::new();
    for pyr in &pyramids {
        for scale in &pyr.scales {
            if scale.l.width() % vq_cfg.patch != 0 || scale.l.height() % vq_cfg.patch != 0 {
                continue;
            }
            let (structure, _) = quantize(&books.structure, &patchify(&scale.l, vq_cfg.patch)?)?;
            let (alias, _) = quantize(&books.alias, &patchify(&scale.a, vq_cfg.patch)?)?;
            let take = structure.indices.len().min(cfg.seq_len);
            if take < 2 {
                continue;
            }
            sequences.push(TokenSequence {
                structure_ids: structure.indices[..take].to_vec(),
                alias_ids: alias.indices[..take].to_vec(),
            });
        }
    }
    if sequences.is_empty() {
        return Err(Error::InvalidArgument(
            "toy dataset produced no usable sequences".into(),
        ));
    }
    Ok((sequences, cfg.structure_size, cfg.alias_size))
}

fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for i in 0..m.rows {
        let lp = log_softmax_row(m.row(i));
        for (o, l) in out.row_mut(i).iter_mut().zip(&lp) {
            *o = l.exp();
        }
    }
    out
}

struct SeqLosses {
    teacher_ar: f64,
    student: LossReport,
}

/// Forward + backward over one sequence; gradients accumulate into the
/// provided buffers.
#[allow(clippy::too_many_arguments)]
fn accumulate_step(
    seq: &TokenSequence,
    teacher: &Model,
    student: &Model,
    weights: &LossWeights,
    tea_grads: &mut AttnGrads,
    tea_head_grad: &mut Mat,
    stu_grads: &mut AttnGrads,
    stu_head_grad: &mut Mat,
) -> Result<SeqLosses> {
    let n = seq.structure_ids.len() - 1;
    let input = TokenSequence {
        structure_ids: seq.structure_ids[..n].to_vec(),
        alias_ids: seq.alias_ids.clone(),
    };
    let targets = &seq.structure_ids[1..];

    // Teacher path: AGX block, own head, own AR loss only.
    let z_tea = agx_forward(&input, &teacher.params)?;
    let logits_tea = z_tea.matmul(&teacher.head);
    let teacher_ar = ar_cross_entropy(&logits_tea, targets)?;

    let p_tea = softmax_rows(&logits_tea);
    let mut d_logits_tea = p_tea.clone();
    for (i, &t) in targets.iter().enumerate() {
        d_logits_tea.set(i, t, d_logits_tea.at(i, t) - 1.0);
    }
    let d_logits_tea = d_logits_tea.scale(1.0 / n as f64);
    tea_head_grad.add_assign(&z_tea.matmul_at(&d_logits_tea));
    let d_z_tea = d_logits_tea.matmul_bt(&teacher.head);
    let (g, _) = agx_backward_with_input_grad(&input, &teacher.params, &d_z_tea)?;
    add_grads(tea_grads, &g);

    // Student path: WSA-only block; AR + feature alignment + logit KL.
    // Teacher tensors enter only as constants (stop-gradient).
    let z_stu = student_forward(&input, &student.params)?;
    let logits_stu = z_stu.matmul(&student.head);
    let ar = ar_cross_entropy(&logits_stu, targets)?;
    let feat = feature_mse(&[&z_stu], &[&z_tea])?;
    let kl = kl_divergence(&logits_tea, &logits_stu);
    let student_report = total_loss(ar, feat, kl, weights);

    let p_stu = softmax_rows(&logits_stu);
    let mut d_logits_stu = p_stu.clone();
    for (i, &t) in targets.iter().enumerate() {
        d_logits_stu.set(i, t, d_logits_stu.at(i, t) - 1.0);
    }
    let mut d_logits_stu = d_logits_stu.scale(1.0 / n as f64);
    // KL(p_tea || p_stu) in the student's logits: (p_stu - p_tea) / n.
    let kl_grad = p_stu.add(&p_tea.scale(-1.0)).scale(weights.lambda_logit / n as f64);
    d_logits_stu.add_assign(&kl_grad);

    stu_head_grad.add_assign(&z_stu.matmul_at(&d_logits_stu));
    let mut d_z_stu = d_logits_stu.matmul_bt(&student.head);
    let feat_scale = 2.0 * weights.lambda_feat / (z_stu.rows * z_stu.cols) as f64;
    d_z_stu.add_assign(&z_stu.add(&z_tea.scale(-1.0)).scale(feat_scale));
    let (g, _) = student_backward_with_input_grad(&input, &student.params, &d_z_stu)?;
    add_grads(stu_grads, &g);

    Ok(SeqLosses {
        teacher_ar,
        student: student_report,
    })
}

fn add_grads(into: &mut AttnGrads, from: &AttnGrads) {
    into.e_struct.add_assign(&from.e_struct);
    into.e_alias.add_assign(&from.e_alias);
    into.pos.add_assign(&from.pos);
    into.wsa.w_q.add_assign(&from.wsa.w_q);
    into.wsa.w_k.add_assign(&from.wsa.w_k);
    into.wsa.w_v.add_assign(&from.wsa.w_v);
    into.cross.w_q.add_assign(&from.cross.w_q);
    into.cross.w_k.add_assign(&from.cross.w_k);
    into.cross.w_v.add_assign(&from.cross.w_v);
    into.w_o.add_assign(&from.w_o);
}

fn apply_sgd(params: &mut AttnParams, grads: &AttnGrads, lr: f64) {
    for name in PARAM_TENSOR_NAMES {
        let g = grads.tensor(name).clone();
        let t = params.tensor_mut(name);
        for (p, gv) in t.data.iter_mut().zip(&g.data) {
            *p -= lr * gv;
        }
    }
}

/// Run the toy two-network training loop: codebooks are trained and frozen
/// first, then teacher and student learn side by side on the same batches.
/// The teacher sees alias tokens through its cross branch; the student
/// never does.
pub fn toy_distill_run(cfg: &ToyDistillConfig) -> Result<TrainingTrace> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {} must be finite and nonnegative",
            cfg.lr
        )));
    }
    let (sequences, structure_vocab, alias_vocab) = build_toy_token_dataset(cfg)?;
    let max_len = sequences
        .iter()
        .map(|s| s.structure_ids.len())
        .max()
        .unwrap_or(2);
    let attn_cfg = AttnConfig {
        d: cfg.d,
        d_h: cfg.d_h,
        window: cfg.window,
        max_len,
        structure_vocab,
        alias_vocab,
    };
    let mut teacher = Model::init(attn_cfg, structure_vocab, cfg.seed.wrapping_add(0x7EA));
    let mut student = Model::init(attn_cfg, structure_vocab, cfg.seed.wrapping_add(0x57D));

    let mut trace = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;
    for step in 1..=cfg.steps {
        let mut tea_grads = AttnGrads::zeros(&attn_cfg);
        let mut stu_grads = AttnGrads::zeros(&attn_cfg);
        let mut tea_head_grad = Mat::zeros(cfg.d, structure_vocab);
        let mut stu_head_grad = Mat::zeros(cfg.d, structure_vocab);
        let mut teacher_ar = 0.0;
        let mut student_sum = LossReport {
            ar: 0.0,
            feat: 0.0,
            logit_kl: 0.0,
            total: 0.0,
        };
        for seq in &sequences {
            let losses = accumulate_step(
                seq,
                &teacher,
                &student,
                &cfg.weights,
                &mut tea_grads,
                &mut tea_head_grad,
                &mut stu_grads,
                &mut stu_head_grad,
            )?;
            teacher_ar += losses.teacher_ar;
            student_sum.ar += losses.student.ar;
            student_sum.feat += losses.student.feat;
            student_sum.logit_kl += losses.student.logit_kl;
            student_sum.total += losses.student.total;
        }
        let count = sequences.len() as f64;
        let record = StepRecord {
            step,
            teacher_ar: teacher_ar / count,
            student: LossReport {
                ar: student_sum.ar / count,
                feat: student_sum.feat / count,
                logit_kl: student_sum.logit_kl / count,
                total: student_sum.total / count,
            },
        };
        trace.push(record);
        if !record.student.total.is_finite() || !record.teacher_ar.is_finite() {
            diverged_at = Some(step);
            break;
        }
        let scale = 1.0 / count;
        tea_grads.scale_in_place(scale);
        stu_grads.scale_in_place(scale);
        apply_sgd(&mut teacher.params, &tea_grads, cfg.lr);
        apply_sgd(&mut student.params, &stu_grads, cfg.lr);
        for (p, g) in teacher.head.data.iter_mut().zip(&tea_head_grad.data) {
            *p -= cfg.lr * g * scale;
        }
        for (p, g) in student.head.data.iter_mut().zip(&stu_head_grad.data) {
            *p -= cfg.lr * g * scale;
        }
    }
    Ok(TrainingTrace {
        steps: trace,
        diverged_at,
        teacher,
        student,
        sequences,
    })
}
