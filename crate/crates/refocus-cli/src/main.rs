//! `refocus` — command-line driver for the alias-free multi-scale pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 verification failure, 3 I/O
//! error. Every command is deterministic given its flags plus the seed;
//! the `REFOCUS_SEED` environment variable overrides the default seed and
//! an explicit `--seed` flag overrides both.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use refocus::distill::{toy_distill_run, trace_to_csv, LossWeights, ToyDistillConfig};
use refocus::image::{gen_pattern, load_image, save_image, write_atomic, PatternKind, PatternSpec};
use refocus::psf::{disk_kernel, focus_schedule, gaussian_kernel, FocusSchedule};
use refocus::pyramid::{
    beta_schedule, build_pyramid, dyadic_factors, grid_from_csv, write_pyramid_dir, KernelKind,
    PyramidManifest,
};
use refocus::spectral::{folded_energy_metric, run_verification_suite, IdentityCheck};
use refocus::vq::{
    codebook_stats, patchify, quantize, variance_per_dim, CodebookRole,
    DualVQConfig,
};
use refocus::Error as LibError;

#[derive(Parser)]
#[command(name = "refocus", version, about = "Alias-free multi-scale pipeline tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic test pattern (PGM or PNG by extension).
    Gen(GenArgs),
    /// Build a dual-path focus pyramid from an image.
    Pyramid(PyramidArgs),
    /// Run the spectral identity suite and emit a JSON report.
    Verify(VerifyArgs),
    /// Compare aliasing energy across prefilter choices.
    Compare(CompareArgs),
    /// Train dual codebooks on a pyramid dump and tokenize it.
    Tokenize(TokenizeArgs),
    /// Exercise the alias-gate attention block; optional gradient check.
    AttnDemo(AttnDemoArgs),
    /// Run the toy teacher-student distillation loop.
    DistillToy(DistillToyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindFlag {
    Constant,
    Impulse,
    Sinusoid,
    Zoneplate,
    Checkerboard,
    Whitenoise,
}

#[derive(Args)]
struct GenArgs {
    /// Pattern family.
    #[arg(long, value_enum)]
    kind: KindFlag,
    /// Edge length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Constant level (constant pattern).
    #[arg(long, default_value_t = 0.5)]
    level: f64,
    /// Frequency in cycles/pixel, (0, 0.5] (sinusoid).
    #[arg(long, default_value_t = 0.25)]
    freq: f64,
    /// Grating angle in degrees (sinusoid).
    #[arg(long, default_value_t = 0.0)]
    angle: f64,
    /// Radial chirp rate (zoneplate).
    #[arg(long, default_value_t = 0.02)]
    alpha: f64,
    /// Checker cell size in pixels.
    #[arg(long, default_value_t = 4)]
    cell: usize,
    /// Seed override (whitenoise; falls back to REFOCUS_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output image path (.pgm or .png).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelFlag {
    Disk,
    Gaussian,
}

#[derive(Args)]
struct PyramidArgs {
    /// Input image (.pgm or .png). Center-cropped to a multiple of the
    /// largest decimation factor if needed.
    #[arg(long)]
    input: PathBuf,
    /// Number of focus states.
    #[arg(short, long, default_value_t = 4)]
    k: usize,
    /// Maximum PSF radius in pixels (0 gives an all-sharp pyramid).
    #[arg(long, default_value_t = 12.0)]
    rho_max: f64,
    /// Comma-separated decimation factors, coarse to fine (default dyadic).
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<usize>>,
    /// Noise ramp start.
    #[arg(long, default_value_t = 1e-3)]
    beta_lo: f64,
    /// Noise ramp end.
    #[arg(long, default_value_t = 1e-2)]
    beta_hi: f64,
    /// Constant noise amplitude for every scale (overrides the ramp).
    #[arg(long)]
    beta: Option<f64>,
    /// PSF family.
    #[arg(long, value_enum, default_value_t = KernelFlag::Disk)]
    kernel: KernelFlag,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the pyramid dump.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Comma-separated even signal lengths.
    #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 16, 32, 64, 128])]
    sizes: Vec<usize>,
    /// Random signals per size.
    #[arg(long, default_value_t = 200)]
    signals: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the JSON report here (always printed to stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Negative control: corrupt one spectrum bin so the suite must fail.
    #[arg(long)]
    self_test_corrupt: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    input: PathBuf,
    /// Decimation factor under comparison.
    #[arg(long, default_value_t = 2)]
    factor: usize,
    /// Disk PSF radii to test.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2.0, 3.0, 4.0])]
    disk_rhos: Vec<f64>,
    /// Gaussian sigmas to test.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0])]
    gaussian_sigmas: Vec<f64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TokenizeArgs {
    /// Pyramid dump directory (as produced by `refocus pyramid`).
    #[arg(long)]
    pyramid_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, default_value_t = 256)]
    structure_size: usize,
    #[arg(long, default_value_t = 32)]
    alias_size: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for codebooks, token grids, and the manifest.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct AttnDemoArgs {
    /// Run the finite-difference gradient check and gate the exit code on it.
    #[arg(long)]
    grad_check: bool,
    /// Structure sequence length.
    #[arg(long, default_value_t = 6)]
    n: usize,
    /// Alias sequence length.
    #[arg(long, default_value_t = 4)]
    m: usize,
    /// Hidden dimension.
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Head dimension.
    #[arg(long, default_value_t = 4)]
    d_h: usize,
    #[arg(long, default_value_t = 4)]
    window: usize,
    /// Number of random seeds for the gradient check.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also serialize the block parameters here.
    #[arg(long)]
    params_out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillToyArgs {
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    d_h: usize,
    #[arg(long, default_value_t = 4)]
    window: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda_feat: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_logit: f64,
    #[arg(long, default_value_t = 64)]
    structure_size: usize,
    #[arg(long, default_value_t = 16)]
    alias_size: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the trace, manifest, and student parameters.
    #[arg(short, long)]
    output: PathBuf,
}

/// Failure classified by exit code.
enum CliError {
    Usage(String),
    Verification(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Verification(m) | CliError::Io(m) => m,
        }
    }
}

impl From<LibError> for CliError {
    fn from(e: LibError) -> Self {
        match &e {
            LibError::MissingFile(_)
            | LibError::Io { .. }
            | LibError::UnsupportedFormat(_)
            | LibError::TruncatedStream { .. }
            | LibError::MalformedBlob(_) => CliError::Io(e.to_string()),
            LibError::Diverged { .. } => CliError::Verification(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("REFOCUS_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("json encode: {e}")))?;
    write_atomic(path, json.as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, not usage errors.
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Pyramid(args) => cmd_pyramid(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Tokenize(args) => cmd_tokenize(args),
        Command::AttnDemo(args) => cmd_attn_demo(args),
        Command::DistillToy(args) => cmd_distill_toy(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

#[derive(Serialize)]
struct GenManifest {
    schema: &'static str,
    kind: String,
    size: usize,
    params: serde_json::Value,
    seed: u64,
}

fn cmd_gen(args: GenArgs) -> CliResult {
    let seed = resolve_seed(args.seed);
    let (kind, kind_name, params) = match args.kind {
        KindFlag::Constant => (
            PatternKind::Constant { level: args.level },
            "constant",
            serde_json::json!({ "level": args.level }),
        ),
        KindFlag::Impulse => (PatternKind::Impulse, "impulse", serde_json::json!({})),
        KindFlag::Sinusoid => (
            PatternKind::Sinusoid {
                freq: args.freq,
                angle: args.angle.to_radians(),
            },
            "sinusoid",
            serde_json::json!({ "freq": args.freq, "angle_degrees": args.angle }),
        ),
        KindFlag::Zoneplate => (
            PatternKind::ZonePlate { chirp: args.alpha },
            "zoneplate",
            serde_json::json!({ "alpha": args.alpha }),
        ),
        KindFlag::Checkerboard => (
            PatternKind::Checkerboard { cell: args.cell },
            "checkerboard",
            serde_json::json!({ "cell": args.cell }),
        ),
        KindFlag::Whitenoise => (
            PatternKind::WhiteNoise { seed },
            "whitenoise",
            serde_json::json!({ "seed": seed }),
        ),
    };
    let img = gen_pattern(&PatternSpec {
        kind,
        size: args.size,
    })?;
    save_image(&img, &args.output)?;
    let manifest = GenManifest {
        schema: "refocus/gen/v1",
        kind: kind_name.to_string(),
        size: args.size,
        params,
        seed,
    };
    let manifest_path = args.output.with_extension(format!(
        "{}.manifest.json",
        args.output
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("img")
    ));
    write_json(&manifest_path, &manifest)?;
    println!("wrote {}", args.output.display());
    Ok(())
}

/// Schedule that also admits the degenerate all-sharp case rho_max = 0.
fn schedule_for(k: usize, rho_max: f64) -> Result<FocusSchedule, LibError> {
    if rho_max == 0.0 {
        if k < 2 {
            return Err(LibError::InvalidArgument(
                "schedule needs at least 2 focus states".into(),
            ));
        }
        return Ok(FocusSchedule {
            k,
            rho_max: 0.0,
            radii: vec![0.0; k],
        });
    }
    focus_schedule(k, rho_max)
}

fn cmd_pyramid(args: PyramidArgs) -> CliResult {
    let seed = resolve_seed(args.seed);
    let schedule = schedule_for(args.k, args.rho_max)?;
    let factors = args.factors.unwrap_or_else(|| dyadic_factors(args.k));
    let betas = match args.beta {
        Some(b) => {
            if b < 0.0 {
                return Err(CliError::Usage(format!("beta {b} must be nonnegative")));
            }
            vec![b; args.k]
        }
        None => beta_schedule(args.k, args.beta_lo, args.beta_hi)?,
    };
    let kernel = match args.kernel {
        KernelFlag::Disk => KernelKind::Disk,
        KernelFlag::Gaussian => KernelKind::Gaussian,
    };
    let img = load_image(&args.input)?;
    // Center-crop to the nearest multiple of the coarsest factor.
    let align = *factors.iter().max().unwrap_or(&1);
    let (w, h) = (
        img.width() - img.width() % align,
        img.height() - img.height() % align,
    );
    if w == 0 || h == 0 {
        return Err(CliError::Usage(format!(
            "input {}x{} smaller than the coarsest factor {align}",
            img.width(),
            img.height()
        )));
    }
    let img = if (w, h) != (img.width(), img.height()) {
        eprintln!(
            "note: center-cropping {}x{} to {w}x{h} (multiple of {align})",
            img.width(),
            img.height()
        );
        img.center_crop(w, h)?
    } else {
        img
    };
    let pyramid = build_pyramid(&img, &schedule, &factors, &betas, kernel, seed)?;
    write_pyramid_dir(&pyramid, kernel, img.width(), img.height(), &args.output)?;
    println!(
        "wrote {} scales to {}",
        pyramid.scales.len(),
        args.output.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    schema: &'static str,
    seed: u64,
    sizes: Vec<usize>,
    signals_per_size: usize,
    corrupted_self_test: bool,
    pass: bool,
    checks: Vec<IdentityCheck>,
}

fn cmd_verify(args: VerifyArgs) -> CliResult {
    let seed = resolve_seed(args.seed);
    let checks = run_verification_suite(&args.sizes, args.signals, seed, args.self_test_corrupt)?;
    let pass = checks.iter().all(|c| c.pass);
    let report = VerifyReport {
        schema: "refocus/verify-report/v1",
        seed,
        sizes: args.sizes.clone(),
        signals_per_size: args.signals,
        corrupted_self_test: args.self_test_corrupt,
        pass,
        checks,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Io(format!("json encode: {e}")))?;
    println!("{json}");
    if let Some(path) = &args.output {
        write_atomic(path, json.as_bytes())?;
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::Verification(
            "one or more spectral identities failed".into(),
        ))
    }
}

#[derive(Serialize)]
struct CompareEntry {
    kernel: String,
    metric: f64,
    /// Metric divided by the no-prefilter baseline; absent when the
    /// baseline is itself zero.
    ratio: Option<f64>,
}

#[derive(Serialize)]
struct CompareReport {
    schema: &'static str,
    input: String,
    factor: usize,
    entries: Vec<CompareEntry>,
}

fn cmd_compare(args: CompareArgs) -> CliResult {
    let img = load_image(&args.input)?;
    let baseline = folded_energy_metric(&img, args.factor, None)?;
    let mut entries = vec![CompareEntry {
        kernel: "none".to_string(),
        metric: baseline,
        ratio: if baseline > 0.0 { Some(1.0) } else { None },
    }];
    for &rho in &args.disk_rhos {
        let k = disk_kernel(rho, refocus::pyramid::DEFAULT_SUPERSAMPLE)?;
        let metric = folded_energy_metric(&img, args.factor, Some(&k))?;
        entries.push(CompareEntry {
            kernel: format!("disk rho={rho}"),
            metric,
            ratio: (baseline > 0.0).then(|| metric / baseline),
        });
    }
    for &sigma in &args.gaussian_sigmas {
        let k = gaussian_kernel(sigma, 3.0)?;
        let metric = folded_energy_metric(&img, args.factor, Some(&k))?;
        entries.push(CompareEntry {
            kernel: format!("gaussian sigma={sigma}"),
            metric,
            ratio: (baseline > 0.0).then(|| metric / baseline),
        });
    }
    // Highest aliasing first; for aliasing-prone inputs `none` leads.
    entries.sort_by(|a, b| b.metric.total_cmp(&a.metric));
    let report = CompareReport {
        schema: "refocus/compare-report/v1",
        input: args.input.display().to_string(),
        factor: args.factor,
        entries,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Io(format!("json encode: {e}")))?;
    println!("{json}");
    if let Some(path) = &args.output {
        write_atomic(path, json.as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CodebookHeader {
    dim: usize,
    size: usize,
    role: CodebookRole,
    seed: u64,
    iters: usize,
}

#[derive(Serialize)]
struct TokenizeManifest {
    schema: &'static str,
    pyramid_dir: String,
    config: DualVQConfig,
    seed: u64,
    structure_perplexity: f64,
    alias_perplexity: f64,
    alias_perplexity_leq_structure: bool,
    structure_variance_per_dim: f64,
    alias_variance_per_dim: f64,
    structure_final_objective: f64,
    alias_final_objective: f64,
    duplicate_centroids: (bool, bool),
}

fn cmd_tokenize(args: TokenizeArgs) -> CliResult {
    let seed = resolve_seed(args.seed);
    let manifest_path = args.pyramid_dir.join("manifest.json");
    let manifest_text = std::fs::read_to_string(&manifest_path).map_err(|e| {
        CliError::Io(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let pyr_manifest: PyramidManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| CliError::Io(format!("bad pyramid manifest: {e}")))?;

    // Rebuild the scale triples from the dump.
    let mut scales = Vec::new();
    for k in 1..=pyr_manifest.schedule.k {
        let l = load_image(&args.pyramid_dir.join(format!("L_{k}.pgm")))?;
        let d = load_image(&args.pyramid_dir.join(format!("D_{k}.pgm")))?;
        let a_text = std::fs::read_to_string(args.pyramid_dir.join(format!("A_{k}.csv")))
            .map_err(|e| CliError::Io(format!("cannot read A_{k}.csv: {e}")))?;
        let a = grid_from_csv(&a_text)?;
        scales.push((l, d, a));
    }

    let cfg = DualVQConfig {
        patch: args.patch,
        structure_size: args.structure_size,
        alias_size: args.alias_size,
        iters: args.iters,
        seed,
    };

    // Pool patches exactly as the library trainer does, but from the dump.
    let mut structure_vecs = Vec::new();
    let mut alias_vecs = Vec::new();
    for (l, _, a) in &scales {
        if l.width() % cfg.patch != 0 || l.height() % cfg.patch != 0 {
            continue;
        }
        structure_vecs.extend_from_slice(&patchify(l, cfg.patch)?.vectors);
        alias_vecs.extend_from_slice(&patchify(a, cfg.patch)?.vectors);
    }
    if structure_vecs.is_empty() {
        return Err(CliError::Usage(
            "no pyramid scale is divisible by the patch size".into(),
        ));
    }
    let dim = cfg.patch * cfg.patch;
    let (structure_cb, s_report) = refocus::vq::train_codebook(
        &structure_vecs,
        dim,
        cfg.structure_size,
        cfg.iters,
        cfg.seed,
        CodebookRole::Structure,
    )?;
    let (alias_cb, a_report) = refocus::vq::train_codebook(
        &alias_vecs,
        dim,
        cfg.alias_size,
        cfg.iters,
        cfg.seed.wrapping_add(1),
        CodebookRole::Alias,
    )?;

    std::fs::create_dir_all(&args.output)
        .map_err(|e| CliError::Io(format!("mkdir {}: {e}", args.output.display())))?;
    write_atomic(
        &args.output.join("structure_codebook.csv"),
        structure_cb.to_csv().as_bytes(),
    )?;
    write_atomic(
        &args.output.join("alias_codebook.csv"),
        alias_cb.to_csv().as_bytes(),
    )?;
    write_json(
        &args.output.join("structure_codebook.json"),
        &CodebookHeader {
            dim,
            size: structure_cb.size,
            role: CodebookRole::Structure,
            seed: cfg.seed,
            iters: cfg.iters,
        },
    )?;
    write_json(
        &args.output.join("alias_codebook.json"),
        &CodebookHeader {
            dim,
            size: alias_cb.size,
            role: CodebookRole::Alias,
            seed: cfg.seed.wrapping_add(1),
            iters: cfg.iters,
        },
    )?;

    // Tokenize each scale and accumulate usage for the perplexity report.
    let mut structure_usage: Vec<usize> = Vec::new();
    let mut alias_usage: Vec<usize> = Vec::new();
    let mut s_perp_grid = None;
    let mut a_perp_grid = None;
    for (k, (l, _, a)) in scales.iter().enumerate() {
        if l.width() % cfg.patch != 0 || l.height() % cfg.patch != 0 {
            continue;
        }
        let (s_tokens, _) = quantize(&structure_cb, &patchify(l, cfg.patch)?)?;
        let (a_tokens, _) = quantize(&alias_cb, &patchify(a, cfg.patch)?)?;
        write_atomic(
            &args.output.join(format!("structure_tokens_{}.csv", k + 1)),
            s_tokens.to_csv().as_bytes(),
        )?;
        write_atomic(
            &args.output.join(format!("alias_tokens_{}.csv", k + 1)),
            a_tokens.to_csv().as_bytes(),
        )?;
        structure_usage.extend_from_slice(&s_tokens.indices);
        alias_usage.extend_from_slice(&a_tokens.indices);
        s_perp_grid = Some(s_tokens);
        a_perp_grid = Some(a_tokens);
    }
    // Perplexity over the pooled token stream.
    let pooled = |ids: Vec<usize>, cb: &refocus::vq::Codebook| {
        let grid = refocus::vq::TokenGrid {
            gh: 1,
            gw: ids.len(),
            indices: ids,
            role: cb.role,
        };
        codebook_stats(&grid, cb).perplexity
    };
    let structure_perplexity = pooled(structure_usage, &structure_cb);
    let alias_perplexity = pooled(alias_usage, &alias_cb);
    let _ = (s_perp_grid, a_perp_grid);

    let manifest = TokenizeManifest {
        schema: "refocus/tokenize/v1",
        pyramid_dir: args.pyramid_dir.display().to_string(),
        config: cfg,
        seed,
        structure_perplexity,
        alias_perplexity,
        alias_perplexity_leq_structure: alias_perplexity <= structure_perplexity,
        structure_variance_per_dim: variance_per_dim(&structure_vecs, dim),
        alias_variance_per_dim: variance_per_dim(&alias_vecs, dim),
        structure_final_objective: *s_report.objective_trace.last().unwrap_or(&0.0),
        alias_final_objective: *a_report.objective_trace.last().unwrap_or(&0.0),
        duplicate_centroids: (s_report.duplicate_centroids, a_report.duplicate_centroids),
    };
    write_json(&args.output.join("manifest.json"), &manifest)?;
    println!(
        "tokenized; structure perplexity {structure_perplexity:.3}, alias perplexity {alias_perplexity:.3}"
    );
    Ok(())
}

#[derive(Serialize)]
struct AttnDemoReport {
    schema: &'static str,
    seed: u64,
    n: usize,
    m: usize,
    d: usize,
    d_h: usize,
    window: usize,
    teacher_student_max_abs_gap: f64,
    student_flops: u64,
    teacher_flops: u64,
    grad_check: Option<GradCheckSection>,
}

#[derive(Serialize)]
struct GradCheckSection {
    seeds: usize,
    tolerance: f64,
    max_rel_err: f64,
    pass: bool,
    per_param: Vec<refocus::attn::GradCheckResult>,
}

fn cmd_attn_demo(args: AttnDemoArgs) -> CliResult {
    use refocus::attn::{
        agx_forward, block_flops, grad_check, student_forward, student_inference_flops,
        AttnConfig, AttnParams, TokenSequence,
    };
    let seed = resolve_seed(args.seed);
    if args.n == 0 {
        return Err(CliError::Usage("sequence length must be at least 1".into()));
    }
    let cfg = AttnConfig {
        d: args.d,
        d_h: args.d_h,
        window: args.window,
        max_len: args.n.max(8),
        structure_vocab: 32,
        alias_vocab: 16,
    };
    let params = AttnParams::init(cfg, seed);
    let rng = refocus::rng::CounterRng::new(seed ^ 0x5E9);
    let seq = TokenSequence {
        structure_ids: (0..args.n)
            .map(|i| (rng.raw(1, i as u64) % cfg.structure_vocab as u64) as usize)
            .collect(),
        alias_ids: (0..args.m)
            .map(|i| (rng.raw(2, i as u64) % cfg.alias_vocab as u64) as usize)
            .collect(),
    };
    let teacher = agx_forward(&seq, &params)?;
    let student = student_forward(&seq, &params)?;
    let gap = teacher
        .data
        .iter()
        .zip(&student.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let grad_section = if args.grad_check {
        let mut worst = 0.0f64;
        let mut per_param = Vec::new();
        for s in 0..args.seeds {
            let p = AttnParams::init(cfg, seed.wrapping_add(s as u64));
            let results = grad_check(&seq, &p, seed.wrapping_add(1000 + s as u64))?;
            for r in results {
                worst = worst.max(r.max_rel_err);
                per_param.push(r);
            }
        }
        Some(GradCheckSection {
            seeds: args.seeds,
            tolerance: 1e-4,
            max_rel_err: worst,
            pass: worst <= 1e-4,
            per_param,
        })
    } else {
        None
    };

    if let Some(path) = &args.params_out {
        refocus::attn::save_params(&params, path)?;
    }
    let report = AttnDemoReport {
        schema: "refocus/attn-demo/v1",
        seed,
        n: args.n,
        m: args.m,
        d: args.d,
        d_h: args.d_h,
        window: args.window,
        teacher_student_max_abs_gap: gap,
        student_flops: student_inference_flops(&cfg, args.n),
        teacher_flops: block_flops(&cfg, args.n, args.m, true),
        grad_check: grad_section,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Io(format!("json encode: {e}")))?;
    println!("{json}");
    if let Some(path) = &args.output {
        write_atomic(path, json.as_bytes())?;
    }
    if let Some(g) = &report.grad_check {
        if !g.pass {
            return Err(CliError::Verification(format!(
                "gradient check failed: max rel err {}",
                g.max_rel_err
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct DistillManifest {
    schema: &'static str,
    config: ToyDistillConfig,
    seed: u64,
    steps_completed: usize,
    diverged_at: Option<usize>,
    first_student_total: f64,
    final_student_total: f64,
    final_teacher_ar: f64,
}

fn cmd_distill_toy(args: DistillToyArgs) -> CliResult {
    let seed = resolve_seed(args.seed);
    if args.steps == 0 {
        return Err(CliError::Usage("steps must be at least 1".into()));
    }
    let cfg = ToyDistillConfig {
        seq_len: args.seq_len,
        d: args.d,
        d_h: args.d_h,
        window: args.window,
        steps: args.steps,
        lr: args.lr,
        seed,
        weights: LossWeights {
            lambda_feat: args.lambda_feat,
            lambda_logit: args.lambda_logit,
        },
        structure_size: args.structure_size,
        alias_size: args.alias_size,
    };
    let trace = toy_distill_run(&cfg)?;
    std::fs::create_dir_all(&args.output)
        .map_err(|e| CliError::Io(format!("mkdir {}: {e}", args.output.display())))?;
    write_atomic(&args.output.join("trace.csv"), trace_to_csv(&trace).as_bytes())?;
    refocus::attn::save_params(&trace.student.params, &args.output.join("student.agx"))?;
    let manifest = DistillManifest {
        schema: "refocus/distill-toy/v1",
        config: cfg,
        seed,
        steps_completed: trace.steps.len(),
        diverged_at: trace.diverged_at,
        first_student_total: trace.steps.first().map(|r| r.student.total).unwrap_or(f64::NAN),
        final_student_total: trace.steps.last().map(|r| r.student.total).unwrap_or(f64::NAN),
        final_teacher_ar: trace.steps.last().map(|r| r.teacher_ar).unwrap_or(f64::NAN),
    };
    write_json(&args.output.join("manifest.json"), &manifest)?;
    println!(
        "ran {} steps; student total {:.5} -> {:.5}",
        trace.steps.len(),
        manifest.first_student_total,
        manifest.final_student_total
    );
    if let Some(step) = trace.diverged_at {
        return Err(CliError::Verification(format!(
            "training diverged at step {step}; trace written up to failure"
        )));
    }
    Ok(())
}
