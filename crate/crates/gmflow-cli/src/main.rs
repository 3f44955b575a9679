//! Operator surface: dataset-backed training, sampling, evaluation, NLL
//! reports, and solver-comparison matrices.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 solver or
//! model runtime error. Failures print one machine-readable JSON object to
//! stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gmflow::data_eval::{
    nll_bits_per_dim, outlier_mass, tv_distance, tv_noise_floor, CheckerboardSpec, Dataset,
    Histogram2D,
};
use gmflow::error::GmError;
use gmflow::net::GmMlp;
use gmflow::solvers::{
    read_samples, sample_batch, write_samples_csv, write_samples_gmfs, SolverConfig, SolverKind,
};
use gmflow::spectral::SpectrumHead;
use gmflow::train::{train, write_loss_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "gmflow", about = "Gaussian mixture flow matching toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config; writes a checkpoint and a loss CSV.
    Train(TrainArgs),
    /// Draw samples from a trained checkpoint.
    Sample(SampleArgs),
    /// Score a samples file against a dataset (TV distance, outlier mass).
    Eval(EvalArgs),
    /// Time-averaged NLL (bits/dim) of a checkpoint on a dataset.
    Nll(NllArgs),
    /// TV/outlier matrix over solvers, NFE values, and checkpoints.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training configuration (unknown keys rejected).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoint.gmfc and loss.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// gm-sde | gm-sde-2 | gm-ode | gm-ode-2 | euler | ddpm-large | ddpm-small
    #[arg(long, default_value = "gm-sde")]
    solver: String,
    #[arg(long, default_value_t = 8)]
    nfe: usize,
    /// ODE sub-steps per step (default: max(ceil(128/NFE), 2)).
    #[arg(long)]
    substeps: Option<usize>,
    /// Use the toy sub-step rule ceil(128/NFE) instead of the default.
    #[arg(long, default_value_t = false)]
    toy_substeps: bool,
    /// Probabilistic guidance scale in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    guidance: f64,
    /// Mean-extrapolation CFG scale for baseline solvers (>= 1).
    #[arg(long, default_value_t = 1.0)]
    cfg_scale: f64,
    /// Class label for conditional checkpoints.
    #[arg(long)]
    cond: Option<usize>,
    /// Expected mixture size; rejected if it mismatches the checkpoint.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 65536)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// csv | gmfs
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value = "checkerboard")]
    dataset: String,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Also measure the two-sample Monte-Carlo TV noise floor at this size.
    #[arg(long, default_value_t = false)]
    noise_floor: bool,
    /// Metrics JSON output path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NllArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the spectrum-enhanced density (needs `<checkpoint>.spectrum`).
    #[arg(long, default_value_t = false)]
    spectral: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// One or more checkpoints (typically different K).
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Comma-separated NFE list, e.g. 1,2,4,8,16,32.
    #[arg(long, default_value = "1,2,4,8,16,32")]
    nfe: String,
    /// Comma-separated solver list.
    #[arg(long, default_value = "euler,ddpm-small,gm-sde,gm-sde-2,gm-ode,gm-ode-2")]
    solvers: String,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    gmflow::par::init_thread_pool_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Nll(a) => cmd_nll(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            eprintln!("{}", json!({ "error": e.to_string(), "kind": kind }));
            ExitCode::from(code)
        }
    }
}

fn classify(e: &GmError) -> (&'static str, u8) {
    match e {
        GmError::Format(_) | GmError::BinMismatch(_) => ("config", 2),
        GmError::Io(_) => ("io", 3),
        _ => ("solver", 4),
    }
}

fn cmd_train(a: TrainArgs) -> Result<(), GmError> {
    let text = std::fs::read_to_string(&a.config)?;
    let cfg: TrainConfig =
        serde_json::from_str(&text).map_err(|e| GmError::Format(format!("config: {e}")))?;
    cfg.validate()?;
    std::fs::create_dir_all(&a.out_dir)?;
    let result = train(&cfg)?;
    let ckpt = a.out_dir.join("checkpoint.gmfc");
    result.model.save(&ckpt)?;
    write_loss_csv(&result.curve, &a.out_dir.join("loss.csv"))?;
    if let Some(head) = &result.spectrum {
        save_spectrum(head, &spectrum_path(&ckpt))?;
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<(), GmError> {
    let model = GmMlp::load(&a.checkpoint)?;
    if let Some(k) = a.k {
        if k != model.cfg.k {
            return Err(GmError::Format(format!(
                "k mismatch: flags say {k}, checkpoint has {}",
                model.cfg.k
            )));
        }
    }
    if let Some(c) = a.cond {
        if model.cfg.num_classes == 0 {
            return Err(GmError::Format("checkpoint is unconditional; drop --cond".into()));
        }
        if c >= model.cfg.num_classes {
            return Err(GmError::Format(format!(
                "class {c} out of range ({} classes)",
                model.cfg.num_classes
            )));
        }
    }
    let mut cfg = SolverConfig::new(SolverKind::parse(&a.solver)?, a.nfe, a.seed);
    cfg.substeps = a.substeps;
    cfg.toy_substep_rule = a.toy_substeps;
    cfg.guidance = a.guidance;
    cfg.cfg_scale = a.cfg_scale;
    cfg.validate()?;
    let samples = sample_batch(&model, a.cond, &cfg, a.n)?;
    match a.format.as_str() {
        "csv" => write_samples_csv(&samples, &a.out)?,
        "gmfs" => write_samples_gmfs(&samples, &a.out)?,
        other => return Err(GmError::Format(format!("unknown format {other:?}"))),
    }
    println!("samples: {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), GmError> {
    let dataset = Dataset::parse(&a.dataset)?;
    if dataset.is_image() {
        return Err(GmError::Format("eval supports point datasets only".into()));
    }
    let samples = read_samples(&a.samples)?;
    if samples.dim != 2 {
        return Err(GmError::Format(format!("expected 2D samples, got D={}", samples.dim)));
    }
    let h = Histogram2D::from_samples(&samples.data, a.bins);
    let reference = reference_histogram(dataset, a.bins);
    let tv = tv_distance(&h, &reference)?;
    let om = outlier_mass(&samples.data, &CheckerboardSpec);
    let mut report = json!({
        "dataset": dataset.name(),
        "n_samples": samples.len(),
        "bins": a.bins,
        "tv": tv,
        "outlier_mass": om,
    });
    if a.noise_floor {
        report["noise_floor"] = json!(tv_noise_floor(samples.len(), a.bins, 0x6f1d));
    }
    emit(&report, a.out.as_deref())
}

fn reference_histogram(dataset: Dataset, bins: usize) -> Histogram2D {
    match dataset {
        Dataset::Checkerboard | Dataset::CheckerboardCond => {
            CheckerboardSpec.exact_histogram(bins)
        }
        Dataset::Gm2d => {
            // Monte-Carlo reference at high sample count.
            use rand::SeedableRng;
            let gm = gmflow::data_eval::gm2d_target();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x9a7);
            let mut pts = Vec::with_capacity(4_000_000);
            for _ in 0..2_000_000 {
                pts.extend_from_slice(&gm.sample(&mut rng));
            }
            Histogram2D::from_samples(&pts, bins)
        }
        Dataset::Blobs16 => unreachable!("image datasets rejected earlier"),
    }
}

fn cmd_nll(a: NllArgs) -> Result<(), GmError> {
    use rand::SeedableRng;
    let model = GmMlp::load(&a.checkpoint)?;
    let dataset = Dataset::parse(&a.dataset)?;
    let spectrum = if a.spectral {
        Some(load_spectrum(&spectrum_path(&a.checkpoint))?)
    } else {
        None
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
    let nll = nll_bits_per_dim(&model, dataset, a.n, spectrum.as_ref(), &mut rng)?;
    let report = json!({
        "dataset": dataset.name(),
        "n": a.n,
        "spectral": a.spectral,
        "nll_bits_per_dim": nll,
    });
    emit(&report, a.out.as_deref())
}

fn cmd_compare(a: CompareArgs) -> Result<(), GmError> {
    let nfes: Vec<usize> = a
        .nfe
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| GmError::Format(format!("bad nfe {s:?}"))))
        .collect::<Result<_, _>>()?;
    let solvers: Vec<SolverKind> =
        a.solvers.split(',').map(|s| SolverKind::parse(s.trim())).collect::<Result<_, _>>()?;
    let models: Vec<GmMlp> =
        a.checkpoint.iter().map(|p| GmMlp::load(p)).collect::<Result<_, _>>()?;
    let reference = CheckerboardSpec.exact_histogram(a.bins);
    let mut csv = String::from("solver,nfe,k,tv,outlier_mass\n");
    for model in &models {
        for &kind in &solvers {
            for &nfe in &nfes {
                let cfg = SolverConfig::new(kind, nfe, a.seed);
                let samples = sample_batch(model, None, &cfg, a.n)?;
                let h = Histogram2D::from_samples(&samples.data, a.bins);
                let tv = tv_distance(&h, &reference)?;
                let om = outlier_mass(&samples.data, &CheckerboardSpec);
                csv.push_str(&format!("{},{},{},{},{}\n", kind.name(), nfe, model.cfg.k, tv, om));
            }
        }
    }
    std::fs::write(&a.out, csv)?;
    println!("comparison: {}", a.out.display());
    Ok(())
}

fn emit(report: &serde_json::Value, out: Option<&Path>) -> Result<(), GmError> {
    let text = format!("{report:#}\n");
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

// ---- spectrum head persistence ------------------------------------------------

fn spectrum_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".spectrum");
    PathBuf::from(p)
}

const SPECTRUM_MAGIC: &[u8; 4] = b"GMSH";

fn save_spectrum(head: &SpectrumHead, path: &Path) -> Result<(), GmError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SPECTRUM_MAGIC);
    buf.extend_from_slice(&(head.d as u32).to_le_bytes());
    buf.extend_from_slice(&(head.hidden as u32).to_le_bytes());
    for v in head.w1.iter().chain(&head.b1).chain(&head.w2).chain(&head.b2) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn load_spectrum(path: &Path) -> Result<SpectrumHead, GmError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != SPECTRUM_MAGIC {
        return Err(GmError::Format("bad spectrum head file".into()));
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let hidden = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let counts = [hidden * 2, hidden, d * hidden, d];
    let total: usize = counts.iter().sum();
    if bytes.len() != 12 + 4 * total {
        return Err(GmError::Format("spectrum head payload size mismatch".into()));
    }
    let mut vals = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut take = |n: usize| -> Vec<f64> { (0..n).map(|_| vals.next().unwrap()).collect() };
    Ok(SpectrumHead {
        w1: take(counts[0]),
        b1: take(counts[1]),
        w2: take(counts[2]),
        b2: take(counts[3]),
        hidden,
        d,
    })
}
