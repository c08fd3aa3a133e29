//! Command-line front end: cost reports, closed-form verification, scaling
//! benchmarks, branch forward passes and panoptic quality evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lintention::branches::{branch_forward, build_branch, BranchConfig, BranchWeights, FpnFeatures, Variant};
use lintention::cost::{branch_cost, compare_variants, CountingConvention, MacMode};
use lintention::io::{read_tensor, write_pgm, write_tensor, LabelPlane};
use lintention::metrics::{load_categories, pq_stats, PanopticMap};
use lintention::rng::SplitMix64Stream;
use lintention::verification::{
    gradcheck_suite, loglog_slope, scaling_point, verify_closed_forms, Mechanism, DEFAULT_STEP, DEFAULT_TOL,
};
use lintention::Tensor;

#[derive(Parser, Debug)]
#[command(name = "lintention", version, about = "Linear-complexity attention toolkit")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// FLOPs per multiply-accumulate for convolution-like work.
    #[arg(long, global = true, default_value = "1", value_parser = parse_mac)]
    mac: MacMode,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the cost report of a segmentation branch.
    Cost(CostArgs),
    /// Check counted complexity against the closed forms and run the gradient suite.
    Verify(VerifyArgs),
    /// Counted FLOPs at several pixel counts, as CSV.
    Bench(BenchArgs),
    /// Run a branch on an image tensor.
    Run(RunArgs),
    /// Write seeded branch weights to a directory.
    Init(InitArgs),
    /// Write a seeded random image tensor.
    SynthInput(SynthArgs),
    /// Panoptic quality of a prediction against ground truth.
    Pq(PqArgs),
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long)]
    variant: Option<String>,
    /// Image size as HxW.
    #[arg(long)]
    image: Option<String>,
    /// Branch configuration JSON; flags override its variant and size.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report all variants with deltas against the baseline.
    #[arg(long)]
    compare: bool,
    /// Emit the comparison as JSON instead of a table.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 3)]
    max_extent: usize,
    /// Write the full JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fault injection: doubles the softmax exponent cost.
    #[arg(long, hide = true)]
    corrupt_convention: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    mechanism: String,
    /// Comma separated pixel counts.
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    groups: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    variant: String,
    /// Image tensor `(c, h, w)` in LTNT format.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Output directory for `logits.ltnt` and `argmax.pgm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long)]
    image: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PqArgs {
    /// Predicted class and instance PGMs.
    #[arg(long, num_args = 2, value_names = ["CLASS", "INSTANCE"])]
    pred: Vec<PathBuf>,
    /// Ground-truth class and instance PGMs.
    #[arg(long, num_args = 2, value_names = ["CLASS", "INSTANCE"])]
    gt: Vec<PathBuf>,
    /// JSON list of {id, name, isthing}.
    #[arg(long)]
    categories: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mac(s: &str) -> Result<MacMode, String> {
    s.parse().map_err(|e: lintention::Error| e.to_string())
}

/// A check ran and failed; maps to exit status 1.
#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for CheckFailed {}

fn parse_image(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| anyhow!("image size `{s}` is not HxW"))?;
    Ok((
        h.trim().parse().with_context(|| format!("bad height in `{s}`"))?,
        w.trim().parse().with_context(|| format!("bad width in `{s}`"))?,
    ))
}

fn read_config(path: &Path) -> Result<BranchConfig> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn branch_config(variant: Option<&str>, image: Option<&str>, config: Option<&Path>, seed: u64) -> Result<BranchConfig> {
    let mut cfg = match config {
        Some(p) => read_config(p)?,
        None => {
            let (h, w) = parse_image(image.ok_or_else(|| anyhow!("--image is required without --config"))?)?;
            BranchConfig::new(Variant::Baseline, h, w).with_seed(seed)
        }
    };
    if let Some(v) = variant {
        cfg.variant = v.parse()?;
    }
    if let (Some(img), Some(_)) = (image, config) {
        (cfg.image_height, cfg.image_width) = parse_image(img)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_cost(args: &CostArgs, conv: &CountingConvention, seed: u64) -> Result<()> {
    let cfg = branch_config(args.variant.as_deref(), args.image.as_deref(), args.config.as_deref(), seed)?;
    if !args.compare {
        let report = branch_cost(&cfg, conv)?;
        return emit(args.out.as_deref(), &(report.to_json()? + "\n"));
    }
    let rows = compare_variants(&cfg, conv)?;
    let text = if args.json {
        serde_json::to_string_pretty(&rows)? + "\n"
    } else {
        let mut t = format!(
            "image {}x{}, {} classes, conv {}\n{:<12} {:>16} {:>9} {:>12} {:>9}\n",
            cfg.image_height,
            cfg.image_width,
            cfg.num_classes,
            conv.conv_mode,
            "variant",
            "flops",
            "d_flops",
            "params",
            "d_params"
        );
        for r in &rows {
            t += &format!(
                "{:<12} {:>16} {:>8.2}% {:>12} {:>8.2}%{}\n",
                r.variant.name(),
                r.flops,
                r.flops_delta_pct,
                r.params,
                r.params_delta_pct,
                if r.approximate { "  (approximate operator config)" } else { "" }
            );
        }
        t
    };
    emit(args.out.as_deref(), &text)
}

fn cmd_verify(args: &VerifyArgs, conv: &CountingConvention, seed: u64) -> Result<()> {
    let mut conv = *conv;
    if args.corrupt_convention {
        conv.softmax_exp += 1;
    }
    let closed = verify_closed_forms(args.max_extent, &conv)?;
    println!("{}/{} closed-form checks passed", closed.passed, closed.checked);
    if let Some(m) = &closed.first_failure {
        println!("first mismatch: {m}");
    }
    let grads = gradcheck_suite(seed, DEFAULT_STEP, DEFAULT_TOL)?;
    for g in &grads {
        println!(
            "gradcheck {:<32} max rel err {:.3e} {}",
            g.op,
            g.max_rel_error,
            if g.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(out) = &args.out {
        let json = serde_json::json!({ "closed_forms": closed, "gradcheck": grads });
        fs::write(out, serde_json::to_string_pretty(&json)?).with_context(|| format!("writing {}", out.display()))?;
    }
    if !closed.ok() || grads.iter().any(|g| !g.passed) {
        return Err(CheckFailed.into());
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs, conv: &CountingConvention, seed: u64) -> Result<()> {
    let mechanism: Mechanism = args.mechanism.parse()?;
    if args.sizes.is_empty() {
        bail!("--sizes must list at least one pixel count");
    }
    let mut csv = String::from("hw,counted_flops,wall_ns,peak_scalars\n");
    let mut points = Vec::new();
    for &hw in &args.sizes {
        let p = scaling_point(mechanism, hw, args.channels, args.groups, seed, conv)?;
        csv += &format!("{},{},{},{}\n", p.hw, p.counted_flops, p.wall_ns, p.peak_scalars);
        points.push((p.hw as f64, p.counted_flops as f64));
    }
    emit(args.out.as_deref(), &csv)?;
    match loglog_slope(&points) {
        None => eprintln!("single size: no slope fit"),
        Some(slope) => {
            eprintln!("{mechanism} log-log FLOP slope: {slope:.4}");
            if mechanism == Mechanism::Lintention {
                // the value projection does not depend on the pixel count
                let (c, p) = (args.channels as f64, args.groups as f64);
                let fixed = conv.contraction as f64 * p * c * c;
                let shifted: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x, y - fixed)).collect();
                if let Some(s) = loglog_slope(&shifted) {
                    eprintln!("{mechanism} slope without the fixed value-projection term: {s:.4}");
                }
            }
        }
    }
    Ok(())
}

fn argmax_plane(logits: &Tensor) -> Result<LabelPlane> {
    let e = logits.extents();
    let (k, h, w) = (e[1], e[2], e[3]);
    if k > u16::MAX as usize + 1 {
        bail!("{k} classes do not fit a 16-bit label plane");
    }
    let data = logits.data();
    let values = (0..h * w)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if data[c * h * w + i] > data[best * h * w + i] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    Ok(LabelPlane { height: h, width: w, values })
}

fn cmd_run(args: &RunArgs, seed: u64) -> Result<()> {
    let variant: Variant = args.variant.parse()?;
    if !args.weights.is_dir() {
        bail!("weights directory {} does not exist", args.weights.display());
    }
    let mut weights = BranchWeights::load(&args.weights)?;
    if weights.config.variant != variant {
        bail!(
            "weights in {} are for variant {}, not {variant}",
            args.weights.display(),
            weights.config.variant
        );
    }
    let image = read_tensor(&args.input)?;
    let features = FpnFeatures::from_image(&image, seed, weights.config.fpn_channels)?;
    // parameters do not depend on geometry; adopt the input's size
    (weights.config.image_height, weights.config.image_width) = features.image_size();
    weights.config.validate()?;
    let logits = branch_forward(&features, &weights)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let plane = argmax_plane(&logits)?;
    let e = logits.extents();
    let squeezed = if e[0] == 1 {
        logits.reshape(&[("k", e[1]), ("h", e[2]), ("w", e[3])])?
    } else {
        logits
    };
    write_tensor(&args.out.join("logits.ltnt"), &squeezed)?;
    write_pgm(&args.out.join("argmax.pgm"), &plane)?;
    eprintln!("wrote {:?} logits and argmax map to {}", squeezed.extents(), args.out.display());
    Ok(())
}

fn cmd_init(args: &InitArgs, seed: u64) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => read_config(p)?,
        None => BranchConfig::new(Variant::Baseline, 32, 32).with_seed(seed),
    };
    if let Some(v) = &args.variant {
        cfg.variant = v.parse()?;
    }
    let weights = build_branch(&cfg)?;
    weights.save(&args.out)?;
    eprintln!("wrote {} parameters of {} to {}", weights.param_count(), cfg.variant, args.out.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let (h, w) = parse_image(&args.image)?;
    let t = SplitMix64Stream::new(seed).tensor(&[("c", args.channels), ("h", h), ("w", w)], 1.0)?;
    write_tensor(&args.out, &t)?;
    Ok(())
}

fn cmd_pq(args: &PqArgs) -> Result<()> {
    let pred = PanopticMap::load(&args.pred[0], &args.pred[1])?;
    let gt = PanopticMap::load(&args.gt[0], &args.gt[1])?;
    let (things, stuff) = load_categories(&args.categories)?;
    let stats = pq_stats(&pred, &gt, &things, &stuff)?;
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&stats)? + "\n"))
}

fn run(cli: &Cli) -> Result<()> {
    let conv = CountingConvention::default().with_conv_mode(cli.mac);
    eprintln!("seed={} convention: {conv}", cli.seed);
    match &cli.command {
        Command::Cost(a) => cmd_cost(a, &conv, cli.seed),
        Command::Verify(a) => cmd_verify(a, &conv, cli.seed),
        Command::Bench(a) => cmd_bench(a, &conv, cli.seed),
        Command::Run(a) => cmd_run(a, cli.seed),
        Command::Init(a) => cmd_init(a, cli.seed),
        Command::SynthInput(a) => cmd_synth(a, cli.seed),
        Command::Pq(a) => cmd_pq(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<CheckFailed>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
