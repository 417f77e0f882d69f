//! Command-line front end. Usage errors exit 2 (clap's convention), runtime
//! failures exit 1 with a diagnostic on stderr.

use crate::checkpoint::peek_config;
use crate::config::RunConfig;
use crate::dataset::{generate_shapes, load_idx, write_idx_images, write_idx_labels};
use crate::evals::{
    cknna_report, frechet_eval, generate_samples, load_for_eval, probe_accuracy, report_csv,
    subset_indices,
};
use crate::features::{hidden_features, write_rpaf};
use crate::images::write_pixmap_grid;
use crate::trainer::{train, Session};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use repalign_core::sampling::{GuidanceConfig, SamplerKind};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "repalign", version, about = "Train and probe aligned diffusion transformers")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON config, optionally resuming a checkpoint.
    Train(TrainArgs),
    /// Draw samples from a checkpoint into a pixmap grid.
    Sample(SampleArgs),
    /// Representation metrics over a checkpoint.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Hidden-state feature dumps.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Synthetic dataset utilities.
    #[command(subcommand)]
    Dataset(DatasetCmd),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint instead of fresh parameters.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Allow resuming even when the config no longer matches the checkpoint.
    #[arg(long)]
    force: bool,
    /// Directory for the checkpoint and log paths named in the config.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of images; labels cycle through the classes unless given.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Integration steps (defaults to 250, or the full discrete chain).
    #[arg(long)]
    steps: Option<usize>,
    /// ode | sde | ddpm
    #[arg(long)]
    sampler: Option<String>,
    /// Guidance strength; 1 disables guidance.
    #[arg(long, default_value_t = 1.0)]
    cfg_scale: f64,
    /// Guidance window "lo,hi" in diffusion time.
    #[arg(long)]
    cfg_interval: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated class labels, repeated or truncated to n.
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Kernel alignment (CKA/CKNNA) between hidden states and a teacher.
    Cknna(CknnaArgs),
    /// Linear-probe accuracy of pooled hidden states.
    Probe(ProbeArgs),
    /// Teacher-space Frechet distance of generated samples.
    Fd(FdArgs),
}

#[derive(Args)]
struct CknnaArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// oracle | descriptor | file:<path> (defaults to the training teacher).
    #[arg(long)]
    teacher: Option<String>,
    /// Comma-separated 1-based layer indices.
    #[arg(long, default_value = "1,2,3,4")]
    layers: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    /// Examples to evaluate on.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Write the CSV here as well as printing the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, default_value_t = 5000)]
    n: usize,
}

#[derive(Args)]
struct FdArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum FeaturesCmd {
    /// Dump hidden states for every dataset example to an RPAF file.
    Dump(DumpArgs),
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Generate the synthetic shapes dataset as an IDX image/label pair.
    Gen(GenArgs),
    /// Print a summary of an IDX image/label pair.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_images: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
    /// Optional pixmap preview of the first rows.
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

fn parse_layers(text: &str) -> Result<Vec<usize>> {
    let layers: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad layer {s:?}")))
        .collect::<Result<_>>()?;
    if layers.is_empty() {
        bail!("no layers given");
    }
    Ok(layers)
}

fn parse_labels(text: &str, classes: usize) -> Result<Vec<u32>> {
    let labels: Vec<u32> = text
        .split(',')
        .map(|s| s.trim().parse::<u32>().with_context(|| format!("bad label {s:?}")))
        .collect::<Result<_>>()?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        bail!("label {bad} exceeds num_classes {classes}");
    }
    Ok(labels)
}

fn parse_interval(text: &str) -> Result<(f64, f64)> {
    let (lo, hi) = text
        .split_once(',')
        .with_context(|| format!("expected lo,hi, got {text:?}"))?;
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn parse_sampler(text: &str) -> Result<SamplerKind> {
    match text {
        "ode" => Ok(SamplerKind::OdeEuler),
        "sde" => Ok(SamplerKind::SdeEulerMaruyama),
        "ddpm" => Ok(SamplerKind::DdpmAncestral),
        other => bail!("unknown sampler {other:?} (ode, sde, ddpm)"),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let cfg = RunConfig::from_json(&text)?;
    let mut session = match &args.resume {
        None => Session::fresh(&cfg)?,
        Some(ckpt) => {
            let (stored_digest, _) = peek_config(ckpt)?;
            if cfg.digest() == stored_digest {
                Session::resume(ckpt)?
            } else if args.force {
                eprintln!("warning: config differs from the checkpoint; forcing adoption");
                Session::resume_with(ckpt, cfg.clone())?
            } else {
                bail!(
                    "config digest {:016x} does not match checkpoint {:016x}; \
                     pass --force to adopt anyway",
                    cfg.digest(),
                    stored_digest
                );
            }
        }
    };
    let outcome = train(&mut session, &args.out_dir)?;
    println!(
        "trained to step {}; checkpoint {}; log {}",
        outcome.final_step,
        outcome.checkpoint.display(),
        outcome.log.display()
    );
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<()> {
    let model = load_for_eval(&args.ckpt)?;
    let classes = model.cfg().architecture.num_classes;
    let labels = match &args.labels {
        Some(text) => {
            let given = parse_labels(text, classes)?;
            (0..args.n).map(|i| given[i % given.len()]).collect::<Vec<_>>()
        }
        None => (0..args.n).map(|i| (i % classes) as u32).collect(),
    };
    let mut scfg = model.default_sampler();
    if let Some(kind) = &args.sampler {
        scfg.kind = parse_sampler(kind)?;
    }
    if let Some(steps) = args.steps {
        scfg.steps = steps;
    }
    scfg.wt = model.cfg().wt_rule()?;
    let gcfg = match (args.cfg_scale, &args.cfg_interval) {
        (s, None) => GuidanceConfig { scale: s, ..GuidanceConfig::none() },
        (s, Some(text)) => {
            let (lo, hi) = parse_interval(text)?;
            GuidanceConfig { scale: s, lo, hi }
        }
    };
    let samples = generate_samples(&model, &scfg, &gcfg, &labels, args.seed)?;
    let cols = (args.n as f64).sqrt().ceil() as usize;
    write_pixmap_grid(&args.out, &samples, cols.max(1))?;
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(())
}

fn cmd_cknna(args: CknnaArgs) -> Result<()> {
    let model = load_for_eval(&args.ckpt)?;
    let teacher = model.teacher(args.teacher.as_deref())?;
    let layers = parse_layers(&args.layers)?;
    let report = cknna_report(&model, &teacher, &layers, args.k, args.t, args.n)?;
    let csv = report_csv(&report);
    println!("{:>5} {:>6} {:>4} {:>10} {:>10}", "layer", "t", "k", "cka", "cknna");
    for r in &report.rows {
        println!("{:>5} {:>6} {:>4} {:>10.4} {:>10.4}", r.layer, r.t, r.k, r.cka, r.cknna);
    }
    if let Some(path) = &args.out {
        std::fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<()> {
    let model = load_for_eval(&args.ckpt)?;
    let acc = probe_accuracy(&model, args.layer, args.t, args.n)?;
    println!("layer {} t {} top-1 accuracy {:.4}", args.layer, args.t, acc);
    Ok(())
}

fn cmd_fd(args: FdArgs) -> Result<()> {
    let model = load_for_eval(&args.ckpt)?;
    let teacher = model.teacher(args.teacher.as_deref())?;
    let mut scfg = model.default_sampler();
    if let Some(steps) = args.steps {
        scfg.steps = steps;
    }
    scfg.wt = model.cfg().wt_rule()?;
    let fd = frechet_eval(&model, &teacher, args.n, args.seed, &scfg, &GuidanceConfig::none())?;
    println!("frechet distance over {} samples: {:.6}", args.n, fd);
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Result<()> {
    let model = load_for_eval(&args.ckpt)?;
    let feats = hidden_features(
        &model.session.denoiser,
        &model.eval_params,
        &model.session.interp,
        &model.session.data.images,
        &[args.layer],
        args.t,
        model.cfg().run.seed,
    )?;
    write_rpaf(&args.out, &feats[0])?;
    let s = feats[0].shape();
    println!("wrote {}x{}x{} features to {}", s[0], s[1], s[2], args.out.display());
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let d = generate_shapes(args.size, args.count, args.seed)?;
    write_idx_images(&args.out_images, &d.images)?;
    write_idx_labels(&args.out_labels, &d.labels)?;
    if let Some(preview) = &args.preview {
        let rows = 64.min(args.count);
        let idx = subset_indices(args.count, rows);
        let px = args.size * args.size;
        let mut data = Vec::with_capacity(rows * px);
        for &i in &idx {
            data.extend_from_slice(&d.images.data()[i * px..(i + 1) * px]);
        }
        let grid = repalign_core::numerics::tensor::Tensor::new(
            &[rows, 1, args.size, args.size],
            data,
        )
        .expect("sized by construction");
        write_pixmap_grid(preview, &grid, 8)?;
    }
    println!(
        "wrote {} {}x{} images to {} and labels to {}",
        args.count,
        args.size,
        args.size,
        args.out_images.display(),
        args.out_labels.display()
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let (images, labels) = load_idx(&args.images, &args.labels)?;
    let s = images.shape();
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in images.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut hist = vec![0usize; classes];
    for &l in &labels {
        hist[l as usize] += 1;
    }
    println!("{} images of {}x{}, values in [{lo:.3}, {hi:.3}]", s[0], s[2], s[3]);
    for (c, n) in hist.iter().enumerate() {
        println!("class {c}: {n}");
    }
    Ok(())
}

pub fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval(EvalCmd::Cknna(a)) => cmd_cknna(a),
        Cmd::Eval(EvalCmd::Probe(a)) => cmd_probe(a),
        Cmd::Eval(EvalCmd::Fd(a)) => cmd_fd(a),
        Cmd::Features(FeaturesCmd::Dump(a)) => cmd_dump(a),
        Cmd::Dataset(DatasetCmd::Gen(a)) => cmd_gen(a),
        Cmd::Dataset(DatasetCmd::Inspect(a)) => cmd_inspect(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::error::ErrorKind;

    #[test]
    fn unknown_flag_is_a_usage_error() {
        match Cli::try_parse_from(["repalign", "train", "--explode"]) {
            Ok(_) => panic!("unknown flag accepted"),
            Err(err) => {
                assert_eq!(err.kind(), ErrorKind::UnknownArgument);
                assert_eq!(err.exit_code(), 2);
            }
        }
    }

    #[test]
    fn interval_and_label_parsing() {
        assert_eq!(parse_interval("0.1, 0.7").unwrap(), (0.1, 0.7));
        assert!(parse_interval("0.5").is_err());
        assert_eq!(parse_labels("0,3", 4).unwrap(), vec![0, 3]);
        assert!(parse_labels("0,4", 4).is_err());
        assert_eq!(parse_layers("2").unwrap(), vec![2]);
    }

    #[test]
    fn sampler_names_round_trip() {
        assert!(matches!(parse_sampler("ode").unwrap(), SamplerKind::OdeEuler));
        assert!(matches!(parse_sampler("sde").unwrap(), SamplerKind::SdeEulerMaruyama));
        assert!(matches!(parse_sampler("ddpm").unwrap(), SamplerKind::DdpmAncestral));
        assert!(parse_sampler("heun").is_err());
    }
}
