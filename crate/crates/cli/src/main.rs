use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ckfr_core::data::save_dataset;
use ckfr_core::experiment::{
    self, eval_csv, evaluate, load_model, parse_list, prepare, read_text, run_sweep, run_train, sweep_report_svg, write_cam_artifacts, write_file,
    ExperimentError, RunConfig, RESOLVED,
};
use ckfr_core::knowledge::{build_distance_matrix, build_mapped_distance_matrix, parse_mapping, parse_tree, DEFAULT_EDGE_WEIGHT};
use ckfr_core::synth::generate_tree_blobs;
use ckfr_core::wsol::{latent3d_csv, EvalConfig};

/// Tree-prior image classification experiments.
#[derive(Parser)]
#[command(name = "ckfr", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Localization thresholds: convnet or vit.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a tree-blobs dataset.
    Gen(Common),
    /// Write the class distance matrix of a tree as CSV.
    Distances {
        #[arg(long)]
        tree: PathBuf,
        /// `dataset_class<TAB>tree_node` mapping; all leaves when omitted.
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint and history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        ell: Option<f64>,
    },
    /// Classification and localization metrics of the trained model.
    Eval(Common),
    /// Per-image activation maps and box overlays.
    Cam {
        #[command(flatten)]
        common: Common,
        /// Number of val images.
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
    /// Train and evaluate over lists of alpha and ell values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<String>,
        #[arg(long)]
        ell: Option<String>,
    },
    /// Export the 3-unit layer activations of the val set.
    Latent3d(Common),
    /// Plot a sweep CSV as SVG.
    Report {
        /// Sweep CSV written by `sweep`.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, ExperimentError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(name) = &c.preset {
        cfg.eval = EvalConfig::preset(name).ok_or_else(|| ExperimentError::Config(format!("unknown preset `{name}`")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig) -> Result<(), ExperimentError> {
    write_file(&cfg.out.join(RESOLVED), cfg.resolved_json())
}

fn gen(c: &Common) -> Result<(), ExperimentError> {
    let mut cfg = load_config(c)?;
    let mut synth = cfg
        .synth_or_default()
        .ok_or_else(|| ExperimentError::Config("`gen` needs a synth config".into()))?;
    if let Some(seed) = c.seed {
        synth.seed = seed;
    }
    cfg.synth = Some(synth.clone());
    write_resolved(&cfg)?;
    let g = generate_tree_blobs(&synth)?;
    save_dataset(&g.train, &cfg.out.join("train"), Some(synth.seed))?;
    save_dataset(&g.val, &cfg.out.join("val"), Some(synth.seed))?;
    write_file(&cfg.out.join("tree.txt"), g.tree.to_text())?;
    let d = build_distance_matrix(&g.tree, &g.tree.leaves())?;
    write_file(&cfg.out.join("distances.csv"), d.to_csv())?;
    println!("{} train and {} val images in {}", g.train.len(), g.val.len(), cfg.out.display());
    Ok(())
}

fn distances(tree: &Path, classes: Option<&Path>, out: &Path) -> Result<(), ExperimentError> {
    let tree = parse_tree(&read_text(tree)?, DEFAULT_EDGE_WEIGHT)?;
    let d = match classes {
        Some(p) => build_mapped_distance_matrix(&tree, &parse_mapping(&read_text(p)?)?)?,
        None => build_distance_matrix(&tree, &tree.leaves())?,
    };
    write_file(out, d.to_csv())
}

fn train_cmd(c: &Common, alpha: Option<f64>, ell: Option<f64>) -> Result<(), ExperimentError> {
    let mut cfg = load_config(c)?;
    if let Some(a) = alpha {
        cfg.train.loss.alpha = a;
    }
    if let Some(l) = ell {
        cfg.train.loss.ell = l;
    }
    cfg.validate()?;
    let data = prepare(&cfg)?;
    let (_, history) = run_train(&cfg, &data, &cfg.out)?;
    if let Some(last) = history.epochs.last() {
        println!(
            "epoch {} mean_ce {:.4} val_top1 {}",
            last.epoch,
            last.mean_ce,
            last.val_top1.map(|v| format!("{v:.2}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn eval_cmd(c: &Common) -> Result<(), ExperimentError> {
    let cfg = load_config(c)?;
    let model = load_model(&cfg.out)?;
    write_resolved(&cfg)?;
    let data = prepare(&cfg)?;
    let s = evaluate(&model, &data.val, data.prior.as_ref(), &cfg.eval, cfg.map_method, cfg.train.loss.ell)?;
    let csv = eval_csv(&s);
    write_file(&cfg.out.join("eval.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cam_cmd(c: &Common, limit: usize) -> Result<(), ExperimentError> {
    let cfg = load_config(c)?;
    let model = load_model(&cfg.out)?;
    write_resolved(&cfg)?;
    let data = prepare(&cfg)?;
    let n = write_cam_artifacts(&model, &data.val, &cfg.eval, cfg.map_method, &cfg.out.join("cam"), limit)?;
    println!("{n} maps in {}", cfg.out.join("cam").display());
    Ok(())
}

fn sweep_cmd(c: &Common, alpha: Option<&str>, ell: Option<&str>) -> Result<(), ExperimentError> {
    let cfg = load_config(c)?;
    let alphas = alpha.map(parse_list).transpose()?.unwrap_or(vec![cfg.train.loss.alpha]);
    let ells = ell.map(parse_list).transpose()?.unwrap_or(vec![cfg.train.loss.ell]);
    write_resolved(&cfg)?;
    let rows = run_sweep(&cfg, &alphas, &ells, &cfg.out)?;
    let csv = experiment::sweep_csv(&rows);
    write_file(&cfg.out.join("sweep.svg"), sweep_report_svg(&csv)?)?;
    print!("{csv}");
    Ok(())
}

fn latent3d_cmd(c: &Common) -> Result<(), ExperimentError> {
    let cfg = load_config(c)?;
    let model = load_model(&cfg.out)?;
    write_resolved(&cfg)?;
    let data = prepare(&cfg)?;
    write_file(&cfg.out.join("latent3d.csv"), latent3d_csv(&model, &data.val)?)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.cmd {
        Cmd::Gen(c) => gen(&c),
        Cmd::Distances { tree, classes, out } => distances(&tree, classes.as_deref(), &out),
        Cmd::Train { common, alpha, ell } => train_cmd(&common, alpha, ell),
        Cmd::Eval(c) => eval_cmd(&c),
        Cmd::Cam { common, limit } => cam_cmd(&common, limit),
        Cmd::Sweep { common, alpha, ell } => sweep_cmd(&common, alpha.as_deref(), ell.as_deref()),
        Cmd::Latent3d(c) => latent3d_cmd(&c),
        Cmd::Report { input, out } => write_file(&out, sweep_report_svg(&read_text(&input)?)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
