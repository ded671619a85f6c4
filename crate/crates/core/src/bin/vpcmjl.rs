use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use vpcmjl::config::{DecouplerKind, KlBranches};
use vpcmjl::data::{load_world, read_checkpoint_header, save_world, Checkpoint, Mode, SplitTag, World};
use vpcmjl::encoders::{generate_world, SyntheticWorldConfig};
use vpcmjl::eval::ablation::{run_ablation, write_ablation_csv};
use vpcmjl::eval::{evaluate, read_report, write_curve_csv, write_report, write_sweep_csv, Fusion};
use vpcmjl::model::{gradcheck_model, GradCheckSetup};
use vpcmjl::tensor::opcheck::op_suite;
use vpcmjl::tensor::{DType, Element};
use vpcmjl::train::{model_from_checkpoint, Trainer};
use vpcmjl::{Config, Error, Result};

/// Gradient checks fail above this relative error.
const GRAD_TOL: f64 = 1e-4;
/// Exit code when a gradient check exceeds the tolerance.
const EXIT_GRAD_FAIL: u8 = 4;

#[derive(Parser)]
#[command(name = "vpcmjl", version, about = "Compositional zero-shot classifier on synthetic worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world directory.
    GenData(GenData),
    /// Train a model and write checkpoints and the epoch log.
    Train(TrainCmd),
    /// Evaluate a checkpoint and write report.json and sweep.csv.
    Eval(EvalCmd),
    /// Train and evaluate the component and decoupler grids.
    Ablate(AblateCmd),
    /// Compare taped gradients with finite differences.
    GradCheck(GradCheckCmd),
    /// Turn a report into a sorted seen/unseen tradeoff CSV.
    ExportCurves(ExportCmd),
}

fn world_default() -> SyntheticWorldConfig {
    SyntheticWorldConfig::default()
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = world_default().n_attrs)]
    attrs: usize,
    #[arg(long, default_value_t = world_default().n_objs)]
    objs: usize,
    /// Joint embedding width.
    #[arg(long, default_value_t = world_default().d)]
    dim: usize,
    #[arg(long, default_value_t = world_default().raw_dim)]
    raw_dim: usize,
    #[arg(long, default_value_t = world_default().latent_dim)]
    latent_dim: usize,
    #[arg(long, default_value_t = world_default().samples_per_pair)]
    samples_per_pair: usize,
    #[arg(long, default_value_t = world_default().gap)]
    gap: f64,
    #[arg(long, default_value_t = world_default().noise)]
    noise: f64,
    #[arg(long, default_value_t = world_default().unseen_frac)]
    unseen_frac: f64,
    #[arg(long, default_value_t = world_default().seed)]
    seed: u64,
}

fn d() -> Config {
    Config::default()
}

/// One flag per config key. Only flags given on the command line override the file.
#[derive(Args, Clone)]
struct ConfigFlags {
    /// TOML config file; its keys match the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = d().dtype)]
    dtype: DType,
    #[arg(long, default_value_t = d().seed)]
    seed: u64,
    #[arg(long, default_value_t = d().encoder_seed)]
    encoder_seed: u64,
    #[arg(long, default_value_t = d().vocab_size)]
    vocab_size: usize,
    #[arg(long, default_value_t = d().d_tok)]
    d_tok: usize,
    #[arg(long, default_value_t = d().text_heads)]
    text_heads: usize,
    #[arg(long, default_value_t = d().text_blocks)]
    text_blocks: usize,
    #[arg(long, default_value_t = d().heads)]
    heads: usize,
    #[arg(long, default_value_t = d().tau_t)]
    tau_t: f64,
    #[arg(long, default_value_t = d().tau_v)]
    tau_v: f64,
    #[arg(long, default_value_t = d().gamma_ao)]
    gamma_ao: f64,
    #[arg(long, default_value_t = d().gamma_c)]
    gamma_c: f64,
    #[arg(long, default_value_t = d().alpha)]
    alpha: f64,
    #[arg(long, default_value_t = d().beta)]
    beta: f64,
    #[arg(long, default_value_t = d().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = d().kl_branches)]
    kl_branches: KlBranches,
    #[arg(long)]
    kl_detach_target: bool,
    #[arg(long, default_value_t = d().proxy_noise)]
    proxy_noise: f64,
    /// Drop the visual path and its losses.
    #[arg(long)]
    no_vp: bool,
    /// Drop the text path and its losses.
    #[arg(long)]
    no_tp: bool,
    #[arg(long, default_value_t = d().i2t)]
    i2t: DecouplerKind,
    #[arg(long, default_value_t = d().i2v)]
    i2v: DecouplerKind,
    #[arg(long, default_value_t = d().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = d().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = d().lr)]
    lr: f64,
    #[arg(long, default_value_t = d().weight_decay)]
    weight_decay: f64,
    #[arg(long, default_value_t = d().beta1)]
    beta1: f64,
    #[arg(long, default_value_t = d().beta2)]
    beta2: f64,
    #[arg(long, default_value_t = d().eps)]
    eps: f64,
    #[arg(long, default_value_t = d().mode)]
    mode: Mode,
    /// Worker threads, 0 for all cores.
    #[arg(long, default_value_t = d().threads)]
    threads: usize,
}

macro_rules! overlay {
    ($flags:ident, $m:ident, $cfg:ident, $given:ident; $($f:ident),* $(,)?) => {
        $(
            if $m.value_source(stringify!($f)) == Some(ValueSource::CommandLine) {
                $cfg.$f = $flags.$f.clone();
                $given.push(stringify!($f));
            }
        )*
    };
}

impl ConfigFlags {
    /// Apply command-line flags over `base`, returning the names that were set.
    fn overlay(&self, m: &ArgMatches, base: Config) -> (Config, Vec<&'static str>) {
        let mut cfg = base;
        let mut given = Vec::new();
        overlay!(self, m, cfg, given;
            dtype, seed, encoder_seed, vocab_size, d_tok, text_heads, text_blocks, heads, tau_t, tau_v,
            gamma_ao, gamma_c, alpha, beta, lambda, kl_branches, kl_detach_target, proxy_noise, no_vp, no_tp,
            i2t, i2v, epochs, batch_size, lr, weight_decay, beta1, beta2, eps, mode, threads);
        (cfg, given)
    }

    /// Flag, then file, then default.
    fn resolve(&self, m: &ArgMatches) -> Result<Config> {
        let base = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let (cfg, _) = self.overlay(m, base);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a final.ckpt; only --epochs may change.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Candidate set; defaults to the checkpoint's mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Visual-path fusion weight; defaults to the checkpoint's lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Score only one path.
    #[arg(long, value_parser = ["text", "visual"])]
    path: Option<String>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct AblateCmd {
    #[arg(long)]
    world: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args)]
struct GradCheckCmd {
    #[arg(long, value_parser = ["op", "model"])]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
}

#[derive(Args)]
struct ExportCmd {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn print_config(cfg: &Config) {
    println!("resolved config (seed {}):", cfg.seed);
    for line in cfg.to_toml().lines() {
        println!("  {line}");
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_data(a: &GenData) -> Result<()> {
    let cfg = SyntheticWorldConfig {
        n_attrs: a.attrs,
        n_objs: a.objs,
        d: a.dim,
        raw_dim: a.raw_dim,
        latent_dim: a.latent_dim,
        samples_per_pair: a.samples_per_pair,
        noise: a.noise,
        gap: a.gap,
        unseen_frac: a.unseen_frac,
        seed: a.seed,
    };
    println!("world config (seed {}):", cfg.seed);
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    let (world, geom) = generate_world(&cfg)?;
    ensure_dir(&a.out)?;
    save_world(&a.out, &world)?;
    println!(
        "{} seen / {} unseen pairs; train {} val {} test {}; gap direction norm {:.3}",
        world.space.seen().len(),
        world.space.unseen().len(),
        world.train.len(),
        world.val.len(),
        world.test.len(),
        geom.gap_direction.iter().map(|x| x * x).sum::<f64>().sqrt()
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_training<T: Element>(mut tr: Trainer<'_, T>, out: &Path) -> Result<()> {
    tr.run(|r| {
        println!(
            "epoch {:>3}  loss {:>9.4}  (kl {:.4})  val S {:.3} U {:.3} HM {:.3} AUC {:.4}",
            r.epoch, r.loss_total, r.loss_kl, r.val_s, r.val_u, r.val_hm, r.val_auc
        );
    })?;
    ensure_dir(out)?;
    tr.checkpoint().save(&out.join("final.ckpt"))?;
    tr.best_checkpoint().save(&out.join("best.ckpt"))?;
    tr.log().write_csv(&out.join("train_log.csv"))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, tr.model().config().to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    println!(
        "best epoch {} of {}; wrote final.ckpt, best.ckpt, train_log.csv to {}",
        tr.best_epoch().unwrap_or(0),
        tr.epoch(),
        out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainCmd, m: &ArgMatches) -> Result<()> {
    let world = load_world(&a.world)?;
    match &a.resume {
        Some(path) => {
            let header = read_checkpoint_header(path)?;
            let saved = Config::from_json(&header.config)?;
            let (cfg, given) = a.cfg.overlay(m, saved.clone());
            if a.cfg.config.is_some() || given.iter().any(|&g| g != "epochs") {
                return Err(Error::Config("--resume accepts only --epochs; other settings come from the checkpoint".into()));
            }
            print_config(&cfg);
            println!("resuming from {} at epoch {}", path.display(), header.epoch);
            match header.dtype {
                DType::F32 => run_training(Trainer::<f32>::resume(&Checkpoint::load(path)?, &world, Some(cfg.epochs))?, &a.out),
                DType::F64 => run_training(Trainer::<f64>::resume(&Checkpoint::load(path)?, &world, Some(cfg.epochs))?, &a.out),
            }
        }
        None => {
            let cfg = a.cfg.resolve(m)?;
            print_config(&cfg);
            match cfg.dtype {
                DType::F32 => run_training(Trainer::<f32>::new(&cfg, &world)?, &a.out),
                DType::F64 => run_training(Trainer::<f64>::new(&cfg, &world)?, &a.out),
            }
        }
    }
}

fn eval_typed<T: Element>(a: &EvalCmd, world: &World) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(&a.ckpt)?;
    let model = model_from_checkpoint(&ckpt, world)?;
    let cfg = model.config();
    let mode = a.mode.unwrap_or(cfg.mode);
    let lambda = a.lambda.unwrap_or(cfg.lambda);
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let fusion = match a.path.as_deref() {
        Some("text") => Fusion::TextOnly,
        Some("visual") => Fusion::VisualOnly,
        _ => Fusion::Joint { lambda },
    };
    let tag = match a.split.as_str() {
        "train" => SplitTag::Train,
        "val" => SplitTag::Val,
        _ => SplitTag::Test,
    };
    print_config(cfg);
    println!("evaluating {} split, {mode} world, fusion {fusion:?}", tag.name());
    let report = evaluate(&model, world.split(tag), mode, fusion, a.threads)?;
    ensure_dir(&a.out)?;
    write_report(&a.out.join("report.json"), &report)?;
    write_sweep_csv(&a.out.join("sweep.csv"), &report)?;
    println!(
        "S {:.2}  U {:.2}  HM {:.2}  AUC {:.2}  ({} seen / {} unseen samples, {} sweep points)",
        100.0 * report.seen,
        100.0 * report.unseen,
        100.0 * report.hm,
        100.0 * report.auc,
        report.n_seen,
        report.n_unseen,
        report.curve.len()
    );
    println!("wrote report.json and sweep.csv to {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: &EvalCmd) -> Result<()> {
    let world = load_world(&a.world)?;
    match read_checkpoint_header(&a.ckpt)?.dtype {
        DType::F32 => eval_typed::<f32>(a, &world),
        DType::F64 => eval_typed::<f64>(a, &world),
    }
}

fn ablate_cmd(a: &AblateCmd, m: &ArgMatches) -> Result<()> {
    let world = load_world(&a.world)?;
    let cfg = a.cfg.resolve(m)?;
    print_config(&cfg);
    let rows = match cfg.dtype {
        DType::F32 => run_ablation::<f32>(&world, &cfg)?.rows,
        DType::F64 => run_ablation::<f64>(&world, &cfg)?.rows,
    };
    println!("{:<11} {:<8} {:<10} {:>6} {:>6} {:>6} {:>6}", "group", "variant", "removal", "S", "U", "HM", "AUC");
    for r in &rows {
        println!(
            "{:<11} {:<8} {:<10} {:>6.2} {:>6.2} {:>6.2} {:>6.2}",
            r.group,
            r.variant,
            r.removal,
            100.0 * r.seen,
            100.0 * r.unseen,
            100.0 * r.hm,
            100.0 * r.auc
        );
    }
    ensure_dir(&a.out)?;
    write_ablation_csv(&a.out.join("ablation.csv"), &rows)?;
    println!("wrote {}", a.out.join("ablation.csv").display());
    Ok(())
}

fn grad_check_cmd(a: &GradCheckCmd) -> Result<bool> {
    println!("grad-check scope {} seed {} step {:e}", a.scope, a.seed, a.step);
    let reports = if a.scope == "op" {
        op_suite(a.seed, a.step)?
    } else {
        let setup = GradCheckSetup::standard(a.seed)?;
        print_config(&setup.config);
        gradcheck_model(&setup, a.step)?
    };
    let mut ok = true;
    for r in &reports {
        let pass = r.max_rel_err < GRAD_TOL;
        ok &= pass;
        println!("{:<28} {:>6} {:>10.3e}  {}", r.name, r.numel, r.max_rel_err, if pass { "ok" } else { "FAIL" });
    }
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    println!("{} groups, worst relative error {worst:.3e} (tolerance {GRAD_TOL:e})", reports.len());
    Ok(ok)
}

fn export_cmd(a: &ExportCmd) -> Result<()> {
    let report = read_report(&a.report)?;
    write_curve_csv(&a.out, &report)?;
    println!("wrote {} ({} sweep points)", a.out.display(), report.curve.len());
    Ok(())
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a, sub),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a, sub),
        Command::GradCheck(a) => match grad_check_cmd(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_GRAD_FAIL),
            Err(e) => Err(e),
        },
        Command::ExportCurves(a) => export_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
