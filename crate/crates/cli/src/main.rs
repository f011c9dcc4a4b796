//! `lcd`: train, evaluate and ablate point cloud autoencoders under the
//! learnable Chamfer loss, and generate synthetic shape datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use lcd_core::dataio::{self, Dataset, Family};
use lcd_core::par::Exec;
use lcd_core::reconnet::{self, ReconParams};
use lcd_core::trainer::{
    self, csv::format_sig6, AblationPlan, EvalReport, LossMode, MetricsRecord, Sweep, TrainConfig,
    Variant,
};

#[derive(Parser)]
#[command(name = "lcd", version, about = "Learnable Chamfer distance toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a reconstruction network.
    Train {
        #[command(flatten)]
        train: TrainFlags,
        /// Loss used for the reconstruction network.
        #[arg(long, default_value = "lcd", value_parser = parse_loss)]
        loss: LossMode,
        /// Drop the joint feature from the scoring network.
        #[arg(long)]
        no_siacon: bool,
        /// Train the loss networks on -L_R instead of -ln(L_R + sigma_r).
        #[arg(long)]
        no_log: bool,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Score a checkpoint (or saved predictions) against a dataset.
    Eval(EvalFlags),
    /// Repeated runs over loss variants, seeds and an optional sweep.
    Ablate {
        #[command(flatten)]
        train: TrainFlags,
        /// Comma-separated subset of cd, lcd_no_siacon, lcd_no_log, lcd_full.
        /// Defaults to all four, or lcd_full alone when --sweep is given.
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Vec<Variant>,
        /// Number of seeds per group, counting up from --seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// `sigma=v1,v2,...` or `lr-lcd=v1,v2,...`.
        #[arg(long, value_parser = parse_sweep)]
        sweep: Option<Sweep>,
        #[arg(long, default_value = "runs/ablate")]
        out: PathBuf,
    },
    /// Generate a synthetic shape dataset.
    GenData {
        #[arg(long, value_delimiter = ',', value_parser = parse_family,
              default_value = "sphere,cube,cylinder,torus")]
        families: Vec<Family>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalFlags {
    /// Reconstruction checkpoint.
    #[arg(long, required_unless_present = "pred", conflicts_with = "pred")]
    ckpt_recon: Option<PathBuf>,
    /// Manifest of predicted clouds, paired with --data in order.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Only score the held-out split (every tenth cloud).
    #[arg(long)]
    eval_split: bool,
    /// Directory for eval.csv; printing only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also save the reconstructions as a dataset in this directory.
    #[arg(long, requires = "ckpt_recon")]
    save_pred: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long, default_value_t = 1e-8)]
    sigma_r: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_recon: f64,
    #[arg(long, default_value_t = 2e-3)]
    lr_lcd: f64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    eval_interval: usize,
    /// Dataset manifest; shapes are generated from the flags below otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_family,
          default_value = "sphere,cube,cylinder,torus")]
    families: Vec<Family>,
    /// Number of generated shapes (10% held out for evaluation).
    #[arg(long, default_value_t = 80)]
    shapes: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Record ms per step in the metrics CSV.
    #[arg(long)]
    timing: bool,
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iters,
            batch_size: self.batch,
            points: self.points,
            lr_recon: self.lr_recon,
            lr_lcd: self.lr_lcd,
            sigma: self.sigma,
            sigma_r: self.sigma_r,
            seed: self.seed,
            eval_interval: self.eval_interval,
            data: self.data.clone(),
            families: self.families.clone(),
            shape_count: self.shapes,
            noise_std: self.noise,
            record_timing: self.timing,
            exec: exec(self.sequential),
            ..TrainConfig::default()
        }
    }
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn parse_loss(s: &str) -> Result<LossMode, String> {
    s.parse().map_err(|e: lcd_core::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: lcd_core::Error| e.to_string())
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    s.parse().map_err(|e: lcd_core::Error| e.to_string())
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: lcd_core::Error| e.to_string())
}

/// Failure kinds mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<lcd_core::Error>() {
            Some(lcd_core::Error::InvalidArgument(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<lcd_core::Error> for Failure {
    fn from(e: lcd_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train {
            train,
            loss,
            no_siacon,
            no_log,
            out,
        } => {
            let config = TrainConfig {
                loss,
                no_siacon,
                no_log,
                ..train.config()
            };
            cmd_train(&config, &out)
        }
        Command::Eval(flags) => cmd_eval(flags),
        Command::Ablate {
            train,
            mut variants,
            seeds,
            sweep,
            out,
        } => {
            if variants.is_empty() {
                variants = if sweep.is_some() {
                    vec![Variant::LcdFull]
                } else {
                    Variant::ALL.to_vec()
                };
            }
            let plan = AblationPlan {
                base: train.config(),
                variants,
                seeds,
                sweep,
            };
            cmd_ablate(&plan, &out)
        }
        Command::GenData {
            families,
            count,
            points,
            noise,
            seed,
            out,
        } => cmd_gendata(&families, count, points, noise, seed, &out),
    }
}

fn print_record(r: &MetricsRecord) {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), format_sig6);
    println!(
        "iter {:>6}  cd {:<10} mcd {:<10} hd {:<10} l_r {:<10} l_lcd {:<10} ms/step {}",
        r.iteration,
        format_sig6(r.cd),
        format_sig6(r.mcd),
        format_sig6(r.hd),
        opt(r.l_r),
        opt(r.l_lcd),
        r.ms_per_step.map_or("-".to_string(), |m| format!("{m:.1}"))
    );
}

fn cmd_train(config: &TrainConfig, out: &Path) -> Result<(), Failure> {
    config.validate()?;
    let result = trainer::run_with(config, Some(out), print_record)?;
    println!(
        "trained on {} clouds, evaluated on {}; outputs in {}",
        result.train_size,
        result.eval_size,
        out.display()
    );
    Ok(())
}

fn render_eval(report: &EvalReport) -> String {
    let mut s = String::from("family,count,cd,mcd,hd\n");
    let mut line = |name: &str, n: usize, m: &trainer::Metrics| {
        s.push_str(&format!(
            "{name},{n},{},{},{}\n",
            format_sig6(m.cd),
            format_sig6(m.mcd),
            format_sig6(m.hd)
        ));
    };
    line("all", report.count, &report.mean);
    for (name, n, m) in &report.per_family {
        line(name, *n, m);
    }
    s
}

fn cmd_eval(flags: EvalFlags) -> Result<(), Failure> {
    let exec = exec(flags.sequential);
    let mut targets = dataio::load_dataset(&flags.data)?;
    let mut preds = match &flags.pred {
        Some(p) => Some(dataio::load_dataset(p)?),
        None => None,
    };
    if flags.eval_split {
        targets = targets.split_eval().1;
        preds = preds.map(|p| p.split_eval().1);
    }
    let report = match (flags.ckpt_recon, preds) {
        (Some(path), _) => {
            let recon = ReconParams::load(&path)?;
            let outputs = exec.map(&targets.clouds, |c| reconnet::reconstruct(c, &recon));
            let outputs = outputs.into_iter().collect::<lcd_core::Result<Vec<_>>>()?;
            if let Some(dir) = flags.save_pred {
                let saved = Dataset {
                    clouds: outputs.clone(),
                    ..targets.clone()
                };
                dataio::save_dataset(&saved, &dir)?;
            }
            trainer::evaluate_pairs(&outputs, &targets, exec)?
        }
        (None, Some(p)) => trainer::evaluate_pairs(&p.clouds, &targets, exec)?,
        (None, None) => unreachable!("clap requires one of --ckpt-recon and --pred"),
    };
    let table = render_eval(&report);
    print!("{table}");
    if let Some(dir) = flags.out {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("eval.csv");
        fs::write(&path, table).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_ablate(plan: &AblationPlan, out: &Path) -> Result<(), Failure> {
    plan.base.validate()?;
    let summary = trainer::ablate(plan, Some(out), |label, seed, r| {
        println!(
            "{label} seed {seed}: final cd {} mcd {} hd {}",
            format_sig6(r.cd),
            format_sig6(r.mcd),
            format_sig6(r.hd)
        );
    })?;
    print!("{}", summary.render());
    Ok(())
}

fn cmd_gendata(
    families: &[Family],
    count: usize,
    points: usize,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<(), Failure> {
    let data = dataio::gen_shapes(families, count, points, noise, seed)?;
    let manifest = dataio::save_dataset(&data, out)?;
    println!("wrote {} clouds, manifest {}", data.len(), manifest.display());
    Ok(())
}
