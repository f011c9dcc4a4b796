//! Alternating optimisation of the reconstruction network and the loss
//! networks, evaluation, metrics logging and ablation runs.

mod ablate;
mod config;
pub mod csv;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablate::{ablate, median, AblationPlan, AblationSummary, Sweep, SweepParam, SummaryRow, Variant, SUMMARY_FILE, SUMMARY_HEADER};
pub use config::{LossMode, TrainConfig};

use crate::autodiff::{accumulate, zero_grads, GradMap, Tape};
use crate::checkpoint;
use crate::dataio::{self, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{chamfer, hausdorff, mcd, PointCloud};
use crate::lcdloss::{adversarial_loss, chamfer_on_tape, LcdGraph, LcdParams};
use crate::par::Exec;
use crate::reconnet::{self, ReconGraph, ReconParams};

/// One logged row. Row 0 is the evaluation before any update; the loss
/// fields are `None` there.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub cd: f64,
    pub mcd: f64,
    pub hd: f64,
    /// Weighted (or plain, in CD mode) loss of the reconstruction update.
    pub l_r: Option<f64>,
    /// `-ln(l_r_adv + sigma_r)`, or `-l_r_adv` without the log.
    pub l_lcd: Option<f64>,
    /// Weighted loss seen by the loss-network update.
    pub l_r_adv: Option<f64>,
    pub ms_per_step: Option<f64>,
}

/// Batch averages from one [`train_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub l_r: f64,
    pub l_r_adv: Option<f64>,
    pub l_lcd: Option<f64>,
    /// Plain Chamfer distance between inputs and reconstructions.
    pub batch_cd: f64,
}

/// Fresh parameters for both networks. The two draw from separate random
/// streams, so CD and LCD runs with one seed start from the same
/// reconstruction network.
pub fn init_params(config: &TrainConfig) -> Result<(LcdParams, ReconParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let recon = ReconParams::new(config.recon_config(), &mut rng)?;
    rng.set_stream(u64::MAX - 1);
    let lcd = LcdParams::new(config.lcd_config(), &mut rng)?;
    Ok((lcd, recon))
}

fn check_grads(grads: &GradMap, what: &str) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.all_finite()) {
        Some((name, _)) => Err(Error::NonFinite(format!("{what} gradient of `{name}`"))),
        None => Ok(()),
    }
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// One iteration: reconstruct the batch, update the loss networks to
/// maximise the weighted loss (LCD mode only), then update the
/// reconstruction network to minimise it. Per-sample graphs run under
/// `config.exec`; gradients are summed in batch order.
pub fn train_step(
    batch: &[PointCloud],
    lcd: &mut LcdParams,
    recon: &mut ReconParams,
    config: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let exec = config.exec;
    let b = batch.len() as f64;

    let mut l_r_adv = None;
    let mut l_lcd = None;
    if config.loss == LossMode::Lcd {
        let outputs = collect(exec.map(batch, |c| reconnet::reconstruct(c, recon)))?;
        let lcd_ref = &*lcd;
        let per_sample = collect(exec.map_range(batch.len(), |k| {
            let mut tape = Tape::new();
            let bound = lcd_ref.params.bind(&mut tape, true);
            let s_in = tape.constant(batch[k].to_tensor());
            let s_out = tape.constant(outputs[k].to_tensor());
            let vars = LcdGraph::new(lcd_ref, &bound).forward(&mut tape, s_in, s_out, config.sigma)?;
            let mut grads = tape.backward(vars.l_r)?;
            Ok((tape.value(vars.l_r).item(), bound.gradients(&tape, &mut grads)))
        }))?;
        let mean = per_sample.iter().map(|(l, _)| l).sum::<f64>() / b;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("weighted loss {mean} in loss-network update")));
        }
        // d/dθ of -ln(mean + σ_r) is -(1/(mean + σ_r)) * d mean/dθ.
        let (loss, outer) = if config.no_log {
            (-mean, -1.0)
        } else {
            (adversarial_loss(mean, config.sigma_r)?, -1.0 / (mean + config.sigma_r))
        };
        let mut grads = zero_grads(&lcd.params);
        for (_, g) in &per_sample {
            accumulate(&mut grads, g, outer / b);
        }
        check_grads(&grads, "loss-network")?;
        lcd.params.adam_update(&grads, config.lr_lcd)?;
        l_r_adv = Some(mean);
        l_lcd = Some(loss);
    }

    let lcd_ref = &*lcd;
    let recon_ref = &*recon;
    let per_sample = collect(exec.map_range(batch.len(), |k| {
        let mut tape = Tape::new();
        let rb = recon_ref.params.bind(&mut tape, true);
        let s_in = tape.constant(batch[k].to_tensor());
        let s_out = ReconGraph::new(recon_ref, &rb).reconstruct(&mut tape, s_in)?;
        let (loss, cd) = match config.loss {
            LossMode::Cd => {
                let l = chamfer_on_tape(&mut tape, s_in, s_out)?;
                (l, tape.value(l).item())
            }
            LossMode::Lcd => {
                let lb = lcd_ref.params.bind(&mut tape, false);
                let v = LcdGraph::new(lcd_ref, &lb).forward(&mut tape, s_in, s_out, config.sigma)?;
                let cd = 0.5 * (v.match_in.mean_distance() + v.match_out.mean_distance());
                (v.l_r, cd)
            }
        };
        let mut grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), cd, rb.gradients(&tape, &mut grads)))
    }))?;
    let l_r = per_sample.iter().map(|s| s.0).sum::<f64>() / b;
    if !l_r.is_finite() {
        return Err(Error::NonFinite(format!("reconstruction loss {l_r}")));
    }
    let mut grads = zero_grads(&recon.params);
    for (_, _, g) in &per_sample {
        accumulate(&mut grads, g, 1.0 / b);
    }
    check_grads(&grads, "reconstruction")?;
    recon.params.adam_update(&grads, config.lr_recon)?;

    Ok(StepStats {
        l_r,
        l_r_adv,
        l_lcd,
        batch_cd: per_sample.iter().map(|s| s.1).sum::<f64>() / b,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub cd: f64,
    pub mcd: f64,
    pub hd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean: Metrics,
    pub count: usize,
    /// Per family name (`unlabeled` for unknown), sorted by name.
    pub per_family: Vec<(String, usize, Metrics)>,
}

/// Metrics of each `(prediction, target)` pair, averaged overall and per
/// label.
pub fn evaluate_pairs(
    preds: &[PointCloud],
    targets: &Dataset,
    exec: Exec,
) -> Result<EvalReport> {
    if preds.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let each = collect(exec.map_range(preds.len(), |k| {
        let (p, t) = (&preds[k], &targets.clouds[k]);
        Ok(Metrics {
            cd: chamfer(p, t)?,
            mcd: mcd(p, t)?,
            hd: hausdorff(p, t)?,
        })
    }))?;
    let average = |ms: &[&Metrics]| {
        let n = ms.len() as f64;
        Metrics {
            cd: ms.iter().map(|m| m.cd).sum::<f64>() / n,
            mcd: ms.iter().map(|m| m.mcd).sum::<f64>() / n,
            hd: ms.iter().map(|m| m.hd).sum::<f64>() / n,
        }
    };
    let mut groups: std::collections::BTreeMap<String, Vec<&Metrics>> = Default::default();
    for (m, label) in each.iter().zip(&targets.labels) {
        let key = label.map_or("unlabeled".to_string(), |f| f.name().to_string());
        groups.entry(key).or_default().push(m);
    }
    Ok(EvalReport {
        mean: average(&each.iter().collect::<Vec<_>>()),
        count: each.len(),
        per_family: groups
            .into_iter()
            .map(|(k, v)| {
                let n = v.len();
                (k, n, average(&v))
            })
            .collect(),
    })
}

/// Reconstructs every cloud of `data` and scores it against its input.
pub fn evaluate(recon: &ReconParams, data: &Dataset, exec: Exec) -> Result<EvalReport> {
    let preds = collect(exec.map(&data.clouds, |c| reconnet::reconstruct(c, recon)))?;
    evaluate_pairs(&preds, data, exec)
}

/// Dataset named by the config, or generated from it.
pub fn load_data(config: &TrainConfig) -> Result<Dataset> {
    match &config.data {
        Some(manifest) => dataio::load_dataset(manifest),
        None => dataio::gen_shapes(
            &config.families,
            config.shape_count,
            config.points,
            config.noise_std,
            config.seed,
        ),
    }
}

/// Epoch-wise shuffled sampling of training indices.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX - 2);
        Self {
            rng,
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub lcd: LcdParams,
    pub recon: ReconParams,
    pub final_eval: EvalReport,
    pub train_size: usize,
    pub eval_size: usize,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const RECON_CKPT: &str = "recon.ckpt";
pub const LCD_CKPT: &str = "lcd.ckpt";
pub const TIMING_FILE: &str = "timing.txt";

pub fn run(config: &TrainConfig, out: Option<&Path>) -> Result<RunResult> {
    run_with(config, out, |_| {})
}

/// Full training run. With `out`, writes the config echo, the metrics CSV,
/// per-eval timings and the final checkpoints there. `on_record` sees each
/// row as it is produced.
pub fn run_with(
    config: &TrainConfig,
    out: Option<&Path>,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<RunResult> {
    config.validate()?;
    let (train, eval) = load_data(config)?.split_eval();
    if train.is_empty() || eval.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 clouds for a train/eval split, got {}",
            train.len() + eval.len()
        )));
    }
    let (mut lcd, mut recon) = init_params(config)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, config.echo()).map_err(|e| Error::io(&path, e))?;
    }

    let exec = config.exec;
    let first = evaluate(&recon, &eval, exec)?.mean;
    let mut records = vec![MetricsRecord {
        iteration: 0,
        cd: first.cd,
        mcd: first.mcd,
        hd: first.hd,
        l_r: None,
        l_lcd: None,
        l_r_adv: None,
        ms_per_step: None,
    }];
    on_record(&records[0]);

    let mut sampler = BatchSampler::new(train.len(), config.seed);
    let mut elapsed = Duration::ZERO;
    let mut since_eval = 0u32;
    let mut final_eval = None;
    for it in 1..=config.iterations {
        let ids = sampler.next(config.batch_size);
        let batch: Vec<PointCloud> = ids.iter().map(|&i| train.clouds[i].clone()).collect();
        let start = Instant::now();
        let stats = match train_step(&batch, &mut lcd, &mut recon, config) {
            Ok(s) => s,
            Err(e @ (Error::NonFinite(_) | Error::Domain(_))) => {
                let dump = match out {
                    Some(dir) => Some(dump_diagnostic(dir, &batch, &ids, &lcd, &recon)?),
                    None => None,
                };
                return Err(diverged(it, &e, &lcd, &recon, dump));
            }
            Err(e) => return Err(e),
        };
        elapsed += start.elapsed();
        since_eval += 1;
        if it % config.eval_interval == 0 || it == config.iterations {
            let report = evaluate(&recon, &eval, exec)?;
            let rec = MetricsRecord {
                iteration: it,
                cd: report.mean.cd,
                mcd: report.mean.mcd,
                hd: report.mean.hd,
                l_r: Some(stats.l_r),
                l_lcd: stats.l_lcd,
                l_r_adv: stats.l_r_adv,
                ms_per_step: Some(elapsed.as_secs_f64() * 1e3 / since_eval as f64),
            };
            on_record(&rec);
            records.push(rec);
            elapsed = Duration::ZERO;
            since_eval = 0;
            if it == config.iterations {
                final_eval = Some(report);
            }
        }
    }

    if let Some(dir) = out {
        csv::write(&dir.join(METRICS_FILE), &records, config.record_timing)?;
        let timing: String = records
            .iter()
            .filter_map(|r| r.ms_per_step.map(|ms| format!("{} {ms:.3}\n", r.iteration)))
            .collect();
        let path = dir.join(TIMING_FILE);
        fs::write(&path, timing).map_err(|e| Error::io(&path, e))?;
        checkpoint::save(&recon.params, &dir.join(RECON_CKPT))?;
        if config.loss == LossMode::Lcd {
            checkpoint::save(&lcd.params, &dir.join(LCD_CKPT))?;
        }
    }
    Ok(RunResult {
        records,
        lcd,
        recon,
        final_eval: final_eval.expect("last iteration is always evaluated"),
        train_size: train.len(),
        eval_size: eval.len(),
    })
}

fn diverged(
    iteration: usize,
    cause: &Error,
    lcd: &LcdParams,
    recon: &ReconParams,
    dump: Option<PathBuf>,
) -> Error {
    let norms = |p: &crate::autodiff::ParamSet| {
        p.norms()
            .iter()
            .map(|(n, v)| format!("{n}={v:.4e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut detail = format!(
        "{cause}\n  recon norms: {}\n  lcd norms: {}",
        norms(&recon.params),
        norms(&lcd.params)
    );
    if let Some(d) = dump {
        detail.push_str(&format!("\n  batch written to {}", d.display()));
    }
    Error::Diverged { iteration, detail }
}

fn dump_diagnostic(
    dir: &Path,
    batch: &[PointCloud],
    ids: &[usize],
    lcd: &LcdParams,
    recon: &ReconParams,
) -> Result<PathBuf> {
    let dump = dir.join("diverged");
    fs::create_dir_all(&dump).map_err(|e| Error::io(&dump, e))?;
    for (k, (c, id)) in batch.iter().zip(ids).enumerate() {
        dataio::save_xyz(c, &dump.join(format!("batch{k:02}_train{id:04}.xyz")))?;
    }
    let mut norms = String::new();
    for (n, v) in recon.params.norms().into_iter().chain(lcd.params.norms()) {
        norms.push_str(&format!("{n} {v:e}\n"));
    }
    let path = dump.join("norms.txt");
    fs::write(&path, norms).map_err(|e| Error::io(&path, e))?;
    Ok(dump)
}
