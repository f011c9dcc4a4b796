//! Repeated runs over loss variants, seeds and an optional single-parameter
//! sweep, summarised by per-group medians of the final metrics.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::csv::format_sig6;
use super::{run, LossMode, MetricsRecord, TrainConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Cd,
    LcdNoSiacon,
    LcdNoLog,
    LcdFull,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cd, Variant::LcdNoSiacon, Variant::LcdNoLog, Variant::LcdFull];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cd => "cd",
            Variant::LcdNoSiacon => "lcd_no_siacon",
            Variant::LcdNoLog => "lcd_no_log",
            Variant::LcdFull => "lcd_full",
        }
    }

    pub fn apply(self, config: &mut TrainConfig) {
        let (loss, no_siacon, no_log) = match self {
            Variant::Cd => (LossMode::Cd, false, false),
            Variant::LcdNoSiacon => (LossMode::Lcd, true, false),
            Variant::LcdNoLog => (LossMode::Lcd, false, true),
            Variant::LcdFull => (LossMode::Lcd, false, false),
        };
        config.loss = loss;
        config.no_siacon = no_siacon;
        config.no_log = no_log;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Sigma,
    LrLcd,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Sigma => "sigma",
            SweepParam::LrLcd => "lr-lcd",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

/// `sigma=0.001,0.01` or `lr-lcd=1e-3,2e-3`.
impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: String| Error::InvalidArgument(m);
        let (key, list) = s
            .split_once('=')
            .ok_or_else(|| bad(format!("sweep `{s}` is not of the form name=v1,v2,...")))?;
        let param = match key.trim() {
            "sigma" => SweepParam::Sigma,
            "lr-lcd" | "lr_lcd" => SweepParam::LrLcd,
            k => return Err(bad(format!("cannot sweep `{k}` (expected sigma or lr-lcd)"))),
        };
        let values = list
            .split(',')
            .map(|v| {
                let x: f64 = v.trim().parse().map_err(|_| bad(format!("bad sweep value `{v}`")))?;
                if x > 0.0 && x.is_finite() {
                    Ok(x)
                } else {
                    Err(bad(format!("sweep values must be positive, got {x}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sweep { param, values })
    }
}

#[derive(Clone, Debug)]
pub struct AblationPlan {
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    /// Runs per group use seeds `base.seed .. base.seed + seeds`.
    pub seeds: usize,
    /// Applied to the LCD variants; the CD variant ignores both swept
    /// parameters and runs once per seed.
    pub sweep: Option<Sweep>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub sigma: f64,
    pub lr_lcd: f64,
    pub seeds: usize,
    /// Medians over seeds of the final logged values.
    pub cd: f64,
    pub mcd: f64,
    pub hd: f64,
    pub dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct AblationSummary {
    pub rows: Vec<SummaryRow>,
    /// Final logged row of each run, grouped like `rows`.
    pub finals: Vec<Vec<MetricsRecord>>,
}

pub const SUMMARY_HEADER: &str = "variant,sigma,lr_lcd,seeds,cd,mcd,hd";
pub const SUMMARY_FILE: &str = "summary.csv";

impl AblationSummary {
    pub fn render(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant,
                format_sig6(r.sigma),
                format_sig6(r.lr_lcd),
                r.seeds,
                format_sig6(r.cd),
                format_sig6(r.mcd),
                format_sig6(r.hd)
            ));
        }
        s
    }
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    assert!(n > 0, "median of nothing");
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Value as stored in a metrics CSV.
fn logged(x: f64) -> f64 {
    format_sig6(x).parse().expect("formatted number parses")
}

struct Group {
    variant: Variant,
    config: TrainConfig,
    label: String,
}

fn groups(plan: &AblationPlan) -> Vec<Group> {
    let mut out = Vec::new();
    for &variant in &plan.variants {
        let mut config = plan.base.clone();
        variant.apply(&mut config);
        match (&plan.sweep, variant) {
            (Some(sweep), v) if v != Variant::Cd => {
                for &x in &sweep.values {
                    let mut c = config.clone();
                    match sweep.param {
                        SweepParam::Sigma => c.sigma = x,
                        SweepParam::LrLcd => c.lr_lcd = x,
                    }
                    out.push(Group {
                        variant,
                        config: c,
                        label: format!("{}_{}={}", variant, sweep.param.name(), format_sig6(x)),
                    });
                }
            }
            _ => out.push(Group {
                variant,
                config,
                label: variant.name().to_string(),
            }),
        }
    }
    out
}

/// Runs every group for every seed, one run per worker under
/// `plan.base.exec`. With `out`, each run writes to `out/<group>/seed<k>/`
/// and the summary goes to `out/summary.csv`.
pub fn ablate(
    plan: &AblationPlan,
    out: Option<&Path>,
    progress: impl Fn(&str, u64, &MetricsRecord) + Sync,
) -> Result<AblationSummary> {
    if plan.variants.is_empty() {
        return Err(Error::InvalidArgument("no variants to run".into()));
    }
    if plan.seeds == 0 {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let groups = groups(plan);
    let jobs: Vec<(usize, usize)> = (0..groups.len())
        .flat_map(|g| (0..plan.seeds).map(move |k| (g, k)))
        .collect();
    let finals = plan.base.exec.map(&jobs, |&(g, k)| {
        let group = &groups[g];
        let mut c = group.config.clone();
        c.seed = plan.base.seed + k as u64;
        let dir = out.map(|d| d.join(&group.label).join(format!("seed{k}")));
        let r = run(&c, dir.as_deref())?;
        let fin = r.records.last().expect("at least one row").clone();
        progress(&group.label, c.seed, &fin);
        Ok(fin)
    });
    let finals = finals.into_iter().collect::<Result<Vec<_>>>()?;
    let finals: Vec<Vec<MetricsRecord>> = finals.chunks(plan.seeds).map(<[_]>::to_vec).collect();

    let rows = groups
        .iter()
        .zip(&finals)
        .map(|(g, last)| {
            let med = |f: fn(&MetricsRecord) -> f64| {
                median(&last.iter().map(|r| logged(f(r))).collect::<Vec<_>>())
            };
            SummaryRow {
                variant: g.variant,
                sigma: g.config.sigma,
                lr_lcd: g.config.lr_lcd,
                seeds: plan.seeds,
                cd: med(|r| r.cd),
                mcd: med(|r| r.mcd),
                hd: med(|r| r.hd),
                dir: out.map(|d| d.join(&g.label)).unwrap_or_default(),
            }
        })
        .collect();
    let summary = AblationSummary { rows, finals };
    if let Some(d) = out {
        let path = d.join(SUMMARY_FILE);
        fs::write(&path, summary.render()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(summary)
}
