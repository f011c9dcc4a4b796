use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::dataio::Family;
use crate::error::{Error, Result};
use crate::lcdloss::LcdConfig;
use crate::par::Exec;
use crate::reconnet::ReconConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Plain Chamfer distance; the loss networks are never trained.
    Cd,
    /// Learnable Chamfer distance with adversarial updates.
    Lcd,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Cd => "cd",
            LossMode::Lcd => "lcd",
        }
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cd" => Ok(LossMode::Cd),
            "lcd" => Ok(LossMode::Lcd),
            _ => Err(Error::InvalidArgument(format!("unknown loss mode `{s}` (expected cd or lcd)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub points: usize,
    pub lr_recon: f64,
    pub lr_lcd: f64,
    pub sigma: f64,
    pub sigma_r: f64,
    pub loss: LossMode,
    /// Drop the joint feature from the scoring network input.
    pub no_siacon: bool,
    /// Train the loss networks on `-L_R` instead of `-ln(L_R + sigma_r)`.
    pub no_log: bool,
    pub seed: u64,
    pub eval_interval: usize,
    /// Dataset manifest; shapes are generated when absent.
    pub data: Option<PathBuf>,
    pub families: Vec<Family>,
    pub shape_count: usize,
    pub noise_std: f64,
    /// Write wall-clock step times into the metrics CSV. Off by default so
    /// that identical runs give byte-identical files.
    pub record_timing: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            points: 256,
            lr_recon: 1e-4,
            lr_lcd: 2e-3,
            sigma: 0.01,
            sigma_r: 1e-8,
            loss: LossMode::Lcd,
            no_siacon: false,
            no_log: false,
            seed: 0,
            eval_interval: 50,
            data: None,
            families: Family::ALL.to_vec(),
            shape_count: 80,
            noise_std: 0.01,
            record_timing: false,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if self.points < 8 {
            return bad(format!("points must be at least 8, got {}", self.points));
        }
        for (name, v) in [
            ("lr-recon", self.lr_recon),
            ("lr-lcd", self.lr_lcd),
            ("sigma", self.sigma),
            ("sigma-r", self.sigma_r),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.eval_interval < 1 {
            return bad("eval interval must be at least 1".into());
        }
        if self.data.is_none() {
            if self.families.is_empty() {
                return bad("no shape families selected".into());
            }
            if self.shape_count < 2 {
                return bad("need at least 2 shapes for a train/eval split".into());
            }
            if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
                return bad(format!("invalid noise level {}", self.noise_std));
            }
        }
        Ok(())
    }

    pub fn lcd_config(&self) -> LcdConfig {
        LcdConfig {
            use_siacon: !self.no_siacon,
            ..LcdConfig::default()
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig::with_points(self.points)
    }

    /// Every effective setting as `key = value` lines, followed by the
    /// command line that reproduces the run.
    pub fn echo(&self) -> String {
        let families: Vec<&str> = self.families.iter().map(|f| f.name()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("loss", self.loss.name().into());
        kv("iters", self.iterations.to_string());
        kv("batch", self.batch_size.to_string());
        kv("points", self.points.to_string());
        kv("lr_recon", format!("{:e}", self.lr_recon));
        kv("lr_lcd", format!("{:e}", self.lr_lcd));
        kv("sigma", format!("{:e}", self.sigma));
        kv("sigma_r", format!("{:e}", self.sigma_r));
        kv("no_siacon", self.no_siacon.to_string());
        kv("no_log", self.no_log.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv(
            "data",
            self.data
                .as_ref()
                .map_or("generated".to_string(), |p| p.display().to_string()),
        );
        kv("families", families.join(","));
        kv("shapes", self.shape_count.to_string());
        kv("noise", format!("{:e}", self.noise_std));
        kv("timing", self.record_timing.to_string());
        let _ = writeln!(s, "command = lcd train {}", self.flags().join(" "));
        s
    }

    /// Command-line flags reproducing this configuration.
    pub fn flags(&self) -> Vec<String> {
        let mut f = vec![
            format!("--loss {}", self.loss.name()),
            format!("--iters {}", self.iterations),
            format!("--batch {}", self.batch_size),
            format!("--points {}", self.points),
            format!("--lr-recon {:e}", self.lr_recon),
            format!("--lr-lcd {:e}", self.lr_lcd),
            format!("--sigma {:e}", self.sigma),
            format!("--sigma-r {:e}", self.sigma_r),
            format!("--seed {}", self.seed),
            format!("--eval-interval {}", self.eval_interval),
        ];
        match &self.data {
            Some(p) => f.push(format!("--data {}", p.display())),
            None => {
                let fam: Vec<&str> = self.families.iter().map(|x| x.name()).collect();
                f.push(format!("--families {}", fam.join(",")));
                f.push(format!("--shapes {}", self.shape_count));
                f.push(format!("--noise {:e}", self.noise_std));
            }
        }
        if self.no_siacon {
            f.push("--no-siacon".into());
        }
        if self.no_log {
            f.push("--no-log".into());
        }
        if self.record_timing {
            f.push("--timing".into());
        }
        f
    }
}
