//! Acceptance checks, one line per criterion.
//!
//! Criteria 7 and 8 train many networks. By default they use the reduced
//! budget in [`comparison_budget`]; set `LCD_ACCEPTANCE_FULL=1` to run them
//! at the full desk configuration instead (over an hour on one core).
//! Trend checks that are statistical at desk scale print `REGRESSION`
//! rather than failing the suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lcd_core::autodiff::{grad_check, grad_check_directional, Bound, Tensor};
use lcd_core::geometry::{chamfer, hausdorff, nn_match, NnMethod, PointCloud};
use lcd_core::lcdloss::{lcd_forward, normalize_weights, LcdConfig, LcdGraph, LcdParams};
use lcd_core::trainer::{
    self, ablate, csv, AblationPlan, AblationSummary, MetricsRecord, Sweep, TrainConfig, Variant,
};

enum Verdict {
    Pass,
    Fail,
    /// Statistical trend not reproduced; reported, not fatal.
    Regression,
}

struct Report {
    lines: Vec<(Verdict, String, String)>,
}

impl Report {
    fn record(&mut self, verdict: Verdict, name: &str, detail: String) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Regression => "REGRESSION",
        };
        println!("{tag:<10} {name}: {detail}");
        self.lines.push((verdict, name.to_string(), detail));
    }

    fn check(&mut self, ok: bool, name: &str, detail: String) {
        self.record(if ok { Verdict::Pass } else { Verdict::Fail }, name, detail);
    }

    fn trend(&mut self, ok: bool, name: &str, detail: String) {
        self.record(if ok { Verdict::Pass } else { Verdict::Regression }, name, detail);
    }
}

fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect(),
    )
    .unwrap()
}

/// Brute-force nearest neighbour: lowest index among exact ties.
fn oracle_nn(q: &[f64; 3], target: &[[f64; 3]]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in target.iter().enumerate() {
        let (dx, dy, dz) = (q[0] - p[0], q[1] - p[1], q[2] - p[2]);
        let d = dx * dx + dy * dy + dz * dz;
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

fn oracle_chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    let dir = |x: &PointCloud, y: &PointCloud| {
        x.points().iter().map(|q| oracle_nn(q, y.points()).1).sum::<f64>() / x.len() as f64
    };
    0.5 * (dir(a, b) + dir(b, a))
}

fn criterion_1(r: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sigmas = [0.001, 0.01, 0.1, 1.0];
    let (mut worst_sum, mut min_w) = (0.0f64, f64::INFINITY);
    for k in 0..1000 {
        let n = rng.random_range(2..=2048);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..=5.0)).collect();
        let w = normalize_weights(&scores, sigmas[k % 4]).unwrap();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        min_w = w.iter().copied().fold(min_w, f64::min);
    }
    let t = start.elapsed();
    r.check(
        worst_sum < 1e-9 && min_w > 0.0 && t < Duration::from_secs(5),
        "1 weight normalization",
        format!("max |sum W - 1| = {worst_sum:.2e} (< 1e-9), min W = {min_w:.3e} (> 0), {:.2} s (< 5 s)", t.as_secs_f64()),
    );
}

fn criterion_2(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for k in 0..100 {
        // Fresh default-width networks with the scoring output layer zeroed.
        let mut params = LcdParams::new(LcdConfig::default(), &mut ChaCha8Rng::seed_from_u64(k)).unwrap();
        zero_score_output(&mut params);
        let n = rng.random_range(1..=256);
        let (a, b) = (random_cloud(&mut rng, n), random_cloud(&mut rng, n));
        let out = lcd_forward(&a, &b, &params, 0.01).unwrap();
        worst = worst.max((n as f64 * out.l_r - oracle_chamfer(&a, &b)).abs());
    }
    r.check(
        worst < 1e-9,
        "2 uniform-weight equivalence",
        format!("max |n L_R - chamfer| = {worst:.2e} over 100 pairs (< 1e-9)"),
    );
}

fn zero_score_output(p: &mut LcdParams) {
    let names: Vec<String> = p.params.names().filter(|n| n.starts_with("g.")).map(str::to_string).collect();
    let last = names.iter().map(|n| n.split('.').nth(1).unwrap().parse::<usize>().unwrap()).max().unwrap();
    for suffix in ["w", "b"] {
        let name = format!("g.{last}.{suffix}");
        let shape = p.params.get(&name).unwrap().shape().to_vec();
        p.params.set(&name, Tensor::zeros(&shape)).unwrap();
    }
}

/// Small networks with a random scoring output layer, so every parameter
/// carries gradient.
fn gradient_params(seed: u64, config: LcdConfig) -> LcdParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LcdParams::new(config, &mut rng).unwrap();
    let last = p
        .params
        .names()
        .filter(|n| n.starts_with("g.") && n.ends_with(".w"))
        .max()
        .unwrap()
        .to_string();
    let shape = p.params.get(&last).unwrap().shape().to_vec();
    let data = (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
    p.params.set(&last, Tensor::new(shape, data).unwrap()).unwrap();
    p
}

/// L_R as a function of `[S_o, theta_L...]` for the gradient checks.
fn weighted_loss_fn<'a>(
    params: &'a LcdParams,
    names: &'a [String],
    s_in: &'a Tensor,
) -> impl Fn(&mut lcd_core::autodiff::Tape, &[lcd_core::autodiff::Var]) -> lcd_core::Result<lcd_core::autodiff::Var> + 'a {
    move |tape, vars| {
        let bound = Bound::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
        let si = tape.constant(s_in.clone());
        Ok(LcdGraph::new(params, &bound).forward(tape, si, vars[0], 0.01)?.l_r)
    }
}

fn criterion_3(r: &mut Report) {
    let start = Instant::now();
    let small = LcdConfig {
        feature_dims: vec![8, 16],
        score_hidden: vec![16, 8],
        use_siacon: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut errors = Vec::new();
    for k in 0..20 {
        let params = gradient_params(100 + k, small.clone());
        let names: Vec<String> = params.params.names().map(str::to_string).collect();
        let s_in = random_cloud(&mut rng, 16).to_tensor();
        let mut inputs = vec![random_cloud(&mut rng, 16).to_tensor()];
        inputs.extend(names.iter().map(|n| params.params.get(n).unwrap().clone()));
        let rep = grad_check(weighted_loss_fn(&params, &names, &s_in), &inputs, 1e-4, 1e-4);
        if let Some(e) = rep.error {
            errors.push(e);
        }
        worst = worst.max(rep.max_rel_error);
        checked += rep.checked;
        skipped += rep.skipped;
    }
    let t = start.elapsed();
    r.check(
        errors.is_empty() && worst < 1e-4 && t < Duration::from_secs(60),
        "3 gradient fidelity",
        format!(
            "max rel error {worst:.2e} (< 1e-4) over {checked} entries of S_o and all loss-network parameters, \
             {skipped} switch points skipped, 20 instances, {:.1} s (< 60 s){}",
            t.as_secs_f64(),
            if errors.is_empty() { String::new() } else { format!(", errors: {errors:?}") }
        ),
    );

    // Same check at full network widths, along random directions.
    let start = Instant::now();
    let (mut worst, mut checked) = (0.0f64, 0);
    for k in 0..5 {
        let params = gradient_params(200 + k, LcdConfig::default());
        let names: Vec<String> = params.params.names().map(str::to_string).collect();
        let s_in = random_cloud(&mut rng, 16).to_tensor();
        let mut inputs = vec![random_cloud(&mut rng, 16).to_tensor()];
        inputs.extend(names.iter().map(|n| params.params.get(n).unwrap().clone()));
        let rep = grad_check_directional(weighted_loss_fn(&params, &names, &s_in), &inputs, 1e-4, 1e-4, 8, &mut rng);
        worst = worst.max(rep.max_rel_error);
        checked += rep.checked;
    }
    r.check(
        worst < 1e-4 && checked > 0,
        "3 gradient fidelity (default widths, directional)",
        format!("max rel error {worst:.2e} (< 1e-4) over {checked} random directions, {:.1} s", start.elapsed().as_secs_f64()),
    );
}

fn criterion_4(r: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for k in 0..100 {
        let (n, m) = (rng.random_range(1..=128), rng.random_range(1..=128));
        let (mut a, b) = (random_cloud(&mut rng, n), random_cloud(&mut rng, m));
        if k % 4 == 0 {
            // Quantised coordinates to provoke exact ties.
            let q = |c: &PointCloud| PointCloud::new(c.points().iter().map(|p| p.map(|x| (x * 2.0).round() / 2.0)).collect()).unwrap();
            a = q(&a);
            let b = q(&b);
            mismatches += compare_matching(&a, &b);
            continue;
        }
        mismatches += compare_matching(&a, &b);
    }
    r.check(
        mismatches == 0,
        "4 matching oracle",
        format!("{mismatches} index or distance mismatches against brute force over 100 pairs (n <= 128)"),
    );
}

fn compare_matching(a: &PointCloud, b: &PointCloud) -> usize {
    let tree = nn_match(a, b, NnMethod::KdTree).unwrap();
    let brute = nn_match(a, b, NnMethod::Brute).unwrap();
    a.points()
        .iter()
        .enumerate()
        .filter(|&(i, q)| {
            let (j, d) = oracle_nn(q, b.points());
            tree.indices[i] != j || tree.distances[i] != d || brute.indices[i] != j || brute.distances[i] != d
        })
        .count()
}

fn criterion_5(r: &mut Report) {
    let a = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    let b = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
    let (cd, hd) = (chamfer(&a, &b).unwrap(), hausdorff(&a, &b).unwrap());
    r.check(
        cd == 0.25 && hd == 1.0,
        "5 hand-computed metrics",
        format!("chamfer = {cd} (expected 0.25), hausdorff = {hd} (expected 1)"),
    );
}

fn out_root() -> PathBuf {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&root).unwrap();
    root
}

fn at(records: &[MetricsRecord], iteration: usize) -> Option<&MetricsRecord> {
    records.iter().find(|m| m.iteration == iteration)
}

fn criterion_6_and_7a(r: &mut Report) {
    let config = TrainConfig::default();
    let start = Instant::now();
    let run = trainer::run(&config, Some(&out_root().join("desk"))).unwrap();
    let t = start.elapsed();
    let first = run.records[0].cd;
    let last = run.records.last().unwrap().cd;
    r.check(
        last < 0.2 * first && t < Duration::from_secs(15 * 60),
        "6 training smoke",
        format!(
            "default config ({} loss, {} iterations): eval chamfer {} -> {} = {:.1}% of step 0 (< 20%), {:.1} min (< 15 min)",
            config.loss.name(),
            config.iterations,
            csv::format_sig6(first),
            csv::format_sig6(last),
            100.0 * last / first,
            t.as_secs_f64() / 60.0
        ),
    );
    let c200 = at(&run.records, 200).map(|m| m.cd).unwrap_or(f64::NAN);
    r.check(
        c200 < 0.5 * first,
        "7 convergence at iteration 200",
        format!("LCD eval chamfer at 200 = {} = {:.1}% of step 0 (< 50%)", csv::format_sig6(c200), 100.0 * c200 / first),
    );
}

/// Training budget shared by every run of criteria 7 and 8.
fn comparison_budget() -> TrainConfig {
    if std::env::var_os("LCD_ACCEPTANCE_FULL").is_some() {
        return TrainConfig::default();
    }
    TrainConfig {
        iterations: 400,
        batch_size: 4,
        points: 128,
        eval_interval: 100,
        ..TrainConfig::default()
    }
}

fn budget_text(c: &TrainConfig) -> String {
    format!("{} iterations, batch {}, {} points", c.iterations, c.batch_size, c.points)
}

fn group(s: &AblationSummary, v: Variant) -> (usize, &Vec<MetricsRecord>) {
    let i = s.rows.iter().position(|r| r.variant == v).unwrap();
    (i, &s.finals[i])
}

fn criterion_7b(r: &mut Report) -> AblationSummary {
    let base = comparison_budget();
    let plan = AblationPlan {
        base: base.clone(),
        variants: vec![Variant::Cd, Variant::LcdFull],
        seeds: 5,
        sweep: None,
    };
    let start = Instant::now();
    let summary = ablate(&plan, Some(&out_root().join("compare")), |_, _, _| {}).unwrap();
    let (ci, _) = group(&summary, Variant::Cd);
    let (li, _) = group(&summary, Variant::LcdFull);
    let (cd, lcd) = (summary.rows[ci].cd, summary.rows[li].cd);
    r.trend(
        lcd <= 1.15 * cd,
        "7 LCD vs CD final chamfer",
        format!(
            "5-seed medians: lcd_full {} vs cd {} (ratio {:.3}, limit 1.15); {}; {:.1} min",
            csv::format_sig6(lcd),
            csv::format_sig6(cd),
            lcd / cd,
            budget_text(&base),
            start.elapsed().as_secs_f64() / 60.0
        ),
    );
    summary
}

fn logged(x: f64) -> f64 {
    csv::format_sig6(x).parse().unwrap()
}

fn criterion_8(r: &mut Report, compare: &AblationSummary) {
    let base = comparison_budget();
    let root = out_root().join("ablation");
    let start = Instant::now();
    // lcd_full seeds 0..3 were already trained for criterion 7 with this budget.
    let no_log = ablate(
        &AblationPlan {
            base: base.clone(),
            variants: vec![Variant::LcdNoLog],
            seeds: 3,
            sweep: None,
        },
        Some(&root.join("no_log")),
        |_, _, _| {},
    )
    .unwrap();
    let (_, full_runs) = group(compare, Variant::LcdFull);
    let full = trainer::median(&full_runs[..3].iter().map(|m| logged(m.cd)).collect::<Vec<_>>());
    let nolog = no_log.rows[0].cd;
    r.trend(
        full <= nolog,
        "8 ablation ordering",
        format!(
            "3-seed medians: lcd_full {} <= lcd_no_log {}",
            csv::format_sig6(full),
            csv::format_sig6(nolog)
        ),
    );

    let mut emitted = true;
    for (key, values) in [("sigma", "0.001,0.01,0.1,1"), ("lr-lcd", "2e-4,2e-3,2e-2")] {
        let sweep: Sweep = format!("{key}={values}").parse().unwrap();
        let n = sweep.values.len();
        let dir = root.join(format!("sweep_{key}"));
        let s = ablate(
            &AblationPlan {
                base: base.clone(),
                variants: vec![Variant::LcdFull],
                seeds: 1,
                sweep: Some(sweep),
            },
            Some(&dir),
            |_, _, _| {},
        )
        .unwrap();
        let files_ok = std::fs::read_to_string(dir.join("summary.csv"))
            .map(|t| t.lines().count() == n + 1)
            .unwrap_or(false)
            && s.rows.iter().all(|row| row.dir.join("seed0").join(trainer::METRICS_FILE).exists());
        emitted &= files_ok;
        let cds: Vec<f64> = s.rows.iter().map(|row| row.cd).collect();
        let best = (0..n).min_by(|&a, &b| cds[a].total_cmp(&cds[b])).unwrap();
        let table: Vec<String> = s
            .rows
            .iter()
            .map(|row| {
                let x = if key == "sigma" { row.sigma } else { row.lr_lcd };
                format!("{}: {}", csv::format_sig6(x), csv::format_sig6(row.cd))
            })
            .collect();
        r.trend(
            best != 0 && best != n - 1,
            &format!("8 {key} sensitivity (interior minimum)"),
            format!("final chamfer by {key}: {}", table.join(", ")),
        );
    }
    r.check(
        emitted,
        "8 sweep CSVs emitted",
        format!(
            "per-run metrics and summary tables under {} ({}; {:.1} min)",
            root.display(),
            budget_text(&base),
            start.elapsed().as_secs_f64() / 60.0
        ),
    );
}

fn criterion_9(r: &mut Report) {
    let root = out_root().join("determinism");
    let config = TrainConfig {
        iterations: 60,
        eval_interval: 20,
        points: 64,
        ..TrainConfig::default()
    };
    let read = |d: &str| {
        trainer::run(&config, Some(&root.join(d))).unwrap();
        std::fs::read(root.join(d).join(trainer::METRICS_FILE)).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    r.check(
        a == b && !a.is_empty(),
        "9 determinism",
        format!("two identical runs: metric CSVs of {} bytes, byte-identical = {}", a.len(), a == b),
    );
}

fn main() -> ExitCode {
    let mut r = Report { lines: Vec::new() };
    let start = Instant::now();
    // The wall-clock criterion goes first, in a fresh process.
    criterion_6_and_7a(&mut r);
    criterion_1(&mut r);
    criterion_2(&mut r);
    criterion_3(&mut r);
    criterion_4(&mut r);
    criterion_5(&mut r);
    criterion_9(&mut r);
    let compare = criterion_7b(&mut r);
    criterion_8(&mut r, &compare);

    let count = |f: fn(&Verdict) -> bool| r.lines.iter().filter(|l| f(&l.0)).count();
    let failed = count(|v| matches!(v, Verdict::Fail));
    println!(
        "acceptance: {} passed, {} failed, {} regressions reported, {:.1} min",
        count(|v| matches!(v, Verdict::Pass)),
        failed,
        count(|v| matches!(v, Verdict::Regression)),
        start.elapsed().as_secs_f64() / 60.0
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
