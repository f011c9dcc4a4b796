//! Learnable Chamfer Distance.
//!
//! Two PointNet-style extractors and a per-point scoring MLP turn a pair of
//! clouds into one weight per matching distance:
//!
//! - `f1` is applied to both clouds with shared parameters; the two pooled
//!   features are concatenated into the joint feature `F_io`.
//! - `f2` gives each cloud its own pooled feature.
//! - `g` scores every point from `[xyz, f2(S), F_io]`, where the two global
//!   parts are repeated for every point.
//!
//! Scores become weights through `W = (sigma + exp(-F^2)) / (n sigma + sum exp(-F^2))`
//! and weight the nearest-neighbour distances of the Chamfer distance.
//!
//! Because the global part of `g`'s input is identical for every point, the
//! first layer of `g` is evaluated as `xyz * W_xyz + (global * W_global + b)`,
//! which equals the product with the concatenated input.

use rand::Rng;

use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{nn_match, Matching, NnMethod, PointCloud};
use crate::nn::{xavier_uniform, Mlp};

#[derive(Clone, Debug, PartialEq)]
pub struct LcdConfig {
    /// Per-point widths of `f1` and `f2`; the last is the pooled feature size.
    pub feature_dims: Vec<usize>,
    /// Hidden widths of `g` (its output is one score per point).
    pub score_hidden: Vec<usize>,
    /// Feed `F_io` into `g`. Disabling it also drops `f1`.
    pub use_siacon: bool,
}

impl Default for LcdConfig {
    fn default() -> Self {
        Self {
            feature_dims: vec![64, 128, 256],
            score_hidden: vec![256, 64],
            use_siacon: true,
        }
    }
}

impl LcdConfig {
    pub fn feature_dim(&self) -> usize {
        *self.feature_dims.last().expect("feature_dims nonempty")
    }

    /// Width of the concatenated input of `g`.
    pub fn score_input_dim(&self) -> usize {
        let c = self.feature_dim();
        3 + c + if self.use_siacon { 2 * c } else { 0 }
    }

    fn extractor(&self, prefix: &str) -> Mlp {
        let mut dims = vec![3];
        dims.extend(&self.feature_dims);
        Mlp::new(prefix, &dims, true)
    }

    fn score_tail(&self) -> Mlp {
        let mut dims = self.score_hidden.clone();
        dims.push(1);
        Mlp::starting_at("g", &dims, 1, false)
    }
}

/// Trainable parameters of `f1`, `f2` and `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct LcdParams {
    config: LcdConfig,
    pub params: ParamSet,
}

const G_IN_W: &str = "g.0.w";
const G_IN_B: &str = "g.0.b";
const SCORE_BIAS: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl LcdParams {
    /// Xavier-initialised networks. `g`'s output layer has zero weights and a
    /// constant bias, so every score starts equal and the weights start
    /// uniform. The bias sits at 1/sqrt(2), where exp(-F^2) is steepest; at
    /// F = 0 its derivative vanishes and the loss networks would never move.
    pub fn new<R: Rng>(config: LcdConfig, rng: &mut R) -> Result<Self> {
        if config.feature_dims.is_empty() || config.score_hidden.is_empty() {
            return Err(Error::InvalidArgument(
                "LCD networks need at least one feature and one hidden layer".into(),
            ));
        }
        let mut params = ParamSet::new();
        if config.use_siacon {
            config.extractor("f1").init(&mut params, rng, false)?;
        }
        config.extractor("f2").init(&mut params, rng, false)?;
        let h0 = config.score_hidden[0];
        params.insert(G_IN_W, xavier_uniform(rng, config.score_input_dim(), h0))?;
        params.insert(G_IN_B, Tensor::zeros(&[h0]))?;
        let tail = config.score_tail();
        tail.init(&mut params, rng, true)?;
        params.set(&tail.bias_name(tail.layers() - 1), Tensor::full(&[1], SCORE_BIAS))?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LcdConfig {
        &self.config
    }
}

/// Tape handles for one evaluation of the weighted loss.
#[derive(Debug)]
pub struct LcdVars {
    pub l_r: Var,
    pub f_io: Option<Var>,
    pub scores_in: Var,
    pub scores_out: Var,
    pub weights_in: Var,
    pub weights_out: Var,
    /// Input -> reconstruction matching.
    pub match_in: Matching,
    /// Reconstruction -> input matching.
    pub match_out: Matching,
}

/// Recording of the loss networks on a tape, given already bound parameters.
pub struct LcdGraph<'a> {
    config: &'a LcdConfig,
    bound: &'a Bound,
}

impl<'a> LcdGraph<'a> {
    pub fn new(params: &'a LcdParams, bound: &'a Bound) -> Self {
        Self {
            config: &params.config,
            bound,
        }
    }

    /// `F_io = [f1(S_i), f1(S_o)]`, shape `1 x 2c`.
    pub fn siacon(&self, tape: &mut Tape, s_in: Var, s_out: Var) -> Result<Var> {
        if !self.config.use_siacon {
            return Err(Error::InvalidArgument("SiaCon disabled in this configuration".into()));
        }
        let f1 = self.config.extractor("f1");
        let a = f1.forward_pooled(tape, self.bound, s_in)?;
        let b = f1.forward_pooled(tape, self.bound, s_out)?;
        tape.concat(&[a, b])
    }

    /// One score per point of `s`, shape `n x 1`.
    pub fn siaatt(&self, tape: &mut Tape, s: Var, f_io: Option<Var>) -> Result<Var> {
        if self.config.use_siacon != f_io.is_some() {
            return Err(Error::InvalidArgument(
                "joint feature must be given exactly when SiaCon is enabled".into(),
            ));
        }
        let f2 = self.config.extractor("f2").forward_pooled(tape, self.bound, s)?;
        let global = match f_io {
            Some(f) => tape.concat(&[f2, f])?,
            None => f2,
        };
        let w = self.bound.var(G_IN_W)?;
        let b = self.bound.var(G_IN_B)?;
        let w_xyz = tape.slice_rows(w, 0, 3)?;
        let w_global = tape.slice_rows(w, 3, self.config.score_input_dim())?;
        let per_point = tape.matmul(s, w_xyz)?;
        let shared = tape.matmul(global, w_global)?;
        let shared = tape.add_row(shared, b)?;
        let h = tape.add_row(per_point, shared)?;
        let h = tape.relu(h)?;
        self.config.score_tail().forward(tape, self.bound, h)
    }

    /// Weighted loss for the pair, plus everything it was built from.
    pub fn forward(&self, tape: &mut Tape, s_in: Var, s_out: Var, sigma: f64) -> Result<LcdVars> {
        let f_io = if self.config.use_siacon {
            Some(self.siacon(tape, s_in, s_out)?)
        } else {
            None
        };
        let scores_in = self.siaatt(tape, s_in, f_io)?;
        let scores_out = self.siaatt(tape, s_out, f_io)?;
        let weights_in = weights_on_tape(tape, scores_in, sigma)?;
        let weights_out = weights_on_tape(tape, scores_out, sigma)?;
        let (d_in, d_out, match_in, match_out) = matched_distances(tape, s_in, s_out)?;
        let n_in = tape.value(s_in).matrix_dims().unwrap().0 as f64;
        let n_out = tape.value(s_out).matrix_dims().unwrap().0 as f64;
        let t_in = tape.mul(weights_in, d_in)?;
        let t_in = tape.sum(t_in)?;
        let t_in = tape.scale(t_in, 1.0 / n_in)?;
        let t_out = tape.mul(weights_out, d_out)?;
        let t_out = tape.sum(t_out)?;
        let t_out = tape.scale(t_out, 1.0 / n_out)?;
        let total = tape.add(t_in, t_out)?;
        let l_r = tape.scale(total, 0.5)?;
        Ok(LcdVars {
            l_r,
            f_io,
            scores_in,
            scores_out,
            weights_in,
            weights_out,
            match_in,
            match_out,
        })
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "boundary coefficient must be positive, got {sigma}"
        )))
    }
}

/// `(sigma + exp(-F^2)) / (n sigma + sum exp(-F^2))` on a tape.
pub fn weights_on_tape(tape: &mut Tape, scores: Var, sigma: f64) -> Result<Var> {
    check_sigma(sigma)?;
    let n = tape.value(scores).len() as f64;
    let sq = tape.square(scores)?;
    let neg = tape.neg(sq)?;
    let e = tape.exp(neg)?;
    let num = tape.add_const(e, sigma)?;
    let total = tape.sum(e)?;
    let den = tape.add_const(total, n * sigma)?;
    let inv = tape.recip(den)?;
    tape.mul_scalar(num, inv)
}

/// Matched Euclidean distances in both directions, recorded with the
/// matching indices as constants. Returns `(d_in, d_out, match_in, match_out)`
/// with `d_*` of shape `n x 1`.
pub fn matched_distances(
    tape: &mut Tape,
    s_in: Var,
    s_out: Var,
) -> Result<(Var, Var, Matching, Matching)> {
    let cin = PointCloud::from_tensor(tape.value(s_in))?;
    let cout = PointCloud::from_tensor(tape.value(s_out))?;
    let match_in = nn_match(&cin, &cout, NnMethod::KdTree)?;
    let match_out = nn_match(&cout, &cin, NnMethod::KdTree)?;
    let d_in = row_distances(tape, s_in, s_out, &match_in.indices)?;
    let d_out = row_distances(tape, s_out, s_in, &match_out.indices)?;
    Ok((d_in, d_out, match_in, match_out))
}

fn row_distances(tape: &mut Tape, from: Var, to: Var, indices: &[usize]) -> Result<Var> {
    let nearest = tape.gather_rows(to, indices)?;
    let diff = tape.sub(from, nearest)?;
    let sq = tape.square(diff)?;
    let d2 = tape.sum_cols(sq)?;
    tape.sqrt(d2)
}

/// Plain Chamfer distance recorded on a tape.
pub fn chamfer_on_tape(tape: &mut Tape, s_in: Var, s_out: Var) -> Result<Var> {
    let (d_in, d_out, _, _) = matched_distances(tape, s_in, s_out)?;
    let n_in = tape.value(d_in).len() as f64;
    let n_out = tape.value(d_out).len() as f64;
    let a = tape.sum(d_in)?;
    let a = tape.scale(a, 0.5 / n_in)?;
    let b = tape.sum(d_out)?;
    let b = tape.scale(b, 0.5 / n_out)?;
    tape.add(a, b)
}

/// `-ln(L_R + sigma_r)`.
pub fn adversarial_loss(l_r: f64, sigma_r: f64) -> Result<f64> {
    check_adversarial(l_r, sigma_r)?;
    Ok(-(l_r + sigma_r).ln())
}

fn check_adversarial(l_r: f64, sigma_r: f64) -> Result<()> {
    if !(l_r >= 0.0) || !l_r.is_finite() {
        return Err(Error::Domain(format!(
            "weighted loss must be finite and nonnegative, got {l_r}"
        )));
    }
    if !(sigma_r > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma_r must be positive, got {sigma_r}"
        )));
    }
    Ok(())
}

/// `-ln(L_R + sigma_r)` on a tape.
pub fn adversarial_on_tape(tape: &mut Tape, l_r: Var, sigma_r: f64) -> Result<Var> {
    check_adversarial(tape.value(l_r).item(), sigma_r)?;
    let shifted = tape.add_const(l_r, sigma_r)?;
    let log = tape.ln(shifted)?;
    tape.neg(log)
}

/// Weight normalisation on plain values.
pub fn normalize_weights(scores: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores to normalise".into()));
    }
    let e: Vec<f64> = scores.iter().map(|f| (-f * f).exp()).collect();
    let den = scores.len() as f64 * sigma + e.iter().sum::<f64>();
    Ok(e.iter().map(|x| (sigma + x) / den).collect())
}

/// Smallest weight [`normalize_weights`] can produce for these scores.
pub fn weight_lower_bound(scores: &[f64], sigma: f64) -> f64 {
    let den = scores.len() as f64 * sigma + scores.iter().map(|f| (-f * f).exp()).sum::<f64>();
    sigma / den
}

/// Everything the weighted loss produced, as plain values.
#[derive(Clone, Debug)]
pub struct LcdOutput {
    pub l_r: f64,
    pub weights_in: Vec<f64>,
    pub weights_out: Vec<f64>,
    pub match_in: Matching,
    pub match_out: Matching,
}

/// Joint feature `F_io` for a pair of clouds.
pub fn siacon(s_in: &PointCloud, s_out: &PointCloud, params: &LcdParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.params.bind(&mut tape, false);
    let a = tape.constant(s_in.to_tensor());
    let b = tape.constant(s_out.to_tensor());
    let f = LcdGraph::new(params, &bound).siacon(&mut tape, a, b)?;
    Ok(tape.value(f).clone())
}

/// Per-point scores of `s` given the pair's joint feature.
pub fn siaatt(s: &PointCloud, f_io: Option<&Tensor>, params: &LcdParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.params.bind(&mut tape, false);
    let sv = tape.constant(s.to_tensor());
    let fv = f_io.map(|t| tape.constant(t.clone()));
    let out = LcdGraph::new(params, &bound).siaatt(&mut tape, sv, fv)?;
    Ok(tape.value(out).data().to_vec())
}

pub fn lcd_forward(
    s_in: &PointCloud,
    s_out: &PointCloud,
    params: &LcdParams,
    sigma: f64,
) -> Result<LcdOutput> {
    let mut tape = Tape::new();
    let bound = params.params.bind(&mut tape, false);
    let a = tape.constant(s_in.to_tensor());
    let b = tape.constant(s_out.to_tensor());
    let v = LcdGraph::new(params, &bound).forward(&mut tape, a, b, sigma)?;
    Ok(LcdOutput {
        l_r: tape.value(v.l_r).item(),
        weights_in: tape.value(v.weights_in).data().to_vec(),
        weights_out: tape.value(v.weights_out).data().to_vec(),
        match_in: v.match_in,
        match_out: v.match_out,
    })
}
