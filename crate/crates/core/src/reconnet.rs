//! Autoencoder under training: PointNet encoder (shared per-point MLP and
//! max-pool) followed by a fully connected decoder emitting `n x 3`
//! coordinates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::autodiff::{Bound, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::nn::Mlp;

#[derive(Clone, Debug, PartialEq)]
pub struct ReconConfig {
    /// Per-point encoder widths; the last one is the latent size.
    pub encoder_dims: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Number of points the decoder emits.
    pub points: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            encoder_dims: vec![64, 128, 128],
            decoder_hidden: vec![256],
            points: 256,
        }
    }
}

impl ReconConfig {
    pub fn with_points(points: usize) -> Self {
        Self {
            points,
            ..Self::default()
        }
    }

    pub fn latent_dim(&self) -> usize {
        *self.encoder_dims.last().expect("encoder_dims nonempty")
    }

    fn encoder(&self) -> Mlp {
        let mut dims = vec![3];
        dims.extend(&self.encoder_dims);
        Mlp::new("enc", &dims, true)
    }

    fn decoder(&self) -> Mlp {
        let mut dims = vec![self.latent_dim()];
        dims.extend(&self.decoder_hidden);
        dims.push(self.points * 3);
        Mlp::new("dec", &dims, false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconParams {
    config: ReconConfig,
    pub params: ParamSet,
}

impl ReconParams {
    pub fn new<R: Rng>(config: ReconConfig, rng: &mut R) -> Result<Self> {
        if config.encoder_dims.is_empty() || config.points == 0 {
            return Err(Error::InvalidArgument(
                "reconstruction network needs an encoder layer and at least one output point".into(),
            ));
        }
        let mut params = ParamSet::new();
        config.encoder().init(&mut params, rng, false)?;
        config.decoder().init(&mut params, rng, false)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ReconConfig {
        &self.config
    }

    /// Name of the decoder's output-layer weight.
    pub fn output_weight_name(&self) -> String {
        let d = self.config.decoder();
        d.weight_name(d.layers() - 1)
    }

    pub fn output_bias_name(&self) -> String {
        let d = self.config.decoder();
        d.bias_name(d.layers() - 1)
    }

    /// Network with default widths rebuilt from a checkpoint; the output
    /// size is read from the decoder's last bias.
    pub fn load(path: &Path) -> Result<Self> {
        let entries = checkpoint::read(path)?;
        let bias = ReconConfig::default().decoder();
        let bias = bias.bias_name(bias.layers() - 1);
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let Some((_, t)) = entries.iter().find(|(n, _)| *n == bias) else {
            return Err(bad(format!("no tensor `{bias}`, not a reconstruction checkpoint")));
        };
        if t.is_empty() || t.len() % 3 != 0 {
            return Err(bad(format!("tensor `{bias}` has {} values, not a positive multiple of 3", t.len())));
        }
        let mut params = Self::new(ReconConfig::with_points(t.len() / 3), &mut ChaCha8Rng::seed_from_u64(0))?;
        checkpoint::load_into(&mut params.params, path)?;
        Ok(params)
    }
}

/// The network recorded on a tape with bound parameters.
pub struct ReconGraph<'a> {
    config: &'a ReconConfig,
    bound: &'a Bound,
}

impl<'a> ReconGraph<'a> {
    pub fn new(params: &'a ReconParams, bound: &'a Bound) -> Self {
        Self {
            config: &params.config,
            bound,
        }
    }

    /// `n x 3 -> 1 x latent`.
    pub fn encode(&self, tape: &mut Tape, cloud: Var) -> Result<Var> {
        self.config.encoder().forward_pooled(tape, self.bound, cloud)
    }

    /// `1 x latent -> points x 3`.
    pub fn decode(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        let flat = self.config.decoder().forward(tape, self.bound, latent)?;
        tape.reshape(flat, &[self.config.points, 3])
    }

    pub fn reconstruct(&self, tape: &mut Tape, cloud: Var) -> Result<Var> {
        let z = self.encode(tape, cloud)?;
        self.decode(tape, z)
    }
}

pub fn encode(cloud: &PointCloud, params: &ReconParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.params.bind(&mut tape, false);
    let x = tape.constant(cloud.to_tensor());
    let z = ReconGraph::new(params, &bound).encode(&mut tape, x)?;
    Ok(tape.value(z).data().to_vec())
}

pub fn decode(latent: &[f64], params: &ReconParams) -> Result<PointCloud> {
    let dim = params.config.latent_dim();
    if latent.len() != dim {
        return Err(Error::Shape(format!(
            "latent has length {}, decoder expects {dim}",
            latent.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.params.bind(&mut tape, false);
    let z = tape.constant(Tensor::new(vec![1, dim], latent.to_vec())?);
    let y = ReconGraph::new(params, &bound).decode(&mut tape, z)?;
    PointCloud::from_tensor(tape.value(y))
}

pub fn reconstruct(cloud: &PointCloud, params: &ReconParams) -> Result<PointCloud> {
    let mut tape = Tape::new();
    let bound = params.params.bind(&mut tape, false);
    let x = tape.constant(cloud.to_tensor());
    let y = ReconGraph::new(params, &bound).reconstruct(&mut tape, x)?;
    PointCloud::from_tensor(tape.value(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()).unwrap()
    }

    #[test]
    fn encode_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ReconParams::new(ReconConfig::with_points(32), &mut rng).unwrap();
        let c = cloud(&mut rng, 40);
        let z = encode(&c, &p).unwrap();
        assert_eq!(z.len(), 128);
        let perm: Vec<usize> = (0..40).map(|i| (i * 7) % 40).collect();
        assert_eq!(encode(&c.permuted(&perm), &p).unwrap(), z);
        assert_eq!(reconstruct(&c.permuted(&perm), &p).unwrap(), reconstruct(&c, &p).unwrap());
        let other = cloud(&mut rng, 40);
        assert_ne!(encode(&other, &p).unwrap(), z);
    }

    #[test]
    fn decode_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ReconParams::new(ReconConfig::with_points(20), &mut rng).unwrap();
        let z: Vec<f64> = (0..128).map(|i| (i as f64).sin()).collect();
        let a = decode(&z, &p).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(decode(&z, &p).unwrap(), a);
        assert!(decode(&z[..10], &p).is_err());

        let w = p.output_weight_name();
        let shape = p.params.get(&w).unwrap().shape().to_vec();
        p.params.set(&w, Tensor::zeros(&shape)).unwrap();
        let zero = decode(&vec![0.0; 128], &p).unwrap();
        assert!(zero.points().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn load_infers_output_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        let p = ReconParams::new(ReconConfig::with_points(12), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        checkpoint::save(&p.params, &path).unwrap();
        let q = ReconParams::load(&path).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn output_size_independent_of_input_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ReconParams::new(ReconConfig::with_points(16), &mut rng).unwrap();
        for n in [1, 5, 300] {
            assert_eq!(reconstruct(&cloud(&mut rng, n), &p).unwrap().len(), 16);
        }
    }
}
