//! Dense building blocks: layers, MLP stacks and Gaussian heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::GaussianParams;
use crate::error::Result;
use crate::optim::Parameter;
use crate::rng::fill_standard_normal;
use crate::tape::{Activation, Tape, VarId};
use crate::tensor::Tensor;

/// Hidden-layer nonlinearity exposed in model configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Relu,
    Elu,
}

impl HiddenActivation {
    pub(crate) fn tape_act(self) -> Activation {
        match self {
            HiddenActivation::Relu => Activation::Relu,
            HiddenActivation::Elu => Activation::Elu,
        }
    }
}

/// Log-variance heads are clamped to this range before exponentiation.
pub(crate) const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// One dense layer. Weights are He-initialized (N(0, 2/fan_in)), biases 0.
#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub w: Parameter,
    pub b: Parameter,
}

#[derive(Clone, Copy)]
pub(crate) struct DenseIds {
    pub w: VarId,
    pub b: VarId,
}

impl Dense {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let mut data = vec![0.0; in_dim * out_dim];
        fill_standard_normal(rng, &mut data);
        for v in &mut data {
            *v *= std;
        }
        Dense {
            w: Parameter::new(
                format!("{name}.w"),
                Tensor::new(vec![in_dim, out_dim], data).unwrap(),
            ),
            b: Parameter::new(format!("{name}.b"), Tensor::zeros(&[out_dim])),
        }
    }

    pub fn leaf(&self, tape: &mut Tape, trainable: bool) -> DenseIds {
        DenseIds {
            w: tape.leaf(self.w.value.clone(), trainable),
            b: tape.leaf(self.b.value.clone(), trainable),
        }
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.w, &mut self.b]
    }
}

pub(crate) fn apply_dense(
    tape: &mut Tape,
    ids: DenseIds,
    x: VarId,
    act: Activation,
) -> Result<VarId> {
    tape.dense(x, ids.w, ids.b, act)
}

/// A stack of equally wide hidden layers sharing one activation.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    pub layers: Vec<Dense>,
    pub act: HiddenActivation,
}

pub(crate) struct MlpIds {
    pub layers: Vec<DenseIds>,
}

impl Mlp {
    pub fn new(
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
        act: HiddenActivation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut dim = in_dim;
        for i in 0..depth {
            layers.push(Dense::new(&format!("{name}.l{i}"), dim, width, rng));
            dim = width;
        }
        Mlp { layers, act }
    }

    pub fn out_dim(&self) -> usize {
        self.layers
            .last()
            .map(|d| d.w.value.shape()[1])
            .unwrap_or(0)
    }

    pub fn leaf(&self, tape: &mut Tape, trainable: bool) -> MlpIds {
        MlpIds {
            layers: self.layers.iter().map(|d| d.leaf(tape, trainable)).collect(),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|d| d.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|d| d.params_mut()).collect()
    }
}

pub(crate) fn apply_mlp(tape: &mut Tape, mlp: &Mlp, ids: &MlpIds, x: VarId) -> Result<VarId> {
    let act = mlp.act.tape_act();
    let mut h = x;
    for ids in &ids.layers {
        h = apply_dense(tape, *ids, h, act)?;
    }
    Ok(h)
}

/// Hidden stack plus linear heads emitting (μ, log σ²); the log-variance
/// head is clamped to [`LOG_VAR_CLAMP`].
#[derive(Clone, Debug)]
pub(crate) struct GaussianHead {
    pub hidden: Mlp,
    pub mean: Dense,
    pub log_var: Dense,
}

pub(crate) struct GaussianHeadIds {
    pub hidden: MlpIds,
    pub mean: DenseIds,
    pub log_var: DenseIds,
}

impl GaussianHead {
    pub fn new(
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
        out_dim: usize,
        act: HiddenActivation,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = Mlp::new(&format!("{name}.hidden"), in_dim, width, depth, act, rng);
        let head_in = if depth == 0 { in_dim } else { width };
        GaussianHead {
            hidden,
            mean: Dense::new(&format!("{name}.mean"), head_in, out_dim, rng),
            log_var: Dense::new(&format!("{name}.log_var"), head_in, out_dim, rng),
        }
    }

    pub fn leaf(&self, tape: &mut Tape, trainable: bool) -> GaussianHeadIds {
        GaussianHeadIds {
            hidden: self.hidden.leaf(tape, trainable),
            mean: self.mean.leaf(tape, trainable),
            log_var: self.log_var.leaf(tape, trainable),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.hidden.params();
        out.extend(self.mean.params());
        out.extend(self.log_var.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.hidden.params_mut();
        out.extend(self.mean.params_mut());
        out.extend(self.log_var.params_mut());
        out
    }
}

pub(crate) fn apply_gaussian_head(
    tape: &mut Tape,
    head: &GaussianHead,
    ids: &GaussianHeadIds,
    x: VarId,
) -> Result<GaussianParams> {
    let h = apply_mlp(tape, &head.hidden, &ids.hidden, x)?;
    let mean = apply_dense(tape, ids.mean, h, Activation::Identity)?;
    let raw_lv = apply_dense(tape, ids.log_var, h, Activation::Identity)?;
    let log_var = tape.clamp(raw_lv, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1)?;
    GaussianParams::new(tape, mean, log_var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domains, stream_rng};

    #[test]
    fn he_init_scales_with_fan_in() {
        let mut rng = stream_rng(1, domains::MODEL_INIT, 0);
        let d = Dense::new("t", 400, 300, &mut rng);
        let data = d.w.value.data();
        let var = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
        let expect = 2.0 / 400.0;
        assert!((var - expect).abs() < 0.2 * expect, "var {var} vs {expect}");
        assert!(d.b.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_applies_all_layers() {
        let mut rng = stream_rng(2, domains::MODEL_INIT, 0);
        let mlp = Mlp::new("m", 3, 8, 2, HiddenActivation::Relu, &mut rng);
        let mut tape = Tape::new();
        let ids = mlp.leaf(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![4, 3], vec![0.1; 12]).unwrap());
        let h = apply_mlp(&mut tape, &mlp, &ids, x).unwrap();
        assert_eq!(tape.shape(h), &[4, 8]);
        // relu output is non-negative
        assert!(tape.value(h).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn gaussian_head_clamps_log_variance() {
        let mut rng = stream_rng(3, domains::MODEL_INIT, 0);
        let mut head = GaussianHead::new("h", 2, 4, 1, 3, HiddenActivation::Relu, &mut rng);
        // Force an absurd bias so the raw log-variance exceeds the clamp.
        head.log_var
            .b
            .set_value(Tensor::from_vec(vec![500.0, -500.0, 0.0]))
            .unwrap();
        let mut tape = Tape::new();
        let ids = head.leaf(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let p = apply_gaussian_head(&mut tape, &head, &ids, x).unwrap();
        let lv = tape.value(p.log_var).data();
        assert_eq!(lv[0], LOG_VAR_CLAMP.1);
        assert_eq!(lv[1], LOG_VAR_CLAMP.0);
    }
}
