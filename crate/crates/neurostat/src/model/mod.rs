//! The set-level hierarchical VAE: a statistic network q(c|D) over a
//! per-dataset context, inference networks q(z_i|z_{i+1},x,c), latent
//! decoders p(z_i|z_{i+1},c), an observation decoder p(x|z_{1:L},c), and
//! the three-term training bound
//! `total = reconstruction − context divergence − latent divergence`.

mod checkpoint;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_model, model_from_bytes, model_to_bytes, save_model, NSTM_MAGIC, NSTM_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBatch;
use crate::distributions::{
    kl_diag, kl_to_standard, log_pdf, reparam_sample, GaussianParams, GaussianValue,
};
use crate::error::{Error, Result};
use crate::nn::{
    apply_dense, apply_gaussian_head, apply_mlp, Dense, DenseIds, GaussianHead, GaussianHeadIds,
    HiddenActivation, Mlp, MlpIds, LOG_VAR_CLAMP,
};
use crate::optim::Parameter;
use crate::rng::{domains, fill_standard_normal, stream_rng};
use crate::tape::{Activation, Tape, VarId};
use crate::tensor::Tensor;

/// Observation likelihood family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian,
    Bernoulli,
}

/// Exchangeable pooling over the sample axis. Only the sample mean is
/// implemented; the enum keeps the choice explicit in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input dimension n.
    pub n_features: usize,
    /// Context dimension.
    pub c_dim: usize,
    /// Per-layer latent dimension.
    pub z_dim: usize,
    /// Number of stochastic latent layers L ≥ 1.
    pub n_stochastic_layers: usize,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub activation: HiddenActivation,
    pub likelihood: Likelihood,
    pub pooling: Pooling,
    /// Probability of removing a sample from pooling during training; one
    /// uniformly chosen sample per set is always kept.
    pub sample_dropout_rate: f64,
    /// Appends kept-count / max_set_size to the pooled statistic.
    pub append_count_feature: bool,
    /// Scale for the count feature.
    pub max_set_size: usize,
    /// Gaussian likelihood only: emit a single per-feature log-variance
    /// parameter shared across all datapoints instead of a per-point head.
    pub shared_obs_variance: bool,
    /// Feed inference networks the statistic encoder's features instead of
    /// raw inputs (shared instance encoder).
    pub share_instance_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::synthetic_1d()
    }
}

impl ModelConfig {
    /// Preset for the synthetic 1-D experiment: a single stochastic layer
    /// with 32 z units and 3 c units, 3×128 relu stacks.
    pub fn synthetic_1d() -> Self {
        ModelConfig {
            n_features: 1,
            c_dim: 3,
            z_dim: 32,
            n_stochastic_layers: 1,
            hidden_width: 128,
            hidden_depth: 3,
            activation: HiddenActivation::Relu,
            likelihood: Likelihood::Gaussian,
            pooling: Pooling::Mean,
            sample_dropout_rate: 0.0,
            append_count_feature: false,
            max_set_size: 200,
            shared_obs_variance: false,
            share_instance_encoder: false,
        }
    }

    /// Preset for spatial point-set data: 3 stochastic layers of 2 units,
    /// 64 c units, 3×256 relu stacks, sample size 50.
    pub fn spatial_mnist() -> Self {
        ModelConfig {
            n_features: 2,
            c_dim: 64,
            z_dim: 2,
            n_stochastic_layers: 3,
            hidden_width: 256,
            hidden_depth: 3,
            max_set_size: 50,
            ..ModelConfig::synthetic_1d()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_features", self.n_features),
            ("c_dim", self.c_dim),
            ("z_dim", self.z_dim),
            ("n_stochastic_layers", self.n_stochastic_layers),
            ("hidden_width", self.hidden_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.sample_dropout_rate) {
            return Err(Error::Config(format!(
                "sample_dropout_rate must lie in [0, 1), got {}",
                self.sample_dropout_rate
            )));
        }
        if self.append_count_feature && self.max_set_size == 0 {
            return Err(Error::Config(
                "append_count_feature requires a positive max_set_size".into(),
            ));
        }
        if self.shared_obs_variance && self.likelihood != Likelihood::Gaussian {
            return Err(Error::Config(
                "shared_obs_variance applies to the gaussian likelihood only".into(),
            ));
        }
        Ok(())
    }
}

/// Per-set keep mask for sample dropout. One uniformly chosen sample per
/// set always survives.
#[derive(Clone, Debug)]
pub struct KeepMask {
    batch: usize,
    samples: usize,
    keep: Vec<bool>,
    counts: Vec<usize>,
}

impl KeepMask {
    /// Draw order per set: the guaranteed index, then one uniform per
    /// sample position.
    pub fn draw(batch: usize, samples: usize, rate: f64, rng: &mut impl Rng) -> KeepMask {
        let mut keep = vec![false; batch * samples];
        let mut counts = vec![0usize; batch];
        for b in 0..batch {
            let guaranteed = rng.gen_range(0..samples);
            for s in 0..samples {
                let kept = rng.gen::<f64>() >= rate || s == guaranteed;
                keep[b * samples + s] = kept;
                counts[b] += kept as usize;
            }
        }
        KeepMask {
            batch,
            samples,
            keep,
            counts,
        }
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn kept(&self, set: usize, sample: usize) -> bool {
        self.keep[set * self.samples + sample]
    }

    fn expand(&self, width: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.keep.len() * width);
        for &k in &self.keep {
            let v = if k { 1.0 } else { 0.0 };
            data.extend(std::iter::repeat(v).take(width));
        }
        Tensor::new(vec![self.batch, self.samples, width], data).unwrap()
    }

    fn inv_counts(&self, width: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.batch * width);
        for &c in &self.counts {
            data.extend(std::iter::repeat(1.0 / c as f64).take(width));
        }
        Tensor::new(vec![self.batch, width], data).unwrap()
    }
}

/// All noise consumed by one single-sample bound evaluation. Draw order:
/// keep mask (training with dropout only), context noise, then latent noise
/// top-down.
#[derive(Clone, Debug)]
pub struct ElboNoise {
    /// (batch, c_dim) standard normals.
    pub c_eps: Tensor,
    /// One (batch·samples, z_dim) tensor per stochastic layer, top-down.
    pub z_eps: Vec<Tensor>,
    pub keep: Option<KeepMask>,
}

impl ElboNoise {
    pub fn draw(
        cfg: &ModelConfig,
        batch: usize,
        samples: usize,
        training: bool,
        rng: &mut impl Rng,
    ) -> ElboNoise {
        let keep = if training && cfg.sample_dropout_rate > 0.0 {
            Some(KeepMask::draw(batch, samples, cfg.sample_dropout_rate, rng))
        } else {
            None
        };
        let mut c_eps = Tensor::zeros(&[batch, cfg.c_dim]);
        fill_standard_normal(rng, c_eps.data_mut());
        let z_eps = (0..cfg.n_stochastic_layers)
            .map(|_| {
                let mut t = Tensor::zeros(&[batch * samples, cfg.z_dim]);
                fill_standard_normal(rng, t.data_mut());
                t
            })
            .collect();
        ElboNoise { c_eps, z_eps, keep }
    }

    /// Zero noise (mean paths), no dropout.
    pub fn zeros(cfg: &ModelConfig, batch: usize, samples: usize) -> ElboNoise {
        ElboNoise {
            c_eps: Tensor::zeros(&[batch, cfg.c_dim]),
            z_eps: (0..cfg.n_stochastic_layers)
                .map(|_| Tensor::zeros(&[batch * samples, cfg.z_dim]))
                .collect(),
            keep: None,
        }
    }

    /// Evaluation noise keyed per set id: each set's block is drawn from
    /// its own `(seed, set id)` stream, so values do not depend on how sets
    /// are grouped into batches.
    pub fn draw_keyed(cfg: &ModelConfig, samples: usize, set_ids: &[u32], seed: u64) -> ElboNoise {
        let batch = set_ids.len();
        let mut c_eps = Tensor::zeros(&[batch, cfg.c_dim]);
        let mut z_eps: Vec<Tensor> =
            (0..cfg.n_stochastic_layers)
                .map(|_| Tensor::zeros(&[batch * samples, cfg.z_dim]))
                .collect();
        for (b, &id) in set_ids.iter().enumerate() {
            let mut rng = stream_rng(seed, domains::EVAL_NOISE, id as u64);
            let c_row = &mut c_eps.data_mut()[b * cfg.c_dim..(b + 1) * cfg.c_dim];
            fill_standard_normal(&mut rng, c_row);
            for layer in z_eps.iter_mut() {
                let block =
                    &mut layer.data_mut()[b * samples * cfg.z_dim..(b + 1) * samples * cfg.z_dim];
                fill_standard_normal(&mut rng, block);
            }
        }
        ElboNoise {
            c_eps,
            z_eps,
            keep: None,
        }
    }
}

/// The decomposed bound, averaged over the datasets of a batch:
/// `total = reconstruction − context_div − latent_div`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub context_div: f64,
    pub latent_div: f64,
    pub total: f64,
}

/// Tape nodes of one bound evaluation.
pub struct ElboGraph {
    pub reconstruction: VarId,
    pub context_div: VarId,
    pub latent_div: VarId,
    pub total: VarId,
    /// (batch,) per-dataset bound values.
    pub per_set_total: VarId,
    pub context: GaussianParams,
}

impl ElboGraph {
    pub fn terms(&self, tape: &Tape) -> Result<ElboTerms> {
        Ok(ElboTerms {
            reconstruction: tape.scalar_value(self.reconstruction)?,
            context_div: tape.scalar_value(self.context_div)?,
            latent_div: tape.scalar_value(self.latent_div)?,
            total: tape.scalar_value(self.total)?,
        })
    }
}

/// Observation-decoder output on a tape.
pub enum LikelihoodGraph {
    Gaussian(GaussianParams),
    Bernoulli { probs: VarId, logits: VarId },
}

/// Observation-decoder output as plain values.
#[derive(Clone, Debug)]
pub enum LikelihoodValue {
    Gaussian(GaussianValue),
    Bernoulli { probs: Tensor },
}

/// Samples and posterior parameters from the inference chain, top-down:
/// index 0 is the deepest layer (z_L), the last entry is z_1.
#[derive(Clone, Debug)]
pub struct LatentPath {
    pub samples: Vec<Tensor>,
    pub params: Vec<GaussianValue>,
}

#[derive(Clone, Debug)]
enum ObsHead {
    Gaussian { mean: Dense, log_var: Dense },
    GaussianShared { mean: Dense, log_var: Parameter },
    Bernoulli { logits: Dense },
}

enum ObsHeadIds {
    Gaussian { mean: DenseIds, log_var: DenseIds },
    GaussianShared { mean: DenseIds, log_var: VarId },
    Bernoulli { logits: DenseIds },
}

/// Leaf ids for every parameter of a model on some tape, in registry order.
pub struct ModelLeaves {
    stat_encoder: MlpIds,
    stat_post: GaussianHeadIds,
    inference: Vec<GaussianHeadIds>,
    latent_decoders: Vec<GaussianHeadIds>,
    obs_hidden: MlpIds,
    obs_head: ObsHeadIds,
}

impl ModelLeaves {
    /// Leaf ids in the same order as [`Model::parameters`].
    pub fn ordered_ids(&self) -> Vec<VarId> {
        fn mlp(ids: &MlpIds, out: &mut Vec<VarId>) {
            for d in &ids.layers {
                out.push(d.w);
                out.push(d.b);
            }
        }
        fn head(ids: &GaussianHeadIds, out: &mut Vec<VarId>) {
            mlp(&ids.hidden, out);
            out.push(ids.mean.w);
            out.push(ids.mean.b);
            out.push(ids.log_var.w);
            out.push(ids.log_var.b);
        }
        let mut out = Vec::new();
        mlp(&self.stat_encoder, &mut out);
        head(&self.stat_post, &mut out);
        for h in &self.inference {
            head(h, &mut out);
        }
        for h in &self.latent_decoders {
            head(h, &mut out);
        }
        mlp(&self.obs_hidden, &mut out);
        match &self.obs_head {
            ObsHeadIds::Gaussian { mean, log_var } => {
                out.extend([mean.w, mean.b, log_var.w, log_var.b]);
            }
            ObsHeadIds::GaussianShared { mean, log_var } => {
                out.extend([mean.w, mean.b, *log_var]);
            }
            ObsHeadIds::Bernoulli { logits } => {
                out.extend([logits.w, logits.b]);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    stat_encoder: Mlp,
    stat_post: GaussianHead,
    /// Index 0 is the top layer (z_L).
    inference: Vec<GaussianHead>,
    latent_decoders: Vec<GaussianHead>,
    obs_hidden: Mlp,
    obs_head: ObsHead,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, domains::MODEL_INIT, 0);
        let act = cfg.activation;
        let w = cfg.hidden_width;
        let d = cfg.hidden_depth;
        let levels = cfg.n_stochastic_layers;

        let stat_encoder = Mlp::new("stat.enc", cfg.n_features, w, d, act, &mut rng);
        let pooled_dim = w + usize::from(cfg.append_count_feature);
        let stat_post = GaussianHead::new("stat.post", pooled_dim, w, d, cfg.c_dim, act, &mut rng);

        let x_dim = if cfg.share_instance_encoder {
            w
        } else {
            cfg.n_features
        };
        let mut inference = Vec::with_capacity(levels);
        let mut latent_decoders = Vec::with_capacity(levels);
        for j in 0..levels {
            let layer = levels - j; // paper-style index: L at the top
            let parent = if j == 0 { 0 } else { cfg.z_dim };
            inference.push(GaussianHead::new(
                &format!("inf.z{layer}"),
                parent + x_dim + cfg.c_dim,
                w,
                d,
                cfg.z_dim,
                act,
                &mut rng,
            ));
            latent_decoders.push(GaussianHead::new(
                &format!("gen.z{layer}"),
                parent + cfg.c_dim,
                w,
                d,
                cfg.z_dim,
                act,
                &mut rng,
            ));
        }

        let obs_in = levels * cfg.z_dim + cfg.c_dim;
        let obs_hidden = Mlp::new("gen.obs.hidden", obs_in, w, d, act, &mut rng);
        let obs_head = match (cfg.likelihood, cfg.shared_obs_variance) {
            (Likelihood::Gaussian, false) => ObsHead::Gaussian {
                mean: Dense::new("gen.obs.mean", w, cfg.n_features, &mut rng),
                log_var: Dense::new("gen.obs.log_var", w, cfg.n_features, &mut rng),
            },
            (Likelihood::Gaussian, true) => ObsHead::GaussianShared {
                mean: Dense::new("gen.obs.mean", w, cfg.n_features, &mut rng),
                log_var: Parameter::new(
                    "gen.obs.shared_log_var",
                    Tensor::zeros(&[cfg.n_features]),
                ),
            },
            (Likelihood::Bernoulli, _) => ObsHead::Bernoulli {
                logits: Dense::new("gen.obs.logits", w, cfg.n_features, &mut rng),
            },
        };

        Ok(Model {
            cfg,
            stat_encoder,
            stat_post,
            inference,
            latent_decoders,
            obs_hidden,
            obs_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_stochastic_layers
    }

    // ── parameter registry ───────────────────────────────────────────

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.stat_encoder.params();
        out.extend(self.stat_post.params());
        for h in &self.inference {
            out.extend(h.params());
        }
        for h in &self.latent_decoders {
            out.extend(h.params());
        }
        out.extend(self.obs_hidden.params());
        match &self.obs_head {
            ObsHead::Gaussian { mean, log_var } => {
                out.extend(mean.params());
                out.extend(log_var.params());
            }
            ObsHead::GaussianShared { mean, log_var } => {
                out.extend(mean.params());
                out.push(log_var);
            }
            ObsHead::Bernoulli { logits } => out.extend(logits.params()),
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.stat_encoder.params_mut();
        out.extend(self.stat_post.params_mut());
        for h in &mut self.inference {
            out.extend(h.params_mut());
        }
        for h in &mut self.latent_decoders {
            out.extend(h.params_mut());
        }
        out.extend(self.obs_hidden.params_mut());
        match &mut self.obs_head {
            ObsHead::Gaussian { mean, log_var } => {
                out.extend(mean.params_mut());
                out.extend(log_var.params_mut());
            }
            ObsHead::GaussianShared { mean, log_var } => {
                out.extend(mean.params_mut());
                out.push(log_var);
            }
            ObsHead::Bernoulli { logits } => out.extend(logits.params_mut()),
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    pub fn param_value(&self, name: &str) -> Option<&Tensor> {
        self.parameters()
            .into_iter()
            .find(|p| p.name() == name)
            .map(|p| &p.value)
    }

    pub fn set_param_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        for p in self.parameters_mut() {
            if p.name() == name {
                return p.set_value(value);
            }
        }
        Err(Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    /// Inserts every parameter as a tape leaf.
    pub fn leaves(&self, tape: &mut Tape, trainable: bool) -> ModelLeaves {
        let obs_head = match &self.obs_head {
            ObsHead::Gaussian { mean, log_var } => ObsHeadIds::Gaussian {
                mean: mean.leaf(tape, trainable),
                log_var: log_var.leaf(tape, trainable),
            },
            ObsHead::GaussianShared { mean, log_var } => ObsHeadIds::GaussianShared {
                mean: mean.leaf(tape, trainable),
                log_var: tape.leaf(log_var.value.clone(), trainable),
            },
            ObsHead::Bernoulli { logits } => ObsHeadIds::Bernoulli {
                logits: logits.leaf(tape, trainable),
            },
        };
        ModelLeaves {
            stat_encoder: self.stat_encoder.leaf(tape, trainable),
            stat_post: self.stat_post.leaf(tape, trainable),
            inference: self.inference.iter().map(|h| h.leaf(tape, trainable)).collect(),
            latent_decoders: self
                .latent_decoders
                .iter()
                .map(|h| h.leaf(tape, trainable))
                .collect(),
            obs_hidden: self.obs_hidden.leaf(tape, trainable),
            obs_head,
        }
    }

    // ── graph-level building blocks ──────────────────────────────────

    /// Statistic network on a (batch, samples, n) node. Returns the context
    /// posterior and the per-point encoder features (batch·samples, width).
    pub fn context_graph(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        x3: VarId,
        keep: Option<&KeepMask>,
    ) -> Result<(GaussianParams, VarId)> {
        let shape = tape.shape(x3).to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "encode_context",
                lhs: shape,
                rhs: vec![0, 0, self.cfg.n_features],
            });
        }
        let (b, s, n) = (shape[0], shape[1], shape[2]);
        if b == 0 || s == 0 {
            return Err(Error::EmptyDataset);
        }
        if n != self.cfg.n_features {
            return Err(Error::ShapeMismatch {
                op: "encode_context",
                lhs: shape,
                rhs: vec![b, s, self.cfg.n_features],
            });
        }
        let x2 = tape.reshape(x3, vec![b * s, n])?;
        let enc = apply_mlp(tape, &self.stat_encoder, &leaves.stat_encoder, x2)?;
        let width = self.stat_encoder.out_dim();
        let e3 = tape.reshape(enc, vec![b, s, width])?;

        let pooled = match keep {
            None => tape.mean(e3, 1)?,
            Some(mask) => {
                if mask.batch != b || mask.samples != s {
                    return Err(Error::ShapeMismatch {
                        op: "encode_context",
                        lhs: vec![b, s],
                        rhs: vec![mask.batch, mask.samples],
                    });
                }
                let mask3 = tape.constant(mask.expand(width));
                let masked = tape.mul(e3, mask3)?;
                let summed = tape.sum(masked, 1)?;
                let inv = tape.constant(mask.inv_counts(width));
                tape.mul(summed, inv)?
            }
        };
        let pooled = if self.cfg.append_count_feature {
            let denom = self.cfg.max_set_size.max(1) as f64;
            let feature: Vec<f64> = match keep {
                Some(mask) => mask.counts().iter().map(|&c| c as f64 / denom).collect(),
                None => vec![s as f64 / denom; b],
            };
            let counts = tape.constant(Tensor::new(vec![b, 1], feature)?);
            tape.concat(&[pooled, counts], 1)?
        } else {
            pooled
        };
        let ctx = apply_gaussian_head(tape, &self.stat_post, &leaves.stat_post, pooled)?;
        Ok((ctx, enc))
    }

    /// Latent decoder for one level; `level` indexes the internal top-down
    /// order (0 = z_L).
    pub(crate) fn latent_decoder_graph(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        level: usize,
        z_parent: Option<VarId>,
        c_rep: VarId,
    ) -> Result<GaussianParams> {
        let input = match z_parent {
            None => c_rep,
            Some(zp) => tape.concat(&[zp, c_rep], 1)?,
        };
        apply_gaussian_head(tape, &self.latent_decoders[level], &leaves.latent_decoders[level], input)
    }

    fn inference_graph(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        level: usize,
        z_parent: Option<VarId>,
        x_inf: VarId,
        c_rep: VarId,
    ) -> Result<GaussianParams> {
        let input = match z_parent {
            None => tape.concat(&[x_inf, c_rep], 1)?,
            Some(zp) => tape.concat(&[zp, x_inf, c_rep], 1)?,
        };
        apply_gaussian_head(tape, &self.inference[level], &leaves.inference[level], input)
    }

    /// Observation decoder on top-down latent samples plus the context.
    pub fn observation_graph(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        latents: &[VarId],
        c_rep: VarId,
    ) -> Result<LikelihoodGraph> {
        if latents.len() != self.cfg.n_stochastic_layers {
            return Err(Error::InvalidArgument(format!(
                "expected {} latent layers, got {}",
                self.cfg.n_stochastic_layers,
                latents.len()
            )));
        }
        let mut parts = latents.to_vec();
        parts.push(c_rep);
        let h_in = tape.concat(&parts, 1)?;
        let h = apply_mlp(tape, &self.obs_hidden, &leaves.obs_hidden, h_in)?;
        match (&self.obs_head, &leaves.obs_head) {
            (ObsHead::Gaussian { .. }, ObsHeadIds::Gaussian { mean, log_var }) => {
                let m = apply_dense(tape, *mean, h, Activation::Identity)?;
                let raw = apply_dense(tape, *log_var, h, Activation::Identity)?;
                let lv = tape.clamp(raw, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1)?;
                Ok(LikelihoodGraph::Gaussian(GaussianParams::new(tape, m, lv)?))
            }
            (ObsHead::GaussianShared { .. }, ObsHeadIds::GaussianShared { mean, log_var }) => {
                let m = apply_dense(tape, *mean, h, Activation::Identity)?;
                let rows = tape.shape(m)[0];
                let clamped = tape.clamp(*log_var, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1)?;
                let row = tape.reshape(clamped, vec![1, self.cfg.n_features])?;
                let lv = tape.repeat_rows(row, rows)?;
                Ok(LikelihoodGraph::Gaussian(GaussianParams::new(tape, m, lv)?))
            }
            (ObsHead::Bernoulli { .. }, ObsHeadIds::Bernoulli { logits }) => {
                let t = apply_dense(tape, *logits, h, Activation::Identity)?;
                let probs = tape.sigmoid(t)?;
                Ok(LikelihoodGraph::Bernoulli { probs, logits: t })
            }
            _ => unreachable!("obs head ids always built from the same head"),
        }
    }

    /// Per-row log-likelihood of `x` under the decoder output.
    pub fn obs_log_pdf(&self, tape: &mut Tape, x: VarId, lik: &LikelihoodGraph) -> Result<VarId> {
        match lik {
            LikelihoodGraph::Gaussian(p) => log_pdf(tape, x, p),
            LikelihoodGraph::Bernoulli { logits, .. } => {
                // x·log σ(t) + (1−x)·log(1−σ(t)) via softplus for stability
                let neg_t = tape.scale(*logits, -1.0)?;
                let sp_neg = tape.softplus(neg_t)?;
                let a = tape.mul(x, sp_neg)?;
                let neg_x = tape.scale(x, -1.0)?;
                let one_minus_x = tape.add_scalar(neg_x, 1.0)?;
                let sp = tape.softplus(*logits)?;
                let b = tape.mul(one_minus_x, sp)?;
                let nll = tape.add(a, b)?;
                let ll = tape.scale(nll, -1.0)?;
                let axis = tape.shape(ll).len() - 1;
                tape.sum(ll, axis)
            }
        }
    }

    /// One single-sample evaluation of the bound on a tape.
    pub fn elbo_graph(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        batch: &DatasetBatch,
        noise: &ElboNoise,
    ) -> Result<ElboGraph> {
        let (b, s) = (batch.batch_size(), batch.sample_size());
        if noise.c_eps.shape() != [b, self.cfg.c_dim] {
            return Err(Error::ShapeMismatch {
                op: "elbo",
                lhs: noise.c_eps.shape().to_vec(),
                rhs: vec![b, self.cfg.c_dim],
            });
        }
        if noise.z_eps.len() != self.cfg.n_stochastic_layers {
            return Err(Error::InvalidArgument(format!(
                "elbo noise holds {} latent layers, model has {}",
                noise.z_eps.len(),
                self.cfg.n_stochastic_layers
            )));
        }
        let x3 = tape.constant(batch.values.clone());
        let (ctx, enc) = self.context_graph(tape, leaves, x3, noise.keep.as_ref())?;
        let c_eps = tape.constant(noise.c_eps.clone());
        let c = reparam_sample(tape, &ctx, c_eps)?;
        let c_rep = tape.repeat_rows(c, s)?;
        let x2 = tape.reshape(x3, vec![b * s, self.cfg.n_features])?;
        let x_inf = if self.cfg.share_instance_encoder { enc } else { x2 };

        let mut kl_rows: Option<VarId> = None;
        let mut parent: Option<VarId> = None;
        let mut zs = Vec::with_capacity(self.cfg.n_stochastic_layers);
        for level in 0..self.cfg.n_stochastic_layers {
            let q = self.inference_graph(tape, leaves, level, parent, x_inf, c_rep)?;
            let p = self.latent_decoder_graph(tape, leaves, level, parent, c_rep)?;
            let eps = tape.constant(noise.z_eps[level].clone());
            let z = reparam_sample(tape, &q, eps)?;
            let kl = kl_diag(tape, &q, &p)?;
            kl_rows = Some(match kl_rows {
                None => kl,
                Some(acc) => tape.add(acc, kl)?,
            });
            zs.push(z);
            parent = Some(z);
        }

        let lik = self.observation_graph(tape, leaves, &zs, c_rep)?;
        let r_rows = self.obs_log_pdf(tape, x2, &lik)?;

        let r_mat = tape.reshape(r_rows, vec![b, s])?;
        let r_set = tape.sum(r_mat, 1)?;
        let l_mat = tape.reshape(kl_rows.expect("L >= 1"), vec![b, s])?;
        let l_set = tape.sum(l_mat, 1)?;
        let c_set = kl_to_standard(tape, &ctx)?;

        let reconstruction = tape.mean(r_set, 0)?;
        let context_div = tape.mean(c_set, 0)?;
        let latent_div = tape.mean(l_set, 0)?;
        let partial = tape.sub(reconstruction, context_div)?;
        let total = tape.sub(partial, latent_div)?;
        let ps = tape.sub(r_set, c_set)?;
        let per_set_total = tape.sub(ps, l_set)?;
        Ok(ElboGraph {
            reconstruction,
            context_div,
            latent_div,
            total,
            per_set_total,
            context: ctx,
        })
    }

    /// Averages `noises.len()` single-sample bound evaluations.
    pub fn elbo_graph_multi(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        batch: &DatasetBatch,
        noises: &[ElboNoise],
    ) -> Result<ElboGraph> {
        if noises.is_empty() {
            return Err(Error::InvalidArgument("need at least one noise draw".into()));
        }
        if noises.len() == 1 {
            return self.elbo_graph(tape, leaves, batch, &noises[0]);
        }
        let graphs: Vec<ElboGraph> = noises
            .iter()
            .map(|n| self.elbo_graph(tape, leaves, batch, n))
            .collect::<Result<_>>()?;
        let inv = 1.0 / noises.len() as f64;
        let avg = |tape: &mut Tape, ids: Vec<VarId>| -> Result<VarId> {
            let mut acc = ids[0];
            for id in &ids[1..] {
                acc = tape.add(acc, *id)?;
            }
            tape.scale(acc, inv)
        };
        let reconstruction = avg(tape, graphs.iter().map(|g| g.reconstruction).collect())?;
        let context_div = avg(tape, graphs.iter().map(|g| g.context_div).collect())?;
        let latent_div = avg(tape, graphs.iter().map(|g| g.latent_div).collect())?;
        let total = avg(tape, graphs.iter().map(|g| g.total).collect())?;
        let per_set_total = avg(tape, graphs.iter().map(|g| g.per_set_total).collect())?;
        let context = graphs[0].context;
        Ok(ElboGraph {
            reconstruction,
            context_div,
            latent_div,
            total,
            per_set_total,
            context,
        })
    }

    // ── value-level operations ───────────────────────────────────────

    /// Posterior over the context for a minibatch of datasets. Sample
    /// dropout applies only when `training` is set and the configured rate
    /// is positive.
    pub fn encode_context(
        &self,
        batch: &DatasetBatch,
        rng: &mut impl Rng,
        training: bool,
    ) -> Result<GaussianValue> {
        let keep = if training && self.cfg.sample_dropout_rate > 0.0 {
            Some(KeepMask::draw(
                batch.batch_size(),
                batch.sample_size(),
                self.cfg.sample_dropout_rate,
                rng,
            ))
        } else {
            None
        };
        self.encode_context_with_mask(batch, keep.as_ref())
    }

    pub fn encode_context_with_mask(
        &self,
        batch: &DatasetBatch,
        keep: Option<&KeepMask>,
    ) -> Result<GaussianValue> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, false);
        let x3 = tape.constant(batch.values.clone());
        let (ctx, _) = self.context_graph(&mut tape, &leaves, x3, keep)?;
        Ok(GaussianValue {
            mean: tape.value(ctx.mean).clone(),
            log_var: tape.value(ctx.log_var).clone(),
        })
    }

    /// Context posterior of a single raw set (rows, n_features), dropout
    /// off.
    pub fn context_posterior(&self, set: &Tensor) -> Result<GaussianValue> {
        let batch = DatasetBatch::from_set(set)?;
        self.encode_context_with_mask(&batch, None)
    }

    /// Draws the latent chain top-down given per-point inputs `x`
    /// (rows, n_features) and per-point contexts `c` (rows, c_dim).
    pub fn infer_latents(
        &self,
        x: &Tensor,
        c: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<LatentPath> {
        let rows = *x.shape().first().unwrap_or(&0);
        let eps: Vec<Tensor> = (0..self.cfg.n_stochastic_layers)
            .map(|_| {
                let mut t = Tensor::zeros(&[rows, self.cfg.z_dim]);
                fill_standard_normal(rng, t.data_mut());
                t
            })
            .collect();
        self.infer_latents_with_noise(x, c, &eps)
    }

    pub fn infer_latents_with_noise(
        &self,
        x: &Tensor,
        c: &Tensor,
        eps: &[Tensor],
    ) -> Result<LatentPath> {
        if eps.len() != self.cfg.n_stochastic_layers {
            return Err(Error::InvalidArgument(format!(
                "expected {} noise layers, got {}",
                self.cfg.n_stochastic_layers,
                eps.len()
            )));
        }
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, false);
        let xv = tape.constant(x.clone());
        let cv = tape.constant(c.clone());
        let x_inf = if self.cfg.share_instance_encoder {
            apply_mlp(&mut tape, &self.stat_encoder, &leaves.stat_encoder, xv)?
        } else {
            xv
        };
        let mut parent = None;
        let mut samples = Vec::new();
        let mut params = Vec::new();
        for level in 0..self.cfg.n_stochastic_layers {
            let q = self.inference_graph(&mut tape, &leaves, level, parent, x_inf, cv)?;
            let e = tape.constant(eps[level].clone());
            let z = reparam_sample(&mut tape, &q, e)?;
            params.push(GaussianValue {
                mean: tape.value(q.mean).clone(),
                log_var: tape.value(q.log_var).clone(),
            });
            samples.push(tape.value(z).clone());
            parent = Some(z);
        }
        Ok(LatentPath { samples, params })
    }

    /// Latent decoder parameters for paper-style `layer` ∈ 1..=L (L = top).
    /// The top layer takes no parent sample; every other layer requires
    /// one.
    pub fn decode_latent(
        &self,
        z_next: Option<&Tensor>,
        c: &Tensor,
        layer: usize,
    ) -> Result<GaussianValue> {
        let levels = self.cfg.n_stochastic_layers;
        if layer == 0 || layer > levels {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} outside 1..={levels}"
            )));
        }
        let top = layer == levels;
        if top && z_next.is_some() {
            return Err(Error::InvalidArgument(
                "the top latent layer takes no parent sample".into(),
            ));
        }
        if !top && z_next.is_none() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} requires the z_{} sample",
                layer + 1
            )));
        }
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, false);
        let cv = tape.constant(c.clone());
        let parent = z_next.map(|z| tape.constant(z.clone()));
        let level = levels - layer;
        let p = self.latent_decoder_graph(&mut tape, &leaves, level, parent, cv)?;
        Ok(GaussianValue {
            mean: tape.value(p.mean).clone(),
            log_var: tape.value(p.log_var).clone(),
        })
    }

    /// Observation-decoder parameters for top-down latents `z_L … z_1`.
    pub fn decode_observation(&self, latents: &[&Tensor], c: &Tensor) -> Result<LikelihoodValue> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, false);
        let ids: Vec<VarId> = latents.iter().map(|z| tape.constant((*z).clone())).collect();
        let cv = tape.constant(c.clone());
        let lik = self.observation_graph(&mut tape, &leaves, &ids, cv)?;
        Ok(match lik {
            LikelihoodGraph::Gaussian(p) => LikelihoodValue::Gaussian(GaussianValue {
                mean: tape.value(p.mean).clone(),
                log_var: tape.value(p.log_var).clone(),
            }),
            LikelihoodGraph::Bernoulli { probs, .. } => LikelihoodValue::Bernoulli {
                probs: tape.value(probs).clone(),
            },
        })
    }

    /// Single-sample Monte-Carlo estimate of the bound.
    pub fn elbo(
        &self,
        batch: &DatasetBatch,
        rng: &mut impl Rng,
        training: bool,
    ) -> Result<ElboTerms> {
        let noise = ElboNoise::draw(
            &self.cfg,
            batch.batch_size(),
            batch.sample_size(),
            training,
            rng,
        );
        self.elbo_with_noise(batch, &noise)
    }

    pub fn elbo_with_noise(&self, batch: &DatasetBatch, noise: &ElboNoise) -> Result<ElboTerms> {
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, false);
        let graph = self.elbo_graph(&mut tape, &leaves, batch, noise)?;
        graph.terms(&tape)
    }

    /// Bound averaged over `n_samples` independent noise draws.
    pub fn elbo_multi(
        &self,
        batch: &DatasetBatch,
        rng: &mut impl Rng,
        training: bool,
        n_samples: usize,
    ) -> Result<ElboTerms> {
        let noises: Vec<ElboNoise> = (0..n_samples.max(1))
            .map(|_| {
                ElboNoise::draw(
                    &self.cfg,
                    batch.batch_size(),
                    batch.sample_size(),
                    training,
                    rng,
                )
            })
            .collect();
        let mut tape = Tape::new();
        let leaves = self.leaves(&mut tape, false);
        let graph = self.elbo_graph_multi(&mut tape, &leaves, batch, &noises)?;
        graph.terms(&tape)
    }
}
