//! Inference-time procedures over a trained model: dataset sampling,
//! conditional sampling, representative subsampling and few-shot
//! classification. All four treat the model as read-only; independent
//! units (episodes, candidate subsets) may run in parallel and are reduced
//! in deterministic order.


use rand::Rng;

use crate::data::Corpus;
use crate::distributions::{kl_diag_scalar, reparam_sample, GaussianValue};
use crate::error::{Error, Result};
use crate::model::{Likelihood, LikelihoodGraph, Model};
use crate::par::try_indexed_map;
use crate::rng::{domains, fill_standard_normal, stream_rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Episodes averaged by the few-shot evaluation protocol by default.
pub const DEFAULT_EPISODES: usize = 100;

/// Context posterior of one conditioning set.
#[derive(Clone, Debug)]
pub struct ContextPosterior {
    pub params: GaussianValue,
    pub source_size: usize,
}

/// q(c|D) for a raw set of shape (m, n_features), dropout off.
pub fn context_posterior(model: &Model, set: &Tensor) -> Result<ContextPosterior> {
    let params = model.context_posterior(set)?;
    Ok(ContextPosterior {
        params,
        source_size: set.shape()[0],
    })
}

/// Noise for generating `k` points: per-layer latent noise (top-down) and
/// observation noise (standard normals for a gaussian likelihood, uniforms
/// for bernoulli).
#[derive(Clone, Debug)]
pub struct GenerationNoise {
    pub z_eps: Vec<Tensor>,
    pub x_noise: Tensor,
}

impl GenerationNoise {
    /// Draw order: each latent layer top-down, then the observation noise.
    pub fn draw(model: &Model, k: usize, rng: &mut impl Rng) -> GenerationNoise {
        let cfg = model.config();
        let z_eps = (0..cfg.n_stochastic_layers)
            .map(|_| {
                let mut t = Tensor::zeros(&[k, cfg.z_dim]);
                fill_standard_normal(rng, t.data_mut());
                t
            })
            .collect();
        let mut x_noise = Tensor::zeros(&[k, cfg.n_features]);
        match cfg.likelihood {
            Likelihood::Gaussian => fill_standard_normal(rng, x_noise.data_mut()),
            Likelihood::Bernoulli => {
                for v in x_noise.data_mut() {
                    *v = rng.gen::<f64>();
                }
            }
        }
        GenerationNoise { z_eps, x_noise }
    }

    pub fn zeros(model: &Model, k: usize) -> GenerationNoise {
        let cfg = model.config();
        GenerationNoise {
            z_eps: (0..cfg.n_stochastic_layers)
                .map(|_| Tensor::zeros(&[k, cfg.z_dim]))
                .collect(),
            x_noise: Tensor::zeros(&[k, cfg.n_features]),
        }
    }
}

/// Runs the generative chain downward from a fixed context row.
fn generate_with_context(model: &Model, c_row: &[f64], noise: &GenerationNoise) -> Result<Tensor> {
    let cfg = model.config();
    if c_row.len() != cfg.c_dim {
        return Err(Error::ShapeMismatch {
            op: "generate",
            lhs: vec![cfg.c_dim],
            rhs: vec![c_row.len()],
        });
    }
    let k = noise.x_noise.shape()[0];
    if k == 0 {
        return Ok(Tensor::zeros(&[0, cfg.n_features]));
    }
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape, false);
    let c_one = tape.constant(Tensor::new(vec![1, cfg.c_dim], c_row.to_vec())?);
    let c_rep = tape.repeat_rows(c_one, k)?;
    let mut parent = None;
    let mut zs = Vec::with_capacity(cfg.n_stochastic_layers);
    for level in 0..cfg.n_stochastic_layers {
        let p = model.latent_decoder_graph(&mut tape, &leaves, level, parent, c_rep)?;
        let eps = tape.constant(noise.z_eps[level].clone());
        let z = reparam_sample(&mut tape, &p, eps)?;
        zs.push(z);
        parent = Some(z);
    }
    let lik = model.observation_graph(&mut tape, &leaves, &zs, c_rep)?;
    let x = match lik {
        LikelihoodGraph::Gaussian(p) => {
            let eps = tape.constant(noise.x_noise.clone());
            let x = reparam_sample(&mut tape, &p, eps)?;
            tape.value(x).clone()
        }
        LikelihoodGraph::Bernoulli { probs, .. } => {
            let p = tape.value(probs).data();
            let data: Vec<f64> = noise
                .x_noise
                .data()
                .iter()
                .zip(p)
                .map(|(&u, &pv)| f64::from(u < pv))
                .collect();
            Tensor::new(vec![k, cfg.n_features], data)?
        }
    };
    Ok(x)
}

/// Draws a dataset of size `k` from the model: c ~ p(c), then the latent
/// chain and observation model per point. Returns a (k, n_features)
/// tensor.
pub fn sample_dataset(model: &Model, k: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut c = vec![0.0; model.config().c_dim];
    fill_standard_normal(rng, &mut c);
    let noise = GenerationNoise::draw(model, k, rng);
    generate_with_context(model, &c, &noise)
}

/// [`sample_dataset`] with an explicit prior draw and generation noise.
pub fn sample_dataset_with_noise(
    model: &Model,
    c_prior_draw: &Tensor,
    noise: &GenerationNoise,
) -> Result<Tensor> {
    generate_with_context(model, c_prior_draw.data(), noise)
}

/// Draws `k` points conditioned on a set: the context is fixed to the mean
/// of q(c|D_in), never sampled. `k` may be zero, yielding an empty output.
pub fn conditional_sample(
    model: &Model,
    conditioning: &Tensor,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let noise = GenerationNoise::draw(model, k, rng);
    conditional_sample_with_noise(model, conditioning, &noise)
}

pub fn conditional_sample_with_noise(
    model: &Model,
    conditioning: &Tensor,
    noise: &GenerationNoise,
) -> Result<Tensor> {
    if conditioning.shape()[0] == 0 {
        return Err(Error::EmptyDataset);
    }
    let posterior = model.context_posterior(conditioning)?;
    generate_with_context(model, posterior.mean.data(), noise)
}

fn subset_rows(set: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let n = set.shape()[1];
    let mut data = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        data.extend_from_slice(set.row(i));
    }
    Tensor::new(vec![indices.len(), n], data)
}

/// KL(q(c|D) ‖ q(c|S)) for the subset of `set` selected by `indices`.
pub fn subsample_kl(model: &Model, set: &Tensor, indices: &[usize]) -> Result<f64> {
    let full = model.context_posterior(set)?;
    let subset = model.context_posterior(&subset_rows(set, indices)?)?;
    kl_diag_scalar(&full, &subset)
}

/// Greedy backward elimination: starting from all m points, repeatedly
/// removes the point whose removal keeps KL(q(c|D) ‖ q(c|S)) smallest,
/// until `k` points remain. The reference posterior is q(c|D) over the
/// full set throughout. Ties break toward the smallest index; surviving
/// indices come back in original order.
pub fn representative_subsample(model: &Model, set: &Tensor, k: usize) -> Result<Vec<usize>> {
    let m = set.shape()[0];
    if k == 0 || k >= m {
        return Err(Error::InvalidArgument(format!(
            "subset size k={k} must satisfy 1 <= k < m={m}"
        )));
    }
    let reference = model.context_posterior(set)?;
    let mut kept: Vec<usize> = (0..m).collect();
    while kept.len() > k {
        let kls = try_indexed_map(kept.len(), |drop_pos| {
            let candidate: Vec<usize> = kept
                .iter()
                .copied()
                .enumerate()
                .filter(|(pos, _)| *pos != drop_pos)
                .map(|(_, idx)| idx)
                .collect();
            let posterior = model.context_posterior(&subset_rows(set, &candidate)?)?;
            kl_diag_scalar(&reference, &posterior)
        })?;
        let mut best = 0;
        for (pos, &kl) in kls.iter().enumerate() {
            if kl < kls[best] {
                best = pos;
            }
        }
        kept.remove(best);
    }
    Ok(kept)
}

/// argmin_i KL(N_i ‖ N_x) over class contexts; ties go to the smallest
/// class index.
pub fn classify_contexts(class_params: &[GaussianValue], query: &GaussianValue) -> Result<usize> {
    if class_params.len() < 2 {
        return Err(Error::InvalidArgument(
            "classification needs at least two classes".into(),
        ));
    }
    let mut best = 0;
    let mut best_kl = f64::INFINITY;
    for (i, p) in class_params.iter().enumerate() {
        let kl = kl_diag_scalar(p, query)?;
        if kl < best_kl {
            best = i;
            best_kl = kl;
        }
    }
    Ok(best)
}

/// K-way few-shot classification of a query set (a singleton for a single
/// point) against one labelled support set per class.
pub fn few_shot_classify(model: &Model, class_sets: &[Tensor], query: &Tensor) -> Result<usize> {
    if class_sets.len() < 2 {
        return Err(Error::InvalidArgument(
            "classification needs at least two classes".into(),
        ));
    }
    for set in class_sets {
        if set.shape()[0] == 0 {
            return Err(Error::EmptyDataset);
        }
    }
    let contexts: Vec<GaussianValue> = class_sets
        .iter()
        .map(|s| model.context_posterior(s))
        .collect::<Result<_>>()?;
    let q = model.context_posterior(query)?;
    classify_contexts(&contexts, &q)
}

/// Episode-averaged few-shot accuracy.
#[derive(Clone, Debug)]
pub struct FewShotReport {
    pub mean_accuracy: f64,
    pub std_error: f64,
    pub episode_accuracies: Vec<f64>,
}

/// Runs `n_episodes` classification episodes over a labelled corpus. Per
/// episode: sample `k_way` classes, `k_shot` support sets per class
/// (merged into one conditioning set), and test every remaining set of the
/// chosen classes. Episodes use independent `(seed, episode)` streams and
/// are reduced in episode order.
pub fn fewshot_episode_eval(
    model: &Model,
    corpus: &Corpus,
    k_shot: usize,
    k_way: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<FewShotReport> {
    if k_shot == 0 || k_way < 2 || n_episodes == 0 {
        return Err(Error::InvalidArgument(format!(
            "need k_shot >= 1, k_way >= 2, episodes >= 1; got {k_shot}, {k_way}, {n_episodes}"
        )));
    }
    let eligible: Vec<(u32, Vec<usize>)> = corpus
        .sets_by_class()
        .into_iter()
        .filter(|(_, members)| members.len() >= k_shot + 1)
        .collect();
    if eligible.len() < k_way {
        return Err(Error::InvalidArgument(format!(
            "corpus has {} classes with at least {} sets, need {}",
            eligible.len(),
            k_shot + 1,
            k_way
        )));
    }

    // Query posteriors depend only on the set, so compute them once.
    let query_posteriors: Vec<Option<GaussianValue>> =
        try_indexed_map(corpus.len(), |i| match corpus.sets[i].label {
            Some(_) => Ok(Some(model.context_posterior(&corpus.sets[i].values)?)),
            None => Ok(None),
        })?;

    let episode_accuracies = try_indexed_map(n_episodes, |e| {
        let mut rng = stream_rng(seed, domains::EPISODE, e as u64);
        let class_choice = sample_without_replacement(eligible.len(), k_way, &mut rng);
        let mut supports = Vec::with_capacity(k_way);
        let mut queries: Vec<(usize, usize)> = Vec::new(); // (class position, set index)
        for (pos, &ci) in class_choice.iter().enumerate() {
            let members = &eligible[ci].1;
            let chosen = sample_without_replacement(members.len(), k_shot, &mut rng);
            let mut rows = Vec::new();
            for &j in &chosen {
                rows.extend_from_slice(corpus.sets[members[j]].values.data());
            }
            let merged = Tensor::new(vec![k_shot * corpus.sample_size, corpus.n_features], rows)?;
            supports.push(model.context_posterior(&merged)?);
            for (j, &si) in members.iter().enumerate() {
                if !chosen.contains(&j) {
                    queries.push((pos, si));
                }
            }
        }
        let mut correct = 0usize;
        for &(class_pos, set_idx) in &queries {
            let q = query_posteriors[set_idx]
                .as_ref()
                .expect("eligible sets are labelled");
            if classify_contexts(&supports, q)? == class_pos {
                correct += 1;
            }
        }
        Ok(correct as f64 / queries.len() as f64)
    })?;

    let n = episode_accuracies.len() as f64;
    let mean = episode_accuracies.iter().sum::<f64>() / n;
    let var = if episode_accuracies.len() > 1 {
        episode_accuracies
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    Ok(FewShotReport {
        mean_accuracy: mean,
        std_error: (var / n).sqrt(),
        episode_accuracies,
    })
}

/// First `k` entries of a seeded partial Fisher–Yates shuffle of 0..n.
pub(crate) fn sample_without_replacement(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
