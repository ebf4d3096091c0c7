use super::*;
use crate::data::DatasetBatch;
use crate::rng::stream_rng;
use rand::Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_features: 2,
        c_dim: 3,
        z_dim: 2,
        n_stochastic_layers: 1,
        hidden_width: 8,
        hidden_depth: 2,
        ..ModelConfig::synthetic_1d()
    }
}

fn random_batch(b: usize, s: usize, n: usize, seed: u64) -> DatasetBatch {
    let mut rng = stream_rng(seed, 0xBA7C, 0);
    let mut values = Tensor::zeros(&[b, s, n]);
    fill_standard_normal(&mut rng, values.data_mut());
    DatasetBatch {
        values,
        set_ids: (0..b as u32).collect(),
    }
}

// ── manual re-composition oracles ────────────────────────────────────

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Plain-loop dense layer on a single row, reading weights by name.
fn manual_dense(model: &Model, name: &str, x: &[f64], act: bool) -> Vec<f64> {
    let w = model.param_value(&format!("{name}.w")).unwrap();
    let b = model.param_value(&format!("{name}.b")).unwrap();
    let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), in_dim);
    let mut out = vec![0.0; out_dim];
    for j in 0..out_dim {
        let mut acc = 0.0;
        for i in 0..in_dim {
            acc += x[i] * w.data()[i * out_dim + j];
        }
        acc += b.data()[j];
        out[j] = if act { relu(acc) } else { acc };
    }
    out
}

fn manual_mlp(model: &Model, prefix: &str, depth: usize, mut x: Vec<f64>) -> Vec<f64> {
    for l in 0..depth {
        x = manual_dense(model, &format!("{prefix}.l{l}"), &x, true);
    }
    x
}

/// Manual Gaussian head: hidden stack, mean head, clamped log-var head.
fn manual_head(model: &Model, prefix: &str, depth: usize, x: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let h = manual_mlp(model, &format!("{prefix}.hidden"), depth, x);
    let mean = manual_dense(model, &format!("{prefix}.mean"), &h, false);
    let lv: Vec<f64> = manual_dense(model, &format!("{prefix}.log_var"), &h, false)
        .into_iter()
        .map(|v| v.clamp(-10.0, 10.0))
        .collect();
    (mean, lv)
}

fn manual_kl_scalar(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    0.5 * (lp - lq + (lq.exp() + (mq - mp) * (mq - mp)) / lp.exp() - 1.0)
}

fn manual_log_pdf_scalar(x: f64, m: f64, lv: f64) -> f64 {
    -0.5 * (1.8378770664093453 + lv + (x - m) * (x - m) / lv.exp())
}

// ── encode_context ───────────────────────────────────────────────────

#[test]
fn encode_context_is_permutation_invariant() {
    let model = Model::new(tiny_config(), 3).unwrap();
    let batch = random_batch(2, 6, 2, 10);
    let base = model.encode_context_with_mask(&batch, None).unwrap();
    let mut rng = stream_rng(1, 0, 0);
    for _ in 0..5 {
        let mut permuted = batch.clone();
        for b in 0..2 {
            let mut order: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for (dst, &src) in order.iter().enumerate() {
                for f in 0..2 {
                    permuted.values.data_mut()[(b * 6 + dst) * 2 + f] =
                        batch.values.data()[(b * 6 + src) * 2 + f];
                }
            }
        }
        let out = model.encode_context_with_mask(&permuted, None).unwrap();
        for (a, b) in base.mean.data().iter().zip(out.mean.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in base.log_var.data().iter().zip(out.log_var.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn repeated_point_matches_singleton_when_count_feature_off() {
    let model = Model::new(tiny_config(), 4).unwrap();
    let point = [0.4, -1.2];
    let singleton = DatasetBatch::from_set(&Tensor::new(vec![1, 2], point.to_vec()).unwrap()).unwrap();
    let repeated = DatasetBatch::from_set(
        &Tensor::new(vec![5, 2], point.repeat(5)).unwrap(),
    )
    .unwrap();
    let a = model.encode_context_with_mask(&singleton, None).unwrap();
    let b = model.encode_context_with_mask(&repeated, None).unwrap();
    for (x, y) in a.mean.data().iter().zip(b.mean.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.log_var.data().iter().zip(b.log_var.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn repeated_point_differs_from_singleton_with_count_feature() {
    let cfg = ModelConfig {
        append_count_feature: true,
        max_set_size: 10,
        ..tiny_config()
    };
    let model = Model::new(cfg, 4).unwrap();
    let point = [0.4, -1.2];
    let singleton = DatasetBatch::from_set(&Tensor::new(vec![1, 2], point.to_vec()).unwrap()).unwrap();
    let repeated =
        DatasetBatch::from_set(&Tensor::new(vec![5, 2], point.repeat(5)).unwrap()).unwrap();
    let a = model.encode_context_with_mask(&singleton, None).unwrap();
    let b = model.encode_context_with_mask(&repeated, None).unwrap();
    let max_diff = a
        .mean
        .data()
        .iter()
        .zip(b.mean.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff > 1e-6, "count feature should change the posterior");
}

#[test]
fn encode_context_matches_manual_recomposition() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 5).unwrap();
    let batch = random_batch(1, 5, 2, 11);
    let out = model.encode_context_with_mask(&batch, None).unwrap();

    // step-by-step: e_i = encoder(x_i); v = mean e_i; post_pool(v)
    let mut pooled = vec![0.0; cfg.hidden_width];
    for s in 0..5 {
        let x = &batch.values.data()[s * 2..(s + 1) * 2];
        let e = manual_mlp(&model, "stat.enc", cfg.hidden_depth, x.to_vec());
        for (acc, v) in pooled.iter_mut().zip(&e) {
            *acc += v;
        }
    }
    for v in &mut pooled {
        *v /= 5.0;
    }
    let (mean, lv) = manual_head(&model, "stat.post", cfg.hidden_depth, pooled);
    for (a, b) in out.mean.data().iter().zip(&mean) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    for (a, b) in out.log_var.data().iter().zip(&lv) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let model = Model::new(tiny_config(), 3).unwrap();
    let batch = DatasetBatch {
        values: Tensor::zeros(&[1, 0, 2]),
        set_ids: vec![0],
    };
    assert!(matches!(
        model.encode_context_with_mask(&batch, None),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn keep_mask_always_retains_a_sample() {
    let mut rng = stream_rng(2, 0, 0);
    for _ in 0..50 {
        let mask = KeepMask::draw(4, 6, 0.95, &mut rng);
        for &c in mask.counts() {
            assert!(c >= 1);
        }
    }
}

// ── latent chain ─────────────────────────────────────────────────────

#[test]
fn single_layer_chain_is_one_draw() {
    let model = Model::new(tiny_config(), 6).unwrap();
    let x = Tensor::new(vec![3, 2], vec![0.1; 6]).unwrap();
    let c = Tensor::new(vec![3, 3], vec![0.2; 9]).unwrap();
    let mut rng = stream_rng(3, 0, 0);
    let path = model.infer_latents(&x, &c, &mut rng).unwrap();
    assert_eq!(path.samples.len(), 1);
    assert_eq!(path.params.len(), 1);
    assert_eq!(path.samples[0].shape(), &[3, 2]);
}

#[test]
fn zero_noise_returns_the_mean_path() {
    let model = Model::new(tiny_config(), 6).unwrap();
    let x = Tensor::new(vec![2, 2], vec![0.3, -0.4, 1.0, 0.2]).unwrap();
    let c = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
    let eps = vec![Tensor::zeros(&[2, 2])];
    let path = model.infer_latents_with_noise(&x, &c, &eps).unwrap();
    assert_eq!(path.samples[0].data(), path.params[0].mean.data());
}

#[test]
fn deep_chain_propagates_top_noise_downward() {
    let cfg = ModelConfig {
        n_stochastic_layers: 3,
        ..tiny_config()
    };
    let model = Model::new(cfg, 7).unwrap();
    let x = Tensor::new(vec![1, 2], vec![0.6, -0.1]).unwrap();
    let c = Tensor::new(vec![1, 3], vec![0.2, 0.1, -0.3]).unwrap();
    let zeros = vec![Tensor::zeros(&[1, 2]); 3];
    let mut bumped = zeros.clone();
    bumped[0] = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
    let base = model.infer_latents_with_noise(&x, &c, &zeros).unwrap();
    let moved = model.infer_latents_with_noise(&x, &c, &bumped).unwrap();
    // layer L params don't depend on z_L noise…
    assert_eq!(base.params[0].mean.data(), moved.params[0].mean.data());
    // …but layer L−1 params must.
    let diff: f64 = base.params[1]
        .mean
        .data()
        .iter()
        .zip(moved.params[1].mean.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 1e-9, "perturbing z_L noise must move layer L−1 params");
}

#[test]
fn latent_decoder_layer_contract() {
    let cfg = ModelConfig {
        n_stochastic_layers: 2,
        ..tiny_config()
    };
    let model = Model::new(cfg, 8).unwrap();
    let c = Tensor::new(vec![1, 3], vec![0.7, -0.2, 0.4]).unwrap();
    let z = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();

    // top layer takes no parent
    let top = model.decode_latent(None, &c, 2).unwrap();
    assert_eq!(top.mean.shape(), &[1, 2]);
    assert!(model.decode_latent(Some(&z), &c, 2).is_err());
    // lower layer requires one
    assert!(model.decode_latent(None, &c, 1).is_err());
    let low = model.decode_latent(Some(&z), &c, 1).unwrap();
    assert_eq!(low.mean.shape(), &[1, 2]);

    // deterministic
    let again = model.decode_latent(None, &c, 2).unwrap();
    assert_eq!(top.mean.data(), again.mean.data());
    assert_eq!(top.log_var.data(), again.log_var.data());
}

#[test]
fn latent_decoder_is_differentiable_in_c() {
    let model = Model::new(tiny_config(), 9).unwrap();
    let point = Tensor::new(vec![1, 3], vec![0.3, -0.6, 0.1]).unwrap();
    let err = crate::gradcheck::grad_check(
        |tape, c| {
            let leaves = model.leaves(tape, false);
            let p = model.latent_decoder_graph(tape, &leaves, 0, None, c)?;
            let s = tape.add(p.mean, p.log_var)?;
            tape.sum_all(s)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "grad err {err}");
}

// ── observation decoder ──────────────────────────────────────────────

#[test]
fn bernoulli_probabilities_stay_in_unit_interval() {
    let cfg = ModelConfig {
        likelihood: Likelihood::Bernoulli,
        ..tiny_config()
    };
    let model = Model::new(cfg, 10).unwrap();
    let z = Tensor::new(vec![4, 2], vec![3.0, -3.0, 0.0, 8.0, -8.0, 1.0, 0.5, -0.5]).unwrap();
    let c = Tensor::new(vec![4, 3], vec![0.3; 12]).unwrap();
    match model.decode_observation(&[&z], &c).unwrap() {
        LikelihoodValue::Bernoulli { probs } => {
            for &p in probs.data() {
                assert!(p > 0.0 && p < 1.0);
            }
        }
        _ => panic!("expected bernoulli output"),
    }
    // deterministic
    let a = model.decode_observation(&[&z], &c).unwrap();
    let b = model.decode_observation(&[&z], &c).unwrap();
    match (a, b) {
        (LikelihoodValue::Bernoulli { probs: pa }, LikelihoodValue::Bernoulli { probs: pb }) => {
            assert_eq!(pa.data(), pb.data());
        }
        _ => unreachable!(),
    }
}

#[test]
fn observation_gradients_reach_every_latent_and_the_context() {
    let cfg = ModelConfig {
        n_stochastic_layers: 2,
        ..tiny_config()
    };
    let model = Model::new(cfg, 11).unwrap();
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape, false);
    let z1 = tape.leaf(Tensor::new(vec![2, 2], vec![0.4; 4]).unwrap(), true);
    let z2 = tape.leaf(Tensor::new(vec![2, 2], vec![-0.3; 4]).unwrap(), true);
    let c = tape.leaf(Tensor::new(vec![2, 3], vec![0.2; 6]).unwrap(), true);
    let lik = model
        .observation_graph(&mut tape, &leaves, &[z1, z2], c)
        .unwrap();
    let loss = match lik {
        LikelihoodGraph::Gaussian(p) => {
            let s = tape.add(p.mean, p.log_var).unwrap();
            tape.sum_all(s).unwrap()
        }
        _ => unreachable!(),
    };
    tape.backward(loss).unwrap();
    for (name, id) in [("z1", z1), ("z2", z2), ("c", c)] {
        let g = tape.grad(id).unwrap_or(&[]);
        assert!(
            g.iter().any(|&v| v != 0.0),
            "no gradient flowed into {name}"
        );
    }
}

// ── elbo ─────────────────────────────────────────────────────────────

/// Zeroes the statistic network heads so q(c|D) = N(0, I) exactly.
fn freeze_context_at_prior(model: &mut Model) {
    for head in ["mean", "log_var"] {
        let w = model
            .param_value(&format!("stat.post.{head}.w"))
            .unwrap()
            .shape()
            .to_vec();
        model
            .set_param_value(&format!("stat.post.{head}.w"), Tensor::zeros(&w))
            .unwrap();
        let b = model
            .param_value(&format!("stat.post.{head}.b"))
            .unwrap()
            .shape()
            .to_vec();
        model
            .set_param_value(&format!("stat.post.{head}.b"), Tensor::zeros(&b))
            .unwrap();
    }
}

/// Rewires inference layer weights so q(z_i|…, x, c) ignores x and equals
/// the latent decoder p(z_i|…, c) for every input.
fn tie_inference_to_decoder(model: &mut Model, layer: usize, parent_dim: usize) {
    let cfg = model.config().clone();
    let inf = format!("inf.z{layer}");
    let gen = format!("gen.z{layer}");
    let w_gen = model.param_value(&format!("{gen}.hidden.l0.w")).unwrap().clone();
    let gen_in = w_gen.shape()[0];
    let width = w_gen.shape()[1];
    let inf_in = parent_dim + cfg.n_features + cfg.c_dim;
    assert_eq!(gen_in, parent_dim + cfg.c_dim);
    let mut w_inf = vec![0.0; inf_in * width];
    // parent block
    for r in 0..parent_dim {
        w_inf[r * width..(r + 1) * width]
            .copy_from_slice(&w_gen.data()[r * width..(r + 1) * width]);
    }
    // x block stays zero; c block copies the decoder's c rows
    for r in 0..cfg.c_dim {
        let dst = (parent_dim + cfg.n_features + r) * width;
        let src = (parent_dim + r) * width;
        w_inf[dst..dst + width].copy_from_slice(&w_gen.data()[src..src + width]);
    }
    model
        .set_param_value(
            &format!("{inf}.hidden.l0.w"),
            Tensor::new(vec![inf_in, width], w_inf).unwrap(),
        )
        .unwrap();
    // remaining layers and heads copy over unchanged
    let mut names: Vec<(String, String)> = vec![(format!("{inf}.hidden.l0.b"), format!("{gen}.hidden.l0.b"))];
    for l in 1..cfg.hidden_depth {
        names.push((format!("{inf}.hidden.l{l}.w"), format!("{gen}.hidden.l{l}.w")));
        names.push((format!("{inf}.hidden.l{l}.b"), format!("{gen}.hidden.l{l}.b")));
    }
    for head in ["mean", "log_var"] {
        names.push((format!("{inf}.{head}.w"), format!("{gen}.{head}.w")));
        names.push((format!("{inf}.{head}.b"), format!("{gen}.{head}.b")));
    }
    for (dst, src) in names {
        let v = model.param_value(&src).unwrap().clone();
        model.set_param_value(&dst, v).unwrap();
    }
}

#[test]
fn context_divergence_vanishes_when_posterior_is_the_prior() {
    let mut model = Model::new(tiny_config(), 12).unwrap();
    freeze_context_at_prior(&mut model);
    let batch = random_batch(2, 4, 2, 13);
    let noise = ElboNoise::zeros(model.config(), 2, 4);
    let terms = model.elbo_with_noise(&batch, &noise).unwrap();
    assert_eq!(terms.context_div, 0.0);
}

#[test]
fn latent_divergence_vanishes_when_inference_matches_decoder() {
    for layers in [1usize, 2] {
        let cfg = ModelConfig {
            n_stochastic_layers: layers,
            ..tiny_config()
        };
        let mut model = Model::new(cfg.clone(), 14).unwrap();
        for layer in 1..=layers {
            let parent = if layer == layers { 0 } else { cfg.z_dim };
            tie_inference_to_decoder(&mut model, layer, parent);
        }
        let batch = random_batch(2, 3, 2, 15);
        let mut rng = stream_rng(16, 0, 0);
        let terms = model.elbo(&batch, &mut rng, false).unwrap();
        assert!(
            terms.latent_div.abs() < 1e-12,
            "L={layers}: latent_div {}",
            terms.latent_div
        );
    }
}

#[test]
fn frozen_variational_distributions_reduce_total_to_reconstruction() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), 17).unwrap();
    freeze_context_at_prior(&mut model);
    tie_inference_to_decoder(&mut model, 1, 0);
    let batch = random_batch(2, 4, 2, 18);
    let mut rng = stream_rng(19, 0, 0);
    let terms = model.elbo(&batch, &mut rng, false).unwrap();
    assert_eq!(terms.context_div, 0.0);
    assert!(terms.latent_div.abs() < 1e-12);
    assert_eq!(terms.total, terms.reconstruction - terms.context_div - terms.latent_div);
    assert!((terms.total - terms.reconstruction).abs() < 1e-12);
}

#[test]
fn single_point_single_layer_bound_matches_manual_derivation() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 20).unwrap();
    let x = [0.8, -0.3];
    let batch = DatasetBatch::from_set(&Tensor::new(vec![1, 2], x.to_vec()).unwrap()).unwrap();
    let c_eps = [0.7, -1.1, 0.4];
    let z_eps = [0.9, 0.25];
    let noise = ElboNoise {
        c_eps: Tensor::new(vec![1, 3], c_eps.to_vec()).unwrap(),
        z_eps: vec![Tensor::new(vec![1, 2], z_eps.to_vec()).unwrap()],
        keep: None,
    };
    let terms = model.elbo_with_noise(&batch, &noise).unwrap();

    // Independent evaluation of the single-layer bound on the same draw.
    let e = manual_mlp(&model, "stat.enc", cfg.hidden_depth, x.to_vec());
    let (mu_c, lv_c) = manual_head(&model, "stat.post", cfg.hidden_depth, e);
    let c: Vec<f64> = mu_c
        .iter()
        .zip(&lv_c)
        .zip(&c_eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    let mut qin = x.to_vec();
    qin.extend(&c);
    let (mu_q, lv_q) = manual_head(&model, "inf.z1", cfg.hidden_depth, qin);
    let z: Vec<f64> = mu_q
        .iter()
        .zip(&lv_q)
        .zip(&z_eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    let (mu_p, lv_p) = manual_head(&model, "gen.z1", cfg.hidden_depth, c.clone());
    let mut oin = z.clone();
    oin.extend(&c);
    let h = manual_mlp(&model, "gen.obs.hidden", cfg.hidden_depth, oin);
    let mu_x = manual_dense(&model, "gen.obs.mean", &h, false);
    let lv_x: Vec<f64> = manual_dense(&model, "gen.obs.log_var", &h, false)
        .into_iter()
        .map(|v| v.clamp(-10.0, 10.0))
        .collect();

    let r: f64 = x
        .iter()
        .zip(&mu_x)
        .zip(&lv_x)
        .map(|((xv, m), lv)| manual_log_pdf_scalar(*xv, *m, *lv))
        .sum();
    let kl_z: f64 = (0..2)
        .map(|j| manual_kl_scalar(mu_q[j], lv_q[j], mu_p[j], lv_p[j]))
        .sum();
    let kl_c: f64 = (0..3)
        .map(|j| manual_kl_scalar(mu_c[j], lv_c[j], 0.0, 0.0))
        .sum();
    let bound = r - kl_c - kl_z;
    assert!(
        (terms.total - bound).abs() < 1e-9,
        "elbo {} vs manual {}",
        terms.total,
        bound
    );
    assert!((terms.reconstruction - r).abs() < 1e-9);
    assert!((terms.context_div - kl_c).abs() < 1e-9);
    assert!((terms.latent_div - kl_z).abs() < 1e-9);
}

#[test]
fn elbo_divergences_are_nonnegative_and_terms_consistent() {
    let cfg = ModelConfig {
        n_stochastic_layers: 2,
        ..tiny_config()
    };
    let model = Model::new(cfg, 21).unwrap();
    let mut rng = stream_rng(22, 0, 0);
    for trial in 0..5 {
        let batch = random_batch(3, 4, 2, 23 + trial);
        let terms = model.elbo(&batch, &mut rng, false).unwrap();
        assert!(terms.context_div >= 0.0);
        assert!(terms.latent_div >= 0.0);
        let recomposed = terms.reconstruction - terms.context_div - terms.latent_div;
        assert!((terms.total - recomposed).abs() < 1e-12);
    }
}

#[test]
fn elbo_is_permutation_invariant_with_consistent_noise() {
    let cfg = ModelConfig {
        n_stochastic_layers: 2,
        ..tiny_config()
    };
    let model = Model::new(cfg.clone(), 24).unwrap();
    let (b, s) = (3, 5);
    let batch = random_batch(b, s, 2, 25);
    let mut rng = stream_rng(26, 0, 0);
    let noise = ElboNoise::draw(&cfg, b, s, false, &mut rng);
    let base = model.elbo_with_noise(&batch, &noise).unwrap();

    for _ in 0..5 {
        let mut pbatch = batch.clone();
        let mut pnoise = noise.clone();
        for set in 0..b {
            let mut order: Vec<usize> = (0..s).collect();
            for i in (1..s).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            for (dst, &src) in order.iter().enumerate() {
                for f in 0..2 {
                    pbatch.values.data_mut()[(set * s + dst) * 2 + f] =
                        batch.values.data()[(set * s + src) * 2 + f];
                }
                for layer in 0..2 {
                    for f in 0..2 {
                        pnoise.z_eps[layer].data_mut()[(set * s + dst) * 2 + f] =
                            noise.z_eps[layer].data()[(set * s + src) * 2 + f];
                    }
                }
            }
        }
        let out = model.elbo_with_noise(&pbatch, &pnoise).unwrap();
        assert!((out.total - base.total).abs() < 1e-9);
        assert!((out.reconstruction - base.reconstruction).abs() < 1e-9);
        assert!((out.context_div - base.context_div).abs() < 1e-9);
        assert!((out.latent_div - base.latent_div).abs() < 1e-9);
    }
}

#[test]
fn elbo_with_same_noise_is_bitwise_deterministic() {
    let model = Model::new(tiny_config(), 27).unwrap();
    let batch = random_batch(2, 4, 2, 28);
    let mut rng = stream_rng(29, 0, 0);
    let noise = ElboNoise::draw(model.config(), 2, 4, false, &mut rng);
    let a = model.elbo_with_noise(&batch, &noise).unwrap();
    let b = model.elbo_with_noise(&batch, &noise).unwrap();
    assert_eq!(a, b);
}

#[test]
fn multi_sample_bound_averages_single_draws() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 30).unwrap();
    let batch = random_batch(2, 3, 2, 31);
    let mut rng = stream_rng(32, 0, 0);
    let n1 = ElboNoise::draw(&cfg, 2, 3, false, &mut rng);
    let n2 = ElboNoise::draw(&cfg, 2, 3, false, &mut rng);
    let t1 = model.elbo_with_noise(&batch, &n1).unwrap();
    let t2 = model.elbo_with_noise(&batch, &n2).unwrap();
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape, false);
    let avg = model
        .elbo_graph_multi(&mut tape, &leaves, &batch, &[n1, n2])
        .unwrap()
        .terms(&tape)
        .unwrap();
    assert!((avg.total - 0.5 * (t1.total + t2.total)).abs() < 1e-12);
    assert!((avg.reconstruction - 0.5 * (t1.reconstruction + t2.reconstruction)).abs() < 1e-12);
}

#[test]
fn elbo_gradients_match_finite_differences_on_sampled_coordinates() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 33).unwrap();
    let batch = random_batch(2, 3, 2, 34);
    let mut rng = stream_rng(35, 0, 0);
    let noise = ElboNoise::draw(&cfg, 2, 3, false, &mut rng);

    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape, true);
    let graph = model.elbo_graph(&mut tape, &leaves, &batch, &noise).unwrap();
    let loss = tape.scale(graph.total, -1.0).unwrap();
    tape.backward(loss).unwrap();

    let ids = leaves.ordered_ids();
    let params = model.parameters();
    assert_eq!(ids.len(), params.len());
    let h = 1e-5;
    let mut checked = 0;
    for (pi, p) in params.iter().enumerate() {
        let g = tape.grad(ids[pi]).expect("trainable leaf must have a grad");
        // sample a few coordinates per parameter
        for ci in [0, p.value.len() / 2] {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut v = m.parameters()[pi].value.clone();
                v.data_mut()[ci] += delta;
                let name = m.parameters()[pi].name().to_string();
                m.set_param_value(&name, v).unwrap();
                -m.elbo_with_noise(&batch, &noise).unwrap().total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let rel = (g[ci] - fd).abs() / g[ci].abs().max(1.0);
            assert!(rel < 1e-4, "param {pi} coord {ci}: rel err {rel}");
            checked += 1;
        }
    }
    assert!(checked > 20);
}

// ── checkpoint format ────────────────────────────────────────────────

#[test]
fn checkpoint_round_trip_is_value_exact() {
    let cfg = ModelConfig {
        n_stochastic_layers: 2,
        shared_obs_variance: true,
        ..tiny_config()
    };
    let model = Model::new(cfg, 36).unwrap();
    let bytes = model_to_bytes(&model).unwrap();
    let loaded = model_from_bytes(&bytes, "mem").unwrap();
    assert_eq!(loaded.config(), model.config());
    for (a, b) in model.parameters().iter().zip(loaded.parameters()) {
        assert_eq!(a.name(), b.name());
        assert_eq!(a.value.data(), b.value.data());
        assert_eq!(a.value.shape(), b.value.shape());
    }
    // and the re-serialization is byte-identical
    assert_eq!(model_to_bytes(&loaded).unwrap(), bytes);
}

#[test]
fn checkpoint_rejects_bad_magic_version_and_truncation() {
    let model = Model::new(tiny_config(), 37).unwrap();
    let bytes = model_to_bytes(&model).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        model_from_bytes(&bad, "mem"),
        Err(Error::Format { .. })
    ));

    let mut bad = bytes.clone();
    bad[4] = 9;
    let err = model_from_bytes(&bad, "mem").unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    let err = model_from_bytes(&bytes[..bytes.len() - 11], "mem").unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("truncated"), "{err}");
}

#[test]
fn leaf_ids_pair_with_parameters() {
    let cfg = ModelConfig {
        n_stochastic_layers: 2,
        ..tiny_config()
    };
    let model = Model::new(cfg, 38).unwrap();
    let mut tape = Tape::new();
    let leaves = model.leaves(&mut tape, true);
    let ids = leaves.ordered_ids();
    let params = model.parameters();
    assert_eq!(ids.len(), params.len());
    for (id, p) in ids.iter().zip(&params) {
        assert_eq!(tape.shape(*id), p.value.shape(), "misaligned {}", p.name());
        assert_eq!(tape.value(*id).data(), p.value.data());
    }
}

#[test]
fn config_validation_rejects_bad_settings() {
    let mut cfg = tiny_config();
    cfg.sample_dropout_rate = 1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config();
    cfg.n_stochastic_layers = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config();
    cfg.likelihood = Likelihood::Bernoulli;
    cfg.shared_obs_variance = true;
    assert!(cfg.validate().is_err());
}
