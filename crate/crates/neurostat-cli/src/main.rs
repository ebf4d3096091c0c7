//! Command-line experiment runner: corpus generation, training, context
//! embedding, and the four inference-time procedures, all reproducible
//! from (flags, config file, input files, seed).

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurostat::algorithms::{
    conditional_sample, few_shot_classify, fewshot_episode_eval, representative_subsample,
    sample_dataset, DEFAULT_EPISODES,
};
use neurostat::data::{
    class_name, gen_synthetic_1d, load_idx_images, load_idx_labels, load_sets, save_labels_csv,
    save_sets, spatial_corpus, Corpus, DEFAULT_SAMPLES_PER_SET, DEFAULT_SPATIAL_POINTS,
    DEFAULT_SYNTHETIC_SETS,
};
use neurostat::model::{load_model, Model};
use neurostat::rng::{domains, stream_rng};
use neurostat::training::{evaluate, fit};
use neurostat::Tensor;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "neurostat",
    version,
    about = "Generative modelling of datasets: train set-level VAEs, embed, sample and classify"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a set corpus and its label sidecar
    GenData {
        #[command(subcommand)]
        source: GenDataSource,
    },
    /// Train a model on an NSDS corpus, writing an NSTM checkpoint and a
    /// CSV training log
    Train(TrainArgs),
    /// Write per-set context posterior means as CSV
    Embed(EmbedArgs),
    /// Sample a dataset from the prior
    Sample(SampleArgs),
    /// Sample a dataset conditioned on an existing set
    CondSample(CondSampleArgs),
    /// Select a representative subset of a set by greedy KL elimination
    Summarize(SummarizeArgs),
    /// Classify a query set (or single point) against per-class support sets
    Classify(ClassifyArgs),
    /// Episode-averaged few-shot classification accuracy over a labelled corpus
    EvalFewshot(EvalFewshotArgs),
}

#[derive(Subcommand)]
enum GenDataSource {
    /// Sets of scalar samples from four distribution families
    Synthetic1d {
        /// Number of sets
        #[arg(long, default_value_t = DEFAULT_SYNTHETIC_SETS)]
        sets: usize,
        /// Samples per set
        #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_SET)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output NSDS path
        #[arg(long)]
        out: PathBuf,
        /// Label sidecar path (default: <out>.labels.csv)
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Point sets sampled from image intensities (IDX input)
    SpatialMnist {
        /// IDX image file
        #[arg(long)]
        idx: PathBuf,
        /// IDX label file (optional; class labels for the sets)
        #[arg(long)]
        labels_idx: Option<PathBuf>,
        /// Points per set
        #[arg(long, default_value_t = DEFAULT_SPATIAL_POINTS)]
        points: usize,
        /// Use only the first N images
        #[arg(long)]
        max_images: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output NSDS path
        #[arg(long)]
        out: PathBuf,
        /// Label sidecar path (default: <out>.labels.csv)
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Standardization metadata path (default: <out>.meta.json)
        #[arg(long)]
        meta: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration (merged over the preset / defaults)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Configuration preset: synthetic1d or spatial-mnist
    #[arg(long)]
    preset: Option<String>,
    /// Training corpus (NSDS); overrides data.corpus from the config
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output checkpoint (NSTM)
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV (overrides train.log_path)
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output CSV: set_id,family,mean,variance,c_1..c_l
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Points to generate
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV: x_1..x_n rows
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CondSampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// NSDS corpus holding the conditioning set
    #[arg(long)]
    corpus: PathBuf,
    /// Which set of the corpus to condition on
    #[arg(long, default_value_t = 0)]
    set_index: usize,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    set_index: usize,
    /// Surviving subset size
    #[arg(long, default_value_t = 6)]
    k: usize,
    /// Output CSV: index,x_1..x_n
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// NSDS file whose sets are the per-class supports (set i = class i)
    #[arg(long)]
    support: PathBuf,
    /// NSDS file holding the query set
    #[arg(long)]
    query: Option<PathBuf>,
    /// Which set of the query corpus to classify
    #[arg(long, default_value_t = 0)]
    query_index: usize,
    /// Classify a single point given as comma-separated features
    #[arg(long, conflicts_with = "query")]
    point: Option<String>,
}

#[derive(Args)]
struct EvalFewshotArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labelled NSDS corpus
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 4)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV: episode,accuracy
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), String> {
    match command {
        Command::GenData { source } => gen_data(source),
        Command::Train(args) => train(args),
        Command::Embed(args) => embed(args),
        Command::Sample(args) => sample(args),
        Command::CondSample(args) => cond_sample(args),
        Command::Summarize(args) => summarize(args),
        Command::Classify(args) => classify(args),
        Command::EvalFewshot(args) => eval_fewshot(args),
    }
}

fn err_str(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    out.with_file_name(name)
}

fn gen_data(source: GenDataSource) -> Result<(), String> {
    match source {
        GenDataSource::Synthetic1d {
            sets,
            samples,
            seed,
            out,
            labels,
        } => {
            let corpus = gen_synthetic_1d(sets, samples, seed).map_err(err_str)?;
            save_sets(&out, &corpus).map_err(err_str)?;
            let labels_path = labels.unwrap_or_else(|| sidecar(&out, ".labels.csv"));
            save_labels_csv(&labels_path, &corpus).map_err(err_str)?;
            println!(
                "sets={} sample_size={} features={}",
                corpus.len(),
                corpus.sample_size,
                corpus.n_features
            );
            Ok(())
        }
        GenDataSource::SpatialMnist {
            idx,
            labels_idx,
            points,
            max_images,
            seed,
            out,
            labels,
            meta,
        } => {
            let images = load_idx_images(&idx).map_err(err_str)?;
            let digit_labels = match labels_idx {
                Some(path) => Some(load_idx_labels(&path).map_err(err_str)?),
                None => None,
            };
            let (corpus, affine) =
                spatial_corpus(&images, digit_labels.as_deref(), points, seed, max_images)
                    .map_err(err_str)?;
            save_sets(&out, &corpus).map_err(err_str)?;
            let labels_path = labels.unwrap_or_else(|| sidecar(&out, ".labels.csv"));
            save_labels_csv(&labels_path, &corpus).map_err(err_str)?;
            let meta_path = meta.unwrap_or_else(|| sidecar(&out, ".meta.json"));
            let meta_json = serde_json::to_string_pretty(&affine).map_err(err_str)?;
            std::fs::write(&meta_path, meta_json)
                .map_err(|e| format!("{}: {e}", meta_path.display()))?;
            println!(
                "sets={} sample_size={} features={}",
                corpus.len(),
                corpus.sample_size,
                corpus.n_features
            );
            Ok(())
        }
    }
}

fn train(args: TrainArgs) -> Result<(), String> {
    let mut cfg = match &args.preset {
        Some(name) => RunConfig::preset(name)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &args.config {
        cfg = cfg.overlay_file(path)?;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.mc_samples {
        cfg.train.mc_samples = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    if let Some(path) = args.log {
        cfg.train.log_path = Some(path);
    }
    cfg.train.checkpoint_path = Some(args.out.clone());

    let corpus_path = args
        .corpus
        .or(cfg.data.corpus.clone())
        .ok_or("no corpus given (use --corpus or data.corpus in the config)")?;
    let corpus = load_sets(&corpus_path).map_err(err_str)?;
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed).map_err(err_str)?;
    let log = fit(&mut model, &corpus, &cfg.train).map_err(err_str)?;
    if let Some(last) = log.records.last() {
        println!(
            "final epoch {}: loss={:.6} reconstruction={:.6} context_div={:.6} latent_div={:.6}",
            last.epoch, last.loss, last.reconstruction, last.context_div, last.latent_div
        );
    }
    let eval_terms = evaluate(&model, &corpus, cfg.train.seed).map_err(err_str)?;
    println!(
        "train-corpus bound: total={:.6} reconstruction={:.6} context_div={:.6} latent_div={:.6}",
        eval_terms.total, eval_terms.reconstruction, eval_terms.context_div, eval_terms.latent_div
    );
    Ok(())
}

fn load_corpus_and_model(model: &Path, corpus: &Path) -> Result<(Model, Corpus), String> {
    let model = load_model(model).map_err(err_str)?;
    let corpus = load_sets(corpus).map_err(err_str)?;
    if corpus.n_features != model.config().n_features {
        return Err(format!(
            "checkpoint expects {} features, corpus has {}",
            model.config().n_features,
            corpus.n_features
        ));
    }
    Ok((model, corpus))
}

fn embed(args: EmbedArgs) -> Result<(), String> {
    let (model, corpus) = load_corpus_and_model(&args.model, &args.corpus)?;
    let c_dim = model.config().c_dim;
    let mut out = String::from("set_id,family,mean,variance");
    for j in 1..=c_dim {
        write!(out, ",c_{j}").unwrap();
    }
    out.push('\n');
    let indices: Vec<usize> = (0..corpus.len()).collect();
    for group in indices.chunks(16) {
        let batch = corpus.batch(group).map_err(err_str)?;
        let posterior = model
            .encode_context_with_mask(&batch, None)
            .map_err(err_str)?;
        for (row, &set_idx) in group.iter().enumerate() {
            let set = &corpus.sets[set_idx];
            let (family, mean, variance) = match set.label {
                Some(l) => (class_name(&corpus, l.class_id), l.mean, l.variance),
                None => (String::new(), 0.0, 0.0),
            };
            write!(out, "{},{},{},{}", set.id, family, mean, variance).unwrap();
            for j in 0..c_dim {
                write!(out, ",{}", posterior.mean.data()[row * c_dim + j]).unwrap();
            }
            out.push('\n');
        }
    }
    std::fs::write(&args.out, out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    println!("embedded {} sets into {}", corpus.len(), args.out.display());
    Ok(())
}

fn write_points_csv(
    path: &Path,
    points: &Tensor,
    with_index: Option<&[usize]>,
) -> Result<(), String> {
    let n = points.shape().get(1).copied().unwrap_or(0);
    let mut out = String::new();
    if with_index.is_some() {
        out.push_str("index");
        for j in 1..=n {
            write!(out, ",x_{j}").unwrap();
        }
    } else {
        for j in 1..=n {
            if j > 1 {
                out.push(',');
            }
            write!(out, "x_{j}").unwrap();
        }
    }
    out.push('\n');
    for row in 0..points.shape()[0] {
        match with_index {
            Some(idx) => {
                write!(out, "{}", idx[row]).unwrap();
                for j in 0..n {
                    write!(out, ",{}", points.data()[row * n + j]).unwrap();
                }
            }
            None => {
                for j in 0..n {
                    if j > 0 {
                        out.push(',');
                    }
                    write!(out, "{}", points.data()[row * n + j]).unwrap();
                }
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| format!("{}: {e}", path.display()))
}

fn sample(args: SampleArgs) -> Result<(), String> {
    let model = load_model(&args.model).map_err(err_str)?;
    let mut rng = stream_rng(args.seed, domains::GENERATE, 0);
    let points = sample_dataset(&model, args.k, &mut rng).map_err(err_str)?;
    write_points_csv(&args.out, &points, None)?;
    println!("wrote {} sampled points to {}", args.k, args.out.display());
    Ok(())
}

fn cond_sample(args: CondSampleArgs) -> Result<(), String> {
    let (model, corpus) = load_corpus_and_model(&args.model, &args.corpus)?;
    let set = corpus.sets.get(args.set_index).ok_or_else(|| {
        format!(
            "set index {} out of range ({} sets)",
            args.set_index,
            corpus.len()
        )
    })?;
    let mut rng = stream_rng(args.seed, domains::GENERATE, args.set_index as u64);
    let points = conditional_sample(&model, &set.values, args.k, &mut rng).map_err(err_str)?;
    write_points_csv(&args.out, &points, None)?;
    println!(
        "wrote {} points conditioned on set {} to {}",
        args.k,
        args.set_index,
        args.out.display()
    );
    Ok(())
}

fn summarize(args: SummarizeArgs) -> Result<(), String> {
    let (model, corpus) = load_corpus_and_model(&args.model, &args.corpus)?;
    let set = corpus.sets.get(args.set_index).ok_or_else(|| {
        format!(
            "set index {} out of range ({} sets)",
            args.set_index,
            corpus.len()
        )
    })?;
    let kept = representative_subsample(&model, &set.values, args.k).map_err(err_str)?;
    let n = corpus.n_features;
    let mut data = Vec::with_capacity(kept.len() * n);
    for &i in &kept {
        data.extend_from_slice(set.values.row(i));
    }
    let points = Tensor::new(vec![kept.len(), n], data).map_err(err_str)?;
    write_points_csv(&args.out, &points, Some(&kept))?;
    println!(
        "kept {} of {} points: {:?}",
        kept.len(),
        set.values.shape()[0],
        kept
    );
    Ok(())
}

fn classify(args: ClassifyArgs) -> Result<(), String> {
    let (model, support) = load_corpus_and_model(&args.model, &args.support)?;
    let class_sets: Vec<Tensor> = support.sets.iter().map(|s| s.values.clone()).collect();
    let query = match (&args.query, &args.point) {
        (Some(path), None) => {
            let qc = load_sets(path).map_err(err_str)?;
            qc.sets
                .get(args.query_index)
                .ok_or_else(|| {
                    format!(
                        "query index {} out of range ({} sets)",
                        args.query_index,
                        qc.len()
                    )
                })?
                .values
                .clone()
        }
        (None, Some(text)) => {
            let values: Vec<f64> = text
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| format!("--point: {e}")))
                .collect::<Result<_, String>>()?;
            if values.len() != support.n_features {
                return Err(format!(
                    "--point has {} features, corpus has {}",
                    values.len(),
                    support.n_features
                ));
            }
            Tensor::new(vec![1, support.n_features], values).map_err(err_str)?
        }
        _ => return Err("give exactly one of --query or --point".into()),
    };
    let class = few_shot_classify(&model, &class_sets, &query).map_err(err_str)?;
    println!("{class}");
    Ok(())
}

fn eval_fewshot(args: EvalFewshotArgs) -> Result<(), String> {
    let (model, corpus) = load_corpus_and_model(&args.model, &args.corpus)?;
    let report = fewshot_episode_eval(
        &model,
        &corpus,
        args.shots,
        args.ways,
        args.episodes,
        args.seed,
    )
    .map_err(err_str)?;
    let mut out = String::from("episode,accuracy\n");
    for (e, acc) in report.episode_accuracies.iter().enumerate() {
        writeln!(out, "{e},{acc}").unwrap();
    }
    std::fs::write(&args.out, out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    println!(
        "mean_accuracy={:.4} std_error={:.4} episodes={}",
        report.mean_accuracy,
        report.std_error,
        report.episode_accuracies.len()
    );
    Ok(())
}
