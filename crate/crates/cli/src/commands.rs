use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use sig_core::backend::tiny::{TinyBackend, TinyConfig};
use sig_core::backend::{load_backend, Seq2SeqBackend};
use sig_core::baselines::{
    evaluate_lenient, run_zero_shot, train_encoder, EncoderConfig, LlmClient, PromptStyle, ResponseCache, StubClient,
    ZeroShotConfig,
};
use sig_core::corpus::io::{read_corpus, read_jsonl, write_corpus, write_jsonl, write_rejects};
use sig_core::corpus::pdnc::parse_pdnc;
use sig_core::corpus::split::{read_splits, write_splits};
use sig_core::corpus::wp::parse_wp;
use sig_core::corpus::{
    corpus_stats, filter_minor_speakers, make_cross_domain_splits, make_holdout_split, make_in_domain_split,
    NovelCorpus, QuoteKey, SplitSpec,
};
use sig_core::evaluation::{aggregate_folds, evaluate_predictions, format_table, FoldReport};
use sig_core::inference::{predict_all, InferenceOptions, Prediction};
use sig_core::synthetic::{generate_synthetic, SyntheticConfig};
use sig_core::templates::{self, PromptTemplate};
use sig_core::training::{train, TrainingConfig, TrainingManifest};
use sig_core::viz::{coordinate_rows, plot_scatter, speaker_name_embeddings, tsne, write_coordinates, TsneConfig};

use crate::config::{Mode, RunConfig};
use crate::manifest::RunManifest;
use crate::remote::RemoteClient;
use crate::{ClientKind, Command, Format, Protocol, Style};

pub const SPLITS_FILE: &str = "splits.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RESPONSES_FILE: &str = "responses.jsonl";
pub const COORDINATES_FILE: &str = "coordinates.csv";
pub const PLOT_FILE: &str = "embeddings.svg";

pub fn dispatch(run: &RunConfig, command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            format,
            input,
            min_speaker_quotes,
        } => ingest(run, format, &input, min_speaker_quotes),
        Command::Synth {
            novels,
            quotes_per_novel,
        } => synth(run, novels, quotes_per_novel),
        Command::Split {
            protocol,
            test_fraction,
        } => split(run, protocol, test_fraction),
        Command::Stats => stats(run),
        Command::Train { resume } => train_cmd(run, resume),
        Command::Predict => predict(run),
        Command::Evaluate { predictions } => evaluate(run, &predictions),
        Command::Viz { perplexity, max_iter } => viz(run, perplexity, max_iter),
        Command::Llm {
            client,
            fixture,
            gold,
            style,
            cache,
            endpoint,
            model,
            parallelism,
            requests_per_minute,
        } => {
            let config = ZeroShotConfig {
                style: match style {
                    Style::Plain => PromptStyle::Plain,
                    Style::Cot => PromptStyle::ChainOfThought,
                },
                parallelism,
                requests_per_minute,
                ..Default::default()
            };
            llm(run, client, fixture.as_deref(), gold, cache.as_deref(), &endpoint, &model, &config)
        }
        Command::Encoder => encoder(run),
    }
}

fn load_corpus(run: &RunConfig) -> Result<NovelCorpus> {
    let path = run.corpus()?;
    read_corpus(path).with_context(|| format!("expected a normalized corpus at {}", path.display()))
}

fn load_fold(run: &RunConfig, fold: Option<usize>) -> Result<SplitSpec> {
    let path = run.splits()?;
    let splits = read_splits(path).with_context(|| format!("expected splits at {}", path.display()))?;
    let index = run.fold.or(fold).unwrap_or(0);
    splits
        .into_iter()
        .find(|s| s.fold_index == index)
        .ok_or_else(|| anyhow!("fold {index} not in {}", path.display()))
}

fn template(name: Option<&str>) -> Result<PromptTemplate> {
    let name = name.unwrap_or(templates::DEFAULT_TEMPLATE);
    templates::find_template(name).ok_or_else(|| anyhow!("unknown template `{name}`"))
}

fn training_manifest(checkpoint: &Path) -> Option<TrainingManifest> {
    TrainingManifest::read(checkpoint).ok()
}

fn print_fold(report: &FoldReport) -> Result<()> {
    print!("{}", format_table(&aggregate_folds(vec![report.clone()])?));
    Ok(())
}

fn ingest(run: &RunConfig, format: Format, input: &Path, min_quotes: usize) -> Result<()> {
    let out = run.out()?;
    let report = match format {
        Format::Pdnc => parse_pdnc(input),
        Format::Wp => parse_wp(input),
    }
    .with_context(|| format!("ingesting {}", input.display()))?;
    let corpus = filter_minor_speakers(&report.corpus, min_quotes)?;
    write_corpus(out, &corpus)?;
    write_rejects(out, &report.rejects)?;
    println!(
        "{} novels, {} quotations kept ({} after minor-speaker filter), {} rejects",
        corpus.novel_count(),
        report.corpus.quotation_count(),
        corpus.quotation_count(),
        report.rejects.len()
    );
    let mut m = RunManifest::new(
        "ingest",
        json!({"format": format!("{format:?}").to_lowercase(), "min_speaker_quotes": min_quotes}),
    );
    m.input(input)?.output(out)?;
    m.write(out)
}

fn synth(run: &RunConfig, novels: usize, quotes_per_novel: usize) -> Result<()> {
    let out = run.out()?;
    let config = SyntheticConfig {
        novels,
        quotes_per_novel,
        seed: run.seed(),
        ..Default::default()
    };
    let corpus = generate_synthetic(&config)?;
    write_corpus(out, &corpus)?;
    println!("{} novels, {} quotations", corpus.novel_count(), corpus.quotation_count());
    let mut m = RunManifest::new("synth", serde_json::to_value(&config)?);
    m.output(out)?;
    m.write(out)
}

fn split(run: &RunConfig, protocol: Protocol, test_fraction: f64) -> Result<()> {
    let corpus = load_corpus(run)?;
    let out = run.out()?;
    let splits = match protocol {
        Protocol::CrossDomain => {
            make_cross_domain_splits(&corpus, run.folds.unwrap_or(5), run.test_novels.unwrap_or(4), run.seed())?
        }
        Protocol::InDomain => vec![make_in_domain_split(&corpus)?],
        Protocol::Holdout => vec![make_holdout_split(&corpus, test_fraction, run.seed())?],
    };
    std::fs::create_dir_all(out)?;
    let path = out.join(SPLITS_FILE);
    write_splits(&path, &splits)?;
    for s in &splits {
        println!("{} fold {}: {} train, {} test", s.name, s.fold_index, s.train_ids.len(), s.test_ids.len());
    }
    let mut m = RunManifest::new(
        "split",
        json!({
            "protocol": format!("{protocol:?}"),
            "folds": run.folds, "test_novels": run.test_novels,
            "test_fraction": test_fraction, "seed": run.seed(),
        }),
    );
    m.input(run.corpus()?)?.output(&path)?;
    m.write(out)
}

fn stats(run: &RunConfig) -> Result<()> {
    let corpus = load_corpus(run)?;
    let fold = match run.splits {
        Some(_) => Some(load_fold(run, None)?),
        None => None,
    };
    let report = corpus_stats(&corpus, fold.as_ref());
    print!("{report}");
    if let Some(out) = &run.out {
        std::fs::create_dir_all(out)?;
        let path = out.join("stats.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        let mut m = RunManifest::new("stats", json!({"fold": fold.map(|f| f.fold_index)}));
        m.input(run.corpus()?)?.output(&path)?;
        m.write(out)?;
    }
    Ok(())
}

fn train_cmd(run: &RunConfig, resume: bool) -> Result<()> {
    let corpus = load_corpus(run)?;
    let split = load_fold(run, None)?;
    let out = run.out()?;
    let mut backend = if resume {
        TinyBackend::load(out).with_context(|| format!("expected a checkpoint to resume at {}", out.display()))?
    } else {
        let mut cfg = TinyConfig {
            seed: run.seed(),
            ..Default::default()
        };
        if let Some(d) = run.embed_dim {
            cfg.embed_dim = d;
        }
        if let Some(h) = run.hidden_dim {
            cfg.hidden_dim = h;
        }
        TinyBackend::for_corpus(&corpus, cfg)?
    };
    let defaults = TrainingConfig::default();
    let config = TrainingConfig {
        template: run.template.clone().unwrap_or(defaults.template),
        epochs: run.epochs.unwrap_or(defaults.epochs),
        batch_size: run.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: run.learning_rate,
        budget: run.budget,
        seed: run.seed(),
        checkpoint_dir: out.to_path_buf(),
        resume,
        ..defaults
    };
    let manifest = train(&corpus, &split, &config, &mut backend)?;
    if let Some(last) = manifest.epoch_losses.last() {
        println!("epoch {}: mean loss {:.4}", last.epoch, last.mean_loss);
    }
    let mut m = RunManifest::new(
        "train",
        json!({"split": split.name, "fold": split.fold_index, "config": config, "backend": backend.describe()}),
    );
    m.input(run.corpus()?)?.input(run.splits()?)?.output(out)?;
    m.write(out)
}

fn predict(run: &RunConfig) -> Result<()> {
    let corpus = load_corpus(run)?;
    let checkpoint = run.checkpoint()?;
    let trained = training_manifest(checkpoint);
    let split = load_fold(run, trained.as_ref().map(|t| t.fold))?;
    let template = template(run.template.as_deref().or(trained.as_ref().map(|t| t.template.as_str())))?;
    let backend: Box<dyn Seq2SeqBackend> =
        load_backend(checkpoint).with_context(|| format!("expected a checkpoint at {}", checkpoint.display()))?;
    let mode = run.mode.unwrap_or(Mode::Sig);
    let options = InferenceOptions {
        budget: run.budget,
        ..Default::default()
    };
    let keys: Vec<QuoteKey> = split.test_ids.iter().cloned().collect();
    let predictions = predict_all(&corpus, &keys, &template, backend.as_ref(), mode.into(), &options)?;
    let out = run.out()?;
    std::fs::create_dir_all(out)?;
    let path = out.join(PREDICTIONS_FILE);
    write_jsonl(&path, &predictions)?;
    println!("{} predictions written to {}", predictions.len(), path.display());
    let mut m = RunManifest::new(
        "predict",
        json!({"split": split.name, "fold": split.fold_index, "mode": mode, "template": template.name, "options": options}),
    );
    m.input(run.corpus()?)?.input(run.splits()?)?.input(checkpoint)?.output(&path)?;
    m.write(out)
}

fn evaluate(run: &RunConfig, dirs: &[std::path::PathBuf]) -> Result<()> {
    let corpus = load_corpus(run)?;
    let mut reports = Vec::new();
    let mut m = RunManifest::new("evaluate", json!({}));
    m.input(run.corpus()?)?.input(run.splits()?)?;
    for dir in dirs {
        let meta = RunManifest::read(dir)?;
        let fold = meta.parameters["fold"]
            .as_u64()
            .ok_or_else(|| anyhow!("{} does not record a fold", dir.display()))? as usize;
        let path = dir.join(PREDICTIONS_FILE);
        let predictions: Vec<Prediction> =
            read_jsonl(&path).with_context(|| format!("expected predictions at {}", path.display()))?;
        let split = load_fold(run, Some(fold))?;
        let split = if run.fold.is_some() && split.fold_index != fold {
            bail!("{} holds fold {fold}, but --fold {} was given", dir.display(), split.fold_index);
        } else {
            split
        };
        reports.push(evaluate_predictions(&predictions, &corpus, &split)?);
        m.input(&path)?;
    }
    let report = aggregate_folds(reports)?;
    print!("{}", format_table(&report));
    if let Some(out) = &run.out {
        std::fs::create_dir_all(out)?;
        let path = out.join(REPORT_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        m.output(&path)?;
        m.write(out)?;
    }
    Ok(())
}

fn viz(run: &RunConfig, perplexity: f64, max_iter: usize) -> Result<()> {
    let corpus = load_corpus(run)?;
    let checkpoint = run.checkpoint()?;
    let trained = training_manifest(checkpoint);
    let template = template(run.template.as_deref().or(trained.as_ref().map(|t| t.template.as_str())))?;
    let backend = load_backend(checkpoint).with_context(|| format!("expected a checkpoint at {}", checkpoint.display()))?;
    let keys: BTreeSet<QuoteKey> = match run.splits {
        Some(_) => load_fold(run, trained.as_ref().map(|t| t.fold))?.test_ids,
        None => corpus.quotations().map(|q| q.key()).collect(),
    };
    let embeddings = speaker_name_embeddings(&corpus, &keys, &template, backend.as_ref(), run.budget)?;
    let config = TsneConfig {
        perplexity,
        max_iter,
        seed: run.seed(),
    };
    let points: Vec<Vec<f32>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let coords = tsne(&points, &config)?;
    let rows = coordinate_rows(&embeddings, &coords);
    let out = run.out()?;
    std::fs::create_dir_all(out)?;
    write_coordinates(&out.join(COORDINATES_FILE), &rows)?;
    plot_scatter(&out.join(PLOT_FILE), &rows, "speaker-name embeddings")?;
    println!("{} points written to {}", rows.len(), out.display());
    let mut m = RunManifest::new("viz", json!({"tsne": config, "template": template.name}));
    m.input(run.corpus()?)?.input(checkpoint)?;
    m.output(&out.join(COORDINATES_FILE))?.output(&out.join(PLOT_FILE))?;
    m.write(out)
}

#[allow(clippy::too_many_arguments)]
fn llm(
    run: &RunConfig,
    kind: ClientKind,
    fixture: Option<&Path>,
    gold: bool,
    cache: Option<&Path>,
    endpoint: &str,
    model: &str,
    config: &ZeroShotConfig,
) -> Result<()> {
    let corpus = load_corpus(run)?;
    let split = load_fold(run, None)?;
    let client: Box<dyn LlmClient> = match kind {
        ClientKind::Stub => match (fixture, gold) {
            (Some(path), false) => Box::new(StubClient::from_fixture(path)?),
            (None, true) => Box::new(StubClient::gold(&corpus)),
            _ => bail!("the stub client needs exactly one of --fixture or --gold"),
        },
        ClientKind::Remote => Box::new(RemoteClient::from_env(endpoint, model)?),
    };
    let cache = cache.map(ResponseCache::new).transpose()?;
    let answers = run_zero_shot(&corpus, &split.test_ids, client.as_ref(), config, cache.as_ref())?;
    let report = evaluate_lenient(&answers, &corpus, &split)?;
    print_fold(&report)?;
    let out = run.out()?;
    std::fs::create_dir_all(out)?;
    write_jsonl(&out.join(RESPONSES_FILE), &answers)?;
    std::fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    let mut m = RunManifest::new(
        "llm",
        json!({"client": client.name(), "fold": split.fold_index, "split": split.name, "config": config}),
    );
    m.input(run.corpus()?)?.input(run.splits()?)?;
    if let Some(f) = fixture {
        m.input(f)?;
    }
    m.output(&out.join(RESPONSES_FILE))?.output(&out.join(REPORT_FILE))?;
    m.write(out)
}

fn encoder(run: &RunConfig) -> Result<()> {
    let corpus = load_corpus(run)?;
    let split = load_fold(run, None)?;
    let defaults = EncoderConfig::default();
    let config = EncoderConfig {
        template: run.template.clone().unwrap_or(defaults.template),
        budget: run.budget,
        embed_dim: run.embed_dim.unwrap_or(defaults.embed_dim),
        hidden_dim: run.hidden_dim.unwrap_or(defaults.hidden_dim),
        epochs: run.epochs.unwrap_or(defaults.epochs),
        batch_size: run.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: run.learning_rate.unwrap_or(defaults.learning_rate),
        seed: run.seed(),
        ..defaults
    };
    let (model, _) = train_encoder(&corpus, &split, &config)?;
    let out = run.out()?;
    let model_dir = out.join("model");
    model.save(&model_dir)?;
    let predictions = model.predict_all(&corpus, &split.test_ids)?;
    let report = evaluate_predictions(&predictions, &corpus, &split)?;
    print_fold(&report)?;
    write_jsonl(&out.join(PREDICTIONS_FILE), &predictions)?;
    std::fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    let mut m = RunManifest::new("encoder", json!({"split": split.name, "fold": split.fold_index, "config": config}));
    m.input(run.corpus()?)?.input(run.splits()?)?;
    m.output(&model_dir)?.output(&out.join(PREDICTIONS_FILE))?.output(&out.join(REPORT_FILE))?;
    m.write(out)
}
