use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use prodmatch::config::AppConfig;
use prodmatch::domain::{ingest_offers, matching_pairs, Corpus, CorpusRole, OfferFormat};
use prodmatch::encoder::{embed_corpus, read_embeddings, read_head, write_embeddings, write_head};
use prodmatch::eval::{
    evaluate, per_category_report, pr_curve_svg, threshold_for_precision, GroundTruth,
};
use prodmatch::hitl::{
    calibrate_accuracy, majority_fpr, majority_tpr, simulate_table4_run, simulate_validators,
    ValidationRow, VoteAccuracy, MAX_CANDIDATES,
};
use prodmatch::pipeline::{run_pipeline, PipelineJob, HITL_DIR};
use prodmatch::retrieval::{match_domains, read_index, write_index, MatchIndex, MatchPrediction};
use prodmatch::server::{serve, AppState};
use prodmatch::synth::{generate, SynthConfig};
use prodmatch::trainer::{train, train_with_validation, write_history_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "prodmatch", version, about = "Multi-modal product matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus with train/validation/test splits.
    Synth {
        /// SynthConfig JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate an offer file and print a summary.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// Embedding sidecar, when not next to the input as `<stem>.emb`.
        #[arg(long)]
        sidecar: Option<PathBuf>,
    },
    /// Train a projection head.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// TrainConfig JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Validation corpus; without it a share of products is held out.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Per-epoch CSV; defaults to `<out>.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Embed a corpus with a trained head.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a retrieval index file from a corpus and its embeddings.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match query offers against an index.
    Match {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, alias = "queries")]
        query: PathBuf,
        #[command(flatten)]
        source: EmbeddingSource,
        #[arg(long)]
        out: PathBuf,
        /// Neighbours per query; overrides the configuration.
        #[arg(long)]
        k: Option<usize>,
        /// Jaro-Winkler brand blocking threshold; 0 disables blocking.
        #[arg(long)]
        brand_sim: Option<f64>,
        /// Accept candidates with cosine distance at or below this.
        #[arg(long)]
        dist_threshold: Option<f64>,
        #[command(flatten)]
        app: AppArgs,
    },
    /// Score predictions against the product ids of the labelled offers.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// Labelled offers covering queries and index; repeat for several files.
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        k: Vec<usize>,
        /// Report JSON; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the precision-recall curve as SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Report the largest distance threshold reaching this precision.
        #[arg(long)]
        target_precision: Option<f64>,
        /// Pool categories with fewer matched queries into "other".
        #[arg(long, default_value_t = 10)]
        min_category_matched: usize,
    },
    /// Run embed, index, match, eval and enqueue in one go.
    Run {
        #[arg(long)]
        name: String,
        #[arg(long)]
        index_corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        head: PathBuf,
        /// Skip routing predictions into the validation queue.
        #[arg(long)]
        no_enqueue: bool,
        #[command(flatten)]
        app: AppArgs,
    },
    /// Simulated validators: a calibrated synthetic campaign, or votes on the
    /// labelled pending rows of the data directory.
    HitlSimulate {
        #[arg(long, default_value_t = 14453)]
        rows: usize,
        #[arg(long, default_value_t = 0.162)]
        input_precision: f64,
        #[arg(long, default_value_t = 0.794)]
        tpr: f64,
        #[arg(long, default_value_t = 0.018)]
        fpr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Vote on the store's pending rows instead of a synthetic campaign.
        #[arg(long)]
        store: bool,
        #[command(flatten)]
        app: AppArgs,
    },
    /// Serve the validation API.
    Serve {
        #[command(flatten)]
        app: AppArgs,
    },
}

#[derive(Args)]
struct AppArgs {
    /// AppConfig JSON; `PRODMATCH_*` environment variables override it.
    #[arg(long = "app-config")]
    app_config: Option<PathBuf>,
}

impl AppArgs {
    fn load(&self) -> Result<AppConfig> {
        AppConfig::load(self.app_config.as_deref()).context("loading configuration")
    }
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct EmbeddingSource {
    /// Precomputed query embeddings.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embed the queries with this head.
    #[arg(long)]
    head: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    ingest_offers(path, &OfferFormat::Jsonl).with_context(|| format!("loading {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn write_predictions(path: &Path, predictions: &[MatchPrediction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<MatchPrediction>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}", path.display(), n + 1))?,
        );
    }
    Ok(out)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("PRODMATCH_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let splits = generate(&cfg)?;
            let manifest = splits.write(&out, &cfg)?;
            print_json(&manifest)?;
        }
        Command::Ingest { input, sidecar } => {
            let format = match sidecar {
                Some(p) => OfferFormat::JsonlWithSidecar(p),
                None => OfferFormat::Jsonl,
            };
            let corpus = ingest_offers(&input, &format).with_context(|| format!("loading {}", input.display()))?;
            let domains: Vec<String> = corpus.domains().iter().map(|d| d.to_string()).collect();
            print_json(&serde_json::json!({
                "offers": corpus.len(),
                "domains": domains,
                "matching_pairs": matching_pairs(&corpus).len(),
                "lone_offers": corpus.lone_positions().len(),
            }))?;
        }
        Command::Train {
            corpus,
            config,
            out,
            validation,
            history,
        } => {
            let cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            let corpus = load_corpus(&corpus)?;
            let outcome = match validation {
                Some(v) => train_with_validation(&corpus, Some(&load_corpus(&v)?), &cfg)?,
                None => train(&corpus, &cfg)?,
            };
            write_head(&out, &outcome.head)?;
            let history = history.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".history.csv");
                PathBuf::from(p)
            });
            write_history_csv(&history, &outcome.history)?;
            let last = outcome.history.last();
            tracing::info!(
                offers = outcome.train_offers,
                epochs = outcome.history.len(),
                loss = last.map(|h| h.loss),
                r_at_1 = last.and_then(|h| h.recall_at_1),
                "trained head written to {}",
                out.display()
            );
        }
        Command::Embed { corpus, head, out } => {
            let corpus = load_corpus(&corpus)?;
            let head = read_head(&head)?;
            write_embeddings(&out, &embed_corpus(&corpus, &head)?)?;
        }
        Command::Index {
            corpus,
            embeddings,
            out,
        } => {
            let corpus = load_corpus(&corpus)?;
            let emb = read_embeddings(&embeddings)?;
            let index = MatchIndex::build(&emb, &corpus)?;
            write_index(&out, &index)?;
            tracing::info!(entries = index.len(), brands = index.brand_groups().len(), "index written");
        }
        Command::Match {
            index,
            query,
            source,
            out,
            k,
            brand_sim,
            dist_threshold,
            app,
        } => {
            let mut cfg = app.load()?;
            let params = &mut cfg.retrieval;
            params.k = k.unwrap_or(params.k);
            params.brand_threshold = brand_sim.unwrap_or(params.brand_threshold);
            params.distance_threshold = dist_threshold.unwrap_or(params.distance_threshold);
            let index = read_index(&index)?;
            let queries = load_corpus(&query)?;
            let emb = match (source.embeddings, source.head) {
                (Some(e), _) => read_embeddings(&e)?,
                (None, Some(h)) => embed_corpus(&queries, &read_head(&h)?)?,
                (None, None) => bail!("need --embeddings or --head"),
            };
            let outcome = match_domains(&queries, &emb, &index, &cfg.retrieval)?;
            for f in &outcome.failures {
                tracing::warn!(query = %f.query_id, "{}", f.error);
            }
            write_predictions(&out, &outcome.predictions)?;
            tracing::info!(
                predictions = outcome.predictions.len(),
                failures = outcome.failures.len(),
                "predictions written"
            );
        }
        Command::Eval {
            predictions,
            corpus,
            k,
            out,
            plot,
            target_precision,
            min_category_matched,
        } => {
            let preds = read_predictions(&predictions)?;
            let mut offers = Vec::new();
            for p in &corpus {
                offers.extend(load_corpus(p)?.into_offers());
            }
            let query_ids: HashSet<&str> = preds.iter().map(|p| p.query_offer_id.as_str()).collect();
            let (q, i): (Vec<_>, Vec<_>) = offers
                .into_iter()
                .partition(|o| query_ids.contains(o.offer_id.as_str()));
            let queries = Corpus::new(q, CorpusRole::TestInDomain)?;
            let index = Corpus::new(i, CorpusRole::TestInDomain)?;
            let truth = GroundTruth::from_corpora(&queries, &index);
            let mut report = evaluate(&preds, &truth, &k)?;
            let categories = queries
                .offers()
                .iter()
                .map(|o| (o.offer_id.clone(), o.category.clone()))
                .collect();
            report.categories = Some(per_category_report(
                &preds,
                &truth,
                &categories,
                &k,
                min_category_matched,
            )?);
            if let Some(p) = plot {
                std::fs::write(&p, pr_curve_svg(&[("model", &report)]))?;
            }
            if let Some(target) = target_precision {
                match threshold_for_precision(&report.curve, target) {
                    Some(t) => tracing::info!(target, threshold = t, "distance threshold for target precision"),
                    None => tracing::warn!(target, "no threshold reaches the target precision"),
                }
            }
            match out {
                Some(p) => serde_json::to_writer_pretty(BufWriter::new(File::create(&p)?), &report)?,
                None => print_json(&report)?,
            }
        }
        Command::Run {
            name,
            index_corpus,
            queries,
            head,
            no_enqueue,
            app,
        } => {
            let cfg = app.load()?;
            let job = PipelineJob {
                name,
                index_corpus,
                query_corpus: queries,
                head,
                enqueue: !no_enqueue,
            };
            print_json(&run_pipeline(&cfg, &job)?)?;
        }
        Command::HitlSimulate {
            rows,
            input_precision,
            tpr,
            fpr,
            seed,
            store,
            app,
        } => {
            if store {
                simulate_on_store(&app.load()?, tpr, fpr, seed)?;
            } else {
                print_json(&simulate_table4_run(rows, input_precision, tpr, fpr, seed)?)?;
            }
        }
        Command::Serve { app } => {
            let cfg = app.load()?;
            let state = match AppState::open(cfg) {
                Ok(s) => s,
                Err(e) => bail!("refusing to start: {e}"),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, async {
                let _ = tokio::signal::ctrl_c().await;
                tracing::info!("shutting down");
            }))?;
        }
    }
    Ok(())
}

/// Votes on every labelled pending row with validators calibrated to the
/// given majority TPR and FPR, then prints the store statistics.
fn simulate_on_store(cfg: &AppConfig, tpr: f64, fpr: f64, seed: u64) -> Result<()> {
    let n = cfg.judgments;
    let accuracy = VoteAccuracy {
        positive: calibrate_accuracy(tpr, |a| majority_tpr(a, n))?,
        negative: calibrate_accuracy(fpr, |a| majority_fpr(a, MAX_CANDIDATES, n))?,
    };
    let mut store = prodmatch::hitl::DurableStore::open(&cfg.data_dir.join(HITL_DIR), n, cfg.aggregation)?;
    let pending: Vec<ValidationRow> = store
        .store()
        .rows()
        .filter(|r| r.votes.is_empty() && r.ground_truth.is_some())
        .cloned()
        .collect();
    let refs: Vec<&ValidationRow> = pending.iter().collect();
    for (row_id, votes) in simulate_validators(&refs, accuracy, n, seed)? {
        for v in votes {
            store.record_vote(row_id, &v.validator, v.choice)?;
        }
    }
    store.flush()?;
    store.compact()?;
    print_json(&store.store().stats(cfg.p_model, cfg.seed))
}
