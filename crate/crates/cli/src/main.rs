//! Operator commands wiring the pipeline end to end: synthetic data
//! generation, training, batch inference into a feature store, index
//! construction, retrieval, and evaluation.
//!
//! Every subcommand is deterministic given its flags, seeds, and input
//! files. Exit codes: 0 success, 2 validation or usage error, 3 numeric
//! abort during training, 4 I/O failure.

mod store;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use vitrine::checkpoint::read_checkpoint;
use vitrine::config::Config;
use vitrine::data::{read_jsonl, write_jsonl, EngagementEvent, Product, Surface};
use vitrine::data::Engagement;
use vitrine::encoder::{Encoder, Modality};
use vitrine::error::{Error, Result};
use vitrine::eval::{ablation_csv, run_ablation, AblationAxis, TaskRecall};
use vitrine::index::{EmbeddingIndex, DEFAULT_EF_CONSTRUCTION, DEFAULT_EF_SEARCH, DEFAULT_M};
use vitrine::synth::{self, LatentWorld, ProviderKind, QueryProvider, SynthConfig};
use vitrine::text::build_vocab;
use vitrine::trainer::{self, PreparedCatalog, Resume, TrainOptions};

#[derive(Parser)]
#[command(
    name = "vitrine",
    version,
    about = "Multi-modal product embeddings: synthetic data, training, indexing, retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate catalog.jsonl, events.jsonl, and latent.bin into a directory.
    GenData {
        /// Catalog size.
        #[arg(long, default_value_t = 50_000)]
        products: usize,
        /// Total engagement events, split across tasks in the default
        /// proportions.
        #[arg(long, default_value_t = 520_000)]
        events: usize,
        #[arg(long, default_value_t = 16)]
        topics: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Overrides image, query, and provider noise with one value.
        #[arg(long)]
        noise: Option<f32>,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion encoder; writes the checkpoint, its optimizer
    /// state, and metrics.csv next to the checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding catalog.jsonl and events.jsonl.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Earlier checkpoint to continue from; expects its .state file
        /// next to it.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed every catalog product with a trained checkpoint into a
    /// feature-store file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a nearest-neighbor index over a feature-store file.
    IndexBuild {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Graph degree parameter.
        #[arg(long, default_value_t = DEFAULT_M)]
        m: usize,
        #[arg(long, default_value_t = DEFAULT_EF_CONSTRUCTION)]
        ef_construction: usize,
        /// Level-sampler seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Build a plain exact-scan index without a graph.
        #[arg(long)]
        exact: bool,
    },
    /// Retrieve the top-k products for one query, one JSON object per
    /// line on stdout.
    Query {
        #[arg(long)]
        index: PathBuf,
        /// Search terms, embedded by the frozen text provider; needs
        /// --data for the latent world.
        #[arg(long, conflicts_with = "image_embedding")]
        text: Option<String>,
        /// Raw little-endian f32 file holding one image embedding.
        #[arg(long)]
        image_embedding: Option<PathBuf>,
        /// Directory holding latent.bin.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_EF_SEARCH)]
        ef_search: usize,
    },
    /// Holdout recall per task for a trained checkpoint, as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain ablation variants along one axis and report recall deltas
    /// as CSV.
    Ablate {
        /// One of: feature, negative_sampling, surface, engagement.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 3,
        Error::Io(_) => 4,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { products, events, topics, seed, noise, out } => {
            gen_data(products, events, topics, seed, noise, &out)
        }
        Command::Train { config, data, out, resume } => {
            train(&config, &data, &out, resume.as_deref())
        }
        Command::Infer { checkpoint, config, catalog, out } => {
            infer(&checkpoint, &config, &catalog, &out)
        }
        Command::IndexBuild { embeddings, out, m, ef_construction, seed, exact } => {
            index_build(&embeddings, &out, m, ef_construction, seed, exact)
        }
        Command::Query { index, text, image_embedding, data, k, ef_search } => {
            query(&index, text.as_deref(), image_embedding.as_deref(), data.as_deref(), k, ef_search)
        }
        Command::Eval { checkpoint, config, data, out } => {
            eval_cmd(&checkpoint, &config, &data, out.as_deref())
        }
        Command::Ablate { axis, config, data, out } => {
            ablate(&axis, &config, &data, out.as_deref())
        }
    }
}

/// Splits a total event budget across the default task cells
/// proportionally, assigning leftover units to the largest remainders.
fn scale_counts(total: usize) -> Vec<(Surface, Engagement, usize)> {
    let base = SynthConfig::desk_counts();
    let base_total: usize = base.iter().map(|c| c.2).sum();
    let mut out = Vec::with_capacity(base.len());
    let mut remainders = Vec::with_capacity(base.len());
    let mut assigned = 0usize;
    for (i, &(s, e, n)) in base.iter().enumerate() {
        let share = total as f64 * n as f64 / base_total as f64;
        let floor = share.floor() as usize;
        assigned += floor;
        remainders.push((i, share - floor as f64));
        out.push((s, e, floor));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(total - assigned) {
        out[i].2 += 1;
    }
    out
}

fn gen_data(
    products: usize,
    events: usize,
    topics: usize,
    seed: u64,
    noise: Option<f32>,
    out: &Path,
) -> Result<()> {
    let mut sc = SynthConfig::desk();
    sc.products = products;
    sc.topics = topics;
    if let Some(n) = noise {
        sc.image_noise = n;
        sc.query_noise = n;
        sc.provider_noise = n;
    }
    let counts = scale_counts(events);
    let (catalog, world) = synth::gen_catalog(&sc, seed)?;
    let log = synth::gen_engagement(&world, &sc, &counts, seed ^ 0x45564e54)?;
    fs::create_dir_all(out)?;
    write_jsonl(&out.join("catalog.jsonl"), &catalog)?;
    write_jsonl(&out.join("events.jsonl"), &log)?;
    world.save(&out.join("latent.bin"))?;
    println!(
        "wrote {} products, {} events, {} topics to {}",
        catalog.len(),
        log.len(),
        topics,
        out.display()
    );
    Ok(())
}

fn state_path(checkpoint: &Path) -> PathBuf {
    PathBuf::from(format!("{}.state", checkpoint.display()))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.join(name),
        _ => PathBuf::from(name),
    }
}

fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let products: Vec<Product> = read_jsonl(&data.join("catalog.jsonl"))?;
    let events: Vec<EngagementEvent> = read_jsonl(&data.join("events.jsonl"))?;
    let mut opts = TrainOptions::default();
    opts.dump_dir = out.parent().map(Path::to_path_buf);
    if let Some(ckpt) = resume {
        opts.resume = Some(Resume {
            params: read_checkpoint(ckpt)?,
            optimizer: trainer::read_train_state(&state_path(ckpt))?,
        });
    }
    let outcome = trainer::train(&cfg, &opts, &products, &events)?;
    outcome.encoder.save(out)?;
    trainer::write_train_state(&state_path(out), &outcome.optimizer)?;
    trainer::write_metrics_csv(&sibling(out, "metrics.csv"), &cfg, &outcome.metrics)?;
    if let Some(row) = outcome.metrics.last() {
        println!("final step {} loss {}", row.step, row.loss);
    }
    if let Some(recall) = &outcome.final_recall {
        for r in recall {
            println!(
                "recall@{} {}/{}: {}",
                cfg.k, r.surface, r.engagement, r.result.recall
            );
        }
    }
    Ok(())
}

fn infer(checkpoint: &Path, config: &Path, catalog: &Path, out: &Path) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let encoder = Encoder::<f32>::load(checkpoint)?;
    let products: Vec<Product> = read_jsonl(catalog)?;
    if products.is_empty() {
        return Err(Error::Input("inference needs a non-empty catalog".into()));
    }
    let corpus: Vec<String> = products
        .iter()
        .flat_map(|p| p.text_fields().into_iter())
        .collect();
    let vocab = build_vocab(corpus.iter().map(|s| s.as_str()), cfg.vocab_caps())?;
    if encoder.dims().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary has {} tokens, this catalog builds {}",
            encoder.dims().vocab_size,
            vocab.len()
        )));
    }
    let prepared = PreparedCatalog::new(&products, &vocab)?;
    let indices: Vec<usize> = (0..products.len()).collect();
    let rows = trainer::embed_indices(&encoder, &prepared, &indices, Modality::Full)?;
    store::write_store(out, &prepared.ids, &rows)?;
    println!("wrote {} embeddings of dimension {}", rows.len(), rows[0].len());
    Ok(())
}

fn index_build(
    embeddings: &Path,
    out: &Path,
    m: usize,
    ef_construction: usize,
    seed: u64,
    exact: bool,
) -> Result<()> {
    let (ids, rows) = store::read_store(embeddings)?;
    let n = ids.len();
    let index = if exact {
        EmbeddingIndex::build_exact(ids, rows)?
    } else {
        EmbeddingIndex::build_hnsw(ids, rows, m, ef_construction, seed)?
    };
    index.save(out)?;
    println!(
        "indexed {n} rows ({}) into {}",
        if exact { "exact scan".to_string() } else { format!("graph, m={m}") },
        out.display()
    );
    Ok(())
}

fn query(
    index_path: &Path,
    text: Option<&str>,
    image_embedding: Option<&Path>,
    data: Option<&Path>,
    k: usize,
    ef_search: usize,
) -> Result<()> {
    let index = EmbeddingIndex::load(index_path)?;
    let q: Vec<f32> = match (text, image_embedding) {
        (Some(terms), None) => {
            let dir = data.ok_or_else(|| {
                Error::Config("--text needs --data pointing at the latent world".into())
            })?;
            let world = LatentWorld::load(&dir.join("latent.bin"))?;
            QueryProvider::new(&world, ProviderKind::Search).embed_terms(terms)?
        }
        (None, Some(file)) => read_query_vector(file, index.dim())?,
        _ => {
            return Err(Error::Config(
                "pass exactly one of --text or --image-embedding".into(),
            ))
        }
    };
    let result = index.query(&q, k, ef_search)?;
    if result.capped {
        eprintln!(
            "note: asked for {k} neighbors, index holds {}; returning all",
            index.len()
        );
    }
    for hit in result.hits {
        println!("{{\"id\":{},\"score\":{}}}", hit.id, hit.score);
    }
    Ok(())
}

fn read_query_vector(path: &Path, dim: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != dim * 4 {
        return Err(Error::Shape(format!(
            "query file holds {} bytes, a {dim}-dimensional row needs {}",
            bytes.len(),
            dim * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn recall_csv(rows: &[TaskRecall], k: usize) -> String {
    let mut out = format!("surface,engagement,recall@{k},weight,pairs\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.surface, r.engagement, r.result.recall, r.result.weight, r.result.pairs
        ));
    }
    out
}

fn eval_cmd(checkpoint: &Path, config: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = Config::from_file(config)?;
    let encoder = Encoder::<f32>::load(checkpoint)?;
    let products: Vec<Product> = read_jsonl(&data.join("catalog.jsonl"))?;
    let events: Vec<EngagementEvent> = read_jsonl(&data.join("events.jsonl"))?;
    let rows = trainer::evaluate(&cfg, &encoder, &products, &events, Modality::Full)?;
    let csv = recall_csv(&rows, cfg.k);
    match out {
        Some(path) => fs::write(path, csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn ablate(axis: &str, config: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let axis: AblationAxis = axis.parse()?;
    let cfg = Config::from_file(config)?;
    let products: Vec<Product> = read_jsonl(&data.join("catalog.jsonl"))?;
    let events: Vec<EngagementEvent> = read_jsonl(&data.join("events.jsonl"))?;
    let rows = run_ablation(axis, &cfg, &products, &events)?;
    let csv = ablation_csv(&rows);
    match out {
        Some(path) => fs::write(path, csv).map_err(Error::from)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_separate_failure_classes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Input("x".into())), 2);
        assert_eq!(exit_code(&Error::Parse { line: 3, msg: "x".into() }), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 4);
    }

    #[test]
    fn scaled_event_counts_sum_to_the_request_and_keep_proportions() {
        for total in [0usize, 1, 97, 2400, 520_000] {
            let counts = scale_counts(total);
            assert_eq!(counts.iter().map(|c| c.2).sum::<usize>(), total);
        }
        let counts = scale_counts(520_000);
        assert_eq!(counts, SynthConfig::desk_counts());
        let small = scale_counts(260);
        let clicks: usize = small
            .iter()
            .filter(|c| c.1 == Engagement::Click)
            .map(|c| c.2)
            .sum();
        assert_eq!(clicks, 150);
    }

    #[test]
    fn query_vector_files_must_match_the_index_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.bin");
        fs::write(&path, [0u8; 12]).unwrap();
        assert!(read_query_vector(&path, 3).is_ok());
        assert!(matches!(read_query_vector(&path, 4), Err(Error::Shape(_))));
    }
}
