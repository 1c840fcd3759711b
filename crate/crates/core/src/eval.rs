//! Engagement-weighted Recall@k over a distractor set, scored with exact
//! dot products so the numbers are independent of any ANN index.
//!
//! A pair contributes its weight when at most k distractors score at least
//! as high as the engaged product; ties at the threshold count against
//! recall. Results aggregate per (surface, engagement) task. A separate
//! probe measures degenerate solutions: the largest fraction of queries
//! that share any single top-k product.

use std::collections::HashMap;

use crate::config::Config;
use crate::data::{EngagementEvent, Engagement, Product, Surface};
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::par;
use crate::trainer::{self, LossVariant, TrainOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    /// Unit-norm query embedding from the frozen provider.
    pub query: Vec<f32>,
    /// Engaged product.
    pub product_id: u64,
    pub weight: f32,
    pub surface: Surface,
    pub engagement: Engagement,
}

/// Extracts evaluation pairs from events; every event must carry its
/// precomputed query embedding.
pub fn pairs_from_events(events: &[EngagementEvent]) -> Result<Vec<EvalPair>> {
    events
        .iter()
        .map(|e| {
            let query = e
                .query
                .embedding()
                .ok_or_else(|| {
                    Error::Input(format!(
                        "event for product {} has no query embedding",
                        e.product_id
                    ))
                })?
                .to_vec();
            Ok(EvalPair {
                query,
                product_id: e.product_id,
                weight: e.weight,
                surface: e.surface,
                engagement: e.engagement,
            })
        })
        .collect()
}

/// Splits events into train and holdout, stratified per (surface,
/// engagement) so every task keeps evaluation pairs. Within each cell the
/// holdout is `fraction` of events, capped at `cap` (0 means uncapped).
pub fn split_holdout(
    events: &[EngagementEvent],
    fraction: f32,
    cap: usize,
    seed: u64,
) -> (Vec<EngagementEvent>, Vec<EngagementEvent>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut by_cell: HashMap<(Surface, Engagement), Vec<usize>> = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        by_cell.entry((e.surface, e.engagement)).or_default().push(i);
    }
    let mut held = vec![false; events.len()];
    let mut cells: Vec<_> = by_cell.into_iter().collect();
    cells.sort_by_key(|&((s, g), _)| (s, g));
    for (cell, mut idx) in cells {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
            seed ^ ((cell.0 as u64) << 32) ^ ((cell.1 as u64) << 40) ^ 0x5eed,
        );
        idx.shuffle(&mut rng);
        let mut n = (idx.len() as f64 * fraction as f64).floor() as usize;
        if cap > 0 {
            n = n.min(cap);
        }
        for &i in &idx[..n] {
            held[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, e) in events.iter().enumerate() {
        if held[i] {
            eval.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    (train, eval)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedRecall {
    pub recall: f64,
    /// Total weight aggregated.
    pub weight: f64,
    pub pairs: usize,
}

/// Engagement-weighted Recall@k: the weighted fraction of pairs whose
/// engaged product outscores all but at most k distractors (ties counted
/// as distractor wins).
pub fn recall_at_k(
    pairs: &[EvalPair],
    products: &HashMap<u64, Vec<f32>>,
    distractors: &[Vec<f32>],
    k: usize,
) -> Result<WeightedRecall> {
    if pairs.is_empty() {
        return Err(Error::Input("recall over an empty benchmark".into()));
    }
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    for p in pairs {
        if !products.contains_key(&p.product_id) {
            return Err(Error::Input(format!(
                "no embedding for engaged product {}",
                p.product_id
            )));
        }
    }
    let hits = par::map_slice(pairs, |p| {
        let target = dot(&p.query, &products[&p.product_id]);
        let outranked = distractors
            .iter()
            .filter(|d| dot(&p.query, d) >= target)
            .count();
        outranked <= k
    });
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (p, hit) in pairs.iter().zip(&hits) {
        den += p.weight as f64;
        if *hit {
            num += p.weight as f64;
        }
    }
    if den <= 0.0 {
        return Err(Error::Input("benchmark has zero total weight".into()));
    }
    Ok(WeightedRecall { recall: num / den, weight: den, pairs: pairs.len() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecall {
    pub surface: Surface,
    pub engagement: Engagement,
    pub result: WeightedRecall,
}

/// Recall@k per (surface, engagement) task, in surface-major order,
/// covering only tasks present in the benchmark.
pub fn per_task_recall(
    pairs: &[EvalPair],
    products: &HashMap<u64, Vec<f32>>,
    distractors: &[Vec<f32>],
    k: usize,
) -> Result<Vec<TaskRecall>> {
    let mut out = Vec::new();
    for surface in Surface::ALL {
        for engagement in Engagement::ALL {
            let cell: Vec<EvalPair> = pairs
                .iter()
                .filter(|p| p.surface == surface && p.engagement == engagement)
                .cloned()
                .collect();
            if cell.is_empty() {
                continue;
            }
            out.push(TaskRecall {
                surface,
                engagement,
                result: recall_at_k(&cell, products, distractors, k)?,
            });
        }
    }
    Ok(out)
}

/// Largest fraction of queries whose top-k contains any single product.
/// Values far above k/|products| flag a degenerate embedding space where a
/// few products crowd everyone's results.
pub fn degenerate_popularity_probe(
    queries: &[Vec<f32>],
    products: &[(u64, Vec<f32>)],
    k: usize,
) -> Result<f64> {
    if queries.is_empty() || products.is_empty() {
        return Err(Error::Input("probe needs queries and products".into()));
    }
    let k = k.min(products.len());
    let tops = par::map_slice(queries, |q| {
        let mut scored: Vec<(f64, u64)> = products
            .iter()
            .map(|(id, e)| (dot(q, e), *id))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored[..k].iter().map(|&(_, id)| id).collect::<Vec<u64>>()
    });
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for top in &tops {
        for id in top {
            *counts.entry(*id).or_insert(0) += 1;
        }
    }
    let max = counts.values().copied().max().unwrap_or(0);
    Ok(max as f64 / queries.len() as f64)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Feature,
    NegativeSampling,
    Surface,
    Engagement,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Feature,
        AblationAxis::NegativeSampling,
        AblationAxis::Surface,
        AblationAxis::Engagement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Feature => "feature",
            AblationAxis::NegativeSampling => "negative_sampling",
            AblationAxis::Surface => "surface",
            AblationAxis::Engagement => "engagement",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(AblationAxis::Feature),
            "negative_sampling" => Ok(AblationAxis::NegativeSampling),
            "surface" => Ok(AblationAxis::Surface),
            "engagement" => Ok(AblationAxis::Engagement),
            other => Err(Error::Input(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub variant: String,
    pub surface: Surface,
    pub engagement: Engagement,
    pub recall: f64,
    /// Relative change against the baseline variant's recall on the same
    /// cell; NaN when the baseline recall is zero.
    pub delta: f64,
}

/// One trained configuration within an ablation axis. The first variant of
/// each axis is the reference the deltas are measured against.
struct AblationVariant {
    name: &'static str,
    modality: Modality,
    loss: LossVariant,
    surfaces: Option<Vec<Surface>>,
    engagements: Option<Vec<Engagement>>,
}

impl AblationVariant {
    fn reference(name: &'static str) -> AblationVariant {
        AblationVariant {
            name,
            modality: Modality::Full,
            loss: LossVariant::Combined,
            surfaces: None,
            engagements: None,
        }
    }
}

fn axis_variants(axis: AblationAxis) -> Vec<AblationVariant> {
    match axis {
        AblationAxis::Feature => vec![
            AblationVariant::reference("full"),
            AblationVariant { modality: Modality::ImageOnly, ..AblationVariant::reference("image_only") },
            AblationVariant { modality: Modality::TextOnly, ..AblationVariant::reference("text_only") },
        ],
        AblationAxis::NegativeSampling => vec![
            AblationVariant::reference("combined"),
            AblationVariant {
                loss: LossVariant::InBatchOnly,
                ..AblationVariant::reference("in_batch_only")
            },
            AblationVariant {
                loss: LossVariant::RandomNegativeOnly,
                ..AblationVariant::reference("random_negative_only")
            },
            AblationVariant { loss: LossVariant::Mixed, ..AblationVariant::reference("mixed") },
        ],
        AblationAxis::Surface => vec![
            AblationVariant::reference("both"),
            AblationVariant {
                surfaces: Some(vec![Surface::Closeup]),
                ..AblationVariant::reference("closeup_only")
            },
            AblationVariant {
                surfaces: Some(vec![Surface::Search]),
                ..AblationVariant::reference("search_only")
            },
        ],
        AblationAxis::Engagement => vec![
            AblationVariant::reference("all"),
            AblationVariant {
                engagements: Some(vec![Engagement::Click, Engagement::Save]),
                ..AblationVariant::reference("clicks_saves")
            },
            AblationVariant {
                engagements: Some(vec![Engagement::AddToCart, Engagement::Checkout]),
                ..AblationVariant::reference("cart_checkout")
            },
        ],
    }
}

/// Trains every variant of one axis at the config's seed and scores all of
/// them on a single shared holdout benchmark, so the deltas compare
/// like-for-like. Surface-restricted variants report only their own
/// surface's cells; engagement-restricted variants report every cell, the
/// untrained ones included.
pub fn run_ablation(
    axis: AblationAxis,
    cfg: &Config,
    products: &[Product],
    events: &[EngagementEvent],
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let deduped = trainer::dedup_labels(events);
    let (_, holdout) =
        split_holdout(&deduped, cfg.holdout_fraction, cfg.eval_pairs, cfg.seed);
    let all_pairs = pairs_from_events(&holdout)?;
    let cells = cfg.tasks();
    let per_cell = (cfg.eval_pairs / cells.len().max(1)).max(1);
    let mut benchmark = Vec::new();
    for &(s, e) in &cells {
        benchmark.extend(
            all_pairs
                .iter()
                .filter(|p| p.surface == s && p.engagement == e)
                .take(per_cell)
                .cloned(),
        );
    }
    if benchmark.is_empty() {
        return Err(Error::Input("ablation holdout benchmark is empty".into()));
    }

    let mut baseline: HashMap<(Surface, Engagement), f64> = HashMap::new();
    let mut rows = Vec::new();
    for (vi, variant) in axis_variants(axis).into_iter().enumerate() {
        let mut vcfg = cfg.clone();
        if let Some(s) = &variant.surfaces {
            vcfg.surfaces = s.clone();
        }
        if let Some(e) = &variant.engagements {
            vcfg.engagements = e.clone();
        }
        let opts = TrainOptions {
            modality: variant.modality,
            loss: variant.loss,
            ..TrainOptions::default()
        };
        let outcome = trainer::train(&vcfg, &opts, products, events)?;
        let recalls = score_benchmark(
            &outcome.encoder,
            &outcome.vocab,
            variant.modality,
            products,
            &benchmark,
            cfg,
        )?;
        for r in recalls {
            if let Some(surfaces) = &variant.surfaces {
                if !surfaces.contains(&r.surface) {
                    continue;
                }
            }
            let cell = (r.surface, r.engagement);
            let delta = if vi == 0 {
                baseline.insert(cell, r.result.recall);
                0.0
            } else {
                match baseline.get(&cell) {
                    Some(&base) if base > 0.0 => (r.result.recall - base) / base,
                    _ => f64::NAN,
                }
            };
            rows.push(AblationRow {
                axis,
                variant: variant.name.to_string(),
                surface: r.surface,
                engagement: r.engagement,
                recall: r.result.recall,
                delta,
            });
        }
    }
    Ok(rows)
}

/// Embeds the benchmark's engaged products and a fixed distractor sample
/// with the given encoder, then scores recall per task.
fn score_benchmark(
    encoder: &crate::encoder::Encoder<f32>,
    vocab: &crate::text::Vocabulary,
    modality: Modality,
    products: &[Product],
    benchmark: &[EvalPair],
    cfg: &Config,
) -> Result<Vec<TaskRecall>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let catalog = trainer::PreparedCatalog::new(products, vocab)?;
    let mut needed: Vec<usize> = benchmark
        .iter()
        .map(|p| {
            catalog.id_to_index.get(&p.product_id).copied().ok_or_else(|| {
                Error::Input(format!("benchmark references unknown product {}", p.product_id))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    needed.sort_unstable();
    needed.dedup();
    let engaged: std::collections::HashSet<usize> = needed.iter().copied().collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xab1a);
    let mut pool: Vec<usize> =
        (0..products.len()).filter(|i| !engaged.contains(i)).collect();
    pool.shuffle(&mut rng);
    pool.truncate(cfg.distractors.min(pool.len()));
    pool.sort_unstable();

    let engaged_emb = trainer::embed_indices(encoder, &catalog, &needed, modality)?;
    let mut products_map = HashMap::new();
    for (&idx, emb) in needed.iter().zip(engaged_emb) {
        products_map.insert(catalog.products[idx].id, emb);
    }
    let distractors = trainer::embed_indices(encoder, &catalog, &pool, modality)?;
    per_task_recall(benchmark, &products_map, &distractors, cfg.k)
}

/// Renders ablation rows as CSV with a fixed header; NaN deltas render as
/// an empty field.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("axis,variant,surface,engagement,recall@10,relative_delta\n");
    for r in rows {
        let delta = if r.delta.is_nan() { String::new() } else { format!("{}", r.delta) };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.axis.as_str(),
            r.variant,
            r.surface,
            r.engagement,
            r.recall,
            delta
        ));
    }
    out
}
