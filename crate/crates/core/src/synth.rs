//! Synthetic shopping catalog and engagement logs with retained ground
//! truth, so retrieval quality can be scored against a known answer.
//!
//! A world is a set of unit-norm topic centroids plus, per topic, token
//! distributions for the 12 text fields. Every product mixes one or two
//! topics into a unit latent; its images are noisy copies of that latent
//! and its text is sampled from its topics' distributions. Engagements
//! pair a query (a perturbed product latent on the closeup surface, an
//! embedded token string on the search surface) with a product drawn by
//! popularity and latent affinity. Conversion events are steered toward a
//! designated purchasable topic subset so they carry signal of their own.
//!
//! The latent truth (centroids, per-product latents, popularity) is saved
//! to its own file for evaluation oracles; training reads only the catalog
//! and event files.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{
    EngagementEvent, Engagement, Product, Query, Surface, MAX_IMAGES, TEXT_FIELD_COUNT,
};
use crate::error::{Error, Result};
use crate::par;

/// Tokens per product for each text field, in stored field order.
const FIELD_LENGTHS: [usize; TEXT_FIELD_COUNT] = [8, 24, 1, 2, 3, 3, 1, 2, 2, 1, 1, 1];
/// Topic-exclusive vocabulary size per field.
const FIELD_EXCLUSIVE: [usize; TEXT_FIELD_COUNT] = [30, 60, 5, 8, 4, 6, 5, 6, 5, 4, 4, 2];
/// Cross-topic shared vocabulary size per field.
const FIELD_SHARED: [usize; TEXT_FIELD_COUNT] = [10, 20, 2, 3, 2, 2, 2, 3, 2, 2, 2, 1];
/// Short field prefixes baked into token strings.
const FIELD_PREFIX: [&str; TEXT_FIELD_COUNT] =
    ["ti", "de", "md", "li", "gc", "pt", "br", "co", "ma", "pa", "sz", "st"];
/// Probability mass given to the shared vocabulary in every distribution.
const SHARED_MASS: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub products: usize,
    pub topics: usize,
    /// Latent, image, and query embedding dimension.
    pub dim: usize,
    /// Per-coordinate gaussian noise on product image embeddings.
    pub image_noise: f32,
    /// Per-coordinate gaussian noise on closeup query embeddings.
    pub query_noise: f32,
    /// Images per product are drawn uniformly from 1..=max_images.
    pub max_images: usize,
    /// Probability a product mixes two topics instead of one.
    pub two_topic_prob: f64,
    /// Popularity follows rank^(-zipf_exponent); 0 gives a flat catalog.
    pub zipf_exponent: f64,
    /// Sharpness of the engagement choice: weights are
    /// popularity * exp((cos - max_cos) / affinity_temp).
    pub affinity_temp: f64,
    /// Candidates scored per engagement; at or above the topic pool size
    /// the whole pool is scored.
    pub shortlist: usize,
    /// Leading fraction of topics designated purchasable.
    pub purchasable_fraction: f32,
    /// Probability a conversion event is steered to purchasable topics.
    pub conversion_bias: f64,
    /// Jitter blended into the frozen search provider's token vectors.
    pub provider_noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::desk()
    }
}

impl SynthConfig {
    pub fn desk() -> Self {
        SynthConfig {
            products: 50_000,
            topics: 16,
            dim: 64,
            image_noise: 0.1,
            query_noise: 0.1,
            max_images: 4,
            two_topic_prob: 0.5,
            zipf_exponent: 1.0,
            affinity_temp: 0.1,
            shortlist: 64,
            purchasable_fraction: 0.25,
            conversion_bias: 0.8,
            provider_noise: 0.25,
        }
    }

    /// Event quotas matching the desk-scale defaults: 500k click/save and
    /// 20k conversion events split across both surfaces.
    pub fn desk_counts() -> Vec<(Surface, Engagement, usize)> {
        let mut out = Vec::new();
        for s in Surface::ALL {
            out.push((s, Engagement::Click, 150_000));
            out.push((s, Engagement::Save, 100_000));
            out.push((s, Engagement::AddToCart, 6_000));
            out.push((s, Engagement::Checkout, 4_000));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.products == 0 {
            return Err(Error::Config("products must be at least 1".into()));
        }
        if self.topics < 2 {
            return Err(Error::Config("topics must be at least 2".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if !(1..=MAX_IMAGES).contains(&self.max_images) {
            return Err(Error::Config(format!(
                "max_images {} outside 1..={MAX_IMAGES}",
                self.max_images
            )));
        }
        if !(0.0..=1.0).contains(&self.two_topic_prob)
            || !(0.0..=1.0).contains(&self.conversion_bias)
            || !(0.0..=1.0).contains(&self.purchasable_fraction)
        {
            return Err(Error::Config(
                "two_topic_prob, conversion_bias, purchasable_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::Config("zipf_exponent must be finite and >= 0".into()));
        }
        if !(self.affinity_temp > 0.0 && self.affinity_temp.is_finite()) {
            return Err(Error::Config("affinity_temp must be positive".into()));
        }
        if self.shortlist == 0 {
            return Err(Error::Config("shortlist must be at least 1".into()));
        }
        if !(self.image_noise >= 0.0 && self.query_noise >= 0.0 && self.provider_noise >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generator ground truth: topic geometry, token distributions, and the
/// per-product latents and popularity the evaluation oracles score against.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentWorld {
    pub dim: usize,
    /// Unit-norm topic centroids.
    pub centroids: Vec<Vec<f32>>,
    pub purchasable: Vec<bool>,
    /// Per topic, per field: token strings and their probabilities.
    pub tokens: Vec<Vec<Vec<String>>>,
    /// Same shape as `tokens`; each distribution sums to 1.
    pub token_probs: Vec<Vec<Vec<f32>>>,
    /// Jitter the frozen search provider was built with.
    pub provider_noise: f32,
    pub ids: Vec<u64>,
    /// Per product: (topic, weight) mix, one or two entries.
    pub mixes: Vec<Vec<(u32, f32)>>,
    /// Per product unit-norm latent.
    pub latents: Vec<Vec<f32>>,
    /// Per product sampling probability; sums to 1.
    pub popularity: Vec<f64>,
}

impl LatentWorld {
    pub fn topics(&self) -> usize {
        self.centroids.len()
    }

    pub fn products(&self) -> usize {
        self.ids.len()
    }

    /// Product indices mixing each topic, ascending.
    pub fn topic_products(&self) -> Vec<Vec<u32>> {
        let mut pools = vec![Vec::new(); self.topics()];
        for (i, mix) in self.mixes.iter().enumerate() {
            for &(t, _) in mix {
                pools[t as usize].push(i as u32);
            }
        }
        pools
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"ISLW")?;
        w_u32(&mut w, 1)?;
        w_u32(&mut w, self.dim as u32)?;
        w_u32(&mut w, self.topics() as u32)?;
        w_u64(&mut w, self.products() as u64)?;
        w.write_all(&self.provider_noise.to_le_bytes())?;
        for c in &self.centroids {
            w_f32s(&mut w, c)?;
        }
        for &p in &self.purchasable {
            w.write_all(&[u8::from(p)])?;
        }
        for t in 0..self.topics() {
            for f in 0..TEXT_FIELD_COUNT {
                let toks = &self.tokens[t][f];
                w_u32(&mut w, toks.len() as u32)?;
                for (tok, &p) in toks.iter().zip(&self.token_probs[t][f]) {
                    w_u32(&mut w, tok.len() as u32)?;
                    w.write_all(tok.as_bytes())?;
                    w.write_all(&p.to_le_bytes())?;
                }
            }
        }
        for &id in &self.ids {
            w_u64(&mut w, id)?;
        }
        for mix in &self.mixes {
            w.write_all(&[mix.len() as u8])?;
            for &(t, wt) in mix {
                w_u32(&mut w, t)?;
                w.write_all(&wt.to_le_bytes())?;
            }
        }
        for l in &self.latents {
            w_f32s(&mut w, l)?;
        }
        for &p in &self.popularity {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<LatentWorld> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r_exact(&mut r, &mut magic, "magic")?;
        if &magic != b"ISLW" {
            return Err(Error::Format("not a latent-truth file".into()));
        }
        let version = r_u32(&mut r, "version")?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = r_u32(&mut r, "dim")? as usize;
        let topics = r_u32(&mut r, "topics")? as usize;
        let products = r_u64(&mut r, "products")? as usize;
        let provider_noise = r_f32(&mut r, "provider noise")?;
        let mut centroids = Vec::with_capacity(topics);
        for _ in 0..topics {
            centroids.push(r_f32s(&mut r, dim, "centroid")?);
        }
        let mut purchasable = Vec::with_capacity(topics);
        for _ in 0..topics {
            let mut b = [0u8; 1];
            r_exact(&mut r, &mut b, "purchasable flag")?;
            purchasable.push(b[0] != 0);
        }
        let mut tokens = Vec::with_capacity(topics);
        let mut token_probs = Vec::with_capacity(topics);
        for _ in 0..topics {
            let mut tf = Vec::with_capacity(TEXT_FIELD_COUNT);
            let mut pf = Vec::with_capacity(TEXT_FIELD_COUNT);
            for _ in 0..TEXT_FIELD_COUNT {
                let n = r_u32(&mut r, "vocab size")? as usize;
                let mut toks = Vec::with_capacity(n);
                let mut probs = Vec::with_capacity(n);
                for _ in 0..n {
                    let len = r_u32(&mut r, "token length")? as usize;
                    let mut buf = vec![0u8; len];
                    r_exact(&mut r, &mut buf, "token")?;
                    toks.push(String::from_utf8(buf).map_err(|_| {
                        Error::Format("token is not valid UTF-8".into())
                    })?);
                    probs.push(r_f32(&mut r, "token probability")?);
                }
                tf.push(toks);
                pf.push(probs);
            }
            tokens.push(tf);
            token_probs.push(pf);
        }
        let mut ids = Vec::with_capacity(products);
        for _ in 0..products {
            ids.push(r_u64(&mut r, "product id")?);
        }
        let mut mixes = Vec::with_capacity(products);
        for _ in 0..products {
            let mut k = [0u8; 1];
            r_exact(&mut r, &mut k, "mix size")?;
            let mut mix = Vec::with_capacity(k[0] as usize);
            for _ in 0..k[0] {
                let t = r_u32(&mut r, "mix topic")?;
                mix.push((t, r_f32(&mut r, "mix weight")?));
            }
            mixes.push(mix);
        }
        let mut latents = Vec::with_capacity(products);
        for _ in 0..products {
            latents.push(r_f32s(&mut r, dim, "latent")?);
        }
        let mut popularity = Vec::with_capacity(products);
        for _ in 0..products {
            let mut b = [0u8; 8];
            r_exact(&mut r, &mut b, "popularity")?;
            popularity.push(f64::from_le_bytes(b));
        }
        Ok(LatentWorld {
            dim,
            centroids,
            purchasable,
            tokens,
            token_probs,
            provider_noise,
            ids,
            mixes,
            latents,
            popularity,
        })
    }
}

/// Generates the catalog and its ground truth in one pass. Product ids are
/// 1..=n; the world's per-product arrays are aligned with that order.
pub fn gen_catalog(cfg: &SynthConfig, seed: u64) -> Result<(Vec<Product>, LatentWorld)> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, 0, 0);
    let centroids: Vec<Vec<f32>> = (0..cfg.topics)
        .map(|_| {
            let mut c: Vec<f32> = (0..cfg.dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect();
            normalize(&mut c);
            c
        })
        .collect();
    let purchasable_count =
        ((cfg.topics as f32 * cfg.purchasable_fraction).round() as usize).clamp(1, cfg.topics);
    let purchasable: Vec<bool> = (0..cfg.topics).map(|t| t < purchasable_count).collect();

    let mut tokens = Vec::with_capacity(cfg.topics);
    let mut token_probs = Vec::with_capacity(cfg.topics);
    for t in 0..cfg.topics {
        let mut tf = Vec::with_capacity(TEXT_FIELD_COUNT);
        let mut pf = Vec::with_capacity(TEXT_FIELD_COUNT);
        for f in 0..TEXT_FIELD_COUNT {
            let mut rng = stream_rng(seed, 1, (t * TEXT_FIELD_COUNT + f) as u64);
            let (toks, probs) = field_distribution(t, f, &mut rng);
            tf.push(toks);
            pf.push(probs);
        }
        tokens.push(tf);
        token_probs.push(pf);
    }

    let mut order: Vec<usize> = (0..cfg.products).collect();
    order.shuffle(&mut stream_rng(seed, 2, 0));
    let mut rank = vec![0usize; cfg.products];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let raw: Vec<f64> = rank
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-cfg.zipf_exponent))
        .collect();
    let total: f64 = raw.iter().sum();
    let popularity: Vec<f64> = raw.into_iter().map(|x| x / total).collect();

    let samplers = build_samplers(&token_probs)?;
    let rows = par::map_range(cfg.products, |i| {
        let mut rng = stream_rng(seed, 3, i as u64);
        let mix = draw_mix(cfg, &mut rng);
        let mut latent = vec![0f32; cfg.dim];
        for &(t, w) in &mix {
            for (l, c) in latent.iter_mut().zip(&centroids[t as usize]) {
                *l += w * c;
            }
        }
        normalize(&mut latent);
        let image_count = rng.gen_range(1..=cfg.max_images);
        let image_embeddings: Vec<Vec<f32>> = (0..image_count)
            .map(|_| {
                if cfg.image_noise == 0.0 {
                    latent.clone()
                } else {
                    latent
                        .iter()
                        .map(|&x| {
                            x + cfg.image_noise
                                * rng.sample::<f64, _>(StandardNormal) as f32
                        })
                        .collect()
                }
            })
            .collect();
        let fields: Vec<Vec<String>> = (0..TEXT_FIELD_COUNT)
            .map(|f| {
                (0..FIELD_LENGTHS[f])
                    .map(|_| {
                        let t = draw_topic(&mix, &mut rng) as usize;
                        tokens[t][f][samplers[t][f].sample(&mut rng)].clone()
                    })
                    .collect()
            })
            .collect();
        let product = Product {
            id: (i + 1) as u64,
            image_embeddings,
            title: fields[0].join(" "),
            description: fields[1].join(" "),
            merchant_domain: fields[2].join(" "),
            links: fields[3].clone(),
            google_product_category: fields[4].join(" "),
            product_types: fields[5].clone(),
            brand: fields[6].join(" "),
            colors: fields[7].clone(),
            materials: fields[8].clone(),
            patterns: fields[9].clone(),
            size: fields[10].join(" "),
            size_type: fields[11].join(" "),
        };
        (product, mix, latent)
    });

    let mut products = Vec::with_capacity(cfg.products);
    let mut mixes = Vec::with_capacity(cfg.products);
    let mut latents = Vec::with_capacity(cfg.products);
    for (p, m, l) in rows {
        products.push(p);
        mixes.push(m);
        latents.push(l);
    }
    let world = LatentWorld {
        dim: cfg.dim,
        centroids,
        purchasable,
        tokens,
        token_probs,
        provider_noise: cfg.provider_noise,
        ids: products.iter().map(|p| p.id).collect(),
        mixes,
        latents,
        popularity,
    };
    Ok((products, world))
}

/// Generates engagement events, exactly `count` per (surface, engagement)
/// entry, shuffled together at the end.
pub fn gen_engagement(
    world: &LatentWorld,
    cfg: &SynthConfig,
    counts: &[(Surface, Engagement, usize)],
    seed: u64,
) -> Result<Vec<EngagementEvent>> {
    cfg.validate()?;
    let total: usize = counts.iter().map(|&(_, _, n)| n).sum();
    if total == 0 {
        return Ok(Vec::new());
    }
    if world.products() == 0 {
        return Err(Error::Input("cannot generate events for an empty world".into()));
    }
    let pools = world.topic_products();
    let global = WeightedIndex::new(world.popularity.iter().copied())
        .map_err(|e| Error::Numeric(format!("popularity weights: {e}")))?;
    let pool_samplers: Vec<Option<WeightedIndex<f64>>> = pools
        .iter()
        .map(|pool| {
            if pool.is_empty() {
                None
            } else {
                WeightedIndex::new(pool.iter().map(|&i| world.popularity[i as usize])).ok()
            }
        })
        .collect();
    let purch_products: Vec<u32> = (0..world.products() as u32)
        .filter(|&i| {
            world.mixes[i as usize]
                .iter()
                .any(|&(t, _)| world.purchasable[t as usize])
        })
        .collect();
    let purch_sampler = if purch_products.is_empty() {
        None
    } else {
        WeightedIndex::new(purch_products.iter().map(|&i| world.popularity[i as usize])).ok()
    };
    let provider = QueryProvider::new(world, ProviderKind::Search);

    let mut specs = Vec::with_capacity(total);
    for &(surface, engagement, n) in counts {
        for _ in 0..n {
            specs.push((surface, engagement));
        }
    }

    let events: Vec<Result<EngagementEvent>> = par::map_range(total, |e| {
        let (surface, engagement) = specs[e];
        let mut rng = stream_rng(seed, 4, e as u64);
        let biased = engagement.is_conversion()
            && purch_sampler.is_some()
            && rng.gen_bool(cfg.conversion_bias);
        let anchor = if biased {
            purch_products[purch_sampler.as_ref().unwrap().sample(&mut rng)] as usize
        } else {
            global.sample(&mut rng)
        };
        let topic = {
            let mix = &world.mixes[anchor];
            let restricted: Vec<(u32, f32)> = if biased {
                mix.iter()
                    .copied()
                    .filter(|&(t, _)| world.purchasable[t as usize])
                    .collect()
            } else {
                Vec::new()
            };
            let pick_from = if restricted.is_empty() { &mix[..] } else { &restricted[..] };
            draw_topic(pick_from, &mut rng) as usize
        };
        let query = match surface {
            Surface::Closeup => {
                let mut q = world.latents[anchor].clone();
                if cfg.query_noise > 0.0 {
                    for x in q.iter_mut() {
                        *x += cfg.query_noise * rng.sample::<f64, _>(StandardNormal) as f32;
                    }
                    normalize(&mut q);
                }
                Query::Image { embedding: q }
            }
            Surface::Search => {
                let len = rng.gen_range(2..=4);
                let sampler = WeightedIndex::new(world.token_probs[topic][0].iter().copied())
                    .map_err(|e| Error::Numeric(format!("title distribution: {e}")))?;
                let terms = (0..len)
                    .map(|_| world.tokens[topic][0][sampler.sample(&mut rng)].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let embedding = provider.embed_terms(&terms)?;
                Query::Text { terms, embedding }
            }
        };
        let qe = query.embedding().expect("generated queries carry embeddings");
        let pool = &pools[topic];
        let candidates: Vec<u32> = if cfg.shortlist >= pool.len() {
            pool.clone()
        } else {
            let sampler = pool_samplers[topic].as_ref().expect("anchor topic pool nonempty");
            let mut set: BTreeSet<u32> = BTreeSet::new();
            set.insert(anchor as u32);
            for _ in 0..cfg.shortlist {
                set.insert(pool[sampler.sample(&mut rng)]);
            }
            set.into_iter().collect()
        };
        let scores: Vec<f64> = candidates
            .iter()
            .map(|&y| dot_f64(qe, &world.latents[y as usize]))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = candidates
            .iter()
            .zip(&scores)
            .map(|(&y, &s)| world.popularity[y as usize] * ((s - max) / cfg.affinity_temp).exp())
            .collect();
        let choice = WeightedIndex::new(weights.iter().copied())
            .map_err(|e| Error::Numeric(format!("engagement weights: {e}")))?;
        let engaged = candidates[choice.sample(&mut rng)] as usize;
        let mut weight = 1.0f32;
        while weight < 10.0 && rng.gen::<f64>() < 0.25 {
            weight += 1.0;
        }
        Ok(EngagementEvent {
            surface,
            engagement,
            query,
            product_id: world.ids[engaged],
            weight,
        })
    });
    let mut events = events.into_iter().collect::<Result<Vec<_>>>()?;
    events.shuffle(&mut stream_rng(seed, 5, 0));
    Ok(events)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderKind {
    Closeup,
    Search,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closeup" => Ok(ProviderKind::Closeup),
            "search" => Ok(ProviderKind::Search),
            other => Err(Error::Input(format!("unknown query provider kind {other:?}"))),
        }
    }
}

/// Frozen query encoder. The closeup provider normalizes the query image
/// embedding it is handed; the search provider maps token strings to unit
/// vectors built from the world's topic geometry. Neither is ever updated
/// by training.
pub struct QueryProvider {
    kind: ProviderKind,
    dim: usize,
    jitter: f32,
    token_vectors: HashMap<String, Vec<f32>>,
}

impl QueryProvider {
    pub fn new(world: &LatentWorld, kind: ProviderKind) -> QueryProvider {
        let mut token_vectors = HashMap::new();
        if kind == ProviderKind::Search {
            let mut mass: HashMap<&str, Vec<f32>> = HashMap::new();
            for t in 0..world.topics() {
                for f in 0..TEXT_FIELD_COUNT {
                    for (tok, &p) in world.tokens[t][f].iter().zip(&world.token_probs[t][f]) {
                        mass.entry(tok).or_insert_with(|| vec![0.0; world.topics()])[t] += p;
                    }
                }
            }
            for (tok, by_topic) in mass {
                let mut v = vec![0f32; world.dim];
                let total: f32 = by_topic.iter().sum();
                for (t, &m) in by_topic.iter().enumerate() {
                    if m > 0.0 {
                        for (x, c) in v.iter_mut().zip(&world.centroids[t]) {
                            *x += (m / total) * c;
                        }
                    }
                }
                normalize(&mut v);
                blend_jitter(&mut v, tok, world.provider_noise);
                token_vectors.insert(tok.to_string(), v);
            }
        }
        QueryProvider {
            kind,
            dim: world.dim,
            jitter: world.provider_noise,
            token_vectors,
        }
    }

    /// Embeds a query payload of the provider's kind into a unit vector.
    pub fn embed(&self, query: &Query) -> Result<Vec<f32>> {
        match (self.kind, query) {
            (ProviderKind::Closeup, Query::Image { embedding }) => {
                if embedding.len() != self.dim {
                    return Err(Error::Input(format!(
                        "query embedding has dim {}, expected {}",
                        embedding.len(),
                        self.dim
                    )));
                }
                if embedding.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric("query embedding is not finite".into()));
                }
                let mut v = embedding.clone();
                if !normalize(&mut v) {
                    return Err(Error::Degenerate("query embedding has zero norm".into()));
                }
                Ok(v)
            }
            (ProviderKind::Search, Query::Text { terms, .. }) => self.embed_terms(terms),
            _ => Err(Error::Input(
                "query payload kind does not match the provider".into(),
            )),
        }
    }

    /// Embeds a whitespace-separated token string. Unknown tokens get a
    /// deterministic hash-seeded direction so the map stays total.
    pub fn embed_terms(&self, terms: &str) -> Result<Vec<f32>> {
        let lower = terms.to_lowercase();
        let mut v = vec![0f32; self.dim];
        let mut any = false;
        for tok in lower.split_whitespace() {
            any = true;
            if let Some(tv) = self.token_vectors.get(tok) {
                for (x, y) in v.iter_mut().zip(tv) {
                    *x += y;
                }
            } else {
                let mut u = hash_direction(tok, self.dim);
                blend_jitter(&mut u, tok, self.jitter);
                for (x, y) in v.iter_mut().zip(&u) {
                    *x += y;
                }
            }
        }
        if !any {
            return Err(Error::Input("search query has no tokens".into()));
        }
        if !normalize(&mut v) {
            return Err(Error::Degenerate("search query embedding has zero norm".into()));
        }
        Ok(v)
    }
}

fn field_distribution(
    topic: usize,
    field: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<String>, Vec<f32>) {
    let prefix = FIELD_PREFIX[field];
    let exclusive = FIELD_EXCLUSIVE[field];
    let shared = FIELD_SHARED[field];
    let mut toks = Vec::with_capacity(exclusive + shared);
    let mut raw = Vec::with_capacity(exclusive + shared);
    for j in 0..exclusive {
        toks.push(format!("{prefix}t{topic}w{j}"));
        raw.push((1.0 / (j + 1) as f64) * rng.gen_range(0.7..1.3));
    }
    let excl_total: f64 = raw.iter().sum();
    let mut probs: Vec<f32> = raw
        .iter()
        .map(|&x| ((1.0 - SHARED_MASS) * x / excl_total) as f32)
        .collect();
    let mut shared_raw = Vec::with_capacity(shared);
    for j in 0..shared {
        toks.push(format!("{prefix}c{j}"));
        shared_raw.push((1.0 / (j + 1) as f64) * rng.gen_range(0.7..1.3));
    }
    let shared_total: f64 = shared_raw.iter().sum();
    probs.extend(shared_raw.iter().map(|&x| (SHARED_MASS * x / shared_total) as f32));
    let total: f32 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    (toks, probs)
}

fn build_samplers(token_probs: &[Vec<Vec<f32>>]) -> Result<Vec<Vec<WeightedIndex<f32>>>> {
    token_probs
        .iter()
        .map(|fields| {
            fields
                .iter()
                .map(|probs| {
                    WeightedIndex::new(probs.iter().copied())
                        .map_err(|e| Error::Numeric(format!("token distribution: {e}")))
                })
                .collect()
        })
        .collect()
}

fn draw_mix(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<(u32, f32)> {
    let two = cfg.topics >= 2 && rng.gen_bool(cfg.two_topic_prob);
    let t0 = rng.gen_range(0..cfg.topics) as u32;
    if !two {
        return vec![(t0, 1.0)];
    }
    let mut t1 = rng.gen_range(0..cfg.topics) as u32;
    while t1 == t0 {
        t1 = rng.gen_range(0..cfg.topics) as u32;
    }
    let w = rng.gen_range(0.25..0.75f32);
    vec![(t0, w), (t1, 1.0 - w)]
}

fn draw_topic(mix: &[(u32, f32)], rng: &mut ChaCha8Rng) -> u32 {
    if mix.len() == 1 {
        return mix[0].0;
    }
    let total: f32 = mix.iter().map(|&(_, w)| w).sum();
    let mut r = rng.gen_range(0.0..total);
    for &(t, w) in mix {
        if r < w {
            return t;
        }
        r -= w;
    }
    mix[mix.len() - 1].0
}

/// Unit vector derived from a token's hash; the deterministic jitter source
/// for the frozen search provider.
fn hash_direction(token: &str, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
    let mut v: Vec<f32> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    normalize(&mut v);
    v
}

fn blend_jitter(v: &mut [f32], token: &str, jitter: f32) {
    if jitter == 0.0 {
        return;
    }
    let u = hash_direction(token, v.len());
    for (x, y) in v.iter_mut().zip(&u) {
        *x += jitter * y;
    }
    normalize(v);
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Normalizes in place with f64 accumulation; returns false on zero norm.
fn normalize(v: &mut [f32]) -> bool {
    let norm = dot_f64(v, v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    true
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Independent generator streams: one ChaCha instance per (stream, item),
/// so parallel generation is deterministic regardless of thread count.
fn stream_rng(seed: u64, stream: u64, item: u64) -> ChaCha8Rng {
    let mut x = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ item.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    ChaCha8Rng::seed_from_u64(x)
}

fn w_u32(w: &mut impl Write, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn w_u64(w: &mut impl Write, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn w_f32s(w: &mut impl Write, xs: &[f32]) -> Result<()> {
    for &x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn r_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("reading {what}: {e}")))
}

fn r_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn r_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn r_f32(r: &mut impl Read, what: &str) -> Result<f32> {
    let mut b = [0u8; 4];
    r_exact(r, &mut b, what)?;
    Ok(f32::from_le_bytes(b))
}

fn r_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r_f32(r, what)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    fn small() -> SynthConfig {
        SynthConfig {
            products: 300,
            topics: 4,
            dim: 16,
            max_images: 3,
            ..SynthConfig::desk()
        }
    }

    #[test]
    fn single_product_catalog() {
        let cfg = SynthConfig { products: 1, ..small() };
        let (products, world) = gen_catalog(&cfg, 7).unwrap();
        assert_eq!(products.len(), 1);
        assert!(!products[0].image_embeddings.is_empty());
        products[0].validate(cfg.dim).unwrap();
        assert_eq!(world.products(), 1);
        assert!(matches!(
            gen_catalog(&SynthConfig { topics: 1, ..small() }, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_image_noise_copies_the_latent() {
        let cfg = SynthConfig { products: 40, image_noise: 0.0, ..small() };
        let (products, world) = gen_catalog(&cfg, 11).unwrap();
        for (p, latent) in products.iter().zip(&world.latents) {
            for img in &p.image_embeddings {
                assert_eq!(img, latent);
            }
        }
    }

    #[test]
    fn catalog_is_seed_deterministic() {
        let cfg = small();
        let (p1, w1) = gen_catalog(&cfg, 31).unwrap();
        let (p2, w2) = gen_catalog(&cfg, 31).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(w1, w2);
        let (p3, _) = gen_catalog(&cfg, 32).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn world_invariants_hold() {
        let (_, world) = gen_catalog(&small(), 5).unwrap();
        for c in &world.centroids {
            assert!((dot_f64(c, c).sqrt() - 1.0).abs() < 1e-5);
        }
        for l in &world.latents {
            assert!((dot_f64(l, l).sqrt() - 1.0).abs() < 1e-5);
        }
        for t in 0..world.topics() {
            for f in 0..TEXT_FIELD_COUNT {
                let sum: f64 = world.token_probs[t][f].iter().map(|&p| p as f64).sum();
                assert!((sum - 1.0).abs() < 1e-5, "topic {t} field {f} sums to {sum}");
            }
        }
        let pop: f64 = world.popularity.iter().sum();
        assert!((pop - 1.0).abs() < 1e-9);
        assert!(world.purchasable.iter().any(|&p| p));
        assert!(world.purchasable.iter().any(|&p| !p));
    }

    #[test]
    fn zero_counts_give_empty_log() {
        let (_, world) = gen_catalog(&small(), 5).unwrap();
        let counts = [(Surface::Closeup, Engagement::Click, 0)];
        assert!(gen_engagement(&world, &small(), &counts, 9).unwrap().is_empty());
        assert!(gen_engagement(&world, &small(), &[], 9).unwrap().is_empty());
    }

    #[test]
    fn noiseless_engagement_matches_exhaustive_nearest_latent() {
        let cfg = SynthConfig {
            products: 150,
            topics: 4,
            dim: 16,
            query_noise: 0.0,
            zipf_exponent: 0.0,
            affinity_temp: 1e-9,
            shortlist: usize::MAX,
            provider_noise: 0.0,
            ..SynthConfig::desk()
        };
        let (_, world) = gen_catalog(&cfg, 17).unwrap();
        let counts = [
            (Surface::Closeup, Engagement::Click, 150),
            (Surface::Search, Engagement::Click, 150),
        ];
        let events = gen_engagement(&world, &cfg, &counts, 23).unwrap();
        assert_eq!(events.len(), 300);
        for ev in &events {
            let qe = ev.query.embedding().unwrap();
            let engaged = (ev.product_id - 1) as usize;
            let got = dot_f64(qe, &world.latents[engaged]);
            let best = world
                .latents
                .iter()
                .map(|l| dot_f64(qe, l))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                (best - got).abs() < 1e-12,
                "engaged product at cosine {got}, exhaustive best {best}"
            );
        }
    }

    #[test]
    fn configured_click_checkout_ratio_is_realized() {
        let (_, world) = gen_catalog(&small(), 5).unwrap();
        let counts = [
            (Surface::Closeup, Engagement::Click, 2500),
            (Surface::Closeup, Engagement::Checkout, 100),
        ];
        let events = gen_engagement(&world, &small(), &counts, 13).unwrap();
        let clicks = events.iter().filter(|e| e.engagement == Engagement::Click).count();
        let checkouts = events.iter().filter(|e| e.engagement == Engagement::Checkout).count();
        assert_eq!((clicks, checkouts), (2500, 100));
        let ratio = clicks as f64 / checkouts as f64;
        assert!((ratio - 25.0).abs() / 25.0 <= 0.10);
    }

    #[test]
    fn popularity_skew_is_realized() {
        let cfg = SynthConfig { products: 2000, topics: 8, ..small() };
        let (_, world) = gen_catalog(&cfg, 3).unwrap();
        let counts = [(Surface::Closeup, Engagement::Click, 20_000)];
        let events = gen_engagement(&world, &cfg, &counts, 29).unwrap();
        let mut order: Vec<usize> = (0..world.products()).collect();
        order.sort_by(|&a, &b| world.popularity[b].total_cmp(&world.popularity[a]));
        let top: std::collections::HashSet<u64> =
            order[..world.products() / 100].iter().map(|&i| world.ids[i]).collect();
        let hits = events.iter().filter(|e| top.contains(&e.product_id)).count();
        let share = hits as f64 / events.len() as f64;
        assert!(share >= 0.2, "top-1% share {share}");
    }

    #[test]
    fn conversions_concentrate_on_purchasable_topics() {
        let cfg = SynthConfig {
            products: 1000,
            topics: 8,
            conversion_bias: 0.9,
            ..small()
        };
        let (_, world) = gen_catalog(&cfg, 19).unwrap();
        let counts = [
            (Surface::Closeup, Engagement::Click, 2000),
            (Surface::Closeup, Engagement::Checkout, 2000),
        ];
        let events = gen_engagement(&world, &cfg, &counts, 37).unwrap();
        let frac = |kind: Engagement| {
            let (mut hit, mut n) = (0usize, 0usize);
            for e in events.iter().filter(|e| e.engagement == kind) {
                n += 1;
                let mix = &world.mixes[(e.product_id - 1) as usize];
                if mix.iter().any(|&(t, _)| world.purchasable[t as usize]) {
                    hit += 1;
                }
            }
            hit as f64 / n as f64
        };
        let (clicks, checkouts) = (frac(Engagement::Click), frac(Engagement::Checkout));
        assert!(
            checkouts > clicks + 0.15,
            "checkout purchasable share {checkouts}, click share {clicks}"
        );
    }

    #[test]
    fn providers_are_deterministic_and_unit_norm() {
        let (_, world) = gen_catalog(&small(), 5).unwrap();
        let search = QueryProvider::new(&world, ProviderKind::Search);
        let q = Query::Text { terms: "tit0w0 tit0w1".into(), embedding: vec![] };
        let a = search.embed(&q).unwrap();
        let b = search.embed(&q).unwrap();
        assert_eq!(a, b);
        assert!((dot_f64(&a, &a).sqrt() - 1.0).abs() < 1e-5);
        let closeup = QueryProvider::new(&world, ProviderKind::Closeup);
        let mut raw = vec![0.0f32; world.dim];
        raw[0] = 3.0;
        raw[1] = 4.0;
        let e = closeup.embed(&Query::Image { embedding: raw }).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-6 && (e[1] - 0.8).abs() < 1e-6);
        let unknown = search
            .embed(&Query::Text { terms: "zzqx unseen".into(), embedding: vec![] })
            .unwrap();
        assert!((dot_f64(&unknown, &unknown).sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn provider_kind_mismatches_are_rejected() {
        assert!(ProviderKind::from_str("pins").is_err());
        assert_eq!(ProviderKind::from_str("closeup").unwrap(), ProviderKind::Closeup);
        let (_, world) = gen_catalog(&small(), 5).unwrap();
        let closeup = QueryProvider::new(&world, ProviderKind::Closeup);
        assert!(closeup
            .embed(&Query::Text { terms: "x".into(), embedding: vec![] })
            .is_err());
        let search = QueryProvider::new(&world, ProviderKind::Search);
        assert!(search.embed(&Query::Image { embedding: vec![1.0; 16] }).is_err());
        assert!(search
            .embed(&Query::Text { terms: "   ".into(), embedding: vec![] })
            .is_err());
    }

    #[test]
    fn topic_pure_strings_embed_near_their_centroid() {
        let (_, world) = gen_catalog(&small(), 5).unwrap();
        let search = QueryProvider::new(&world, ProviderKind::Search);
        for t in 0..world.topics() {
            let terms = world.tokens[t][0][..5].join(" ");
            let e = search.embed_terms(&terms).unwrap();
            let cos = dot_f64(&e, &world.centroids[t]);
            assert!(cos > 0.8, "topic {t} query cosine {cos}");
        }
    }

    #[test]
    fn world_round_trips_through_its_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("latent.bin");
        let (_, world) = gen_catalog(&small(), 5).unwrap();
        world.save(&path).unwrap();
        let back = LatentWorld::load(&path).unwrap();
        assert_eq!(world, back);
    }

    #[test]
    fn generated_events_validate() {
        let cfg = small();
        let (_, world) = gen_catalog(&cfg, 5).unwrap();
        let counts = [
            (Surface::Closeup, Engagement::Click, 200),
            (Surface::Search, Engagement::Save, 200),
            (Surface::Search, Engagement::AddToCart, 50),
        ];
        let events = gen_engagement(&world, &cfg, &counts, 41).unwrap();
        assert_eq!(events.len(), 450);
        for e in &events {
            e.validate().unwrap();
            assert!((1..=world.products() as u64).contains(&e.product_id));
            let q = e.query.embedding().unwrap();
            assert_eq!(q.len(), cfg.dim);
            assert!((dot_f64(q, q).sqrt() - 1.0).abs() < 1e-4);
        }
        assert!(events.iter().any(|e| e.surface == Surface::Closeup));
        assert!(events.iter().any(|e| e.surface == Surface::Search));
    }

    #[test]
    fn engagement_is_seed_deterministic() {
        let cfg = small();
        let (_, world) = gen_catalog(&cfg, 5).unwrap();
        let counts = [(Surface::Closeup, Engagement::Click, 300)];
        let a = gen_engagement(&world, &cfg, &counts, 43).unwrap();
        let b = gen_engagement(&world, &cfg, &counts, 43).unwrap();
        assert_eq!(a, b);
        let c = gen_engagement(&world, &cfg, &counts, 44).unwrap();
        assert_ne!(a, c);
    }
}
