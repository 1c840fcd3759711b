//! Multi-task training loop: per-task positive loaders with fixed batch
//! quotas, a uniform random-negative stream, count-min sketches feeding the
//! logQ corrections, and Adam with linear warmup.
//!
//! A step runs in three phases. First every product in the batch is
//! embedded on its own tape and only the values are kept. Second a small
//! tape over those embeddings computes the loss and yields one gradient row
//! per embedding. Third each unique product is re-embedded and its row is
//! back-propagated through the encoder. Phases one and three parallelize
//! across products, but gradient contributions are folded in chunks of a
//! fixed size and order, so the resulting parameters are bitwise identical
//! at any thread count.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Params;
use crate::config::Config;
use crate::data::{Engagement, EngagementEvent, Product, Surface, TEXT_FIELD_COUNT};
use crate::encoder::{Arch, Encoder, ImageSlots, Modality};
use crate::error::{Error, Result};
use crate::eval::{self, EvalPair, TaskRecall};
use crate::losses::{self, Corrections};
use crate::par;
use crate::sketch::CountMinSketch;
use crate::tensor::{Tape, Tensor};
use crate::text::{build_vocab, encode_product_text, TokenBag, Vocabulary};

/// Products whose gradients are held in memory at once during the fold.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    /// 1-based task number in config order.
    pub id: usize,
    pub surface: Surface,
    pub engagement: Engagement,
    pub quota: usize,
}

/// Quotas from the config's task list: batch_size / K per task, remainder
/// spread from the front.
pub fn default_specs(cfg: &Config) -> Vec<TaskSpec> {
    cfg.tasks()
        .into_iter()
        .zip(cfg.quotas())
        .enumerate()
        .map(|(i, ((surface, engagement), quota))| TaskSpec {
            id: i + 1,
            surface,
            engagement,
            quota,
        })
        .collect()
}

/// Which objective drives the run; the ablation grid trains one variant
/// each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    /// In-batch positives plus random negatives; the production objective.
    Combined,
    InBatchOnly,
    RandomNegativeOnly,
    /// One softmax over the union of batch positives and random negatives.
    Mixed,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::Combined,
        LossVariant::InBatchOnly,
        LossVariant::RandomNegativeOnly,
        LossVariant::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::Combined => "combined",
            LossVariant::InBatchOnly => "in_batch_only",
            LossVariant::RandomNegativeOnly => "random_negative_only",
            LossVariant::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(LossVariant::Combined),
            "in_batch_only" => Ok(LossVariant::InBatchOnly),
            "random_negative_only" => Ok(LossVariant::RandomNegativeOnly),
            "mixed" => Ok(LossVariant::Mixed),
            other => Err(Error::Input(format!("unknown loss variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub arch: Arch,
    pub modality: Modality,
    pub loss: LossVariant,
    /// Overrides the default equal quotas when set.
    pub specs: Option<Vec<TaskSpec>>,
    /// Where to write the diagnostic dump if a loss goes non-finite.
    pub dump_dir: Option<PathBuf>,
    /// Continue an earlier run instead of starting from initialization.
    pub resume: Option<Resume>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            arch: Arch::Transformer,
            modality: Modality::Full,
            loss: LossVariant::Combined,
            specs: None,
            dump_dir: None,
            resume: None,
        }
    }
}

/// Saved training position: checkpoint parameters plus the optimizer
/// snapshot taken at the same step. The data pipeline itself is not
/// stored; `train` replays it deterministically up to the saved step.
#[derive(Clone, Debug)]
pub struct Resume {
    pub params: Params<f32>,
    pub optimizer: OptimizerState,
}

/// One positive example resolved against the catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchExample {
    pub query: Vec<f32>,
    pub product_index: usize,
    pub product_id: u64,
    pub surface: Surface,
    pub engagement: Engagement,
    pub weight: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub examples: Vec<BatchExample>,
    /// Catalog indices of the uniform random negatives.
    pub negatives: Vec<usize>,
    pub negative_ids: Vec<u64>,
    /// Sketch-estimated batch probability of each positive.
    pub batch_q: Vec<f64>,
    /// Sketch-estimated negative-sampler probability of each positive.
    pub positive_q: Vec<f64>,
    /// Sketch-estimated negative-sampler probability of each negative.
    pub negative_q: Vec<f64>,
}

/// Cycling stream over one task's positive events, reshuffled at each
/// epoch boundary.
pub struct TaskLoader {
    pub spec: TaskSpec,
    indices: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl TaskLoader {
    pub fn new(spec: TaskSpec, events: &[EngagementEvent], seed: u64) -> Result<TaskLoader> {
        let indices: Vec<usize> = events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.surface == spec.surface && e.engagement == spec.engagement)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(Error::Input(format!(
                "no training events for task {}/{}",
                spec.surface, spec.engagement
            )));
        }
        let mut loader = TaskLoader {
            spec,
            indices,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        loader.reshuffle();
        Ok(loader)
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.indices.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.indices.len() {
            self.reshuffle();
        }
        let i = self.indices[self.cursor];
        self.cursor += 1;
        i
    }
}

/// Uniform stream over catalog indices.
pub struct NegativeStream {
    n: usize,
    rng: ChaCha8Rng,
}

impl NegativeStream {
    pub fn new(catalog_size: usize, seed: u64) -> Result<NegativeStream> {
        if catalog_size == 0 {
            return Err(Error::Input("negative stream over an empty catalog".into()));
        }
        Ok(NegativeStream { n: catalog_size, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_index(&mut self) -> usize {
        self.rng.gen_range(0..self.n)
    }
}

/// Draws T_k positives per task and |batch| uniform negatives, updates both
/// sketches with what it consumed, and snapshots their probabilities.
/// `product_ids` maps catalog index to product id.
#[allow(clippy::too_many_arguments)]
pub fn build_batch(
    events: &[EngagementEvent],
    product_ids: &[u64],
    id_to_index: &HashMap<u64, usize>,
    loaders: &mut [TaskLoader],
    negatives: &mut NegativeStream,
    batch_size: usize,
    positive_sketch: &mut CountMinSketch,
    negative_sketch: &mut CountMinSketch,
) -> Result<TrainingBatch> {
    let total: usize = loaders.iter().map(|l| l.spec.quota).sum();
    if total != batch_size {
        return Err(Error::Config(format!(
            "task quotas sum to {total}, batch size is {batch_size}"
        )));
    }
    let mut examples = Vec::with_capacity(batch_size);
    for loader in loaders.iter_mut() {
        for _ in 0..loader.spec.quota {
            let idx = loader.next_index();
            let e = &events[idx];
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
            let product_index = *id_to_index.get(&e.product_id).ok_or_else(|| {
                Error::Input(format!("event references unknown product {}", e.product_id))
            })?;
            examples.push(BatchExample {
                query,
                product_index,
                product_id: e.product_id,
                surface: e.surface,
                engagement: e.engagement,
                weight: e.weight,
            });
        }
    }
    let negative_indices: Vec<usize> =
        (0..batch_size).map(|_| negatives.next_index()).collect();
    let negative_ids: Vec<u64> =
        negative_indices.iter().map(|&i| product_ids[i]).collect();
    for ex in &examples {
        positive_sketch.update(ex.product_id);
    }
    for &id in &negative_ids {
        negative_sketch.update(id);
    }
    let batch_q = examples
        .iter()
        .map(|e| positive_sketch.probability(e.product_id))
        .collect::<Result<Vec<f64>>>()?;
    let positive_q = examples
        .iter()
        .map(|e| negative_sketch.probability(e.product_id))
        .collect::<Result<Vec<f64>>>()?;
    let negative_q = negative_ids
        .iter()
        .map(|&id| negative_sketch.probability(id))
        .collect::<Result<Vec<f64>>>()?;
    Ok(TrainingBatch {
        examples,
        negatives: negative_indices,
        negative_ids,
        batch_q,
        positive_q,
        negative_q,
    })
}

/// Keeps the first occurrence of each (query, product, surface, engagement)
/// label; repeat engagements surface through the weight field instead.
pub fn dedup_labels(events: &[EngagementEvent]) -> Vec<EngagementEvent> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in events {
        let mut key = e.query.key_bytes();
        key.extend_from_slice(&e.product_id.to_le_bytes());
        key.push(e.surface as u8);
        key.push(e.engagement as u8);
        if seen.insert(key) {
            out.push(e.clone());
        }
    }
    out
}

/// Adam with per-parameter moment vectors and linear learning-rate warmup.
pub struct Optimizer {
    lr: f64,
    warmup: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(lr: f64, warmup: usize) -> Optimizer {
        Optimizer {
            lr,
            warmup,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Learning rate at the current step count, ramping linearly over the
    /// warmup window.
    pub fn learning_rate(&self) -> f64 {
        if self.warmup > 0 && self.step <= self.warmup {
            self.lr * self.step as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }

    /// Applies one update; `grads` maps parameter names to dense gradients
    /// shaped like the parameter data. Parameters without an entry are left
    /// untouched.
    pub fn apply(
        &mut self,
        encoder: &mut Encoder<f32>,
        grads: &HashMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step += 1;
        let lr = self.learning_rate();
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, tensor) in encoder.params_mut().iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if tensor.data().len() != g.len() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    tensor.data().len()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let data = tensor.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bias1;
                let vh = v[i] / bias2;
                data[i] = (data[i] as f64 - lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }

    /// Snapshot of step count and moment vectors, name-sorted so the
    /// serialized form is stable.
    pub fn state(&self) -> OptimizerState {
        let mut moments: Vec<MomentEntry> = self
            .moments
            .iter()
            .map(|(name, (m, v))| MomentEntry {
                name: name.clone(),
                m: m.clone(),
                v: v.clone(),
            })
            .collect();
        moments.sort_by(|a, b| a.name.cmp(&b.name));
        OptimizerState { step: self.step, moments }
    }

    pub fn restore(&mut self, state: &OptimizerState) {
        self.step = state.step;
        self.moments = state
            .moments
            .iter()
            .map(|e| (e.name.clone(), (e.m.clone(), e.v.clone())))
            .collect();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentEntry {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam moments and step count, exact to the bit. The moments are kept
/// in 64-bit so a restored run continues on the identical trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub moments: Vec<MomentEntry>,
}

/// Writes optimizer state as "ISTS": magic, version u32, step u64, entry
/// count u32, then per entry a u16 name length + name, u64 element count,
/// and the first and second moment vectors as f64 little-endian.
pub fn write_train_state(path: &Path, state: &OptimizerState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"ISTS")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(state.step as u64).to_le_bytes())?;
    w.write_all(&(state.moments.len() as u32).to_le_bytes())?;
    for entry in &state.moments {
        let name = entry.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {:?}", entry.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(entry.m.len() as u64).to_le_bytes())?;
        for &x in &entry.m {
            w.write_all(&x.to_le_bytes())?;
        }
        for &x in &entry.v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_train_state(path: &Path) -> Result<OptimizerState> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    state_read(&mut r, &mut magic, "magic")?;
    if &magic != b"ISTS" {
        return Err(Error::Format(format!("bad state magic {magic:?}, expected \"ISTS\"")));
    }
    let mut b4 = [0u8; 4];
    state_read(&mut r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != 1 {
        return Err(Error::Format(format!("unsupported state version {version}")));
    }
    let mut b8 = [0u8; 8];
    state_read(&mut r, &mut b8, "step")?;
    let step = u64::from_le_bytes(b8) as usize;
    state_read(&mut r, &mut b4, "entry count")?;
    let count = u32::from_le_bytes(b4);
    let mut moments = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        state_read(&mut r, &mut b2, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        state_read(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("state entry name not UTF-8: {e}")))?;
        state_read(&mut r, &mut b8, "element count")?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut read_vec = |what: &str| -> Result<Vec<f64>> {
            let mut out = vec![0f64; len];
            for x in out.iter_mut() {
                let mut b = [0u8; 8];
                state_read(&mut r, &mut b, what)?;
                *x = f64::from_le_bytes(b);
            }
            Ok(out)
        };
        let m = read_vec("first moments")?;
        let v = read_vec("second moments")?;
        moments.push(MomentEntry { name, m, v });
    }
    Ok(OptimizerState { step, moments })
}

fn state_read(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("state file truncated reading {what}: {e}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub recall: Option<Vec<TaskRecall>>,
}

/// CSV with one row per step: step, loss, then one recall column per task,
/// blank on steps without an evaluation pass.
pub fn write_metrics_csv(path: &Path, cfg: &Config, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("step,loss");
    for (s, e) in cfg.tasks() {
        out.push_str(&format!(",recall_{s}_{e}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{}", row.step, row.loss));
        for (s, e) in cfg.tasks() {
            match row
                .recall
                .as_ref()
                .and_then(|rs| rs.iter().find(|r| r.surface == s && r.engagement == e))
            {
                Some(r) => out.push_str(&format!(",{}", r.result.recall)),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub struct TrainOutcome {
    pub encoder: Encoder<f32>,
    pub vocab: Vocabulary,
    pub metrics: Vec<MetricsRow>,
    /// Recall on the held-out probe after the last step, when any events
    /// were held out.
    pub final_recall: Option<Vec<TaskRecall>>,
    /// Optimizer snapshot at the final step, for resuming later.
    pub optimizer: OptimizerState,
}

/// Catalog prepared for repeated embedding: token bags cached, id lookup
/// both ways.
pub struct PreparedCatalog<'a> {
    pub products: &'a [Product],
    pub bags: Vec<[TokenBag; TEXT_FIELD_COUNT]>,
    pub ids: Vec<u64>,
    pub id_to_index: HashMap<u64, usize>,
}

impl<'a> PreparedCatalog<'a> {
    pub fn new(products: &'a [Product], vocab: &Vocabulary) -> Result<PreparedCatalog<'a>> {
        let bags = par::map_slice(products, |p| encode_product_text(p, vocab));
        let ids: Vec<u64> = products.iter().map(|p| p.id).collect();
        let mut id_to_index = HashMap::with_capacity(products.len());
        for (i, p) in products.iter().enumerate() {
            if id_to_index.insert(p.id, i).is_some() {
                return Err(Error::Input(format!("duplicate product id {}", p.id)));
            }
        }
        Ok(PreparedCatalog { products, bags, ids, id_to_index })
    }
}

/// Embeds a set of catalog indices in parallel, values only.
pub fn embed_indices(
    encoder: &Encoder<f32>,
    catalog: &PreparedCatalog,
    indices: &[usize],
    modality: Modality,
) -> Result<Vec<Vec<f32>>> {
    par::map_slice(indices, |&i| {
        let images = ImageSlots::from_product(&catalog.products[i], encoder.dims().image_dim)?;
        let mut tape = Tape::new();
        let bound = encoder.bind_compact(&mut tape, &catalog.bags[i])?;
        let out = encoder.forward(&mut tape, &bound, &images, &catalog.bags[i], modality)?;
        Ok(tape.value(out).to_f32_vec())
    })
    .into_iter()
    .collect()
}

struct ProductGrad {
    e_rows: Vec<usize>,
    e_grad: Option<Vec<f32>>,
    w_rows: Vec<u32>,
    w_grad: Option<Vec<f32>>,
    dense: Vec<(String, Vec<f32>)>,
}

struct StepResult {
    loss: f64,
    grads: HashMap<String, Vec<f64>>,
}

fn train_step(
    encoder: &Encoder<f32>,
    catalog: &PreparedCatalog,
    batch: &TrainingBatch,
    cfg: &Config,
    opts: &TrainOptions,
) -> Result<StepResult> {
    let d = encoder.dims().out_dim;
    let b = batch.examples.len();
    let n = batch.negatives.len();
    let pos_indices: Vec<usize> = batch.examples.iter().map(|e| e.product_index).collect();
    let pos_emb = embed_indices(encoder, catalog, &pos_indices, opts.modality)?;
    let use_negatives = !matches!(opts.loss, LossVariant::InBatchOnly);
    let neg_emb = if use_negatives {
        embed_indices(encoder, catalog, &batch.negatives, opts.modality)?
    } else {
        Vec::new()
    };

    let mut tape: Tape<f32> = Tape::new();
    let q = tape.leaf(Tensor::new(
        vec![b, d],
        batch.examples.iter().flat_map(|e| e.query.iter().copied()).collect(),
    )?);
    let p = tape.leaf(Tensor::new(vec![b, d], pos_emb.concat())?);
    let nv = if use_negatives {
        Some(tape.leaf(Tensor::new(vec![n, d], neg_emb.concat())?))
    } else {
        None
    };
    let temp = if cfg.learnable_temperature {
        Some(tape.leaf(encoder.params().get("temp")?.clone()))
    } else if cfg.temperature_init != 1.0 {
        Some(tape.leaf(Tensor::new(vec![1], vec![cfg.temperature_init])?))
    } else {
        None
    };
    let ids: Vec<u64> = batch.examples.iter().map(|e| e.product_id).collect();
    let corr = Corrections {
        batch_q: &batch.batch_q,
        positive_q: &batch.positive_q,
        negative_q: &batch.negative_q,
        ids: &ids,
    };
    let loss_var = match opts.loss {
        LossVariant::Combined => {
            losses::combined_loss(&mut tape, q, p, nv.unwrap(), &corr, temp, cfg.eq3_literal)?
        }
        LossVariant::InBatchOnly => losses::in_batch_loss(&mut tape, q, p, &corr, temp)?,
        LossVariant::RandomNegativeOnly => losses::random_negative_loss(
            &mut tape,
            q,
            p,
            nv.unwrap(),
            &corr,
            temp,
            cfg.eq3_literal,
        )?,
        LossVariant::Mixed => losses::mixed_loss(&mut tape, q, p, nv, &corr, temp)?,
    };
    let loss = tape.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    tape.backward(loss_var)?;
    let p_grad = tape
        .grad(p)
        .ok_or_else(|| Error::Numeric("no gradient reached the positives".into()))?
        .to_f32_vec();
    let n_grad = nv.and_then(|v| tape.grad(v)).map(|g| g.to_f32_vec());
    let temp_grad = if cfg.learnable_temperature {
        temp.and_then(|v| tape.grad(v)).map(|g| g.data()[0] as f64)
    } else {
        None
    };

    let mut seeds: HashMap<usize, Vec<f32>> = HashMap::new();
    for (i, ex) in batch.examples.iter().enumerate() {
        let row = &p_grad[i * d..(i + 1) * d];
        let s = seeds.entry(ex.product_index).or_insert_with(|| vec![0.0; d]);
        for (a, &g) in s.iter_mut().zip(row) {
            *a += g;
        }
    }
    if let Some(ng) = &n_grad {
        for (j, &idx) in batch.negatives.iter().enumerate() {
            let row = &ng[j * d..(j + 1) * d];
            let s = seeds.entry(idx).or_insert_with(|| vec![0.0; d]);
            for (a, &g) in s.iter_mut().zip(row) {
                *a += g;
            }
        }
    }
    let mut unique: Vec<usize> = seeds.keys().copied().collect();
    unique.sort_unstable();

    let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
    for (name, t) in encoder.params().iter() {
        if name.starts_with("meta.") {
            continue;
        }
        grads.insert(name.to_string(), vec![0.0; t.data().len()]);
    }
    let hash_dim = encoder.dims().hash_dim;
    for chunk in unique.chunks(GRAD_CHUNK) {
        let contributions: Vec<Result<ProductGrad>> = par::map_slice(chunk, |&idx| {
            let images =
                ImageSlots::from_product(&catalog.products[idx], encoder.dims().image_dim)?;
            let mut tape: Tape<f32> = Tape::new();
            let bound = encoder.bind_compact(&mut tape, &catalog.bags[idx])?;
            let out =
                encoder.forward(&mut tape, &bound, &images, &catalog.bags[idx], opts.modality)?;
            tape.backward_seeded(out, Tensor::new(vec![d], seeds[&idx].clone())?)?;
            let mut dense = Vec::new();
            let mut e_grad = None;
            let mut w_grad = None;
            for (name, var) in bound.iter() {
                let Some(g) = tape.grad(var) else { continue };
                match name {
                    "hash.e" => e_grad = Some(g.to_f32_vec()),
                    "hash.w" => w_grad = Some(g.to_f32_vec()),
                    _ => dense.push((name.to_string(), g.to_f32_vec())),
                }
            }
            Ok(ProductGrad {
                e_rows: bound.e_rows.clone().unwrap_or_default(),
                e_grad,
                w_rows: bound.w_rows.clone().unwrap_or_default(),
                w_grad,
                dense,
            })
        });
        for c in contributions {
            let c = c?;
            if let Some(eg) = c.e_grad {
                let acc = grads.get_mut("hash.e").expect("hash.e gradient slot");
                for (r, &row) in c.e_rows.iter().enumerate() {
                    for j in 0..hash_dim {
                        acc[row * hash_dim + j] += eg[r * hash_dim + j] as f64;
                    }
                }
            }
            if let Some(wg) = c.w_grad {
                let acc = grads.get_mut("hash.w").expect("hash.w gradient slot");
                for (r, &id) in c.w_rows.iter().enumerate() {
                    for j in 0..2 {
                        acc[id as usize * 2 + j] += wg[r * 2 + j] as f64;
                    }
                }
            }
            for (name, g) in c.dense {
                let acc = grads.get_mut(&name).ok_or_else(|| {
                    Error::Input(format!("gradient for unknown parameter {name}"))
                })?;
                for (a, &x) in acc.iter_mut().zip(&g) {
                    *a += x as f64;
                }
            }
        }
    }
    if let Some(tg) = temp_grad {
        grads.insert("temp".to_string(), vec![tg]);
    }
    grads.retain(|_, g| g.iter().any(|&x| x != 0.0));
    Ok(StepResult { loss, grads })
}

fn dump_bad_batch(dir: &Path, step: usize, batch: &TrainingBatch, loss: &str) -> Result<PathBuf> {
    let path = dir.join(format!("nan_batch_step{step}.json"));
    let payload = serde_json::json!({
        "step": step,
        "loss": loss,
        "positive_ids": batch.examples.iter().map(|e| e.product_id).collect::<Vec<_>>(),
        "tasks": batch
            .examples
            .iter()
            .map(|e| format!("{}/{}", e.surface, e.engagement))
            .collect::<Vec<_>>(),
        "negative_ids": batch.negative_ids,
        "batch_q": batch.batch_q,
        "positive_q": batch.positive_q,
        "negative_q": batch.negative_q,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&payload).unwrap())?;
    Ok(path)
}

/// Runs the full loop: dedup, holdout split, vocabulary build, encoder
/// init, then `steps` optimization steps with periodic held-out recall.
pub fn train(
    cfg: &Config,
    opts: &TrainOptions,
    products: &[Product],
    events: &[EngagementEvent],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if products.is_empty() {
        return Err(Error::Input("training needs a catalog".into()));
    }
    let deduped = dedup_labels(events);
    let (train_events, holdout) =
        eval::split_holdout(&deduped, cfg.holdout_fraction, cfg.eval_pairs, cfg.seed);
    let corpus: Vec<String> = products
        .iter()
        .flat_map(|p| p.text_fields().into_iter())
        .collect();
    let vocab = build_vocab(corpus.iter().map(|s| s.as_str()), cfg.vocab_caps())?;
    let mut encoder = match &opts.resume {
        None => Encoder::<f32>::init(cfg, opts.arch, vocab.len(), cfg.seed)?,
        Some(resume) => {
            let restored = Encoder::<f32>::from_params(resume.params.clone())?;
            if restored.arch() != opts.arch {
                return Err(Error::Config(format!(
                    "checkpoint holds a {:?} model, options ask for {:?}",
                    restored.arch(),
                    opts.arch
                )));
            }
            if restored.dims().vocab_size != vocab.len() {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary has {} tokens, this catalog builds {}",
                    restored.dims().vocab_size,
                    vocab.len()
                )));
            }
            restored
        }
    };
    let catalog = PreparedCatalog::new(products, &vocab)?;

    let specs = match &opts.specs {
        Some(s) => s.clone(),
        None => default_specs(cfg),
    };
    let total: usize = specs.iter().map(|s| s.quota).sum();
    if total != cfg.batch_size {
        return Err(Error::Config(format!(
            "task quotas sum to {total}, batch size is {}",
            cfg.batch_size
        )));
    }
    let mut loaders = specs
        .iter()
        .enumerate()
        .map(|(i, &spec)| {
            TaskLoader::new(spec, &train_events, cfg.seed ^ ((i as u64 + 1) << 16))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut negatives = NegativeStream::new(products.len(), cfg.seed ^ 0x4e47)?;
    let mut positive_sketch =
        CountMinSketch::new(cfg.sketch_depth, cfg.sketch_width, cfg.seed ^ 0x05, products.len())?;
    let mut negative_sketch =
        CountMinSketch::new(cfg.sketch_depth, cfg.sketch_width, cfg.seed ^ 0x06, products.len())?;
    let mut optimizer = Optimizer::new(cfg.lr, cfg.warmup_steps);
    let start_step = match &opts.resume {
        None => 0,
        Some(resume) => {
            if resume.optimizer.step >= cfg.steps {
                return Err(Error::Config(format!(
                    "checkpoint already at step {}, config stops at {}",
                    resume.optimizer.step, cfg.steps
                )));
            }
            optimizer.restore(&resume.optimizer);
            resume.optimizer.step
        }
    };

    let eval_pairs = eval::pairs_from_events(&holdout)?;
    let probe = probe_sample(&eval_pairs, cfg);
    let engaged: HashSet<usize> =
        probe.iter().map(|p| catalog.id_to_index[&p.product_id]).collect();
    let distractor_indices = sample_distractors(products.len(), &engaged, cfg);

    // Replay the data pipeline up to the resume point: loaders, negative
    // stream, and sketches advance exactly as they did in the first run.
    for _ in 0..start_step {
        build_batch(
            &train_events,
            &catalog.ids,
            &catalog.id_to_index,
            &mut loaders,
            &mut negatives,
            cfg.batch_size,
            &mut positive_sketch,
            &mut negative_sketch,
        )?;
    }

    let mut metrics = Vec::with_capacity(cfg.steps - start_step);
    let mut final_recall = None;
    for step in (start_step + 1)..=cfg.steps {
        let batch = build_batch(
            &train_events,
            &catalog.ids,
            &catalog.id_to_index,
            &mut loaders,
            &mut negatives,
            cfg.batch_size,
            &mut positive_sketch,
            &mut negative_sketch,
        )?;
        let result = match train_step(&encoder, &catalog, &batch, cfg, opts) {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                if let Some(dir) = &opts.dump_dir {
                    let path = dump_bad_batch(dir, step, &batch, &msg)?;
                    return Err(Error::Numeric(format!(
                        "{msg} at step {step}; offending batch dumped to {}",
                        path.display()
                    )));
                }
                return Err(Error::Numeric(format!("{msg} at step {step}")));
            }
            Err(e) => return Err(e),
        };
        optimizer.apply(&mut encoder, &result.grads)?;
        let evaluate = !probe.is_empty()
            && (step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0));
        let recall = if evaluate {
            let r = holdout_recall(&encoder, &catalog, &probe, &distractor_indices, cfg, opts)?;
            if step == cfg.steps {
                final_recall = Some(r.clone());
            }
            Some(r)
        } else {
            None
        };
        metrics.push(MetricsRow { step, loss: result.loss, recall });
    }
    if cfg.steps == 0 && !probe.is_empty() {
        final_recall =
            Some(holdout_recall(&encoder, &catalog, &probe, &distractor_indices, cfg, opts)?);
    }
    Ok(TrainOutcome { encoder, vocab, metrics, final_recall, optimizer: optimizer.state() })
}

/// Full-holdout recall benchmark for an already-trained encoder: the same
/// deduplication, split, probe, and distractor sample the trainer uses,
/// so numbers line up with the metrics a training run reports.
pub fn evaluate(
    cfg: &Config,
    encoder: &Encoder<f32>,
    products: &[Product],
    events: &[EngagementEvent],
    modality: Modality,
) -> Result<Vec<TaskRecall>> {
    cfg.validate()?;
    if products.is_empty() {
        return Err(Error::Input("evaluation needs a catalog".into()));
    }
    let deduped = dedup_labels(events);
    let (_, holdout) =
        eval::split_holdout(&deduped, cfg.holdout_fraction, cfg.eval_pairs, cfg.seed);
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
    let catalog = PreparedCatalog::new(products, &vocab)?;
    let eval_pairs = eval::pairs_from_events(&holdout)?;
    let probe = probe_sample(&eval_pairs, cfg);
    if probe.is_empty() {
        return Err(Error::Input("holdout holds no pairs for the configured tasks".into()));
    }
    let mut engaged = HashSet::new();
    for p in &probe {
        match catalog.id_to_index.get(&p.product_id) {
            Some(&i) => {
                engaged.insert(i);
            }
            None => {
                return Err(Error::Input(format!(
                    "event references product {} missing from the catalog",
                    p.product_id
                )))
            }
        }
    }
    let distractor_indices = sample_distractors(products.len(), &engaged, cfg);
    let opts = TrainOptions { modality, ..TrainOptions::default() };
    holdout_recall(encoder, &catalog, &probe, &distractor_indices, cfg, &opts)
}

/// Stratified slice of the holdout used for periodic recall during
/// training; full benchmark numbers come from the evaluation command.
fn probe_sample(pairs: &[EvalPair], cfg: &Config) -> Vec<EvalPair> {
    let per_task = (cfg.eval_pairs / cfg.tasks().len().max(1)).max(1);
    let mut out = Vec::new();
    for (s, e) in cfg.tasks() {
        out.extend(
            pairs
                .iter()
                .filter(|p| p.surface == s && p.engagement == e)
                .take(per_task)
                .cloned(),
        );
    }
    out
}

/// Fixed distractor sample for the probe, excluding its engaged products
/// so a tie against itself never counts as a miss.
fn sample_distractors(catalog_size: usize, exclude: &HashSet<usize>, cfg: &Config) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd157);
    let mut all: Vec<usize> = (0..catalog_size).filter(|i| !exclude.contains(i)).collect();
    all.shuffle(&mut rng);
    all.truncate(cfg.distractors.min(all.len()));
    all.sort_unstable();
    all
}

fn holdout_recall(
    encoder: &Encoder<f32>,
    catalog: &PreparedCatalog,
    probe: &[EvalPair],
    distractor_indices: &[usize],
    cfg: &Config,
    opts: &TrainOptions,
) -> Result<Vec<TaskRecall>> {
    let mut needed: Vec<usize> = probe
        .iter()
        .map(|p| catalog.id_to_index[&p.product_id])
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let engaged = embed_indices(encoder, catalog, &needed, opts.modality)?;
    let mut products_map = HashMap::new();
    for (&idx, emb) in needed.iter().zip(engaged) {
        products_map.insert(catalog.products[idx].id, emb);
    }
    let distractors = embed_indices(encoder, catalog, distractor_indices, opts.modality)?;
    eval::per_task_recall(probe, &products_map, &distractors, cfg.k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Query;
    use crate::synth::{self, SynthConfig};

    fn tiny_cfg() -> Config {
        let mut cfg = Config::desk();
        cfg.image_dim = 8;
        cfg.hash_dim = 8;
        cfg.proj_dim = 16;
        cfg.out_dim = 8;
        cfg.hash_rows = 256;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.ffn_hidden = 16;
        cfg.head_hidden = 16;
        cfg.mlpcat_hidden = 16;
        cfg.mlpcat_latent = 8;
        cfg.batch_size = 8;
        cfg.steps = 5;
        cfg.lr = 0.01;
        cfg.warmup_steps = 10;
        cfg.surfaces = vec![Surface::Closeup];
        cfg.engagements = vec![Engagement::Click];
        cfg.eval_every = 0;
        cfg.eval_pairs = 32;
        cfg.distractors = 64;
        cfg.holdout_fraction = 0.2;
        cfg.sketch_depth = 2;
        cfg.sketch_width = 512;
        cfg
    }

    fn tiny_synth(products: usize) -> SynthConfig {
        let mut sc = SynthConfig::desk();
        sc.products = products;
        sc.topics = 2;
        sc.dim = 8;
        sc.image_noise = 0.02;
        sc.query_noise = 0.02;
        sc.max_images = 2;
        sc.two_topic_prob = 0.0;
        sc.zipf_exponent = 0.5;
        sc.affinity_temp = 0.05;
        sc.shortlist = 16;
        sc
    }

    fn small_data(
        products: usize,
        counts: &[(Surface, Engagement, usize)],
    ) -> (Vec<Product>, Vec<EngagementEvent>) {
        let sc = tiny_synth(products);
        let (catalog, world) = synth::gen_catalog(&sc, 7).unwrap();
        let events = synth::gen_engagement(&world, &sc, counts, 8).unwrap();
        (catalog, events)
    }

    struct BatchKit {
        loaders: Vec<TaskLoader>,
        negatives: NegativeStream,
        positive_sketch: CountMinSketch,
        negative_sketch: CountMinSketch,
        ids: Vec<u64>,
        id_to_index: HashMap<u64, usize>,
    }

    impl BatchKit {
        fn new(products: &[Product], events: &[EngagementEvent], specs: &[TaskSpec]) -> BatchKit {
            let ids: Vec<u64> = products.iter().map(|p| p.id).collect();
            let id_to_index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let loaders = specs
                .iter()
                .enumerate()
                .map(|(i, &s)| TaskLoader::new(s, events, 100 + i as u64).unwrap())
                .collect();
            BatchKit {
                loaders,
                negatives: NegativeStream::new(products.len(), 200).unwrap(),
                positive_sketch: CountMinSketch::new(2, 512, 300, products.len()).unwrap(),
                negative_sketch: CountMinSketch::new(2, 512, 301, products.len()).unwrap(),
                ids,
                id_to_index,
            }
        }

    }

    fn spec(id: usize, surface: Surface, engagement: Engagement, quota: usize) -> TaskSpec {
        TaskSpec { id, surface, engagement, quota }
    }

    #[test]
    fn default_specs_cover_all_tasks_evenly() {
        let mut cfg = tiny_cfg();
        cfg.engagements = Engagement::ALL.to_vec();
        cfg.batch_size = 10;
        let specs = default_specs(&cfg);
        assert_eq!(specs.len(), 4);
        assert_eq!(specs.iter().map(|s| s.quota).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
        assert_eq!(specs.iter().map(|s| s.id).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        cfg.batch_size = 8;
        let even = default_specs(&cfg);
        assert!(even.iter().all(|s| s.quota == 2));
    }

    #[test]
    fn two_task_batch_holds_two_of_each_plus_negatives() {
        let counts =
            [(Surface::Closeup, Engagement::Click, 30), (Surface::Closeup, Engagement::Save, 30)];
        let (products, events) = small_data(20, &counts);
        let specs = [
            spec(1, Surface::Closeup, Engagement::Click, 2),
            spec(2, Surface::Closeup, Engagement::Save, 2),
        ];
        let mut kit = BatchKit::new(&products, &events, &specs);
        let batch = build_batch(
            &events,
            &kit.ids,
            &kit.id_to_index,
            &mut kit.loaders,
            &mut kit.negatives,
            4,
            &mut kit.positive_sketch,
            &mut kit.negative_sketch,
        )
        .unwrap();
        assert_eq!(batch.examples.len(), 4);
        assert_eq!(batch.negatives.len(), 4);
        let clicks =
            batch.examples.iter().filter(|e| e.engagement == Engagement::Click).count();
        assert_eq!(clicks, 2);
    }

    #[test]
    fn quota_mismatch_is_a_config_error() {
        let counts = [(Surface::Closeup, Engagement::Click, 20)];
        let (products, events) = small_data(10, &counts);
        let specs = [spec(1, Surface::Closeup, Engagement::Click, 3)];
        let mut kit = BatchKit::new(&products, &events, &specs);
        let err = build_batch(
            &events,
            &kit.ids,
            &kit.id_to_index,
            &mut kit.loaders,
            &mut kit.negatives,
            8,
            &mut kit.positive_sketch,
            &mut kit.negative_sketch,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn every_batch_matches_task_quotas_over_a_thousand_batches() {
        let counts =
            [(Surface::Closeup, Engagement::Click, 37), (Surface::Closeup, Engagement::Save, 23)];
        let (products, events) = small_data(25, &counts);
        let specs = [
            spec(1, Surface::Closeup, Engagement::Click, 5),
            spec(2, Surface::Closeup, Engagement::Save, 3),
        ];
        let mut kit = BatchKit::new(&products, &events, &specs);
        for _ in 0..1000 {
            let batch = build_batch(
                &events,
                &kit.ids,
                &kit.id_to_index,
                &mut kit.loaders,
                &mut kit.negatives,
                8,
                &mut kit.positive_sketch,
                &mut kit.negative_sketch,
            )
            .unwrap();
            let clicks =
                batch.examples.iter().filter(|e| e.engagement == Engagement::Click).count();
            let saves =
                batch.examples.iter().filter(|e| e.engagement == Engagement::Save).count();
            assert_eq!((clicks, saves), (5, 3));
            assert_eq!(batch.negatives.len(), 8);
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_batch_sequence() {
        let counts = [(Surface::Closeup, Engagement::Click, 40)];
        let (products, events) = small_data(15, &counts);
        let specs = [spec(1, Surface::Closeup, Engagement::Click, 4)];
        let run = |events: &[EngagementEvent]| {
            let mut kit = BatchKit::new(&products, events, &specs);
            (0..5)
                .map(|_| {
                    build_batch(
                        events,
                        &kit.ids,
                        &kit.id_to_index,
                        &mut kit.loaders,
                        &mut kit.negatives,
                        4,
                        &mut kit.positive_sketch,
                        &mut kit.negative_sketch,
                    )
                    .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&events), run(&events));
    }

    #[test]
    fn loader_cycles_through_every_event_each_epoch() {
        let counts = [(Surface::Closeup, Engagement::Click, 10)];
        let (_, events) = small_data(12, &counts);
        let mut loader =
            TaskLoader::new(spec(1, Surface::Closeup, Engagement::Click, 1), &events, 5).unwrap();
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..10).map(|_| loader.next_index()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn negative_stream_draws_uniformly() {
        let mut stream = NegativeStream::new(100, 99).unwrap();
        let mut counts = [0u32; 100];
        let draws = 100_000;
        for _ in 0..draws {
            counts[stream.next_index()] += 1;
        }
        let expected = draws as f64 / 100.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 99 degrees of freedom.
        assert!(chi2 < 134.642, "chi-square {chi2} rejects uniformity");
    }

    #[test]
    fn batch_probabilities_are_valid_sampling_estimates() {
        let counts = [(Surface::Closeup, Engagement::Click, 30)];
        let (products, events) = small_data(10, &counts);
        let specs = [spec(1, Surface::Closeup, Engagement::Click, 6)];
        let mut kit = BatchKit::new(&products, &events, &specs);
        let batch = build_batch(
            &events,
            &kit.ids,
            &kit.id_to_index,
            &mut kit.loaders,
            &mut kit.negatives,
            6,
            &mut kit.positive_sketch,
            &mut kit.negative_sketch,
        )
        .unwrap();
        for q in batch.batch_q.iter().chain(&batch.positive_q).chain(&batch.negative_q) {
            assert!(*q > 0.0 && *q <= 1.0, "probability {q} outside (0, 1]");
        }
        for (ex, q) in batch.examples.iter().zip(&batch.batch_q) {
            assert_eq!(*q, kit.positive_sketch.probability(ex.product_id).unwrap());
        }
        for (id, q) in batch.negative_ids.iter().zip(&batch.negative_q) {
            assert_eq!(*q, kit.negative_sketch.probability(*id).unwrap());
        }
    }

    #[test]
    fn dedup_keeps_one_copy_of_a_repeated_label() {
        let counts = [(Surface::Closeup, Engagement::Click, 5)];
        let (_, events) = small_data(8, &counts);
        let mut doubled = events.clone();
        doubled.extend(events.iter().cloned());
        let kept = dedup_labels(&doubled);
        assert_eq!(kept, dedup_labels(&events));
    }

    #[test]
    fn dedup_distinguishes_engagement_kinds() {
        let counts = [(Surface::Closeup, Engagement::Click, 3)];
        let (_, events) = small_data(8, &counts);
        let mut mixed = events.clone();
        for e in &events {
            let mut save = e.clone();
            save.engagement = Engagement::Save;
            mixed.push(save);
        }
        assert_eq!(dedup_labels(&mixed).len(), 6);
    }

    #[test]
    fn dedup_of_nothing_is_nothing() {
        assert!(dedup_labels(&[]).is_empty());
    }

    #[test]
    fn adam_step_matches_hand_arithmetic() {
        let cfg = tiny_cfg();
        let mut encoder = Encoder::<f32>::init(&cfg, Arch::Transformer, 50, 3).unwrap();
        let start = encoder.params().get("temp").unwrap().data()[0] as f64;
        let mut opt = Optimizer::new(0.5, 0);
        let g1 = 0.25f64;
        let mut grads = HashMap::new();
        grads.insert("temp".to_string(), vec![g1]);
        opt.apply(&mut encoder, &grads).unwrap();
        let m1 = 0.1 * g1;
        let v1 = 0.001 * g1 * g1;
        let b1 = 1.0 - 0.9f64.powi(1);
        let b2 = 1.0 - 0.999f64.powi(1);
        let step1 = (start - 0.5 * (m1 / b1) / ((v1 / b2).sqrt() + 1e-8)) as f32;
        assert_eq!(encoder.params().get("temp").unwrap().data()[0], step1);

        let g2 = -0.1f64;
        grads.insert("temp".to_string(), vec![g2]);
        opt.apply(&mut encoder, &grads).unwrap();
        let m2 = 0.9 * m1 + 0.1 * g2;
        let v2 = 0.999 * v1 + 0.001 * g2 * g2;
        let b1 = 1.0 - 0.9f64.powi(2);
        let b2 = 1.0 - 0.999f64.powi(2);
        let step2 = (step1 as f64 - 0.5 * (m2 / b1) / ((v2 / b2).sqrt() + 1e-8)) as f32;
        assert_eq!(encoder.params().get("temp").unwrap().data()[0], step2);
    }

    #[test]
    fn warmup_ramps_the_learning_rate_linearly() {
        let cfg = tiny_cfg();
        let mut encoder = Encoder::<f32>::init(&cfg, Arch::Transformer, 50, 3).unwrap();
        let mut opt = Optimizer::new(1.0, 4);
        let empty = HashMap::new();
        let mut seen = Vec::new();
        for _ in 0..6 {
            opt.apply(&mut encoder, &empty).unwrap();
            seen.push(opt.learning_rate());
        }
        assert_eq!(seen, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    fn assert_params_bitwise_equal(a: &Encoder<f32>, b: &Encoder<f32>) {
        let av: Vec<_> = a.params().iter().collect();
        let bv: Vec<_> = b.params().iter().collect();
        assert_eq!(av.len(), bv.len());
        for ((na, ta), (nb, tb)) in av.iter().zip(&bv) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape(), "{na}");
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{na}");
            }
        }
    }

    #[test]
    fn zero_steps_leaves_the_initialization_untouched() {
        let counts = [(Surface::Closeup, Engagement::Click, 40)];
        let (products, events) = small_data(12, &counts);
        let mut cfg = tiny_cfg();
        cfg.steps = 0;
        let outcome = train(&cfg, &TrainOptions::default(), &products, &events).unwrap();
        let corpus: Vec<String> =
            products.iter().flat_map(|p| p.text_fields().into_iter()).collect();
        let vocab = build_vocab(corpus.iter().map(|s| s.as_str()), cfg.vocab_caps()).unwrap();
        let fresh = Encoder::<f32>::init(&cfg, Arch::Transformer, vocab.len(), cfg.seed).unwrap();
        assert_params_bitwise_equal(&outcome.encoder, &fresh);
        assert!(outcome.metrics.is_empty());
    }

    #[test]
    fn training_is_bit_reproducible_for_a_fixed_seed() {
        let counts = [(Surface::Closeup, Engagement::Click, 40)];
        let (products, events) = small_data(12, &counts);
        let mut cfg = tiny_cfg();
        cfg.steps = 3;
        let a = train(&cfg, &TrainOptions::default(), &products, &events).unwrap();
        let b = train(&cfg, &TrainOptions::default(), &products, &events).unwrap();
        assert_params_bitwise_equal(&a.encoder, &b.encoder);
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
    }

    #[test]
    fn training_separates_a_two_topic_world() {
        let counts = [(Surface::Closeup, Engagement::Click, 400)];
        let (products, events) = small_data(40, &counts);
        let mut cfg = tiny_cfg();
        cfg.steps = 200;
        cfg.eval_every = 0;
        let outcome = train(&cfg, &TrainOptions::default(), &products, &events).unwrap();
        let first = outcome.metrics.first().unwrap().loss;
        let last = outcome.metrics.last().unwrap().loss;
        assert!(last < first, "loss went from {first} to {last}");
        let recall = outcome.final_recall.expect("holdout recall");
        let click = recall
            .iter()
            .find(|r| r.engagement == Engagement::Click)
            .expect("click task present");
        assert!(
            click.result.recall > 0.9,
            "separable world recall@10 was {}",
            click.result.recall
        );
    }

    #[test]
    fn doubling_checkout_quota_does_not_hurt_checkout_recall() {
        let counts = [
            (Surface::Closeup, Engagement::Click, 300),
            (Surface::Closeup, Engagement::Checkout, 200),
        ];
        let (products, events) = small_data(40, &counts);
        let mut cfg = tiny_cfg();
        cfg.engagements = vec![Engagement::Click, Engagement::Checkout];
        cfg.batch_size = 12;
        cfg.steps = 80;
        let run = |click_quota: usize, checkout_quota: usize| {
            let opts = TrainOptions {
                specs: Some(vec![
                    spec(1, Surface::Closeup, Engagement::Click, click_quota),
                    spec(2, Surface::Closeup, Engagement::Checkout, checkout_quota),
                ]),
                ..TrainOptions::default()
            };
            let outcome = train(&cfg, &opts, &products, &events).unwrap();
            outcome
                .final_recall
                .unwrap()
                .iter()
                .find(|r| r.engagement == Engagement::Checkout)
                .unwrap()
                .result
                .recall
        };
        let baseline = run(8, 4);
        let doubled = run(4, 8);
        assert!(
            doubled >= baseline,
            "checkout recall fell from {baseline} to {doubled} with doubled quota"
        );
    }

    #[test]
    fn non_finite_loss_aborts_and_dumps_the_batch() {
        let counts = [(Surface::Closeup, Engagement::Click, 40)];
        let (products, mut events) = small_data(12, &counts);
        for e in &mut events {
            e.query = Query::Image { embedding: vec![f32::NAN; 8] };
        }
        let mut cfg = tiny_cfg();
        cfg.steps = 2;
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            dump_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let err = match train(&cfg, &opts, &products, &events) {
            Ok(_) => panic!("training survived a NaN query"),
            Err(e) => e,
        };
        let msg = err.to_string();
        assert!(matches!(err, Error::Numeric(_)), "{msg}");
        assert!(msg.contains("dumped"), "{msg}");
        let dump = std::fs::read_to_string(dir.path().join("nan_batch_step1.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&dump).unwrap();
        assert_eq!(parsed["positive_ids"].as_array().unwrap().len(), cfg.batch_size);
    }

    #[test]
    fn metrics_csv_has_one_recall_column_per_task() {
        let cfg = tiny_cfg();
        let rows = vec![
            MetricsRow { step: 1, loss: 0.5, recall: None },
            MetricsRow {
                step: 2,
                loss: 0.25,
                recall: Some(vec![TaskRecall {
                    surface: Surface::Closeup,
                    engagement: Engagement::Click,
                    result: crate::eval::WeightedRecall { recall: 0.75, weight: 4.0, pairs: 4 },
                }]),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &cfg, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,loss,recall_closeup_click\n1,0.5,\n2,0.25,0.75\n");
    }

    #[test]
    fn loss_variant_names_round_trip() {
        for v in LossVariant::ALL {
            assert_eq!(v.as_str().parse::<LossVariant>().unwrap(), v);
        }
        assert!("softmax".parse::<LossVariant>().is_err());
    }

    #[test]
    fn empty_catalog_and_empty_task_are_rejected() {
        let counts = [(Surface::Closeup, Engagement::Click, 10)];
        let (products, events) = small_data(8, &counts);
        let cfg = tiny_cfg();
        assert!(train(&cfg, &TrainOptions::default(), &[], &events).is_err());
        let save_only: Vec<EngagementEvent> = events
            .iter()
            .filter(|e| e.engagement == Engagement::Save)
            .cloned()
            .collect();
        assert!(train(&cfg, &TrainOptions::default(), &products, &save_only).is_err());
        assert!(NegativeStream::new(0, 1).is_err());
    }

    #[test]
    fn resuming_midway_matches_the_uninterrupted_run() {
        let counts = [(Surface::Closeup, Engagement::Click, 120)];
        let (products, events) = small_data(16, &counts);
        let mut cfg = tiny_cfg();
        cfg.steps = 24;
        let full = train(&cfg, &TrainOptions::default(), &products, &events).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.steps = 12;
        let half = train(&half_cfg, &TrainOptions::default(), &products, &events).unwrap();
        let opts = TrainOptions {
            resume: Some(Resume {
                params: half.encoder.params().clone(),
                optimizer: half.optimizer.clone(),
            }),
            ..TrainOptions::default()
        };
        let resumed = train(&cfg, &opts, &products, &events).unwrap();

        assert_eq!(resumed.metrics.len(), 12);
        for row in &resumed.metrics {
            let original = &full.metrics[row.step - 1];
            assert_eq!(original.step, row.step);
            assert!(
                (original.loss - row.loss).abs() <= 1e-5,
                "step {} diverged: {} vs {}",
                row.step,
                original.loss,
                row.loss
            );
            assert_eq!(original.loss.to_bits(), row.loss.to_bits());
        }
        assert_eq!(full.encoder.params(), resumed.encoder.params());
        assert_eq!(full.optimizer, resumed.optimizer);
    }

    #[test]
    fn optimizer_state_files_round_trip() {
        let counts = [(Surface::Closeup, Engagement::Click, 40)];
        let (products, events) = small_data(10, &counts);
        let mut cfg = tiny_cfg();
        cfg.steps = 3;
        let out = train(&cfg, &TrainOptions::default(), &products, &events).unwrap();
        assert_eq!(out.optimizer.step, 3);
        assert!(!out.optimizer.moments.is_empty());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.state");
        write_train_state(&path, &out.optimizer).unwrap();
        assert_eq!(read_train_state(&path).unwrap(), out.optimizer);
    }

    #[test]
    fn resume_rejects_a_run_that_already_finished() {
        let counts = [(Surface::Closeup, Engagement::Click, 40)];
        let (products, events) = small_data(10, &counts);
        let cfg = tiny_cfg();
        let done = train(&cfg, &TrainOptions::default(), &products, &events).unwrap();
        let opts = TrainOptions {
            resume: Some(Resume {
                params: done.encoder.params().clone(),
                optimizer: done.optimizer.clone(),
            }),
            ..TrainOptions::default()
        };
        assert!(matches!(train(&cfg, &opts, &products, &events), Err(Error::Config(_))));
    }

    #[test]
    fn standalone_evaluation_matches_the_final_training_probe() {
        let counts = [(Surface::Closeup, Engagement::Click, 150)];
        let (products, events) = small_data(16, &counts);
        let mut cfg = tiny_cfg();
        cfg.steps = 6;
        let out = train(&cfg, &TrainOptions::default(), &products, &events).unwrap();
        let again =
            evaluate(&cfg, &out.encoder, &products, &events, Modality::Full).unwrap();
        assert_eq!(out.final_recall.unwrap(), again);
    }
}
