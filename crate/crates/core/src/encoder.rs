//! Multi-modal product encoder. Twenty image slots and twelve hashed text
//! bags are projected to a shared width, fused over a 33-token sequence (a
//! learnable CLS token comes first), and read out through a 2-layer MLP head
//! into a unit-norm embedding.
//!
//! There are no positional encodings, so image order carries no meaning; the
//! forward pass sorts image slots into a canonical order, which makes the
//! embedding bitwise invariant to permutations of a product's image list.
//! Zero padding slots attend like any other token.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{read_checkpoint, write_checkpoint, Params};
use crate::config::Config;
use crate::data::{Product, MAX_IMAGES, TEXT_FIELD_COUNT};
use crate::error::{Error, Result};
use crate::hash_embed::HashEmbedder;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::{encode_product_text, TokenBag, Vocabulary};

/// Fusion architecture of a trainable encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Transformer over CLS + 20 image slots + 12 text bags.
    Transformer,
    /// Per-slot MLPs, concatenation, then a second MLP; ablation baseline.
    MlpConcat,
}

impl Arch {
    fn tag(self) -> u64 {
        match self {
            Arch::Transformer => 0,
            Arch::MlpConcat => 1,
        }
    }

    fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(Arch::Transformer),
            1 => Ok(Arch::MlpConcat),
            other => Err(Error::Format(format!("unknown architecture tag {other}"))),
        }
    }
}

/// Which input groups a forward pass sees; the other group is zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Full,
    TextOnly,
    ImageOnly,
}

/// Every dimension the encoder needs, all persisted as checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dims {
    pub image_dim: usize,
    pub hash_dim: usize,
    pub hash_rows: usize,
    pub vocab_size: usize,
    pub proj_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub mlpcat_hidden: usize,
    pub mlpcat_latent: usize,
    pub learnable_temperature: bool,
}

impl Dims {
    pub fn from_config(cfg: &Config, vocab_size: usize) -> Result<Self> {
        if cfg.heads == 0 || cfg.proj_dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "projection width {} is not divisible into {} heads",
                cfg.proj_dim, cfg.heads
            )));
        }
        if cfg.layers < 1 {
            return Err(Error::Config(format!(
                "layer count must be at least 1, got {}",
                cfg.layers
            )));
        }
        Ok(Dims {
            image_dim: cfg.image_dim,
            hash_dim: cfg.hash_dim,
            hash_rows: cfg.hash_rows,
            vocab_size,
            proj_dim: cfg.proj_dim,
            out_dim: cfg.out_dim,
            heads: cfg.heads,
            layers: cfg.layers,
            ffn_hidden: cfg.ffn_hidden,
            head_hidden: cfg.head_hidden,
            mlpcat_hidden: cfg.mlpcat_hidden,
            mlpcat_latent: cfg.mlpcat_latent,
            learnable_temperature: cfg.learnable_temperature,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.proj_dim / self.heads
    }

    pub fn tokens(&self) -> usize {
        1 + MAX_IMAGES + TEXT_FIELD_COUNT
    }
}

/// A product's image slots as a canonical `[MAX_IMAGES × image_dim]` matrix:
/// slots sorted by bit pattern, zero rows padding the tail.
pub struct ImageSlots<T: Scalar> {
    matrix: Tensor<T>,
}

impl<T: Scalar> ImageSlots<T> {
    pub fn from_product(product: &Product, image_dim: usize) -> Result<Self> {
        product.validate(image_dim)?;
        let mut slots: Vec<&Vec<f32>> = product.image_embeddings.iter().collect();
        slots.sort_by(|a, b| lex_total_cmp(a, b));
        let mut data = Vec::with_capacity(MAX_IMAGES * image_dim);
        for s in &slots {
            data.extend(s.iter().map(|&x| <T as Scalar>::from_f32(x)));
        }
        data.resize(MAX_IMAGES * image_dim, T::zero());
        Ok(ImageSlots {
            matrix: Tensor::new(vec![MAX_IMAGES, image_dim], data)?,
        })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }
}

fn lex_total_cmp(a: &[f32], b: &[f32]) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// Parameter tensors bound onto a tape, by name. The hash tables may be
/// compact per-example sub-tables; `e_rows`/`w_rows` then record which global
/// rows back them, in sorted order.
pub struct Bound {
    names: Vec<String>,
    vars: HashMap<String, Var>,
    pub e_rows: Option<Vec<usize>>,
    pub w_rows: Option<Vec<u32>>,
}

impl Bound {
    pub fn new(pairs: Vec<(String, Var)>) -> Self {
        let names = pairs.iter().map(|(n, _)| n.clone()).collect();
        let vars = pairs.into_iter().collect();
        Bound {
            names,
            vars,
            e_rows: None,
            w_rows: None,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name:?} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(move |n| (n.as_str(), self.vars[n]))
    }
}

pub struct Encoder<T: Scalar> {
    params: Params<T>,
    dims: Dims,
    arch: Arch,
    embedder: HashEmbedder,
}

impl<T: Scalar> Encoder<T> {
    pub fn init(cfg: &Config, arch: Arch, vocab_size: usize, seed: u64) -> Result<Self> {
        let dims = Dims::from_config(cfg, vocab_size)?;
        Self::init_from_dims(dims, arch, cfg.temperature_init, seed)
    }

    fn init_from_dims(dims: Dims, arch: Arch, temperature_init: f32, seed: u64) -> Result<Self> {
        let embedder = HashEmbedder::new(dims.vocab_size, dims.hash_rows, dims.hash_dim, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let (e, w) = embedder.init_tables::<T>(&mut rng);
        p.insert("hash.e", e)?;
        p.insert("hash.w", w)?;
        match arch {
            Arch::Transformer => init_transformer(&mut p, &dims, &mut rng)?,
            Arch::MlpConcat => init_mlp_concat(&mut p, &dims, &mut rng)?,
        }
        if dims.learnable_temperature {
            p.insert(
                "temp",
                Tensor::vector(vec![<T as Scalar>::from_f32(temperature_init)]),
            )?;
        }
        write_meta(&mut p, &dims, arch, &embedder)?;
        Ok(Encoder {
            params: p,
            dims,
            arch,
            embedder,
        })
    }

    pub fn from_params(params: Params<T>) -> Result<Self> {
        let dims = read_meta(&params)?;
        let arch = Arch::from_tag(params.get_meta_u64("meta.arch")?)?;
        let seed1 = params.get_meta_u64("meta.hash_seed1")?;
        let seed2 = params.get_meta_u64("meta.hash_seed2")?;
        let embedder =
            HashEmbedder::from_seeds(dims.vocab_size, dims.hash_rows, dims.hash_dim, seed1, seed2);
        let e = params.get("hash.e")?;
        if e.shape() != [dims.hash_rows, dims.hash_dim] {
            return Err(Error::Format(format!(
                "hash table shape {:?} does not match recorded dims {}x{}",
                e.shape(),
                dims.hash_rows,
                dims.hash_dim
            )));
        }
        Ok(Encoder {
            params,
            dims,
            arch,
            embedder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.params)
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn embedder(&self) -> &HashEmbedder {
        &self.embedder
    }

    /// Current temperature value, when the scalar exists.
    pub fn temperature(&self) -> Option<f32> {
        self.params
            .get("temp")
            .ok()
            .map(|t| Scalar::as_f32(t.data()[0]))
    }

    /// Fresh encoder with identical dimensions but `n` transformer blocks.
    pub fn stack_layers(&self, n: usize, seed: u64) -> Result<Self> {
        if n < 1 {
            return Err(Error::Config(format!(
                "layer count must be at least 1, got {n}"
            )));
        }
        if self.arch != Arch::Transformer {
            return Err(Error::Config(
                "only the transformer variant stacks blocks".into(),
            ));
        }
        let mut dims = self.dims.clone();
        dims.layers = n;
        let temp0 = self.temperature().unwrap_or(10.0);
        Self::init_from_dims(dims, self.arch, temp0, seed)
    }

    /// Bind every parameter tensor as a tape leaf, full hash tables included.
    pub fn bind_all(&self, tape: &mut Tape<T>) -> Bound {
        let mut pairs = Vec::new();
        for (name, t) in self.params.iter() {
            if name.starts_with("meta.") {
                continue;
            }
            pairs.push((name.to_string(), tape.leaf(t.clone())));
        }
        Bound::new(pairs)
    }

    /// Bind with compact hash-table leaves holding only the rows these bags
    /// touch, so per-example gradients stay proportional to the tokens used.
    pub fn bind_compact(
        &self,
        tape: &mut Tape<T>,
        bags: &[TokenBag; TEXT_FIELD_COUNT],
    ) -> Result<Bound> {
        let mut e_rows: Vec<usize> = Vec::new();
        let mut w_rows: Vec<u32> = Vec::new();
        for bag in bags {
            for &(id, _) in &bag.ids {
                e_rows.push(self.embedder.h1(id));
                e_rows.push(self.embedder.h2(id));
                w_rows.push(id);
            }
        }
        e_rows.sort_unstable();
        e_rows.dedup();
        w_rows.sort_unstable();
        w_rows.dedup();
        let e_sub = gather_tensor_rows(self.params.get("hash.e")?, &e_rows)?;
        let w_idx: Vec<usize> = w_rows.iter().map(|&i| i as usize).collect();
        let w_sub = gather_tensor_rows(self.params.get("hash.w")?, &w_idx)?;
        let mut pairs = Vec::new();
        for (name, t) in self.params.iter() {
            if name.starts_with("meta.") {
                continue;
            }
            let leaf = match name {
                "hash.e" => tape.leaf(e_sub.clone()),
                "hash.w" => tape.leaf(w_sub.clone()),
                _ => tape.leaf(t.clone()),
            };
            pairs.push((name.to_string(), leaf));
        }
        let mut bound = Bound::new(pairs);
        bound.e_rows = Some(e_rows);
        bound.w_rows = Some(w_rows);
        Ok(bound)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &ImageSlots<T>,
        bags: &[TokenBag; TEXT_FIELD_COUNT],
        mask: Modality,
    ) -> Result<Var> {
        let img = match mask {
            Modality::TextOnly => {
                tape.leaf(Tensor::zeros(vec![MAX_IMAGES, self.dims.image_dim]))
            }
            _ => tape.leaf(images.matrix.clone()),
        };
        let text = match mask {
            Modality::ImageOnly => {
                tape.leaf(Tensor::zeros(vec![TEXT_FIELD_COUNT, self.dims.hash_dim]))
            }
            _ => {
                let e = bound.var("hash.e")?;
                let w = bound.var("hash.w")?;
                let rows = bags
                    .iter()
                    .map(|bag| self.bag_var(tape, bound, e, w, bag))
                    .collect::<Result<Vec<Var>>>()?;
                tape.stack_rows(&rows)?
            }
        };
        match self.arch {
            Arch::Transformer => self.fuse_transformer(tape, bound, img, text),
            Arch::MlpConcat => self.fuse_mlp_concat(tape, bound, img, text),
        }
    }

    /// One-off inference on a fresh tape.
    pub fn embed(&self, product: &Product, vocab: &Vocabulary, mask: Modality) -> Result<Vec<f32>> {
        let images = ImageSlots::from_product(product, self.dims.image_dim)?;
        let bags = encode_product_text(product, vocab);
        let mut tape = Tape::new();
        let bound = self.bind_all(&mut tape);
        let out = self.forward(&mut tape, &bound, &images, &bags, mask)?;
        Ok(tape.value(out).to_f32_vec())
    }

    fn bag_var(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        e: Var,
        w: Var,
        bag: &TokenBag,
    ) -> Result<Var> {
        match (&bound.e_rows, &bound.w_rows) {
            (None, None) => self.embedder.embed_bag(tape, e, w, bag),
            (Some(er), Some(wr)) => self.embedder.embed_bag_with(
                tape,
                e,
                w,
                bag,
                |row| {
                    er.binary_search(&row)
                        .expect("compact hash table is missing a row it was built from")
                },
                |id| {
                    wr.binary_search(&id)
                        .expect("compact weight table is missing a token it was built from")
                },
            ),
            _ => Err(Error::Config(
                "hash tables must be bound full or compact together".into(),
            )),
        }
    }

    fn linear(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        w: &str,
        b: &str,
    ) -> Result<Var> {
        let y = tape.matmul(x, bound.var(w)?)?;
        tape.add_row_broadcast(y, bound.var(b)?)
    }

    fn fuse_transformer(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        img: Var,
        text: Var,
    ) -> Result<Var> {
        let d = &self.dims;
        let img_tok = self.linear(tape, bound, img, "proj.image.w", "proj.image.b")?;
        let text_tok = self.linear(tape, bound, text, "proj.text.w", "proj.text.b")?;
        let cls = bound.var("cls")?;
        let mut h = tape.concat_rows(&[cls, img_tok, text_tok])?;
        for l in 0..d.layers {
            h = self.block(tape, bound, h, l)?;
        }
        let hn = tape.layer_norm(h, bound.var("ln_f.g")?, bound.var("ln_f.b")?)?;
        let cls_out = tape.slice_rows(hn, 0, 1)?;
        let h1 = self.linear(tape, bound, cls_out, "head.w1", "head.b1")?;
        let h1 = tape.relu(h1);
        let out = self.linear(tape, bound, h1, "head.w2", "head.b2")?;
        let flat = tape.reshape(out, vec![d.out_dim])?;
        tape.l2_normalize(flat)
    }

    fn block(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, l: usize) -> Result<Var> {
        let d = &self.dims;
        let p = |s: &str| format!("block{l}.{s}");
        let a_in = tape.layer_norm(x, bound.var(&p("ln1.g"))?, bound.var(&p("ln1.b"))?)?;
        let q = self.linear(tape, bound, a_in, &p("attn.wq"), &p("attn.bq"))?;
        // No key bias: row softmax is shift-invariant, so one would be an
        // inert parameter with an exactly zero gradient.
        let k = tape.matmul(a_in, bound.var(&p("attn.wk"))?)?;
        let v = self.linear(tape, bound, a_in, &p("attn.wv"), &p("attn.bv"))?;
        let hd = d.head_dim();
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(d.heads);
        for i in 0..d.heads {
            let qh = tape.slice_cols(q, i * hd, hd)?;
            let kh = tape.slice_cols(k, i * hd, hd)?;
            let vh = tape.slice_cols(v, i * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let att = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let o = self.linear(tape, bound, cat, &p("attn.wo"), &p("attn.bo"))?;
        let x = tape.add(x, o)?;
        let f_in = tape.layer_norm(x, bound.var(&p("ln2.g"))?, bound.var(&p("ln2.b"))?)?;
        let f1 = self.linear(tape, bound, f_in, &p("ffn.w1"), &p("ffn.b1"))?;
        let f1 = tape.relu(f1);
        let f2 = self.linear(tape, bound, f1, &p("ffn.w2"), &p("ffn.b2"))?;
        tape.add(x, f2)
    }

    fn fuse_mlp_concat(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        img: Var,
        text: Var,
    ) -> Result<Var> {
        let d = &self.dims;
        let ilat = self.mlp3(tape, bound, img, "mc.image")?;
        let tlat = self.mlp3(tape, bound, text, "mc.text")?;
        let all = tape.concat_rows(&[ilat, tlat])?;
        let width = (MAX_IMAGES + TEXT_FIELD_COUNT) * d.mlpcat_latent;
        let flat = tape.reshape(all, vec![1, width])?;
        let mixed = self.mlp3(tape, bound, flat, "mc.mix")?;
        let v = tape.reshape(mixed, vec![d.out_dim])?;
        tape.l2_normalize(v)
    }

    fn mlp3(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let h1 = self.linear(tape, bound, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h1 = tape.relu(h1);
        let h2 = self.linear(tape, bound, h1, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
        let h2 = tape.relu(h2);
        self.linear(tape, bound, h2, &format!("{prefix}.w3"), &format!("{prefix}.b3"))
    }
}

impl Encoder<f32> {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(read_checkpoint(path)?)
    }
}

/// Scalar count of a would-be encoder, without allocating it.
pub fn param_count(cfg: &Config, arch: Arch, vocab_size: usize) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let hash = cfg.hash_rows * cfg.hash_dim + vocab_size * 2;
    let body = match arch {
        Arch::Transformer => {
            let block = 2 * (2 * cfg.proj_dim)
                + 4 * lin(cfg.proj_dim, cfg.proj_dim)
                - cfg.proj_dim
                + lin(cfg.proj_dim, cfg.ffn_hidden)
                + lin(cfg.ffn_hidden, cfg.proj_dim);
            lin(cfg.image_dim, cfg.proj_dim)
                + lin(cfg.hash_dim, cfg.proj_dim)
                + cfg.proj_dim
                + cfg.layers * block
                + 2 * cfg.proj_dim
                + lin(cfg.proj_dim, cfg.head_hidden)
                + lin(cfg.head_hidden, cfg.out_dim)
        }
        Arch::MlpConcat => {
            let mlp3 = |i: usize, h: usize, o: usize| lin(i, h) + lin(h, h) + lin(h, o);
            let width = (MAX_IMAGES + TEXT_FIELD_COUNT) * cfg.mlpcat_latent;
            mlp3(cfg.image_dim, cfg.mlpcat_hidden, cfg.mlpcat_latent)
                + mlp3(cfg.hash_dim, cfg.mlpcat_hidden, cfg.mlpcat_latent)
                + mlp3(width, cfg.mlpcat_hidden, cfg.out_dim)
        }
    };
    hash + body + usize::from(cfg.learnable_temperature)
}

/// Sum of a product's image embeddings, L2-normalized; no parameters.
pub fn sum_baseline(product: &Product) -> Result<Vec<f32>> {
    let dim = product
        .image_embeddings
        .first()
        .map(|v| v.len())
        .unwrap_or(0);
    if dim == 0 {
        return Err(Error::Degenerate("no image embeddings to pool".into()));
    }
    let mut acc = vec![0f32; dim];
    for e in &product.image_embeddings {
        if e.len() != dim {
            return Err(Error::Shape(format!(
                "image embedding lengths differ: {} vs {dim}",
                e.len()
            )));
        }
        for (a, &x) in acc.iter_mut().zip(e.iter()) {
            *a += x;
        }
    }
    normalize_unit(&mut acc)?;
    Ok(acc)
}

/// Sum of a fixed map applied to each nonzero image embedding, L2-normalized.
pub fn sum_mlp_baseline(
    product: &Product,
    mlp: impl Fn(&[f32]) -> Vec<f32>,
) -> Result<Vec<f32>> {
    let mut acc: Option<Vec<f32>> = None;
    for e in &product.image_embeddings {
        if e.iter().all(|&x| x == 0.0) {
            continue;
        }
        let y = mlp(e);
        match &mut acc {
            None => acc = Some(y),
            Some(a) => {
                if y.len() != a.len() {
                    return Err(Error::Shape(format!(
                        "mapped image embedding lengths differ: {} vs {}",
                        y.len(),
                        a.len()
                    )));
                }
                for (ai, yi) in a.iter_mut().zip(y.iter()) {
                    *ai += yi;
                }
            }
        }
    }
    let mut acc =
        acc.ok_or_else(|| Error::Degenerate("no nonzero image embeddings to pool".into()))?;
    normalize_unit(&mut acc)?;
    Ok(acc)
}

pub(crate) fn normalize_unit(v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {norm:e}"
        )));
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(())
}

fn gather_tensor_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let n = t.shape()[1];
    let m = t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * n);
    for &r in rows {
        if r >= m {
            return Err(Error::Index(format!("row {r} out of range (rows {m})")));
        }
        data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
    }
    Tensor::new(vec![rows.len(), n], data)
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, a: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-a..a))).collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform Glorot weights; biases draw from a small uniform rather than zero
/// so no pre-activation sits exactly on the relu kink at init (zero-padded
/// slots would otherwise land there, stalling their gradients and breaking
/// finite-difference checks).
fn linear_init<T: Scalar>(
    p: &mut Params<T>,
    rng: &mut ChaCha8Rng,
    w: &str,
    b: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    p.insert(w, uniform(rng, vec![fan_in, fan_out], a))?;
    p.insert(b, uniform(rng, vec![fan_out], 0.01))?;
    Ok(())
}

fn ln_init<T: Scalar>(p: &mut Params<T>, prefix: &str, n: usize) -> Result<()> {
    p.insert(&format!("{prefix}.g"), Tensor::filled(vec![n], T::one()))?;
    p.insert(&format!("{prefix}.b"), Tensor::zeros(vec![n]))?;
    Ok(())
}

fn init_transformer<T: Scalar>(
    p: &mut Params<T>,
    d: &Dims,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    linear_init(p, rng, "proj.image.w", "proj.image.b", d.image_dim, d.proj_dim)?;
    linear_init(p, rng, "proj.text.w", "proj.text.b", d.hash_dim, d.proj_dim)?;
    p.insert("cls", uniform(rng, vec![1, d.proj_dim], 0.01))?;
    for l in 0..d.layers {
        let name = |s: &str| format!("block{l}.{s}");
        ln_init(p, &name("ln1"), d.proj_dim)?;
        for gate in ["q", "k", "v", "o"] {
            let a = (6.0 / (2 * d.proj_dim) as f64).sqrt();
            p.insert(
                &name(&format!("attn.w{gate}")),
                uniform(rng, vec![d.proj_dim, d.proj_dim], a),
            )?;
            if gate != "k" {
                p.insert(
                    &name(&format!("attn.b{gate}")),
                    uniform(rng, vec![d.proj_dim], 0.01),
                )?;
            }
        }
        ln_init(p, &name("ln2"), d.proj_dim)?;
        linear_init(p, rng, &name("ffn.w1"), &name("ffn.b1"), d.proj_dim, d.ffn_hidden)?;
        linear_init(p, rng, &name("ffn.w2"), &name("ffn.b2"), d.ffn_hidden, d.proj_dim)?;
    }
    ln_init(p, "ln_f", d.proj_dim)?;
    linear_init(p, rng, "head.w1", "head.b1", d.proj_dim, d.head_hidden)?;
    linear_init(p, rng, "head.w2", "head.b2", d.head_hidden, d.out_dim)?;
    Ok(())
}

fn init_mlp_concat<T: Scalar>(p: &mut Params<T>, d: &Dims, rng: &mut ChaCha8Rng) -> Result<()> {
    let mlp3 = |p: &mut Params<T>, rng: &mut ChaCha8Rng, prefix: &str, i: usize, h: usize, o: usize| -> Result<()> {
        linear_init(p, rng, &format!("{prefix}.w1"), &format!("{prefix}.b1"), i, h)?;
        linear_init(p, rng, &format!("{prefix}.w2"), &format!("{prefix}.b2"), h, h)?;
        linear_init(p, rng, &format!("{prefix}.w3"), &format!("{prefix}.b3"), h, o)?;
        Ok(())
    };
    mlp3(p, rng, "mc.image", d.image_dim, d.mlpcat_hidden, d.mlpcat_latent)?;
    mlp3(p, rng, "mc.text", d.hash_dim, d.mlpcat_hidden, d.mlpcat_latent)?;
    let width = (MAX_IMAGES + TEXT_FIELD_COUNT) * d.mlpcat_latent;
    mlp3(p, rng, "mc.mix", width, d.mlpcat_hidden, d.out_dim)?;
    Ok(())
}

fn write_meta<T: Scalar>(
    p: &mut Params<T>,
    d: &Dims,
    arch: Arch,
    embedder: &HashEmbedder,
) -> Result<()> {
    p.insert_meta_usize("meta.image_dim", d.image_dim)?;
    p.insert_meta_usize("meta.hash_dim", d.hash_dim)?;
    p.insert_meta_usize("meta.hash_rows", d.hash_rows)?;
    p.insert_meta_usize("meta.vocab_size", d.vocab_size)?;
    p.insert_meta_usize("meta.proj_dim", d.proj_dim)?;
    p.insert_meta_usize("meta.out_dim", d.out_dim)?;
    p.insert_meta_usize("meta.heads", d.heads)?;
    p.insert_meta_usize("meta.layers", d.layers)?;
    p.insert_meta_usize("meta.ffn_hidden", d.ffn_hidden)?;
    p.insert_meta_usize("meta.head_hidden", d.head_hidden)?;
    p.insert_meta_usize("meta.mlpcat_hidden", d.mlpcat_hidden)?;
    p.insert_meta_usize("meta.mlpcat_latent", d.mlpcat_latent)?;
    p.insert_meta_flag("meta.learnable_temp", d.learnable_temperature)?;
    p.insert_meta_u64("meta.arch", arch.tag())?;
    let (s1, s2) = embedder.seeds();
    p.insert_meta_u64("meta.hash_seed1", s1)?;
    p.insert_meta_u64("meta.hash_seed2", s2)?;
    Ok(())
}

fn read_meta<T: Scalar>(p: &Params<T>) -> Result<Dims> {
    Ok(Dims {
        image_dim: p.get_meta_usize("meta.image_dim")?,
        hash_dim: p.get_meta_usize("meta.hash_dim")?,
        hash_rows: p.get_meta_usize("meta.hash_rows")?,
        vocab_size: p.get_meta_usize("meta.vocab_size")?,
        proj_dim: p.get_meta_usize("meta.proj_dim")?,
        out_dim: p.get_meta_usize("meta.out_dim")?,
        heads: p.get_meta_usize("meta.heads")?,
        layers: p.get_meta_usize("meta.layers")?,
        ffn_hidden: p.get_meta_usize("meta.ffn_hidden")?,
        head_hidden: p.get_meta_usize("meta.head_hidden")?,
        mlpcat_hidden: p.get_meta_usize("meta.mlpcat_hidden")?,
        mlpcat_latent: p.get_meta_usize("meta.mlpcat_latent")?,
        learnable_temperature: p.get_meta_flag("meta.learnable_temp")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check::grad_check;
    use crate::text::{build_vocab, VocabCaps};

    fn tiny_config() -> Config {
        let mut c = Config::desk();
        c.image_dim = 3;
        c.hash_dim = 4;
        c.proj_dim = 8;
        c.out_dim = 5;
        c.hash_rows = 11;
        c.heads = 2;
        c.layers = 1;
        c.ffn_hidden = 6;
        c.head_hidden = 7;
        c.mlpcat_hidden = 6;
        c.mlpcat_latent = 4;
        c
    }

    fn tiny_vocab() -> Vocabulary {
        let docs = [
            "red velvet sofa",
            "blue denim jacket",
            "red lamp for the living room",
            "walnut desk",
        ];
        build_vocab(
            docs.iter().copied(),
            VocabCaps {
                unigrams: 60,
                bigrams: 60,
                trigrams: 120,
            },
        )
        .unwrap()
    }

    fn sample_product(id: u64) -> Product {
        Product {
            id,
            image_embeddings: vec![
                vec![0.4, -0.2, 0.9],
                vec![-0.1, 0.3, 0.5],
            ],
            title: "red velvet sofa".into(),
            description: "a sofa for the living room".into(),
            brand: "walnut".into(),
            colors: vec!["red".into(), "blue".into()],
            ..Product::default()
        }
    }

    fn encoder_f32(arch: Arch) -> (Encoder<f32>, Vocabulary) {
        let vocab = tiny_vocab();
        let enc = Encoder::<f32>::init(&tiny_config(), arch, vocab.len(), 7).unwrap();
        (enc, vocab)
    }

    fn norm64(v: &[f32]) -> f64 {
        v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    #[test]
    fn output_is_unit_norm_for_varied_products() {
        for arch in [Arch::Transformer, Arch::MlpConcat] {
            let (enc, vocab) = encoder_f32(arch);
            let empty = Product { id: 1, ..Product::default() };
            let no_images = Product {
                id: 2,
                image_embeddings: vec![],
                ..sample_product(2)
            };
            for product in [sample_product(0), empty, no_images] {
                let out = enc.embed(&product, &vocab, Modality::Full).unwrap();
                assert_eq!(out.len(), 5);
                assert!((norm64(&out) - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn image_permutation_is_bitwise_invariant() {
        for arch in [Arch::Transformer, Arch::MlpConcat] {
            let (enc, vocab) = encoder_f32(arch);
            let mut product = sample_product(0);
            product.image_embeddings = vec![
                vec![0.4, -0.2, 0.9],
                vec![-0.1, 0.3, 0.5],
                vec![0.7, 0.7, -0.7],
                vec![0.0, 0.0, 0.0],
                vec![-0.5, 0.1, 0.2],
            ];
            let base = enc.embed(&product, &vocab, Modality::Full).unwrap();
            let mut reversed = product.clone();
            reversed.image_embeddings.reverse();
            let mut rotated = product.clone();
            rotated.image_embeddings.rotate_left(2);
            for variant in [reversed, rotated] {
                let out = enc.embed(&variant, &vocab, Modality::Full).unwrap();
                assert_eq!(base, out);
            }
        }
    }

    #[test]
    fn empty_product_is_deterministic() {
        let (enc_a, vocab) = encoder_f32(Arch::Transformer);
        let (enc_b, _) = encoder_f32(Arch::Transformer);
        let empty = Product { id: 9, ..Product::default() };
        let a = enc_a.embed(&empty, &vocab, Modality::Full).unwrap();
        let b = enc_b.embed(&empty, &vocab, Modality::Full).unwrap();
        assert_eq!(a, b);
        assert!((norm64(&a) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn zeroing_text_changes_output() {
        let (enc, vocab) = encoder_f32(Arch::Transformer);
        let product = sample_product(0);
        let full = enc.embed(&product, &vocab, Modality::Full).unwrap();
        let image_only = enc.embed(&product, &vocab, Modality::ImageOnly).unwrap();
        assert_ne!(full, image_only);
    }

    #[test]
    fn text_only_ignores_image_perturbations() {
        let (enc, vocab) = encoder_f32(Arch::Transformer);
        let a = sample_product(0);
        let mut b = a.clone();
        b.image_embeddings = vec![vec![9.0, -3.0, 1.5]];
        let ea = enc.embed(&a, &vocab, Modality::TextOnly).unwrap();
        let eb = enc.embed(&b, &vocab, Modality::TextOnly).unwrap();
        assert_eq!(ea, eb);
        assert_ne!(
            enc.embed(&a, &vocab, Modality::Full).unwrap(),
            enc.embed(&b, &vocab, Modality::Full).unwrap()
        );
    }

    #[test]
    fn compact_binding_matches_full_binding_bitwise() {
        for arch in [Arch::Transformer, Arch::MlpConcat] {
            let (enc, vocab) = encoder_f32(arch);
            let product = sample_product(0);
            let images = ImageSlots::from_product(&product, 3).unwrap();
            let bags = encode_product_text(&product, &vocab);

            let mut tape_full = Tape::<f32>::new();
            let bound_full = enc.bind_all(&mut tape_full);
            let full = enc
                .forward(&mut tape_full, &bound_full, &images, &bags, Modality::Full)
                .unwrap();

            let mut tape_sub = Tape::<f32>::new();
            let bound_sub = enc.bind_compact(&mut tape_sub, &bags).unwrap();
            let sub = enc
                .forward(&mut tape_sub, &bound_sub, &images, &bags, Modality::Full)
                .unwrap();

            assert_eq!(tape_full.value(full).data(), tape_sub.value(sub).data());
        }
    }

    #[test]
    fn sum_baseline_single_and_doubled_image() {
        let e = vec![3.0f32, 0.0, 4.0];
        let single = Product {
            id: 1,
            image_embeddings: vec![e.clone()],
            ..Product::default()
        };
        let out = sum_baseline(&single).unwrap();
        assert_eq!(out, vec![0.6, 0.0, 0.8]);

        let doubled = Product {
            id: 2,
            image_embeddings: vec![e.clone(), e],
            ..Product::default()
        };
        let out2 = sum_baseline(&doubled).unwrap();
        for (a, b) in out.iter().zip(out2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_baseline_degenerate_inputs_error() {
        let opposed = Product {
            id: 1,
            image_embeddings: vec![vec![1.0, -2.0], vec![-1.0, 2.0]],
            ..Product::default()
        };
        assert!(matches!(sum_baseline(&opposed), Err(Error::Degenerate(_))));
        let none = Product { id: 2, ..Product::default() };
        assert!(matches!(sum_baseline(&none), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sum_mlp_identity_matches_sum_baseline() {
        let product = Product {
            id: 1,
            image_embeddings: vec![
                vec![0.2, -0.4, 1.0],
                vec![0.0, 0.0, 0.0],
                vec![-0.3, 0.8, 0.1],
            ],
            ..Product::default()
        };
        let plain = sum_baseline(&product).unwrap();
        let mapped = sum_mlp_baseline(&product, |e| e.to_vec()).unwrap();
        assert_eq!(plain, mapped);
    }

    #[test]
    fn sum_mlp_single_image_and_empty() {
        let product = Product {
            id: 1,
            image_embeddings: vec![vec![0.0, 5.0]],
            ..Product::default()
        };
        let out = sum_mlp_baseline(&product, |e| e.iter().map(|x| x * 2.0).collect()).unwrap();
        assert_eq!(out, vec![0.0, 1.0]);
        let zeros = Product {
            id: 2,
            image_embeddings: vec![vec![0.0, 0.0]],
            ..Product::default()
        };
        assert!(matches!(
            sum_mlp_baseline(&zeros, |e| e.to_vec()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn param_count_formula_matches_allocated_store() {
        let vocab = tiny_vocab();
        for arch in [Arch::Transformer, Arch::MlpConcat] {
            let enc = Encoder::<f32>::init(&tiny_config(), arch, vocab.len(), 3).unwrap();
            assert_eq!(
                enc.params().scalar_count(),
                param_count(&tiny_config(), arch, vocab.len())
            );
        }
        let desk = Config::desk();
        let enc = Encoder::<f32>::init(&desk, Arch::Transformer, 500, 3).unwrap();
        assert_eq!(
            enc.params().scalar_count(),
            param_count(&desk, Arch::Transformer, 500)
        );
    }

    #[test]
    fn production_scale_parameter_counts() {
        let mut cfg = Config::paper();
        let vocab_size =
            cfg.vocab_unigrams + cfg.vocab_bigrams + cfg.vocab_trigrams;
        assert_eq!(vocab_size, 1_264_000);
        let expected = [33_119_744usize, 36_271_616, 39_423_488, 42_575_360];
        let printed_millions = [33.1, 36.3, 39.4, 42.6];
        for (i, want) in expected.iter().enumerate() {
            cfg.layers = i + 1;
            let got = param_count(&cfg, Arch::Transformer, vocab_size);
            assert_eq!(got, *want);
            let rounded = (got as f64 / 1.0e5).round() / 10.0;
            assert_eq!(rounded, printed_millions[i]);
        }
        cfg.layers = 1;
        let got = param_count(&cfg, Arch::MlpConcat, vocab_size);
        assert_eq!(got, 30_751_744);
        assert_eq!((got as f64 / 1.0e5).round() / 10.0, 30.8);
    }

    #[test]
    fn stack_layers_validates_and_grows() {
        let (enc, _) = encoder_f32(Arch::Transformer);
        assert!(matches!(enc.stack_layers(0, 7), Err(Error::Config(_))));
        let two = enc.stack_layers(2, 7).unwrap();
        assert!(two.params().scalar_count() > enc.params().scalar_count());
        let one = enc.stack_layers(1, 7).unwrap();
        for ((na, ta), (nb, tb)) in enc.params().iter().zip(one.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_embeddings() {
        let (enc, vocab) = encoder_f32(Arch::Transformer);
        let product = sample_product(0);
        let before = enc.embed(&product, &vocab, Modality::Full).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.isge");
        enc.save(&path).unwrap();
        let loaded = Encoder::<f32>::load(&path).unwrap();
        assert_eq!(loaded.dims(), enc.dims());
        assert_eq!(loaded.arch(), Arch::Transformer);
        let after = loaded.embed(&product, &vocab, Modality::Full).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut cfg = tiny_config();
        cfg.heads = 3;
        assert!(matches!(
            Encoder::<f32>::init(&cfg, Arch::Transformer, 10, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        for arch in [Arch::Transformer, Arch::MlpConcat] {
            let vocab = tiny_vocab();
            let enc = Encoder::<f64>::init(&tiny_config(), arch, vocab.len(), 11).unwrap();
            let product = sample_product(0);
            let images = ImageSlots::<f64>::from_product(&product, 3).unwrap();
            let bags = encode_product_text(&product, &vocab);
            let names: Vec<String> = enc
                .params()
                .iter()
                .filter(|(n, _)| !n.starts_with("meta."))
                .map(|(n, _)| n.to_string())
                .collect();
            let tensors: Vec<Tensor<f64>> = names
                .iter()
                .map(|n| enc.params().get(n).unwrap().clone())
                .collect();
            let mut readout_rng = ChaCha8Rng::seed_from_u64(5);
            let readout: Vec<f64> = (0..5).map(|_| readout_rng.gen_range(-1.0..1.0)).collect();
            let err = grad_check(
                &tensors,
                |tape, vars| {
                    let pairs = names
                        .iter()
                        .cloned()
                        .zip(vars.iter().copied())
                        .collect::<Vec<_>>();
                    let bound = Bound::new(pairs);
                    let emb = enc.forward(tape, &bound, &images, &bags, Modality::Full)?;
                    let row = tape.reshape(emb, vec![1, 5])?;
                    let r = tape.leaf(Tensor::new(vec![5, 1], readout.clone())?);
                    let dot = tape.matmul(row, r)?;
                    Ok(tape.mean_all(dot))
                },
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "max relative gradient error {err:e}");
        }
    }
}
