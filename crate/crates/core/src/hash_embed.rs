//! Double-hash token embeddings.
//!
//! The full vocabulary is too large for one embedding row per token, so each
//! token id maps through two seeded hash functions into a shared table E and
//! blends the two rows with learned per-token importance weights W:
//! lookup(i) = W[i][0]·E[h1(i)] + W[i][1]·E[h2(i)].
//!
//! The hash seeds are fixed at construction and serialized with the model;
//! an embedding is meaningless under different seeds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hashing::seeded_hash;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::TokenBag;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HashEmbedder {
    vocab_size: usize,
    rows: usize,
    dim: usize,
    seed1: u64,
    seed2: u64,
}

impl HashEmbedder {
    pub fn new(vocab_size: usize, rows: usize, dim: usize, seed: u64) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "hash table must be non-empty, got {rows}x{dim}"
            )));
        }
        Ok(HashEmbedder {
            vocab_size,
            rows,
            dim,
            seed1: seeded_hash(seed, 0x01),
            seed2: seeded_hash(seed, 0x02),
        })
    }

    /// Rebuild from serialized hash seeds (checkpoint load path).
    pub fn from_seeds(vocab_size: usize, rows: usize, dim: usize, seed1: u64, seed2: u64) -> Self {
        HashEmbedder { vocab_size, rows, dim, seed1, seed2 }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seeds(&self) -> (u64, u64) {
        (self.seed1, self.seed2)
    }

    pub fn h1(&self, id: u32) -> usize {
        (seeded_hash(self.seed1, id as u64) % self.rows as u64) as usize
    }

    pub fn h2(&self, id: u32) -> usize {
        (seeded_hash(self.seed2, id as u64) % self.rows as u64) as usize
    }

    fn check_id(&self, id: u32) -> Result<()> {
        if (id as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(Error::Index(format!(
                "token id {id} out of range (vocabulary size {})",
                self.vocab_size
            )))
        }
    }

    /// Fresh parameter tensors: E uniform in (−0.01, 0.01), W near (1, 0).
    pub fn init_tables<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> (Tensor<T>, Tensor<T>) {
        let e: Vec<T> = (0..self.rows * self.dim)
            .map(|_| T::from_f64(rng.gen_range(-0.01..0.01)))
            .collect();
        let mut w = Vec::with_capacity(self.vocab_size * 2);
        for _ in 0..self.vocab_size {
            w.push(T::from_f64(1.0 + rng.gen_range(-0.01..0.01)));
            w.push(T::from_f64(rng.gen_range(-0.01..0.01)));
        }
        (
            Tensor::new(vec![self.rows, self.dim], e).unwrap(),
            Tensor::new(vec![self.vocab_size, 2], w).unwrap(),
        )
    }

    /// Differentiable single-token lookup on full tables.
    pub fn lookup_token<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        e: Var,
        w: Var,
        id: u32,
    ) -> Result<Var> {
        self.check_id(id)?;
        let pair = tape.gather_rows(e, &[self.h1(id), self.h2(id)])?;
        let wrow = tape.gather_rows(w, &[id as usize])?;
        let wvec = tape.reshape(wrow, vec![2])?;
        let scaled = tape.rows_scale(pair, wvec)?;
        tape.sum_rows(scaled)
    }

    /// Differentiable count-weighted bag sum on full tables, summed in
    /// ascending token-id order so the result is bitwise order-independent.
    pub fn embed_bag<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        e: Var,
        w: Var,
        bag: &TokenBag,
    ) -> Result<Var> {
        self.embed_bag_with(tape, e, w, bag, |row| row, |id| id as usize)
    }

    /// Bag sum where `e`/`w` may be compact sub-tables: `map_e` takes a
    /// global E row index (an h1/h2 value) to a row of `e`, and `map_w`
    /// takes a token id to a row of `w`. The trainer uses this to keep
    /// per-example gradients proportional to the tokens actually touched.
    pub fn embed_bag_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        e: Var,
        w: Var,
        bag: &TokenBag,
        map_e: impl Fn(usize) -> usize,
        map_w: impl Fn(u32) -> usize,
    ) -> Result<Var> {
        if bag.is_empty() {
            return Ok(tape.leaf(Tensor::zeros(vec![self.dim])));
        }
        let mut ids = bag.ids.clone();
        ids.sort_unstable_by_key(|&(id, _)| id);
        let mut e_idx = Vec::with_capacity(2 * ids.len());
        let mut w_idx = Vec::with_capacity(2 * ids.len());
        let mut col_idx = Vec::with_capacity(2 * ids.len());
        let mut counts = Vec::with_capacity(2 * ids.len());
        for &(id, count) in &ids {
            self.check_id(id)?;
            e_idx.push(map_e(self.h1(id)));
            e_idx.push(map_e(self.h2(id)));
            w_idx.push(map_w(id));
            w_idx.push(map_w(id));
            col_idx.push(0);
            col_idx.push(1);
            let c = T::from_usize(count as usize);
            counts.push(c);
            counts.push(c);
        }
        let e_rows = tape.gather_rows(e, &e_idx)?;
        let w_rows = tape.gather_rows(w, &w_idx)?;
        let weights = tape.gather_rowwise(w_rows, &col_idx)?;
        let weighted = tape.rows_scale(e_rows, weights)?;
        let counted = tape.rows_scale_const(weighted, &counts)?;
        tape.sum_rows(counted)
    }
}
