//! Nearest-neighbor retrieval over unit-norm embeddings.
//!
//! One index type backs two query paths: an exact scan that ranks every
//! stored vector, and a hierarchical navigable small-world (HNSW) graph
//! for approximate search at scale. Rows are validated to unit length on
//! the way in, so cosine similarity reduces to a dot product.
//!
//! The graph is built single-threaded and is immutable afterwards;
//! queries borrow the index immutably and may run concurrently.
//!
//! On-disk "ISIX" layout (little-endian): magic, version u32, n u64,
//! d u32, M u32 (zero for exact-only indexes), the id block (u64 per
//! row), the embedding block (f32 row-major), and for graph indexes the
//! construction beam width u32, entry ordinal u32, top level u16, then
//! per node a u16 layer count followed by, per layer, a u16 neighbor
//! count and u32 neighbor ordinals.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ISIX";
const VERSION: u32 = 1;
/// Tolerance on |norm - 1| for stored rows and incoming queries.
const UNIT_TOL: f64 = 1e-5;

pub const DEFAULT_M: usize = 16;
pub const DEFAULT_EF_CONSTRUCTION: usize = 200;
pub const DEFAULT_EF_SEARCH: usize = 100;

/// One retrieval hit: a stored id and its cosine similarity to the query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f32,
}

/// Hits ordered by score descending (ties broken by ascending id).
/// `capped` is set when the caller asked for more neighbors than the
/// index holds; every entry is returned in that case.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
    pub capped: bool,
}

/// Layered adjacency produced by HNSW construction. `links[i]` holds one
/// neighbor list per layer the node participates in, layer 0 first; a
/// node on layer l is present on every layer below it.
#[derive(Clone, Debug, PartialEq)]
struct Graph {
    m: usize,
    ef_construction: usize,
    entry: usize,
    max_level: usize,
    links: Vec<Vec<Vec<u32>>>,
}

/// Immutable cosine-similarity index over unit-norm rows. Built either
/// as a plain scan table (`build_exact`) or with an HNSW graph on top
/// (`build_hnsw`); both answer `query`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<u64>,
    dim: usize,
    vectors: Vec<f32>,
    graph: Option<Graph>,
}

impl EmbeddingIndex {
    /// Builds an exact-scan index. Rejects empty input, ragged or
    /// non-unit rows, and duplicate ids.
    pub fn build_exact(ids: Vec<u64>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        let (dim, flat) = validate_rows(&ids, &vectors)?;
        Ok(EmbeddingIndex { ids, dim, vectors: flat, graph: None })
    }

    /// Builds an HNSW index with layer assignment probability 1/ln(m),
    /// beam width `ef_construction` during insertion, and a fixed seed
    /// for the level sampler. Construction is sequential and
    /// deterministic: the same inputs and seed give the same graph.
    pub fn build_hnsw(
        ids: Vec<u64>,
        vectors: Vec<Vec<f32>>,
        m: usize,
        ef_construction: usize,
        seed: u64,
    ) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!("hnsw m = {m}, need at least 2")));
        }
        if m > u16::MAX as usize / 2 {
            return Err(Error::Config(format!("hnsw m = {m} overflows the file format")));
        }
        if ef_construction < m {
            return Err(Error::Config(format!(
                "ef_construction = {ef_construction} is below m = {m}"
            )));
        }
        let (dim, flat) = validate_rows(&ids, &vectors)?;
        if ids.len() > u32::MAX as usize {
            return Err(Error::Config(format!(
                "{} rows exceed the u32 ordinal space",
                ids.len()
            )));
        }
        let graph = build_graph(dim, &flat, m, ef_construction, seed);
        Ok(EmbeddingIndex { ids, dim, vectors: flat, graph: Some(graph) })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn has_graph(&self) -> bool {
        self.graph.is_some()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Returns the top-k neighbors of `q` by cosine similarity, score
    /// descending with ties broken by ascending id. The exact path ranks
    /// every row; the graph path explores with a beam of
    /// max(ef_search, k). Asking for more neighbors than the index holds
    /// returns everything and sets `capped`.
    pub fn query(&self, q: &[f32], k: usize, ef_search: usize) -> Result<QueryResult> {
        if q.len() != self.dim {
            return Err(Error::Shape(format!(
                "query has {} dims, index stores {}",
                q.len(),
                self.dim
            )));
        }
        check_unit(q, "query")?;
        let n = self.len();
        let capped = k > n;
        let k_eff = k.min(n);
        if k_eff == 0 {
            return Ok(QueryResult { hits: Vec::new(), capped });
        }
        let mut found: Vec<Scored> = match &self.graph {
            None => (0..n as u32)
                .map(|i| Scored { score: cosine(q, self.row(i as usize)), node: i })
                .collect(),
            Some(g) => {
                let ef = ef_search.max(k_eff);
                let mut visited = Visited::new(n);
                let mut ep = g.entry as u32;
                for level in (1..=g.max_level).rev() {
                    ep = search_layer(self.dim, &self.vectors, &g.links, q, &[ep], level, 1, &mut visited)[0]
                        .node;
                }
                search_layer(self.dim, &self.vectors, &g.links, q, &[ep], 0, ef, &mut visited)
            }
        };
        found.sort_unstable_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| self.ids[a.node as usize].cmp(&self.ids[b.node as usize]))
        });
        found.truncate(k_eff);
        let hits = found
            .into_iter()
            .map(|s| Hit { id: self.ids[s.node as usize], score: s.score })
            .collect();
        Ok(QueryResult { hits, capped })
    }

    /// Writes the index in the ISIX format described in the module docs.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        let m = self.graph.as_ref().map_or(0, |g| g.m);
        w.write_all(&(m as u32).to_le_bytes())?;
        for &id in &self.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        for &x in &self.vectors {
            w.write_all(&x.to_le_bytes())?;
        }
        if let Some(g) = &self.graph {
            w.write_all(&(g.ef_construction as u32).to_le_bytes())?;
            w.write_all(&(g.entry as u32).to_le_bytes())?;
            w.write_all(&(g.max_level as u16).to_le_bytes())?;
            for layers in &g.links {
                w.write_all(&(layers.len() as u16).to_le_bytes())?;
                for neighbors in layers {
                    if neighbors.len() > u16::MAX as usize {
                        return Err(Error::Format(format!(
                            "neighbor list of {} entries overflows u16",
                            neighbors.len()
                        )));
                    }
                    w.write_all(&(neighbors.len() as u16).to_le_bytes())?;
                    for &nb in neighbors {
                        w.write_all(&nb.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an ISIX file back, re-validating row norms and graph
    /// structure (ordinal bounds, layer nesting, entry placement).
    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad index magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported index version {version}, expected {VERSION}"
            )));
        }
        let n = read_u64(&mut r, "row count")? as usize;
        let dim = read_u32(&mut r, "dimension")? as usize;
        let m = read_u32(&mut r, "m")? as usize;
        if n == 0 || dim == 0 {
            return Err(Error::Format(format!("degenerate index shape {n} x {dim}")));
        }
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(read_u64(&mut r, "id")?);
        }
        let mut vectors = vec![0f32; n * dim];
        for x in vectors.iter_mut() {
            let mut b = [0u8; 4];
            read_exact(&mut r, &mut b, "embedding")?;
            *x = f32::from_le_bytes(b);
        }
        let mut seen = HashSet::with_capacity(n);
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::Format(format!("duplicate id {id} in index file")));
            }
        }
        for (i, row) in vectors.chunks(dim).enumerate() {
            check_unit(row, &format!("stored row {i}"))?;
        }
        let graph = if m == 0 {
            None
        } else {
            let ef_construction = read_u32(&mut r, "ef_construction")? as usize;
            let entry = read_u32(&mut r, "entry point")? as usize;
            let max_level = read_u16(&mut r, "top level")? as usize;
            let mut links = Vec::with_capacity(n);
            for i in 0..n {
                let layer_count = read_u16(&mut r, "layer count")? as usize;
                if layer_count == 0 || layer_count > max_level + 1 {
                    return Err(Error::Format(format!(
                        "node {i} spans {layer_count} layers, top level is {max_level}"
                    )));
                }
                let mut layers = Vec::with_capacity(layer_count);
                for _ in 0..layer_count {
                    let count = read_u16(&mut r, "neighbor count")? as usize;
                    let mut neighbors = Vec::with_capacity(count);
                    for _ in 0..count {
                        let nb = read_u32(&mut r, "neighbor")?;
                        if nb as usize >= n {
                            return Err(Error::Format(format!(
                                "neighbor ordinal {nb} out of range for {n} rows"
                            )));
                        }
                        neighbors.push(nb);
                    }
                    layers.push(neighbors);
                }
                links.push(layers);
            }
            if entry >= n || links[entry].len() != max_level + 1 {
                return Err(Error::Format(format!(
                    "entry point {entry} does not sit on the top layer"
                )));
            }
            for (i, layers) in links.iter().enumerate() {
                for (level, neighbors) in layers.iter().enumerate() {
                    for &nb in neighbors {
                        if links[nb as usize].len() <= level {
                            return Err(Error::Format(format!(
                                "node {i} links to {nb} on layer {level}, which {nb} does not reach"
                            )));
                        }
                    }
                }
            }
            Some(Graph { m, ef_construction, entry, max_level, links })
        };
        let mut tail = [0u8; 1];
        if r.read(&mut tail)? != 0 {
            return Err(Error::Format("trailing bytes after index payload".into()));
        }
        Ok(EmbeddingIndex { ids, dim, vectors, graph })
    }
}

fn validate_rows(ids: &[u64], vectors: &[Vec<f32>]) -> Result<(usize, Vec<f32>)> {
    if ids.is_empty() {
        return Err(Error::Input("cannot index an empty id list".into()));
    }
    if ids.len() != vectors.len() {
        return Err(Error::Input(format!(
            "{} ids but {} vectors",
            ids.len(),
            vectors.len()
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(Error::Input("zero-dimensional embeddings".into()));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    for &id in ids {
        if !seen.insert(id) {
            return Err(Error::Input(format!("duplicate id {id}")));
        }
    }
    let mut flat = Vec::with_capacity(ids.len() * dim);
    for (i, row) in vectors.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::Shape(format!(
                "row {i} has {} dims, row 0 has {dim}",
                row.len()
            )));
        }
        check_unit(row, &format!("row {i}"))?;
        flat.extend_from_slice(row);
    }
    Ok((dim, flat))
}

fn check_unit(v: &[f32], what: &str) -> Result<()> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::Input(format!("{what} has norm {norm:.6}, expected 1 +- 1e-5")));
    }
    Ok(())
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc as f32
}

/// Score paired with a node ordinal. Ordered by score first and, on
/// exact ties, by descending ordinal, so the max element is the best
/// score with the smallest ordinal.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Scored {
    score: f32,
    node: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Visited-set scratch reused across beam searches; bumping the epoch
/// clears it in O(1).
struct Visited {
    stamp: Vec<u32>,
    epoch: u32,
}

impl Visited {
    fn new(n: usize) -> Self {
        Visited { stamp: vec![0; n], epoch: 0 }
    }

    fn next_epoch(&mut self) {
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.fill(0);
            self.epoch = 1;
        }
    }

    /// Marks a node, returning true the first time it is seen this epoch.
    fn insert(&mut self, node: u32) -> bool {
        let slot = &mut self.stamp[node as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

/// Beam search on one layer: starts from `entries`, greedily expands the
/// best unexplored candidate, and keeps the `ef` best nodes seen.
/// Returns them ordered best-first. Deterministic: all heap orderings
/// break score ties by ordinal.
fn search_layer(
    dim: usize,
    data: &[f32],
    links: &[Vec<Vec<u32>>],
    q: &[f32],
    entries: &[u32],
    level: usize,
    ef: usize,
    visited: &mut Visited,
) -> Vec<Scored> {
    visited.next_epoch();
    let mut candidates = BinaryHeap::new();
    let mut best: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
    for &e in entries {
        if visited.insert(e) {
            let s = Scored { score: cosine(q, &data[e as usize * dim..(e as usize + 1) * dim]), node: e };
            candidates.push(s);
            best.push(Reverse(s));
        }
    }
    while let Some(c) = candidates.pop() {
        let worst = best.peek().expect("entries seed the result heap").0;
        if best.len() >= ef && c.score < worst.score {
            break;
        }
        for &nb in &links[c.node as usize][level] {
            if !visited.insert(nb) {
                continue;
            }
            let s = Scored {
                score: cosine(q, &data[nb as usize * dim..(nb as usize + 1) * dim]),
                node: nb,
            };
            if best.len() < ef || s > best.peek().unwrap().0 {
                candidates.push(s);
                best.push(Reverse(s));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
    }
    let mut out: Vec<Scored> = best.into_iter().map(|r| r.0).collect();
    out.sort_unstable_by(|a, b| b.cmp(a));
    out
}

/// Neighbor-selection heuristic: walking candidates best-first, keep one
/// outright only if it is closer to the query than to every neighbor
/// kept so far, which spreads the kept set across directions instead of
/// clustering it. Slots left over afterwards are refilled with the best
/// pruned candidates so every node keeps a full complement of links;
/// sparse graphs navigate poorly when the data has no cluster structure.
fn select_neighbors(dim: usize, data: &[f32], candidates: &[Scored], m: usize) -> Vec<u32> {
    let mut kept: Vec<u32> = Vec::with_capacity(m);
    let mut pruned: Vec<u32> = Vec::new();
    for c in candidates {
        if kept.len() == m {
            break;
        }
        let c_row = &data[c.node as usize * dim..(c.node as usize + 1) * dim];
        let diverse = kept.iter().all(|&s| {
            cosine(c_row, &data[s as usize * dim..(s as usize + 1) * dim]) < c.score
        });
        if diverse {
            kept.push(c.node);
        } else {
            pruned.push(c.node);
        }
    }
    for p in pruned {
        if kept.len() == m {
            break;
        }
        kept.push(p);
    }
    kept
}

fn sample_level(rng: &mut ChaCha8Rng, ml: f64) -> usize {
    let u: f64 = 1.0 - rng.gen::<f64>();
    (-u.ln() * ml).floor() as usize
}

fn build_graph(dim: usize, data: &[f32], m: usize, ef_construction: usize, seed: u64) -> Graph {
    let n = data.len() / dim;
    let ml = 1.0 / (m as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut links: Vec<Vec<Vec<u32>>> = Vec::with_capacity(n);
    let mut entry = 0usize;
    let mut max_level = 0usize;
    let mut visited = Visited::new(n);
    for i in 0..n {
        let level = sample_level(&mut rng, ml);
        links.push(vec![Vec::new(); level + 1]);
        if i == 0 {
            max_level = level;
            continue;
        }
        let q = &data[i * dim..(i + 1) * dim];
        let mut ep = entry as u32;
        let top = level.min(max_level);
        for l in (top + 1..=max_level).rev() {
            ep = search_layer(dim, data, &links, q, &[ep], l, 1, &mut visited)[0].node;
        }
        let mut seeds = vec![ep];
        for l in (0..=top).rev() {
            let found = search_layer(dim, data, &links, q, &seeds, l, ef_construction, &mut visited);
            let cap = if l == 0 { 2 * m } else { m };
            let selected = select_neighbors(dim, data, &found, cap);
            links[i][l] = selected.clone();
            for &nb in &selected {
                add_backlink(dim, data, &mut links, nb as usize, i as u32, l, cap);
            }
            seeds = found.iter().map(|s| s.node).collect();
        }
        if level > max_level {
            max_level = level;
            entry = i;
        }
    }
    repair_layer_zero(dim, data, &mut links, 2 * m);
    Graph { m, ef_construction, entry, max_level, links }
}

/// Adds the reverse edge `from -> new`, re-selecting `from`'s neighbor
/// list with the diversity heuristic when it would exceed `cap`.
fn add_backlink(
    dim: usize,
    data: &[f32],
    links: &mut [Vec<Vec<u32>>],
    from: usize,
    new: u32,
    level: usize,
    cap: usize,
) {
    if links[from][level].len() < cap {
        links[from][level].push(new);
        return;
    }
    let from_row = &data[from * dim..(from + 1) * dim];
    let mut scored: Vec<Scored> = links[from][level]
        .iter()
        .chain(std::iter::once(&new))
        .map(|&x| Scored {
            score: cosine(from_row, &data[x as usize * dim..(x as usize + 1) * dim]),
            node: x,
        })
        .collect();
    scored.sort_unstable_by(|a, b| b.cmp(a));
    links[from][level] = select_neighbors(dim, data, &scored, cap);
}

/// Construction leaves some layer-0 edges one-directional (back-link
/// re-selection can drop them). This pass takes the symmetric closure
/// and then trims over-full nodes in ordinal order, removing each
/// dropped edge from both endpoints so the layer stays symmetric and
/// every degree ends at or below `cap`.
fn repair_layer_zero(dim: usize, data: &[f32], links: &mut [Vec<Vec<u32>>], cap: usize) {
    let n = links.len();
    let mut adj: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    for a in 0..n {
        for &b in &links[a][0] {
            if b as usize != a {
                adj[a].insert(b);
                adj[b as usize].insert(a as u32);
            }
        }
    }
    for a in 0..n {
        if adj[a].len() <= cap {
            continue;
        }
        let a_row = &data[a * dim..(a + 1) * dim];
        let mut scored: Vec<Scored> = adj[a]
            .iter()
            .map(|&b| Scored {
                score: cosine(a_row, &data[b as usize * dim..(b as usize + 1) * dim]),
                node: b,
            })
            .collect();
        scored.sort_unstable_by(|x, y| y.cmp(x));
        let keep: HashSet<u32> = select_neighbors(dim, data, &scored, cap).into_iter().collect();
        for s in &scored {
            if !keep.contains(&s.node) {
                adj[a].remove(&s.node);
                adj[s.node as usize].remove(&(a as u32));
            }
        }
    }
    for (a, set) in adj.into_iter().enumerate() {
        links[a][0] = set.into_iter().collect();
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("index file truncated reading {what}: {e}")))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
