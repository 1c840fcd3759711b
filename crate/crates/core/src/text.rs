//! Text features as capped-vocabulary token-ID bags.
//!
//! Every text field becomes a bag of word unigrams, word bigrams, and
//! per-word character trigrams, mapped through a frequency-built vocabulary
//! with per-class caps. Out-of-vocabulary tokens are dropped at encode time.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{Product, TEXT_FIELD_COUNT, TEXT_FIELD_NAMES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TokenClass {
    Unigram,
    Bigram,
    Trigram,
}

impl TokenClass {
    pub const ALL: [TokenClass; 3] = [TokenClass::Unigram, TokenClass::Bigram, TokenClass::Trigram];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenClass::Unigram => "unigram",
            TokenClass::Bigram => "bigram",
            TokenClass::Trigram => "trigram",
        }
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TokenClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unigram" => Ok(TokenClass::Unigram),
            "bigram" => Ok(TokenClass::Bigram),
            "trigram" => Ok(TokenClass::Trigram),
            other => Err(Error::Input(format!("unknown token class {other:?}"))),
        }
    }
}

/// Token multiset of one string, split by class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tokens {
    pub unigrams: Vec<String>,
    pub bigrams: Vec<String>,
    pub trigrams: Vec<String>,
}

impl Tokens {
    pub fn class(&self, class: TokenClass) -> &[String] {
        match class {
            TokenClass::Unigram => &self.unigrams,
            TokenClass::Bigram => &self.bigrams,
            TokenClass::Trigram => &self.trigrams,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.unigrams.is_empty() && self.bigrams.is_empty() && self.trigrams.is_empty()
    }
}

/// Lowercase, split on Unicode whitespace, then derive bigrams (adjacent
/// words joined with `_`) and character trigrams over each `#word#` with `#`
/// marking word boundaries. Pure: same input, same multiset.
pub fn tokenize(text: &str) -> Tokens {
    let lowered = text.to_lowercase();
    let words: Vec<&str> = lowered.split_whitespace().collect();
    let mut t = Tokens::default();
    for w in &words {
        t.unigrams.push((*w).to_string());
    }
    for pair in words.windows(2) {
        t.bigrams.push(format!("{}_{}", pair[0], pair[1]));
    }
    for w in &words {
        let chars: Vec<char> = std::iter::once('#')
            .chain(w.chars())
            .chain(std::iter::once('#'))
            .collect();
        for tri in chars.windows(3) {
            t.trigrams.push(tri.iter().collect());
        }
    }
    t
}

/// Per-class vocabulary caps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabCaps {
    pub unigrams: usize,
    pub bigrams: usize,
    pub trigrams: usize,
}

impl VocabCaps {
    /// Production-scale caps: 200k unigrams, 1M bigrams, 64k trigrams.
    pub const FULL: VocabCaps =
        VocabCaps { unigrams: 200_000, bigrams: 1_000_000, trigrams: 64_000 };

    pub fn validate(&self) -> Result<()> {
        if self.unigrams == 0 || self.bigrams == 0 || self.trigrams == 0 {
            return Err(Error::Config("vocabulary caps must be positive".into()));
        }
        Ok(())
    }

    fn for_class(&self, class: TokenClass) -> usize {
        match class {
            TokenClass::Unigram => self.unigrams,
            TokenClass::Bigram => self.bigrams,
            TokenClass::Trigram => self.trigrams,
        }
    }
}

/// Token → dense id map over the disjoint union of the three classes.
/// Ids are assigned per class in (frequency desc, token asc) order, classes
/// laid out unigrams first, then bigrams, then trigrams.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocabulary {
    maps: [HashMap<String, u32>; 3],
    /// id → (class, token), dense in [0, len).
    entries: Vec<(TokenClass, String)>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, class: TokenClass, token: &str) -> Option<u32> {
        self.maps[class_index(class)].get(token).copied()
    }

    pub fn entry(&self, id: u32) -> Option<(TokenClass, &str)> {
        self.entries.get(id as usize).map(|(c, t)| (*c, t.as_str()))
    }

    fn insert(&mut self, class: TokenClass, token: String) {
        let id = self.entries.len() as u32;
        self.maps[class_index(class)].insert(token.clone(), id);
        self.entries.push((class, token));
    }

    /// Write as "class<TAB>token<TAB>id" lines sorted by id.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (id, (class, token)) in self.entries.iter().enumerate() {
            writeln!(w, "{class}\t{token}\t{id}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Vocabulary> {
        let r = BufReader::new(File::open(path)?);
        let mut vocab = Vocabulary::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parse = |msg: String| Error::Parse { line: i + 1, msg };
            let mut parts = line.splitn(3, '\t');
            let class: TokenClass = parts
                .next()
                .ok_or_else(|| parse("missing class column".into()))?
                .parse()
                .map_err(|e| parse(format!("{e}")))?;
            let token = parts.next().ok_or_else(|| parse("missing token column".into()))?;
            let id: u32 = parts
                .next()
                .ok_or_else(|| parse("missing id column".into()))?
                .parse()
                .map_err(|e| parse(format!("bad id: {e}")))?;
            if id as usize != vocab.entries.len() {
                return Err(parse(format!(
                    "ids must be dense and sorted; expected {}, got {id}",
                    vocab.entries.len()
                )));
            }
            vocab.insert(class, token.to_string());
        }
        Ok(vocab)
    }
}

fn class_index(class: TokenClass) -> usize {
    match class {
        TokenClass::Unigram => 0,
        TokenClass::Bigram => 1,
        TokenClass::Trigram => 2,
    }
}

/// Count token frequencies over a corpus of strings and keep the most
/// frequent per class up to the caps. Ties break lexicographically, so the
/// result is deterministic for a fixed corpus.
pub fn build_vocab<'a, I>(corpus: I, caps: VocabCaps) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    caps.validate()?;
    let mut counts: [HashMap<String, u64>; 3] = Default::default();
    for text in corpus {
        let toks = tokenize(text);
        for class in TokenClass::ALL {
            let map = &mut counts[class_index(class)];
            for tok in toks.class(class) {
                *map.entry(tok.clone()).or_insert(0) += 1;
            }
        }
    }
    let mut vocab = Vocabulary::default();
    for class in TokenClass::ALL {
        let mut ranked: Vec<(String, u64)> = counts[class_index(class)].drain().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(caps.for_class(class));
        for (token, _) in ranked {
            vocab.insert(class, token);
        }
    }
    Ok(vocab)
}

/// One encoded text field: (token id, count) pairs sorted by ascending id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenBag {
    pub feature: &'static str,
    pub ids: Vec<(u32, u32)>,
}

impl TokenBag {
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Encode all 12 text fields of a product. Multi-valued fields are joined
/// before tokenizing, so bigrams can span value boundaries. OOV tokens are
/// dropped; the result always has exactly 12 bags.
pub fn encode_product_text(product: &Product, vocab: &Vocabulary) -> [TokenBag; TEXT_FIELD_COUNT] {
    let fields = product.text_fields();
    let mut out: [TokenBag; TEXT_FIELD_COUNT] = Default::default();
    for (i, text) in fields.iter().enumerate() {
        out[i] = encode_field(TEXT_FIELD_NAMES[i], text, vocab);
    }
    out
}

fn encode_field(feature: &'static str, text: &str, vocab: &Vocabulary) -> TokenBag {
    let toks = tokenize(text);
    let mut counts: HashMap<u32, u32> = HashMap::new();
    for class in TokenClass::ALL {
        for tok in toks.class(class) {
            if let Some(id) = vocab.id(class, tok) {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
    }
    let mut ids: Vec<(u32, u32)> = counts.into_iter().collect();
    ids.sort_unstable_by_key(|&(id, _)| id);
    TokenBag { feature, ids }
}
