//! Run configuration: desk-scale defaults, a full-scale preset, and a
//! `key = value` file format with `#` comments.
//!
//! Desk defaults keep a full training run in CPU minutes. The full preset
//! exists to assert parameter counts and to document production dimensions;
//! nothing in the test suite trains at that scale.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Engagement, Surface};
use crate::error::{Error, Result};
use crate::text::VocabCaps;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    // Encoder dimensions.
    pub image_dim: usize,
    pub hash_dim: usize,
    pub proj_dim: usize,
    pub out_dim: usize,
    pub hash_rows: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    // MLP-Concat-MLP baseline dimensions.
    pub mlpcat_hidden: usize,
    pub mlpcat_latent: usize,
    // Logit temperature: learnable scalar multiplying cosine logits,
    // clamped to [1, 100]. Disable to train on raw cosine logits.
    pub learnable_temperature: bool,
    pub temperature_init: f32,
    // Normalize the random-negative softmax over negatives only, leaving
    // the positive outside its own denominator.
    pub negatives_only_denominator: bool,
    // Vocabulary caps.
    pub vocab_unigrams: usize,
    pub vocab_bigrams: usize,
    pub vocab_trigrams: usize,
    // Training.
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub surfaces: Vec<Surface>,
    pub engagements: Vec<Engagement>,
    pub eval_every: usize,
    pub eval_pairs: usize,
    pub distractors: usize,
    pub holdout_fraction: f32,
    pub k: usize,
    pub sketch_depth: usize,
    pub sketch_width: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config::desk()
    }
}

impl Config {
    /// CI-friendly scale: small dims, minutes-fast end to end.
    pub fn desk() -> Self {
        Config {
            image_dim: 64,
            hash_dim: 64,
            proj_dim: 128,
            out_dim: 64,
            hash_rows: 10_000,
            heads: 8,
            layers: 1,
            ffn_hidden: 1024,
            head_hidden: 256,
            mlpcat_hidden: 128,
            mlpcat_latent: 64,
            learnable_temperature: true,
            temperature_init: 10.0,
            negatives_only_denominator: false,
            vocab_unigrams: VocabCaps::FULL.unigrams,
            vocab_bigrams: VocabCaps::FULL.bigrams,
            vocab_trigrams: VocabCaps::FULL.trigrams,
            batch_size: 256,
            steps: 600,
            lr: 1e-3,
            warmup_steps: 100,
            surfaces: Surface::ALL.to_vec(),
            engagements: Engagement::ALL.to_vec(),
            eval_every: 100,
            eval_pairs: 2000,
            distractors: 10_000,
            holdout_fraction: 0.05,
            k: 10,
            sketch_depth: 4,
            sketch_width: 16_384,
            seed: 42,
        }
    }

    /// Production-scale dimensions. Feed-forward and head hidden sizes are
    /// not stated in print; 2048 (the conventional 4× the 512 model width)
    /// reproduces the published parameter counts exactly.
    pub fn paper() -> Self {
        Config {
            image_dim: 256,
            hash_dim: 256,
            proj_dim: 512,
            out_dim: 256,
            hash_rows: 100_000,
            heads: 8,
            layers: 1,
            ffn_hidden: 2048,
            head_hidden: 2048,
            mlpcat_hidden: 256,
            mlpcat_latent: 256,
            // Production behavior: raw cosine logits, and the random-negative
            // softmax normalized over negatives only, exactly as printed.
            learnable_temperature: false,
            eq3_literal: true,
            ..Config::desk()
        }
    }

    pub fn vocab_caps(&self) -> VocabCaps {
        VocabCaps {
            unigrams: self.vocab_unigrams,
            bigrams: self.vocab_bigrams,
            trigrams: self.vocab_trigrams,
        }
    }

    /// Task list in deterministic order: surfaces outer, engagements inner.
    pub fn tasks(&self) -> Vec<(Surface, Engagement)> {
        let mut out = Vec::new();
        for &s in &self.surfaces {
            for &e in &self.engagements {
                out.push((s, e));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 15] = [
            ("distractors", self.distractors),
            ("image_dim", self.image_dim),
            ("hash_dim", self.hash_dim),
            ("proj_dim", self.proj_dim),
            ("out_dim", self.out_dim),
            ("hash_rows", self.hash_rows),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_hidden", self.ffn_hidden),
            ("head_hidden", self.head_hidden),
            ("mlpcat_hidden", self.mlpcat_hidden),
            ("mlpcat_latent", self.mlpcat_latent),
            ("batch_size", self.batch_size),
            ("sketch_depth", self.sketch_depth),
            ("sketch_width", self.sketch_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.proj_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "proj_dim {} must be divisible by heads {}",
                self.proj_dim, self.heads
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.temperature_init >= 1.0 && self.temperature_init <= 100.0) {
            return Err(Error::Config(format!(
                "temperature_init {} outside [1, 100]",
                self.temperature_init
            )));
        }
        if self.surfaces.is_empty() || self.engagements.is_empty() {
            return Err(Error::Config("at least one surface and engagement required".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        VocabCaps {
            unigrams: self.vocab_unigrams,
            bigrams: self.vocab_bigrams,
            trigrams: self.vocab_trigrams,
        }
        .validate()?;
        Ok(())
    }

    /// Per-task positive quotas: batch_size/K each, remainder spread over
    /// the first tasks, so quotas always sum to batch_size.
    pub fn quotas(&self) -> Vec<usize> {
        let k = self.tasks().len();
        let base = self.batch_size / k;
        let rem = self.batch_size % k;
        (0..k).map(|i| base + usize::from(i < rem)).collect()
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let content = std::fs::read_to_string(path)?;
        Self::from_str_content(&content)
    }

    pub fn from_str_content(content: &str) -> Result<Config> {
        let mut cfg = Config::desk();
        for (i, raw) in content.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| Error::Parse { line: line_no, msg: format!("{e}") })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn int(v: &str) -> Result<usize> {
            v.parse().map_err(|e| Error::Config(format!("bad integer {v:?}: {e}")))
        }
        fn float(v: &str) -> Result<f64> {
            v.parse().map_err(|e| Error::Config(format!("bad float {v:?}: {e}")))
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("bad bool {v:?}, want true|false"))),
            }
        }
        match key {
            "preset" => {
                *self = match value {
                    "desk" => Config::desk(),
                    "paper" => Config::paper(),
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown preset {value:?}, want desk|paper"
                        )))
                    }
                };
            }
            "image_dim" => self.image_dim = int(value)?,
            "hash_dim" => self.hash_dim = int(value)?,
            "proj_dim" => self.proj_dim = int(value)?,
            "out_dim" => self.out_dim = int(value)?,
            "hash_rows" => self.hash_rows = int(value)?,
            "heads" => self.heads = int(value)?,
            "layers" => self.layers = int(value)?,
            "ffn_hidden" => self.ffn_hidden = int(value)?,
            "head_hidden" => self.head_hidden = int(value)?,
            "mlpcat_hidden" => self.mlpcat_hidden = int(value)?,
            "mlpcat_latent" => self.mlpcat_latent = int(value)?,
            "learnable_temperature" => self.learnable_temperature = boolean(value)?,
            "temperature_init" => self.temperature_init = float(value)? as f32,
            "eq3_literal" => self.eq3_literal = boolean(value)?,
            "vocab_unigrams" => self.vocab_unigrams = int(value)?,
            "vocab_bigrams" => self.vocab_bigrams = int(value)?,
            "vocab_trigrams" => self.vocab_trigrams = int(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "steps" => self.steps = int(value)?,
            "lr" => self.lr = float(value)?,
            "warmup_steps" => self.warmup_steps = int(value)?,
            "surfaces" => {
                self.surfaces = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<Vec<Surface>>>()?;
            }
            "engagements" => {
                self.engagements = value
                    .split(',')
                    .map(|s| s.trim().parse())
                    .collect::<Result<Vec<Engagement>>>()?;
            }
            "eval_every" => self.eval_every = int(value)?,
            "eval_pairs" => self.eval_pairs = int(value)?,
            "distractors" => self.distractors = int(value)?,
            "holdout_fraction" => self.holdout_fraction = float(value)? as f32,
            "k" => self.k = int(value)?,
            "sketch_depth" => self.sketch_depth = int(value)?,
            "sketch_width" => self.sketch_width = int(value)?,
            "seed" => {
                self.seed =
                    value.parse().map_err(|e| Error::Config(format!("bad seed {value:?}: {e}")))?
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Effective config as a parseable file, for run records.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_dim", self.image_dim.to_string());
        kv("hash_dim", self.hash_dim.to_string());
        kv("proj_dim", self.proj_dim.to_string());
        kv("out_dim", self.out_dim.to_string());
        kv("hash_rows", self.hash_rows.to_string());
        kv("heads", self.heads.to_string());
        kv("layers", self.layers.to_string());
        kv("ffn_hidden", self.ffn_hidden.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("mlpcat_hidden", self.mlpcat_hidden.to_string());
        kv("mlpcat_latent", self.mlpcat_latent.to_string());
        kv("learnable_temperature", self.learnable_temperature.to_string());
        kv("temperature_init", self.temperature_init.to_string());
        kv("eq3_literal", self.eq3_literal.to_string());
        kv("vocab_unigrams", self.vocab_unigrams.to_string());
        kv("vocab_bigrams", self.vocab_bigrams.to_string());
        kv("vocab_trigrams", self.vocab_trigrams.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("steps", self.steps.to_string());
        kv("lr", self.lr.to_string());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv(
            "surfaces",
            self.surfaces.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(","),
        );
        kv(
            "engagements",
            self.engagements.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(","),
        );
        kv("eval_every", self.eval_every.to_string());
        kv("eval_pairs", self.eval_pairs.to_string());
        kv("distractors", self.distractors.to_string());
        kv("holdout_fraction", self.holdout_fraction.to_string());
        kv("k", self.k.to_string());
        kv("sketch_depth", self.sketch_depth.to_string());
        kv("sketch_width", self.sketch_width.to_string());
        kv("seed", self.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid() {
        Config::desk().validate().unwrap();
        Config::paper().validate().unwrap();
    }

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = Config::from_str_content(
            "# a comment\nbatch_size = 64\n\nlr = 0.01  # trailing comment\nsurfaces = closeup\n",
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.surfaces, vec![Surface::Closeup]);
        assert_eq!(cfg.image_dim, Config::desk().image_dim);
    }

    #[test]
    fn unknown_key_reports_line_number() {
        let err = Config::from_str_content("batch_size = 64\nbogus = 1\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus"));
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn bad_value_reports_line_number() {
        let err = Config::from_str_content("\n\nbatch_size = lots\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_equals_is_an_error() {
        assert!(Config::from_str_content("batch_size 64\n").is_err());
    }

    #[test]
    fn preset_then_override() {
        let cfg = Config::from_str_content("preset = paper\nlayers = 3\n").unwrap();
        assert_eq!(cfg.proj_dim, 512);
        assert_eq!(cfg.layers, 3);
    }

    #[test]
    fn quotas_sum_to_batch() {
        let mut cfg = Config::desk();
        cfg.batch_size = 256;
        assert_eq!(cfg.tasks().len(), 8);
        assert_eq!(cfg.quotas(), vec![32; 8]);
        cfg.batch_size = 10;
        cfg.surfaces = vec![Surface::Closeup];
        cfg.engagements = vec![Engagement::Click, Engagement::Save, Engagement::Checkout];
        let q = cfg.quotas();
        assert_eq!(q.iter().sum::<usize>(), 10);
        assert_eq!(q, vec![4, 3, 3]);
    }

    #[test]
    fn validation_rejects_bad_head_split() {
        let mut cfg = Config::desk();
        cfg.proj_dim = 130;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trip_through_file_string() {
        let mut cfg = Config::desk();
        cfg.batch_size = 32;
        cfg.eq3_literal = true;
        let parsed = Config::from_str_content(&cfg.to_file_string()).unwrap();
        assert_eq!(cfg, parsed);
    }
}
