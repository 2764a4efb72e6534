use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Datelike};
use serde::{Deserialize, Serialize};

use super::{
    build_sequences, grid_tokenize, sample_pairs, split_identities, CheckinPoint, CheckinSequence, GridConfig,
    Identities, PairSample, Platform, SequenceMode, Splits,
};
use crate::config::{parse, parse_lines};
use crate::error::{Error, Result};

/// Dense token ids for the grid cells observed in a corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    cells: Vec<u64>,
}

impl Vocabulary {
    pub fn from_cells(cells: impl IntoIterator<Item = u64>) -> Self {
        let set: BTreeSet<u64> = cells.into_iter().collect();
        Self {
            cells: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn token(&self, cell: u64) -> Result<usize> {
        self.cells
            .binary_search(&cell)
            .map_err(|_| Error::Validation(format!("cell {cell} is not in the vocabulary")))
    }
}

/// Model-ready view of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedSequence {
    pub pois: Vec<usize>,
    /// Day of month minus one, in `0..31`.
    pub days: Vec<usize>,
    /// Hours since the corpus' earliest check-in.
    pub hours: Vec<f64>,
    pub coords: Option<Vec<(f64, f64)>>,
}

impl TokenizedSequence {
    pub fn new(seq: &CheckinSequence, vocab: &Vocabulary, grid: &GridConfig, t_min: i64) -> Result<Self> {
        let mut out = Self {
            pois: Vec::with_capacity(seq.len()),
            days: Vec::with_capacity(seq.len()),
            hours: Vec::with_capacity(seq.len()),
            coords: Some(Vec::with_capacity(seq.len())),
        };
        for p in &seq.points {
            out.pois.push(vocab.token(grid_tokenize(p, grid)?)?);
            out.days.push(day_of_month(p.timestamp)? - 1);
            out.hours.push((p.timestamp - t_min) as f64 / 3600.0);
            match (p.coords(), out.coords.as_mut()) {
                (Some(c), Some(cs)) => cs.push(c),
                _ => out.coords = None,
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }
}

pub fn day_of_month(timestamp: i64) -> Result<usize> {
    DateTime::from_timestamp(timestamp, 0)
        .map(|d| d.day() as usize)
        .ok_or_else(|| Error::Validation(format!("timestamp {timestamp} is out of range")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub grid: GridConfig,
    pub min_len: usize,
    pub max_len_a: usize,
    pub max_len_b: usize,
    pub mode_a: SequenceMode,
    pub mode_b: SequenceMode,
    pub neg_ratio: usize,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            min_len: 3,
            max_len_a: 400,
            max_len_b: 200,
            mode_a: SequenceMode::Whole,
            mode_b: SequenceMode::Whole,
            neg_ratio: 6,
            fractions: [0.7, 0.1, 0.2],
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let mode = |v: &str| match v {
            "whole" => Ok(SequenceMode::Whole),
            "daily" => Ok(SequenceMode::Daily),
            _ => Err(Error::Validation(format!("{key} = {v:?}: expected whole or daily"))),
        };
        match key.trim() {
            "cell_size_deg" => self.grid.cell_size_deg = parse(key, v)?,
            "origin_lat" => self.grid.origin_lat = parse(key, v)?,
            "origin_lon" => self.grid.origin_lon = parse(key, v)?,
            "min_len" => self.min_len = parse(key, v)?,
            "max_len_a" => self.max_len_a = parse(key, v)?,
            "max_len_b" => self.max_len_b = parse(key, v)?,
            "mode_a" => self.mode_a = mode(v)?,
            "mode_b" => self.mode_b = mode(v)?,
            "neg_ratio" => self.neg_ratio = parse(key, v)?,
            "fractions" => {
                let parts = v
                    .split(',')
                    .map(|x| parse(key, x.trim()))
                    .collect::<Result<Vec<f64>>>()?;
                self.fractions = parts
                    .try_into()
                    .map_err(|_| Error::Validation(format!("{key} = {v:?}: expected three comma-separated values")))?;
            }
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Validation(format!("unknown preprocessing key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_lines(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }
}

/// Sequences of both platforms, their tokenization and the labeled splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub grid: GridConfig,
    pub vocab: Vocabulary,
    pub t_min: i64,
    pub seqs_a: Vec<CheckinSequence>,
    pub seqs_b: Vec<CheckinSequence>,
    pub splits: Splits,
    #[serde(skip)]
    pub tokens_a: Vec<TokenizedSequence>,
    #[serde(skip)]
    pub tokens_b: Vec<TokenizedSequence>,
}

impl Corpus {
    pub fn new(
        grid: GridConfig,
        seqs_a: Vec<CheckinSequence>,
        seqs_b: Vec<CheckinSequence>,
        splits: Splits,
    ) -> Result<Self> {
        let all = || seqs_a.iter().chain(&seqs_b).flat_map(|s| &s.points);
        let cells = all().map(|p| grid_tokenize(p, &grid)).collect::<Result<Vec<_>>>()?;
        let t_min = all()
            .map(|p| p.timestamp)
            .min()
            .ok_or_else(|| Error::Validation("no sequences survived preprocessing".into()))?;
        let mut corpus = Self {
            grid,
            vocab: Vocabulary::from_cells(cells),
            t_min,
            seqs_a,
            seqs_b,
            splits,
            tokens_a: Vec::new(),
            tokens_b: Vec::new(),
        };
        corpus.tokenize()?;
        Ok(corpus)
    }

    fn tokenize(&mut self) -> Result<()> {
        let tok = |seqs: &[CheckinSequence]| {
            seqs.iter()
                .map(|s| TokenizedSequence::new(s, &self.vocab, &self.grid, self.t_min))
                .collect::<Result<Vec<_>>>()
        };
        self.tokens_a = tok(&self.seqs_a)?;
        self.tokens_b = tok(&self.seqs_b)?;
        Ok(())
    }

    pub fn pair(&self, p: &PairSample) -> (&TokenizedSequence, &TokenizedSequence) {
        (&self.tokens_a[p.seq_a], &self.tokens_b[p.seq_b])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut corpus: Corpus = serde_json::from_slice(&fs::read(path)?)?;
        corpus.tokenize()?;
        Ok(corpus)
    }
}

/// Turns raw check-ins and the identity map into a tokenized corpus with
/// train/val/test pairs. Identities are split first and pairs are sampled
/// inside each split, so no identity appears in two splits on either side
/// of a pair.
pub fn preprocess(points: &[CheckinPoint], links: &[(String, String)], cfg: &PreprocessConfig) -> Result<Corpus> {
    cfg.grid.validate()?;
    for p in points {
        p.validate()?;
    }
    let of = |platform: Platform| -> Vec<CheckinPoint> {
        points.iter().filter(|p| p.platform == platform).cloned().collect()
    };
    let seqs_a = build_sequences(&of(Platform::A), cfg.min_len, cfg.max_len_a, cfg.mode_a);
    let seqs_b = build_sequences(&of(Platform::B), cfg.min_len, cfg.max_len_b, cfg.mode_b);

    let mut ids = Identities::from_links(links)?;
    let keys_a: Vec<u32> = seqs_a.iter().map(|s| ids.key(s.platform, &s.user_id)).collect();
    let keys_b: Vec<u32> = seqs_b.iter().map(|s| ids.key(s.platform, &s.user_id)).collect();
    let all_keys: Vec<u32> = keys_a.iter().chain(&keys_b).copied().collect();
    let groups = split_identities(&all_keys, cfg.fractions, cfg.seed)?;

    let mut parts: [Vec<PairSample>; 3] = Default::default();
    for (g, group) in groups.iter().enumerate() {
        let members: HashSet<u32> = group.iter().copied().collect();
        let idx_a: Vec<usize> = (0..seqs_a.len()).filter(|&i| members.contains(&keys_a[i])).collect();
        let idx_b: Vec<usize> = (0..seqs_b.len()).filter(|&i| members.contains(&keys_b[i])).collect();
        let sub_a: Vec<CheckinSequence> = idx_a.iter().map(|&i| seqs_a[i].clone()).collect();
        let sub_b: Vec<CheckinSequence> = idx_b.iter().map(|&i| seqs_b[i].clone()).collect();
        let pairs = sample_pairs(
            &sub_a,
            &sub_b,
            &mut ids,
            cfg.neg_ratio,
            cfg.seed.wrapping_add(g as u64 + 1),
        )?;
        parts[g] = pairs
            .into_iter()
            .map(|p| PairSample {
                seq_a: idx_a[p.seq_a],
                seq_b: idx_b[p.seq_b],
                ..p
            })
            .collect();
    }
    let [train, val, test] = parts;
    Corpus::new(cfg.grid, seqs_a, seqs_b, Splits { train, val, test })
}
