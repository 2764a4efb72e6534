//! Check-ins, sequences, labeled pairs and the preprocessing steps that turn
//! raw check-ins into model-ready splits.

mod corpus;
pub mod io;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{preprocess, Corpus, PreprocessConfig, TokenizedSequence, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Platform {
    A,
    B,
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::A => "A",
            Platform::B => "B",
        })
    }
}

impl FromStr for Platform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Platform::A),
            "B" | "b" => Ok(Platform::B),
            other => Err(Error::Validation(format!("unknown platform {other:?}"))),
        }
    }
}

/// Where a check-in happened: raw coordinates or an already tokenized POI.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Location {
    Raw { lat: f64, lon: f64 },
    Poi(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckinPoint {
    pub user_id: String,
    pub platform: Platform,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub location: Location,
}

impl CheckinPoint {
    pub fn validate(&self) -> Result<()> {
        if let Location::Raw { lat, lon } = self.location {
            validate_coords(lat, lon)?;
        }
        Ok(())
    }

    pub fn coords(&self) -> Option<(f64, f64)> {
        match self.location {
            Location::Raw { lat, lon } => Some((lat, lon)),
            Location::Poi(_) => None,
        }
    }
}

fn validate_coords(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Validation(format!("coordinates ({lat}, {lon}) out of range")));
    }
    Ok(())
}

/// Chronologically ordered check-ins of one user on one platform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckinSequence {
    pub user_id: String,
    pub platform: Platform,
    pub points: Vec<CheckinPoint>,
}

impl CheckinSequence {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A labeled cross-platform pair; `seq_a`/`seq_b` index the platform A and B
/// sequence lists the pair was sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairSample {
    pub seq_a: usize,
    pub seq_b: usize,
    pub label: u8,
    pub identity_a: u32,
    pub identity_b: u32,
}

/// Equirectangular square grid used to discretize raw coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub cell_size_deg: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cell_size_deg: 0.01,
            origin_lat: 0.0,
            origin_lon: 0.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size_deg > 0.0 && self.cell_size_deg.is_finite()) {
            return Err(Error::Validation(format!(
                "cell size {} must be positive",
                self.cell_size_deg
            )));
        }
        validate_coords(self.origin_lat, self.origin_lon)
    }

    pub fn columns(&self) -> u64 {
        (360.0 / self.cell_size_deg).ceil() as u64
    }

    pub fn rows(&self) -> u64 {
        (180.0 / self.cell_size_deg).ceil() as u64
    }

    /// Centre of the cell with the given id, for cells north-east of the origin.
    pub fn cell_center(&self, id: u64) -> (f64, f64) {
        let (row, col) = (id / self.columns(), id % self.columns());
        (
            self.origin_lat + (row as f64 + 0.5) * self.cell_size_deg,
            self.origin_lon + (col as f64 + 0.5) * self.cell_size_deg,
        )
    }
}

/// Row-major id of the grid cell containing a raw point. Already tokenized
/// points keep their POI id.
pub fn grid_tokenize(point: &CheckinPoint, cfg: &GridConfig) -> Result<u64> {
    cfg.validate()?;
    match point.location {
        Location::Poi(id) => Ok(id),
        Location::Raw { lat, lon } => {
            validate_coords(lat, lon)?;
            let row = ((lat - cfg.origin_lat) / cfg.cell_size_deg).floor() as i64;
            let col = ((lon - cfg.origin_lon) / cfg.cell_size_deg).floor() as i64;
            let row = row.rem_euclid(cfg.rows() as i64) as u64;
            let col = col.rem_euclid(cfg.columns() as i64) as u64;
            Ok(row * cfg.columns() + col)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceMode {
    /// One sequence per user and platform.
    #[default]
    Whole,
    /// One sequence per user, platform and UTC day.
    Daily,
}

/// Groups check-ins into per-user sequences sorted by time and drops those
/// whose length falls outside `[min_len, max_len]`.
pub fn build_sequences(
    points: &[CheckinPoint],
    min_len: usize,
    max_len: usize,
    mode: SequenceMode,
) -> Vec<CheckinSequence> {
    let mut groups: BTreeMap<(Platform, &str, i64), Vec<&CheckinPoint>> = BTreeMap::new();
    for p in points {
        let day = match mode {
            SequenceMode::Whole => 0,
            SequenceMode::Daily => p.timestamp.div_euclid(86_400),
        };
        groups.entry((p.platform, p.user_id.as_str(), day)).or_default().push(p);
    }
    groups
        .into_iter()
        .filter_map(|((platform, user, _), mut pts)| {
            if pts.len() < min_len.max(1) || pts.len() > max_len {
                return None;
            }
            pts.sort_by_key(|p| p.timestamp);
            Some(CheckinSequence {
                user_id: user.to_string(),
                platform,
                points: pts.into_iter().cloned().collect(),
            })
        })
        .collect()
}

/// Ground-truth identity keys. Linked users share the key of their identity
/// map row; every unlinked user gets a key of their own.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Identities {
    by_a: BTreeMap<String, u32>,
    by_b: BTreeMap<String, u32>,
    next: u32,
}

impl Identities {
    pub fn from_links(links: &[(String, String)]) -> Result<Self> {
        let mut ids = Self::default();
        for (a, b) in links {
            if ids.by_a.contains_key(a) || ids.by_b.contains_key(b) {
                return Err(Error::Validation(format!(
                    "identity map links {a} or {b} more than once"
                )));
            }
            ids.by_a.insert(a.clone(), ids.next);
            ids.by_b.insert(b.clone(), ids.next);
            ids.next += 1;
        }
        Ok(ids)
    }

    /// Key for `user` on `platform`, allocating a fresh one for unlinked users.
    pub fn key(&mut self, platform: Platform, user: &str) -> u32 {
        let map = match platform {
            Platform::A => &mut self.by_a,
            Platform::B => &mut self.by_b,
        };
        if let Some(&k) = map.get(user) {
            return k;
        }
        let k = self.next;
        map.insert(user.to_string(), k);
        self.next += 1;
        k
    }

    pub fn lookup(&self, platform: Platform, user: &str) -> Option<u32> {
        match platform {
            Platform::A => self.by_a.get(user).copied(),
            Platform::B => self.by_b.get(user).copied(),
        }
    }
}

fn keys_of(seqs: &[CheckinSequence], ids: &mut Identities) -> Vec<u32> {
    seqs.iter().map(|s| ids.key(s.platform, &s.user_id)).collect()
}

/// Every same-identity cross-platform pair becomes a positive; each positive
/// is followed by `neg_ratio` negatives that share its platform A sequence
/// and draw a platform B sequence of a different identity, uniformly and
/// without replacement.
pub fn sample_pairs(
    seqs_a: &[CheckinSequence],
    seqs_b: &[CheckinSequence],
    identities: &mut Identities,
    neg_ratio: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    if neg_ratio == 0 {
        return Err(Error::Validation("negative ratio must be positive".into()));
    }
    let keys_a = keys_of(seqs_a, identities);
    let keys_b = keys_of(seqs_b, identities);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut out = Vec::new();
    for (i, &ka) in keys_a.iter().enumerate() {
        for (j, &kb) in keys_b.iter().enumerate() {
            if ka != kb {
                continue;
            }
            out.push(PairSample {
                seq_a: i,
                seq_b: j,
                label: 1,
                identity_a: ka,
                identity_b: kb,
            });
            let candidates: Vec<usize> = keys_b
                .iter()
                .enumerate()
                .filter(|&(jj, &k)| k != ka && !used.contains(&(i, jj)))
                .map(|(jj, _)| jj)
                .collect();
            if candidates.len() < neg_ratio {
                return Err(Error::Exhausted {
                    requested: neg_ratio,
                    available: candidates.len(),
                });
            }
            for &jj in candidates.choose_multiple(&mut rng, neg_ratio) {
                used.insert((i, jj));
                out.push(PairSample {
                    seq_a: i,
                    seq_b: jj,
                    label: 0,
                    identity_a: ka,
                    identity_b: keys_b[jj],
                });
            }
        }
    }
    Ok(out)
}

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    Ok(())
}

/// Shuffles identity keys and cuts them into train/val/test groups of
/// `round(f · n)` keys (the test group takes the remainder).
pub fn split_identities(keys: &[u32], fractions: [f64; 3], seed: u64) -> Result<[Vec<u32>; 3]> {
    check_fractions(fractions)?;
    let mut keys: Vec<u32> = keys.to_vec();
    keys.sort_unstable();
    keys.dedup();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = keys.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = keys.split_off(n_train + n_val);
    let val = keys.split_off(n_train);
    Ok([keys, val, test])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<PairSample>,
    pub val: Vec<PairSample>,
    pub test: Vec<PairSample>,
}

/// Partitions pairs by the identity of their platform A sequence, so that
/// every anchor identity lands in exactly one split. Pairs keep their order.
pub fn split_dataset(pairs: &[PairSample], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let anchors: Vec<u32> = pairs.iter().map(|p| p.identity_a).collect();
    let groups = split_identities(&anchors, fractions, seed)?;
    let group_of: HashMap<u32, usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, ks)| ks.iter().map(move |&k| (k, g)))
        .collect();
    let mut splits = Splits::default();
    for p in pairs {
        match group_of[&p.identity_a] {
            0 => splits.train.push(*p),
            1 => splits.val.push(*p),
            _ => splits.test.push(*p),
        }
    }
    Ok(splits)
}
