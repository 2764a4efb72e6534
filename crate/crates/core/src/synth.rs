//! Synthetic paired check-in data: linked users share jittered copies of
//! each other's visits on top of home-region wandering and uniform noise.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse, parse_lines};
use crate::data::io::{write_checkins_csv, write_identity_map};
use crate::data::{CheckinPoint, GridConfig, Location, Platform};
use crate::error::{Error, Result};
use crate::model::mix_seed;

/// 2024-01-01T00:00:00Z.
pub const EPOCH_START: i64 = 1_704_067_200;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    /// Inclusive length range of platform A sequences.
    pub len_a: (usize, usize),
    pub len_b: (usize, usize),
    /// Share of B's points copied from A (same cell, jittered time).
    pub cooccur_fraction: f64,
    /// Share of each platform's points drawn uniformly over grid and horizon.
    pub noise_rate: f64,
    /// Copied timestamps move by at most this many seconds.
    pub jitter_secs: i64,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub grid: GridConfig,
    /// Half-width in cells of the square a user wanders in.
    pub home_radius: u32,
    pub horizon_days: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            len_a: (30, 60),
            len_b: (30, 60),
            cooccur_fraction: 0.6,
            noise_rate: 0.2,
            jitter_secs: 600,
            grid_rows: 20,
            grid_cols: 20,
            grid: GridConfig {
                cell_size_deg: 0.01,
                origin_lat: 40.0,
                origin_lon: 116.0,
            },
            home_radius: 3,
            horizon_days: 30,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.n_users < 2 {
            return bad(format!("n_users = {} must be at least 2", self.n_users));
        }
        for (name, f) in [
            ("cooccur_fraction", self.cooccur_fraction),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} = {f} outside [0, 1]"));
            }
        }
        for (name, (lo, hi)) in [("len_a", self.len_a), ("len_b", self.len_b)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range {lo}..={hi} is empty or starts at 0"));
            }
        }
        if self.grid_rows == 0 || self.grid_cols == 0 || self.horizon_days == 0 {
            return bad("grid and horizon must be non-empty".into());
        }
        if self.jitter_secs < 0 {
            return bad(format!("jitter {} must be non-negative", self.jitter_secs));
        }
        self.grid.validate()?;
        let top = self.grid.origin_lat + self.grid_rows as f64 * self.grid.cell_size_deg;
        let right = self.grid.origin_lon + self.grid_cols as f64 * self.grid.cell_size_deg;
        if !(-90.0..=90.0).contains(&self.grid.origin_lat) || top > 90.0 || right > 180.0 {
            return bad("grid extends beyond valid coordinates".into());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "n_users" => self.n_users = parse(key, v)?,
            "len_a_min" => self.len_a.0 = parse(key, v)?,
            "len_a_max" => self.len_a.1 = parse(key, v)?,
            "len_b_min" => self.len_b.0 = parse(key, v)?,
            "len_b_max" => self.len_b.1 = parse(key, v)?,
            "cooccur_fraction" => self.cooccur_fraction = parse(key, v)?,
            "noise_rate" => self.noise_rate = parse(key, v)?,
            "jitter_secs" => self.jitter_secs = parse(key, v)?,
            "grid_rows" => self.grid_rows = parse(key, v)?,
            "grid_cols" => self.grid_cols = parse(key, v)?,
            "cell_size_deg" => self.grid.cell_size_deg = parse(key, v)?,
            "origin_lat" => self.grid.origin_lat = parse(key, v)?,
            "origin_lon" => self.grid.origin_lon = parse(key, v)?,
            "home_radius" => self.home_radius = parse(key, v)?,
            "horizon_days" => self.horizon_days = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Validation(format!("unknown generator key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_lines(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    fn horizon_secs(&self) -> i64 {
        self.horizon_days as i64 * 86_400
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub points: Vec<CheckinPoint>,
    /// `(user on A, user on B)` for every synthetic person.
    pub links: Vec<(String, String)>,
}

impl SynthData {
    pub fn platform(&self, p: Platform) -> impl Iterator<Item = &CheckinPoint> {
        self.points.iter().filter(move |c| c.platform == p)
    }
}

/// Grid cell `(row, col)` with a time offset in seconds from [`EPOCH_START`].
type Visit = (u32, u32, i64);

struct UserGen<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    home: (u32, u32),
}

impl UserGen<'_> {
    fn uniform_cell(&mut self) -> (u32, u32) {
        (
            self.rng.random_range(0..self.cfg.grid_rows),
            self.rng.random_range(0..self.cfg.grid_cols),
        )
    }

    fn time(&mut self) -> i64 {
        self.rng.random_range(0..self.cfg.horizon_secs())
    }

    /// Lazy random walk confined to the home square and the grid.
    fn walk(&mut self, n: usize) -> Vec<(u32, u32)> {
        let r = self.cfg.home_radius as i64;
        let clamp = |v: i64, centre: u32, size: u32| {
            v.clamp((centre as i64 - r).max(0), (centre as i64 + r).min(size as i64 - 1))
        };
        let (mut row, mut col) = (self.home.0 as i64, self.home.1 as i64);
        (0..n)
            .map(|_| {
                row = clamp(row + self.rng.random_range(-1..=1), self.home.0, self.cfg.grid_rows);
                col = clamp(col + self.rng.random_range(-1..=1), self.home.1, self.cfg.grid_cols);
                (row as u32, col as u32)
            })
            .collect()
    }

    /// `n_walk` home-region visits at sorted random times plus `n_noise`
    /// uniform visits.
    fn visits(&mut self, n_walk: usize, n_noise: usize) -> Vec<Visit> {
        let mut times: Vec<i64> = (0..n_walk).map(|_| self.time()).collect();
        times.sort_unstable();
        let mut out: Vec<Visit> = self
            .walk(n_walk)
            .into_iter()
            .zip(times)
            .map(|((r, c), t)| (r, c, t))
            .collect();
        for _ in 0..n_noise {
            let (r, c) = self.uniform_cell();
            let t = self.time();
            out.push((r, c, t));
        }
        out
    }

    fn length(&mut self, (lo, hi): (usize, usize)) -> usize {
        self.rng.random_range(lo..=hi)
    }

    fn generate(&mut self) -> (Vec<Visit>, Vec<Visit>) {
        let cfg = self.cfg;
        let len_a = self.length(cfg.len_a);
        let noise_a = (cfg.noise_rate * len_a as f64).floor() as usize;
        let mut a = self.visits(len_a - noise_a, noise_a);
        a.sort_by_key(|v| v.2);

        let len_b = self.length(cfg.len_b);
        let n_copy = ((cfg.cooccur_fraction * len_b as f64).floor() as usize).min(len_a);
        let noise_b = ((cfg.noise_rate * len_b as f64).floor() as usize).min(len_b - n_copy);
        let mut b = self.visits(len_b - n_copy - noise_b, noise_b);
        let mut picked = index::sample(&mut self.rng, len_a, n_copy).into_vec();
        picked.sort_unstable();
        for i in picked {
            let (r, c, t) = a[i];
            let dt = self.rng.random_range(-cfg.jitter_secs..=cfg.jitter_secs);
            b.push((r, c, (t + dt).clamp(0, cfg.horizon_secs() - 1)));
        }
        b.sort_by_key(|v| v.2);
        (a, b)
    }
}

fn to_point(cfg: &SynthConfig, user: &str, platform: Platform, (row, col, t): Visit) -> CheckinPoint {
    let g = &cfg.grid;
    CheckinPoint {
        user_id: user.to_string(),
        platform,
        timestamp: EPOCH_START + t,
        location: Location::Raw {
            lat: g.origin_lat + (row as f64 + 0.5) * g.cell_size_deg,
            lon: g.origin_lon + (col as f64 + 0.5) * g.cell_size_deg,
        },
    }
}

/// Each user draws from its own stream, so one user's data does not depend on
/// how many users precede it.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut points = Vec::new();
    let mut links = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, u as u64]));
        let home = (rng.random_range(0..cfg.grid_rows), rng.random_range(0..cfg.grid_cols));
        let (a, b) = UserGen { cfg, rng, home }.generate();
        let (ua, ub) = (format!("a_{u:04}"), format!("b_{u:04}"));
        points.extend(a.into_iter().map(|v| to_point(cfg, &ua, Platform::A, v)));
        points.extend(b.into_iter().map(|v| to_point(cfg, &ub, Platform::B, v)));
        links.push((ua, ub));
    }
    Ok(SynthData { points, links })
}

pub struct SynthFiles {
    pub checkins_a: PathBuf,
    pub checkins_b: PathBuf,
    pub identity_map: PathBuf,
}

pub fn write(data: &SynthData, dir: &Path) -> Result<SynthFiles> {
    fs::create_dir_all(dir)?;
    let files = SynthFiles {
        checkins_a: dir.join("checkins_a.csv"),
        checkins_b: dir.join("checkins_b.csv"),
        identity_map: dir.join("identity_map.csv"),
    };
    for (path, platform) in [(&files.checkins_a, Platform::A), (&files.checkins_b, Platform::B)] {
        let pts: Vec<CheckinPoint> = data.platform(platform).cloned().collect();
        write_checkins_csv(BufWriter::new(File::create(path)?), &pts)?;
    }
    write_identity_map(BufWriter::new(File::create(&files.identity_map)?), &data.links)?;
    Ok(files)
}
