//! Elo ratings from two-alternative forced-choice comparisons.
//!
//! Games are grouped into tournaments (one comparison each, or all of a
//! participant's comparisons). Within a tournament every expected score uses
//! the ratings at its start and the summed updates are applied at its end.
//! Tournament order is reshuffled on every Monte Carlo iteration and the
//! final ratings are summarized by median and quartiles.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_K_FACTOR: f64 = 32.0;
pub const DEFAULT_INITIAL_RATING: f64 = 1000.0;
pub const DEFAULT_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub participant: String,
    pub image: String,
    pub method_a: String,
    pub method_b: String,
    pub winner: Winner,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComparisonLog {
    pub rows: Vec<Comparison>,
}

impl ComparisonLog {
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<std::result::Result<Vec<Comparison>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Method names in order of first appearance.
    pub fn methods(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for r in &self.rows {
            for m in [&r.method_a, &r.method_b] {
                if !seen.contains(m) {
                    seen.push(m.clone());
                }
            }
        }
        seen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TournamentMode {
    PerComparison,
    PerParticipant,
}

impl FromStr for TournamentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_comparison" => Ok(Self::PerComparison),
            "per_participant" => Ok(Self::PerParticipant),
            other => Err(invalid(format!(
                "unknown tournament mode {other:?}; expected per_comparison or per_participant"
            ))),
        }
    }
}

impl fmt::Display for TournamentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerComparison => "per_comparison",
            Self::PerParticipant => "per_participant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloConfig {
    pub mode: TournamentMode,
    pub k_factor: f64,
    pub initial_rating: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for EloConfig {
    fn default() -> Self {
        Self {
            mode: TournamentMode::PerComparison,
            k_factor: DEFAULT_K_FACTOR,
            initial_rating: DEFAULT_INITIAL_RATING,
            iterations: DEFAULT_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRating {
    pub method: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Most extreme ratings within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub min: f64,
    pub max: f64,
    pub games: usize,
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloReport {
    pub config: EloConfig,
    pub games: usize,
    pub tournaments: usize,
    /// Sorted by median rating, best first.
    pub ratings: Vec<MethodRating>,
}

impl EloReport {
    pub fn rating(&self, method: &str) -> Option<&MethodRating> {
        self.ratings.iter().find(|r| r.method == method)
    }

    pub fn uses_default_constants(&self) -> bool {
        self.config.k_factor == DEFAULT_K_FACTOR && self.config.initial_rating == DEFAULT_INITIAL_RATING
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.ratings {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl fmt::Display for EloReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "mode {}  K {}  initial {}  iterations {}  seed {}  games {}  tournaments {}",
            c.mode, c.k_factor, c.initial_rating, c.iterations, c.seed, self.games, self.tournaments
        )?;
        if self.uses_default_constants() {
            writeln!(f, "note: K-factor and initial rating are chosen defaults")?;
        }
        writeln!(f, "{:<16} {:>9} {:>9} {:>9} {:>6} {:>6}", "method", "median", "q1", "q3", "games", "wins")?;
        for r in &self.ratings {
            writeln!(
                f,
                "{:<16} {:>9.2} {:>9.2} {:>9.2} {:>6} {:>6}",
                r.method, r.median, r.q1, r.q3, r.games, r.wins
            )?;
        }
        Ok(())
    }
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

type Game = (usize, usize, bool);

fn run_iteration(tournaments: &[Vec<Game>], methods: usize, config: &EloConfig, iteration: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(iteration as u64);
    let mut order: Vec<usize> = (0..tournaments.len()).collect();
    order.shuffle(&mut rng);
    let mut ratings = vec![config.initial_rating; methods];
    let mut delta = vec![0.0; methods];
    for &t in &order {
        delta.iter_mut().for_each(|d| *d = 0.0);
        for &(a, b, a_won) in &tournaments[t] {
            let expected = 1.0 / (1.0 + libm::pow(10.0, (ratings[b] - ratings[a]) / 400.0));
            let score = if a_won { 1.0 } else { 0.0 };
            let change = config.k_factor * (score - expected);
            delta[a] += change;
            delta[b] -= change;
        }
        for (r, d) in ratings.iter_mut().zip(&delta) {
            *r += d;
        }
    }
    ratings
}

/// Monte Carlo Elo ranking. With `known_methods`, rows naming any other
/// method are rejected.
pub fn elo_rank(log: &ComparisonLog, config: &EloConfig, known_methods: Option<&[String]>) -> Result<EloReport> {
    if log.rows.is_empty() {
        return Err(invalid("comparison log is empty"));
    }
    if config.iterations == 0 || !(config.k_factor.is_finite() && config.k_factor > 0.0) || !config.initial_rating.is_finite() {
        return Err(invalid("Elo needs a positive K-factor, a finite initial rating and at least one iteration"));
    }
    let methods = log.methods();
    if let Some(known) = known_methods {
        if let Some(m) = methods.iter().find(|m| !known.contains(m)) {
            return Err(invalid(format!("unknown method {m:?}")));
        }
    }
    let index: HashMap<&str, usize> = methods.iter().enumerate().map(|(i, m)| (m.as_str(), i)).collect();
    let mut games = vec![0usize; methods.len()];
    let mut wins = vec![0usize; methods.len()];
    let mut tournaments: Vec<Vec<Game>> = Vec::new();
    let mut by_participant: HashMap<&str, usize> = HashMap::new();
    for (i, r) in log.rows.iter().enumerate() {
        if r.method_a == r.method_b {
            return Err(invalid(format!("row {i} compares {:?} with itself", r.method_a)));
        }
        let (a, b) = (index[r.method_a.as_str()], index[r.method_b.as_str()]);
        let a_won = r.winner == Winner::A;
        games[a] += 1;
        games[b] += 1;
        wins[if a_won { a } else { b }] += 1;
        let slot = match config.mode {
            TournamentMode::PerComparison => {
                tournaments.push(Vec::new());
                tournaments.len() - 1
            }
            TournamentMode::PerParticipant => *by_participant.entry(r.participant.as_str()).or_insert_with(|| {
                tournaments.push(Vec::new());
                tournaments.len() - 1
            }),
        };
        tournaments[slot].push((a, b, a_won));
    }
    let finals: Vec<Vec<f64>> = (0..config.iterations)
        .into_par_iter()
        .map(|it| run_iteration(&tournaments, methods.len(), config, it))
        .collect();
    let mut ratings: Vec<MethodRating> = methods
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let mut v: Vec<f64> = finals.iter().map(|f| f[m]).collect();
            v.sort_by(f64::total_cmp);
            let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
            let iqr = q3 - q1;
            let whisker_low = v.iter().copied().find(|&x| x >= q1 - 1.5 * iqr).unwrap_or(q1);
            let whisker_high = v.iter().rev().copied().find(|&x| x <= q3 + 1.5 * iqr).unwrap_or(q3);
            MethodRating {
                method: name.clone(),
                median: quantile(&v, 0.5),
                q1,
                q3,
                whisker_low,
                whisker_high,
                min: v[0],
                max: v[v.len() - 1],
                games: games[m],
                wins: wins[m],
            }
        })
        .collect();
    ratings.sort_by(|a, b| b.median.total_cmp(&a.median));
    Ok(EloReport {
        config: config.clone(),
        games: log.rows.len(),
        tournaments: tournaments.len(),
        ratings,
    })
}

/// Comparisons drawn from a Bradley-Terry model with the given true ratings.
/// Participants take turns; each row compares two distinct random methods.
pub fn synthetic_log(strengths: &[(&str, f64)], participants: usize, images: usize, rows: usize, seed: u64) -> Result<ComparisonLog> {
    if strengths.len() < 2 || participants == 0 || images == 0 {
        return Err(invalid("a synthetic log needs two methods, a participant and an image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..rows)
        .map(|i| {
            let a = rng.random_range(0..strengths.len());
            let mut b = rng.random_range(0..strengths.len() - 1);
            if b >= a {
                b += 1;
            }
            let p_a = 1.0 / (1.0 + libm::pow(10.0, (strengths[b].1 - strengths[a].1) / 400.0));
            let winner = if rng.random::<f64>() < p_a { Winner::A } else { Winner::B };
            Comparison {
                participant: format!("p{:02}", i % participants),
                image: format!("img{:02}", rng.random_range(0..images)),
                method_a: strengths[a].0.to_string(),
                method_b: strengths[b].0.to_string(),
                winner,
            }
        })
        .collect();
    Ok(ComparisonLog { rows })
}
