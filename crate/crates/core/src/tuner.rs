//! Hyperband search over head architectures.
//!
//! Each bracket `s` starts `n` random configurations at `r` epochs and keeps
//! the best `⌊n_i/η⌋` at every rung while multiplying the budget by `η`.

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{build_head, Activation, HeadConfig};
use crate::seed::derive;
use crate::trainer::{evaluate_loss, train_head, LabelledSet, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Inclusive range of hidden layer counts.
    pub layers: (usize, usize),
    /// Inclusive range of units per hidden layer.
    pub units: (usize, usize),
    pub unit_step: usize,
    pub activations: Vec<Activation>,
    /// Allowed dropout settings (`false` = off).
    pub dropout: Vec<bool>,
    pub dropout_rate: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            layers: (1, 3),
            units: (32, 4096),
            unit_step: 8,
            activations: vec![Activation::Relu, Activation::Tanh],
            dropout: vec![false, true],
            dropout_rate: 0.2,
        }
    }
}

/// A sampled head architecture with its init seed and epoch budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub units: Vec<usize>,
    pub activation: Activation,
    pub dropout: bool,
    pub seed: u64,
    pub budget: usize,
}

impl TrialConfig {
    pub fn head_config(&self, space: &SearchSpace) -> HeadConfig {
        HeadConfig {
            units: self.units.clone(),
            activation: self.activation,
            dropout: self.dropout.then_some(space.dropout_rate),
        }
    }

    /// Architecture only, for duplicate detection.
    fn arch_key(&self) -> (Vec<usize>, Activation, bool) {
        (self.units.clone(), self.activation, self.dropout)
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (l0, l1) = self.layers;
        let (u0, u1) = self.units;
        let bad = |m: &str| Err(Error::Validation(format!("search space: {m}")));
        if l0 == 0 || l0 > l1 {
            return bad("layer range must be non-empty and start at 1 or more");
        }
        if u0 == 0 || u0 > u1 {
            return bad("unit range must be non-empty and positive");
        }
        if self.unit_step == 0 || (u1 - u0) % self.unit_step != 0 {
            return bad("unit step must divide the unit range");
        }
        if self.activations.is_empty() || self.dropout.is_empty() {
            return bad("activation and dropout choices must be non-empty");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout rate must lie in [0, 1)");
        }
        Ok(())
    }

    fn unit_choices(&self) -> usize {
        (self.units.1 - self.units.0) / self.unit_step + 1
    }

    /// Number of distinct architectures, saturating.
    pub fn size(&self) -> u128 {
        let per = self.unit_choices() as u128;
        let tail = (self.activations.len() * self.dropout.len()) as u128;
        (self.layers.0..=self.layers.1)
            .map(|l| per.saturating_pow(l as u32).saturating_mul(tail))
            .fold(0u128, u128::saturating_add)
    }

    pub fn contains(&self, head: &HeadConfig) -> bool {
        let n = head.units.len();
        let units_ok = head
            .units
            .iter()
            .all(|&u| u >= self.units.0 && u <= self.units.1 && (u - self.units.0) % self.unit_step == 0);
        let dropout_ok = match head.dropout {
            None => self.dropout.contains(&false),
            Some(r) => self.dropout.contains(&true) && r == self.dropout_rate,
        };
        n >= self.layers.0 && n <= self.layers.1 && units_ok && self.activations.contains(&head.activation) && dropout_ok
    }
}

/// Uniform draw from the space; deterministic per seed.
pub fn sample_config(space: &SearchSpace, seed: u64) -> TrialConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(space.layers.0..=space.layers.1);
    let choices = space.unit_choices();
    let units = (0..n)
        .map(|_| space.units.0 + space.unit_step * rng.gen_range(0..choices))
        .collect();
    let activation = space.activations[rng.gen_range(0..space.activations.len())];
    let dropout = space.dropout[rng.gen_range(0..space.dropout.len())];
    TrialConfig {
        units,
        activation,
        dropout,
        seed: derive(seed, &[0x5EED]),
        budget: 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub configs: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: u32,
    pub rungs: Vec<Rung>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperbandSchedule {
    pub max_resource: usize,
    pub eta: usize,
    pub brackets: Vec<Bracket>,
}

impl HyperbandSchedule {
    /// `(n, r)` of the first rung of each bracket.
    pub fn bracket_heads(&self) -> Vec<(usize, usize)> {
        self.brackets.iter().map(|b| (b.rungs[0].configs, b.rungs[0].epochs)).collect()
    }

    /// Epochs summed over every rung evaluation.
    pub fn total_budget(&self) -> usize {
        self.brackets
            .iter()
            .flat_map(|b| &b.rungs)
            .map(|r| r.configs * r.epochs)
            .sum()
    }
}

/// Largest `s` with `eta^s ≤ r`.
fn ilog(r: usize, eta: usize) -> u32 {
    let (mut s, mut p) = (0u32, eta);
    while p <= r {
        s += 1;
        p = p.saturating_mul(eta);
    }
    s
}

/// Brackets `s = s_max..0` with `n = ⌊(s_max+1)/(s+1)⌋·η^s` configs at
/// `r = R/η^s` epochs; rung `i` has `⌊n/η^i⌋` configs at `r·η^i` epochs.
pub fn build_schedule(max_resource: usize, eta: usize) -> Result<HyperbandSchedule> {
    if max_resource == 0 || eta < 2 {
        return Err(Error::Validation(format!("Hyperband needs R ≥ 1 and η ≥ 2, got R={max_resource}, η={eta}")));
    }
    let s_max = ilog(max_resource, eta);
    let brackets = (0..=s_max)
        .rev()
        .map(|s| {
            let n = (s_max as usize + 1) / (s as usize + 1) * eta.pow(s);
            let rungs = (0..=s)
                .map(|i| Rung {
                    configs: n / eta.pow(i),
                    epochs: (max_resource / eta.pow(s - i)).max(1),
                })
                .collect();
            Bracket { s, rungs }
        })
        .collect();
    Ok(HyperbandSchedule {
        max_resource,
        eta,
        brackets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub bracket: u32,
    pub rung: usize,
    pub config: TrialConfig,
    /// `None` for failed trials, which rank below every score.
    pub score: Option<f64>,
    pub seconds: f64,
    pub status: String,
}

impl TrialRecord {
    pub fn rank_score(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: TrialConfig,
    pub best_score: f64,
    pub records: Vec<TrialRecord>,
}

fn read_log(path: &Path) -> Result<HashMap<(usize, usize), TrialRecord>> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(r) => {
                done.insert((r.trial_id, r.config.budget), r);
            }
            // A crash can leave a torn final line; anything else is corruption.
            Err(_) if i + 1 == text.lines().count() => log::warn!("ignoring incomplete last line of {}", path.display()),
            Err(e) => return Err(Error::Format(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(done)
}

/// Runs every bracket of `schedule`. `objective` maps a configuration (with
/// its budget) to a validation score, higher is better. With `log` set,
/// one JSON record per evaluation is appended there, and evaluations
/// already present are reused instead of rerun.
pub fn run_search(
    schedule: &HyperbandSchedule,
    space: &SearchSpace,
    mut objective: impl FnMut(&TrialConfig) -> Result<f64>,
    seed: u64,
    log: Option<&Path>,
) -> Result<SearchOutcome> {
    space.validate()?;
    let done = match log {
        Some(p) => read_log(p)?,
        None => HashMap::new(),
    };
    let mut sink = match log {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let size = space.size();
    let mut records = Vec::new();
    let mut next_id = 0usize;
    for bracket in &schedule.brackets {
        let mut seen = HashSet::new();
        let mut pool: Vec<(usize, TrialConfig)> = (0..bracket.rungs[0].configs)
            .map(|j| {
                let base = derive(seed, &[bracket.s as u64, j as u64]);
                let mut attempt = 0u64;
                let mut cfg = sample_config(space, base);
                while (seen.len() as u128) < size && seen.contains(&cfg.arch_key()) && attempt < 1000 {
                    attempt += 1;
                    cfg = sample_config(space, derive(base, &[attempt]));
                }
                seen.insert(cfg.arch_key());
                next_id += 1;
                (next_id - 1, cfg)
            })
            .collect();
        for (i, rung) in bracket.rungs.iter().enumerate() {
            let mut scored = Vec::with_capacity(pool.len());
            for (id, cfg) in &pool {
                let cfg = TrialConfig {
                    budget: rung.epochs,
                    ..cfg.clone()
                };
                let record = match done.get(&(*id, rung.epochs)) {
                    Some(r) if r.config == cfg => r.clone(),
                    Some(_) => {
                        return Err(Error::Validation(format!(
                            "trial log entry {id} does not match this search; use a fresh log"
                        )))
                    }
                    None => {
                        let started = Instant::now();
                        let result = objective(&cfg);
                        let (score, status) = match result {
                            Ok(v) if v.is_nan() => (None, "failed: objective returned NaN".to_string()),
                            Ok(v) => (Some(v), "ok".to_string()),
                            Err(e) => (None, format!("failed: {e}")),
                        };
                        let r = TrialRecord {
                            trial_id: *id,
                            bracket: bracket.s,
                            rung: i,
                            config: cfg.clone(),
                            score,
                            seconds: started.elapsed().as_secs_f64(),
                            status,
                        };
                        if let (Some(f), Some(p)) = (sink.as_mut(), log) {
                            writeln!(f, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(p, e))?;
                        }
                        r
                    }
                };
                scored.push((record.rank_score(), *id, record.config.clone()));
                records.push(record);
            }
            // Descending score, ties to the lower trial id.
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let keep = (pool.len() / schedule.eta).max(1).min(pool.len());
            pool = scored.into_iter().take(keep).map(|(_, id, c)| (id, c)).collect();
        }
    }
    let best = records
        .iter()
        .filter(|r| r.score.is_some())
        .fold(None::<&TrialRecord>, |acc, r| match acc {
            Some(a) if a.rank_score() >= r.rank_score() => Some(a),
            _ => Some(r),
        })
        .ok_or_else(|| Error::Validation("every trial failed".into()))?;
    Ok(SearchOutcome {
        best: best.config.clone(),
        best_score: best.rank_score(),
        records,
    })
}

/// Objective for head-only trials on precomputed features: trains a head
/// of the trial's architecture for its budget and returns validation
/// accuracy.
pub fn head_objective<'a>(
    base: &'a TrainConfig,
    space: &'a SearchSpace,
    train: &'a LabelledSet,
    val: &'a LabelledSet,
) -> impl FnMut(&TrialConfig) -> Result<f64> + 'a {
    move |trial| {
        let cfg = TrainConfig {
            head: trial.head_config(space),
            head_epochs: trial.budget,
            early_stopping: None,
            seeds: crate::trainer::SeedTuple {
                init: trial.seed,
                ..base.seeds
            },
            ..base.clone()
        };
        let feature_shape = train
            .inputs
            .first()
            .ok_or_else(|| Error::Validation("no training features".into()))?
            .shape()
            .to_vec();
        let mut head = build_head::<f32>(&cfg.head, &feature_shape, 2, trial.seed)?;
        train_head(&cfg, &mut head, train, None)?;
        Ok(evaluate_loss(&head, val, cfg.batch_size)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn collapsed() -> SearchSpace {
        SearchSpace {
            layers: (1, 3),
            units: (64, 64),
            unit_step: 8,
            ..SearchSpace::default()
        }
    }

    #[test]
    fn degenerate_schedule() {
        let s = build_schedule(1, 3).unwrap();
        assert_eq!(s.bracket_heads(), vec![(1, 1)]);
        assert_eq!(s.brackets[0].rungs.len(), 1);
    }

    #[test]
    fn schedule_27_3() {
        let s = build_schedule(27, 3).unwrap();
        assert_eq!(s.bracket_heads(), vec![(27, 1), (9, 3), (6, 9), (4, 27)]);
        let b0: Vec<(usize, usize)> = s.brackets[0].rungs.iter().map(|r| (r.configs, r.epochs)).collect();
        assert_eq!(b0, vec![(27, 1), (9, 3), (3, 9), (1, 27)]);
        assert!(s.total_budget() <= 4 * 27 * 4);
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(build_schedule(0, 3).is_err());
        assert!(build_schedule(9, 1).is_err());
    }

    #[test]
    fn table_two_rows_are_members() {
        let space = SearchSpace::default();
        let vgg = HeadConfig {
            units: vec![3560, 2696],
            activation: Activation::Relu,
            dropout: None,
        };
        assert!(space.contains(&vgg));
        let resnet = HeadConfig {
            units: vec![1128, 3464, 1584],
            activation: Activation::Relu,
            dropout: Some(0.2),
        };
        assert!(space.contains(&resnet));
        assert!(!space.contains(&HeadConfig { units: vec![3561], ..vgg.clone() }));
        assert!(!space.contains(&HeadConfig { units: vec![32; 4], ..vgg }));
    }

    #[test]
    fn collapsed_space_yields_exact_config() {
        let space = SearchSpace {
            layers: (2, 2),
            units: (128, 128),
            activations: vec![Activation::Tanh],
            dropout: vec![true],
            ..SearchSpace::default()
        };
        let c = sample_config(&space, 9);
        assert_eq!((c.units, c.activation, c.dropout), (vec![128, 128], Activation::Tanh, true));
    }

    #[test]
    fn samples_are_members() {
        let space = SearchSpace::default();
        for s in 0..500 {
            let c = sample_config(&space, s);
            assert!(space.contains(&c.head_config(&space)));
        }
    }

    #[test]
    fn layer_count_is_uniform() {
        let space = SearchSpace::default();
        let mut counts = [0usize; 3];
        let n = 10_000;
        for s in 0..n {
            counts[sample_config(&space, s).units.len() - 1] += 1;
        }
        let (p, nf) = (1.0 / 3.0, n as f64);
        let sigma = (nf * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - nf * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn space_size_and_validation() {
        assert_eq!(collapsed().size(), 12);
        assert!(SearchSpace { unit_step: 7, ..SearchSpace::default() }.validate().is_err());
        assert!(SearchSpace { layers: (0, 2), ..SearchSpace::default() }.validate().is_err());
    }

    #[test]
    fn constant_objective_keeps_first_trials() {
        let s = build_schedule(9, 3).unwrap();
        let out = run_search(&s, &SearchSpace::default(), |_| Ok(0.5), 1, None).unwrap();
        let rung1: Vec<usize> = out.records.iter().filter(|r| r.bracket == 2 && r.rung == 1).map(|r| r.trial_id).collect();
        assert_eq!(rung1, vec![0, 1, 2]);
        assert_eq!(out.best_score, 0.5);
    }

    fn planted(c: &TrialConfig) -> f64 {
        let mut v = c.units.len() as f64;
        if c.activation == Activation::Tanh {
            v -= 0.5;
        }
        if c.dropout {
            v -= 0.25;
        }
        -(v - 1.75).abs()
    }

    #[test]
    fn planted_optimum_found() {
        let s = build_schedule(27, 3).unwrap();
        for seed in 0..10 {
            let out = run_search(&s, &collapsed(), |c| Ok(planted(c)), seed, None).unwrap();
            assert_eq!((out.best.units.len(), out.best.activation, out.best.dropout), (2, Activation::Relu, true));
            let max = out.records.iter().map(|r| r.rank_score()).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(out.best_score, max);
        }
    }

    #[test]
    fn failing_trials_are_skipped() {
        let s = build_schedule(9, 3).unwrap();
        let out = run_search(
            &s,
            &collapsed(),
            |c| if c.dropout { Err(Error::Validation("boom".into())) } else { Ok(planted(c)) },
            3,
            None,
        )
        .unwrap();
        assert!(!out.best.dropout);
        assert!(out.records.iter().any(|r| r.score.is_none() && r.status.starts_with("failed")));
    }

    #[test]
    fn search_is_deterministic_and_resumable() {
        let s = build_schedule(9, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.jsonl");
        let a = run_search(&s, &SearchSpace::default(), |c| Ok(c.units[0] as f64 / (c.budget as f64)), 7, Some(&path)).unwrap();
        let b = run_search(&s, &SearchSpace::default(), |c| Ok(c.units[0] as f64 / (c.budget as f64)), 7, None).unwrap();
        let strip = |o: &SearchOutcome| o.records.iter().map(|r| (r.trial_id, r.config.clone(), r.score)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        let lines = fs::read_to_string(&path).unwrap().lines().count();
        assert_eq!(lines, a.records.len());
        let c = run_search(&s, &SearchSpace::default(), |_| panic!("all cached"), 7, Some(&path)).unwrap();
        assert_eq!(strip(&a), strip(&c));
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), lines);
    }

    #[test]
    fn failure_serializes_as_null() {
        let r = TrialRecord {
            trial_id: 0,
            bracket: 0,
            rung: 0,
            config: sample_config(&SearchSpace::default(), 0),
            score: None,
            seconds: 0.0,
            status: "failed: x".into(),
        };
        assert!(serde_json::to_string(&r).unwrap().contains("\"score\":null"));
    }

    #[test]
    fn head_objective_scores_separable_data() {
        use crate::synthetic::separable_features;
        let train = separable_features(32, 4, 1);
        let val = separable_features(16, 4, 2);
        let base = TrainConfig { batch_size: 8, lr_head: 1e-2, ..TrainConfig::default() };
        let space = SearchSpace { units: (8, 16), ..SearchSpace::default() };
        let mut obj = head_objective(&base, &space, &train, &val);
        let mut cfg = sample_config(&space, 4);
        cfg.budget = 30;
        let score = obj(&cfg).unwrap();
        assert!((0.0..=1.0).contains(&score));
        assert_eq!(score, obj(&cfg).unwrap());
    }
}
