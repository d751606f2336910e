//! Sequential model-based hyperparameter search with a Parzen-estimator
//! surrogate: past trials are split into good (lowest quarter of losses) and
//! bad; candidates drawn from the good density l(x) are scored by l(x)/g(x),
//! which is monotone in expected improvement under this surrogate.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::ModelKind;
use super::{stream_rng, MlError};

pub const N_CANDIDATES: usize = 256;
pub const GOOD_QUANTILE: f64 = 0.25;
const MIN_BANDWIDTH: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Domain {
    Float {
        low: f64,
        high: f64,
        #[serde(default)]
        log: bool,
    },
    Int {
        low: i64,
        high: i64,
        #[serde(default)]
        log: bool,
    },
    Categorical {
        choices: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl ParamValue {
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            ParamValue::Int(v) => serde_json::json!(v),
            ParamValue::Float(v) => serde_json::json!(v),
            ParamValue::Text(v) => serde_json::json!(v),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            ParamValue::Int(v) => Some(v as f64),
            ParamValue::Float(v) => Some(v),
            ParamValue::Text(_) => None,
        }
    }
}

pub type ParamSet = BTreeMap<String, ParamValue>;

/// Named dimensions; names are unique, order fixes the random stream layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterSpace(pub BTreeMap<String, Domain>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub iteration: usize,
    pub params: ParamSet,
    /// `None` when the objective failed (treated as an infinite loss).
    pub score: Option<f64>,
}

impl TrialRecord {
    fn loss(&self) -> f64 {
        self.score.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmboResult {
    pub best_params: ParamSet,
    pub best_score: f64,
    pub best_iteration: usize,
    pub history: Vec<TrialRecord>,
}

/// Position of a value in the search space: unit coordinate for numeric
/// dimensions, choice index for categorical ones.
#[derive(Debug, Clone, Copy)]
enum Coord {
    Unit(f64),
    Choice(usize),
}

impl Domain {
    fn validate(&self, name: &str) -> Result<(), MlError> {
        let bad = |m: String| Err(MlError::InvalidParams(format!("space '{name}': {m}")));
        match *self {
            Domain::Float { low, high, log } => {
                if !(low.is_finite() && high.is_finite() && low < high) {
                    return bad("need finite low < high".into());
                }
                if log && low <= 0.0 {
                    return bad("log scale needs low > 0".into());
                }
            }
            Domain::Int { low, high, log } => {
                if low > high {
                    return bad("need low <= high".into());
                }
                if log && low <= 0 {
                    return bad("log scale needs low > 0".into());
                }
            }
            Domain::Categorical { ref choices } => {
                if choices.is_empty() {
                    return bad("no choices".into());
                }
            }
        }
        Ok(())
    }

    fn bounds(&self) -> (f64, f64, bool) {
        match *self {
            Domain::Float { low, high, log } => (low, high, log),
            // Integers occupy equal-width cells of the continuous range.
            Domain::Int { low, high, log } => {
                if log {
                    ((low as f64 - 0.5).max(low as f64 * 0.5), high as f64 + 0.5, true)
                } else {
                    (low as f64 - 0.5, high as f64 + 0.5, false)
                }
            }
            Domain::Categorical { .. } => unreachable!(),
        }
    }

    fn decode(&self, c: Coord) -> ParamValue {
        match (self, c) {
            (Domain::Categorical { choices }, Coord::Choice(i)) => ParamValue::Text(choices[i].clone()),
            (_, Coord::Unit(u)) => {
                let (lo, hi, log) = self.bounds();
                let x = if log {
                    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
                } else {
                    lo + u * (hi - lo)
                };
                match *self {
                    Domain::Int { low, high, .. } => ParamValue::Int((x.round() as i64).clamp(low, high)),
                    _ => ParamValue::Float(x.clamp(lo, hi)),
                }
            }
            _ => unreachable!(),
        }
    }

    fn encode(&self, v: &ParamValue) -> Coord {
        match self {
            Domain::Categorical { choices } => Coord::Choice(match v {
                ParamValue::Text(s) => choices.iter().position(|c| c == s).unwrap_or(0),
                _ => 0,
            }),
            _ => {
                let (lo, hi, log) = self.bounds();
                let x = v.as_f64().unwrap_or(lo);
                let u = if log {
                    (x.ln() - lo.ln()) / (hi.ln() - lo.ln())
                } else {
                    (x - lo) / (hi - lo)
                };
                Coord::Unit(u.clamp(0.0, 1.0))
            }
        }
    }

    fn sample_uniform(&self, rng: &mut ChaCha8Rng) -> Coord {
        match self {
            Domain::Categorical { choices } => Coord::Choice(rng.random_range(0..choices.len())),
            _ => Coord::Unit(rng.random::<f64>()),
        }
    }
}

impl HyperparameterSpace {
    pub fn validate(&self) -> Result<(), MlError> {
        if self.0.is_empty() {
            return Err(MlError::InvalidParams("empty search space".into()));
        }
        self.0.iter().try_for_each(|(n, d)| d.validate(n))
    }

    fn decode(&self, coords: &[Coord]) -> ParamSet {
        self.0
            .iter()
            .zip(coords)
            .map(|((n, d), &c)| (n.clone(), d.decode(c)))
            .collect()
    }

    fn encode(&self, params: &ParamSet) -> Vec<Coord> {
        self.0.iter().map(|(n, d)| d.encode(&params[n])).collect()
    }

    /// Default search space per model kind, wide enough to reach the
    /// reference optima.
    pub fn default_for(kind: ModelKind) -> HyperparameterSpace {
        let f = |low, high, log| Domain::Float { low, high, log };
        let i = |low, high, log| Domain::Int { low, high, log };
        let mut m = BTreeMap::new();
        m.insert("n_trees".into(), i(100, 2000, true));
        m.insert("max_depth".into(), i(2, 20, false));
        match kind {
            ModelKind::Rf | ModelKind::Et => {
                m.insert("max_features".into(), f(0.1, 1.0, false));
                m.insert("max_samples".into(), f(0.5, 1.0, false));
            }
            ModelKind::GbdtDepthwise | ModelKind::GbdtLeafwise => {
                m.insert("eta".into(), f(0.005, 0.3, true));
                m.insert("min_child_weight".into(), f(1e-3, 10.0, true));
                m.insert("reg_lambda".into(), f(1e-2, 10.0, true));
                m.insert("gamma".into(), f(0.0, 10.0, false));
                m.insert("subsample".into(), f(0.5, 1.0, false));
                m.insert("colsample_bytree".into(), f(0.5, 1.0, false));
                if kind == ModelKind::GbdtLeafwise {
                    m.insert("n_leaves".into(), i(2, 64, true));
                }
            }
        }
        HyperparameterSpace(m)
    }
}

/// Parzen density over one dimension, fitted to a set of coordinates with a
/// uniform prior component.
enum Parzen {
    Numeric { centers: Vec<f64>, widths: Vec<f64> },
    Categorical { probs: Vec<f64> },
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl Parzen {
    fn fit(domain: &Domain, coords: &[Coord]) -> Parzen {
        match domain {
            Domain::Categorical { choices } => {
                let k = choices.len();
                let mut counts = vec![1.0; k];
                for c in coords {
                    if let Coord::Choice(i) = *c {
                        counts[i] += 1.0;
                    }
                }
                let total: f64 = counts.iter().sum();
                Parzen::Categorical {
                    probs: counts.into_iter().map(|c| c / total).collect(),
                }
            }
            _ => {
                let mut centers: Vec<f64> = coords
                    .iter()
                    .map(|c| match *c {
                        Coord::Unit(u) => u,
                        Coord::Choice(_) => unreachable!(),
                    })
                    .collect();
                centers.sort_by(f64::total_cmp);
                // Each kernel is as wide as the larger gap to its neighbours
                // (the unit interval's ends act as neighbours).
                let n = centers.len();
                let widths = (0..n)
                    .map(|i| {
                        let lo = if i == 0 { 0.0 } else { centers[i - 1] };
                        let hi = if i + 1 == n { 1.0 } else { centers[i + 1] };
                        (centers[i] - lo).max(hi - centers[i]).clamp(MIN_BANDWIDTH, 1.0)
                    })
                    .collect();
                Parzen::Numeric { centers, widths }
            }
        }
    }

    fn density(&self, c: Coord) -> f64 {
        match (self, c) {
            (Parzen::Categorical { probs }, Coord::Choice(i)) => probs[i],
            (Parzen::Numeric { centers, widths }, Coord::Unit(u)) => {
                let mut sum = 1.0; // uniform prior on [0, 1]
                for (&m, &s) in centers.iter().zip(widths) {
                    let mass = normal_cdf((1.0 - m) / s) - normal_cdf(-m / s);
                    let z = (u - m) / s;
                    let pdf = (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
                    sum += pdf / mass.max(1e-300);
                }
                sum / (centers.len() + 1) as f64
            }
            _ => unreachable!(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Coord {
        match self {
            Parzen::Categorical { probs } => {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        return Coord::Choice(i);
                    }
                }
                Coord::Choice(probs.len() - 1)
            }
            Parzen::Numeric { centers, widths } => {
                let k = rng.random_range(0..=centers.len());
                if k == centers.len() {
                    return Coord::Unit(rng.random());
                }
                let normal = Normal::new(centers[k], widths[k]).expect("positive width");
                for _ in 0..64 {
                    let u = normal.sample(rng);
                    if (0.0..=1.0).contains(&u) {
                        return Coord::Unit(u);
                    }
                }
                Coord::Unit(centers[k])
            }
        }
    }
}

const INIT_STREAM: u64 = 0xb0;
const PROPOSE_STREAM: u64 = 0xb1;

/// Minimizes `objective` over `space`. The first `n_init` trials are uniform
/// draws; each later one is the best of `N_CANDIDATES` draws from the good
/// density by the density ratio. Failed or non-finite objective values are
/// recorded as failures and the search continues.
pub fn smbo_tune<F>(
    space: &HyperparameterSpace,
    mut objective: F,
    budget: usize,
    n_init: usize,
    seed: u64,
) -> Result<SmboResult, MlError>
where
    F: FnMut(&ParamSet) -> Result<f64, String>,
{
    space.validate()?;
    if n_init < 1 || budget < n_init {
        return Err(MlError::InvalidParams("need budget >= n_init >= 1".into()));
    }
    let domains: Vec<&Domain> = space.0.values().collect();
    let mut history: Vec<TrialRecord> = Vec::with_capacity(budget);
    let mut coords: Vec<Vec<Coord>> = Vec::with_capacity(budget);
    for it in 0..budget {
        let proposal: Vec<Coord> = if it < n_init {
            let mut rng = stream_rng(seed, it as u64, INIT_STREAM);
            domains.iter().map(|d| d.sample_uniform(&mut rng)).collect()
        } else {
            propose(&domains, &history, &coords, &mut stream_rng(seed, it as u64, PROPOSE_STREAM))
        };
        let params = space.decode(&proposal);
        let score = objective(&params).ok().filter(|s| s.is_finite());
        // Store where the decoded value actually sits (integers snap).
        coords.push(space.encode(&params));
        history.push(TrialRecord {
            iteration: it + 1,
            params,
            score,
        });
    }
    let best = history
        .iter()
        .filter(|t| t.score.is_some())
        .min_by(|a, b| a.loss().total_cmp(&b.loss()).then(a.iteration.cmp(&b.iteration)))
        .ok_or_else(|| MlError::InvalidParams("every tuning trial failed".into()))?;
    Ok(SmboResult {
        best_params: best.params.clone(),
        best_score: best.loss(),
        best_iteration: best.iteration,
        history,
    })
}

fn propose(
    domains: &[&Domain],
    history: &[TrialRecord],
    coords: &[Vec<Coord>],
    rng: &mut ChaCha8Rng,
) -> Vec<Coord> {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[a].loss().total_cmp(&history[b].loss()).then(a.cmp(&b)));
    let n_good = ((GOOD_QUANTILE * history.len() as f64).ceil() as usize).max(1);
    let (good, bad) = order.split_at(n_good);
    let fit = |set: &[usize], d: usize| {
        let pts: Vec<Coord> = set.iter().map(|&i| coords[i][d]).collect();
        Parzen::fit(domains[d], &pts)
    };
    let l: Vec<Parzen> = (0..domains.len()).map(|d| fit(good, d)).collect();
    let g: Vec<Parzen> = (0..domains.len()).map(|d| fit(bad, d)).collect();
    let mut best: Option<(f64, Vec<Coord>)> = None;
    for _ in 0..N_CANDIDATES {
        let cand: Vec<Coord> = l.iter().map(|p| p.sample(rng)).collect();
        let score: f64 = cand
            .iter()
            .enumerate()
            .map(|(d, &c)| l[d].density(c).ln() - g[d].density(c).ln())
            .sum();
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    best.expect("at least one candidate").1
}

/// Uniform random search with the same budget, for baselines.
pub fn random_search<F>(
    space: &HyperparameterSpace,
    objective: F,
    budget: usize,
    seed: u64,
) -> Result<SmboResult, MlError>
where
    F: FnMut(&ParamSet) -> Result<f64, String>,
{
    smbo_tune(space, objective, budget, budget, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> HyperparameterSpace {
        let mut m = BTreeMap::new();
        m.insert(
            "x".to_string(),
            Domain::Float {
                low: 0.0,
                high: 10.0,
                log: false,
            },
        );
        HyperparameterSpace(m)
    }

    fn quad(p: &ParamSet) -> Result<f64, String> {
        let x = p["x"].as_f64().unwrap();
        Ok((x - 3.0) * (x - 3.0))
    }

    #[test]
    fn history_and_determinism() {
        let a = smbo_tune(&line(), quad, 20, 5, 1).unwrap();
        let b = smbo_tune(&line(), quad, 20, 5, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 20);
        let its: Vec<usize> = a.history.iter().map(|t| t.iteration).collect();
        assert_eq!(its, (1..=20).collect::<Vec<_>>());
    }

    #[test]
    fn budget_equal_to_init_is_random_search() {
        let r = smbo_tune(&line(), quad, 5, 5, 2).unwrap();
        let min = r.history.iter().map(|t| t.score.unwrap()).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_score, min);
    }

    #[test]
    fn constant_objective() {
        let r = smbo_tune(&line(), |_| Ok(1.0), 20, 5, 3).unwrap();
        assert!(r.history.iter().all(|t| t.score == Some(1.0)));
        assert_eq!(r.best_iteration, 1);
    }

    #[test]
    fn failures_recorded_and_skipped() {
        let mut calls = 0;
        let r = smbo_tune(
            &line(),
            |p| {
                calls += 1;
                if calls % 2 == 0 {
                    Err("boom".into())
                } else {
                    quad(p)
                }
            },
            10,
            3,
            4,
        )
        .unwrap();
        assert_eq!(r.history.iter().filter(|t| t.score.is_none()).count(), 5);
        assert!(r.best_score.is_finite());
    }

    #[test]
    fn mixed_space_stays_in_bounds() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Domain::Int { low: 2, high: 9, log: false });
        m.insert("b".to_string(), Domain::Float { low: 0.01, high: 1.0, log: true });
        m.insert(
            "c".to_string(),
            Domain::Categorical {
                choices: vec!["p".into(), "q".into()],
            },
        );
        let space = HyperparameterSpace(m);
        let r = smbo_tune(
            &space,
            |p| {
                let a = p["a"].as_f64().unwrap();
                let b = p["b"].as_f64().unwrap();
                let c = if p["c"] == ParamValue::Text("q".into()) { 0.0 } else { 1.0 };
                Ok((a - 7.0).abs() + b + c)
            },
            25,
            5,
            5,
        )
        .unwrap();
        for t in &r.history {
            match (&t.params["a"], &t.params["b"]) {
                (ParamValue::Int(a), ParamValue::Float(b)) => {
                    assert!((2..=9).contains(a));
                    assert!((0.01..=1.0).contains(b));
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(smbo_tune(&line(), quad, 3, 5, 0).is_err());
        assert!(smbo_tune(&line(), quad, 3, 0, 0).is_err());
        let bad = HyperparameterSpace(BTreeMap::from([(
            "x".to_string(),
            Domain::Float { low: 0.0, high: 1.0, log: true },
        )]));
        assert!(bad.validate().is_err());
    }
}
