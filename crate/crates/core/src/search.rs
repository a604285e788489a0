//! Search over rule composites for the highest A_PR.
//!
//! A configuration picks one choice per dimension, in the order
//! `[LLL, MLL, HLL, FCL, softmax handler (if any), magnitude]`; configurations
//! are numbered lexicographically with the first dimension most significant.
//! [`bayes_search`] fits a Gaussian process on one-hot encodings and proposes by
//! expected improvement; [`hybrid_search`] follows it with a grid over the
//! choices that appear among its best records.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::dataset::Dataset;
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::lrp::{CompositeConfig, Rule, RuleConstants, SoftmaxHandler};
use crate::prune::{Attributor, SeededSweep, SweepConfig};
use crate::seed::stream_rng;

pub const DEFAULT_INIT: usize = 10;
pub const DEFAULT_TOP_K: usize = 5;
/// Fraction of the space evaluated by the Bayesian phase by default.
pub const DEFAULT_BUDGET_FRACTION: f64 = 0.25;
pub const EI_XI: f64 = 0.01;
pub const DEFAULT_JITTER: f64 = 1e-8;
const MAX_JITTER: f64 = 1e-2;

/// Finite categorical space of composites.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    groups: [Vec<Rule>; 4],
    softmax: Vec<SoftmaxHandler>,
    magnitude: Vec<bool>,
}

impl SearchSpace {
    /// `softmax` may be empty for graphs without attention.
    pub fn new(groups: [Vec<Rule>; 4], softmax: Vec<SoftmaxHandler>, magnitude: Vec<bool>) -> Result<Self> {
        if groups.iter().any(Vec::is_empty) {
            return Err(invalid("every layer group needs at least one candidate rule"));
        }
        if magnitude.is_empty() {
            return Err(invalid("magnitude domain is empty"));
        }
        let space = Self { groups, softmax, magnitude };
        if has_duplicates(&space) {
            return Err(invalid("search space lists a choice twice"));
        }
        Ok(space)
    }

    /// `{ε, αβ, z⁺, γ}` in every group, every softmax handler when `softmax`
    /// is set, and both magnitude settings.
    pub fn standard(softmax: bool) -> Self {
        let c = RuleConstants::default();
        let rules: Vec<Rule> = ["epsilon", "ab21", "z_plus", "gamma"].iter().map(|n| c.rule(n).expect("known rule")).collect();
        let handlers = if softmax {
            vec![SoftmaxHandler::CpLrp, SoftmaxHandler::AttnlrpDtd, SoftmaxHandler::AttnlrpZplus]
        } else {
            Vec::new()
        };
        Self { groups: std::array::from_fn(|_| rules.clone()), softmax: handlers, magnitude: vec![true, false] }
    }

    /// The standard space for `graph`.
    pub fn for_graph(graph: &Graph) -> Self {
        Self::standard(graph.contains_softmax())
    }

    pub fn groups(&self) -> &[Vec<Rule>; 4] {
        &self.groups
    }

    pub fn softmax(&self) -> &[SoftmaxHandler] {
        &self.softmax
    }

    pub fn magnitude(&self) -> &[bool] {
        &self.magnitude
    }

    /// Choice count per dimension.
    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.groups.iter().map(Vec::len).collect();
        if !self.softmax.is_empty() {
            d.push(self.softmax.len());
        }
        d.push(self.magnitude.len());
        d
    }

    pub fn size(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn choices(&self, mut index: usize) -> Vec<usize> {
        let dims = self.dims();
        let mut out = vec![0; dims.len()];
        for (slot, &n) in out.iter_mut().zip(&dims).rev() {
            *slot = index % n;
            index /= n;
        }
        out
    }

    pub fn index(&self, choices: &[usize]) -> usize {
        choices.iter().zip(self.dims()).fold(0, |acc, (&c, n)| acc * n + c)
    }

    pub fn config(&self, index: usize) -> CompositeConfig {
        let ch = self.choices(index);
        let groups = std::array::from_fn(|g| self.groups[g][ch[g]]);
        let softmax = (!self.softmax.is_empty()).then(|| self.softmax[ch[4]]);
        CompositeConfig::new(groups, softmax, self.magnitude[*ch.last().expect("nonempty")])
    }

    /// Position of `config` in this space, if every choice is a member.
    pub fn locate(&self, config: &CompositeConfig) -> Option<usize> {
        if config.projection.is_some() || config.conv.is_some() {
            return None;
        }
        let mut ch = Vec::with_capacity(6);
        for g in 0..4 {
            ch.push(self.groups[g].iter().position(|r| *r == config.groups[g])?);
        }
        match (self.softmax.is_empty(), config.softmax) {
            (true, None) => {}
            (false, Some(h)) => ch.push(self.softmax.iter().position(|&s| s == h)?),
            _ => return None,
        }
        ch.push(self.magnitude.iter().position(|&m| m == config.magnitude)?);
        Some(self.index(&ch))
    }

    /// Concatenated one-hot blocks, one per dimension.
    pub fn encode(&self, index: usize) -> Vec<f64> {
        let dims = self.dims();
        let mut out = vec![0.0; dims.iter().sum()];
        let mut offset = 0;
        for (c, n) in self.choices(index).into_iter().zip(dims) {
            out[offset + c] = 1.0;
            offset += n;
        }
        out
    }

    /// Subspace keeping, per dimension, the listed choice positions (in space order).
    fn restrict(&self, keep: &[BTreeSet<usize>]) -> Self {
        let pick = |d: usize| keep[d].iter().copied().collect::<Vec<_>>();
        let groups = std::array::from_fn(|g| pick(g).into_iter().map(|i| self.groups[g][i]).collect());
        let softmax = if self.softmax.is_empty() { Vec::new() } else { pick(4).into_iter().map(|i| self.softmax[i]).collect() };
        let magnitude = pick(keep.len() - 1).into_iter().map(|i| self.magnitude[i]).collect();
        Self { groups, softmax, magnitude }
    }

    pub fn from_spec(spec: &SpaceSpec) -> Result<Self> {
        let c = RuleConstants::default();
        let parse = |names: &[String]| names.iter().map(|n| c.rule(n)).collect::<Result<Vec<_>>>();
        let all = match &spec.rules {
            Some(r) => parse(r)?,
            None => Self::standard(false).groups[0].clone(),
        };
        let mut groups: [Vec<Rule>; 4] = std::array::from_fn(|_| all.clone());
        for (name, rules) in &spec.groups {
            let g = ["LLL", "MLL", "HLL", "FCL"]
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| invalid(format!("unknown layer group `{name}` in search space")))?;
            groups[g] = parse(rules)?;
        }
        let softmax = spec.softmax.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        Self::new(groups, softmax, spec.magnitude.clone().unwrap_or_else(|| vec![true, false]))
    }
}

fn has_duplicates(space: &SearchSpace) -> bool {
    let dup = |v: &[String]| v.iter().collect::<BTreeSet<_>>().len() != v.len();
    space.groups.iter().any(|g| dup(&g.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>()))
        || dup(&space.softmax.iter().map(|s| s.to_string()).collect::<Vec<_>>())
        || dup(&space.magnitude.iter().map(|m| m.to_string()).collect::<Vec<_>>())
}

/// JSON description of a search space, e.g.
/// `{"rules": ["epsilon", "z_plus"], "groups": {"FCL": ["ab21"]}, "softmax": ["cp_lrp"]}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSpec {
    /// Candidate rules for every group (default: epsilon, ab21, z_plus, gamma).
    #[serde(default)]
    pub rules: Option<Vec<String>>,
    /// Per-group overrides keyed by `LLL`, `MLL`, `HLL` or `FCL`.
    #[serde(default)]
    pub groups: HashMap<String, Vec<String>>,
    #[serde(default)]
    pub softmax: Vec<String>,
    #[serde(default)]
    pub magnitude: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Bayes,
    Grid,
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub composite: CompositeConfig,
    pub label: String,
    /// A_PR, absent when the evaluation failed.
    pub a_pr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seeds: Vec<u64>,
    pub phase: Phase,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Objective to maximize; must be deterministic for a given composite.
pub trait Evaluator: Sync {
    fn evaluate(&self, composite: &CompositeConfig) -> Result<f64>;

    /// Seeds the objective averages over, recorded with each result.
    fn seeds(&self) -> Vec<u64> {
        Vec::new()
    }
}

impl<F> Evaluator for F
where
    F: Fn(&CompositeConfig) -> Result<f64> + Sync,
{
    fn evaluate(&self, composite: &CompositeConfig) -> Result<f64> {
        self(composite)
    }
}

/// A_PR of a seeded pruning sweep with a fixed seed list.
pub struct SweepEvaluator<'a> {
    pub graph: &'a Graph,
    pub pool: &'a Dataset,
    pub eval: &'a Dataset,
    pub sweep: SweepConfig,
    pub n_ref: usize,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
}

impl Evaluator for SweepEvaluator<'_> {
    fn evaluate(&self, composite: &CompositeConfig) -> Result<f64> {
        let attributor = Attributor::Lrp(composite.clone().fit_to(self.graph));
        let run = SeededSweep {
            graph: self.graph,
            pool: self.pool,
            eval: self.eval,
            attributor: &attributor,
            sweep: self.sweep.clone(),
            n_ref: self.n_ref,
            master_seed: self.master_seed,
            seeds: self.seeds.clone(),
        };
        Ok(run.run()?.a_pr)
    }

    fn seeds(&self) -> Vec<u64> {
        self.seeds.clone()
    }
}

/// Append-only JSON-lines record of evaluations; reopening resumes a search.
#[derive(Debug)]
pub struct SearchLog {
    path: PathBuf,
    done: HashMap<String, SearchRecord>,
}

impl SearchLog {
    /// Open `path`, loading any records already in it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut done = HashMap::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: SearchRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::Search(format!("{}: line {}: {e}", path.display(), n + 1)))?;
                done.insert(rec.composite.to_json(), rec);
            }
        }
        Ok(Self { path: path.to_path_buf(), done })
    }

    pub fn len(&self) -> usize {
        self.done.len()
    }

    pub fn is_empty(&self) -> bool {
        self.done.is_empty()
    }

    fn get(&self, c: &CompositeConfig) -> Option<&SearchRecord> {
        self.done.get(&c.to_json())
    }

    fn append(&mut self, recs: &[SearchRecord]) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        for r in recs {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
            self.done.insert(r.composite.to_json(), r.clone());
        }
        f.flush()?;
        Ok(())
    }
}

/// Evaluation bookkeeping shared by the search phases.
struct Session<'a, E: Evaluator + ?Sized> {
    space: &'a SearchSpace,
    evaluator: &'a E,
    log: Option<&'a mut SearchLog>,
    records: Vec<(usize, SearchRecord)>,
    seen: HashMap<usize, usize>,
    /// Evaluator calls made (log hits excluded).
    calls: usize,
}

impl<'a, E: Evaluator + ?Sized> Session<'a, E> {
    fn new(space: &'a SearchSpace, evaluator: &'a E, log: Option<&'a mut SearchLog>) -> Self {
        Self { space, evaluator, log, records: Vec::new(), seen: HashMap::new(), calls: 0 }
    }

    /// Evaluate configurations not yet seen, concurrently, recording in the given order.
    fn run(&mut self, indices: &[usize], phase: Phase) -> Result<()> {
        let fresh: Vec<usize> = indices.iter().copied().filter(|i| !self.seen.contains_key(i)).collect();
        let configs: Vec<CompositeConfig> = fresh.iter().map(|&i| self.space.config(i)).collect();
        let cached: Vec<Option<SearchRecord>> =
            configs.iter().map(|c| self.log.as_ref().and_then(|l| l.get(c)).cloned()).collect();
        let evaluator = self.evaluator;
        let results: Vec<SearchRecord> = configs
            .par_iter()
            .zip(&cached)
            .map(|(c, hit)| hit.clone().unwrap_or_else(|| evaluate_one(evaluator, c, phase)))
            .collect();
        let new: Vec<SearchRecord> =
            results.iter().zip(&cached).filter(|(_, hit)| hit.is_none()).map(|(r, _)| r.clone()).collect();
        self.calls += new.len();
        if let Some(log) = self.log.as_mut() {
            log.append(&new)?;
        }
        for (i, r) in fresh.into_iter().zip(results) {
            self.seen.insert(i, self.records.len());
            self.records.push((i, r));
        }
        Ok(())
    }

    fn best(&self) -> Option<(usize, &SearchRecord)> {
        best_of(self.records.iter().map(|(i, r)| (*i, r)))
    }
}

fn evaluate_one<E: Evaluator + ?Sized>(evaluator: &E, c: &CompositeConfig, phase: Phase) -> SearchRecord {
    let (a_pr, error) = match evaluator.evaluate(c) {
        Ok(v) if v.is_finite() && (0.0..=1.0).contains(&v) => (Some(v), None),
        Ok(v) => (None, Some(format!("objective {v} outside [0, 1]"))),
        Err(e) => (None, Some(e.to_string())),
    };
    SearchRecord {
        composite: c.clone(),
        label: c.label(),
        a_pr,
        error,
        seeds: evaluator.seeds(),
        phase,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    }
}

/// Highest A_PR; ties go to the lowest index.
fn best_of<'r>(records: impl Iterator<Item = (usize, &'r SearchRecord)>) -> Option<(usize, &'r SearchRecord)> {
    records
        .filter_map(|(i, r)| r.a_pr.map(|v| (i, r, v)))
        .fold(None, |best: Option<(usize, &SearchRecord, f64)>, (i, r, v)| match best {
            Some((bi, _, bv)) if bv > v || (bv == v && bi < i) => best,
            _ => Some((i, r, v)),
        })
        .map(|(i, r, _)| (i, r))
}

/// Outcome of a search phase: records in evaluation order, with their space index.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub records: Vec<(usize, SearchRecord)>,
    /// Index and record of the best successful evaluation.
    pub best: (usize, SearchRecord),
    /// Evaluator calls made; configurations found in the log are not counted.
    pub calls: usize,
}

impl SearchOutcome {
    pub fn failures(&self) -> impl Iterator<Item = &SearchRecord> {
        self.records.iter().map(|(_, r)| r).filter(|r| r.a_pr.is_none())
    }

    /// Distinct configurations evaluated.
    pub fn evaluations(&self) -> usize {
        self.records.len()
    }
}

fn finish<E: Evaluator + ?Sized>(session: Session<'_, E>) -> Result<SearchOutcome> {
    let best = session
        .best()
        .map(|(i, r)| (i, r.clone()))
        .ok_or_else(|| Error::Search("no configuration was evaluated successfully".into()))?;
    Ok(SearchOutcome { records: session.records, best, calls: session.calls })
}

/// Evaluate every configuration once, in lexicographic order.
pub fn grid_search<E: Evaluator + ?Sized>(space: &SearchSpace, evaluator: &E, log: Option<&mut SearchLog>) -> Result<SearchOutcome> {
    let mut s = Session::new(space, evaluator, log);
    s.run(&(0..space.size()).collect::<Vec<_>>(), Phase::Grid)?;
    finish(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesConfig {
    /// Total evaluations, including the initial random ones; clamped to the space size.
    pub budget: usize,
    pub init: usize,
    pub seed: u64,
    /// Records whose choices form the reduced space.
    pub top_k: usize,
    pub jitter: f64,
}

impl BayesConfig {
    /// Defaults scaled to `space`.
    pub fn for_space(space: &SearchSpace, seed: u64) -> Self {
        let budget = ((space.size() as f64 * DEFAULT_BUDGET_FRACTION).ceil() as usize).max(DEFAULT_INIT);
        Self { budget, init: DEFAULT_INIT, seed, top_k: DEFAULT_TOP_K, jitter: DEFAULT_JITTER }
    }

    fn validate(&self) -> Result<()> {
        if self.init < 2 || self.budget < self.init {
            return Err(invalid(format!("need budget ≥ init ≥ 2, got budget {} and init {}", self.budget, self.init)));
        }
        if self.top_k == 0 {
            return Err(invalid("top-k must be at least 1"));
        }
        if !(self.jitter > 0.0) {
            return Err(invalid("GP jitter must be positive"));
        }
        Ok(())
    }
}

/// Gaussian-process regressor with an RBF kernel of unit length scale on
/// standardized targets.
pub struct GaussianProcess {
    points: Vec<Vec<f64>>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    mean: f64,
    scale: f64,
    /// Jitter actually used after escalation.
    pub jitter: f64,
}

fn rbf(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * d2).exp()
}

impl GaussianProcess {
    /// Fit to observations, escalating the diagonal jitter tenfold up to 1e-2
    /// while the kernel matrix is not positive definite.
    pub fn fit(points: &[Vec<f64>], values: &[f64], jitter: f64) -> Result<Self> {
        let n = points.len();
        if n == 0 || n != values.len() {
            return Err(invalid("GP needs matching, nonempty points and values"));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(n, values.iter().map(|v| (v - mean) / scale));
        let k = DMatrix::from_fn(n, n, |i, j| rbf(&points[i], &points[j]));
        let mut j = jitter;
        loop {
            let kj = &k + DMatrix::identity(n, n) * j;
            if let Some(chol) = kj.cholesky() {
                let alpha = chol.solve(&y);
                return Ok(Self { points: points.to_vec(), chol, alpha, mean, scale, jitter: j });
            }
            j *= 10.0;
            if j > MAX_JITTER {
                return Err(Error::Search(format!("kernel matrix singular even with jitter {MAX_JITTER}")));
            }
        }
    }

    /// Posterior mean and standard deviation in the original units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.points.len(), self.points.iter().map(|p| rbf(p, x)));
        let mu = ks.dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("triangular factor is invertible");
        let var = (1.0 - v.dot(&v)).max(0.0);
        (self.mean + self.scale * mu, self.scale * var.sqrt())
    }

    fn predict_standardized(&self, x: &[f64]) -> (f64, f64) {
        let (m, s) = self.predict(x);
        ((m - self.mean) / self.scale, s / self.scale)
    }

}

/// Expected improvement over `best` for a normal posterior.
pub fn expected_improvement(mean: f64, std: f64, best: f64, xi: f64) -> f64 {
    let imp = mean - best - xi;
    if std <= 1e-12 {
        return imp.max(0.0);
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    let z = imp / std;
    imp * n.cdf(z) + std * n.pdf(z)
}

#[derive(Clone, Debug)]
pub struct BayesOutcome {
    pub outcome: SearchOutcome,
    /// Choices appearing among the top-k records.
    pub reduced: SearchSpace,
}

/// Random initial design, then one expected-improvement proposal at a time.
pub fn bayes_search<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    cfg: &BayesConfig,
    log: Option<&mut SearchLog>,
) -> Result<BayesOutcome> {
    cfg.validate()?;
    let size = space.size();
    let budget = cfg.budget.min(size);
    let init = cfg.init.min(size);
    let mut s = Session::new(space, evaluator, log);
    let mut rng = stream_rng(cfg.seed, 0xb0);
    let mut first = rand::seq::index::sample(&mut rng, size, init).into_vec();
    first.sort_unstable();
    s.run(&first, Phase::Init)?;
    let encodings: Vec<Vec<f64>> = (0..size).map(|i| space.encode(i)).collect();
    while s.records.len() < budget {
        let observed: Vec<(usize, f64)> = s.records.iter().filter_map(|(i, r)| r.a_pr.map(|v| (*i, v))).collect();
        let next = if observed.is_empty() {
            (0..size).find(|i| !s.seen.contains_key(i))
        } else {
            let pts: Vec<Vec<f64>> = observed.iter().map(|(i, _)| encodings[*i].clone()).collect();
            let vals: Vec<f64> = observed.iter().map(|(_, v)| *v).collect();
            let gp = GaussianProcess::fit(&pts, &vals, cfg.jitter)?;
            let best = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let best = (best - gp.mean) / gp.scale;
            let scores: Vec<(usize, f64)> = (0..size)
                .into_par_iter()
                .filter(|i| !s.seen.contains_key(i))
                .map(|i| {
                    let (m, sd) = gp.predict_standardized(&encodings[i]);
                    (i, expected_improvement(m, sd, best, EI_XI))
                })
                .collect();
            scores.into_iter().fold(None, |acc: Option<(usize, f64)>, (i, ei)| match acc {
                Some((_, b)) if b >= ei => acc,
                _ => Some((i, ei)),
            })
            .map(|(i, _)| i)
        };
        let Some(next) = next else { break };
        s.run(&[next], Phase::Bayes)?;
    }
    let reduced = reduce(space, &s.records, cfg.top_k);
    Ok(BayesOutcome { outcome: finish(s)?, reduced })
}

fn reduce(space: &SearchSpace, records: &[(usize, SearchRecord)], top_k: usize) -> SearchSpace {
    let mut ok: Vec<(usize, f64)> = records.iter().filter_map(|(i, r)| r.a_pr.map(|v| (*i, v))).collect();
    ok.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep = vec![BTreeSet::new(); space.dims().len()];
    for (i, _) in ok.iter().take(top_k) {
        for (d, c) in space.choices(*i).into_iter().enumerate() {
            keep[d].insert(c);
        }
    }
    if ok.is_empty() {
        return space.clone();
    }
    space.restrict(&keep)
}

#[derive(Clone, Debug)]
pub struct HybridOutcome {
    pub outcome: SearchOutcome,
    pub reduced: SearchSpace,
    /// `1 - |reduced| / |space|`.
    pub reduction: f64,
    /// Distinct configurations evaluated over both phases.
    pub evaluations: usize,
}

/// Bayesian phase, then every configuration of the reduced space not yet
/// evaluated; the best record over both phases wins.
pub fn hybrid_search<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    evaluator: &E,
    cfg: &BayesConfig,
    mut log: Option<&mut SearchLog>,
) -> Result<HybridOutcome> {
    let bo = bayes_search(space, evaluator, cfg, log.as_deref_mut())?;
    let mut s = Session::new(space, evaluator, log);
    s.calls = bo.outcome.calls;
    for (i, r) in bo.outcome.records {
        s.seen.insert(i, s.records.len());
        s.records.push((i, r));
    }
    let grid: Vec<usize> = (0..bo.reduced.size())
        .map(|j| space.locate(&bo.reduced.config(j)).expect("reduced space is a subspace"))
        .collect();
    s.run(&grid, Phase::Grid)?;
    let reduction = 1.0 - bo.reduced.size() as f64 / space.size() as f64;
    let outcome = finish(s)?;
    Ok(HybridOutcome { evaluations: outcome.evaluations(), outcome, reduced: bo.reduced, reduction })
}
