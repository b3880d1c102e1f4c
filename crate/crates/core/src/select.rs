//! Budgeted measurement selection.
//!
//! Every selector maximizes the normalized log-det criterion
//! `f(F) = log det(base + Σ_{k∈F} Q_k) − log det(base)` under `|F| ≤ B`.
//! Ties between equal gains always go to the lowest atom id, so all
//! selectors are deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim::{total_information, AtomId, FimState, InfoAtom};

/// Largest number of subsets the exhaustive oracle will enumerate.
pub const ORACLE_LIMIT: f64 = 1e6;

// Candidate counts above this are scored in parallel.
const PARALLEL_THRESHOLD: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Greedy,
    Lazy,
    Random,
    Oracle,
    Independent,
    Cooperative,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Greedy => "greedy",
            Algorithm::Lazy => "lazy",
            Algorithm::Random => "random",
            Algorithm::Oracle => "oracle",
            Algorithm::Independent => "independent",
            Algorithm::Cooperative => "cooperative",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "greedy" | "fim" => Algorithm::Greedy,
            "lazy" => Algorithm::Lazy,
            "random" => Algorithm::Random,
            "oracle" => Algorithm::Oracle,
            "independent" => Algorithm::Independent,
            "cooperative" => Algorithm::Cooperative,
            other => return Err(Error::Config(format!("unknown algorithm `{other}`"))),
        })
    }
}

/// Candidate atoms available to one agent together with its budget.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub agent_id: String,
    atoms: Vec<InfoAtom>,
    pub budget: usize,
}

impl CandidatePool {
    pub fn new(agent_id: impl Into<String>, atoms: Vec<InfoAtom>, budget: usize) -> Result<Self> {
        let mut ids: Vec<_> = atoms.iter().map(InfoAtom::id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate atom id {}", w[0])));
        }
        if let Some(a) = atoms.iter().skip(1).find(|a| a.dim() != atoms[0].dim()) {
            return Err(Error::Dimension { expected: atoms[0].dim(), got: a.dim() });
        }
        Ok(CandidatePool { agent_id: agent_id.into(), atoms, budget })
    }

    pub fn atoms(&self) -> &[InfoAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn get(&self, id: AtomId) -> Option<&InfoAtom> {
        self.atoms.iter().find(|a| a.id() == id)
    }

    /// Number of picks a full selection makes.
    pub fn picks(&self) -> usize {
        self.budget.min(self.atoms.len())
    }

    pub fn with_budget(&self, budget: usize) -> Self {
        CandidatePool { budget, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub algorithm: Algorithm,
    pub agent_id: String,
    /// Chosen atom ids in pick order.
    pub chosen: Vec<AtomId>,
    /// Marginal gain realized at each pick.
    pub gains: Vec<f64>,
    /// Criterion value of the chosen set relative to the base.
    pub value: f64,
    /// Number of marginal-gain (or set-value) evaluations performed.
    pub evaluations: usize,
}

impl SelectionResult {
    fn empty(algorithm: Algorithm, agent_id: &str) -> Self {
        SelectionResult { algorithm, agent_id: agent_id.to_owned(), chosen: Vec::new(), gains: Vec::new(), value: 0.0, evaluations: 0 }
    }

    /// Criterion value after each pick.
    pub fn criterion_trace(&self) -> Vec<f64> {
        self.gains
            .iter()
            .scan(0.0, |acc, g| {
                *acc += g;
                Some(*acc)
            })
            .collect()
    }
}

fn score(state: &FimState, candidates: &[&InfoAtom]) -> Vec<f64> {
    if candidates.len() >= PARALLEL_THRESHOLD {
        candidates.par_iter().map(|a| state.logdet_gain(a)).collect()
    } else {
        candidates.iter().map(|a| state.logdet_gain(a)).collect()
    }
}

fn sorted_by_id(pool: &CandidatePool) -> Vec<&InfoAtom> {
    let mut atoms: Vec<&InfoAtom> = pool.atoms.iter().collect();
    atoms.sort_by_key(|a| a.id());
    atoms
}

/// Plain greedy: each step evaluates every remaining candidate and adds the
/// one with the largest marginal gain.
pub fn greedy_select(pool: &CandidatePool, base: &DMatrix<f64>) -> Result<SelectionResult> {
    let mut state = FimState::new(base)?;
    let mut result = SelectionResult::empty(Algorithm::Greedy, &pool.agent_id);
    let mut remaining = sorted_by_id(pool);
    for _ in 0..pool.picks() {
        let gains = score(&state, &remaining);
        result.evaluations += gains.len();
        // strict comparison keeps the lowest id on ties
        let mut best = 0;
        for (i, &g) in gains.iter().enumerate().skip(1) {
            if g > gains[best] {
                best = i;
            }
        }
        let atom = remaining.remove(best);
        let gain = state.push(atom)?;
        result.chosen.push(atom.id());
        result.gains.push(gain);
    }
    result.value = state.value();
    Ok(result)
}

#[derive(Debug)]
struct Bound {
    gain: f64,
    id: AtomId,
    index: usize,
    step: usize,
}

impl PartialEq for Bound {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Bound {}

impl PartialOrd for Bound {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Bound {
    // max-heap: larger gain first, then smaller id
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain.total_cmp(&other.gain).then_with(|| other.id.cmp(&self.id))
    }
}

/// Accelerated greedy. Marginal gains only shrink as the selection grows, so
/// a stale gain is an upper bound; only candidates whose bound can still win
/// are re-evaluated. Picks exactly what [`greedy_select`] picks.
pub fn lazy_greedy_select(pool: &CandidatePool, base: &DMatrix<f64>) -> Result<SelectionResult> {
    let mut state = FimState::new(base)?;
    let mut result = SelectionResult::empty(Algorithm::Lazy, &pool.agent_id);
    let atoms = sorted_by_id(pool);
    if pool.picks() == 0 {
        result.value = state.value();
        return Ok(result);
    }
    let initial = score(&state, &atoms);
    result.evaluations += initial.len();
    let mut heap: BinaryHeap<Bound> = initial
        .into_iter()
        .enumerate()
        .map(|(index, gain)| Bound { gain, id: atoms[index].id(), index, step: 0 })
        .collect();

    for step in 0..pool.picks() {
        // Refresh entries until the best fresh gain clears every remaining
        // bound. Bounds within rounding of the leader are refreshed too so the
        // tie-break matches the plain greedy exactly.
        let mut fresh: Vec<Bound> = Vec::new();
        let mut best: Option<(f64, AtomId)> = None;
        while let Some(top) = heap.peek() {
            if let Some((g, _)) = best {
                if top.gain < g - 1e-12 * g.abs().max(1.0) {
                    break;
                }
            }
            let mut entry = heap.pop().unwrap();
            if entry.step != step {
                entry.gain = state.logdet_gain(atoms[entry.index]);
                entry.step = step;
                result.evaluations += 1;
            }
            let better = match best {
                None => true,
                Some((g, id)) => entry.gain > g || (entry.gain == g && entry.id < id),
            };
            if better {
                best = Some((entry.gain, entry.id));
            }
            fresh.push(entry);
        }
        let (_, winner) = best.expect("heap holds at least one candidate per pick");
        for entry in fresh {
            if entry.id == winner {
                let gain = state.push(atoms[entry.index])?;
                result.chosen.push(entry.id);
                result.gains.push(gain);
            } else {
                heap.push(entry);
            }
        }
    }
    result.value = state.value();
    Ok(result)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

// Depth-first enumeration of k-subsets in lexicographic order, accumulating
// the information matrix along the way.
fn enumerate_subsets(
    atoms: &[&InfoAtom],
    k: usize,
    start: usize,
    current: &mut Vec<usize>,
    total: &DMatrix<f64>,
    visit: &mut dyn FnMut(&[usize], &DMatrix<f64>),
) {
    if current.len() == k {
        visit(current, total);
        return;
    }
    let need = k - current.len();
    for i in start..=atoms.len() - need {
        let next = total_information(total, [atoms[i]]);
        current.push(i);
        enumerate_subsets(atoms, k, i + 1, current, &next, visit);
        current.pop();
    }
}

fn logdet_or_neg_inf(m: &DMatrix<f64>) -> f64 {
    crate::fim::logdet_spd(m).unwrap_or(f64::NEG_INFINITY)
}

/// Exhaustive optimum over all subsets of size `min(B, |K|)`; ties go to the
/// lexicographically smallest id set. Refuses when the subset count exceeds
/// [`ORACLE_LIMIT`].
pub fn brute_force_select(pool: &CandidatePool, base: &DMatrix<f64>) -> Result<SelectionResult> {
    let state = FimState::new(base)?;
    let k = pool.picks();
    let combos = binomial(pool.len(), k);
    if combos > ORACLE_LIMIT {
        return Err(Error::OracleGuard { combinations: combos, limit: ORACLE_LIMIT });
    }
    let atoms = sorted_by_id(pool);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut evaluations = 0;
    enumerate_subsets(&atoms, k, 0, &mut Vec::with_capacity(k), state.total(), &mut |subset, total| {
        evaluations += 1;
        let v = logdet_or_neg_inf(total);
        if best.as_ref().is_none_or(|(b, _)| v > *b) {
            best = Some((v, subset.to_vec()));
        }
    });
    let (_, indices) = best.unwrap_or_default();
    let mut result = replay(Algorithm::Oracle, pool, base, indices.iter().map(|&i| atoms[i]))?;
    result.evaluations = evaluations;
    Ok(result)
}

// Push the given atoms in order and record the realized gains.
fn replay<'a>(
    algorithm: Algorithm,
    pool: &CandidatePool,
    base: &DMatrix<f64>,
    atoms: impl IntoIterator<Item = &'a InfoAtom>,
) -> Result<SelectionResult> {
    let mut state = FimState::new(base)?;
    let mut result = SelectionResult::empty(algorithm, &pool.agent_id);
    for atom in atoms {
        let gain = state.push(atom)?;
        result.chosen.push(atom.id());
        result.gains.push(gain);
    }
    result.value = state.value();
    Ok(result)
}

/// Uniform sample of `min(B, |K|)` atoms without replacement. Gains are
/// reported against `base` in sample order.
pub fn random_select(pool: &CandidatePool, base: &DMatrix<f64>, seed: u64) -> Result<SelectionResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = sorted_by_id(pool);
    let picked = sample(&mut rng, atoms.len(), pool.picks());
    replay(Algorithm::Random, pool, base, picked.into_iter().map(|i| atoms[i]))
}

/// Selections for several agents plus the value of their union.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSelection {
    pub per_agent: Vec<SelectionResult>,
    /// Criterion value of the union of all agents' picks relative to `q0`.
    pub joint_value: f64,
}

impl JointSelection {
    pub fn chosen(&self) -> impl Iterator<Item = AtomId> + '_ {
        self.per_agent.iter().flat_map(|r| r.chosen.iter().copied())
    }
}

fn joint_value(pools: &[CandidatePool], results: &[SelectionResult], q0: &DMatrix<f64>) -> Result<f64> {
    let mut state = FimState::new(q0)?;
    for (pool, res) in pools.iter().zip(results) {
        for id in &res.chosen {
            let atom = pool.get(*id).expect("selection refers to its own pool");
            if !state.contains(*id) {
                state.push(atom)?;
            }
        }
    }
    Ok(state.value())
}

/// Sequential selection: each agent runs greedy against `q0` plus the
/// information already selected by the agents before it.
pub fn cooperative_select(pools: &[CandidatePool], q0: &DMatrix<f64>) -> Result<JointSelection> {
    let mut shared = FimState::new(q0)?.total().clone();
    let mut per_agent = Vec::with_capacity(pools.len());
    for pool in pools {
        let mut res = greedy_select(pool, &shared)?;
        res.algorithm = Algorithm::Cooperative;
        shared = total_information(&shared, res.chosen.iter().map(|id| pool.get(*id).unwrap()));
        per_agent.push(res);
    }
    let joint_value = joint_value(pools, &per_agent, q0)?;
    Ok(JointSelection { per_agent, joint_value })
}

/// Each agent runs greedy against the same `q0` without sharing.
pub fn independent_select(pools: &[CandidatePool], q0: &DMatrix<f64>) -> Result<JointSelection> {
    let per_agent = pools
        .iter()
        .map(|pool| {
            greedy_select(pool, q0).map(|mut r| {
                r.algorithm = Algorithm::Independent;
                r
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let joint_value = joint_value(pools, &per_agent, q0)?;
    Ok(JointSelection { per_agent, joint_value })
}

/// Exhaustive joint optimum over the product of every agent's feasible sets.
pub fn brute_force_joint(pools: &[CandidatePool], q0: &DMatrix<f64>) -> Result<JointSelection> {
    let state = FimState::new(q0)?;
    let combos: f64 = pools.iter().map(|p| binomial(p.len(), p.picks())).product();
    if combos > ORACLE_LIMIT {
        return Err(Error::OracleGuard { combinations: combos, limit: ORACLE_LIMIT });
    }
    let sorted: Vec<Vec<&InfoAtom>> = pools.iter().map(sorted_by_id).collect();

    fn recurse(
        sorted: &[Vec<&InfoAtom>],
        pools: &[CandidatePool],
        agent: usize,
        total: &DMatrix<f64>,
        prefix: &mut Vec<Vec<usize>>,
        best: &mut Option<(f64, Vec<Vec<usize>>)>,
    ) {
        if agent == sorted.len() {
            let v = logdet_or_neg_inf(total);
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                *best = Some((v, prefix.clone()));
            }
            return;
        }
        let k = pools[agent].picks();
        enumerate_subsets(&sorted[agent], k, 0, &mut Vec::new(), total, &mut |subset, t| {
            prefix.push(subset.to_vec());
            recurse(sorted, pools, agent + 1, t, prefix, best);
            prefix.pop();
        });
    }

    let mut best = None;
    recurse(&sorted, pools, 0, state.total(), &mut Vec::new(), &mut best);
    let (_, picks) = best.unwrap_or_else(|| (0.0, vec![Vec::new(); pools.len()]));
    let per_agent = pools
        .iter()
        .zip(&sorted)
        .zip(&picks)
        .map(|((pool, atoms), idx)| replay(Algorithm::Oracle, pool, q0, idx.iter().map(|&i| atoms[i])))
        .collect::<Result<Vec<_>>>()?;
    let joint_value = joint_value(pools, &per_agent, q0)?;
    Ok(JointSelection { per_agent, joint_value })
}

/// Mix `parts` into `base` to get an independent seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |h, &p| mix(h.rotate_left(17) ^ mix(p)))
}

/// Run `algorithm` over all agents. Per-agent selectors (greedy, lazy,
/// random) treat agents independently; `oracle` optimizes jointly when there
/// is more than one agent. `seed` only matters for `random`.
pub fn run_selector(algorithm: Algorithm, pools: &[CandidatePool], q0: &DMatrix<f64>, seed: u64) -> Result<JointSelection> {
    let per_agent = |f: &dyn Fn(usize, &CandidatePool) -> Result<SelectionResult>| -> Result<JointSelection> {
        let per_agent = pools.iter().enumerate().map(|(i, p)| f(i, p)).collect::<Result<Vec<_>>>()?;
        let joint_value = joint_value(pools, &per_agent, q0)?;
        Ok(JointSelection { per_agent, joint_value })
    };
    match algorithm {
        Algorithm::Greedy => per_agent(&|_, p| greedy_select(p, q0)),
        Algorithm::Lazy => per_agent(&|_, p| lazy_greedy_select(p, q0)),
        Algorithm::Random => per_agent(&|i, p| random_select(p, q0, derive_seed(seed, &[i as u64]))),
        Algorithm::Oracle if pools.len() <= 1 => per_agent(&|_, p| brute_force_select(p, q0)),
        Algorithm::Oracle => brute_force_joint(pools, q0),
        Algorithm::Independent => independent_select(pools, q0),
        Algorithm::Cooperative => cooperative_select(pools, q0),
    }
}
