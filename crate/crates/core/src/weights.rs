//! IPTW weights over length-`k` treatment windows, slice probabilities, and
//! the weight/target tensors of the approximation problem.
//!
//! Denominators come straight from the known policy evaluated on the realized
//! panel. Numerators marginalize the covariates: a pool of unconstrained
//! particles is simulated forward under the policy, and for every period the
//! realized treatment windows are organised in a trie whose nodes carry
//! importance-weighted particle sets forced along that branch. A node's value
//! is the weighted mean propensity of its branch's treatment, i.e.
//! `P(A_s = a_s | A_{window start..s-1})`.
//!
//! The generative model has no unit argument, so these tables are shared by
//! all units and computed once per `(period, window)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{check_k, realized_histories, PanelData};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, stream_id, tag};
use crate::tensor::DenseTensor3;

/// Known treatment policy, evaluated on a realized panel history.
pub trait PropensityModel: Sync {
    /// `P(A_{i,t} = 1 | A_{i,<t}, L_{i,≤t})` for cell `(unit, period)`.
    fn propensity(&self, panel: &PanelData, unit: usize, period: usize) -> f64;

    /// Margin δ such that every propensity must lie in `(δ, 1 − δ)`.
    /// Zero disables the positivity check.
    fn positivity_margin(&self) -> f64 {
        0.0
    }
}

/// Forward simulator for covariates under the policy.
pub trait GenerativeModel: Sync {
    /// Whatever the policy needs to remember about a unit's past.
    type State: Clone + Send + Sync;

    fn initial_state(&self) -> Self::State;

    /// Draw the covariates of `period` into `state` and return the propensity
    /// of treatment at that period.
    fn draw(&self, state: &mut Self::State, period: usize, rng: &mut ChaCha8Rng) -> f64;

    /// Record the treatment received at `period`.
    fn treat(&self, state: &mut Self::State, period: usize, a: u8);

    /// Exact covariate distribution at `period`, for small discrete models:
    /// `(probability, state after drawing, propensity)` per support point.
    fn enumerate(&self, _state: &Self::State, _period: usize) -> Option<Vec<(f64, Self::State, f64)>> {
        None
    }
}

/// Monte Carlo settings shared by window weights and stabilized weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Floor on realized slice probabilities before division; `None` means `1/(2·n_samples)`.
    pub floor: Option<f64>,
    /// Use the generative model's exact enumeration instead of sampling.
    pub exact: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            seed: 0,
            floor: None,
            exact: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(invalid("n_samples must be at least 1"));
        }
        if let Some(f) = self.floor {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid(format!("slice probability floor must be in (0, 1], got {f}")));
            }
        }
        Ok(())
    }

    pub fn effective_floor(&self) -> f64 {
        self.floor.unwrap_or(1.0 / (2.0 * self.n_samples as f64))
    }
}

/// Tracks the most extreme probability that entered a weight.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Extremes {
    pub min_margin: f64,
}

impl Extremes {
    pub fn new() -> Self {
        Self { min_margin: 0.5 }
    }

    pub fn record(&mut self, p: f64) {
        self.min_margin = self.min_margin.min(p.min(1.0 - p));
    }

    pub fn merge(&mut self, other: Extremes) {
        self.min_margin = self.min_margin.min(other.min_margin);
    }
}

#[inline]
pub(crate) fn prob_of(pi: f64, a: u8) -> f64 {
    if a == 1 {
        pi
    } else {
        1.0 - pi
    }
}

fn check_positivity<P: PropensityModel + ?Sized>(pm: &P, pi: f64, unit: usize, period: usize) -> Result<()> {
    let delta = pm.positivity_margin();
    let bad = !pi.is_finite() || (delta > 0.0 && !(pi > delta && pi < 1.0 - delta));
    if bad {
        return Err(Error::Positivity {
            unit,
            period,
            prob: pi,
            delta,
        });
    }
    Ok(())
}

/// Window of real periods `[start, t]` feeding cell `t` with history length `k`.
fn window_start(t: usize, k: usize) -> usize {
    (t + 1).saturating_sub(k)
}

/// `Π_s P(A_{i,s} = a_{i,s} | past)` over the window, from the known policy.
pub fn denominator_prob<P: PropensityModel + ?Sized>(
    pm: &P,
    panel: &PanelData,
    i: usize,
    t: usize,
    k: usize,
) -> Result<f64> {
    check_cell(panel, i, t, k)?;
    let mut prod = 1.0;
    for s in window_start(t, k)..=t {
        let pi = pm.propensity(panel, i, s);
        check_positivity(pm, pi, i, s)?;
        prod *= prob_of(pi, panel.treatment(i, s));
    }
    Ok(prod)
}

fn check_cell(panel: &PanelData, i: usize, t: usize, k: usize) -> Result<()> {
    check_k(k)?;
    if k > panel.n_periods() {
        return Err(invalid(format!("k={k} exceeds T={}", panel.n_periods())));
    }
    if i >= panel.n_units() || t >= panel.n_periods() {
        return Err(invalid(format!(
            "cell ({i}, {t}) outside panel of {} units and {} periods",
            panel.n_units(),
            panel.n_periods()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// particle machinery

/// A weighted particle population. In exact mode the "particles" are the
/// support points of the state distribution and weights are probabilities.
#[derive(Clone)]
pub(crate) struct Particles<S> {
    states: Vec<S>,
    weights: Vec<f64>,
}

impl<S: Clone> Particles<S> {
    pub fn uniform(state: S, n: usize) -> Self {
        Self {
            states: vec![state; n],
            weights: vec![1.0; n],
        }
    }
}

/// Hard cap on the support size tracked by exact enumeration.
const EXACT_SUPPORT_LIMIT: usize = 1 << 20;

/// Advance a particle set through `period` with treatment forced to `a`.
/// Returns the weighted mean probability of `a`.
pub(crate) fn advance_forced<G: GenerativeModel>(
    model: &G,
    parts: &mut Particles<G::State>,
    period: usize,
    a: u8,
    exact: bool,
    rng: &mut ChaCha8Rng,
    extremes: &mut Extremes,
) -> Result<f64> {
    let n_nominal = parts.states.len();
    if exact {
        let mut states = Vec::new();
        let mut weights = Vec::new();
        let (mut total, mut hit) = (0.0, 0.0);
        for (st, &w) in parts.states.iter().zip(&parts.weights) {
            let support = model
                .enumerate(st, period)
                .ok_or_else(|| invalid("exact weights requested but the model cannot enumerate covariates"))?;
            for (mass, mut next, pi) in support {
                extremes.record(pi);
                let m = w * mass;
                let kept = m * prob_of(pi, a);
                total += m;
                hit += kept;
                if kept > 0.0 {
                    model.treat(&mut next, period, a);
                    states.push(next);
                    weights.push(kept);
                }
            }
        }
        if states.len() > EXACT_SUPPORT_LIMIT {
            return Err(invalid("exact enumeration support exceeds the supported size"));
        }
        if !(total > 0.0) || !(hit > 0.0) {
            return Err(Error::NoConsistentPaths {
                period,
                n_samples: n_nominal,
            });
        }
        parts.states = states;
        parts.weights = weights;
        return Ok(hit / total);
    }

    let mut total = 0.0;
    let mut hit = 0.0;
    for (st, w) in parts.states.iter_mut().zip(parts.weights.iter_mut()) {
        let pi = model.draw(st, period, rng);
        extremes.record(pi);
        let pa = prob_of(pi, a);
        total += *w;
        hit += *w * pa;
        *w *= pa;
        model.treat(st, period, a);
    }
    if !(total > 0.0) || !(hit > 0.0) {
        return Err(Error::NoConsistentPaths {
            period,
            n_samples: n_nominal,
        });
    }
    let mean = hit / n_nominal as f64;
    for w in parts.weights.iter_mut() {
        *w /= mean;
    }
    maybe_resample(parts, rng);
    Ok(hit / total)
}

/// Systematic resampling when the effective sample size drops below half.
fn maybe_resample<S: Clone>(parts: &mut Particles<S>, rng: &mut ChaCha8Rng) {
    let n = parts.weights.len();
    let sum: f64 = parts.weights.iter().sum();
    let sum_sq: f64 = parts.weights.iter().map(|w| w * w).sum();
    if sum * sum >= 0.5 * n as f64 * sum_sq {
        return;
    }
    let step = sum / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut acc = parts.weights[0];
    let mut j = 0;
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        while u > acc && j + 1 < n {
            j += 1;
            acc += parts.weights[j];
        }
        states.push(parts.states[j].clone());
        u += step;
    }
    parts.states = states;
    parts.weights = vec![1.0; n];
}

/// Prefix tree over treatment paths that share a starting period. Each node
/// carries a key derived from its path, so a node's random stream depends only
/// on the treatments leading to it, not on which other paths are present.
pub(crate) struct Trie {
    children: Vec<[u32; 2]>,
    keys: Vec<u64>,
}

const NONE: u32 = u32::MAX;

impl Trie {
    pub fn new() -> Self {
        Self {
            children: vec![[NONE; 2]],
            keys: vec![0],
        }
    }

    /// Insert a path and return the node index of every prefix (excluding the root).
    pub fn insert(&mut self, path: &[u8]) -> Vec<usize> {
        let mut node = 0usize;
        let mut out = Vec::with_capacity(path.len());
        for (depth, &a) in path.iter().enumerate() {
            let slot = self.children[node][a as usize];
            node = if slot == NONE {
                let key = stream_id(self.keys[node], a as u64 + 1, depth as u64 + 1);
                self.children.push([NONE; 2]);
                self.keys.push(key);
                let id = self.children.len() - 1;
                self.children[node][a as usize] = id as u32;
                id
            } else {
                slot as usize
            };
            out.push(node);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }
}

/// Evaluate the conditional probability at every trie node, starting from
/// `root` particles positioned just before `start_period`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate_trie<G: GenerativeModel>(
    model: &G,
    trie: &Trie,
    root: Particles<G::State>,
    start_period: usize,
    exact: bool,
    seed: u64,
    stream_tag: u64,
    key: u64,
) -> Result<(Vec<f64>, Extremes)> {
    let mut values = vec![1.0; trie.len()];
    let mut extremes = Extremes::new();
    // explicit stack: (node, particles, period of its children)
    let mut stack = vec![(0usize, root, start_period)];
    while let Some((node, parts, period)) = stack.pop() {
        let kids: Vec<(u8, usize)> = (0..2u8)
            .filter_map(|a| {
                let c = trie.children[node][a as usize];
                (c != NONE).then_some((a, c as usize))
            })
            .collect();
        let mut parent = Some(parts);
        for (idx, &(a, child)) in kids.iter().enumerate() {
            let mut p = if idx + 1 == kids.len() {
                parent.take().expect("parent particles present")
            } else {
                parent.as_ref().expect("parent particles present").clone()
            };
            let mut rng = stream(seed, stream_tag, key, trie.keys[child]);
            values[child] = advance_forced(model, &mut p, period, a, exact, &mut rng, &mut extremes)?;
            if trie.children[child] != [NONE; 2] {
                stack.push((child, p, period + 1));
            }
        }
    }
    Ok((values, extremes))
}

/// Unconstrained pool, advanced one period at a time, counting window patterns.
struct Pool<S> {
    parts: Particles<S>,
    patterns: Vec<usize>,
    mask: usize,
}

impl<S: Clone> Pool<S> {
    fn new(state: S, n: usize, k: usize) -> Self {
        Self {
            parts: Particles::uniform(state, n),
            patterns: vec![0; n],
            mask: (1usize << k) - 1,
        }
    }

    /// Snapshot for a window trie: current states, uniform weights (or the
    /// current masses in exact mode).
    fn snapshot(&self) -> Particles<S> {
        self.parts.clone()
    }

    /// Advance through `period` with treatments drawn from the policy and
    /// return the distribution of window patterns ending at `period`.
    fn advance<G: GenerativeModel<State = S>>(
        &mut self,
        model: &G,
        period: usize,
        exact: bool,
        rng: &mut ChaCha8Rng,
        extremes: &mut Extremes,
    ) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; self.mask + 1];
        if exact {
            let mut states = Vec::new();
            let mut weights = Vec::new();
            let mut patterns = Vec::new();
            for ((st, &w), &pat) in self.parts.states.iter().zip(&self.parts.weights).zip(&self.patterns) {
                let support = model
                    .enumerate(st, period)
                    .ok_or_else(|| invalid("exact weights requested but the model cannot enumerate covariates"))?;
                for (mass, next, pi) in support {
                    extremes.record(pi);
                    for a in 0..2u8 {
                        let m = w * mass * prob_of(pi, a);
                        if m > 0.0 {
                            let mut s = next.clone();
                            model.treat(&mut s, period, a);
                            let np = ((pat << 1) | a as usize) & self.mask;
                            counts[np] += m;
                            states.push(s);
                            weights.push(m);
                            patterns.push(np);
                        }
                    }
                }
            }
            if states.len() > EXACT_SUPPORT_LIMIT {
                return Err(invalid("exact enumeration support exceeds the supported size"));
            }
            self.parts = Particles { states, weights };
            self.patterns = patterns;
            let total: f64 = counts.iter().sum();
            counts.iter_mut().for_each(|c| *c /= total);
            return Ok(counts);
        }
        for (st, pat) in self.parts.states.iter_mut().zip(self.patterns.iter_mut()) {
            let pi = model.draw(st, period, rng);
            extremes.record(pi);
            let a = u8::from(rng.random::<f64>() < pi);
            model.treat(st, period, a);
            *pat = ((*pat << 1) | a as usize) & self.mask;
            counts[*pat] += 1.0;
        }
        let n = self.patterns.len() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        Ok(counts)
    }
}

/// Numerator factors and slice probabilities for one panel.
struct WindowTables {
    /// Per cell: product of numerator factors over the window.
    numerators: Vec<f64>,
    /// Per period: distribution over window patterns.
    slice: Vec<Vec<f64>>,
    extremes: Extremes,
}

fn window_tables<G: GenerativeModel>(
    model: &G,
    panel: &PanelData,
    k: usize,
    mc: &McConfig,
) -> Result<WindowTables> {
    mc.validate()?;
    let (n, t_len) = (panel.n_units(), panel.n_periods());
    let n_particles = if mc.exact { 1 } else { mc.n_samples };
    let mut pool = Pool::new(model.initial_state(), n_particles, k);
    let mut numerators = vec![1.0; n * t_len];
    let mut slice = Vec::with_capacity(t_len);
    let mut extremes = Extremes::new();

    let run_window = |t: usize, root: Particles<G::State>, numerators: &mut Vec<f64>| -> Result<Extremes> {
        let start = window_start(t, k);
        let mut trie = Trie::new();
        let paths: Vec<Vec<usize>> = (0..n)
            .map(|i| trie.insert(&panel.unit_treatments(i)[start..=t]))
            .collect();
        let (values, ext) = evaluate_trie(model, &trie, root, start, mc.exact, mc.seed, tag::WINDOW_TREE, start as u64)?;
        for (i, nodes) in paths.iter().enumerate() {
            numerators[i * t_len + t] = nodes.iter().map(|&node| values[node]).product();
        }
        Ok(ext)
    };

    for s in 0..t_len {
        // windows starting at period s (all early windows start at 0)
        let first = if s == 0 { 0 } else { s + k - 1 };
        let last = if s == 0 { (k - 1).min(t_len - 1) } else { s + k - 1 };
        for t in first..=last {
            if t < t_len {
                let ext = run_window(t, pool.snapshot(), &mut numerators)?;
                extremes.merge(ext);
            }
        }
        let mut rng = stream(mc.seed, tag::POOL, s as u64, 0);
        slice.push(pool.advance(model, s, mc.exact, &mut rng, &mut extremes)?);
    }
    Ok(WindowTables {
        numerators,
        slice,
        extremes,
    })
}

/// Single-cell numerator estimate, simulated independently of the panel-wide
/// tables. Clipped into `[δ^k, 1]` for the policy's positivity margin δ.
#[allow(clippy::too_many_arguments)]
pub fn numerator_prob_mc<P, G>(
    pm: &P,
    model: &G,
    panel: &PanelData,
    i: usize,
    t: usize,
    k: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64>
where
    P: PropensityModel + ?Sized,
    G: GenerativeModel,
{
    check_cell(panel, i, t, k)?;
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let start = window_start(t, k);
    let mut pool = Pool::new(model.initial_state(), n_samples, k);
    let mut ext = Extremes::new();
    for s in 0..start {
        let mut rng = stream(seed, tag::SINGLE_CELL, s as u64, u64::MAX);
        pool.advance(model, s, false, &mut rng, &mut ext)?;
    }
    let mut trie = Trie::new();
    let nodes = trie.insert(&panel.unit_treatments(i)[start..=t]);
    let (values, _) = evaluate_trie(model, &trie, pool.snapshot(), start, false, seed, tag::SINGLE_CELL, start as u64)?;
    let prod: f64 = nodes.iter().map(|&node| values[node]).product();
    let delta = pm.positivity_margin();
    Ok(prod.clamp(delta.powi(k as i32), 1.0))
}

/// Window weights `w_{i,t}` with their numerator and denominator products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowWeights {
    pub k: usize,
    pub weights: Vec<f64>,
    pub numerators: Vec<f64>,
    pub denominators: Vec<f64>,
    /// Smallest `min(p, 1 − p)` over every probability that entered a weight.
    pub delta: f64,
}

fn denominators<P: PropensityModel + ?Sized>(
    pm: &P,
    panel: &PanelData,
    k: usize,
    extremes: &mut Extremes,
) -> Result<Vec<f64>> {
    let t_len = panel.n_periods();
    let mut out = vec![1.0; panel.n_cells()];
    for i in 0..panel.n_units() {
        // per-step probabilities of the realized treatments, then window products
        let mut steps = Vec::with_capacity(t_len);
        for s in 0..t_len {
            let pi = pm.propensity(panel, i, s);
            check_positivity(pm, pi, i, s)?;
            extremes.record(pi);
            steps.push(prob_of(pi, panel.treatment(i, s)));
        }
        for t in 0..t_len {
            out[i * t_len + t] = steps[window_start(t, k)..=t].iter().product();
        }
    }
    Ok(out)
}

fn check_panel_k(panel: &PanelData, k: usize) -> Result<()> {
    check_k(k)?;
    if k > panel.n_periods() {
        return Err(invalid(format!("k={k} exceeds T={}", panel.n_periods())));
    }
    Ok(())
}

/// `w_{i,t} = Π_s P(A_s | A_window) / P(A_s | A_window, L)` for every cell.
pub fn compute_weights<P, G>(pm: &P, model: &G, panel: &PanelData, k: usize, mc: &McConfig) -> Result<WindowWeights>
where
    P: PropensityModel + ?Sized,
    G: GenerativeModel,
{
    check_panel_k(panel, k)?;
    let tables = window_tables(model, panel, k, mc)?;
    Ok(assemble_weights(pm, panel, k, &tables)?.0)
}

fn assemble_weights<P: PropensityModel + ?Sized>(
    pm: &P,
    panel: &PanelData,
    k: usize,
    tables: &WindowTables,
) -> Result<(WindowWeights, Extremes)> {
    let mut extremes = tables.extremes;
    let dens = denominators(pm, panel, k, &mut extremes)?;
    let weights: Vec<f64> = tables.numerators.iter().zip(&dens).map(|(n, d)| n / d).collect();
    if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::Positivity {
            unit: pos / panel.n_periods(),
            period: pos % panel.n_periods(),
            prob: 0.0,
            delta: pm.positivity_margin(),
        });
    }
    Ok((
        WindowWeights {
            k,
            weights,
            numerators: tables.numerators.clone(),
            denominators: dens,
            delta: extremes.min_margin,
        },
        extremes,
    ))
}

/// `P((i,t) ∈ S_p)` for every cell and window pattern, as an `N × T × 2^k` tensor.
/// The model is unit-invariant, so every unit shares its period's distribution.
pub fn slice_probabilities<G: GenerativeModel>(
    model: &G,
    n_units: usize,
    n_periods: usize,
    k: usize,
    n_samples: usize,
    seed: u64,
) -> Result<DenseTensor3> {
    check_k(k)?;
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let mut pool = Pool::new(model.initial_state(), n_samples, k);
    let mut ext = Extremes::new();
    let mut rows = Vec::with_capacity(n_periods);
    for s in 0..n_periods {
        let mut rng = stream(seed, tag::POOL, s as u64, 0);
        rows.push(pool.advance(model, s, false, &mut rng, &mut ext)?);
    }
    Ok(broadcast_slices(&rows, n_units, k))
}

/// Exact slice probabilities by enumeration (discrete models only).
pub fn slice_probabilities_exact<G: GenerativeModel>(
    model: &G,
    n_units: usize,
    n_periods: usize,
    k: usize,
) -> Result<DenseTensor3> {
    check_k(k)?;
    let mut pool = Pool::new(model.initial_state(), 1, k);
    let mut ext = Extremes::new();
    let mut rng = stream(0, tag::POOL, 0, 0);
    let rows = (0..n_periods)
        .map(|s| pool.advance(model, s, true, &mut rng, &mut ext))
        .collect::<Result<Vec<_>>>()?;
    Ok(broadcast_slices(&rows, n_units, k))
}

fn broadcast_slices(rows: &[Vec<f64>], n_units: usize, k: usize) -> DenseTensor3 {
    let slices = 1usize << k;
    DenseTensor3::from_fn([n_units, rows.len(), slices], |_, t, p| rows[t][p])
}

/// Everything the estimator needs from the weighting step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBundle {
    pub k: usize,
    /// `w_{i,t}`, unit-major.
    pub weights: Vec<f64>,
    pub slice_probs: DenseTensor3,
    /// `W = sqrt(slice_probs)`.
    pub weight_tensor: DenseTensor3,
    /// `Y_w`: `w·Y / P((i,t) ∈ S_p)` on the realized slice, zero elsewhere.
    pub target: DenseTensor3,
    /// Realized history index per cell.
    pub realized: Vec<usize>,
    /// Outcomes the bundle was built from.
    pub outcomes: Vec<f64>,
    /// Smallest `min(p, 1 − p)` over every probability that entered a weight.
    pub delta: f64,
    pub floor: f64,
}

impl WeightBundle {
    /// Assemble from precomputed weights and slice probabilities.
    pub fn from_parts(panel: &PanelData, k: usize, weights: Vec<f64>, slice_probs: DenseTensor3, delta: f64, floor: f64) -> Result<Self> {
        check_panel_k(panel, k)?;
        let dims = [panel.n_units(), panel.n_periods(), 1 << k];
        if slice_probs.dims() != dims {
            return Err(Error::ShapeMismatch {
                context: "slice probabilities",
                expected: dims.to_vec(),
                actual: slice_probs.dims().to_vec(),
            });
        }
        if weights.len() != panel.n_cells() {
            return Err(Error::ShapeMismatch {
                context: "weights",
                expected: vec![panel.n_cells()],
                actual: vec![weights.len()],
            });
        }
        let realized = realized_histories(panel, k)?;
        let mut w_tensor = slice_probs.clone();
        w_tensor.values_mut().iter_mut().for_each(|v| *v = v.sqrt());
        let mut target = DenseTensor3::zeros(dims);
        let t_len = panel.n_periods();
        for (cell, &p) in realized.iter().enumerate() {
            let (i, t) = (cell / t_len, cell % t_len);
            let prob = slice_probs.get(i, t, p).max(floor);
            target.set(i, t, p, weights[cell] * panel.outcomes()[cell] / prob);
        }
        Ok(Self {
            k,
            weights,
            slice_probs,
            weight_tensor: w_tensor,
            target,
            realized,
            outcomes: panel.outcomes().to_vec(),
            delta,
            floor,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.target.dims()
    }

    /// The appendix bound `((1 − δ)/δ)^k` at the bundle's inferred δ.
    pub fn weight_bound(&self) -> f64 {
        ((1.0 - self.delta) / self.delta).powi(self.k as i32)
    }

    /// CSV of `unit,period,weight`.
    pub fn write_weights_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let t_len = self.dims()[1];
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["unit", "period", "weight"])?;
        for (cell, v) in self.weights.iter().enumerate() {
            w.write_record([
                (cell / t_len).to_string(),
                (cell % t_len).to_string(),
                crate::causal::fmt_f64(*v),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Weights, slice probabilities and target tensor for a panel.
pub fn build_bundle<P, G>(pm: &P, panel: &PanelData, model: &G, k: usize, mc: &McConfig) -> Result<WeightBundle>
where
    P: PropensityModel + ?Sized,
    G: GenerativeModel,
{
    check_panel_k(panel, k)?;
    let tables = window_tables(model, panel, k, mc)?;
    let (ww, _) = assemble_weights(pm, panel, k, &tables)?;
    let slice_probs = broadcast_slices(&tables.slice, panel.n_units(), k);
    let floor = if mc.exact { f64::MIN_POSITIVE } else { mc.effective_floor() };
    WeightBundle::from_parts(panel, k, ww.weights, slice_probs, ww.delta, floor)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    /// One binary covariate per period, `L ~ Bernoulli(0.5)`, `P(A=1 | L)`
    /// equal to `lo` or `hi`; the covariate does not depend on the past.
    pub struct CoinToy {
        pub lo: f64,
        pub hi: f64,
    }

    impl GenerativeModel for CoinToy {
        type State = ();
        fn initial_state(&self) {}
        fn draw(&self, _: &mut (), _: usize, rng: &mut ChaCha8Rng) -> f64 {
            if rng.random::<bool>() {
                self.hi
            } else {
                self.lo
            }
        }
        fn treat(&self, _: &mut (), _: usize, _: u8) {}
        fn enumerate(&self, _: &(), _: usize) -> Option<Vec<(f64, (), f64)>> {
            Some(vec![(0.5, (), self.lo), (0.5, (), self.hi)])
        }
    }

    /// Constant propensity, independent of everything.
    pub struct Constant(pub f64);

    impl GenerativeModel for Constant {
        type State = ();
        fn initial_state(&self) {}
        fn draw(&self, _: &mut (), _: usize, rng: &mut ChaCha8Rng) -> f64 {
            let _: f64 = StandardNormal.sample(rng);
            self.0
        }
        fn treat(&self, _: &mut (), _: usize, _: u8) {}
        fn enumerate(&self, _: &(), _: usize) -> Option<Vec<(f64, (), f64)>> {
            Some(vec![(1.0, (), self.0)])
        }
    }

    impl PropensityModel for Constant {
        fn propensity(&self, _: &PanelData, _: usize, _: usize) -> f64 {
            self.0
        }
    }

    /// Covariate with memory: `L_t ∈ {0,1}`, `P(L_t = 1) = 0.3 + 0.4·A_{t-1}`,
    /// `P(A_t = 1 | L_t) = 0.2 + 0.6·L_t`. Panel covariate column 0 holds L.
    pub struct Feedback;

    impl GenerativeModel for Feedback {
        type State = u8;
        fn initial_state(&self) -> u8 {
            0
        }
        fn draw(&self, prev: &mut u8, _: usize, rng: &mut ChaCha8Rng) -> f64 {
            let l = rng.random::<f64>() < 0.3 + 0.4 * *prev as f64;
            0.2 + 0.6 * l as u8 as f64
        }
        fn treat(&self, prev: &mut u8, _: usize, a: u8) {
            *prev = a;
        }
        fn enumerate(&self, prev: &u8, _: usize) -> Option<Vec<(f64, u8, f64)>> {
            let p1 = 0.3 + 0.4 * *prev as f64;
            Some(vec![(1.0 - p1, *prev, 0.2), (p1, *prev, 0.8)])
        }
    }

    impl PropensityModel for Feedback {
        fn propensity(&self, panel: &PanelData, i: usize, t: usize) -> f64 {
            0.2 + 0.6 * panel.covariate(i, t)[0]
        }
    }

    pub fn feedback_panel(n: usize, t_len: usize, seed: u64) -> PanelData {
        let mut rng = stream(seed, 99, 0, 0);
        let mut a = vec![0u8; n * t_len];
        let mut l = vec![0.0; n * t_len];
        for i in 0..n {
            let mut prev = 0u8;
            for t in 0..t_len {
                let li = rng.random::<f64>() < 0.3 + 0.4 * prev as f64;
                let pi = 0.2 + 0.6 * li as u8 as f64;
                let ai = u8::from(rng.random::<f64>() < pi);
                a[i * t_len + t] = ai;
                l[i * t_len + t] = li as u8 as f64;
                prev = ai;
            }
        }
        let y = (0..n * t_len).map(|c| c as f64 * 0.1).collect();
        PanelData::new(n, t_len, 1, a, l, y).unwrap()
    }

    #[test]
    fn constant_policy_denominator() {
        let panel = feedback_panel(4, 5, 1);
        for i in 0..4 {
            let d = denominator_prob(&Constant(0.5), &panel, i, 4, 3).unwrap();
            assert!((d - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_denominator_is_the_propensity() {
        let panel = feedback_panel(3, 4, 2);
        for i in 0..3 {
            for t in 0..4 {
                let pi = Feedback.propensity(&panel, i, t);
                let want = if panel.treatment(i, t) == 1 { pi } else { 1.0 - pi };
                assert_eq!(denominator_prob(&Feedback, &panel, i, t, 1).unwrap(), want);
            }
        }
    }

    #[test]
    fn positivity_violation_is_reported() {
        struct Edge;
        impl PropensityModel for Edge {
            fn propensity(&self, _: &PanelData, _: usize, t: usize) -> f64 {
                if t == 2 {
                    0.01
                } else {
                    0.5
                }
            }
            fn positivity_margin(&self) -> f64 {
                0.05
            }
        }
        let panel = feedback_panel(2, 4, 3);
        match denominator_prob(&Edge, &panel, 1, 3, 2) {
            Err(Error::Positivity { unit, period, .. }) => assert_eq!((unit, period), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn toy_marginal_within_three_standard_errors() {
        let panel = PanelData::new(1, 1, 0, vec![1], vec![], vec![0.0]).unwrap();
        let toy = CoinToy { lo: 0.3, hi: 0.7 };
        let n = 20_000;
        let est = numerator_prob_mc(&Constant(0.5), &toy, &panel, 0, 0, 1, n, 5).unwrap();
        // the estimate is a mean of 0.3/0.7 draws: sd 0.2
        let se = 0.2 / (n as f64).sqrt();
        assert!((est - 0.5).abs() < 3.0 * se, "estimate {est}");
        let again = numerator_prob_mc(&Constant(0.5), &toy, &panel, 0, 0, 1, n, 5).unwrap();
        assert_eq!(est.to_bits(), again.to_bits());
    }

    #[test]
    fn covariate_free_policy_has_unit_weights() {
        let panel = feedback_panel(20, 6, 4);
        let mc = McConfig {
            n_samples: 500,
            ..McConfig::default()
        };
        let w = compute_weights(&Constant(0.35), &Constant(0.35), &panel, 3, &mc).unwrap();
        assert!(w.weights.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    /// Exact numerator for the feedback model by summing over all covariate
    /// and treatment paths (independent of the trie code).
    fn feedback_numerator_oracle(window: &[u8], prefix_len: usize) -> f64 {
        // distribution of A_{start-1} after prefix_len free periods
        let mut p_prev1 = 0.0; // P(A = 1) entering the window
        for _ in 0..prefix_len {
            // P(A_t=1) = Σ_prev P(prev)·[ (0.3+0.4prev)·0.8 + (0.7−0.4prev)·0.2 ]
            let f = |prev: f64| (0.3 + 0.4 * prev) * 0.8 + (0.7 - 0.4 * prev) * 0.2;
            p_prev1 = (1.0 - p_prev1) * f(0.0) + p_prev1 * f(1.0);
        }
        // condition on the window bits sequentially
        let mut prod = 1.0;
        let mut belief = [1.0 - p_prev1, p_prev1]; // over previous treatment
        for &a in window {
            let mut next = [0.0, 0.0];
            let mut pa_total = 0.0;
            for prev in 0..2 {
                let pl = 0.3 + 0.4 * prev as f64;
                let p1 = pl * 0.8 + (1.0 - pl) * 0.2;
                let pa = if a == 1 { p1 } else { 1.0 - p1 };
                pa_total += belief[prev] * pa;
            }
            prod *= pa_total;
            next[a as usize] = 1.0;
            belief = next;
        }
        prod
    }

    #[test]
    fn exact_numerators_match_path_sum_oracle() {
        let panel = feedback_panel(6, 5, 6);
        let k = 3;
        let mc = McConfig {
            exact: true,
            ..McConfig::default()
        };
        let w = compute_weights(&Feedback, &Feedback, &panel, k, &mc).unwrap();
        for i in 0..6 {
            for t in 0..5 {
                let start = window_start(t, k);
                let window = &panel.unit_treatments(i)[start..=t];
                let want = feedback_numerator_oracle(window, start);
                let got = w.numerators[i * 5 + t];
                assert!((got - want).abs() < 1e-12, "cell ({i},{t}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn mc_numerators_approach_exact_ones() {
        let panel = feedback_panel(8, 5, 7);
        let exact = compute_weights(
            &Feedback,
            &Feedback,
            &panel,
            2,
            &McConfig {
                exact: true,
                ..McConfig::default()
            },
        )
        .unwrap();
        let mc = compute_weights(
            &Feedback,
            &Feedback,
            &panel,
            2,
            &McConfig {
                n_samples: 40_000,
                seed: 3,
                ..McConfig::default()
            },
        )
        .unwrap();
        for (a, b) in exact.numerators.iter().zip(&mc.numerators) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }

    #[test]
    fn weight_bound_holds_at_inferred_delta() {
        let panel = feedback_panel(50, 8, 8);
        let mc = McConfig {
            n_samples: 2_000,
            seed: 1,
            ..McConfig::default()
        };
        let w = compute_weights(&Feedback, &Feedback, &panel, 2, &mc).unwrap();
        let bound = ((1.0 - w.delta) / w.delta).powi(2);
        assert!((w.delta - 0.2).abs() < 1e-12);
        assert!(w.weights.iter().all(|&v| v > 0.0 && v <= bound));
    }

    #[test]
    fn slice_probabilities_sum_to_one() {
        let sp = slice_probabilities(&Feedback, 3, 6, 3, 1000, 2).unwrap();
        for i in 0..3 {
            for t in 0..6 {
                let row = &sp.values()[(i * 6 + t) * 8..(i * 6 + t + 1) * 8];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn always_treat_concentrates_on_ones_window() {
        let sp = slice_probabilities(&Constant(1.0), 2, 4, 2, 100, 0).unwrap();
        assert_eq!(sp.get(1, 3, 3), 1.0);
        assert_eq!(sp.get(0, 0, 1), 1.0); // padded history 0 then 1
    }

    #[test]
    fn fair_coin_windows_are_uniform() {
        let n = 40_000;
        let sp = slice_probabilities(&Constant(0.5), 1, 5, 2, n, 9).unwrap();
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        for p in 0..4 {
            assert!((sp.get(0, 4, p) - 0.25).abs() < 3.0 * se);
        }
    }

    #[test]
    fn mc_slices_match_exact_enumeration() {
        let exact = slice_probabilities_exact(&Feedback, 1, 5, 3).unwrap();
        let mc = slice_probabilities(&Feedback, 1, 5, 3, 50_000, 4).unwrap();
        for (a, b) in exact.values().iter().zip(mc.values()) {
            let se = (a * (1.0 - a) / 50_000.0).sqrt().max(1e-6);
            assert!((a - b).abs() < 4.0 * se, "{a} vs {b}");
        }
        for t in 0..5 {
            let s: f64 = (0..8).map(|p| exact.get(0, t, p)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_policy_bundle_is_indicator() {
        let panel = PanelData::new(2, 3, 0, vec![1; 6], vec![], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mc = McConfig {
            n_samples: 10,
            ..McConfig::default()
        };
        let b = build_bundle(&Constant(1.0), &panel, &Constant(1.0), 2, &mc).unwrap();
        assert!(b.weights.iter().all(|&w| w == 1.0));
        for i in 0..2 {
            for t in 0..3 {
                let p = b.realized[i * 3 + t];
                for q in 0..4 {
                    let want = if q == p { panel.outcome(i, t) } else { 0.0 };
                    assert_eq!(b.target.get(i, t, q), want);
                    assert_eq!(b.weight_tensor.get(i, t, q), if q == p { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn bundle_target_is_zero_off_realized_slice_and_deterministic() {
        let panel = feedback_panel(10, 5, 11);
        let mc = McConfig {
            n_samples: 300,
            seed: 21,
            ..McConfig::default()
        };
        let a = build_bundle(&Feedback, &panel, &Feedback, 2, &mc).unwrap();
        for i in 0..10 {
            for t in 0..5 {
                for p in 0..4 {
                    if p != a.realized[i * 5 + t] {
                        assert_eq!(a.target.get(i, t, p), 0.0);
                    }
                }
            }
        }
        let b = build_bundle(&Feedback, &panel, &Feedback, 2, &mc).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn trie_shares_prefixes() {
        let mut trie = Trie::new();
        let a = trie.insert(&[0, 1, 1]);
        let b = trie.insert(&[0, 1, 0]);
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2], b[2]);
        assert_eq!(trie.len(), 5);
    }
}
