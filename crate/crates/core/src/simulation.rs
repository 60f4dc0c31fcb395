//! Synthetic worlds: policies, covariates, outcomes and the ground-truth
//! tensor, plus the scoring and sweep harness built on them.
//!
//! Periods are 0-based in code; the policies' `(-1/2)^t` term uses the
//! 1-based period `t = period + 1`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{check_k, PanelData};
use crate::cp::CpDecomposition;
use crate::error::{invalid, Error, Result};
use crate::estimator::{fit_pgd, EstimatorConfig, FitResult};
use crate::msm::{fit_msm, predict_panel, stabilized_weights, MsmFit};
use crate::rng::{derive_seed, stream, tag};
use crate::tensor::{DenseTensor3, Matrix};
use crate::weights::{build_bundle, GenerativeModel, McConfig, PropensityModel, WeightBundle};

pub const BASE_LEVEL: f64 = 250.0;
pub const TREATMENT_PENALTY: f64 = 10.0;
/// Number of periods (current and two lags) in the outcome's sums.
const OUTCOME_SPAN: usize = 3;

/// Logistic function, kept strictly inside `(0, 1)` where it would round to an endpoint.
#[inline]
pub fn expit(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Simple,
    Complex,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Simple => "simple",
            PolicyKind::Complex => "complex",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(PolicyKind::Simple),
            "complex" => Ok(PolicyKind::Complex),
            other => Err(invalid(format!("unknown policy `{other}` (expected simple or complex)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum World {
    /// 500 units, 10 periods.
    Narrow,
    /// 10 units, 500 periods.
    Wide,
    /// Sizes taken from the config.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub world: World,
    /// Used only for the custom world.
    pub n_units: usize,
    pub n_periods: usize,
    pub policy: PolicyKind,
    pub true_rank: usize,
    pub true_k: usize,
    pub lambda_range: [f64; 2],
    pub noise_std: f64,
    pub gamma: [f64; 4],
    pub delta: [f64; 4],
    /// Multiplier on the true tensor's contribution to outcomes.
    pub tensor_scale: f64,
    /// Override every treatment with this value (propensities are still recorded).
    pub forced_treatment: Option<u8>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            world: World::Narrow,
            n_units: 500,
            n_periods: 10,
            policy: PolicyKind::Simple,
            true_rank: 10,
            true_k: 5,
            lambda_range: [50.0, 200.0],
            noise_std: 1.0,
            gamma: [1.0, -0.5, 0.25, 0.1],
            delta: [1.0, -0.5, 0.25, 0.1],
            tensor_scale: 1.0,
            forced_treatment: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn narrow(policy: PolicyKind, seed: u64) -> Self {
        Self {
            policy,
            seed,
            ..Self::default()
        }
    }

    pub fn wide(policy: PolicyKind, seed: u64) -> Self {
        Self {
            world: World::Wide,
            policy,
            seed,
            ..Self::default()
        }
    }

    pub fn custom(n_units: usize, n_periods: usize, policy: PolicyKind, seed: u64) -> Self {
        Self {
            world: World::Custom,
            n_units,
            n_periods,
            policy,
            seed,
            ..Self::default()
        }
    }

    /// `(N, T)` after applying the world preset.
    pub fn dims(&self) -> (usize, usize) {
        match self.world {
            World::Narrow => (500, 10),
            World::Wide => (10, 500),
            World::Custom => (self.n_units, self.n_periods),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t) = self.dims();
        if n == 0 || t == 0 {
            return Err(invalid(format!("simulation needs N ≥ 1 and T ≥ 1, got N={n}, T={t}")));
        }
        if self.true_rank == 0 {
            return Err(invalid("true rank must be at least 1"));
        }
        check_k(self.true_k)?;
        if self.true_k > t {
            return Err(invalid(format!("true history length {} exceeds T={t}", self.true_k)));
        }
        let [lo, hi] = self.lambda_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid(format!("invalid singular value range [{lo}, {hi}]")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("noise_std must be finite and nonnegative"));
        }
        if matches!(self.forced_treatment, Some(a) if a > 1) {
            return Err(invalid("forced treatment must be 0 or 1"));
        }
        Ok(())
    }

    pub fn policy_model(&self) -> Policy {
        Policy {
            kind: self.policy,
            gamma: self.gamma,
        }
    }
}

/// `P(A_t = 1)` under the simple policy: `expit(−A_{t−1} + γᵀL_t + (−1/2)^t)`.
pub fn simple_policy_prob(period: usize, prev_treatment: u8, gamma_l: f64) -> f64 {
    expit(-(prev_treatment as f64) + gamma_l + period_term(period))
}

/// `P(A_t = 1)` under the complex policy:
/// `expit(Σ_{t'=t−2}^{t} (A_{t'−1} + γᵀL_{t'}) + (−1/2)^t)`.
///
/// `lag_treatments` is `(A_{t−1}, A_{t−2}, A_{t−3})` and `gamma_l` is
/// `(γᵀL_t, γᵀL_{t−1}, γᵀL_{t−2})`, with zeros before the study.
pub fn complex_policy_prob(period: usize, lag_treatments: [u8; 3], gamma_l: [f64; 3]) -> f64 {
    let lags: f64 = lag_treatments.iter().map(|&a| a as f64).sum();
    expit(lags + gamma_l.iter().sum::<f64>() + period_term(period))
}

fn period_term(period: usize) -> f64 {
    (-0.5f64).powi(period as i32 + 1)
}

/// Covariate scale `U_t`. `lag_treatments` is `(A_{t−1}, A_{t−2}, A_{t−3})`.
pub fn covariate_scale(kind: PolicyKind, period: usize, lag_treatments: [u8; 3]) -> f64 {
    if period == 0 {
        return 1.0;
    }
    match kind {
        PolicyKind::Simple => 2.0 + (2.0 * lag_treatments[0] as f64 - 1.0) / 3.0,
        PolicyKind::Complex => lag_treatments
            .iter()
            .map(|&a| 2.0 + (2.0 * a as f64 - 3.0))
            .product(),
    }
}

/// `L = (Z₁U, Z₂U, |Z₃U|, |Z₄U|)`.
pub fn covariates_from(z: [f64; 4], u: f64) -> [f64; 4] {
    [z[0] * u, z[1] * u, (z[2] * u).abs(), (z[3] * u).abs()]
}

fn draw_z(rng: &mut ChaCha8Rng) -> [f64; 4] {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

fn dot4(a: &[f64; 4], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E[δᵀL_t]` given the scale: only the folded components have nonzero mean,
/// `E|Z·U| = |U|·sqrt(2/π)`.
pub fn expected_covariate_term(delta: &[f64; 4], u: f64) -> f64 {
    u.abs() * (2.0 / std::f64::consts::PI).sqrt() * (delta[2] + delta[3])
}

/// One of the two simulation policies; serves both as the known propensity
/// model and as the covariate simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    pub gamma: [f64; 4],
}

/// What a policy remembers about a unit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyState {
    /// `(A_{t−1}, A_{t−2}, A_{t−3})`.
    pub lag_treatments: [u8; 3],
    /// `(γᵀL_{t−1}, γᵀL_{t−2})`.
    pub lag_gamma_l: [f64; 2],
    /// `γᵀL_t` for the period just drawn.
    pub gamma_l: f64,
}

impl Policy {
    fn prob_from_state(&self, period: usize, st: &PolicyState) -> f64 {
        match self.kind {
            PolicyKind::Simple => simple_policy_prob(period, st.lag_treatments[0], st.gamma_l),
            PolicyKind::Complex => complex_policy_prob(
                period,
                st.lag_treatments,
                [st.gamma_l, st.lag_gamma_l[0], st.lag_gamma_l[1]],
            ),
        }
    }
}

impl GenerativeModel for Policy {
    type State = PolicyState;

    fn initial_state(&self) -> PolicyState {
        PolicyState::default()
    }

    fn draw(&self, st: &mut PolicyState, period: usize, rng: &mut ChaCha8Rng) -> f64 {
        let u = covariate_scale(self.kind, period, st.lag_treatments);
        let l = covariates_from(draw_z(rng), u);
        st.gamma_l = dot4(&self.gamma, &l);
        self.prob_from_state(period, st)
    }

    fn treat(&self, st: &mut PolicyState, _period: usize, a: u8) {
        st.lag_treatments = [a, st.lag_treatments[0], st.lag_treatments[1]];
        st.lag_gamma_l = [st.gamma_l, st.lag_gamma_l[0]];
    }
}

impl PropensityModel for Policy {
    fn propensity(&self, panel: &PanelData, unit: usize, period: usize) -> f64 {
        if panel.covariate_dim() != 4 {
            return f64::NAN;
        }
        let lag = |j: usize| -> u8 {
            if period >= j {
                panel.treatment(unit, period - j)
            } else {
                0
            }
        };
        let gl = |j: usize| -> f64 {
            if period >= j {
                dot4(&self.gamma, panel.covariate(unit, period - j))
            } else {
                0.0
            }
        };
        match self.kind {
            PolicyKind::Simple => simple_policy_prob(period, lag(1), gl(0)),
            PolicyKind::Complex => complex_policy_prob(period, [lag(1), lag(2), lag(3)], [gl(0), gl(1), gl(2)]),
        }
    }
}

/// Ground-truth rank-`r*` tensor: factor entries `U(0,1)` then normalized,
/// `λ ~ U(lo, hi)`.
pub fn gen_true_tensor(cfg: &SimConfig) -> Result<CpDecomposition> {
    cfg.validate()?;
    let (n, t) = cfg.dims();
    let r = cfg.true_rank;
    let mut rng = stream(cfg.seed, tag::TRUE_TENSOR, 0, 0);
    let mut factor = |rows: usize| {
        let mut m = Matrix::from_fn(rows, r, |_, _| rng.random::<f64>());
        for l in 0..r {
            let norm = m.column_norm(l);
            for i in 0..rows {
                let v = m.get(i, l);
                m.set(i, l, v / norm);
            }
        }
        m
    };
    let u = factor(n);
    let v = factor(t);
    let w = factor(1 << cfg.true_k);
    let [lo, hi] = cfg.lambda_range;
    let lambdas = (0..r).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    let mut cp = CpDecomposition::new(lambdas, u, v, w)?;
    cp.canonicalize();
    Ok(cp)
}

/// Per-cell pieces of the outcome, unit-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeComponents {
    pub base: f64,
    /// `−10 Σ_{t'=t−2}^{t} A_{t'}`.
    pub treatment_term: Vec<f64>,
    /// `Σ_{t'=t−2}^{t} δᵀL_{t'}` as realized.
    pub covariate_term: Vec<f64>,
    /// Its expectation over the covariate noise given the treatment path.
    pub expected_covariate_term: Vec<f64>,
    /// `T*(i, t, realized k*-history)`, scaled.
    pub tensor_term: Vec<f64>,
    pub noise: Vec<f64>,
}

impl OutcomeComponents {
    /// Outcome reassembled from its parts.
    pub fn outcome(&self, cell: usize) -> f64 {
        self.base + self.treatment_term[cell] + self.covariate_term[cell] + self.tensor_term[cell] + self.noise[cell]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub config: SimConfig,
    pub truth_cp: CpDecomposition,
    pub true_tensor: DenseTensor3,
    pub panel: PanelData,
    pub components: OutcomeComponents,
    /// `U_t` per cell.
    pub covariate_scales: Vec<f64>,
    /// `P(A_t = 1 | history)` per cell.
    pub propensities: Vec<f64>,
    /// Outcome mean given the realized treatment path: the outcome without
    /// noise and with the covariate term replaced by its expectation.
    pub true_mean: Vec<f64>,
}

impl SimTruth {
    pub fn policy(&self) -> Policy {
        self.config.policy_model()
    }

    /// Non-tensor part of the outcome with the realized covariates.
    pub fn realized_offset(&self, cell: usize) -> f64 {
        self.components.base + self.components.treatment_term[cell] + self.components.covariate_term[cell]
    }

    /// Non-tensor part of the outcome mean.
    pub fn expected_offset(&self, cell: usize) -> f64 {
        self.components.base + self.components.treatment_term[cell] + self.components.expected_covariate_term[cell]
    }
}

/// Draw covariates, treatments and outcomes period by period.
pub fn simulate_panel(cfg: &SimConfig) -> Result<SimTruth> {
    cfg.validate()?;
    let (n, t_len) = cfg.dims();
    let truth_cp = gen_true_tensor(cfg)?;
    let mut true_tensor = truth_cp.to_tensor();
    if cfg.tensor_scale != 1.0 {
        true_tensor.values_mut().iter_mut().for_each(|v| *v *= cfg.tensor_scale);
    }
    let policy = cfg.policy_model();

    struct UnitDraw {
        a: Vec<u8>,
        l: Vec<f64>,
        u: Vec<f64>,
        pi: Vec<f64>,
        gl_delta: Vec<f64>,
        noise: Vec<f64>,
    }
    let units: Vec<UnitDraw> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut st = policy.initial_state();
            let mut d = UnitDraw {
                a: Vec::with_capacity(t_len),
                l: Vec::with_capacity(4 * t_len),
                u: Vec::with_capacity(t_len),
                pi: Vec::with_capacity(t_len),
                gl_delta: Vec::with_capacity(t_len),
                noise: Vec::with_capacity(t_len),
            };
            for t in 0..t_len {
                let u = covariate_scale(cfg.policy, t, st.lag_treatments);
                let z = draw_z(&mut stream(cfg.seed, tag::COVARIATES, i as u64, t as u64));
                let l = covariates_from(z, u);
                st.gamma_l = dot4(&cfg.gamma, &l);
                let pi = policy.prob_from_state(t, &st);
                let a = match cfg.forced_treatment {
                    Some(a) => a,
                    None => u8::from(stream(cfg.seed, tag::TREATMENT, i as u64, t as u64).random::<f64>() < pi),
                };
                policy.treat(&mut st, t, a);
                let nu: f64 = StandardNormal.sample(&mut stream(cfg.seed, tag::NOISE, i as u64, t as u64));
                d.a.push(a);
                d.l.extend_from_slice(&l);
                d.u.push(u);
                d.pi.push(pi);
                d.gl_delta.push(dot4(&cfg.delta, &l));
                d.noise.push(cfg.noise_std * nu);
            }
            d
        })
        .collect();

    let cells = n * t_len;
    let mut treatments = Vec::with_capacity(cells);
    let mut covariates = Vec::with_capacity(cells * 4);
    let mut comps = OutcomeComponents {
        base: BASE_LEVEL,
        treatment_term: Vec::with_capacity(cells),
        covariate_term: Vec::with_capacity(cells),
        expected_covariate_term: Vec::with_capacity(cells),
        tensor_term: Vec::with_capacity(cells),
        noise: Vec::with_capacity(cells),
    };
    let mut scales = Vec::with_capacity(cells);
    let mut props = Vec::with_capacity(cells);
    let k_star = cfg.true_k;
    for (i, d) in units.iter().enumerate() {
        for t in 0..t_len {
            let span = (t + 1).saturating_sub(OUTCOME_SPAN)..=t;
            let a_sum: f64 = d.a[span.clone()].iter().map(|&a| a as f64).sum();
            let cov: f64 = d.gl_delta[span.clone()].iter().sum();
            let cov_mean: f64 = d.u[span].iter().map(|&u| expected_covariate_term(&cfg.delta, u)).sum();
            let start = (t + 1).saturating_sub(k_star);
            let p = d.a[start..=t].iter().fold(0usize, |p, &a| (p << 1) | a as usize);
            comps.treatment_term.push(-TREATMENT_PENALTY * a_sum);
            comps.covariate_term.push(cov);
            comps.expected_covariate_term.push(cov_mean);
            comps.tensor_term.push(true_tensor.get(i, t, p));
            comps.noise.push(d.noise[t]);
        }
        treatments.extend_from_slice(&d.a);
        covariates.extend_from_slice(&d.l);
        scales.extend_from_slice(&d.u);
        props.extend_from_slice(&d.pi);
    }
    let outcomes: Vec<f64> = (0..cells).map(|c| comps.outcome(c)).collect();
    let true_mean: Vec<f64> = (0..cells)
        .map(|c| comps.base + comps.treatment_term[c] + comps.expected_covariate_term[c] + comps.tensor_term[c])
        .collect();
    let panel = PanelData::new(n, t_len, 4, treatments, covariates, outcomes)?;
    Ok(SimTruth {
        config: *cfg,
        truth_cp,
        true_tensor,
        panel,
        components: comps,
        covariate_scales: scales,
        propensities: props,
        true_mean,
    })
}

/// Mean squared error between predicted and true per-cell means.
pub fn normalized_mse(predicted: &[f64], truth: &SimTruth) -> Result<f64> {
    if predicted.len() != truth.true_mean.len() {
        return Err(Error::ShapeMismatch {
            context: "predicted means",
            expected: vec![truth.true_mean.len()],
            actual: vec![predicted.len()],
        });
    }
    let sum: f64 = predicted
        .iter()
        .zip(&truth.true_mean)
        .map(|(p, m)| (p - m) * (p - m))
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Panel whose outcomes have the realized non-tensor terms removed.
pub fn residual_panel(truth: &SimTruth) -> Result<PanelData> {
    let y = (0..truth.panel.n_cells())
        .map(|c| truth.panel.outcomes()[c] - truth.realized_offset(c))
        .collect();
    truth.panel.with_outcomes(y)
}

/// Weight bundle for the tensor method on a simulated world.
pub fn tensor_bundle(truth: &SimTruth, k: usize, mc: &McConfig) -> Result<WeightBundle> {
    let policy = truth.policy();
    build_bundle(&policy, &residual_panel(truth)?, &policy, k, mc)
}

/// Tensor-method predicted means: fitted entry at the realized history plus
/// the expected non-tensor terms.
pub fn tensor_predictions(truth: &SimTruth, fit: &FitResult) -> Result<Vec<f64>> {
    let panel = &truth.panel;
    let t_len = panel.n_periods();
    let want = [panel.n_units(), t_len, 1 << fit.k];
    if fit.estimate.dims() != want {
        return Err(Error::ShapeMismatch {
            context: "fit vs simulated panel",
            expected: want.to_vec(),
            actual: fit.estimate.dims().to_vec(),
        });
    }
    Ok((0..panel.n_cells())
        .map(|c| {
            let (i, t) = (c / t_len, c % t_len);
            fit.estimate.get(i, t, panel.history(i, t, fit.k)) + truth.expected_offset(c)
        })
        .collect())
}

/// Fit the tensor method on a simulated world and score it.
pub fn run_tensor(truth: &SimTruth, cfg: &EstimatorConfig, mc: &McConfig) -> Result<(FitResult, f64)> {
    cfg.validate()?;
    let bundle = tensor_bundle(truth, cfg.k, mc)?;
    let fit = fit_pgd(&bundle, cfg)?;
    let nmse = normalized_mse(&tensor_predictions(truth, &fit)?, truth)?;
    Ok((fit, nmse))
}

/// Fit the MSM baseline on a simulated world and score it.
pub fn run_msm(truth: &SimTruth, mc: &McConfig) -> Result<(MsmFit, f64)> {
    let policy = truth.policy();
    let sw = stabilized_weights(&policy, &truth.panel, &policy, mc)?;
    let fit = fit_msm(&truth.panel, &sw.weights)?;
    let nmse = normalized_mse(&predict_panel(&fit, &truth.panel)?, truth)?;
    Ok((fit, nmse))
}

/// Which `(r, k)` combinations a sweep visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGrid {
    /// Vary `r` at the base `k`, and `k` at the base `r`.
    #[default]
    Axes,
    /// Every `(r, k)` pair.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: PolicyKind,
    pub r: usize,
    pub k: usize,
    pub rep: usize,
    pub nmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub policy: PolicyKind,
    pub r: usize,
    pub k: usize,
    pub n_ok: usize,
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: SimConfig,
    pub policies: Vec<PolicyKind>,
    pub r_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub n_reps: usize,
    pub grid: SweepGrid,
    pub estimator: EstimatorConfig,
    pub mc: McConfig,
}

impl SweepSpec {
    /// `(r, k)` cells in visiting order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        match self.grid {
            SweepGrid::Full => {
                for &r in &self.r_values {
                    for &k in &self.k_values {
                        cells.push((r, k));
                    }
                }
            }
            SweepGrid::Axes => {
                for &r in &self.r_values {
                    cells.push((r, self.estimator.k));
                }
                for &k in &self.k_values {
                    if !cells.contains(&(self.estimator.rank, k)) {
                        cells.push((self.estimator.rank, k));
                    }
                }
            }
        }
        cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() || self.r_values.is_empty() || self.k_values.is_empty() {
            return Err(invalid("sweep needs at least one policy, rank and history length"));
        }
        if self.n_reps == 0 {
            return Err(invalid("n_reps must be at least 1"));
        }
        self.base.validate()?;
        self.mc.validate()?;
        let (_, t) = self.base.dims();
        for (r, k) in self.cells() {
            EstimatorConfig {
                rank: r,
                k,
                ..self.estimator
            }
            .validate()?;
            if k > t {
                return Err(invalid(format!("history length {k} exceeds T={t}")));
            }
        }
        Ok(())
    }
}

/// Run one replicate of one policy over every cell. The world and the weight
/// bundles are shared across cells with the same `k`.
fn sweep_replicate(spec: &SweepSpec, policy: PolicyKind, rep: usize) -> Vec<SweepRow> {
    let sim = SimConfig {
        policy,
        seed: derive_seed(spec.base.seed, tag::REPLICATE, rep as u64),
        ..spec.base
    };
    let cells = spec.cells();
    let failed = |msg: String| -> Vec<SweepRow> {
        cells
            .iter()
            .map(|&(r, k)| SweepRow {
                policy,
                r,
                k,
                rep,
                nmse: None,
                error: Some(msg.clone()),
            })
            .collect()
    };
    let truth = match simulate_panel(&sim) {
        Ok(t) => t,
        Err(e) => return failed(e.to_string()),
    };
    let mut ks: Vec<usize> = cells.iter().map(|&(_, k)| k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mc = McConfig {
        seed: derive_seed(spec.mc.seed, tag::REPLICATE, rep as u64),
        ..spec.mc
    };
    let bundles: Vec<(usize, Result<WeightBundle>)> =
        ks.par_iter().map(|&k| (k, tensor_bundle(&truth, k, &mc))).collect();
    cells
        .par_iter()
        .map(|&(r, k)| {
            let bundle = &bundles.iter().find(|(kk, _)| *kk == k).expect("bundle per k").1;
            let cfg = EstimatorConfig {
                rank: r,
                k,
                ..spec.estimator
            };
            let outcome = bundle
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|b| fit_pgd(b, &cfg).map_err(|e| e.to_string()))
                .and_then(|fit| {
                    tensor_predictions(&truth, &fit)
                        .and_then(|p| normalized_mse(&p, &truth))
                        .map_err(|e| e.to_string())
                });
            match outcome {
                Ok(v) => SweepRow {
                    policy,
                    r,
                    k,
                    rep,
                    nmse: Some(v),
                    error: None,
                },
                Err(e) => SweepRow {
                    policy,
                    r,
                    k,
                    rep,
                    nmse: None,
                    error: Some(e),
                },
            }
        })
        .collect()
}

/// Sensitivity of the tensor method's NMSE to `r` and `k`. Replicates run in
/// order and each finished batch of rows is handed to `on_rows` before the
/// next starts, so callers can flush partial results.
pub fn sensitivity_sweep<F>(spec: &SweepSpec, mut on_rows: F) -> Result<Vec<SweepRow>>
where
    F: FnMut(&[SweepRow]) -> Result<()>,
{
    spec.validate()?;
    let mut all = Vec::new();
    for rep in 0..spec.n_reps {
        for &policy in &spec.policies {
            let rows = sweep_replicate(spec, policy, rep);
            on_rows(&rows)?;
            all.extend(rows);
        }
    }
    Ok(all)
}

/// Mean and standard error per `(policy, r, k)`, over successful replicates.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(PolicyKind, usize, usize)> = rows.iter().map(|r| (r.policy, r.r, r.k)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(policy, r, k)| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|row| row.policy == policy && row.r == r && row.k == k)
                .filter_map(|row| row.nmse)
                .collect();
            let n = vals.len();
            let mean = if n > 0 { vals.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let se = if n > 1 {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            } else {
                0.0
            };
            SweepSummary {
                policy,
                r,
                k,
                n_ok: n,
                mean,
                se,
            }
        })
        .collect()
}
