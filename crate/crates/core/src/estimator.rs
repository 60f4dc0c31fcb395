//! Weighted losses and projected gradient descent with a CP rank-`r`
//! projection.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::causal::{check_k, realized_histories, PanelData};
use crate::cp::{cp_als_with, reconstruct, spectral_clip, AlsConfig, CpDecomposition};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, tag};
use crate::tensor::{weighted_frobenius_sq, DenseTensor3};
use crate::weights::{build_bundle, GenerativeModel, McConfig, PropensityModel, WeightBundle};

/// Which weighted problem the gradient iterations run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Observed outcomes on the realized slice, with squared weights
    /// proportional to `w_{i,t}` (capped at a quantile) and zero elsewhere.
    #[default]
    Completion,
    /// `‖Y_w − T‖²_W` with `W² = P((i,t) ∈ S_p)`.
    Approximation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub rank: usize,
    pub k: usize,
    pub step: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub l_bound: Option<f64>,
    /// ALS sweeps per projection (warm-started from the previous iterate).
    pub als_sweeps: usize,
    /// ALS sweeps for the initial projection.
    pub init_sweeps: usize,
    pub als_tol: f64,
    pub seed: u64,
    pub objective: Objective,
    /// Completion objective: weights are divided by this quantile of `w` and capped at 1.
    pub weight_quantile: f64,
    /// Halve the step (up to 10 times) when an iteration increases the loss.
    pub backtracking: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            rank: 10,
            k: 5,
            step: 0.5,
            max_iters: 150,
            tol: 1e-6,
            l_bound: None,
            als_sweeps: 2,
            init_sweeps: 20,
            als_tol: 1e-8,
            seed: 0,
            objective: Objective::Completion,
            weight_quantile: 0.99,
            backtracking: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k)?;
        if self.rank == 0 {
            return Err(invalid("rank must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.step >= 0.0) || !self.step.is_finite() {
            return Err(invalid(format!("step must be a finite nonnegative number, got {}", self.step)));
        }
        if self.als_sweeps == 0 || self.init_sweeps == 0 {
            return Err(invalid("ALS sweep counts must be at least 1"));
        }
        if !(self.als_tol > 0.0) {
            return Err(invalid("als_tol must be positive"));
        }
        if let Some(l) = self.l_bound {
            if !(l > 0.0) {
                return Err(invalid(format!("l_bound must be positive, got {l}")));
            }
        }
        if !(self.weight_quantile > 0.0 && self.weight_quantile <= 1.0) {
            return Err(invalid(format!(
                "weight_quantile must be in (0, 1], got {}",
                self.weight_quantile
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub rank: usize,
    pub k: usize,
    pub objective: Objective,
    pub cp: CpDecomposition,
    pub estimate: DenseTensor3,
    /// Surrogate loss of the initial projection.
    pub initial_loss: f64,
    /// Surrogate loss after each iteration.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Surrogate loss of the returned estimate (the best iterate).
    pub final_loss: f64,
    /// `completion_loss` of the returned estimate.
    pub completion_loss: f64,
    pub history_encoding: String,
}

/// `(1/NT) Σ_{(i,t)} w_{i,t} (Y_{i,t} − T[i,t,p_{i,t}])²` over realized slices.
pub fn completion_loss(t: &DenseTensor3, panel: &PanelData, w: &[f64], k: usize) -> Result<f64> {
    let want = [panel.n_units(), panel.n_periods(), 1 << k];
    if t.dims() != want {
        return Err(Error::ShapeMismatch {
            context: "completion_loss tensor",
            expected: want.to_vec(),
            actual: t.dims().to_vec(),
        });
    }
    if w.len() != panel.n_cells() {
        return Err(Error::ShapeMismatch {
            context: "completion_loss weights",
            expected: vec![panel.n_cells()],
            actual: vec![w.len()],
        });
    }
    let hist = realized_histories(panel, k)?;
    Ok(realized_loss(t, &hist, panel.outcomes(), w))
}

fn realized_loss(t: &DenseTensor3, hist: &[usize], y: &[f64], w: &[f64]) -> f64 {
    let [_, t_len, _] = t.dims();
    let mut sum = 0.0;
    for (cell, &p) in hist.iter().enumerate() {
        let r = y[cell] - t.get(cell / t_len, cell % t_len, p);
        sum += w[cell] * r * r;
    }
    sum / hist.len() as f64
}

/// `‖Y_w − T‖²_W / (N·T)`.
pub fn approximation_loss(t: &DenseTensor3, bundle: &WeightBundle) -> Result<f64> {
    let resid = bundle.target.sub(t)?;
    let [n, t_len, _] = t.dims();
    Ok(weighted_frobenius_sq(&resid, &bundle.weight_tensor)? / (n * t_len) as f64)
}

/// `T + step · 2 W² ⊙ (S − T)`.
pub fn gradient_step(t: &DenseTensor3, s: &DenseTensor3, w: &DenseTensor3, step: f64) -> Result<DenseTensor3> {
    t.check_same_dims(s, "gradient_step target")?;
    t.check_same_dims(w, "gradient_step weights")?;
    let mut out = t.clone();
    for ((o, &sv), &wv) in out.values_mut().iter_mut().zip(s.values()).zip(w.values()) {
        *o += step * 2.0 * wv * wv * (sv - *o);
    }
    Ok(out)
}

fn step_with_sq_weights(t: &DenseTensor3, s: &DenseTensor3, w2: &DenseTensor3, step: f64) -> DenseTensor3 {
    let mut out = t.clone();
    for ((o, &sv), &wv) in out.values_mut().iter_mut().zip(s.values()).zip(w2.values()) {
        *o += step * 2.0 * wv * (sv - *o);
    }
    out
}

fn sq_weighted_loss(t: &DenseTensor3, s: &DenseTensor3, w2: &DenseTensor3) -> f64 {
    let [n, t_len, _] = t.dims();
    let sum: f64 = t
        .values()
        .iter()
        .zip(s.values())
        .zip(w2.values())
        .map(|((&x, &y), &w)| w * (y - x) * (y - x))
        .sum();
    sum / (n * t_len) as f64
}

/// Linear-interpolation quantile (the usual "type 7" definition).
pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// The `(S, W²)` pair the iterations run on.
pub fn surrogate(bundle: &WeightBundle, cfg: &EstimatorConfig) -> (DenseTensor3, DenseTensor3) {
    match cfg.objective {
        Objective::Approximation => (bundle.target.clone(), bundle.slice_probs.clone()),
        Objective::Completion => {
            let dims = bundle.dims();
            let mut s = DenseTensor3::zeros(dims);
            let mut w2 = DenseTensor3::zeros(dims);
            let mut cap = quantile(&bundle.weights, cfg.weight_quantile);
            if !(cap > 0.0) {
                cap = bundle.weights.iter().cloned().fold(0.0, f64::max);
            }
            let t_len = dims[1];
            for (cell, &p) in bundle.realized.iter().enumerate() {
                let (i, t) = (cell / t_len, cell % t_len);
                s.set(i, t, p, bundle.outcomes[cell]);
                let w = if cap > 0.0 { (bundle.weights[cell] / cap).min(1.0) } else { 0.0 };
                w2.set(i, t, p, w);
            }
            (s, w2)
        }
    }
}

/// Starting tensor: for each `(period, slice)` the W²-weighted mean of `S`
/// over units (falling back to the global weighted mean), broadcast over
/// units, plus a tiny seeded perturbation to keep the ALS start generic.
fn initial_tensor(s: &DenseTensor3, w2: &DenseTensor3, seed: u64) -> DenseTensor3 {
    let [n, t_len, slices] = s.dims();
    let mut num = vec![0.0; t_len * slices];
    let mut den = vec![0.0; t_len * slices];
    for i in 0..n {
        for c in 0..t_len * slices {
            let at = i * t_len * slices + c;
            num[c] += w2.values()[at] * s.values()[at];
            den[c] += w2.values()[at];
        }
    }
    let total_den: f64 = den.iter().sum();
    let global = if total_den > 0.0 {
        num.iter().sum::<f64>() / total_den
    } else {
        0.0
    };
    let mean: Vec<f64> = num
        .iter()
        .zip(&den)
        .map(|(&a, &b)| if b > 0.0 { a / b } else { global })
        .collect();
    let scale = 1e-6 * (mean.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 1.0);
    let mut rng = stream(seed, tag::PGD_INIT, 0, 0);
    DenseTensor3::from_fn([n, t_len, slices], |_, t, p| {
        let z: f64 = StandardNormal.sample(&mut rng);
        mean[t * slices + p] + scale * z
    })
}

fn project(
    x: &DenseTensor3,
    cfg: &EstimatorConfig,
    sweeps: usize,
    warm: Option<&CpDecomposition>,
) -> Result<(CpDecomposition, DenseTensor3)> {
    let als = AlsConfig {
        rank: cfg.rank,
        max_iters: sweeps,
        tol: cfg.als_tol,
        seed: cfg.seed,
    };
    let mut cp = cp_als_with(x, &als, warm)?.cp;
    if let Some(l) = cfg.l_bound {
        cp = spectral_clip(&cp, l)?;
    }
    let t = reconstruct(&cp, x.dims())?;
    Ok((cp, t))
}

/// Projected gradient descent on the configured objective. Returns the
/// iterate with the lowest surrogate loss, including the initial projection.
pub fn fit_pgd(bundle: &WeightBundle, cfg: &EstimatorConfig) -> Result<FitResult> {
    cfg.validate()?;
    if bundle.k != cfg.k {
        return Err(invalid(format!("bundle built for k={} but config has k={}", bundle.k, cfg.k)));
    }
    let (s, w2) = surrogate(bundle, cfg);
    let init = initial_tensor(&s, &w2, cfg.seed);
    fit_from(bundle, cfg, &s, &w2, &init)
}

/// Projected gradient descent from an explicit starting tensor.
pub fn fit_pgd_from(bundle: &WeightBundle, cfg: &EstimatorConfig, start: &DenseTensor3) -> Result<FitResult> {
    cfg.validate()?;
    let (s, w2) = surrogate(bundle, cfg);
    start.check_same_dims(&s, "fit_pgd start")?;
    fit_from(bundle, cfg, &s, &w2, start)
}

fn fit_from(
    bundle: &WeightBundle,
    cfg: &EstimatorConfig,
    s: &DenseTensor3,
    w2: &DenseTensor3,
    start: &DenseTensor3,
) -> Result<FitResult> {
    let (mut cp, mut current) = project(start, cfg, cfg.init_sweeps, None)?;
    let initial_loss = sq_weighted_loss(&current, s, w2);
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: 0,
            value: initial_loss,
        });
    }
    let mut best = (initial_loss, cp.clone(), current.clone());
    let mut prev = initial_loss;
    let mut trace = Vec::new();
    let mut converged = false;

    for iteration in 1..=cfg.max_iters {
        let mut step = cfg.step;
        let mut halvings = 0;
        let (next_cp, next, loss) = loop {
            let moved = step_with_sq_weights(&current, s, w2, step);
            let (c, t) = project(&moved, cfg, cfg.als_sweeps, Some(&cp))?;
            let loss = sq_weighted_loss(&t, s, w2);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration, value: loss });
            }
            if cfg.backtracking && loss > prev && halvings < 10 {
                step *= 0.5;
                halvings += 1;
                continue;
            }
            break (c, t, loss);
        };
        cp = next_cp;
        current = next;
        trace.push(loss);
        if loss < best.0 {
            best = (loss, cp.clone(), current.clone());
        }
        let change = (prev - loss).abs() / prev.max(f64::MIN_POSITIVE);
        prev = loss;
        if change <= cfg.tol || loss == 0.0 {
            converged = true;
            break;
        }
    }

    let (final_loss, cp, estimate) = best;
    let completion = realized_loss(&estimate, &bundle.realized, &bundle.outcomes, &bundle.weights);
    Ok(FitResult {
        rank: cfg.rank,
        k: cfg.k,
        objective: cfg.objective,
        cp,
        estimate,
        initial_loss,
        iterations: trace.len(),
        loss_trace: trace,
        converged,
        final_loss,
        completion_loss: completion,
        history_encoding: "oldest treatment is the most significant bit".into(),
    })
}

/// Build the weight bundle for a panel and fit it.
pub fn fit_panel<P, G>(panel: &PanelData, pm: &P, model: &G, cfg: &EstimatorConfig, mc: &McConfig) -> Result<FitResult>
where
    P: PropensityModel + ?Sized,
    G: GenerativeModel,
{
    cfg.validate()?;
    let bundle = build_bundle(pm, panel, model, cfg.k, mc)?;
    fit_pgd(&bundle, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use crate::weights::tests::{feedback_panel, Constant, Feedback};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: [usize; 3], rng: &mut ChaCha8Rng) -> DenseTensor3 {
        DenseTensor3::from_fn(dims, |_, _, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn unit_bundle(target: DenseTensor3, k: usize) -> WeightBundle {
        let [n, t, _] = target.dims();
        WeightBundle {
            k,
            weights: vec![1.0; n * t],
            slice_probs: DenseTensor3::filled(target.dims(), 1.0),
            weight_tensor: DenseTensor3::filled(target.dims(), 1.0),
            target,
            realized: vec![0; n * t],
            outcomes: vec![0.0; n * t],
            delta: 0.5,
            floor: 1.0,
        }
    }

    #[test]
    fn completion_loss_examples() {
        let panel = feedback_panel(3, 3, 1);
        let hist = realized_histories(&panel, 1).unwrap();
        let mut t = DenseTensor3::zeros([3, 3, 2]);
        for (c, &p) in hist.iter().enumerate() {
            t.set(c / 3, c % 3, p, panel.outcomes()[c]);
        }
        let w: Vec<f64> = (0..9).map(|c| 0.5 + c as f64).collect();
        assert_eq!(completion_loss(&t, &panel, &w, 1).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = rand_tensor([3, 3, 2], &mut rng);
        assert_eq!(completion_loss(&r, &panel, &[0.0; 9], 1).unwrap(), 0.0);
        let mut oracle = 0.0;
        for i in 0..3 {
            for s in 0..3 {
                let p = panel.treatment(i, s) as usize;
                let e = panel.outcome(i, s) - r.get(i, s, p);
                oracle += w[i * 3 + s] * e * e;
            }
        }
        assert!((completion_loss(&r, &panel, &w, 1).unwrap() - oracle / 9.0).abs() < 1e-12);
        assert!(completion_loss(&DenseTensor3::zeros([3, 3, 4]), &panel, &w, 1).is_err());
    }

    #[test]
    fn approximation_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = rand_tensor([2, 3, 4], &mut rng);
        let mut b = unit_bundle(y.clone(), 2);
        assert_eq!(approximation_loss(&y, &b).unwrap(), 0.0);
        let t = rand_tensor([2, 3, 4], &mut rng);
        b.weight_tensor = rand_tensor([2, 3, 4], &mut rng);
        let mut oracle = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                for p in 0..4 {
                    let w = b.weight_tensor.get(i, j, p);
                    let d = y.get(i, j, p) - t.get(i, j, p);
                    oracle += w * w * d * d;
                }
            }
        }
        assert!((approximation_loss(&t, &b).unwrap() - oracle / 6.0).abs() < 1e-12);
        b.weight_tensor = DenseTensor3::zeros([2, 3, 4]);
        assert_eq!(approximation_loss(&t, &b).unwrap(), 0.0);
    }

    #[test]
    fn gradient_step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = rand_tensor([2, 2, 2], &mut rng);
        let s = rand_tensor([2, 2, 2], &mut rng);
        let w = rand_tensor([2, 2, 2], &mut rng);
        assert_eq!(gradient_step(&t, &s, &w, 0.0).unwrap(), t);
        let ones = DenseTensor3::filled([2, 2, 2], 1.0);
        assert_eq!(gradient_step(&t, &s, &ones, 0.5).unwrap(), s);
        let out = gradient_step(&t, &s, &w, 0.3).unwrap();
        for idx in 0..8 {
            let (tv, sv, wv) = (t.values()[idx], s.values()[idx], w.values()[idx]);
            assert!((out.values()[idx] - (tv + 0.6 * wv * wv * (sv - tv))).abs() < 1e-15);
        }
        let zero = DenseTensor3::zeros([2, 2, 2]);
        assert_eq!(gradient_step(&t, &s, &zero, 0.7).unwrap(), t);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [3, 4, 4];
        let mut b = unit_bundle(rand_tensor(dims, &mut rng), 2);
        b.weight_tensor = rand_tensor(dims, &mut rng);
        let t = rand_tensor(dims, &mut rng);
        let step = 0.5;
        let moved = gradient_step(&t, &b.target, &b.weight_tensor, step).unwrap();
        let nt = 12.0;
        for idx in 0..t.len() {
            // the step is T − step·NT·∇loss
            let analytic = -(moved.values()[idx] - t.values()[idx]) / (step * nt);
            let h = 1e-5;
            let mut plus = t.clone();
            plus.values_mut()[idx] += h;
            let mut minus = t.clone();
            minus.values_mut()[idx] -= h;
            let fd = (approximation_loss(&plus, &b).unwrap() - approximation_loss(&minus, &b).unwrap()) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1e-8);
            assert!((fd - analytic).abs() / denom < 1e-4, "idx {idx}: {fd} vs {analytic}");
        }
    }

    #[test]
    fn completion_loss_is_convex() {
        let panel = feedback_panel(4, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f64> = (0..20).map(|_| rng.random::<f64>() * 3.0).collect();
        for _ in 0..50 {
            let a = rand_tensor([4, 5, 4], &mut rng);
            let b = rand_tensor([4, 5, 4], &mut rng);
            let alpha: f64 = rng.random();
            let mix = DenseTensor3::from_fn([4, 5, 4], |i, j, p| alpha * a.get(i, j, p) + (1.0 - alpha) * b.get(i, j, p));
            let lhs = completion_loss(&mix, &panel, &w, 2).unwrap();
            let rhs = alpha * completion_loss(&a, &panel, &w, 2).unwrap()
                + (1.0 - alpha) * completion_loss(&b, &panel, &w, 2).unwrap();
            assert!(lhs <= rhs + 1e-9);
        }
    }

    fn exact_rank_tensor(dims: [usize; 3], lambdas: &[f64], seed: u64) -> DenseTensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = lambdas.len();
        let mut f = |n| Matrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng));
        let (u, v, w) = (f(dims[0]), f(dims[1]), f(dims[2]));
        let mut cp = CpDecomposition::new(lambdas.to_vec(), u, v, w).unwrap();
        cp.canonicalize();
        cp.to_tensor()
    }

    #[test]
    fn unit_weights_recover_exact_low_rank_target() {
        let y = exact_rank_tensor([8, 6, 4], &[20.0, 8.0, 3.0], 8);
        let b = unit_bundle(y.clone(), 2);
        let cfg = EstimatorConfig {
            rank: 3,
            k: 2,
            step: 0.5,
            max_iters: 50,
            tol: 1e-14,
            objective: Objective::Approximation,
            ..EstimatorConfig::default()
        };
        let fit = fit_pgd(&b, &cfg).unwrap();
        assert!(fit.iterations <= 50);
        assert!(fit.final_loss * 48.0 < 1e-8 * y.frobenius_sq(), "loss {}", fit.final_loss);
    }

    #[test]
    fn zero_step_single_iteration_is_a_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = rand_tensor([4, 3, 4], &mut rng);
        let b = unit_bundle(y, 2);
        let cfg = EstimatorConfig {
            rank: 2,
            k: 2,
            step: 0.0,
            max_iters: 1,
            objective: Objective::Approximation,
            ..EstimatorConfig::default()
        };
        let start = rand_tensor([4, 3, 4], &mut rng);
        let fit = fit_pgd_from(&b, &cfg, &start).unwrap();
        let (_, proj) = project(&start, &cfg, cfg.init_sweeps, None).unwrap();
        let gap = fit.estimate.sub(&proj).unwrap().max_abs();
        assert!(gap < 1e-6 * proj.max_abs().max(1.0), "gap {gap}");
    }

    #[test]
    fn never_ends_worse_than_initial_projection() {
        let panel = feedback_panel(30, 6, 10);
        let mc = McConfig {
            n_samples: 500,
            seed: 1,
            ..McConfig::default()
        };
        for objective in [Objective::Completion, Objective::Approximation] {
            let cfg = EstimatorConfig {
                rank: 2,
                k: 2,
                max_iters: 20,
                objective,
                ..EstimatorConfig::default()
            };
            let fit = fit_panel(&panel, &Feedback, &Feedback, &cfg, &mc).unwrap();
            assert!(fit.final_loss <= fit.initial_loss + 1e-9);
            assert!(fit.loss_trace.iter().all(|l| l.is_finite()));
            assert!(fit.loss_trace.len() <= 20);
        }
    }

    #[test]
    fn deterministic_noiseless_rank_one_is_recovered() {
        // always-treat policy; outcome equals a rank-one tensor on the realized slice
        let (n, t_len, k) = (12, 5, 2);
        let u: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let v: Vec<f64> = (0..t_len).map(|t| 2.0 - 0.2 * t as f64).collect();
        let w = [0.5, 0.7, 1.1, 1.3];
        let panel0 = PanelData::new(n, t_len, 0, vec![1; n * t_len], vec![], vec![0.0; n * t_len]).unwrap();
        let hist = realized_histories(&panel0, k).unwrap();
        let y: Vec<f64> = hist
            .iter()
            .enumerate()
            .map(|(c, &p)| 10.0 * u[c / t_len] * v[c % t_len] * w[p])
            .collect();
        let panel = panel0.with_outcomes(y.clone()).unwrap();
        let cfg = EstimatorConfig {
            rank: 1,
            k,
            max_iters: 300,
            tol: 1e-12,
            ..EstimatorConfig::default()
        };
        let mc = McConfig {
            n_samples: 50,
            ..McConfig::default()
        };
        let fit = fit_panel(&panel, &Constant(1.0), &Constant(1.0), &cfg, &mc).unwrap();
        for (c, &p) in hist.iter().enumerate() {
            let got = fit.estimate.get(c / t_len, c % t_len, p);
            assert!((got - y[c]).abs() < 1e-3, "cell {c}: {got} vs {}", y[c]);
        }
        let again = fit_panel(&panel, &Constant(1.0), &Constant(1.0), &cfg, &mc).unwrap();
        assert_eq!(serde_json::to_string(&fit).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
        assert!((quantile(&[1.0, 2.0], 0.99) - 1.99).abs() < 1e-12);
        assert_eq!(quantile(&[4.0, 1.0], 1.0), 4.0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            EstimatorConfig { rank: 0, ..Default::default() },
            EstimatorConfig { max_iters: 0, ..Default::default() },
            EstimatorConfig { tol: 0.0, ..Default::default() },
            EstimatorConfig { step: -1.0, ..Default::default() },
            EstimatorConfig { l_bound: Some(0.0), ..Default::default() },
            EstimatorConfig { k: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        assert!(EstimatorConfig::default().validate().is_ok());
    }
}
