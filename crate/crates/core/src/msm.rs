//! Classical marginal structural model baseline: full-history stabilized
//! weights and one weighted least-squares fit per period with a linear link.

use serde::{Deserialize, Serialize};

use crate::causal::PanelData;
use crate::error::{invalid, Error, Result};
use crate::linalg::{is_positive_definite, solve_spd};
use crate::rng::tag;
use crate::weights::{evaluate_trie, prob_of, Extremes, GenerativeModel, McConfig, Particles, PropensityModel, Trie};

/// Ridge always added to the normal equations.
pub const MSM_RIDGE: f64 = 1e-8;

/// Full-history stabilized weights with the numerator/denominator products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizedWeights {
    pub weights: Vec<f64>,
    pub numerators: Vec<f64>,
    pub denominators: Vec<f64>,
    /// Smallest `min(p, 1 − p)` over every probability that entered a weight.
    pub delta: f64,
}

/// `sw_{i,t} = Π_{s ≤ t} P(A_s | A_{<s}) / P(A_s | A_{<s}, L_{≤s})`.
///
/// Numerators share the window-weight machinery: one prefix tree over every
/// unit's full treatment path, rooted at the first period.
pub fn stabilized_weights<P, G>(pm: &P, panel: &PanelData, model: &G, mc: &McConfig) -> Result<StabilizedWeights>
where
    P: PropensityModel + ?Sized,
    G: GenerativeModel,
{
    mc.validate()?;
    let (n, t_len) = (panel.n_units(), panel.n_periods());
    let mut trie = Trie::new();
    let paths: Vec<Vec<usize>> = (0..n).map(|i| trie.insert(panel.unit_treatments(i))).collect();
    let n_particles = if mc.exact { 1 } else { mc.n_samples };
    let root = Particles::uniform(model.initial_state(), n_particles);
    let (values, mut extremes) = evaluate_trie(model, &trie, root, 0, mc.exact, mc.seed, tag::WINDOW_TREE, 0)?;

    let mut numerators = vec![0.0; n * t_len];
    let mut denominators = vec![0.0; n * t_len];
    let mut weights = vec![0.0; n * t_len];
    let mut den_ext = Extremes::new();
    for i in 0..n {
        let (mut num, mut den) = (1.0, 1.0);
        for t in 0..t_len {
            let pi = pm.propensity(panel, i, t);
            let delta = pm.positivity_margin();
            if !pi.is_finite() || (delta > 0.0 && !(pi > delta && pi < 1.0 - delta)) {
                return Err(Error::Positivity {
                    unit: i,
                    period: t,
                    prob: pi,
                    delta,
                });
            }
            den_ext.record(pi);
            num *= values[paths[i][t]];
            den *= prob_of(pi, panel.treatment(i, t));
            let cell = i * t_len + t;
            numerators[cell] = num;
            denominators[cell] = den;
            weights[cell] = num / den;
            if !(weights[cell].is_finite() && weights[cell] >= 0.0) {
                return Err(Error::Positivity {
                    unit: i,
                    period: t,
                    prob: pi,
                    delta,
                });
            }
        }
    }
    extremes.merge(den_ext);
    Ok(StabilizedWeights {
        weights,
        numerators,
        denominators,
        delta: extremes.min_margin,
    })
}

/// Per-period linear MSM fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmFit {
    /// `coefficients[t]` has `t + 1` entries, one per treatment `A_0..A_t`.
    pub coefficients: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub stabilized_weights: Vec<f64>,
    /// Periods whose weighted design was singular before the ridge.
    pub rank_deficient: Vec<bool>,
    pub warning: bool,
}

/// For each period `t`, minimize `Σ_i sw_{i,t} (Y_{i,t} − β₀ − ⟨A_{i,0..t}, β⟩)²`
/// plus the fixed ridge.
pub fn fit_msm(panel: &PanelData, sw: &[f64]) -> Result<MsmFit> {
    let (n, t_len) = (panel.n_units(), panel.n_periods());
    if sw.len() != n * t_len {
        return Err(Error::ShapeMismatch {
            context: "stabilized weights",
            expected: vec![n * t_len],
            actual: vec![sw.len()],
        });
    }
    if sw.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid("stabilized weights must be finite and nonnegative"));
    }
    let mut coefficients = Vec::with_capacity(t_len);
    let mut intercepts = Vec::with_capacity(t_len);
    let mut rank_deficient = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let p = t + 2;
        let row = |i: usize, c: usize| -> f64 {
            if c == 0 {
                1.0
            } else {
                panel.treatment(i, c - 1) as f64
            }
        };
        let w: Vec<f64> = (0..n).map(|i| sw[i * t_len + t]).collect();
        let y: Vec<f64> = (0..n).map(|i| panel.outcome(i, t)).collect();

        let (beta, deficient) = if p <= n {
            let mut g = vec![0.0; p * p];
            let mut b = vec![0.0; p];
            for i in 0..n {
                for c in 0..p {
                    let xc = row(i, c) * w[i];
                    if xc == 0.0 {
                        continue;
                    }
                    b[c] += xc * y[i];
                    for d in c..p {
                        g[c * p + d] += xc * row(i, d);
                    }
                }
            }
            for c in 0..p {
                for d in 0..c {
                    g[c * p + d] = g[d * p + c];
                }
            }
            let deficient = !is_positive_definite(&g, p);
            (solve_spd(&g, p, &b, 1, MSM_RIDGE, 1e-10).solution, deficient)
        } else {
            // more parameters than units: β = Zᵀ (Z Zᵀ + ridge I)⁻¹ √w y with Z = √w X
            let sq: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
            let mut k = vec![0.0; n * n];
            for a in 0..n {
                for b in a..n {
                    let dot: f64 = (0..p).map(|c| row(a, c) * row(b, c)).sum();
                    k[a * n + b] = sq[a] * sq[b] * dot;
                    k[b * n + a] = k[a * n + b];
                }
            }
            let rhs: Vec<f64> = (0..n).map(|i| sq[i] * y[i]).collect();
            let alpha = solve_spd(&k, n, &rhs, 1, MSM_RIDGE, 1e-10).solution;
            let beta = (0..p).map(|c| (0..n).map(|i| sq[i] * row(i, c) * alpha[i]).sum()).collect();
            (beta, true)
        };
        intercepts.push(beta[0]);
        coefficients.push(beta[1..].to_vec());
        rank_deficient.push(deficient);
    }
    if coefficients.iter().flatten().chain(&intercepts).any(|v| !v.is_finite()) {
        return Err(invalid("MSM coefficients are not finite"));
    }
    let warning = rank_deficient.iter().any(|&d| d);
    Ok(MsmFit {
        coefficients,
        intercepts,
        stabilized_weights: sw.to_vec(),
        rank_deficient,
        warning,
    })
}

/// `β₀ + ⟨a, β^t⟩` for a treatment sequence of length `t + 1`.
pub fn predict_msm(fit: &MsmFit, a_seq: &[u8]) -> Result<f64> {
    let len = a_seq.len();
    if len == 0 || len > fit.coefficients.len() {
        return Err(invalid(format!(
            "treatment sequence of length {len} does not match any fitted period (1..={})",
            fit.coefficients.len()
        )));
    }
    let beta = &fit.coefficients[len - 1];
    Ok(fit.intercepts[len - 1] + beta.iter().zip(a_seq).map(|(b, &a)| b * a as f64).sum::<f64>())
}

/// Predicted mean for every cell of a panel under its realized treatments.
pub fn predict_panel(fit: &MsmFit, panel: &PanelData) -> Result<Vec<f64>> {
    let t_len = panel.n_periods();
    if t_len != fit.coefficients.len() {
        return Err(invalid(format!(
            "MSM fitted on {} periods, panel has {t_len}",
            fit.coefficients.len()
        )));
    }
    let mut out = Vec::with_capacity(panel.n_cells());
    for i in 0..panel.n_units() {
        let row = panel.unit_treatments(i);
        for t in 0..t_len {
            out.push(predict_msm(fit, &row[..=t])?);
        }
    }
    Ok(out)
}
