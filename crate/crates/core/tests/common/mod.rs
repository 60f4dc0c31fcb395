//! Naive-loop reference implementations and instance builders shared by the
//! integration tests. Each oracle works straight from the definition and
//! shares no code with the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tensor_msm::causal::PanelData;
use tensor_msm::simulation::{simulate_panel, PolicyKind, SimConfig};
use tensor_msm::weights::{build_bundle, McConfig, WeightBundle};
use tensor_msm::{CpDecomposition, DenseTensor3, Matrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(r))
}

pub fn random_tensor(r: &mut ChaCha8Rng, dims: [usize; 3]) -> DenseTensor3 {
    DenseTensor3::from_fn(dims, |_, _, _| normal(r))
}

/// Entry `(i, j, k)` straight from the row-major layout.
fn entry(x: &DenseTensor3, i: usize, j: usize, k: usize) -> f64 {
    let [_, n2, n3] = x.dims();
    x.values()[(i * n2 + j) * n3 + k]
}

pub fn khatri_rao_oracle(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    // build each column as a Kronecker product, then transpose to rows
    let cols: Vec<Vec<f64>> = (0..a.cols)
        .map(|l| {
            let mut col = Vec::new();
            for x in 0..a.rows {
                for y in 0..b.rows {
                    col.push(a.get(x, l) * b.get(y, l));
                }
            }
            col
        })
        .collect();
    (0..a.rows * b.rows)
        .map(|row| cols.iter().map(|c| c[row]).collect())
        .collect()
}

/// Mode-`m` unfolding: the remaining indices in lexicographic order, last fastest.
pub fn unfold_oracle(x: &DenseTensor3, mode: usize) -> Vec<Vec<f64>> {
    let [n1, n2, n3] = x.dims();
    let (rows, others) = match mode {
        1 => (n1, (n2, n3)),
        2 => (n2, (n1, n3)),
        _ => (n3, (n1, n2)),
    };
    let mut out = vec![Vec::new(); rows];
    for (r, row) in out.iter_mut().enumerate() {
        for p in 0..others.0 {
            for q in 0..others.1 {
                let v = match mode {
                    1 => entry(x, r, p, q),
                    2 => entry(x, p, r, q),
                    _ => entry(x, p, q, r),
                };
                row.push(v);
            }
        }
    }
    out
}

pub fn reconstruct_oracle(cp: &CpDecomposition, dims: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let mut s = 0.0;
                for l in 0..cp.rank {
                    s += cp.lambdas[l] * cp.u.get(i, l) * cp.v.get(j, l) * cp.w.get(k, l);
                }
                out.push(s);
            }
        }
    }
    out
}

/// Last `k` treatments up to and including `t`, oldest first, zero before the study.
pub fn window_oracle(panel: &PanelData, i: usize, t: usize, k: usize) -> Vec<u8> {
    (0..k)
        .map(|back| {
            let offset = k - 1 - back;
            if offset > t {
                0
            } else {
                panel.treatments()[i * panel.n_periods() + t - offset]
            }
        })
        .collect()
}

/// Oldest treatment is the most significant bit.
pub fn encode_oracle(window: &[u8]) -> usize {
    let k = window.len();
    window
        .iter()
        .enumerate()
        .map(|(idx, &a)| (a as usize) * 2usize.pow((k - 1 - idx) as u32))
        .sum()
}

pub fn atet_oracle(t_hat: &DenseTensor3, panel: &PanelData, k: usize) -> Option<f64> {
    let mut diffs = Vec::new();
    for i in 0..panel.n_units() {
        for t in 0..panel.n_periods() {
            if panel.treatments()[i * panel.n_periods() + t] == 1 {
                let w = window_oracle(panel, i, t, k);
                let mut w0 = w.clone();
                *w0.last_mut().unwrap() = 0;
                diffs.push(entry(t_hat, i, t, encode_oracle(&w)) - entry(t_hat, i, t, encode_oracle(&w0)));
            }
        }
    }
    if diffs.is_empty() {
        None
    } else {
        Some(diffs.iter().sum::<f64>() / diffs.len() as f64)
    }
}

pub fn completion_loss_oracle(t_hat: &DenseTensor3, panel: &PanelData, w: &[f64], k: usize) -> f64 {
    let t_len = panel.n_periods();
    let mut s = 0.0;
    for i in 0..panel.n_units() {
        for t in 0..t_len {
            let p = encode_oracle(&window_oracle(panel, i, t, k));
            let r = panel.outcomes()[i * t_len + t] - entry(t_hat, i, t, p);
            s += w[i * t_len + t] * r * r;
        }
    }
    s / (panel.n_units() * t_len) as f64
}

/// `‖Y_w − T‖²_W / (N·T)` with `Y_w` rebuilt from the weights, outcomes and
/// slice probabilities, and `W² = slice probability`.
pub fn approximation_loss_oracle(t_hat: &DenseTensor3, panel: &PanelData, bundle: &WeightBundle) -> f64 {
    let [n, t_len, slices] = t_hat.dims();
    let mut s = 0.0;
    for i in 0..n {
        for t in 0..t_len {
            let realized = encode_oracle(&window_oracle(panel, i, t, bundle.k));
            for p in 0..slices {
                let prob = entry(&bundle.slice_probs, i, t, p);
                let target = if p == realized {
                    bundle.weights[i * t_len + t] * panel.outcomes()[i * t_len + t] / prob.max(bundle.floor)
                } else {
                    0.0
                };
                let d = target - entry(t_hat, i, t, p);
                s += prob * d * d;
            }
        }
    }
    s / (n * t_len) as f64
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// Small simulated panel and its weight bundle.
pub fn small_bundle(seed: u64, n: usize, t_len: usize, k: usize) -> (PanelData, WeightBundle) {
    let policy = if seed.is_multiple_of(2) { PolicyKind::Simple } else { PolicyKind::Complex };
    let cfg = SimConfig {
        true_k: k.min(t_len),
        ..SimConfig::custom(n, t_len, policy, seed)
    };
    let truth = simulate_panel(&cfg).unwrap();
    let model = cfg.policy_model();
    let mc = McConfig {
        n_samples: 400,
        seed,
        ..McConfig::default()
    };
    let bundle = build_bundle(&model, &truth.panel, &model, k, &mc).unwrap();
    (truth.panel, bundle)
}

/// Random binary panel with standard normal outcomes and no covariates.
pub fn random_panel(r: &mut ChaCha8Rng, n: usize, t_len: usize) -> PanelData {
    let a = (0..n * t_len).map(|_| u8::from(r.random::<bool>())).collect();
    let y = (0..n * t_len).map(|_| normal(r)).collect();
    PanelData::new(n, t_len, 0, a, vec![], y).unwrap()
}
