//! CP (canonical polyadic) decompositions and the alternating least squares
//! projection used by the estimator.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{solve_spd, top_eigenvectors};
use crate::rng::{stream, tag};
use crate::tensor::{DenseTensor3, Matrix};

/// Ridge added to an ALS normal-equation matrix when its Cholesky factorization fails.
pub const ALS_FALLBACK_RIDGE: f64 = 1e-10;

/// A sum of `rank` scaled rank-one terms `λ_l · u_l ⊗ v_l ⊗ w_l`.
///
/// Factor matrices are stored with one column per component, so `u` is `n1 × r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpDecomposition {
    pub rank: usize,
    pub lambdas: Vec<f64>,
    #[serde(rename = "U")]
    pub u: Matrix,
    #[serde(rename = "V")]
    pub v: Matrix,
    #[serde(rename = "Wf")]
    pub w: Matrix,
}

impl CpDecomposition {
    /// Checked constructor; factor columns are taken as given (not normalized).
    pub fn new(lambdas: Vec<f64>, u: Matrix, v: Matrix, w: Matrix) -> Result<Self> {
        let rank = lambdas.len();
        for (mode, m) in [(1, &u), (2, &v), (3, &w)] {
            if m.cols != rank {
                return Err(Error::DimensionMismatch {
                    context: "cp factor columns",
                    mode,
                    expected: rank,
                    actual: m.cols,
                });
            }
        }
        Ok(Self { rank, lambdas, u, v, w })
    }

    /// The empty decomposition, which reconstructs to zero.
    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            rank: 0,
            lambdas: Vec::new(),
            u: Matrix::zeros(dims[0], 0),
            v: Matrix::zeros(dims[1], 0),
            w: Matrix::zeros(dims[2], 0),
        }
    }

    /// Row counts of the three factors.
    pub fn dims(&self) -> [usize; 3] {
        [self.u.rows, self.v.rows, self.w.rows]
    }

    /// Dense reconstruction at the factors' own dimensions.
    pub fn to_tensor(&self) -> DenseTensor3 {
        reconstruct(self, self.dims()).expect("factor dims are self-consistent")
    }

    /// Put the decomposition in canonical form: unit-norm columns, nonnegative
    /// λ (sign moved into `u`), sorted by |λ| descending. Zero columns become
    /// the first standard basis vector with λ = 0.
    pub fn canonicalize(&mut self) {
        let r = self.rank;
        for l in 0..r {
            let mut scale = self.lambdas[l];
            for m in [&mut self.u, &mut self.v, &mut self.w] {
                let norm = m.column_norm(l);
                if norm > 0.0 && norm.is_finite() {
                    for row in 0..m.rows {
                        let x = m.get(row, l);
                        m.set(row, l, x / norm);
                    }
                    scale *= norm;
                } else {
                    scale = 0.0;
                }
            }
            if scale == 0.0 {
                for m in [&mut self.u, &mut self.v, &mut self.w] {
                    for row in 0..m.rows {
                        m.set(row, l, if row == 0 { 1.0 } else { 0.0 });
                    }
                }
            } else if scale < 0.0 {
                scale = -scale;
                for row in 0..self.u.rows {
                    let x = self.u.get(row, l);
                    self.u.set(row, l, -x);
                }
            }
            self.lambdas[l] = scale;
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&a, &b| {
            self.lambdas[b]
                .abs()
                .partial_cmp(&self.lambdas[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        if order.iter().enumerate().any(|(i, &o)| i != o) {
            let permute = |m: &Matrix| Matrix::from_fn(m.rows, r, |row, c| m.get(row, order[c]));
            self.u = permute(&self.u);
            self.v = permute(&self.v);
            self.w = permute(&self.w);
            self.lambdas = order.iter().map(|&o| self.lambdas[o]).collect();
        }
    }
}

/// Evaluate `Σ_l λ_l u_l ⊗ v_l ⊗ w_l` on a grid of shape `dims`.
pub fn reconstruct(cp: &CpDecomposition, dims: [usize; 3]) -> Result<DenseTensor3> {
    for (mode, (m, n)) in [&cp.u, &cp.v, &cp.w].into_iter().zip(dims).enumerate() {
        if m.rows != n {
            return Err(Error::DimensionMismatch {
                context: "reconstruct",
                mode: mode + 1,
                expected: n,
                actual: m.rows,
            });
        }
        if m.cols != cp.rank {
            return Err(Error::DimensionMismatch {
                context: "reconstruct factor columns",
                mode: mode + 1,
                expected: cp.rank,
                actual: m.cols,
            });
        }
    }
    if cp.lambdas.len() != cp.rank {
        return Err(invalid(format!(
            "cp has rank {} but {} lambdas",
            cp.rank,
            cp.lambdas.len()
        )));
    }
    let [n1, n2, n3] = dims;
    let r = cp.rank;
    let mut out = vec![0.0; n1 * n2 * n3];
    let mut coef = vec![0.0; r];
    for i in 0..n1 {
        let ui = cp.u.row(i);
        for j in 0..n2 {
            let vj = cp.v.row(j);
            for l in 0..r {
                coef[l] = cp.lambdas[l] * ui[l] * vj[l];
            }
            let base = (i * n2 + j) * n3;
            for k in 0..n3 {
                let wk = cp.w.row(k);
                let mut s = 0.0;
                for l in 0..r {
                    s += coef[l] * wk[l];
                }
                out[base + k] = s;
            }
        }
    }
    DenseTensor3::from_vec(dims, out)
}

/// Clamp every λ into `[-bound, bound]`, leaving factors untouched.
pub fn spectral_clip(cp: &CpDecomposition, bound: f64) -> Result<CpDecomposition> {
    if !(bound > 0.0) {
        return Err(invalid(format!("singular-value bound must be positive, got {bound}")));
    }
    let mut out = cp.clone();
    for l in out.lambdas.iter_mut() {
        *l = l.clamp(-bound, bound);
    }
    Ok(out)
}

/// Stopping and initialization settings for [`cp_als`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsConfig {
    pub rank: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Seed for the random fallback initialization.
    pub seed: u64,
}

impl AlsConfig {
    pub fn new(rank: usize, max_iters: usize, tol: f64) -> Self {
        Self {
            rank,
            max_iters,
            tol,
            seed: 0,
        }
    }
}

/// Everything an ALS run produced, including the per-sweep error trace.
#[derive(Debug, Clone)]
pub struct AlsOutcome {
    pub cp: CpDecomposition,
    /// Squared reconstruction error after each sweep.
    pub errors: Vec<f64>,
    pub converged: bool,
}

/// Rank-`r` CP decomposition by alternating least squares.
pub fn cp_als(t: &DenseTensor3, rank: usize, max_iters: usize, tol: f64) -> Result<CpDecomposition> {
    cp_als_with(t, &AlsConfig::new(rank, max_iters, tol), None).map(|o| o.cp)
}

/// ALS with full control: explicit config and an optional warm start whose
/// factors (scaled by its λ) replace the default initialization.
pub fn cp_als_with(t: &DenseTensor3, cfg: &AlsConfig, warm: Option<&CpDecomposition>) -> Result<AlsOutcome> {
    let [n1, n2, n3] = t.dims();
    let r = cfg.rank;
    if r == 0 {
        return Err(invalid("cp_als rank must be at least 1"));
    }
    if cfg.max_iters == 0 {
        return Err(invalid("cp_als max_iters must be at least 1"));
    }
    if !(cfg.tol > 0.0) {
        return Err(invalid(format!("cp_als tol must be positive, got {}", cfg.tol)));
    }
    let bound = (n1 * n2).min(n1 * n3).min(n2 * n3);
    if r > bound {
        return Err(invalid(format!(
            "rank {r} exceeds the smallest unfolding width {bound} for dims {:?}",
            t.dims()
        )));
    }

    let (mut a, mut b, mut c) = match warm {
        Some(cp) => {
            if cp.rank != r {
                return Err(invalid(format!("warm start has rank {}, expected {r}", cp.rank)));
            }
            for (mode, (m, n)) in [&cp.u, &cp.v, &cp.w].into_iter().zip([n1, n2, n3]).enumerate() {
                if m.rows != n {
                    return Err(Error::DimensionMismatch {
                        context: "cp_als warm start",
                        mode: mode + 1,
                        expected: n,
                        actual: m.rows,
                    });
                }
            }
            let a = Matrix::from_fn(n1, r, |i, l| cp.u.get(i, l) * cp.lambdas[l]);
            (a, cp.v.clone(), cp.w.clone())
        }
        None => (
            Matrix::zeros(n1, r),
            init_factor(t, 2, r, cfg.seed),
            init_factor(t, 3, r, cfg.seed),
        ),
    };

    let x = t.values();
    let norm_x = t.frobenius_sq();
    let mut xc = vec![0.0; n1 * n2 * r];
    let mut errors = Vec::with_capacity(cfg.max_iters);
    let mut converged = false;

    for _ in 0..cfg.max_iters {
        // X ×_3 C, reused by the first two mode updates
        xc.iter_mut().for_each(|v| *v = 0.0);
        for ij in 0..n1 * n2 {
            let fiber = &x[ij * n3..(ij + 1) * n3];
            let dst = &mut xc[ij * r..(ij + 1) * r];
            for (k, &val) in fiber.iter().enumerate() {
                if val != 0.0 {
                    let ck = c.row(k);
                    for l in 0..r {
                        dst[l] += val * ck[l];
                    }
                }
            }
        }

        let gc = c.gram();
        // mode 1
        let mut m1 = vec![0.0; n1 * r];
        for i in 0..n1 {
            for j in 0..n2 {
                let src = &xc[(i * n2 + j) * r..(i * n2 + j + 1) * r];
                let bj = b.row(j);
                for l in 0..r {
                    m1[i * r + l] += src[l] * bj[l];
                }
            }
        }
        a = solve_rows(&m1, n1, &hadamard(&b.gram(), &gc));

        // mode 2
        let mut m2 = vec![0.0; n2 * r];
        for i in 0..n1 {
            let ai = a.row(i);
            for j in 0..n2 {
                let src = &xc[(i * n2 + j) * r..(i * n2 + j + 1) * r];
                for l in 0..r {
                    m2[j * r + l] += src[l] * ai[l];
                }
            }
        }
        let ga = a.gram();
        b = solve_rows(&m2, n2, &hadamard(&ga, &gc));

        // mode 3
        let mut m3 = vec![0.0; n3 * r];
        let mut coef = vec![0.0; r];
        for i in 0..n1 {
            let ai = a.row(i);
            for j in 0..n2 {
                let bj = b.row(j);
                for l in 0..r {
                    coef[l] = ai[l] * bj[l];
                }
                let fiber = &x[(i * n2 + j) * n3..(i * n2 + j + 1) * n3];
                for (k, &val) in fiber.iter().enumerate() {
                    if val != 0.0 {
                        let dst = &mut m3[k * r..(k + 1) * r];
                        for l in 0..r {
                            dst[l] += val * coef[l];
                        }
                    }
                }
            }
        }
        let gab = hadamard(&ga, &b.gram());
        c = solve_rows(&m3, n3, &gab);

        // ‖X − X̂‖² = ‖X‖² − 2⟨X, X̂⟩ + ‖X̂‖², with the inner product read off
        // the mode-3 right-hand side.
        let inner: f64 = m3.iter().zip(&c.data).map(|(p, q)| p * q).sum();
        let gcn = c.gram();
        let model_sq: f64 = gab.data.iter().zip(&gcn.data).map(|(p, q)| p * q).sum();
        let mut err = (norm_x - 2.0 * inner + model_sq).max(0.0);
        if err <= 1e-8 * norm_x {
            err = exact_error(t, &a, &b, &c);
        }

        rebalance(&mut a, &mut b, &mut c);
        let prev = errors.last().copied();
        errors.push(err);
        if let Some(prev) = prev {
            let change = (prev - err).abs() / prev.max(f64::MIN_POSITIVE);
            if change < cfg.tol {
                converged = true;
                break;
            }
        }
        if err == 0.0 {
            converged = true;
            break;
        }
    }

    let mut cp = CpDecomposition {
        rank: r,
        lambdas: vec![1.0; r],
        u: a,
        v: b,
        w: c,
    };
    cp.canonicalize();
    Ok(AlsOutcome { cp, errors, converged })
}

fn hadamard(p: &Matrix, q: &Matrix) -> Matrix {
    Matrix::from_fn(p.rows, p.cols, |i, j| p.get(i, j) * q.get(i, j))
}

/// Solve `F · G = M` for `F` (rows of `M` are right-hand sides; `G` symmetric).
fn solve_rows(m: &[f64], rows: usize, g: &Matrix) -> Matrix {
    let r = g.rows;
    // transpose M into r × rows so each column is one system
    let mut rhs = vec![0.0; r * rows];
    for i in 0..rows {
        for l in 0..r {
            rhs[l * rows + i] = m[i * r + l];
        }
    }
    let sol = solve_spd(&g.data, r, &rhs, rows, 0.0, ALS_FALLBACK_RIDGE).solution;
    Matrix::from_fn(rows, r, |i, l| sol[l * rows + i])
}

/// Keep the factors' column scales comparable: `b` and `c` get unit columns,
/// `a` absorbs the scale.
fn rebalance(a: &mut Matrix, b: &mut Matrix, c: &mut Matrix) {
    for l in 0..a.cols {
        let nb = b.column_norm(l);
        let nc = c.column_norm(l);
        if nb > 0.0 && nc > 0.0 {
            for row in 0..b.rows {
                let v = b.get(row, l);
                b.set(row, l, v / nb);
            }
            for row in 0..c.rows {
                let v = c.get(row, l);
                c.set(row, l, v / nc);
            }
            for row in 0..a.rows {
                let v = a.get(row, l);
                a.set(row, l, v * nb * nc);
            }
        }
    }
}

fn exact_error(t: &DenseTensor3, a: &Matrix, b: &Matrix, c: &Matrix) -> f64 {
    let cp = CpDecomposition {
        rank: a.cols,
        lambdas: vec![1.0; a.cols],
        u: a.clone(),
        v: b.clone(),
        w: c.clone(),
    };
    let rec = reconstruct(&cp, t.dims()).expect("dims checked by caller");
    t.values()
        .iter()
        .zip(rec.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Leading left singular vectors of the mode-`mode` unfolding, or seeded
/// standard-normal entries when the mode is shorter than the rank.
fn init_factor(t: &DenseTensor3, mode: usize, r: usize, seed: u64) -> Matrix {
    let [n1, n2, n3] = t.dims();
    let n = t.dims()[mode - 1];
    if n < r {
        let mut rng = stream(seed, tag::ALS_INIT, mode as u64, 0);
        return Matrix::from_fn(n, r, |_, _| StandardNormal.sample(&mut rng));
    }
    let x = t.values();
    let mut g = Matrix::zeros(n, n);
    match mode {
        2 => {
            for i in 0..n1 {
                let slab = &x[i * n2 * n3..(i + 1) * n2 * n3];
                for j in 0..n2 {
                    let rj = &slab[j * n3..(j + 1) * n3];
                    for jj in j..n2 {
                        let rjj = &slab[jj * n3..(jj + 1) * n3];
                        let s: f64 = rj.iter().zip(rjj).map(|(p, q)| p * q).sum();
                        g.data[j * n + jj] += s;
                    }
                }
            }
        }
        3 => {
            for fiber in x.chunks_exact(n3) {
                for k in 0..n3 {
                    if fiber[k] == 0.0 {
                        continue;
                    }
                    for kk in k..n3 {
                        g.data[k * n + kk] += fiber[k] * fiber[kk];
                    }
                }
            }
        }
        _ => unreachable!("only modes 2 and 3 are initialized"),
    }
    for p in 0..n {
        for q in 0..p {
            g.data[p * n + q] = g.data[q * n + p];
        }
    }
    top_eigenvectors(&g, r)
}
