//! Reference implementations used only by tests.
//!
//! Everything here is written from the problem definitions with explicit
//! loops and shares no code with the `mtlfsl` crate.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// `1/2 sum_i ||X_i w_i - y_i||^2 + l1 ||W||_1 + l2 ||S W||_1 + l3 ||W H||_1`
/// with `(W H)_{m,j} = W_{m,j} - W_{m,j+1}`.
#[derive(Clone, Debug)]
pub struct Problem {
    pub designs: Vec<DMatrix<f64>>,
    pub targets: Vec<DVector<f64>>,
    pub s: DMatrix<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Problem {
    pub fn n_features(&self) -> usize {
        self.s.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.designs.len()
    }

    fn n_vars(&self) -> usize {
        self.n_features() * self.n_tasks()
    }

    fn index(&self, m: usize, i: usize) -> usize {
        i * self.n_features() + m
    }

    /// Rows of the stacked penalty operator `K`, so that the penalty equals
    /// `||K vec(W)||_1`. Each row is a sparse list of (variable, coefficient).
    fn penalty_rows(&self) -> Vec<Vec<(usize, f64)>> {
        let (p, t) = (self.n_features(), self.n_tasks());
        let mut rows = Vec::new();
        if self.lambda1 > 0.0 {
            for i in 0..t {
                for m in 0..p {
                    rows.push(vec![(self.index(m, i), self.lambda1)]);
                }
            }
        }
        if self.lambda2 > 0.0 {
            for i in 0..t {
                for a in 0..p {
                    let mut row = Vec::new();
                    for b in 0..p {
                        if self.s[(a, b)] != 0.0 {
                            row.push((self.index(b, i), self.lambda2 * self.s[(a, b)]));
                        }
                    }
                    if !row.is_empty() {
                        rows.push(row);
                    }
                }
            }
        }
        if self.lambda3 > 0.0 {
            for j in 0..t - 1 {
                for m in 0..p {
                    rows.push(vec![(self.index(m, j), self.lambda3), (self.index(m, j + 1), -self.lambda3)]);
                }
            }
        }
        rows
    }
}

/// Objective value by direct summation.
pub fn objective(problem: &Problem, w: &DMatrix<f64>) -> f64 {
    let (p, t) = (problem.n_features(), problem.n_tasks());
    let mut loss = 0.0;
    for i in 0..t {
        let x = &problem.designs[i];
        for r in 0..x.nrows() {
            let mut pred = 0.0;
            for m in 0..p {
                pred += x[(r, m)] * w[(m, i)];
            }
            loss += 0.5 * (pred - problem.targets[i][r]).powi(2);
        }
    }
    let mut l1 = 0.0;
    let mut graph = 0.0;
    let mut temporal = 0.0;
    for i in 0..t {
        for a in 0..p {
            l1 += w[(a, i)].abs();
            let mut sw = 0.0;
            for b in 0..p {
                sw += problem.s[(a, b)] * w[(b, i)];
            }
            graph += sw.abs();
            if i + 1 < t {
                temporal += (w[(a, i)] - w[(a, i + 1)]).abs();
            }
        }
    }
    loss + problem.lambda1 * l1 + problem.lambda2 * graph + problem.lambda3 * temporal
}

/// Solution of the dual-based oracle together with a lower bound on the
/// optimal value.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub w: DMatrix<f64>,
    /// Objective at `w`; an upper bound on the optimum.
    pub objective: f64,
    /// Dual objective at a feasible dual point; a lower bound on the optimum.
    pub lower_bound: f64,
    pub iterations: usize,
}

impl OracleSolution {
    pub fn relative_gap(&self) -> f64 {
        (self.objective - self.lower_bound) / self.objective.abs().max(1e-300)
    }
}

struct DualData {
    k: DMatrix<f64>,
    m_factors: Vec<Cholesky<f64, Dyn>>,
    c: DVector<f64>,
    constant: f64,
    p: usize,
}

impl DualData {
    fn minv(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for (i, chol) in self.m_factors.iter().enumerate() {
            let block = v.rows(i * self.p, self.p).into_owned();
            out.rows_mut(i * self.p, self.p).copy_from(&chol.solve(&block));
        }
        out
    }

    /// Primal minimizer of the Lagrangian for dual point `z`.
    fn primal(&self, z: &DVector<f64>) -> DVector<f64> {
        self.minv(&(&self.c - self.k.tr_mul(z)))
    }

    fn dual_value(&self, z: &DVector<f64>) -> f64 {
        let r = &self.c - self.k.tr_mul(z);
        self.constant - 0.5 * r.dot(&self.minv(&r))
    }
}

fn unvec(v: &DVector<f64>, p: usize, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, t, |m, i| v[i * p + m])
}

/// Exact minimizer on the face where the rows in `zero` of `K w` vanish and
/// the others keep the signs `sign`. Returns `None` when the face is empty
/// of variables.
fn solve_on_face(data: &DualData, m_blocks: &[DMatrix<f64>], zero: &[usize], sign: &[f64]) -> Option<DVector<f64>> {
    let n = data.c.len();
    let kz = DMatrix::from_fn(zero.len(), n, |r, c| data.k[(zero[r], c)]);
    let basis = if zero.is_empty() {
        DMatrix::identity(n, n)
    } else {
        let gram = kz.tr_mul(&kz);
        let eig = SymmetricEigen::new(gram);
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..n).filter(|&j| eig.eigenvalues[j] <= 1e-10 * top.max(1e-300)).collect();
        if keep.is_empty() {
            return Some(DVector::zeros(n));
        }
        DMatrix::from_fn(n, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])])
    };
    let mut m_full = DMatrix::zeros(n, n);
    for (i, b) in m_blocks.iter().enumerate() {
        let p = b.nrows();
        m_full.view_mut((i * p, i * p), (p, p)).copy_from(b);
    }
    let mut rhs = data.c.clone();
    for (j, &s) in sign.iter().enumerate() {
        if s != 0.0 {
            rhs -= data.k.row(j).transpose() * s;
        }
    }
    let reduced = basis.tr_mul(&m_full) * &basis;
    let u = Cholesky::new(reduced)?.solve(&basis.tr_mul(&rhs));
    Some(&basis * u)
}

/// Dual point certifying `w` when it is optimal: `z_j = sign((K w)_j)` off
/// the zero set, and on it the solution of the stationarity equation closest
/// to `hint`, clipped to the box.
fn certify(
    data: &DualData,
    m_blocks: &[DMatrix<f64>],
    w: &DVector<f64>,
    zero: &[usize],
    sign: &[f64],
    hint: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n = w.len();
    let mut mw = DVector::zeros(n);
    for (i, b) in m_blocks.iter().enumerate() {
        let p = b.nrows();
        mw.rows_mut(i * p, p).copy_from(&(b * w.rows(i * p, p)));
    }
    let mut r = &data.c - mw;
    let mut z = DVector::zeros(data.k.nrows());
    for (j, &s) in sign.iter().enumerate() {
        if s != 0.0 {
            z[j] = s;
            r -= data.k.row(j).transpose() * s;
        }
    }
    if !zero.is_empty() {
        let kzt = DMatrix::from_fn(n, zero.len(), |r, c| data.k[(zero[c], r)]);
        let start = DVector::from_iterator(zero.len(), zero.iter().map(|&j| hint[j]));
        let correction = kzt.clone().svd(true, true).solve(&(&r - &kzt * &start), 1e-12).ok()?;
        for (a, &j) in zero.iter().enumerate() {
            z[j] = (start[a] + correction[a]).clamp(-1.0, 1.0);
        }
    }
    Some(z)
}

/// Solves the problem through its box-constrained dual
/// `max_{|z| <= 1} -1/2 (c - K^T z)^T M^{-1} (c - K^T z) + const`
/// with accelerated projected gradient, polishing the primal on the
/// identified sign pattern. Stops once the certified relative gap is at
/// most `rel_gap`. Requires every `X_i^T X_i` to be positive definite.
pub fn solve_dual(problem: &Problem, rel_gap: f64, max_iterations: usize) -> OracleSolution {
    let (p, t) = (problem.n_features(), problem.n_tasks());
    let n = problem.n_vars();
    let rows = problem.penalty_rows();
    let mut k = DMatrix::zeros(rows.len(), n);
    for (j, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            k[(j, c)] += v;
        }
    }
    let mut m_blocks = Vec::with_capacity(t);
    let mut c = DVector::zeros(n);
    let mut constant = 0.0;
    for i in 0..t {
        let x = &problem.designs[i];
        let y = &problem.targets[i];
        let mut block = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in 0..p {
                let mut s = 0.0;
                for r in 0..x.nrows() {
                    s += x[(r, a)] * x[(r, b)];
                }
                block[(a, b)] = s;
            }
            let mut s = 0.0;
            for r in 0..x.nrows() {
                s += x[(r, a)] * y[r];
            }
            c[i * p + a] = s;
        }
        for r in 0..y.len() {
            constant += 0.5 * y[r] * y[r];
        }
        m_blocks.push(block);
    }
    let m_factors = m_blocks
        .iter()
        .map(|b| Cholesky::new(b.clone()).expect("X_i^T X_i must be positive definite"))
        .collect();
    let data = DualData { k, m_factors, c, constant, p };

    let mut best_w = data.primal(&DVector::zeros(data.k.nrows()));
    let mut best_f = objective(problem, &unvec(&best_w, p, t));
    if data.k.nrows() == 0 {
        return OracleSolution { w: unvec(&best_w, p, t), objective: best_f, lower_bound: best_f, iterations: 0 };
    }
    let m = data.k.nrows();
    let minv_k = DMatrix::from_columns(
        &(0..m).map(|j| data.minv(&data.k.row(j).transpose())).collect::<Vec<_>>(),
    );
    let g = &data.k * &minv_k;
    let b = &data.k * data.minv(&data.c);
    let lipschitz = SymmetricEigen::new(g.clone()).eigenvalues.iter().copied().fold(0.0, f64::max);
    let step = 1.0 / lipschitz.max(1e-300);
    let phi = |z: &DVector<f64>| 0.5 * z.dot(&(&g * z)) - b.dot(z);

    let mut z = DVector::zeros(m);
    let mut y = z.clone();
    let mut momentum = 1.0f64;
    let mut phi_z = phi(&z);
    let mut best_lower = data.dual_value(&z);
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let grad = &g * &y - &b;
        let z_next = (&y - grad * step).map(|v| v.clamp(-1.0, 1.0));
        let phi_next = phi(&z_next);
        if phi_next > phi_z {
            // Adaptive restart.
            y = z.clone();
            momentum = 1.0;
        } else {
            let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            y = &z_next + (&z_next - &z) * ((momentum - 1.0) / next_momentum);
            momentum = next_momentum;
            z = z_next;
            phi_z = phi_next;
        }

        if iterations % 500 == 0 {
            best_lower = best_lower.max(data.dual_value(&z));
            let w = data.primal(&z);
            let f = objective(problem, &unvec(&w, p, t));
            if f < best_f {
                best_f = f;
                best_w = w.clone();
            }
            // Polish on sign patterns read off the primal at several
            // thresholds.
            let kw = &data.k * &w;
            let scale = kw.amax().max(1e-300);
            for exponent in 2..=10 {
                let cut = scale * 10f64.powi(-exponent);
                let zero: Vec<usize> = (0..m).filter(|&j| kw[j].abs() <= cut).collect();
                let sign: Vec<f64> = (0..m)
                    .map(|j| if kw[j].abs() <= cut { 0.0 } else { kw[j].signum() })
                    .collect();
                let Some(wp) = solve_on_face(&data, &m_blocks, &zero, &sign) else {
                    continue;
                };
                let fp = objective(problem, &unvec(&wp, p, t));
                if fp < best_f {
                    best_f = fp;
                    best_w = wp.clone();
                }
                if let Some(zc) = certify(&data, &m_blocks, &wp, &zero, &sign, &z) {
                    best_lower = best_lower.max(data.dual_value(&zc));
                }
            }
            if best_f - best_lower <= rel_gap * best_f.abs().max(1e-300) {
                break;
            }
        }
    }
    OracleSolution { w: unvec(&best_w, p, t), objective: best_f, lower_bound: best_lower, iterations }
}

/// `1/2 ||X w - y||^2 + lambda ||w||_1` by cyclic coordinate descent, until
/// no coordinate moves by more than `tol`.
pub fn lasso_cd(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, tol: f64, max_sweeps: usize) -> DVector<f64> {
    let (n, p) = x.shape();
    let mut w = DVector::zeros(p);
    let mut resid = y.clone();
    let norms: Vec<f64> = (0..p).map(|j| (0..n).map(|r| x[(r, j)] * x[(r, j)]).sum()).collect();
    for _ in 0..max_sweeps {
        let mut largest = 0.0f64;
        for j in 0..p {
            if norms[j] == 0.0 {
                continue;
            }
            let mut rho = 0.0;
            for r in 0..n {
                rho += x[(r, j)] * resid[r];
            }
            rho += norms[j] * w[j];
            let new = if rho > lambda {
                (rho - lambda) / norms[j]
            } else if rho < -lambda {
                (rho + lambda) / norms[j]
            } else {
                0.0
            };
            let delta = new - w[j];
            if delta != 0.0 {
                for r in 0..n {
                    resid[r] -= x[(r, j)] * delta;
                }
                w[j] = new;
            }
            largest = largest.max(delta.abs());
        }
        if largest <= tol {
            break;
        }
    }
    w
}

pub fn lasso_objective(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, w: &DVector<f64>) -> f64 {
    let mut loss = 0.0;
    for r in 0..x.nrows() {
        let mut pred = 0.0;
        for j in 0..x.ncols() {
            pred += x[(r, j)] * w[j];
        }
        loss += 0.5 * (pred - y[r]).powi(2);
    }
    loss + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// Least squares through `X^T X w = X^T y`, solved by Gaussian elimination
/// with partial pivoting.
pub fn normal_equations(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let p = x.ncols();
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..p {
        for j in 0..p {
            a[i][j] = (0..x.nrows()).map(|r| x[(r, i)] * x[(r, j)]).sum();
        }
        a[i][p] = (0..x.nrows()).map(|r| x[(r, i)] * y[r]).sum();
    }
    for col in 0..p {
        let pivot = (col..p)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for r in col + 1..p {
            let f = a[r][col] / a[col][col];
            for c in col..=p {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut w = DVector::zeros(p);
    for r in (0..p).rev() {
        let mut s = a[r][p];
        for c in r + 1..p {
            s -= a[r][c] * w[c];
        }
        w[r] = s / a[r][r];
    }
    w
}

/// Pearson correlation of every column pair by explicit loops. Constant
/// columns correlate 0 with everything else and 1 with themselves.
pub fn pearson_naive(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let (n, p) = x.shape();
    let mean: Vec<f64> = (0..p).map(|j| (0..n).map(|r| x[(r, j)]).sum::<f64>() / n as f64).collect();
    let mut out = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in 0..p {
            if a == b {
                out[a][b] = 1.0;
                continue;
            }
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for r in 0..n {
                let da = x[(r, a)] - mean[a];
                let db = x[(r, b)] - mean[b];
                sab += da * db;
                saa += da * da;
                sbb += db * db;
            }
            out[a][b] = if saa == 0.0 || sbb == 0.0 { 0.0 } else { sab / (saa * sbb).sqrt() };
        }
    }
    out
}

/// Thresholds each correlation matrix at `tau` (entries with `|r| < tau`
/// become 0) and sums them with weights `n_i / sum n`. Returns the weights
/// and the fused matrix.
pub fn fuse_naive(matrices: &[Vec<Vec<f64>>], counts: &[usize], tau: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let total: usize = counts.iter().sum();
    let weights: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let p = matrices[0].len();
    let mut s = vec![vec![0.0; p]; p];
    for (mat, w) in matrices.iter().zip(&weights) {
        for a in 0..p {
            for b in 0..p {
                let r = mat[a][b];
                let kept = if r.abs() < tau { 0.0 } else { r };
                s[a][b] += kept * w;
            }
        }
    }
    (weights, s)
}
