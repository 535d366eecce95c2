//! Linearized collision operator L = −2Q(1,·): dense assembly, kernel and gap checks,
//! Fredholm solves for Â and B̂, and the transport coefficients ν, κ.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{CollisionOperator, KernelKind};
use crate::error::{Error, Result};
use crate::velocity_space::{dot, GridFunction, VelocityGrid};

/// Symmetric-traceless index pairs in the order xx, yy, zz, xy, xz, yz.
pub const TENSOR_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

const DENSE_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Allow the dense factorization below `DENSE_LIMIT` nodes.
    pub dense_fallback: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 5000,
            dense_fallback: true,
        }
    }
}

pub struct LinearizedOperator {
    op: CollisionOperator,
    grid: Arc<VelocityGrid>,
    matrix: Vec<f64>,
    freq: GridFunction,
    kernel_basis: Vec<GridFunction>,
    symmetry_defect: f64,
    gap: OnceLock<f64>,
    dense: OnceLock<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>>,
}

impl std::fmt::Debug for LinearizedOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearizedOperator")
            .field("n", &self.len())
            .field("kind", &self.op.kernel().kind)
            .field("symmetry_defect", &self.symmetry_defect)
            .finish()
    }
}

/// Assemble L as a dense matrix acting on nodal values.
pub fn assemble_l(op: &CollisionOperator) -> Result<LinearizedOperator> {
    let grid = op.grid().clone();
    let nn = grid.len();
    let w = grid.weights();
    let basis = op.basis().to_vec();
    let mut matrix = vec![0.0; nn * nn];
    if op.is_surrogate() {
        let a = op.rate();
        matrix.par_chunks_mut(nn).enumerate().for_each(|(i, row)| {
            for (j, x) in row.iter_mut().enumerate() {
                let pij: f64 = basis.iter().map(|e| e[i] * e[j] * w[j]).sum();
                *x = a * ((i == j) as u8 as f64 - pij);
            }
        });
    } else {
        let t = op.table()?;
        let rate = op.rate();
        matrix.par_chunks_mut(nn).enumerate().for_each(|(i, row)| {
            let s = rate / w[i];
            t.for_each_from(i, |j, k, l, wt| {
                let c = s * wt;
                row[i] += c;
                row[j] += c;
                row[k] -= c;
                row[l] -= c;
            });
        });
    }
    let freq = op.frequency();

    // symmetry in the weighted inner product: w_i L_ij = w_j L_ji
    let scale = (0..nn)
        .map(|i| (w[i] * matrix[i * nn + i]).abs())
        .fold(0.0_f64, f64::max);
    let defect = (0..nn)
        .into_par_iter()
        .map(|i| {
            (i + 1..nn)
                .map(|j| (w[i] * matrix[i * nn + j] - w[j] * matrix[j * nn + i]).abs())
                .fold(0.0_f64, f64::max)
        })
        .reduce(|| 0.0, f64::max)
        / scale.max(f64::MIN_POSITIVE);
    if defect > 1e-10 {
        return Err(Error::Asymmetric(defect));
    }
    Ok(LinearizedOperator {
        op: op.clone(),
        grid,
        matrix,
        freq,
        kernel_basis: basis,
        symmetry_defect: defect,
        gap: OnceLock::new(),
        dense: OnceLock::new(),
    })
}

impl LinearizedOperator {
    pub fn len(&self) -> usize {
        self.grid.len()
    }
    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
    pub fn grid(&self) -> &Arc<VelocityGrid> {
        &self.grid
    }
    pub fn collision(&self) -> &CollisionOperator {
        &self.op
    }
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }
    pub fn freq(&self) -> &[f64] {
        &self.freq
    }
    pub fn kernel_basis(&self) -> &[GridFunction] {
        &self.kernel_basis
    }
    pub fn symmetry_defect(&self) -> f64 {
        self.symmetry_defect
    }

    pub fn apply(&self, f: &[f64]) -> GridFunction {
        let nn = self.len();
        self.matrix
            .par_chunks(nn)
            .map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn project_kernel(&self, f: &[f64]) -> GridFunction {
        self.grid.project_kernel(&self.kernel_basis, f)
    }

    fn deflate(&self, f: &mut [f64]) {
        for _ in 0..2 {
            for e in &self.kernel_basis {
                let c = self.grid.inner(e, f);
                for (x, ei) in f.iter_mut().zip(e) {
                    *x -= c * ei;
                }
            }
        }
    }

    /// Largest |⟨ξ f⟩|/‖f‖ over the orthonormal invariants.
    pub fn kernel_violation(&self, f: &[f64]) -> f64 {
        let nrm = self.grid.norm(f).max(f64::MIN_POSITIVE);
        self.kernel_basis
            .iter()
            .map(|e| self.grid.inner(e, f).abs())
            .fold(0.0, f64::max)
            / nrm
    }

    /// Bounds a₋ = min a(v) and a₊ = max a(v)/(1+|v|)^β over the nodes.
    pub fn frequency_bounds(&self) -> (f64, f64) {
        let beta = self.op.kernel().beta;
        let a_minus = self.freq.iter().cloned().fold(f64::INFINITY, f64::min);
        let a_plus = self
            .grid
            .nodes()
            .iter()
            .zip(&self.freq)
            .map(|(v, a)| a / (1.0 + dot(*v, *v).sqrt()).powf(beta))
            .fold(0.0, f64::max);
        (a_minus, a_plus)
    }

    /// Smallest eigenvalue of L on (Ker L)^⊥.
    pub fn spectral_gap(&self) -> Result<f64> {
        if let Some(g) = self.gap.get() {
            return Ok(*g);
        }
        let (vals, _) = self.lanczos(true, 400, 1e-8)?;
        let gap = vals[0];
        if !(gap > 0.0) {
            return Err(Error::NonPositiveGap(gap));
        }
        Ok(*self.gap.get_or_init(|| gap))
    }

    /// Lowest Ritz values of L (deflated or not) by Lanczos with full
    /// reorthogonalization in the weighted inner product.
    pub fn lanczos(&self, deflated: bool, max_steps: usize, rtol: f64) -> Result<(Vec<f64>, usize)> {
        let nn = self.len();
        let m_max = max_steps.min(nn.saturating_sub(if deflated { 5 } else { 0 })).max(1);
        let mut q: Vec<f64> = (0..nn)
            .map(|i| ((i as f64) * 0.754_877_666 + 0.1).sin() + 0.5 * ((i as f64) * 0.569_840_29).cos())
            .collect();
        if deflated {
            self.deflate(&mut q);
        }
        let n0 = self.grid.norm(&q);
        q.iter_mut().for_each(|x| *x /= n0);
        let mut basis: Vec<Vec<f64>> = vec![q];
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut last = f64::NAN;
        for m in 0..m_max {
            let qm = &basis[m];
            let mut r = self.apply(qm);
            if deflated {
                self.deflate(&mut r);
            }
            let a = self.grid.inner(qm, &r);
            alpha.push(a);
            for _ in 0..2 {
                for b in &basis {
                    let c = self.grid.inner(b, &r);
                    for (x, bi) in r.iter_mut().zip(b) {
                        *x -= c * bi;
                    }
                }
            }
            if deflated {
                self.deflate(&mut r);
            }
            let bnorm = self.grid.norm(&r);
            let k = alpha.len();
            let mut t = DMatrix::<f64>::zeros(k, k);
            for i in 0..k {
                t[(i, i)] = alpha[i];
                if i + 1 < k {
                    t[(i, i + 1)] = beta[i];
                    t[(i + 1, i)] = beta[i];
                }
            }
            let eig = SymmetricEigen::new(t);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|a, b| eig.eigenvalues[*a].partial_cmp(&eig.eigenvalues[*b]).unwrap());
            let theta = eig.eigenvalues[order[0]];
            let resid = bnorm * eig.eigenvectors[(k - 1, order[0])].abs();
            let converged = resid <= rtol * theta.abs().max(1e-300)
                || (m > 5 && (theta - last).abs() <= rtol * theta.abs() * 1e-2);
            last = theta;
            let scale = alpha.iter().fold(0.0_f64, |s, a| s.max(a.abs()));
            if converged || bnorm <= 1e-13 * scale.max(1.0) || m + 1 == m_max {
                let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
                return Ok((vals, k));
            }
            beta.push(bnorm);
            r.iter_mut().for_each(|x| *x /= bnorm);
            basis.push(r);
        }
        unreachable!("loop returns on its last iteration")
    }

    /// All eigenvalues from a dense symmetric eigen-solve (small grids only).
    pub fn eigenvalues_dense(&self) -> Vec<f64> {
        let s = self.symmetrized();
        let mut vals: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().cloned().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals
    }

    /// W^{1/2} L W^{−1/2}, symmetrized.
    fn symmetrized(&self) -> DMatrix<f64> {
        let nn = self.len();
        let sw: Vec<f64> = self.grid.weights().iter().map(|w| w.sqrt()).collect();
        DMatrix::from_fn(nn, nn, |i, j| {
            let a = sw[i] * self.matrix[i * nn + j] / sw[j];
            let b = sw[j] * self.matrix[j * nn + i] / sw[i];
            0.5 * (a + b)
        })
    }

    fn dense_factor(&self) -> Option<&nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        self.dense
            .get_or_init(|| {
                let nn = self.len();
                let mut s = self.symmetrized();
                let sw: Vec<f64> = self.grid.weights().iter().map(|w| w.sqrt()).collect();
                for e in &self.kernel_basis {
                    let y: Vec<f64> = (0..nn).map(|i| sw[i] * e[i]).collect();
                    for i in 0..nn {
                        for j in 0..nn {
                            s[(i, j)] += y[i] * y[j];
                        }
                    }
                }
                s.cholesky()
            })
            .as_ref()
    }

    /// Solve L x = rhs with x ⊥ Ker L.
    pub fn solve_fredholm(&self, rhs: &[f64], opts: &SolverOptions) -> Result<GridFunction> {
        let viol = self.kernel_violation(rhs);
        if viol > 1e-9 {
            return Err(Error::NotOrthogonal(viol));
        }
        let mut b = rhs.to_vec();
        self.deflate(&mut b);
        let bnorm = self.grid.norm(&b);
        let threshold = opts.tol * bnorm.min(1.0);
        if bnorm == 0.0 {
            return Ok(vec![0.0; b.len()]);
        }
        if opts.dense_fallback && self.len() < DENSE_LIMIT {
            if let Some(ch) = self.dense_factor() {
                let sw: Vec<f64> = self.grid.weights().iter().map(|w| w.sqrt()).collect();
                let y = DVector::from_iterator(b.len(), b.iter().zip(&sw).map(|(x, s)| x * s));
                let z = ch.solve(&y);
                let mut x: Vec<f64> = z.iter().zip(&sw).map(|(z, s)| z / s).collect();
                self.deflate(&mut x);
                if self.residual(&x, &b) <= threshold {
                    return Ok(x);
                }
                // one step of iterative refinement
                let r = self.residual_vec(&x, &b);
                let y = DVector::from_iterator(r.len(), r.iter().zip(&sw).map(|(x, s)| x * s));
                let dz = ch.solve(&y);
                for ((xi, dzi), s) in x.iter_mut().zip(dz.iter()).zip(&sw) {
                    *xi += dzi / s;
                }
                self.deflate(&mut x);
                if self.residual(&x, &b) <= threshold {
                    return Ok(x);
                }
            }
        }
        self.conjugate_gradient(&b, threshold, opts.max_iter)
    }

    fn residual_vec(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        let lx = self.apply(x);
        b.iter().zip(&lx).map(|(b, l)| b - l).collect()
    }

    fn residual(&self, x: &[f64], b: &[f64]) -> f64 {
        self.grid.norm(&self.residual_vec(x, b))
    }

    fn conjugate_gradient(&self, b: &[f64], threshold: f64, max_iter: usize) -> Result<GridFunction> {
        let nn = b.len();
        let mut x = vec![0.0; nn];
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut rr = self.grid.inner(&r, &r);
        let mut history = Vec::new();
        for it in 0..max_iter {
            let mut ap = self.apply(&p);
            self.deflate(&mut ap);
            let alpha = rr / self.grid.inner(&p, &ap);
            for i in 0..nn {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            // recompute the true residual periodically against drift
            if it % 50 == 49 {
                self.deflate(&mut x);
                r = self.residual_vec(&x, b);
                self.deflate(&mut r);
            }
            let rr_new = self.grid.inner(&r, &r);
            history.push(rr_new.sqrt());
            if rr_new.sqrt() <= threshold {
                self.deflate(&mut x);
                let true_res = self.residual(&x, b);
                if true_res <= threshold {
                    return Ok(x);
                }
                r = self.residual_vec(&x, b);
                self.deflate(&mut r);
                p = r.clone();
                rr = self.grid.inner(&r, &r);
                continue;
            }
            let beta = rr_new / rr;
            for i in 0..nn {
                p[i] = r[i] + beta * p[i];
            }
            rr = rr_new;
        }
        Err(Error::NoConvergence {
            iterations: max_iter,
            residual: history.last().copied().unwrap_or(f64::NAN),
            history,
        })
    }

    /// ⅛⟨⟨|Φ′+Φ₁′−Φ−Φ₁|²⟩⟩ summed over components; for the surrogate ½⟨Φ·LΦ⟩.
    pub fn dirichlet_form(&self, phi: &[&[f64]]) -> Result<f64> {
        if self.op.is_surrogate() {
            return Ok(phi
                .iter()
                .map(|c| 0.5 * self.grid.inner(c, &self.op.linear(c)))
                .sum());
        }
        let t = self.op.table()?;
        let rate = self.op.rate();
        Ok(rate
            * 0.125
            * t.sum_events(|i, j, k, l| {
                phi.iter()
                    .map(|c| {
                        let d = c[k] + c[l] - c[i] - c[j];
                        d * d
                    })
                    .sum()
            }))
    }

    pub fn fredholm(&self, opts: &SolverOptions) -> Result<FredholmSolution> {
        let (a_comp, b_comp) = self.ab_fields();
        let mut a_hat = Vec::with_capacity(6);
        for f in &a_comp {
            a_hat.push(self.solve_fredholm(f, opts)?);
        }
        let mut b_hat = Vec::with_capacity(3);
        for f in &b_comp {
            b_hat.push(self.solve_fredholm(f, opts)?);
        }
        Ok(FredholmSolution { a_hat, b_hat })
    }

    /// A and B with their (quadrature-error) kernel components removed.
    pub fn ab_fields(&self) -> (Vec<GridFunction>, Vec<GridFunction>) {
        let (mut a, mut b) = ab_fields(&self.grid);
        a.iter_mut().chain(b.iter_mut()).for_each(|f| self.deflate(f));
        (a, b)
    }

    pub fn transport_coefficients(&self, opts: &SolverOptions) -> Result<TransportCoefficients> {
        let sol = self.fredholm(opts)?;
        let grid = &self.grid;
        let (a_comp, b_comp) = self.ab_fields();
        let mult = |p: usize| if p < 3 { 1.0 } else { 2.0 };
        let aa: f64 = (0..6)
            .map(|p| mult(p) * grid.inner(&sol.a_hat[p], &a_comp[p]))
            .sum();
        let bb: f64 = (0..3).map(|a| grid.inner(&sol.b_hat[a], &b_comp[a])).sum();
        let nu = aa / 10.0;
        let kappa = 2.0 * bb / 15.0;

        // dual: maximize ⟨ΨΦ⟩ − D_M(Φ); the stationarity system LΦ = Ψ is solved afresh
        let dual_opts = SolverOptions {
            dense_fallback: false,
            ..*opts
        };
        let mut phi_a = Vec::with_capacity(6);
        for p in 0..6 {
            phi_a.push(self.solve_fredholm(&a_comp[p], &dual_opts)?);
        }
        let mut phi_b = Vec::with_capacity(3);
        for a in 0..3 {
            phi_b.push(self.solve_fredholm(&b_comp[a], &dual_opts)?);
        }
        let lin_a: f64 = (0..6).map(|p| mult(p) * grid.inner(&phi_a[p], &a_comp[p])).sum();
        let lin_b: f64 = (0..3).map(|a| grid.inner(&phi_b[a], &b_comp[a])).sum();
        // Frobenius contraction: off-diagonal components appear twice
        let mut comps: Vec<&[f64]> = Vec::new();
        for p in 0..6 {
            comps.push(&phi_a[p]);
            if p >= 3 {
                comps.push(&phi_a[p]);
            }
        }
        let d_a = self.dirichlet_form(&comps)?;
        let comps_b: Vec<&[f64]> = phi_b.iter().map(|c| c.as_slice()).collect();
        let d_b = self.dirichlet_form(&comps_b)?;
        let nu_dual = (lin_a - d_a) / 5.0;
        let kappa_dual = 4.0 * (lin_b - d_b) / 15.0;
        Ok(TransportCoefficients {
            nu,
            kappa,
            nu_dual,
            kappa_dual,
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.op.kernel().kind
    }
}

/// A and B at the nodes: A in the `TENSOR_PAIRS` order, B per axis.
pub fn ab_fields(grid: &VelocityGrid) -> (Vec<GridFunction>, Vec<GridFunction>) {
    let a: Vec<GridFunction> = TENSOR_PAIRS
        .iter()
        .map(|&(a, b)| grid.eval(move |v| v[a] * v[b] - if a == b { dot(v, v) / 3.0 } else { 0.0 }))
        .collect();
    let b: Vec<GridFunction> = (0..3)
        .map(|a| grid.eval(move |v| 0.5 * (dot(v, v) - 5.0) * v[a]))
        .collect();
    (a, b)
}

#[derive(Debug, Clone)]
pub struct FredholmSolution {
    /// Â components in `TENSOR_PAIRS` order.
    pub a_hat: Vec<GridFunction>,
    pub b_hat: Vec<GridFunction>,
}

impl FredholmSolution {
    pub fn a_hat_component(&self, a: usize, b: usize) -> &GridFunction {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let p = TENSOR_PAIRS.iter().position(|&x| x == (a, b)).expect("pair");
        &self.a_hat[p]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportCoefficients {
    pub nu: f64,
    pub kappa: f64,
    pub nu_dual: f64,
    pub kappa_dual: f64,
}
