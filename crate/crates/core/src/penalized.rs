//! Lasso and adaptive-lasso regularization paths with frozen variance
//! components: a ridge solve for the rotated random effects alternates with
//! block coordinate descent on the penalized weighted least-squares problem.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, select_columns, sym_eigen_desc};
use crate::model::{
    assemble_h, evaluate_family, LinkFamily, LongitudinalDataset, VarianceComponents,
};
use crate::null_fit::{glm_fit, NullFitResult};
use crate::sigma::Kernels;

pub const STAGE: &str = "fit-path";
pub const EIGEN_FLOOR: f64 = 1e-10;
pub const ADAPTIVE_CAP: f64 = 1e6;

/// Eigendecomposition of the random-effect prior `diag{sum tau_k V_k, D (x) I_m}`.
#[derive(Debug, Clone)]
pub struct PriorEigen {
    pub u: DMatrix<f64>,
    /// Eigenvalues in decreasing order.
    pub lambda: DVector<f64>,
    /// `H U`.
    pub u_h: DMatrix<f64>,
    /// Some eigenvalue was raised to [`EIGEN_FLOOR`].
    pub floored: bool,
}

impl PriorEigen {
    pub fn empty(n: usize) -> Self {
        PriorEigen {
            u: DMatrix::zeros(0, 0),
            lambda: DVector::zeros(0),
            u_h: DMatrix::zeros(n, 0),
            floored: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda.len()
    }
}

pub fn eigen_prior(vc: &VarianceComponents, kernels: &Kernels, data: &LongitudinalDataset) -> Result<PriorEigen> {
    let m = data.n_subjects();
    let r = data.n_slopes();
    if kernels.n_subjects != m || vc.d.len() != r {
        return Err(Error::Invalid("variance components do not match the dataset".into()));
    }
    let q = m * (r + 1);
    // (eigenvalue, sparse eigenvector)
    let mut pairs: Vec<(f64, Vec<(usize, f64)>)> = Vec::with_capacity(q);
    for (members, g) in kernels.groups.iter().zip(kernels.combined(&vc.tau)) {
        let (vals, vecs) = sym_eigen_desc(&g);
        for c in 0..vals.len() {
            pairs.push((vals[c], members.iter().enumerate().map(|(a, &i)| (i, vecs[(a, c)])).collect()));
        }
    }
    if r > 0 {
        let (dv, dq) = sym_eigen_desc(&vc.d_matrix());
        for l in 0..r {
            for s in 0..m {
                pairs.push((dv[l], (0..r).map(|k| (m * (k + 1) + s, dq[(k, l)])).collect()));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut u = DMatrix::zeros(q, q);
    let mut floored = false;
    let lambda = DVector::from_iterator(
        q,
        pairs.iter().map(|(v, _)| {
            if *v < EIGEN_FLOOR {
                floored = true;
                EIGEN_FLOOR
            } else {
                *v
            }
        }),
    );
    for (c, (_, vec)) in pairs.iter().enumerate() {
        for &(i, x) in vec {
            u[(i, c)] = x;
        }
    }
    if floored {
        log::warn!("random-effect prior has eigenvalues below {EIGEN_FLOOR}; floored");
    }
    let u_h = assemble_h(data).mul_dense(&u);
    Ok(PriorEigen { u, lambda, u_h, floored })
}

/// Cached factor of `U_H' W U_H + phi Lambda^-1` for one weight vector.
pub struct RidgeFactor {
    chol: Option<Cholesky<f64, Dyn>>,
    pub regularized: bool,
}

impl RidgeFactor {
    pub fn new(pe: &PriorEigen, w: &DVector<f64>, phi: f64) -> Result<Self> {
        if pe.dim() == 0 {
            return Ok(RidgeFactor {
                chol: None,
                regularized: false,
            });
        }
        let mut a = pe.u_h.clone();
        for (mut row, &wi) in a.row_iter_mut().zip(w.iter()) {
            row *= wi.sqrt();
        }
        let mut k = a.tr_mul(&a);
        for c in 0..pe.dim() {
            k[(c, c)] += phi / pe.lambda[c];
        }
        let diag_max = k.diagonal().amax();
        let diag_min = k.diagonal().min();
        let mut regularized = diag_min <= 0.0 || diag_max / diag_min > 1e12;
        let chol = match Cholesky::new(k.clone()) {
            Some(c) => c,
            None => {
                regularized = true;
                cholesky_with_jitter(&k)
                    .map(|(c, _)| c)
                    .ok_or_else(|| Error::Numerical("random-effect normal matrix is singular".into()))?
            }
        };
        if regularized {
            log::warn!("random-effect normal matrix is ill-conditioned");
        }
        Ok(RidgeFactor {
            chol: Some(chol),
            regularized,
        })
    }

    /// `M A` with `M = W - W U_H K^-1 U_H' W`, the weight metric after
    /// profiling out `delta`.
    pub fn metric_mul(&self, pe: &PriorEigen, w: &DVector<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut wa = a.clone();
        for (mut row, &wi) in wa.row_iter_mut().zip(w.iter()) {
            row *= wi;
        }
        if let Some(ch) = &self.chol {
            let k = ch.solve(&pe.u_h.tr_mul(&wa));
            let mut corr = &pe.u_h * k;
            for (mut row, &wi) in corr.row_iter_mut().zip(w.iter()) {
                row *= wi;
            }
            wa -= corr;
        }
        wa
    }

    /// `delta` minimizing `(t - U_H delta)' W (t - U_H delta) + phi delta' Lambda^-1 delta`.
    pub fn solve(&self, pe: &PriorEigen, w: &DVector<f64>, target: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            None => DVector::zeros(0),
            Some(ch) => ch.solve(&pe.u_h.tr_mul(&target.component_mul(w))),
        }
    }
}

/// Ridge update of the rotated random effects given current fixed effects.
pub fn ridge_delta_update(
    pe: &PriorEigen,
    w: &DVector<f64>,
    y_work: &DVector<f64>,
    x: &DMatrix<f64>,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let f = RidgeFactor::new(pe, w, 1.0)?;
    Ok(f.solve(pe, w, &(y_work - x * theta)))
}

pub fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Fixed-effect design: observation-level covariates plus subject-level
/// standardized genotypes.
#[derive(Debug, Clone)]
pub struct Design {
    pub covariates: DMatrix<f64>,
    /// `m x p`, one row per subject.
    pub genotypes: DMatrix<f64>,
    pub subject_of: Vec<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub zero_variance: Vec<bool>,
}

/// Population-variance standardization of genotype columns over subjects.
pub fn standardize_columns(g: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, Vec<f64>, Vec<bool>) {
    let (m, p) = g.shape();
    let mut out = DMatrix::zeros(m, p);
    let mut means = vec![0.0; p];
    let mut scales = vec![1.0; p];
    let mut zero = vec![false; p];
    for j in 0..p {
        let col = g.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        means[j] = mean;
        if var <= 1e-24 {
            zero[j] = true;
            continue;
        }
        let sd = var.sqrt();
        scales[j] = sd;
        for s in 0..m {
            out[(s, j)] = (g[(s, j)] - mean) / sd;
        }
    }
    (out, means, scales, zero)
}

impl Design {
    pub fn new(data: &LongitudinalDataset, covariate_cols: &[usize]) -> Self {
        let (genotypes, means, scales, zero_variance) = standardize_columns(&data.genotypes);
        Design {
            covariates: select_columns(&data.covariates, covariate_cols),
            genotypes,
            subject_of: data.subject_of.clone(),
            means,
            scales,
            zero_variance,
        }
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_variants(&self) -> usize {
        self.genotypes.ncols()
    }

    /// `X Theta` with `Theta = (theta, beta)`.
    pub fn mul(&self, coef: &DVector<f64>) -> DVector<f64> {
        let c = self.n_covariates();
        let mut out = &self.covariates * coef.rows(0, c);
        let gb = &self.genotypes * coef.rows(c, self.n_variants());
        for (o, v) in out.iter_mut().enumerate() {
            *v += gb[self.subject_of[o]];
        }
        out
    }

    /// `[C, G]` with genotype rows repeated per observation.
    pub fn expanded(&self) -> DMatrix<f64> {
        let c = self.n_covariates();
        DMatrix::from_fn(self.subject_of.len(), c + self.n_variants(), |o, j| {
            if j < c {
                self.covariates[(o, j)]
            } else {
                self.genotypes[(self.subject_of[o], j - c)]
            }
        })
    }

    /// Per-variant `sum_i wbar_i x_ij r_i`.
    pub fn genotype_gradient(&self, w: &DVector<f64>, r: &DVector<f64>) -> DVector<f64> {
        let m = self.genotypes.nrows();
        let mut rs = DVector::zeros(m);
        for (o, &s) in self.subject_of.iter().enumerate() {
            rs[s] += w[o] * r[o];
        }
        self.genotypes.tr_mul(&rs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcdOutcome {
    pub coef: DVector<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

/// Coordinate descent for
/// `1/2 sum wbar (target - X Theta)^2 + lambda sum_j nu_j |beta_j|`.
/// Covariate coordinates are never penalized; `nu_j = 0` leaves a variant unpenalized.
pub fn bcd_theta_update(
    design: &Design,
    w: &DVector<f64>,
    target: &DVector<f64>,
    lambda: f64,
    nu: &[f64],
    init: &DVector<f64>,
    tol: f64,
    max_sweeps: usize,
) -> BcdOutcome {
    let c = design.n_covariates();
    let p = design.n_variants();
    let m = design.genotypes.nrows();
    let n = target.len();
    let mut coef = init.clone();
    for j in 0..p {
        if design.zero_variance[j] {
            coef[c + j] = 0.0;
        }
    }
    // observation residual without the genetic part, genetic part per subject
    let mut rc = target - &design.covariates * coef.rows(0, c);
    let mut gb = &design.genotypes * coef.rows(c, p);
    let mut wsum: DVector<f64> = DVector::zeros(m);
    let mut rs: DVector<f64> = DVector::zeros(m);
    let mut wx = DMatrix::zeros(m, c);
    for o in 0..n {
        let s = design.subject_of[o];
        wsum[s] += w[o];
        rs[s] += w[o] * (rc[o] - gb[s]);
        for k in 0..c {
            wx[(s, k)] += w[o] * design.covariates[(o, k)];
        }
    }
    let cov_chol = covariate_factor(&design.covariates, &DMatrix::from_fn(n, c, |o, k| w[o] * design.covariates[(o, k)]));
    let g_den: Vec<f64> = (0..p)
        .map(|j| design.genotypes.column(j).iter().zip(wsum.iter()).map(|(g, ws)| g * g * ws).sum())
        .collect();

    let mut sweep = |coords: &[usize], coef: &mut DVector<f64>| -> f64 {
        let mut max_change: f64 = 0.0;
        for &j in coords {
            if j < c {
                if j > 0 {
                    continue;
                }
                let Some(ch) = &cov_chol else { continue };
                let grad = DVector::from_fn(c, |k, _| {
                    let col = design.covariates.column(k);
                    (0..n).map(|o| w[o] * col[o] * rc[o]).sum::<f64>() - wx.column(k).dot(&gb)
                });
                let delta = ch.solve(&grad);
                let step = delta.amax();
                if step > 0.0 {
                    let mut head = coef.rows_mut(0, c);
                    head += &delta;
                    rc -= &design.covariates * &delta;
                    rs -= &wx * &delta;
                    max_change = max_change.max(step);
                }
            } else {
                let v = j - c;
                if design.zero_variance[v] || g_den[v] <= 0.0 {
                    continue;
                }
                let gcol = design.genotypes.column(v);
                let z = gcol.dot(&rs) + g_den[v] * coef[j];
                let new = soft_threshold(z, lambda * nu[v]) / g_den[v];
                let delta = new - coef[j];
                if delta != 0.0 {
                    coef[j] = new;
                    gb.axpy(delta, &gcol, 1.0);
                    for s in 0..m {
                        rs[s] -= delta * gcol[s] * wsum[s];
                    }
                    max_change = max_change.max(delta.abs());
                }
            }
        }
        max_change
    };

    let (converged, sweeps) = active_set_loop(c, p, &mut coef, tol, max_sweeps, |coords, coef| {
        sweep(coords, coef)
    });
    BcdOutcome {
        coef,
        converged,
        sweeps,
    }
}

/// Factor of `C' M C` for the joint update of the unpenalized covariates.
fn covariate_factor(c: &DMatrix<f64>, mc: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if c.ncols() == 0 {
        return None;
    }
    let g = c.tr_mul(mc);
    let g = (&g + g.transpose()) * 0.5;
    cholesky_with_jitter(&g).map(|(ch, _)| ch)
}

/// Full sweeps alternate with sweeps over the covariates and nonzero variants
/// until a full sweep moves no coordinate by `tol` or more.
fn active_set_loop(
    c: usize,
    p: usize,
    coef: &mut DVector<f64>,
    tol: f64,
    max_sweeps: usize,
    mut sweep: impl FnMut(&[usize], &mut DVector<f64>) -> f64,
) -> (bool, usize) {
    let all: Vec<usize> = (0..c + p).collect();
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        let change = sweep(&all, coef);
        sweeps += 1;
        if change < tol {
            return (true, sweeps);
        }
        let active: Vec<usize> = (0..c).chain((0..p).filter(|&v| coef[c + v] != 0.0).map(|v| c + v)).collect();
        while sweeps < max_sweeps {
            let change = sweep(&active, coef);
            sweeps += 1;
            if change < tol {
                break;
            }
        }
    }
    (false, sweeps)
}

/// Coordinate descent for `1/2 (t - X Theta)' M (t - X Theta) + lambda sum_j nu_j |beta_j|`
/// given `X`, `M X` and `v = M (t - X init)`. The first `c` columns are unpenalized.
#[allow(clippy::too_many_arguments)]
pub fn cd_metric(
    x: &DMatrix<f64>,
    mx: &DMatrix<f64>,
    mut v: DVector<f64>,
    c: usize,
    lambda: f64,
    nu: &[f64],
    skip: &[bool],
    init: &DVector<f64>,
    tol: f64,
    max_sweeps: usize,
) -> BcdOutcome {
    let p = x.ncols() - c;
    let den: Vec<f64> = (0..c + p).map(|j| x.column(j).dot(&mx.column(j))).collect();
    let cov_chol = covariate_factor(&x.columns(0, c).into_owned(), &mx.columns(0, c).into_owned());
    let mut coef = init.clone();
    let (converged, sweeps) = active_set_loop(c, p, &mut coef, tol, max_sweeps, |coords, coef| {
        let mut max_change: f64 = 0.0;
        for &j in coords {
            if j >= c && (den[j] <= 0.0 || skip[j - c]) {
                continue;
            }
            if j < c {
                if j > 0 {
                    continue;
                }
                let Some(ch) = &cov_chol else { continue };
                let delta = ch.solve(&(x.columns(0, c).tr_mul(&v)));
                let step = delta.amax();
                if step > 0.0 {
                    let mut head = coef.rows_mut(0, c);
                    head += &delta;
                    v -= mx.columns(0, c) * &delta;
                    max_change = max_change.max(step);
                }
                continue;
            }
            let g = x.column(j).dot(&v);
            let new = soft_threshold(g + den[j] * coef[j], lambda * nu[j - c]) / den[j];
            let delta = new - coef[j];
            if delta != 0.0 {
                coef[j] = new;
                v.axpy(-delta, &mx.column(j), 1.0);
                max_change = max_change.max(delta.abs());
            }
        }
        max_change
    });
    BcdOutcome {
        coef,
        converged,
        sweeps,
    }
}

/// Adaptive-lasso weights `|beta_j|^-gamma`, capped for zero initial estimates.
pub fn adaptive_weights(beta_init: &[f64], gamma: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if !(gamma >= 0.0) {
        return Err(Error::Invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    let mut capped = Vec::new();
    let nu = beta_init
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            if gamma == 0.0 {
                return 1.0;
            }
            let v = b.abs().powf(-gamma);
            if !v.is_finite() || v > ADAPTIVE_CAP {
                capped.push(j);
                ADAPTIVE_CAP
            } else {
                v
            }
        })
        .collect();
    Ok((nu, capped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub n_lambda: usize,
    /// `lambda_min / lambda_max`.
    pub ratio: f64,
    /// Explicit decreasing grid; overrides `n_lambda` and `ratio`.
    pub lambdas: Option<Vec<f64>>,
    pub tol: f64,
    pub max_cycles: usize,
    pub cd_tol: f64,
    pub max_sweeps: usize,
    /// Per-variant penalty weights; all ones when absent.
    pub penalty_weights: Option<Vec<f64>>,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            n_lambda: 100,
            ratio: 0.01,
            lambdas: None,
            tol: 1e-6,
            max_cycles: 50,
            cd_tol: 1e-7,
            max_sweeps: 100_000,
            penalty_weights: None,
        }
    }
}

pub fn lambda_grid(lambda_max: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n == 1 {
        return vec![lambda_max];
    }
    (0..n)
        .map(|i| lambda_max * 10f64.powf(ratio.log10() * i as f64 / (n - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub lambda: f64,
    /// Covariate effects (full covariate list; dropped columns hold 0).
    pub theta: Vec<f64>,
    /// Variant effects per standardized genotype.
    pub beta: Vec<f64>,
    /// Variant effects per allele copy.
    pub beta_original: Vec<f64>,
    /// Intercept on the original genotype scale.
    pub intercept_original: f64,
    /// Random effects `U delta`.
    pub b: Vec<f64>,
    pub active: Vec<usize>,
    pub df: usize,
    pub objective: f64,
    pub converged: bool,
    pub cycles: usize,
    /// Coordinate-descent sweeps summed over cycles.
    pub sweeps: usize,
    pub kkt_max_violation: f64,
    pub kkt_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoPath {
    pub stage: String,
    pub family: LinkFamily,
    pub random_effects: bool,
    /// Digest of the null-fit document the path was computed from.
    pub null_fit_id: Option<String>,
    pub covariate_names: Vec<String>,
    pub variant_ids: Vec<String>,
    pub subject_ids: Vec<String>,
    pub slope_names: Vec<String>,
    pub penalty_weights: Vec<f64>,
    pub genotype_means: Vec<f64>,
    pub genotype_scales: Vec<f64>,
    pub zero_variance: Vec<usize>,
    pub lambda_max: f64,
    pub n_lambda: usize,
    pub ratio: f64,
    pub entries: Vec<PathEntry>,
}

struct Engine<'a> {
    data: &'a LongitudinalDataset,
    family: LinkFamily,
    design: Design,
    pe: PriorEigen,
    phi: f64,
    nu: Vec<f64>,
    config: &'a PathConfig,
    /// Expanded `[C, G]`, one row per observation.
    x: DMatrix<f64>,
}

struct Working {
    coef: DVector<f64>,
    delta: DVector<f64>,
    w: DVector<f64>,
    y: DVector<f64>,
    factor: RidgeFactor,
    /// `M X` for the current weights, when random effects are present.
    mx: Option<DMatrix<f64>>,
}

impl<'a> Engine<'a> {
    fn eta(&self, coef: &DVector<f64>, delta: &DVector<f64>) -> DVector<f64> {
        let mut eta = self.design.mul(coef);
        if self.pe.dim() > 0 {
            eta += &self.pe.u_h * delta;
        }
        eta
    }

    /// Unit working weights `a / (v g'^2)` and working vector at `eta`.
    fn working(&self, eta: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let fe = evaluate_family(self.family, eta)?;
        let n = eta.len();
        let w = DVector::from_fn(n, |o, _| {
            self.data.weights[o] / (fe.nu[o] * fe.g_prime[o] * fe.g_prime[o])
        });
        let y = DVector::from_fn(n, |o, _| eta[o] + fe.g_prime[o] * (self.data.y[o] - fe.mu[o]));
        Ok((w, y))
    }

    fn offset(&self, delta: &DVector<f64>) -> DVector<f64> {
        if self.pe.dim() > 0 {
            &self.pe.u_h * delta
        } else {
            DVector::zeros(self.data.n_obs())
        }
    }

    fn objective(&self, st: &Working, lambda: f64) -> f64 {
        let c = self.design.n_covariates();
        let r = &st.y - self.design.mul(&st.coef) - self.offset(&st.delta);
        let fit: f64 = r.iter().zip(st.w.iter()).map(|(e, w)| w * e * e).sum::<f64>() * 0.5;
        let prior: f64 = st
            .delta
            .iter()
            .zip(self.pe.lambda.iter())
            .map(|(d, l)| d * d / l)
            .sum::<f64>()
            * 0.5
            * self.phi;
        let pen: f64 = (0..self.design.n_variants()).map(|j| self.nu[j] * st.coef[c + j].abs()).sum();
        fit + prior + lambda * pen
    }

    /// Runs ridge/BCD cycles at one lambda until the joint change is below tolerance.
    fn solve(&self, st: &mut Working, lambda: f64, cd_tol: f64) -> Result<(bool, usize, usize)> {
        let mut sweeps = 0;
        let dispersion_fixed = self.family == LinkFamily::GaussianIdentity;
        for cycle in 1..=self.config.max_cycles {
            if !dispersion_fixed || cycle == 1 {
                let eta = self.eta(&st.coef, &st.delta);
                let (w, y) = self.working(&eta)?;
                if w != st.w {
                    st.factor = RidgeFactor::new(&self.pe, &w, self.phi)?;
                    st.mx = None;
                }
                st.w = w;
                st.y = y;
            }
            let out = if self.pe.dim() > 0 {
                if st.mx.is_none() {
                    st.mx = Some(st.factor.metric_mul(&self.pe, &st.w, &self.x));
                }
                let mx = st.mx.as_ref().expect("set above");
                let r = &st.y - &self.x * &st.coef;
                let v = st.factor.metric_mul(&self.pe, &st.w, &DMatrix::from_column_slice(r.len(), 1, r.as_slice()));
                cd_metric(
                    &self.x,
                    mx,
                    v.column(0).into_owned(),
                    self.design.n_covariates(),
                    lambda,
                    &self.nu,
                    &self.design.zero_variance,
                    &st.coef,
                    cd_tol,
                    self.config.max_sweeps,
                )
            } else {
                bcd_theta_update(
                    &self.design,
                    &st.w,
                    &st.y,
                    lambda,
                    &self.nu,
                    &st.coef,
                    cd_tol,
                    self.config.max_sweeps,
                )
            };
            let delta = if self.pe.dim() > 0 {
                st.factor.solve(&self.pe, &st.w, &(&st.y - &self.x * &out.coef))
            } else {
                DVector::zeros(0)
            };
            if !out.converged {
                log::warn!("coordinate descent hit the sweep limit at lambda {lambda:e}");
            }
            let scale = 1.0 + st.coef.amax().max(st.delta.amax());
            let change = (&out.coef - &st.coef).amax().max(if delta.is_empty() {
                0.0
            } else {
                (&delta - &st.delta).amax()
            }) / scale;
            st.coef = out.coef;
            st.delta = delta;
            sweeps += out.sweeps;
            if change < self.config.tol || (dispersion_fixed && out.converged) {
                return Ok((out.converged, cycle, sweeps));
            }
        }
        Ok((false, self.config.max_cycles, sweeps))
    }

    fn gradient(&self, st: &Working) -> DVector<f64> {
        let r = &st.y - self.design.mul(&st.coef) - self.offset(&st.delta);
        self.design.genotype_gradient(&st.w, &r)
    }

    fn kkt(&self, st: &Working, lambda: f64) -> f64 {
        let c = self.design.n_covariates();
        let grad = self.gradient(st);
        let scale = st.w.sum();
        let mut worst: f64 = 0.0;
        for j in 0..self.design.n_variants() {
            if self.design.zero_variance[j] {
                continue;
            }
            let b = st.coef[c + j];
            let t = lambda * self.nu[j];
            let v = if b != 0.0 {
                (grad[j] - t * b.signum()).abs()
            } else {
                (grad[j].abs() - t).max(0.0)
            };
            worst = worst.max(v / scale);
        }
        worst
    }
}

/// Lasso path for the penalized mixed model with components frozen at `null`.
/// Without `kernels` (or with `random_effects = false`) the model has no random
/// effects and reduces to a plain weighted lasso.
pub fn fit_path(
    data: &LongitudinalDataset,
    null: &NullFitResult,
    kernels: Option<&Kernels>,
    config: &PathConfig,
) -> Result<LassoPath> {
    if null.subject_ids != data.subject_ids {
        return Err(Error::Invalid("null-fit result does not match the dataset subjects".into()));
    }
    let kept = null.kept_columns();
    let pe = match kernels {
        Some(k) => eigen_prior(&null.vc, k, data)?,
        None => PriorEigen::empty(data.n_obs()),
    };
    let theta0: Vec<f64> = kept.iter().map(|&j| null.theta[j]).collect();
    let delta0 = if pe.dim() > 0 && null.b_hat.len() == pe.dim() {
        pe.u.tr_mul(&DVector::from_vec(null.b_hat.clone()))
    } else {
        DVector::zeros(pe.dim())
    };
    run_path(data, null.family, null.vc.phi, pe, &kept, theta0, delta0, config, kernels.is_some())
}

/// The no-random-effect comparator on the same grid conventions.
pub fn fit_plain_lasso(data: &LongitudinalDataset, family: LinkFamily, config: &PathConfig) -> Result<LassoPath> {
    let (kept, dropped) = crate::linalg::independent_columns(&data.covariates, 1e-8);
    if !dropped.is_empty() {
        log::warn!("dropping {} dependent covariates", dropped.len());
    }
    let x = select_columns(&data.covariates, &kept);
    let theta0 = glm_fit(data, family, &x)?;
    run_path(
        data,
        family,
        1.0,
        PriorEigen::empty(data.n_obs()),
        &kept,
        theta0.iter().copied().collect(),
        DVector::zeros(0),
        config,
        false,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_path(
    data: &LongitudinalDataset,
    family: LinkFamily,
    phi: f64,
    pe: PriorEigen,
    kept: &[usize],
    theta0: Vec<f64>,
    delta0: DVector<f64>,
    config: &PathConfig,
    random_effects: bool,
) -> Result<LassoPath> {
    let p = data.n_variants();
    if p == 0 {
        return Err(Error::Invalid("no variants to penalize".into()));
    }
    let nu = match &config.penalty_weights {
        Some(w) if w.len() != p => {
            return Err(Error::Invalid(format!("{} penalty weights for {p} variants", w.len())))
        }
        Some(w) if w.iter().any(|v| !(*v >= 0.0)) => {
            return Err(Error::Invalid("penalty weights must be non-negative".into()))
        }
        Some(w) => w.clone(),
        None => vec![1.0; p],
    };
    if nu.iter().all(|&v| v == 0.0) {
        return Err(Error::Invalid("all penalty weights are zero; nothing is penalized".into()));
    }
    let design = Design::new(data, kept);
    let c = design.n_covariates();
    let engine = Engine {
        data,
        family,
        design,
        pe,
        phi,
        nu,
        config,
        x: DMatrix::zeros(0, 0),
    };
    let mut engine = engine;
    if engine.pe.dim() > 0 {
        engine.x = engine.design.expanded();
    }
    let mut coef = DVector::zeros(c + p);
    coef.rows_mut(0, c).copy_from(&DVector::from_vec(theta0));
    let eta = engine.eta(&coef, &delta0);
    let (w, y) = engine.working(&eta)?;
    let factor = RidgeFactor::new(&engine.pe, &w, phi)?;
    let mut st = Working {
        coef,
        delta: delta0,
        w,
        y,
        factor,
        mx: None,
    };

    // covariates-only fit; unpenalized variants (nu = 0) stay free
    engine.solve(&mut st, f64::INFINITY, engine.config.cd_tol.min(1e-13))?;
    let grad = engine.gradient(&st);
    let lambda_max = (0..p)
        .filter(|&j| engine.nu[j] > 0.0 && !engine.design.zero_variance[j])
        .map(|j| grad[j].abs() / engine.nu[j])
        .fold(0.0, f64::max)
        * (1.0 + 1e-10);
    if !(lambda_max > 0.0) {
        return Err(Error::Numerical("lambda_max is zero; residual is orthogonal to all variants".into()));
    }
    let grid = match &config.lambdas {
        Some(l) => {
            if l.is_empty() || l.windows(2).any(|w| w[1] >= w[0]) || l.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Invalid("lambda grid must be positive and strictly decreasing".into()));
            }
            l.clone()
        }
        None => lambda_grid(lambda_max, config.n_lambda, config.ratio),
    };

    let mut entries = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let (converged, cycles, sweeps) = engine.solve(&mut st, lambda, config.cd_tol)?;
        if !converged {
            log::warn!("path did not converge at lambda {lambda:e}");
        }
        let viol = engine.kkt(&st, lambda);
        let beta: Vec<f64> = st.coef.rows(c, p).iter().copied().collect();
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        let beta_original: Vec<f64> = (0..p)
            .map(|j| if beta[j] == 0.0 { 0.0 } else { beta[j] / engine.design.scales[j] })
            .collect();
        let mut theta = vec![0.0; data.n_covariates()];
        for (a, &j) in kept.iter().enumerate() {
            theta[j] = st.coef[a];
        }
        let shift: f64 = (0..p).map(|j| beta_original[j] * engine.design.means[j]).sum();
        let b = if engine.pe.dim() > 0 {
            (&engine.pe.u * &st.delta).iter().copied().collect()
        } else {
            Vec::new()
        };
        entries.push(PathEntry {
            lambda,
            intercept_original: theta.first().copied().unwrap_or(0.0) - shift,
            theta,
            beta,
            beta_original,
            b,
            df: active.len(),
            active,
            objective: engine.objective(&st, lambda),
            converged,
            cycles,
            sweeps,
            kkt_max_violation: viol,
            kkt_ok: viol < 1e-6,
        });
    }
    Ok(LassoPath {
        stage: STAGE.into(),
        family,
        random_effects,
        null_fit_id: None,
        covariate_names: data.covariate_names.clone(),
        variant_ids: data.variant_ids.clone(),
        subject_ids: data.subject_ids.clone(),
        slope_names: data.slope_names.clone(),
        penalty_weights: engine.nu.clone(),
        genotype_means: engine.design.means.clone(),
        genotype_scales: engine.design.scales.clone(),
        zero_variance: (0..p).filter(|&j| engine.design.zero_variance[j]).collect(),
        lambda_max,
        n_lambda: grid.len(),
        ratio: grid.last().unwrap() / lambda_max,
        entries,
    })
}

/// Linear predictor for `newdata` at one path entry. Subjects seen in training
/// get their random effects; unseen subjects get none.
pub fn predict_linear(path: &LassoPath, entry: usize, newdata: &LongitudinalDataset) -> Result<DVector<f64>> {
    let e = path
        .entries
        .get(entry)
        .ok_or_else(|| Error::Invalid(format!("path has no entry {entry}")))?;
    if newdata.covariate_names != path.covariate_names {
        return Err(Error::Invalid("new data covariates differ from the training covariates".into()));
    }
    if newdata.variant_ids != path.variant_ids {
        return Err(Error::Invalid("new data variants differ from the training variants".into()));
    }
    if newdata.n_obs() == 0 {
        return Err(Error::Invalid("empty test set".into()));
    }
    let mut theta = DVector::from_vec(e.theta.clone());
    theta[0] = e.intercept_original;
    let gb = &newdata.genotypes * DVector::from_vec(e.beta_original.clone());
    let mut eta = &newdata.covariates * theta;
    for o in 0..newdata.n_obs() {
        eta[o] += gb[newdata.subject_of[o]];
    }
    if !e.b.is_empty() {
        let m = path.subject_ids.len();
        let r = path.slope_names.len();
        let index: HashMap<&str, usize> = path.subject_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        if newdata.n_slopes() != r {
            return Err(Error::Invalid("new data random-effect columns differ from training".into()));
        }
        for o in 0..newdata.n_obs() {
            if let Some(&s) = index.get(newdata.subject_ids[newdata.subject_of[o]].as_str()) {
                eta[o] += e.b[s];
                for k in 0..r {
                    eta[o] += newdata.slopes[(o, k)] * e.b[m * (k + 1) + s];
                }
            }
        }
    }
    Ok(eta)
}

/// Predictions on the response scale.
pub fn predict(path: &LassoPath, entry: usize, newdata: &LongitudinalDataset) -> Result<DVector<f64>> {
    let eta = predict_linear(path, entry, newdata)?;
    Ok(eta.map(|v| path.family.inverse_link(v)))
}

/// `1 - sum (y - yhat)^2 / sum (y - ybar)^2` with `ybar` the test-set mean.
pub fn r2_mspe(y: &DVector<f64>, yhat: &DVector<f64>) -> Result<f64> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::Invalid("empty or mismatched test set".into()));
    }
    let ybar = y.mean();
    let tss: f64 = y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    if tss == 0.0 {
        return Err(Error::Numerical("R^2 is undefined for a constant test response".into()));
    }
    let rss: f64 = y.iter().zip(yhat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - rss / tss)
}

impl LassoPath {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("path serializes")
    }

    pub fn from_json(name: &str, bytes: &[u8]) -> Result<Self> {
        let found = crate::sniff_stage(bytes);
        if found != STAGE {
            return Err(Error::Schema {
                expected: STAGE.into(),
                found,
            });
        }
        serde_json::from_slice(bytes).map_err(|e| Error::parse(name, e.line(), e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&path.display().to_string(), &bytes)
    }

    /// `lambda  df  objective  converged  cycles  kkt_max_violation`
    pub fn summary_table(&self) -> String {
        let mut out = String::from("index\tlambda\tdf\tobjective\tconverged\tcycles\tkkt_max_violation\n");
        for (i, e) in self.entries.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i}\t{:e}\t{}\t{:e}\t{}\t{}\t{:e}",
                e.lambda, e.df, e.objective, e.converged, e.cycles, e.kkt_max_violation
            );
        }
        out
    }

    /// Long format: covariates at every entry, variants only when nonzero.
    pub fn coefficient_table(&self) -> String {
        let mut out = String::from("index\tlambda\tkind\tcolumn\tvalue_standardized\tvalue_original\n");
        for (i, e) in self.entries.iter().enumerate() {
            for (k, name) in self.covariate_names.iter().enumerate() {
                let orig = if k == 0 { e.intercept_original } else { e.theta[k] };
                let _ = writeln!(out, "{i}\t{:e}\tcovariate\t{name}\t{:e}\t{:e}", e.lambda, e.theta[k], orig);
            }
            for &j in &e.active {
                let _ = writeln!(
                    out,
                    "{i}\t{:e}\tvariant\t{}\t{:e}\t{:e}",
                    e.lambda, self.variant_ids[j], e.beta[j], e.beta_original[j]
                );
            }
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("path.tsv", self.summary_table()),
            ("coefficients.tsv", self.coefficient_table()),
            ("path.json", self.to_json()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
