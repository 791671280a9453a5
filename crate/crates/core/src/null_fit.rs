//! Null-model fit: PQL working-model solves for the covariate effects and
//! random effects, alternated with average-information REML updates of the
//! variance parameters.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky_with_jitter, floor_eigenvalues, independent_columns, select_columns};
use crate::model::{
    assemble_h, evaluate_family, working_update, LinkFamily, LongitudinalDataset, PqlState, VarianceComponents,
};
use crate::sigma::{Component, Kernels, ParamLayout, SigmaOps};

pub const STAGE: &str = "null-fit";
/// Lower bound for `tau_k`, `phi` and the eigenvalues of `D`.
pub const PARAM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NullFitConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Estimate only the diagonal of `D`.
    pub diagonal_d: bool,
    /// Expected-information traces are exact up to this many observations and
    /// estimated with Rademacher probes above it.
    pub exact_trace_max_obs: usize,
    pub probes: usize,
    pub seed: u64,
    /// Starting values; derived from a GLM fit when absent.
    pub init: Option<VarianceComponents>,
}

impl Default for NullFitConfig {
    fn default() -> Self {
        NullFitConfig {
            tol: 1e-6,
            max_iter: 100,
            max_halvings: 10,
            diagonal_d: false,
            exact_trace_max_obs: 600,
            probes: 64,
            seed: 1,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullFitResult {
    pub stage: String,
    pub family: LinkFamily,
    pub vc: VarianceComponents,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    pub diagonal_d: bool,
    pub covariate_names: Vec<String>,
    /// Covariate effects; columns dropped for rank deficiency hold 0.
    pub theta: Vec<f64>,
    pub dropped_covariates: Vec<String>,
    pub subject_ids: Vec<String>,
    /// Polygenic intercepts then subject-level effects, slope-major.
    pub b_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Some `tau_k` ended at its lower bound.
    pub boundary: bool,
    pub reml_trace: Vec<f64>,
    pub y_work: Vec<f64>,
    pub w: Vec<f64>,
    pub sparse_grm: bool,
}

impl NullFitResult {
    pub fn kept_columns(&self) -> Vec<usize> {
        self.covariate_names
            .iter()
            .enumerate()
            .filter(|(_, n)| !self.dropped_covariates.contains(n))
            .map(|(j, _)| j)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("null-fit result serializes")
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

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&path.display().to_string(), &bytes)
    }
}

/// Weighted least squares via normal equations.
pub fn wls(x: &DMatrix<f64>, z: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
    let xtw = DMatrix::from_fn(x.ncols(), x.nrows(), |j, i| x[(i, j)] * w[i]);
    let ch = Cholesky::new(&xtw * x).ok_or_else(|| Error::Numerical("singular weighted design".into()))?;
    Ok(ch.solve(&(xtw * z)))
}

/// GLM fit ignoring random effects, by iteratively reweighted least squares.
pub fn glm_fit(data: &LongitudinalDataset, family: LinkFamily, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = data.n_obs();
    let mut eta = DVector::from_fn(n, |o, _| match family {
        LinkFamily::GaussianIdentity => data.y[o],
        LinkFamily::BinomialLogit => family.link((data.y[o] + 0.5) / 2.0),
    });
    let mut theta = DVector::zeros(x.ncols());
    for it in 0..50 {
        let fe = evaluate_family(family, &eta)?;
        let z = DVector::from_fn(n, |o, _| eta[o] + fe.g_prime[o] * (data.y[o] - fe.mu[o]));
        let w = DVector::from_fn(n, |o, _| data.weights[o] / (fe.nu[o] * fe.g_prime[o] * fe.g_prime[o]));
        let next = wls(x, &z, &w)?;
        let change = (&next - &theta).amax();
        theta = next;
        eta = x * &theta;
        if it > 0 && change < 1e-10 * (1.0 + theta.amax()) {
            break;
        }
    }
    Ok(theta)
}

/// `P = Sigma^-1 - Sigma^-1 X (X' Sigma^-1 X)^-1 X' Sigma^-1`, kept factored.
pub struct Projector<'o, 'a> {
    pub ops: &'o SigmaOps<'a>,
    /// `Sigma^-1 X`.
    pub a: DMatrix<f64>,
    pub xtsx: Cholesky<f64, Dyn>,
}

impl<'o, 'a> Projector<'o, 'a> {
    pub fn new(ops: &'o SigmaOps<'a>, x: &DMatrix<f64>) -> Result<Self> {
        let a = ops.apply_inverse_mat(x);
        let xtsx = Cholesky::new(x.transpose() * &a)
            .ok_or_else(|| Error::Numerical("X' Sigma^-1 X is not positive definite".into()))?;
        Ok(Projector { ops, a, xtsx })
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let sv = self.ops.apply_inverse(v);
        let corr = &self.a * self.xtsx.solve(&(self.a.transpose() * v));
        sv - corr
    }

    /// GLS estimate `(X' Sigma^-1 X)^-1 X' Sigma^-1 y`.
    pub fn gls(&self, y: &DVector<f64>) -> DVector<f64> {
        self.xtsx.solve(&(self.a.transpose() * y))
    }

    /// Restricted quasi-likelihood `-1/2 (log|Sigma| + log|X' Sigma^-1 X| + y' P y)`.
    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        let py = self.apply(y);
        -0.5 * (self.ops.logdet() + chol_logdet(&self.xtsx) + y.dot(&py))
    }

    /// Exact `tr(P dSigma_j)` for every component, from the structured blocks.
    pub fn traces(&self, layout: &ParamLayout) -> DVector<f64> {
        let ops = self.ops;
        let data = ops.data;
        let needs_q = layout.components.iter().any(|c| matches!(c, Component::Tau(_)));
        let needs_blocks = layout
            .components
            .iter()
            .any(|c| matches!(c, Component::Phi | Component::Psi(..)));
        let q = if needs_q { ops.lt_inv_l() } else { Vec::new() };
        let blocks = if needs_blocks { ops.inverse_subject_blocks() } else { Vec::new() };
        let r = data.n_slopes();
        let f: Vec<DMatrix<f64>> = blocks
            .iter()
            .enumerate()
            .map(|(s, b)| {
                let rows = data.rows_of(s);
                let z = data.slopes.view((rows.start, 0), (rows.len(), r));
                z.transpose() * b * z
            })
            .collect();
        let cinv = self.xtsx.inverse();
        DVector::from_iterator(
            layout.len(),
            layout.components.iter().map(|&c| {
                let full = match c {
                    Component::Tau(k) => q
                        .iter()
                        .zip(&ops.kernels.blocks[k])
                        .map(|(qg, vg)| qg.component_mul(vg).sum())
                        .sum::<f64>(),
                    Component::Psi(u, v) => f
                        .iter()
                        .map(|fi| if u == v { fi[(u, u)] } else { 2.0 * fi[(u, v)] })
                        .sum(),
                    Component::Phi => (0..data.n_subjects())
                        .map(|s| {
                            data.rows_of(s)
                                .enumerate()
                                .map(|(a, o)| blocks[s][(a, a)] / (ops.w[o] * ops.vc.phi))
                                .sum::<f64>()
                        })
                        .sum(),
                };
                let sa = DMatrix::from_columns(
                    &(0..self.a.ncols())
                        .map(|j| ops.dsigma_mul(c, &self.a.column(j).into_owned()))
                        .collect::<Vec<_>>(),
                );
                full - (&cinv * (self.a.transpose() * sa)).trace()
            }),
        )
    }
}

/// Closed-form covariate effects and BLUPs of the working mixed model.
pub fn solve_mixed_equations(
    ops: &SigmaOps,
    x: &DMatrix<f64>,
    names: &[String],
    y_work: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (_, dropped) = independent_columns(x, 1e-8);
    if !dropped.is_empty() {
        return Err(Error::RankDeficient {
            columns: dropped
                .iter()
                .map(|&j| names.get(j).cloned().unwrap_or_else(|| format!("column {j}")))
                .collect(),
        });
    }
    let proj = Projector::new(ops, x)?;
    let theta = proj.gls(y_work);
    let q = ops.apply_inverse(&(y_work - x * &theta));
    Ok((theta, blup(ops, &q)))
}

/// `diag{sum tau_k V_k, D (x) I_m} H' q`.
pub fn blup(ops: &SigmaOps, q: &DVector<f64>) -> DVector<f64> {
    let data = ops.data;
    let m = data.n_subjects();
    let r = data.n_slopes();
    let mut b = DVector::zeros(m * (r + 1));
    let t = data.subject_sums(q);
    for (k, tau) in ops.vc.tau.iter().enumerate() {
        let v = ops.kernels.mul(k, &t) * *tau;
        let mut head = b.rows_mut(0, m);
        head += v;
    }
    let d = ops.vc.d_matrix();
    for s in 0..m {
        let rows = data.rows_of(s);
        let z = data.slopes.view((rows.start, 0), (rows.len(), r));
        let zq = z.transpose() * q.rows(rows.start, rows.len());
        let bs = &d * zq;
        for k in 0..r {
            b[m * (k + 1) + s] = bs[k];
        }
    }
    b
}

pub struct RemlTerms {
    pub objective: f64,
    pub score: DVector<f64>,
    pub ai: DMatrix<f64>,
}

/// REML score and average-information matrix at the current factorization.
pub fn reml_score_and_ai(proj: &Projector, layout: &ParamLayout, y_work: &DVector<f64>) -> RemlTerms {
    let ops = proj.ops;
    let q = proj.apply(y_work);
    let traces = proj.traces(layout);
    let sq: Vec<DVector<f64>> = layout.components.iter().map(|&c| ops.dsigma_mul(c, &q)).collect();
    let psq: Vec<DVector<f64>> = sq.iter().map(|v| proj.apply(v)).collect();
    let j = layout.len();
    let score = DVector::from_fn(j, |a, _| 0.5 * (q.dot(&sq[a]) - traces[a]));
    let mut ai = DMatrix::from_fn(j, j, |a, b| 0.5 * sq[a].dot(&psq[b]));
    ai = (&ai + ai.transpose()) * 0.5;
    RemlTerms {
        objective: -0.5 * (ops.logdet() + chol_logdet(&proj.xtsx) + y_work.dot(&q)),
        score,
        ai,
    }
}

/// Expected information `tr(P dSigma_l P dSigma_j) / 2`.
pub fn expected_information(proj: &Projector, layout: &ParamLayout, config: &NullFitConfig) -> DMatrix<f64> {
    let ops = proj.ops;
    let n = ops.data.n_obs();
    let j = layout.len();
    let mut info = DMatrix::zeros(j, j);
    if n <= config.exact_trace_max_obs {
        let p = DMatrix::from_columns(
            &(0..n)
                .map(|i| {
                    let mut e = DVector::zeros(n);
                    e[i] = 1.0;
                    proj.apply(&e)
                })
                .collect::<Vec<_>>(),
        );
        // dSigma_j P, column by column; P dSigma_j is its transpose.
        let sp: Vec<DMatrix<f64>> = layout
            .components
            .iter()
            .map(|&c| {
                let cols: Vec<DVector<f64>> = (0..n).map(|i| ops.dsigma_mul(c, &p.column(i).into_owned())).collect();
                DMatrix::from_columns(&cols)
            })
            .collect();
        for a in 0..j {
            for b in a..j {
                // tr(P S_a P S_b) = sum_{ik} (S_a P)_{ki} (S_b P)_{ik}
                let v = sp[a].transpose().component_mul(&sp[b]).sum();
                info[(a, b)] = 0.5 * v;
                info[(b, a)] = 0.5 * v;
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for _ in 0..config.probes {
            let z = DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
            let pz = proj.apply(&z);
            let spz: Vec<DVector<f64>> = layout.components.iter().map(|&c| ops.dsigma_mul(c, &pz)).collect();
            let psz: Vec<DVector<f64>> = layout
                .components
                .iter()
                .map(|&c| proj.apply(&ops.dsigma_mul(c, &z)))
                .collect();
            for a in 0..j {
                for b in 0..j {
                    info[(a, b)] += 0.5 * spz[a].dot(&psz[b]);
                }
            }
        }
        info /= config.probes as f64;
        info = (&info + info.transpose()) * 0.5;
    }
    info
}

fn project(layout: &ParamLayout, base: &VarianceComponents, theta: &DVector<f64>) -> VarianceComponents {
    let mut vc = layout.unpack(base, theta);
    for t in &mut vc.tau {
        *t = t.max(PARAM_FLOOR);
    }
    vc.phi = vc.phi.max(PARAM_FLOOR);
    let d = vc.d_matrix();
    if d.nrows() > 0 {
        let (fixed, _) = floor_eigenvalues(&d, PARAM_FLOOR);
        vc = VarianceComponents::new(vc.tau.clone(), &fixed, vc.phi);
    }
    vc
}

/// `(phi, sqrt(tau_k), L)` with `D = L L'`, in layout order, and the Jacobian of
/// the layout parameters with respect to them.
fn factor_coords(layout: &ParamLayout, vc: &VarianceComponents) -> (DVector<f64>, DMatrix<f64>) {
    let d = vc.d_matrix();
    let r = d.nrows();
    let diagonal = layout.components.iter().all(|c| !matches!(c, Component::Psi(u, v) if u != v));
    let l = if r == 0 {
        d.clone()
    } else if diagonal {
        DMatrix::from_diagonal(&d.diagonal().map(|v| v.max(0.0).sqrt()))
    } else {
        match cholesky_with_jitter(&d) {
            Some((ch, _)) => ch.l(),
            None => DMatrix::from_diagonal(&d.diagonal().map(|v| v.max(0.0).sqrt())),
        }
    };
    let n = layout.len();
    let z = DVector::from_fn(n, |a, _| match layout.components[a] {
        Component::Phi => vc.phi,
        Component::Tau(k) => vc.tau[k].max(0.0).sqrt(),
        Component::Psi(u, v) => l[(v, u)],
    });
    let jac = DMatrix::from_fn(n, n, |a, b| match (layout.components[a], layout.components[b]) {
        (Component::Phi, Component::Phi) => 1.0,
        (Component::Tau(i), Component::Tau(j)) if i == j => 2.0 * z[b],
        (Component::Psi(u, v), Component::Psi(c, row)) => {
            // d D_uv / d L_{row,c}
            let mut s = 0.0;
            if u == row {
                s += l[(v, c)];
            }
            if v == row {
                s += l[(u, c)];
            }
            s
        }
        _ => 0.0,
    });
    (z, jac)
}

fn from_factor(layout: &ParamLayout, z: &DVector<f64>) -> DVector<f64> {
    let r = layout
        .components
        .iter()
        .filter_map(|c| match c {
            Component::Psi(_, v) => Some(v + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let mut l = DMatrix::zeros(r, r);
    for (a, c) in layout.components.iter().enumerate() {
        if let Component::Psi(u, v) = *c {
            l[(v, u)] = z[a];
        }
    }
    let d = &l * l.transpose();
    DVector::from_fn(layout.len(), |a, _| match layout.components[a] {
        Component::Phi => z[a],
        Component::Tau(_) => z[a] * z[a],
        Component::Psi(u, v) => d[(u, v)],
    })
}

/// `sum_a score_a * d^2 theta_a / dz dz'` for the factor coordinates.
fn factor_curvature(layout: &ParamLayout, score: &DVector<f64>) -> DMatrix<f64> {
    let n = layout.len();
    let comps = &layout.components;
    let mut t = DMatrix::zeros(n, n);
    for (a, ca) in comps.iter().enumerate() {
        match *ca {
            Component::Tau(_) => t[(a, a)] += 2.0 * score[a],
            Component::Psi(u, v) => {
                for (b, cb) in comps.iter().enumerate() {
                    let Component::Psi(col, row) = *cb else { continue };
                    for (b2, cb2) in comps.iter().enumerate() {
                        let Component::Psi(col2, row2) = *cb2 else { continue };
                        if col != col2 {
                            continue;
                        }
                        let h = ((u == row && v == row2) as u8 + (v == row && u == row2) as u8) as f64;
                        t[(b, b2)] += score[a] * h;
                    }
                }
            }
            Component::Phi => {}
        }
    }
    t
}

/// Score rescaled to the gradient in matrix space, so the eigenvalue floor
/// acts as a Euclidean projection.
fn frobenius_gradient(layout: &ParamLayout, score: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(layout.len(), |a, _| match layout.components[a] {
        Component::Psi(u, v) if u != v => 0.5 * score[a],
        _ => score[a],
    })
}

fn newton_step(info: &DMatrix<f64>, score: &DVector<f64>) -> Option<DVector<f64>> {
    let ch = Cholesky::new(info.clone())?;
    let step = ch.solve(score);
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Starting values: GLM effects, then half the working-residual variance split
/// evenly over the random-effect variances and the other half to `phi`.
pub fn initial_components(
    data: &LongitudinalDataset,
    family: LinkFamily,
    x: &DMatrix<f64>,
    k: usize,
) -> Result<(DVector<f64>, VarianceComponents)> {
    let theta = glm_fit(data, family, x)?;
    let eta = x * &theta;
    let fe = evaluate_family(family, &eta)?;
    let n = data.n_obs();
    let resid = DVector::from_fn(n, |o, _| fe.g_prime[o] * (data.y[o] - fe.mu[o]));
    let mean = resid.mean();
    let v = resid.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n.max(2) - 1) as f64;
    let v = v.max(1e-4);
    let r = data.n_slopes();
    let share = 0.5 * v / (k + r) as f64;
    let phi = if family.estimates_dispersion() { 0.5 * v } else { 1.0 };
    let vc = VarianceComponents::new(vec![share; k], &(DMatrix::identity(r, r) * share), phi);
    Ok((theta, vc))
}

fn rel_change(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    new.iter()
        .zip(old.iter())
        .map(|(a, b)| (a - b).abs() / (b.abs() + 1.0))
        .fold(0.0, f64::max)
}

pub fn fit_null(
    data: &LongitudinalDataset,
    family: LinkFamily,
    kernels: &Kernels,
    config: &NullFitConfig,
) -> Result<NullFitResult> {
    if kernels.n_subjects != data.n_subjects() {
        return Err(Error::Invalid(format!(
            "relatedness covers {} subjects, data has {}",
            kernels.n_subjects,
            data.n_subjects()
        )));
    }
    let (kept, dropped) = independent_columns(&data.covariates, 1e-8);
    if kept.is_empty() {
        return Err(Error::Invalid("no usable covariate columns".into()));
    }
    if !dropped.is_empty() {
        log::warn!(
            "dropping linearly dependent covariates: {:?}",
            dropped.iter().map(|&j| &data.covariate_names[j]).collect::<Vec<_>>()
        );
    }
    let x = select_columns(&data.covariates, &kept);
    let names: Vec<String> = kept.iter().map(|&j| data.covariate_names[j].clone()).collect();
    let k = kernels.k();
    let r = data.n_slopes();
    let layout = ParamLayout::new(family.estimates_dispersion(), k, r, config.diagonal_d);

    let (theta0, init) = initial_components(data, family, &x, k)?;
    let mut vc = match &config.init {
        Some(v) => v.clone(),
        None => init,
    };
    vc.validate(family)?;
    if vc.tau.len() != k || vc.d.len() != r {
        return Err(Error::Invalid("initial variance components do not match the model".into()));
    }
    let m = data.n_subjects();
    let start = PqlState::from_coefficients(data, &x, theta0, DVector::zeros(m * (r + 1)));
    let mut state = working_update(data, family, &vc, &start)?;
    let h = assemble_h(data);

    let mut ops = SigmaOps::new(data, kernels, &vc, &state.w)?;
    let mut reml_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=config.max_iter {
        iterations = iter;
        let proj = Projector::new(&ops, &x)?;
        let terms = reml_score_and_ai(&proj, &layout, &state.y_work);
        let info = if iter == 1 {
            expected_information(&proj, &layout, config)
        } else {
            terms.ai.clone()
        };
        let step = newton_step(&info, &terms.score)
            .or_else(|| {
                log::debug!("information matrix not positive definite; using expected information");
                newton_step(&expected_information(&proj, &layout, config), &terms.score)
            })
            .or_else(|| {
                let e = expected_information(&proj, &layout, config);
                cholesky_with_jitter(&e).map(|(ch, _)| ch.solve(&terms.score))
            })
            .ok_or_else(|| Error::Numerical("information matrix is singular".into()))?;
        drop(proj);

        let unit_w = &state.w * vc.phi;
        let current = layout.pack(&vc);
        let search = |cand: &dyn Fn(f64) -> VarianceComponents, slack: f64| {
            let mut scale = 1.0;
            for _ in 0..=config.max_halvings {
                let c = cand(scale);
                let w = &unit_w / c.phi;
                if let Ok(cops) = SigmaOps::new(data, kernels, &c, &w) {
                    let obj = Projector::new(&cops, &x).map(|p| p.objective(&state.y_work));
                    if let Ok(obj) = obj {
                        if obj.is_finite() && obj >= terms.objective + slack * (1.0 + terms.objective.abs()) {
                            return Some((c, cops, obj));
                        }
                    }
                }
                scale *= 0.5;
            }
            None
        };
        let mut accepted = search(&|s| project(&layout, &vc, &(&current + &step * s)), -1e-10);
        let stalled = accepted.as_ref().is_none_or(|(c, _, _)| rel_change(&layout.pack(c), &current) < config.tol);
        if stalled {
            // on the boundary of the feasible set the projected step can stall;
            // retry in coordinates that cannot leave it, then along the gradient
            let (z, jac) = factor_coords(&layout, &vc);
            let g = jac.tr_mul(&terms.score);
            let a = jac.tr_mul(&(&info * &jac)) - factor_curvature(&layout, &terms.score);
            let a = (&a + a.transpose()) * 0.5;
            let size = a.diagonal().abs().mean().max(f64::MIN_POSITIVE);
            for mu in [0.0, 1e-4, 1e-2, 1.0, 1e2] {
                let damped = &a + DMatrix::identity(a.nrows(), a.nrows()) * (mu * size);
                let Some(ch) = Cholesky::new(damped) else { continue };
                let dz = ch.solve(&g);
                if !dz.iter().all(|v| v.is_finite()) {
                    continue;
                }
                let found = search(&|s| project(&layout, &vc, &from_factor(&layout, &(&z + &dz * s))), 1e-10);
                if found.is_some() {
                    log::debug!("iteration {iter}: factor-coordinate step (damping {mu})");
                    accepted = found;
                    break;
                }
            }
            if accepted.as_ref().is_none_or(|(c, _, _)| rel_change(&layout.pack(c), &current) < config.tol) {
                let grad = frobenius_gradient(&layout, &terms.score);
                let reach = current.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(PARAM_FLOOR);
                let g0 = 0.1 * reach / grad.amax().max(f64::MIN_POSITIVE);
                let mut scale = g0;
                for _ in 0..40 {
                    let c = project(&layout, &vc, &(&current + &grad * scale));
                    let w = &unit_w / c.phi;
                    if let Ok(cops) = SigmaOps::new(data, kernels, &c, &w) {
                        if let Ok(obj) = Projector::new(&cops, &x).map(|p| p.objective(&state.y_work)) {
                            if obj.is_finite() && obj > terms.objective + 1e-10 * (1.0 + terms.objective.abs()) {
                                log::debug!("iteration {iter}: projected gradient step");
                                accepted = Some((c, cops, obj));
                                break;
                            }
                        }
                    }
                    scale *= 0.5;
                }
            }
        }
        let (new_vc, new_ops, obj) = match accepted {
            Some(a) => a,
            None => {
                log::debug!("no ascent after {} halvings at iteration {iter}", config.max_halvings);
                let w = &unit_w / vc.phi;
                let o = SigmaOps::new(data, kernels, &vc, &w)?;
                (vc.clone(), o, terms.objective)
            }
        };
        reml_trace.push(obj);
        let dtheta = rel_change(&layout.pack(&new_vc), &current);
        vc = new_vc;
        ops = new_ops;

        let (theta, b) = solve_mixed_equations(&ops, &x, &names, &state.y_work)?;
        let eta = &x * &theta + h.mul_vec(&b);
        let mut next = state.clone();
        next.eta = eta;
        next.theta = theta;
        next.b = b;
        let next = working_update(data, family, &vc, &next)?;
        if !next.underflow.is_empty() {
            log::warn!("{} working weights below underflow threshold", next.underflow.len());
        }
        let dy = (&next.y_work - &state.y_work).norm() / state.y_work.norm().max(f64::MIN_POSITIVE);
        let w_changed = next.w != state.w;
        state = next;
        if w_changed {
            ops = SigmaOps::new(data, kernels, &vc, &state.w)?;
        }
        log::debug!("iteration {iter}: objective {obj:.6}, change {dtheta:.2e}, working change {dy:.2e}");
        if dtheta < config.tol && dy < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("null fit did not converge in {} iterations", config.max_iter);
    }
    // covariate effects and BLUPs consistent with the final components
    let (theta, b) = solve_mixed_equations(&ops, &x, &names, &state.y_work)?;
    let mut full_theta = vec![0.0; data.n_covariates()];
    for (a, &j) in kept.iter().enumerate() {
        full_theta[j] = theta[a];
    }
    let boundary = vc.tau.iter().any(|&t| t <= PARAM_FLOOR * (1.0 + 1e-9));
    Ok(NullFitResult {
        stage: STAGE.into(),
        family,
        param_names: layout.names(),
        params: layout.pack(&vc).iter().copied().collect(),
        vc,
        diagonal_d: config.diagonal_d,
        covariate_names: data.covariate_names.clone(),
        theta: full_theta,
        dropped_covariates: dropped.iter().map(|&j| data.covariate_names[j].clone()).collect(),
        subject_ids: data.subject_ids.clone(),
        b_hat: b.iter().copied().collect(),
        converged,
        iterations,
        boundary,
        reml_trace,
        y_work: state.y_work.iter().copied().collect(),
        w: state.w.iter().copied().collect(),
        sparse_grm: kernels.groups.len() > 1,
    })
}

/// Rebuilds the factorized `Sigma` and projector inputs of a finished fit.
pub fn refit_context<'a>(
    result: &NullFitResult,
    data: &'a LongitudinalDataset,
    kernels: &'a Kernels,
) -> Result<(SigmaOps<'a>, DMatrix<f64>, DVector<f64>)> {
    if result.subject_ids != data.subject_ids || result.y_work.len() != data.n_obs() {
        return Err(Error::Invalid("null-fit result does not match the dataset".into()));
    }
    let w = DVector::from_vec(result.w.clone());
    let ops = SigmaOps::new(data, kernels, &result.vc, &w)?;
    let x = select_columns(&data.covariates, &result.kept_columns());
    Ok((ops, x, DVector::from_vec(result.y_work.clone())))
}
