//! GLMM families, the stacked longitudinal data layout and the PQL working
//! response shared by the null and penalized fits.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower/upper clamp for the logistic mean.
pub const MU_CLAMP: f64 = 1e-6;
/// Working weights below this value are reported as underflowed.
pub const WEIGHT_UNDERFLOW: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkFamily {
    GaussianIdentity,
    BinomialLogit,
}

impl LinkFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gaussian-identity" | "normal" => Ok(LinkFamily::GaussianIdentity),
            "binomial" | "binomial-logit" | "logistic" | "binary" => Ok(LinkFamily::BinomialLogit),
            other => Err(Error::Invalid(format!("unknown family `{other}`"))),
        }
    }

    /// True when the dispersion is estimated (Gaussian); binomial fixes it at 1.
    pub fn estimates_dispersion(self) -> bool {
        matches!(self, LinkFamily::GaussianIdentity)
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            LinkFamily::GaussianIdentity => mu,
            LinkFamily::BinomialLogit => {
                let mu = clamp_mu(mu);
                (mu / (1.0 - mu)).ln()
            }
        }
    }

    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            LinkFamily::GaussianIdentity => eta,
            LinkFamily::BinomialLogit => clamp_mu(logistic(eta)),
        }
    }

    pub fn link_derivative(self, mu: f64) -> f64 {
        match self {
            LinkFamily::GaussianIdentity => 1.0,
            LinkFamily::BinomialLogit => {
                let mu = clamp_mu(mu);
                1.0 / (mu * (1.0 - mu))
            }
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            LinkFamily::GaussianIdentity => 1.0,
            LinkFamily::BinomialLogit => {
                let mu = clamp_mu(mu);
                mu * (1.0 - mu)
            }
        }
    }

    /// Closed form of `int_y^mu a (y - t) / (phi v(t)) dt`.
    pub fn quasi_likelihood(self, y: f64, mu: f64, a: f64, phi: f64) -> f64 {
        match self {
            LinkFamily::GaussianIdentity => -a * (y - mu).powi(2) / (2.0 * phi),
            LinkFamily::BinomialLogit => {
                let mu = clamp_mu(mu);
                let xlogx = |p: f64, q: f64| if p > 0.0 { p * (p / q).ln() } else { 0.0 };
                -a * (xlogx(y, mu) + xlogx(1.0 - y, 1.0 - mu)) / phi
            }
        }
    }
}

fn clamp_mu(mu: f64) -> f64 {
    mu.clamp(MU_CLAMP, 1.0 - MU_CLAMP)
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyEval {
    pub mu: DVector<f64>,
    pub g_prime: DVector<f64>,
    pub nu: DVector<f64>,
}

/// Mean, link derivative and variance function at each linear predictor.
pub fn evaluate_family(family: LinkFamily, eta: &DVector<f64>) -> Result<FamilyEval> {
    if let Some((index, &value)) = eta.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }
    let mu = eta.map(|e| family.inverse_link(e));
    let g_prime = mu.map(|m| family.link_derivative(m));
    let nu = mu.map(|m| family.variance(m));
    Ok(FamilyEval { mu, g_prime, nu })
}

/// Stacked longitudinal data, subject-major and time-ascending.
///
/// Genotypes are stored once per subject (`m x p`); the observation-level
/// design `G` is the row expansion through `subject_of`.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    pub subject_ids: Vec<String>,
    pub subject_start: Vec<usize>,
    pub subject_of: Vec<usize>,
    pub visit: Vec<f64>,
    pub y: DVector<f64>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub genotypes: DMatrix<f64>,
    pub variant_ids: Vec<String>,
    pub slopes: DMatrix<f64>,
    pub slope_names: Vec<String>,
    pub weights: DVector<f64>,
}

pub struct DatasetParts {
    pub subject_ids: Vec<String>,
    pub subject_of: Vec<usize>,
    pub visit: Option<Vec<f64>>,
    pub y: DVector<f64>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub genotypes: DMatrix<f64>,
    pub variant_ids: Vec<String>,
    pub slopes: DMatrix<f64>,
    pub slope_names: Vec<String>,
    pub weights: Option<DVector<f64>>,
}

impl LongitudinalDataset {
    pub fn new(parts: DatasetParts) -> Result<Self> {
        let n = parts.y.len();
        let m = parts.subject_ids.len();
        if n == 0 || m == 0 {
            return Err(Error::Invalid("dataset has no observations".into()));
        }
        if parts.subject_of.len() != n {
            return Err(Error::Invalid("subject map length differs from outcome length".into()));
        }
        let mut start = vec![0usize; m + 1];
        let mut prev = 0usize;
        for (o, &s) in parts.subject_of.iter().enumerate() {
            if s >= m {
                return Err(Error::Invalid(format!("observation {o} maps to unknown subject {s}")));
            }
            let in_order = if o == 0 { s == 0 } else { s == prev || s == prev + 1 };
            if !in_order {
                return Err(Error::Invalid(
                    "observations must be subject-major and every subject must have an observation"
                        .into(),
                ));
            }
            prev = s;
            start[s + 1] = o + 1;
        }
        // subjects are contiguous from 0, so start[s + 1] holds each end offset
        if prev != m - 1 {
            return Err(Error::Invalid("every subject must have at least one observation".into()));
        }
        let checks = [
            ("covariates", parts.covariates.nrows(), n),
            ("slopes", parts.slopes.nrows(), n),
            ("genotypes", parts.genotypes.nrows(), m),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Invalid(format!("{name} has {got} rows, expected {want}")));
            }
        }
        if parts.covariates.ncols() == 0 {
            return Err(Error::Invalid("covariate matrix must contain the intercept".into()));
        }
        if parts.covariate_names.len() != parts.covariates.ncols()
            || parts.slope_names.len() != parts.slopes.ncols()
            || parts.variant_ids.len() != parts.genotypes.ncols()
        {
            return Err(Error::Invalid("column names do not match matrix widths".into()));
        }
        let all_finite = parts.y.iter().all(|v| v.is_finite())
            && parts.covariates.iter().all(|v| v.is_finite())
            && parts.slopes.iter().all(|v| v.is_finite())
            && parts.genotypes.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Invalid("dataset contains missing or non-finite values".into()));
        }
        let weights = parts.weights.unwrap_or_else(|| DVector::from_element(n, 1.0));
        if weights.len() != n || weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("prior weights must be positive and finite".into()));
        }
        let visit = parts.visit.unwrap_or_else(|| {
            parts
                .subject_of
                .iter()
                .enumerate()
                .map(|(o, &s)| (o - start[s]) as f64)
                .collect()
        });
        Ok(LongitudinalDataset {
            subject_ids: parts.subject_ids,
            subject_start: start,
            subject_of: parts.subject_of,
            visit,
            y: parts.y,
            covariates: parts.covariates,
            covariate_names: parts.covariate_names,
            genotypes: parts.genotypes,
            variant_ids: parts.variant_ids,
            slopes: parts.slopes,
            slope_names: parts.slope_names,
            weights,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_variants(&self) -> usize {
        self.genotypes.ncols()
    }

    /// Dimension of the subject-level random-effect covariance `D`.
    pub fn n_slopes(&self) -> usize {
        self.slopes.ncols()
    }

    pub fn rows_of(&self, subject: usize) -> std::ops::Range<usize> {
        self.subject_start[subject]..self.subject_start[subject + 1]
    }

    /// Observation-level genotype design (`n x p`).
    pub fn expanded_genotypes(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_obs(), self.n_variants(), |o, j| {
            self.genotypes[(self.subject_of[o], j)]
        })
    }

    /// Sum of observation values per subject (`L^T v`).
    pub fn subject_sums(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_subjects(), |s, _| self.rows_of(s).map(|o| v[o]).sum())
    }

    /// Repeats subject values over their observations (`L u`).
    pub fn expand_subjects(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n_obs(), |o, _| u[self.subject_of[o]])
    }

    /// Keeps only the listed variant columns.
    pub fn with_variants(&self, cols: &[usize]) -> Self {
        let mut out = self.clone();
        out.genotypes = DMatrix::from_fn(self.n_subjects(), cols.len(), |s, j| {
            self.genotypes[(s, cols[j])]
        });
        out.variant_ids = cols.iter().map(|&j| self.variant_ids[j].clone()).collect();
        out
    }
}

/// Polygenic variance scalars, subject random-effect covariance and dispersion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub tau: Vec<f64>,
    pub d: Vec<Vec<f64>>,
    pub phi: f64,
}

impl VarianceComponents {
    pub fn new(tau: Vec<f64>, d: &DMatrix<f64>, phi: f64) -> Self {
        let d = (0..d.nrows())
            .map(|i| (0..d.ncols()).map(|j| d[(i, j)]).collect())
            .collect();
        VarianceComponents { tau, d, phi }
    }

    pub fn d_matrix(&self) -> DMatrix<f64> {
        let r = self.d.len();
        DMatrix::from_fn(r, r, |i, j| self.d[i][j])
    }

    pub fn validate(&self, family: LinkFamily) -> Result<()> {
        if self.tau.is_empty() {
            return Err(Error::Invalid("at least one polygenic variance is required".into()));
        }
        if self.tau.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::Invalid("polygenic variances must be non-negative".into()));
        }
        if !(self.phi > 0.0) {
            return Err(Error::Invalid("dispersion must be positive".into()));
        }
        if family == LinkFamily::BinomialLogit && self.phi != 1.0 {
            return Err(Error::Invalid("binomial dispersion is fixed at 1".into()));
        }
        let d = self.d_matrix();
        if d.nrows() > 0 {
            if (&d - d.transpose()).abs().max() > 1e-12 * (1.0 + d.abs().max()) {
                return Err(Error::Invalid("D must be symmetric".into()));
            }
            if nalgebra::Cholesky::new(d).is_none() {
                return Err(Error::Invalid("D must be positive definite".into()));
            }
        }
        Ok(())
    }
}

/// Current linear predictor, weights and working response of a PQL iteration.
#[derive(Debug, Clone)]
pub struct PqlState {
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    /// `W = a / (phi * v(mu) * g'(mu)^2)`.
    pub w: DVector<f64>,
    /// `g'(mu)`, the diagonal of `Delta`.
    pub delta_diag: DVector<f64>,
    pub y_work: DVector<f64>,
    pub theta: DVector<f64>,
    pub b: DVector<f64>,
    /// Observations whose working weight fell below [`WEIGHT_UNDERFLOW`].
    pub underflow: Vec<usize>,
}

impl PqlState {
    /// State with the given coefficients; weights and working vector are filled
    /// by [`working_update`].
    pub fn from_coefficients(
        data: &LongitudinalDataset,
        x: &DMatrix<f64>,
        theta: DVector<f64>,
        b: DVector<f64>,
    ) -> Self {
        let h = assemble_h(data);
        let eta = x * &theta + h.mul_vec(&b);
        let n = eta.len();
        PqlState {
            eta,
            mu: DVector::zeros(n),
            w: DVector::zeros(n),
            delta_diag: DVector::zeros(n),
            y_work: DVector::zeros(n),
            theta,
            b,
            underflow: Vec::new(),
        }
    }

    /// Weights without the dispersion factor, `a / (v g'^2)`.
    pub fn unit_weights(&self, phi: f64) -> DVector<f64> {
        &self.w * phi
    }
}

/// Recomputes mean, weights and working vector from `state.eta`.
pub fn working_update(
    data: &LongitudinalDataset,
    family: LinkFamily,
    vc: &VarianceComponents,
    state: &PqlState,
) -> Result<PqlState> {
    let fe = evaluate_family(family, &state.eta)?;
    let n = data.n_obs();
    let mut w = DVector::zeros(n);
    let mut y_work = DVector::zeros(n);
    let mut underflow = Vec::new();
    for o in 0..n {
        let wo = data.weights[o] / (vc.phi * fe.nu[o] * fe.g_prime[o] * fe.g_prime[o]);
        if wo < WEIGHT_UNDERFLOW {
            underflow.push(o);
        }
        w[o] = wo;
        y_work[o] = state.eta[o] + fe.g_prime[o] * (data.y[o] - fe.mu[o]);
    }
    Ok(PqlState {
        eta: state.eta.clone(),
        mu: fe.mu,
        w,
        delta_diag: fe.g_prime,
        y_work,
        theta: state.theta.clone(),
        b: state.b.clone(),
        underflow,
    })
}

/// Compressed sparse rows; used for the random-effect design `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRows {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.nrows, |i, _| self.row(i).map(|(j, v)| v * x[j]).sum())
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                out[j] += v * x[i];
            }
        }
        out
    }

    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, b.ncols());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                for c in 0..b.ncols() {
                    out[(i, c)] += v * b[(j, c)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                out[(i, j)] += v;
            }
        }
        out
    }
}

/// Random-effect design `H` with rows `(1, Z_ij) (x) L_i`.
///
/// Column `i` carries the polygenic intercept of subject `i`; column `m*k + i`
/// (k = 1..=r) carries the k-th subject-level effect.
pub fn assemble_h(data: &LongitudinalDataset) -> SparseRows {
    let n = data.n_obs();
    let m = data.n_subjects();
    let r = data.n_slopes();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(n * (r + 1));
    let mut values = Vec::with_capacity(n * (r + 1));
    row_ptr.push(0);
    for o in 0..n {
        let s = data.subject_of[o];
        col_idx.push(s);
        values.push(1.0);
        for k in 0..r {
            col_idx.push(m * (k + 1) + s);
            values.push(data.slopes[(o, k)]);
        }
        row_ptr.push(col_idx.len());
    }
    SparseRows {
        nrows: n,
        ncols: m * (r + 1),
        row_ptr,
        col_idx,
        values,
    }
}

#[cfg(test)]
pub(crate) use tests::toy as toy_dataset;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(m: usize, visits: &[usize], r: usize) -> LongitudinalDataset {
        let subject_of: Vec<usize> = visits
            .iter()
            .enumerate()
            .flat_map(|(s, &k)| std::iter::repeat_n(s, k))
            .collect();
        let n = subject_of.len();
        let slopes = DMatrix::from_fn(n, r, |o, k| if k == 0 { 1.0 } else { (o * 7 + k) as f64 * 0.1 });
        LongitudinalDataset::new(DatasetParts {
            subject_ids: (0..m).map(|i| format!("s{i}")).collect(),
            subject_of,
            visit: None,
            y: DVector::from_fn(n, |o, _| o as f64),
            covariates: DMatrix::from_element(n, 1, 1.0),
            covariate_names: vec!["intercept".into()],
            genotypes: DMatrix::zeros(m, 0),
            variant_ids: vec![],
            slopes,
            slope_names: (0..r).map(|k| format!("z{k}")).collect(),
            weights: None,
        })
        .unwrap()
    }

    #[test]
    fn gaussian_identity_evaluation() {
        let fe = evaluate_family(LinkFamily::GaussianIdentity, &DVector::from_vec(vec![0.5])).unwrap();
        assert_eq!(fe.mu[0], 0.5);
        assert_eq!(fe.g_prime[0], 1.0);
        assert_eq!(fe.nu[0], 1.0);
    }

    #[test]
    fn logistic_at_zero() {
        let fe = evaluate_family(LinkFamily::BinomialLogit, &DVector::from_vec(vec![0.0])).unwrap();
        assert_eq!(fe.mu[0], 0.5);
        assert_eq!(fe.g_prime[0], 4.0);
        assert_eq!(fe.nu[0], 0.25);
    }

    #[test]
    fn logistic_at_log3() {
        // logistic(ln 3) = 3/4 exactly in rational arithmetic
        let fe = evaluate_family(LinkFamily::BinomialLogit, &DVector::from_vec(vec![3f64.ln()])).unwrap();
        assert!((fe.mu[0] - 0.75).abs() < 1e-15);
        assert!((fe.g_prime[0] - 16.0 / 3.0).abs() < 1e-13);
        assert!((fe.nu[0] - 3.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_eta_reports_index() {
        let err = evaluate_family(LinkFamily::GaussianIdentity, &DVector::from_vec(vec![0.0, f64::NAN]))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn logistic_mean_is_clamped() {
        let fe = evaluate_family(LinkFamily::BinomialLogit, &DVector::from_vec(vec![-800.0, 800.0])).unwrap();
        assert_eq!(fe.mu[0], MU_CLAMP);
        assert_eq!(fe.mu[1], 1.0 - MU_CLAMP);
        assert!(fe.g_prime.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn canonical_link_identity() {
        for fam in [LinkFamily::GaussianIdentity, LinkFamily::BinomialLogit] {
            for k in 1..200 {
                let mu = k as f64 / 200.0;
                let v = fam.link_derivative(mu) * fam.variance(mu);
                assert!((v - 1.0).abs() < 1e-12, "{fam:?} at {mu}");
            }
        }
    }

    #[test]
    fn gaussian_working_weights() {
        let data = toy(2, &[2, 1], 0);
        let vc = VarianceComponents::new(vec![1.0], &DMatrix::zeros(0, 0), 2.0);
        let x = data.covariates.clone();
        let state = PqlState::from_coefficients(&data, &x, DVector::from_vec(vec![1.0]), DVector::zeros(2));
        let st = working_update(&data, LinkFamily::GaussianIdentity, &vc, &state).unwrap();
        assert!(st.w.iter().all(|&w| w == 0.5));
        // identity link: working vector equals the outcome
        assert_eq!(st.y_work, data.y);
    }

    #[test]
    fn gaussian_zero_residual_returns_eta() {
        let mut data = toy(2, &[2, 1], 0);
        data.y = DVector::from_element(3, 0.3);
        let vc = VarianceComponents::new(vec![1.0], &DMatrix::zeros(0, 0), 1.0);
        let x = data.covariates.clone();
        let state = PqlState::from_coefficients(&data, &x, DVector::from_vec(vec![0.3]), DVector::zeros(2));
        let st = working_update(&data, LinkFamily::GaussianIdentity, &vc, &state).unwrap();
        assert_eq!(st.y_work, st.eta);
    }

    #[test]
    fn binomial_working_at_half() {
        let mut data = toy(1, &[1], 0);
        data.y = DVector::from_vec(vec![1.0]);
        let vc = VarianceComponents::new(vec![1.0], &DMatrix::zeros(0, 0), 1.0);
        let x = data.covariates.clone();
        let state = PqlState::from_coefficients(&data, &x, DVector::from_vec(vec![0.0]), DVector::zeros(1));
        let st = working_update(&data, LinkFamily::BinomialLogit, &vc, &state).unwrap();
        assert_eq!(st.w[0], 0.25);
        assert_eq!(st.y_work[0], 0.0 + 4.0 * (1.0 - 0.5));
    }

    #[test]
    fn h_matches_displayed_block_pattern() {
        // m = 3 subjects, two visits each, random intercept + one slope
        let data = toy(3, &[2, 2, 2], 2);
        let h = assemble_h(&data).to_dense();
        assert_eq!(h.shape(), (6, 9));
        for o in 0..6 {
            let s = o / 2;
            for i in 0..3 {
                let ind = if i == s { 1.0 } else { 0.0 };
                assert_eq!(h[(o, i)], ind, "polygenic block");
                assert_eq!(h[(o, 3 + i)], ind, "Z1 block");
                assert_eq!(h[(o, 6 + i)], ind * data.slopes[(o, 1)], "Z2 block");
            }
        }
    }

    #[test]
    fn h_without_slopes_is_indicator() {
        let data = toy(3, &[1, 2, 1], 0);
        let h = assemble_h(&data).to_dense();
        let expect = DMatrix::from_row_slice(4, 3, &[1., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(h, expect);
    }

    #[test]
    fn h_single_subject() {
        let data = toy(1, &[3], 2);
        let h = assemble_h(&data).to_dense();
        assert_eq!(h.shape(), (3, 3));
        assert!(h.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dataset_rejects_interleaved_subjects() {
        let err = LongitudinalDataset::new(DatasetParts {
            subject_ids: vec!["a".into(), "b".into()],
            subject_of: vec![0, 1, 0],
            visit: None,
            y: DVector::zeros(3),
            covariates: DMatrix::from_element(3, 1, 1.0),
            covariate_names: vec!["intercept".into()],
            genotypes: DMatrix::zeros(2, 0),
            variant_ids: vec![],
            slopes: DMatrix::zeros(3, 0),
            slope_names: vec![],
            weights: None,
        });
        assert!(err.is_err());
    }
}

