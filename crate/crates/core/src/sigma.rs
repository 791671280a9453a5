//! Marginal covariance of the working vector,
//! `Sigma = L (sum_k tau_k V_k) L' + Z~ (D (x) I_m) Z~' + W^-1`,
//! applied through the Woodbury identity with per-subject blocks.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grm::Relatedness;
use crate::linalg::{chol_logdet, cholesky_with_jitter};
use crate::model::{LongitudinalDataset, VarianceComponents};

/// Relatedness matrices aligned to the dataset's subject order and split into
/// independent groups of subjects.
#[derive(Debug, Clone)]
pub struct Kernels {
    /// Subject indices of each group.
    pub groups: Vec<Vec<usize>>,
    /// `blocks[k][g]` is `V_k` restricted to group `g`.
    pub blocks: Vec<Vec<DMatrix<f64>>>,
    pub n_subjects: usize,
}

impl Kernels {
    /// Aligns `rels` to `subject_ids`. A single sparse matrix keeps its
    /// cluster structure; anything else becomes one dense group.
    pub fn new(rels: &[Relatedness], subject_ids: &[String]) -> Result<Self> {
        if rels.is_empty() {
            return Err(Error::Invalid("at least one relatedness matrix is required".into()));
        }
        let aligned = rels.iter().map(|r| r.subset(subject_ids)).collect::<Result<Vec<_>>>()?;
        let m = subject_ids.len();
        if let [Relatedness::Sparse(sg)] = aligned.as_slice() {
            return Ok(Kernels {
                groups: sg.clusters(),
                blocks: vec![sg.blocks.clone()],
                n_subjects: m,
            });
        }
        Ok(Self::from_dense(aligned.iter().map(|r| r.to_dense()).collect()))
    }

    pub fn from_dense(mats: Vec<DMatrix<f64>>) -> Self {
        let m = mats.first().map_or(0, |v| v.nrows());
        Kernels {
            groups: vec![(0..m).collect()],
            blocks: mats.into_iter().map(|v| vec![v]).collect(),
            n_subjects: m,
        }
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn combined(&self, tau: &[f64]) -> Vec<DMatrix<f64>> {
        (0..self.groups.len())
            .map(|g| {
                let size = self.groups[g].len();
                let mut acc = DMatrix::zeros(size, size);
                for (k, t) in tau.iter().enumerate() {
                    acc += &self.blocks[k][g] * *t;
                }
                acc
            })
            .collect()
    }

    /// `V_k x` for a subject-level vector.
    pub fn mul(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for (members, block) in self.groups.iter().zip(&self.blocks[k]) {
            let xs = gather(x, members);
            scatter(&mut out, members, &(block * xs));
        }
        out
    }

    pub fn dense(&self, k: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_subjects, self.n_subjects);
        for (members, block) in self.groups.iter().zip(&self.blocks[k]) {
            for (a, &i) in members.iter().enumerate() {
                for (b, &j) in members.iter().enumerate() {
                    out[(i, j)] = block[(a, b)];
                }
            }
        }
        out
    }
}

pub(crate) fn gather(x: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| x[i]))
}

pub(crate) fn scatter(out: &mut DVector<f64>, idx: &[usize], v: &DVector<f64>) {
    for (a, &i) in idx.iter().enumerate() {
        out[i] = v[a];
    }
}

/// A variance parameter with respect to which `Sigma` is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Phi,
    Tau(usize),
    Psi(usize, usize),
}

/// Ordering of the variance parameter vector: `phi` (when estimated), the
/// `tau_k`, then the unique elements of `D` row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub components: Vec<Component>,
}

impl ParamLayout {
    pub fn new(estimate_phi: bool, k: usize, r: usize, diagonal_d: bool) -> Self {
        let mut components = Vec::new();
        if estimate_phi {
            components.push(Component::Phi);
        }
        components.extend((0..k).map(Component::Tau));
        for u in 0..r {
            for v in u..r {
                if !diagonal_d || u == v {
                    components.push(Component::Psi(u, v));
                }
            }
        }
        ParamLayout { components }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        let mut psi = 0;
        self.components
            .iter()
            .map(|c| match c {
                Component::Phi => "phi".to_string(),
                Component::Tau(k) => format!("tau_{}", k + 1),
                Component::Psi(..) => {
                    psi += 1;
                    format!("psi_{psi}")
                }
            })
            .collect()
    }

    pub fn pack(&self, vc: &VarianceComponents) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.components.iter().map(|c| match *c {
                Component::Phi => vc.phi,
                Component::Tau(k) => vc.tau[k],
                Component::Psi(u, v) => vc.d[u][v],
            }),
        )
    }

    /// Writes `theta` into a copy of `base`; entries of `D` not in the layout keep their values.
    pub fn unpack(&self, base: &VarianceComponents, theta: &DVector<f64>) -> VarianceComponents {
        let mut vc = base.clone();
        for (c, &t) in self.components.iter().zip(theta.iter()) {
            match *c {
                Component::Phi => vc.phi = t,
                Component::Tau(k) => vc.tau[k] = t,
                Component::Psi(u, v) => {
                    vc.d[u][v] = t;
                    vc.d[v][u] = t;
                }
            }
        }
        vc
    }
}

enum Inverse {
    Woodbury {
        r_chol: Vec<Cholesky<f64, Dyn>>,
        /// `R_i^-1 1` per subject.
        u: Vec<DVector<f64>>,
        /// `(G^-1 + L'R^-1L)^-1` per group.
        m_inv: Vec<DMatrix<f64>>,
    },
    Dense(DMatrix<f64>),
}

/// Factorized `Sigma` for one set of variance components and working weights.
pub struct SigmaOps<'a> {
    pub data: &'a LongitudinalDataset,
    pub kernels: &'a Kernels,
    pub vc: VarianceComponents,
    /// Working weights `W` (dispersion included).
    pub w: DVector<f64>,
    d_mat: DMatrix<f64>,
    /// `1' R_i^-1 1` per subject.
    d: DVector<f64>,
    logdet: f64,
    inv: Inverse,
}

impl<'a> SigmaOps<'a> {
    pub fn new(
        data: &'a LongitudinalDataset,
        kernels: &'a Kernels,
        vc: &VarianceComponents,
        w: &DVector<f64>,
    ) -> Result<Self> {
        match Self::woodbury(data, kernels, vc, w) {
            Ok(ops) => Ok(ops),
            Err(e) => {
                log::warn!("structured Sigma factorization failed ({e}); using a dense solve");
                Self::dense(data, kernels, vc, w)
            }
        }
    }

    fn woodbury(
        data: &'a LongitudinalDataset,
        kernels: &'a Kernels,
        vc: &VarianceComponents,
        w: &DVector<f64>,
    ) -> Result<Self> {
        let m = data.n_subjects();
        let d_mat = vc.d_matrix();
        let subj: Vec<(Cholesky<f64, Dyn>, DVector<f64>, f64)> = (0..m)
            .into_par_iter()
            .map(|s| {
                let rb = r_block(data, &d_mat, w, s);
                let ch = Cholesky::new(rb).ok_or(Error::NotPositiveDefinite { block: s })?;
                let u = ch.solve(&DVector::from_element(data.rows_of(s).len(), 1.0));
                let ld = chol_logdet(&ch);
                Ok((ch, u, ld))
            })
            .collect::<Result<_>>()?;
        let mut logdet: f64 = subj.iter().map(|t| t.2).sum();
        let d = DVector::from_iterator(m, subj.iter().map(|t| t.1.sum()));
        let g_blocks = kernels.combined(&vc.tau);
        let parts: Vec<(DMatrix<f64>, f64)> = kernels
            .groups
            .par_iter()
            .zip(g_blocks.par_iter())
            .enumerate()
            .map(|(gi, (members, g))| {
                let sq: Vec<f64> = members.iter().map(|&i| d[i].sqrt()).collect();
                let size = members.len();
                let sg = DMatrix::from_fn(size, size, |a, b| sq[a] * g[(a, b)]);
                let b = DMatrix::identity(size, size) + DMatrix::from_fn(size, size, |a, c| sg[(a, c)] * sq[c]);
                let ch = Cholesky::new(b).ok_or(Error::NotPositiveDefinite { block: gi })?;
                let t = ch.solve(&sg);
                let mut mi = g - sg.transpose() * t;
                symmetrize(&mut mi);
                Ok((mi, chol_logdet(&ch)))
            })
            .collect::<Result<_>>()?;
        logdet += parts.iter().map(|p| p.1).sum::<f64>();
        let (r_chol, u): (Vec<_>, Vec<_>) = subj.into_iter().map(|(c, u, _)| (c, u)).unzip();
        Ok(SigmaOps {
            data,
            kernels,
            vc: vc.clone(),
            w: w.clone(),
            d_mat,
            d,
            logdet,
            inv: Inverse::Woodbury {
                r_chol,
                u,
                m_inv: parts.into_iter().map(|p| p.0).collect(),
            },
        })
    }

    /// Dense factorization of the assembled `Sigma`.
    pub fn dense(
        data: &'a LongitudinalDataset,
        kernels: &'a Kernels,
        vc: &VarianceComponents,
        w: &DVector<f64>,
    ) -> Result<Self> {
        let sigma = dense_sigma(data, kernels, vc, w);
        let (ch, _) = cholesky_with_jitter(&sigma).ok_or(Error::NotPositiveDefinite { block: 0 })?;
        let logdet = chol_logdet(&ch);
        let d_mat = vc.d_matrix();
        let d = DVector::zeros(data.n_subjects());
        Ok(SigmaOps {
            data,
            kernels,
            vc: vc.clone(),
            w: w.clone(),
            d_mat,
            d,
            logdet,
            inv: Inverse::Dense(ch.inverse()),
        })
    }

    pub fn is_dense_fallback(&self) -> bool {
        matches!(self.inv, Inverse::Dense(_))
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn apply_inverse(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.inv {
            Inverse::Dense(si) => si * x,
            Inverse::Woodbury { r_chol, u, m_inv } => {
                let data = self.data;
                let m = data.n_subjects();
                let mut z = DVector::zeros(x.len());
                let mut t = DVector::zeros(m);
                for s in 0..m {
                    let rows = data.rows_of(s);
                    let zs = r_chol[s].solve(&x.rows(rows.start, rows.len()).into_owned());
                    t[s] = zs.sum();
                    z.rows_mut(rows.start, rows.len()).copy_from(&zs);
                }
                let mut sv = DVector::zeros(m);
                for (members, mi) in self.kernels.groups.iter().zip(m_inv) {
                    scatter(&mut sv, members, &(mi * gather(&t, members)));
                }
                for s in 0..m {
                    let rows = data.rows_of(s);
                    let mut zs = z.rows_mut(rows.start, rows.len());
                    zs.axpy(-sv[s], &u[s], 1.0);
                }
                z
            }
        }
    }

    pub fn apply_inverse_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|j| self.apply_inverse(&x.column(j).into_owned()))
            .collect();
        DMatrix::from_columns(&cols)
    }

    /// `L' Sigma^-1 L` restricted to each kernel group.
    pub fn lt_inv_l(&self) -> Vec<DMatrix<f64>> {
        match &self.inv {
            Inverse::Woodbury { m_inv, .. } => self
                .kernels
                .groups
                .iter()
                .zip(m_inv)
                .map(|(members, mi)| {
                    let dv: Vec<f64> = members.iter().map(|&i| self.d[i]).collect();
                    DMatrix::from_fn(members.len(), members.len(), |a, b| {
                        let diag = if a == b { dv[a] } else { 0.0 };
                        diag - dv[a] * mi[(a, b)] * dv[b]
                    })
                })
                .collect(),
            Inverse::Dense(si) => {
                let data = self.data;
                let m = data.n_subjects();
                let mut q = DMatrix::zeros(m, m);
                for a in 0..m {
                    for b in 0..m {
                        let mut acc = 0.0;
                        for i in data.rows_of(a) {
                            for j in data.rows_of(b) {
                                acc += si[(i, j)];
                            }
                        }
                        q[(a, b)] = acc;
                    }
                }
                self.kernels
                    .groups
                    .iter()
                    .map(|members| {
                        DMatrix::from_fn(members.len(), members.len(), |a, b| q[(members[a], members[b])])
                    })
                    .collect()
            }
        }
    }

    /// Diagonal blocks `(Sigma^-1)_ii`, one per subject.
    pub fn inverse_subject_blocks(&self) -> Vec<DMatrix<f64>> {
        let data = self.data;
        match &self.inv {
            Inverse::Woodbury { r_chol, u, m_inv } => {
                let mut mdiag = DVector::zeros(data.n_subjects());
                for (members, mi) in self.kernels.groups.iter().zip(m_inv) {
                    scatter(&mut mdiag, members, &mi.diagonal());
                }
                (0..data.n_subjects())
                    .into_par_iter()
                    .map(|s| r_chol[s].inverse() - &u[s] * u[s].transpose() * mdiag[s])
                    .collect()
            }
            Inverse::Dense(si) => (0..data.n_subjects())
                .map(|s| {
                    let rows = data.rows_of(s);
                    si.view((rows.start, rows.start), (rows.len(), rows.len())).into_owned()
                })
                .collect(),
        }
    }

    /// `(d Sigma / d c) x`.
    pub fn dsigma_mul(&self, c: Component, x: &DVector<f64>) -> DVector<f64> {
        let data = self.data;
        match c {
            Component::Phi => DVector::from_fn(x.len(), |o, _| x[o] / (self.w[o] * self.vc.phi)),
            Component::Tau(k) => data.expand_subjects(&self.kernels.mul(k, &data.subject_sums(x))),
            Component::Psi(u, v) => {
                let mut out = DVector::zeros(x.len());
                for o0 in 0..data.n_subjects() {
                    let rows = data.rows_of(o0);
                    let (mut yu, mut yv) = (0.0, 0.0);
                    for o in rows.clone() {
                        yu += data.slopes[(o, u)] * x[o];
                        yv += data.slopes[(o, v)] * x[o];
                    }
                    for o in rows {
                        out[o] = if u == v {
                            data.slopes[(o, u)] * yu
                        } else {
                            data.slopes[(o, u)] * yv + data.slopes[(o, v)] * yu
                        };
                    }
                }
                out
            }
        }
    }

    /// `Sigma x` without forming `Sigma`.
    pub fn sigma_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let data = self.data;
        let t = data.subject_sums(x);
        let mut g = DVector::zeros(t.len());
        for (k, tau) in self.vc.tau.iter().enumerate() {
            g += self.kernels.mul(k, &t) * *tau;
        }
        let mut out = data.expand_subjects(&g);
        let r = data.n_slopes();
        for s in 0..data.n_subjects() {
            let rows = data.rows_of(s);
            let z = data.slopes.view((rows.start, 0), (rows.len(), r));
            let xs = x.rows(rows.start, rows.len());
            let v = z * (&self.d_mat * (z.transpose() * xs));
            let mut os = out.rows_mut(rows.start, rows.len());
            os += v;
        }
        for o in 0..x.len() {
            out[o] += x[o] / self.w[o];
        }
        out
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
}

/// `R_i = Z_i D Z_i' + W_i^-1`.
fn r_block(data: &LongitudinalDataset, d: &DMatrix<f64>, w: &DVector<f64>, s: usize) -> DMatrix<f64> {
    let rows = data.rows_of(s);
    let r = data.n_slopes();
    let z = data.slopes.view((rows.start, 0), (rows.len(), r));
    let mut rb = z * d * z.transpose();
    for (a, o) in rows.enumerate() {
        rb[(a, a)] += 1.0 / w[o];
    }
    rb
}

/// Assembled `n x n` covariance.
pub fn dense_sigma(
    data: &LongitudinalDataset,
    kernels: &Kernels,
    vc: &VarianceComponents,
    w: &DVector<f64>,
) -> DMatrix<f64> {
    let n = data.n_obs();
    let mut g = DMatrix::zeros(kernels.n_subjects, kernels.n_subjects);
    for (k, t) in vc.tau.iter().enumerate() {
        g += kernels.dense(k) * *t;
    }
    let d = vc.d_matrix();
    let mut sigma = DMatrix::from_fn(n, n, |i, j| g[(data.subject_of[i], data.subject_of[j])]);
    for s in 0..data.n_subjects() {
        let rows = data.rows_of(s);
        let rb = r_block(data, &d, w, s);
        let mut view = sigma.view_mut((rows.start, rows.start), (rows.len(), rows.len()));
        view += rb;
    }
    sigma
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::DatasetParts;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spd(rng: &mut ChaCha8Rng, k: usize, ridge: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(k, k, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(k, k) * ridge
    }

    /// Random longitudinal instance with `r` random effects (intercept first).
    pub(crate) fn random_instance(
        seed: u64,
        m: usize,
        max_visits: usize,
        r: usize,
    ) -> (LongitudinalDataset, Kernels, VarianceComponents, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visits: Vec<usize> = (0..m).map(|_| rng.random_range(1..=max_visits)).collect();
        let subject_of: Vec<usize> = visits
            .iter()
            .enumerate()
            .flat_map(|(s, &k)| std::iter::repeat_n(s, k))
            .collect();
        let n = subject_of.len();
        let slopes = DMatrix::from_fn(n, r, |_, k| if k == 0 { 1.0 } else { rng.random::<f64>() * 2.0 - 1.0 });
        let covariates = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.random::<f64>() });
        let data = LongitudinalDataset::new(DatasetParts {
            subject_ids: (0..m).map(|i| format!("s{i}")).collect(),
            subject_of,
            visit: None,
            y: DVector::from_fn(n, |_, _| rng.random::<f64>() * 3.0),
            covariates,
            covariate_names: vec!["intercept".into(), "x".into()],
            genotypes: DMatrix::zeros(m, 0),
            variant_ids: vec![],
            slopes,
            slope_names: (0..r).map(|k| format!("z{k}")).collect(),
            weights: None,
        })
        .unwrap();
        let v = random_spd(&mut rng, m, 0.3) / m as f64 * 4.0;
        let kernels = Kernels::from_dense(vec![v]);
        let d = random_spd(&mut rng, r, 0.2);
        let vc = VarianceComponents::new(vec![0.3 + rng.random::<f64>()], &d, 0.5 + rng.random::<f64>());
        let w = DVector::from_fn(n, |_, _| (0.5 + rng.random::<f64>()) / vc.phi);
        (data, kernels, vc, w)
    }

    #[test]
    fn inverse_matches_dense() {
        for seed in 0..10 {
            let (data, kernels, vc, w) = random_instance(seed, 6, 4, 2);
            let ops = SigmaOps::new(&data, &kernels, &vc, &w).unwrap();
            assert!(!ops.is_dense_fallback());
            let sigma = dense_sigma(&data, &kernels, &vc, &w);
            let x = DVector::from_fn(data.n_obs(), |i, _| (i as f64 * 0.37).sin());
            let expect = sigma.clone().cholesky().unwrap().solve(&x);
            let got = ops.apply_inverse(&x);
            assert!((&got - &expect).norm() <= 1e-8 * expect.norm());
            let back = ops.sigma_mul(&got);
            assert!((back - &x).norm() <= 1e-8 * x.norm());
            let ld = chol_logdet(&sigma.cholesky().unwrap());
            assert!((ops.logdet() - ld).abs() < 1e-8);
        }
    }

    #[test]
    fn sigma_times_unit_vector_recovers_it() {
        let (data, kernels, vc, w) = random_instance(3, 8, 3, 3);
        let ops = SigmaOps::new(&data, &kernels, &vc, &w).unwrap();
        let sigma = dense_sigma(&data, &kernels, &vc, &w);
        let k = 5;
        let got = ops.apply_inverse(&sigma.column(k).into_owned());
        let mut e = DVector::zeros(data.n_obs());
        e[k] = 1.0;
        assert!((got - e).norm() < 1e-8);
    }

    #[test]
    fn vanishing_tau_is_blockwise_r_inverse() {
        let (data, kernels, mut vc, w) = random_instance(4, 5, 3, 2);
        vc.tau = vec![0.0];
        let ops = SigmaOps::new(&data, &kernels, &vc, &w).unwrap();
        let x = DVector::from_fn(data.n_obs(), |i, _| 1.0 + i as f64);
        let got = ops.apply_inverse(&x);
        let d = vc.d_matrix();
        for s in 0..data.n_subjects() {
            let rows = data.rows_of(s);
            let rb = r_block(&data, &d, &w, s);
            let expect = rb.cholesky().unwrap().solve(&x.rows(rows.start, rows.len()).into_owned());
            assert!((got.rows(rows.start, rows.len()) - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn dense_fallback_agrees() {
        let (data, kernels, vc, w) = random_instance(5, 6, 3, 2);
        let a = SigmaOps::new(&data, &kernels, &vc, &w).unwrap();
        let b = SigmaOps::dense(&data, &kernels, &vc, &w).unwrap();
        let x = DVector::from_fn(data.n_obs(), |i, _| (i as f64).cos());
        assert!((a.apply_inverse(&x) - b.apply_inverse(&x)).norm() < 1e-9);
        assert!((a.logdet() - b.logdet()).abs() < 1e-9);
        for (qa, qb) in a.lt_inv_l().iter().zip(b.lt_inv_l()) {
            assert!((qa - qb).abs().max() < 1e-9);
        }
        for (pa, pb) in a.inverse_subject_blocks().iter().zip(b.inverse_subject_blocks()) {
            assert!((pa - pb).abs().max() < 1e-9);
        }
    }

    #[test]
    fn determinant_identity_over_random_effects() {
        let (data, kernels, vc, w) = random_instance(6, 5, 3, 2);
        let ops = SigmaOps::new(&data, &kernels, &vc, &w).unwrap();
        let h = crate::model::assemble_h(&data).to_dense();
        let m = data.n_subjects();
        let r = data.n_slopes();
        let q = m * (r + 1);
        let mut prior = DMatrix::zeros(q, q);
        prior.view_mut((0, 0), (m, m)).copy_from(&(kernels.dense(0) * vc.tau[0]));
        let d = vc.d_matrix();
        for k in 0..r {
            for l in 0..r {
                for s in 0..m {
                    prior[(m * (k + 1) + s, m * (l + 1) + s)] = d[(k, l)];
                }
            }
        }
        let lhs = ops.logdet() + w.iter().map(|x| x.ln()).sum::<f64>();
        let inner = &prior * h.transpose() * DMatrix::from_diagonal(&w) * &h + DMatrix::identity(q, q);
        let rhs = inner.determinant().ln();
        assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
    }

    #[test]
    fn derivative_products_match_finite_differences() {
        let (data, kernels, vc, w) = random_instance(7, 5, 3, 2);
        let layout = ParamLayout::new(true, 1, 2, false);
        let ops = SigmaOps::new(&data, &kernels, &vc, &w).unwrap();
        let x = DVector::from_fn(data.n_obs(), |i, _| (i as f64 * 0.7).sin());
        let theta = layout.pack(&vc);
        let h = 1e-6;
        for (j, &c) in layout.components.iter().enumerate() {
            let eval = |t: f64| {
                let mut th = theta.clone();
                th[j] += t;
                let v = layout.unpack(&vc, &th);
                // weights scale as 1/phi
                let wv = &w * (vc.phi / v.phi);
                dense_sigma(&data, &kernels, &v, &wv) * &x
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let got = ops.dsigma_mul(c, &x);
            assert!((&fd - &got).norm() < 1e-6 * (1.0 + got.norm()), "{c:?}");
        }
    }

    #[test]
    fn layout_orders_parameters() {
        let l = ParamLayout::new(true, 1, 3, false);
        assert_eq!(
            l.names(),
            ["phi", "tau_1", "psi_1", "psi_2", "psi_3", "psi_4", "psi_5", "psi_6"]
        );
        assert_eq!(l.components[3], Component::Psi(0, 1));
        assert_eq!(ParamLayout::new(false, 2, 2, true).len(), 4);
    }
}
