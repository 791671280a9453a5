//! Synthetic longitudinal datasets with causal variants, a polygenic
//! intercept, correlated subject random effects and population intercepts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{
    imputed_dosages, standardize, write_packed_genotypes, GenotypeMatrix, SampleRecord, ScaleConvention,
    VariantRecord,
};
use crate::grm::{build_grm, Grm};
use crate::linalg::cholesky_with_jitter;
use crate::model::{LongitudinalDataset, VarianceComponents};
use crate::penalized::standardize_columns;
use crate::phenotype::{join, PhenotypeRow, PhenotypeSchema, PhenotypeTable};

pub const TRUTH_STAGE: &str = "simulate";

pub fn default_d() -> Vec<Vec<f64>> {
    vec![vec![0.4, -0.2, 0.1], vec![-0.2, 0.5, 0.2], vec![0.1, 0.2, 0.3]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub m: usize,
    pub p: usize,
    pub n_causal: usize,
    pub h2_s: f64,
    pub h2_g: f64,
    /// Total phenotypic variance scaling the two heritability fractions.
    pub sigma2: f64,
    pub phi: f64,
    /// Covariance of (intercept, age slope, exposure slope).
    pub d_true: Vec<Vec<f64>>,
    pub n_populations: usize,
    pub pi0_range: (f64, f64),
    /// Balding-Nichols divergence of population allele frequencies.
    pub fst: f64,
    pub freq_range: (f64, f64),
    /// Siblings per family; 1 gives unrelated subjects.
    pub family_size: usize,
    /// Markers used only for the relatedness matrix.
    pub grm_markers: usize,
    pub max_visits: usize,
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_range: (f64, f64),
    pub binary: bool,
    pub prevalence: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            m: 300,
            p: 1000,
            n_causal: 20,
            h2_s: 0.1,
            h2_g: 0.2,
            sigma2: 2.0,
            phi: 1.0,
            d_true: default_d(),
            n_populations: 3,
            pi0_range: (0.1, 0.3),
            fst: 0.01,
            freq_range: (0.05, 0.5),
            family_size: 3,
            grm_markers: 10_000,
            max_visits: 5,
            age_mean: 10.0,
            age_sd: 3.0,
            age_range: (5.0, 16.0),
            binary: false,
            prevalence: 0.2,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.h2_s >= 0.0 && self.h2_g >= 0.0 && self.h2_s + self.h2_g < 1.0) {
            return bad(format!(
                "heritability fractions must satisfy 0 <= h2_s + h2_g < 1 (got h2_s={}, h2_g={})",
                self.h2_s, self.h2_g
            ));
        }
        if self.n_causal > self.p {
            return bad(format!("n_causal ({}) exceeds p ({})", self.n_causal, self.p));
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad(format!("prevalence must lie in (0, 1), got {}", self.prevalence));
        }
        if self.m == 0 || self.max_visits == 0 || self.n_populations == 0 || self.family_size == 0 {
            return bad("m, max_visits, n_populations and family_size must be positive".into());
        }
        if !(self.sigma2 > 0.0 && self.phi > 0.0) {
            return bad("sigma2 and phi must be positive".into());
        }
        if !(self.fst > 0.0 && self.fst < 1.0) {
            return bad(format!("fst must lie in (0, 1), got {}", self.fst));
        }
        let (lo, hi) = self.freq_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad("freq_range must satisfy 0 < lo <= hi <= 0.5".into());
        }
        let (lo, hi) = self.pi0_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad("pi0_range must lie inside (0, 1)".into());
        }
        if self.age_range.0 >= self.age_range.1 || !(self.age_sd > 0.0) {
            return bad("age_range must be increasing and age_sd positive".into());
        }
        if self.grm_markers == 0 {
            return bad("grm_markers must be positive".into());
        }
        self.d_matrix()?;
        Ok(())
    }

    pub fn d_matrix(&self) -> Result<DMatrix<f64>> {
        let r = self.d_true.len();
        if r != 3 || self.d_true.iter().any(|row| row.len() != r) {
            return Err(Error::Invalid("d_true must be a 3x3 matrix".into()));
        }
        let d = DMatrix::from_fn(r, r, |i, j| self.d_true[i][j]);
        if (&d - d.transpose()).amax() > 1e-12 || d.clone().cholesky().is_none() {
            return Err(Error::Invalid("d_true must be symmetric positive definite".into()));
        }
        Ok(d)
    }

    pub fn tau(&self) -> f64 {
        self.h2_g * self.sigma2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub stage: String,
    pub config: SimConfig,
    pub causal: Vec<usize>,
    pub causal_ids: Vec<String>,
    /// Effects per standardized genotype.
    pub beta: Vec<f64>,
    pub b0: Vec<f64>,
    /// Subject-major `m x 3` random effects.
    pub b1: Vec<Vec<f64>>,
    pub vc: VarianceComponents,
    pub populations: Vec<usize>,
    pub pi0: Vec<f64>,
    pub cutoff: Option<f64>,
}

impl SimTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }

    pub fn from_json(name: &str, bytes: &[u8]) -> Result<Self> {
        let found = crate::sniff_stage(bytes);
        if found != TRUTH_STAGE {
            return Err(Error::Schema {
                expected: TRUTH_STAGE.into(),
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
}

/// Sibling-structured genotypes for candidate and relatedness markers.
#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub candidates: GenotypeMatrix,
    pub grm_markers: GenotypeMatrix,
    pub grm: Grm,
    pub populations: Vec<usize>,
    pub families: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: LongitudinalDataset,
    pub table: PhenotypeTable,
    pub schema: PhenotypeSchema,
    pub truth: SimTruth,
    pub panel: SyntheticPanel,
}

fn subject_ids(m: usize) -> Vec<String> {
    let width = m.to_string().len().max(4);
    (0..m).map(|i| format!("s{:0width$}", i + 1)).collect()
}

fn draw_counts(
    rng: &mut ChaCha8Rng,
    n_loci: usize,
    families: &[(usize, usize)],
    config: &SimConfig,
) -> Result<Vec<u8>> {
    let m: usize = families.iter().map(|f| f.1).sum();
    let (lo, hi) = config.freq_range;
    let f = config.fst;
    let mut counts = vec![0u8; n_loci * m];
    for j in 0..n_loci {
        let anc = rng.random_range(lo..=hi);
        let mut freqs = Vec::with_capacity(config.n_populations);
        for _ in 0..config.n_populations {
            let beta = Beta::new(anc * (1.0 - f) / f, (1.0 - anc) * (1.0 - f) / f)
                .map_err(|e| Error::Invalid(e.to_string()))?;
            freqs.push(beta.sample(rng));
        }
        let row = &mut counts[j * m..(j + 1) * m];
        let mut s = 0;
        for &(pop, size) in families {
            let q = freqs[pop];
            let parents: [bool; 4] = std::array::from_fn(|_| rng.random::<f64>() < q);
            for _ in 0..size {
                let a = parents[rng.random_range(0..2)];
                let b = parents[2 + rng.random_range(0..2)];
                row[s] = a as u8 + b as u8;
                s += 1;
            }
        }
    }
    Ok(counts)
}

fn variant_records(prefix: &str, n: usize) -> Vec<VariantRecord> {
    (0..n)
        .map(|j| VariantRecord {
            chrom: "1".into(),
            id: format!("{prefix}{}", j + 1),
            cm: 0.0,
            pos: (j as u64 + 1) * 1000,
            allele1: "A".into(),
            allele2: "G".into(),
        })
        .collect()
}

/// Genotypes for `config.m` subjects in sibships of `family_size`, families
/// assigned to populations in turn.
pub fn synthetic_panel(config: &SimConfig, rng: &mut ChaCha8Rng) -> Result<SyntheticPanel> {
    let m = config.m;
    let n_fam = m.div_ceil(config.family_size);
    let fams: Vec<(usize, usize)> = (0..n_fam)
        .map(|f| (f % config.n_populations, config.family_size.min(m - f * config.family_size)))
        .collect();
    let ids = subject_ids(m);
    let mut populations = Vec::with_capacity(m);
    let mut families = Vec::with_capacity(m);
    for (f, &(pop, size)) in fams.iter().enumerate() {
        populations.extend(std::iter::repeat_n(pop, size));
        families.extend(std::iter::repeat_n(f, size));
    }
    let samples: Vec<SampleRecord> = ids
        .iter()
        .zip(&families)
        .map(|(id, f)| SampleRecord {
            family_id: format!("f{}", f + 1),
            ..SampleRecord::unrelated(id.clone())
        })
        .collect();
    let cand = draw_counts(rng, config.p, &fams, config)?;
    let markers = draw_counts(rng, config.grm_markers, &fams, config)?;
    let candidates = GenotypeMatrix::from_allele1_counts(samples.clone(), variant_records("rs", config.p), cand)?;
    let grm_markers =
        GenotypeMatrix::from_allele1_counts(samples, variant_records("gm", config.grm_markers), markers)?;
    let std = standardize(&grm_markers, ScaleConvention::Population);
    let grm = build_grm(&std.matrix, ids)?;
    Ok(SyntheticPanel {
        candidates,
        grm_markers,
        grm,
        populations,
        families,
    })
}

/// Threshold at the empirical `(1 - prevalence)` quantile: the
/// `round(prevalence n)` largest values map to 1.
pub fn binarize(y: &[f64], prevalence: f64) -> Result<(Vec<f64>, f64)> {
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return Err(Error::Invalid(format!("prevalence must lie in (0, 1), got {prevalence}")));
    }
    let n = y.len();
    if n < 2 || y.iter().all(|&v| v == y[0]) {
        return Err(Error::Invalid("cannot binarize a constant response".into()));
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((prevalence * n as f64).round() as usize).clamp(1, n - 1);
    let c = sorted[n - k - 1];
    Ok((y.iter().map(|&v| if v > c { 1.0 } else { 0.0 }).collect(), c))
}

pub fn phenotype_schema(n_populations: usize) -> PhenotypeSchema {
    let mut covariates = vec!["sex".to_string(), "age".to_string()];
    covariates.extend((2..=n_populations).map(|k| format!("pop_{k}")));
    PhenotypeSchema {
        covariates,
        slopes: vec!["age_std".into(), "exposure".into()],
        random_intercept: true,
        ..Default::default()
    }
}

/// Draws phenotypes for supplied genotypes and relatedness matrix.
pub fn simulate_dataset(
    config: &SimConfig,
    genotypes: &GenotypeMatrix,
    grm: &Grm,
    populations: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(LongitudinalDataset, PhenotypeTable, SimTruth)> {
    config.validate()?;
    let m = genotypes.n_samples();
    if grm.ids.len() != m || populations.len() != m || m != config.m {
        return Err(Error::Invalid(format!(
            "sample counts disagree: config {}, genotypes {m}, grm {}, populations {}",
            config.m,
            grm.ids.len(),
            populations.len()
        )));
    }
    if genotypes.sample_ids() != grm.ids {
        return Err(Error::Invalid("relatedness matrix ids differ from genotype sample ids".into()));
    }
    if genotypes.n_variants() != config.p {
        return Err(Error::Invalid(format!("expected {} candidate variants, got {}", config.p, genotypes.n_variants())));
    }
    if populations.iter().any(|&k| k >= config.n_populations) {
        return Err(Error::Invalid("population label out of range".into()));
    }
    let d = config.d_matrix()?;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    // fixed genetic effects on standardized dosages
    let (gstd, _, _, zero) = standardize_columns(&imputed_dosages(genotypes));
    let poly: Vec<usize> = (0..config.p).filter(|&j| !zero[j]).collect();
    if poly.len() < config.n_causal {
        return Err(Error::Invalid("too few polymorphic variants for the causal set".into()));
    }
    let mut causal: Vec<usize> = sample(rng, poly.len(), config.n_causal).into_iter().map(|i| poly[i]).collect();
    causal.sort_unstable();
    let beta_sd = if config.n_causal > 0 {
        (config.h2_s * config.sigma2 / config.n_causal as f64).sqrt()
    } else {
        0.0
    };
    let beta: Vec<f64> = causal.iter().map(|_| beta_sd * normal(rng)).collect();
    let mut genetic = DVector::zeros(m);
    for (&j, &b) in causal.iter().zip(&beta) {
        genetic += gstd.column(j) * b;
    }

    // polygenic intercept
    let tau = config.tau();
    let (chol, _) = cholesky_with_jitter(&grm.matrix)
        .ok_or_else(|| Error::Numerical("relatedness matrix cannot be factored".into()))?;
    let z0 = DVector::from_fn(m, |_, _| normal(rng));
    let b0 = chol.l() * z0 * tau.sqrt();

    let d_l = d.clone().cholesky().expect("validated").l();
    let pi0: Vec<f64> = (0..config.n_populations)
        .map(|_| rng.random_range(config.pi0_range.0..=config.pi0_range.1))
        .collect();
    let age_dist = Normal::new(config.age_mean, config.age_sd).map_err(|e| Error::Invalid(e.to_string()))?;
    let ids = genotypes.sample_ids();
    let mut rows = Vec::new();
    let mut b1 = Vec::with_capacity(m);
    let mut outcome = Vec::new();
    for s in 0..m {
        let sex = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let bi = &d_l * DVector::from_fn(3, |_, _| normal(rng));
        let mut ages: Vec<f64> = (0..config.max_visits)
            .map(|_| loop {
                let a = age_dist.sample(rng);
                if a >= config.age_range.0 && a <= config.age_range.1 {
                    break a;
                }
            })
            .collect();
        let keep = rng.random_range(1..=config.max_visits);
        let idx = sample(rng, config.max_visits, keep).into_vec();
        let mut kept: Vec<f64> = idx.iter().map(|&i| ages[i]).collect();
        kept.sort_by(f64::total_cmp);
        ages = kept;
        let k = populations[s];
        let intercept = (pi0[k] / (1.0 - pi0[k])).ln();
        for (v, &age) in ages.iter().enumerate() {
            let age_std = (age - config.age_mean) / config.age_sd;
            let exposure = normal(rng);
            let eps = config.phi.sqrt() * normal(rng);
            let y = intercept - 1.3f64.ln() * sex
                + 1.05f64.ln() * age
                + genetic[s]
                + b0[s]
                + bi[0]
                + age_std * bi[1]
                + exposure * bi[2]
                + eps;
            let mut covariates = vec![sex, age];
            covariates.extend((1..config.n_populations).map(|kk| if k == kk { 1.0 } else { 0.0 }));
            outcome.push(y);
            rows.push(PhenotypeRow {
                sample_id: ids[s].clone(),
                visit: (v + 1) as f64,
                outcome: y,
                covariates,
                slopes: vec![age_std, exposure],
                weight: 1.0,
                line: rows.len() + 2,
            });
        }
        b1.push(bi.iter().copied().collect());
    }
    let cutoff = if config.binary {
        let (y01, c) = binarize(&outcome, config.prevalence)?;
        for (r, v) in rows.iter_mut().zip(y01) {
            r.outcome = v;
        }
        Some(c)
    } else {
        None
    };
    let schema = phenotype_schema(config.n_populations);
    let table = PhenotypeTable {
        covariate_names: schema.covariates.clone(),
        slope_names: vec!["(intercept)".into(), "age_std".into(), "exposure".into()],
        rows,
    };
    let dataset = join(Some(genotypes), &table)?;
    let variant_ids = genotypes.variant_ids();
    let truth = SimTruth {
        stage: TRUTH_STAGE.into(),
        config: config.clone(),
        causal_ids: causal.iter().map(|&j| variant_ids[j].clone()).collect(),
        causal,
        beta,
        b0: b0.iter().copied().collect(),
        b1,
        vc: VarianceComponents::new(vec![tau], &d, config.phi),
        populations: populations.to_vec(),
        pi0,
        cutoff,
    };
    Ok((dataset, table, truth))
}

/// Full synthetic replicate determined by `config.seed`.
pub fn simulate(config: &SimConfig) -> Result<Simulation> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let panel = synthetic_panel(config, &mut rng)?;
    let (dataset, table, truth) =
        simulate_dataset(config, &panel.candidates, &panel.grm, &panel.populations, &mut rng)?;
    Ok(Simulation {
        dataset,
        table,
        schema: phenotype_schema(config.n_populations),
        truth,
        panel,
    })
}

pub fn phenotype_text(table: &PhenotypeTable, schema: &PhenotypeSchema) -> String {
    let mut out = format!("{}\t{}\t{}", schema.id_column, schema.visit_column, schema.outcome);
    for name in table.covariate_names.iter().chain(&schema.slopes) {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for r in &table.rows {
        let _ = write!(out, "{}\t{}\t{}", r.sample_id, r.visit, r.outcome);
        for v in r.covariates.iter().chain(&r.slopes) {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes `genotypes.{bed,bim,fam}`, `grm_markers.{bed,bim,fam}`,
/// `phenotypes.tsv`, `schema.toml` and `truth.json`.
pub fn write_simulation(dir: impl AsRef<Path>, sim: &Simulation) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_packed_genotypes(dir.join("genotypes"), &sim.panel.candidates)?;
    write_packed_genotypes(dir.join("grm_markers"), &sim.panel.grm_markers)?;
    let schema = toml::to_string(&sim.schema).map_err(|e| Error::Invalid(e.to_string()))?;
    for (name, body) in [
        ("phenotypes.tsv", phenotype_text(&sim.table, &sim.schema)),
        ("schema.toml", schema),
        ("truth.json", sim.truth.to_json()),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
