//! Precision-recall along a path, relative bias of variance components across
//! replicates, and a single-variant score test against the null fit.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::model::LongitudinalDataset;
use crate::null_fit::{refit_context, NullFitResult, Projector};
use crate::penalized::LassoPath;
use crate::sigma::Kernels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub index: usize,
    pub lambda: f64,
    pub df: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub n_causal: usize,
    /// One point per path entry with a nonempty active set, ordered by df.
    pub points: Vec<PrPoint>,
}

pub fn pr_curve(path: &LassoPath, causal_ids: &[String]) -> Result<PrCurve> {
    let index: HashMap<&str, usize> = path.variant_ids.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let causal: HashSet<usize> = causal_ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("causal variant `{id}` is not on the path")))
        })
        .collect::<Result<_>>()?;
    if causal.is_empty() {
        return Err(Error::Invalid("empty causal set".into()));
    }
    let mut points: Vec<PrPoint> = path
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.active.is_empty())
        .map(|(i, e)| {
            let tp = e.active.iter().filter(|j| causal.contains(j)).count();
            PrPoint {
                index: i,
                lambda: e.lambda,
                df: e.active.len(),
                true_positives: tp,
                precision: tp as f64 / e.active.len() as f64,
                recall: tp as f64 / causal.len() as f64,
            }
        })
        .collect();
    points.sort_by_key(|p| (p.df, p.index));
    Ok(PrCurve {
        n_causal: causal.len(),
        points,
    })
}

impl PrCurve {
    /// Largest precision reached at recall at least `r`; 0 when never reached.
    pub fn interpolated_precision(&self, r: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.recall >= r - 1e-12)
            .map(|p| p.precision)
            .fold(0.0, f64::max)
    }

    pub fn interpolate(&self, grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&r| self.interpolated_precision(r)).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("index\tlambda\tdf\ttrue_positives\tprecision\trecall\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{}\t{:e}\t{}\t{}\t{}\t{}",
                p.index, p.lambda, p.df, p.true_positives, p.precision, p.recall
            );
        }
        out
    }
}

pub fn recall_grid(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub recall: f64,
    pub mean: f64,
    pub normal_lo: f64,
    pub normal_hi: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Interpolated-precision band across replicate curves.
pub fn pr_band(curves: &[PrCurve], grid: &[f64]) -> Result<Vec<BandPoint>> {
    if curves.len() < 2 {
        return Err(Error::Invalid("a band needs at least two curves".into()));
    }
    Ok(grid
        .iter()
        .map(|&r| {
            let vals: Vec<f64> = curves.iter().map(|c| c.interpolated_precision(r)).collect();
            let (mean, sd) = mean_sd(&vals);
            let se = sd / (vals.len() as f64).sqrt();
            let s = sorted(&vals);
            BandPoint {
                recall: r,
                mean,
                normal_lo: mean - 1.96 * se,
                normal_hi: mean + 1.96 * se,
                q025: quantile_sorted(&s, 0.025),
                q975: quantile_sorted(&s, 0.975),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBias {
    pub name: String,
    pub truth: f64,
    pub relative_bias: Vec<f64>,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub iqr: f64,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub params: Vec<ParamBias>,
    /// Parameters with zero truth, for which relative bias is undefined.
    pub excluded: Vec<String>,
}

/// Relative bias `(estimate - truth) / truth` per parameter across replicates.
pub fn bias_report(names: &[String], estimates: &[Vec<f64>], truth: &[f64]) -> Result<BiasReport> {
    if estimates.len() < 2 {
        return Err(Error::Invalid("bias report needs at least two replicates".into()));
    }
    if truth.len() != names.len() || estimates.iter().any(|e| e.len() != names.len()) {
        return Err(Error::Invalid("estimate, truth and name lengths differ".into()));
    }
    let mut params = Vec::new();
    let mut excluded = Vec::new();
    for (j, name) in names.iter().enumerate() {
        if truth[j] == 0.0 {
            excluded.push(name.clone());
            continue;
        }
        let rel: Vec<f64> = estimates.iter().map(|e| (e[j] - truth[j]) / truth[j]).collect();
        let s = sorted(&rel);
        let (mean, sd) = mean_sd(&rel);
        let (q25, q75) = (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.75));
        params.push(ParamBias {
            name: name.clone(),
            truth: truth[j],
            median: quantile_sorted(&s, 0.5),
            q25,
            q75,
            iqr: q75 - q25,
            mean,
            sd,
            relative_bias: rel,
        });
    }
    Ok(BiasReport { params, excluded })
}

impl BiasReport {
    pub fn get(&self, name: &str) -> Option<&ParamBias> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("parameter\ttruth\tmedian\tq25\tq75\tiqr\tmean\tsd\treplicates\n");
        for p in &self.params {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                p.name,
                p.truth,
                p.median,
                p.q25,
                p.q75,
                p.iqr,
                p.mean,
                p.sd,
                p.relative_bias.len()
            );
        }
        for name in &self.excluded {
            let _ = writeln!(out, "{name}\t0\tNA\tNA\tNA\tNA\tNA\tNA\t0");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    /// `None` when `g' P g <= 0`.
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
}

/// `T = (g' P y)^2 / (g' P g)` for each subject-level column of `g`, with
/// chi-square(1) p-values.
pub fn score_test(
    null: &NullFitResult,
    data: &LongitudinalDataset,
    kernels: &Kernels,
    g: &DMatrix<f64>,
) -> Result<Vec<ScoreResult>> {
    if g.nrows() != data.n_subjects() {
        return Err(Error::Invalid(format!(
            "variant panel has {} rows for {} subjects",
            g.nrows(),
            data.n_subjects()
        )));
    }
    if !null.converged {
        log::warn!("score test on a null fit that did not converge");
    }
    let (ops, x, y) = refit_context(null, data, kernels)?;
    let proj = Projector::new(&ops, &x)?;
    let py = proj.apply(&y);
    let py_s = data.subject_sums(&py);
    let chi = ChiSquared::new(1.0).expect("valid df");
    let cols: Vec<usize> = (0..g.ncols()).collect();
    Ok(cols
        .par_iter()
        .map(|&j| {
            let gs = g.column(j).into_owned();
            let go = data.expand_subjects(&gs);
            let num = gs.dot(&py_s);
            let den = go.dot(&proj.apply(&go));
            if !(den > 1e-12 * go.norm_squared().max(1e-300)) {
                return ScoreResult {
                    statistic: None,
                    p_value: None,
                };
            }
            let t = num * num / den;
            ScoreResult {
                statistic: Some(t),
                p_value: Some(chi.sf(t)),
            }
        })
        .collect())
}

pub fn score_table(ids: &[String], results: &[ScoreResult]) -> String {
    let mut out = String::from("variant\tstatistic\tp_value\n");
    for (id, r) in ids.iter().zip(results) {
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:e}"));
        let _ = writeln!(out, "{id}\t{}\t{}", f(r.statistic), f(r.p_value));
    }
    out
}
