//! Delimited longitudinal phenotype tables and their join with genotypes.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genotype::{imputed_dosages, GenotypeMatrix};
use crate::model::{DatasetParts, LongitudinalDataset};

/// Column roles of a phenotype table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhenotypeSchema {
    pub id_column: String,
    pub visit_column: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    /// Random-slope covariates; a column of ones is prepended when
    /// `random_intercept` is set.
    pub slopes: Vec<String>,
    pub random_intercept: bool,
    pub weight: Option<String>,
}

impl Default for PhenotypeSchema {
    fn default() -> Self {
        PhenotypeSchema {
            id_column: "id".into(),
            visit_column: "visit".into(),
            outcome: "y".into(),
            covariates: Vec::new(),
            slopes: Vec::new(),
            random_intercept: true,
            weight: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeRow {
    pub sample_id: String,
    pub visit: f64,
    pub outcome: f64,
    pub covariates: Vec<f64>,
    pub slopes: Vec<f64>,
    pub weight: f64,
    /// 1-based line number in the source file.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeTable {
    pub covariate_names: Vec<String>,
    pub slope_names: Vec<String>,
    pub rows: Vec<PhenotypeRow>,
}

pub fn detect_delimiter(header: &str) -> char {
    if header.contains('\t') {
        '\t'
    } else {
        ','
    }
}

pub fn read_phenotypes(path: impl AsRef<Path>, schema: &PhenotypeSchema) -> Result<PhenotypeTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_phenotypes(&path.display().to_string(), &text, schema)
}

pub fn parse_phenotypes(name: &str, text: &str, schema: &PhenotypeSchema) -> Result<PhenotypeTable> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(name, 1, "missing header row"))?;
    let header = header.trim_start_matches('\u{feff}');
    let delim = detect_delimiter(header);
    let columns: Vec<&str> = header.split(delim).map(str::trim).collect();
    let find = |col: &str| {
        columns
            .iter()
            .position(|c| *c == col)
            .ok_or_else(|| Error::parse(name, 1, format!("column `{col}` not found in header")))
    };
    let id_col = find(&schema.id_column)?;
    let visit_col = find(&schema.visit_column)?;
    let y_col = find(&schema.outcome)?;
    let cov_cols = schema.covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let slope_cols = schema.slopes.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let w_col = schema.weight.as_deref().map(find).transpose()?;

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let row = idx + 1;
        let cells: Vec<&str> = line.split(delim).map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::parse(
                name,
                row,
                format!("expected {} cells, found {}", columns.len(), cells.len()),
            ));
        }
        let num = |col: usize| -> Result<f64> {
            cells[col]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::parse(
                        name,
                        row,
                        format!("non-numeric value `{}` in column `{}`", cells[col], columns[col]),
                    )
                })
        };
        let sample_id = cells[id_col].to_string();
        let visit = num(visit_col)?;
        if !seen.insert((sample_id.clone(), visit.to_bits())) {
            return Err(Error::parse(
                name,
                row,
                format!("duplicate (sample, visit) = ({sample_id}, {visit})"),
            ));
        }
        let weight = match w_col {
            Some(c) => {
                let w = num(c)?;
                if w <= 0.0 {
                    return Err(Error::parse(name, row, "prior weights must be positive"));
                }
                w
            }
            None => 1.0,
        };
        rows.push(PhenotypeRow {
            sample_id,
            visit,
            outcome: num(y_col)?,
            covariates: cov_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            slopes: slope_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            weight,
            line: row,
        });
    }
    if rows.is_empty() {
        return Err(Error::parse(name, 1, "table has no data rows"));
    }
    let mut slope_names = Vec::new();
    if schema.random_intercept {
        slope_names.push("(intercept)".to_string());
    }
    slope_names.extend(schema.slopes.iter().cloned());
    Ok(PhenotypeTable {
        covariate_names: schema.covariates.clone(),
        slope_names,
        rows,
    })
}

impl PhenotypeTable {
    fn random_intercept(&self) -> bool {
        self.slope_names.len() > self.rows.first().map_or(0, |r| r.slopes.len())
    }

    /// Subject ids in order of first appearance.
    pub fn sample_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.sample_id.clone()))
            .map(|r| r.sample_id.clone())
            .collect()
    }
}

/// Builds the stacked dataset.
///
/// Subjects follow genotype sample order (or first appearance when no
/// genotypes are supplied); visits are sorted ascending with ties kept in file
/// order. Genotypes are mean-imputed minor-allele dosages.
pub fn join(gm: Option<&GenotypeMatrix>, table: &PhenotypeTable) -> Result<LongitudinalDataset> {
    let order: Vec<String> = match gm {
        Some(gm) => {
            let geno_ids: HashMap<&str, usize> = gm
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| (s.id.as_str(), i))
                .collect();
            let present: HashSet<&str> = table.rows.iter().map(|r| r.sample_id.as_str()).collect();
            if !present.iter().any(|id| geno_ids.contains_key(id)) {
                return Err(Error::Invalid(
                    "no phenotype sample id matches a genotype sample id".into(),
                ));
            }
            if let Some(r) = table.rows.iter().find(|r| !geno_ids.contains_key(r.sample_id.as_str())) {
                return Err(Error::parse(
                    "phenotypes",
                    r.line,
                    format!("sample `{}` has no genotypes", r.sample_id),
                ));
            }
            gm.samples
                .iter()
                .filter(|s| present.contains(s.id.as_str()))
                .map(|s| s.id.clone())
                .collect()
        }
        None => table.sample_ids(),
    };
    let index: HashMap<&str, usize> = order.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut by_subject: Vec<Vec<&PhenotypeRow>> = vec![Vec::new(); order.len()];
    for r in &table.rows {
        by_subject[index[r.sample_id.as_str()]].push(r);
    }
    for rows in &mut by_subject {
        rows.sort_by(|a, b| a.visit.total_cmp(&b.visit));
    }
    let stacked: Vec<(usize, &PhenotypeRow)> = by_subject
        .iter()
        .enumerate()
        .flat_map(|(s, rows)| rows.iter().map(move |r| (s, *r)))
        .collect();
    let n = stacked.len();
    let c = table.covariate_names.len() + 1;
    let with_ri = table.random_intercept();
    let r = table.slope_names.len();
    let covariates = DMatrix::from_fn(n, c, |o, k| if k == 0 { 1.0 } else { stacked[o].1.covariates[k - 1] });
    let slopes = DMatrix::from_fn(n, r, |o, k| match (with_ri, k) {
        (true, 0) => 1.0,
        (true, k) => stacked[o].1.slopes[k - 1],
        (false, k) => stacked[o].1.slopes[k],
    });
    let (genotypes, variant_ids) = match gm {
        Some(gm) => {
            let pos: HashMap<&str, usize> = gm
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| (s.id.as_str(), i))
                .collect();
            let idx: Vec<usize> = order.iter().map(|id| pos[id.as_str()]).collect();
            let dos = imputed_dosages(gm);
            (
                DMatrix::from_fn(order.len(), gm.n_variants(), |s, j| dos[(idx[s], j)]),
                gm.variant_ids(),
            )
        }
        None => (DMatrix::zeros(order.len(), 0), Vec::new()),
    };
    let mut covariate_names = vec!["(intercept)".to_string()];
    covariate_names.extend(table.covariate_names.iter().cloned());
    LongitudinalDataset::new(DatasetParts {
        subject_ids: order,
        subject_of: stacked.iter().map(|(s, _)| *s).collect(),
        visit: Some(stacked.iter().map(|(_, r)| r.visit).collect()),
        y: DVector::from_iterator(n, stacked.iter().map(|(_, r)| r.outcome)),
        covariates,
        covariate_names,
        genotypes,
        variant_ids,
        slopes,
        slope_names: table.slope_names.clone(),
        weights: Some(DVector::from_iterator(n, stacked.iter().map(|(_, r)| r.weight))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::{SampleRecord, VariantRecord};

    fn schema() -> PhenotypeSchema {
        PhenotypeSchema {
            covariates: vec!["age".into()],
            slopes: vec!["age".into()],
            ..Default::default()
        }
    }

    fn geno(ids: &[&str], p: usize) -> GenotypeMatrix {
        let variants = (0..p)
            .map(|j| VariantRecord {
                chrom: "1".into(),
                id: format!("v{j}"),
                cm: 0.0,
                pos: j as u64,
                allele1: "A".into(),
                allele2: "C".into(),
            })
            .collect();
        let samples = ids.iter().map(|s| SampleRecord::unrelated(*s)).collect();
        let counts = (0..ids.len() * p).map(|k| (k % 3) as u8).collect();
        GenotypeMatrix::from_allele1_counts(samples, variants, counts).unwrap()
    }

    #[test]
    fn join_replicates_genotypes_per_visit() {
        let text = "id,visit,y,age\nb,2,1.0,5\na,1,0.5,4\nb,1,2.0,4\na,2,0.1,5\nb,3,1.5,6\n";
        let table = parse_phenotypes("t", text, &schema()).unwrap();
        let data = join(Some(&geno(&["a", "b"], 4)), &table).unwrap();
        assert_eq!(data.n_obs(), 5);
        let g = data.expanded_genotypes();
        assert_eq!(g.nrows(), 5);
        assert_eq!(g.row(0), g.row(1));
        assert_eq!(g.row(2), g.row(3));
        assert_eq!(g.row(3), g.row(4));
        assert_ne!(g.row(1), g.row(2));
        // subject b visits sorted ascending
        assert_eq!(&data.visit[2..], &[1.0, 2.0, 3.0]);
        assert_eq!(data.y[2], 2.0);
        // default weights
        assert!(data.weights.iter().all(|&w| w == 1.0));
        // random intercept column + age slope
        assert_eq!(data.slopes.ncols(), 2);
        assert!(data.slopes.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tab_delimited_is_detected() {
        let text = "id\tvisit\ty\tage\na\t1\t0.5\t4\n";
        let table = parse_phenotypes("t", text, &schema()).unwrap();
        assert_eq!(table.rows.len(), 1);
    }

    #[test]
    fn empty_intersection_is_an_error() {
        let text = "id,visit,y,age\nzz,1,0.5,4\n";
        let table = parse_phenotypes("t", text, &schema()).unwrap();
        assert!(join(Some(&geno(&["a", "b"], 1)), &table).is_err());
    }

    #[test]
    fn unknown_sample_reports_row() {
        let text = "id,visit,y,age\na,1,0.5,4\nzz,1,0.5,4\n";
        let table = parse_phenotypes("t", text, &schema()).unwrap();
        let err = join(Some(&geno(&["a", "b"], 1)), &table).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
    }

    #[test]
    fn duplicate_visit_reports_row() {
        let text = "id,visit,y,age\na,1,0.5,4\na,1,0.7,4\n";
        let err = parse_phenotypes("t", text, &schema()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let text = "id,visit,y,age\na,1,0.5,4\nb,1,NA,4\n";
        let err = parse_phenotypes("t", text, &schema()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
    }

    #[test]
    fn weight_column_is_used() {
        let s = PhenotypeSchema {
            weight: Some("w".into()),
            ..schema()
        };
        let text = "id,visit,y,age,w\na,1,0.5,4,2\n";
        let table = parse_phenotypes("t", text, &s).unwrap();
        let data = join(None, &table).unwrap();
        assert_eq!(data.weights[0], 2.0);
    }
}
