//! Packed biallelic genotype triplets (`.bed` / `.bim` / `.fam`) and
//! genotype standardization.
//!
//! The binary file starts with the magic bytes `6C 1B` and the variant-major
//! mode byte `01`. Each variant occupies `ceil(m / 4)` bytes; every byte holds
//! four samples, lowest bit pair first:
//!
//! | code | meaning                    |
//! |------|----------------------------|
//! | `00` | two copies of allele 1     |
//! | `01` | missing                    |
//! | `10` | heterozygous               |
//! | `11` | zero copies of allele 1    |
//!
//! Calls are stored as minor-allele counts: when allele 1 is the major allele
//! the variant is flipped and the flip is remembered so that writing the
//! matrix back produces the original bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 2] = [0x6C, 0x1B];
pub const MODE_VARIANT_MAJOR: u8 = 0x01;
pub const MISSING: u8 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub chrom: String,
    pub id: String,
    pub cm: f64,
    pub pos: u64,
    pub allele1: String,
    pub allele2: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub family_id: String,
    pub id: String,
    pub father: String,
    pub mother: String,
    pub sex: String,
    pub phenotype: String,
}

impl SampleRecord {
    pub fn unrelated(id: impl Into<String>) -> Self {
        let id = id.into();
        SampleRecord {
            family_id: id.clone(),
            id,
            father: "0".into(),
            mother: "0".into(),
            sex: "0".into(),
            phenotype: "-9".into(),
        }
    }
}

/// Variant-major matrix of minor-allele counts (0, 1, 2 or [`MISSING`]).
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    pub samples: Vec<SampleRecord>,
    pub variants: Vec<VariantRecord>,
    calls: Vec<u8>,
    flipped: Vec<bool>,
    pub maf: Vec<f64>,
}

impl GenotypeMatrix {
    /// Builds a matrix from allele-1 counts (variant-major, `MISSING` for
    /// no-calls), orienting every variant to its minor allele.
    pub fn from_allele1_counts(
        samples: Vec<SampleRecord>,
        variants: Vec<VariantRecord>,
        allele1_counts: Vec<u8>,
    ) -> Result<Self> {
        let m = samples.len();
        let p = variants.len();
        if allele1_counts.len() != m * p {
            return Err(Error::Invalid(format!(
                "expected {} calls for {m} samples x {p} variants, got {}",
                m * p,
                allele1_counts.len()
            )));
        }
        if let Some(bad) = allele1_counts.iter().find(|&&c| c > MISSING) {
            return Err(Error::Invalid(format!("invalid genotype code {bad}")));
        }
        let mut calls = allele1_counts;
        let mut flipped = vec![false; p];
        let mut maf = vec![0.0; p];
        for j in 0..p {
            let row = &mut calls[j * m..(j + 1) * m];
            let (sum, called) = row
                .iter()
                .filter(|&&c| c != MISSING)
                .fold((0u64, 0u64), |(s, k), &c| (s + c as u64, k + 1));
            if called == 0 {
                continue;
            }
            let freq = sum as f64 / (2 * called) as f64;
            if freq > 0.5 {
                flipped[j] = true;
                for c in row.iter_mut().filter(|c| **c != MISSING) {
                    *c = 2 - *c;
                }
                maf[j] = 1.0 - freq;
            } else {
                maf[j] = freq;
            }
        }
        Ok(GenotypeMatrix {
            samples,
            variants,
            calls,
            flipped,
            maf,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_variants(&self) -> usize {
        self.variants.len()
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn variant_ids(&self) -> Vec<String> {
        self.variants.iter().map(|v| v.id.clone()).collect()
    }

    /// Minor-allele count, `None` when missing.
    pub fn get(&self, sample: usize, variant: usize) -> Option<u8> {
        let c = self.calls[variant * self.n_samples() + sample];
        (c != MISSING).then_some(c)
    }

    pub fn variant_calls(&self, variant: usize) -> &[u8] {
        let m = self.n_samples();
        &self.calls[variant * m..(variant + 1) * m]
    }

    pub fn is_flipped(&self, variant: usize) -> bool {
        self.flipped[variant]
    }

    fn allele1_count(&self, sample: usize, variant: usize) -> u8 {
        let c = self.calls[variant * self.n_samples() + sample];
        if c == MISSING || !self.flipped[variant] {
            c
        } else {
            2 - c
        }
    }

    /// Keeps the listed samples, in the given order.
    pub fn select_samples(&self, idx: &[usize]) -> Result<Self> {
        let m = self.n_samples();
        let mut counts = Vec::with_capacity(idx.len() * self.n_variants());
        for j in 0..self.n_variants() {
            for &i in idx {
                if i >= m {
                    return Err(Error::Invalid(format!("sample index {i} out of range")));
                }
                counts.push(self.allele1_count(i, j));
            }
        }
        let samples = idx.iter().map(|&i| self.samples[i].clone()).collect();
        Self::from_allele1_counts(samples, self.variants.clone(), counts)
    }
}

fn code_to_allele1(code: u8) -> u8 {
    match code & 0b11 {
        0b00 => 2,
        0b01 => MISSING,
        0b10 => 1,
        _ => 0,
    }
}

fn allele1_to_code(count: u8) -> u8 {
    match count {
        2 => 0b00,
        1 => 0b10,
        0 => 0b11,
        _ => 0b01,
    }
}

/// Decodes one variant's bytes into allele-1 counts for `m` samples.
pub fn decode_variant(bytes: &[u8], m: usize) -> Vec<u8> {
    (0..m)
        .map(|i| code_to_allele1(bytes[i / 4] >> (2 * (i % 4))))
        .collect()
}

/// Encodes allele-1 counts; pad bits of the last byte are zero.
pub fn encode_variant(counts: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; counts.len().div_ceil(4)];
    for (i, &c) in counts.iter().enumerate() {
        out[i / 4] |= allele1_to_code(c) << (2 * (i % 4));
    }
    out
}

pub fn bed_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "bed")
}

pub fn bim_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "bim")
}

pub fn fam_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "fam")
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_bim(path: &Path) -> Result<Vec<VariantRecord>> {
    let name = path.display().to_string();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::parse(&name, row + 1, format!("expected 6 columns, found {}", f.len())));
        }
        let cm = f[2]
            .parse()
            .map_err(|_| Error::parse(&name, row + 1, format!("bad genetic distance `{}`", f[2])))?;
        let pos = f[3]
            .parse()
            .map_err(|_| Error::parse(&name, row + 1, format!("bad position `{}`", f[3])))?;
        out.push(VariantRecord {
            chrom: f[0].into(),
            id: f[1].into(),
            cm,
            pos,
            allele1: f[4].into(),
            allele2: f[5].into(),
        });
    }
    Ok(out)
}

fn read_fam(path: &Path) -> Result<Vec<SampleRecord>> {
    let name = path.display().to_string();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (row, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::parse(&name, row + 1, format!("expected 6 columns, found {}", f.len())));
        }
        out.push(SampleRecord {
            family_id: f[0].into(),
            id: f[1].into(),
            father: f[2].into(),
            mother: f[3].into(),
            sex: f[4].into(),
            phenotype: f[5].into(),
        });
    }
    Ok(out)
}

/// Parses a packed genotype triplet at `<prefix>.bed/.bim/.fam`.
pub fn read_packed_genotypes(prefix: impl AsRef<Path>) -> Result<GenotypeMatrix> {
    let prefix = prefix.as_ref();
    let variants = read_bim(&bim_path(prefix))?;
    let samples = read_fam(&fam_path(prefix))?;
    let bed = bed_path(prefix);
    let bytes = fs::read(&bed).map_err(|e| Error::io(&bed, e))?;
    let counts = parse_bed_bytes(&bed, &bytes, samples.len(), variants.len())?;
    GenotypeMatrix::from_allele1_counts(samples, variants, counts)
}

/// Validates the header and payload size and returns allele-1 counts.
pub fn parse_bed_bytes(path: &Path, bytes: &[u8], m: usize, p: usize) -> Result<Vec<u8>> {
    if bytes.len() < 2 || bytes[..2] != MAGIC {
        let mut found = [0u8; 2];
        for (d, s) in found.iter_mut().zip(bytes) {
            *d = *s;
        }
        return Err(Error::BadMagic {
            path: path.into(),
            found,
        });
    }
    if bytes.len() < 3 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 3,
            found: bytes.len() as u64,
        });
    }
    if bytes[2] != MODE_VARIANT_MAJOR {
        return Err(Error::BadMode {
            path: path.into(),
            mode: bytes[2],
        });
    }
    let stride = m.div_ceil(4);
    let expected = (p * stride + 3) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut counts = Vec::with_capacity(m * p);
    for j in 0..p {
        let start = 3 + j * stride;
        counts.extend(decode_variant(&bytes[start..start + stride], m));
    }
    Ok(counts)
}

/// Serializes the `.bed` payload, including the three header bytes.
pub fn bed_bytes(gm: &GenotypeMatrix) -> Vec<u8> {
    let m = gm.n_samples();
    let mut out = Vec::with_capacity(3 + gm.n_variants() * m.div_ceil(4));
    out.extend_from_slice(&MAGIC);
    out.push(MODE_VARIANT_MAJOR);
    for j in 0..gm.n_variants() {
        let counts: Vec<u8> = (0..m).map(|i| gm.allele1_count(i, j)).collect();
        out.extend(encode_variant(&counts));
    }
    out
}

pub fn write_packed_genotypes(prefix: impl AsRef<Path>, gm: &GenotypeMatrix) -> Result<()> {
    let prefix = prefix.as_ref();
    let bed = bed_path(prefix);
    fs::write(&bed, bed_bytes(gm)).map_err(|e| Error::io(&bed, e))?;

    let bim = bim_path(prefix);
    let mut text = String::new();
    for v in &gm.variants {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            v.chrom, v.id, v.cm, v.pos, v.allele1, v.allele2
        ));
    }
    write_text(&bim, &text)?;

    let fam = fam_path(prefix);
    let mut text = String::new();
    for s in &gm.samples {
        text.push_str(&format!(
            "{} {} {} {} {} {}\n",
            s.family_id, s.id, s.father, s.mother, s.sex, s.phenotype
        ));
    }
    write_text(&fam, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Variance convention used to scale genotype columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleConvention {
    /// Divide by the number of samples.
    #[default]
    Population,
    /// Divide by the number of samples minus one.
    Sample,
    /// `sqrt(2 f (1 - f))` from the allele frequency.
    Binomial,
}

#[derive(Debug, Clone)]
pub struct Standardized {
    /// `m x p` standardized matrix.
    pub matrix: DMatrix<f64>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub monomorphic: Vec<bool>,
}

/// Mean-imputes, centers and scales every variant.
///
/// Monomorphic and all-missing variants become zero columns and are flagged.
pub fn standardize(gm: &GenotypeMatrix, convention: ScaleConvention) -> Standardized {
    let m = gm.n_samples();
    let p = gm.n_variants();
    let mut matrix = DMatrix::zeros(m, p);
    let mut means = vec![0.0; p];
    let mut scales = vec![0.0; p];
    let mut monomorphic = vec![false; p];
    for j in 0..p {
        let calls = gm.variant_calls(j);
        let called: Vec<f64> = calls
            .iter()
            .filter(|&&c| c != MISSING)
            .map(|&c| c as f64)
            .collect();
        if called.is_empty() {
            monomorphic[j] = true;
            continue;
        }
        let mean = called.iter().sum::<f64>() / called.len() as f64;
        // imputed entries sit at the mean and contribute nothing to the sum of squares
        let ss: f64 = called.iter().map(|x| (x - mean).powi(2)).sum();
        let scale = match convention {
            ScaleConvention::Population => (ss / m as f64).sqrt(),
            ScaleConvention::Sample => (ss / (m.max(2) - 1) as f64).sqrt(),
            ScaleConvention::Binomial => {
                let f = mean / 2.0;
                (2.0 * f * (1.0 - f)).sqrt()
            }
        };
        means[j] = mean;
        scales[j] = scale;
        if !(scale > 1e-12) {
            monomorphic[j] = true;
            continue;
        }
        for (i, &c) in calls.iter().enumerate() {
            if c != MISSING {
                matrix[(i, j)] = (c as f64 - mean) / scale;
            }
        }
    }
    Standardized {
        matrix,
        means,
        scales,
        monomorphic,
    }
}

/// Mean-imputed dosage matrix (`m x p`) on the minor-allele count scale.
pub fn imputed_dosages(gm: &GenotypeMatrix) -> DMatrix<f64> {
    let m = gm.n_samples();
    let mut out = DMatrix::zeros(m, gm.n_variants());
    for j in 0..gm.n_variants() {
        let calls = gm.variant_calls(j);
        let (sum, k) = calls
            .iter()
            .filter(|&&c| c != MISSING)
            .fold((0.0, 0usize), |(s, k), &c| (s + c as f64, k + 1));
        let mean = if k > 0 { sum / k as f64 } else { 0.0 };
        for (i, &c) in calls.iter().enumerate() {
            out[(i, j)] = if c == MISSING { mean } else { c as f64 };
        }
    }
    out
}
