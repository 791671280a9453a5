//! C ABI over the pqlasso library.
//!
//! Objects are opaque handles released with their `*_free` function. Every
//! fallible call returns a [`PqStatus`]; the message of the most recent
//! failure on the calling thread is available from [`pq_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use nalgebra::DVector;
use pqlasso::genotype::read_packed_genotypes;
use pqlasso::grm::read_grm;
use pqlasso::model::{LinkFamily, LongitudinalDataset};
use pqlasso::null_fit::{fit_null, NullFitConfig, NullFitResult};
use pqlasso::penalized::{fit_path, fit_plain_lasso, predict, r2_mspe, LassoPath, PathConfig};
use pqlasso::phenotype::{join, read_phenotypes, PhenotypeSchema};
use pqlasso::sigma::Kernels;
use pqlasso::simulate::{simulate, write_simulation, SimConfig};
use pqlasso::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Schema = 5,
    Numerical = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

pub struct PqDataset(LongitudinalDataset);
pub struct PqKernels(Kernels);
pub struct PqNullFit(NullFitResult);
pub struct PqPath(LassoPath);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("interior nul removed"));
}

fn status_of(e: &Error) -> PqStatus {
    match e {
        Error::Io { .. } => PqStatus::Io,
        Error::BadMagic { .. } | Error::BadMode { .. } | Error::Truncated { .. } | Error::Parse { .. } => PqStatus::Parse,
        Error::Schema { .. } => PqStatus::Schema,
        Error::Invalid(_) | Error::RankDeficient { .. } => PqStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::NotPositiveDefinite { .. } | Error::Numerical(_) => PqStatus::Numerical,
    }
}

struct Fail(PqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PqStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PqStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PqStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(PqStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn obj<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(PqStatus::NullPointer, format!("`{name}` is null")))
}

fn out_ptr<T>(out: *mut *mut T) -> Result<(), Fail> {
    if out.is_null() {
        Err(Fail(PqStatus::NullPointer, "output pointer is null".into()))
    } else {
        Ok(())
    }
}

fn family(name: &str) -> Result<LinkFamily, Fail> {
    LinkFamily::parse(name).map_err(Fail::from)
}

/// Copies `src` to `dst` when it fits; `*needed` always receives `src.len()`.
unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize, needed: *mut usize) -> Result<(), Fail> {
    if !needed.is_null() {
        *needed = src.len();
    }
    if src.is_empty() {
        return Ok(());
    }
    if len < src.len() {
        return Err(Fail(
            PqStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    if dst.is_null() {
        return Err(Fail(PqStatus::NullPointer, "output buffer is null".into()));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn pq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Simulates a dataset into `out_dir`. `config_toml` holds simulation
/// settings as TOML text and may be null for defaults.
///
/// # Safety
/// String arguments must be null or nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn pq_simulate(config_toml: *const c_char, out_dir: *const c_char) -> PqStatus {
    guard(|| {
        let config: SimConfig = match opt_str_arg(config_toml, "config_toml")? {
            Some(t) => toml::from_str(t).map_err(|e| invalid(e.to_string()))?,
            None => SimConfig::default(),
        };
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        let sim = simulate(&config)?;
        write_simulation(&dir, &sim)?;
        Ok(())
    })
}

/// Loads a phenotype table, optionally joined with a genotype triplet.
/// `schema_path` (TOML) and `bfile` may be null.
///
/// # Safety
/// String arguments must be null or nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pq_dataset_load(
    pheno_path: *const c_char,
    schema_path: *const c_char,
    bfile: *const c_char,
    out: *mut *mut PqDataset,
) -> PqStatus {
    guard(|| {
        out_ptr(out)?;
        let pheno = str_arg(pheno_path, "pheno_path")?;
        let schema = match opt_str_arg(schema_path, "schema_path")? {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<PhenotypeSchema>(&text).map_err(|e| invalid(format!("{p}: {e}")))?
            }
            None => PhenotypeSchema::default(),
        };
        let gm = opt_str_arg(bfile, "bfile")?.map(read_packed_genotypes).transpose()?;
        let table = read_phenotypes(pheno, &schema)?;
        let data = join(gm.as_ref(), &table)?;
        *out = Box::into_raw(Box::new(PqDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pq_dataset_free(data: *mut PqDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// # Safety
/// `data` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn pq_dataset_dims(
    data: *const PqDataset,
    n_obs: *mut usize,
    n_subjects: *mut usize,
    n_variants: *mut usize,
) -> PqStatus {
    guard(|| {
        let d = &obj(data, "data")?.0;
        for (p, v) in [(n_obs, d.n_obs()), (n_subjects, d.n_subjects()), (n_variants, d.n_variants())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Observed outcomes, in dataset row order.
///
/// # Safety
/// `out` must hold `len` doubles or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn pq_dataset_outcome(
    data: *const PqDataset,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> PqStatus {
    guard(|| copy_out(obj(data, "data")?.0.y.as_slice(), out, len, needed))
}

/// Reads `n_grm` relatedness files aligned to the dataset subjects.
///
/// # Safety
/// `grm_paths` must point to `n_grm` nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pq_kernels_load(
    grm_paths: *const *const c_char,
    n_grm: usize,
    data: *const PqDataset,
    out: *mut *mut PqKernels,
) -> PqStatus {
    guard(|| {
        out_ptr(out)?;
        let d = &obj(data, "data")?.0;
        if grm_paths.is_null() || n_grm == 0 {
            return Err(invalid("at least one relatedness file is required"));
        }
        let mut rels = Vec::with_capacity(n_grm);
        for i in 0..n_grm {
            rels.push(read_grm(str_arg(*grm_paths.add(i), "grm_paths[i]")?)?);
        }
        *out = Box::into_raw(Box::new(PqKernels(Kernels::new(&rels, &d.subject_ids)?)));
        Ok(())
    })
}

/// # Safety
/// `k` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pq_kernels_free(k: *mut PqKernels) {
    if !k.is_null() {
        drop(Box::from_raw(k));
    }
}

/// Null-model fit (no variant effects) with default settings.
/// `family` is "gaussian" or "binomial".
///
/// # Safety
/// Handles must be live; `family` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pq_fit_null(
    data: *const PqDataset,
    kernels: *const PqKernels,
    family: *const c_char,
    out: *mut *mut PqNullFit,
) -> PqStatus {
    guard(|| {
        out_ptr(out)?;
        let d = &obj(data, "data")?.0;
        let k = &obj(kernels, "kernels")?.0;
        let fam = self::family(str_arg(family, "family")?)?;
        let fit = fit_null(&d.with_variants(&[]), fam, k, &NullFitConfig::default())?;
        *out = Box::into_raw(Box::new(PqNullFit(fit)));
        Ok(())
    })
}

/// # Safety
/// `path` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pq_null_fit_read(path: *const c_char, out: *mut *mut PqNullFit) -> PqStatus {
    guard(|| {
        out_ptr(out)?;
        let fit = NullFitResult::read(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(PqNullFit(fit)));
        Ok(())
    })
}

/// # Safety
/// `fit` live; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn pq_null_fit_write(fit: *const PqNullFit, path: *const c_char) -> PqStatus {
    guard(|| {
        obj(fit, "fit")?.0.write(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Variance parameters in the order phi (Gaussian only), tau_k, then the
/// upper triangle of `D` row by row.
///
/// # Safety
/// `out` must hold `len` doubles; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn pq_null_fit_params(
    fit: *const PqNullFit,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> PqStatus {
    guard(|| copy_out(&obj(fit, "fit")?.0.params, out, len, needed))
}

/// # Safety
/// `fit` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pq_null_fit_free(fit: *mut PqNullFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

fn path_config(n_lambda: usize, ratio: f64) -> Result<PathConfig, Fail> {
    if n_lambda == 0 || !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid("need n_lambda >= 1 and 0 < ratio < 1"));
    }
    Ok(PathConfig {
        n_lambda,
        ratio,
        ..Default::default()
    })
}

/// Penalized mixed-model lasso path with components frozen at `null_fit`.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pq_fit_path(
    data: *const PqDataset,
    null_fit: *const PqNullFit,
    kernels: *const PqKernels,
    n_lambda: usize,
    ratio: f64,
    out: *mut *mut PqPath,
) -> PqStatus {
    guard(|| {
        out_ptr(out)?;
        let d = &obj(data, "data")?.0;
        let null = &obj(null_fit, "null_fit")?.0;
        let k = &obj(kernels, "kernels")?.0;
        let path = fit_path(d, null, Some(k), &path_config(n_lambda, ratio)?)?;
        *out = Box::into_raw(Box::new(PqPath(path)));
        Ok(())
    })
}

/// Lasso path without random effects.
///
/// # Safety
/// `data` live; `family` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pq_fit_plain_lasso(
    data: *const PqDataset,
    family: *const c_char,
    n_lambda: usize,
    ratio: f64,
    out: *mut *mut PqPath,
) -> PqStatus {
    guard(|| {
        out_ptr(out)?;
        let d = &obj(data, "data")?.0;
        let fam = self::family(str_arg(family, "family")?)?;
        let path = fit_plain_lasso(d, fam, &path_config(n_lambda, ratio)?)?;
        *out = Box::into_raw(Box::new(PqPath(path)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a live handle; `len` writable.
#[no_mangle]
pub unsafe extern "C" fn pq_path_len(path: *const PqPath, len: *mut usize) -> PqStatus {
    guard(|| {
        let p = &obj(path, "path")?.0;
        if len.is_null() {
            return Err(Fail(PqStatus::NullPointer, "`len` is null".into()));
        }
        *len = p.entries.len();
        Ok(())
    })
}

/// Lambda and number of selected variants at entry `index`.
///
/// # Safety
/// `path` live; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn pq_path_entry(
    path: *const PqPath,
    index: usize,
    lambda: *mut f64,
    df: *mut usize,
) -> PqStatus {
    guard(|| {
        let p = &obj(path, "path")?.0;
        let e = p
            .entries
            .get(index)
            .ok_or_else(|| invalid(format!("path has {} entries", p.entries.len())))?;
        if !lambda.is_null() {
            *lambda = e.lambda;
        }
        if !df.is_null() {
            *df = e.df;
        }
        Ok(())
    })
}

/// Variant effects per allele copy at entry `index`.
///
/// # Safety
/// `out` must hold `len` doubles; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn pq_path_beta(
    path: *const PqPath,
    index: usize,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> PqStatus {
    guard(|| {
        let p = &obj(path, "path")?.0;
        let e = p
            .entries
            .get(index)
            .ok_or_else(|| invalid(format!("path has {} entries", p.entries.len())))?;
        copy_out(&e.beta_original, out, len, needed)
    })
}

/// Writes `path.tsv`, `coefficients.tsv` and `path.json` into `dir`.
///
/// # Safety
/// `path` live; `dir` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn pq_path_write(path: *const PqPath, dir: *const c_char) -> PqStatus {
    guard(|| {
        obj(path, "path")?.0.write(str_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn pq_path_free(path: *mut PqPath) {
    if !path.is_null() {
        drop(Box::from_raw(path));
    }
}

/// Response-scale predictions for every row of `data` from entry `index`.
///
/// # Safety
/// Handles live; `out` must hold `len` doubles; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn pq_predict(
    path: *const PqPath,
    index: usize,
    data: *const PqDataset,
    out: *mut f64,
    len: usize,
    needed: *mut usize,
) -> PqStatus {
    guard(|| {
        let p = &obj(path, "path")?.0;
        let d = &obj(data, "data")?.0;
        let mu = predict(p, index, d)?;
        copy_out(mu.as_slice(), out, len, needed)
    })
}

/// `1 - MSPE / variance about the mean` of `y`.
///
/// # Safety
/// `y` and `yhat` must hold `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pq_r2_mspe(y: *const f64, yhat: *const f64, n: usize, out: *mut f64) -> PqStatus {
    guard(|| {
        if y.is_null() || yhat.is_null() || out.is_null() {
            return Err(Fail(PqStatus::NullPointer, "null argument".into()));
        }
        let y = DVector::from_column_slice(std::slice::from_raw_parts(y, n));
        let yhat = DVector::from_column_slice(std::slice::from_raw_parts(yhat, n));
        *out = r2_mspe(&y, &yhat)?;
        Ok(())
    })
}
