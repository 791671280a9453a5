//! Genetic relatedness matrices: dense construction, kinship thresholding into
//! block-diagonal clusters, block factorizations and a binary container.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky_with_jitter};

/// Third-degree kinship cutoff, `2^-4.5`.
pub const DEFAULT_THRESHOLD: f64 = 0.044_194_173_824_159_22;

const FILE_MAGIC: &[u8; 4] = b"PGRM";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Grm {
    pub ids: Vec<String>,
    pub matrix: DMatrix<f64>,
}

pub fn build_grm(x_std: &DMatrix<f64>, ids: Vec<String>) -> Result<Grm> {
    let (m, p) = x_std.shape();
    if p == 0 {
        return Err(Error::Invalid("cannot build a GRM from zero markers".into()));
    }
    if ids.len() != m {
        return Err(Error::Invalid(format!("{} ids for {m} GRM rows", ids.len())));
    }
    let mut v = x_std * x_std.transpose() / p as f64;
    for i in 0..m {
        for j in 0..i {
            let s = 0.5 * (v[(i, j)] + v[(j, i)]);
            v[(i, j)] = s;
            v[(j, i)] = s;
        }
    }
    Ok(Grm { ids, matrix: v })
}

/// Block-diagonal relatedness after permuting samples into clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrm {
    pub ids: Vec<String>,
    /// `perm[k]` is the original index of the sample at permuted position `k`.
    pub perm: Vec<usize>,
    /// Cluster `c` spans permuted positions `offsets[c]..offsets[c + 1]`.
    pub offsets: Vec<usize>,
    pub blocks: Vec<DMatrix<f64>>,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Connected components of the graph with an edge wherever `edge(i, j)`;
/// components are ordered by their smallest member and members ascend.
pub fn components(n: usize, edge: impl Fn(usize, usize) -> bool) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in 0..i {
            if edge(i, j) {
                uf.union(i, j);
            }
        }
    }
    let mut label: HashMap<usize, usize> = HashMap::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let root = uf.find(i);
        let c = *label.entry(root).or_insert_with(|| {
            out.push(Vec::new());
            out.len() - 1
        });
        out[c].push(i);
    }
    out
}

pub fn sparsify(grm: &Grm, threshold: f64) -> Result<SparseGrm> {
    if !(threshold > 0.0) {
        return Err(Error::Invalid(format!("threshold must be positive, got {threshold}")));
    }
    let v = &grm.matrix;
    let clusters = components(v.nrows(), |i, j| v[(i, j)].abs() >= threshold);
    Ok(SparseGrm::from_clusters(grm.ids.clone(), &clusters, |i, j| {
        if i == j || v[(i, j)].abs() >= threshold {
            v[(i, j)]
        } else {
            0.0
        }
    }))
}

impl SparseGrm {
    fn from_clusters(ids: Vec<String>, clusters: &[Vec<usize>], entry: impl Fn(usize, usize) -> f64) -> Self {
        let mut perm = Vec::with_capacity(ids.len());
        let mut offsets = vec![0];
        let mut blocks = Vec::with_capacity(clusters.len());
        for c in clusters {
            blocks.push(DMatrix::from_fn(c.len(), c.len(), |a, b| entry(c[a], c[b])));
            perm.extend_from_slice(c);
            offsets.push(perm.len());
        }
        SparseGrm {
            ids,
            perm,
            offsets,
            blocks,
        }
    }

    /// Treats a dense matrix as a single cluster.
    pub fn from_dense(grm: &Grm) -> Self {
        let m = grm.ids.len();
        SparseGrm {
            ids: grm.ids.clone(),
            perm: (0..m).collect(),
            offsets: vec![0, m],
            blocks: vec![grm.matrix.clone()],
        }
    }

    pub fn n_samples(&self) -> usize {
        self.perm.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.blocks.len()
    }

    /// Original sample indices of each cluster.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        self.offsets
            .windows(2)
            .map(|w| self.perm[w[0]..w[1]].to_vec())
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Back to the original sample order with implicit zeros filled in.
    pub fn densify(&self) -> DMatrix<f64> {
        let m = self.n_samples();
        let mut out = DMatrix::zeros(m, m);
        for (members, block) in self.clusters().iter().zip(&self.blocks) {
            for (a, &i) in members.iter().enumerate() {
                for (b, &j) in members.iter().enumerate() {
                    out[(i, j)] = block[(a, b)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, tau: f64, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for (members, block) in self.clusters().iter().zip(&self.blocks) {
            let xs = DVector::from_iterator(members.len(), members.iter().map(|&i| x[i]));
            let ys = block * xs * tau;
            for (a, &i) in members.iter().enumerate() {
                out[i] = ys[a];
            }
        }
        out
    }

    /// Solves `(tau V) x = rhs` cluster by cluster.
    pub fn block_solve(&self, tau: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if !(tau > 0.0) {
            return Err(Error::Invalid(format!("tau must be positive, got {tau}")));
        }
        let clusters = self.clusters();
        let parts: Vec<(usize, DVector<f64>)> = clusters
            .par_iter()
            .zip(self.blocks.par_iter())
            .enumerate()
            .map(|(c, (members, block))| {
                let (ch, _) = cholesky_with_jitter(block).ok_or(Error::NotPositiveDefinite { block: c })?;
                let b = DVector::from_iterator(members.len(), members.iter().map(|&i| rhs[i]));
                Ok((c, ch.solve(&b) / tau))
            })
            .collect::<Result<_>>()?;
        let mut out = DVector::zeros(rhs.len());
        for (c, sol) in parts {
            for (a, &i) in clusters[c].iter().enumerate() {
                out[i] = sol[a];
            }
        }
        Ok(out)
    }

    /// `log|tau V|` as a sum of block log-determinants.
    pub fn block_logdet(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return Err(Error::Invalid(format!("tau must be positive, got {tau}")));
        }
        let dets: Vec<f64> = self
            .blocks
            .par_iter()
            .enumerate()
            .map(|(c, block)| {
                cholesky_with_jitter(block)
                    .map(|(ch, _)| chol_logdet(&ch))
                    .ok_or(Error::NotPositiveDefinite { block: c })
            })
            .collect::<Result<_>>()?;
        Ok(dets.iter().sum::<f64>() + self.n_samples() as f64 * tau.ln())
    }

    /// Keeps only `ids` (in that order), splitting clusters that fall apart.
    pub fn subset(&self, ids: &[String]) -> Result<SparseGrm> {
        let pos = id_positions(&self.ids, ids)?;
        let dense_pos: HashMap<usize, (usize, usize)> = self
            .clusters()
            .iter()
            .enumerate()
            .flat_map(|(c, members)| members.iter().enumerate().map(move |(a, &i)| (i, (c, a))).collect::<Vec<_>>())
            .collect();
        let entry = |i: usize, j: usize| {
            let (ci, ai) = dense_pos[&pos[i]];
            let (cj, aj) = dense_pos[&pos[j]];
            if ci == cj {
                self.blocks[ci][(ai, aj)]
            } else {
                0.0
            }
        };
        let clusters = components(ids.len(), |i, j| entry(i, j) != 0.0);
        Ok(SparseGrm::from_clusters(ids.to_vec(), &clusters, entry))
    }
}

fn id_positions(have: &[String], want: &[String]) -> Result<Vec<usize>> {
    let index: HashMap<&str, usize> = have.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    want.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("sample `{id}` missing from relatedness matrix")))
        })
        .collect()
}

/// A relatedness matrix in either storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Relatedness {
    Dense(Grm),
    Sparse(SparseGrm),
}

impl Relatedness {
    pub fn ids(&self) -> &[String] {
        match self {
            Relatedness::Dense(g) => &g.ids,
            Relatedness::Sparse(s) => &s.ids,
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, Relatedness::Sparse(_))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Relatedness::Dense(g) => g.matrix.clone(),
            Relatedness::Sparse(s) => s.densify(),
        }
    }

    pub fn subset(&self, ids: &[String]) -> Result<Relatedness> {
        match self {
            Relatedness::Dense(g) => {
                let pos = id_positions(&g.ids, ids)?;
                Ok(Relatedness::Dense(Grm {
                    ids: ids.to_vec(),
                    matrix: DMatrix::from_fn(ids.len(), ids.len(), |i, j| g.matrix[(pos[i], pos[j])]),
                }))
            }
            Relatedness::Sparse(s) => Ok(Relatedness::Sparse(s.subset(ids)?)),
        }
    }
}

fn push_u64(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u64).to_le_bytes());
}

pub fn grm_bytes(rel: &Relatedness) -> Vec<u8> {
    let (kind, sg) = match rel {
        Relatedness::Dense(g) => (0u8, SparseGrm::from_dense(g)),
        Relatedness::Sparse(s) => (1u8, s.clone()),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(FILE_MAGIC);
    buf.extend_from_slice(&FILE_VERSION.to_le_bytes());
    buf.push(kind);
    push_u64(&mut buf, sg.n_samples());
    for id in &sg.ids {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for &p in &sg.perm {
        push_u64(&mut buf, p);
    }
    push_u64(&mut buf, sg.n_clusters());
    for &o in &sg.offsets {
        push_u64(&mut buf, o);
    }
    for block in &sg.blocks {
        for i in 0..block.nrows() {
            for j in 0..block.ncols() {
                buf.extend_from_slice(&block[(i, j)].to_le_bytes());
            }
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    name: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.at + k > self.bytes.len() {
            return Err(Error::Invalid(format!("{}: GRM file truncated at byte {}", self.name, self.at)));
        }
        let s = &self.bytes[self.at..self.at + k];
        self.at += k;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn parse_grm_bytes(name: &str, bytes: &[u8]) -> Result<Relatedness> {
    if !bytes.starts_with(FILE_MAGIC) {
        return parse_grm_text(name, bytes);
    }
    let mut cur = Cursor { bytes, at: 4, name };
    let version = cur.u32()?;
    if version != FILE_VERSION {
        return Err(Error::Invalid(format!("{name}: unsupported GRM file version {version}")));
    }
    let kind = cur.take(1)?[0];
    let m = cur.usize()?;
    let mut ids = Vec::with_capacity(m);
    for _ in 0..m {
        let len = cur.u32()? as usize;
        let raw = cur.take(len)?;
        ids.push(
            String::from_utf8(raw.to_vec())
                .map_err(|_| Error::Invalid(format!("{name}: sample id is not UTF-8")))?,
        );
    }
    let perm = (0..m).map(|_| cur.usize()).collect::<Result<Vec<_>>>()?;
    let nc = cur.usize()?;
    let offsets = (0..=nc).map(|_| cur.usize()).collect::<Result<Vec<_>>>()?;
    let valid_offsets = offsets.first() == Some(&0)
        && offsets.last() == Some(&m)
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    let mut seen = vec![false; m];
    let valid_perm = perm.iter().all(|&p| p < m && !std::mem::replace(&mut seen[p], true));
    if !valid_offsets || !valid_perm {
        return Err(Error::Invalid(format!("{name}: inconsistent cluster layout")));
    }
    let mut blocks = Vec::with_capacity(nc);
    for w in offsets.windows(2) {
        let k = w[1] - w[0];
        let vals = (0..k * k).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        blocks.push(DMatrix::from_row_slice(k, k, &vals));
    }
    if cur.at != bytes.len() {
        return Err(Error::Invalid(format!("{name}: trailing bytes after GRM payload")));
    }
    let sg = SparseGrm {
        ids,
        perm,
        offsets,
        blocks,
    };
    Ok(match kind {
        0 => Relatedness::Dense(Grm {
            ids: sg.ids.clone(),
            matrix: sg.densify(),
        }),
        1 => Relatedness::Sparse(sg),
        k => return Err(Error::Invalid(format!("{name}: unknown GRM kind {k}"))),
    })
}

/// Dense text layout: a header `id<TAB>s1<TAB>s2...` followed by one row per sample.
pub fn grm_text(g: &Grm) -> String {
    let mut out = String::from("id");
    for id in &g.ids {
        out.push('\t');
        out.push_str(id);
    }
    out.push('\n');
    for (i, id) in g.ids.iter().enumerate() {
        out.push_str(id);
        for j in 0..g.ids.len() {
            out.push('\t');
            out.push_str(&format!("{:e}", g.matrix[(i, j)]));
        }
        out.push('\n');
    }
    out
}

fn parse_grm_text(name: &str, bytes: &[u8]) -> Result<Relatedness> {
    let text = std::str::from_utf8(bytes)
        .ok()
        .filter(|t| t.starts_with("id\t"))
        .ok_or_else(|| Error::Schema {
            expected: "grm".into(),
            found: crate::sniff_stage(bytes),
        })?;
    let mut lines = text.lines();
    let ids: Vec<String> = lines.next().unwrap().split('\t').skip(1).map(String::from).collect();
    let m = ids.len();
    let mut matrix = DMatrix::zeros(m, m);
    for i in 0..m {
        let row = i + 2;
        let line = lines.next().ok_or_else(|| Error::parse(name, row, "missing GRM row"))?;
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != m + 1 || cells[0] != ids[i] {
            return Err(Error::parse(name, row, "GRM row does not match header"));
        }
        for j in 0..m {
            matrix[(i, j)] = cells[j + 1]
                .parse()
                .map_err(|_| Error::parse(name, row, format!("non-numeric value `{}`", cells[j + 1])))?;
        }
    }
    Ok(Relatedness::Dense(Grm { ids, matrix }))
}

pub fn write_grm(path: impl AsRef<Path>, rel: &Relatedness) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, grm_bytes(rel)).map_err(|e| Error::io(path, e))
}

pub fn write_grm_text(path: impl AsRef<Path>, g: &Grm) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, grm_text(g)).map_err(|e| Error::io(path, e))
}

pub fn read_grm(path: impl AsRef<Path>) -> Result<Relatedness> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_grm_bytes(&path.display().to_string(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("s{i}")).collect()
    }

    fn random_grm(m: usize, seed: u64) -> Grm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(m, 3 * m, |_, _| rng.random::<f64>() - 0.5);
        build_grm(&x, ids(m)).unwrap()
    }

    #[test]
    fn identity_markers_give_half_identity() {
        let g = build_grm(&DMatrix::identity(2, 2), ids(2)).unwrap();
        assert_eq!(g.matrix, DMatrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn duplicated_samples_share_diagonal() {
        let x = DMatrix::from_row_slice(3, 4, &[1., -1., 0., 2., 1., -1., 0., 2., 0., 1., 1., -1.]);
        let g = build_grm(&x, ids(3)).unwrap();
        assert_eq!(g.matrix[(0, 1)], g.matrix[(0, 0)]);
    }

    #[test]
    fn grm_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(5, 40, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let g = build_grm(&x, ids(5)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..40 {
                    s += x[(i, k)] * x[(j, k)];
                }
                assert!((g.matrix[(i, j)] - s / 40.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_markers_is_an_error() {
        assert!(build_grm(&DMatrix::zeros(3, 0), ids(3)).is_err());
    }

    #[test]
    fn identity_gives_singletons() {
        let g = Grm {
            ids: ids(4),
            matrix: DMatrix::identity(4, 4),
        };
        let sg = sparsify(&g, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(sg.cluster_sizes(), vec![1, 1, 1, 1]);
    }

    /// Reference clustering by depth-first search over the thresholded adjacency.
    fn dfs_clusters(v: &DMatrix<f64>, t: f64) -> Vec<Vec<usize>> {
        let m = v.nrows();
        let mut seen = vec![false; m];
        let mut out = Vec::new();
        for s in 0..m {
            if seen[s] {
                continue;
            }
            let mut stack = vec![s];
            let mut comp = Vec::new();
            seen[s] = true;
            while let Some(i) = stack.pop() {
                comp.push(i);
                for j in 0..m {
                    if !seen[j] && i != j && v[(i, j)].abs() >= t {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out
    }

    #[test]
    fn two_sib_pairs_among_six() {
        let mut v = DMatrix::identity(6, 6);
        for (a, b) in [(0, 3), (2, 5)] {
            v[(a, b)] = 0.5;
            v[(b, a)] = 0.5;
        }
        v[(1, 4)] = 0.01;
        v[(4, 1)] = 0.01;
        let g = Grm { ids: ids(6), matrix: v.clone() };
        let sg = sparsify(&g, DEFAULT_THRESHOLD).unwrap();
        let mut sizes = sg.cluster_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![2, 2, 1, 1]);
        assert_eq!(sg.clusters(), dfs_clusters(&v, DEFAULT_THRESHOLD));
    }

    #[test]
    fn high_threshold_keeps_diagonal() {
        let g = random_grm(6, 1);
        let sg = sparsify(&g, 1e6).unwrap();
        assert_eq!(sg.densify(), DMatrix::from_diagonal(&g.matrix.diagonal()));
    }

    #[test]
    fn sparsify_then_densify_is_thresholding() {
        for seed in 0..20 {
            let g = random_grm(12, seed);
            let t = 0.02;
            let sg = sparsify(&g, t).unwrap();
            let expect = DMatrix::from_fn(12, 12, |i, j| {
                if i == j || g.matrix[(i, j)].abs() >= t {
                    g.matrix[(i, j)]
                } else {
                    0.0
                }
            });
            assert_eq!(sg.densify(), expect);
            assert_eq!(sg.clusters(), dfs_clusters(&g.matrix, t));
        }
    }

    #[test]
    fn solve_identity() {
        let g = Grm {
            ids: ids(3),
            matrix: DMatrix::identity(3, 3),
        };
        let sg = sparsify(&g, DEFAULT_THRESHOLD).unwrap();
        let x = sg.block_solve(2.0, &DVector::from_element(3, 1.0)).unwrap();
        assert_eq!(x, DVector::from_element(3, 0.5));
        assert_eq!(sg.block_logdet(1.0).unwrap(), 0.0);
    }

    #[test]
    fn two_block_solve_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut v = DMatrix::zeros(7, 7);
        let members = [vec![0, 2, 5], vec![1, 3, 4, 6]];
        for c in &members {
            let a = DMatrix::from_fn(c.len(), c.len(), |_, _| rng.random::<f64>());
            let b = &a * a.transpose() + DMatrix::identity(c.len(), c.len());
            for (x, &i) in c.iter().enumerate() {
                for (y, &j) in c.iter().enumerate() {
                    v[(i, j)] = b[(x, y)];
                }
            }
        }
        let sg = sparsify(&Grm { ids: ids(7), matrix: v.clone() }, 1e-12).unwrap();
        assert_eq!(sg.n_clusters(), 2);
        let rhs = DVector::from_fn(7, |i, _| i as f64 - 2.5);
        let x = sg.block_solve(1.7, &rhs).unwrap();
        let dense = (v.clone() * 1.7).cholesky().unwrap();
        assert!((&x - dense.solve(&rhs)).norm() < 1e-10 * x.norm());
        let ld = sg.block_logdet(1.7).unwrap();
        assert!((ld - chol_logdet(&dense)).abs() < 1e-10);
        let back = sg.mul_vec(1.7, &x);
        assert!((back - rhs).norm() < 1e-9);
    }

    #[test]
    fn subset_splits_clusters() {
        let mut v = DMatrix::identity(4, 4);
        for (a, b) in [(0, 1), (1, 2)] {
            v[(a, b)] = 0.5;
            v[(b, a)] = 0.5;
        }
        let sg = sparsify(&Grm { ids: ids(4), matrix: v }, DEFAULT_THRESHOLD).unwrap();
        let sub = sg.subset(&["s2".into(), "s0".into(), "s3".into()]).unwrap();
        assert_eq!(sub.cluster_sizes(), vec![1, 1, 1]);
        assert!(sg.subset(&["nope".into()]).is_err());
    }

    #[test]
    fn binary_roundtrip_both_kinds() {
        let g = random_grm(9, 4);
        let sg = sparsify(&g, 0.03).unwrap();
        for rel in [Relatedness::Dense(g.clone()), Relatedness::Sparse(sg)] {
            let bytes = grm_bytes(&rel);
            assert_eq!(parse_grm_bytes("t", &bytes).unwrap(), rel);
            assert!(parse_grm_bytes("t", &bytes[..bytes.len() - 3]).is_err());
        }
    }

    #[test]
    fn text_roundtrip() {
        let g = random_grm(4, 5);
        let back = parse_grm_bytes("t", grm_text(&g).as_bytes()).unwrap();
        assert_eq!(back, Relatedness::Dense(g));
    }

    #[test]
    fn foreign_file_is_schema_mismatch() {
        let err = parse_grm_bytes("t", br#"{"stage":"null-fit"}"#).unwrap_err();
        assert!(matches!(err, Error::Schema { ref found, .. } if found == "null-fit"), "{err}");
    }
}
