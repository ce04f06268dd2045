//! Flat parameter vectors with a named block layout.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Multilevel,
    M2pl,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Multilevel => f.write_str("multilevel"),
            ModelKind::M2pl => f.write_str("m2pl"),
        }
    }
}

/// Named parameter blocks. `Mu` is the latent mean (multilevel only),
/// `D` the item intercepts, `A` the free loadings, `Chol` the packed
/// lower-triangular Cholesky factor of the latent covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mu,
    D,
    A,
    Chol,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Mu => "mu",
            BlockKind::D => "d",
            BlockKind::A => "a",
            BlockKind::Chol => "chol",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mu" => Some(BlockKind::Mu),
            "d" => Some(BlockKind::D),
            "a" => Some(BlockKind::A),
            "chol" => Some(BlockKind::Chol),
            _ => None,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of packed entries in a K x K lower triangle.
pub const fn tri_len(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Packed index of `(row, col)` with `col <= row`, row-major.
#[inline]
pub const fn tri_index(row: usize, col: usize) -> usize {
    row * (row + 1) / 2 + col
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    kind: ModelKind,
    latent_dim: usize,
    blocks: Vec<(BlockKind, Range<usize>)>,
    len: usize,
}

impl Layout {
    pub fn multilevel(k: usize) -> Self {
        Self::from_sizes(
            ModelKind::Multilevel,
            k,
            &[(BlockKind::Mu, k), (BlockKind::Chol, tri_len(k))],
        )
    }

    pub fn m2pl(n_items: usize, n_loadings: usize, k: usize) -> Self {
        Self::from_sizes(
            ModelKind::M2pl,
            k,
            &[
                (BlockKind::D, n_items),
                (BlockKind::A, n_loadings),
                (BlockKind::Chol, tri_len(k)),
            ],
        )
    }

    fn from_sizes(kind: ModelKind, latent_dim: usize, sizes: &[(BlockKind, usize)]) -> Self {
        let mut start = 0;
        let blocks = sizes
            .iter()
            .map(|&(b, n)| {
                let r = start..start + n;
                start += n;
                (b, r)
            })
            .collect();
        Layout {
            kind,
            latent_dim,
            blocks,
            len: start,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn blocks(&self) -> impl Iterator<Item = (BlockKind, Range<usize>)> + '_ {
        self.blocks.iter().cloned()
    }

    pub fn range(&self, block: BlockKind) -> Option<Range<usize>> {
        self.blocks
            .iter()
            .find(|(b, _)| *b == block)
            .map(|(_, r)| r.clone())
    }

    pub fn chol_range(&self) -> Range<usize> {
        self.range(BlockKind::Chol)
            .expect("every layout has a Cholesky block")
    }

    /// Block owning flat index `q`.
    pub fn block_of(&self, q: usize) -> Option<BlockKind> {
        self.blocks
            .iter()
            .find(|(_, r)| r.contains(&q))
            .map(|(b, _)| *b)
    }

    /// Human-readable name for each flat index, e.g. `a[3]` or `chol[2,1]`.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len);
        for (b, r) in &self.blocks {
            if *b == BlockKind::Chol {
                for row in 0..self.latent_dim {
                    for col in 0..=row {
                        names.push(format!("chol[{row},{col}]"));
                    }
                }
            } else {
                for q in 0..r.len() {
                    names.push(format!("{}[{q}]", b.name()));
                }
            }
        }
        names
    }
}

/// Lower-triangular Cholesky factor `L` of a latent covariance `Sigma = L L^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    k: usize,
    /// Dense K x K, row-major, zero above the diagonal.
    entries: Vec<f64>,
}

impl CholFactor {
    pub fn identity(k: usize) -> Self {
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            entries[i * k + i] = 1.0;
        }
        CholFactor { k, entries }
    }

    pub fn from_dense(k: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != k * k {
            return Err(Error::invalid(format!(
                "Cholesky factor needs {} entries, got {}",
                k * k,
                entries.len()
            )));
        }
        for i in 0..k {
            for j in (i + 1)..k {
                if entries[i * k + j] != 0.0 {
                    return Err(Error::invalid("Cholesky factor is not lower-triangular"));
                }
            }
        }
        Ok(CholFactor { k, entries })
    }

    pub fn from_packed(k: usize, packed: &[f64]) -> Self {
        assert_eq!(packed.len(), tri_len(k));
        let mut entries = vec![0.0; k * k];
        for row in 0..k {
            for col in 0..=row {
                entries[row * k + col] = packed[tri_index(row, col)];
            }
        }
        CholFactor { k, entries }
    }

    /// Factor an SPD covariance matrix (row-major K x K).
    pub fn from_covariance(k: usize, sigma: &[f64]) -> Result<Self> {
        let entries = linalg::cholesky(sigma, k)
            .ok_or_else(|| Error::invalid("covariance matrix is not positive definite"))?;
        Ok(CholFactor { k, entries })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn dense(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.k + col]
    }

    pub fn packed(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(tri_len(self.k));
        for row in 0..self.k {
            out.extend_from_slice(&self.entries[row * self.k..row * self.k + row + 1]);
        }
        out
    }

    /// `Sigma = L L^T`, row-major.
    pub fn sigma(&self) -> Vec<f64> {
        linalg::lower_gram(&self.entries, self.k)
    }
}

/// `Sigma = L L^T` from a Cholesky factor.
pub fn sigma_from_chol(l: &CholFactor) -> Vec<f64> {
    l.sigma()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "expected {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        ParamVector { values, layout }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, b: BlockKind) -> &[f64] {
        match self.layout.range(b) {
            Some(r) => &self.values[r],
            None => &[],
        }
    }

    pub fn block_mut(&mut self, b: BlockKind) -> &mut [f64] {
        match self.layout.range(b) {
            Some(r) => &mut self.values[r],
            None => &mut [],
        }
    }

    pub fn chol(&self) -> CholFactor {
        CholFactor::from_packed(self.layout.latent_dim(), self.block(BlockKind::Chol))
    }

    pub fn set_chol(&mut self, l: &CholFactor) {
        let packed = l.packed();
        self.block_mut(BlockKind::Chol).copy_from_slice(&packed);
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.chol().sigma()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(self.layout.clone(), values)
    }

    pub fn to_file(&self) -> ParamFile {
        ParamFile {
            model: self.layout.kind(),
            latent_dim: self.layout.latent_dim(),
            blocks: self
                .layout
                .blocks()
                .map(|(b, r)| (b.name().to_string(), self.values[r].to_vec()))
                .collect(),
        }
    }

    pub fn from_file(layout: Arc<Layout>, file: &ParamFile) -> Result<Self> {
        if file.model != layout.kind() || file.latent_dim != layout.latent_dim() {
            return Err(Error::LayoutMismatch(format!(
                "file describes a {} model with K={}, dataset is {} with K={}",
                file.model,
                file.latent_dim,
                layout.kind(),
                layout.latent_dim()
            )));
        }
        let mut values = vec![0.0; layout.len()];
        for (b, r) in layout.blocks() {
            let vals = file
                .blocks
                .get(b.name())
                .ok_or_else(|| Error::LayoutMismatch(format!("missing block '{}'", b.name())))?;
            if vals.len() != r.len() {
                return Err(Error::LayoutMismatch(format!(
                    "block '{}' has {} entries, expected {}",
                    b.name(),
                    vals.len(),
                    r.len()
                )));
            }
            values[r].copy_from_slice(vals);
        }
        if let Some(extra) = file
            .blocks
            .keys()
            .find(|k| BlockKind::parse(k).and_then(|b| layout.range(b)).is_none())
        {
            return Err(Error::LayoutMismatch(format!("unexpected block '{extra}'")));
        }
        ParamVector::new(layout, values)
    }
}

/// On-disk form of a parameter vector: named blocks in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub model: ModelKind,
    pub latent_dim: usize,
    pub blocks: BTreeMap<String, Vec<f64>>,
}
