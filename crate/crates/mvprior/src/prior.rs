//! Structured priors from source models.
//!
//! Given a set of previously trained multi-view models, this module
//! estimates how template cells co-vary: per-relation `L x L` cross
//! covariance blocks `Sigma_n = avg (w_j - w_mean)(w_k - w_mean)'` over the
//! relation's cell pairs, scattered into a sparse `P x P` matrix `Sigma`,
//! or alternatively the dense empirical second moment
//! `Sigma_emp = (1/N) sum_i w_i w_i'` of the whole parameter vectors.
//! Asymmetric view-block masks restrict which view pairs may exchange
//! information. Bias slots never participate: their rows and columns of
//! `Sigma` stay zero so the regularizer is the identity there.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::binio;
use crate::error::{Error, Result};
use crate::geometry::{CellPairSet, Relation};
use crate::model::{MultiViewModel, TemplateLayout};

const PRIOR_MAGIC: &[u8; 8] = b"MVPPRIOR";
const PRIOR_VERSION: u32 = 1;

/// Which cells the pair-set mean `w_mean` averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanMode {
    /// Mean of the first element of every pair (the default).
    #[default]
    FirstElement,
    /// Mean over both elements of every pair.
    BothElements,
}

/// Cross-covariance block of one relation: `Sigma_n`, its pair count and
/// the mean cell vector the deviations were taken against.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCovariance {
    pub relation: Relation,
    pub sigma: DMatrix<f64>,
    pub pair_count: usize,
    pub mean: DVector<f64>,
}

/// Prior flavor: sparse structural relations only, sparse including
/// cross-view pairs, or the dense empirical moment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaKind {
    Sv,
    Mv,
    Dense,
}

impl SigmaKind {
    pub fn tag(&self) -> &'static str {
        match self {
            SigmaKind::Sv => "sv",
            SigmaKind::Mv => "mv",
            SigmaKind::Dense => "dense",
        }
    }
}

/// View-block masking variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskVariant {
    /// Keep everything.
    #[default]
    None,
    /// Data views exchange with no-data views only (plus all diagonal
    /// blocks).
    Td2nd,
    /// Keep any block touching a data view (plus diagonal blocks).
    Td2all,
    /// Keep blocks of cyclically adjacent views and diagonal blocks.
    Nb2all,
}

impl MaskVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            MaskVariant::None => "none",
            MaskVariant::Td2nd => "td2nd",
            MaskVariant::Td2all => "td2all",
            MaskVariant::Nb2all => "nb2all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskVariant::None),
            "td2nd" => Ok(MaskVariant::Td2nd),
            "td2all" => Ok(MaskVariant::Td2all),
            "nb2all" => Ok(MaskVariant::Nb2all),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask variant {other:?} (expected none, td2nd, td2all or nb2all)"
            ))),
        }
    }
}

/// Mask specification: the variant plus the set of views that carry target
/// training data (consulted by the td2nd/td2all variants).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    pub variant: MaskVariant,
    pub data_views: BTreeSet<usize>,
}

impl MaskSpec {
    pub fn none() -> Self {
        Self {
            variant: MaskVariant::None,
            data_views: BTreeSet::new(),
        }
    }

    pub fn new(variant: MaskVariant, data_views: impl IntoIterator<Item = usize>) -> Self {
        Self {
            variant,
            data_views: data_views.into_iter().collect(),
        }
    }

    fn validate(&self, layout: &TemplateLayout) -> Result<()> {
        if let Some(&v) = self.data_views.iter().find(|&&v| v >= layout.views()) {
            return Err(Error::IndexOutOfRange(format!(
                "data view {v} >= {}",
                layout.views()
            )));
        }
        if matches!(self.variant, MaskVariant::Td2nd | MaskVariant::Td2all)
            && self.data_views.is_empty()
        {
            return Err(Error::InvalidArgument(format!(
                "mask {} requires a nonempty data view set",
                self.variant.tag()
            )));
        }
        Ok(())
    }

    /// Whether the view-block (i, j) survives the mask.
    fn keeps(&self, layout: &TemplateLayout, i: usize, j: usize) -> bool {
        let d = &self.data_views;
        match self.variant {
            MaskVariant::None => true,
            MaskVariant::Td2nd => {
                (d.contains(&i) && !d.contains(&j)) || (d.contains(&j) && !d.contains(&i)) || i == j
            }
            MaskVariant::Td2all => d.contains(&i) || d.contains(&j) || i == j,
            MaskVariant::Nb2all => layout.cyclic_view_distance(i, j) <= 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Storage {
    /// Cell-index-keyed `L x L` blocks; absent blocks are zero.
    Sparse(BTreeMap<(usize, usize), DMatrix<f64>>),
    /// Full `P x P` matrix.
    Dense(DMatrix<f64>),
}

/// Assembled `P x P` prior matrix `Sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMatrix {
    layout: TemplateLayout,
    kind: SigmaKind,
    mask: MaskVariant,
    sources: usize,
    storage: Storage,
}

impl SigmaMatrix {
    /// All-zero sparse prior (the no-information prior: `K` becomes `I`).
    pub fn zero(layout: TemplateLayout) -> Self {
        Self {
            layout,
            kind: SigmaKind::Sv,
            mask: MaskVariant::None,
            sources: 0,
            storage: Storage::Sparse(BTreeMap::new()),
        }
    }

    pub fn layout(&self) -> &TemplateLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.param_count()
    }

    pub fn kind(&self) -> SigmaKind {
        self.kind
    }

    pub fn mask(&self) -> MaskVariant {
        self.mask
    }

    /// Source-model count (meaningful for the dense kind; retained as
    /// provenance for sparse kinds).
    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn block_count(&self) -> usize {
        match &self.storage {
            Storage::Sparse(blocks) => blocks.len(),
            Storage::Dense(_) => 0,
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    /// Materializes the full `P x P` matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let p = self.dim();
        match &self.storage {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(blocks) => {
                let l = self.layout.cell_dim();
                let mut dense = DMatrix::zeros(p, p);
                for (&(j, k), block) in blocks {
                    dense.view_mut((j * l, k * l), (l, l)).copy_from(block);
                }
                dense
            }
        }
    }

    /// `Sigma * v` without materializing a dense matrix for sparse storage.
    pub fn mul_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "vector length {} != prior dimension {}",
                v.len(),
                self.dim()
            )));
        }
        match &self.storage {
            Storage::Dense(m) => Ok(m * v),
            Storage::Sparse(blocks) => {
                let l = self.layout.cell_dim();
                let mut out = DVector::zeros(self.dim());
                for (&(j, k), block) in blocks {
                    let seg = v.rows(k * l, l);
                    let mut dst = out.rows_mut(j * l, l);
                    dst.gemv(1.0, block, &seg, 1.0);
                }
                Ok(out)
            }
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        match &self.storage {
            Storage::Dense(m) => m.iter().fold(0.0_f64, |a, &x| a.max(x.abs())),
            Storage::Sparse(blocks) => blocks
                .values()
                .flat_map(|b| b.iter())
                .fold(0.0_f64, |a, &x| a.max(x.abs())),
        }
    }

    /// Maximum symmetry violation `max |Sigma - Sigma'|`.
    pub fn symmetry_gap(&self) -> f64 {
        let dense = self.to_dense();
        let mut gap = 0.0_f64;
        for i in 0..dense.nrows() {
            for j in (i + 1)..dense.ncols() {
                gap = gap.max((dense[(i, j)] - dense[(j, i)]).abs());
            }
        }
        gap
    }

    fn check_invariants(&self) -> Result<()> {
        let gap = self.symmetry_gap();
        if gap > 1e-12 * (1.0 + self.max_abs()) {
            return Err(Error::Internal(format!(
                "prior matrix asymmetric: gap {gap}"
            )));
        }
        Ok(())
    }

    /// Writes the prior to `path`.
    ///
    /// Format: magic `MVPPRIOR`, version u32, layout header as in the model
    /// format, kind u8, mask u8, source count u32, storage tag u8, then
    /// either `u64 block count` + `(u32 j, u32 k, L*L f64)` triples or
    /// `u64 P` + `P*P` f64, all little-endian row-major.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        binio::write_magic(&mut w, PRIOR_MAGIC, PRIOR_VERSION)?;
        binio::write_u32(&mut w, self.layout.views() as u32)?;
        binio::write_u32(&mut w, self.layout.rows() as u32)?;
        binio::write_u32(&mut w, self.layout.cols() as u32)?;
        binio::write_u32(&mut w, self.layout.cell_dim() as u32)?;
        binio::write_u8(&mut w, self.layout.per_view_bias() as u8)?;
        binio::write_f64_slice(&mut w, self.layout.bins_deg())?;
        let kind = match self.kind {
            SigmaKind::Sv => 0u8,
            SigmaKind::Mv => 1,
            SigmaKind::Dense => 2,
        };
        binio::write_u8(&mut w, kind)?;
        let mask = match self.mask {
            MaskVariant::None => 0u8,
            MaskVariant::Td2nd => 1,
            MaskVariant::Td2all => 2,
            MaskVariant::Nb2all => 3,
        };
        binio::write_u8(&mut w, mask)?;
        binio::write_u32(&mut w, self.sources as u32)?;
        match &self.storage {
            Storage::Sparse(blocks) => {
                binio::write_u8(&mut w, 0)?;
                binio::write_u64(&mut w, blocks.len() as u64)?;
                for (&(j, k), block) in blocks {
                    binio::write_u32(&mut w, j as u32)?;
                    binio::write_u32(&mut w, k as u32)?;
                    for r in 0..block.nrows() {
                        for c in 0..block.ncols() {
                            binio::write_f64(&mut w, block[(r, c)])?;
                        }
                    }
                }
            }
            Storage::Dense(m) => {
                binio::write_u8(&mut w, 1)?;
                binio::write_u64(&mut w, m.nrows() as u64)?;
                for r in 0..m.nrows() {
                    for c in 0..m.ncols() {
                        binio::write_f64(&mut w, m[(r, c)])?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads a prior written by [`save`](Self::save).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        binio::check_magic(&mut r, PRIOR_MAGIC, PRIOR_VERSION)?;
        let views = binio::read_u32(&mut r)? as usize;
        let rows = binio::read_u32(&mut r)? as usize;
        let cols = binio::read_u32(&mut r)? as usize;
        let cell_dim = binio::read_u32(&mut r)? as usize;
        let per_view_bias = binio::read_u8(&mut r)? != 0;
        let bins = binio::read_f64_vec(&mut r, views)?;
        let layout = TemplateLayout::with_bins(views, bins, rows, cols, cell_dim, per_view_bias)
            .map_err(|e| Error::Format(format!("bad layout header: {e}")))?;
        let kind = match binio::read_u8(&mut r)? {
            0 => SigmaKind::Sv,
            1 => SigmaKind::Mv,
            2 => SigmaKind::Dense,
            other => return Err(Error::Format(format!("unknown prior kind {other}"))),
        };
        let mask = match binio::read_u8(&mut r)? {
            0 => MaskVariant::None,
            1 => MaskVariant::Td2nd,
            2 => MaskVariant::Td2all,
            3 => MaskVariant::Nb2all,
            other => return Err(Error::Format(format!("unknown mask variant {other}"))),
        };
        let sources = binio::read_u32(&mut r)? as usize;
        let l = layout.cell_dim();
        let storage = match binio::read_u8(&mut r)? {
            0 => {
                let count = binio::read_u64(&mut r)? as usize;
                let mut blocks = BTreeMap::new();
                for _ in 0..count {
                    let j = binio::read_u32(&mut r)? as usize;
                    let k = binio::read_u32(&mut r)? as usize;
                    if j >= layout.cell_count() || k >= layout.cell_count() {
                        return Err(Error::Format(format!(
                            "block index ({j}, {k}) outside {} cells",
                            layout.cell_count()
                        )));
                    }
                    let data = binio::read_f64_vec(&mut r, l * l)?;
                    blocks.insert((j, k), DMatrix::from_row_slice(l, l, &data));
                }
                Storage::Sparse(blocks)
            }
            1 => {
                let p = binio::read_u64(&mut r)? as usize;
                if p != layout.param_count() {
                    return Err(Error::Format(format!(
                        "dense prior is {p}x{p} but layout has {} params",
                        layout.param_count()
                    )));
                }
                let data = binio::read_f64_vec(&mut r, p * p)?;
                Storage::Dense(DMatrix::from_row_slice(p, p, &data))
            }
            other => return Err(Error::Format(format!("unknown storage tag {other}"))),
        };
        let sigma = Self {
            layout,
            kind,
            mask,
            sources,
            storage,
        };
        sigma
            .check_invariants()
            .map_err(|e| Error::Format(format!("loaded prior violates invariants: {e}")))?;
        Ok(sigma)
    }
}

/// Computes `Sigma_n` for one relation with the default first-element mean.
pub fn compute_block_covariance(
    sources: &[MultiViewModel],
    pairs: &CellPairSet,
) -> Result<BlockCovariance> {
    compute_block_covariance_with_mean(sources, pairs, MeanMode::FirstElement)
}

/// Computes `Sigma_n = (1 / (N * |P_n|)) * sum_{s, (j,k)} (w_j^s - w_mean)
/// (w_k^s - w_mean)'` where `w_mean` averages pair cells over all sources
/// according to `mode`.
pub fn compute_block_covariance_with_mean(
    sources: &[MultiViewModel],
    pairs: &CellPairSet,
    mode: MeanMode,
) -> Result<BlockCovariance> {
    let first = sources.first().ok_or(Error::NoSources)?;
    let layout = first.layout();
    if let Some(bad) = sources.iter().find(|s| s.layout() != layout) {
        return Err(Error::LayoutMismatch(format!(
            "source model layouts differ: {:?} vs {:?}",
            layout,
            bad.layout()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyPairSet(pairs.relation().tag().into()));
    }
    let l = layout.cell_dim();
    let cell = |model: &MultiViewModel, c| DVector::from_row_slice(model.cell(c).expect("validated cell"));

    let mut mean = DVector::zeros(l);
    let mut mean_count = 0usize;
    for source in sources {
        for &(j, k) in pairs.pairs() {
            mean += cell(source, j);
            mean_count += 1;
            if mode == MeanMode::BothElements {
                mean += cell(source, k);
                mean_count += 1;
            }
        }
    }
    mean /= mean_count as f64;

    let mut sigma = DMatrix::zeros(l, l);
    for source in sources {
        for &(j, k) in pairs.pairs() {
            let dj = cell(source, j) - &mean;
            let dk = cell(source, k) - &mean;
            sigma.ger(1.0, &dj, &dk, 1.0);
        }
    }
    sigma /= (sources.len() * pairs.len()) as f64;
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::Internal("non-finite covariance block".into()));
    }
    Ok(BlockCovariance {
        relation: pairs.relation(),
        sigma,
        pair_count: pairs.len(),
        mean,
    })
}

/// Scatters per-relation blocks into the sparse `P x P` prior.
///
/// Within one relation every pair `(j, k)` sets block `(j, k)` to `Sigma_n`
/// and block `(k, j)` to `Sigma_n'`; contributions of different relations to
/// the same block are summed. The result is exactly symmetric.
pub fn assemble_sparse_sigma(
    layout: &TemplateLayout,
    parts: &[(&CellPairSet, &BlockCovariance)],
) -> Result<SigmaMatrix> {
    let l = layout.cell_dim();
    let mut total: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
    let mut has_mv = false;
    for (pairs, cov) in parts {
        if cov.relation != pairs.relation() {
            return Err(Error::InvalidArgument(format!(
                "pair set relation {} does not match covariance relation {}",
                pairs.relation().tag(),
                cov.relation.tag()
            )));
        }
        if cov.sigma.nrows() != l || cov.sigma.ncols() != l {
            return Err(Error::DimensionMismatch(format!(
                "covariance block is {}x{}, layout wants {}x{}",
                cov.sigma.nrows(),
                cov.sigma.ncols(),
                l,
                l
            )));
        }
        has_mv |= pairs.relation() == Relation::Mv;
        let mut relation_blocks: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        for &(j, k) in pairs.pairs() {
            let ji = layout.cell_index(j)?;
            let ki = layout.cell_index(k)?;
            if (ji + 1) * l > layout.appearance_len() || (ki + 1) * l > layout.appearance_len() {
                return Err(Error::Internal(
                    "cell pair maps onto bias slots".into(),
                ));
            }
            relation_blocks.insert((ji, ki), cov.sigma.clone());
            relation_blocks.insert((ki, ji), cov.sigma.transpose());
        }
        for (key, block) in relation_blocks {
            total
                .entry(key)
                .and_modify(|b| *b += &block)
                .or_insert(block);
        }
    }
    let sigma = SigmaMatrix {
        layout: layout.clone(),
        kind: if has_mv { SigmaKind::Mv } else { SigmaKind::Sv },
        mask: MaskVariant::None,
        sources: 0,
        storage: Storage::Sparse(total),
    };
    sigma.check_invariants()?;
    Ok(sigma)
}

/// Dense empirical prior `Sigma_emp = (1/N) sum_i w_i w_i'` over whole
/// source parameter vectors, with bias rows and columns zeroed. Rank is at
/// most `N`.
pub fn compute_dense_sigma(sources: &[MultiViewModel]) -> Result<SigmaMatrix> {
    let first = sources.first().ok_or(Error::NoSources)?;
    let layout = first.layout().clone();
    if let Some(bad) = sources.iter().find(|s| *s.layout() != layout) {
        return Err(Error::LayoutMismatch(format!(
            "source model layouts differ: {:?} vs {:?}",
            layout,
            bad.layout()
        )));
    }
    let p = layout.param_count();
    let mut dense = DMatrix::zeros(p, p);
    for source in sources {
        let w = DVector::from_row_slice(source.params());
        dense.ger(1.0 / sources.len() as f64, &w, &w, 1.0);
    }
    for slot in layout.appearance_len()..p {
        dense.row_mut(slot).fill(0.0);
        dense.column_mut(slot).fill(0.0);
    }
    let sigma = SigmaMatrix {
        layout,
        kind: SigmaKind::Dense,
        mask: MaskVariant::None,
        sources: sources.len(),
        storage: Storage::Dense(dense),
    };
    sigma.check_invariants()?;
    Ok(sigma)
}

/// Applies a view-block mask: block `(i, j)` of views survives per the
/// variant's predicate, everything else is zeroed, and the result is
/// re-symmetrized as `(M + M') / 2`. The `none` variant returns the input
/// unchanged.
pub fn apply_mask(sigma: &SigmaMatrix, mask: &MaskSpec) -> Result<SigmaMatrix> {
    mask.validate(&sigma.layout)?;
    if mask.variant == MaskVariant::None {
        return Ok(sigma.clone());
    }
    let layout = &sigma.layout;
    let per_view = layout.cells_per_view();
    let storage = match &sigma.storage {
        Storage::Sparse(blocks) => {
            let kept: BTreeMap<(usize, usize), DMatrix<f64>> = blocks
                .iter()
                .filter(|(&(j, k), _)| mask.keeps(layout, j / per_view, k / per_view))
                .map(|(&key, block)| (key, block.clone()))
                .collect();
            // (M + M')/2 at block granularity: average each block with the
            // transpose of its mirror (zero when the mirror was dropped,
            // which cannot happen for the symmetric predicates above).
            let keys: BTreeSet<(usize, usize)> = kept
                .keys()
                .flat_map(|&(j, k)| [(j, k), (k, j)])
                .collect();
            let l = layout.cell_dim();
            let zero = DMatrix::zeros(l, l);
            let sym: BTreeMap<(usize, usize), DMatrix<f64>> = keys
                .into_iter()
                .map(|(j, k)| {
                    let fwd = kept.get(&(j, k)).unwrap_or(&zero);
                    let mirrored = kept.get(&(k, j)).unwrap_or(&zero).transpose();
                    ((j, k), (fwd + mirrored) / 2.0)
                })
                .collect();
            Storage::Sparse(sym)
        }
        Storage::Dense(m) => {
            let mut masked = m.clone();
            let l = layout.cell_dim();
            let block = per_view * l;
            for i in 0..layout.views() {
                for j in 0..layout.views() {
                    if !mask.keeps(layout, i, j) {
                        masked.view_mut((i * block, j * block), (block, block)).fill(0.0);
                    }
                }
            }
            let sym = (&masked + masked.transpose()) / 2.0;
            Storage::Dense(sym)
        }
    };
    let out = SigmaMatrix {
        layout: sigma.layout.clone(),
        kind: sigma.kind,
        mask: mask.variant,
        sources: sigma.sources,
        storage,
    };
    out.check_invariants()?;
    Ok(out)
}
