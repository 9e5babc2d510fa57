//! Multi-view template parameterization: the flattened parameter vector
//! layout shared by every other module, plus model persistence.
//!
//! A model stacks `V` per-view cell-grid templates of `n x m` cells with `L`
//! values per cell into one parameter vector. Ordering is view-major, then
//! row-major, then column, then channel; per-view biases (when enabled) are
//! appended at the end, one slot per view. Bias slots are never coupled by
//! the prior.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::ops::Range;
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};

const MODEL_MAGIC: &[u8; 8] = b"MVPMODEL";
const MODEL_VERSION: u32 = 1;

/// Geometry of a multi-view model: view count, azimuth bins, cell grid and
/// channel depth. Fixes the flattening of the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateLayout {
    views: usize,
    bins_deg: Vec<f64>,
    rows: usize,
    cols: usize,
    cell_dim: usize,
    per_view_bias: bool,
}

/// One cell position inside a multi-view model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellRef {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

impl CellRef {
    pub fn new(view: usize, row: usize, col: usize) -> Self {
        Self { view, row, col }
    }
}

impl TemplateLayout {
    /// Builds a layout with azimuth bins `i * 360/V` for `i = 0..V`.
    pub fn new(
        views: usize,
        rows: usize,
        cols: usize,
        cell_dim: usize,
        per_view_bias: bool,
    ) -> Result<Self> {
        let bins = (0..views).map(|i| i as f64 * 360.0 / views as f64).collect();
        Self::with_bins(views, bins, rows, cols, cell_dim, per_view_bias)
    }

    /// Builds a layout with explicit azimuth bin centers. Centers must lie in
    /// `[0, 360)`, be strictly increasing and uniformly spaced at `360/V`.
    pub fn with_bins(
        views: usize,
        bins_deg: Vec<f64>,
        rows: usize,
        cols: usize,
        cell_dim: usize,
        per_view_bias: bool,
    ) -> Result<Self> {
        if views == 0 || rows == 0 || cols == 0 || cell_dim == 0 {
            return Err(Error::InvalidArgument(
                "layout dimensions must all be >= 1".into(),
            ));
        }
        if bins_deg.len() != views {
            return Err(Error::InvalidArgument(format!(
                "expected {views} azimuth bins, got {}",
                bins_deg.len()
            )));
        }
        let spacing = 360.0 / views as f64;
        for (i, &b) in bins_deg.iter().enumerate() {
            if !(0.0..360.0).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "azimuth bin {i} = {b} outside [0, 360)"
                )));
            }
            if i > 0 {
                let step = b - bins_deg[i - 1];
                if step <= 0.0 || (step - spacing).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "azimuth bins must increase by {spacing} deg, got step {step}"
                    )));
                }
            }
        }
        Ok(Self {
            views,
            bins_deg,
            rows,
            cols,
            cell_dim,
            per_view_bias,
        })
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_dim(&self) -> usize {
        self.cell_dim
    }

    pub fn per_view_bias(&self) -> bool {
        self.per_view_bias
    }

    /// Azimuth bin centers in degrees.
    pub fn bins_deg(&self) -> &[f64] {
        &self.bins_deg
    }

    /// Cells in one view template.
    pub fn cells_per_view(&self) -> usize {
        self.rows * self.cols
    }

    /// Cells across all views.
    pub fn cell_count(&self) -> usize {
        self.views * self.cells_per_view()
    }

    /// Parameter slots taken by appearance cells (bias slots excluded).
    pub fn appearance_len(&self) -> usize {
        self.cell_count() * self.cell_dim
    }

    /// Total parameter count `P`.
    pub fn param_count(&self) -> usize {
        self.appearance_len() + if self.per_view_bias { self.views } else { 0 }
    }

    pub fn check_cell(&self, cell: CellRef) -> Result<()> {
        if cell.view >= self.views || cell.row >= self.rows || cell.col >= self.cols {
            return Err(Error::IndexOutOfRange(format!(
                "cell (v{}, r{}, c{}) outside {}x{}x{} layout",
                cell.view, cell.row, cell.col, self.views, self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Linear cell index in view-major, row-major, column order.
    pub fn cell_index(&self, cell: CellRef) -> Result<usize> {
        self.check_cell(cell)?;
        Ok((cell.view * self.rows + cell.row) * self.cols + cell.col)
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    pub fn cell_at(&self, index: usize) -> Result<CellRef> {
        if index >= self.cell_count() {
            return Err(Error::IndexOutOfRange(format!(
                "cell index {index} >= {}",
                self.cell_count()
            )));
        }
        let per_view = self.cells_per_view();
        let view = index / per_view;
        let rest = index % per_view;
        Ok(CellRef::new(view, rest / self.cols, rest % self.cols))
    }

    /// Parameter interval `[start, start + L)` holding the given cell.
    pub fn param_range(&self, cell: CellRef) -> Result<Range<usize>> {
        let start = self.cell_index(cell)? * self.cell_dim;
        Ok(start..start + self.cell_dim)
    }

    /// Parameter slot of view `v`'s bias, if the layout carries biases.
    pub fn bias_slot(&self, view: usize) -> Result<Option<usize>> {
        if view >= self.views {
            return Err(Error::IndexOutOfRange(format!(
                "view {view} >= {}",
                self.views
            )));
        }
        Ok(self
            .per_view_bias
            .then(|| self.appearance_len() + view))
    }

    /// Parameter interval of view `v`'s full appearance block (`n*m*L` slots).
    pub fn view_range(&self, view: usize) -> Result<Range<usize>> {
        if view >= self.views {
            return Err(Error::IndexOutOfRange(format!(
                "view {view} >= {}",
                self.views
            )));
        }
        let block = self.cells_per_view() * self.cell_dim;
        Ok(view * block..(view + 1) * block)
    }

    /// True when slot `p` is a bias slot.
    pub fn is_bias_slot(&self, p: usize) -> bool {
        self.per_view_bias && p >= self.appearance_len() && p < self.param_count()
    }

    /// Cyclic distance between two views on the azimuth circle, in bins.
    pub fn cyclic_view_distance(&self, a: usize, b: usize) -> usize {
        let d = a.abs_diff(b) % self.views;
        d.min(self.views - d)
    }
}

/// Stacked parameter vector of `V` per-view templates plus per-view biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewModel {
    layout: TemplateLayout,
    params: Vec<f64>,
    meta: String,
}

/// Per-view template block extracted out of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSlice {
    pub view: usize,
    /// `n * m * L` appearance values in row-major, column, channel order.
    pub template: Vec<f64>,
    pub bias: Option<f64>,
}

impl MultiViewModel {
    pub fn new(layout: TemplateLayout, params: Vec<f64>, meta: impl Into<String>) -> Result<Self> {
        if params.len() != layout.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} params, got {}",
                layout.param_count(),
                params.len()
            )));
        }
        if let Some(bad) = params.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite parameter value {bad}"
            )));
        }
        Ok(Self {
            layout,
            params,
            meta: meta.into(),
        })
    }

    pub fn zeros(layout: TemplateLayout, meta: impl Into<String>) -> Self {
        let params = vec![0.0; layout.param_count()];
        Self {
            layout,
            params,
            meta: meta.into(),
        }
    }

    pub fn layout(&self) -> &TemplateLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn meta(&self) -> &str {
        &self.meta
    }

    /// Appearance vector of one cell.
    pub fn cell(&self, cell: CellRef) -> Result<&[f64]> {
        let range = self.layout.param_range(cell)?;
        Ok(&self.params[range])
    }

    /// Extracts view `v`'s template block and bias.
    pub fn slice_view(&self, view: usize) -> Result<ViewSlice> {
        let range = self.layout.view_range(view)?;
        let bias = match self.layout.bias_slot(view)? {
            Some(slot) => Some(self.params[slot]),
            None => None,
        };
        Ok(ViewSlice {
            view,
            template: self.params[range].to_vec(),
            bias,
        })
    }

    /// Rebuilds the parameter vector from all `V` view slices. Inverse of
    /// [`slice_view`](Self::slice_view) applied across views.
    pub fn from_view_slices(
        layout: TemplateLayout,
        slices: &[ViewSlice],
        meta: impl Into<String>,
    ) -> Result<Self> {
        if slices.len() != layout.views() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} view slices, got {}",
                layout.views(),
                slices.len()
            )));
        }
        let mut params = vec![0.0; layout.param_count()];
        for slice in slices {
            let range = layout.view_range(slice.view)?;
            if slice.template.len() != range.len() {
                return Err(Error::DimensionMismatch(format!(
                    "view {} template has {} values, expected {}",
                    slice.view,
                    slice.template.len(),
                    range.len()
                )));
            }
            params[range].copy_from_slice(&slice.template);
            match (layout.bias_slot(slice.view)?, slice.bias) {
                (Some(slot), Some(b)) => params[slot] = b,
                (None, None) => {}
                _ => {
                    return Err(Error::DimensionMismatch(
                        "bias presence disagrees with layout".into(),
                    ))
                }
            }
        }
        Self::new(layout, params, meta)
    }

    /// Writes the model to `path`.
    ///
    /// Format (all integers and floats little-endian):
    /// magic `MVPMODEL`, version u32, V u32, n u32, m u32, L u32,
    /// bias flag u8, V azimuth bins f64, meta string (u32 length + UTF-8),
    /// param count u64, P raw f64 values.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        binio::write_magic(&mut w, MODEL_MAGIC, MODEL_VERSION)?;
        binio::write_u32(&mut w, self.layout.views as u32)?;
        binio::write_u32(&mut w, self.layout.rows as u32)?;
        binio::write_u32(&mut w, self.layout.cols as u32)?;
        binio::write_u32(&mut w, self.layout.cell_dim as u32)?;
        binio::write_u8(&mut w, self.layout.per_view_bias as u8)?;
        binio::write_f64_slice(&mut w, &self.layout.bins_deg)?;
        binio::write_string(&mut w, &self.meta)?;
        binio::write_u64(&mut w, self.params.len() as u64)?;
        binio::write_f64_slice(&mut w, &self.params)?;
        Ok(())
    }

    /// Reads a model written by [`save`](Self::save).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        binio::check_magic(&mut r, MODEL_MAGIC, MODEL_VERSION)?;
        let views = binio::read_u32(&mut r)? as usize;
        let rows = binio::read_u32(&mut r)? as usize;
        let cols = binio::read_u32(&mut r)? as usize;
        let cell_dim = binio::read_u32(&mut r)? as usize;
        let per_view_bias = binio::read_u8(&mut r)? != 0;
        let bins = binio::read_f64_vec(&mut r, views)?;
        let layout = TemplateLayout::with_bins(views, bins, rows, cols, cell_dim, per_view_bias)
            .map_err(|e| Error::Format(format!("bad layout header: {e}")))?;
        let meta = binio::read_string(&mut r)?;
        let count = binio::read_u64(&mut r)? as usize;
        if count != layout.param_count() {
            return Err(Error::Format(format!(
                "header declares {count} params but layout requires {}",
                layout.param_count()
            )));
        }
        let params = binio::read_f64_vec(&mut r, count)?;
        Self::new(layout, params, meta)
    }
}
