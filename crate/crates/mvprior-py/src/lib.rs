//! Python bindings for the mvprior crate.
//!
//! The module mirrors the library's main path: build a template layout,
//! wrap trained models, estimate a prior from an ensemble, train a target
//! detector against it, run the detector over a feature map, and score the
//! detections. `run_protocol` drives the whole synthetic experiment from a
//! TOML string and returns the result table as CSV.
//!
//! Conversions are plain Python data: feature vectors are lists of floats,
//! detections are `(x, y, w, h, score, view)` tuples, ground truths are
//! `(x, y, w, h, view, difficult)` tuples. Library errors surface as
//! `ValueError` (`IOError` for file problems).

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mvprior::config::ExperimentConfig;
use mvprior::eval::{
    self, Detection, EvalReport, EvalSample, FeatureMap, GroundTruthBox, PixelBox,
    DEFAULT_CELL_SIZE,
};
use mvprior::model::{MultiViewModel, TemplateLayout};
use mvprior::prior::{MaskSpec, MaskVariant, SigmaMatrix};
use mvprior::regularizer::{self, FactorMethod};
use mvprior::synth::{self, build_prior_sigma, generate_world, PriorKind};
use mvprior::trainer::{
    self, stack_examples, LabeledWindow, LabeledWindowSet, TrainConfig,
};

fn to_py(err: mvprior::Error) -> PyErr {
    match &err {
        mvprior::Error::Io(_) => PyIOError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

/// Grid shape of a multi-view template: per-view `rows x cols` cells of
/// `cell_dim` features, plus an optional per-view bias slot.
#[pyclass(module = "mvprior_py", skip_from_py_object)]
#[derive(Clone)]
struct Layout {
    inner: TemplateLayout,
}

#[pymethods]
impl Layout {
    #[new]
    #[pyo3(signature = (views, rows, cols, cell_dim, per_view_bias = true))]
    fn new(
        views: usize,
        rows: usize,
        cols: usize,
        cell_dim: usize,
        per_view_bias: bool,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: TemplateLayout::new(views, rows, cols, cell_dim, per_view_bias)
                .map_err(to_py)?,
        })
    }

    #[getter]
    fn views(&self) -> usize {
        self.inner.views()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    #[getter]
    fn cell_dim(&self) -> usize {
        self.inner.cell_dim()
    }

    #[getter]
    fn per_view_bias(&self) -> bool {
        self.inner.per_view_bias()
    }

    /// Total parameter count: views * rows * cols * cell_dim (+ biases).
    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Viewpoint bin centers in degrees, one per view.
    #[getter]
    fn bins_deg(&self) -> Vec<f64> {
        self.inner.bins_deg().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Layout(views={}, rows={}, cols={}, cell_dim={}, per_view_bias={})",
            self.inner.views(),
            self.inner.rows(),
            self.inner.cols(),
            self.inner.cell_dim(),
            if self.inner.per_view_bias() { "True" } else { "False" }
        )
    }
}

/// A linear multi-view template: one weight vector over the layout.
#[pyclass(module = "mvprior_py", from_py_object)]
#[derive(Clone)]
struct Model {
    inner: MultiViewModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (layout, params, meta = ""))]
    fn new(layout: &Layout, params: Vec<f64>, meta: &str) -> PyResult<Self> {
        Ok(Self {
            inner: MultiViewModel::new(layout.inner.clone(), params, meta).map_err(to_py)?,
        })
    }

    /// All-zero model over the layout.
    #[staticmethod]
    #[pyo3(signature = (layout, meta = ""))]
    fn zeros(layout: &Layout, meta: &str) -> Self {
        Self {
            inner: MultiViewModel::zeros(layout.inner.clone(), meta),
        }
    }

    #[getter]
    fn layout(&self) -> Layout {
        Layout {
            inner: self.inner.layout().clone(),
        }
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().to_vec()
    }

    #[getter]
    fn meta(&self) -> String {
        self.inner.meta().to_string()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: MultiViewModel::load(path).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(P={}, meta={:?})",
            self.inner.params().len(),
            self.inner.meta()
        )
    }
}

/// Parameter covariance estimated from a source-model ensemble; the raw
/// material of the regularizer.
#[pyclass(module = "mvprior_py")]
struct Prior {
    inner: SigmaMatrix,
}

fn mask_spec(mask: &str, data_views: Option<Vec<usize>>) -> PyResult<MaskSpec> {
    let variant = MaskVariant::parse(mask).map_err(to_py)?;
    Ok(match data_views {
        None if variant == MaskVariant::None => MaskSpec::none(),
        None => {
            return Err(PyValueError::new_err(format!(
                "mask {mask:?} needs data_views: the list of views with training data"
            )))
        }
        Some(views) => MaskSpec::new(variant, views),
    })
}

#[pymethods]
impl Prior {
    /// The zero matrix: regularization falls back to plain ||w||^2.
    #[staticmethod]
    fn none(layout: &Layout) -> Self {
        Self {
            inner: SigmaMatrix::zero(layout.inner.clone()),
        }
    }

    /// Dense second-moment matrix `(1/N) sum w w'` of the ensemble, with
    /// bias rows and columns zeroed. Rank is at most the ensemble size.
    #[staticmethod]
    #[pyo3(signature = (models, mask = "none", data_views = None))]
    fn dense(models: Vec<Model>, mask: &str, data_views: Option<Vec<usize>>) -> PyResult<Self> {
        Self::build(models, PriorKind::Dense, mask, data_views)
    }

    /// Structured prior from grid relations (same cell, horizontal,
    /// vertical, both diagonals), optionally adding cross-view pairs found
    /// by back-projecting cells onto the default ellipsoid.
    #[staticmethod]
    #[pyo3(signature = (models, cross_view = false, mask = "none", data_views = None))]
    fn structured(
        models: Vec<Model>,
        cross_view: bool,
        mask: &str,
        data_views: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let kind = if cross_view { PriorKind::Mv } else { PriorKind::Sv };
        Self::build(models, kind, mask, data_views)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// `"none"`, `"dense"`, `"sv"` or `"mv"`.
    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().tag()
    }

    #[getter]
    fn mask(&self) -> &'static str {
        self.inner.mask().tag()
    }

    /// Ensemble size the estimate came from (0 for the zero prior).
    #[getter]
    fn sources(&self) -> usize {
        self.inner.sources()
    }

    /// The full matrix as a list of rows.
    fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = self.inner.to_dense();
        (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SigmaMatrix::load(path).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Prior(kind={:?}, dim={}, sources={}, mask={:?})",
            self.inner.kind().tag(),
            self.inner.dim(),
            self.inner.sources(),
            self.inner.mask().tag()
        )
    }
}

impl Prior {
    fn build(
        models: Vec<Model>,
        kind: PriorKind,
        mask: &str,
        data_views: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let sources: Vec<MultiViewModel> = models.into_iter().map(|m| m.inner).collect();
        let first = sources
            .first()
            .ok_or_else(|| PyValueError::new_err("need at least one source model"))?;
        let layout = first.layout();
        // The stock car-like ellipsoid and its derived camera ring.
        let ellipsoid = mvprior::geometry::EllipsoidSpec::new(1.8, 0.9, 0.7).map_err(to_py)?;
        let camera = mvprior::geometry::CameraSpec::default_for(
            &ellipsoid,
            layout.bins_deg()[0],
            layout.cols(),
        )
        .map_err(to_py)?;
        let spec = mask_spec(mask, data_views)?;
        Ok(Self {
            inner: build_prior_sigma(&ellipsoid, &camera, &sources, kind, &spec)
                .map_err(to_py)?,
        })
    }
}

/// The quadratic penalty `K = I - lambda * Sigma`, scaled so the smallest
/// eigenvalue stays at 0.1 (with a lambda-halving fallback when a custom
/// starting point leaves `K` indefinite).
#[pyclass(module = "mvprior_py")]
struct Regularizer {
    inner: regularizer::Regularizer,
}

#[pymethods]
impl Regularizer {
    #[new]
    fn new(prior: &Prior) -> PyResult<Self> {
        Ok(Self {
            inner: regularizer::build_regularizer(prior.inner.clone()).map_err(to_py)?,
        })
    }

    /// The scale factor applied to the prior (0 when the prior is zero).
    #[getter]
    fn lam(&self) -> f64 {
        self.inner.lambda()
    }

    /// Largest eigenvalue of the prior.
    #[getter]
    fn e_max(&self) -> f64 {
        self.inner.e_max()
    }

    /// How many times lambda was halved before `K` factorized.
    #[getter]
    fn halvings(&self) -> u32 {
        self.inner.halvings()
    }

    #[getter]
    fn pd_certified(&self) -> bool {
        self.inner.pd_certified()
    }

    /// The penalty value `w' K w`.
    fn quad(&self, w: Vec<f64>) -> PyResult<f64> {
        let w = nalgebra::DVector::from_vec(w);
        self.inner.quad(&w).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Regularizer(dim={}, lam={}, e_max={}, halvings={})",
            self.inner.dim(),
            self.inner.lambda(),
            self.inner.e_max(),
            self.inner.halvings()
        )
    }
}

/// A dense feature map: `rows x cols` cells of `depth` features, row-major
/// with the feature index fastest.
#[pyclass(module = "mvprior_py", skip_from_py_object)]
#[derive(Clone)]
struct Map {
    inner: FeatureMap,
}

#[pymethods]
impl Map {
    #[new]
    #[pyo3(signature = (id, rows, cols, depth, data, cell_size = DEFAULT_CELL_SIZE))]
    fn new(
        id: &str,
        rows: usize,
        cols: usize,
        depth: usize,
        data: Vec<f64>,
        cell_size: u32,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: FeatureMap::new(id, rows, cols, depth, cell_size, data).map_err(to_py)?,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    /// Pixel edge length of one cell; detection boxes come back in pixels.
    #[getter]
    fn cell_size(&self) -> u32 {
        self.inner.cell_size()
    }

    fn get(&self, r: usize, c: usize, l: usize) -> f64 {
        self.inner.get(r, c, l)
    }

    fn set(&mut self, r: usize, c: usize, l: usize, value: f64) -> PyResult<()> {
        self.inner.set(r, c, l, value).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: FeatureMap::load(path).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Map(id={:?}, rows={}, cols={}, depth={})",
            self.inner.id(),
            self.inner.rows(),
            self.inner.cols(),
            self.inner.depth()
        )
    }
}

/// Everything one evaluation measures.
#[pyclass(module = "mvprior_py")]
struct Report {
    inner: EvalReport,
}

#[pymethods]
impl Report {
    /// Average precision of localization alone.
    #[getter]
    fn ap(&self) -> f64 {
        self.inner.ap
    }

    /// Fraction of true positives with the right viewpoint bin.
    #[getter]
    fn vp(&self) -> f64 {
        self.inner.vp
    }

    /// AP where a true positive only counts with the exact bin.
    #[getter]
    fn ap_vp_d(&self) -> f64 {
        self.inner.ap_vp_d
    }

    /// AP with true positives weighted by cyclic angular closeness.
    #[getter]
    fn ap_vp_c(&self) -> f64 {
        self.inner.ap_vp_c
    }

    #[getter]
    fn true_positives(&self) -> usize {
        self.inner.true_positives
    }

    /// Non-difficult ground truths: the recall denominator.
    #[getter]
    fn positives(&self) -> usize {
        self.inner.positives
    }

    #[getter]
    fn iou_thresh(&self) -> f64 {
        self.inner.iou_thresh
    }

    /// Confusion counts over true positives: `confusion()[gt][estimated]`.
    fn confusion(&self) -> Vec<Vec<u64>> {
        let c = &self.inner.confusion;
        (0..c.views())
            .map(|g| (0..c.views()).map(|d| c.at(g, d)).collect())
            .collect()
    }

    /// `(recall, precision)` per rank of the plain AP computation.
    fn pr(&self) -> Vec<(f64, f64)> {
        self.inner
            .pr_points
            .iter()
            .map(|p| (p.recall, p.precision))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(ap={:.4}, vp={:.4}, ap_vp_d={:.4}, ap_vp_c={:.4}, tp={}, positives={})",
            self.inner.ap,
            self.inner.vp,
            self.inner.ap_vp_d,
            self.inner.ap_vp_c,
            self.inner.true_positives,
            self.inner.positives
        )
    }
}

/// Trains a detector on labeled windows under the prior.
///
/// `positives` are `(features, view)` pairs, `negatives` bare feature
/// lists; every window must have `rows * cols * cell_dim` entries. The
/// `route` picks the solver path: `"direct"` works on the raw objective,
/// `"transformed"` whitens the features first; both reach the same optimum.
#[pyfunction]
#[pyo3(signature = (
    layout, positives, negatives, prior = None,
    c = 0.002, tolerance = 1e-6, max_passes = 2000, seed = 0, route = "direct"
))]
#[allow(clippy::too_many_arguments)]
fn train(
    layout: &Layout,
    positives: Vec<(Vec<f64>, usize)>,
    negatives: Vec<Vec<f64>>,
    prior: Option<&Prior>,
    c: f64,
    tolerance: f64,
    max_passes: usize,
    seed: u64,
    route: &str,
) -> PyResult<Model> {
    let layout = &layout.inner;
    let mut windows = Vec::with_capacity(positives.len() + negatives.len());
    for (features, view) in positives {
        windows.push(LabeledWindow::positive(features, view));
    }
    for features in negatives {
        windows.push(LabeledWindow::negative(features));
    }
    let set = LabeledWindowSet::new(layout.clone(), windows).map_err(to_py)?;
    let examples = stack_examples(&set);
    let sigma = match prior {
        Some(p) => p.inner.clone(),
        None => SigmaMatrix::zero(layout.clone()),
    };
    let reg = regularizer::build_regularizer(sigma).map_err(to_py)?;
    let cfg = TrainConfig {
        c,
        tolerance,
        max_passes,
        seed,
    };
    let (model, _log) = match route {
        "direct" => trainer::train_direct(layout, &examples, &reg, &cfg).map_err(to_py)?,
        "transformed" => {
            let fac = regularizer::factorize(&reg, FactorMethod::Cholesky).map_err(to_py)?;
            trainer::train_transformed(layout, &examples, &fac, &cfg).map_err(to_py)?
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "route must be \"direct\" or \"transformed\", got {other:?}"
            )))
        }
    };
    Ok(Model { inner: model })
}

/// The trained objective `w' K w + C * sum hinge` of a model on a window
/// set, under the same prior and `c` used for training.
#[pyfunction]
#[pyo3(signature = (model, positives, negatives, prior = None, c = 0.002))]
fn objective(
    model: &Model,
    positives: Vec<(Vec<f64>, usize)>,
    negatives: Vec<Vec<f64>>,
    prior: Option<&Prior>,
    c: f64,
) -> PyResult<f64> {
    let layout = model.inner.layout();
    let mut windows = Vec::with_capacity(positives.len() + negatives.len());
    for (features, view) in positives {
        windows.push(LabeledWindow::positive(features, view));
    }
    for features in negatives {
        windows.push(LabeledWindow::negative(features));
    }
    let set = LabeledWindowSet::new(layout.clone(), windows).map_err(to_py)?;
    let examples = stack_examples(&set);
    let sigma = match prior {
        Some(p) => p.inner.clone(),
        None => SigmaMatrix::zero(layout.clone()),
    };
    let reg = regularizer::build_regularizer(sigma).map_err(to_py)?;
    let cfg = TrainConfig {
        c,
        ..TrainConfig::default()
    };
    trainer::objective(&model.inner, &examples, &reg, &cfg).map_err(to_py)
}

/// Runs the detector over every placement on the map. Returns detections
/// as `(x, y, w, h, score, view)` tuples in pixel coordinates, ranked by
/// score with deterministic tie-breaks, after greedy non-maximum
/// suppression at `nms_iou`.
#[pyfunction]
fn detect(
    model: &Model,
    map: &Map,
    score_threshold: f64,
    nms_iou: f64,
) -> PyResult<Vec<(f64, f64, f64, f64, f64, usize)>> {
    let dets = eval::detect(&model.inner, &map.inner, score_threshold, nms_iou).map_err(to_py)?;
    Ok(dets
        .into_iter()
        .map(|d| {
            (
                d.bbox.x,
                d.bbox.y,
                d.bbox.width,
                d.bbox.height,
                d.score,
                d.view,
            )
        })
        .collect())
}

/// Scores detections against ground truths over a set of samples.
///
/// Each sample is a pair `(detections, truths)`: detections as
/// `(x, y, w, h, score, view)` tuples, truths as
/// `(x, y, w, h, view, difficult)` tuples. `bins_deg` gives the viewpoint
/// bin centers in degrees; a detection matches a truth at IoU >= `iou`.
#[pyfunction]
#[pyo3(signature = (samples, bins_deg, iou = 0.5))]
#[allow(clippy::type_complexity)]
fn evaluate(
    samples: Vec<(
        Vec<(f64, f64, f64, f64, f64, usize)>,
        Vec<(f64, f64, f64, f64, usize, bool)>,
    )>,
    bins_deg: Vec<f64>,
    iou: f64,
) -> PyResult<Report> {
    let mut converted = Vec::with_capacity(samples.len());
    for (dets, gts) in samples {
        let detections = dets
            .into_iter()
            .map(|(x, y, w, h, score, view)| {
                Detection::new(PixelBox::new(x, y, w, h)?, score, view)
            })
            .collect::<mvprior::Result<Vec<_>>>()
            .map_err(to_py)?;
        let truths = gts
            .into_iter()
            .map(|(x, y, w, h, view, difficult)| {
                let gt = GroundTruthBox::new(PixelBox::new(x, y, w, h)?, view, "object")?;
                Ok(if difficult { gt.difficult() } else { gt })
            })
            .collect::<mvprior::Result<Vec<_>>>()
            .map_err(to_py)?;
        converted.push(EvalSample::new(detections, truths));
    }
    Ok(Report {
        inner: eval::evaluate(&converted, &bins_deg, iou).map_err(to_py)?,
    })
}

/// Runs the full synthetic experiment described by a TOML configuration
/// string (an empty string uses the stock setup) and returns the protocol
/// table as CSV: one row per method, shot count and repetition, plus
/// mean/std aggregates. Identical input reproduces identical bytes.
#[pyfunction]
fn run_protocol(config_text: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::parse(config_text).map_err(to_py)?;
    let world = generate_world(&cfg.world_config().map_err(to_py)?).map_err(to_py)?;
    let spec = cfg.protocol_spec().map_err(to_py)?;
    let results = synth::run_protocol(&world, &spec).map_err(to_py)?;
    Ok(results.to_csv())
}

/// Python module exposing multi-view template training and evaluation.
#[pymodule]
fn mvprior_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Layout>()?;
    m.add_class::<Model>()?;
    m.add_class::<Prior>()?;
    m.add_class::<Regularizer>()?;
    m.add_class::<Map>()?;
    m.add_class::<Report>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(objective, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_protocol, m)?)?;
    Ok(())
}
