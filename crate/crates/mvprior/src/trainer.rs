//! Regularized SVM training of multi-view models.
//!
//! The objective is `F(w) = w'Kw + sum_i C_i * max(0, 1 - y_i w'x_i)` with
//! `C_i = C * weight_i` and `K` a certified regularizer. Labeled windows
//! become stacked examples over the full parameter vector: a positive of
//! view `v` occupies view `v`'s block (bias slot set to 1), a negative is
//! replicated into every view's block so each template must reject it. The
//! prior is then the only cross-view coupling.
//!
//! Two equivalent solvers are provided. `train_transformed` whitens the
//! examples with `x~ = U^-T x`, runs dual coordinate descent on the plain
//! squared-norm objective and maps the solution back through `U w = w~`.
//! `train_direct` runs the same dual ascent on the original objective using
//! precomputed `s_i = K^-1 x_i / 2` directions. Both use a seeded per-pass
//! shuffle and stop on a relative duality gap, so they are deterministic
//! and agree in objective value to solver tolerance.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::error::{Error, Result};
use crate::model::{MultiViewModel, TemplateLayout};
use crate::regularizer::{factorize, FactorMethod, Factorization, Regularizer};
use crate::seeding;

const WINDOWS_MAGIC: &[u8; 8] = b"MVPWINDS";
const WINDOWS_VERSION: u32 = 1;

/// Label of one training window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowLabel {
    /// Object window seen from azimuth bin `view`.
    Positive { view: usize },
    /// Background window (rejected by every view template).
    Negative,
}

/// One training window: an `n x m x L` feature block in template order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub features: Vec<f64>,
    pub label: WindowLabel,
    pub weight: f64,
}

impl LabeledWindow {
    pub fn positive(features: Vec<f64>, view: usize) -> Self {
        Self {
            features,
            label: WindowLabel::Positive { view },
            weight: 1.0,
        }
    }

    pub fn negative(features: Vec<f64>) -> Self {
        Self {
            features,
            label: WindowLabel::Negative,
            weight: 1.0,
        }
    }
}

/// A collection of labeled windows tied to one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindowSet {
    layout: TemplateLayout,
    windows: Vec<LabeledWindow>,
}

impl LabeledWindowSet {
    pub fn new(layout: TemplateLayout, windows: Vec<LabeledWindow>) -> Result<Self> {
        let block = layout.cells_per_view() * layout.cell_dim();
        for (i, w) in windows.iter().enumerate() {
            if w.features.len() != block {
                return Err(Error::DimensionMismatch(format!(
                    "window {i} has {} features, layout block needs {block}",
                    w.features.len()
                )));
            }
            if w.features.iter().any(|v| !v.is_finite()) || !w.weight.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "window {i} carries non-finite values"
                )));
            }
            if let WindowLabel::Positive { view } = w.label {
                if view >= layout.views() {
                    return Err(Error::IndexOutOfRange(format!(
                        "window {i} labeled with view {view} >= {}",
                        layout.views()
                    )));
                }
            }
        }
        Ok(Self { layout, windows })
    }

    pub fn layout(&self) -> &TemplateLayout {
        &self.layout
    }

    pub fn windows(&self) -> &[LabeledWindow] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Indices of positives of the given view, in dataset order.
    pub fn positives_of_view(&self, view: usize) -> Vec<usize> {
        self.windows
            .iter()
            .enumerate()
            .filter(|(_, w)| w.label == WindowLabel::Positive { view })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn negative_count(&self) -> usize {
        self.windows
            .iter()
            .filter(|w| w.label == WindowLabel::Negative)
            .count()
    }

    /// Writes the window set to `path`.
    ///
    /// Format: magic `MVPWINDS`, version u32, layout header as in the model
    /// format, window count u64, then per window label u8 (1 = positive),
    /// view u32 (0 for negatives), weight f64 and the feature block f64s.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        binio::write_magic(&mut w, WINDOWS_MAGIC, WINDOWS_VERSION)?;
        binio::write_u32(&mut w, self.layout.views() as u32)?;
        binio::write_u32(&mut w, self.layout.rows() as u32)?;
        binio::write_u32(&mut w, self.layout.cols() as u32)?;
        binio::write_u32(&mut w, self.layout.cell_dim() as u32)?;
        binio::write_u8(&mut w, self.layout.per_view_bias() as u8)?;
        binio::write_f64_slice(&mut w, self.layout.bins_deg())?;
        binio::write_u64(&mut w, self.windows.len() as u64)?;
        for win in &self.windows {
            match win.label {
                WindowLabel::Positive { view } => {
                    binio::write_u8(&mut w, 1)?;
                    binio::write_u32(&mut w, view as u32)?;
                }
                WindowLabel::Negative => {
                    binio::write_u8(&mut w, 0)?;
                    binio::write_u32(&mut w, 0)?;
                }
            }
            binio::write_f64(&mut w, win.weight)?;
            binio::write_f64_slice(&mut w, &win.features)?;
        }
        Ok(())
    }

    /// Reads a window set written by [`save`](Self::save).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        binio::check_magic(&mut r, WINDOWS_MAGIC, WINDOWS_VERSION)?;
        let views = binio::read_u32(&mut r)? as usize;
        let rows = binio::read_u32(&mut r)? as usize;
        let cols = binio::read_u32(&mut r)? as usize;
        let cell_dim = binio::read_u32(&mut r)? as usize;
        let per_view_bias = binio::read_u8(&mut r)? != 0;
        let bins = binio::read_f64_vec(&mut r, views)?;
        let layout = TemplateLayout::with_bins(views, bins, rows, cols, cell_dim, per_view_bias)
            .map_err(|e| Error::Format(format!("bad layout header: {e}")))?;
        let count = binio::read_u64(&mut r)? as usize;
        let block = layout.cells_per_view() * layout.cell_dim();
        let mut windows = Vec::with_capacity(count);
        for _ in 0..count {
            let is_pos = binio::read_u8(&mut r)? != 0;
            let view = binio::read_u32(&mut r)? as usize;
            let weight = binio::read_f64(&mut r)?;
            let features = binio::read_f64_vec(&mut r, block)?;
            let label = if is_pos {
                WindowLabel::Positive { view }
            } else {
                WindowLabel::Negative
            };
            windows.push(LabeledWindow {
                features,
                label,
                weight,
            });
        }
        Self::new(layout, windows).map_err(|e| Error::Format(format!("bad window data: {e}")))
    }
}

/// A window placed into one view's slot range of the full parameter vector,
/// with its sign. Support is confined to that view's block and bias slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedExample {
    pub view: usize,
    pub features: Vec<f64>,
    /// +1 or -1.
    pub y: f64,
    pub weight: f64,
}

impl StackedExample {
    /// `w' x` exploiting the single-block support.
    pub fn dot(&self, layout: &TemplateLayout, w: &DVector<f64>) -> f64 {
        let range = layout.view_range(self.view).expect("validated view");
        let mut acc = 0.0;
        for (offset, &f) in self.features.iter().enumerate() {
            acc += w[range.start + offset] * f;
        }
        if let Some(slot) = layout.bias_slot(self.view).expect("validated view") {
            acc += w[slot];
        }
        acc
    }

    /// Dense length-`P` vector with the block (and bias 1) filled in.
    pub fn to_dense(&self, layout: &TemplateLayout) -> DVector<f64> {
        let mut x = DVector::zeros(layout.param_count());
        let range = layout.view_range(self.view).expect("validated view");
        x.rows_mut(range.start, range.len())
            .copy_from_slice(&self.features);
        if let Some(slot) = layout.bias_slot(self.view).expect("validated view") {
            x[slot] = 1.0;
        }
        x
    }
}

/// Solver configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Hinge-loss coefficient.
    pub c: f64,
    /// Relative duality-gap stopping threshold.
    pub tolerance: f64,
    /// Hard cap on coordinate-descent passes.
    pub max_passes: usize,
    /// Seed of the per-pass shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c: 0.002,
            tolerance: 1e-6,
            max_passes: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "C must be positive, got {}",
                self.c
            )));
        }
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_passes == 0 {
            return Err(Error::InvalidArgument("max_passes must be >= 1".into()));
        }
        Ok(())
    }
}

/// One logged solver pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassStats {
    pub pass: usize,
    /// Primal objective `w'Kw + sum C_i hinge_i`.
    pub primal: f64,
    /// Dual objective `sum alpha_i - w'Kw`; the quantity the solver ascends.
    pub dual: f64,
    /// Relative duality gap `(primal - dual) / (1 + |primal|)`.
    pub gap: f64,
}

/// Full training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub route: &'static str,
    pub passes: Vec<PassStats>,
    pub converged: bool,
}

impl TrainLog {
    pub fn final_primal(&self) -> f64 {
        self.passes.last().map(|p| p.primal).unwrap_or(f64::NAN)
    }

    pub fn final_gap(&self) -> f64 {
        self.passes.last().map(|p| p.gap).unwrap_or(f64::NAN)
    }

    /// CSV rendering with header `pass,primal,dual,gap`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pass,primal,dual,gap\n");
        for p in &self.passes {
            out.push_str(&format!("{},{},{},{}\n", p.pass, p.primal, p.dual, p.gap));
        }
        out
    }
}

/// Stacks labeled windows into signed examples over the full parameter
/// vector: positives land in their view's block once, negatives are
/// replicated into every view's block.
pub fn stack_examples(set: &LabeledWindowSet) -> Vec<StackedExample> {
    let views = set.layout().views();
    let mut out = Vec::new();
    for win in set.windows() {
        match win.label {
            WindowLabel::Positive { view } => out.push(StackedExample {
                view,
                features: win.features.clone(),
                y: 1.0,
                weight: win.weight,
            }),
            WindowLabel::Negative => {
                for view in 0..views {
                    out.push(StackedExample {
                        view,
                        features: win.features.clone(),
                        y: -1.0,
                        weight: win.weight,
                    });
                }
            }
        }
    }
    out
}

fn check_classes(examples: &[StackedExample]) -> Result<()> {
    if !examples.iter().any(|e| e.y > 0.0) {
        return Err(Error::EmptyClass("positive"));
    }
    if !examples.iter().any(|e| e.y < 0.0) {
        return Err(Error::EmptyClass("negative"));
    }
    Ok(())
}

/// Shared dual-coordinate-descent core.
///
///// Works in the direct alpha scale (box `[0, C_i]`) for both routes: the
/// caller supplies, per example, the margin `score(i, state)` and the state
/// update `state += delta * y_i * dir_i`, plus the quadratic term
/// `quad(state)`; the Newton denominator is `q_i` (= `x_i'K^-1 x_i / 2` in
/// both spaces). Dual ascent is monotone, so the recorded dual never
/// decreases; the loop stops when the relative gap drops under tolerance.
fn dual_coordinate_descent(
    state: &mut DVector<f64>,
    c_upper: &[f64],
    q: &[f64],
    cfg: &TrainConfig,
    score: impl Fn(usize, &DVector<f64>) -> f64,
    apply: impl Fn(usize, f64, &mut DVector<f64>),
    quad: impl Fn(&DVector<f64>) -> f64,
) -> (Vec<PassStats>, bool) {
    let n = c_upper.len();
    let mut alpha = vec![0.0_f64; n];
    // Examples with an empty feature vector (q = 0) contribute a constant
    // hinge of 1; their dual optimum is alpha = C with no state effect.
    for i in 0..n {
        if q[i] == 0.0 {
            alpha[i] = c_upper[i];
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut passes = Vec::new();
    let mut converged = false;
    for pass in 1..=cfg.max_passes {
        order.shuffle(&mut rng);
        for &i in &order {
            if q[i] == 0.0 {
                continue;
            }
            let g = score(i, state) - 1.0; // y_i w'x_i - 1
            // Projected-gradient skip at the box edges.
            if (alpha[i] <= 0.0 && g >= 0.0) || (alpha[i] >= c_upper[i] && g <= 0.0) {
                continue;
            }
            let updated = (alpha[i] - g / q[i]).clamp(0.0, c_upper[i]);
            let delta = updated - alpha[i];
            if delta != 0.0 {
                alpha[i] = updated;
                apply(i, delta, state);
            }
        }
        let quad_term = quad(state);
        let mut hinge_sum = 0.0;
        for i in 0..n {
            let margin = if q[i] == 0.0 { 0.0 } else { score(i, state) };
            hinge_sum += c_upper[i] * (1.0 - margin).max(0.0);
        }
        let primal = quad_term + hinge_sum;
        let dual = alpha.iter().sum::<f64>() - quad_term;
        let gap = (primal - dual) / (1.0 + primal.abs());
        passes.push(PassStats {
            pass,
            primal,
            dual,
            gap,
        });
        if gap <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    (passes, converged)
}

///// Trains by whitening: `x~ = U^-T x`, plain-norm dual coordinate descent
/// in the transformed space, then `w = U^-1 w~` back.
pub fn train_transformed(
    layout: &TemplateLayout,
    examples: &[StackedExample],
    fac: &Factorization,
    cfg: &TrainConfig,
) -> Result<(MultiViewModel, TrainLog)> {
    cfg.validate()?;
    check_classes(examples)?;
    if fac.dim() != layout.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "factorization dimension {} != layout parameters {}",
            fac.dim(),
            layout.param_count()
        )));
    }
    let p = layout.param_count();
    let z: Vec<DVector<f64>> = examples
        .iter()
        .map(|e| fac.transform_features(&e.to_dense(layout)))
        .collect::<Result<_>>()?;
    let c_upper: Vec<f64> = examples.iter().map(|e| cfg.c * e.weight).collect();
    // q_i = z_i'z_i / 2 = x_i' K^-1 x_i / 2, the direct-scale denominator.
    let q: Vec<f64> = z.iter().map(|zi| zi.norm_squared() / 2.0).collect();
    let mut v = DVector::zeros(p);
    let (passes, converged) = dual_coordinate_descent(
        &mut v,
        &c_upper,
        &q,
        cfg,
        |i, v| examples[i].y * v.dot(&z[i]),
        |i, delta, v| v.axpy(delta * examples[i].y / 2.0, &z[i], 1.0),
        |v| v.norm_squared(),
    );
    let w = fac.transform_model_back(&v)?;
    let model = MultiViewModel::new(
        layout.clone(),
        w.iter().copied().collect(),
        format!("trained route=transformed c={} seed={}", cfg.c, cfg.seed),
    )?;
    Ok((
        model,
        TrainLog {
            route: "transformed",
            passes,
            converged,
        },
    ))
}

/// Trains on the original objective with `s_i = K^-1 x_i / 2` update
/// directions (dual ascent never forms `K^-1` densely — only factor
/// solves).
pub fn train_direct(
    layout: &TemplateLayout,
    examples: &[StackedExample],
    reg: &Regularizer,
    cfg: &TrainConfig,
) -> Result<(MultiViewModel, TrainLog)> {
    cfg.validate()?;
    check_classes(examples)?;
    if reg.dim() != layout.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "regularizer dimension {} != layout parameters {}",
            reg.dim(),
            layout.param_count()
        )));
    }
    let fac = factorize(reg, FactorMethod::Cholesky)?;
    let c_upper: Vec<f64> = examples.iter().map(|e| cfg.c * e.weight).collect();
    let mut s = Vec::with_capacity(examples.len());
    let mut q = Vec::with_capacity(examples.len());
    for e in examples {
        let x = e.to_dense(layout);
        let si = fac.solve_k(&x)? / 2.0;
        q.push(x.dot(&si));
        s.push(si);
    }
    let mut w = DVector::zeros(layout.param_count());
    let (passes, converged) = dual_coordinate_descent(
        &mut w,
        &c_upper,
        &q,
        cfg,
        |i, w| examples[i].y * examples[i].dot(layout, w),
        |i, delta, w| w.axpy(delta * examples[i].y, &s[i], 1.0),
        |w| reg.quad(w).expect("dimension checked above"),
    );
    let model = MultiViewModel::new(
        layout.clone(),
        w.iter().copied().collect(),
        format!("trained route=direct c={} seed={}", cfg.c, cfg.seed),
    )?;
    Ok((
        model,
        TrainLog {
            route: "direct",
            passes,
            converged,
        },
    ))
}

/// Primal objective of a model on a stacked example set under a
/// regularizer: `w'Kw + sum C_i hinge_i`.
pub fn objective(
    model: &MultiViewModel,
    examples: &[StackedExample],
    reg: &Regularizer,
    cfg: &TrainConfig,
) -> Result<f64> {
    let w = DVector::from_row_slice(model.params());
    let mut obj = reg.quad(&w)?;
    for e in examples {
        obj += cfg.c * e.weight * (1.0 - e.y * e.dot(model.layout(), &w)).max(0.0);
    }
    Ok(obj)
}

/// Trains `n` source models, each on `per_view_k` positives resampled per
/// view (without replacement, `None` = all positives) plus every negative,
/// under the identity regularizer. Replica `i` draws from a seed derived as
/// `derive(seed, i)`, so the ensemble is reproducible.
pub fn bootstrap_sources(
    dataset: &LabeledWindowSet,
    n: usize,
    per_view_k: Option<usize>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<(MultiViewModel, TrainLog)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("source count must be >= 1".into()));
    }
    let layout = dataset.layout().clone();
    let per_view: Vec<Vec<usize>> = (0..layout.views())
        .map(|v| dataset.positives_of_view(v))
        .collect();
    if let Some(k) = per_view_k {
        for (v, idxs) in per_view.iter().enumerate() {
            if idxs.len() < k {
                return Err(Error::InsufficientData(format!(
                    "view {v} has {} positives, bootstrap wants {k}",
                    idxs.len()
                )));
            }
        }
    }
    let reg = Regularizer::identity(layout.clone())?;
    let fac = factorize(&reg, FactorMethod::Cholesky)?;
    let mut out = Vec::with_capacity(n);
    for replica in 0..n {
        let replica_seed = seeding::derive(seed, replica as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(replica_seed);
        let mut chosen: Vec<usize> = Vec::new();
        for idxs in &per_view {
            match per_view_k {
                None => chosen.extend(idxs.iter().copied()),
                Some(k) => {
                    // Sample k positions without replacement, then restore
                    // dataset order so `all` and `k = len` coincide exactly.
                    let mut picked =
                        rand::seq::index::sample(&mut rng, idxs.len(), k).into_vec();
                    picked.sort_unstable();
                    chosen.extend(picked.into_iter().map(|p| idxs[p]));
                }
            }
        }
        let mut windows: Vec<LabeledWindow> =
            chosen.iter().map(|&i| dataset.windows()[i].clone()).collect();
        windows.extend(
            dataset
                .windows()
                .iter()
                .filter(|w| w.label == WindowLabel::Negative)
                .cloned(),
        );
        let subset = LabeledWindowSet::new(layout.clone(), windows)?;
        let examples = stack_examples(&subset);
        let train_cfg = TrainConfig {
            seed: seeding::derive(replica_seed, 0x7261),
            ..*cfg
        };
        let (mut model, log) = train_transformed(&layout, &examples, &fac, &train_cfg)?;
        model = MultiViewModel::new(
            layout.clone(),
            model.params().to_vec(),
            format!("source replica={replica} seed={replica_seed}"),
        )?;
        out.push((model, log));
    }
    Ok(out)
}
