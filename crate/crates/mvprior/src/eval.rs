//! Sliding-window multi-view detection and evaluation.
//!
//! A [`MultiViewModel`] is slid over a [`FeatureMap`]; every placement is
//! scored once per view (template dot product plus the view bias) and the
//! best view becomes the viewpoint estimate of the resulting [`Detection`].
//! Detections survive a greedy non-maximum suppression, optionally pooled
//! across a bank of models ([`joint_nms`]), and are scored against
//! [`GroundTruthBox`] annotations with four measures:
//!
//! * **AP** — area under the all-points interpolated precision/recall curve
//!   with the usual greedy overlap matching.
//! * **VP** — viewpoint accuracy: the fraction of true positives whose
//!   estimated view bin equals the annotated bin.
//! * **AP+VP-D** — AP where a matched detection earns credit only when the
//!   bins agree exactly.
//! * **AP+VP-C** — AP where a matched detection earns the continuous credit
//!   `(180° − Δ)/180°`, `Δ` being the minimal cyclic angle between the
//!   predicted and annotated bin centers.
//!
//! The two combined measures are instances of one weighted-AP computation:
//! a true positive contributes its weight to both the precision and the
//! recall numerator, so the exact-match indicator weight reproduces the
//! discrete variant and the constant weight 1 reproduces plain AP. Weights
//! never exceed 1, which forces `AP+VP-D ≤ AP+VP-C ≤ AP` on every report.
//!
//! Geometric matching happens once per report: detections are ranked by
//! score and greedily claim the highest-overlap unmatched ground truth with
//! IoU at or above the threshold. A detection whose only qualifying overlap
//! is with an already-claimed truth counts as a false positive (a double
//! detection); one that only overlaps truths flagged difficult is dropped
//! from the ranking entirely (neither credit nor penalty), and difficult
//! truths are excluded from the recall denominator.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::model::MultiViewModel;

/// Magic header of the feature-map file format.
pub const FEATURE_MAP_MAGIC: &[u8; 8] = b"MVPFMAPS";
const FEATURE_MAP_VERSION: u32 = 1;

/// Default edge length of a feature cell in pixels.
pub const DEFAULT_CELL_SIZE: u32 = 8;

/// Default IoU above which non-maximum suppression discards a detection.
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Axis-aligned box in pixel coordinates with strictly positive extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl PixelBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && width.is_finite() && height.is_finite()) {
            return Err(Error::InvalidArgument(
                "pixel box coordinates must be finite".into(),
            ));
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "pixel box must have positive extent, got {width} x {height}"
            )));
        }
        Ok(Self {
            x,
            y,
            width,
            height,
        })
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// Intersection-over-union of two boxes, in `[0, 1]`.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let ix = (a.x + a.width).min(b.x + b.width) - a.x.max(b.x);
    let iy = (a.y + a.height).min(b.y + b.height) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.area() + b.area() - inter)
}

/// Dense H x W x L grid of feature values with a pixel scale.
///
/// Row 0 is the top of the image; entry `(r, c, l)` is channel `l` of the
/// cell in row `r`, column `c`. A cell covers `cell_size` pixels per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    id: String,
    rows: usize,
    cols: usize,
    depth: usize,
    cell_size: u32,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        id: impl Into<String>,
        rows: usize,
        cols: usize,
        depth: usize,
        cell_size: u32,
        data: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.split_whitespace().count() != 1 {
            return Err(Error::InvalidArgument(format!(
                "feature map id must be a single non-empty token, got {id:?}"
            )));
        }
        if rows == 0 || cols == 0 || depth == 0 || cell_size == 0 {
            return Err(Error::InvalidArgument(
                "feature map dimensions and cell size must be positive".into(),
            ));
        }
        if data.len() != rows * cols * depth {
            return Err(Error::DimensionMismatch(format!(
                "feature map data length {} != {rows} x {cols} x {depth}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature map entries must be finite".into(),
            ));
        }
        Ok(Self {
            id,
            rows,
            cols,
            depth,
            cell_size,
            data,
        })
    }

    pub fn zeros(id: impl Into<String>, rows: usize, cols: usize, depth: usize) -> Result<Self> {
        Self::new(
            id,
            rows,
            cols,
            depth,
            DEFAULT_CELL_SIZE,
            vec![0.0; rows * cols * depth],
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn cell_size(&self) -> u32 {
        self.cell_size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn index(&self, r: usize, c: usize, l: usize) -> usize {
        (r * self.cols + c) * self.depth + l
    }

    /// Value of channel `l` at cell `(r, c)`; panics on out-of-range indices.
    #[inline]
    pub fn get(&self, r: usize, c: usize, l: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols && l < self.depth);
        self.data[self.index(r, c, l)]
    }

    /// Overwrites channel `l` at cell `(r, c)`.
    pub fn set(&mut self, r: usize, c: usize, l: usize, value: f64) -> Result<()> {
        if r >= self.rows || c >= self.cols || l >= self.depth {
            return Err(Error::IndexOutOfRange(format!(
                "cell ({r}, {c}, {l}) outside {} x {} x {} map",
                self.rows, self.cols, self.depth
            )));
        }
        if !value.is_finite() {
            return Err(Error::InvalidArgument(
                "feature map entries must be finite".into(),
            ));
        }
        let idx = self.index(r, c, l);
        self.data[idx] = value;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        binio::write_magic(&mut w, FEATURE_MAP_MAGIC, FEATURE_MAP_VERSION)?;
        binio::write_string(&mut w, &self.id)?;
        binio::write_u32(&mut w, self.rows as u32)?;
        binio::write_u32(&mut w, self.cols as u32)?;
        binio::write_u32(&mut w, self.depth as u32)?;
        binio::write_u32(&mut w, self.cell_size)?;
        binio::write_f64_slice(&mut w, &self.data)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        binio::check_magic(&mut r, FEATURE_MAP_MAGIC, FEATURE_MAP_VERSION)?;
        let id = binio::read_string(&mut r)?;
        let rows = binio::read_u32(&mut r)? as usize;
        let cols = binio::read_u32(&mut r)? as usize;
        let depth = binio::read_u32(&mut r)? as usize;
        let cell_size = binio::read_u32(&mut r)?;
        let data = binio::read_f64_vec(&mut r, rows * cols * depth)?;
        Self::new(id, rows, cols, depth, cell_size, data)
    }
}

/// One localized response of a model: a box, its score, the winning view
/// bin, and the model that produced it (relevant when banks are merged).
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: PixelBox,
    pub score: f64,
    pub view: usize,
    pub model_id: usize,
}

impl Detection {
    pub fn new(bbox: PixelBox, score: f64, view: usize) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::InvalidArgument(
                "detection score must be finite".into(),
            ));
        }
        Ok(Self {
            bbox,
            score,
            view,
            model_id: 0,
        })
    }
}

/// An annotated object: box, azimuth bin, category, and whether evaluation
/// should skip it (difficult instances neither count as misses nor as hits).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: PixelBox,
    pub view: usize,
    pub category: String,
    pub difficult: bool,
}

impl GroundTruthBox {
    pub fn new(bbox: PixelBox, view: usize, category: impl Into<String>) -> Result<Self> {
        let category = category.into();
        if category.is_empty() || category.split_whitespace().count() != 1 {
            return Err(Error::InvalidArgument(format!(
                "category must be a single non-empty token, got {category:?}"
            )));
        }
        Ok(Self {
            bbox,
            view,
            category,
            difficult: false,
        })
    }

    pub fn difficult(mut self) -> Self {
        self.difficult = true;
        self
    }
}

/// One annotation line: the image a ground-truth box belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image: String,
    pub gt: GroundTruthBox,
}

/// Writes annotations as whitespace-separated lines:
/// `image x y width height view_bin category [difficult]`.
pub fn write_annotations(path: impl AsRef<Path>, records: &[Annotation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        if rec.image.is_empty() || rec.image.split_whitespace().count() != 1 {
            return Err(Error::InvalidArgument(format!(
                "image id must be a single non-empty token, got {:?}",
                rec.image
            )));
        }
        let b = &rec.gt.bbox;
        write!(
            w,
            "{} {} {} {} {} {} {}",
            rec.image, b.x, b.y, b.width, b.height, rec.gt.view, rec.gt.category
        )?;
        if rec.gt.difficult {
            write!(w, " difficult")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads annotations written by [`write_annotations`]. Blank lines are
/// skipped; anything else malformed is an error naming the line.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = |what: &str| {
            Error::Format(format!("annotation line {}: {what}", lineno + 1))
        };
        if fields.len() != 7 && fields.len() != 8 {
            return Err(bad("expected 7 or 8 fields"));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| bad(&format!("field {} is not a number", i + 1)))
        };
        let bbox = PixelBox::new(num(1)?, num(2)?, num(3)?, num(4)?)?;
        let view = fields[5]
            .parse::<usize>()
            .map_err(|_| bad("view bin is not an integer"))?;
        let mut gt = GroundTruthBox::new(bbox, view, fields[6])?;
        if fields.len() == 8 {
            if fields[7] != "difficult" {
                return Err(bad("trailing field must be `difficult`"));
            }
            gt = gt.difficult();
        }
        out.push(Annotation {
            image: fields[0].to_string(),
            gt,
        });
    }
    Ok(out)
}

/// Deterministic detection order: score descending, then x, y, view bin and
/// model id ascending.
fn det_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.x.total_cmp(&b.bbox.x))
        .then_with(|| a.bbox.y.total_cmp(&b.bbox.y))
        .then_with(|| a.view.cmp(&b.view))
        .then_with(|| a.model_id.cmp(&b.model_id))
}

/// Greedy non-maximum suppression: rank by [`det_order`], keep a detection
/// unless it overlaps an already kept one with IoU strictly above the limit.
fn nms(mut dets: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    dets.sort_by(det_order);
    let mut keep: Vec<Detection> = Vec::new();
    'candidates: for d in dets {
        for k in &keep {
            if iou(&d.bbox, &k.bbox) > nms_iou {
                continue 'candidates;
            }
        }
        keep.push(d);
    }
    keep
}

/// Scores every placement of the model on the map, estimates the view as
/// the argmax over per-view scores, keeps placements at or above the score
/// threshold, and suppresses overlapping results.
///
/// Each placement covers `rows x cols` cells; its box is the covered pixel
/// rectangle. Ties between equal view scores resolve to the lowest bin.
/// Surviving detections carry `model_id` 0 and come back ranked by the
/// deterministic detection order.
pub fn detect(
    model: &MultiViewModel,
    map: &FeatureMap,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let layout = model.layout();
    if map.depth() != layout.cell_dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature map depth {} != template cell dimension {}",
            map.depth(),
            layout.cell_dim()
        )));
    }
    if map.rows() < layout.rows() || map.cols() < layout.cols() {
        return Err(Error::DimensionMismatch(format!(
            "feature map {} x {} smaller than template {} x {}",
            map.rows(),
            map.cols(),
            layout.rows(),
            layout.cols()
        )));
    }
    if !(0.0..=1.0).contains(&nms_iou) {
        return Err(Error::InvalidArgument(format!(
            "nms iou must lie in [0, 1], got {nms_iou}"
        )));
    }
    let (n, m, depth) = (layout.rows(), layout.cols(), layout.cell_dim());
    let params = model.params();
    let cs = f64::from(map.cell_size());
    let mut found = Vec::new();
    for r0 in 0..=map.rows() - n {
        for c0 in 0..=map.cols() - m {
            let mut best_view = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for v in 0..layout.views() {
                let tpl = &params[layout.view_range(v)?];
                let mut s = match layout.bias_slot(v)? {
                    Some(slot) => params[slot],
                    None => 0.0,
                };
                for r in 0..n {
                    for c in 0..m {
                        let t = &tpl[(r * m + c) * depth..(r * m + c + 1) * depth];
                        let base = ((r0 + r) * map.cols() + (c0 + c)) * depth;
                        let w = &map.data()[base..base + depth];
                        for l in 0..depth {
                            s += t[l] * w[l];
                        }
                    }
                }
                if s > best_score {
                    best_score = s;
                    best_view = v;
                }
            }
            if best_score >= score_threshold {
                found.push(Detection {
                    bbox: PixelBox::new(c0 as f64 * cs, r0 as f64 * cs, m as f64 * cs, n as f64 * cs)?,
                    score: best_score,
                    view: best_view,
                    model_id: 0,
                });
            }
        }
    }
    Ok(nms(found, nms_iou))
}

/// Pools per-model detection lists into one set and suppresses it jointly.
///
/// Every detection is re-tagged with its list's index as `model_id`, so
/// survivors record which bank member produced them.
pub fn joint_nms(bank: &[Vec<Detection>], nms_iou: f64) -> Vec<Detection> {
    let mut pool = Vec::new();
    for (id, dets) in bank.iter().enumerate() {
        for d in dets {
            let mut d = d.clone();
            d.model_id = id;
            pool.push(d);
        }
    }
    nms(pool, nms_iou)
}

/// Detections and ground truths of one image, evaluated together so that
/// matching never crosses image boundaries.
#[derive(Debug, Clone, Default)]
pub struct EvalSample {
    pub detections: Vec<Detection>,
    pub truths: Vec<GroundTruthBox>,
}

impl EvalSample {
    pub fn new(detections: Vec<Detection>, truths: Vec<GroundTruthBox>) -> Self {
        Self { detections, truths }
    }
}

/// One precision/recall point, taken after each ranked detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Counts of (annotated bin, estimated bin) pairs over true positives.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    views: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub(crate) fn new(views: usize) -> Self {
        Self {
            views,
            counts: vec![0; views * views],
        }
    }

    pub(crate) fn record(&mut self, gt_view: usize, det_view: usize) {
        self.counts[gt_view * self.views + det_view] += 1;
    }

    pub fn views(&self) -> usize {
        self.views
    }

    /// Count of true positives annotated `gt_view` and estimated `det_view`.
    pub fn at(&self, gt_view: usize, det_view: usize) -> u64 {
        self.counts[gt_view * self.views + det_view]
    }

    /// True positives annotated with `gt_view`, over all estimates.
    pub fn row_sum(&self, gt_view: usize) -> u64 {
        self.counts[gt_view * self.views..(gt_view + 1) * self.views]
            .iter()
            .sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.views).map(|v| self.at(v, v)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Everything [`evaluate`] measures on one detection set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub ap: f64,
    pub vp: f64,
    pub ap_vp_d: f64,
    pub ap_vp_c: f64,
    /// Precision/recall trace of the plain AP computation.
    pub pr_points: Vec<PrPoint>,
    pub confusion: ConfusionMatrix,
    pub iou_thresh: f64,
    /// Matched detections (geometric true positives).
    pub true_positives: usize,
    /// Non-difficult ground truths: the recall denominator.
    pub positives: usize,
}

/// Per ranked detection: matched a truth, counted as a false positive, or
/// dropped because its only qualifying overlap was a difficult truth.
enum Outcome {
    Match { gt_view: usize, det_view: usize },
    FalsePositive,
    Ignored,
}

fn weighted_ap(
    outcomes: &[Outcome],
    positives: usize,
    weight: impl Fn(usize, usize) -> f64,
) -> (f64, Vec<PrPoint>) {
    let mut points = Vec::with_capacity(outcomes.len());
    let mut cum = 0.0;
    let mut rank = 0usize;
    for o in outcomes {
        if let Outcome::Match { gt_view, det_view } = o {
            cum += weight(*gt_view, *det_view);
        }
        rank += 1;
        points.push(PrPoint {
            recall: cum / positives as f64,
            precision: cum / rank as f64,
        });
    }
    // All-points interpolation: at each recall step, credit the best
    // precision achieved at that recall or beyond.
    let mut ap = 0.0;
    let mut best = 0.0_f64;
    for k in (0..points.len()).rev() {
        best = best.max(points[k].precision);
        let prev = if k == 0 { 0.0 } else { points[k - 1].recall };
        ap += (points[k].recall - prev) * best;
    }
    (ap, points)
}

/// Minimal cyclic angular distance between two directions in degrees.
fn cyclic_angle_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Evaluates detections against ground truth at one IoU threshold.
///
/// `bins_deg` lists the azimuth bin centers in degrees; detection and truth
/// view indices refer to it. Detections are ranked globally by score (ties
/// broken deterministically), matched greedily within their image to the
/// highest-overlap unclaimed truth at or above `iou_thresh`, and reduced to
/// the four measures described at module level. With no true positives, VP
/// is reported as 0. An evaluation with no usable ground truth at all is an
/// error rather than a zero score.
pub fn evaluate(
    samples: &[EvalSample],
    bins_deg: &[f64],
    iou_thresh: f64,
) -> Result<EvalReport> {
    if bins_deg.is_empty() {
        return Err(Error::InvalidArgument("no azimuth bins given".into()));
    }
    if bins_deg
        .iter()
        .any(|b| !b.is_finite() || !(0.0..360.0).contains(b))
    {
        return Err(Error::InvalidArgument(
            "azimuth bin centers must lie in [0, 360)".into(),
        ));
    }
    if !iou_thresh.is_finite() || iou_thresh <= 0.0 || iou_thresh >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "iou threshold must lie in (0, 1), got {iou_thresh}"
        )));
    }
    let views = bins_deg.len();
    for s in samples {
        for d in &s.detections {
            if !d.score.is_finite() {
                return Err(Error::InvalidArgument(
                    "detection scores must be finite".into(),
                ));
            }
            if d.view >= views {
                return Err(Error::IndexOutOfRange(format!(
                    "detection view bin {} with {views} bins",
                    d.view
                )));
            }
        }
        for g in &s.truths {
            if g.view >= views {
                return Err(Error::IndexOutOfRange(format!(
                    "ground-truth view bin {} with {views} bins",
                    g.view
                )));
            }
        }
    }
    let positives: usize = samples
        .iter()
        .map(|s| s.truths.iter().filter(|g| !g.difficult).count())
        .sum();
    if positives == 0 {
        return Err(Error::EmptyGroundTruth);
    }

    // Global ranking; the stable sort keeps input order on full ties.
    let mut ranked: Vec<(usize, &Detection)> = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        for d in &s.detections {
            ranked.push((si, d));
        }
    }
    ranked.sort_by(|a, b| det_order(a.1, b.1));

    let mut claimed: Vec<Vec<bool>> = samples.iter().map(|s| vec![false; s.truths.len()]).collect();
    let mut outcomes = Vec::with_capacity(ranked.len());
    for (si, det) in ranked {
        let truths = &samples[si].truths;
        let mut best: Option<(f64, usize)> = None;
        let mut difficult_hit = false;
        for (gi, gt) in truths.iter().enumerate() {
            let overlap = iou(&det.bbox, &gt.bbox);
            if overlap < iou_thresh {
                continue;
            }
            if gt.difficult {
                difficult_hit = true;
            } else if !claimed[si][gi] && best.map_or(true, |(b, _)| overlap > b) {
                best = Some((overlap, gi));
            }
        }
        outcomes.push(match best {
            Some((_, gi)) => {
                claimed[si][gi] = true;
                Outcome::Match {
                    gt_view: truths[gi].view,
                    det_view: det.view,
                }
            }
            None if difficult_hit => Outcome::Ignored,
            None => Outcome::FalsePositive,
        });
    }
    outcomes.retain(|o| !matches!(o, Outcome::Ignored));

    let mut confusion = ConfusionMatrix::new(views);
    for o in &outcomes {
        if let Outcome::Match { gt_view, det_view } = o {
            confusion.record(*gt_view, *det_view);
        }
    }
    let true_positives = confusion.total() as usize;
    let vp = if true_positives == 0 {
        0.0
    } else {
        confusion.trace() as f64 / true_positives as f64
    };

    let (ap, pr_points) = weighted_ap(&outcomes, positives, |_, _| 1.0);
    let (ap_vp_d, _) = weighted_ap(&outcomes, positives, |g, d| if g == d { 1.0 } else { 0.0 });
    let (ap_vp_c, _) = weighted_ap(&outcomes, positives, |g, d| {
        (180.0 - cyclic_angle_deg(bins_deg[d], bins_deg[g])) / 180.0
    });

    Ok(EvalReport {
        ap,
        vp,
        ap_vp_d,
        ap_vp_c,
        pr_points,
        confusion,
        iou_thresh,
        true_positives,
        positives,
    })
}
