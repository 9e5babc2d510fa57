//! Cross-view cell correspondences from ellipsoid geometry.
//!
//! Each view's template grid is anchored to the silhouette of a shared 3D
//! ellipsoid seen from a perspective camera on a viewing circle. Casting a
//! ray through a cell center yields a point on the ellipsoid surface; cells
//! in cyclically adjacent views whose surface points lie within a patch
//! radius `tau` of each other become `mv` pairs. Within-view structural
//! relations (horizontal, vertical, the two diagonals, and cell
//! self-pairing) are enumerated directly on the grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, RowVector4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::model::{CellRef, TemplateLayout};

/// Default cap on mv partners a cell may keep per neighboring view.
pub const DEFAULT_K_CAP: usize = 4;

/// Axis-aligned ellipsoid `x²/a² + y²/b² + z²/c² = 1` centered at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidSpec {
    a: f64,
    b: f64,
    c: f64,
}

impl EllipsoidSpec {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && c > 0.0) || !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ellipsoid semi-axes must be positive and finite, got ({a}, {b}, {c})"
            )));
        }
        Ok(Self { a, b, c })
    }

    pub fn semi_axes(&self) -> (f64, f64, f64) {
        (self.a, self.b, self.c)
    }

    pub fn max_semi_axis(&self) -> f64 {
        self.a.max(self.b).max(self.c)
    }

    /// Left-hand side of the implicit surface equation at `p` (1 on surface).
    pub fn implicit(&self, p: &Vector3<f64>) -> f64 {
        (p.x / self.a).powi(2) + (p.y / self.b).powi(2) + (p.z / self.c).powi(2)
    }
}

/// Perspective camera on the viewing circle: positioned at elevation
/// `elevation_deg` above the horizontal plane, `distance` from the origin,
/// looking at the origin with the world z-axis up. The azimuth comes from
/// the layout's per-view bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub elevation_deg: f64,
    pub distance: f64,
    pub focal: f64,
}

impl CameraSpec {
    pub fn new(elevation_deg: f64, distance: f64, focal: f64) -> Result<Self> {
        if !(distance > 0.0 && distance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "camera distance must be positive, got {distance}"
            )));
        }
        if !(focal > 0.0 && focal.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "focal length must be positive, got {focal}"
            )));
        }
        Ok(Self {
            elevation_deg,
            distance,
            focal,
        })
    }

    /// Default rig for an ellipsoid and a grid of `cols` columns: elevation
    /// 10 degrees, distance three times the largest semi-axis, focal length
    /// scaled so the view-0 silhouette is `cols` image units wide (one unit
    /// per cell column).
    pub fn default_for(ellipsoid: &EllipsoidSpec, azimuth0_deg: f64, cols: usize) -> Result<Self> {
        let unit = CameraSpec::new(10.0, 3.0 * ellipsoid.max_semi_axis(), 1.0)?;
        let frame = CameraFrame::build(ellipsoid, &unit, azimuth0_deg)?;
        let bbox = frame.silhouette_bbox()?;
        let width = bbox.u_max - bbox.u_min;
        CameraSpec::new(unit.elevation_deg, unit.distance, cols as f64 / width)
    }

    fn check_against(&self, ellipsoid: &EllipsoidSpec) -> Result<()> {
        if self.distance <= ellipsoid.max_semi_axis() {
            return Err(Error::DegenerateCamera(format!(
                "camera distance {} does not exceed largest semi-axis {}",
                self.distance,
                ellipsoid.max_semi_axis()
            )));
        }
        Ok(())
    }
}

/// Surface point produced by casting a cell-center ray onto the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub cell: CellRef,
    pub point: Vector3<f64>,
}

/// Structural relation between template cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    /// Horizontal within-view neighbors `(r,c)-(r,c+1)`.
    H,
    /// Vertical within-view neighbors `(r,c)-(r+1,c)`.
    V,
    /// Upper-left diagonal `(r,c)-(r+1,c-1)`: the lower cell sits one
    /// column to the left, so the pair leans toward the upper-left.
    D1,
    /// Upper-right diagonal `(r,c)-(r+1,c+1)`.
    D2,
    /// Self-pairing `(j,j)` of every cell.
    Cell,
    /// Cross-view pairs from shared ellipsoid surface patches.
    Mv,
}

impl Relation {
    pub fn tag(&self) -> &'static str {
        match self {
            Relation::H => "h",
            Relation::V => "v",
            Relation::D1 => "d1",
            Relation::D2 => "d2",
            Relation::Cell => "cell",
            Relation::Mv => "mv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "h" => Ok(Relation::H),
            "v" => Ok(Relation::V),
            "d1" => Ok(Relation::D1),
            "d2" => Ok(Relation::D2),
            "cell" => Ok(Relation::Cell),
            "mv" => Ok(Relation::Mv),
            other => Err(Error::InvalidArgument(format!(
                "unknown relation tag {other:?} (expected h, v, d1, d2, cell or mv)"
            ))),
        }
    }
}

/// Ordered cell pairs realizing one relation.
///
/// Grid relations list each geometric pair once in canonical orientation;
/// the mv relation stores the full symmetric closure (both `(j,k)` and
/// `(k,j)`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellPairSet {
    relation: Relation,
    pairs: Vec<(CellRef, CellRef)>,
}

impl CellPairSet {
    fn from_set(relation: Relation, set: BTreeSet<(CellRef, CellRef)>) -> Self {
        Self {
            relation,
            pairs: set.into_iter().collect(),
        }
    }

    pub fn relation(&self) -> Relation {
        self.relation
    }

    pub fn pairs(&self) -> &[(CellRef, CellRef)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, j: CellRef, k: CellRef) -> bool {
        self.pairs.binary_search(&(j, k)).is_ok()
    }

    /// Renders one `v,r,c v',r',c'` line per pair.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (j, k) in &self.pairs {
            writeln!(
                out,
                "{},{},{} {},{},{}",
                j.view, j.row, j.col, k.view, k.row, k.col
            )
            .expect("string write cannot fail");
        }
        out
    }

    /// Parses the text form produced by [`to_text`](Self::to_text).
    pub fn from_text(relation: Relation, text: &str, layout: &TemplateLayout) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cells = line.split_whitespace().map(|triple| -> Result<CellRef> {
                let parts: Vec<&str> = triple.split(',').collect();
                if parts.len() != 3 {
                    return Err(Error::Format(format!(
                        "line {}: expected v,r,c triple, got {triple:?}",
                        lineno + 1
                    )));
                }
                let nums: Vec<usize> = parts
                    .iter()
                    .map(|p| {
                        p.parse::<usize>().map_err(|_| {
                            Error::Format(format!("line {}: bad index {p:?}", lineno + 1))
                        })
                    })
                    .collect::<Result<_>>()?;
                let cell = CellRef::new(nums[0], nums[1], nums[2]);
                layout.check_cell(cell)?;
                Ok(cell)
            });
            match (cells.next(), cells.next(), cells.next()) {
                (Some(j), Some(k), None) => {
                    set.insert((j?, k?));
                }
                _ => {
                    return Err(Error::Format(format!(
                        "line {}: expected exactly two cell triples",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(Self::from_set(relation, set))
    }
}

/// Silhouette bounding box in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageBox {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
}

/// Camera pose resolved for one azimuth, with ray casting and the analytic
/// silhouette box.
struct CameraFrame<'a> {
    ellipsoid: &'a EllipsoidSpec,
    focal: f64,
    center: Vector3<f64>,
    right: Vector3<f64>,
    up: Vector3<f64>,
    forward: Vector3<f64>,
}

impl<'a> CameraFrame<'a> {
    fn build(ellipsoid: &'a EllipsoidSpec, cam: &CameraSpec, azimuth_deg: f64) -> Result<Self> {
        cam.check_against(ellipsoid)?;
        let az = azimuth_deg.to_radians();
        let el = cam.elevation_deg.to_radians();
        let center =
            cam.distance * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        let forward = -center.normalize();
        let world_up = Vector3::z();
        let right = forward.cross(&world_up);
        let right_norm = right.norm();
        if right_norm < 1e-12 {
            return Err(Error::DegenerateCamera(
                "camera looks straight along the vertical axis".into(),
            ));
        }
        let right = right / right_norm;
        let up = right.cross(&forward);
        Ok(Self {
            ellipsoid,
            focal: cam.focal,
            center,
            right,
            up,
            forward,
        })
    }

    /// 3x4 projection matrix mapping homogeneous world points to
    /// homogeneous image points (u, v, depth).
    fn projection(&self) -> Matrix3x4<f64> {
        let f = self.focal;
        let r = self.right;
        let u = self.up;
        let w = self.forward;
        let c = self.center;
        Matrix3x4::from_rows(&[
            RowVector4::new(f * r.x, f * r.y, f * r.z, -f * r.dot(&c)),
            RowVector4::new(f * u.x, f * u.y, f * u.z, -f * u.dot(&c)),
            RowVector4::new(w.x, w.y, w.z, -w.dot(&c)),
        ])
    }

    /// Exact silhouette bounding box from the dual quadric: the dual conic
    /// `C* = P Q* P'` of the ellipsoid's outline satisfies `l' C* l = 0` for
    /// every tangent line `l`, so the extremal vertical tangents `u = t`
    /// (line coefficients `(1, 0, -t)`) solve
    /// `C*[0,0] - 2 t C*[0,2] + t² C*[2,2] = 0`, and likewise horizontally.
    fn silhouette_bbox(&self) -> Result<ImageBox> {
        let (a, b, c) = self.ellipsoid.semi_axes();
        let dual_quadric = Matrix4::from_diagonal(&Vector4::new(a * a, b * b, c * c, -1.0));
        let p = self.projection();
        let dual_conic: Matrix3<f64> = p * dual_quadric * p.transpose();
        let roots = |diag: f64, mixed: f64| -> Result<(f64, f64)> {
            let qa = dual_conic[(2, 2)];
            let disc = mixed * mixed - qa * diag;
            if qa.abs() < 1e-14 || disc <= 0.0 {
                return Err(Error::DegenerateCamera(
                    "silhouette tangent equation has no two real roots".into(),
                ));
            }
            let sq = disc.sqrt();
            let t1 = (mixed - sq) / qa;
            let t2 = (mixed + sq) / qa;
            Ok((t1.min(t2), t1.max(t2)))
        };
        let (u_min, u_max) = roots(dual_conic[(0, 0)], dual_conic[(0, 2)])?;
        let (v_min, v_max) = roots(dual_conic[(1, 1)], dual_conic[(1, 2)])?;
        Ok(ImageBox {
            u_min,
            u_max,
            v_min,
            v_max,
        })
    }

    /// Nearest intersection of the ray through image point (u, v) with the
    /// ellipsoid, or None when the ray misses.
    fn cast(&self, u: f64, v: f64) -> Option<Vector3<f64>> {
        let dir = (self.forward + (u / self.focal) * self.right + (v / self.focal) * self.up)
            .normalize();
        // Solve (C + t d)' S (C + t d) = 1 with S = diag(1/a², 1/b², 1/c²).
        let (a, b, c) = self.ellipsoid.semi_axes();
        let scale = Vector3::new(1.0 / (a * a), 1.0 / (b * b), 1.0 / (c * c));
        let sd = dir.component_mul(&scale);
        let sc = self.center.component_mul(&scale);
        let qa = dir.dot(&sd);
        let qb = 2.0 * self.center.dot(&sd);
        let qc = self.center.dot(&sc) - 1.0;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let near = (-qb - sq) / (2.0 * qa);
        let far = (-qb + sq) / (2.0 * qa);
        let t = if near > 0.0 {
            near
        } else if far > 0.0 {
            far
        } else {
            return None;
        };
        Some(self.center + t * dir)
    }

    /// Image coordinates of the center of grid cell (row, col), rows counted
    /// from the top of the silhouette box.
    fn cell_center(&self, bbox: &ImageBox, layout: &TemplateLayout, row: usize, col: usize) -> (f64, f64) {
        let u = bbox.u_min + (col as f64 + 0.5) * (bbox.u_max - bbox.u_min) / layout.cols() as f64;
        let v = bbox.v_max - (row as f64 + 0.5) * (bbox.v_max - bbox.v_min) / layout.rows() as f64;
        (u, v)
    }
}

/// Casts the ray through `cell`'s center onto the ellipsoid. Returns None
/// when the cell center lies outside the silhouette and the ray misses.
pub fn backproject_cell(
    layout: &TemplateLayout,
    ellipsoid: &EllipsoidSpec,
    camera: &CameraSpec,
    cell: CellRef,
) -> Result<Option<SurfaceHit>> {
    layout.check_cell(cell)?;
    let frame = CameraFrame::build(ellipsoid, camera, layout.bins_deg()[cell.view])?;
    let bbox = frame.silhouette_bbox()?;
    let (u, v) = frame.cell_center(&bbox, layout, cell.row, cell.col);
    Ok(frame.cast(u, v).map(|point| SurfaceHit { cell, point }))
}

/// Back-projects every cell of every view at once, reusing one camera frame
/// per view. Misses are simply absent from the result.
pub fn backproject_all(
    layout: &TemplateLayout,
    ellipsoid: &EllipsoidSpec,
    camera: &CameraSpec,
) -> Result<BTreeMap<CellRef, Vector3<f64>>> {
    let mut hits = BTreeMap::new();
    for view in 0..layout.views() {
        let frame = CameraFrame::build(ellipsoid, camera, layout.bins_deg()[view])?;
        let bbox = frame.silhouette_bbox()?;
        for row in 0..layout.rows() {
            for col in 0..layout.cols() {
                let (u, v) = frame.cell_center(&bbox, layout, row, col);
                if let Some(point) = frame.cast(u, v) {
                    hits.insert(CellRef::new(view, row, col), point);
                }
            }
        }
    }
    Ok(hits)
}

/// Enumerates within-view structural pairs. Each geometric pair appears
/// once, oriented left/top cell first.
pub fn build_grid_pairs(layout: &TemplateLayout, relation: Relation) -> Result<CellPairSet> {
    if relation == Relation::Mv {
        return Err(Error::InvalidArgument(
            "mv pairs require ellipsoid geometry; use build_mv_pairs".into(),
        ));
    }
    let (rows, cols) = (layout.rows(), layout.cols());
    let mut set = BTreeSet::new();
    for view in 0..layout.views() {
        for r in 0..rows {
            for c in 0..cols {
                let j = CellRef::new(view, r, c);
                let k = match relation {
                    Relation::H if c + 1 < cols => CellRef::new(view, r, c + 1),
                    Relation::V if r + 1 < rows => CellRef::new(view, r + 1, c),
                    Relation::D1 if r + 1 < rows && c >= 1 => CellRef::new(view, r + 1, c - 1),
                    Relation::D2 if r + 1 < rows && c + 1 < cols => {
                        CellRef::new(view, r + 1, c + 1)
                    }
                    Relation::Cell => j,
                    _ => continue,
                };
                set.insert((j, k));
            }
        }
    }
    Ok(CellPairSet::from_set(relation, set))
}

/// Views at cyclic distance exactly 1 from `view` (empty for a single view).
fn adjacent_views(layout: &TemplateLayout, view: usize) -> Vec<usize> {
    let v = layout.views();
    let mut out: BTreeSet<usize> = BTreeSet::new();
    if v > 1 {
        out.insert((view + 1) % v);
        out.insert((view + v - 1) % v);
    }
    out.remove(&view);
    out.into_iter().collect()
}

/// Cross-view pairs by the plain patch-radius rule: `(j, k)` is included iff
/// the views of `j` and `k` are cyclically adjacent, both cells hit the
/// surface, and the hit points lie within Euclidean distance `tau`. The
/// result contains both orientations of every pair.
pub fn build_mv_pairs(
    layout: &TemplateLayout,
    ellipsoid: &EllipsoidSpec,
    camera: &CameraSpec,
    tau: f64,
) -> Result<CellPairSet> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "patch radius must be non-negative, got {tau}"
        )));
    }
    let hits = backproject_all(layout, ellipsoid, camera)?;
    let mut set = BTreeSet::new();
    for (&j, pj) in &hits {
        for adj in adjacent_views(layout, j.view) {
            for (&k, pk) in hits.range(CellRef::new(adj, 0, 0)..CellRef::new(adj + 1, 0, 0)) {
                if (pj - pk).norm() <= tau {
                    set.insert((j, k));
                    set.insert((k, j));
                }
            }
        }
    }
    Ok(CellPairSet::from_set(Relation::Mv, set))
}

/// Patch radius at which the median (cell, neighboring-view) combination
/// has two partners: the lower median of every hitting cell's second-nearest
/// hit distance into each adjacent view.
pub fn default_patch_radius(
    layout: &TemplateLayout,
    ellipsoid: &EllipsoidSpec,
    camera: &CameraSpec,
) -> Result<f64> {
    let hits = backproject_all(layout, ellipsoid, camera)?;
    let mut second_nearest = Vec::new();
    for (&j, pj) in &hits {
        for adj in adjacent_views(layout, j.view) {
            let mut dists: Vec<f64> = hits
                .range(CellRef::new(adj, 0, 0)..CellRef::new(adj + 1, 0, 0))
                .map(|(_, pk)| (pj - pk).norm())
                .collect();
            if dists.len() < 2 {
                continue;
            }
            dists.sort_by(f64::total_cmp);
            second_nearest.push(dists[1]);
        }
    }
    if second_nearest.is_empty() {
        return Err(Error::InsufficientData(
            "no cell sees two surface hits in an adjacent view; cannot derive a patch radius"
                .into(),
        ));
    }
    second_nearest.sort_by(f64::total_cmp);
    Ok(second_nearest[(second_nearest.len() - 1) / 2])
}

/// Patch-radius pairs additionally capped at `k_cap` partners per
/// neighboring view. The cap keeps mutual nearest neighbors only — `(j, k)`
/// survives iff `k` is among `j`'s `k_cap` nearest partners in `k`'s view
/// and vice versa — so the result stays symmetric. Ties break on cell order.
pub fn build_mv_pairs_capped(
    layout: &TemplateLayout,
    ellipsoid: &EllipsoidSpec,
    camera: &CameraSpec,
    tau: f64,
    k_cap: usize,
) -> Result<CellPairSet> {
    let uncapped = build_mv_pairs(layout, ellipsoid, camera, tau)?;
    let hits = backproject_all(layout, ellipsoid, camera)?;
    // Partners of each cell grouped by the partner's view, nearest first.
    let mut by_source: BTreeMap<(CellRef, usize), Vec<(f64, CellRef)>> = BTreeMap::new();
    for &(j, k) in uncapped.pairs() {
        by_source
            .entry((j, k.view))
            .or_default()
            .push(((hits[&j] - hits[&k]).norm(), k));
    }
    let mut top: BTreeMap<(CellRef, usize), BTreeSet<CellRef>> = BTreeMap::new();
    for ((j, view), mut cands) in by_source {
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        top.insert(
            (j, view),
            cands.into_iter().take(k_cap).map(|(_, k)| k).collect(),
        );
    }
    let mut kept: BTreeSet<(CellRef, CellRef)> = BTreeSet::new();
    for &(j, k) in uncapped.pairs() {
        let j_keeps_k = top.get(&(j, k.view)).is_some_and(|s| s.contains(&k));
        let k_keeps_j = top.get(&(k, j.view)).is_some_and(|s| s.contains(&j));
        if j_keeps_k && k_keeps_j {
            kept.insert((j, k));
        }
    }
    Ok(CellPairSet::from_set(Relation::Mv, kept))
}

/// Convenience builder: derives the default patch radius and applies the
/// default partner cap. Returns the radius alongside the pairs.
pub fn build_mv_pairs_auto(
    layout: &TemplateLayout,
    ellipsoid: &EllipsoidSpec,
    camera: &CameraSpec,
) -> Result<(f64, CellPairSet)> {
    let tau = default_patch_radius(layout, ellipsoid, camera)?;
    let pairs = build_mv_pairs_capped(layout, ellipsoid, camera, tau, DEFAULT_K_CAP)?;
    Ok((tau, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere() -> EllipsoidSpec {
        EllipsoidSpec::new(1.0, 1.0, 1.0).unwrap()
    }

    fn cam(elev: f64) -> CameraSpec {
        CameraSpec::new(elev, 3.0, 2.0).unwrap()
    }

    #[test]
    fn center_cell_of_odd_grid_hits_silhouette_center_of_sphere() {
        let layout = TemplateLayout::new(4, 3, 3, 2, false).unwrap();
        let hit = backproject_cell(&layout, &sphere(), &cam(0.0), CellRef::new(0, 1, 1))
            .unwrap()
            .expect("center cell must hit");
        // Camera at azimuth 0, elevation 0 sits on the +x axis; the central
        // ray meets the unit sphere at its near point (1, 0, 0).
        assert_relative_eq!(hit.point.x, 1.0, epsilon = 1e-9);
        assert_relative_eq!(hit.point.y, 0.0, epsilon = 1e-9);
        assert_relative_eq!(hit.point.z, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn corner_cell_outside_silhouette_misses() {
        // On a 4x4 grid over a circular silhouette the corner cell center
        // sits at radius sqrt(2)*3/8 of the box width, outside the circle's
        // 1/2-width radius.
        let layout = TemplateLayout::new(4, 4, 4, 2, false).unwrap();
        let miss = backproject_cell(&layout, &sphere(), &cam(10.0), CellRef::new(0, 0, 0)).unwrap();
        assert!(miss.is_none());
    }

    #[test]
    fn antipodal_views_hit_points_related_by_half_turn() {
        // Views 0 and 2 of a 4-view layout sit 180 degrees apart; rotating
        // one hit by 180 degrees about the vertical axis must give the other.
        let layout = TemplateLayout::new(4, 3, 3, 2, false).unwrap();
        let ell = EllipsoidSpec::new(1.6, 0.9, 0.7).unwrap();
        let camera = CameraSpec::new(12.0, 5.0, 3.0).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let h0 = backproject_cell(&layout, &ell, &camera, CellRef::new(0, r, c)).unwrap();
                let h2 = backproject_cell(&layout, &ell, &camera, CellRef::new(2, r, c)).unwrap();
                match (h0, h2) {
                    (Some(a), Some(b)) => {
                        let rotated = Vector3::new(-a.point.x, -a.point.y, a.point.z);
                        assert_relative_eq!(rotated, b.point, epsilon = 1e-6);
                    }
                    (None, None) => {}
                    _ => panic!("antipodal views disagree on hit/miss at ({r},{c})"),
                }
            }
        }
    }

    #[test]
    fn every_hit_lies_on_the_surface() {
        let layout = TemplateLayout::new(8, 3, 3, 2, false).unwrap();
        let ell = EllipsoidSpec::new(1.8, 0.9, 0.7).unwrap();
        let camera = CameraSpec::default_for(&ell, 0.0, 3).unwrap();
        let hits = backproject_all(&layout, &ell, &camera).unwrap();
        assert!(!hits.is_empty());
        for point in hits.values() {
            assert!((ell.implicit(point) - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn degenerate_camera_is_rejected() {
        let layout = TemplateLayout::new(2, 2, 2, 2, false).unwrap();
        let ell = EllipsoidSpec::new(2.0, 1.0, 1.0).unwrap();
        let close = CameraSpec::new(10.0, 1.5, 2.0).unwrap();
        assert!(matches!(
            backproject_cell(&layout, &ell, &close, CellRef::new(0, 0, 0)),
            Err(Error::DegenerateCamera(_))
        ));
    }

    #[test]
    fn h_relation_on_1x1_is_empty() {
        let layout = TemplateLayout::new(2, 1, 1, 2, false).unwrap();
        assert!(build_grid_pairs(&layout, Relation::H).unwrap().is_empty());
    }

    #[test]
    fn h_relation_on_2x2_has_two_pairs_per_view() {
        let layout = TemplateLayout::new(3, 2, 2, 2, false).unwrap();
        let pairs = build_grid_pairs(&layout, Relation::H).unwrap();
        assert_eq!(pairs.len(), 3 * 2);
        assert!(pairs.contains(CellRef::new(1, 0, 0), CellRef::new(1, 0, 1)));
        assert!(pairs.contains(CellRef::new(1, 1, 0), CellRef::new(1, 1, 1)));
    }

    #[test]
    fn d2_relation_on_3x4_has_six_pairs_per_view() {
        // Enumerating (r, c) with r+1 < 3 and c+1 < 4 gives 2*3 = 6 pairs.
        let layout = TemplateLayout::new(2, 3, 4, 2, false).unwrap();
        let pairs = build_grid_pairs(&layout, Relation::D2).unwrap();
        assert_eq!(pairs.len(), 2 * 6);
    }

    #[test]
    fn d1_relation_leans_upper_left() {
        let layout = TemplateLayout::new(1, 2, 2, 2, false).unwrap();
        let pairs = build_grid_pairs(&layout, Relation::D1).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!(pairs.contains(CellRef::new(0, 0, 1), CellRef::new(0, 1, 0)));
    }

    #[test]
    fn cell_relation_pairs_every_cell_with_itself() {
        let layout = TemplateLayout::new(2, 2, 3, 2, false).unwrap();
        let pairs = build_grid_pairs(&layout, Relation::Cell).unwrap();
        assert_eq!(pairs.len(), layout.cell_count());
        assert!(pairs.pairs().iter().all(|(j, k)| j == k));
    }

    #[test]
    fn grid_relations_never_cross_views() {
        let layout = TemplateLayout::new(3, 3, 3, 2, false).unwrap();
        for rel in [Relation::H, Relation::V, Relation::D1, Relation::D2, Relation::Cell] {
            let pairs = build_grid_pairs(&layout, rel).unwrap();
            assert!(pairs.pairs().iter().all(|(j, k)| j.view == k.view));
        }
    }

    #[test]
    fn zero_radius_mv_pairs_are_empty() {
        let layout = TemplateLayout::new(8, 3, 3, 2, false).unwrap();
        let ell = EllipsoidSpec::new(1.8, 0.9, 0.7).unwrap();
        let camera = CameraSpec::default_for(&ell, 0.0, 3).unwrap();
        let pairs = build_mv_pairs(&layout, &ell, &camera, 0.0).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn diameter_radius_pairs_all_hitting_cells_of_adjacent_views() {
        let layout = TemplateLayout::new(8, 3, 3, 2, false).unwrap();
        let ell = EllipsoidSpec::new(1.8, 0.9, 0.7).unwrap();
        let camera = CameraSpec::default_for(&ell, 0.0, 3).unwrap();
        let tau = 2.0 * ell.max_semi_axis();
        let pairs = build_mv_pairs(&layout, &ell, &camera, tau).unwrap();
        let hits = backproject_all(&layout, &ell, &camera).unwrap();
        let mut expected = 0usize;
        for j in hits.keys() {
            for adj in [(j.view + 1) % 8, (j.view + 7) % 8] {
                expected += hits.keys().filter(|k| k.view == adj).count();
            }
        }
        assert_eq!(pairs.len(), expected);
    }

    #[test]
    fn mv_pairs_are_symmetric_and_cross_view_only() {
        let layout = TemplateLayout::new(8, 3, 3, 2, false).unwrap();
        let ell = EllipsoidSpec::new(1.8, 0.9, 0.7).unwrap();
        let camera = CameraSpec::default_for(&ell, 0.0, 3).unwrap();
        let (_, pairs) = build_mv_pairs_auto(&layout, &ell, &camera).unwrap();
        assert!(!pairs.is_empty());
        for &(j, k) in pairs.pairs() {
            assert_ne!(j.view, k.view);
            assert_eq!(layout.cyclic_view_distance(j.view, k.view), 1);
            assert!(pairs.contains(k, j), "missing mirror of {j:?} -> {k:?}");
        }
    }

    #[test]
    fn radius_monotonicity() {
        let layout = TemplateLayout::new(8, 3, 3, 2, false).unwrap();
        let ell = EllipsoidSpec::new(1.8, 0.9, 0.7).unwrap();
        let camera = CameraSpec::default_for(&ell, 0.0, 3).unwrap();
        let mut previous: Option<CellPairSet> = None;
        for tau in [0.1, 0.35, 0.6, 1.2, 4.0] {
            let pairs = build_mv_pairs(&layout, &ell, &camera, tau).unwrap();
            if let Some(prev) = &previous {
                for &(j, k) in prev.pairs() {
                    assert!(pairs.contains(j, k), "pair lost when radius grew to {tau}");
                }
            }
            previous = Some(pairs);
        }
    }

    #[test]
    fn default_builder_matches_brute_force_and_respects_cap() {
        let layout = TemplateLayout::new(8, 3, 3, 2, false).unwrap();
        let ell = sphere();
        let camera = CameraSpec::default_for(&ell, 0.0, 3).unwrap();
        let (tau, pairs) = build_mv_pairs_auto(&layout, &ell, &camera).unwrap();
        assert!(tau > 0.0);

        // Brute force: full cross-view distance table, then the same
        // mutual-nearest cap, written independently of the builder.
        let hits = backproject_all(&layout, &ell, &camera).unwrap();
        let cells: Vec<CellRef> = hits.keys().copied().collect();
        let mut within: Vec<(CellRef, CellRef, f64)> = Vec::new();
        for &j in &cells {
            for &k in &cells {
                let dv = layout.cyclic_view_distance(j.view, k.view);
                if dv == 1 {
                    let d = (hits[&j] - hits[&k]).norm();
                    if d <= tau {
                        within.push((j, k, d));
                    }
                }
            }
        }
        let rank_ok = |j: CellRef, k: CellRef| {
            let mut ds: Vec<(f64, CellRef)> = within
                .iter()
                .filter(|(a, b, _)| *a == j && b.view == k.view)
                .map(|(_, b, d)| (*d, *b))
                .collect();
            ds.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ds.iter().take(DEFAULT_K_CAP).any(|(_, b)| *b == k)
        };
        let mut expected = BTreeSet::new();
        for &(j, k, _) in &within {
            if rank_ok(j, k) && rank_ok(k, j) {
                expected.insert((j, k));
            }
        }
        let got: BTreeSet<(CellRef, CellRef)> = pairs.pairs().iter().copied().collect();
        assert_eq!(got, expected);

        // Cap honored per neighboring view.
        for &j in &cells {
            for adj in [(j.view + 1) % 8, (j.view + 7) % 8] {
                let partners = pairs
                    .pairs()
                    .iter()
                    .filter(|(a, b)| *a == j && b.view == adj)
                    .count();
                assert!(partners <= DEFAULT_K_CAP);
            }
        }

        // The radius really gives the median cell two partners per
        // neighboring view before capping.
        let mut with_two = 0usize;
        let mut combos = 0usize;
        for &j in &cells {
            for adj in [(j.view + 1) % 8, (j.view + 7) % 8] {
                combos += 1;
                let n = within
                    .iter()
                    .filter(|(a, b, _)| *a == j && b.view == adj)
                    .count();
                if n >= 2 {
                    with_two += 1;
                }
            }
        }
        assert!(2 * with_two >= combos, "median cell lacks two partners");
    }

    #[test]
    fn pair_text_round_trip() {
        let layout = TemplateLayout::new(3, 2, 2, 2, false).unwrap();
        let pairs = build_grid_pairs(&layout, Relation::V).unwrap();
        let text = pairs.to_text();
        assert!(text.lines().next().unwrap().contains(' '));
        let parsed = CellPairSet::from_text(Relation::V, &text, &layout).unwrap();
        assert_eq!(parsed, pairs);
    }

    #[test]
    fn pair_text_rejects_bad_cells() {
        let layout = TemplateLayout::new(2, 2, 2, 2, false).unwrap();
        assert!(CellPairSet::from_text(Relation::H, "0,0,0 5,0,0", &layout).is_err());
        assert!(CellPairSet::from_text(Relation::H, "0,0 1,0,0", &layout).is_err());
    }
}
