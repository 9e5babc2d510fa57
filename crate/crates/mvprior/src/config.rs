//! Experiment configuration: one TOML file drives every command.
//!
//! Every section and field has a default, so an empty file describes the
//! stock benchmark (eight views around a car-like ellipsoid). Unknown keys
//! are rejected and every error names the offending field path, so typos
//! fail loudly instead of silently running defaults. All randomness flows
//! from the named seeds in the file — no command draws hidden entropy.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eval::DEFAULT_NMS_IOU;
use crate::geometry::{CameraSpec, EllipsoidSpec};
use crate::model::TemplateLayout;
use crate::prior::{MaskSpec, MaskVariant};
use crate::synth::{
    DatasetSpec, MethodSpec, PriorKind, ProtocolKind, ProtocolSpec, ShotCount, WorldConfig,
};
use crate::trainer::TrainConfig;

fn config_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

/// Template grid shape shared by every model in the experiment.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    pub views: usize,
    pub rows: usize,
    pub cols: usize,
    pub cell_dim: usize,
    pub per_view_bias: bool,
    /// Azimuth bin centers in degrees; empty means uniform starting at 0.
    pub bins_deg: Vec<f64>,
}

impl Default for LayoutSection {
    fn default() -> Self {
        Self {
            views: 8,
            rows: 3,
            cols: 3,
            cell_dim: 4,
            per_view_bias: true,
            bins_deg: Vec::new(),
        }
    }
}

/// Object shape the views look at.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EllipsoidSection {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for EllipsoidSection {
    fn default() -> Self {
        Self {
            a: 1.8,
            b: 0.9,
            c: 0.7,
        }
    }
}

/// Camera ring; omitted fields derive from the ellipsoid and layout.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub elevation_deg: Option<f64>,
    pub distance: Option<f64>,
    pub focal: Option<f64>,
}

/// Synthetic world knobs: field smoothness and noise scales.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub band_limit: f64,
    pub field_terms: usize,
    pub sigma_view: f64,
    pub sigma_pos: f64,
    pub sigma_neg: f64,
    pub sigma_cat: f64,
    pub same_world: bool,
    pub seed: u64,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            band_limit: 2.5,
            field_terms: 24,
            sigma_view: 0.05,
            sigma_pos: 0.8,
            sigma_neg: 1.0,
            sigma_cat: 0.3,
            same_world: false,
            seed: 42,
        }
    }
}

/// Split sizes for the one-off pipeline commands.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source_pool_per_view: usize,
    pub target_pool_per_view: usize,
    pub neg_count: usize,
    pub test_maps: usize,
    pub instances_per_map: usize,
    pub map_rows: usize,
    pub map_cols: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source_pool_per_view: 30,
            target_pool_per_view: 10,
            neg_count: 40,
            test_maps: 4,
            instances_per_map: 4,
            map_rows: 12,
            map_cols: 12,
            seed: 1042,
        }
    }
}

/// Solver settings.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub c: f64,
    pub tolerance: f64,
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            c: d.c,
            tolerance: d.tolerance,
            max_passes: d.max_passes,
            seed: 7,
        }
    }
}

/// Which prior the pipeline's learn step builds.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    /// `none`, `sv`, `mv` or `dense`.
    pub kind: String,
    /// `none`, `td2nd`, `td2all` or `nb2all`.
    pub mask: String,
    /// Bootstrap replicas forming the source ensemble.
    pub sources: usize,
    /// Positives per view resampled into each replica.
    pub source_shots_per_view: usize,
    /// Views the mask treats as carrying data; required for any mask.
    pub data_views: Vec<usize>,
    /// Bootstrap resampling seed.
    pub seed: u64,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            kind: "mv".into(),
            mask: "none".into(),
            sources: 5,
            source_shots_per_view: 15,
            data_views: Vec::new(),
            seed: 77,
        }
    }
}

/// A shot count: a number or the string `"all"`.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ShotEntry {
    Count(usize),
    Label(String),
}

impl ShotEntry {
    fn to_shot_count(&self, path: &str) -> Result<ShotCount> {
        match self {
            ShotEntry::Count(k) => Ok(ShotCount::Shots(*k)),
            ShotEntry::Label(s) if s == "all" => Ok(ShotCount::All),
            ShotEntry::Label(s) => Err(config_err(
                path,
                format!("expected a shot count or \"all\", got {s:?}"),
            )),
        }
    }
}

/// The statistical protocol the `run-protocol` command executes.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    /// `kshot` or `sparse_kshot`.
    pub kind: String,
    /// Shot counts swept by the kshot protocol.
    pub ks: Vec<ShotEntry>,
    /// Shot count of available views in the sparse protocol.
    pub k: ShotEntry,
    /// Per-view availability of the sparse protocol (length = views).
    pub available: Vec<bool>,
    /// Methods to compare, e.g. `"none"`, `"dense"`, `"mv+td2nd"`.
    pub methods: Vec<String>,
    pub repetitions: usize,
    pub iou_thresh: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            kind: "kshot".into(),
            ks: vec![
                ShotEntry::Count(1),
                ShotEntry::Count(5),
                ShotEntry::Count(10),
            ],
            k: ShotEntry::Count(5),
            available: Vec::new(),
            methods: vec!["none".into(), "dense".into()],
            repetitions: 5,
            iou_thresh: 0.5,
            nms_iou: DEFAULT_NMS_IOU,
            seed: 13,
        }
    }
}

/// Where artifacts go.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// The whole experiment description. `Default` is the stock benchmark;
/// an empty TOML file parses to exactly that.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub layout: LayoutSection,
    pub ellipsoid: EllipsoidSection,
    pub camera: CameraSection,
    pub world: WorldSection,
    pub data: DataSection,
    pub trainer: TrainerSection,
    pub prior: PriorSection,
    pub protocol: ProtocolSection,
    pub paths: PathsSection,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses and validates TOML text. Errors name the field path.
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| config_err(&e.path().to_string(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range and consistency checks beyond what serde enforces; every
    /// message names the offending field path.
    pub fn validate(&self) -> Result<()> {
        self.layout()?;
        self.ellipsoid()?;
        self.world_config()?;
        if !(self.trainer.c > 0.0) || !self.trainer.c.is_finite() {
            return Err(config_err("trainer.c", "must be finite and positive"));
        }
        if !(self.trainer.tolerance > 0.0) || !self.trainer.tolerance.is_finite() {
            return Err(config_err("trainer.tolerance", "must be finite and positive"));
        }
        if self.trainer.max_passes == 0 {
            return Err(config_err("trainer.max_passes", "must be at least 1"));
        }
        let kind = self.prior_kind()?;
        let mask = self.mask_variant()?;
        if mask != MaskVariant::None && self.prior.data_views.is_empty() {
            return Err(config_err(
                "prior.data_views",
                format!("mask `{}` requires at least one data view", mask.tag()),
            ));
        }
        for &v in &self.prior.data_views {
            if v >= self.layout.views {
                return Err(config_err(
                    "prior.data_views",
                    format!("view {v} out of range for {} views", self.layout.views),
                ));
            }
        }
        if kind != PriorKind::None && self.prior.sources == 0 {
            return Err(config_err("prior.sources", "must be at least 1"));
        }
        if self.prior.source_shots_per_view == 0 {
            return Err(config_err("prior.source_shots_per_view", "must be at least 1"));
        }
        if self.prior.source_shots_per_view > self.data.source_pool_per_view {
            return Err(config_err(
                "prior.source_shots_per_view",
                format!(
                    "exceeds data.source_pool_per_view = {}",
                    self.data.source_pool_per_view
                ),
            ));
        }
        self.methods()?;
        self.protocol_kind()?;
        if self.protocol.repetitions == 0 {
            return Err(config_err("protocol.repetitions", "must be at least 1"));
        }
        if !(self.protocol.iou_thresh > 0.0 && self.protocol.iou_thresh < 1.0) {
            return Err(config_err(
                "protocol.iou_thresh",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(self.protocol.nms_iou >= 0.0 && self.protocol.nms_iou < 1.0) {
            return Err(config_err("protocol.nms_iou", "must lie in [0, 1)"));
        }
        if self.data.test_maps > 0 {
            if self.data.map_rows < self.layout.rows || self.data.map_cols < self.layout.cols {
                return Err(config_err(
                    "data.map_rows",
                    format!(
                        "test maps of {} x {} cells cannot hold a {} x {} template",
                        self.data.map_rows, self.data.map_cols, self.layout.rows, self.layout.cols
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<TemplateLayout> {
        let s = &self.layout;
        let built = if s.bins_deg.is_empty() {
            TemplateLayout::new(s.views, s.rows, s.cols, s.cell_dim, s.per_view_bias)
        } else {
            TemplateLayout::with_bins(
                s.views,
                s.bins_deg.clone(),
                s.rows,
                s.cols,
                s.cell_dim,
                s.per_view_bias,
            )
        };
        built.map_err(|e| config_err("layout", e))
    }

    pub fn ellipsoid(&self) -> Result<EllipsoidSpec> {
        EllipsoidSpec::new(self.ellipsoid.a, self.ellipsoid.b, self.ellipsoid.c)
            .map_err(|e| config_err("ellipsoid", e))
    }

    pub fn camera(&self) -> Result<CameraSpec> {
        let layout = self.layout()?;
        let ellipsoid = self.ellipsoid()?;
        let derived = CameraSpec::default_for(&ellipsoid, layout.bins_deg()[0], layout.cols())
            .map_err(|e| config_err("camera", e))?;
        CameraSpec::new(
            self.camera.elevation_deg.unwrap_or(derived.elevation_deg),
            self.camera.distance.unwrap_or(derived.distance),
            self.camera.focal.unwrap_or(derived.focal),
        )
        .map_err(|e| config_err("camera", e))
    }

    pub fn world_config(&self) -> Result<WorldConfig> {
        let s = &self.world;
        let cfg = WorldConfig {
            layout: self.layout()?,
            ellipsoid: self.ellipsoid()?,
            camera: self.camera()?,
            band_limit: s.band_limit,
            field_terms: s.field_terms,
            sigma_view: s.sigma_view,
            sigma_pos: s.sigma_pos,
            sigma_neg: s.sigma_neg,
            sigma_cat: s.sigma_cat,
            same_world: s.same_world,
            seed: s.seed,
        };
        cfg.validate().map_err(|e| config_err("world", e))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            c: self.trainer.c,
            tolerance: self.trainer.tolerance,
            max_passes: self.trainer.max_passes,
            seed: self.trainer.seed,
        }
    }

    pub fn prior_kind(&self) -> Result<PriorKind> {
        PriorKind::parse(&self.prior.kind).map_err(|e| config_err("prior.kind", e))
    }

    pub fn mask_variant(&self) -> Result<MaskVariant> {
        MaskVariant::parse(&self.prior.mask).map_err(|e| config_err("prior.mask", e))
    }

    pub fn mask_spec(&self) -> Result<MaskSpec> {
        Ok(MaskSpec::new(
            self.mask_variant()?,
            self.prior.data_views.iter().copied(),
        ))
    }

    pub fn methods(&self) -> Result<Vec<MethodSpec>> {
        if self.protocol.methods.is_empty() {
            return Err(config_err("protocol.methods", "must name at least one method"));
        }
        self.protocol
            .methods
            .iter()
            .map(|m| MethodSpec::parse(m).map_err(|e| config_err("protocol.methods", e)))
            .collect()
    }

    pub fn protocol_kind(&self) -> Result<ProtocolKind> {
        match self.protocol.kind.as_str() {
            "kshot" => {
                if self.protocol.ks.is_empty() {
                    return Err(config_err("protocol.ks", "must list at least one shot count"));
                }
                let ks = self
                    .protocol
                    .ks
                    .iter()
                    .map(|k| k.to_shot_count("protocol.ks"))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ProtocolKind::KShot { ks })
            }
            "sparse_kshot" => {
                if self.protocol.available.len() != self.layout.views {
                    return Err(config_err(
                        "protocol.available",
                        format!(
                            "needs one flag per view ({} views, got {})",
                            self.layout.views,
                            self.protocol.available.len()
                        ),
                    ));
                }
                if !self.protocol.available.iter().any(|&a| a) {
                    return Err(config_err(
                        "protocol.available",
                        "at least one view must be available",
                    ));
                }
                Ok(ProtocolKind::SparseKShot {
                    available: self.protocol.available.clone(),
                    k: self.protocol.k.to_shot_count("protocol.k")?,
                })
            }
            other => Err(config_err(
                "protocol.kind",
                format!("expected \"kshot\" or \"sparse_kshot\", got {other:?}"),
            )),
        }
    }

    pub fn protocol_spec(&self) -> Result<ProtocolSpec> {
        let mut spec = ProtocolSpec::new(self.protocol_kind()?, self.methods()?, self.protocol.seed);
        spec.sources = self.prior.sources;
        spec.source_pool_per_view = self.data.source_pool_per_view;
        spec.source_shots_per_view = self.prior.source_shots_per_view;
        spec.target_pool_per_view = self.data.target_pool_per_view;
        spec.neg_count = self.data.neg_count;
        spec.test_maps = self.data.test_maps;
        spec.instances_per_map = self.data.instances_per_map;
        spec.map_rows = self.data.map_rows;
        spec.map_cols = self.data.map_cols;
        spec.repetitions = self.protocol.repetitions;
        spec.train = self.train_config();
        spec.iou_thresh = self.protocol.iou_thresh;
        spec.nms_iou = self.protocol.nms_iou;
        Ok(spec)
    }

    /// Split description of the source training pool (no test maps).
    pub fn source_dataset_spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            pos_per_view: vec![self.data.source_pool_per_view; self.layout.views],
            neg_count: self.data.neg_count,
            test_maps: 0,
            instances_per_map: 0,
            map_rows: self.data.map_rows,
            map_cols: self.data.map_cols,
            seed,
        }
    }

    /// Split description of the target pool plus its test maps.
    pub fn target_dataset_spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            pos_per_view: vec![self.data.target_pool_per_view; self.layout.views],
            neg_count: self.data.neg_count,
            test_maps: self.data.test_maps,
            instances_per_map: self.data.instances_per_map,
            map_rows: self.data.map_rows,
            map_cols: self.data.map_cols,
            seed,
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.paths.out_dir
    }
}
