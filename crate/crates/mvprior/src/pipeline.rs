//! Command implementations behind the experiment CLI.
//!
//! Each command reads its inputs from the configured output directory,
//! writes its artifacts, and records them in `manifest.json` — the SHA-256
//! of the config text, plus per-artifact hashes, the producing command and
//! the seeds it consumed. Commands refuse to overwrite existing outputs
//! unless forced; forcing a re-run with an unchanged config reproduces
//! every artifact byte for byte, so the manifest hashes double as a
//! determinism check.
//!
//! Artifact layout under `paths.out_dir`:
//!
//! ```text
//! world.bin                     generated world (gen-world)
//! data/<category>/train.bin     training windows (gen-data)
//! data/target/test/map-NNNN.bin test feature maps (gen-data)
//! data/target/test/annotations.txt
//! models/source-N.bin           bootstrap replica models (train-sources)
//! models/target.bin             trained target model (train-target)
//! prior/sigma.bin, prior/meta.json
//! logs/train-sources.csv, logs/train-target.csv
//! reports/{eval,pr,confusion,protocol}.csv
//! reports/{pr,confusion,kshot}.svg
//! manifest.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{
    detect, evaluate, read_annotations, write_annotations, Annotation, EvalSample, FeatureMap,
};
use crate::geometry::{build_grid_pairs, build_mv_pairs_auto, CellPairSet, Relation};
use crate::model::MultiViewModel;
use crate::prior::SigmaMatrix;
use crate::regularizer::build_regularizer;
use crate::report::{
    confusion_csv, confusion_svg, kshot_curves, kshot_svg, metrics_csv, parse_confusion_csv,
    parse_pr_csv, parse_protocol_csv, pr_csv, pr_svg, train_log_csv, MetricsRow,
};
use crate::seeding::derive;
use crate::synth::{
    build_prior_sigma, generate_world, run_protocol, sample_dataset, CategoryRole, PriorKind,
    World,
};
use crate::trainer::{bootstrap_sources, stack_examples, train_direct, LabeledWindowSet, TrainLog};

const SALT_SOURCE_SPLIT: u64 = 1;
const SALT_TARGET_SPLIT: u64 = 2;

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// One artifact's provenance line in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub command: String,
    pub seeds: BTreeMap<String, u64>,
    pub sha256: String,
}

/// `manifest.json`: config hash plus per-artifact provenance, keyed by
/// path relative to the output directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub config_sha256: String,
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Bound experiment: a validated config plus the hash of its source text.
pub struct Pipeline {
    cfg: ExperimentConfig,
    config_sha256: String,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, config_text: &str) -> Self {
        Self {
            cfg,
            config_sha256: sha256_hex(config_text.as_bytes()),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.out_dir().join(rel)
    }

    pub fn world_path(&self) -> PathBuf {
        self.out("world.bin")
    }

    pub fn train_path(&self, role: CategoryRole) -> PathBuf {
        self.out(&format!("data/{}/train.bin", role.name()))
    }

    pub fn test_map_path(&self, index: usize) -> PathBuf {
        self.out(&format!("data/target/test/map-{index:04}.bin"))
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.out("data/target/test/annotations.txt")
    }

    pub fn source_model_path(&self, index: usize) -> PathBuf {
        self.out(&format!("models/source-{index}.bin"))
    }

    pub fn target_model_path(&self) -> PathBuf {
        self.out("models/target.bin")
    }

    pub fn sigma_path(&self) -> PathBuf {
        self.out("prior/sigma.bin")
    }

    pub fn prior_meta_path(&self) -> PathBuf {
        self.out("prior/meta.json")
    }

    pub fn sources_log_path(&self) -> PathBuf {
        self.out("logs/train-sources.csv")
    }

    pub fn target_log_path(&self) -> PathBuf {
        self.out("logs/train-target.csv")
    }

    pub fn eval_csv_path(&self) -> PathBuf {
        self.out("reports/eval.csv")
    }

    pub fn pr_csv_path(&self) -> PathBuf {
        self.out("reports/pr.csv")
    }

    pub fn confusion_csv_path(&self) -> PathBuf {
        self.out("reports/confusion.csv")
    }

    pub fn protocol_csv_path(&self) -> PathBuf {
        self.out("reports/protocol.csv")
    }

    pub fn pr_svg_path(&self) -> PathBuf {
        self.out("reports/pr.svg")
    }

    pub fn confusion_svg_path(&self) -> PathBuf {
        self.out("reports/confusion.svg")
    }

    pub fn kshot_svg_path(&self) -> PathBuf {
        self.out("reports/kshot.svg")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out("manifest.json")
    }

    fn guard_outputs(&self, outputs: &[PathBuf], force: bool) -> Result<()> {
        if !force {
            for p in outputs {
                if p.exists() {
                    return Err(Error::OutputExists(p.display().to_string()));
                }
            }
        }
        for p in outputs {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir)?;
            }
        }
        Ok(())
    }

    fn require(&self, path: &Path, produced_by: &str) -> Result<()> {
        if !path.exists() {
            return Err(Error::InvalidArgument(format!(
                "{} not found; run `{produced_by}` first",
                path.display()
            )));
        }
        Ok(())
    }

    /// Records artifacts in the manifest after a command wrote them.
    fn record(&self, command: &str, seeds: &[(&str, u64)], written: &[PathBuf]) -> Result<()> {
        let manifest_path = self.manifest_path();
        let mut manifest = Manifest::load(&manifest_path)?;
        manifest.config_sha256 = self.config_sha256.clone();
        let seeds: BTreeMap<String, u64> =
            seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for path in written {
            let rel = path
                .strip_prefix(self.cfg.out_dir())
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            manifest.entries.insert(
                rel,
                ManifestEntry {
                    command: command.to_string(),
                    seeds: seeds.clone(),
                    sha256: sha256_file(path)?,
                },
            );
        }
        manifest.save(&manifest_path)?;
        Ok(())
    }

    /// Generates the world and writes `world.bin`.
    pub fn gen_world(&self, force: bool) -> Result<Vec<PathBuf>> {
        let world_cfg = self.cfg.world_config()?;
        let outputs = vec![self.world_path()];
        self.guard_outputs(&outputs, force)?;
        let world = generate_world(&world_cfg)?;
        world.save(&outputs[0])?;
        self.record("gen-world", &[("world", world_cfg.seed)], &outputs)?;
        Ok(outputs)
    }

    /// Samples the source and target splits plus the target test maps.
    pub fn gen_data(&self, force: bool) -> Result<Vec<PathBuf>> {
        self.require(&self.world_path(), "gen-world")?;
        let world = World::load(self.world_path())?;
        let source_seed = derive(self.cfg.data.seed, SALT_SOURCE_SPLIT);
        let target_seed = derive(self.cfg.data.seed, SALT_TARGET_SPLIT);
        let mut outputs = vec![
            self.train_path(CategoryRole::Source),
            self.train_path(CategoryRole::Target),
            self.annotations_path(),
        ];
        for i in 0..self.cfg.data.test_maps {
            outputs.push(self.test_map_path(i));
        }
        self.guard_outputs(&outputs, force)?;

        let source = sample_dataset(
            &world,
            CategoryRole::Source,
            &self.cfg.source_dataset_spec(source_seed),
        )?;
        source.train.save(self.train_path(CategoryRole::Source))?;
        let target = sample_dataset(
            &world,
            CategoryRole::Target,
            &self.cfg.target_dataset_spec(target_seed),
        )?;
        target.train.save(self.train_path(CategoryRole::Target))?;
        let mut annotations = Vec::new();
        for (i, (map, truths)) in target.test_maps.iter().zip(&target.test_truths).enumerate() {
            map.save(self.test_map_path(i))?;
            for gt in truths {
                annotations.push(Annotation {
                    image: map.id().to_string(),
                    gt: gt.clone(),
                });
            }
        }
        write_annotations(self.annotations_path(), &annotations)?;
        self.record(
            "gen-data",
            &[
                ("data", self.cfg.data.seed),
                ("source_split", source_seed),
                ("target_split", target_seed),
            ],
            &outputs,
        )?;
        Ok(outputs)
    }

    /// Trains the bootstrap source ensemble on the source split.
    pub fn train_sources(&self, force: bool) -> Result<Vec<PathBuf>> {
        self.require(&self.train_path(CategoryRole::Source), "gen-data")?;
        let train = LabeledWindowSet::load(self.train_path(CategoryRole::Source))?;
        let n = self.cfg.prior.sources;
        let mut outputs: Vec<PathBuf> = (0..n).map(|i| self.source_model_path(i)).collect();
        outputs.push(self.sources_log_path());
        self.guard_outputs(&outputs, force)?;
        let replicas = bootstrap_sources(
            &train,
            n,
            Some(self.cfg.prior.source_shots_per_view),
            &self.cfg.train_config(),
            self.cfg.prior.seed,
        )?;
        let mut logs: Vec<(String, TrainLog)> = Vec::with_capacity(n);
        for (i, (model, log)) in replicas.into_iter().enumerate() {
            model.save(self.source_model_path(i))?;
            logs.push((format!("source-{i}"), log));
        }
        fs::write(self.sources_log_path(), train_log_csv(&logs))?;
        self.record(
            "train-sources",
            &[
                ("bootstrap", self.cfg.prior.seed),
                ("trainer", self.cfg.trainer.seed),
            ],
            &outputs,
        )?;
        Ok(outputs)
    }

    /// Builds the configured prior from the source models and writes the
    /// matrix plus a metadata record (kind, mask, sources, numerical rank).
    pub fn learn_prior(&self, force: bool) -> Result<Vec<PathBuf>> {
        let kind = self.cfg.prior_kind()?;
        let layout = self.cfg.layout()?;
        let outputs = vec![self.sigma_path(), self.prior_meta_path()];
        self.guard_outputs(&outputs, force)?;
        let sigma = if kind == PriorKind::None {
            SigmaMatrix::zero(layout.clone())
        } else {
            let mut sources = Vec::with_capacity(self.cfg.prior.sources);
            for i in 0..self.cfg.prior.sources {
                let path = self.source_model_path(i);
                self.require(&path, "train-sources")?;
                let model = MultiViewModel::load(&path)?;
                if model.layout() != &layout {
                    return Err(Error::LayoutMismatch(format!(
                        "source model {} does not match the configured layout",
                        path.display()
                    )));
                }
                sources.push(model);
            }
            build_prior_sigma(
                &self.cfg.ellipsoid()?,
                &self.cfg.camera()?,
                &sources,
                kind,
                &self.cfg.mask_spec()?,
            )?
        };
        sigma.save(self.sigma_path())?;
        let meta = PriorMeta {
            dim: sigma.dim(),
            kind: kind.tag().to_string(),
            mask: self.cfg.mask_variant()?.tag().to_string(),
            rank: numerical_rank(&sigma),
            sources: if kind == PriorKind::None {
                0
            } else {
                self.cfg.prior.sources
            },
        };
        fs::write(
            self.prior_meta_path(),
            serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
        )?;
        self.record("learn-prior", &[], &outputs)?;
        Ok(outputs)
    }

    /// Trains the target model on the full target split under the learned
    /// prior. With prior kind `none` and no prior file, the identity
    /// regularizer is used directly, so the result is a plain SVM.
    pub fn train_target(&self, force: bool) -> Result<Vec<PathBuf>> {
        self.require(&self.train_path(CategoryRole::Target), "gen-data")?;
        let layout = self.cfg.layout()?;
        let outputs = vec![self.target_model_path(), self.target_log_path()];
        self.guard_outputs(&outputs, force)?;
        let sigma = if self.sigma_path().exists() {
            let sigma = SigmaMatrix::load(self.sigma_path())?;
            if sigma.layout() != &layout {
                return Err(Error::LayoutMismatch(format!(
                    "prior {} does not match the configured layout",
                    self.sigma_path().display()
                )));
            }
            sigma
        } else if self.cfg.prior_kind()? == PriorKind::None {
            SigmaMatrix::zero(layout.clone())
        } else {
            return Err(Error::InvalidArgument(format!(
                "{} not found; run `learn-prior` first",
                self.sigma_path().display()
            )));
        };
        let reg = build_regularizer(sigma)?;
        let train = LabeledWindowSet::load(self.train_path(CategoryRole::Target))?;
        if train.layout() != &layout {
            return Err(Error::LayoutMismatch(
                "target split does not match the configured layout".into(),
            ));
        }
        let examples = stack_examples(&train);
        let (model, log) = train_direct(&layout, &examples, &reg, &self.cfg.train_config())?;
        model.save(self.target_model_path())?;
        fs::write(
            self.target_log_path(),
            train_log_csv(&[("target".to_string(), log)]),
        )?;
        self.record(
            "train-target",
            &[("trainer", self.cfg.trainer.seed)],
            &outputs,
        )?;
        Ok(outputs)
    }

    /// Runs the target model over the test maps and writes the metric,
    /// precision/recall and confusion tables.
    pub fn eval(&self, force: bool) -> Result<Vec<PathBuf>> {
        self.require(&self.target_model_path(), "train-target")?;
        self.require(&self.annotations_path(), "gen-data")?;
        let layout = self.cfg.layout()?;
        let outputs = vec![
            self.eval_csv_path(),
            self.pr_csv_path(),
            self.confusion_csv_path(),
        ];
        self.guard_outputs(&outputs, force)?;
        let model = MultiViewModel::load(self.target_model_path())?;
        if model.layout() != &layout {
            return Err(Error::LayoutMismatch(
                "target model does not match the configured layout".into(),
            ));
        }
        let annotations = read_annotations(self.annotations_path())?;
        let mut samples = Vec::with_capacity(self.cfg.data.test_maps);
        for i in 0..self.cfg.data.test_maps {
            let path = self.test_map_path(i);
            self.require(&path, "gen-data")?;
            let map = FeatureMap::load(&path)?;
            let truths = annotations
                .iter()
                .filter(|a| a.image == map.id())
                .map(|a| a.gt.clone())
                .collect();
            let detections = detect(
                &model,
                &map,
                f64::NEG_INFINITY,
                self.cfg.protocol.nms_iou,
            )?;
            samples.push(EvalSample::new(detections, truths));
        }
        let report = evaluate(&samples, layout.bins_deg(), self.cfg.protocol.iou_thresh)?;
        let row = MetricsRow {
            model: "target".into(),
            iou_thresh: report.iou_thresh,
            ap: report.ap,
            vp: report.vp,
            ap_vp_d: report.ap_vp_d,
            ap_vp_c: report.ap_vp_c,
            true_positives: report.true_positives as u64,
            positives: report.positives as u64,
        };
        fs::write(self.eval_csv_path(), metrics_csv(&[row]))?;
        fs::write(self.pr_csv_path(), pr_csv(&report.pr_points))?;
        fs::write(
            self.confusion_csv_path(),
            confusion_csv(&report.confusion, layout.bins_deg()),
        )?;
        self.record("eval", &[], &outputs)?;
        Ok(outputs)
    }

    /// Renders the SVG plots from the CSV tables — a pure function of the
    /// table bytes, so re-rendering unchanged tables reproduces the files.
    pub fn report(&self, force: bool) -> Result<Vec<PathBuf>> {
        self.require(&self.pr_csv_path(), "eval")?;
        self.require(&self.confusion_csv_path(), "eval")?;
        let mut outputs = vec![self.pr_svg_path(), self.confusion_svg_path()];
        let have_protocol = self.protocol_csv_path().exists();
        if have_protocol {
            outputs.push(self.kshot_svg_path());
        }
        self.guard_outputs(&outputs, force)?;
        let points = parse_pr_csv(&fs::read_to_string(self.pr_csv_path())?)?;
        fs::write(self.pr_svg_path(), pr_svg(&points))?;
        let (bins, counts) =
            parse_confusion_csv(&fs::read_to_string(self.confusion_csv_path())?)?;
        fs::write(self.confusion_svg_path(), confusion_svg(&bins, &counts))?;
        if have_protocol {
            let rows = parse_protocol_csv(&fs::read_to_string(self.protocol_csv_path())?)?;
            let (k_labels, curves) = kshot_curves(&rows);
            fs::write(self.kshot_svg_path(), kshot_svg(&k_labels, &curves))?;
        }
        self.record("report", &[], &outputs)?;
        Ok(outputs)
    }

    /// Runs the configured statistical protocol and writes its table.
    pub fn run_protocol(&self, force: bool) -> Result<Vec<PathBuf>> {
        self.require(&self.world_path(), "gen-world")?;
        let world = World::load(self.world_path())?;
        let spec = self.cfg.protocol_spec()?;
        let outputs = vec![self.protocol_csv_path()];
        self.guard_outputs(&outputs, force)?;
        let results = run_protocol(&world, &spec)?;
        fs::write(&outputs[0], results.to_csv())?;
        self.record("run-protocol", &[("protocol", spec.seed)], &outputs)?;
        Ok(outputs)
    }

    /// Writes one relation's cell-pair set as plain text. Returns the
    /// output path and, for the cross-view relation, the chosen radius.
    pub fn dump_pairs(
        &self,
        relation: &str,
        out: Option<PathBuf>,
        force: bool,
    ) -> Result<(PathBuf, Option<f64>)> {
        let relation =
            Relation::parse(relation).map_err(|e| Error::Config(format!("--relation: {e}")))?;
        let layout = self.cfg.layout()?;
        let (pairs, tau): (CellPairSet, Option<f64>) = if relation == Relation::Mv {
            let (tau, pairs) =
                build_mv_pairs_auto(&layout, &self.cfg.ellipsoid()?, &self.cfg.camera()?)?;
            (pairs, Some(tau))
        } else {
            (build_grid_pairs(&layout, relation)?, None)
        };
        let path = out.unwrap_or_else(|| self.out(&format!("pairs-{}.txt", relation.tag())));
        self.guard_outputs(std::slice::from_ref(&path), force)?;
        fs::write(&path, pairs.to_text())?;
        self.record("dump-pairs", &[], std::slice::from_ref(&path))?;
        Ok((path, tau))
    }
}

/// Recorded alongside the prior matrix: its provenance and numerical rank.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PriorMeta {
    pub dim: usize,
    pub kind: String,
    pub mask: String,
    pub rank: usize,
    pub sources: usize,
}

/// Numerical rank of the prior matrix: eigenvalues above `1e-9` of the
/// largest magnitude count toward the rank.
pub fn numerical_rank(sigma: &SigmaMatrix) -> usize {
    let eigs = sigma.to_dense().symmetric_eigenvalues();
    let max = eigs.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    if max == 0.0 {
        return 0;
    }
    let tol = 1e-9 * max;
    eigs.iter().filter(|e| e.abs() > tol).count()
}
