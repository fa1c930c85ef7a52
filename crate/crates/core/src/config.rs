//! Run configuration: a TOML file with the sections `net`, `loss`, `train`,
//! `data` and `eval`. Unknown keys are rejected and missing keys take the
//! toy defaults.
//!
//! A single seed drives every random source. It lives in `train.seed`
//! (the `--seed` flag overrides it); the seeds written in `data` and
//! `eval.ransac` are offsets added to it, see [`RunConfig::effective`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CloudLayout, ScanSpec, TrajectorySpec, WorldSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::NetConfig;
use crate::pipeline::Selection;
use crate::registration::RansacConfig;
use crate::trainer::TrainConfig;

/// Synthetic world and the traversals drawn from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub world: WorldSpec,
    pub scan: ScanSpec,
    pub layout: CloudLayout,
    /// Training traversals.
    pub train: Vec<TrajectorySpec>,
    pub database: TrajectorySpec,
    /// Perturbed second traversal used as queries.
    pub queries: TrajectorySpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        let train = |k: u64, lateral: f64| TrajectorySpec {
            count: 0,
            spacing: 1.5,
            start: 0.75 * k as f64,
            lateral_offset: lateral,
            perturb_lateral: 0.5,
            perturb_yaw_deg: 10.0,
            seed: 100 + k,
            ..TrajectorySpec::default()
        };
        Self {
            world: WorldSpec::default(),
            scan: ScanSpec::toy(),
            layout: CloudLayout::Xyz,
            train: vec![train(0, -1.0), train(1, 1.0)],
            database: TrajectorySpec {
                count: 200,
                spacing: 0.0,
                seed: 200,
                ..TrajectorySpec::default()
            },
            queries: TrajectorySpec {
                count: 100,
                spacing: 0.0,
                start: 1.3,
                perturb_lateral: 1.0,
                perturb_along: 0.5,
                perturb_yaw_deg: 10.0,
                seed: 300,
                ..TrajectorySpec::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Keypoints per cloud used for registration.
    pub keypoints: usize,
    pub top_n: Vec<usize>,
    /// Recall distance thresholds, meters.
    pub thresholds: Vec<f64>,
    /// A query passes the coarse stage when its top-1 entry lies this close.
    pub coarse_threshold: f64,
    pub selection: Selection,
    /// Keep only reciprocal best descriptor matches.
    pub mutual: bool,
    pub repeatability_radius: f64,
    pub ransac: RansacConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            keypoints: 128,
            top_n: vec![1, 5],
            thresholds: vec![5.0, 20.0],
            coarse_threshold: 5.0,
            selection: Selection::Salient,
            mutual: false,
            repeatability_radius: 0.5,
            ransac: RansacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Toy defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes every value as `config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.world.validate()?;
        self.data.scan.validate()?;
        let e = &self.eval;
        if e.keypoints == 0 || e.top_n.is_empty() || e.top_n.contains(&0) {
            return Err(Error::Config("eval.keypoints and eval.top_n entries must be positive".into()));
        }
        if e.thresholds.is_empty() || e.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("eval.thresholds must be positive".into()));
        }
        if !(e.coarse_threshold > 0.0 && e.repeatability_radius > 0.0) {
            return Err(Error::Config("eval distances must be positive".into()));
        }
        if e.ransac.max_iters == 0 || !(e.ransac.inlier_radius > 0.0) {
            return Err(Error::Config("eval.ransac needs max_iters ≥ 1 and a positive inlier_radius".into()));
        }
        Ok(())
    }

    /// Copy with the derived seeds filled in: every data and RANSAC seed is
    /// its configured offset plus `train.seed`.
    pub fn effective(&self) -> RunConfig {
        let s = self.train.seed;
        let mut out = self.clone();
        out.data.world.seed = self.data.world.seed.wrapping_add(s);
        for t in out.data.train.iter_mut() {
            t.seed = t.seed.wrapping_add(s);
        }
        out.data.database.seed = self.data.database.seed.wrapping_add(s);
        out.data.queries.seed = self.data.queries.seed.wrapping_add(s);
        out.eval.ransac.seed = self.eval.ransac.seed.wrapping_add(s);
        out
    }
}

/// Parses `"5,20"` style lists.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {v:?} in list {text:?}")))
        })
        .collect()
}
