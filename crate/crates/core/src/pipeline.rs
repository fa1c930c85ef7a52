//! Two-stage relocalization: top-1 retrieval by global descriptor, then
//! keypoint matching and RANSAC against the retrieved database cloud.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::POSE_FILE_TOLERANCE;
use crate::error::{Error, Result};
use crate::geometry::PoseSE3;
use crate::model::{select_keypoints, KeypointSet};
use crate::registration::{pose_errors, register_selected, RansacConfig, RansacOutcome};
use crate::retrieval::DescriptorDB;

/// How the registration keypoints are chosen from a detected set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Lowest saliency uncertainty first.
    #[default]
    Salient,
    /// Uniformly random, saliency ignored.
    Random,
    /// Uniformly random and placed at the supervoxel centers, so neither
    /// saliency nor position regression is used.
    Centers,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salient" => Ok(Self::Salient),
            "random" => Ok(Self::Random),
            "centers" => Ok(Self::Centers),
            other => Err(Error::Config(format!(
                "unknown selection {other:?}, expected salient, random or centers"
            ))),
        }
    }
}

pub fn select(ks: &KeypointSet, k: usize, selection: Selection, seed: u64) -> KeypointSet {
    match selection {
        Selection::Salient => select_keypoints(ks, k),
        Selection::Random | Selection::Centers => {
            let mut rows: Vec<usize> = (0..ks.len()).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            rows.truncate(k.max(1));
            let sub = ks.subset(&rows);
            if selection == Selection::Centers {
                sub.at_centers()
            } else {
                sub
            }
        }
    }
}

/// Registers `query` against `reference`; the returned pose maps the query
/// frame into the reference frame.
pub fn register_pair(
    query: &KeypointSet,
    reference: &KeypointSet,
    k: usize,
    selection: Selection,
    mutual: bool,
    ransac: &RansacConfig,
    seed: u64,
) -> RansacOutcome {
    let sq = select(query, k, selection, seed);
    let sr = select(reference, k, selection, seed.wrapping_add(0x9E37_79B9));
    register_selected(&sq, &sr, mutual, ransac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub query: usize,
    pub top1: u64,
    pub descriptor_distance: f64,
    /// Estimated query pose in the world frame.
    pub pose: PoseSE3,
    pub inliers: usize,
    pub registered: bool,
}

#[derive(Debug, Clone)]
pub struct LocalizeOptions {
    pub keypoints: usize,
    pub selection: Selection,
    pub mutual: bool,
    pub ransac: RansacConfig,
}

/// Localizes every query. `db_keypoints(id)` supplies the detected
/// keypoints of a database cloud. Results follow query order.
pub fn localize<F>(
    db: &DescriptorDB,
    queries: &[(Vec<f64>, KeypointSet)],
    db_keypoints: F,
    opts: &LocalizeOptions,
) -> Result<Vec<Localization>>
where
    F: Fn(u64) -> Result<KeypointSet> + Sync,
{
    if db.is_empty() {
        return Err(Error::EmptyInput("localization needs a non-empty database"));
    }
    queries
        .par_iter()
        .enumerate()
        .map(|(i, (global, kq))| {
            let (top1, distance) = db.query_topk(global, 1)[0];
            let entry = db.get(top1).expect("ranked id exists");
            let kd = db_keypoints(top1)?;
            let seed = opts.ransac.seed.wrapping_add(i as u64);
            let outcome = register_pair(kq, &kd, opts.keypoints, opts.selection, opts.mutual, &opts.ransac, seed);
            Ok(Localization {
                query: i,
                top1,
                descriptor_distance: distance,
                pose: entry.pose()?.compose(&outcome.pose),
                inliers: outcome.inliers.len(),
                registered: outcome.success(),
            })
        })
        .collect()
}

pub const LOCALIZATION_CSV_HEADER: &str =
    "query,top1_id,descriptor_distance,inliers,registered,r00,r01,r02,t0,r10,r11,r12,t1,r20,r21,r22,t2";

pub fn localizations_csv(locs: &[Localization]) -> String {
    let mut s = format!("{LOCALIZATION_CSV_HEADER}\n");
    for l in locs {
        let pose: Vec<String> = l.pose.to_row_major().iter().map(|v| v.to_string()).collect();
        writeln!(
            s,
            "{},{},{},{},{},{}",
            l.query,
            l.top1,
            l.descriptor_distance,
            l.inliers,
            l.registered,
            pose.join(",")
        )
        .expect("string write");
    }
    s
}

pub fn parse_localizations(text: &str, path: &Path) -> Result<Vec<Localization>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LOCALIZATION_CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("expected header {LOCALIZATION_CSV_HEADER}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let err = |reason: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 17 {
                return Err(err(format!("expected 17 fields, got {}", f.len())));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| err(format!("bad number {:?}", f[k])));
            let int = |k: usize| f[k].parse::<u64>().map_err(|_| err(format!("bad integer {:?}", f[k])));
            let mut values = [0.0; 12];
            for (k, v) in values.iter_mut().enumerate() {
                *v = num(5 + k)?;
            }
            Ok(Localization {
                query: int(0)? as usize,
                top1: int(1)?,
                descriptor_distance: num(2)?,
                inliers: int(3)? as usize,
                registered: f[4].parse().map_err(|_| err(format!("bad flag {:?}", f[4])))?,
                pose: PoseSE3::from_row_major(&values, POSE_FILE_TOLERANCE).map_err(|e| err(e.to_string()))?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseReport {
    pub queries: usize,
    /// Queries whose top-1 database entry lies within the coarse threshold.
    pub coarse_successes: usize,
    /// Coarse successes whose pose error is within 2 m and 5°.
    pub pose_successes: usize,
    /// `pose_successes / coarse_successes`.
    pub success_rate: f64,
    /// Means over pose successes.
    pub mean_rte: f64,
    pub mean_rre_deg: f64,
}

pub const POSE_CSV_HEADER: &str = "queries,coarse_successes,pose_successes,success_rate,mean_rte_m,mean_rre_deg";

impl PoseReport {
    pub fn to_csv(&self) -> String {
        format!(
            "{POSE_CSV_HEADER}\n{},{},{},{:.6},{:.6},{:.6}\n",
            self.queries, self.coarse_successes, self.pose_successes, self.success_rate, self.mean_rte, self.mean_rre_deg
        )
    }
}

/// Queries failing the coarse stage are excluded; registration failures
/// count as pose failures.
pub fn evaluate_pose(
    locs: &[Localization],
    gt: &[PoseSE3],
    db: &DescriptorDB,
    coarse_threshold: f64,
) -> Result<PoseReport> {
    if locs.is_empty() {
        return Err(Error::EmptyInput("pose evaluation needs at least one query"));
    }
    let (mut coarse, mut ok, mut rte, mut rre) = (0, 0, 0.0, 0.0);
    for l in locs {
        let truth = gt
            .get(l.query)
            .ok_or_else(|| Error::Data(format!("no ground-truth pose for query {}", l.query)))?;
        let entry = db
            .get(l.top1)
            .ok_or_else(|| Error::Data(format!("database has no entry {}", l.top1)))?;
        let p = entry.position();
        let t = truth.translation;
        let d = ((p[0] - t.x).powi(2) + (p[1] - t.y).powi(2) + (p[2] - t.z).powi(2)).sqrt();
        if d > coarse_threshold {
            continue;
        }
        coarse += 1;
        let e = pose_errors(&l.pose, truth);
        if l.registered && e.success {
            ok += 1;
            rte += e.rte;
            rre += e.rre;
        }
    }
    let mean = |s: f64| if ok > 0 { s / ok as f64 } else { 0.0 };
    Ok(PoseReport {
        queries: locs.len(),
        coarse_successes: coarse,
        pose_successes: ok,
        success_rate: if coarse > 0 { ok as f64 / coarse as f64 } else { 0.0 },
        mean_rte: mean(rte),
        mean_rre_deg: mean(rre),
    })
}
