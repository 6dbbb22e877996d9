//! Distance-thresholded AP, true-positive error metrics and the NDS composite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::scene_sim::{normalize_angle, Attribute, Box3D};
use crate::Error;

const MIN_RECALL: f64 = 0.1;
const MIN_PRECISION: f64 = 0.1;
const RECALL_POINTS: usize = 101;

/// A scored detection (or a GT box, whose score is ignored).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub scene_id: String,
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub score: f64,
}

impl DetectionRecord {
    pub fn from_box(scene_id: &str, b: &Box3D, score: f64) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            class_id: b.class_id,
            center: [b.x, b.y, b.z],
            size: [b.w, b.l, b.h],
            yaw: b.yaw,
            velocity: [b.vx, b.vy],
            score,
        }
    }

    pub fn attribute(&self) -> Attribute {
        Attribute::from_velocity(self.velocity[0], self.velocity[1])
    }

    fn planar_distance(&self, o: &Self) -> f64 {
        (self.center[0] - o.center[0]).hypot(self.center[1] - o.center[1])
    }
}

pub fn write_jsonl(records: &[DetectionRecord]) -> Result<String, Error> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl(text: &str) -> Result<Vec<DetectionRecord>, Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub dist_thresholds: Vec<f64>,
    pub tp_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dist_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.dist_thresholds.is_empty()
            || self
                .dist_thresholds
                .iter()
                .any(|t| !(t.is_finite() && *t > 0.0))
            || !(self.tp_threshold.is_finite() && self.tp_threshold > 0.0)
        {
            return Err(Error::Config(format!(
                "invalid evaluation thresholds {self:?}"
            )));
        }
        Ok(())
    }
}

/// `np.interp(x, xp, fp, right=0)` for nondecreasing `xp`.
fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let n = xp.len();
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[n - 1] {
        return 0.0;
    }
    if x == xp[n - 1] {
        return fp[n - 1];
    }
    let j = xp.partition_point(|v| *v <= x) - 1;
    let slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j]);
    fp[j] + slope * (x - xp[j])
}

/// Greedy matches for one class: predictions in descending score order
/// (stable) each take the nearest unmatched GT of the same scene within
/// `threshold`. Returns per-prediction `Some(gt index)` in processing order.
fn greedy_match(
    preds: &[&DetectionRecord],
    gts: &[&DetectionRecord],
    threshold: f64,
) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|a, b| preds[*b].score.total_cmp(&preds[*a].score));
    let mut by_scene: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_scene.entry(g.scene_id.as_str()).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|pi| {
            let p = preds[pi];
            let mut best: Option<(f64, usize)> = None;
            for &gi in by_scene
                .get(p.scene_id.as_str())
                .map_or(&[][..], Vec::as_slice)
            {
                if taken[gi] {
                    continue;
                }
                let d = p.planar_distance(gts[gi]);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, gi));
                }
            }
            let hit = best.filter(|(d, _)| *d <= threshold).map(|(_, gi)| gi);
            if let Some(gi) = hit {
                taken[gi] = true;
            }
            (pi, hit)
        })
        .collect()
}

fn class_subset(records: &[DetectionRecord], class: usize) -> Vec<&DetectionRecord> {
    records.iter().filter(|r| r.class_id == class).collect()
}

/// AP for one class at one distance threshold; `None` without GT.
pub fn average_precision(
    preds: &[DetectionRecord],
    gts: &[DetectionRecord],
    class: usize,
    threshold: f64,
) -> Option<f64> {
    let p = class_subset(preds, class);
    let g = class_subset(gts, class);
    if g.is_empty() {
        return None;
    }
    if p.is_empty() {
        return Some(0.0);
    }
    let matches = greedy_match(&p, &g, threshold);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut rec = Vec::with_capacity(matches.len());
    let mut prec = Vec::with_capacity(matches.len());
    for (_, hit) in &matches {
        if hit.is_some() {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rec.push(tp / g.len() as f64);
        prec.push(tp / (tp + fp));
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let sum: f64 = (first..RECALL_POINTS)
        .map(|k| {
            let r = k as f64 / (RECALL_POINTS - 1) as f64;
            (interp(r, &rec, &prec) - MIN_PRECISION).max(0.0)
        })
        .sum();
    Some((sum / (RECALL_POINTS - first) as f64 / (1.0 - MIN_PRECISION)).clamp(0.0, 1.0))
}

/// Mean true-positive errors (ATE, ASE, AOE, AVE, AAE).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
        aae: 1.0,
    };

    pub fn as_array(&self) -> [f64; 5] {
        [self.ate, self.ase, self.aoe, self.ave, self.aae]
    }
}

/// `1 - IoU` of two boxes sharing center and heading.
pub fn scale_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    let inter: f64 = a.iter().zip(&b).map(|(x, y)| x.min(*y)).product();
    1.0 - inter / (va + vb - inter)
}

/// Smallest absolute yaw difference, in `[0, π]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    normalize_angle(a - b).abs()
}

/// Mean errors over `(prediction, gt)` pairs; all 1 without pairs.
pub fn tp_metrics(pairs: &[(&DetectionRecord, &DetectionRecord)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::WORST;
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&DetectionRecord, &DetectionRecord) -> f64| {
        pairs.iter().map(|(p, g)| f(p, g)).sum::<f64>() / n
    };
    TpErrors {
        ate: mean(&|p, g| p.planar_distance(g)),
        ase: mean(&|p, g| scale_error(p.size, g.size)),
        aoe: mean(&|p, g| yaw_error(p.yaw, g.yaw)),
        ave: mean(&|p, g| (p.velocity[0] - g.velocity[0]).hypot(p.velocity[1] - g.velocity[1])),
        aae: mean(&|p, g| {
            if p.attribute() == g.attribute() {
                0.0
            } else {
                1.0
            }
        }),
    }
}

/// NDS = (5·mAP + Σ (1 - min(1, mTP))) / 10.
pub fn nds(map: f64, tp: &[f64; 5]) -> f64 {
    0.1 * (5.0 * map + tp.iter().map(|e| 1.0 - e.min(1.0)).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub gt_count: usize,
    /// Per distance threshold; `None` when the class has no GT.
    pub ap: Vec<Option<f64>>,
    pub mean_ap: Option<f64>,
    pub tp: Option<TpErrors>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
    pub nds: f64,
    pub thresholds: Vec<f64>,
    pub per_class: Vec<ClassReport>,
}

pub const CSV_HEADER: &str = "nds,map,mate,mase,maoe,mave,maae";

impl MetricReport {
    pub fn tp_array(&self) -> [f64; 5] {
        [self.mate, self.mase, self.maoe, self.mave, self.maae]
    }

    /// Header plus one data row.
    pub fn to_csv(&self) -> String {
        let v = [
            self.nds, self.map, self.mate, self.mase, self.maoe, self.mave, self.maae,
        ];
        let row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        format!("{CSV_HEADER}\n{}\n", row.join(","))
    }
}

/// Mean AP over classes with GT and all thresholds, TP errors at the TP
/// threshold averaged over the same classes, and NDS.
pub fn evaluate(
    preds: &[DetectionRecord],
    gts: &[DetectionRecord],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<MetricReport, Error> {
    cfg.validate()?;
    if let Some(r) = preds.iter().chain(gts).find(|r| r.class_id >= num_classes) {
        return Err(Error::Domain(format!(
            "class id {} out of range",
            r.class_id
        )));
    }
    if let Some(r) = preds.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite score {} in {}",
            r.score, r.scene_id
        )));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    let (mut ap_sum, mut ap_n) = (0.0, 0usize);
    let mut tp_sum = [0.0; 5];
    for c in 0..num_classes {
        let g = class_subset(gts, c);
        let ap: Vec<Option<f64>> = cfg
            .dist_thresholds
            .iter()
            .map(|t| average_precision(preds, gts, c, *t))
            .collect();
        let (mean_ap, tp) = if g.is_empty() {
            (None, None)
        } else {
            let p = class_subset(preds, c);
            let pairs: Vec<(&DetectionRecord, &DetectionRecord)> =
                greedy_match(&p, &g, cfg.tp_threshold)
                    .into_iter()
                    .filter_map(|(pi, hit)| hit.map(|gi| (p[pi], g[gi])))
                    .collect();
            let tp = tp_metrics(&pairs);
            let m = ap.iter().flatten().sum::<f64>() / ap.len() as f64;
            ap_sum += m;
            ap_n += 1;
            for (s, e) in tp_sum.iter_mut().zip(tp.as_array()) {
                *s += e;
            }
            (Some(m), Some(tp))
        };
        per_class.push(ClassReport {
            class_id: c,
            gt_count: g.len(),
            ap,
            mean_ap,
            tp,
        });
    }
    let (map, mtp) = if ap_n == 0 {
        (0.0, TpErrors::WORST.as_array())
    } else {
        (ap_sum / ap_n as f64, tp_sum.map(|s| s / ap_n as f64))
    };
    Ok(MetricReport {
        map,
        mate: mtp[0],
        mase: mtp[1],
        maoe: mtp[2],
        mave: mtp[3],
        maae: mtp[4],
        nds: nds(map, &mtp),
        thresholds: cfg.dist_thresholds.clone(),
        per_class,
    })
}
