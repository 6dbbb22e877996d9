//! Run configuration, dataset files, the training loop, evaluation, BEV
//! plots, ablation presets and the end-to-end gradient check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::relative_errors;
use crate::autodiff::AdamW;
use crate::loss::LossReport;
use crate::metrics::{evaluate, DetectionRecord, EvalConfig, MetricReport};
use crate::model::{fill_missing_grads, ModeFlags, Model, ModelConfig, PassMode, Sample};
use crate::scene_sim::{sample_scene, Scene, SimConfig};
use crate::Error;

/// Independent RNG streams derived from the run seed.
pub mod stream {
    pub const SIM: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TEACHER_FORCING: u64 = 3;
    pub const ORDER: u64 = 4;
    pub const JITTER: u64 = 5;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Seed of the scene with global index `index`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    use rand::RngCore;
    let mut r = rng_for(seed, stream::SIM);
    r.set_word_pos(2 * index as u128);
    r.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Fractions of the total step count where the learning rate is decayed.
    pub milestones: Vec<f64>,
    pub decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 0.01,
            epochs: 30,
            milestones: vec![0.7, 0.9],
            decay: 0.1,
            grad_clip: 35.0,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let frac = step as f64 / total_steps.max(1) as f64;
        let passed = self.milestones.iter().filter(|m| frac >= **m).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            val_scenes: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub modes: ModeFlags,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_toml(&read(path)?)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.sim.validate()?;
        self.model.validate()?;
        self.eval.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0
            && o.lr.is_finite()
            && o.weight_decay >= 0.0
            && o.decay > 0.0
            && o.grad_clip >= 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if o.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config(
                "milestones must be fractions in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Writes `scenes/{split}/{index:05}.json` for `count` scenes under `out`,
/// with the last `val` of them in the val split, plus `train.txt` and
/// `val.txt` manifests of relative paths.
pub fn generate(
    sim: &SimConfig,
    count: usize,
    val: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>, Error> {
    let val = val.min(count);
    let mut manifests = [String::new(), String::new()];
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let split = if i < count - val { 0 } else { 1 };
        let rel = format!("scenes/{}/{i:05}.json", ["train", "val"][split]);
        let scene = sample_scene(sim, scene_seed(seed, i))?;
        let path = out.join(&rel);
        write(&path, &scene.to_json()?)?;
        manifests[split].push_str(&rel);
        manifests[split].push('\n');
        written.push(path);
    }
    write(&out.join("train.txt"), &manifests[0])?;
    write(&out.join("val.txt"), &manifests[1])?;
    Ok(written)
}

/// Scene id used in prediction files: the path relative to the dataset root
/// without the extension.
pub fn scene_id(rel: &str) -> String {
    rel.trim_start_matches("scenes/")
        .trim_end_matches(".json")
        .to_string()
}

/// Loads the scenes listed in a manifest (paths relative to its directory).
pub fn load_manifest(path: &Path) -> Result<Vec<(String, Scene)>, Error> {
    let root = path.parent().unwrap_or(Path::new("."));
    read(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|rel| {
            let p = root.join(rel.trim());
            Ok((scene_id(rel.trim()), Scene::from_json(&read(&p)?)?))
        })
        .collect()
}

/// In-memory scenes for `[start, start + count)` of a run's index space.
pub fn scenes_in_memory(
    sim: &SimConfig,
    seed: u64,
    start: usize,
    count: usize,
) -> Result<Vec<(String, Scene)>, Error> {
    (start..start + count)
        .map(|i| {
            Ok((
                format!("mem/{i:05}"),
                sample_scene(sim, scene_seed(seed, i))?,
            ))
        })
        .collect()
}

pub fn prepare(model: &Model, scenes: Vec<(String, Scene)>) -> Result<Vec<Sample>, Error> {
    scenes
        .into_iter()
        .map(|(id, s)| model.sample(&id, s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub scene_id: String,
    pub lr: f64,
    pub teacher_forcing_prob: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Debug, thiserror::Error)]
#[error("non-finite loss at step {step}")]
pub struct NonFiniteLoss {
    pub step: usize,
    pub log: Box<StepLog>,
}

pub struct Trained {
    pub model: Model,
    pub optim: AdamW,
    pub log: Vec<StepLog>,
}

/// Batch-size-1 AdamW over `samples` for `cfg.optim.epochs` epochs. Calls
/// `on_epoch` after every epoch. A non-finite loss stops training with the
/// offending step's log.
pub fn train(
    cfg: &RunConfig,
    samples: &[Sample],
    mut on_step: impl FnMut(&StepLog) -> Result<(), Error>,
    mut on_epoch: impl FnMut(usize, &mut Model, &AdamW) -> Result<(), Error>,
) -> Result<Trained, TrainError> {
    cfg.validate()?;
    let mut model = Model::new(
        &cfg.model,
        cfg.modes,
        &cfg.sim,
        rng_seed(cfg.seed, stream::INIT),
    )?;
    let mut optim = AdamW::new(cfg.optim.lr, cfg.optim.weight_decay);
    let mut tf_rng = rng_for(cfg.seed, stream::TEACHER_FORCING);
    let mut order_rng = rng_for(cfg.seed, stream::ORDER);
    let total = cfg.optim.epochs * samples.len();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.optim.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut order_rng);
        for i in order {
            let sample = &samples[i];
            let tf_prob = cfg.model.teacher_forcing_prob(step, total);
            let pass = model.pass(
                sample,
                PassMode::Train {
                    tf_prob,
                    rng: &mut tf_rng,
                },
            )?;
            let report = pass.report.expect("training passes carry a report");
            let loss = pass.loss.expect("training passes carry a loss");
            let lr = cfg.optim.lr_at(step, total);
            let mut entry = StepLog {
                step,
                epoch,
                scene_id: sample.id.clone(),
                lr,
                teacher_forcing_prob: tf_prob,
                grad_norm: 0.0,
                loss: report,
            };
            if !entry.loss.is_finite() {
                return Err(TrainError::NonFinite(NonFiniteLoss {
                    step,
                    log: Box::new(entry),
                }));
            }
            model.store.zero_grad();
            pass.graph
                .backward_into(loss, &mut model.store)
                .map_err(Error::from)?;
            fill_missing_grads(&mut model.store);
            entry.grad_norm = clip_gradients(&mut model, cfg.optim.grad_clip);
            if !entry.grad_norm.is_finite() {
                return Err(TrainError::NonFinite(NonFiniteLoss {
                    step,
                    log: Box::new(entry),
                }));
            }
            optim.lr = lr;
            optim.step(&mut model.store).map_err(Error::from)?;
            model.store.zero_grad();
            on_step(&entry)?;
            log.push(entry);
            step += 1;
        }
        on_epoch(epoch, &mut model, &optim)?;
    }
    Ok(Trained { model, optim, log })
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Run(#[from] Error),
    #[error(transparent)]
    NonFinite(NonFiniteLoss),
}

fn rng_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    rng_for(seed, stream).next_u64()
}

/// Global L2 norm of all gradients, scaled down to `max_norm` when larger.
fn clip_gradients(model: &mut Model, max_norm: f64) -> f64 {
    let norm = model
        .store
        .iter()
        .filter_map(|(_, t)| t.grad.as_ref())
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in model.store.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

pub fn predict(model: &mut Model, samples: &[Sample]) -> Result<Vec<DetectionRecord>, Error> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(model.infer(s)?);
    }
    Ok(out)
}

pub fn ground_truth(samples: &[Sample]) -> Vec<DetectionRecord> {
    samples.iter().flat_map(Sample::gt_records).collect()
}

pub fn evaluate_model(
    model: &mut Model,
    samples: &[Sample],
    eval: &EvalConfig,
) -> Result<(MetricReport, Vec<DetectionRecord>), Error> {
    let preds = predict(model, samples)?;
    let report = evaluate(&preds, &ground_truth(samples), model.num_classes, eval)?;
    Ok((report, preds))
}

/// Meters per SVG pixel in the BEV plot.
pub const BEV_METERS_PER_PX: f64 = 0.2;

/// Top-down SVG: GT boxes green, predictions blue, ego at the center
/// (x to the right, y up), heading ticks from box centers to the front edge.
pub fn render_bev(gt: &[DetectionRecord], preds: &[DetectionRecord], half_extent_m: f64) -> String {
    let half = half_extent_m / BEV_METERS_PER_PX;
    let size = 2.0 * half;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{size}" height="{size}" fill="#ffffff"/>"##
    );
    let _ = writeln!(
        s,
        r##"<g id="axes" stroke="#999999" stroke-width="1"><line x1="0" y1="{half}" x2="{size}" y2="{half}"/><line x1="{half}" y1="0" x2="{half}" y2="{size}"/></g>"##
    );
    for (id, color, boxes) in [("gt", "#2ca02c", gt), ("pred", "#1f77b4", preds)] {
        let _ = writeln!(
            s,
            r#"<g id="{id}" stroke="{color}" fill="none" stroke-width="1.5">"#
        );
        for b in boxes {
            let cx = half + b.center[0] / BEV_METERS_PER_PX;
            let cy = half - b.center[1] / BEV_METERS_PER_PX;
            let l = b.size[1] / BEV_METERS_PER_PX;
            let w = b.size[0] / BEV_METERS_PER_PX;
            let deg = -b.yaw.to_degrees();
            let _ = writeln!(
                s,
                r#"<g transform="rotate({deg} {cx} {cy})"><rect x="{}" y="{}" width="{l}" height="{w}"/><line x1="{cx}" y1="{cy}" x2="{}" y2="{cy}"/></g>"#,
                cx - l / 2.0,
                cy - w / 2.0,
                cx + l / 2.0,
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// One variant of an ablation preset.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

pub const PRESETS: [&str; 5] = [
    "queries_vs_proposals",
    "center_nms",
    "aux_branches",
    "consistency",
    "proposal_count_sweep",
];

pub fn preset_variants(base: &RunConfig, preset: &str) -> Result<Vec<Variant>, Error> {
    let with = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut config = base.clone();
        f(&mut config);
        Variant {
            name: name.to_string(),
            config,
        }
    };
    Ok(match preset {
        "queries_vs_proposals" => vec![
            with("fixed_queries", &|c| c.modes.fixed_queries = true),
            with("proposals", &|c| c.modes.fixed_queries = false),
        ],
        "center_nms" => vec![
            with("no_center_nms", &|c| c.modes.disable_center_nms = true),
            with("center_nms", &|c| c.modes.disable_center_nms = false),
        ],
        "aux_branches" => vec![
            with("no_aux", &|c| c.modes.disable_aux = true),
            with("aux", &|c| c.modes.disable_aux = false),
        ],
        "consistency" => {
            let mut v = Vec::new();
            for tf in [false, true] {
                for filt in [false, true] {
                    let name = format!(
                        "teacher_forcing={}_target_filtering={}",
                        if tf { "on" } else { "off" },
                        if filt { "on" } else { "off" }
                    );
                    v.push(with(&name, &|c| {
                        c.modes.disable_teacher_forcing = !tf;
                        c.modes.disable_target_filtering = !filt;
                    }));
                }
            }
            v
        }
        "proposal_count_sweep" => [25, 50, 100, 200]
            .iter()
            .map(|n| {
                with(&format!("num_proposals={n}"), &|c| {
                    c.model.num_proposals = *n
                })
            })
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}`; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("variant,{}\n", crate::metrics::CSV_HEADER);
    for r in rows {
        let m = &r.report;
        let v = [m.nds, m.map, m.mate, m.mase, m.maoe, m.mave, m.maae];
        let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "{},{}", r.variant, vals.join(","));
    }
    s
}

/// Trains and evaluates every variant on the same scenes and seed.
pub fn run_ablation(
    base: &RunConfig,
    preset: &str,
    train_scenes: &[(String, Scene)],
    val_scenes: &[(String, Scene)],
    mut progress: impl FnMut(&str, &MetricReport),
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::new();
    for v in preset_variants(base, preset)? {
        let (report, _) = train_and_evaluate(&v.config, train_scenes, val_scenes)?;
        progress(&v.name, &report);
        rows.push(AblationRow {
            variant: v.name,
            report,
        });
    }
    Ok(rows)
}

pub fn train_and_evaluate(
    cfg: &RunConfig,
    train_scenes: &[(String, Scene)],
    val_scenes: &[(String, Scene)],
) -> Result<(MetricReport, Trained), TrainError> {
    let probe = Model::new(&cfg.model, cfg.modes, &cfg.sim, 0)?;
    let train_samples = prepare(&probe, train_scenes.to_vec())?;
    let val_samples = prepare(&probe, val_scenes.to_vec())?;
    let mut trained = train(cfg, &train_samples, |_| Ok(()), |_, _, _| Ok(()))?;
    let (report, _) = evaluate_model(&mut trained.model, &val_samples, &cfg.eval)?;
    Ok((report, trained))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub norm_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
    pub worst_norm_rel_error: f64,
}

/// Small configuration used by the end-to-end gradient check.
pub fn gradcheck_config() -> RunConfig {
    RunConfig {
        sim: SimConfig {
            views: 2,
            width: 128,
            height: 64,
            hfov_deg: 100.0,
            boxes_per_scene: [2, 3],
            spawn_xy: 15.0,
            ..Default::default()
        },
        model: ModelConfig {
            channels: 8,
            num_proposals: 8,
            layers: 2,
            heads: 2,
            // a detached value still moves under finite differences
            detach_proposal_features: false,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Central differences of the full training loss against reverse-mode
/// gradients, with the pass's discrete choices (proposal selection,
/// matching, sampling positions) held fixed. Up to `per_tensor` entries of
/// every parameter tensor are probed. Biases are jittered first: at their
/// zero initialization, ReLU inputs over blank pixels sit exactly on the kink.
pub fn gradcheck_pipeline(
    cfg: &RunConfig,
    h: f64,
    per_tensor: usize,
) -> Result<GradcheckReport, Error> {
    use rand::Rng;
    let mut model = Model::new(
        &cfg.model,
        cfg.modes,
        &cfg.sim,
        rng_seed(cfg.seed, stream::INIT),
    )?;
    let mut jitter = rng_for(cfg.seed, stream::JITTER);
    for (name, t) in model.store.iter_mut() {
        if name.ends_with(".b") {
            t.data
                .iter_mut()
                .for_each(|x| *x += jitter.gen_range(-0.1..0.1));
        }
    }
    let (id, scene) = scenes_in_memory(&cfg.sim, cfg.seed, 0, 1)?.remove(0);
    let sample = model.sample(&id, scene)?;
    let mut rng = rng_for(cfg.seed, stream::TEACHER_FORCING);
    let pass = model.pass(
        &sample,
        PassMode::Train {
            tf_prob: 1.0,
            rng: &mut rng,
        },
    )?;
    let loss = pass.loss.expect("training pass has a loss");
    model.store.zero_grad();
    pass.graph.backward_into(loss, &mut model.store)?;
    let trace = pass.trace;
    let names: Vec<String> = model.store.names().cloned().collect();
    let mut tensors = Vec::new();
    for name in names {
        let t = model.store.get(&name).expect("listed name");
        let n = t.len();
        let analytic_full = t.grad.clone().unwrap_or_else(|| vec![0.0; n]);
        let k = per_tensor.min(n).max(1);
        let idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
        let mut analytic = Vec::with_capacity(k);
        let mut numeric = Vec::with_capacity(k);
        for &j in &idx {
            let orig = model.store.get(&name).expect("listed name").data[j];
            let eval_at = |x: f64, model: &mut Model| -> Result<f64, Error> {
                model.store.get_mut(&name).expect("listed name").data[j] = x;
                let p = model.pass(&sample, PassMode::Replay(&trace))?;
                Ok(p.report.expect("replay has a report").total)
            };
            let plus = eval_at(orig + h, &mut model)?;
            let minus = eval_at(orig - h, &mut model)?;
            eval_at(orig, &mut model)?;
            numeric.push((plus - minus) / (2.0 * h));
            analytic.push(analytic_full[j]);
        }
        let (max_rel_error, norm_rel_error) = relative_errors(&analytic, &numeric);
        tensors.push(TensorCheck {
            name,
            entries: k,
            max_rel_error,
            norm_rel_error,
        });
    }
    let worst = tensors.iter().map(|t| t.norm_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        step: h,
        tensors,
        worst_norm_rel_error: worst,
    })
}
