//! The two-stage detector: parameters, training and inference passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_layout, from_json, to_json, AdamW, Graph, ParamStore, Tensor, Var};
use crate::detection_head::{
    decode_box, init_detection_head, init_query_bank, run_refinement, LayerOutput, Queries,
    RefineOptions, RefineShape, BOX_DIM,
};
use crate::encoder::{encode, init_encoder, pool_input, PyramidLayout};
use crate::geometry::EgoPoint;
use crate::loss::{
    layer_boxes, match_layer, proposal_loss, set_loss, softmax_rows, target_filtering,
    teacher_forcing, total_loss_var, LossReport, SetTarget,
};
use crate::metrics::DetectionRecord;
use crate::proposal_head::{
    assign_dense_targets, build_proposals, dense_head, init_proposal_head, instance_peak_mask,
    predicted_objectness, proposal_features, select_from_peaks, select_proposals, DenseTargets,
    HeadShape, LevelAssignSpec, Selection,
};
use crate::scene_sim::{Scene, SimConfig};
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_proposals: usize,
    pub layers: usize,
    pub heads: usize,
    pub score_min: f64,
    /// Teacher-forcing probability at the first and last training step;
    /// linear in between.
    pub teacher_forcing: [f64; 2],
    pub lambda: f64,
    pub empty_weight: f64,
    /// Weight of the auxiliary stage-1 regression branches in the proposal loss.
    pub aux_weight: f64,
    /// Blocks set-loss gradients from reaching the dense towers through the
    /// gathered proposal features.
    pub detach_proposal_features: bool,
    pub freeze_encoding: bool,
    pub assign: LevelAssignSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            num_proposals: 100,
            layers: 3,
            heads: 4,
            score_min: 0.05,
            teacher_forcing: [0.5, 0.0],
            lambda: 1.0,
            empty_weight: crate::loss::DEFAULT_EMPTY_WEIGHT,
            aux_weight: 0.1,
            detach_proposal_features: true,
            freeze_encoding: false,
            assign: LevelAssignSpec::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad("channels must be a positive multiple of heads");
        }
        if self.num_proposals == 0 || self.layers == 0 {
            return bad("num_proposals and layers must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.score_min) {
            return bad("score_min must lie in [0, 1]");
        }
        if self
            .teacher_forcing
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return bad("teacher_forcing probabilities must lie in [0, 1]");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0)
            || !(self.empty_weight > 0.0 && self.empty_weight.is_finite())
        {
            return bad("lambda must be >= 0 and empty_weight > 0");
        }
        if !(self.aux_weight.is_finite() && self.aux_weight >= 0.0) {
            return bad("aux_weight must be >= 0");
        }
        self.assign.validate()
    }

    pub fn teacher_forcing_prob(&self, step: usize, total_steps: usize) -> f64 {
        let [a, b] = self.teacher_forcing;
        if total_steps <= 1 {
            return a;
        }
        a + (b - a) * step as f64 / (total_steps - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModeFlags {
    pub fixed_queries: bool,
    pub disable_aux: bool,
    pub disable_center_nms: bool,
    pub disable_target_filtering: bool,
    pub disable_teacher_forcing: bool,
}

/// Per-scene inputs and targets, computed once.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub scene: Scene,
    pub pooled: Tensor,
    pub dense: DenseTargets,
    pub targets: Vec<SetTarget>,
}

impl Sample {
    pub fn new(
        id: &str,
        scene: Scene,
        layout: &PyramidLayout,
        assign: &LevelAssignSpec,
    ) -> Result<Self, Error> {
        let pooled = pool_input(&scene.render_all(), layout)?;
        let dense = assign_dense_targets(&scene, layout, assign)?;
        let targets = scene.boxes.iter().map(SetTarget::from_box).collect();
        Ok(Self {
            id: id.to_string(),
            scene,
            pooled,
            dense,
            targets,
        })
    }

    /// GT indices with a positive cell in some view; the evaluation set.
    pub fn visible_gt(&self) -> Vec<usize> {
        (0..self.scene.boxes.len())
            .filter(|&i| self.dense.visible[i])
            .collect()
    }

    pub fn gt_records(&self) -> Vec<DetectionRecord> {
        self.visible_gt()
            .into_iter()
            .map(|i| DetectionRecord::from_box(&self.id, &self.scene.boxes[i], 1.0))
            .collect()
    }
}

/// How often the consistency machinery ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub teacher_forcing: usize,
    pub target_filtering: usize,
    pub train_passes: usize,
    pub infer_passes: usize,
}

/// Discrete choices of one training pass, for exact replay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub teacher_forced: bool,
    pub cells: Vec<usize>,
    pub positions: Vec<EgoPoint>,
    pub targets: Vec<usize>,
    pub layer_positions: Vec<Vec<EgoPoint>>,
    pub matchings: Vec<Vec<(usize, usize)>>,
}

pub enum PassMode<'a> {
    Train {
        tf_prob: f64,
        rng: &'a mut ChaCha8Rng,
    },
    Replay(&'a Trace),
    Infer,
}

pub struct Pass {
    pub graph: Graph,
    pub loss: Option<Var>,
    pub report: Option<LossReport>,
    pub layers: Vec<LayerOutput>,
    pub trace: Trace,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub modes: ModeFlags,
    pub layout: PyramidLayout,
    pub num_classes: usize,
    pub store: ParamStore,
    pub counters: Counters,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(
        config: &ModelConfig,
        modes: ModeFlags,
        sim: &SimConfig,
        seed: u64,
    ) -> Result<Self, Error> {
        config.validate()?;
        sim.validate()?;
        let layout = PyramidLayout::new(sim.views, sim.width, sim.height)?;
        let nc = sim.num_classes();
        let c = config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_encoder(&mut store, sim.input_channels(), c, &mut rng);
        init_proposal_head(
            &mut store,
            HeadShape {
                channels: c,
                num_classes: nc,
                views: sim.views,
                aux: !modes.disable_aux,
            },
            &mut rng,
        )?;
        init_detection_head(
            &mut store,
            RefineShape {
                channels: c,
                num_classes: nc,
                layers: config.layers,
                heads: config.heads,
            },
            &mut rng,
        )?;
        if modes.fixed_queries {
            init_query_bank(
                &mut store,
                config.num_proposals,
                c,
                sim.spawn_xy,
                sim.spawn_z,
                &mut rng,
            )?;
        }
        Ok(Self {
            config: config.clone(),
            modes,
            layout,
            num_classes: nc,
            store,
            counters: Counters::default(),
        })
    }

    /// Same architecture with parameters taken from a checkpoint document.
    pub fn with_checkpoint(
        config: &ModelConfig,
        modes: ModeFlags,
        sim: &SimConfig,
        doc: &serde_json::Value,
    ) -> Result<(Self, Option<AdamW>), Error> {
        let mut model = Self::new(config, modes, sim, 0)?;
        let (store, optim) = from_json(doc)?;
        check_layout(&model.store, &store)?;
        model.store = store;
        Ok((model, optim))
    }

    pub fn checkpoint(&self, optim: Option<&AdamW>) -> serde_json::Value {
        to_json(&self.store, optim)
    }

    pub fn sample(&self, id: &str, scene: Scene) -> Result<Sample, Error> {
        Sample::new(id, scene, &self.layout, &self.config.assign)
    }

    fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            heads: self.config.heads,
            layers: self.config.layers,
            freeze_encoding: self.config.freeze_encoding,
        }
    }

    /// Builds the full forward graph. Training and replay passes also build
    /// the loss; inference never touches teacher forcing or target filtering.
    pub fn pass(&mut self, sample: &Sample, mut mode: PassMode<'_>) -> Result<Pass, Error> {
        let mut g = Graph::new();
        let store = &self.store;
        let pyramid = encode(&mut g, store, &sample.pooled, &self.layout)?;
        let dense = dense_head(&mut g, store, &pyramid)?;
        let training = !matches!(mode, PassMode::Infer);
        let mut trace = Trace::default();

        let (queries, target_idx) = if self.modes.fixed_queries {
            let features = g.param(store, "fixed.query")?;
            let refs = g.param(store, "fixed.ref")?;
            let positions = match &mode {
                PassMode::Replay(t) => t.positions.clone(),
                _ => g
                    .value(refs)
                    .chunks(3)
                    .map(|p| EgoPoint::new(p[0], p[1], p[2]))
                    .collect(),
            };
            trace.positions = positions.clone();
            let n = positions.len();
            (
                Queries {
                    features,
                    positions,
                    position_var: Some(refs),
                    keys: vec![None; n],
                },
                sample.visible_gt(),
            )
        } else {
            let selections: Vec<Selection> = match &mut mode {
                PassMode::Replay(t) => {
                    trace.teacher_forced = t.teacher_forced;
                    t.cells
                        .iter()
                        .map(|&cell| Selection {
                            cell,
                            cell_ref: self.layout.cell(cell),
                            score: 0.0,
                            peak: true,
                        })
                        .collect()
                }
                PassMode::Train { tf_prob, rng } => {
                    let pred = predicted_objectness(&g, &dense, self.num_classes);
                    let obj = if self.modes.disable_teacher_forcing {
                        pred
                    } else {
                        self.counters.teacher_forcing += 1;
                        let (m, forced) =
                            teacher_forcing(&pred, &sample.dense.objectness, *tf_prob, &mut **rng)?;
                        trace.teacher_forced = forced;
                        m.to_vec()
                    };
                    if trace.teacher_forced && !self.modes.disable_center_nms {
                        let mut owner = vec![None; obj.len()];
                        for p in &sample.dense.positives {
                            owner[p.cell] = Some(p.gt);
                        }
                        let peaks = instance_peak_mask(&obj, &self.layout, &owner);
                        select_from_peaks(
                            &obj,
                            &self.layout,
                            &peaks,
                            self.config.num_proposals,
                            self.config.score_min,
                        )
                    } else {
                        self.select(&obj)
                    }
                }
                PassMode::Infer => {
                    let pred = predicted_objectness(&g, &dense, self.num_classes);
                    self.select(&pred)
                }
            };
            let mut proposals =
                build_proposals(&g, &dense, &selections, &sample.scene.rig, &self.layout)?;
            if let PassMode::Replay(t) = &mode {
                for (p, pos) in proposals.iter_mut().zip(&t.positions) {
                    p.position = *pos;
                }
            }
            trace.cells = selections.iter().map(|s| s.cell).collect();
            trace.positions = proposals.iter().map(|p| p.position).collect();
            let cells: Vec<usize> = proposals.iter().map(|p| p.cell).collect();
            let features = if cells.is_empty() {
                g.constant(vec![0, self.config.channels], vec![])?
            } else {
                let f = proposal_features(&mut g, store, &dense, &cells)?;
                if self.config.detach_proposal_features {
                    let (shape, value) = (g.shape(f).to_vec(), g.value(f).to_vec());
                    g.constant(shape, value)?
                } else {
                    f
                }
            };
            let targets = match &mode {
                PassMode::Replay(t) => t.targets.clone(),
                PassMode::Train { .. } if !self.modes.disable_target_filtering => {
                    self.counters.target_filtering += 1;
                    target_filtering(&proposals, &sample.dense.boxes2d)
                }
                _ => sample.visible_gt(),
            };
            (
                Queries {
                    features,
                    positions: trace.positions.clone(),
                    position_var: None,
                    keys: proposals.iter().map(|p| Some((p.view, p.level))).collect(),
                },
                targets,
            )
        };
        trace.targets = target_idx.clone();

        let replay_positions = match &mode {
            PassMode::Replay(t) => Some(t.layer_positions.as_slice()),
            _ => None,
        };
        let layers = run_refinement(
            &mut g,
            store,
            &pyramid,
            &sample.scene.rig,
            &queries,
            self.refine_options(),
            replay_positions,
        )?;
        trace.layer_positions = layers.iter().map(|l| l.positions_in.clone()).collect();

        if !training {
            self.counters.infer_passes += 1;
            return Ok(Pass {
                graph: g,
                loss: None,
                report: None,
                layers,
                trace,
            });
        }
        self.counters.train_passes += 1;
        let (l_pro, pro_report) =
            proposal_loss(&mut g, &dense, &sample.dense, self.config.aux_weight)?;
        let targets: Vec<SetTarget> = target_idx.iter().map(|&i| sample.targets[i]).collect();
        let mut det_vars = Vec::with_capacity(layers.len());
        let mut det_reports = Vec::with_capacity(layers.len());
        for (l, out) in layers.iter().enumerate() {
            let boxes = layer_boxes(&mut g, out)?;
            let matching =
                match &mode {
                    PassMode::Replay(t) => t.matchings.get(l).cloned().ok_or_else(|| {
                        Error::Domain(format!("no replay matching for layer {l}"))
                    })?,
                    _ => match_layer(&g, out.logits, boxes, &targets)?,
                };
            let (v, r) = set_loss(
                &mut g,
                out.logits,
                boxes,
                &targets,
                &matching,
                self.config.empty_weight,
            )?;
            det_vars.push(v);
            det_reports.push(r);
            trace.matchings.push(matching);
        }
        let loss = total_loss_var(&mut g, l_pro, &det_vars, self.config.lambda)?;
        let report = LossReport::new(
            pro_report,
            det_reports,
            target_idx.len(),
            trace.teacher_forced,
            self.config.lambda,
        );
        Ok(Pass {
            graph: g,
            loss: Some(loss),
            report: Some(report),
            layers,
            trace,
        })
    }

    fn select(&self, obj: &[f64]) -> Vec<Selection> {
        select_proposals(
            obj,
            &self.layout,
            self.config.num_proposals,
            self.config.score_min,
            !self.modes.disable_center_nms,
        )
    }

    /// Last-layer detections for one scene, scored by the best real-class probability.
    pub fn infer(&mut self, sample: &Sample) -> Result<Vec<DetectionRecord>, Error> {
        let pass = self.pass(sample, PassMode::Infer)?;
        Ok(decode_detections(
            &pass.graph,
            pass.layers.last(),
            self.num_classes,
            &sample.id,
        ))
    }
}

pub fn decode_detections(
    g: &Graph,
    last: Option<&LayerOutput>,
    num_classes: usize,
    scene_id: &str,
) -> Vec<DetectionRecord> {
    let Some(out) = last else { return vec![] };
    let cols = num_classes + 1;
    let probs = softmax_rows(g.value(out.logits), cols);
    let reg = g.value(out.reg);
    out.positions_in
        .iter()
        .enumerate()
        .map(|(i, pos)| {
            let row = &probs[i * cols..i * cols + num_classes];
            let (class_id, score) =
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, p)| {
                        if *p > best.1 {
                            (c, *p)
                        } else {
                            best
                        }
                    });
            let b = decode_box(*pos, &reg[i * BOX_DIM..(i + 1) * BOX_DIM]);
            DetectionRecord {
                scene_id: scene_id.to_string(),
                class_id,
                center: b.center.to_array(),
                size: b.size,
                yaw: b.yaw,
                velocity: b.velocity,
                score,
            }
        })
        .collect()
}

/// Gives every parameter without a gradient an explicit zero gradient.
pub fn fill_missing_grads(store: &mut ParamStore) {
    for (_, t) in store.iter_mut() {
        if t.grad.is_none() {
            t.grad = Some(vec![0.0; t.data.len()]);
        }
    }
}
