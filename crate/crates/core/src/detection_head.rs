//! Second stage: iterative multi-view refinement of proposal queries.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, SamplePoint, Tensor, Var};
use crate::encoder::{FeaturePyramid, NUM_LEVELS, STRIDES};
use crate::geometry::{CameraRig, EgoPoint};
use crate::proposal_head::{proposal_encoding, EncodingKey};
use crate::scene_sim::normalize_angle;
use crate::Error;

/// Box regression width: (Δx, Δy, Δz, log w, log l, log h, sin θ, cos θ, v_x, v_y).
pub const BOX_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineShape {
    pub channels: usize,
    pub num_classes: usize,
    pub layers: usize,
    pub heads: usize,
}

fn add_matrix(store: &mut ParamStore, name: &str, n: usize, rng: &mut impl Rng) {
    let limit = (6.0 / (2 * n) as f64).sqrt();
    store.add_uniform(name, vec![n, n], limit, rng);
}

pub fn init_detection_head(
    store: &mut ParamStore,
    shape: RefineShape,
    rng: &mut impl Rng,
) -> Result<(), Error> {
    let c = shape.channels;
    if shape.heads == 0 || !c.is_multiple_of(shape.heads) {
        return Err(Error::Config(format!(
            "{} channels cannot be split into {} heads",
            c, shape.heads
        )));
    }
    for l in 0..shape.layers {
        let p = format!("detect.layer{l}");
        store.add_linear(&format!("{p}.mix"), c, c, rng);
        for m in ["wq", "wk", "wv"] {
            add_matrix(store, &format!("{p}.{m}"), c, rng);
        }
        store.add_linear(&format!("{p}.cls"), c, shape.num_classes + 1, rng);
        store.add_linear(&format!("{p}.reg0"), c, c, rng);
        store.add_linear(&format!("{p}.reg1"), c, BOX_DIM, rng);
        let mut b = vec![0.0; BOX_DIM];
        b[7] = 1.0;
        store.set(&format!("{p}.reg1.b"), &b)?;
    }
    Ok(())
}

fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var, Error> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    Ok(g.linear(x, w, b)?)
}

/// Sampling plan for the feature aggregation: one list of reads per level,
/// each weighted by `1 / Σσ` of its query.
pub fn sample_plan(positions: &[EgoPoint], rig: &CameraRig) -> [Vec<SamplePoint>; NUM_LEVELS] {
    let mut plan: [Vec<SamplePoint>; NUM_LEVELS] = Default::default();
    for (i, p) in positions.iter().enumerate() {
        let mut hits = Vec::new();
        for j in 0..rig.len() {
            for (k, s) in STRIDES.iter().enumerate() {
                let s = *s as f64;
                let pr = rig.project_to_view(*p, j, s);
                if pr.valid {
                    hits.push((k, j, pr.u / s, pr.v / s));
                }
            }
        }
        let wgt = 1.0 / hits.len().max(1) as f64;
        for (k, view, x, y) in hits {
            plan[k].push(SamplePoint {
                view,
                x,
                y,
                row: i,
                weight: wgt,
            });
        }
    }
    plan
}

/// `f' = f + mean of valid bilinear reads over all views and levels`; rows
/// without any valid projection are left unchanged.
pub fn aggregate_features(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    rig: &CameraRig,
    f: Var,
    positions: &[EgoPoint],
) -> Result<Var, Error> {
    let n = positions.len();
    let mut out = f;
    for (k, points) in sample_plan(positions, rig).into_iter().enumerate() {
        if points.is_empty() {
            continue;
        }
        let s = g.bilinear_gather(pyramid.levels[k], points, n)?;
        out = g.add(out, s)?;
    }
    Ok(out)
}

/// Multi-head attention `F + concat_h softmax(Q_h K_hᵀ / √d) V_h` with
/// `Q, K, V = (F + E) W`. Returns the output and per-head weight matrices.
pub fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    f: Var,
    e: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>), Error> {
    let c = g.shape(f)[1];
    let x = g.add(f, e)?;
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let dh = c / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let a = g.softmax(logits, 1)?;
        outs.push(g.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    Ok((g.add(f, cat)?, weights))
}

/// Class logits `[n, N_c+1]` and box regression `[n, 10]`.
pub fn decode(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    f: Var,
) -> Result<(Var, Var), Error> {
    let logits = linear(g, store, &format!("{prefix}.cls"), f)?;
    let h = linear(g, store, &format!("{prefix}.reg0"), f)?;
    let h = g.relu(h);
    let reg = linear(g, store, &format!("{prefix}.reg1"), h)?;
    Ok((logits, reg))
}

/// Yaw from a (sin, cos) pair; `atan2(0, 0)` is 0.
pub fn decode_yaw(s: f64, c: f64) -> f64 {
    if s == 0.0 && c == 0.0 {
        0.0
    } else {
        normalize_angle(s.atan2(c))
    }
}

/// Decoded box: center, sizes (w, l, h), yaw, velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedBox {
    pub center: EgoPoint,
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

pub fn decode_box(position: EgoPoint, reg: &[f64]) -> DecodedBox {
    DecodedBox {
        center: EgoPoint::new(
            position.x + reg[0],
            position.y + reg[1],
            position.z + reg[2],
        ),
        size: [reg[3].exp(), reg[4].exp(), reg[5].exp()],
        yaw: decode_yaw(reg[6], reg[7]),
        velocity: [reg[8], reg[9]],
    }
}

/// Queries entering the first refinement layer.
#[derive(Clone, Debug)]
pub struct Queries {
    pub features: Var,
    pub positions: Vec<EgoPoint>,
    /// Differentiable `[n, 3]` positions (learned reference points); constant otherwise.
    pub position_var: Option<Var>,
    pub keys: Vec<Option<(usize, usize)>>,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub logits: Var,
    pub reg: Var,
    /// `[n, 3]` predicted centers, `positions_in + Δ`.
    pub center: Var,
    pub positions_in: Vec<EgoPoint>,
    pub positions_out: Vec<EgoPoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineOptions {
    pub heads: usize,
    pub layers: usize,
    /// Encode the initial positions once instead of refreshing per layer.
    pub freeze_encoding: bool,
}

/// Runs `layers` rounds of aggregate → attend → decode/update. Sampling
/// positions are treated as constants. `replay` substitutes recorded layer
/// input positions for layers ≥ 1.
pub fn run_refinement(
    g: &mut Graph,
    store: &ParamStore,
    pyramid: &FeaturePyramid,
    rig: &CameraRig,
    queries: &Queries,
    opts: RefineOptions,
    replay: Option<&[Vec<EgoPoint>]>,
) -> Result<Vec<LayerOutput>, Error> {
    if opts.layers == 0 {
        return Err(Error::Config("refinement needs at least one layer".into()));
    }
    let n = queries.positions.len();
    let mut outputs = Vec::with_capacity(opts.layers);
    if n == 0 {
        return Ok(outputs);
    }
    let keys_at = |positions: &[EgoPoint]| -> Vec<EncodingKey> {
        queries
            .keys
            .iter()
            .zip(positions)
            .map(|(k, p)| EncodingKey {
                view_level: *k,
                position: *p,
            })
            .collect()
    };
    let frozen_enc = if opts.freeze_encoding {
        Some(proposal_encoding(g, store, &keys_at(&queries.positions))?)
    } else {
        None
    };
    let mut f = queries.features;
    let mut positions = queries.positions.clone();
    for l in 0..opts.layers {
        if l > 0 {
            if let Some(r) = replay {
                positions = r
                    .get(l)
                    .ok_or_else(|| Error::Domain(format!("no replay positions for layer {l}")))?
                    .clone();
            }
        }
        let prefix = format!("detect.layer{l}");
        let agg = aggregate_features(g, pyramid, rig, f, &positions)?;
        let mixed = linear(g, store, &format!("{prefix}.mix"), agg)?;
        let mixed = g.relu(mixed);
        let agg = g.add(agg, mixed)?;
        let e = match frozen_enc {
            Some(e) => e,
            None => proposal_encoding(g, store, &keys_at(&positions))?,
        };
        let (attended, _) = self_attention(g, store, &prefix, agg, e, opts.heads)?;
        let (logits, reg) = decode(g, store, &prefix, attended)?;
        let delta = g.slice(reg, 1, 0, 3)?;
        let base = match (l, queries.position_var) {
            (0, Some(pv)) => pv,
            _ => {
                let flat: Vec<f64> = positions.iter().flat_map(|p| p.to_array()).collect();
                g.constant(vec![n, 3], flat)?
            }
        };
        let center = g.add(base, delta)?;
        let cv = g.value(center);
        let positions_out: Vec<EgoPoint> = (0..n)
            .map(|i| EgoPoint::new(cv[3 * i], cv[3 * i + 1], cv[3 * i + 2]))
            .collect();
        outputs.push(LayerOutput {
            logits,
            reg,
            center,
            positions_in: positions.clone(),
            positions_out: positions_out.clone(),
        });
        positions = positions_out;
        f = attended;
    }
    Ok(outputs)
}

/// Uniform reference points in the spawn square for the learned-query bank.
pub fn init_query_bank(
    store: &mut ParamStore,
    n: usize,
    channels: usize,
    spawn_xy: f64,
    spawn_z: [f64; 2],
    rng: &mut impl Rng,
) -> Result<(), Error> {
    store.add_uniform("fixed.query", vec![n, channels], 1.0, rng);
    let refs: Vec<f64> = (0..n)
        .flat_map(|_| {
            [
                rng.gen_range(-spawn_xy..spawn_xy),
                rng.gen_range(-spawn_xy..spawn_xy),
                rng.gen_range(spawn_z[0]..spawn_z[1]),
            ]
        })
        .collect();
    store.insert("fixed.ref", Tensor::new(vec![n, 3], refs)?);
    Ok(())
}
