//! Synthetic surround-view scenes: box sampling and per-view rasterization.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{box_corners, CameraRecord, CameraRig, EgoPoint, GeometryError, Z_MIN};

/// Inverse-depth channel value is `DEPTH_SCALE / depth`.
pub const DEPTH_SCALE: f64 = 4.0;
/// Center-offset channels are expressed in units of this many pixels.
pub const OFFSET_SCALE: f64 = 8.0;
/// Velocity channels are `v / VELOCITY_SCALE`.
pub const VELOCITY_SCALE: f64 = 8.0;
/// Speed above which a box is considered moving.
pub const MOVING_SPEED: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Moving,
    Static,
}

impl Attribute {
    pub fn from_velocity(vx: f64, vy: f64) -> Self {
        if (vx * vx + vy * vy).sqrt() > MOVING_SPEED {
            Attribute::Moving
        } else {
            Attribute::Static
        }
    }
}

/// Oriented 3D box in the ego frame. `l` runs along the heading `yaw`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "BoxRecord", into = "BoxRecord")]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub class_id: usize,
    pub attribute: Attribute,
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
    velocity: [f64; 2],
    class_id: usize,
    attribute: Attribute,
}

impl From<BoxRecord> for Box3D {
    fn from(r: BoxRecord) -> Self {
        Box3D {
            x: r.center[0],
            y: r.center[1],
            z: r.center[2],
            w: r.size[0],
            l: r.size[1],
            h: r.size[2],
            yaw: r.yaw,
            vx: r.velocity[0],
            vy: r.velocity[1],
            class_id: r.class_id,
            attribute: r.attribute,
        }
    }
}

impl From<Box3D> for BoxRecord {
    fn from(b: Box3D) -> Self {
        BoxRecord {
            center: [b.x, b.y, b.z],
            size: [b.w, b.l, b.h],
            yaw: b.yaw,
            velocity: [b.vx, b.vy],
            class_id: b.class_id,
            attribute: b.attribute,
        }
    }
}

impl Box3D {
    pub fn center(&self) -> EgoPoint {
        EgoPoint::new(self.x, self.y, self.z)
    }

    pub fn speed(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy).sqrt()
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub width: [f64; 2],
    pub length: [f64; 2],
    pub height: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub boxes_per_scene: [usize; 2],
    /// Centers satisfy `|x|, |y| <= spawn_xy`.
    pub spawn_xy: f64,
    /// Centers also satisfy `max(|x|, |y|) >= ego_clearance`.
    pub ego_clearance: f64,
    pub spawn_z: [f64; 2],
    pub speed: [f64; 2],
    pub classes: Vec<ClassSpec>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let class = |name: &str, w: [f64; 2], l: [f64; 2], h: [f64; 2]| ClassSpec {
            name: name.into(),
            width: w,
            length: l,
            height: h,
        };
        Self {
            views: 6,
            width: 256,
            height: 128,
            hfov_deg: 70.0,
            camera_height: 1.5,
            boxes_per_scene: [2, 10],
            spawn_xy: 30.0,
            ego_clearance: 6.0,
            spawn_z: [-0.5, 1.5],
            speed: [0.0, 8.0],
            classes: vec![
                class("car", [1.6, 2.1], [3.8, 5.0], [1.4, 1.9]),
                class("truck", [2.3, 2.8], [6.0, 9.0], [2.5, 3.5]),
                class("pedestrian", [0.5, 0.9], [0.5, 0.9], [1.5, 1.9]),
            ],
        }
    }
}

impl SimConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Input channels per view: class one-hot, inverse depth, center offset, velocity.
    pub fn input_channels(&self) -> usize {
        self.num_classes() + 5
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Config(m));
        let range = |name: &str, r: [f64; 2]| -> Result<(), SimError> {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return Err(SimError::Config(format!(
                    "{name} range {r:?} is degenerate"
                )));
            }
            Ok(())
        };
        if self.views == 0 {
            return err("views must be at least 1".into());
        }
        if self.width < 2 || self.height < 2 {
            return err(format!(
                "image size {}x{} too small",
                self.width, self.height
            ));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return err(format!("hfov_deg {} outside (0, 180)", self.hfov_deg));
        }
        if self.classes.is_empty() {
            return err("at least one class is required".into());
        }
        let [lo, hi] = self.boxes_per_scene;
        if lo > hi {
            return err(format!("boxes_per_scene {lo}..{hi} is empty"));
        }
        if !(self.spawn_xy > 0.0 && self.ego_clearance >= 0.0 && self.ego_clearance < self.spawn_xy)
        {
            return err(format!(
                "need 0 <= ego_clearance < spawn_xy, got {} and {}",
                self.ego_clearance, self.spawn_xy
            ));
        }
        range("spawn_z", self.spawn_z)?;
        range("speed", self.speed)?;
        if self.speed[0] < 0.0 {
            return err("speed must be non-negative".into());
        }
        for c in &self.classes {
            for (n, r) in [
                ("width", c.width),
                ("length", c.length),
                ("height", c.height),
            ] {
                range(&format!("{}.{n}", c.name), r)?;
                if r[0] <= 0.0 {
                    return err(format!("{}.{n} must be positive", c.name));
                }
            }
        }
        Ok(())
    }

    pub fn rig(&self) -> Result<CameraRig, SimError> {
        Ok(CameraRig::surround(
            self.views,
            self.width,
            self.height,
            self.hfov_deg,
            self.camera_height,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub config: SimConfig,
    pub rig: CameraRig,
    pub boxes: Vec<Box3D>,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    seed: u64,
    config: SimConfig,
    rig: Vec<CameraRecord>,
    boxes: Vec<Box3D>,
}

impl Scene {
    pub fn to_json(&self) -> Result<String, SimError> {
        let rec = SceneRecord {
            seed: self.seed,
            config: self.config.clone(),
            rig: self.rig.to_records(),
            boxes: self.boxes.clone(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let rec: SceneRecord = serde_json::from_str(s)?;
        rec.config.validate()?;
        Ok(Scene {
            seed: rec.seed,
            config: rec.config,
            rig: CameraRig::from_records(&rec.rig)?,
            boxes: rec.boxes,
        })
    }

    pub fn render_all(&self) -> Vec<ViewImage> {
        (0..self.rig.len())
            .map(|j| render_view(self, j).expect("view index in range"))
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    rng.gen_range(r[0]..r[1])
}

/// Draws a scene. Box centers are uniform over the spawn square minus the
/// ego clearance square; boxes whose footprints would overlap are redrawn.
pub fn sample_scene(config: &SimConfig, seed: u64) -> Result<Scene, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = config.rig()?;
    let count = rng.gen_range(config.boxes_per_scene[0]..=config.boxes_per_scene[1]);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < 1000 * count.max(1) {
        attempts += 1;
        let b = sample_box(config, &mut rng);
        let radius = |b: &Box3D| 0.5 * (b.w * b.w + b.l * b.l).sqrt();
        let clear = boxes
            .iter()
            .all(|o| b.center().planar_distance(o.center()) > radius(&b) + radius(o));
        if clear {
            boxes.push(b);
        }
    }
    Ok(Scene {
        seed,
        config: config.clone(),
        rig,
        boxes,
    })
}

fn sample_box(config: &SimConfig, rng: &mut ChaCha8Rng) -> Box3D {
    let s = config.spawn_xy;
    let (x, y) = loop {
        let x = rng.gen_range(-s..=s);
        let y = rng.gen_range(-s..=s);
        if x.abs().max(y.abs()) >= config.ego_clearance {
            break (x, y);
        }
    };
    let z = uniform(rng, config.spawn_z);
    let class_id = rng.gen_range(0..config.num_classes());
    let spec = &config.classes[class_id];
    let w = uniform(rng, spec.width);
    let l = uniform(rng, spec.length);
    let h = uniform(rng, spec.height);
    let yaw = normalize_angle(rng.gen_range(-PI..PI));
    let speed = uniform(rng, config.speed);
    let (vx, vy) = (speed * yaw.cos(), speed * yaw.sin());
    Box3D {
        x,
        y,
        z,
        w,
        l,
        h,
        yaw,
        vx,
        vy,
        class_id,
        attribute: Attribute::from_velocity(vx, vy),
    }
}

/// Channel-major `channels × height × width` image plus per-pixel owner.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub owner: Vec<Option<usize>>,
}

impl ViewImage {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
            owner: vec![None; height * width],
        }
    }

    pub fn at(&self, c: usize, v: usize, u: usize) -> f64 {
        self.data[(c * self.height + v) * self.width + u]
    }

    fn set_pixel(&mut self, v: usize, u: usize, values: &[f64]) {
        let plane = self.height * self.width;
        for (c, &x) in values.iter().enumerate() {
            self.data[c * plane + v * self.width + u] = x;
        }
    }
}

/// Silhouette of a box in one view: the convex polygon (pixel coordinates)
/// of the box clipped at the near plane, and the camera depth of its center.
#[derive(Clone, Debug, PartialEq)]
pub struct Silhouette {
    pub hull: Vec<[f64; 2]>,
    pub center_uv: [f64; 2],
    pub center_depth: f64,
}

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Projected outline of `b` in `view`. Returns `None` when fewer than two
/// corners lie in front of the near plane.
pub fn silhouette(
    b: &Box3D,
    view: usize,
    rig: &CameraRig,
) -> Result<Option<Silhouette>, GeometryError> {
    let cam = rig.view(view)?;
    let corners = box_corners(b)?;
    let cc: Vec<Vector3<f64>> = corners.iter().map(|p| cam.ego_to_camera(*p)).collect();
    if cc.iter().filter(|c| c.z > Z_MIN).count() < 2 {
        return Ok(None);
    }
    let mut pts: Vec<Vector3<f64>> = cc.iter().filter(|c| c.z > Z_MIN).copied().collect();
    for (a, bb) in EDGES {
        let (pa, pb) = (cc[a], cc[bb]);
        if (pa.z > Z_MIN) != (pb.z > Z_MIN) {
            let t = (Z_MIN - pa.z) / (pb.z - pa.z);
            pts.push(pa + (pb - pa) * t);
        }
    }
    let k = &cam.intrinsics;
    let project = |p: &Vector3<f64>| [k.fx() * p.x / p.z + k.cx(), k.fy() * p.y / p.z + k.cy()];
    let uv: Vec<[f64; 2]> = pts.iter().map(project).collect();
    let c = cam.ego_to_camera(b.center());
    Ok(Some(Silhouette {
        hull: convex_hull(uv),
        center_uv: if c.z > 0.0 {
            project(&c)
        } else {
            [f64::NAN, f64::NAN]
        },
        center_depth: c.z,
    }))
}

/// Counter-clockwise (in pixel axes) convex hull, monotone chain.
pub fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Inclusive point-in-convex-polygon test for a hull from [`convex_hull`].
pub fn inside_hull(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    let n = hull.len();
    (0..n).all(|i| {
        let (a, b) = (hull[i], hull[(i + 1) % n]);
        let cr = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        cr >= -1e-9
    })
}

/// Rasterizes every box whose center is in front of the near plane as its
/// filled silhouette, keeping the nearest center depth per pixel.
pub fn render_view(scene: &Scene, view: usize) -> Result<ViewImage, GeometryError> {
    let (w, h) = scene.rig.image_size();
    let nc = scene.config.num_classes();
    let mut img = ViewImage::zeros(scene.config.input_channels(), h, w);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut values = vec![0.0; img.channels];
    for (bi, b) in scene.boxes.iter().enumerate() {
        let Some(sil) = silhouette(b, view, &scene.rig)? else {
            continue;
        };
        if sil.center_depth <= Z_MIN {
            continue;
        }
        let Some([u0, v0, u1, v1]) = hull_bounds(&sil.hull, w, h) else {
            continue;
        };
        for v in v0..=v1 {
            for u in u0..=u1 {
                let idx = v * w + u;
                if sil.center_depth >= zbuf[idx] || !inside_hull(&sil.hull, [u as f64, v as f64]) {
                    continue;
                }
                zbuf[idx] = sil.center_depth;
                values.iter_mut().for_each(|x| *x = 0.0);
                values[b.class_id.min(nc - 1)] = 1.0;
                values[nc] = DEPTH_SCALE / sil.center_depth;
                values[nc + 1] = (sil.center_uv[0] - u as f64) / OFFSET_SCALE;
                values[nc + 2] = (sil.center_uv[1] - v as f64) / OFFSET_SCALE;
                values[nc + 3] = b.vx / VELOCITY_SCALE;
                values[nc + 4] = b.vy / VELOCITY_SCALE;
                img.set_pixel(v, u, &values);
                img.owner[idx] = Some(bi);
            }
        }
    }
    Ok(img)
}

fn hull_bounds(hull: &[[f64; 2]], w: usize, h: usize) -> Option<[usize; 4]> {
    let [umin, vmin, umax, vmax] = bounds(hull)?;
    let u0 = umin.ceil().max(0.0);
    let v0 = vmin.ceil().max(0.0);
    let u1 = umax.floor().min((w - 1) as f64);
    let v1 = vmax.floor().min((h - 1) as f64);
    if u0 > u1 || v0 > v1 {
        return None;
    }
    Some([u0 as usize, v0 as usize, u1 as usize, v1 as usize])
}

fn bounds(pts: &[[f64; 2]]) -> Option<[f64; 4]> {
    if pts.is_empty() {
        return None;
    }
    let mut b = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    for p in pts {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    }
    Some(b)
}

/// Axis-aligned `(u_min, v_min, u_max, v_max)` of the box outline clipped to
/// `[0, W-1] × [0, H-1]`. `None` if fewer than two corners are in front of
/// the camera or the outline misses the image.
pub fn gt_2d_box(
    b: &Box3D,
    view: usize,
    rig: &CameraRig,
) -> Result<Option<[f64; 4]>, GeometryError> {
    let Some(sil) = silhouette(b, view, rig)? else {
        return Ok(None);
    };
    let (w, h) = rig.image_size();
    let Some([umin, vmin, umax, vmax]) = bounds(&sil.hull) else {
        return Ok(None);
    };
    let (wmax, hmax) = ((w - 1) as f64, (h - 1) as f64);
    if umax < 0.0 || vmax < 0.0 || umin > wmax || vmin > hmax {
        return Ok(None);
    }
    Ok(Some([
        umin.max(0.0),
        vmin.max(0.0),
        umax.min(wmax),
        vmax.min(hmax),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn single_box_scene(boxes: Vec<Box3D>) -> Scene {
        let config = SimConfig::default();
        Scene {
            seed: 0,
            rig: config.rig().unwrap(),
            config,
            boxes,
        }
    }

    fn car(x: f64, y: f64, z: f64) -> Box3D {
        Box3D {
            x,
            y,
            z,
            w: 2.0,
            l: 4.0,
            h: 1.6,
            yaw: 0.3,
            vx: 3.0,
            vy: -1.0,
            class_id: 0,
            attribute: Attribute::Moving,
        }
    }

    #[test]
    fn sample_is_deterministic() {
        let cfg = SimConfig::default();
        let a = sample_scene(&cfg, 42).unwrap();
        let b = sample_scene(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.render_all(), b.render_all());
        let c = sample_scene(&cfg, 43).unwrap();
        assert_ne!(a.boxes, c.boxes);
    }

    #[test]
    fn sampled_boxes_respect_invariants() {
        let cfg = SimConfig::default();
        for seed in 0..50 {
            let s = sample_scene(&cfg, seed).unwrap();
            assert!((2..=10).contains(&s.boxes.len()));
            for b in &s.boxes {
                assert!(b.x.abs() <= 30.0 && b.y.abs() <= 30.0);
                assert!(b.x.abs().max(b.y.abs()) >= 6.0);
                assert!((-0.5..1.5).contains(&b.z));
                assert!(b.w > 0.0 && b.l > 0.0 && b.h > 0.0);
                assert!(b.yaw > -PI && b.yaw <= PI);
                assert_eq!(b.attribute == Attribute::Moving, b.speed() > 0.5);
            }
        }
    }

    #[test]
    fn centers_are_uniform_over_spawn_region() {
        // 10x10 grid of 6 m bins; the 4 central bins lie inside the ego clearance.
        let cfg = SimConfig::default();
        let mut counts = [[0usize; 10]; 10];
        let mut n = 0usize;
        let mut seed = 0;
        while n < 10_000 {
            for b in sample_scene(&cfg, seed).unwrap().boxes {
                if n == 10_000 {
                    break;
                }
                let i = (((b.x + 30.0) / 6.0).floor() as usize).min(9);
                let j = (((b.y + 30.0) / 6.0).floor() as usize).min(9);
                counts[i][j] += 1;
                n += 1;
            }
            seed += 1;
        }
        let central = |i: usize| i == 4 || i == 5;
        let expected = n as f64 / 96.0;
        let mut chi2 = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                if central(i) && central(j) {
                    assert_eq!(counts[i][j], 0);
                } else {
                    chi2 += (counts[i][j] as f64 - expected).powi(2) / expected;
                }
            }
        }
        let critical = ChiSquared::new(95.0).unwrap().inverse_cdf(0.99);
        assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
    }

    #[test]
    fn empty_scene_renders_zero() {
        let s = single_box_scene(vec![]);
        for img in s.render_all() {
            assert!(img.data.iter().all(|&x| x == 0.0));
            assert!(img.owner.iter().all(Option::is_none));
        }
    }

    #[test]
    fn inverse_depth_is_constant_inside_hull() {
        let d = 12.0;
        let mut b = car(d, 0.0, 1.5);
        b.yaw = 0.0;
        let s = single_box_scene(vec![b]);
        let img = render_view(&s, 0).unwrap();
        let nc = s.config.num_classes();
        let sil = silhouette(&b, 0, &s.rig).unwrap().unwrap();
        assert!((sil.center_depth - d).abs() < 1e-12);
        let mut inside = 0;
        for v in 0..img.height {
            for u in 0..img.width {
                let val = img.at(nc, v, u);
                if inside_hull(&sil.hull, [u as f64, v as f64]) {
                    assert_eq!(val, DEPTH_SCALE / d);
                    inside += 1;
                } else {
                    assert_eq!(val, 0.0);
                }
            }
        }
        assert!(inside > 100);
        // the optical axis passes through the box
        assert_eq!(img.owner[64 * 256 + 128], Some(0));
    }

    #[test]
    fn nearer_box_wins_overlap() {
        let near = car(5.0 + 1.0, 0.0, 1.5);
        let mut far = car(10.0, 0.0, 1.5);
        far.class_id = 1;
        let s = single_box_scene(vec![far, near]);
        let img = render_view(&s, 0).unwrap();
        let nc = s.config.num_classes();
        let si_near = silhouette(&near, 0, &s.rig).unwrap().unwrap();
        for v in 0..img.height {
            for u in 0..img.width {
                if inside_hull(&si_near.hull, [u as f64, v as f64]) {
                    assert_eq!(img.owner[v * img.width + u], Some(1));
                    assert_eq!(img.at(0, v, u), 1.0);
                    assert_eq!(img.at(nc, v, u), DEPTH_SCALE / si_near.center_depth);
                }
            }
        }
    }

    #[test]
    fn channels_back_project_to_the_same_center() {
        let cfg = SimConfig::default();
        let nc = cfg.num_classes();
        for seed in 0..10 {
            let s = sample_scene(&cfg, seed).unwrap();
            for (j, img) in s.render_all().iter().enumerate() {
                for v in (0..img.height).step_by(3) {
                    for u in (0..img.width).step_by(3) {
                        let Some(bi) = img.owner[v * img.width + u] else {
                            continue;
                        };
                        let d = DEPTH_SCALE / img.at(nc, v, u);
                        let du = img.at(nc + 1, v, u) * OFFSET_SCALE;
                        let dv = img.at(nc + 2, v, u) * OFFSET_SCALE;
                        let p = s.rig.lift_to_ego(j, u as f64, v as f64, du, dv, d).unwrap();
                        assert!(p.planar_distance(s.boxes[bi].center()) < 1e-6);
                        assert!((p.z - s.boxes[bi].z).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn gt_box_absent_behind_and_contains_center() {
        let s = single_box_scene(vec![]);
        let behind = car(-15.0, 0.0, 1.0);
        assert_eq!(gt_2d_box(&behind, 0, &s.rig).unwrap(), None);
        let b = car(15.0, 2.0, 1.0);
        let bb = gt_2d_box(&b, 0, &s.rig).unwrap().unwrap();
        let corners = s.rig.project_box_corners(&b, 0).unwrap();
        for c in corners {
            assert!(c.valid);
            assert!(c.u >= bb[0] - 1e-9 && c.u <= bb[2] + 1e-9);
            assert!(c.v >= bb[1] - 1e-9 && c.v <= bb[3] + 1e-9);
        }
        let pc = s.rig.project_to_view(b.center(), 0, 1.0);
        assert!(pc.u >= bb[0] && pc.u <= bb[2] && pc.v >= bb[1] && pc.v <= bb[3]);
    }

    #[test]
    fn half_truncated_box_is_clipped_at_border() {
        let s = single_box_scene(vec![]);
        let cam = &s.rig.views()[0];
        // center projects exactly onto the right image border u = W - 1
        let d = 15.0;
        let lateral = (255.0 - cam.intrinsics.cx()) / cam.intrinsics.fx() * d;
        let mut b = car(d, -lateral, 1.5);
        b.yaw = 0.0;
        let pc = s.rig.project_to_view(b.center(), 0, 1.0);
        assert!((pc.u - 255.0).abs() < 1e-9);
        let bb = gt_2d_box(&b, 0, &s.rig).unwrap().unwrap();
        assert_eq!(bb[2], 255.0);
        let corners = s.rig.project_box_corners(&b, 0).unwrap();
        let umin = corners.iter().map(|c| c.u).fold(f64::INFINITY, f64::min);
        let vmin = corners.iter().map(|c| c.v).fold(f64::INFINITY, f64::min);
        let vmax = corners
            .iter()
            .map(|c| c.v)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((bb[0] - umin).abs() < 1e-9);
        assert!((bb[1] - vmin.max(0.0)).abs() < 1e-9);
        assert!((bb[3] - vmax.min(127.0)).abs() < 1e-9);
        assert!(corners.iter().any(|c| c.u > 255.0));
    }

    #[test]
    fn scene_json_round_trip() {
        let s = sample_scene(&SimConfig::default(), 7).unwrap();
        let json = s.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["boxes"][0]["center"].is_array());
        assert_eq!(v["rig"][0]["k"].as_array().unwrap().len(), 9);
        let back = Scene::from_json(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SimConfig {
            speed: [3.0, 3.0],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = SimConfig::default();
        cfg.classes.clear();
        assert!(sample_scene(&cfg, 0).is_err());
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }
}
