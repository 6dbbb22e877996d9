//! Per-pixel MLP encoder producing a four-level feature pyramid.

use rand::Rng;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::scene_sim::ViewImage;
use crate::Error;

pub const STRIDES: [usize; 4] = [8, 16, 32, 64];
pub const NUM_LEVELS: usize = 4;
pub const ENCODER_HIDDEN: usize = 64;

/// Cell bookkeeping for a pyramid over `views` images of `width × height`.
/// Cell `(y, x)` of level `k` sits at input pixel `(x·s_k, y·s_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLayout {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// `(rows, cols)` per level.
    pub dims: [(usize, usize); NUM_LEVELS],
    /// Start of each level in the flat cell order (level, view, row, col).
    pub offsets: [usize; NUM_LEVELS + 1],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellRef {
    pub level: usize,
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

impl PyramidLayout {
    pub fn new(views: usize, width: usize, height: usize) -> Result<Self, Error> {
        if !width.is_multiple_of(64) || !height.is_multiple_of(64) || width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "image size {width}x{height} must be divisible by 64"
            )));
        }
        let mut dims = [(0, 0); NUM_LEVELS];
        let mut offsets = [0; NUM_LEVELS + 1];
        for (k, s) in STRIDES.iter().enumerate() {
            dims[k] = (height / s, width / s);
            offsets[k + 1] = offsets[k] + views * dims[k].0 * dims[k].1;
        }
        Ok(Self {
            views,
            width,
            height,
            dims,
            offsets,
        })
    }

    pub fn total_cells(&self) -> usize {
        self.offsets[NUM_LEVELS]
    }

    pub fn level_cells(&self, level: usize) -> usize {
        self.offsets[level + 1] - self.offsets[level]
    }

    pub fn index(&self, c: CellRef) -> usize {
        let (h, w) = self.dims[c.level];
        self.offsets[c.level] + (c.view * h + c.row) * w + c.col
    }

    pub fn cell(&self, index: usize) -> CellRef {
        let level = (0..NUM_LEVELS)
            .find(|&k| index < self.offsets[k + 1])
            .expect("cell index in range");
        let (h, w) = self.dims[level];
        let local = index - self.offsets[level];
        CellRef {
            level,
            view: local / (h * w),
            row: (local / w) % h,
            col: local % w,
        }
    }

    /// Flat `[total_cells × 9]` 3×3 neighborhoods (row-major, same level and
    /// view); out-of-map neighbors point at the padding row `total_cells`.
    pub fn neighbors3x3(&self) -> Vec<usize> {
        let pad = self.total_cells();
        let mut out = Vec::with_capacity(pad * 9);
        for i in 0..pad {
            let c = self.cell(i);
            let (h, w) = self.dims[c.level];
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (r, col) = (c.row as isize + dr, c.col as isize + dc);
                    out.push(
                        if r < 0 || col < 0 || r >= h as isize || col >= w as isize {
                            pad
                        } else {
                            self.index(CellRef {
                                row: r as usize,
                                col: col as usize,
                                ..c
                            })
                        },
                    );
                }
            }
        }
        out
    }

    /// Input-image pixel of a cell.
    pub fn pixel(&self, c: CellRef) -> (f64, f64) {
        let s = STRIDES[c.level] as f64;
        (c.col as f64 * s, c.row as f64 * s)
    }
}

/// 8×8 mean of the input around each stride-8 cell, window `[8i-4, 8i+4)`
/// with zero padding. Output is channel-last `[views, H/8, W/8, C_in]`.
pub fn pool_input(images: &[ViewImage], layout: &PyramidLayout) -> Result<Tensor, Error> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("no images to encode".into()))?;
    let ch = first.channels;
    if images.len() != layout.views
        || images
            .iter()
            .any(|im| im.width != layout.width || im.height != layout.height || im.channels != ch)
    {
        return Err(Error::Config(
            "images do not match the pyramid layout".into(),
        ));
    }
    let (h0, w0) = layout.dims[0];
    let s = STRIDES[0] as isize;
    let mut out = vec![0.0; layout.views * h0 * w0 * ch];
    let norm = 1.0 / (s * s) as f64;
    for (j, im) in images.iter().enumerate() {
        let plane = im.height * im.width;
        for cy in 0..h0 {
            for cx in 0..w0 {
                let o = ((j * h0 + cy) * w0 + cx) * ch;
                for v in (cy as isize * s - s / 2)..(cy as isize * s + s / 2) {
                    if v < 0 || v >= im.height as isize {
                        continue;
                    }
                    for u in (cx as isize * s - s / 2)..(cx as isize * s + s / 2) {
                        if u < 0 || u >= im.width as isize {
                            continue;
                        }
                        let p = v as usize * im.width + u as usize;
                        for c in 0..ch {
                            out[o + c] += im.data[c * plane + p] * norm;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![layout.views, h0, w0, ch], out)?)
}

pub fn init_encoder(
    store: &mut ParamStore,
    in_channels: usize,
    channels: usize,
    rng: &mut impl Rng,
) {
    store.add_linear("encoder.l0", in_channels, ENCODER_HIDDEN, rng);
    store.add_linear("encoder.l1", ENCODER_HIDDEN, ENCODER_HIDDEN, rng);
    store.add_linear("encoder.l2", ENCODER_HIDDEN, channels, rng);
}

/// Feature maps per level, each channel-last `[views, rows, cols, C]`, plus
/// all cells stacked as `[total_cells, C]` in layout order.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; NUM_LEVELS],
    pub flat: Var,
    pub channels: usize,
    /// `PyramidLayout::neighbors3x3` of the layout the pyramid was built on.
    pub neighbors: Vec<usize>,
}

pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    pooled: &Tensor,
    layout: &PyramidLayout,
) -> Result<FeaturePyramid, Error> {
    let (h0, w0) = layout.dims[0];
    let cin = *pooled.shape.last().unwrap_or(&0);
    if pooled.shape != [layout.views, h0, w0, cin] {
        return Err(Error::Config(format!(
            "pooled input shape {:?} does not match the layout",
            pooled.shape
        )));
    }
    let x = g.constant(vec![layout.views * h0 * w0, cin], pooled.data.clone())?;
    let mut hcur = x;
    for (i, name) in ["encoder.l0", "encoder.l1", "encoder.l2"]
        .iter()
        .enumerate()
    {
        let w = g.param(store, &format!("{name}.w"))?;
        let b = g.param(store, &format!("{name}.b"))?;
        hcur = g.linear(hcur, w, b)?;
        if i < 2 {
            hcur = g.relu(hcur);
        }
    }
    let channels = g.shape(hcur)[1];
    let l0 = g.reshape(hcur, vec![layout.views, h0, w0, channels])?;
    let l1 = g.avg_pool2x2(l0)?;
    let l2 = g.avg_pool2x2(l1)?;
    let l3 = g.avg_pool2x2(l2)?;
    let levels = [l0, l1, l2, l3];
    let mut flats = Vec::with_capacity(NUM_LEVELS);
    for (k, lv) in levels.iter().enumerate() {
        flats.push(g.reshape(*lv, vec![layout.level_cells(k), channels])?);
    }
    let flat = g.concat(&flats, 0)?;
    Ok(FeaturePyramid {
        levels,
        flat,
        channels,
        neighbors: layout.neighbors3x3(),
    })
}
