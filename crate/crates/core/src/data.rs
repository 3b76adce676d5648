//! Deterministic synthetic multitask scenes.
//!
//! A scene is a background plane with a few rectangles and ellipses layered
//! in front of it. Every primitive is a planar patch with its own class,
//! base depth and tilt, so segmentation boundaries coincide with depth
//! discontinuities and normals follow analytically from the planes. Random
//! holes invalidate depth and normals at the same pixels.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::AxisPlan;
use crate::tensor::Tensor;

pub const DEFAULT_CLASSES: usize = 5;
pub const DEFAULT_SIZE: usize = 64;

const SCENE_MAGIC: &[u8; 8] = b"EMASCENE";
const SCENE_VERSION: u32 = 1;
const BACKGROUND_DEPTH: f64 = 6.0;
const LAYER_GAP: f64 = 1.0;

/// Generator knobs. [`SceneOptions::default`] is what [`generate_scene`] uses.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneOptions {
    pub min_primitives: usize,
    pub max_primitives: usize,
    /// Largest `|∂z/∂x|`, `|∂z/∂y|` per world unit; the image spans one unit
    /// along its longer side.
    pub max_slope: f64,
    /// Fraction of pixels invalidated, drawn uniformly from this range.
    pub hole_fraction: (f64, f64),
    pub noise: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions {
            min_primitives: 2,
            max_primitives: 4,
            max_slope: 0.4,
            hole_fraction: (0.05, 0.15),
            noise: 0.02,
        }
    }
}

/// One synthetic scene at full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// `[3,H,W]` in `[0,1]`.
    pub image: Tensor<f32>,
    /// Class ids, row-major `H·W`.
    pub seg: Vec<usize>,
    /// `[1,H,W]`, positive on valid pixels, zero in holes.
    pub depth: Tensor<f32>,
    /// `[3,H,W]`, unit length on valid pixels, zero in holes.
    pub normals: Tensor<f32>,
    pub valid: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
struct Plane {
    base: f64,
    slope_x: f64,
    slope_y: f64,
}

impl Plane {
    fn depth(&self, x: f64, y: f64) -> f64 {
        self.base + self.slope_x * x + self.slope_y * y
    }

    fn normal(&self) -> [f64; 3] {
        let n = [-self.slope_x, -self.slope_y, 1.0];
        let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        n.map(|v| v / len)
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, i: usize, j: usize) -> bool {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        match *self {
            Shape::Rect { cy, cx, hy, hx } => (y - cy).abs() <= hy && (x - cx).abs() <= hx,
            Shape::Ellipse { cy, cx, ry, rx } => {
                ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
            }
        }
    }
}

fn check_dims(height: usize, width: usize, classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "scene dims must be positive multiples of 32, got {height}×{width}"
        )));
    }
    Ok(())
}

/// RGB colour of a class, evenly spaced around the hue circle.
fn class_colour(class: usize, classes: usize) -> [f64; 3] {
    let h = class as f64 / classes as f64 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.85 * r, 0.15 + 0.85 * g, 0.15 + 0.85 * b]
}

pub fn generate_scene(seed: u64, height: usize, width: usize, classes: usize) -> Result<Scene> {
    generate_scene_with(seed, height, width, classes, &SceneOptions::default())
}

pub fn generate_scene_with(
    seed: u64,
    height: usize,
    width: usize,
    classes: usize,
    opts: &SceneOptions,
) -> Result<Scene> {
    check_dims(height, width, classes)?;
    if opts.min_primitives > opts.max_primitives
        || opts.max_primitives >= BACKGROUND_DEPTH as usize - 1
    {
        return Err(Error::Config(format!("invalid primitive range {opts:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pitch = 1.0 / height.max(width) as f64;
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let slope = |rng: &mut ChaCha8Rng| {
        if opts.max_slope > 0.0 {
            rng.gen_range(-opts.max_slope..=opts.max_slope)
        } else {
            0.0
        }
    };

    let background = Plane {
        base: BACKGROUND_DEPTH,
        slope_x: slope(&mut rng),
        slope_y: slope(&mut rng),
    };
    let count = rng.gen_range(opts.min_primitives..=opts.max_primitives);
    let mut layers: Vec<(Shape, Plane, usize)> = Vec::with_capacity(count);
    let (h, w) = (height as f64, width as f64);
    for layer in 1..=count {
        let plane = Plane {
            base: BACKGROUND_DEPTH - LAYER_GAP * layer as f64,
            slope_x: slope(&mut rng),
            slope_y: slope(&mut rng),
        };
        let (sy, sx) = (
            rng.gen_range(0.1 * h..0.9 * h),
            rng.gen_range(0.1 * w..0.9 * w),
        );
        let (ey, ex) = (
            rng.gen_range(h / 8.0..h / 3.0),
            rng.gen_range(w / 8.0..w / 3.0),
        );
        let shape = if rng.gen_bool(0.5) {
            Shape::Rect {
                cy: sy,
                cx: sx,
                hy: ey,
                hx: ex,
            }
        } else {
            Shape::Ellipse {
                cy: sy,
                cx: sx,
                ry: ey,
                rx: ex,
            }
        };
        layers.push((shape, plane, rng.gen_range(1..classes)));
    }

    let n = height * width;
    let mut seg = vec![0usize; n];
    let mut depth = vec![0f32; n];
    let mut normals = vec![0f32; 3 * n];
    let mut image = vec![0f32; 3 * n];
    let light = {
        let l = [0.3f64, -0.3, 1.0];
        let len = l.iter().map(|v| v * v).sum::<f64>().sqrt();
        l.map(|v| v / len)
    };
    for i in 0..height {
        for j in 0..width {
            let p = i * width + j;
            let (plane, class) = layers
                .iter()
                .rev()
                .find(|(s, _, _)| s.contains(i, j))
                .map_or((background, 0), |&(_, pl, c)| (pl, c));
            let (x, y) = ((j as f64 - cx) * pitch, (i as f64 - cy) * pitch);
            let z = plane.depth(x, y);
            let nrm = plane.normal();
            seg[p] = class;
            depth[p] = z as f32;
            for c in 0..3 {
                normals[c * n + p] = nrm[c] as f32;
            }
            let shade = nrm
                .iter()
                .zip(&light)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .max(0.0);
            let fade = 1.0 - 0.5 * ((z - 1.5) / 5.0).clamp(0.0, 1.0);
            let colour = class_colour(class, classes);
            for c in 0..3 {
                let noise = if opts.noise > 0.0 {
                    rng.gen_range(-opts.noise..opts.noise)
                } else {
                    0.0
                };
                image[c * n + p] =
                    (colour[c] * (0.35 + 0.65 * shade) * fade + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut valid = vec![true; n];
    let (lo, hi) = opts.hole_fraction;
    if hi > 0.0 {
        let frac = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let target = ((frac * n as f64).round() as usize).clamp(
            (lo * n as f64).ceil() as usize,
            (hi * n as f64).floor() as usize,
        );
        let max_side = (width.min(height) / 8).max(3);
        let mut holes = 0;
        while holes < target {
            let (rh, rw) = (rng.gen_range(2..=max_side), rng.gen_range(2..=max_side));
            let (r0, c0) = (rng.gen_range(0..height), rng.gen_range(0..width));
            'rect: for i in r0..(r0 + rh).min(height) {
                for j in c0..(c0 + rw).min(width) {
                    let p = i * width + j;
                    if valid[p] {
                        valid[p] = false;
                        depth[p] = 0.0;
                        for c in 0..3 {
                            normals[c * n + p] = 0.0;
                        }
                        holes += 1;
                        if holes == target {
                            break 'rect;
                        }
                    }
                }
            }
        }
    }

    Ok(Scene {
        height,
        width,
        classes,
        image: Tensor::new(vec![3, height, width], image)?,
        seg,
        depth: Tensor::new(vec![1, height, width], depth)?,
        normals: Tensor::new(vec![3, height, width], normals)?,
        valid,
    })
}

impl Scene {
    /// Labels resampled by `1/stride`: nearest for classes and mask, masked
    /// bilinear for depth and normals, normals re-normalised.
    pub fn labels_at_stride(&self, stride: usize) -> Result<Labels> {
        if stride == 0 || !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride)
        {
            return Err(Error::Config(format!(
                "stride {stride} does not divide {}×{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / stride, self.width / stride);
        let (rows, cols) = (AxisPlan::new(self.height, h), AxisPlan::new(self.width, w));
        let n = self.height * self.width;
        let nearest = |d: usize| d * stride + stride / 2;
        let mut out = Labels {
            height: h,
            width: w,
            seg: Vec::with_capacity(h * w),
            depth: vec![0.0; h * w],
            normals: vec![0.0; 3 * h * w],
            valid: Vec::with_capacity(h * w),
        };
        for (oi, &(y0, y1, wy0, wy1)) in rows.taps.iter().enumerate() {
            for (oj, &(x0, x1, wx0, wx1)) in cols.taps.iter().enumerate() {
                let src = nearest(oi) * self.width + nearest(oj);
                out.seg.push(self.seg[src]);
                let mut ok = self.valid[src];
                let taps = [
                    (y0 * self.width + x0, wy0 * wx0),
                    (y0 * self.width + x1, wy0 * wx1),
                    (y1 * self.width + x0, wy1 * wx0),
                    (y1 * self.width + x1, wy1 * wx1),
                ];
                let wsum: f64 = taps
                    .iter()
                    .filter(|(p, _)| self.valid[*p])
                    .map(|(_, wt)| wt)
                    .sum();
                ok &= wsum > 0.0;
                let p = oi * w + oj;
                if ok {
                    let blend = |buf: &[f32], off: usize| -> f64 {
                        taps.iter()
                            .filter(|(q, _)| self.valid[*q])
                            .map(|(q, wt)| wt * buf[off + q] as f64)
                            .sum::<f64>()
                            / wsum
                    };
                    out.depth[p] = blend(self.depth.data(), 0) as f32;
                    let v: [f64; 3] = std::array::from_fn(|c| blend(self.normals.data(), c * n));
                    let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if len > 1e-12 {
                        for (c, vc) in v.iter().enumerate() {
                            out.normals[c * h * w + p] = (vc / len) as f32;
                        }
                    } else {
                        ok = false;
                        out.depth[p] = 0.0;
                    }
                }
                out.valid.push(ok);
            }
        }
        Ok(out)
    }

    /// Writes the scene in the binary dump layout:
    ///
    /// ```text
    /// magic    8 bytes  "EMASCENE"
    /// version  u32      1
    /// height   u32
    /// width    u32
    /// classes  u32
    /// image    f32 × 3·H·W   channel-major
    /// seg      u32 × H·W
    /// depth    f32 × H·W
    /// normals  f32 × 3·H·W   channel-major
    /// valid    u8  × H·W     0 or 1
    /// ```
    ///
    /// All integers and floats little-endian.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(SCENE_MAGIC)?;
        for v in [
            SCENE_VERSION,
            self.height as u32,
            self.width as u32,
            self.classes as u32,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.height * self.width * 33);
        buf.extend(self.image.data().iter().flat_map(|v| v.to_le_bytes()));
        buf.extend(self.seg.iter().flat_map(|&v| (v as u32).to_le_bytes()));
        buf.extend(self.depth.data().iter().flat_map(|v| v.to_le_bytes()));
        buf.extend(self.normals.data().iter().flat_map(|v| v.to_le_bytes()));
        buf.extend(self.valid.iter().map(|&v| u8::from(v)));
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            what: "scene dump",
            msg,
        };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != SCENE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut word = [0u8; 4];
        let mut header = [0u32; 4];
        for h in &mut header {
            input.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word);
        }
        let [version, height, width, classes] = header.map(|v| v as usize);
        if version != SCENE_VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = height * width;
        let mut f32s = |count: usize| -> Result<Vec<f32>> {
            let mut raw = vec![0u8; 4 * count];
            input.read_exact(&mut raw)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let image = f32s(3 * n)?;
        let seg: Vec<usize> = f32s(n)?.into_iter().map(|v| v.to_bits() as usize).collect();
        let depth = f32s(n)?;
        let normals = f32s(3 * n)?;
        let mut mask = vec![0u8; n];
        input.read_exact(&mut mask)?;
        Ok(Scene {
            height,
            width,
            classes,
            image: Tensor::new(vec![3, height, width], image)?,
            seg,
            depth: Tensor::new(vec![1, height, width], depth)?,
            normals: Tensor::new(vec![3, height, width], normals)?,
            valid: mask.into_iter().map(|v| v != 0).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Labels of one scene at prediction resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub height: usize,
    pub width: usize,
    pub seg: Vec<usize>,
    pub depth: Vec<f32>,
    pub normals: Vec<f32>,
    pub valid: Vec<bool>,
}

/// A stacked batch: images at input resolution, labels at `1/label_stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    /// `[B,3,H,W]`.
    pub images: Tensor<T>,
    /// `B·h·w` class ids.
    pub seg: Vec<usize>,
    /// `[B,1,h,w]`.
    pub depth: Tensor<T>,
    /// `[B,3,h,w]`.
    pub normals: Tensor<T>,
    /// `B·h·w`.
    pub valid: Vec<bool>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_scenes(indices: Vec<usize>, scenes: &[Scene], label_stride: usize) -> Result<Self> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::Config("empty batch".into()))?;
        let (hh, ww) = (first.height, first.width);
        let b = scenes.len();
        let mut images = Vec::with_capacity(b * 3 * hh * ww);
        let (mut seg, mut depth, mut normals, mut valid) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut dims = (0, 0);
        for s in scenes {
            images.extend(s.image.data().iter().map(|&v| T::of(v as f64)));
            let l = s.labels_at_stride(label_stride)?;
            dims = (l.height, l.width);
            seg.extend(l.seg);
            depth.extend(l.depth.into_iter().map(|v| T::of(v as f64)));
            normals.extend(l.normals.into_iter().map(|v| T::of(v as f64)));
            valid.extend(l.valid);
        }
        Ok(Batch {
            indices,
            images: Tensor::new(vec![b, 3, hh, ww], images)?,
            seg,
            depth: Tensor::new(vec![b, 1, dims.0, dims.1], depth)?,
            normals: Tensor::new(vec![b, 3, dims.0, dims.1], normals)?,
            valid,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            indices: self.indices.clone(),
            images: self.images.cast(),
            seg: self.seg.clone(),
            depth: self.depth.cast(),
            normals: self.normals.cast(),
            valid: self.valid.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seed of scene `index` in a dataset seeded with `seed` (SplitMix64 mixing).
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dataset geometry for [`BatchIter`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataDims {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Labels are produced at `1/label_stride` of the input resolution.
    pub label_stride: usize,
}

impl Default for DataDims {
    fn default() -> Self {
        DataDims {
            height: DEFAULT_SIZE,
            width: DEFAULT_SIZE,
            classes: DEFAULT_CLASSES,
            label_stride: 4,
        }
    }
}

/// One shuffled pass over a dataset of `count` scenes, in batches.
///
/// The order depends only on `(seed, epoch)`, so an interrupted pass can be
/// resumed with [`BatchIter::resume`].
#[derive(Clone, Debug)]
pub struct BatchIter {
    seed: u64,
    batch: usize,
    dims: DataDims,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchIter {
    pub fn new(seed: u64, count: usize, batch: usize, dims: DataDims) -> Result<Self> {
        Self::resume(seed, count, batch, dims, 0, 0)
    }

    /// Starts at batch `batch_index` of pass `epoch`.
    pub fn resume(
        seed: u64,
        count: usize,
        batch: usize,
        dims: DataDims,
        epoch: u64,
        batch_index: usize,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        check_dims(dims.height, dims.width, dims.classes)?;
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(scene_seed(seed ^ 0x005E_ED0F_0DE5, epoch as usize));
        order.shuffle(&mut rng);
        Ok(BatchIter {
            seed,
            batch,
            dims,
            order,
            cursor: (batch_index * batch).min(count),
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for BatchIter {
    type Item = Result<Batch<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let d = self.dims;
        let scenes: Result<Vec<Scene>> = indices
            .iter()
            .map(|&i| generate_scene(scene_seed(self.seed, i), d.height, d.width, d.classes))
            .collect();
        Some(scenes.and_then(|s| Batch::from_scenes(indices, &s, d.label_stride)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(42, 64, 64, 5).unwrap();
        let b = generate_scene(42, 64, 64, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(43, 64, 64, 5).unwrap());
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(generate_scene(0, 48, 64, 5).is_err());
        assert!(generate_scene(0, 64, 64, 1).is_err());
        assert!(BatchIter::new(0, 4, 0, DataDims::default()).is_err());
    }

    #[test]
    fn front_parallel_plane_faces_the_camera() {
        let opts = SceneOptions {
            min_primitives: 0,
            max_primitives: 0,
            max_slope: 0.0,
            ..SceneOptions::default()
        };
        let s = generate_scene_with(3, 32, 64, 3, &opts).unwrap();
        let n = 32 * 64;
        for p in (0..n).filter(|&p| s.valid[p]) {
            let v = [
                s.normals.data()[p],
                s.normals.data()[n + p],
                s.normals.data()[2 * n + p],
            ];
            assert_eq!(v, [0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn hole_fraction_in_range() {
        for seed in 0..10 {
            let s = generate_scene(seed, 64, 64, 5).unwrap();
            let holes = s.valid.iter().filter(|&&v| !v).count() as f64 / 4096.0;
            assert!((0.05..=0.15).contains(&holes), "{holes}");
        }
    }

    #[test]
    fn dump_round_trip() {
        let s = generate_scene(9, 32, 32, 4).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 16 + 32 * 32 * (12 + 4 + 4 + 12 + 1));
        assert_eq!(Scene::read_from(&mut buf.as_slice()).unwrap(), s);
        buf[0] = b'X';
        assert!(Scene::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn one_batch_when_count_equals_batch() {
        let it = BatchIter::new(1, 8, 8, DataDims::default()).unwrap();
        let batches: Vec<_> = it.collect::<Result<_>>().unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].images.shape(), &[8, 3, 64, 64]);
        assert_eq!(batches[0].depth.shape(), &[8, 1, 16, 16]);
        assert_eq!(batches[0].seg.len(), 8 * 256);
    }

    #[test]
    fn order_is_seeded_and_resumable() {
        let dims = DataDims {
            height: 32,
            width: 32,
            ..DataDims::default()
        };
        let a = BatchIter::new(5, 10, 3, dims).unwrap();
        let b = BatchIter::new(5, 10, 3, dims).unwrap();
        assert_eq!(a.order(), b.order());
        let all: Vec<Vec<usize>> = a.map(|bt| bt.unwrap().indices).collect();
        assert_eq!(all.len(), 4);
        let resumed: Vec<Vec<usize>> = BatchIter::resume(5, 10, 3, dims, 0, 2)
            .unwrap()
            .map(|bt| bt.unwrap().indices)
            .collect();
        assert_eq!(resumed, all[2..]);
        let other_epoch = BatchIter::resume(5, 10, 3, dims, 1, 0).unwrap();
        assert_ne!(other_epoch.order(), b.order());
    }
}
