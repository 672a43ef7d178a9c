use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::multiobject::ObjectId;
use crate::numerics::Tensor2D;

/// An `H × W × 3` image with channel values in `[0, 1]`, stored
/// pixel-major (`(y * W + x) * 3 + c`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Binary `H × W` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeKind {
    Rect { half_height: f64, half_width: f64 },
    Disk { radius: f64 },
}

impl ShapeKind {
    fn half_extent(&self) -> (f64, f64) {
        match *self {
            ShapeKind::Rect {
                half_height,
                half_width,
            } => (half_height, half_width),
            ShapeKind::Disk { radius } => (radius, radius),
        }
    }

    fn contains(&self, dy: f64, dx: f64) -> bool {
        match *self {
            ShapeKind::Rect {
                half_height,
                half_width,
            } => dy.abs() < half_height && dx.abs() < half_width,
            ShapeKind::Disk { radius } => dy * dy + dx * dx < radius * radius,
        }
    }
}

/// One moving object. Positions are `(y, x)` centers in pixels; the object
/// bounces off the frame border and is invisible before `appear_frame`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    pub appear_frame: usize,
}

impl ObjectSpec {
    /// Center at frame `t`, reflected into the band where the shape fits.
    pub fn center_at(&self, t: usize, height: usize, width: usize) -> (f64, f64) {
        let (hy, hx) = self.shape.half_extent();
        let y = bounce(
            self.start.0 + self.velocity.0 * t as f64,
            hy,
            height as f64 - hy,
        );
        let x = bounce(
            self.start.1 + self.velocity.1 * t as f64,
            hx,
            width as f64 - hx,
        );
        (y, x)
    }
}

fn bounce(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (p - lo).rem_euclid(2.0 * span);
    if m <= span {
        lo + m
    } else {
        lo + 2.0 * span - m
    }
}

const PALETTE: [[f64; 3]; 6] = [
    [0.92, 0.15, 0.12],
    [0.12, 0.85, 0.20],
    [0.18, 0.28, 0.95],
    [0.95, 0.88, 0.12],
    [0.88, 0.18, 0.85],
    [0.12, 0.88, 0.90],
];

const BACKGROUND_LEVEL: f64 = 0.35;
const BACKGROUND_NOISE: f64 = 0.05;

/// Everything needed to render a sequence deterministically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub objects: Vec<ObjectSpec>,
    pub seed: u64,
}

impl SequenceSpec {
    /// Random objects with palette colors, alternating rectangles and
    /// disks, placed without overlap in the first frame.
    pub fn random(
        height: usize,
        width: usize,
        num_objects: usize,
        num_frames: usize,
        max_velocity: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_objects == 0 {
            return Err(Error::Generation("at least one object is required".into()));
        }
        if num_frames == 0 {
            return Err(Error::Generation("at least one frame is required".into()));
        }
        if !(max_velocity >= 0.0) {
            return Err(Error::Generation(format!(
                "max velocity {max_velocity} is negative"
            )));
        }
        let side = height.min(width) as f64;
        if side < 16.0 {
            return Err(Error::Generation(format!(
                "frame {height}x{width} is too small to place objects"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(num_objects);
        for k in 0..num_objects {
            let size = rng.random_range(side / 8.0..side / 5.0);
            let shape = if k % 2 == 0 {
                ShapeKind::Rect {
                    half_height: size,
                    half_width: size * rng.random_range(0.7..1.3),
                }
            } else {
                ShapeKind::Disk { radius: size }
            };
            let (hy, hx) = shape.half_extent();
            if 2.0 * hy >= height as f64 || 2.0 * hx >= width as f64 {
                return Err(Error::Generation(format!(
                    "object {k} does not fit the frame"
                )));
            }
            let mut placed = None;
            for _ in 0..200 {
                let c = (
                    rng.random_range(hy..height as f64 - hy),
                    rng.random_range(hx..width as f64 - hx),
                );
                let clear = objects.iter().all(|o| {
                    let (oy, ox) = o.shape.half_extent();
                    (c.0 - o.start.0).abs() >= hy + oy + 1.0
                        || (c.1 - o.start.1).abs() >= hx + ox + 1.0
                });
                if clear {
                    placed = Some(c);
                    break;
                }
            }
            let start = placed.ok_or_else(|| {
                Error::Generation(format!("could not place object {k} without overlap"))
            })?;
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = max_velocity * rng.random_range(0.5..=1.0);
            objects.push(ObjectSpec {
                id: ObjectId(k as u32 + 1),
                shape,
                color: PALETTE[k % PALETTE.len()],
                start,
                velocity: (speed * angle.sin(), speed * angle.cos()),
                appear_frame: 0,
            });
        }
        Ok(Self {
            height,
            width,
            num_frames,
            objects,
            seed,
        })
    }

    pub fn render(&self) -> Result<SyntheticSequence> {
        let mut ids: Vec<_> = self.objects.iter().map(|o| o.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.objects.len() || ids.iter().any(|id| id.is_background()) {
            return Err(Error::Generation(
                "object ids must be unique and non-zero".into(),
            ));
        }
        let (h, w) = (self.height, self.width);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0000_00b6);
        let texture: Vec<f64> = (0..h * w)
            .map(|_| BACKGROUND_LEVEL + rng.random_range(-BACKGROUND_NOISE..BACKGROUND_NOISE))
            .collect();

        let mut frames = Vec::with_capacity(self.num_frames);
        let mut gt_masks = Vec::with_capacity(self.num_frames);
        for t in 0..self.num_frames {
            let mut owner = vec![ObjectId::BACKGROUND; h * w];
            for obj in self.objects.iter().filter(|o| t >= o.appear_frame) {
                let (cy, cx) = obj.center_at(t, h, w);
                for y in 0..h {
                    for x in 0..w {
                        if obj.shape.contains(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx) {
                            owner[y * w + x] = obj.id;
                        }
                    }
                }
            }
            let mut image = Image {
                height: h,
                width: w,
                data: vec![0.0; h * w * 3],
            };
            for (i, id) in owner.iter().enumerate() {
                let rgb = match self.objects.iter().find(|o| o.id == *id) {
                    Some(o) => o.color,
                    None => [texture[i]; 3],
                };
                image.set_pixel(i / w, i % w, rgb);
            }
            let masks = self
                .objects
                .iter()
                .map(|o| {
                    let data = owner.iter().map(|&id| id == o.id).collect();
                    (
                        o.id,
                        Mask {
                            height: h,
                            width: w,
                            data,
                        },
                    )
                })
                .collect();
            frames.push(image);
            gt_masks.push(masks);
        }
        Ok(SyntheticSequence {
            spec: self.clone(),
            frames,
            gt_masks,
        })
    }
}

/// Rendered frames and per-object ground-truth masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub spec: SequenceSpec,
    pub frames: Vec<Image>,
    pub gt_masks: Vec<BTreeMap<ObjectId, Mask>>,
}

/// Random sequence of `num_objects` objects moving at up to `max_velocity`
/// pixels per frame.
pub fn generate_sequence(
    height: usize,
    width: usize,
    num_objects: usize,
    num_frames: usize,
    max_velocity: f64,
    seed: u64,
) -> Result<SyntheticSequence> {
    SequenceSpec::random(height, width, num_objects, num_frames, max_velocity, seed)?.render()
}

impl SyntheticSequence {
    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn object_ids(&self) -> Vec<ObjectId> {
        self.spec.objects.iter().map(|o| o.id).collect()
    }

    /// Writes `sequence.json` (the generating parameters), `frames.json/.bin` with all frames
    /// stacked as a `(T·H·W) × 3` tensor, and `masks.json/.bin` with masks
    /// stacked as a `(T·N·H) × W` tensor in the order objects are listed in `sequence.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("sequence.json"),
            serde_json::to_vec_pretty(&self.spec)?,
        )?;
        let (h, w) = (self.height(), self.width());
        let pixels: Vec<f64> = self
            .frames
            .iter()
            .flat_map(|f| f.data.iter().copied())
            .collect();
        Tensor2D::from_vec(self.num_frames() * h * w, 3, pixels)?.save(dir.join("frames.json"))?;
        let ids = self.object_ids();
        let mut bits = Vec::with_capacity(self.num_frames() * ids.len() * h * w);
        for masks in &self.gt_masks {
            for id in &ids {
                bits.extend(masks[id].data.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            }
        }
        Tensor2D::from_vec(self.num_frames() * ids.len() * h, w, bits)?
            .save(dir.join("masks.json"))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: SequenceSpec = serde_json::from_slice(&fs::read(dir.join("sequence.json"))?)?;
        let (h, w, t) = (spec.height, spec.width, spec.num_frames);
        let frames_t = Tensor2D::<f64>::load(dir.join("frames.json"))?;
        if frames_t.shape() != (t * h * w, 3) {
            return Err(shape_err("frame tensor does not match sequence.json"));
        }
        let frames = frames_t
            .as_slice()
            .chunks(h * w * 3)
            .map(|c| Image {
                height: h,
                width: w,
                data: c.to_vec(),
            })
            .collect();
        let n = spec.objects.len();
        let masks_t = Tensor2D::<f64>::load(dir.join("masks.json"))?;
        if masks_t.shape() != (t * n * h, w) {
            return Err(shape_err("mask tensor does not match sequence.json"));
        }
        let mut chunks = masks_t.as_slice().chunks(h * w);
        let mut gt_masks = Vec::with_capacity(t);
        for _ in 0..t {
            let mut masks = BTreeMap::new();
            for obj in &spec.objects {
                let c = chunks.next().expect("sized above");
                let data = c.iter().map(|&v| v > 0.5).collect();
                masks.insert(
                    obj.id,
                    Mask {
                        height: h,
                        width: w,
                        data,
                    },
                );
            }
            gt_masks.push(masks);
        }
        Ok(Self {
            spec,
            frames,
            gt_masks,
        })
    }
}
