//! Synthetic indoor rooms with S3DIS-like structure.
//!
//! A room is a floor and four walls; boxes stand on the floor, boards hang
//! flat against the walls, cylindrical columns run floor to ceiling and
//! clutter fills a few small cubes. Every primitive samples its own surface
//! (or volume, for clutter) and carries one label.

use std::fmt;
use std::str::FromStr;

use codecforge_core::point::{Point3, PointCloud};
use codecforge_core::rng::{derive_seed, stream};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SCENE_CLASS_COUNT: usize = 6;

const COLOR_SIGMA: f64 = 0.04;
const BOARD_OFFSET: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SceneClass {
    Floor,
    Wall,
    BoxFurniture,
    ThinBoard,
    Column,
    Clutter,
}

impl SceneClass {
    pub const ALL: [Self; SCENE_CLASS_COUNT] = [
        Self::Floor,
        Self::Wall,
        Self::BoxFurniture,
        Self::ThinBoard,
        Self::Column,
        Self::Clutter,
    ];

    /// Label id; the position in [`SceneClass::ALL`].
    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Floor => "floor",
            Self::Wall => "wall",
            Self::BoxFurniture => "box_furniture",
            Self::ThinBoard => "thin_board",
            Self::Column => "column",
            Self::Clutter => "clutter",
        }
    }

    fn tint(self) -> Point3 {
        match self {
            Self::Floor => [0.55, 0.45, 0.35],
            Self::Wall => [0.85, 0.84, 0.78],
            Self::BoxFurniture => [0.62, 0.32, 0.18],
            Self::ThinBoard => [0.22, 0.48, 0.26],
            Self::Column => [0.70, 0.70, 0.76],
            Self::Clutter => [0.30, 0.32, 0.72],
        }
    }

    /// Relative sampling density; objects are scanned more densely than
    /// the room shell.
    fn density_gain(self) -> f64 {
        match self {
            Self::Floor | Self::Wall => 1.0,
            Self::BoxFurniture => 2.0,
            Self::Clutter => 6.0,
            Self::ThinBoard | Self::Column => 1.0,
        }
    }

    fn is_small(self) -> bool {
        matches!(self, Self::ThinBoard | Self::Column)
    }
}

impl fmt::Display for SceneClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneClass {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown scene class `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Room size along x, y, z in meters.
    pub extent: Point3,
    pub classes: Vec<SceneClass>,
    /// Points per square meter of room shell (floor plus walls); the
    /// total is `round(density · shell_area)` whatever the furniture.
    pub density: f64,
    /// Share of points given to thin boards and columns, split evenly.
    pub small_object_fraction: f64,
    /// Coordinate jitter; Gaussian, truncated at three sigma.
    pub noise_sigma: f64,
    /// Every requested class must receive at least this many points.
    pub min_class_points: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let mut spec = Self {
            extent: [6.0, 5.0, 3.0],
            classes: SceneClass::ALL.to_vec(),
            density: 0.0,
            small_object_fraction: 0.15,
            noise_sigma: 0.005,
            min_class_points: 16,
        };
        spec.density = 4096.0 / spec.shell_area();
        spec
    }
}

impl SceneSpec {
    /// Default room sized to exactly `points` points.
    pub fn with_points(points: usize) -> Self {
        let mut spec = Self::default();
        spec.set_points(points);
        spec
    }

    pub fn set_points(&mut self, points: usize) {
        self.density = points as f64 / self.shell_area();
    }

    pub fn shell_area(&self) -> f64 {
        let [x, y, z] = self.extent;
        x * y + 2.0 * (x + y) * z
    }

    pub fn total_points(&self) -> usize {
        (self.density * self.shell_area()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.extent.iter().any(|&e| !(e.is_finite() && e >= 2.5)) {
            return bad(format!("room extent must be at least 2.5 m per axis, got {:?}", self.extent));
        }
        if !(self.density.is_finite() && self.density > 0.0) {
            return bad(format!("density must be positive, got {}", self.density));
        }
        if !(0.0..1.0).contains(&self.small_object_fraction) {
            return bad(format!(
                "small_object_fraction must lie in [0, 1), got {}",
                self.small_object_fraction
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.classes.is_empty() {
            return bad("at least one class must be requested".into());
        }
        if self.classes.iter().all(|c| c.is_small()) {
            return bad("a scene needs at least one of floor, wall, box_furniture, clutter".into());
        }
        Ok(())
    }
}

/// One labelled sampling primitive.
#[derive(Clone, Debug)]
enum Primitive {
    /// Axis-aligned rectangle: origin plus two edge vectors.
    Rect { origin: Point3, u: Point3, v: Point3 },
    /// Side surface of a vertical cylinder standing on the floor.
    Cylinder { center: [f64; 2], radius: f64, height: f64 },
    /// Solid axis-aligned box, sampled uniformly in volume.
    Solid { min: Point3, size: Point3 },
}

impl Primitive {
    fn weight(&self) -> f64 {
        match self {
            Self::Rect { u, v, .. } => norm(u) * norm(v),
            Self::Cylinder { radius, height, .. } => std::f64::consts::TAU * radius * height,
            Self::Solid { size, .. } => 2.0 * (size[0] * size[1] + size[1] * size[2] + size[0] * size[2]),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3 {
        match *self {
            Self::Rect { origin, u, v } => {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                [0, 1, 2].map(|k| origin[k] + a * u[k] + b * v[k])
            }
            Self::Cylinder { center, radius, height } => {
                let theta = rng.gen::<f64>() * std::f64::consts::TAU;
                [
                    center[0] + radius * theta.cos(),
                    center[1] + radius * theta.sin(),
                    rng.gen::<f64>() * height,
                ]
            }
            Self::Solid { min, size } => [0, 1, 2].map(|k| min[k] + rng.gen::<f64>() * size[k]),
        }
    }
}

fn norm(p: &Point3) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// The five faces of a box resting on the floor (the bottom is hidden).
fn box_faces(min: Point3, size: Point3) -> Vec<Primitive> {
    let [x, y, z] = min;
    let [w, d, h] = size;
    vec![
        Primitive::Rect { origin: [x, y, z + h], u: [w, 0.0, 0.0], v: [0.0, d, 0.0] },
        Primitive::Rect { origin: [x, y, z], u: [w, 0.0, 0.0], v: [0.0, 0.0, h] },
        Primitive::Rect { origin: [x, y + d, z], u: [w, 0.0, 0.0], v: [0.0, 0.0, h] },
        Primitive::Rect { origin: [x, y, z], u: [0.0, d, 0.0], v: [0.0, 0.0, h] },
        Primitive::Rect { origin: [x + w, y, z], u: [0.0, d, 0.0], v: [0.0, 0.0, h] },
    ]
}

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<(SceneClass, Vec<Primitive>)> {
    let [ex, ey, ez] = spec.extent;
    let mut out = Vec::new();
    for &class in &SceneClass::ALL {
        if !spec.classes.contains(&class) {
            continue;
        }
        let prims = match class {
            SceneClass::Floor => vec![Primitive::Rect { origin: [0.0; 3], u: [ex, 0.0, 0.0], v: [0.0, ey, 0.0] }],
            SceneClass::Wall => vec![
                Primitive::Rect { origin: [0.0; 3], u: [ex, 0.0, 0.0], v: [0.0, 0.0, ez] },
                Primitive::Rect { origin: [0.0, ey, 0.0], u: [ex, 0.0, 0.0], v: [0.0, 0.0, ez] },
                Primitive::Rect { origin: [0.0; 3], u: [0.0, ey, 0.0], v: [0.0, 0.0, ez] },
                Primitive::Rect { origin: [ex, 0.0, 0.0], u: [0.0, ey, 0.0], v: [0.0, 0.0, ez] },
            ],
            SceneClass::BoxFurniture => (0..2)
                .flat_map(|_| {
                    let size = [rng.gen_range(0.6..1.4), rng.gen_range(0.5..1.0), rng.gen_range(0.4..1.0)];
                    let min = [
                        rng.gen_range(0.5..ex - 0.5 - size[0]),
                        rng.gen_range(0.5..ey - 0.5 - size[1]),
                        0.0,
                    ];
                    box_faces(min, size)
                })
                .collect(),
            SceneClass::ThinBoard => (0..2)
                .map(|_| {
                    let (w, h) = (rng.gen_range(0.8..1.6), rng.gen_range(0.6..1.0));
                    let z = rng.gen_range(0.9..ez - 0.2 - h);
                    match rng.gen_range(0..4) {
                        0 => Primitive::Rect {
                            origin: [rng.gen_range(0.2..ex - 0.2 - w), BOARD_OFFSET, z],
                            u: [w, 0.0, 0.0],
                            v: [0.0, 0.0, h],
                        },
                        1 => Primitive::Rect {
                            origin: [rng.gen_range(0.2..ex - 0.2 - w), ey - BOARD_OFFSET, z],
                            u: [w, 0.0, 0.0],
                            v: [0.0, 0.0, h],
                        },
                        2 => Primitive::Rect {
                            origin: [BOARD_OFFSET, rng.gen_range(0.2..ey - 0.2 - w), z],
                            u: [0.0, w, 0.0],
                            v: [0.0, 0.0, h],
                        },
                        _ => Primitive::Rect {
                            origin: [ex - BOARD_OFFSET, rng.gen_range(0.2..ey - 0.2 - w), z],
                            u: [0.0, w, 0.0],
                            v: [0.0, 0.0, h],
                        },
                    }
                })
                .collect(),
            SceneClass::Column => (0..2)
                .map(|_| Primitive::Cylinder {
                    center: [rng.gen_range(0.6..ex - 0.6), rng.gen_range(0.6..ey - 0.6)],
                    radius: rng.gen_range(0.15..0.25),
                    height: ez,
                })
                .collect(),
            SceneClass::Clutter => (0..3)
                .map(|_| {
                    let side = rng.gen_range(0.2..0.4);
                    Primitive::Solid {
                        min: [rng.gen_range(0.3..ex - 0.3 - side), rng.gen_range(0.3..ey - 0.3 - side), 0.0],
                        size: [side; 3],
                    }
                })
                .collect(),
        };
        out.push((class, prims));
    }
    out
}

/// Splits `total` proportionally to `weights` by largest remainder, so the
/// parts sum to `total` exactly.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

/// Generates one labelled room. Labels are [`SceneClass::id`]s and the
/// cloud always declares all six classes; coordinates and colors are
/// rounded to six decimals so text files round-trip exactly.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = stream(seed, 0);
    let parts = layout(spec, &mut rng);
    let total = spec.total_points();
    let has_small = parts.iter().any(|(c, _)| c.is_small());
    let small_total = if has_small {
        (total as f64 * spec.small_object_fraction).round() as usize
    } else {
        0
    };
    // small classes split their share evenly, the rest by scanned area
    let area = |c: &SceneClass, prims: &Vec<Primitive>, small: bool| match (c.is_small(), small) {
        (true, true) => 1.0,
        (false, false) => c.density_gain() * prims.iter().map(Primitive::weight).sum::<f64>(),
        _ => 0.0,
    };
    let small_counts = apportion(small_total, &parts.iter().map(|(c, p)| area(c, p, true)).collect::<Vec<_>>());
    let large_counts = apportion(total - small_total, &parts.iter().map(|(c, p)| area(c, p, false)).collect::<Vec<_>>());

    let jitter = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let shade = Normal::new(0.0, COLOR_SIGMA).expect("finite sigma");
    let clip = 3.0 * spec.noise_sigma;
    let mut points: Vec<(Point3, Point3, usize)> = Vec::with_capacity(total);
    for (k, (class, prims)) in parts.iter().enumerate() {
        let count = small_counts[k] + large_counts[k];
        if count < spec.min_class_points {
            return Err(HarnessError::Generation(format!(
                "class {class} receives {count} points, fewer than the minimum {}; raise the density",
                spec.min_class_points
            )));
        }
        let pick = WeightedIndex::new(prims.iter().map(Primitive::weight)).expect("positive primitive weights");
        let tint = class.tint();
        for _ in 0..count {
            let p = prims[pick.sample(&mut rng)].sample(&mut rng);
            let xyz = p.map(|v| quantize(v + jitter.sample(&mut rng).clamp(-clip, clip)));
            let rgb = tint.map(|t| quantize((t + shade.sample(&mut rng)).clamp(0.0, 1.0)));
            points.push((xyz, rgb, class.id()));
        }
    }
    points.shuffle(&mut rng);
    let (coords, colors, labels) = points.into_iter().fold(
        (Vec::with_capacity(total), Vec::with_capacity(total), Vec::with_capacity(total)),
        |(mut a, mut b, mut c), (x, y, z)| {
            a.push(x);
            b.push(y);
            c.push(z);
            (a, b, c)
        },
    );
    Ok(PointCloud::new(coords, Some(colors), Some(labels), SCENE_CLASS_COUNT)?)
}

/// `count` rooms with seeds derived from `seed`.
pub fn generate_suite(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<PointCloud>> {
    (0..count).map(|i| generate_scene(spec, derive_seed(seed, i as u64))).collect()
}

pub fn label_histogram(cloud: &PointCloud) -> Vec<usize> {
    let mut hist = vec![0; cloud.num_classes];
    for &l in cloud.labels.iter().flatten() {
        hist[l] += 1;
    }
    hist
}
