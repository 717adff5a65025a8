//! Scene layout: which objects exist, where, and which one is the target.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    White,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::White,
        Color::Cyan,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::White => "white",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 220],
            Color::Yellow => [230, 220, 50],
            Color::Purple => [150, 60, 190],
            Color::Orange => [240, 140, 30],
            Color::White => [240, 240, 240],
            Color::Cyan => [40, 210, 210],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }

    /// Half side length of the object's bounding box for a given frame size.
    pub fn half_extent(self, image_size: usize) -> usize {
        let frac = match self {
            SizeClass::Small => 0.11,
            SizeClass::Large => 0.19,
        };
        ((image_size as f64 * frac).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub fn phrase(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "in the top left",
            Quadrant::TopRight => "in the top right",
            Quadrant::BottomLeft => "in the bottom left",
            Quadrant::BottomRight => "in the bottom right",
        }
    }

    pub fn of(x: usize, y: usize, image_size: usize) -> Self {
        let half = image_size / 2;
        match (y < half, x < half) {
            (true, true) => Quadrant::TopLeft,
            (true, false) => Quadrant::TopRight,
            (false, true) => Quadrant::BottomLeft,
            (false, false) => Quadrant::BottomRight,
        }
    }
}

pub const ROOMS: [&str; 8] = [
    "living room",
    "kitchen",
    "bedroom",
    "bathroom",
    "dining room",
    "office",
    "hallway",
    "laundry room",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    /// Pixel centre `(x, y)`.
    pub center: (usize, usize),
}

impl SceneObject {
    pub fn bbox(&self, image_size: usize) -> BBox {
        let r = self.size.half_extent(image_size);
        BBox {
            x_min: self.center.0 - r,
            y_min: self.center.1 - r,
            x_max: self.center.0 + r,
            y_max: self.center.1 + r,
        }
    }

    pub fn quadrant(&self, image_size: usize) -> Quadrant {
        Quadrant::of(self.center.0, self.center.1, image_size)
    }

    /// Attributes that must differ between any two objects of a scene.
    pub fn key(&self, image_size: usize) -> (ShapeKind, Color, SizeClass, Quadrant) {
        (self.shape, self.color, self.size, self.quadrant(image_size))
    }

    /// Whether pixel `(x, y)` is covered by the object's silhouette.
    pub fn covers(&self, x: usize, y: usize, image_size: usize) -> bool {
        let r = self.size.half_extent(image_size) as i64;
        let dx = x as i64 - self.center.0 as i64;
        let dy = y as i64 - self.center.1 as i64;
        if dx.abs() > r || dy.abs() > r {
            return false;
        }
        match self.shape {
            ShapeKind::Square => true,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            // apex at the top, base on the bottom edge of the bbox
            ShapeKind::Triangle => 2 * dx.abs() <= dy + r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Back-to-front drawing order.
    pub objects: Vec<SceneObject>,
    pub target: usize,
    pub room: String,
    pub seed: u64,
    pub image_size: usize,
}

impl SceneSpec {
    pub fn target_object(&self) -> &SceneObject {
        &self.objects[self.target]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub object_count: usize,
    /// Placement attempts per object before giving up.
    pub max_retries: usize,
}

impl SceneConfig {
    pub const MIN_OBJECTS: usize = 2;
    pub const MAX_OBJECTS: usize = 6;

    pub fn new(image_size: usize, object_count: usize) -> Self {
        Self {
            image_size,
            object_count,
            max_retries: 200,
        }
    }
}

/// Lays out a scene deterministically from `seed`.
///
/// Objects are placed fully inside the frame, no two share the same
/// (shape, colour, size, quadrant), and centres keep a minimum distance so
/// that occlusion stays partial.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    let count = config.object_count;
    if !(SceneConfig::MIN_OBJECTS..=SceneConfig::MAX_OBJECTS).contains(&count) {
        return Err(Error::Config(format!(
            "object count {count} outside [{}, {}]",
            SceneConfig::MIN_OBJECTS,
            SceneConfig::MAX_OBJECTS
        )));
    }
    let size = config.image_size;
    let large = SizeClass::Large.half_extent(size);
    if size < 2 * large + 2 {
        return Err(Error::Config(format!("image size {size} too small for the object sizes")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..config.max_retries {
            let shape = *ShapeKind::ALL.choose(&mut rng).unwrap();
            let color = *Color::ALL.choose(&mut rng).unwrap();
            let sz = if rng.random_bool(0.5) {
                SizeClass::Small
            } else {
                SizeClass::Large
            };
            let r = sz.half_extent(size);
            let cx = rng.random_range(r..size - r);
            let cy = rng.random_range(r..size - r);
            let cand = SceneObject {
                shape,
                color,
                size: sz,
                center: (cx, cy),
            };
            let key = cand.key(size);
            let clash = objects.iter().any(|o| {
                let min_gap = 0.6 * (r + o.size.half_extent(size)) as f64;
                let dx = o.center.0 as f64 - cx as f64;
                let dy = o.center.1 as f64 - cy as f64;
                o.key(size) == key || (dx * dx + dy * dy).sqrt() < min_gap
            });
            if !clash {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(Error::Generation(format!(
                    "could not place object {} of {count} after {} attempts",
                    objects.len() + 1,
                    config.max_retries
                )))
            }
        }
    }
    let target = rng.random_range(0..count);
    let room = ROOMS.choose(&mut rng).unwrap().to_string();
    Ok(SceneSpec {
        objects,
        target,
        room,
        seed,
        image_size: size,
    })
}
