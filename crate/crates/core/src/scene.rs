//! Scene and texture catalog shared by the renderer, captioner and agent.

use serde::{Deserialize, Serialize};

pub const SCENES: [&str; 16] = [
    "kitchen", "bedroom", "bathroom", "hallway", "living", "dining", "office", "stairs", "closet", "laundry", "garage",
    "porch", "library", "gym", "studio", "attic",
];

pub const TEXTURES: [&str; 8] = [
    "checker", "stripes", "dots", "plain", "gradient", "waves", "bricks", "grid",
];

/// Index into [`SCENES`]; doubles as the region-modeling class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SceneId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Texture {
    Checker,
    Stripes,
    Dots,
    Plain,
    Gradient,
    Waves,
    Bricks,
    Grid,
}

impl Texture {
    pub fn from_index(i: usize) -> Texture {
        use Texture::*;
        [Checker, Stripes, Dots, Plain, Gradient, Waves, Bricks, Grid][i % 8]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        TEXTURES[self.index()]
    }

    /// Pattern intensity in [0, 1] at integer pixel coordinates.
    pub fn pattern(self, x: usize, y: usize) -> f64 {
        match self {
            Texture::Checker => ((x / 2 + y / 2) % 2) as f64,
            Texture::Stripes => ((x / 2) % 2) as f64,
            Texture::Dots => {
                if x % 3 == 1 && y % 3 == 1 {
                    1.0
                } else {
                    0.0
                }
            }
            Texture::Plain => 0.5,
            Texture::Gradient => (y % 8) as f64 / 7.0,
            Texture::Waves => 0.5 + 0.5 * ((x as f64) * 0.8 + (y as f64) * 0.4).sin(),
            Texture::Bricks => {
                let off = if (y / 2) % 2 == 0 { 0 } else { 2 };
                if y % 2 == 0 || (x + off) % 4 == 0 {
                    0.0
                } else {
                    1.0
                }
            }
            Texture::Grid => {
                if x % 4 == 0 || y % 4 == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl SceneId {
    pub fn from_label(label: &str) -> Option<SceneId> {
        SCENES.iter().position(|s| *s == label).map(SceneId)
    }

    pub fn label(self) -> &'static str {
        SCENES[self.0 % SCENES.len()]
    }

    pub fn texture(self) -> Texture {
        Texture::from_index(self.0)
    }

    /// Base RGB colour; scenes sharing a texture differ in colour.
    pub fn color(self) -> [f64; 3] {
        let h = self.0 as f64 / SCENES.len() as f64;
        let hue = |shift: f64| 0.5 + 0.35 * (std::f64::consts::TAU * (h + shift)).cos();
        [hue(0.0), hue(1.0 / 3.0), hue(2.0 / 3.0)]
    }
}

pub const SCENE_COUNT: usize = SCENES.len();
