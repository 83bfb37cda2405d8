//! Procedural 2-D shapes in the style of dSprites.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Image side in pixels.
pub const SPRITE_SIZE: usize = 64;
/// Sub-samples per pixel side for anti-aliasing.
const SUPERSAMPLE: usize = 4;
/// Half-side of the square at scale 1, in pixels.
const SQUARE_HALF: f64 = 8.0;
/// Semi-axes of the ellipse at scale 1, in pixels.
const ELLIPSE_AXES: (f64, f64) = (10.0, 5.0);
/// Centres span `[MARGIN, SPRITE_SIZE − MARGIN]`.
const MARGIN: f64 = 8.0;

pub const SPRITE_FACTOR_NAMES: [&str; 5] = ["shape", "scale", "orientation", "posx", "posy"];
pub const SPRITE_FACTOR_RANGES: [(f64, f64); 5] = [(0.0, 1.0), (0.5, 1.0), (0.0, 2.0 * PI), (0.0, 1.0), (0.0, 1.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Ellipse,
}

impl Shape {
    /// Ordinal used as the (discrete) shape factor.
    pub fn ordinal(self) -> f64 {
        match self {
            Shape::Square => 0.0,
            Shape::Ellipse => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteFactors {
    pub shape: Shape,
    pub scale: f64,
    /// Radians.
    pub orientation: f64,
    pub posx: f64,
    pub posy: f64,
}

impl SpriteFactors {
    pub fn to_row(&self) -> [f64; 5] {
        [self.shape.ordinal(), self.scale, self.orientation, self.posx, self.posy]
    }
}

/// Rasterizes one sprite into a row-major 64×64 image with values in `[0, 1]`.
///
/// Each pixel holds the fraction of its 4×4 sub-sample centres covered by the shape.
pub fn render_dsprite(f: &SpriteFactors) -> Vec<f64> {
    // An ellipse is invariant under a half turn, so fold the angle.
    let theta = match f.shape {
        Shape::Square => f.orientation,
        Shape::Ellipse => f.orientation.rem_euclid(PI),
    };
    let (s, c) = theta.sin_cos();
    let span = SPRITE_SIZE as f64 - 2.0 * MARGIN;
    let cx = MARGIN + f.posx * span;
    let cy = MARGIN + f.posy * span;
    let inside = |x: f64, y: f64| {
        let (dx, dy) = (x - cx, y - cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        match f.shape {
            Shape::Square => {
                let h = SQUARE_HALF * f.scale;
                u.abs() <= h && v.abs() <= h
            }
            Shape::Ellipse => {
                let (a, b) = (ELLIPSE_AXES.0 * f.scale, ELLIPSE_AXES.1 * f.scale);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    };
    let n = SPRITE_SIZE;
    let per = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut img = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut hits = 0usize;
            for si in 0..SUPERSAMPLE {
                let y = i as f64 + (si as f64 + 0.5) / SUPERSAMPLE as f64;
                for sj in 0..SUPERSAMPLE {
                    let x = j as f64 + (sj as f64 + 0.5) / SUPERSAMPLE as f64;
                    hits += usize::from(inside(x, y));
                }
            }
            img[i * n + j] = hits as f64 / per;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sprite(shape: Shape, scale: f64, orientation: f64) -> SpriteFactors {
        SpriteFactors { shape, scale, orientation, posx: 0.5, posy: 0.5 }
    }

    #[test]
    fn ellipse_half_turn_is_identity() {
        for theta in [0.0, 0.4, 1.3, 2.9] {
            let a = render_dsprite(&sprite(Shape::Ellipse, 0.8, theta));
            let b = render_dsprite(&sprite(Shape::Ellipse, 0.8, theta + PI));
            let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            // at most one boundary sub-sample may flip through rounding of the folded angle
            assert!(worst <= 1.0 / 16.0, "{theta}: {worst}");
        }
    }

    #[test]
    fn centred_square_is_mirror_symmetric() {
        let img = render_dsprite(&sprite(Shape::Square, 1.0, 0.0));
        let n = SPRITE_SIZE;
        for i in 0..n {
            for j in 0..n {
                assert_eq!(img[i * n + j], img[i * n + n - 1 - j]);
            }
        }
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn foreground_area_scales_quadratically() {
        for shape in [Shape::Square, Shape::Ellipse] {
            let count = |scale| render_dsprite(&sprite(shape, scale, 0.7)).iter().filter(|&&v| v >= 0.5).count() as f64;
            let ratio = count(1.0) / count(0.5);
            assert!((ratio / 4.0 - 1.0).abs() < 0.1, "{shape:?}: {ratio}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let f = SpriteFactors { shape: Shape::Square, scale: 0.6, orientation: 5.0, posx: 0.1, posy: 0.9 };
        assert_eq!(render_dsprite(&f), render_dsprite(&f));
    }
}
