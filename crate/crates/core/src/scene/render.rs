use super::geometry::{ball_center, light_point, BALL_RADIUS, PIVOT, SCENE_SIZE};
use super::SceneParams;
use crate::image::Image;

pub const BACKGROUND: [f32; 3] = [0.95, 0.95, 0.95];
pub const SHADOW_COLOR: [f32; 3] = [0.30, 0.30, 0.32];
pub const PENDULUM_COLOR: [f32; 3] = [0.15, 0.35, 0.80];
pub const LIGHT_COLOR: [f32; 3] = [1.00, 0.75, 0.10];

const ROD_HALF_WIDTH: f64 = 0.3;
const PIVOT_RADIUS: f64 = 0.4;
const LIGHT_RADIUS: f64 = 1.0;
const SHADOW_CENTER_Y: f64 = 0.8;
const SHADOW_HALF_HEIGHT: f64 = 0.6;

/// Which element covers a pixel. Elements never overlap within the factor
/// ranges, so each pixel belongs to at most one region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Background,
    Shadow,
    Pendulum,
    Light,
}

/// A rendered image plus its per-pixel region labels.
#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub image: Image,
    pub regions: Vec<Region>,
}

impl RenderedScene {
    pub fn mask(&self, region: Region) -> Vec<bool> {
        self.regions.iter().map(|&r| r == region).collect()
    }

    pub fn non_background_fraction(&self) -> f64 {
        let n = self
            .regions
            .iter()
            .filter(|&&r| r != Region::Background)
            .count();
        n as f64 / self.regions.len() as f64
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let t = ((wx * vx + wy * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    (wx - t * vx).hypot(wy - t * vy)
}

fn within(p: (f64, f64), c: (f64, f64), r: f64) -> bool {
    (p.0 - c.0).hypot(p.1 - c.1) <= r
}

/// Rasterizes the scene by point-sampling pixel centers.
pub fn render_layers(params: &SceneParams, width: usize, height: usize) -> RenderedScene {
    let ball = ball_center(params.pendulum_angle());
    let light = light_point(params.light_angle());
    let half_len = params.shadow_length() / 2.0;
    let shadow_x = params.shadow_position();

    let mut image = Image::filled(width, height, BACKGROUND);
    let mut regions = vec![Region::Background; width * height];
    for py in 0..height {
        let sy = SCENE_SIZE - (py as f64 + 0.5) * SCENE_SIZE / height as f64;
        for px in 0..width {
            let sx = (px as f64 + 0.5) * SCENE_SIZE / width as f64;
            let p = (sx, sy);
            let region = if within(p, light, LIGHT_RADIUS) {
                Region::Light
            } else if within(p, ball, BALL_RADIUS)
                || within(p, PIVOT, PIVOT_RADIUS)
                || segment_distance(p, PIVOT, ball) <= ROD_HALF_WIDTH
            {
                Region::Pendulum
            } else {
                let ex = (sx - shadow_x) / half_len;
                let ey = (sy - SHADOW_CENTER_Y) / SHADOW_HALF_HEIGHT;
                if ex * ex + ey * ey <= 1.0 {
                    Region::Shadow
                } else {
                    Region::Background
                }
            };
            let color = match region {
                Region::Background => continue,
                Region::Shadow => SHADOW_COLOR,
                Region::Pendulum => PENDULUM_COLOR,
                Region::Light => LIGHT_COLOR,
            };
            regions[py * width + px] = region;
            image.set_pixel(px, py, color);
        }
    }
    RenderedScene { image, regions }
}
