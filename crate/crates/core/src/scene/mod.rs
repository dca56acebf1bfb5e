//! Procedural pendulum scenes: a point light on a horizontal track, a
//! pendulum, and the pendulum's shadow on the ground.
//!
//! Ground-truth causal graph: pendulum angle and light position both cause
//! shadow length and shadow position; nothing else is connected.

mod dataset;
mod geometry;
mod lfset;
mod render;

pub use dataset::{
    build_dataset, dataset_digest, load_split, read_manifest, write_dataset, Dataset, DatasetConfig, Sample,
    Split, MANIFEST_FILE,
};
pub use geometry::{
    ball_center, derive_shadow, light_point, BALL_RADIUS, GROUND_Y, LIGHT_HEIGHT,
    PENDULUM_LENGTH, PHI_RANGE, PIVOT, SCENE_SIZE, THETA_RANGE,
};
pub use lfset::{
    build_label_finding_set, load_label_finding_set, write_label_finding_set, LabelFindingSet,
    LfConfig, LfPair, LFSET_MANIFEST,
};
pub use render::{
    render_layers, Region, RenderedScene, BACKGROUND, LIGHT_COLOR, PENDULUM_COLOR, SHADOW_COLOR,
};

use crate::error::Result;
use crate::image::Image;

/// The four generative factors, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    Pendulum,
    Light,
    ShadowLength,
    ShadowPosition,
}

impl Factor {
    pub const ALL: [Factor; 4] = [
        Factor::Pendulum,
        Factor::Light,
        Factor::ShadowLength,
        Factor::ShadowPosition,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Factor::Pendulum => "pendulum",
            Factor::Light => "light",
            Factor::ShadowLength => "shadow_length",
            Factor::ShadowPosition => "shadow_position",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Edges `cause -> effect` of the true causal graph.
    pub fn true_edges() -> [(Factor, Factor); 4] {
        [
            (Factor::Pendulum, Factor::ShadowLength),
            (Factor::Pendulum, Factor::ShadowPosition),
            (Factor::Light, Factor::ShadowLength),
            (Factor::Light, Factor::ShadowPosition),
        ]
    }
}

/// One scene's factor values. Shadow factors are derived from the two
/// angles; only counterfactual rendering may override them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pendulum_angle: f64,
    light_angle: f64,
    shadow_length: f64,
    shadow_position: f64,
}

impl SceneParams {
    /// Angles in degrees; shadow factors are derived.
    pub fn new(pendulum_angle: f64, light_angle: f64) -> Result<Self> {
        let (shadow_length, shadow_position) = derive_shadow(pendulum_angle, light_angle)?;
        Ok(Self {
            pendulum_angle,
            light_angle,
            shadow_length,
            shadow_position,
        })
    }

    pub fn pendulum_angle(&self) -> f64 {
        self.pendulum_angle
    }

    pub fn light_angle(&self) -> f64 {
        self.light_angle
    }

    pub fn shadow_length(&self) -> f64 {
        self.shadow_length
    }

    pub fn shadow_position(&self) -> f64 {
        self.shadow_position
    }

    /// Factor values in [`Factor::ALL`] order.
    pub fn factors(&self) -> [f64; 4] {
        [
            self.pendulum_angle,
            self.light_angle,
            self.shadow_length,
            self.shadow_position,
        ]
    }

    /// Same angles with one shadow factor scaled; the other factors keep
    /// their values. Used for counterfactual pairs on effect variables.
    pub(crate) fn with_scaled_shadow(&self, factor: Factor, scale: f64) -> Self {
        let mut p = *self;
        match factor {
            Factor::ShadowLength => p.shadow_length *= scale,
            Factor::ShadowPosition => p.shadow_position *= scale,
            Factor::Pendulum | Factor::Light => {}
        }
        p
    }
}

/// Renders a scene. Fails when the angles are out of range.
pub fn render_scene(params: &SceneParams, width: usize, height: usize) -> Result<Image> {
    geometry::check_range("pendulum_angle", params.pendulum_angle, THETA_RANGE)?;
    geometry::check_range("light_angle", params.light_angle, PHI_RANGE)?;
    Ok(render_layers(params, width, height).image)
}
