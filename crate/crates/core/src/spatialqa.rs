//! Spatial-relation QA synthesis from 3D scenes: pinhole projection of
//! yaw-rotated boxes, the eleven relation predicates, unambiguous matching,
//! and templated question generation.
//!
//! Coordinate convention: camera frame, +x right, +y down, +z forward;
//! distances in meters, image coordinates in pixels.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{QATurn, Specialist};

const TEMPLATES_JSON: &str = include_str!("../assets/spatial_templates.json");

#[derive(Debug, thiserror::Error)]
pub enum SpatialError {
    #[error("geometry error: object entirely behind the camera")]
    BehindCamera,
    #[error("geometry error: projected box has no visible area")]
    OffScreen,
    #[error("invalid scene {0}: {1}")]
    InvalidScene(String, String),
    #[error("scene parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SpatialError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Object3D {
    pub object_id: String,
    pub category: String,
    /// Center (x, y, z) in meters, camera frame.
    pub center: [f64; 3],
    /// Extents (w, h, d) in meters.
    pub size: [f64; 3],
    /// Rotation about the camera-frame y axis, radians.
    #[serde(default)]
    pub yaw: f64,
}

impl Object3D {
    pub fn camera_distance(&self) -> f64 {
        let [x, y, z] = self.center;
        (x * x + y * y + z * z).sqrt()
    }

    pub fn center_distance(&self, other: &Object3D) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        let dz = self.center[2] - other.center[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene3D {
    pub scene_id: String,
    pub image_ref: String,
    pub intrinsics: CameraIntrinsics,
    pub objects: Vec<Object3D>,
}

impl Scene3D {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for o in &self.objects {
            if !ids.insert(&o.object_id) {
                return Err(SpatialError::InvalidScene(
                    self.scene_id.clone(),
                    format!("duplicate object_id {}", o.object_id),
                ));
            }
            if o.size.iter().any(|&s| s < 0.0) || o.category.is_empty() {
                return Err(SpatialError::InvalidScene(
                    self.scene_id.clone(),
                    format!("bad object {}", o.object_id),
                ));
            }
        }
        if self.intrinsics.fx <= 0.0
            || self.intrinsics.fy <= 0.0
            || self.intrinsics.width == 0
            || self.intrinsics.height == 0
        {
            return Err(SpatialError::InvalidScene(
                self.scene_id.clone(),
                "bad intrinsics".to_string(),
            ));
        }
        Ok(())
    }

    /// Parses a scene file: either a single scene object or an array.
    pub fn load_many(json: &str) -> Result<Vec<Scene3D>> {
        let value: serde_json::Value = serde_json::from_str(json)?;
        let scenes: Vec<Scene3D> = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            vec![serde_json::from_value(value)?]
        };
        for s in &scenes {
            s.validate()?;
        }
        Ok(scenes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    OoClosest,
    OoInFrontOf,
    OoBehind,
    OoLeft,
    OoRight,
    OcClose,
    OcFar,
    OcClosest,
    OcFarthest,
    OcLeft,
    OcRight,
}

pub const ALL_RELATIONS: [RelationKind; 11] = [
    RelationKind::OoClosest,
    RelationKind::OoInFrontOf,
    RelationKind::OoBehind,
    RelationKind::OoLeft,
    RelationKind::OoRight,
    RelationKind::OcClose,
    RelationKind::OcFar,
    RelationKind::OcClosest,
    RelationKind::OcFarthest,
    RelationKind::OcLeft,
    RelationKind::OcRight,
];

impl RelationKind {
    pub fn is_object_object(self) -> bool {
        matches!(
            self,
            RelationKind::OoClosest
                | RelationKind::OoInFrontOf
                | RelationKind::OoBehind
                | RelationKind::OoLeft
                | RelationKind::OoRight
        )
    }

    fn key(self) -> &'static str {
        match self {
            RelationKind::OoClosest => "oo_closest",
            RelationKind::OoInFrontOf => "oo_in_front_of",
            RelationKind::OoBehind => "oo_behind",
            RelationKind::OoLeft => "oo_left",
            RelationKind::OoRight => "oo_right",
            RelationKind::OcClose => "oc_close",
            RelationKind::OcFar => "oc_far",
            RelationKind::OcClosest => "oc_closest",
            RelationKind::OcFarthest => "oc_farthest",
            RelationKind::OcLeft => "oc_left",
            RelationKind::OcRight => "oc_right",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginConfig {
    /// Absolute lateral margin for oo_left/oo_right, meters.
    pub delta_x: f64,
    /// Absolute depth margin for oo_in_front_of/oo_behind, meters.
    pub delta_z: f64,
    /// Pixel margin around the principal point for oc_left/oc_right.
    pub delta_u: f64,
    /// Ratio margin for the closest/farthest superlatives.
    pub ratio: f64,
    /// Distance below which an object is close to the camera, meters.
    pub tau_close: f64,
    /// Distance above which an object is far from the camera, meters.
    pub tau_far: f64,
    /// Near-plane depth for projection, meters.
    pub z_near: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            delta_x: 0.10,
            delta_z: 0.15,
            delta_u: 10.0,
            ratio: 1.2,
            tau_close: 2.0,
            tau_far: 8.0,
            z_near: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox2D {
    pub xmin: i32,
    pub ymin: i32,
    pub xmax: i32,
    pub ymax: i32,
}

impl BBox2D {
    pub fn render(&self) -> String {
        format!("[{},{},{},{}]", self.xmin, self.ymin, self.xmax, self.ymax)
    }
}

fn round_half_away(v: f64) -> i32 {
    v.round() as i32
}

/// Projects the eight yaw-rotated corners through the pinhole map
/// u = fx*x/z + cx, v = fy*y/z + cy and returns the axis-aligned bounds,
/// clipped to the image and rounded to integer pixels.
pub fn project_box(obj: &Object3D, cam: &CameraIntrinsics, z_near: f64) -> Result<BBox2D> {
    let [cx3, cy3, cz3] = obj.center;
    let (hw, hh, hd) = (obj.size[0] / 2.0, obj.size[1] / 2.0, obj.size[2] / 2.0);
    let (s, c) = obj.yaw.sin_cos();
    let mut us: Vec<f64> = Vec::with_capacity(8);
    let mut vs: Vec<f64> = Vec::with_capacity(8);
    for &dx in &[-hw, hw] {
        for &dy in &[-hh, hh] {
            for &dz in &[-hd, hd] {
                // Rotation about the y axis.
                let rx = c * dx + s * dz;
                let rz = -s * dx + c * dz;
                let x = cx3 + rx;
                let y = cy3 + dy;
                let z = cz3 + rz;
                if z <= z_near {
                    continue;
                }
                us.push(cam.fx * x / z + cam.cx);
                vs.push(cam.fy * y / z + cam.cy);
            }
        }
    }
    if us.is_empty() {
        return Err(SpatialError::BehindCamera);
    }
    let xmin = us.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
    let xmax = us
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .min(cam.width as f64);
    let ymin = vs.iter().cloned().fold(f64::INFINITY, f64::min).max(0.0);
    let ymax = vs
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        .min(cam.height as f64);
    if xmax <= xmin || ymax <= ymin || (xmax - xmin) * (ymax - ymin) < 1.0 {
        return Err(SpatialError::OffScreen);
    }
    let bbox = BBox2D {
        xmin: round_half_away(xmin),
        ymin: round_half_away(ymin),
        xmax: round_half_away(xmax),
        ymax: round_half_away(ymax),
    };
    if bbox.xmin >= bbox.xmax || bbox.ymin >= bbox.ymax {
        return Err(SpatialError::OffScreen);
    }
    Ok(bbox)
}

fn projected_u(obj: &Object3D, cam: &CameraIntrinsics, z_near: f64) -> Option<f64> {
    let [x, _, z] = obj.center;
    if z <= z_near {
        return None;
    }
    Some(cam.fx * x / z + cam.cx)
}

/// Decides whether `target` satisfies `rel` (relative to `anchor` for
/// object-object relations). Differences inside the margin are ambiguous
/// and evaluate false.
pub fn eval_predicate(
    rel: RelationKind,
    target: &Object3D,
    anchor: Option<&Object3D>,
    scene: &Scene3D,
    margins: &MarginConfig,
) -> bool {
    match rel {
        RelationKind::OoLeft => {
            let a = anchor.expect("object-object relation needs an anchor");
            a.center[0] - target.center[0] > margins.delta_x
        }
        RelationKind::OoRight => {
            let a = anchor.expect("object-object relation needs an anchor");
            target.center[0] - a.center[0] > margins.delta_x
        }
        RelationKind::OoInFrontOf => {
            let a = anchor.expect("object-object relation needs an anchor");
            a.center[2] - target.center[2] > margins.delta_z
        }
        RelationKind::OoBehind => {
            let a = anchor.expect("object-object relation needs an anchor");
            target.center[2] - a.center[2] > margins.delta_z
        }
        RelationKind::OoClosest => {
            let a = anchor.expect("object-object relation needs an anchor");
            if target.object_id == a.object_id {
                return false;
            }
            let d = target.center_distance(a);
            scene
                .objects
                .iter()
                .filter(|o| o.object_id != target.object_id && o.object_id != a.object_id)
                .all(|o| d * margins.ratio <= o.center_distance(a))
        }
        RelationKind::OcClose => target.camera_distance() < margins.tau_close,
        RelationKind::OcFar => target.camera_distance() > margins.tau_far,
        RelationKind::OcClosest => {
            let d = target.camera_distance();
            scene
                .objects
                .iter()
                .filter(|o| o.object_id != target.object_id)
                .all(|o| d * margins.ratio <= o.camera_distance())
        }
        RelationKind::OcFarthest => {
            let d = target.camera_distance();
            scene
                .objects
                .iter()
                .filter(|o| o.object_id != target.object_id)
                .all(|o| d >= margins.ratio * o.camera_distance())
        }
        RelationKind::OcLeft => match projected_u(target, &scene.intrinsics, margins.z_near) {
            Some(u) => u < scene.intrinsics.cx - margins.delta_u,
            None => false,
        },
        RelationKind::OcRight => match projected_u(target, &scene.intrinsics, margins.z_near) {
            Some(u) => u > scene.intrinsics.cx + margins.delta_u,
            None => false,
        },
    }
}

/// Returns the unique object (excluding the anchor) satisfying the
/// predicate; None on zero or multiple matches.
pub fn match_relation<'a>(
    rel: RelationKind,
    anchor: Option<&Object3D>,
    scene: &'a Scene3D,
    margins: &MarginConfig,
) -> Option<&'a Object3D> {
    let mut found: Option<&Object3D> = None;
    for obj in &scene.objects {
        if let Some(a) = anchor {
            if obj.object_id == a.object_id {
                continue;
            }
        }
        if eval_predicate(rel, obj, anchor, scene, margins) {
            if found.is_some() {
                return None;
            }
            found = Some(obj);
        }
    }
    found
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialQAExample {
    pub scene_id: String,
    pub question: String,
    pub answer: String,
    pub target_id: String,
    pub anchor_id: Option<String>,
    pub relation: RelationKind,
}

impl SpatialQAExample {
    pub fn to_qa_turn(&self, round: u32) -> QATurn {
        QATurn {
            specialist: Specialist::Spatial,
            question: self.question.clone(),
            answer: self.answer.clone(),
            round,
        }
    }
}

#[derive(Debug, Deserialize)]
struct TemplateEntry {
    surface_form: String,
    templates: Vec<String>,
}

fn template_catalog() -> HashMap<String, TemplateEntry> {
    serde_json::from_str(TEMPLATES_JSON).expect("embedded template catalog")
}

fn scene_rng(seed: u64, scene_id: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"scene-qa");
    h.update(seed.to_le_bytes());
    h.update(scene_id.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    ChaCha20Rng::from_seed(key)
}

/// Samples (relation, anchor) pairs, keeps unambiguous matches, and renders
/// templated questions with the anchor's projected box; the answer is the
/// target's box. Emits at most `n_samples` examples; unmatched or
/// unprojectable draws are skipped.
pub fn generate_scene_qa(
    scene: &Scene3D,
    n_samples: usize,
    seed: u64,
    margins: &MarginConfig,
) -> Result<Vec<SpatialQAExample>> {
    scene.validate()?;
    if n_samples == 0 || scene.objects.is_empty() {
        return Ok(Vec::new());
    }
    let catalog = template_catalog();
    let mut rng = scene_rng(seed, &scene.scene_id);
    let mut out = Vec::new();
    let mut emitted: HashSet<(RelationKind, Option<String>, String)> = HashSet::new();
    let budget = n_samples * 40 + 40;
    for _ in 0..budget {
        if out.len() >= n_samples {
            break;
        }
        let rel = ALL_RELATIONS[rng.gen_range(0..ALL_RELATIONS.len())];
        let anchor = if rel.is_object_object() {
            Some(&scene.objects[rng.gen_range(0..scene.objects.len())])
        } else {
            None
        };
        let Some(target) = match_relation(rel, anchor, scene, margins) else {
            continue;
        };
        let Ok(target_bbox) = project_box(target, &scene.intrinsics, margins.z_near) else {
            continue;
        };
        let anchor_bbox = match anchor {
            Some(a) => match project_box(a, &scene.intrinsics, margins.z_near) {
                Ok(b) => Some(b),
                Err(_) => continue,
            },
            None => None,
        };
        let key = (
            rel,
            anchor.map(|a| a.object_id.clone()),
            target.object_id.clone(),
        );
        let entry = &catalog[rel.key()];
        let template = &entry.templates[rng.gen_range(0..entry.templates.len())];
        if !emitted.insert(key) {
            continue;
        }
        let mut question = template
            .replace("{target}", &target.category)
            .replace("{relation}", &entry.surface_form);
        if let Some(a) = anchor {
            question = question
                .replace("{anchor}", &a.category)
                .replace("{anchor_bbox}", &anchor_bbox.unwrap().render());
        }
        out.push(SpatialQAExample {
            scene_id: scene.scene_id.clone(),
            question,
            answer: target_bbox.render(),
            target_id: target.object_id.clone(),
            anchor_id: anchor.map(|a| a.object_id.clone()),
            relation: rel,
        });
    }
    Ok(out)
}
