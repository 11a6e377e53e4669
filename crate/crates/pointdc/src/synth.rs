//! Synthetic indoor scenes with exact ground truth.
//!
//! A scene is a room (floor + four walls) containing floating primitive
//! objects, sampled as a labeled point cloud and observed by a ring of
//! inward-looking cameras. A feature oracle plays the role of a pretrained
//! 2D backbone: occupied pixels carry their class embedding plus optional
//! Gaussian noise and a per-view nuisance vector, so every downstream stage
//! can be scored against a known ceiling.
//!
//! Geometry is laid out so that a uniform grid at the benchmark cell size
//! never mixes classes inside one cell: objects hover above the floor,
//! keep clear of the walls, and keep pairwise gaps wider than a cell, and
//! walls sit half a centimeter outside the floor slab.

use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::codec;
use crate::error::{Error, Result};
use crate::geometry::{project_points, zbuffer_visibility, CameraModel};
use crate::matrix::{self, FeatureImage, FeatureMatrix};

/// Wall slabs sit this far outside the floor so wall and floor points can
/// never quantize into the same grid cell.
const WALL_OFFSET: f64 = 0.005;

/// Minimum clearance between an object and the floor, the walls, and any
/// other object. Wider than the benchmark grid cell, which makes grid
/// cells class-pure.
const OBJECT_CLEARANCE: f64 = 0.3;

const PLACEMENT_RETRIES: usize = 200;

/// Layout recipe for one scene family. Class 0 is the floor, class 1 the
/// walls, classes 2.. are object classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub classes: usize,
    /// Objects per scene, sampled uniformly from this inclusive range.
    pub objects_min: usize,
    pub objects_max: usize,
    /// Room width, depth, height in meters; the floor is z = 0 and the
    /// room is centered on the z axis.
    pub room_extent: [f64; 3],
    /// Per-class sampling density multipliers on top of surface area.
    pub density: Vec<f64>,
    /// Per-class base RGB in [0, 1].
    pub base_colors: Vec<[f64; 3]>,
    /// Uniform per-channel color jitter amplitude.
    pub color_jitter: f64,
    pub points_per_scene: usize,
    /// Cameras on a ring, looking at the room center.
    pub camera_count: usize,
    pub camera_radius: f64,
    pub camera_height: f64,
    /// Square image side in pixels, 90° field of view.
    pub image_size: u32,
}

impl SceneSpec {
    /// The desk-scale benchmark layout: five classes, a handful of floating
    /// objects, four cameras. The floor is sampled ten times denser than
    /// everything else, so point-level clustering faces a heavy imbalance.
    pub fn benchmark() -> Self {
        Self {
            classes: 5,
            objects_min: 6,
            objects_max: 8,
            room_extent: [6.0, 6.0, 3.0],
            density: vec![10.0, 1.0, 1.0, 1.0, 1.0],
            base_colors: default_palette(5),
            color_jitter: 0.15,
            points_per_scene: 4096,
            camera_count: 4,
            camera_radius: 2.2,
            camera_height: 2.4,
            image_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidInput(format!(
                "scenes need at least a floor and a wall class, got {}",
                self.classes
            )));
        }
        if self.density.len() != self.classes || self.base_colors.len() != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "{} classes vs {} densities and {} base colors",
                self.classes,
                self.density.len(),
                self.base_colors.len()
            )));
        }
        if self.density.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidInput("densities must be positive".into()));
        }
        if self
            .base_colors
            .iter()
            .any(|c| c.iter().any(|&v| !(0.0..=1.0).contains(&v)))
        {
            return Err(Error::InvalidInput("base colors must lie in [0, 1]".into()));
        }
        if self.color_jitter < 0.0 {
            return Err(Error::InvalidInput("color jitter must be nonnegative".into()));
        }
        if self.objects_min < self.classes.saturating_sub(2) {
            return Err(Error::InvalidInput(format!(
                "{} object classes need at least that many objects, got objects_min = {}",
                self.classes - 2,
                self.objects_min
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::InvalidInput(format!(
                "empty object count range {}..={}",
                self.objects_min, self.objects_max
            )));
        }
        if self.room_extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidInput("room extents must be positive".into()));
        }
        if self.points_per_scene < self.classes {
            return Err(Error::InvalidInput(format!(
                "{} points cannot cover {} classes",
                self.points_per_scene, self.classes
            )));
        }
        if self.camera_count < 1 {
            return Err(Error::InvalidInput("need at least one camera".into()));
        }
        if !(self.camera_radius > 0.0) || !(self.camera_height > 0.0) {
            return Err(Error::InvalidInput(
                "camera ring radius and height must be positive".into(),
            ));
        }
        if self.image_size < 2 {
            return Err(Error::InvalidInput(format!(
                "image side {} is too small to render",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Evenly spread hues at fixed saturation and value.
/// Evenly spaced hues keep the smallest pairwise color distance as large as
/// the class count allows.
pub fn default_palette(classes: usize) -> Vec<[f64; 3]> {
    (0..classes)
        .map(|c| {
            let hue = c as f64 / classes as f64 * 360.0;
            hsv_to_rgb(hue, 0.6, 0.9)
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// One generated scene: labeled points plus the camera ring that observes
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub cameras: Vec<CameraModel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Box,
    Cylinder,
    Sphere,
}

fn shape_for_class(class: usize) -> Shape {
    match (class - 2) % 3 {
        0 => Shape::Box,
        1 => Shape::Cylinder,
        _ => Shape::Sphere,
    }
}

/// A placed primitive. `half` is the axis-aligned half extent; cylinders
/// use half[0] as radius and half[2] as half height, spheres use half[0]
/// as radius.
#[derive(Debug, Clone)]
struct SceneObject {
    shape: Shape,
    class: usize,
    center: [f64; 3],
    half: [f64; 3],
}

impl SceneObject {
    fn area(&self) -> f64 {
        let [hx, hy, hz] = self.half;
        match self.shape {
            Shape::Box => 8.0 * (hx * hy + hx * hz + hy * hz),
            Shape::Cylinder => {
                let r = hx;
                2.0 * std::f64::consts::PI * r * (2.0 * hz) + 2.0 * std::f64::consts::PI * r * r
            }
            Shape::Sphere => 4.0 * std::f64::consts::PI * hx * hx,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let [cx, cy, cz] = self.center;
        let [hx, hy, hz] = self.half;
        match self.shape {
            Shape::Box => {
                let faces = [4.0 * hy * hz, 4.0 * hy * hz, 4.0 * hx * hz, 4.0 * hx * hz, 4.0 * hx * hy, 4.0 * hx * hy];
                let total: f64 = faces.iter().sum();
                let mut ticket = rng.gen_range(0.0..total);
                let mut face = 0;
                for (i, &a) in faces.iter().enumerate() {
                    if ticket < a {
                        face = i;
                        break;
                    }
                    ticket -= a;
                }
                let u = rng.gen_range(-1.0..1.0);
                let v = rng.gen_range(-1.0..1.0);
                match face {
                    0 => [cx + hx, cy + u * hy, cz + v * hz],
                    1 => [cx - hx, cy + u * hy, cz + v * hz],
                    2 => [cx + u * hx, cy + hy, cz + v * hz],
                    3 => [cx + u * hx, cy - hy, cz + v * hz],
                    4 => [cx + u * hx, cy + v * hy, cz + hz],
                    _ => [cx + u * hx, cy + v * hy, cz - hz],
                }
            }
            Shape::Cylinder => {
                let r = hx;
                let lateral = 2.0 * std::f64::consts::PI * r * (2.0 * hz);
                let cap = std::f64::consts::PI * r * r;
                let ticket = rng.gen_range(0.0..lateral + 2.0 * cap);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                if ticket < lateral {
                    let z = rng.gen_range(-hz..hz);
                    [cx + r * theta.cos(), cy + r * theta.sin(), cz + z]
                } else {
                    let rho = r * rng.gen_range(0.0f64..1.0).sqrt();
                    let z = if ticket < lateral + cap { hz } else { -hz };
                    [cx + rho * theta.cos(), cy + rho * theta.sin(), cz + z]
                }
            }
            Shape::Sphere => {
                let r = hx;
                let u: f64 = rng.gen_range(-1.0..1.0);
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let ring = (1.0 - u * u).sqrt();
                [
                    cx + r * ring * theta.cos(),
                    cy + r * ring * theta.sin(),
                    cz + r * u,
                ]
            }
        }
    }
}

/// Surfaces points can be sampled from, grouped per class for allocation.
enum Surface {
    Floor,
    /// 0: +x, 1: -x, 2: +y, 3: -y.
    Wall(usize),
    Object(usize),
}

impl Surface {
    fn class(&self, objects: &[SceneObject]) -> usize {
        match self {
            Surface::Floor => 0,
            Surface::Wall(_) => 1,
            Surface::Object(i) => objects[*i].class,
        }
    }

    fn area(&self, extent: [f64; 3], objects: &[SceneObject]) -> f64 {
        let [w, d, h] = extent;
        match self {
            Surface::Floor => w * d,
            Surface::Wall(side) => {
                if *side < 2 {
                    d * h
                } else {
                    w * h
                }
            }
            Surface::Object(i) => objects[*i].area(),
        }
    }

    fn sample(&self, extent: [f64; 3], objects: &[SceneObject], rng: &mut ChaCha8Rng) -> [f64; 3] {
        let hx = extent[0] / 2.0;
        let hy = extent[1] / 2.0;
        let h = extent[2];
        match self {
            Surface::Floor => [rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), 0.0],
            Surface::Wall(side) => {
                let along = rng.gen_range(-1.0..1.0);
                let z = rng.gen_range(0.0..h);
                match side {
                    0 => [hx + WALL_OFFSET, along * (hy + WALL_OFFSET), z],
                    1 => [-hx - WALL_OFFSET, along * (hy + WALL_OFFSET), z],
                    2 => [along * (hx + WALL_OFFSET), hy + WALL_OFFSET, z],
                    _ => [along * (hx + WALL_OFFSET), -hy - WALL_OFFSET, z],
                }
            }
            Surface::Object(i) => objects[*i].sample(rng),
        }
    }
}

fn sample_object(
    class: usize,
    extent: [f64; 3],
    rng: &mut ChaCha8Rng,
) -> Result<(Shape, [f64; 3], [f64; 3])> {
    let shape = shape_for_class(class);
    // All shapes draw the same surface-area budget so no class is starved of
    // sample points; dimensions follow from the area.
    let area: f64 = rng.gen_range(2.5..4.0);
    let half = match shape {
        Shape::Box => {
            let u = rng.gen_range(0.6..1.4);
            let v = rng.gen_range(0.6..1.4);
            let w = rng.gen_range(0.6..1.4);
            let s = (area / (2.0 * (u * v + v * w + w * u))).sqrt();
            [s * u / 2.0, s * v / 2.0, s * w / 2.0]
        }
        Shape::Cylinder => {
            let aspect = rng.gen_range(0.8..1.6);
            let r = (area / (2.0 * std::f64::consts::PI * (2.0 * aspect + 1.0))).sqrt();
            [r, r, aspect * r]
        }
        Shape::Sphere => {
            let r = (area / (4.0 * std::f64::consts::PI)).sqrt();
            [r, r, r]
        }
    };
    let room_hx = extent[0] / 2.0;
    let room_hy = extent[1] / 2.0;
    let x_span = room_hx - OBJECT_CLEARANCE - half[0];
    let y_span = room_hy - OBJECT_CLEARANCE - half[1];
    let z_lo = OBJECT_CLEARANCE + half[2];
    let z_hi = extent[2] - 0.05 - half[2];
    if x_span <= 0.0 || y_span <= 0.0 || z_lo >= z_hi {
        return Err(Error::InvalidInput(format!(
            "objects overflow the room: a class {class} object with half extent \
             [{:.2}, {:.2}, {:.2}] cannot keep {OBJECT_CLEARANCE} m clearance in a \
             {:.2}×{:.2}×{:.2} room",
            half[0], half[1], half[2], extent[0], extent[1], extent[2]
        )));
    }
    let center = [
        rng.gen_range(-x_span..x_span),
        rng.gen_range(-y_span..y_span),
        rng.gen_range(z_lo..z_hi),
    ];
    Ok((shape, center, half))
}

fn clear_of(center: [f64; 3], half: [f64; 3], placed: &[SceneObject]) -> bool {
    placed.iter().all(|o| {
        let dx = (center[0] - o.center[0]).abs();
        let dy = (center[1] - o.center[1]).abs();
        dx >= half[0] + o.half[0] + OBJECT_CLEARANCE || dy >= half[1] + o.half[1] + OBJECT_CLEARANCE
    })
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    let count = rng.gen_range(spec.objects_min..=spec.objects_max);
    let object_classes = spec.classes - 2;
    let mut objects = Vec::with_capacity(count);
    for o in 0..count {
        let class = if object_classes == 0 {
            unreachable!("validated: zero objects requested when there are no object classes")
        } else {
            2 + o % object_classes
        };
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let (shape, center, half) = sample_object(class, spec.room_extent, rng)?;
            if clear_of(center, half, &objects) {
                objects.push(SceneObject {
                    shape,
                    class,
                    center,
                    half,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidInput(format!(
                "objects overflow the room: no clear spot for object {o} (class {class}) \
                 after {PLACEMENT_RETRIES} attempts"
            )));
        }
    }
    Ok(objects)
}

/// Splits `total` proportionally to `weights` with every share at least 1.
fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        let target = order[i % order.len()];
        counts[target] += 1;
    }
    loop {
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let donor = (0..counts.len())
            .max_by(|&a, &b| counts[a].cmp(&counts[b]))
            .unwrap();
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    counts
}

/// Builds one labeled room. Deterministic for a fixed spec and seed;
/// rejects specs whose objects cannot fit.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(spec, &mut rng)?;

    let mut surfaces = vec![
        Surface::Floor,
        Surface::Wall(0),
        Surface::Wall(1),
        Surface::Wall(2),
        Surface::Wall(3),
    ];
    surfaces.extend((0..objects.len()).map(Surface::Object));

    let mut class_weight = vec![0.0; spec.classes];
    for s in &surfaces {
        let c = s.class(&objects);
        class_weight[c] += spec.density[c] * s.area(spec.room_extent, &objects);
    }
    let class_counts = allocate(spec.points_per_scene, &class_weight);

    let mut positions = Vec::with_capacity(spec.points_per_scene);
    let mut colors = Vec::with_capacity(spec.points_per_scene);
    let mut labels = Vec::with_capacity(spec.points_per_scene);
    for (class, &count) in class_counts.iter().enumerate() {
        let class_surfaces: Vec<&Surface> = surfaces
            .iter()
            .filter(|s| s.class(&objects) == class)
            .collect();
        let areas: Vec<f64> = class_surfaces
            .iter()
            .map(|s| s.area(spec.room_extent, &objects))
            .collect();
        let total_area: f64 = areas.iter().sum();
        for _ in 0..count {
            let surface = if class_surfaces.len() == 1 {
                class_surfaces[0]
            } else {
                let mut ticket = rng.gen_range(0.0..total_area);
                let mut chosen = class_surfaces.len() - 1;
                for (i, &a) in areas.iter().enumerate() {
                    if ticket < a {
                        chosen = i;
                        break;
                    }
                    ticket -= a;
                }
                class_surfaces[chosen]
            };
            positions.push(surface.sample(spec.room_extent, &objects, &mut rng));
            let base = spec.base_colors[class];
            let mut color = base;
            if spec.color_jitter > 0.0 {
                for c in color.iter_mut() {
                    *c = (*c + rng.gen_range(-spec.color_jitter..spec.color_jitter)).clamp(0.0, 1.0);
                }
            }
            colors.push(color);
            labels.push(class as u32);
        }
    }

    let cloud = PointCloud::new(positions, colors, Some(labels))?;
    Ok(Scene {
        cloud,
        cameras: ring_cameras(spec),
    })
}

/// Cameras evenly spaced on a ring, all looking at a point above the floor
/// center, with a 90° field of view.
pub fn ring_cameras(spec: &SceneSpec) -> Vec<CameraModel> {
    let target = [0.0, 0.0, spec.room_extent[2] * 0.3];
    (0..spec.camera_count)
        .map(|v| {
            let phi = std::f64::consts::TAU * v as f64 / spec.camera_count as f64;
            let position = [
                spec.camera_radius * phi.cos(),
                spec.camera_radius * phi.sin(),
                spec.camera_height,
            ];
            look_at(position, target, spec.image_size)
        })
        .collect()
}

fn look_at(position: [f64; 3], target: [f64; 3], image_size: u32) -> CameraModel {
    use nalgebra::Vector3;
    let pos = Vector3::from(position);
    let forward = (Vector3::from(target) - pos).normalize();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = [
        [right.x, right.y, right.z],
        [down.x, down.y, down.z],
        [forward.x, forward.y, forward.z],
    ];
    let t = [
        -right.dot(&pos),
        -down.dot(&pos),
        -forward.dot(&pos),
    ];
    let side = f64::from(image_size);
    CameraModel::new(
        side / 2.0,
        side / 2.0,
        side / 2.0,
        side / 2.0,
        image_size,
        image_size,
        rotation,
        t,
    )
    .expect("ring cameras are orthonormal by construction")
}

/// Stand-in for a pretrained 2D backbone: a fixed orthonormal embedding
/// per class, plus noise knobs.
#[derive(Debug, Clone)]
pub struct FeatureOracle {
    /// One unit-norm, mutually orthogonal row per class.
    pub embeddings: FeatureMatrix,
    pub noise_sigma: f64,
    /// Amplitude of the per-view offset shared by all pixels of a view.
    pub nuisance: f64,
}

impl FeatureOracle {
    pub fn new(classes: usize, dim: usize, noise_sigma: f64, nuisance: f64, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidInput("the oracle needs at least one class".into()));
        }
        if dim < classes {
            return Err(Error::InvalidInput(format!(
                "{classes} orthogonal embeddings do not fit in {dim} dimensions"
            )));
        }
        if noise_sigma < 0.0 || nuisance < 0.0 {
            return Err(Error::InvalidInput("noise amplitudes must be nonnegative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal is well formed");
        let mut embeddings = FeatureMatrix::zeros(classes, dim);
        for c in 0..classes {
            loop {
                let mut row: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
                for prev in 0..c {
                    let along = matrix::dot(&row, embeddings.row(prev));
                    matrix::axpy(&mut row, -along, embeddings.row(prev));
                }
                let n = matrix::norm(&row);
                if n > 1e-6 {
                    for v in row.iter_mut() {
                        *v /= n;
                    }
                    embeddings.row_mut(c).copy_from_slice(&row);
                    break;
                }
            }
        }
        Ok(Self {
            embeddings,
            noise_sigma,
            nuisance,
        })
    }

    pub fn classes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Renders one feature image per camera: each pixel won in the z-buffer
/// carries the winner's class embedding, plus per-pixel Gaussian noise and
/// a nuisance offset shared across the view. Unoccupied pixels stay
/// invalid.
pub fn render_views(
    cloud: &PointCloud,
    cameras: &[CameraModel],
    oracle: &FeatureOracle,
    seed: u64,
) -> Result<Vec<FeatureImage>> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("rendering needs ground-truth labels".into()))?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= oracle.classes()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} outside the oracle's {} classes",
            oracle.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, oracle.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("validated sigma is finite");
    let mut views = Vec::with_capacity(cameras.len());
    for camera in cameras {
        let mut offset = vec![0.0; oracle.dim()];
        if oracle.nuisance > 0.0 {
            loop {
                for v in offset.iter_mut() {
                    *v = normal_unit(&mut rng);
                }
                let n = matrix::norm(&offset);
                if n > 1e-9 {
                    for v in offset.iter_mut() {
                        *v *= oracle.nuisance / n;
                    }
                    break;
                }
            }
        }
        let projections = project_points(cloud, camera)?;
        let visibility = zbuffer_visibility(&projections, camera);
        let mut image = FeatureImage::zeros(camera.height as usize, camera.width as usize, oracle.dim());
        for row in 0..image.height {
            for col in 0..image.width {
                let Some(winner) = visibility.at(row, col) else {
                    continue;
                };
                let class = labels[winner] as usize;
                let pixel = image.pixel_mut(row, col);
                pixel.copy_from_slice(oracle.embeddings.row(class));
                if oracle.noise_sigma > 0.0 {
                    for v in pixel.iter_mut() {
                        *v += normal.sample(&mut rng);
                    }
                }
                for (v, o) in pixel.iter_mut().zip(&offset) {
                    *v += o;
                }
                image.set_valid(row, col, true);
            }
        }
        views.push(image);
    }
    Ok(views)
}

fn normal_unit(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal is well formed").sample(rng)
}

/// A scene plus its rendered views, ready for lifting and distillation.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub cloud: PointCloud,
    pub cameras: Vec<CameraModel>,
    pub views: Vec<FeatureImage>,
}

/// Recipe for a whole dataset: a scene family, a feature oracle, and how
/// many scenes to draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub scene: SceneSpec,
    pub scenes: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub nuisance: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// The default benchmark: eight scenes of the benchmark layout with a
    /// moderately noisy oracle.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            scene: SceneSpec::benchmark(),
            scenes: 8,
            feature_dim: 16,
            noise_sigma: 0.15,
            nuisance: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.scenes == 0 {
            return Err(Error::InvalidInput("datasets need at least one scene".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::InvalidInput("feature dimension must be at least 2".into()));
        }
        Ok(())
    }

    pub fn oracle(&self) -> Result<FeatureOracle> {
        FeatureOracle::new(
            self.scene.classes,
            self.feature_dim,
            self.noise_sigma,
            self.nuisance,
            self.seed,
        )
    }
}

/// File names of one scene's artifacts within a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub cloud: String,
    pub cameras: Vec<String>,
    pub views: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub scenes: Vec<SceneEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Draws all scenes of a dataset in memory.
pub fn generate_rendered_scenes(spec: &DatasetSpec) -> Result<Vec<RenderedScene>> {
    spec.validate()?;
    let oracle = spec.oracle()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scenes = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        let scene_seed: u64 = master.gen();
        let render_seed: u64 = master.gen();
        let scene = generate_scene(&spec.scene, scene_seed)
            .map_err(|e| e.in_context(format!("scene {i}")))?;
        let views = render_views(&scene.cloud, &scene.cameras, &oracle, render_seed)
            .map_err(|e| e.in_context(format!("scene {i}")))?;
        scenes.push(RenderedScene {
            cloud: scene.cloud,
            cameras: scene.cameras,
            views,
        });
    }
    Ok(scenes)
}

/// Generates a dataset and writes every artifact plus a manifest under
/// `dir`. Rerunning with the same spec reproduces identical bytes.
pub fn generate_dataset(spec: &DatasetSpec, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let scenes = generate_rendered_scenes(spec)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let cloud_name = format!("scene_{i:03}.pdpc");
        codec::save_point_cloud(dir.join(&cloud_name), &scene.cloud)?;
        let mut camera_names = Vec::with_capacity(scene.cameras.len());
        let mut view_names = Vec::with_capacity(scene.views.len());
        for (v, (camera, view)) in scene.cameras.iter().zip(&scene.views).enumerate() {
            let camera_name = format!("camera_{i:03}_{v:02}.pdcm");
            let view_name = format!("view_{i:03}_{v:02}.pdfm");
            codec::save_camera(dir.join(&camera_name), camera)?;
            codec::save_feature_image(dir.join(&view_name), view)?;
            camera_names.push(camera_name);
            view_names.push(view_name);
        }
        entries.push(SceneEntry {
            cloud: cloud_name,
            cameras: camera_names,
            views: view_names,
        });
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        scenes: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::codec(&path, format!("manifest serialization failed: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset directory back into memory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<RenderedScene>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::codec(&path, format!("malformed manifest: {e}")))?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let cloud = codec::load_point_cloud(dir.join(&entry.cloud))?;
        let cameras = entry
            .cameras
            .iter()
            .map(|name| codec::load_camera(dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        let views = entry
            .views
            .iter()
            .map(|name| codec::load_feature_image(dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        scenes.push(RenderedScene {
            cloud,
            cameras,
            views,
        });
    }
    Ok((manifest, scenes))
}

fn dataset_paths(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    let mut paths = vec![dir.join(MANIFEST_NAME)];
    for entry in &manifest.scenes {
        paths.push(dir.join(&entry.cloud));
        paths.extend(entry.cameras.iter().map(|n| dir.join(n)));
        paths.extend(entry.views.iter().map(|n| dir.join(n)));
    }
    paths
}

/// Total on-disk size of a dataset's artifacts in bytes.
pub fn dataset_size(dir: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<u64> {
    let mut total = 0;
    for path in dataset_paths(dir.as_ref(), manifest) {
        total += std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{kmeans_fit, KmeansConfig};
    use crate::distill::build_distill_targets;
    use crate::eval::evaluate_predictions;
    use crate::supervoxel::{partition, PartitionStrategy};

    fn tiny_spec() -> SceneSpec {
        SceneSpec {
            classes: 3,
            objects_min: 1,
            objects_max: 2,
            points_per_scene: 600,
            camera_count: 2,
            image_size: 32,
            density: vec![1.0, 0.5, 4.0],
            base_colors: default_palette(3),
            ..SceneSpec::benchmark()
        }
    }

    #[test]
    fn benchmark_spec_validates() {
        SceneSpec::benchmark().validate().unwrap();
        DatasetSpec::benchmark(0).validate().unwrap();
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        let mut spec = SceneSpec::benchmark();
        spec.classes = 1;
        assert!(spec.validate().is_err());

        let mut spec = SceneSpec::benchmark();
        spec.density[2] = 0.0;
        assert!(spec.validate().is_err());

        let mut spec = SceneSpec::benchmark();
        spec.camera_count = 0;
        assert!(spec.validate().is_err());

        let mut spec = SceneSpec::benchmark();
        spec.objects_min = 1;
        assert!(spec.validate().is_err(), "three object classes need three objects");
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate_scene(&spec, 42).unwrap();
        let b = generate_scene(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec, 43).unwrap();
        assert_ne!(a.cloud.positions, c.cloud.positions);
    }

    #[test]
    fn every_class_appears_in_the_ground_truth() {
        let mut spec = tiny_spec();
        spec.classes = 4;
        spec.objects_min = 2;
        spec.density = vec![1.0, 0.5, 4.0, 4.0];
        spec.base_colors = default_palette(4);
        let scene = generate_scene(&spec, 7).unwrap();
        let labels = scene.cloud.labels.unwrap();
        for class in 0..4u32 {
            assert!(labels.contains(&class), "class {class} missing");
        }
    }

    #[test]
    fn density_multiplier_shifts_point_share_as_area_predicts() {
        // Two classes only (floor and walls) so the areas are exact:
        // floor 6×6 = 36 with weight 10, walls 4×(6×3) = 72 with weight 1.
        let spec = SceneSpec {
            classes: 2,
            objects_min: 0,
            objects_max: 0,
            density: vec![10.0, 1.0],
            base_colors: default_palette(2),
            points_per_scene: 2000,
            ..SceneSpec::benchmark()
        };
        let scene = generate_scene(&spec, 3).unwrap();
        let labels = scene.cloud.labels.unwrap();
        let floor = labels.iter().filter(|&&l| l == 0).count() as f64;
        let share = floor / labels.len() as f64;
        let expected = 360.0 / (360.0 + 72.0);
        assert!(
            (share - expected).abs() <= 0.2 * expected,
            "share {share}, expected {expected}"
        );
    }

    #[test]
    fn grid_cells_never_mix_classes() {
        for seed in 0..3 {
            let scene = generate_scene(&SceneSpec::benchmark(), seed).unwrap();
            let labels = scene.cloud.labels.as_ref().unwrap();
            let part = partition(
                &scene.cloud,
                &PartitionStrategy::UniformGrid { cell_size: 0.25 },
            )
            .unwrap();
            for voxel in 0..part.num_voxels() {
                let members = part.members(voxel);
                let first = labels[members[0]];
                assert!(
                    members.iter().all(|&p| labels[p] == first),
                    "seed {seed}: voxel {voxel} mixes classes"
                );
            }
        }
    }

    #[test]
    fn oversized_objects_are_rejected_with_reason() {
        let mut spec = tiny_spec();
        spec.room_extent = [1.2, 1.2, 3.0];
        let err = generate_scene(&spec, 0).unwrap_err().to_string();
        assert!(err.contains("overflow"), "{err}");

        let mut crowded = tiny_spec();
        crowded.objects_min = 60;
        crowded.objects_max = 60;
        let err = generate_scene(&crowded, 0).unwrap_err().to_string();
        assert!(err.contains("overflow"), "{err}");
    }

    #[test]
    fn oracle_rows_are_orthonormal() {
        let oracle = FeatureOracle::new(5, 16, 0.1, 0.2, 9).unwrap();
        for a in 0..5 {
            let na = matrix::norm(oracle.embeddings.row(a));
            assert!((na - 1.0).abs() < 1e-9, "row {a} norm {na}");
            for b in 0..a {
                let d = matrix::dot(oracle.embeddings.row(a), oracle.embeddings.row(b));
                assert!(d.abs() < 1e-9, "rows {a},{b} overlap {d}");
            }
        }
        assert!(FeatureOracle::new(5, 4, 0.0, 0.0, 0).is_err());
        assert!(FeatureOracle::new(3, 8, -0.1, 0.0, 0).is_err());
    }

    #[test]
    fn noiseless_pixels_equal_class_embeddings_exactly() {
        let spec = tiny_spec();
        let scene = generate_scene(&spec, 5).unwrap();
        let oracle = FeatureOracle::new(3, 6, 0.0, 0.0, 1).unwrap();
        let views = render_views(&scene.cloud, &scene.cameras, &oracle, 2).unwrap();
        let labels = scene.cloud.labels.as_ref().unwrap();
        let mut occupied = 0;
        for (camera, view) in scene.cameras.iter().zip(&views) {
            let projections = project_points(&scene.cloud, camera).unwrap();
            let visibility = zbuffer_visibility(&projections, camera);
            for row in 0..view.height {
                for col in 0..view.width {
                    match visibility.at(row, col) {
                        None => assert!(!view.is_valid(row, col)),
                        Some(winner) => {
                            occupied += 1;
                            assert!(view.is_valid(row, col));
                            let class = labels[winner] as usize;
                            assert_eq!(view.pixel(row, col), oracle.embeddings.row(class));
                        }
                    }
                }
            }
        }
        assert!(occupied > 100, "only {occupied} occupied pixels");
    }

    #[test]
    fn pixel_noise_has_the_requested_scale() {
        let spec = tiny_spec();
        let scene = generate_scene(&spec, 5).unwrap();
        let sigma = 0.1;
        let oracle = FeatureOracle::new(3, 6, sigma, 0.0, 1).unwrap();
        let views = render_views(&scene.cloud, &scene.cameras, &oracle, 2).unwrap();
        let labels = scene.cloud.labels.as_ref().unwrap();
        let mut deviations = Vec::new();
        for (camera, view) in scene.cameras.iter().zip(&views) {
            let projections = project_points(&scene.cloud, camera).unwrap();
            let visibility = zbuffer_visibility(&projections, camera);
            for row in 0..view.height {
                for col in 0..view.width {
                    if let Some(winner) = visibility.at(row, col) {
                        let class = labels[winner] as usize;
                        for (v, e) in view.pixel(row, col).iter().zip(oracle.embeddings.row(class)) {
                            deviations.push(v - e);
                        }
                    }
                }
            }
        }
        let n = deviations.len() as f64;
        let mean = deviations.iter().sum::<f64>() / n;
        assert!(
            mean.abs() < 3.0 * sigma / n.sqrt(),
            "mean {mean} with {n} samples"
        );
    }

    #[test]
    fn nuisance_offset_is_shared_within_a_view_and_differs_across_views() {
        let spec = tiny_spec();
        let scene = generate_scene(&spec, 5).unwrap();
        let amplitude = 0.5;
        let oracle = FeatureOracle::new(3, 6, 0.0, amplitude, 1).unwrap();
        let views = render_views(&scene.cloud, &scene.cameras, &oracle, 2).unwrap();
        let labels = scene.cloud.labels.as_ref().unwrap();
        let mut per_view = Vec::new();
        for (camera, view) in scene.cameras.iter().zip(&views) {
            let projections = project_points(&scene.cloud, camera).unwrap();
            let visibility = zbuffer_visibility(&projections, camera);
            let mut offset: Option<Vec<f64>> = None;
            for row in 0..view.height {
                for col in 0..view.width {
                    if let Some(winner) = visibility.at(row, col) {
                        let class = labels[winner] as usize;
                        let dev: Vec<f64> = view
                            .pixel(row, col)
                            .iter()
                            .zip(oracle.embeddings.row(class))
                            .map(|(v, e)| v - e)
                            .collect();
                        match &offset {
                            None => offset = Some(dev),
                            Some(first) => {
                                for (a, b) in first.iter().zip(&dev) {
                                    assert!((a - b).abs() < 1e-12);
                                }
                            }
                        }
                    }
                }
            }
            let offset = offset.expect("every view sees some geometry");
            let norm = matrix::norm(&offset);
            assert!((norm - amplitude).abs() < 1e-9, "offset norm {norm}");
            per_view.push(offset);
        }
        assert!(
            per_view.windows(2).any(|w| w[0] != w[1]),
            "nuisance offsets repeat across views"
        );
    }

    #[test]
    fn dataset_round_trips_through_disk_and_is_byte_deterministic() {
        let spec = DatasetSpec {
            scene: tiny_spec(),
            scenes: 2,
            feature_dim: 6,
            noise_sigma: 0.1,
            nuisance: 0.1,
            seed: 4,
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let manifest_a = generate_dataset(&spec, dir_a.path()).unwrap();
        let manifest_b = generate_dataset(&spec, dir_b.path()).unwrap();
        assert_eq!(manifest_a, manifest_b);
        for (pa, pb) in dataset_paths(dir_a.path(), &manifest_a)
            .iter()
            .zip(dataset_paths(dir_b.path(), &manifest_b).iter())
        {
            assert_eq!(
                std::fs::read(pa).unwrap(),
                std::fs::read(pb).unwrap(),
                "{} differs between runs",
                pa.file_name().unwrap().to_string_lossy()
            );
        }

        let (manifest_back, scenes) = load_dataset(dir_a.path()).unwrap();
        assert_eq!(manifest_back, manifest_a);
        assert_eq!(scenes.len(), 2);
        assert_eq!(scenes[0].cameras.len(), 2);
        assert_eq!(scenes[0].views.len(), 2);
        assert_eq!(scenes[0].cloud.len(), 600);
    }

    #[test]
    fn benchmark_dataset_fits_the_size_budget() {
        // One benchmark scene on disk, scaled by the scene count, stays
        // well under 200 MB.
        let spec = DatasetSpec {
            scenes: 1,
            ..DatasetSpec::benchmark(0)
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&spec, dir.path()).unwrap();
        let bytes = dataset_size(dir.path(), &manifest).unwrap();
        let full = bytes * DatasetSpec::benchmark(0).scenes as u64;
        assert!(full < 200 * 1024 * 1024, "projected dataset size {full} bytes");
    }

    #[test]
    fn noiseless_oracle_lets_kmeans_segment_perfectly() {
        let spec = tiny_spec();
        let scene = generate_scene(&spec, 11).unwrap();
        let oracle = FeatureOracle::new(3, 6, 0.0, 0.0, 1).unwrap();
        let views = render_views(&scene.cloud, &scene.cameras, &oracle, 2).unwrap();
        let part = partition(
            &scene.cloud,
            &PartitionStrategy::UniformGrid { cell_size: 0.25 },
        )
        .unwrap();
        let paired: Vec<(CameraModel, FeatureImage)> =
            scene.cameras.iter().cloned().zip(views).collect();
        let targets = build_distill_targets(&scene.cloud, &paired, &part, false).unwrap();

        let visible: Vec<usize> = (0..part.num_voxels())
            .filter(|&v| targets.voxel_mask[v])
            .collect();
        let mut rows = FeatureMatrix::zeros(visible.len(), 6);
        for (i, &v) in visible.iter().enumerate() {
            rows.row_mut(i).copy_from_slice(targets.features.row(v));
        }
        let config = KmeansConfig {
            clusters: 3,
            seed: 0,
            sphere: false,
            ..KmeansConfig::default()
        };
        let (_, assignments, _) = kmeans_fit(&rows, &config, None).unwrap();

        let labels = scene.cloud.labels.as_ref().unwrap();
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for (i, &v) in visible.iter().enumerate() {
            for &point in part.members(v) {
                pred.push(assignments[i]);
                gt.push(labels[point] as usize);
            }
        }
        let report = evaluate_predictions(&pred, &gt, 3).unwrap();
        assert_eq!(report.miou, 1.0, "report: {report:?}");
    }
}
