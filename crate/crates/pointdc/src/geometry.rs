//! Pinhole projection, frustum filtering, z-buffer visibility, and lifting
//! of per-pixel features back to points.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::matrix::{FeatureImage, FeatureMatrix};

/// Points at or behind this camera-frame depth are treated as invisible.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Pinhole camera with rigid world-to-camera extrinsics.
///
/// Camera frame: +x right, +y down, +z forward, so pixel coordinates are
/// `u = fx*x/z + cx`, `v = fy*y/z + cy` with v growing downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: [[f64; 3]; 3],
        translation: [f64; 3],
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width < 1 || self.height < 1 {
            return Err(Error::InvalidInput(format!(
                "image size must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        let r = self.rotation_matrix();
        let identity_err = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if identity_err > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "rotation must be orthonormal with det +1 (orthogonality error {identity_err:.2e}, det {det})"
            )));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[
            self.rotation[0].into(),
            self.rotation[1].into(),
            self.rotation[2].into(),
        ])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    /// World point -> camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        self.rotation_matrix() * Vector3::from(p) + self.translation_vector()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// One point's projection into one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointProjection {
    pub point_index: usize,
    /// Continuous pixel coordinates; NaN when the point sits at or behind
    /// the camera plane.
    pub u: f64,
    pub v: f64,
    pub pixel_row: i64,
    pub pixel_col: i64,
    pub depth: f64,
    pub valid: bool,
}

/// Per-pixel winner of the depth test.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMap {
    pub width: usize,
    pub height: usize,
    /// Winning point index per pixel, row-major; `None` when unoccupied.
    pub winner: Vec<Option<usize>>,
    /// Depth of the winning projection; meaningless where `winner` is None.
    pub winner_depth: Vec<f64>,
}

impl VisibilityMap {
    pub fn unoccupied(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            winner: vec![None; width * height],
            winner_depth: vec![f64::INFINITY; width * height],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> Option<usize> {
        self.winner[row * self.width + col]
    }
}

/// Projects every point of the cloud into the camera. One output per input
/// point, order preserved; out-of-frustum points are flagged, not dropped.
pub fn project_points(cloud: &PointCloud, camera: &CameraModel) -> Result<Vec<PointProjection>> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot project an empty cloud".into()));
    }
    camera.validate()?;
    let r = camera.rotation_matrix();
    let t = camera.translation_vector();
    let w = f64::from(camera.width);
    let h = f64::from(camera.height);

    let mut out = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.positions.iter().enumerate() {
        let q = r * Vector3::from(*p) + t;
        let depth = q.z;
        if depth <= DEPTH_EPSILON {
            out.push(PointProjection {
                point_index: i,
                u: f64::NAN,
                v: f64::NAN,
                pixel_row: 0,
                pixel_col: 0,
                depth,
                valid: false,
            });
            continue;
        }
        let u = camera.fx * q.x / depth + camera.cx;
        let v = camera.fy * q.y / depth + camera.cy;
        let valid = u >= 0.0 && u < w && v >= 0.0 && v < h;
        out.push(PointProjection {
            point_index: i,
            u,
            v,
            pixel_row: v.floor() as i64,
            pixel_col: u.floor() as i64,
            depth,
            valid,
        });
    }
    Ok(out)
}

/// Resolves occlusion per pixel: the valid projection with minimum depth
/// wins; depth ties break toward the lowest point index.
pub fn zbuffer_visibility(projections: &[PointProjection], camera: &CameraModel) -> VisibilityMap {
    let w = camera.width as usize;
    let h = camera.height as usize;
    let mut vis = VisibilityMap::unoccupied(w, h);
    for proj in projections {
        if !proj.valid {
            continue;
        }
        let idx = proj.pixel_row as usize * w + proj.pixel_col as usize;
        // Strict comparison keeps the first (lowest) index on exact ties,
        // since projections arrive in point-index order.
        if vis.winner[idx].is_none() || proj.depth < vis.winner_depth[idx] {
            vis.winner[idx] = Some(proj.point_index);
            vis.winner_depth[idx] = proj.depth;
        }
    }
    vis
}

/// Warp per-pixel features back onto the points that won them.
///
/// A point that wins several pixels takes the elementwise maximum of their
/// features. Points winning nothing get a zero row and `mask = false`.
/// Pixels flagged invalid in the feature image carry no feature.
pub fn lift_pixel_features(
    vis: &VisibilityMap,
    feature_map: &FeatureImage,
    n_points: usize,
) -> Result<(FeatureMatrix, Vec<bool>)> {
    if vis.width != feature_map.width || vis.height != feature_map.height {
        return Err(Error::ShapeMismatch(format!(
            "visibility map is {}x{}, feature map is {}x{}",
            vis.height, vis.width, feature_map.height, feature_map.width
        )));
    }
    let dim = feature_map.dim;
    let mut features = FeatureMatrix::zeros(n_points, dim);
    let mut mask = vec![false; n_points];
    for row in 0..vis.height {
        for col in 0..vis.width {
            let Some(point) = vis.at(row, col) else {
                continue;
            };
            if !feature_map.is_valid(row, col) {
                continue;
            }
            if point >= n_points {
                return Err(Error::InvalidInput(format!(
                    "visibility map references point {point}, but only {n_points} points exist"
                )));
            }
            let pix = feature_map.pixel(row, col);
            let dst = features.row_mut(point);
            if mask[point] {
                for (d, s) in dst.iter_mut().zip(pix) {
                    *d = d.max(*s);
                }
            } else {
                dst.copy_from_slice(pix);
                mask[point] = true;
            }
        }
    }
    Ok((features, mask))
}

/// Inverts a valid projection: (u, v, depth) back to the world point.
pub fn back_project(camera: &CameraModel, u: f64, v: f64, depth: f64) -> [f64; 3] {
    let x = (u - camera.cx) / camera.fx * depth;
    let y = (v - camera.cy) / camera.fy * depth;
    let q = Vector3::new(x, y, depth);
    let p = camera.rotation_matrix().transpose() * (q - camera.translation_vector());
    [p.x, p.y, p.z]
}

/// Identity-pose camera, handy for tests and synthetic setups.
pub fn identity_camera(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> CameraModel {
    CameraModel {
        fx,
        fy,
        cx,
        cy,
        width,
        height,
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: [0.0; 3],
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cloud_of(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, vec![[0.5; 3]; n], None).unwrap()
    }

    /// Random but valid camera: random rotation, translation pulling the
    /// scene in front of the lens.
    pub(crate) fn random_camera(rng: &mut impl Rng, width: u32, height: u32) -> CameraModel {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let m = r.matrix();
        CameraModel {
            fx: rng.gen_range(30.0..90.0),
            fy: rng.gen_range(30.0..90.0),
            cx: f64::from(width) / 2.0,
            cy: f64::from(height) / 2.0,
            width,
            height,
            rotation: [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ],
            translation: [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(2.0..4.0),
            ],
        }
    }

    /// Brute-force per-pixel minimum-depth scan.
    pub(crate) fn zbuffer_oracle(
        projections: &[PointProjection],
        camera: &CameraModel,
    ) -> VisibilityMap {
        let w = camera.width as usize;
        let h = camera.height as usize;
        let mut vis = VisibilityMap::unoccupied(w, h);
        for row in 0..h {
            for col in 0..w {
                let mut best: Option<(f64, usize)> = None;
                for p in projections {
                    if p.valid && p.pixel_row == row as i64 && p.pixel_col == col as i64 {
                        let candidate = (p.depth, p.point_index);
                        best = Some(match best {
                            None => candidate,
                            Some(b) if candidate < b => candidate,
                            Some(b) => b,
                        });
                    }
                }
                if let Some((d, i)) = best {
                    vis.winner[row * w + col] = Some(i);
                    vis.winner_depth[row * w + col] = d;
                }
            }
        }
        vis
    }

    #[test]
    fn identity_camera_projects_axis_point_to_origin() {
        let cam = identity_camera(1.0, 1.0, 0.0, 0.0, 4, 4);
        let projs = project_points(&cloud_of(vec![[0.0, 0.0, 2.0]]), &cam).unwrap();
        assert_eq!(projs.len(), 1);
        assert_eq!(projs[0].u, 0.0);
        assert_eq!(projs[0].v, 0.0);
        assert_eq!(projs[0].depth, 2.0);
        assert!(projs[0].valid);
    }

    #[test]
    fn point_behind_camera_is_invalid() {
        let cam = identity_camera(1.0, 1.0, 0.0, 0.0, 4, 4);
        let projs =
            project_points(&cloud_of(vec![[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]), &cam).unwrap();
        assert!(!projs[0].valid);
        assert!(!projs[1].valid);
    }

    #[test]
    fn bound_check_excludes_u_equal_to_width() {
        // u = 100*0.5/1 + 50 = 100, which is one past the last column.
        let cam = identity_camera(100.0, 100.0, 50.0, 50.0, 100, 100);
        let projs = project_points(&cloud_of(vec![[0.5, 0.0, 1.0]]), &cam).unwrap();
        assert!((projs[0].u - 100.0).abs() < 1e-12);
        assert!((projs[0].v - 50.0).abs() < 1e-12);
        assert!(!projs[0].valid);
    }

    #[test]
    fn rejects_empty_cloud_and_bad_camera() {
        let cam = identity_camera(1.0, 1.0, 0.0, 0.0, 4, 4);
        assert!(project_points(&cloud_of(vec![]), &cam).is_err());
        let mut bad = cam;
        bad.rotation[0][0] = 2.0;
        assert!(project_points(&cloud_of(vec![[0.0, 0.0, 1.0]]), &bad).is_err());
    }

    #[test]
    fn zbuffer_nearest_point_wins() {
        let cam = identity_camera(1.0, 1.0, 3.5, 3.5, 8, 8);
        // Both project to pixel (3, 3) at depths 2.0 and 1.0.
        let cloud = cloud_of(vec![[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]]);
        let projs = project_points(&cloud, &cam).unwrap();
        let vis = zbuffer_visibility(&projs, &cam);
        assert_eq!(vis.at(3, 3), Some(1));
        assert_eq!(vis.winner.iter().filter(|w| w.is_some()).count(), 1);
    }

    #[test]
    fn zbuffer_tie_breaks_to_lowest_index() {
        let cam = identity_camera(1.0, 1.0, 3.5, 3.5, 8, 8);
        let cloud = cloud_of(vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
        let projs = project_points(&cloud, &cam).unwrap();
        let vis = zbuffer_visibility(&projs, &cam);
        assert_eq!(vis.at(3, 3), Some(0));
    }

    #[test]
    fn zbuffer_empty_input_leaves_all_pixels_unoccupied() {
        let cam = identity_camera(1.0, 1.0, 0.0, 0.0, 4, 4);
        let vis = zbuffer_visibility(&[], &cam);
        assert!(vis.winner.iter().all(Option::is_none));
    }

    #[test]
    fn zbuffer_matches_brute_force_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let cam = random_camera(&mut rng, 16, 16);
            let points: Vec<[f64; 3]> = (0..500)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let projs = project_points(&cloud_of(points), &cam).unwrap();
            let fast = zbuffer_visibility(&projs, &cam);
            let slow = zbuffer_oracle(&projs, &cam);
            assert_eq!(fast.winner, slow.winner);
        }
    }

    #[test]
    fn projection_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = random_camera(&mut rng, 32, 32);
        let points: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let base = project_points(&cloud_of(points.clone()), &cam).unwrap();
        let mut perm: Vec<usize> = (0..points.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<[f64; 3]> = perm.iter().map(|&i| points[i]).collect();
        let permuted = project_points(&cloud_of(shuffled), &cam).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(permuted[slot].valid, base[src].valid);
            if base[src].valid {
                assert_eq!(permuted[slot].u, base[src].u);
                assert_eq!(permuted[slot].v, base[src].v);
                assert_eq!(permuted[slot].depth, base[src].depth);
            }
        }
    }

    #[test]
    fn back_projection_recovers_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..4 {
            let cam = random_camera(&mut rng, 64, 64);
            let points: Vec<[f64; 3]> = (0..200)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let cloud = cloud_of(points.clone());
            for p in project_points(&cloud, &cam).unwrap() {
                if !p.valid {
                    continue;
                }
                let recovered = back_project(&cam, p.u, p.v, p.depth);
                for a in 0..3 {
                    assert!(
                        (recovered[a] - points[p.point_index][a]).abs() < 1e-9,
                        "axis {a}: {} vs {}",
                        recovered[a],
                        points[p.point_index][a]
                    );
                }
            }
        }
    }

    #[test]
    fn lift_assigns_single_winner_feature() {
        let mut vis = VisibilityMap::unoccupied(4, 4);
        vis.winner[5] = Some(2);
        let mut img = FeatureImage::zeros(4, 4, 3);
        img.pixel_mut(1, 1).copy_from_slice(&[1.0, 2.0, 3.0]);
        img.set_valid(1, 1, true);
        let (features, mask) = lift_pixel_features(&vis, &img, 4).unwrap();
        assert_eq!(features.row(2), &[1.0, 2.0, 3.0]);
        assert!(mask[2]);
        assert!(!mask[0]);
        assert_eq!(features.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn lift_takes_elementwise_max_over_won_pixels() {
        let mut vis = VisibilityMap::unoccupied(2, 1);
        vis.winner[0] = Some(0);
        vis.winner[1] = Some(0);
        let mut img = FeatureImage::zeros(1, 2, 2);
        img.pixel_mut(0, 0).copy_from_slice(&[1.0, 0.0]);
        img.pixel_mut(0, 1).copy_from_slice(&[0.0, 2.0]);
        img.set_valid(0, 0, true);
        img.set_valid(0, 1, true);
        let (features, mask) = lift_pixel_features(&vis, &img, 1).unwrap();
        assert_eq!(features.row(0), &[1.0, 2.0]);
        assert!(mask[0]);
    }

    #[test]
    fn lift_rejects_dimension_mismatch() {
        let vis = VisibilityMap::unoccupied(4, 4);
        let img = FeatureImage::zeros(3, 4, 2);
        assert!(lift_pixel_features(&vis, &img, 1).is_err());
    }

    #[test]
    fn masked_points_won_at_least_one_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = random_camera(&mut rng, 16, 16);
        let points: Vec<[f64; 3]> = (0..300)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let cloud = cloud_of(points);
        let projs = project_points(&cloud, &cam).unwrap();
        let vis = zbuffer_visibility(&projs, &cam);
        let mut img = FeatureImage::zeros(16, 16, 2);
        for r in 0..16 {
            for c in 0..16 {
                img.set_valid(r, c, true);
                img.pixel_mut(r, c).copy_from_slice(&[r as f64, c as f64]);
            }
        }
        let (_, mask) = lift_pixel_features(&vis, &img, cloud.len()).unwrap();
        for (i, m) in mask.iter().enumerate() {
            if *m {
                assert!(vis.winner.iter().any(|w| *w == Some(i)));
            }
        }
    }
}
