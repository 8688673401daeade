//! Rigid transforms, pinhole projection and 2D barycentric coordinates.
//!
//! Image coordinates are continuous with the origin at the top-left corner of
//! the top-left pixel and `y` pointing down; pixel `(i, j)` samples the point
//! `(i + 0.5, j + 0.5)`.

use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::capture::{CameraCalibration, Headpose, TrackedMesh};
use crate::error::{Error, Result};

/// Minimum squared (doubled) area for a triangle to be usable.
pub const DEGENERATE_AREA2: f64 = 1e-20;

/// A vertex after projection to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenVertex {
    pub xy: [f64; 2],
    /// Camera-space `z` in millimeters.
    pub depth: f64,
}

impl ScreenVertex {
    /// `false` for points on or behind the camera plane; the rasterizer culls
    /// triangles touching such points.
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

pub fn apply_headpose(mesh: &TrackedMesh, pose: &Headpose) -> TrackedMesh {
    let (r, t) = (pose.rotation(), pose.translation());
    TrackedMesh::new(
        mesh.vertices
            .iter()
            .map(|v| {
                let w = r * Vector3::from(*v) + t;
                [w.x, w.y, w.z]
            })
            .collect(),
    )
}

/// World point → camera coordinates.
pub fn to_camera(cal: &CameraCalibration, point: &Vector3<f64>) -> Vector3<f64> {
    cal.rotation() * point + cal.translation()
}

/// Camera coordinates → pixel coordinates (no validity check).
pub fn camera_to_screen(cal: &CameraCalibration, p: &Vector3<f64>) -> ScreenVertex {
    let (x, y) = (p.x / p.z, p.y / p.z);
    ScreenVertex { xy: [cal.fx() * x + cal.skew() * y + cal.cx(), cal.fy() * y + cal.cy()], depth: p.z }
}

pub fn project(cal: &CameraCalibration, point: &Vector3<f64>) -> ScreenVertex {
    camera_to_screen(cal, &to_camera(cal, point))
}

pub fn project_mesh(cal: &CameraCalibration, mesh: &TrackedMesh) -> Vec<ScreenVertex> {
    mesh.vertices.iter().map(|v| project(cal, &Vector3::from(*v))).collect()
}

/// Inverse of [`project`] for a known camera-space depth.
pub fn unproject(cal: &CameraCalibration, xy: [f64; 2], depth: f64) -> Vector3<f64> {
    let y = (xy[1] - cal.cy()) / cal.fy();
    let x = (xy[0] - cal.cx() - cal.skew() * y) / cal.fx();
    let p_cam = Vector3::new(x * depth, y * depth, depth);
    cal.rotation().transpose() * (p_cam - cal.translation())
}

/// Twice the signed area of `(a, b, c)`; positive when the points run
/// clockwise on screen (y down).
#[inline]
pub fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Barycentric weights of `p` in `tri`; the last weight is `1 - w0 - w1` so
/// the weights sum to exactly one.
pub fn barycentric(tri: [[f64; 2]; 3], p: [f64; 2]) -> Result<[f64; 3]> {
    let area = edge(tri[0], tri[1], tri[2]);
    if !(area * area > DEGENERATE_AREA2) {
        return Err(Error::DegenerateTriangle(area * area));
    }
    let w0 = edge(tri[1], tri[2], p) / area;
    let w1 = edge(tri[2], tri[0], p) / area;
    Ok([w0, w1, 1.0 - w0 - w1])
}

/// Unit direction from the head origin towards the camera center, expressed in
/// the head-local frame.
pub fn view_direction(cal: &CameraCalibration, pose: &Headpose) -> [f64; 3] {
    let local = pose.rotation().transpose() * (cal.center() - pose.translation());
    let d = local.normalize();
    [d.x, d.y, d.z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Rotation3};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(fx: f64) -> CameraCalibration {
        CameraCalibration::new(
            "cam",
            Matrix3::new(fx, 0.5, 40.0, 0.0, 90.0, 30.0, 0.0, 0.0, 1.0),
            *Rotation3::from_euler_angles(0.1, -0.2, 0.3).matrix(),
            Vector3::new(3.0, -2.0, 400.0),
            (80, 60),
        )
        .unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Headpose {
        let r = Rotation3::from_euler_angles(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
        );
        let t =
            Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        Headpose::new(*r.matrix(), t).unwrap()
    }

    fn random_mesh(rng: &mut ChaCha8Rng, n: usize) -> TrackedMesh {
        TrackedMesh::new(
            (0..n)
                .map(|_| {
                    [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)]
                })
                .collect(),
        )
    }

    #[test]
    fn identity_pose_keeps_mesh() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mesh(&mut rng, 10);
        assert_eq!(apply_headpose(&m, &Headpose::identity()), m);
    }

    #[test]
    fn translation_shifts_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_mesh(&mut rng, 10);
        let pose = Headpose::new(Matrix3::identity(), Vector3::new(1.0, -2.0, 3.5)).unwrap();
        let out = apply_headpose(&m, &pose);
        for (a, b) in m.vertices.iter().zip(&out.vertices) {
            assert_eq!([a[0] + 1.0, a[1] - 2.0, a[2] + 3.5], *b);
        }
    }

    #[test]
    fn pose_then_inverse_restores_mesh_and_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_mesh(&mut rng, 30);
            let pose = random_pose(&mut rng);
            let world = apply_headpose(&m, &pose);
            let back = apply_headpose(&world, &pose.inverse());
            for (a, b) in m.vertices.iter().zip(&back.vertices) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-6);
                }
            }
            for i in 0..m.vertices.len() {
                for j in (i + 1)..m.vertices.len() {
                    let d0 = (Vector3::from(m.vertices[i]) - Vector3::from(m.vertices[j])).norm();
                    let d1 = (Vector3::from(world.vertices[i]) - Vector3::from(world.vertices[j])).norm();
                    assert!((d0 - d1).abs() <= 1e-6 * d0);
                }
            }
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cal = camera(120.0);
        let p = unproject(&cal, [cal.cx(), cal.cy()], 250.0);
        let s = project(&cal, &p);
        assert!((s.xy[0] - cal.cx()).abs() < 1e-9 && (s.xy[1] - cal.cy()).abs() < 1e-9);
        assert!((s.depth - 250.0).abs() < 1e-9);
    }

    #[test]
    fn doubling_fx_doubles_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flat = |fx: f64| {
            CameraCalibration::new(
                "cam",
                Matrix3::new(fx, 0.0, 40.0, 0.0, 90.0, 30.0, 0.0, 0.0, 1.0),
                Matrix3::identity(),
                Vector3::new(0.0, 0.0, 300.0),
                (80, 60),
            )
            .unwrap()
        };
        for _ in 0..50 {
            let p = Vector3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0);
            let a = project(&flat(100.0), &p);
            let b = project(&flat(200.0), &p);
            assert!(((b.xy[0] - 40.0) - 2.0 * (a.xy[0] - 40.0)).abs() < 1e-9);
            assert_eq!(a.xy[1], b.xy[1]);
        }
    }

    #[test]
    fn project_unproject_round_trip() {
        let cal = camera(110.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let p = unproject(
                &cal,
                [rng.random_range(-20.0..100.0), rng.random_range(-20.0..80.0)],
                rng.random_range(10.0..2000.0),
            );
            let s = project(&cal, &p);
            let back = unproject(&cal, s.xy, s.depth);
            assert!((back - p).norm() < 1e-6);
        }
    }

    #[test]
    fn intrinsic_overall_scale_changes_nothing_when_rows_scale_together() {
        // Scaling fx, skew and cx by s scales x-pixel coordinates by s exactly.
        let cal = camera(100.0);
        let mut k = *cal.intrinsics();
        for c in 0..3 {
            k[(0, c)] *= 3.0;
        }
        let scaled = CameraCalibration::new("cam", k, *cal.rotation(), *cal.translation(), (80, 60)).unwrap();
        let p = Vector3::new(10.0, 20.0, -5.0);
        let (a, b) = (project(&cal, &p), project(&scaled, &p));
        assert!((b.xy[0] - 3.0 * a.xy[0]).abs() < 1e-9);
        assert_eq!(a.xy[1], b.xy[1]);
    }

    #[test]
    fn behind_camera_is_flagged() {
        let cal = camera(100.0);
        let p = unproject(&cal, [10.0, 10.0], -5.0);
        assert!(!project(&cal, &p).in_front());
    }

    #[test]
    fn barycentric_cases() {
        let tri = [[0.0, 0.0], [4.0, 0.5], [1.0, 3.0]];
        assert_eq!(barycentric(tri, tri[0]).unwrap(), [1.0, 0.0, 0.0]);
        let c = [(0.0 + 4.0 + 1.0) / 3.0, (0.0 + 0.5 + 3.0) / 3.0];
        for w in barycentric(tri, c).unwrap() {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(matches!(
            barycentric([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], [0.0, 0.0]),
            Err(Error::DegenerateTriangle(_))
        ));
    }

    #[test]
    fn barycentric_reconstructs_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pt = || [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];
        for _ in 0..1000 {
            let tri = [pt(), pt(), pt()];
            let p = pt();
            let Ok(w) = barycentric(tri, p) else { continue };
            assert!((w[0] + w[1] + w[2] - 1.0).abs() < 1e-12);
            for k in 0..2 {
                let r = w[0] * tri[0][k] + w[1] * tri[1][k] + w[2] * tri[2][k];
                assert!((r - p[k]).abs() < 1e-9, "{r} vs {}", p[k]);
            }
            // away from the boundary the weight signs agree with the edge tests
            let area = edge(tri[0], tri[1], tri[2]);
            let signs =
                [edge(tri[1], tri[2], p) / area, edge(tri[2], tri[0], p) / area, edge(tri[0], tri[1], p) / area];
            if signs.iter().all(|s| s.abs() > 1e-9) {
                let inside = w.iter().all(|&x| x >= 0.0);
                assert_eq!(inside, signs.iter().all(|&s| s > 0.0));
            }
        }
    }
}
