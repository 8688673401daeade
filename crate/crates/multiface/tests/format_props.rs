use multiface::formats::{
    load_calibrations, load_mesh, parse_frame_list, parse_headpose, write_calibrations, write_frame_list,
    write_headpose, write_mesh,
};
use multiface_core::capture::{CameraCalibration, Headpose, MeshTopology, TrackedMesh};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use proptest::collection::{btree_set, vec};
use proptest::prelude::*;

/// A frame-list line as written by hand: arbitrary blank runs around the two
/// fields, followed by optional blank lines.
fn messy_file() -> impl Strategy<Value = (String, String)> {
    let records = btree_set(("[A-Za-z_][A-Za-z0-9_-]{0,12}", 0u32..100_000), 0..40);
    records
        .prop_flat_map(|recs| {
            let n = recs.len();
            let recs: Vec<_> = recs.into_iter().collect();
            (Just(recs), vec(("[ \t]{0,3}", "[ \t]{1,3}", "[ \t]{0,3}", 0usize..3), n))
        })
        .prop_map(|(recs, spacing)| {
            let mut messy = String::new();
            let mut canonical = String::new();
            for ((seg, idx), (lead, mid, trail, blanks)) in recs.iter().zip(spacing) {
                messy.push_str(&format!("{lead}{seg}{mid}{idx}{trail}\n"));
                for _ in 0..blanks {
                    messy.push_str(" \n");
                }
                canonical.push_str(&format!("{seg} {idx}\n"));
            }
            (messy, canonical)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn frame_list_serializes_to_canonical_form((messy, canonical) in messy_file()) {
        let recs = parse_frame_list(&messy).unwrap();
        prop_assert_eq!(write_frame_list(&recs), canonical.clone());
        prop_assert_eq!(parse_frame_list(&canonical).unwrap(), recs);
    }
}

fn mesh() -> impl Strategy<Value = (MeshTopology, TrackedMesh)> {
    (3usize..40)
        .prop_flat_map(|n| {
            (
                vec(prop::array::uniform3(-500.0f64..500.0), n),
                vec(
                    (prop::array::uniform3(0..n as u32), prop::array::uniform3(prop::array::uniform2(0.0f64..=1.0))),
                    1..60,
                ),
            )
        })
        .prop_map(|(verts, faces)| {
            let n = verts.len();
            let (tris, uvs) = faces.into_iter().unzip();
            (MeshTopology::new(tris, uvs, n).unwrap(), TrackedMesh::new(verts))
        })
}

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate quaternion", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|q| {
            *UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().matrix()
        })
}

fn camera(i: usize) -> impl Strategy<Value = CameraCalibration> {
    (
        rotation(),
        prop::array::uniform3(-2000.0f64..2000.0),
        10.0f64..5000.0,
        10.0f64..5000.0,
        -1.0f64..1.0,
        1u32..4096,
        1u32..4096,
    )
        .prop_map(move |(r, t, fx, fy, skew, w, h)| {
            let k = Matrix3::new(fx, skew, w as f64 / 2.0, 0.0, fy, h as f64 / 2.0, 0.0, 0.0, 1.0);
            CameraCalibration::new(format!("cam{i:03}"), k, r, Vector3::from(t), (w, h)).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn obj_round_trip((topo, m) in mesh()) {
        let (t2, m2) = load_mesh(&write_mesh(&topo, &m).unwrap()).unwrap();
        prop_assert_eq!(t2, topo);
        for (a, b) in m2.vertices.iter().zip(&m.vertices) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn krt_round_trip(cams in (1usize..8).prop_flat_map(|n| (0..n).map(camera).collect::<Vec<_>>())) {
        let back = load_calibrations(&write_calibrations(&cams)).unwrap();
        prop_assert_eq!(back.len(), cams.len());
        for (a, b) in back.iter().zip(&cams) {
            prop_assert_eq!(a.camera_id(), b.camera_id());
            prop_assert_eq!(a.image_size(), b.image_size());
            prop_assert!((a.intrinsics() - b.intrinsics()).abs().max() <= 1e-9);
            prop_assert!((a.rotation() - b.rotation()).abs().max() <= 1e-9);
            prop_assert!((a.translation() - b.translation()).abs().max() <= 1e-9);
        }
    }

    #[test]
    fn headpose_round_trip(r in rotation(), t in prop::array::uniform3(-1e3f64..1e3)) {
        let p = Headpose::new(r, Vector3::from(t)).unwrap();
        prop_assert_eq!(parse_headpose(&write_headpose(&p)).unwrap(), p);
    }
}
