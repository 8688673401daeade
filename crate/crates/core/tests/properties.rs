use multiface_core::autodiff::{kl_divergence, Tape, Tensor};
use multiface_core::capture::{compute_stats, CameraCalibration, Headpose, MeshTopology, Rgb, Texture, TrackedMesh};
use multiface_core::geometry::{apply_headpose, barycentric, DEGENERATE_AREA2};
use multiface_core::model::{fit_channel_affine, ChannelAffine, ColorCorrection};
use multiface_core::protocol::make_splits;
use multiface_core::raster::{rasterize, rasterize_backward};
use multiface_core::texture::{average_texture, integrate_warp, sample_warp, TextureMask, WarpField};
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use proptest::collection::vec;
use proptest::prelude::*;

fn rgb() -> impl Strategy<Value = Rgb> {
    prop::array::uniform3(0.0f64..1.0)
}

fn texture(res: usize) -> impl Strategy<Value = Texture> {
    vec(rgb(), res * res).prop_map(move |t| Texture::from_texels(res, t).unwrap())
}

fn rotation() -> impl Strategy<Value = Matrix3<f64>> {
    prop::array::uniform4(-1.0f64..1.0)
        .prop_filter("non-degenerate quaternion", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        .prop_map(|q| {
            *UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().matrix()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn stats_match_naive_two_pass(
        (texs, meshes) in (1usize..6, 1usize..5, 1usize..9).prop_flat_map(|(count, res, nv)| (
            vec(texture(res), count),
            vec(vec(prop::array::uniform3(-300.0f64..300.0), nv).prop_map(TrackedMesh::new), count),
        ))
    ) {
        let stats = compute_stats(&texs, &meshes).unwrap();
        let n = texs.len() as f64;
        let res = texs[0].resolution();
        for i in 0..res * res {
            for c in 0..3 {
                let mean = texs.iter().map(|t| t.texels()[i][c]).sum::<f64>() / n;
                let var = texs.iter().map(|t| (t.texels()[i][c] - mean).powi(2)).sum::<f64>() / n;
                prop_assert!((stats.texture_mean.texels()[i][c] - mean).abs() <= 1e-12);
                prop_assert!((stats.texture_variance.texels()[i][c] - var).abs() <= 1e-12);
            }
        }
        for v in 0..meshes[0].vertex_count() {
            for c in 0..3 {
                let mean = meshes.iter().map(|m| m.vertices[v][c]).sum::<f64>() / n;
                let var = meshes.iter().map(|m| (m.vertices[v][c] - mean).powi(2)).sum::<f64>() / n;
                prop_assert!((stats.vertex_mean.vertices[v][c] - mean).abs() <= 1e-9);
                prop_assert!((stats.vertex_variance.vertices[v][c] - var).abs() <= 1e-7 * var.max(1.0));
            }
        }
    }

    #[test]
    fn barycentric_weights_sum_to_one(tri in prop::array::uniform3(prop::array::uniform2(-100.0f64..100.0)),
                                      p in prop::array::uniform2(-200.0f64..200.0)) {
        let e = (tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1]) - (tri[1][1] - tri[0][1]) * (tri[2][0] - tri[0][0]);
        prop_assume!(e * e > DEGENERATE_AREA2);
        let w = barycentric(tri, p).unwrap();
        prop_assert_eq!(w[2], 1.0 - w[0] - w[1]);
        prop_assert!((w[0] + w[1] + w[2] - 1.0).abs() <= 4.0 * f64::EPSILON * (1.0 + w.iter().map(|x| x.abs()).sum::<f64>()));
    }

    #[test]
    fn headpose_preserves_distances(r in rotation(), t in prop::array::uniform3(-500.0f64..500.0),
                                    verts in vec(prop::array::uniform3(-200.0f64..200.0), 2..20)) {
        let mesh = TrackedMesh::new(verts);
        let posed = apply_headpose(&mesh, &Headpose::new(r, Vector3::from(t)).unwrap());
        let d = |m: &TrackedMesh, i: usize, j: usize| (Vector3::from(m.vertices[i]) - Vector3::from(m.vertices[j])).norm();
        for i in 0..mesh.vertex_count() {
            for j in i + 1..mesh.vertex_count() {
                let (a, b) = (d(&mesh, i, j), d(&posed, i, j));
                prop_assert!((a - b).abs() <= 1e-6 * a.max(1e-9));
            }
        }
    }

    #[test]
    fn warp_is_monotone_for_any_increments(
        inc in (2usize..12).prop_flat_map(|n| vec((-1.0f64..1.0, -3i32..300), 2 * n * n))
    ) {
        let n = ((inc.len() / 2) as f64).sqrt() as usize;
        let raw: Vec<f64> = inc.iter().map(|(m, e)| m * 10f64.powi(*e)).collect();
        let w = integrate_warp(&raw, n).unwrap();
        prop_assert_eq!(w.field.violations(), 0);
        prop_assert!(w.backward(&vec![1.0; raw.len()]).iter().all(|g| g.is_finite()));
    }

    #[test]
    fn identity_warp_reproduces_texture(n in 1usize..9, channels in 1usize..5, seed in any::<u64>()) {
        let data: Vec<f64> = (0..channels * n * n).map(|i| ((seed ^ i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11) as f64).collect();
        prop_assert_eq!(sample_warp(&data, channels, &WarpField::identity(n)), data);
    }

    #[test]
    fn average_texture_ignores_view_order(
        (views, fallback, order) in (1usize..5, 1usize..6).prop_flat_map(|(res, count)| (
            vec((texture(res), vec(prop_oneof![Just(0.0), Just(1.0), 0.0f64..1.0], res * res)), count),
            texture(res),
            Just((0..count).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let res = fallback.resolution();
        let views: Vec<(Texture, TextureMask)> =
            views.into_iter().map(|(t, m)| (t, TextureMask::from_weights(res, m).unwrap())).collect();
        let shuffled: Vec<_> = order.iter().map(|&i| views[i].clone()).collect();
        prop_assert_eq!(average_texture(&views, &fallback).unwrap(), average_texture(&shuffled, &fallback).unwrap());
    }

    #[test]
    fn kl_is_non_negative(ms in vec((-5.0f64..5.0, -3.0f64..3.0), 1..32)) {
        let (m, s): (Vec<f64>, Vec<f64>) = ms.into_iter().unzip();
        prop_assert!(kl_divergence(&m, &s) >= 0.0);
    }

    #[test]
    fn conv_shape_inference_is_total(
        input in prop::array::uniform3(0usize..7),
        weight in prop::array::uniform4(0usize..5),
        stride in 0usize..4,
        pad in 0usize..3,
    ) {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&input));
        let w = tape.input(Tensor::zeros(&weight));
        let [c, h, wd] = input;
        let [o, wc, k, k2] = weight;
        let tiles = |n: usize| n + 2 * pad >= k && stride > 0 && (n + 2 * pad - k).is_multiple_of(stride);
        match tape.conv2d(x, w, None, stride, pad) {
            Ok(y) => {
                prop_assert!(c == wc && k == k2 && stride > 0 && o > 0);
                prop_assert!(tiles(h) && tiles(wd));
                let out = |n: usize| (n + 2 * pad - k) / stride + 1;
                prop_assert_eq!(tape.value(y).shape(), &[o, out(h), out(wd)][..]);
            }
            Err(_) => {
                let valid = c > 0 && c == wc && k == k2 && k > 0 && o > 0 && stride > 0 && h > 0 && wd > 0
                    && tiles(h) && tiles(wd);
                prop_assert!(!valid, "valid shapes rejected: {:?} {:?} s{} p{}", input, weight, stride, pad);
            }
        }
    }

    #[test]
    fn affine_fit_recovers_planted_transform(
        src in vec(rgb(), 8..64),
        gain in prop::array::uniform3(0.5f64..1.5),
        bias in prop::array::uniform3(-0.2f64..0.2),
        weights in vec(0.1f64..2.0, 64),
    ) {
        let planted = ChannelAffine { gain, bias };
        let target: Vec<Rgb> = src.iter().map(|&s| planted.apply(s)).collect();
        let got = fit_channel_affine(&src, &target, &weights[..src.len()]);
        for c in 0..3 {
            prop_assert!((got.gain[c] - gain[c]).abs() < 1e-6);
            prop_assert!((got.bias[c] - bias[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn anchor_correction_never_changes(gain in prop::array::uniform3(0.0f64..2.0), bias in prop::array::uniform3(-1.0f64..1.0)) {
        let mut cc = ColorCorrection::new("a", ["a", "b"]).unwrap();
        let before = cc.get("a").unwrap();
        cc.set("a", ChannelAffine { gain, bias }).unwrap();
        cc.set("b", ChannelAffine { gain, bias }).unwrap();
        prop_assert_eq!(cc.get("a").unwrap(), before);
        prop_assert_eq!(cc.get("b").unwrap(), ChannelAffine { gain, bias });
    }

    #[test]
    fn texture_gradient_mass_is_conserved(
        angles in prop::array::uniform3(-0.6f64..0.6),
        up in vec(prop::array::uniform3(0.0f64..1.0), 24 * 18),
        tex in texture(8),
    ) {
        let cal = CameraCalibration::new(
            "c",
            Matrix3::new(40.0, 0.0, 12.0, 0.0, 40.0, 9.0, 0.0, 0.0, 1.0),
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, 100.0),
            (24, 18),
        ).unwrap();
        let rot = nalgebra::Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
        let corners = [[-25.0, -25.0, 0.0], [25.0, -25.0, 0.0], [25.0, 25.0, 0.0], [-25.0, 25.0, 0.0]];
        let mesh = TrackedMesh::new(corners.iter().map(|c| (rot * Vector3::from(*c)).into()).collect());
        let topo = MeshTopology::new(
            vec![[0, 2, 1], [0, 3, 2], [0, 1, 2], [0, 2, 3]],
            vec![[[0.0, 0.0], [1.0, 1.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
                 [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0]]],
            4,
        ).unwrap();
        let out = rasterize(&cal, &mesh, &topo, &tex);
        let g = rasterize_backward(&out, &cal, &topo, &tex, &up).unwrap();
        for c in 0..3 {
            let scattered: f64 = g.texture.iter().map(|t| t[c].abs()).sum();
            let routed: f64 = up.iter().enumerate().filter(|(i, _)| out.fragments.covered(*i)).map(|(_, u)| u[c]).sum();
            prop_assert!((scattered - routed).abs() < 1e-9);
        }
        prop_assert_eq!(&rasterize(&cal, &mesh, &topo, &tex), &out);
    }

    #[test]
    fn splits_are_nested_and_disjoint(n in 3usize..30, seed in any::<u64>(), angles in vec((0.0f64..1.2, 0.0f64..core::f64::consts::TAU), 30)) {
        let rig: Vec<CameraCalibration> = angles[..n].iter().enumerate().map(|(i, (polar, az))| {
            let center = Vector3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), -polar.cos()) * 1000.0;
            CameraCalibration::look_at(format!("{i:02}"), (100.0, 100.0), (32, 32), center, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.3)).unwrap()
        }).collect();
        let sizes: Vec<usize> = (1..n).step_by((n / 4).max(1)).collect();
        let splits = make_splits(&rig, &sizes, seed).unwrap();
        for (i, s) in splits.iter().enumerate() {
            s.check().unwrap();
            prop_assert_eq!(s.train_ids.len(), sizes[i]);
            prop_assert_eq!(s.train_ids.len() + s.test_ids.len(), n);
            prop_assert!(s.train_ids.iter().all(|t| !s.test_ids.contains(t)));
            if i > 0 {
                prop_assert_eq!(&s.train_ids[..sizes[i - 1]], &splits[i - 1].train_ids[..]);
            }
        }
    }
}
