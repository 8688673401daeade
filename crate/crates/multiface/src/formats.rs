//! Text formats of a capture directory: frame lists, OBJ meshes, KRT
//! calibrations and headposes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use multiface_core::capture::{CameraCalibration, FrameRecord, Headpose, MeshTopology, TrackedMesh};
use multiface_core::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// One `segment frame_index` record per non-empty line.
pub fn parse_frame_list(text: &str) -> Result<Vec<FrameRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [segment, index] = fields[..] else {
            return Err(parse_err(n + 1, format!("expected `segment frame_index`, got {} fields", fields.len())));
        };
        let index: u32 =
            index.parse().map_err(|_| parse_err(n + 1, format!("`{index}` is not a non-negative integer")))?;
        let rec = FrameRecord::new(segment, index);
        if !seen.insert(rec.clone()) {
            return Err(Error::Duplicate(format!("frame {segment} {index} (line {})", n + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_frame_list(records: &[FrameRecord]) -> String {
    records.iter().fold(String::new(), |mut s, r| {
        let _ = writeln!(s, "{} {}", r.segment, r.frame_index);
        s
    })
}

fn floats<const N: usize>(fields: &[&str], line: usize) -> Result<[f64; N]> {
    if fields.len() < N {
        return Err(parse_err(line, format!("expected {N} numbers, got {}", fields.len())));
    }
    let mut out = [0.0f64; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f.parse().map_err(|_| parse_err(line, format!("`{f}` is not a number")))?;
        if !o.is_finite() {
            return Err(parse_err(line, format!("`{f}` is not finite")));
        }
    }
    Ok(out)
}

fn obj_index(field: &str, count: usize, what: &str, line: usize) -> Result<u32> {
    let i: usize = field.parse().map_err(|_| parse_err(line, format!("bad {what} index `{field}`")))?;
    if i == 0 || i > count {
        return Err(Error::Structure(format!("line {line}: {what} index {i} out of range 1..={count}")));
    }
    Ok((i - 1) as u32)
}

/// Reads `v`, `vt` and triangular `f v/vt[/vn]` records; other records are
/// ignored. Faces may only reference earlier `v` and `vt` lines.
pub fn load_mesh(text: &str) -> Result<(MeshTopology, TrackedMesh)> {
    let (mut verts, mut uvs) = (Vec::new(), Vec::new());
    let (mut tris, mut tri_uv) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let n = n + 1;
        let mut it = line.split_whitespace();
        let Some(tag) = it.next() else { continue };
        let rest: Vec<&str> = it.collect();
        match tag {
            "v" => verts.push(floats::<3>(&rest, n)?),
            "vt" => uvs.push(floats::<2>(&rest, n)?),
            "f" => {
                if rest.len() != 3 {
                    return Err(Error::UnsupportedFace(rest.len()));
                }
                let mut tri = [0u32; 3];
                let mut uv = [[0.0; 2]; 3];
                for (k, corner) in rest.iter().enumerate() {
                    let mut parts = corner.split('/');
                    let v = parts.next().unwrap_or_default();
                    let t = parts
                        .next()
                        .filter(|t| !t.is_empty())
                        .ok_or_else(|| Error::Structure(format!("line {n}: face corner `{corner}` has no UV index")))?;
                    tri[k] = obj_index(v, verts.len(), "vertex", n)?;
                    uv[k] = uvs[obj_index(t, uvs.len(), "UV", n)? as usize];
                }
                tris.push(tri);
                tri_uv.push(uv);
            }
            _ => {}
        }
    }
    if verts.len() < 3 || tris.is_empty() {
        return Err(Error::Structure(format!("mesh has {} vertices and {} faces", verts.len(), tris.len())));
    }
    let topology = MeshTopology::new(tris, tri_uv, verts.len())?;
    Ok((topology, TrackedMesh::new(verts)))
}

/// Writes vertices with shortest round-trip formatting and one `vt` per
/// distinct UV.
pub fn write_mesh(topology: &MeshTopology, mesh: &TrackedMesh) -> Result<String> {
    mesh.check_topology(topology)?;
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
    }
    let mut uv_index: BTreeMap<[u64; 2], usize> = BTreeMap::new();
    let mut corners = Vec::with_capacity(topology.triangle_count());
    for uvs in topology.uv_per_corner() {
        let ids = uvs.map(|uv| {
            let next = uv_index.len() + 1;
            *uv_index.entry([uv[0].to_bits(), uv[1].to_bits()]).or_insert_with(|| {
                let _ = writeln!(s, "vt {} {}", uv[0], uv[1]);
                next
            })
        });
        corners.push(ids);
    }
    for (tri, uv) in topology.triangles().iter().zip(&corners) {
        let _ = writeln!(s, "f {}/{} {}/{} {}/{}", tri[0] + 1, uv[0], tri[1] + 1, uv[1], tri[2] + 1, uv[2]);
    }
    Ok(s)
}

/// Labeled blocks:
///
/// ```text
/// camera <id>
/// intrinsics
/// fx skew cx
/// 0 fy cy
/// 0 0 1
/// extrinsics
/// r00 r01 r02 t0
/// r10 r11 r12 t1
/// r20 r21 r22 t2
/// image_size <width> <height>
/// ```
pub fn load_calibrations(text: &str) -> Result<Vec<CameraCalibration>> {
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, f)| !f.is_empty() && !f[0].starts_with('#'))
        .collect();
    let mut out: Vec<CameraCalibration> = Vec::new();
    let mut ids = BTreeSet::new();
    let mut pos = 0;
    let expect = |pos: usize, label: &str, arity: usize| -> Result<&[&str]> {
        let Some((n, f)) = lines.get(pos) else {
            return Err(parse_err(lines.last().map_or(0, |l| l.0), format!("missing `{label}`")));
        };
        if f[0] != label || f.len() != arity + 1 {
            return Err(parse_err(*n, format!("expected `{label}` with {arity} values")));
        }
        Ok(&f[1..])
    };
    let row = |pos: usize, width: usize| -> Result<Vec<f64>> {
        let Some((n, f)) = lines.get(pos) else {
            return Err(parse_err(lines.last().map_or(0, |l| l.0), "truncated matrix"));
        };
        if f.len() != width {
            return Err(parse_err(*n, format!("expected {width} numbers, got {}", f.len())));
        }
        Ok(match width {
            3 => floats::<3>(f, *n)?.to_vec(),
            _ => floats::<4>(f, *n)?.to_vec(),
        })
    };
    while pos < lines.len() {
        let id = expect(pos, "camera", 1)?[0].to_string();
        let line = lines[pos].0;
        expect(pos + 1, "intrinsics", 0)?;
        let k: Vec<Vec<f64>> = (0..3).map(|r| row(pos + 2 + r, 3)).collect::<Result<_>>()?;
        expect(pos + 5, "extrinsics", 0)?;
        let rt: Vec<Vec<f64>> = (0..3).map(|r| row(pos + 6 + r, 4)).collect::<Result<_>>()?;
        let size = expect(pos + 9, "image_size", 2)?;
        let dim = |s: &str| s.parse::<u32>().map_err(|_| parse_err(lines[pos + 9].0, format!("bad image size `{s}`")));
        let image_size = (dim(size[0])?, dim(size[1])?);
        if !ids.insert(id.clone()) {
            return Err(Error::Duplicate(format!("camera `{id}` (line {line})")));
        }
        let intrinsics = Matrix3::from_fn(|r, c| k[r][c]);
        let rotation = Matrix3::from_fn(|r, c| rt[r][c]);
        let translation = Vector3::new(rt[0][3], rt[1][3], rt[2][3]);
        out.push(CameraCalibration::new(id, intrinsics, rotation, translation, image_size)?);
        pos += 10;
    }
    Ok(out)
}

pub fn write_calibrations(cameras: &[CameraCalibration]) -> String {
    let mut s = String::new();
    for (i, c) in cameras.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        let (k, r, t) = (c.intrinsics(), c.rotation(), c.translation());
        let _ = writeln!(s, "camera {}\nintrinsics", c.camera_id());
        for row in 0..3 {
            let _ = writeln!(s, "{} {} {}", k[(row, 0)], k[(row, 1)], k[(row, 2)]);
        }
        s.push_str("extrinsics\n");
        for row in 0..3 {
            let _ = writeln!(s, "{} {} {} {}", r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]);
        }
        let (w, h) = c.image_size();
        let _ = writeln!(s, "image_size {w} {h}");
    }
    s
}

/// Twelve whitespace-separated numbers, the row-major 3x4 `[R | t]`.
pub fn parse_headpose(text: &str) -> Result<Headpose> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 12 {
        return Err(parse_err(1, format!("headpose needs 12 numbers, got {}", fields.len())));
    }
    Headpose::from_rows(&floats::<12>(&fields, 1)?)
}

pub fn write_headpose(pose: &Headpose) -> String {
    let m = pose.to_rows();
    let mut s = String::new();
    for r in 0..3 {
        let _ = writeln!(s, "{} {} {} {}", m[4 * r], m[4 * r + 1], m[4 * r + 2], m[4 * r + 3]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_lists() {
        assert!(parse_frame_list("").unwrap().is_empty());
        let r = parse_frame_list("EXP_neutral 0\nEXP_smile 31").unwrap();
        assert_eq!(r, vec![FrameRecord::new("EXP_neutral", 0), FrameRecord::new("EXP_smile", 31)]);
        assert_eq!(parse_frame_list("a 1\n\nb x"), Err(parse_err(3, "`x` is not a non-negative integer")));
        assert!(matches!(parse_frame_list("a 1 2"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_frame_list("a -1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_frame_list("a 1\na 1"), Err(Error::Duplicate(_))));
    }

    #[test]
    fn minimal_obj() {
        let (topo, mesh) = load_mesh("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n").unwrap();
        assert_eq!((topo.vertex_count(), topo.triangle_count()), (3, 1));
        assert_eq!(mesh.vertices[1], [1.0, 0.0, 0.0]);
        assert_eq!(topo.uv_per_corner()[0], [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(topo.triangles()[0], [0, 1, 2]);
    }

    #[test]
    fn bad_obj_faces() {
        let head = "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nvt 0 0\n";
        assert_eq!(load_mesh(&format!("{head}f 1/1 2/1 3/1 4/1\n")).unwrap_err(), Error::UnsupportedFace(4));
        assert!(matches!(load_mesh(&format!("{head}f 1/1 2/1 9/1\n")), Err(Error::Structure(_))));
        assert!(matches!(load_mesh(&format!("{head}f 1/1 2/2 3/1\n")), Err(Error::Structure(_))));
        assert!(matches!(load_mesh(&format!("{head}f 1 2 3\n")), Err(Error::Structure(_))));
        assert!(matches!(load_mesh("vt 2 0\n"), Err(Error::Structure(_))));
    }

    #[test]
    fn identity_krt_block() {
        let text =
            "camera c0\nintrinsics\n1 0 0\n0 1 0\n0 0 1\nextrinsics\n1 0 0 0\n0 1 0 0\n0 0 1 0\nimage_size 4 3\n";
        let cams = load_calibrations(text).unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!((cams[0].fx(), cams[0].fy()), (1.0, 1.0));
        assert_eq!(*cams[0].translation(), Vector3::zeros());
        assert_eq!(load_calibrations(&write_calibrations(&cams)).unwrap(), cams);

        let scaled = text.replace("1 0 0 0\n0 1 0 0\n0 0 1 0", "2 0 0 0\n0 2 0 0\n0 0 2 0");
        assert!(matches!(load_calibrations(&scaled), Err(Error::Validation { .. })));
        let twice = format!("{text}\n{text}");
        assert!(matches!(load_calibrations(&twice), Err(Error::Duplicate(_))));
        assert!(matches!(load_calibrations(&text.replace("image_size 4 3\n", "")), Err(Error::Parse { .. })));
    }

    #[test]
    fn headpose_text() {
        let p = parse_headpose("1 0 0 5\n0 1 0 6\n0 0 1 7\n").unwrap();
        assert_eq!(*p.translation(), Vector3::new(5.0, 6.0, 7.0));
        assert_eq!(parse_headpose(&write_headpose(&p)).unwrap(), p);
        assert!(matches!(parse_headpose("1 0 0 5"), Err(Error::Parse { .. })));
        assert!(matches!(parse_headpose("2 0 0 0 0 1 0 0 0 0 1 0"), Err(Error::Validation { .. })));
    }
}
