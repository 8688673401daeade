//! Capture directories on disk.
//!
//! ```text
//! manifest.json            optional, overrides the paths below
//! frame_list.txt
//! KRT
//! images/<camera>/<segment>/<frame>.png
//! meshes/<segment>/<frame>.obj
//! headposes/<segment>/<frame>.txt
//! stats/{tex_mean,tex_var,vert_mean,vert_var}
//! truth.json               synthetic captures only
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use multiface_core::capture::{Capture, CaptureFrame, DatasetStats, FrameRecord, Rgb8Image, Texture, TrackedMesh};
use multiface_core::synth::SynthTruth;
use serde::{Deserialize, Serialize};

use crate::formats;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: multiface_core::error::Error },
    #[error(transparent)]
    Core(#[from] multiface_core::error::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path) -> impl FnOnce(multiface_core::error::Error) -> StoreError + '_ {
    move |source| StoreError::Format { path: path.to_path_buf(), source }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
    f.write_all(bytes).map_err(io(&tmp))?;
    f.sync_all().map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|source| StoreError::Json { path: path.to_path_buf(), source })?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|source| StoreError::Json { path: path.to_path_buf(), source })
}

/// Relative paths inside a capture directory. Templates substitute
/// `{camera}`, `{segment}` and `{frame}`, the latter zero-padded to
/// `frame_digits`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Manifest {
    pub frame_list: String,
    pub calibration: String,
    pub images: String,
    pub meshes: String,
    pub headposes: String,
    pub stats_dir: String,
    pub truth: String,
    pub frame_digits: usize,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            frame_list: "frame_list.txt".into(),
            calibration: "KRT".into(),
            images: "images/{camera}/{segment}/{frame}.png".into(),
            meshes: "meshes/{segment}/{frame}.obj".into(),
            headposes: "headposes/{segment}/{frame}.txt".into(),
            stats_dir: "stats".into(),
            truth: "truth.json".into(),
            frame_digits: 6,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    fn fill(&self, template: &str, camera: &str, rec: &FrameRecord) -> String {
        template
            .replace("{camera}", camera)
            .replace("{segment}", &rec.segment)
            .replace("{frame}", &format!("{:0w$}", rec.frame_index, w = self.frame_digits))
    }

    pub fn image(&self, root: &Path, camera: &str, rec: &FrameRecord) -> PathBuf {
        root.join(self.fill(&self.images, camera, rec))
    }

    pub fn mesh(&self, root: &Path, rec: &FrameRecord) -> PathBuf {
        root.join(self.fill(&self.meshes, "", rec))
    }

    pub fn headpose(&self, root: &Path, rec: &FrameRecord) -> PathBuf {
        root.join(self.fill(&self.headposes, "", rec))
    }

    /// The manifest in `root`, or the default layout when there is none.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if path.exists() {
            read_json(&path)
        } else {
            Ok(Self::default())
        }
    }
}

const STATS_MAGIC: &[u8; 4] = b"MFST";

/// `MFST`, element count as u64, then that many `[f64; 3]` little-endian.
fn encode_triples(values: &[[f64; 3]]) -> Vec<u8> {
    let mut b = Vec::with_capacity(12 + values.len() * 24);
    b.extend_from_slice(STATS_MAGIC);
    b.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values.iter().flatten() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn decode_triples(path: &Path, b: &[u8]) -> Result<Vec<[f64; 3]>> {
    let bad = |m: &str| format_err(path)(multiface_core::error::Error::Structure(format!("statistics file: {m}")));
    if b.len() < 12 || &b[..4] != STATS_MAGIC {
        return Err(bad("missing MFST header"));
    }
    let n = u64::from_le_bytes(b[4..12].try_into().unwrap()) as usize;
    if b.len() != 12 + n * 24 {
        return Err(bad("length does not match element count"));
    }
    Ok(b[12..]
        .chunks_exact(24)
        .map(|c| [0, 1, 2].map(|k| f64::from_le_bytes(c[8 * k..8 * k + 8].try_into().unwrap())))
        .collect())
}

fn texture_side(path: &Path, n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(format_err(path)(multiface_core::error::Error::Structure(format!(
            "{n} texels do not form a square texture"
        ))));
    }
    Ok(side)
}

pub fn write_stats(dir: &Path, stats: &DatasetStats) -> Result<()> {
    write_atomic(&dir.join("tex_mean"), &encode_triples(stats.texture_mean.texels()))?;
    write_atomic(&dir.join("tex_var"), &encode_triples(stats.texture_variance.texels()))?;
    write_atomic(&dir.join("vert_mean"), &encode_triples(&stats.vertex_mean.vertices))?;
    write_atomic(&dir.join("vert_var"), &encode_triples(&stats.vertex_variance.vertices))
}

pub fn read_stats(dir: &Path) -> Result<DatasetStats> {
    let load = |name: &str| -> Result<(PathBuf, Vec<[f64; 3]>)> {
        let p = dir.join(name);
        let b = fs::read(&p).map_err(io(&p))?;
        let v = decode_triples(&p, &b)?;
        Ok((p, v))
    };
    let texture = |name: &str| -> Result<Texture> {
        let (p, v) = load(name)?;
        let side = texture_side(&p, v.len())?;
        Texture::from_texels(side, v).map_err(format_err(&p))
    };
    let stats = DatasetStats {
        texture_mean: texture("tex_mean")?,
        texture_variance: texture("tex_var")?,
        vertex_mean: TrackedMesh::new(load("vert_mean")?.1),
        vertex_variance: TrackedMesh::new(load("vert_var")?.1),
    };
    stats.validate().map_err(format_err(dir))?;
    Ok(stats)
}

pub fn write_png(path: &Path, img: &Rgb8Image) -> Result<()> {
    let raw: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("pixel buffer matches its dimensions");
    let mut bytes = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|source| StoreError::Image { path: path.to_path_buf(), source })?;
    write_atomic(path, &bytes.into_inner())
}

pub fn read_png(path: &Path) -> Result<Rgb8Image> {
    let img = image::open(path).map_err(|source| StoreError::Image { path: path.to_path_buf(), source })?.to_rgb8();
    Ok(Rgb8Image {
        width: img.width() as usize,
        height: img.height() as usize,
        pixels: img.pixels().map(|p| p.0).collect(),
    })
}

/// Writes every file of `capture` under `root` with the default layout.
pub fn write_capture(root: &Path, capture: &Capture, truth: Option<&SynthTruth>) -> Result<()> {
    capture.validate()?;
    let m = Manifest::default();
    write_json(&root.join(MANIFEST_FILE), &m)?;
    let records: Vec<FrameRecord> = capture.frames.iter().map(|f| f.record.clone()).collect();
    write_atomic(&root.join(&m.frame_list), formats::write_frame_list(&records).as_bytes())?;
    write_atomic(&root.join(&m.calibration), formats::write_calibrations(&capture.cameras).as_bytes())?;
    for f in &capture.frames {
        let obj = formats::write_mesh(&capture.topology, &f.mesh)?;
        write_atomic(&m.mesh(root, &f.record), obj.as_bytes())?;
        write_atomic(&m.headpose(root, &f.record), formats::write_headpose(&f.headpose).as_bytes())?;
        for (cam, img) in capture.cameras.iter().zip(&f.images) {
            write_png(&m.image(root, cam.camera_id(), &f.record), img)?;
        }
    }
    write_stats(&root.join(&m.stats_dir), &capture.stats)?;
    if let Some(t) = truth {
        write_json(&root.join(&m.truth), t)?;
    }
    Ok(())
}

/// Loads and validates a capture directory.
pub fn read_capture(root: &Path) -> Result<Capture> {
    let m = Manifest::load(root)?;
    let list_path = root.join(&m.frame_list);
    let records = formats::parse_frame_list(&read_text(&list_path)?).map_err(format_err(&list_path))?;
    let krt = root.join(&m.calibration);
    let cameras = formats::load_calibrations(&read_text(&krt)?).map_err(format_err(&krt))?;
    let mut topology = None;
    let mut frames = Vec::with_capacity(records.len());
    for rec in records {
        let mp = m.mesh(root, &rec);
        let (topo, mesh) = formats::load_mesh(&read_text(&mp)?).map_err(format_err(&mp))?;
        match &topology {
            None => topology = Some(topo),
            Some(t) if *t != topo => {
                return Err(format_err(&mp)(multiface_core::error::Error::Structure(
                    "topology differs from the first frame's".into(),
                )))
            }
            Some(_) => {}
        }
        let hp = m.headpose(root, &rec);
        let headpose = formats::parse_headpose(&read_text(&hp)?).map_err(format_err(&hp))?;
        let images = cameras.iter().map(|c| read_png(&m.image(root, c.camera_id(), &rec))).collect::<Result<_>>()?;
        frames.push(CaptureFrame { record: rec, mesh, headpose, images });
    }
    let topology = topology.ok_or(multiface_core::error::Error::EmptyInput("frame list"))?;
    let capture = Capture { topology, cameras, frames, stats: read_stats(&root.join(&m.stats_dir))? };
    capture.validate()?;
    Ok(capture)
}

pub fn read_truth(root: &Path) -> Result<SynthTruth> {
    read_json(&root.join(Manifest::load(root)?.truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use multiface_core::synth::{generate_capture, SynthConfig};

    #[test]
    fn synthetic_capture_is_a_fixed_point() {
        let s = generate_capture(&SynthConfig::micro(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_capture(dir.path(), &s.capture, Some(&s.truth)).unwrap();
        let back = read_capture(dir.path()).unwrap();
        assert_eq!(back, s.capture);
        assert_eq!(read_truth(dir.path()).unwrap(), s.truth);
        let again = tempfile::tempdir().unwrap();
        write_capture(again.path(), &back, None).unwrap();
        assert_eq!(read_capture(again.path()).unwrap(), s.capture);
    }

    #[test]
    fn missing_image_is_an_io_error() {
        let s = generate_capture(&SynthConfig::micro(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_capture(dir.path(), &s.capture, None).unwrap();
        let m = Manifest::default();
        fs::remove_file(m.image(dir.path(), s.capture.cameras[1].camera_id(), &s.capture.frames[0].record)).unwrap();
        assert!(matches!(read_capture(dir.path()), Err(StoreError::Image { .. })));
    }

    #[test]
    fn custom_manifest_paths() {
        let s = generate_capture(&SynthConfig::micro(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_capture(dir.path(), &s.capture, None).unwrap();
        let m = Manifest { calibration: "calib/krt.txt".into(), ..Manifest::default() };
        fs::create_dir_all(dir.path().join("calib")).unwrap();
        fs::rename(dir.path().join("KRT"), dir.path().join(&m.calibration)).unwrap();
        assert!(read_capture(dir.path()).is_err());
        write_json(&dir.path().join(MANIFEST_FILE), &m).unwrap();
        assert_eq!(read_capture(dir.path()).unwrap(), s.capture);
    }

    #[test]
    fn truncated_stats_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        let mut b = encode_triples(&[[1.0, 2.0, 3.0]]);
        assert_eq!(decode_triples(&p, &b).unwrap(), vec![[1.0, 2.0, 3.0]]);
        b.pop();
        assert!(matches!(decode_triples(&p, &b), Err(StoreError::Format { .. })));
    }
}
