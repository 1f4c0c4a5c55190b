//! On-disk dataset format, PNG/PFM image I/O and atomic file writes.
//!
//! A dataset directory holds:
//!
//! ```text
//! manifest.json
//! frames/NNNN.png      8-bit RGB
//! masks/NNNN.png       8-bit, 255 = static, 0 = dynamic
//! depth/NNNN.pfm       optional, single-channel little-endian PFM
//! plates/NNNN.png      optional clean static renders
//! init_points.txt      optional, one `x y z r g b` per line, colors in 0..=255
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::img::{Image, Mask};
use crate::math::Vec3;

pub const MANIFEST_VERSION: u32 = 1;

/// Whether depth maps are metric or only defined up to scale and offset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthKind {
    #[default]
    Metric,
    Relative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub image: String,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plate: Option<String>,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    /// Sequence length `T`; must equal the number of frames.
    pub sequence_length: usize,
    #[serde(default)]
    pub depth_kind: DepthKind,
    #[serde(default)]
    pub background: Vec3,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// Normalized timestamp `i / (T − 1)`.
    pub time: f64,
    pub camera: Camera,
    pub image: Image,
    pub mask: Mask,
    pub depth: Option<Image>,
    pub plate: Option<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitPoint {
    pub position: Vec3,
    pub color: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub width: usize,
    pub height: usize,
    pub depth_kind: DepthKind,
    pub background: Vec3,
    pub frames: Vec<Frame>,
    pub init_points: Option<Vec<InitPoint>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_depth(&self) -> bool {
        self.frames.iter().any(|f| f.depth.is_some())
    }
}

/// `i / (T − 1)`, or 0 for a single frame.
pub fn normalized_time(i: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        i as f64 / (len - 1) as f64
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::dataset(&manifest_path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::dataset(&manifest_path, format!("malformed manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::dataset(
            &manifest_path,
            format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.version),
        ));
    }
    if manifest.frames.is_empty() {
        return Err(Error::dataset(&manifest_path, "manifest lists no frames"));
    }
    if manifest.sequence_length != manifest.frames.len() {
        return Err(Error::dataset(
            &manifest_path,
            format!(
                "sequence_length {} but {} frames listed",
                manifest.sequence_length,
                manifest.frames.len()
            ),
        ));
    }
    let (w, h) = (manifest.width, manifest.height);
    let n = manifest.frames.len();
    let mut frames = Vec::with_capacity(n);
    for (i, mf) in manifest.frames.iter().enumerate() {
        let check = |path: &Path, iw: usize, ih: usize| {
            if (iw, ih) != (w, h) {
                Err(Error::dataset(path, format!("resolution {iw}×{ih}, manifest says {w}×{h}")))
            } else {
                Ok(())
            }
        };
        let img_path = dir.join(&mf.image);
        let image = read_png_rgb(&img_path)?;
        check(&img_path, image.width, image.height)?;
        let mask_path = dir.join(&mf.mask);
        let mask = read_mask_png(&mask_path)?;
        check(&mask_path, mask.width, mask.height)?;
        let depth = match &mf.depth {
            Some(p) => {
                let path = dir.join(p);
                let d = read_pfm(&path)?;
                check(&path, d.width, d.height)?;
                Some(d)
            }
            None => None,
        };
        let plate = match &mf.plate {
            Some(p) => {
                let path = dir.join(p);
                let d = read_png_rgb(&path)?;
                check(&path, d.width, d.height)?;
                Some(d)
            }
            None => None,
        };
        mf.camera
            .validate()
            .map_err(|e| Error::dataset(&manifest_path, format!("frame {i}: {e}")))?;
        if (mf.camera.width, mf.camera.height) != (w, h) {
            return Err(Error::dataset(&manifest_path, format!("frame {i}: camera size differs from images")));
        }
        frames.push(Frame {
            index: i,
            time: normalized_time(i, n),
            camera: mf.camera.clone(),
            image,
            mask,
            depth,
            plate,
        });
    }
    let pts_path = dir.join("init_points.txt");
    let init_points = if pts_path.exists() {
        Some(read_points(&pts_path)?)
    } else {
        None
    };
    Ok(Dataset {
        root: dir.to_path_buf(),
        width: w,
        height: h,
        depth_kind: manifest.depth_kind,
        background: manifest.background,
        frames,
        init_points,
    })
}

pub fn read_points(path: &Path) -> Result<Vec<InitPoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::dataset(path, format!("line {}: {e}", ln + 1)))?;
        if vals.len() != 6 || vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::dataset(path, format!("line {}: expected `x y z r g b`", ln + 1)));
        }
        out.push(InitPoint {
            position: [vals[0], vals[1], vals[2]],
            color: [vals[3] / 255.0, vals[4] / 255.0, vals[5] / 255.0],
        });
    }
    Ok(out)
}

pub fn write_points(path: &Path, points: &[InitPoint]) -> Result<()> {
    let mut s = String::new();
    for p in points {
        let c = p.color.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p.position[0], p.position[1], p.position[2], c[0], c[1], c[2]
        ));
    }
    atomic_write(path, s.as_bytes())
}

/// Writes `bytes` to a temporary sibling file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    // temp files are created owner-only
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(width: usize, height: usize, color: image::ExtendedColorType, raw: &[u8]) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf).write_image(raw, width as u32, height as u32, color)?;
    Ok(buf)
}

/// Writes an RGB image with values in `[0, 1]` as 8-bit PNG.
pub fn write_png_rgb(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Contract("write_png_rgb expects 3 channels".into()));
    }
    let raw: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    atomic_write(path, &encode_png(img.width, img.height, image::ExtendedColorType::Rgb8, &raw)?)
}

/// Writes a mask as 8-bit grayscale with 255 for static pixels.
pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let raw: Vec<u8> = mask.data.iter().map(|m| if *m > 0.5 { 255 } else { 0 }).collect();
    atomic_write(path, &encode_png(mask.width, mask.height, image::ExtendedColorType::L8, &raw)?)
}

pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::dataset(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(w as usize, h as usize, 3, data)
}

pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::dataset(path, e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    if raw.iter().any(|v| *v != 0 && *v != 255) {
        log::warn!("{}: mask values outside {{0, 255}}; thresholding at 128", path.display());
    }
    Mask::new(w as usize, h as usize, raw.iter().map(|v| if *v >= 128 { 1.0 } else { 0.0 }).collect())
}

/// Single-channel little-endian PFM (`Pf`, scale −1), rows stored bottom-up.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(Error::Contract("PFM depth maps are single-channel".into()));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            out.extend_from_slice(&(img.data[y * img.width + x] as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<Image, String> {
    // three whitespace-terminated header tokens, then a single whitespace byte
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?.to_string());
    }
    pos += 1;
    match tokens[0].as_str() {
        "Pf" => {}
        "PF" => return Err("colour PFM is not supported for depth".into()),
        other => return Err(format!("bad magic '{other}'")),
    }
    let w: usize = tokens[1].parse().map_err(|_| "bad width")?;
    let h: usize = tokens[2].parse().map_err(|_| "bad height")?;
    let scale: f64 = tokens[3].parse().map_err(|_| "bad scale")?;
    let little = scale < 0.0;
    let need = w * h * 4;
    if bytes.len() < pos + need {
        return Err(format!("expected {need} bytes of samples, found {}", bytes.len().saturating_sub(pos)));
    }
    let mut data = vec![0.0; w * h];
    for (k, chunk) in bytes[pos..pos + need].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (k / w, k % w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Image::new(w, h, 1, data).map_err(|e| e.to_string())
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    decode_pfm(&bytes).map_err(|e| Error::dataset(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_roundtrip_is_bit_exact() {
        let vals: Vec<f64> = (0..35).map(|i| (i as f32 * 0.37 - 3.1).exp() as f64).collect();
        let img = Image::new(7, 5, 1, vals).unwrap();
        let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pfm_rejects_truncation() {
        let img = Image::filled(4, 4, 1, 1.5);
        let bytes = encode_pfm(&img).unwrap();
        assert!(decode_pfm(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn time_normalization() {
        let t: Vec<f64> = (0..3).map(|i| normalized_time(i, 3)).collect();
        assert_eq!(t, vec![0.0, 0.5, 1.0]);
        assert_eq!(normalized_time(0, 1), 0.0);
    }
}
