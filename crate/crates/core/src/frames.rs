//! Frame storage. Clips reference either a raw frame file or a directory of
//! still images (one image per second of video, sorted by file name).
//!
//! Raw frame file layout (little-endian):
//!
//! ```text
//! magic   4 bytes  "SVLF"
//! version u32
//! frames  u32
//! height  u32
//! width   u32
//! pixels  frames·height·width·3 bytes, RGB, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"SVLF";
pub const FRAME_FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Frames `first..first + count` of a frame source. Relative paths are
/// resolved against the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub path: String,
    pub first: usize,
    pub count: usize,
}

impl FrameRef {
    pub fn resolve(&self, base: &Path) -> PathBuf {
        base.join(&self.path)
    }
}

/// Quantizes `[0, 1]` frames to bytes and writes a raw frame file.
pub fn write_raw_frames(path: &Path, frames: &Array4<f64>) -> Result<()> {
    let (t, h, w, c) = frames.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + frames.len());
    bytes.extend_from_slice(FRAME_MAGIC);
    for v in [FRAME_FORMAT_VERSION, t as u32, h as u32, w as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend(frames.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Reads frames `first..first + count` from a raw file or image directory,
/// scaled to `[0, 1]`.
pub fn load_frames(path: &Path, first: usize, count: usize) -> Result<Array4<f64>> {
    if path.is_dir() {
        load_image_dir(path, first, count)
    } else {
        load_raw(path, first, count)
    }
}

/// Number of frames available at `path`.
pub fn frame_count(path: &Path) -> Result<usize> {
    if path.is_dir() {
        Ok(image_files(path)?.len())
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(parse_header(&bytes, path)?.0)
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != FRAME_MAGIC {
        return Err(Error::InvalidInput(format!(
            "{} is not a raw frame file",
            path.display()
        )));
    }
    let version = read_u32(bytes, 4);
    if version != FRAME_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FRAME_FORMAT_VERSION,
        });
    }
    let dims = (
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
        read_u32(bytes, 16) as usize,
    );
    if bytes.len() != HEADER_LEN + dims.0 * dims.1 * dims.2 * 3 {
        return Err(Error::InvalidInput(format!(
            "{}: pixel payload does not match the header",
            path.display()
        )));
    }
    Ok(dims)
}

fn check_range(first: usize, count: usize, available: usize) -> Result<()> {
    if count == 0 || first + count > available {
        return Err(Error::NotEnoughFrames {
            requested: first + count,
            available,
        });
    }
    Ok(())
}

fn load_raw(path: &Path, first: usize, count: usize) -> Result<Array4<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, h, w) = parse_header(&bytes, path)?;
    check_range(first, count, t)?;
    let frame_len = h * w * 3;
    let start = HEADER_LEN + first * frame_len;
    let pixels = bytes[start..start + count * frame_len]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(Array4::from_shape_vec((count, h, w, 3), pixels).expect("length checked against header"))
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_image_dir(dir: &Path, first: usize, count: usize) -> Result<Array4<f64>> {
    let files = image_files(dir)?;
    check_range(first, count, files.len())?;
    let mut dims = None;
    let mut pixels = Vec::new();
    for file in &files[first..first + count] {
        let img = image::open(file)?.to_rgb8();
        let size = img.dimensions();
        if *dims.get_or_insert(size) != size {
            return Err(Error::InvalidInput(format!(
                "{} has size {:?}, earlier frames are {:?}",
                file.display(),
                size,
                dims
            )));
        }
        pixels.extend(img.as_raw().iter().map(|&b| f64::from(b) / 255.0));
    }
    let (w, h) = dims.expect("at least one frame");
    Ok(Array4::from_shape_vec((count, h as usize, w as usize, 3), pixels).expect("sizes checked"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_frames_round_trip_and_slice() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.svlf");
        let frames = Array4::from_shape_fn((5, 4, 6, 3), |(t, y, x, c)| ((t + y + x + c) % 4) as f64 / 3.0);
        write_raw_frames(&path, &frames).unwrap();
        assert_eq!(frame_count(&path).unwrap(), 5);
        let all = load_frames(&path, 0, 5).unwrap();
        assert!((&all - &frames).iter().all(|d| d.abs() <= 0.5 / 255.0));
        let tail = load_frames(&path, 3, 2).unwrap();
        assert_eq!(tail, all.slice(ndarray::s![3..5, .., .., ..]).to_owned());
        assert!(matches!(
            load_frames(&path, 4, 2),
            Err(Error::NotEnoughFrames { requested: 6, available: 5 })
        ));
    }

    #[test]
    fn image_directory_frames() {
        let dir = tempfile::tempdir().unwrap();
        for (i, shade) in [0u8, 128, 255].iter().enumerate() {
            let img = image::RgbImage::from_pixel(8, 4, image::Rgb([*shade, 0, 255 - shade]));
            img.save(dir.path().join(format!("{i:03}.png"))).unwrap();
        }
        assert_eq!(frame_count(dir.path()).unwrap(), 3);
        let frames = load_frames(dir.path(), 1, 2).unwrap();
        assert_eq!(frames.dim(), (2, 4, 8, 3));
        assert_eq!(frames[[0, 0, 0, 0]], 128.0 / 255.0);
        assert_eq!(frames[[1, 3, 7, 2]], 0.0);
    }
}
