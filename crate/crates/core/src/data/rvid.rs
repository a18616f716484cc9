//! Clip file formats: the `.rvid` raw container and PNG frame directories.
//!
//! `.rvid` layout: magic `RVID`, version byte, four u32 LE dims (T, H, W, C),
//! f64 LE fps, then T*H*W*C intensity bytes (0..=255). Quantization to u8 is
//! the only loss in a write/read round trip.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array4;

use super::VideoClip;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"RVID";

pub fn write_rvid(clip: &VideoClip, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(21 + clip.frames().len());
    buf.extend_from_slice(MAGIC);
    buf.push(1u8);
    for d in [clip.t(), clip.h(), clip.w(), 3] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&clip.fps.to_le_bytes());
    for &v in clip.frames().iter() {
        buf.push((v * 255.0).round() as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_rvid(path: &Path) -> Result<VideoClip> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Video(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 29 || &bytes[0..4] != MAGIC {
        return Err(Error::Video(format!("{} is not an rvid file", path.display())));
    }
    if bytes[4] != 1 {
        return Err(Error::Video(format!("unsupported rvid version {}", bytes[4])));
    }
    let dim = |i: usize| {
        u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize
    };
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    if c != 3 {
        return Err(Error::Video(format!("rvid must have 3 channels, got {c}")));
    }
    let fps = f64::from_le_bytes(bytes[21..29].try_into().unwrap());
    let n = t * h * w * c;
    if bytes.len() != 29 + n {
        return Err(Error::Video(format!(
            "rvid payload length {} != expected {n}",
            bytes.len() - 29
        )));
    }
    let data: Vec<f64> = bytes[29..].iter().map(|&b| b as f64 / 255.0).collect();
    let frames = Array4::from_shape_vec((t, h, w, c), data)
        .map_err(|e| Error::Video(e.to_string()))?;
    VideoClip::new(frames, fps)
}

pub fn write_png_dir(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = (clip.h(), clip.w());
    for i in 0..clip.t() {
        let frame = clip.frame(i);
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (y, x, px) in img.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
            for ch in 0..3 {
                px.0[ch] = (frame[[y as usize, x as usize, ch]] * 255.0).round() as u8;
            }
        }
        img.save(dir.join(format!("frame_{i:05}.png")))
            .map_err(|e| Error::Video(format!("png write failed: {e}")))?;
    }
    Ok(())
}

pub fn read_png_dir(dir: &Path) -> Result<VideoClip> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    if names.is_empty() {
        return Err(Error::Video(format!("no png frames in {}", dir.display())));
    }
    names.sort();
    let mut frames: Option<Array4<f64>> = None;
    for (i, p) in names.iter().enumerate() {
        let img = image::open(p)
            .map_err(|e| Error::Video(format!("cannot decode {}: {e}", p.display())))?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let store = frames.get_or_insert_with(|| Array4::zeros((names.len(), h, w, 3)));
        if store.shape()[1] != h || store.shape()[2] != w {
            return Err(Error::Video(format!(
                "frame size mismatch in {}",
                dir.display()
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for ch in 0..3 {
                    store[[i, y, x, ch]] = px.0[ch] as f64 / 255.0;
                }
            }
        }
    }
    VideoClip::new(frames.unwrap(), 30.0)
}
