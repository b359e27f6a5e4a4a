//! Frame-directory and raw-blob interchange.
//!
//! Directory layout: one image per frame, zero-padded 6-digit names
//! (`000000.png`, ...), lexicographic order defining time. Raw layout: magic
//! `PMRF`, little-endian u32 T, H, W, C, then `T*H*W*C` little-endian f32.

use super::clip::{Frame, FrameClip, MediaError};
use crate::scalar::Scalar;
use image::DynamicImage;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const RAW_MAGIC: &[u8; 4] = b"PMRF";

fn io_err(path: &Path, source: std::io::Error) -> MediaError {
    MediaError::IoError { path: path.to_path_buf(), source }
}

/// Load an ordered directory of image files as a clip, normalizing samples by
/// the source bit-depth maximum.
pub fn load_clip<S: Scalar>(dir: &Path) -> Result<FrameClip<S>, MediaError> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "jpg" | "jpeg" | "bmp" | "tif" | "tiff")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(MediaError::NoFrames);
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p)
            .map_err(|e| MediaError::DecodeError { path: p.clone(), reason: e.to_string() })?;
        frames.push(decode_frame::<S>(&img));
    }
    let mut clip = FrameClip::new(frames)?;
    clip.meta.source = Some(dir.to_path_buf());
    Ok(clip)
}

fn decode_frame<S: Scalar>(img: &DynamicImage) -> Frame<S> {
    match img {
        DynamicImage::ImageLuma8(buf) => {
            Frame::from_fn(buf.height() as usize, buf.width() as usize, 1, |y, x, _| {
                S::of(buf.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0)
            })
        }
        DynamicImage::ImageLuma16(buf) => {
            Frame::from_fn(buf.height() as usize, buf.width() as usize, 1, |y, x, _| {
                S::of(buf.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0)
            })
        }
        DynamicImage::ImageRgb16(buf) => {
            Frame::from_fn(buf.height() as usize, buf.width() as usize, 3, |y, x, ch| {
                S::of(buf.get_pixel(x as u32, y as u32).0[ch] as f64 / 65535.0)
            })
        }
        other => {
            let buf = other.to_rgb8();
            Frame::from_fn(buf.height() as usize, buf.width() as usize, 3, |y, x, ch| {
                S::of(buf.get_pixel(x as u32, y as u32).0[ch] as f64 / 255.0)
            })
        }
    }
}

/// Write a clip as 8-bit PNG frames, clamping to `[0,1]` before quantization.
pub fn save_clip<S: Scalar>(clip: &FrameClip<S>, dir: &Path) -> Result<(), MediaError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (t, frame) in clip.frames().iter().enumerate() {
        let path = dir.join(format!("{t:06}.png"));
        let (h, w, c) = frame.shape();
        let quant = |v: S| -> u8 { (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8 };
        let result = match c {
            1 => image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quant(frame.get(y as usize, x as usize, 0))])
            })
            .save(&path),
            3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb(std::array::from_fn(|ch| quant(frame.get(y as usize, x as usize, ch))))
            })
            .save(&path),
            4 => image::RgbaImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgba(std::array::from_fn(|ch| quant(frame.get(y as usize, x as usize, ch))))
            })
            .save(&path),
            other => return Err(MediaError::BadChannels(other)),
        };
        result.map_err(|e| io_err(&path, std::io::Error::other(e.to_string())))?;
    }
    Ok(())
}

/// Write the lossless f32 blob plus a small JSON sidecar describing the shape.
pub fn save_raw_clip<S: Scalar>(clip: &FrameClip<S>, path: &Path) -> Result<(), MediaError> {
    let (t, h, w, c) = clip.shape();
    let mut bytes = Vec::with_capacity(4 + 16 + t * h * w * c * 4);
    bytes.extend_from_slice(RAW_MAGIC);
    for dim in [t, h, w, c] {
        bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for frame in clip.frames() {
        for &v in frame.data() {
            bytes.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    let sidecar = path.with_extension(format!(
        "{}json",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    fs::write(&sidecar, format!("{{\"T\":{t},\"H\":{h},\"W\":{w},\"C\":{c}}}\n"))
        .map_err(|e| io_err(&sidecar, e))
}

pub fn load_raw_clip<S: Scalar>(path: &Path) -> Result<FrameClip<S>, MediaError> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 20];
    file.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    if &header[..4] != RAW_MAGIC {
        return Err(MediaError::DecodeError { path: path.to_path_buf(), reason: "bad magic".into() });
    }
    let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let mut body = Vec::new();
    file.read_to_end(&mut body).map_err(|e| io_err(path, e))?;
    if body.len() != t * h * w * c * 4 {
        return Err(MediaError::DecodeError {
            path: path.to_path_buf(),
            reason: format!("expected {} payload bytes, got {}", t * h * w * c * 4, body.len()),
        });
    }
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let base = ti * h * w * c * 4;
        let data = (0..h * w * c)
            .map(|i| {
                let off = base + i * 4;
                S::of(f32::from_le_bytes(body[off..off + 4].try_into().unwrap()) as f64)
            })
            .collect();
        frames.push(Frame::from_vec(h, w, c, data)?);
    }
    let mut clip = FrameClip::new(frames)?;
    clip.meta.source = Some(path.to_path_buf());
    Ok(clip)
}

/// Write a binary mask as a black/white 8-bit PNG for inspection.
pub fn save_mask_png(bits: &[bool], h: usize, w: usize, path: &Path) -> Result<(), MediaError> {
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if bits[y as usize * w + x as usize] { 255 } else { 0 }])
    });
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    img.save(path).map_err(|e| io_err(path, std::io::Error::other(e.to_string())))
}

/// Shared writer so reports end with a trailing newline everywhere.
pub fn write_text(path: &Path, text: &str) -> Result<(), MediaError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    if !text.ends_with('\n') {
        f.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
