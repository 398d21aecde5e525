//! Frame access and square crops.
//!
//! A clip frame is cut as an `S×S` square, `S = ceil(crop_side)`, whose
//! top-left corner is the box center minus `S/2` rounded to the nearest
//! pixel. Pixels outside the image are zero. The square is then resized to
//! `resize_to × resize_to` with bilinear interpolation using pixel-center
//! alignment (source coordinate `(u + 0.5)·S/R − 0.5`, clamped to the square).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rayon::prelude::*;

use super::{ClipSpec, IngestError};

/// An RGB frame, row-major, 8 bits per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width * height * 3) as usize],
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("frame buffer matches dimensions")
    }
}

/// Supplies source frames by video and frame index. Must tolerate
/// concurrent reads.
pub trait FrameSource: Sync {
    fn frame(&self, video_id: u32, frame_index: u64) -> Result<Frame, String>;
}

/// Frames stored as `<root>/<video_id>/<frame_index:06>.png`.
pub struct DirFrameSource {
    root: PathBuf,
}

impl DirFrameSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(root: &Path, video_id: u32, frame_index: u64) -> PathBuf {
        root.join(video_id.to_string())
            .join(format!("{frame_index:06}.png"))
    }
}

impl FrameSource for DirFrameSource {
    fn frame(&self, video_id: u32, frame_index: u64) -> Result<Frame, String> {
        let path = Self::path_for(&self.root, video_id, frame_index);
        let img = image::open(&path)
            .map_err(|e| format!("{}: {e}", path.display()))?
            .to_rgb8();
        Ok(Frame {
            width: img.width(),
            height: img.height(),
            data: img.into_raw(),
        })
    }
}

/// Pixels of one clip: `frames × 3 × resize_to × resize_to`, values in [0, 1].
pub type ClipPixels = Array4<f32>;

/// A zero-padded square cut, `3 × S × S`, before resizing.
pub struct SquareCrop {
    pub pixels: Array3<f32>,
    /// Pixels copied from inside the image.
    pub content: usize,
    /// Zero-filled pixels outside the image.
    pub padded: usize,
}

pub fn crop_square(frame: &Frame, center: (f64, f64), crop_side: f64) -> SquareCrop {
    let side = (crop_side.ceil() as i64).max(1);
    let left = (center.0 - side as f64 / 2.0).round() as i64;
    let top = (center.1 - side as f64 / 2.0).round() as i64;
    let s = side as usize;
    let mut pixels = Array3::<f32>::zeros((3, s, s));
    let mut content = 0;
    for cy in 0..side {
        let y = top + cy;
        if y < 0 || y >= i64::from(frame.height) {
            continue;
        }
        for cx in 0..side {
            let x = left + cx;
            if x < 0 || x >= i64::from(frame.width) {
                continue;
            }
            let px = frame.pixel(x as u32, y as u32);
            for c in 0..3 {
                pixels[[c, cy as usize, cx as usize]] = f32::from(px[c]) / 255.0;
            }
            content += 1;
        }
    }
    SquareCrop {
        pixels,
        content,
        padded: s * s - content,
    }
}

fn resize_bilinear(src: &Array3<f32>, out: usize) -> Array3<f32> {
    let s = src.shape()[1];
    let scale = s as f64 / out as f64;
    let coords: Vec<(usize, usize, f32)> = (0..out)
        .map(|u| {
            let x = ((u as f64 + 0.5) * scale - 0.5).clamp(0.0, (s - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(s - 1);
            (x0, x1, (x - x0 as f64) as f32)
        })
        .collect();
    let mut dst = Array3::<f32>::zeros((3, out, out));
    for c in 0..3 {
        for (v, &(y0, y1, wy)) in coords.iter().enumerate() {
            for (u, &(x0, x1, wx)) in coords.iter().enumerate() {
                let top = src[[c, y0, x0]] * (1.0 - wx) + src[[c, y0, x1]] * wx;
                let bottom = src[[c, y1, x0]] * (1.0 - wx) + src[[c, y1, x1]] * wx;
                dst[[c, v, u]] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    dst
}

/// Crops one frame around `center` and resizes it.
pub fn crop_frame(frame: &Frame, center: (f64, f64), crop_side: f64, resize_to: usize) -> Array3<f32> {
    resize_bilinear(&crop_square(frame, center, crop_side).pixels, resize_to)
}

pub fn crop_frames(
    clip: &ClipSpec,
    source: &dyn FrameSource,
    resize_to: usize,
) -> Result<ClipPixels, IngestError> {
    let mut out = Array4::zeros((clip.frame_indices.len(), 3, resize_to, resize_to));
    for (i, (&f, &center)) in clip.frame_indices.iter().zip(&clip.crop_centers).enumerate() {
        let frame = source
            .frame(clip.video_id, f)
            .map_err(|message| IngestError::MissingFrame {
                clip_id: clip.clip_id,
                video_id: clip.video_id,
                frame_index: f,
                message,
            })?;
        out.slice_mut(ndarray::s![i, .., .., ..])
            .assign(&crop_frame(&frame, center, clip.crop_side, resize_to));
    }
    Ok(out)
}

/// Crops many clips, loading each distinct source frame once.
pub fn crop_all(
    clips: &[ClipSpec],
    source: &dyn FrameSource,
    resize_to: usize,
) -> Result<Vec<ClipPixels>, IngestError> {
    let mut uses: BTreeMap<(u32, u64), Vec<(usize, usize)>> = BTreeMap::new();
    for (ci, clip) in clips.iter().enumerate() {
        for (pos, &f) in clip.frame_indices.iter().enumerate() {
            uses.entry((clip.video_id, f)).or_default().push((ci, pos));
        }
    }
    let work: Vec<_> = uses.into_iter().collect();
    let crops = work
        .par_iter()
        .map(|((video, f), users)| {
            let frame = source.frame(*video, *f).map_err(|message| {
                let clip = &clips[users[0].0];
                IngestError::MissingFrame {
                    clip_id: clip.clip_id,
                    video_id: *video,
                    frame_index: *f,
                    message,
                }
            })?;
            Ok(users
                .iter()
                .map(|&(ci, pos)| {
                    let clip = &clips[ci];
                    (ci, pos, crop_frame(&frame, clip.crop_centers[pos], clip.crop_side, resize_to))
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, IngestError>>()?;
    let mut out: Vec<ClipPixels> = clips
        .iter()
        .map(|c| Array4::zeros((c.frame_indices.len(), 3, resize_to, resize_to)))
        .collect();
    for (ci, pos, px) in crops.into_iter().flatten() {
        out[ci].slice_mut(ndarray::s![pos, .., .., ..]).assign(&px);
    }
    Ok(out)
}
