//! Per-keyframe visual descriptors: an 81-bin global HoG and an 11-bin
//! Color Naming histogram, concatenated into 92 values per keyframe.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::dataset::DescriptorSequence;
use crate::error::{Error, Result};

pub const HOG_CELLS_PER_SIDE: usize = 3;
pub const HOG_BINS: usize = 9;
pub const HOG_DIM: usize = HOG_CELLS_PER_SIDE * HOG_CELLS_PER_SIDE * HOG_BINS;
pub const COLOR_NAMES_DIM: usize = 11;
pub const VISUAL_DIM: usize = HOG_DIM + COLOR_NAMES_DIM;
pub const DEFAULT_KEYFRAMES: usize = 32;
/// Frames are downscaled (nearest neighbour) so the longer side fits this.
pub const MAX_FRAME_SIDE: usize = 320;

const FRAME_EXTENSIONS: [&str; 3] = ["ppm", "pgm", "pnm"];

/// Fixed prototype table, in histogram bin order.
pub const COLOR_PROTOTYPES: [(&str, [u8; 3]); COLOR_NAMES_DIM] = [
    ("black", [0, 0, 0]),
    ("blue", [0, 0, 255]),
    ("brown", [139, 69, 19]),
    ("grey", [128, 128, 128]),
    ("green", [0, 128, 0]),
    ("orange", [255, 165, 0]),
    ("pink", [255, 192, 203]),
    ("purple", [128, 0, 128]),
    ("red", [255, 0, 0]),
    ("white", [255, 255, 255]),
    ("yellow", [255, 255, 0]),
];

pub fn color_index(name: &str) -> Option<usize> {
    COLOR_PROTOTYPES.iter().position(|(n, _)| *n == name)
}

/// An 8-bit RGB frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl FrameImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::InvalidInput(format!(
                "frame must be at least 2x2, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "frame {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Result<Self> {
        let pixels = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, pixels)
    }

    /// Decodes a binary PPM (P6) or PGM (P5) file. Gray is replicated to RGB.
    pub fn open(path: &Path) -> Result<Self> {
        let frame_err = |message: String| Error::Frame {
            path: path.to_path_buf(),
            message,
        };
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| frame_err(e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels = img.pixels().map(|p| p.0).collect();
        Self::new(w, h, pixels).map_err(|e| frame_err(e.to_string()))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Nearest-neighbour downscale so that `max(width, height) <= max_side`.
    /// Frames already small enough are returned unchanged.
    pub fn fit_within(&self, max_side: usize) -> FrameImage {
        let longest = self.width.max(self.height);
        if longest <= max_side {
            return self.clone();
        }
        let scale = |n: usize| ((n * max_side + longest / 2) / longest).max(2);
        let (nw, nh) = (scale(self.width), scale(self.height));
        let pixels = (0..nh)
            .flat_map(|y| (0..nw).map(move |x| (x, y)))
            .map(|(x, y)| {
                let sx = ((2 * x + 1) * self.width / (2 * nw)).min(self.width - 1);
                let sy = ((2 * y + 1) * self.height / (2 * nh)).min(self.height - 1);
                self.pixel(sx, sy)
            })
            .collect();
        FrameImage {
            width: nw,
            height: nh,
            pixels,
        }
    }
}

/// Indices chosen by uniform temporal sampling of `n` out of `available` frames.
pub fn keyframe_indices(available: usize, n: usize) -> Vec<usize> {
    if n >= available {
        return (0..available).collect();
    }
    if n <= 1 {
        return vec![0];
    }
    // round(i * (F - 1) / (n - 1)) in exact integer arithmetic
    let (span, steps) = (available - 1, n - 1);
    (0..n).map(|i| (2 * i * span + steps) / (2 * steps)).collect()
}

pub fn list_frame_files(frames_dir: &Path) -> Result<Vec<PathBuf>> {
    let read = std::fs::read_dir(frames_dir).map_err(|e| Error::io(frames_dir, e))?;
    let mut files = Vec::new();
    for entry in read {
        let path = entry.map_err(|e| Error::io(frames_dir, e))?.path();
        let is_frame = path.is_file()
            && path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FRAME_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)));
        if is_frame {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

pub fn sample_keyframes(frames_dir: &Path, n: usize) -> Result<Vec<FrameImage>> {
    if n == 0 {
        return Err(Error::InvalidInput("keyframe count must be at least 1".into()));
    }
    let files = list_frame_files(frames_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyDirectory(frames_dir.to_path_buf()));
    }
    keyframe_indices(files.len(), n)
        .into_iter()
        .map(|i| FrameImage::open(&files[i]))
        .collect()
}

fn luminance(frame: &FrameImage) -> Vec<f64> {
    frame
        .pixels
        .iter()
        .map(|&[r, g, b]| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .collect()
}

fn l1_normalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
}

/// Global HoG: central differences on interior pixels, unsigned orientation
/// in [0°, 180°) hard-binned into 9 bins, magnitude weighted, over a 3×3 grid
/// of equal cells. Layout is cell-major (row of cells, then column), 9 bins
/// per cell. The y axis points down the image.
pub fn hog81(frame: &FrameImage) -> [f64; HOG_DIM] {
    let (w, h) = (frame.width, frame.height);
    let lum = luminance(frame);
    let mut hist = [0.0; HOG_DIM];
    for y in 1..h - 1 {
        let cy = y * HOG_CELLS_PER_SIDE / h;
        for x in 1..w - 1 {
            let gx = lum[y * w + x + 1] - lum[y * w + x - 1];
            let gy = lum[(y + 1) * w + x] - lum[(y - 1) * w + x];
            let magnitude = gx.hypot(gy);
            if magnitude == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            if angle >= 180.0 {
                angle -= 180.0;
            }
            let bin = ((angle / 20.0) as usize).min(HOG_BINS - 1);
            let cx = x * HOG_CELLS_PER_SIDE / w;
            hist[(cy * HOG_CELLS_PER_SIDE + cx) * HOG_BINS + bin] += magnitude;
        }
    }
    l1_normalize(&mut hist);
    hist
}

pub fn nearest_color(rgb: [u8; 3]) -> usize {
    let mut best = (0, u32::MAX);
    for (i, (_, proto)) in COLOR_PROTOTYPES.iter().enumerate() {
        let dist: u32 = rgb
            .iter()
            .zip(proto)
            .map(|(&a, &b)| (a as i32 - b as i32).pow(2) as u32)
            .sum();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best.0
}

/// Histogram of nearest-prototype assignments, L1-normalized.
pub fn color_naming11(frame: &FrameImage) -> [f64; COLOR_NAMES_DIM] {
    let mut hist = [0.0; COLOR_NAMES_DIM];
    for &p in &frame.pixels {
        hist[nearest_color(p)] += 1.0;
    }
    l1_normalize(&mut hist);
    hist
}

/// `[hog81 ‖ color_naming11]` for one frame, after downscaling.
pub fn visual_descriptor(frame: &FrameImage) -> [f64; VISUAL_DIM] {
    let frame = frame.fit_within(MAX_FRAME_SIDE);
    let mut out = [0.0; VISUAL_DIM];
    out[..HOG_DIM].copy_from_slice(&hog81(&frame));
    out[HOG_DIM..].copy_from_slice(&color_naming11(&frame));
    out
}

pub fn visual_sequence_from_frames(
    video_id: impl Into<String>,
    frames: &[FrameImage],
) -> Result<DescriptorSequence> {
    let mut data = Array2::zeros((frames.len(), VISUAL_DIM));
    for (mut row, frame) in data.rows_mut().into_iter().zip(frames) {
        row.assign(&ndarray::ArrayView1::from(&visual_descriptor(frame)));
    }
    DescriptorSequence::new(video_id, "visual", data)
}

/// Samples keyframes from `frames_dir` and stacks their 92-dim descriptors.
/// The video id is the directory name.
pub fn extract_visual_sequence(frames_dir: &Path, n_keyframes: usize) -> Result<DescriptorSequence> {
    let frames = sample_keyframes(frames_dir, n_keyframes)?;
    let id = frames_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    visual_sequence_from_frames(id, &frames)
}

/// Writes a frame as binary PPM (P6).
pub fn write_ppm(frame: &FrameImage, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    for p in &frame.pixels {
        bytes.extend_from_slice(p);
    }
    crate::io_util::write_all(path, &bytes)
}
