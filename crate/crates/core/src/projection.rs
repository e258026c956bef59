//! Orthographic multi-view rendering of a normalized point cloud into paired
//! color and depth maps via z-buffered disc splatting, plus patch cropping
//! and on-disk view storage (PPM for color, raw tensors for depth).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::pointcloud::PointCloud;
use crate::tensorio::{RawTensor, TensorData, TensorIoError};

#[derive(Debug, Error)]
pub enum ProjError {
    #[error("cannot render an empty cloud")]
    EmptyCloud,
    #[error("invalid render arguments: {0}")]
    InvalidArgs(String),
    #[error("crop of {size} exceeds view {h}x{w}")]
    SizeTooLarge { size: usize, h: usize, w: usize },
    #[error("bad magic in {0}")]
    BadMagic(String),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Background depth; masked pixels always stay strictly below it.
const FAR_DEPTH: f32 = 1.0;
/// Largest representable depth below the background.
const NEAR_LIMIT: f32 = 1.0 - f32::EPSILON / 2.0;

/// One rendered viewpoint: color, depth along the view axis in `[0, 1)`, and
/// a coverage mask. Unmasked pixels are black with depth 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3` interleaved RGB.
    pub color: Vec<u8>,
    /// `height * width`, row-major.
    pub depth: Vec<f32>,
    /// `height * width`, true where a point was splatted.
    pub mask: Vec<bool>,
    pub view_index: usize,
}

impl ViewImage {
    fn background(height: usize, width: usize, view_index: usize) -> Self {
        Self {
            height,
            width,
            color: vec![0; height * width * 3],
            depth: vec![FAR_DEPTH; height * width],
            mask: vec![false; height * width],
            view_index,
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// All viewpoints of one sample, same resolution each.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<ViewImage>,
}

impl ViewSet {
    pub fn m_count(&self) -> usize {
        self.views.len()
    }
}

/// An orthographic camera: pixel plane axes and the depth axis, each mapping
/// unit-cube points into `[0, 1]`.
#[derive(Debug, Clone, Copy)]
struct Camera {
    /// Projection rows for (u, v, depth): `out = dot(axis, p - origin) / span`.
    axes: [[f64; 3]; 3],
    origins: [f64; 3],
    spans: [f64; 3],
}

impl Camera {
    fn project(&self, p: &[f64; 3]) -> (f64, f64, f64) {
        let mut out = [0.0f64; 3];
        for (i, o) in out.iter_mut().enumerate() {
            let a = &self.axes[i];
            *o = (a[0] * p[0] + a[1] * p[1] + a[2] * p[2] - self.origins[i]) / self.spans[i];
        }
        (out[0], out[1], out[2])
    }
}

/// The six axis-aligned views: +X, -X, +Y, -Y, +Z, -Z. Depth is the point's
/// coordinate along the view direction (flipped for negative views), already
/// in `[0, 1]` for the unit cube.
fn axis_camera(view: usize) -> Camera {
    let (depth_axis, sign, u_axis, v_axis) = match view {
        0 => (0, 1.0, 1, 2),
        1 => (0, -1.0, 1, 2),
        2 => (1, 1.0, 0, 2),
        3 => (1, -1.0, 0, 2),
        4 => (2, 1.0, 0, 1),
        _ => (2, -1.0, 0, 1),
    };
    let mut axes = [[0.0; 3]; 3];
    axes[0][u_axis] = 1.0;
    axes[1][v_axis] = 1.0;
    axes[2][depth_axis] = sign;
    let origins = [0.0, 0.0, if sign < 0.0 { -1.0 } else { 0.0 }];
    Camera {
        axes,
        origins,
        spans: [1.0, 1.0, 1.0],
    }
}

/// Evenly distributed view directions from a Fibonacci sphere lattice; the
/// in-plane axes and depth are rescaled by the cube's support so projected
/// coordinates stay in `[0, 1]`.
fn fibonacci_camera(view: usize, m: usize) -> Camera {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let z = 1.0 - 2.0 * (view as f64 + 0.5) / m as f64;
    let r = (1.0 - z * z).sqrt();
    let phi = golden * view as f64;
    let d = [r * phi.cos(), r * phi.sin(), z];
    let up = if d[2].abs() > 0.999 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let e1 = normalize(cross(&d, &up));
    let e2 = cross(&d, &e1);
    let mut camera = Camera {
        axes: [e1, e2, d],
        origins: [0.0; 3],
        spans: [1.0; 3],
    };
    // support of the unit cube along each axis: dot ranges over corners
    for i in 0..3 {
        let a = camera.axes[i];
        let lo: f64 = a.iter().map(|&c| c.min(0.0)).sum();
        let hi: f64 = a.iter().map(|&c| c.max(0.0)).sum();
        camera.origins[i] = lo;
        camera.spans[i] = (hi - lo).max(1e-12);
    }
    camera
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Splat radius that keeps coverage roughly constant as point counts vary.
pub fn auto_splat_radius(render_size: usize, point_count: usize) -> usize {
    let r = (render_size as f64 / (point_count as f64).cbrt()).ceil() as usize;
    r.clamp(1, 4)
}

/// Renders `m` orthographic views by splatting each point as a filled disc of
/// `splat_radius` pixels; the nearest point along the view axis wins each
/// pixel. For `m = 6` the cameras are the axis views of the unit cube,
/// otherwise a Fibonacci sphere lattice.
pub fn render_views(
    cloud: &PointCloud,
    m: usize,
    height: usize,
    width: usize,
    splat_radius: usize,
) -> Result<ViewSet, ProjError> {
    if cloud.is_empty() {
        return Err(ProjError::EmptyCloud);
    }
    if m < 1 || height < 8 || width < 8 {
        return Err(ProjError::InvalidArgs(format!(
            "m={m}, {height}x{width} (need m >= 1 and both sides >= 8)"
        )));
    }
    let views: Vec<ViewImage> = (0..m)
        .into_par_iter()
        .map(|view| {
            let camera = if m == 6 {
                axis_camera(view)
            } else {
                fibonacci_camera(view, m)
            };
            render_one(cloud, &camera, view, height, width, splat_radius)
        })
        .collect();
    Ok(ViewSet { views })
}

fn render_one(
    cloud: &PointCloud,
    camera: &Camera,
    view_index: usize,
    height: usize,
    width: usize,
    radius: usize,
) -> ViewImage {
    let mut img = ViewImage::background(height, width, view_index);
    let r = radius as isize;
    for (p, c) in cloud.positions().iter().zip(cloud.colors()) {
        let (u, v, depth) = camera.project(p);
        let depth = (depth as f32).clamp(0.0, NEAR_LIMIT);
        let col = ((u * width as f64) as isize).clamp(0, width as isize - 1);
        let row = (((1.0 - v) * height as f64) as isize).clamp(0, height as isize - 1);
        for dr in -r..=r {
            for dc in -r..=r {
                if dr * dr + dc * dc > r * r {
                    continue;
                }
                let (rr, cc) = (row + dr, col + dc);
                if rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                    continue;
                }
                let idx = rr as usize * width + cc as usize;
                if depth < img.depth[idx] {
                    img.depth[idx] = depth;
                    img.mask[idx] = true;
                    img.color[idx * 3..idx * 3 + 3].copy_from_slice(c);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    Center,
    Random,
}

/// Contiguous `size x size` window of color, depth, and mask. Random windows
/// are deterministic in `seed` (row offset drawn before column offset).
pub fn crop_patch(
    view: &ViewImage,
    size: usize,
    mode: CropMode,
    seed: u64,
) -> Result<ViewImage, ProjError> {
    if size == 0 || size > view.height || size > view.width {
        return Err(ProjError::SizeTooLarge {
            size,
            h: view.height,
            w: view.width,
        });
    }
    let (row0, col0) = match mode {
        CropMode::Center => ((view.height - size) / 2, (view.width - size) / 2),
        CropMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.random_range(0..=view.height - size);
            let c = rng.random_range(0..=view.width - size);
            (r, c)
        }
    };
    let mut out = ViewImage::background(size, size, view.view_index);
    for r in 0..size {
        let src = (row0 + r) * view.width + col0;
        let dst = r * size;
        out.color[dst * 3..(dst + size) * 3]
            .copy_from_slice(&view.color[src * 3..(src + size) * 3]);
        out.depth[dst..dst + size].copy_from_slice(&view.depth[src..src + size]);
        out.mask[dst..dst + size].copy_from_slice(&view.mask[src..src + size]);
    }
    Ok(out)
}

/// Writes the color plane as binary PPM (P6) and the depth plane as a rank-2
/// f32 tensor. The mask is implied: a pixel is masked iff its depth is below
/// the background value.
pub fn save_view(view: &ViewImage, color_path: &Path, depth_path: &Path) -> Result<(), ProjError> {
    let mut ppm = format!("P6\n{} {}\n255\n", view.width, view.height).into_bytes();
    ppm.extend_from_slice(&view.color);
    fs::write(color_path, ppm)?;
    let tensor = RawTensor::f32(
        vec![view.height as u32, view.width as u32],
        view.depth.clone(),
    );
    fs::write(depth_path, tensor.to_bytes())?;
    Ok(())
}

/// Reads a view written by [`save_view`].
pub fn load_view(
    color_path: &Path,
    depth_path: &Path,
    view_index: usize,
) -> Result<ViewImage, ProjError> {
    let ppm = fs::read(color_path)?;
    let (width, height, color) = parse_ppm(&ppm, color_path)?;
    let tensor = RawTensor::from_bytes(&fs::read(depth_path)?)?;
    let depth = match tensor.data {
        TensorData::F32(v) => v,
        TensorData::F64(_) => {
            return Err(ProjError::BadMagic(format!(
                "{}: depth tensors are f32",
                depth_path.display()
            )))
        }
    };
    if tensor.dims != vec![height as u32, width as u32] {
        return Err(ProjError::InvalidArgs(format!(
            "depth dims {:?} do not match color {}x{}",
            tensor.dims, height, width
        )));
    }
    let mask = depth.iter().map(|&d| d < FAR_DEPTH).collect();
    Ok(ViewImage {
        height,
        width,
        color,
        depth,
        mask,
        view_index,
    })
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>), ProjError> {
    if !bytes.starts_with(b"P6") {
        return Err(ProjError::BadMagic(path.display().to_string()));
    }
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ProjError::BadMagic(path.display().to_string()))?;
    }
    pos += 1; // single whitespace byte after maxval
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(ProjError::BadMagic(format!(
            "{}: maxval {maxval}",
            path.display()
        )));
    }
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(ProjError::BadMagic(format!(
            "{}: truncated payload",
            path.display()
        )));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}
