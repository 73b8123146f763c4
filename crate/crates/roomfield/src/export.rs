//! Image files and export poses.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use roomfield_core::field::RadianceField;
use roomfield_core::geometry::{CameraPose, Intrinsics};
use roomfield_core::math::Vec3;
use roomfield_core::render::{render, RenderOutput, RenderSettings};

/// Environment variable holding the export thread count.
pub const THREADS_ENV: &str = "ROOMFIELD_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Png(#[from] png::EncodingError),
    #[error("not a grayscale PFM file")]
    NotPfm,
}

/// 8-bit RGB, values clamped to `[0, 1]`.
pub fn write_png(path: &Path, color: &[Vec3], width: u32, height: u32) -> Result<(), ExportError> {
    let mut encoder = png::Encoder::new(BufWriter::new(File::create(path)?), width, height);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let data: Vec<u8> = color
        .iter()
        .flat_map(|c| [to_byte(c.x), to_byte(c.y), to_byte(c.z)])
        .collect();
    encoder.write_header()?.write_image_data(&data)?;
    Ok(())
}

/// Single-channel little-endian PFM. Rows are stored bottom to top.
pub fn write_pfm(path: &Path, values: &[f64], width: u32, height: u32) -> Result<(), ExportError> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "Pf\n{width} {height}\n-1.0\n")?;
    for row in values.chunks_exact(width as usize).rev() {
        for v in row {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a file written by [`write_pfm`], top row first.
pub fn read_pfm(path: &Path) -> Result<(u32, u32, Vec<f32>), ExportError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut header = Vec::new();
    let mut pos = 0;
    while header.len() < 3 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(ExportError::NotPfm)?
            + pos;
        header.push(
            std::str::from_utf8(&bytes[pos..end])
                .map_err(|_| ExportError::NotPfm)?
                .to_string(),
        );
        pos = end + 1;
    }
    if header[0] != "Pf" || !header[2].starts_with('-') {
        return Err(ExportError::NotPfm);
    }
    let mut dims = header[1].split_whitespace().map(|s| s.parse::<u32>());
    let (Some(Ok(w)), Some(Ok(h))) = (dims.next(), dims.next()) else {
        return Err(ExportError::NotPfm);
    };
    let body = &bytes[pos..];
    if body.len() != (w * h * 4) as usize {
        return Err(ExportError::NotPfm);
    }
    let rows: Vec<Vec<f32>> = body
        .chunks_exact(w as usize * 4)
        .map(|r| {
            r.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect();
    Ok((w, h, rows.into_iter().rev().flatten().collect()))
}

/// Which poses to export.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoseSpec {
    /// Position, yaw and pitch in degrees.
    Pose {
        position: Vec3,
        yaw_deg: f64,
        pitch_deg: f64,
    },
    /// Frames on a horizontal circle of `radius`, each looking outward at
    /// equally spaced yaws.
    Turntable {
        frames: usize,
        radius: f64,
        pitch_deg: f64,
    },
}

#[derive(Debug, thiserror::Error)]
#[error("pose spec must be `pose:x,y,z,yaw_deg,pitch_deg` or `turntable:frames,radius,pitch_deg`, got `{0}`")]
pub struct PoseSpecError(String);

impl std::str::FromStr for PoseSpec {
    type Err = PoseSpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || PoseSpecError(s.to_string());
        let (kind, rest) = s.split_once(':').ok_or_else(err)?;
        let nums: Vec<f64> = rest
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| err())?;
        match (kind, nums.as_slice()) {
            ("pose", &[x, y, z, yaw_deg, pitch_deg]) => Ok(PoseSpec::Pose {
                position: Vec3::new(x, y, z),
                yaw_deg,
                pitch_deg,
            }),
            ("turntable", &[frames, radius, pitch_deg])
                if frames >= 1.0 && frames.fract() == 0.0 =>
            {
                Ok(PoseSpec::Turntable {
                    frames: frames as usize,
                    radius,
                    pitch_deg,
                })
            }
            _ => Err(err()),
        }
    }
}

impl PoseSpec {
    pub fn poses(&self, intrinsics: Intrinsics) -> Vec<CameraPose> {
        match *self {
            PoseSpec::Pose {
                position,
                yaw_deg,
                pitch_deg,
            } => {
                vec![CameraPose::looking(
                    position,
                    yaw_deg.to_radians(),
                    pitch_deg.to_radians(),
                    intrinsics,
                )]
            }
            PoseSpec::Turntable {
                frames,
                radius,
                pitch_deg,
            } => (0..frames)
                .map(|k| {
                    let yaw = TAU * k as f64 / frames as f64;
                    let position = Vec3::new(yaw.cos(), 0.0, yaw.sin()) * radius;
                    CameraPose::looking(position, yaw, pitch_deg.to_radians(), intrinsics)
                })
                .collect(),
        }
    }
}

/// Thread count from [`THREADS_ENV`], else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Deterministic renders of `poses`, frames spread across `threads`.
pub fn render_frames(
    field: &RadianceField,
    settings: &RenderSettings,
    poses: &[CameraPose],
    threads: usize,
) -> Vec<RenderOutput> {
    let sampling = settings.with_stratified(false).sampling(0);
    let threads = threads.clamp(1, poses.len().max(1));
    let chunk = poses.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = poses
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|p| render(field, p, &sampling))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("render thread panicked"))
            .collect()
    })
}

/// Writes `frame_NNN.png` and `frame_NNN.pfm` per output and returns the
/// paths written.
pub fn write_frames(dir: &Path, outputs: &[RenderOutput]) -> Result<Vec<PathBuf>, ExportError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (k, out) in outputs.iter().enumerate() {
        let png = dir.join(format!("frame_{k:03}.png"));
        let pfm = dir.join(format!("frame_{k:03}.pfm"));
        write_png(&png, &out.color, out.width, out.height)?;
        write_pfm(&pfm, &out.depth, out.width, out.height)?;
        written.push(png);
        written.push(pfm);
    }
    Ok(written)
}
