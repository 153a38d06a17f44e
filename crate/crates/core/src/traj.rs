//! Pen trajectories, sliding-window signature features, and raster
//! signature feature maps.
//!
//! A trajectory is an ordered list of strokes, each an ordered list of
//! `(x, y)` sample points. Features come from the truncated signature
//! of a small window of points around each sample; windows are clipped
//! at stroke ends and never cross a pen-up boundary. Rasterization
//! scales the trajectory to a fixed pixel height and paints each
//! stroke segment with linearly interpolated feature vectors, giving a
//! `C x H x W` image whose channel 0 is binary ink.
//!
//! File formats:
//! * trajectory text — one stroke per line as `x,y` pairs separated by
//!   spaces; a blank line separates samples within one file;
//! * feature map binary — 16-byte header (`SFM1`, u32 channels, u32
//!   height, u32 width, little-endian) followed by `C*H*W` row-major
//!   f32 values;
//! * PGM (P5) per-channel dumps for eyeballing.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use thiserror::Error;

use crate::sig::{self, SigError};

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("trajectory has no strokes")]
    Empty,
    #[error("stroke {index} has no points")]
    EmptyStroke { index: usize },
    #[error("non-finite coordinate in stroke {stroke} at point {point}")]
    NonFinite { stroke: usize, point: usize },
    #[error("window width must be odd and >= 1 (got {0})")]
    EvenWindow(usize),
    #[error("window shift must be >= 1")]
    ZeroShift,
    #[error("signature depth {0} exceeds supported maximum {max}", max = MAX_DEPTH)]
    DepthTooLarge(usize),
    #[error("feature vectors not aligned with trajectory points")]
    Misaligned,
    #[error("raster height must be >= 1")]
    ZeroHeight,
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("bad feature map file: {0}")]
    BadFeatureMap(String),
    #[error("channel {channel} out of range ({channels} channels)")]
    ChannelOutOfRange { channel: usize, channels: usize },
    #[error(transparent)]
    Sig(#[from] SigError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Truncation depths above this are rejected; the marginal value of
/// deeper levels is untested and the dimension doubles per level.
pub const MAX_DEPTH: usize = 4;

/// Number of feature channels for depth `k`: `2^{k+1} - 1`.
pub fn feature_len(depth: usize) -> usize {
    (1 << (depth + 1)) - 1
}

/// Ordered strokes of 2D sample points.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    strokes: Vec<Vec<(f64, f64)>>,
}

impl Trajectory {
    pub fn new(strokes: Vec<Vec<(f64, f64)>>) -> Result<Self, TrajError> {
        for (i, stroke) in strokes.iter().enumerate() {
            if stroke.is_empty() {
                return Err(TrajError::EmptyStroke { index: i });
            }
            for (j, p) in stroke.iter().enumerate() {
                if !(p.0.is_finite() && p.1.is_finite()) {
                    return Err(TrajError::NonFinite { stroke: i, point: j });
                }
            }
        }
        Ok(Self { strokes })
    }

    pub fn strokes(&self) -> &[Vec<(f64, f64)>] {
        &self.strokes
    }

    pub fn stroke_count(&self) -> usize {
        self.strokes.len()
    }

    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    /// `(min_x, min_y, max_x, max_y)` over all points.
    pub fn bounding_box(&self) -> Option<(f64, f64, f64, f64)> {
        let mut bb: Option<(f64, f64, f64, f64)> = None;
        for p in self.strokes.iter().flatten() {
            bb = Some(match bb {
                None => (p.0, p.1, p.0, p.1),
                Some((x0, y0, x1, y1)) => (x0.min(p.0), y0.min(p.1), x1.max(p.0), y1.max(p.1)),
            });
        }
        bb
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            strokes: self
                .strokes
                .iter()
                .map(|s| s.iter().map(|p| (p.0 + dx, p.1 + dy)).collect())
                .collect(),
        }
    }
}

/// Sliding-window settings: width `W` in sample points (odd), shift
/// `V` between window centers, and signature depth `K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub width: usize,
    pub shift: usize,
    pub depth: usize,
}

impl WindowConfig {
    pub fn new(width: usize, shift: usize, depth: usize) -> Result<Self, TrajError> {
        if width % 2 == 0 || width == 0 {
            return Err(TrajError::EvenWindow(width));
        }
        if shift == 0 {
            return Err(TrajError::ZeroShift);
        }
        if depth > MAX_DEPTH {
            return Err(TrajError::DepthTooLarge(depth));
        }
        Ok(Self { width, shift, depth })
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { width: 9, shift: 1, depth: 2 }
    }
}

/// Per-point feature vectors, aligned 1:1 with trajectory points.
/// Entry 0 of every vector is the level-0 signature value 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    depth: usize,
    strokes: Vec<Vec<Vec<f64>>>,
}

impl PointFeatures {
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn feature_len(&self) -> usize {
        feature_len(self.depth)
    }

    pub fn stroke(&self, index: usize) -> &[Vec<f64>] {
        &self.strokes[index]
    }

    pub fn strokes(&self) -> &[Vec<Vec<f64>>] {
        &self.strokes
    }
}

/// Signature of the same-stroke window around every point. The window
/// at point `i` covers indices `[i - (W-1)/2, i + (W-1)/2]` clipped to
/// the stroke; pen-up boundaries are never crossed. With `shift > 1`
/// signatures are computed at every `shift`-th index and intermediate
/// points reuse the nearest computed window.
pub fn window_features(t: &Trajectory, cfg: &WindowConfig) -> Result<PointFeatures, TrajError> {
    let half = (cfg.width - 1) / 2;
    let mut strokes = Vec::with_capacity(t.strokes.len());
    for stroke in &t.strokes {
        let centers: Vec<usize> = (0..stroke.len()).step_by(cfg.shift).collect();
        let mut center_feats = Vec::with_capacity(centers.len());
        for &i in &centers {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(stroke.len() - 1);
            let sig = sig::path_signature(&stroke[lo..=hi], cfg.depth)?;
            center_feats.push(sig.flatten());
        }
        let feats: Vec<Vec<f64>> = (0..stroke.len())
            .map(|i| {
                // Nearest center, ties toward the lower index.
                let c = ((i + cfg.shift / 2) / cfg.shift).min(centers.len() - 1);
                center_feats[c].clone()
            })
            .collect();
        strokes.push(feats);
    }
    Ok(PointFeatures { depth: cfg.depth, strokes })
}

/// C-channel raster of per-point signature features.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureFeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SignatureFeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Row-major `C*H*W` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Writes the `SFM1` binary format (f32 payload).
    pub fn save(&self, path: &Path) -> Result<(), TrajError> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(b"SFM1");
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrajError> {
        let mut file = fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[0..4] != b"SFM1" {
            return Err(TrajError::BadFeatureMap("missing SFM1 header".into()));
        }
        let read_u32 =
            |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        let channels = read_u32(4) as usize;
        let height = read_u32(8) as usize;
        let width = read_u32(12) as usize;
        let expected = channels * height * width;
        if bytes.len() != 16 + expected * 4 {
            return Err(TrajError::BadFeatureMap(format!(
                "payload length {} does not match {}x{}x{}",
                bytes.len() - 16,
                channels,
                height,
                width
            )));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self { channels, height, width, data })
    }

    /// Dumps one channel as an 8-bit binary PGM, min/max normalized.
    pub fn save_pgm(&self, channel: usize, path: &Path) -> Result<(), TrajError> {
        if channel >= self.channels {
            return Err(TrajError::ChannelOutOfRange { channel, channels: self.channels });
        }
        let plane = &self.data[channel * self.height * self.width..][..self.height * self.width];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in plane {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = Vec::with_capacity(plane.len() + 32);
        let mut header = String::new();
        let _ = write!(header, "P5\n{} {}\n255\n", self.width, self.height);
        out.extend_from_slice(header.as_bytes());
        for &v in plane {
            out.push((255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8);
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Rasterizes a trajectory with its per-point features. The trajectory
/// is scaled uniformly so its bounding-box height spans `height`
/// pixels (falling back to width when the box is flat), each segment
/// is painted with integer line stepping and linear interpolation of
/// the endpoint feature vectors, and later strokes overwrite earlier
/// pixels. Output width is clamped to `max_width`.
pub fn rasterize(
    t: &Trajectory,
    features: &PointFeatures,
    height: usize,
    max_width: usize,
) -> Result<SignatureFeatureMap, TrajError> {
    if t.is_empty() {
        return Err(TrajError::Empty);
    }
    if height == 0 {
        return Err(TrajError::ZeroHeight);
    }
    if features.strokes.len() != t.strokes.len()
        || features
            .strokes
            .iter()
            .zip(&t.strokes)
            .any(|(f, s)| f.len() != s.len())
    {
        return Err(TrajError::Misaligned);
    }
    let channels = features.feature_len();
    let (min_x, min_y, max_x, max_y) = t.bounding_box().expect("non-empty");
    let (bw, bh) = (max_x - min_x, max_y - min_y);
    let scale = if bh > 0.0 {
        (height as f64 - 1.0) / bh
    } else if bw > 0.0 {
        (max_width as f64 - 1.0) / bw
    } else {
        1.0
    };
    let width = (((bw * scale).floor() as usize) + 1).clamp(1, max_width);
    // Flat trajectories sit on the vertical midline.
    let v_off = ((height as f64 - 1.0) - bh * scale) / 2.0;

    let to_px = |p: (f64, f64)| -> (i64, i64) {
        let x = ((p.0 - min_x) * scale).round() as i64;
        let y = (height as f64 - 1.0 - ((p.1 - min_y) * scale + v_off)).round() as i64;
        (x, y)
    };

    let mut map = SignatureFeatureMap::zeros(channels, height, width);
    let paint = |map: &mut SignatureFeatureMap, x: i64, y: i64, f: &[f64]| {
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            return;
        }
        for (c, &v) in f.iter().enumerate() {
            map.set(c, y as usize, x as usize, v);
        }
    };

    let mut blend = vec![0.0; channels];
    for (stroke, feats) in t.strokes.iter().zip(&features.strokes) {
        if stroke.len() == 1 {
            let (x, y) = to_px(stroke[0]);
            paint(&mut map, x, y, &feats[0]);
            continue;
        }
        for i in 0..stroke.len() - 1 {
            let (x0, y0) = to_px(stroke[i]);
            let (x1, y1) = to_px(stroke[i + 1]);
            let steps = (x1 - x0).abs().max((y1 - y0).abs());
            if steps == 0 {
                paint(&mut map, x0, y0, &feats[i]);
                continue;
            }
            for s in 0..=steps {
                let lambda = s as f64 / steps as f64;
                let x = x0 + ((x1 - x0) as f64 * lambda).round() as i64;
                let y = y0 + ((y1 - y0) as f64 * lambda).round() as i64;
                for (c, slot) in blend.iter_mut().enumerate() {
                    *slot = (1.0 - lambda) * feats[i][c] + lambda * feats[i + 1][c];
                }
                paint(&mut map, x, y, &blend);
            }
        }
    }
    Ok(map)
}

/// Convenience: window features followed by rasterization.
pub fn extract_feature_map(
    t: &Trajectory,
    cfg: &WindowConfig,
    height: usize,
    max_width: usize,
) -> Result<SignatureFeatureMap, TrajError> {
    let feats = window_features(t, cfg)?;
    rasterize(t, &feats, height, max_width)
}

fn format_trajectory(t: &Trajectory, out: &mut String) {
    for stroke in &t.strokes {
        let mut first = true;
        for p in stroke {
            if !first {
                out.push(' ');
            }
            let _ = write!(out, "{},{}", p.0, p.1);
            first = false;
        }
        out.push('\n');
    }
}

/// Writes one trajectory in the stroke-per-line text format.
pub fn save_trajectory(t: &Trajectory, path: &Path) -> Result<(), TrajError> {
    let mut out = String::new();
    format_trajectory(t, &mut out);
    fs::write(path, out)?;
    Ok(())
}

/// Writes several trajectories separated by blank lines.
pub fn save_trajectories(ts: &[Trajectory], path: &Path) -> Result<(), TrajError> {
    let mut out = String::new();
    for (i, t) in ts.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        format_trajectory(t, &mut out);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses every blank-line-separated sample in a trajectory text file.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, TrajError> {
    let text = fs::read_to_string(path)?;
    parse_trajectories(&text, &path.display().to_string())
}

/// Loads the single trajectory in a file; errors when the file holds
/// none or more than one sample.
pub fn load_trajectory(path: &Path) -> Result<Trajectory, TrajError> {
    let mut all = read_trajectories(path)?;
    match all.len() {
        1 => Ok(all.pop().expect("len checked")),
        0 => Err(TrajError::Parse {
            path: path.display().to_string(),
            line: 1,
            column: 1,
            message: "file contains no strokes".into(),
        }),
        n => Err(TrajError::Parse {
            path: path.display().to_string(),
            line: 1,
            column: 1,
            message: format!("expected one sample, found {n}"),
        }),
    }
}

pub fn parse_trajectories(text: &str, origin: &str) -> Result<Vec<Trajectory>, TrajError> {
    let mut samples = Vec::new();
    let mut strokes: Vec<Vec<(f64, f64)>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_trim = line.trim_end();
        if line_trim.trim().is_empty() {
            if !strokes.is_empty() {
                samples.push(Trajectory::new(std::mem::take(&mut strokes))?);
            }
            continue;
        }
        let mut stroke = Vec::new();
        let mut column = 1usize;
        for token in line_trim.split(' ') {
            if token.is_empty() {
                column += 1;
                continue;
            }
            let point = parse_point(token).map_err(|message| TrajError::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                column,
                message,
            })?;
            stroke.push(point);
            column += token.len() + 1;
        }
        if stroke.is_empty() {
            return Err(TrajError::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                column: 1,
                message: "stroke line has no points".into(),
            });
        }
        strokes.push(stroke);
    }
    if !strokes.is_empty() {
        samples.push(Trajectory::new(strokes)?);
    }
    Ok(samples)
}

fn parse_point(token: &str) -> Result<(f64, f64), String> {
    let (xs, ys) = token
        .split_once(',')
        .ok_or_else(|| format!("expected x,y pair, got {token:?}"))?;
    let x: f64 = xs.parse().map_err(|_| format!("bad x coordinate {xs:?}"))?;
    let y: f64 = ys.parse().map_err(|_| format!("bad y coordinate {ys:?}"))?;
    if !(x.is_finite() && y.is_finite()) {
        return Err(format!("non-finite coordinate in {token:?}"));
    }
    Ok((x, y))
}
