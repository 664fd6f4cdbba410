//! Keypoint heatmaps: 18 Gaussian keypoint channels plus a background
//! channel, and their reduction to a single 0..255 pose image.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Keypoint slots per frame (COCO-18 layout).
pub const NUM_KEYPOINTS: usize = 18;
/// Keypoint channels plus one background channel.
pub const NUM_CHANNELS: usize = NUM_KEYPOINTS + 1;
pub const BACKGROUND: usize = NUM_KEYPOINTS;

/// COCO-18 slot names, in channel order.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose", "neck", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow", "l_wrist", "r_hip",
    "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "r_eye", "l_eye", "r_ear", "l_ear",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub visible: bool,
}

impl Keypoint {
    /// A confidence of zero marks the point invisible.
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        let confidence = confidence.clamp(0.0, 1.0);
        Self {
            x,
            y,
            confidence,
            visible: confidence > 0.0,
        }
    }

    pub fn hidden() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            confidence: 0.0,
            visible: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFrame {
    pub points: [Keypoint; NUM_KEYPOINTS],
}

impl KeypointFrame {
    pub fn invisible() -> Self {
        Self {
            points: [Keypoint::hidden(); NUM_KEYPOINTS],
        }
    }

    fn from_triples(triples: &[[f64; 3]]) -> Result<Self> {
        if triples.len() != NUM_KEYPOINTS {
            return Err(Error::InvalidArgument(format!(
                "keypoint frame has {} entries, expected {NUM_KEYPOINTS}",
                triples.len()
            )));
        }
        let mut points = [Keypoint::hidden(); NUM_KEYPOINTS];
        for (p, t) in points.iter_mut().zip(triples) {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite keypoint value".into()));
            }
            *p = Keypoint::new(t[0], t[1], t[2]);
        }
        Ok(Self { points })
    }

    fn to_triples(&self) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .map(|p| if p.visible { [p.x, p.y, p.confidence] } else { [p.x, p.y, 0.0] })
            .collect()
    }
}

/// Parses the keypoint file format: an array of frames, each an array of 18
/// `[x, y, confidence]` triples.
pub fn parse_keypoints(text: &str) -> std::result::Result<Vec<KeypointFrame>, String> {
    let raw: Vec<Vec<[f64; 3]>> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    raw.iter()
        .map(|f| KeypointFrame::from_triples(f).map_err(|e| e.to_string()))
        .collect()
}

pub fn keypoints_to_json(frames: &[KeypointFrame]) -> String {
    let raw: Vec<Vec<[f64; 3]>> = frames.iter().map(KeypointFrame::to_triples).collect();
    serde_json::to_string(&raw).expect("keypoints serialize")
}

pub fn load_keypoints(path: &Path) -> Result<Vec<KeypointFrame>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn check_extent(height: usize, width: usize) -> Result<()> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!(
            "heatmap extent {height}x{width} below 8x8"
        )));
    }
    Ok(())
}

/// Renders an `H x W x 19` heatmap. Visible point `c` contributes
/// `confidence * exp(-d^2 / (2 sigma^2))` to channel `c`; the last channel is
/// `1 - max` over the keypoint channels, clamped to `[0, 1]`. Points outside
/// the image are clamped onto its border.
pub fn render_heatmap(kf: &KeypointFrame, height: usize, width: usize, sigma: f64) -> Result<Tensor> {
    check_extent(height, width)?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let denom = 2.0 * sigma * sigma;
    let mut data = vec![0.0; height * width * NUM_CHANNELS];
    for (c, p) in kf.points.iter().enumerate() {
        if !p.visible || p.confidence <= 0.0 {
            continue;
        }
        let px = p.x.clamp(0.0, (width - 1) as f64);
        let py = p.y.clamp(0.0, (height - 1) as f64);
        for r in 0..height {
            let dy = r as f64 - py;
            for col in 0..width {
                let dx = col as f64 - px;
                data[(r * width + col) * NUM_CHANNELS + c] = p.confidence * (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    for px in data.chunks_mut(NUM_CHANNELS) {
        let m = px[..NUM_KEYPOINTS].iter().copied().fold(0.0, f64::max);
        px[BACKGROUND] = (1.0 - m).clamp(0.0, 1.0);
    }
    Ok(Tensor::from_parts(vec![height, width, NUM_CHANNELS], data))
}

/// Per-pixel max over the 18 keypoint channels (background excluded),
/// rescaled linearly so the global peak is exactly 255. An all-zero input
/// maps to all zeros.
pub fn reduce_heatmap(full: &Tensor) -> Result<Tensor> {
    let (h, w) = match full.shape() {
        &[h, w, c] if c == NUM_CHANNELS => (h, w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("expected H x W x {NUM_CHANNELS}"),
            })
        }
    };
    let m: Vec<f64> = full
        .data()
        .chunks(NUM_CHANNELS)
        .map(|px| px[..NUM_KEYPOINTS].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let peak = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let out = if peak > 0.0 {
        m.iter().map(|v| v / peak * 255.0).collect()
    } else {
        vec![0.0; h * w]
    };
    Tensor::checked("reduce_heatmap", vec![h, w, 1], out)
}

/// A rendered heatmap together with its reduced form.
#[derive(Clone, Debug)]
pub struct HeatmapStack {
    pub full: Tensor,
    pub reduced: Tensor,
    pub height: usize,
    pub width: usize,
}

impl HeatmapStack {
    pub fn render(kf: &KeypointFrame, height: usize, width: usize, sigma: f64) -> Result<Self> {
        let full = render_heatmap(kf, height, width, sigma)?;
        let reduced = reduce_heatmap(&full)?;
        Ok(Self {
            full,
            reduced,
            height,
            width,
        })
    }
}

/// Reduced pose images for a sequence of frames, `T x H x W x 1`, values in
/// `0..=255`.
pub fn pose_images(frames: &[KeypointFrame], height: usize, width: usize, sigma: f64) -> Result<Tensor> {
    let parts = frames
        .iter()
        .map(|kf| {
            let r = reduce_heatmap(&render_heatmap(kf, height, width, sigma)?)?;
            r.reshape(&[1, height, width, 1])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_leading(&parts)
}

/// Writes a single-channel image as binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        &[h, w] | &[h, w, 1] => (h, w),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "expected a single-channel image".into(),
            })
        }
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
