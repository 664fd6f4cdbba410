//! Synthetic motion-action clips, their on-disk format, frame sampling and
//! training augmentations.
//!
//! Each class is a parametric skeletal motion. Frames show the head, torso
//! and legs as bright blobs over a textured background; the arm joints are
//! recorded in the keypoints but never drawn. Appearance randomness (texture,
//! body placement, colors, pixel noise) depends only on the clip slot and the
//! seed, never on the class, so two classes whose trunks stay still render
//! identical RGB frames slot for slot and differ only in their keypoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{read_json, write_json};
use crate::error::{Error, Result};
use crate::heatmap::{keypoints_to_json, load_keypoints, Keypoint, KeypointFrame, NUM_KEYPOINTS};
use crate::numerics::{load_tensor, save_tensor, Tensor};

pub const MANIFEST_SCHEMA: u32 = 1;

/// Motion families available to the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    RaiseArms,
    ClapHands,
    WaveHand,
    JumpUp,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Motion::RaiseArms, Motion::ClapHands, Motion::WaveHand, Motion::JumpUp];

    pub fn name(self) -> &'static str {
        match self {
            Motion::RaiseArms => "raise arms",
            Motion::ClapHands => "clap hands",
            Motion::WaveHand => "wave hand",
            Motion::JumpUp => "jump up",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name.trim().to_lowercase())
            .ok_or_else(|| {
                let known: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!("unknown motion class {name:?}; known: {known:?}"))
            })
    }

    /// Only the arms move; the drawn body parts stay put.
    pub fn static_trunk(self) -> bool {
        !matches!(self, Motion::JumpUp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub schema_version: u32,
    pub classes: Vec<String>,
    pub clips_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA,
            classes: vec!["raise arms".into(), "clap hands".into(), "jump up".into()],
            clips_per_class: 30,
            test_per_class: 10,
            frames: 40,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
}

/// Appearance statistics of a pose-discriminative class pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairCheck {
    pub classes: [usize; 2],
    /// Mean absolute per-pixel difference of the two class mean frames.
    pub between: f64,
    /// Mean absolute per-pixel deviation of frames from their class mean.
    pub within: f64,
}

impl PairCheck {
    pub fn ratio(&self) -> f64 {
        self.between / self.within
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub classes: Vec<ClassEntry>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub generator: GeneratorSpec,
    pub pose_pair: Option<PairCheck>,
}

impl DatasetManifest {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA {
            return Err(Error::InvalidArgument(format!(
                "manifest schema {} unsupported (expected {MANIFEST_SCHEMA})",
                self.schema_version
            )));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidArgument("class ids must be dense 0..M-1".into()));
            }
        }
        if self.train.iter().any(|p| self.test.contains(p)) {
            return Err(Error::InvalidArgument("train and test splits overlap".into()));
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let m: Self = read_json(&root.join("manifest.json"))?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipMeta {
    label: usize,
    class_name: String,
    frames: usize,
    height: usize,
    width: usize,
}

/// One clip: `F x H x W x 3` frames with values in `0..=255`, one keypoint
/// frame per video frame, and the class.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub keypoints: Vec<KeypointFrame>,
    pub label: usize,
    pub class_name: String,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensor(dir.join("frames"), &self.frames)?;
        let kp = dir.join("keypoints.json");
        fs::write(&kp, keypoints_to_json(&self.keypoints)).map_err(|e| Error::io(&kp, e))?;
        let meta = ClipMeta {
            label: self.label,
            class_name: self.class_name.clone(),
            frames: self.num_frames(),
            height: self.height(),
            width: self.width(),
        };
        write_json(&dir.join("meta.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ClipMeta = read_json(&dir.join("meta.json"))?;
        let frames = load_tensor(dir.join("frames"))?;
        if frames.shape() != [meta.frames, meta.height, meta.width, 3] {
            return Err(Error::InvalidArgument(format!(
                "{}: frames shape {:?} disagrees with meta.json",
                dir.display(),
                frames.shape()
            )));
        }
        let keypoints = load_keypoints(&dir.join("keypoints.json"))?;
        if keypoints.len() != meta.frames {
            return Err(Error::InvalidArgument(format!(
                "{}: {} keypoint frames for {} video frames",
                dir.display(),
                keypoints.len(),
                meta.frames
            )));
        }
        Ok(Self {
            frames,
            keypoints,
            label: meta.label,
            class_name: meta.class_name,
        })
    }
}

/// A manifest with all of its clips in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let load = |paths: &[String]| -> Result<Vec<VideoClip>> {
            paths.iter().map(|p| VideoClip::load(&root.join(p))).collect()
        };
        Ok(Self {
            root: root.to_path_buf(),
            train: load(&manifest.train)?,
            test: load(&manifest.test)?,
            manifest,
        })
    }

    pub fn split(&self, name: Split) -> &[VideoClip] {
        match name {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Generation

/// Body layout in a 32 x 32 reference frame, indexed like the COCO-18 slots.
/// Arm joints (elbows, wrists) are placeholders filled in per motion.
const REST_POSE: [(f64, f64); NUM_KEYPOINTS] = [
    (16.0, 6.0),  // nose
    (16.0, 9.0),  // neck
    (12.5, 10.0), // r_shoulder
    (11.5, 14.0), // r_elbow
    (11.0, 18.0), // r_wrist
    (19.5, 10.0), // l_shoulder
    (20.5, 14.0), // l_elbow
    (21.0, 18.0), // l_wrist
    (13.5, 18.0), // r_hip
    (13.5, 23.0), // r_knee
    (13.5, 28.0), // r_ankle
    (18.5, 18.0), // l_hip
    (18.5, 23.0), // l_knee
    (18.5, 28.0), // l_ankle
    (15.0, 5.3),  // r_eye
    (17.0, 5.3),  // l_eye
    (14.0, 5.8),  // r_ear
    (18.0, 5.8),  // l_ear
];

const ARM_JOINTS: [usize; 4] = [3, 4, 6, 7];

fn is_arm(i: usize) -> bool {
    ARM_JOINTS.contains(&i)
}

/// Per-slot appearance, shared by every class.
struct Appearance {
    base: [f64; 3],
    gratings: [(f64, f64, f64, f64); 2],
    body_color: [f64; 3],
    offset: (f64, f64),
    scale: f64,
}

impl Appearance {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut grating = || {
            (
                rng.gen_range(0.15..0.6),
                rng.gen_range(0.0..std::f64::consts::PI),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(15.0..35.0),
            )
        };
        let gratings = [grating(), grating()];
        Self {
            base: [
                rng.gen_range(40.0..140.0),
                rng.gen_range(40.0..140.0),
                rng.gen_range(40.0..140.0),
            ],
            gratings,
            body_color: [
                rng.gen_range(200.0..255.0),
                rng.gen_range(200.0..255.0),
                rng.gen_range(200.0..255.0),
            ],
            offset: (rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)),
            scale: rng.gen_range(0.9..1.1),
        }
    }
}

/// Per-clip motion parameters.
struct MotionParams {
    phase: f64,
    speed: f64,
    confidence: [f64; NUM_KEYPOINTS],
}

impl MotionParams {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut confidence = [0.0; NUM_KEYPOINTS];
        for c in confidence.iter_mut() {
            *c = rng.gen_range(0.6..1.0);
        }
        Self {
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            speed: rng.gen_range(0.8..1.25),
            confidence,
        }
    }
}

/// Reference-frame joint positions for one frame (progress `u` in `[0,1]`).
fn pose_at(motion: Motion, u: f64, mp: &MotionParams) -> [(f64, f64); NUM_KEYPOINTS] {
    use std::f64::consts::TAU;
    let mut p = REST_POSE;
    let (rs, ls) = (p[2], p[5]);
    match motion {
        Motion::RaiseArms => {
            // Both arms sweep outward from the hips to above the head.
            let progress = (u * mp.speed).min(1.0);
            let angle = (15.0 + 150.0 * progress).to_radians();
            let (s, c) = angle.sin_cos();
            p[3] = (rs.0 - 4.0 * s, rs.1 + 4.0 * c);
            p[4] = (rs.0 - 8.0 * s, rs.1 + 8.0 * c);
            p[6] = (ls.0 + 4.0 * s, ls.1 + 4.0 * c);
            p[7] = (ls.0 + 8.0 * s, ls.1 + 8.0 * c);
        }
        Motion::ClapHands => {
            let phi = TAU * 3.0 * mp.speed * u + mp.phase;
            let spread = 0.6 + 3.0 * phi.cos().abs();
            p[3] = (16.0 - 5.5, 14.0);
            p[4] = (16.0 - spread, 12.5);
            p[6] = (16.0 + 5.5, 14.0);
            p[7] = (16.0 + spread, 12.5);
        }
        Motion::WaveHand => {
            let phi = TAU * 2.5 * mp.speed * u + mp.phase;
            p[3] = (rs.0 - 3.0, 6.5);
            p[4] = (rs.0 - 3.0 + 3.0 * phi.sin(), 2.5);
            p[6] = (ls.0 + 1.0, 14.0);
            p[7] = (ls.0 + 1.5, 18.0);
        }
        Motion::JumpUp => {
            let phi = TAU * 2.0 * mp.speed * u + mp.phase;
            let lift = 5.0 * phi.sin().abs();
            for q in p.iter_mut() {
                q.1 -= lift;
            }
        }
    }
    p
}

fn place(point: (f64, f64), app: &Appearance, sx: f64, sy: f64) -> (f64, f64) {
    let x = 16.0 + (point.0 - 16.0) * app.scale + app.offset.0;
    let y = 16.0 + (point.1 - 16.0) * app.scale + app.offset.1;
    (x * sx, y * sy)
}

fn render_frame(
    trunk: &[(f64, f64)],
    app: &Appearance,
    noise_rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    out: &mut Vec<f64>,
) {
    let blob = 1.3 * app.scale * (width.min(height) as f64 / 32.0);
    let denom = 2.0 * blob * blob;
    for r in 0..height {
        for c in 0..width {
            let (x, y) = (c as f64 * 32.0 / width as f64, r as f64 * 32.0 / height as f64);
            let mut tex = 0.0;
            for &(freq, theta, phase, amp) in &app.gratings {
                tex += amp * (freq * (x * theta.cos() + y * theta.sin()) + phase).sin();
            }
            let alpha = trunk
                .iter()
                .map(|&(px, py)| {
                    let d2 = (c as f64 - px).powi(2) + (r as f64 - py).powi(2);
                    (-d2 / denom).exp()
                })
                .fold(0.0, f64::max);
            for ch in 0..3 {
                let bg = app.base[ch] + tex + noise_rng.gen_range(-8.0..8.0);
                let v = bg * (1.0 - alpha) + app.body_color[ch] * alpha;
                out.push(v.round().clamp(0.0, 255.0));
            }
        }
    }
}

/// Seeds a stream from the dataset seed and a few labels.
fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0x0100_0000_01B3).rotate_left(29) ^ 0xD1B5_4A32_D192_ED03;
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn generate_clip(spec: &GeneratorSpec, motion: Motion, label: usize, slot: usize) -> VideoClip {
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    let app = Appearance::draw(&mut stream(spec.seed, &[1, slot as u64]));
    let mut noise_rng = stream(spec.seed, &[2, slot as u64]);
    let mut motion_rng = stream(spec.seed, &[3, motion as u64, slot as u64]);
    let mp = MotionParams::draw(&mut motion_rng);
    let (sx, sy) = (w as f64 / 32.0, h as f64 / 32.0);

    let mut pixels = Vec::with_capacity(f * h * w * 3);
    let mut keypoints = Vec::with_capacity(f);
    for i in 0..f {
        let u = if f > 1 { i as f64 / (f - 1) as f64 } else { 0.0 };
        let joints = pose_at(motion, u, &mp);
        let placed: Vec<(f64, f64)> = joints.iter().map(|&j| place(j, &app, sx, sy)).collect();
        let trunk: Vec<(f64, f64)> = (0..NUM_KEYPOINTS).filter(|&j| !is_arm(j)).map(|j| placed[j]).collect();
        render_frame(&trunk, &app, &mut noise_rng, h, w, &mut pixels);

        let mut kf = KeypointFrame::invisible();
        for (j, &(x, y)) in placed.iter().enumerate() {
            let (x, y) = if is_arm(j) {
                (x + motion_rng.gen_range(-0.3..0.3), y + motion_rng.gen_range(-0.3..0.3))
            } else {
                (x, y)
            };
            kf.points[j] = Keypoint::new(x, y, mp.confidence[j]);
        }
        keypoints.push(kf);
    }
    VideoClip {
        frames: Tensor::from_parts(vec![f, h, w, 3], pixels),
        keypoints,
        label,
        class_name: motion.name().to_string(),
    }
}

fn validate_spec(spec: &GeneratorSpec) -> Result<Vec<Motion>> {
    if spec.schema_version != MANIFEST_SCHEMA {
        return Err(Error::InvalidArgument(format!(
            "generator schema {} unsupported (expected {MANIFEST_SCHEMA})",
            spec.schema_version
        )));
    }
    if spec.classes.len() < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let motions = spec
        .classes
        .iter()
        .map(|c| Motion::from_name(c))
        .collect::<Result<Vec<_>>>()?;
    for (i, m) in motions.iter().enumerate() {
        if motions[..i].contains(m) {
            return Err(Error::InvalidArgument(format!("class {:?} listed twice", m.name())));
        }
    }
    if motions.iter().filter(|m| m.static_trunk()).count() < 2 {
        return Err(Error::InvalidArgument(
            "need two classes with a still trunk to form a pose-discriminative pair".into(),
        ));
    }
    if spec.test_per_class >= spec.clips_per_class {
        return Err(Error::InvalidArgument("test_per_class must leave training clips".into()));
    }
    if spec.frames == 0 || spec.height < 8 || spec.width < 8 {
        return Err(Error::InvalidArgument("frames must be positive and images at least 8x8".into()));
    }
    Ok(motions)
}

fn slug(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join("_")
}

/// Writes a synthetic dataset under `root` and returns its manifest.
pub fn generate_dataset(spec: &GeneratorSpec, root: &Path) -> Result<DatasetManifest> {
    let motions = validate_spec(spec)?;
    fs::create_dir_all(root.join("clips")).map_err(|e| Error::io(root, e))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut pair_clips: [Vec<VideoClip>; 2] = [Vec::new(), Vec::new()];
    let pair: Vec<usize> = (0..motions.len()).filter(|&i| motions[i].static_trunk()).take(2).collect();

    for (label, &motion) in motions.iter().enumerate() {
        for slot in 0..spec.clips_per_class {
            let clip = generate_clip(spec, motion, label, slot);
            let rel = format!("clips/{}_{slot:03}", slug(motion.name()));
            clip.save(&root.join(&rel))?;
            if slot < spec.clips_per_class - spec.test_per_class {
                train.push(rel);
            } else {
                test.push(rel);
            }
            if let Some(k) = pair.iter().position(|&p| p == label) {
                pair_clips[k].push(clip);
            }
        }
    }

    let check = pair_check([pair[0], pair[1]], &pair_clips[0], &pair_clips[1])?;
    if check.ratio() >= 0.05 {
        return Err(Error::InvalidArgument(format!(
            "pose pair appearance check failed: between/within = {:.4}",
            check.ratio()
        )));
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA,
        classes: motions
            .iter()
            .enumerate()
            .map(|(id, m)| ClassEntry {
                id,
                name: m.name().into(),
            })
            .collect(),
        train,
        test,
        generator: spec.clone(),
        pose_pair: Some(check),
    };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn mean_frame(clips: &[VideoClip]) -> Vec<f64> {
    let per_frame = clips[0].frames.len() / clips[0].num_frames();
    let mut acc = vec![0.0; per_frame];
    let mut n = 0usize;
    for c in clips {
        for frame in c.frames.data().chunks(per_frame) {
            for (a, v) in acc.iter_mut().zip(frame) {
                *a += v;
            }
            n += 1;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Compares the per-pixel mean frames of two classes against the spread of
/// frames around their own class mean.
pub fn pair_check(classes: [usize; 2], a: &[VideoClip], b: &[VideoClip]) -> Result<PairCheck> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("pair check needs clips of both classes".into()));
    }
    let (ma, mb) = (mean_frame(a), mean_frame(b));
    let between = ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ma.len() as f64;
    let mut dev = 0.0;
    let mut count = 0usize;
    for (clips, mean) in [(a, &ma), (b, &mb)] {
        for c in clips {
            for frame in c.frames.data().chunks(mean.len()) {
                dev += frame.iter().zip(mean.iter()).map(|(x, m)| (x - m).abs()).sum::<f64>();
                count += mean.len();
            }
        }
    }
    Ok(PairCheck {
        classes,
        between,
        within: dev / count as f64,
    })
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    TrainRandomInSegment,
    EvalSegmentCenter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub frames: usize,
    pub mode: SampleMode,
}

/// Picks one frame index in each of `T` equal segments of `0..F`.
pub fn sample_frames<R: Rng + ?Sized>(total: usize, cfg: &SamplerConfig, rng: &mut R) -> Result<Vec<usize>> {
    let t = cfg.frames;
    if t == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one frame".into()));
    }
    if total < t {
        return Err(Error::InvalidArgument(format!("clip has {total} frames, need {t}")));
    }
    Ok((0..t)
        .map(|i| match cfg.mode {
            SampleMode::EvalSegmentCenter => ((2 * i + 1) * total) / (2 * t),
            SampleMode::TrainRandomInSegment => {
                let (lo, hi) = (i * total / t, (i + 1) * total / t);
                rng.gen_range(lo..hi)
            }
        })
        .collect())
}

/// Copies frames `idx` of an `F x ...` tensor.
pub fn gather_frames(frames: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let f = frames.shape()[0];
    let per = frames.len() / f;
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        if i >= f {
            return Err(Error::InvalidArgument(format!("frame {i} out of range 0..{f}")));
        }
        data.extend_from_slice(&frames.data()[i * per..(i + 1) * per]);
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::from_parts(shape, data))
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub grayscale: bool,
    /// Side of the random square crop, resized back to the frame size.
    pub crop: Option<usize>,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self {
            hflip: true,
            grayscale: true,
            crop: Some(28),
        }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        Self {
            hflip: false,
            grayscale: false,
            crop: None,
        }
    }
}

pub const HFLIP_PROB: f64 = 0.5;
pub const GRAYSCALE_PROB: f64 = 0.2;

/// Random choices for one clip; applied identically to every frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub grayscale: bool,
    /// `(x0, y0, side)` of the crop window.
    pub crop: Option<(usize, usize, usize)>,
}

impl AugmentPlan {
    pub fn draw<R: Rng + ?Sized>(flags: &AugmentFlags, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        let hflip = flags.hflip && rng.gen_bool(HFLIP_PROB);
        let grayscale = flags.grayscale && rng.gen_bool(GRAYSCALE_PROB);
        let crop = match flags.crop {
            None => None,
            Some(side) if side == 0 || side > height || side > width => {
                return Err(Error::InvalidArgument(format!(
                    "crop {side} does not fit a {height}x{width} frame"
                )))
            }
            Some(side) => Some((rng.gen_range(0..=width - side), rng.gen_range(0..=height - side), side)),
        };
        Ok(Self { hflip, grayscale, crop })
    }

    /// Frames `T x H x W x C`; grayscale applies only when `C == 3`.
    pub fn apply_images(&self, images: &Tensor, color: bool) -> Result<Tensor> {
        let mut out = images.clone();
        if let Some((x0, y0, side)) = self.crop {
            out = crop_resize(&out, x0, y0, side)?;
        }
        if self.hflip {
            out = hflip(&out)?;
        }
        if self.grayscale && color {
            out = grayscale(&out)?;
        }
        Ok(out)
    }

    pub fn apply_keypoints(&self, frames: &[KeypointFrame], height: usize, width: usize) -> Vec<KeypointFrame> {
        frames
            .iter()
            .map(|kf| {
                let mut kf = kf.clone();
                for p in kf.points.iter_mut() {
                    if let Some((x0, y0, side)) = self.crop {
                        p.x = (p.x - x0 as f64 + 0.5) * width as f64 / side as f64 - 0.5;
                        p.y = (p.y - y0 as f64 + 0.5) * height as f64 / side as f64 - 0.5;
                    }
                    if self.hflip {
                        p.x = (width - 1) as f64 - p.x;
                    }
                }
                kf
            })
            .collect()
    }
}

/// Output of [`augment`].
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub frames: Tensor,
    pub heatmaps: Option<Tensor>,
    pub keypoints: Vec<KeypointFrame>,
}

/// Draws one plan and applies it to frames, heatmaps and keypoints alike.
/// Grayscale touches frames only.
pub fn augment<R: Rng + ?Sized>(
    frames: &Tensor,
    heatmaps: Option<&Tensor>,
    keypoints: &[KeypointFrame],
    rng: &mut R,
    flags: &AugmentFlags,
) -> Result<Augmented> {
    let (h, w) = image_dims(frames)?;
    let plan = AugmentPlan::draw(flags, h, w, rng)?;
    Ok(Augmented {
        frames: plan.apply_images(frames, true)?,
        heatmaps: heatmaps.map(|hm| plan.apply_images(hm, false)).transpose()?,
        keypoints: plan.apply_keypoints(keypoints, h, w),
    })
}

fn image_dims(images: &Tensor) -> Result<(usize, usize)> {
    match images.shape() {
        &[_, h, w, _] => Ok((h, w)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected T x H x W x C".into(),
        }),
    }
}

pub fn hflip(images: &Tensor) -> Result<Tensor> {
    let (_, w) = image_dims(images)?;
    let c = images.shape()[3];
    let src = images.data();
    let mut out = vec![0.0; src.len()];
    for (row_out, row_in) in out.chunks_mut(w * c).zip(src.chunks(w * c)) {
        for x in 0..w {
            row_out[x * c..(x + 1) * c].copy_from_slice(&row_in[(w - 1 - x) * c..(w - x) * c]);
        }
    }
    Ok(Tensor::from_parts(images.shape().to_vec(), out))
}

/// Luma conversion replicated over the three channels. Pixels that are
/// already gray are left bit-for-bit unchanged.
pub fn grayscale(images: &Tensor) -> Result<Tensor> {
    image_dims(images)?;
    if images.shape()[3] != 3 {
        return Err(Error::InvalidArgument("grayscale needs three channels".into()));
    }
    let mut out = images.data().to_vec();
    for px in out.chunks_mut(3) {
        if px[0] == px[1] && px[1] == px[2] {
            continue;
        }
        let y = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        px.fill(y);
    }
    Ok(Tensor::from_parts(images.shape().to_vec(), out))
}

/// Crops the `side x side` window at `(x0, y0)` and resizes it back to the
/// input extent with bilinear interpolation (half-pixel centers).
pub fn crop_resize(images: &Tensor, x0: usize, y0: usize, side: usize) -> Result<Tensor> {
    let (h, w) = image_dims(images)?;
    if x0 + side > w || y0 + side > h || side == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop window ({x0},{y0},{side}) outside {h}x{w}"
        )));
    }
    let (t, c) = (images.shape()[0], images.shape()[3]);
    let src = images.data();
    let coords = |dst: usize, extent: usize, origin: usize| {
        let s = ((dst as f64 + 0.5) * side as f64 / extent as f64 - 0.5).clamp(0.0, (side - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(side - 1);
        (origin + lo, origin + hi, s - lo as f64)
    };
    let xs: Vec<_> = (0..w).map(|x| coords(x, w, x0)).collect();
    let ys: Vec<_> = (0..h).map(|y| coords(y, h, y0)).collect();
    let mut out = Vec::with_capacity(src.len());
    for f in 0..t {
        let at = |y: usize, x: usize, ch: usize| src[((f * h + y) * w + x) * c + ch];
        for &(ylo, yhi, fy) in &ys {
            for &(xlo, xhi, fx) in &xs {
                for ch in 0..c {
                    let top = at(ylo, xlo, ch) * (1.0 - fx) + at(ylo, xhi, ch) * fx;
                    let bottom = at(yhi, xlo, ch) * (1.0 - fx) + at(yhi, xhi, ch) * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    Ok(Tensor::from_parts(images.shape().to_vec(), out))
}
