//! Pose-gated frame embeddings pooled by text-conditioned temporal saliency.
//!
//! For one clip with frame embeddings `v` (`T x d`), pose embeddings `p`
//! (`T x d`) and class-name word embeddings `t` (`N x d`):
//!
//! ```text
//! f_n = sigmoid(p_n) * v_n                                  (elementwise)
//! S_n = 1/N sum_k exp(f_n . t_k / tau) / sum_m exp(f_m . t_k / tau)
//! e_v = sum_n S_n f_n
//! ```
//!
//! With `ungated_pooling` the saliency logits and the pooled rows use `v`
//! instead of `f`, which makes the pose branch inert.

use serde::{Deserialize, Serialize};

use crate::encoders::{BoundEncoders, Encoders};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Which input branches are live. Disabled branches are replaced by a
/// constant vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityMask {
    pub video: bool,
    pub pose: bool,
    pub text: bool,
}

impl ModalityMask {
    pub const ALL: Self = Self {
        video: true,
        pose: true,
        text: true,
    };

    /// The four ablation modes, in reporting order.
    pub const ABLATION_MODES: [Self; 4] = [
        Self {
            video: false,
            pose: true,
            text: true,
        },
        Self {
            video: true,
            pose: false,
            text: true,
        },
        Self {
            video: true,
            pose: true,
            text: false,
        },
        Self::ALL,
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.video || self.pose || self.text) {
            return Err(Error::InvalidArgument("modality mask enables nothing".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.video {
            parts.push("Video");
        }
        if self.pose {
            parts.push("Pose");
        }
        if self.text {
            parts.push("Text");
        }
        parts.join(" + ")
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (on, n) in [(self.video, "video"), (self.pose, "pose"), (self.text, "text")] {
            if on {
                out.push(n.to_string());
            }
        }
        out
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut m = Self {
            video: false,
            pose: false,
            text: false,
        };
        for n in names {
            match n.as_ref() {
                "video" => m.video = true,
                "pose" => m.pose = true,
                "text" => m.text = true,
                other => return Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

impl Default for ModalityMask {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub tau_saliency: f64,
    pub ungated_pooling: bool,
    /// Replacement value for a disabled pose or text branch.
    pub constant_vector_value: f64,
    /// Replacement value for a disabled video branch.
    pub masked_video_value: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tau_saliency: 0.01,
            ungated_pooling: false,
            constant_vector_value: 0.0,
            masked_video_value: 1.0,
        }
    }
}

/// `sigmoid(p) * v`, row by row.
pub fn pose_gate(g: &mut Graph, p: Var, v: Var) -> Result<Var> {
    if g.value(p).shape() != g.value(v).shape() {
        return Err(Error::ShapeMismatch {
            op: "pose_gate",
            left: g.value(p).shape().to_vec(),
            right: g.value(v).shape().to_vec(),
        });
    }
    let s = g.sigmoid(p)?;
    g.mul(s, v)
}

/// Frame weights `T x 1`: per word, a softmax over frames of `f . t / tau`,
/// averaged over words.
pub fn temporal_saliency(g: &mut Graph, f: Var, words: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("saliency temperature must be positive, got {tau}")));
    }
    let (_, d) = g.value(f).dims2()?;
    let (n, dw) = g.value(words).dims2()?;
    if d != dw {
        return Err(Error::ShapeMismatch {
            op: "temporal_saliency",
            left: g.value(f).shape().to_vec(),
            right: g.value(words).shape().to_vec(),
        });
    }
    let wt = g.transpose(words)?;
    let sim = g.matmul(f, wt)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let per_word = g.softmax(logits, 0)?;
    let avg = g.constant(Tensor::full(&[n, 1], 1.0 / n as f64));
    g.matmul(per_word, avg)
}

/// Uniform `1/T` weights, used when the text branch is disabled.
pub fn uniform_saliency(g: &mut Graph, frames: usize) -> Var {
    g.constant(Tensor::full(&[frames, 1], 1.0 / frames as f64))
}

/// `e_v = sum_n s_n f_n` as a `1 x d` row.
pub fn aggregate(g: &mut Graph, f: Var, s: Var) -> Result<Var> {
    let (t, _) = g.value(f).dims2()?;
    if g.value(s).shape() != [t, 1] {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            left: g.value(f).shape().to_vec(),
            right: g.value(s).shape().to_vec(),
        });
    }
    let st = g.transpose(s)?;
    g.matmul(st, f)
}

/// Cosine similarity of two rows as a `1`-element variable.
pub fn cosine_similarity_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let a2 = g.reshape(a, &[1, g.value(a).len()])?;
    let b2 = g.reshape(b, &[1, g.value(b).len()])?;
    let an = g.l2_normalize_rows(a2)?;
    let bn = g.l2_normalize_rows(b2)?;
    let prod = g.mul(an, bn)?;
    g.sum(prod)
}

/// Saliency weights of one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyWeights {
    pub weights: Vec<f64>,
    pub tau: f64,
}

impl SaliencyWeights {
    pub fn from_var(g: &Graph, s: Var, tau: f64) -> Self {
        Self {
            weights: g.value(s).data().to_vec(),
            tau,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("saliency serializes")
    }
}

/// Value-level saliency for `f` (`T x d`) and `words` (`N x d`).
pub fn saliency_weights(f: &Tensor, words: &Tensor, tau: f64) -> Result<SaliencyWeights> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let wv = g.constant(words.clone());
    let s = temporal_saliency(&mut g, fv, wv, tau)?;
    Ok(SaliencyWeights::from_var(&g, s, tau))
}

/// Value-level pooling of `f` (`T x d`) into a `d` vector.
pub fn aggregate_values(f: &Tensor, s: &SaliencyWeights) -> Result<Tensor> {
    let (t, d) = f.dims2()?;
    if s.weights.len() != t {
        return Err(Error::InvalidArgument(format!(
            "{} saliency weights for {t} frames",
            s.weights.len()
        )));
    }
    let mut out = vec![0.0; d];
    for (n, w) in s.weights.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(f.row(n)) {
            *o += w * x;
        }
    }
    Tensor::checked("aggregate", vec![d], out)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (na, nb) = (norm(a.data()), norm(b.data()));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_similarity"));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores `e_v` against every category row and picks the best.
pub fn classify(e_v: &Tensor, categories: &Tensor) -> Result<(usize, Tensor)> {
    let (m, _) = categories.dims2()?;
    let scores = (0..m)
        .map(|c| cosine_similarity(e_v, &Tensor::from_parts(vec![categories.shape()[1]], categories.row(c).to_vec())))
        .collect::<Result<Vec<_>>>()?;
    Ok((argmax(&scores), Tensor::from_parts(vec![m], scores)))
}

/// Like [`classify`], but row `c` of `video_embs` is the video embedding
/// pooled with the words of category `c`.
pub fn classify_conditioned(video_embs: &Tensor, categories: &Tensor) -> Result<(usize, Tensor)> {
    if video_embs.shape() != categories.shape() {
        return Err(Error::ShapeMismatch {
            op: "classify_conditioned",
            left: video_embs.shape().to_vec(),
            right: categories.shape().to_vec(),
        });
    }
    let (m, d) = categories.dims2()?;
    let scores = (0..m)
        .map(|c| {
            cosine_similarity(
                &Tensor::from_parts(vec![d], video_embs.row(c).to_vec()),
                &Tensor::from_parts(vec![d], categories.row(c).to_vec()),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((argmax(&scores), Tensor::from_parts(vec![m], scores)))
}

/// Cosine similarities between `B` video embeddings and `M` categories.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Tensor,
}

impl SimilarityMatrix {
    pub fn new(video_embs: &Tensor, categories: &Tensor) -> Result<Self> {
        let (b, _) = video_embs.dims2()?;
        let mut rows = Vec::with_capacity(b);
        for i in 0..b {
            let e = Tensor::from_parts(vec![video_embs.shape()[1]], video_embs.row(i).to_vec());
            rows.push(classify(&e, categories)?.1.into_data());
        }
        Ok(Self {
            scores: Tensor::from_rows(&rows)?,
        })
    }
}

/// Fuses one clip's embeddings. `None` marks a disabled branch: video and
/// pose are replaced by constant `T x d` blocks, text by uniform saliency.
/// Returns `e_v` (`1 x d`) and the saliency (`T x 1`).
pub fn fuse_clip(
    g: &mut Graph,
    frames: Option<Var>,
    poses: Option<Var>,
    words: Option<Var>,
    shape: (usize, usize),
    cfg: &FusionConfig,
) -> Result<(Var, Var)> {
    let (t, d) = shape;
    let v = match frames {
        Some(v) => v,
        None => g.constant(Tensor::full(&[t, d], cfg.masked_video_value)),
    };
    let p = match poses {
        Some(p) => p,
        None => g.constant(Tensor::full(&[t, d], cfg.constant_vector_value)),
    };
    let f = pose_gate(g, p, v)?;
    let pooled_rows = if cfg.ungated_pooling { v } else { f };
    let s = match words {
        Some(w) => temporal_saliency(g, pooled_rows, w, cfg.tau_saliency)?,
        None => uniform_saliency(g, t),
    };
    let e_v = aggregate(g, pooled_rows, s)?;
    Ok((e_v, s))
}

/// Encodes and fuses one clip.
///
/// `frames` holds `T x H x W x 3` pixels in `[0, 1]`, `pose_images` holds
/// `T x H x W x 1` in `[0, 1]`. Returns `e_v` (`1 x d`) and the saliency.
#[allow(clippy::too_many_arguments)]
pub fn forward_video(
    g: &mut Graph,
    encoders: &Encoders,
    bound: &BoundEncoders,
    frames: &Tensor,
    pose_images: &Tensor,
    class_name: &str,
    mask: ModalityMask,
    cfg: &FusionConfig,
) -> Result<(Var, Var)> {
    mask.validate()?;
    let t = frames.shape()[0];
    if pose_images.shape()[0] != t {
        return Err(Error::ShapeMismatch {
            op: "forward_video",
            left: frames.shape().to_vec(),
            right: pose_images.shape().to_vec(),
        });
    }
    let v = if mask.video {
        Some(encoders.encode_frames(g, bound, frames)?)
    } else {
        None
    };
    let p = if mask.pose {
        Some(encoders.encode_poses(g, bound, pose_images)?)
    } else {
        None
    };
    let words = if mask.text {
        Some(encoders.encode_words(g, bound, class_name)?.0)
    } else {
        None
    };
    fuse_clip(g, v, p, words, (t, encoders.embed_dim()), cfg)
}
