//! Bidirectional supervised contrastive loss over cosine similarities.
//!
//! For a batch of `B` video embeddings `e_v`, class embeddings `e_c` (row `i`
//! is the embedding of class `y_i`) and positive sets
//! `M(i) = { m : y_m = y_i }`:
//!
//! ```text
//! L_v2c = -1/B sum_i 1/|M(i)| sum_{m in M(i)} log softmax_j(cos(e_ci, e_vj) / tau)[m]
//! L_c2v = -1/B sum_i 1/|M(i)| sum_{m in M(i)} log softmax_j(cos(e_vi, e_cj) / tau)[m]
//! L     = (L_v2c + L_c2v) / 2
//! ```

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Indices sharing each anchor's label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositiveSets {
    sets: Vec<Vec<usize>>,
}

impl PositiveSets {
    pub fn new(labels: &[usize]) -> Self {
        let sets = labels
            .iter()
            .map(|y| (0..labels.len()).filter(|&m| labels[m] == *y).collect())
            .collect();
        Self { sets }
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// `B x B` matrix with `1/|M(i)|` at `(i, m)` for `m in M(i)`.
    fn weights(&self) -> Tensor {
        let b = self.sets.len();
        let mut w = vec![0.0; b * b];
        for (i, set) in self.sets.iter().enumerate() {
            for &m in set {
                w[i * b + m] = 1.0 / set.len() as f64;
            }
        }
        Tensor::from_parts(vec![b, b], w)
    }
}

fn check_batch(g: &Graph, video: Var, class: Var, labels: &[usize], tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("loss temperature must be positive, got {tau}")));
    }
    let (tv, tc) = (g.value(video), g.value(class));
    let (b, _) = tv.dims2()?;
    if tv.shape() != tc.shape() {
        return Err(Error::ShapeMismatch {
            op: "contrastive loss",
            left: tv.shape().to_vec(),
            right: tc.shape().to_vec(),
        });
    }
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {b}", labels.len())));
    }
    Ok(())
}

/// Anchors are rows of `cos`; the softmax runs along each row.
fn directional(g: &mut Graph, cos: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let b = labels.len();
    let logits = g.scale(cos, 1.0 / tau)?;
    let logp = g.log_softmax(logits, 1)?;
    let w = g.constant(PositiveSets::new(labels).weights());
    let picked = g.mul(logp, w)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / b as f64)
}

/// `B x B` cosines between rows of `a` and rows of `b`.
fn cosines(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    let bt = g.transpose(bn)?;
    g.matmul(an, bt)
}

/// Category-to-video direction: anchors are class embeddings.
pub fn loss_v2c(g: &mut Graph, video_embs: Var, class_embs: Var, labels: &[usize], tau: f64) -> Result<Var> {
    check_batch(g, video_embs, class_embs, labels, tau)?;
    let cos = cosines(g, class_embs, video_embs)?;
    directional(g, cos, labels, tau)
}

/// Video-to-category direction: anchors are video embeddings.
pub fn loss_c2v(g: &mut Graph, video_embs: Var, class_embs: Var, labels: &[usize], tau: f64) -> Result<Var> {
    check_batch(g, video_embs, class_embs, labels, tau)?;
    let cos = cosines(g, video_embs, class_embs)?;
    directional(g, cos, labels, tau)
}

pub fn loss_total(g: &mut Graph, video_embs: Var, class_embs: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let a = loss_v2c(g, video_embs, class_embs, labels, tau)?;
    let b = loss_c2v(g, video_embs, class_embs, labels, tau)?;
    let s = g.add(a, b)?;
    g.scale(s, 0.5)
}

/// Symmetric loss from a precomputed `B x B` cosine matrix with
/// `cos[i][j]` the similarity of video `i` to the class of item `j`. Used
/// when the video embedding depends on the class it is compared with.
pub fn loss_total_from_cosines(g: &mut Graph, cos: Var, labels: &[usize], tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("loss temperature must be positive, got {tau}")));
    }
    let b = labels.len();
    if g.value(cos).shape() != [b, b] {
        return Err(Error::InvalidShape {
            shape: g.value(cos).shape().to_vec(),
            reason: format!("expected a {b} x {b} cosine matrix"),
        });
    }
    let c2v = directional(g, cos, labels, tau)?;
    let cos_t = g.transpose(cos)?;
    let v2c = directional(g, cos_t, labels, tau)?;
    let s = g.add(v2c, c2v)?;
    g.scale(s, 0.5)
}

/// A batch of embeddings with labels, for value-level evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub video_embs: Tensor,
    pub class_embs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Builds the batch from a class table; `class_embs` row `i` is
    /// `classes[labels[i]]`.
    pub fn from_class_table(video_embs: Tensor, classes: &Tensor, labels: Vec<usize>) -> Result<Self> {
        let (m, _) = classes.dims2()?;
        let mut rows = Vec::with_capacity(labels.len());
        for &y in &labels {
            if y >= m {
                return Err(Error::InvalidArgument(format!("label {y} outside 0..{m}")));
            }
            rows.push(classes.row(y).to_vec());
        }
        Ok(Self {
            video_embs,
            class_embs: Tensor::from_rows(&rows)?,
            labels,
        })
    }

    pub fn positives(&self) -> PositiveSets {
        PositiveSets::new(&self.labels)
    }

    fn eval(&self, tau: f64, f: fn(&mut Graph, Var, Var, &[usize], f64) -> Result<Var>) -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(self.video_embs.clone());
        let c = g.constant(self.class_embs.clone());
        let out = f(&mut g, v, c, &self.labels, tau)?;
        Ok(g.value(out).item())
    }

    pub fn loss_v2c(&self, tau: f64) -> Result<f64> {
        self.eval(tau, loss_v2c)
    }

    pub fn loss_c2v(&self, tau: f64) -> Result<f64> {
        self.eval(tau, loss_c2v)
    }

    pub fn loss_total(&self, tau: f64) -> Result<f64> {
        self.eval(tau, loss_total)
    }

    /// The same batch with video and class roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            video_embs: self.class_embs.clone(),
            class_embs: self.video_embs.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_sets_contain_anchor() {
        let p = PositiveSets::new(&[1, 0, 1, 2]);
        assert_eq!(p.of(0), &[0, 2]);
        assert_eq!(p.of(1), &[1]);
        assert_eq!(p.of(3), &[3]);
    }

    #[test]
    fn single_item_batch_is_zero() {
        let b = Batch {
            video_embs: Tensor::from_rows(&[vec![0.3, -0.2, 1.0]]).unwrap(),
            class_embs: Tensor::from_rows(&[vec![-1.0, 2.0, 0.5]]).unwrap(),
            labels: vec![4],
        };
        assert_eq!(b.loss_v2c(0.01).unwrap(), 0.0);
        assert_eq!(b.loss_c2v(0.01).unwrap(), 0.0);
        assert_eq!(b.loss_total(0.01).unwrap(), 0.0);
    }

    #[test]
    fn zero_norm_and_bad_inputs_error() {
        let b = Batch {
            video_embs: Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap(),
            class_embs: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            labels: vec![0, 1],
        };
        assert!(matches!(b.loss_v2c(1.0), Err(Error::ZeroNorm(_))));
        let ok = Batch {
            video_embs: Tensor::identity(2),
            ..b.clone()
        };
        assert!(ok.loss_v2c(0.0).is_err());
        let short = Batch {
            labels: vec![0],
            ..ok
        };
        assert!(short.loss_c2v(1.0).is_err());
    }

    #[test]
    fn cosine_matrix_form_matches() {
        let v = Tensor::from_rows(&[vec![0.3, -0.2, 1.0], vec![1.0, 0.1, 0.0], vec![-0.5, 0.5, 0.2]]).unwrap();
        let c = Tensor::from_rows(&[vec![-1.0, 2.0, 0.5], vec![0.2, 0.2, 0.9], vec![-1.0, 2.0, 0.5]]).unwrap();
        let labels = [0, 1, 0];
        let mut g = Graph::new();
        let (vv, cv) = (g.constant(v), g.constant(c));
        let direct = loss_total(&mut g, vv, cv, &labels, 0.1).unwrap();
        let cos = cosines(&mut g, vv, cv).unwrap();
        let via = loss_total_from_cosines(&mut g, cos, &labels, 0.1).unwrap();
        assert!((g.value(direct).item() - g.value(via).item()).abs() < 1e-14);
    }

    #[test]
    fn from_class_table_checks_labels() {
        let classes = Tensor::identity(3);
        let b = Batch::from_class_table(Tensor::ones(&[2, 3]), &classes, vec![2, 0]).unwrap();
        assert_eq!(b.class_embs.row(0), &[0.0, 0.0, 1.0]);
        assert!(Batch::from_class_table(Tensor::ones(&[1, 3]), &classes, vec![3]).is_err());
    }
}
