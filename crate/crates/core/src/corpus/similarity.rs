use super::vocab::LabelVector;
use crate::error::{Error, Result};
use crate::grad::{Scalar, Tensor};

/// Label-similarity targets for a decoupled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GtTargets<T> {
    /// Cosine similarity of label vectors, `[n_img, n_text]`.
    pub similarity: Tensor<T>,
    /// Row softmax of `similarity` (each image's distribution over texts).
    pub img_to_txt: Tensor<T>,
    /// Column softmax of `similarity` (each text's distribution over images),
    /// stored in the same `[n_img, n_text]` orientation.
    pub txt_to_img: Tensor<T>,
}

fn label_cosine(a: &LabelVector, b: &LabelVector) -> f64 {
    let (a, b) = (a.as_f64(), b.as_f64());
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Softmax over each row of a row-major `rows x cols` buffer (no temperature).
pub(crate) fn softmax_rows_f64(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
}

pub fn gt_similarity<T: Scalar>(images: &[LabelVector], texts: &[LabelVector]) -> Result<GtTargets<T>> {
    if images.is_empty() || texts.is_empty() {
        return Err(Error::Invalid("gt_similarity needs non-empty image and text batches".into()));
    }
    let (n, m) = (images.len(), texts.len());
    let s: Vec<f64> = images.iter().flat_map(|a| texts.iter().map(move |b| label_cosine(a, b))).collect();
    let mut i2t = s.clone();
    softmax_rows_f64(&mut i2t, m);
    let mut st = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            st[j * n + i] = s[i * m + j];
        }
    }
    softmax_rows_f64(&mut st, n);
    let mut t2i = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            t2i[i * m + j] = st[j * n + i];
        }
    }
    let mk = |d: Vec<f64>| Tensor::from_f64(&[n, m], &d);
    Ok(GtTargets { similarity: mk(s)?, img_to_txt: mk(i2t)?, txt_to_img: mk(t2i)? })
}
