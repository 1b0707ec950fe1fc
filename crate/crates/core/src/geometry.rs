//! Vector-space primitives shared by every other module.
//!
//! Embeddings are plain `f64` slices. Cosine similarity rejects zero-norm
//! and non-finite input instead of returning NaN.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::dataset::ExampleId;
use crate::error::{Error, Result};

/// Clamp floor applied before exponentiation in [`gem_pool`].
pub const GEM_EPS: f64 = 1e-6;

/// A finite, fixed-length feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "embedding entry {i} is not finite"
            )));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Which space positives and negatives are represented in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// Student against student.
    Symmetric,
    /// Student anchor against teacher-side examples.
    Asymmetric,
}

impl SimilarityMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityMode::Symmetric => "symmetric",
            SimilarityMode::Asymmetric => "asymmetric",
        }
    }
}

impl std::fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn euclidean_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

fn checked_norm(v: &[f64], what: &str) -> Result<f64> {
    let n = l2_norm(v);
    if !n.is_finite() {
        return Err(Error::Degenerate(format!("{what} has non-finite entries")));
    }
    if n == 0.0 {
        return Err(Error::Degenerate(format!("{what} has zero norm")));
    }
    Ok(n)
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Cosine of the angle between `u` and `v`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    let nu = checked_norm(u, "first vector")?;
    let nv = checked_norm(v, "second vector")?;
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity together with its partial derivatives.
#[derive(Debug, Clone)]
pub struct CosineGrad {
    pub value: f64,
    pub d_u: Vec<f64>,
    pub d_v: Vec<f64>,
}

/// Cosine similarity and the gradients with respect to both arguments.
///
/// The value is not clamped so that it stays consistent with the gradient.
pub fn cosine_with_grad(u: &[f64], v: &[f64]) -> Result<CosineGrad> {
    check_dims(u, v)?;
    let nu = checked_norm(u, "first vector")?;
    let nv = checked_norm(v, "second vector")?;
    let inv = 1.0 / (nu * nv);
    let value = dot(u, v) * inv;
    let su = value / (nu * nu);
    let sv = value / (nv * nv);
    let d_u = u.iter().zip(v).map(|(a, b)| b * inv - su * a).collect();
    let d_v = u.iter().zip(v).map(|(a, b)| a * inv - sv * b).collect();
    Ok(CosineGrad { value, d_u, d_v })
}

/// Anything that maps an example id to an embedding.
pub trait EmbeddingSource {
    fn dim(&self) -> usize;
    fn embedding(&self, id: ExampleId) -> Result<Cow<'_, [f64]>>;
}

/// Similarity between a student-embedded anchor and another example.
///
/// Symmetric mode embeds `other` with the student, asymmetric mode reads it
/// from the teacher.
pub fn pair_similarity<S, T>(
    anchor: &[f64],
    other: ExampleId,
    mode: SimilarityMode,
    student: &S,
    teacher: &T,
) -> Result<f64>
where
    S: EmbeddingSource + ?Sized,
    T: EmbeddingSource + ?Sized,
{
    let other = match mode {
        SimilarityMode::Symmetric => student.embedding(other)?,
        SimilarityMode::Asymmetric => teacher.embedding(other)?,
    };
    cosine_similarity(anchor, &other)
}

/// Generalized mean pooling, elementwise over a set of vectors.
///
/// Entries are clamped to [`GEM_EPS`] first. Per coordinate the powered terms
/// are summed in sorted order, so the result does not depend on input order.
pub fn gem_pool<V: AsRef<[f64]>>(vectors: &[V], p: f64) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::config("gem_pool needs at least one vector"))?;
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::config(format!("gem_pool exponent must be >= 1, got {p}")));
    }
    let dim = first.as_ref().len();
    for v in vectors {
        check_dims(first.as_ref(), v.as_ref())?;
    }
    let n = vectors.len() as f64;
    let mut terms = vec![0.0; vectors.len()];
    let pooled = (0..dim)
        .map(|j| {
            for (t, v) in terms.iter_mut().zip(vectors) {
                let x = v.as_ref()[j].max(GEM_EPS);
                *t = if p == 1.0 { x } else { x.powf(p) };
            }
            terms.sort_by(f64::total_cmp);
            let mean = terms.iter().sum::<f64>() / n;
            if p == 1.0 {
                mean
            } else {
                mean.powf(1.0 / p)
            }
        })
        .collect();
    Ok(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap(),
            0.8,
            epsilon = 1e-15
        );
    }

    #[test]
    fn cosine_rejects_zero_and_nan() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0, 0.0], &[f64::NAN, 0.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_grad_matches_finite_differences() {
        let u = [0.3, -1.2, 0.7];
        let v = [1.1, 0.4, -0.5];
        let g = cosine_with_grad(&u, &v).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut up = u;
            let mut um = u;
            up[i] += h;
            um[i] -= h;
            let fd = (cosine_with_grad(&up, &v).unwrap().value
                - cosine_with_grad(&um, &v).unwrap().value)
                / (2.0 * h);
            assert_abs_diff_eq!(fd, g.d_u[i], epsilon = 1e-8);
            let mut vp = v;
            let mut vm = v;
            vp[i] += h;
            vm[i] -= h;
            let fd = (cosine_with_grad(&u, &vp).unwrap().value
                - cosine_with_grad(&u, &vm).unwrap().value)
                / (2.0 * h);
            assert_abs_diff_eq!(fd, g.d_v[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn gem_examples() {
        let set = [vec![1.0, 3.0], vec![3.0, 1.0]];
        assert_eq!(gem_pool(&set, 1.0).unwrap(), vec![2.0, 2.0]);

        // Two vectors with a single maximum: the power mean is max * 2^(-1/p).
        let expected = 3.0 * 0.5f64.powf(0.01);
        for x in gem_pool(&set, 100.0).unwrap() {
            assert_abs_diff_eq!(x, expected, epsilon = 1e-12);
            assert!((x - 3.0).abs() / 3.0 < 1e-2);
        }

        let single = [vec![0.25, 4.0, 1e-3]];
        for p in [1.0, 3.0, 50.0] {
            let pooled = gem_pool(&single, p).unwrap();
            for (a, b) in pooled.iter().zip(&single[0]) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12 * b.max(1.0));
            }
        }
    }

    #[test]
    fn gem_clamps_negative_entries() {
        let pooled = gem_pool(&[vec![-2.0]], 3.0).unwrap();
        assert_abs_diff_eq!(pooled[0], GEM_EPS, epsilon = 1e-18);
    }

    #[test]
    fn gem_errors() {
        let empty: [Vec<f64>; 0] = [];
        assert!(gem_pool(&empty, 2.0).is_err());
        assert!(gem_pool(&[vec![1.0]], 0.5).is_err());
        assert!(gem_pool(&[vec![1.0]], f64::NAN).is_err());
    }

    struct Table(Vec<Vec<f64>>);

    impl EmbeddingSource for Table {
        fn dim(&self) -> usize {
            self.0[0].len()
        }
        fn embedding(&self, id: ExampleId) -> Result<Cow<'_, [f64]>> {
            self.0
                .get(id.index())
                .map(|v| Cow::Borrowed(v.as_slice()))
                .ok_or(Error::UnknownId(id))
        }
    }

    #[test]
    fn pair_similarity_modes() {
        let student = Table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let teacher = Table(vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let x = ExampleId(1);
        let sym = pair_similarity(&[1.0, 0.0], x, SimilarityMode::Symmetric, &student, &teacher);
        assert_eq!(sym.unwrap(), 0.0);
        let asym = pair_similarity(&[1.0, 1.0], x, SimilarityMode::Asymmetric, &student, &teacher);
        assert_abs_diff_eq!(asym.unwrap(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        // identical maps: anchor against itself is 1
        let same = pair_similarity(&[0.0, 1.0], x, SimilarityMode::Asymmetric, &student, &student);
        assert_eq!(same.unwrap(), 1.0);
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim)
            .prop_filter("nonzero", |v| l2_norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded((u, v) in (1usize..12).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d)))) {
            let a = cosine_similarity(&u, &v).unwrap();
            let b = cosine_similarity(&v, &u).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!(a.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn cosine_scale_invariant((u, v) in (1usize..12).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d))), c in 1e-3f64..1e3) {
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            let a = cosine_similarity(&scaled, &v).unwrap();
            let b = cosine_similarity(&u, &v).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn gem_p1_is_mean_and_order_free(rows in prop::collection::vec(prop::collection::vec(1e-3f64..5.0, 4), 1..8), p in 1.0f64..20.0, seed in any::<u64>()) {
            let pooled = gem_pool(&rows, 1.0).unwrap();
            for j in 0..4 {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                prop_assert!((pooled[j] - mean).abs() <= 1e-12);
            }
            let mut shuffled = rows.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(gem_pool(&rows, p).unwrap(), gem_pool(&shuffled, p).unwrap());
        }
    }
}
