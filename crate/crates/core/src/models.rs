//! The frozen teacher and the trainable MLP student.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, ExampleId};
use crate::error::{Error, Result};
use crate::geometry::{cosine_similarity, l2_norm, EmbeddingSource};
use crate::matrix::{self, Matrix};
use crate::parallel;

/// Fixed embedding table `g`, indexed by example id.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    table: Matrix,
}

/// Settings for the synthetic teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    /// Weight of the class-center term added to each input before projection.
    pub class_signal: f64,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            class_signal: 1.0,
            seed: 0,
        }
    }
}

impl TeacherModel {
    pub fn from_table(table: Matrix) -> Result<Self> {
        for (i, row) in table.iter_rows().enumerate() {
            let n = l2_norm(row);
            if !n.is_finite() || n == 0.0 {
                return Err(Error::Degenerate(format!(
                    "teacher embedding {i} is zero or non-finite"
                )));
            }
        }
        Ok(TeacherModel { table })
    }

    /// `g(x) = normalize(A (x + class_signal * center(x)))` with a fixed random
    /// projection `A`, rounded to `f32` precision.
    pub fn from_class_signal(data: &Dataset, centers: &Matrix, cfg: &TeacherConfig) -> Result<Self> {
        let d_in = data.config.d_in;
        let d_out = data.config.d_teacher;
        if centers.cols() != d_in {
            return Err(Error::DimensionMismatch {
                expected: d_in,
                got: centers.cols(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (d_in as f64).sqrt();
        let proj: Vec<f64> = (0..d_out * d_in)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut table = Matrix::zeros(data.inputs.rows(), d_out);
        let mut z = vec![0.0; d_in];
        for i in 0..data.inputs.rows() {
            let c = centers.row(data.classes[i] as usize);
            for ((zj, xj), cj) in z.iter_mut().zip(data.inputs.row(i)).zip(c) {
                *zj = xj + cfg.class_signal * cj;
            }
            let row = table.row_mut(i);
            for (k, out) in row.iter_mut().enumerate() {
                *out = crate::geometry::dot(&proj[k * d_in..(k + 1) * d_in], &z);
            }
            let n = l2_norm(row);
            if n == 0.0 {
                return Err(Error::Degenerate(format!("teacher embedding {i} is zero")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        table.round_to_f32();
        Self::from_table(table)
    }

    /// Freezes a student: the table holds its output for every input row.
    pub fn snapshot(student: &StudentModel, inputs: &Matrix) -> Result<Self> {
        let rows: Vec<usize> = (0..inputs.rows()).collect();
        let out = parallel::map(&rows, |&i| student.forward(inputs.row(i)));
        let out: Vec<Vec<f64>> = out.into_iter().collect::<Result<_>>()?;
        Self::from_table(Matrix::from_rows(&out, student.arch().d_out)?)
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.rows() == 0
    }

    pub fn embed(&self, id: ExampleId) -> Result<&[f64]> {
        if id.index() >= self.table.rows() {
            return Err(Error::UnknownId(id));
        }
        Ok(self.table.row(id.index()))
    }

    /// `S(a, x)`: cosine similarity of the two teacher embeddings.
    pub fn similarity(&self, a: ExampleId, x: ExampleId) -> Result<f64> {
        cosine_similarity(self.embed(a)?, self.embed(x)?)
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    /// SHA-256 of the serialized table, hex encoded.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.table.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.table.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(Matrix::load(path)?)
    }
}

impl EmbeddingSource for TeacherModel {
    fn dim(&self) -> usize {
        self.table.cols()
    }

    fn embedding(&self, id: ExampleId) -> Result<Cow<'_, [f64]>> {
        self.embed(id).map(Cow::Borrowed)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Layer sizes of the student MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub d_out: usize,
}

impl Architecture {
    fn layers(&self) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.d_in);
        sizes.extend(&self.hidden);
        sizes.push(self.d_out);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|(i, o)| o * (i + 1)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.hidden.contains(&0) {
            return Err(Error::config("all layer sizes must be positive"));
        }
        Ok(())
    }
}

/// MLP `d_in -> hidden... -> d_out` with tanh on hidden layers and a linear
/// output. Parameters live in one flat vector: per layer the weight matrix
/// (row-major, `out x in`) followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    arch: Architecture,
    layers: Vec<(usize, usize)>,
    theta: Vec<f64>,
}

/// Layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the input at least")
    }
}

impl StudentModel {
    pub fn from_params(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                expected: arch.num_params(),
                got: theta.len(),
            });
        }
        let layers = arch.layers();
        Ok(StudentModel {
            arch,
            layers,
            theta,
        })
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, rounded to `f32`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(arch.num_params());
        for (fan_in, out) in arch.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..out * (fan_in + 1) {
                theta.push(rng.random_range(-bound..=bound));
            }
        }
        matrix::round_slice_to_f32(&mut theta);
        Self::from_params(arch, theta)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.arch.d_in,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().unwrap())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        let mut offset = 0;
        for (l, &(fan_in, out)) in self.layers.iter().enumerate() {
            let w = &self.theta[offset..offset + out * fan_in];
            let b = &self.theta[offset + out * fan_in..offset + out * (fan_in + 1)];
            let h = activations.last().unwrap();
            let mut z: Vec<f64> = (0..out)
                .map(|o| crate::geometry::dot(&w[o * fan_in..(o + 1) * fan_in], h) + b[o])
                .collect();
            if l != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(z);
            offset += out * (fan_in + 1);
        }
        Ok(ForwardCache { activations })
    }

    /// Gradient with respect to `theta` of `<upstream, f(x)>`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(x)?;
        let mut grad = vec![0.0; self.theta.len()];
        self.accumulate_backward(&cache, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Adds the parameter gradient for one cached forward pass into `grad`.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if upstream.len() != self.arch.d_out {
            return Err(Error::DimensionMismatch {
                expected: self.arch.d_out,
                got: upstream.len(),
            });
        }
        if grad.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                got: grad.len(),
            });
        }
        let mut offset = self.theta.len();
        let mut delta = upstream.to_vec();
        for (l, &(fan_in, out)) in self.layers.iter().enumerate().rev() {
            offset -= out * (fan_in + 1);
            let h = &cache.activations[l];
            let (gw, gb) = grad[offset..offset + out * (fan_in + 1)].split_at_mut(out * fan_in);
            for o in 0..out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, hi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(h) {
                    *g += d * hi;
                }
            }
            if l > 0 {
                let w = &self.theta[offset..offset + out * fan_in];
                delta = (0..fan_in)
                    .map(|i| {
                        let back: f64 = (0..out).map(|o| w[o * fan_in + i] * delta[o]).sum();
                        back * (1.0 - h[i] * h[i])
                    })
                    .collect();
            }
        }
        Ok(())
    }
}

/// Student outputs for a fixed set of ids, computed once from a parameter
/// snapshot.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingCache {
    dim: usize,
    rows: HashMap<ExampleId, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn compute(student: &StudentModel, inputs: &Matrix, ids: &[ExampleId]) -> Result<Self> {
        let out = parallel::map(ids, |&id| {
            if id.index() >= inputs.rows() {
                return Err(Error::UnknownId(id));
            }
            student.forward(inputs.row(id.index()))
        });
        let mut rows = HashMap::with_capacity(ids.len());
        for (id, v) in ids.iter().zip(out) {
            rows.insert(*id, v?);
        }
        Ok(EmbeddingCache {
            dim: student.arch().d_out,
            rows,
        })
    }

    pub fn get(&self, id: ExampleId) -> Result<&[f64]> {
        self.rows
            .get(&id)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownId(id))
    }
}

impl EmbeddingSource for EmbeddingCache {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embedding(&self, id: ExampleId) -> Result<Cow<'_, [f64]>> {
        self.get(id).map(Cow::Borrowed)
    }
}

/// On-disk description stored next to `theta.f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub seed: u64,
    pub epoch: usize,
}

pub const CHECKPOINT_META: &str = "student.json";
pub const CHECKPOINT_THETA: &str = "theta.f32";

pub fn save_checkpoint(dir: &Path, student: &StudentModel, seed: u64, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = CheckpointMeta {
        architecture: student.arch().clone(),
        seed,
        epoch,
    };
    let path = dir.join(CHECKPOINT_META);
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    matrix::save_vector(&dir.join(CHECKPOINT_THETA), student.theta())
}

pub fn load_checkpoint(dir: &Path) -> Result<(StudentModel, CheckpointMeta)> {
    let path = dir.join(CHECKPOINT_META);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
    let theta = matrix::load_vector(&dir.join(CHECKPOINT_THETA))?;
    let student = StudentModel::from_params(meta.architecture.clone(), theta)?;
    Ok((student, meta))
}
