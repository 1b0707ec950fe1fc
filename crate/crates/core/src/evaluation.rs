//! Supervised whitening, ranking, and the symmetric/asymmetric retrieval
//! protocols.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ExampleId, RetrievalTask};
use crate::error::{Error, Result};
use crate::geometry::{cosine_similarity, l2_norm, EmbeddingSource};
use crate::matrix::Matrix;
use crate::parallel;

/// Relative eigenvalue floor used when inverting the pair covariance.
pub const WHITENING_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Symmetric,
    Asymmetric,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Symmetric => "symmetric",
            Protocol::Asymmetric => "asymmetric",
        }
    }

    /// Space the whitening must be fitted in for this protocol.
    pub fn whitening_space(self) -> Space {
        match self {
            Protocol::Symmetric => Space::Student,
            Protocol::Asymmetric => Space::Teacher,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" | "symmetric" => Ok(Protocol::Symmetric),
            "asym" | "asymmetric" => Ok(Protocol::Asymmetric),
            other => Err(Error::config(format!(
                "unknown protocol '{other}', expected sym or asym"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningTransform {
    pub space: Space,
    pub mean: Vec<f64>,
    /// Row-major `d x d` projection.
    pub projection: Matrix,
}

impl WhiteningTransform {
    pub fn identity(dim: usize, space: Space) -> Self {
        let mut projection = Matrix::zeros(dim, dim);
        for i in 0..dim {
            projection.row_mut(i)[i] = 1.0;
        }
        WhiteningTransform {
            space,
            mean: vec![0.0; dim],
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.space_tag().as_bytes());
        for v in self.mean.iter().chain(self.projection.as_slice()) {
            h.update(v.to_le_bytes());
        }
        crate::models::hex_digest(&h.finalize())
    }

    fn space_tag(&self) -> &'static str {
        match self.space {
            Space::Student => "student",
            Space::Teacher => "teacher",
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Eigen-decomposition with eigenvalues sorted in descending order.
fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>());
    (values, vectors)
}

/// Fits the transform on row vectors and index pairs of positives.
///
/// The pair covariance is inverted with square root (eigenvalues floored at
/// `WHITENING_EPS` times the largest), then the projected centered data is
/// rotated onto its principal axes, largest variance first.
pub fn fit_whitening_vectors(vectors: &Matrix, pairs: &[(usize, usize)], space: Space) -> Result<WhiteningTransform> {
    if pairs.len() < 2 {
        return Err(Error::Degenerate(format!(
            "whitening needs at least 2 positive pairs, got {}",
            pairs.len()
        )));
    }
    let d = vectors.cols();
    let n = vectors.rows();
    if n == 0 || d == 0 {
        return Err(Error::Degenerate("whitening needs nonempty data".into()));
    }
    let mut mean = vec![0.0; d];
    for row in vectors.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cs = DMatrix::<f64>::zeros(d, d);
    for &(a, p) in pairs {
        if a >= n || p >= n {
            return Err(Error::config(format!("pair ({a}, {p}) out of range for {n} vectors")));
        }
        let diff = DVector::from_iterator(d, vectors.row(a).iter().zip(vectors.row(p)).map(|(x, y)| x - y));
        cs.ger(1.0, &diff, &diff, 1.0);
    }
    cs /= pairs.len() as f64;

    let (values, vectors_s) = sorted_eigen(cs);
    let top = values[0];
    if !(top > 0.0) {
        return Err(Error::Degenerate("positive pairs have identical embeddings".into()));
    }
    let floor = WHITENING_EPS * top;
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(d, values.iter().map(|&l| 1.0 / l.max(floor).sqrt())));
    let p = &vectors_s * inv_sqrt * vectors_s.transpose();

    let centered = DMatrix::from_fn(n, d, |i, j| vectors.row(i)[j] - mean[j]);
    let projected = centered * p.transpose();
    let cov = projected.transpose() * &projected / n as f64;
    let (_, rot) = sorted_eigen(cov);
    let w = rot.transpose() * p;
    let projection = Matrix::from_vec(d, d, (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| w[(i, j)]).collect())?;
    Ok(WhiteningTransform { space, mean, projection })
}

/// Fits on L2-normalized embeddings of `ids`, using the positive pairs whose
/// members are both in `ids`.
pub fn fit_whitening<S: EmbeddingSource + ?Sized>(
    source: &S,
    ids: &[ExampleId],
    pairs: &[(ExampleId, ExampleId)],
    space: Space,
) -> Result<WhiteningTransform> {
    let mut rows = Vec::with_capacity(ids.len());
    let mut slot = std::collections::HashMap::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        rows.push(normalized(&source.embedding(id)?)?);
        slot.insert(id, i);
    }
    let index_pairs: Vec<(usize, usize)> = pairs
        .iter()
        .filter_map(|(a, p)| Some((*slot.get(a)?, *slot.get(p)?)))
        .collect();
    fit_whitening_vectors(&Matrix::from_rows(&rows, source.dim())?, &index_pairs, space)
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Degenerate("cannot normalize a zero or non-finite embedding".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `W (v - mean)`.
pub fn apply_whitening(t: &WhiteningTransform, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != t.dim() {
        return Err(Error::DimensionMismatch {
            expected: t.dim(),
            got: v.len(),
        });
    }
    let centered: Vec<f64> = v.iter().zip(&t.mean).map(|(x, m)| x - m).collect();
    Ok(t.projection
        .iter_rows()
        .map(|row| crate::geometry::dot(row, &centered))
        .collect())
}

/// Database ids by descending cosine similarity to `query`, ties by
/// ascending id; `ignore` members are dropped first.
pub fn rank_database(query: &[f64], database: &[(ExampleId, Vec<f64>)], ignore: &[ExampleId]) -> Result<Vec<ExampleId>> {
    let mut scored = Vec::with_capacity(database.len());
    for (id, v) in database {
        if ignore.contains(id) {
            continue;
        }
        scored.push((*id, cosine_similarity(query, v)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(id, _)| id).collect())
}

/// `(1/|P|) sum_i i / r_i` over the ranks `r_i` of the positives.
pub fn average_precision(ranked: &[ExampleId], positives: &[ExampleId]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::config("average precision of a query without positives"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranked.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / positives.len() as f64)
}

/// Positives among the first `k`, over `min(k, |P|)`.
pub fn precision_at(ranked: &[ExampleId], positives: &[ExampleId], k: usize) -> Result<f64> {
    if positives.is_empty() || k == 0 {
        return Err(Error::config("precision of a query without positives"));
    }
    let hits = ranked.iter().take(k).filter(|id| positives.contains(id)).count();
    Ok(hits as f64 / k.min(positives.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: ExampleId,
    pub ap: f64,
    pub p10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub tier: String,
    pub per_query: Vec<QueryResult>,
    pub skipped: Vec<ExampleId>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mP@10")]
    pub mp10: f64,
    pub config_digest: String,
    pub whitening_digest: Option<String>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

fn embed_side<S: EmbeddingSource + ?Sized>(
    source: &S,
    ids: &[ExampleId],
    whitening: Option<&WhiteningTransform>,
) -> Result<Vec<(ExampleId, Vec<f64>)>> {
    ids.iter()
        .map(|&id| {
            let v = source.embedding(id)?;
            let v = match whitening {
                Some(w) => apply_whitening(w, &normalized(&v)?)?,
                None => v.into_owned(),
            };
            Ok((id, v))
        })
        .collect()
}

/// Runs one retrieval task. Queries are always embedded by `student`; the
/// database by `student` (symmetric) or `teacher` (asymmetric).
pub fn evaluate<S, T>(
    protocol: Protocol,
    student: &S,
    teacher: &T,
    task: &RetrievalTask,
    whitening: Option<&WhiteningTransform>,
    config_digest: &str,
) -> Result<EvalReport>
where
    S: EmbeddingSource + Sync + ?Sized,
    T: EmbeddingSource + Sync + ?Sized,
{
    if let Some(w) = whitening {
        if w.space != protocol.whitening_space() {
            return Err(Error::config(format!(
                "{protocol} testing needs whitening fitted in {:?} space, got {:?}",
                protocol.whitening_space(),
                w.space
            )));
        }
    }
    let queries = embed_side(student, &task.queries, whitening)?;
    let database = match protocol {
        Protocol::Symmetric => embed_side(student, &task.database, whitening)?,
        Protocol::Asymmetric => embed_side(teacher, &task.database, whitening)?,
    };
    let results = parallel::map(&queries, |(q, v)| -> Result<Option<QueryResult>> {
        let ignore = task.ignore(*q);
        let positives: Vec<ExampleId> = task
            .positives(*q)
            .iter()
            .copied()
            .filter(|p| !ignore.contains(p))
            .collect();
        if positives.is_empty() {
            return Ok(None);
        }
        let ranked = rank_database(v, &database, ignore)?;
        Ok(Some(QueryResult {
            query: *q,
            ap: average_precision(&ranked, &positives)?,
            p10: precision_at(&ranked, &positives, 10)?,
        }))
    });
    let mut per_query = Vec::with_capacity(queries.len());
    let mut skipped = Vec::new();
    for ((q, _), r) in queries.iter().zip(results) {
        match r? {
            Some(r) => per_query.push(r),
            None => {
                log::warn!("query {q} has no positives, skipped");
                skipped.push(*q);
            }
        }
    }
    if per_query.is_empty() {
        return Err(Error::config(format!("task '{}' has no query with positives", task.tier)));
    }
    let n = per_query.len() as f64;
    let map = per_query.iter().map(|r| r.ap).sum::<f64>() / n;
    let mp10 = per_query.iter().map(|r| r.p10).sum::<f64>() / n;
    Ok(EvalReport {
        protocol,
        tier: task.tier.clone(),
        per_query,
        skipped,
        map,
        mp10,
        config_digest: config_digest.to_string(),
        whitening_digest: whitening.map(WhiteningTransform::digest),
    })
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub protocol: Protocol,
    pub tier: String,
    pub loss: String,
    pub mode: String,
    pub map: f64,
    pub mp10: f64,
    pub seed: u64,
    pub config_digest: String,
    pub timestamp: u64,
}

pub const RESULTS_VERSION_LINE: &str = "# results v1";
pub const RESULTS_HEADER: &str = "protocol,tier,loss,mode,mAP,mP@10,seed,config_digest,timestamp";

impl ResultsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{},{},{}",
            self.protocol, self.tier, self.loss, self.mode, self.map, self.mp10, self.seed, self.config_digest, self.timestamp
        )
    }

    /// The row without its trailing timestamp.
    pub fn stable_part(&self) -> String {
        let line = self.to_csv();
        line[..line.rfind(',').unwrap()].to_string()
    }
}

pub fn unix_timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Appends rows, writing the version and header lines for a new file.
pub fn append_results(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    if fresh {
        out.push_str(RESULTS_VERSION_LINE);
        out.push('\n');
        out.push_str(RESULTS_HEADER);
        out.push('\n');
    }
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
