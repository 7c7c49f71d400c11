//! Codebooks and their training.
//!
//! Main codebooks are fitted with weighted k-means, where every vector carries
//! the Hessian diagonal entry of the column it was cut from. Residual
//! codebooks use the same procedure with the zero vector forced into the
//! initial centroid set, which bounds their objective by the error of
//! skipping the stage entirely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorF32;

/// Work (vectors × centroids × length) above which assignment runs on the rayon pool.
const PARALLEL_ASSIGN_WORK: usize = 1 << 16;

/// A flat list of equal-length f32 vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    vector_len: usize,
    data: Vec<f32>,
}

impl VectorSet {
    pub fn new(vector_len: usize, data: Vec<f32>) -> Result<Self> {
        if vector_len == 0 || !data.len().is_multiple_of(vector_len) {
            return Err(Error::shape(format!(
                "{} values do not split into vectors of length {vector_len}",
                data.len()
            )));
        }
        Ok(Self { vector_len, data })
    }

    pub fn with_capacity(vector_len: usize, vectors: usize) -> Self {
        assert!(vector_len > 0);
        Self {
            vector_len,
            data: Vec::with_capacity(vector_len * vectors),
        }
    }

    pub fn vector_len(&self) -> usize {
        self.vector_len
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.vector_len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * self.vector_len..(i + 1) * self.vector_len]
    }

    pub fn push(&mut self, v: &[f32]) {
        assert_eq!(v.len(), self.vector_len);
        self.data.extend_from_slice(v);
    }

    pub fn extend(&mut self, other: &VectorSet) {
        assert_eq!(other.vector_len, self.vector_len);
        self.data.extend_from_slice(&other.data);
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.vector_len)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookRole {
    Main,
    Residual,
    Outlier,
}

impl CodebookRole {
    pub fn tag(self) -> u8 {
        match self {
            CodebookRole::Main => 0,
            CodebookRole::Residual => 1,
            CodebookRole::Outlier => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(CodebookRole::Main),
            1 => Some(CodebookRole::Residual),
            2 => Some(CodebookRole::Outlier),
            _ => None,
        }
    }
}

/// `k` centroids of length `v`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vector_len: usize,
    k: usize,
    centroids: Vec<f32>,
    role: CodebookRole,
    group_id: u32,
}

impl Codebook {
    pub fn new(
        vector_len: usize,
        centroids: Vec<f32>,
        role: CodebookRole,
        group_id: u32,
    ) -> Result<Self> {
        if vector_len == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(vector_len) {
            return Err(Error::shape(format!(
                "{} centroid values do not form vectors of length {vector_len}",
                centroids.len()
            )));
        }
        let k = centroids.len() / vector_len;
        if !k.is_power_of_two() {
            return Err(Error::InvalidK(k));
        }
        if let Some(i) = centroids.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteData(i));
        }
        Ok(Self {
            vector_len,
            k,
            centroids,
            role,
            group_id,
        })
    }

    pub fn vector_len(&self) -> usize {
        self.vector_len
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `log2(k)`, the packed width of one index.
    pub fn index_bits(&self) -> u32 {
        self.k.trailing_zeros()
    }

    pub fn role(&self) -> CodebookRole {
        self.role
    }

    pub fn group_id(&self) -> u32 {
        self.group_id
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.vector_len..(i + 1) * self.vector_len]
    }

    /// Nearest centroid and its squared distance; ties go to the lowest index.
    ///
    /// Accepts f32 or f64 inputs; the distance is accumulated in f64 either way.
    pub fn nearest<T: Copy + Into<f64>>(&self, v: &[T]) -> (usize, f64) {
        debug_assert_eq!(v.len(), self.vector_len);
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.chunks_exact(self.vector_len).enumerate() {
            let d = sq_dist(v, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// k×v tensor for inspection.
    pub fn to_tensor(&self) -> TensorF32 {
        TensorF32::matrix(self.k, self.vector_len, self.centroids.clone())
            .expect("codebook invariants hold")
    }
}

fn sq_dist<T: Copy + Into<f64>>(v: &[T], c: &[f32]) -> f64 {
    v.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d = a.into() - b as f64;
            d * d
        })
        .sum()
}

pub fn assign_nearest(vec: &[f32], cb: &Codebook) -> Result<usize> {
    if vec.len() != cb.vector_len {
        return Err(Error::shape(format!(
            "vector of length {} against codebook of length {}",
            vec.len(),
            cb.vector_len
        )));
    }
    Ok(cb.nearest(vec).0)
}

/// Nearest centroid and squared distance for every vector, in input order.
pub fn assign_all(vectors: &VectorSet, cb: &Codebook) -> Result<Vec<(u32, f64)>> {
    if vectors.vector_len() != cb.vector_len {
        return Err(Error::shape(format!(
            "vectors of length {} against codebook of length {}",
            vectors.vector_len(),
            cb.vector_len
        )));
    }
    let work = vectors.len() * cb.k * cb.vector_len;
    let f = |v: &[f32]| {
        let (i, d) = cb.nearest(v);
        (i as u32, d)
    };
    Ok(if work >= PARALLEL_ASSIGN_WORK {
        vectors
            .data()
            .par_chunks_exact(vectors.vector_len())
            .map(f)
            .collect()
    } else {
        vectors.iter().map(f).collect()
    })
}

/// `Σ_d w_d · ‖x_d − C[a_d]‖²`, accumulated in f64 in input order.
pub fn weighted_objective(
    vectors: &VectorSet,
    weights: &[f64],
    cb: &Codebook,
    assignments: &[u32],
) -> Result<f64> {
    if vectors.len() != weights.len() || vectors.len() != assignments.len() {
        return Err(Error::shape(format!(
            "{} vectors, {} weights, {} assignments",
            vectors.len(),
            weights.len(),
            assignments.len()
        )));
    }
    if vectors.vector_len() != cb.vector_len {
        return Err(Error::shape("vector length differs from codebook"));
    }
    let mut total = 0.0;
    for ((v, &w), &a) in vectors.iter().zip(weights).zip(assignments) {
        let a = a as usize;
        if a >= cb.k {
            return Err(Error::CorruptIndices { index: a, k: cb.k });
        }
        total += w * sq_dist(v, cb.centroid(a));
    }
    Ok(total)
}

/// Weighted mean of each cluster, `None` for clusters with no members.
pub fn weighted_centroids(
    vectors: &VectorSet,
    weights: &[f64],
    assignments: &[u32],
    k: usize,
) -> Vec<Option<Vec<f64>>> {
    let v = vectors.vector_len();
    let mut sums = vec![0.0f64; k * v];
    let mut mass = vec![0.0f64; k];
    for ((x, &w), &a) in vectors.iter().zip(weights).zip(assignments) {
        let a = a as usize;
        mass[a] += w;
        for (s, &xi) in sums[a * v..(a + 1) * v].iter_mut().zip(x) {
            *s += w * xi as f64;
        }
    }
    (0..k)
        .map(|c| {
            (mass[c] > 0.0).then(|| sums[c * v..(c + 1) * v].iter().map(|s| s / mass[c]).collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyClusterPolicy {
    /// Move an empty centroid onto the vector with the largest weighted distance.
    #[default]
    RespawnFarthest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    pub forced_seeds: Vec<Vec<f32>>,
    pub empty_cluster_policy: EmptyClusterPolicy,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-6,
            seed: 0,
            forced_seeds: Vec::new(),
            empty_cluster_policy: EmptyClusterPolicy::RespawnFarthest,
        }
    }
}

impl TrainOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.max_iters == 0 {
            problems.push("kmeans.max_iters must be at least 1".to_string());
        }
        if self.rel_tol.is_nan() || self.rel_tol < 0.0 {
            problems.push(format!("kmeans.rel_tol must be >= 0, got {}", self.rel_tol));
        }
        problems
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainedCodebook {
    pub codebook: Codebook,
    pub assignments: Vec<u32>,
    /// Weighted objective after the initial assignment and after every Lloyd iteration.
    pub history: Vec<f64>,
}

impl TrainedCodebook {
    pub fn objective(&self) -> f64 {
        *self.history.last().expect("history is never empty")
    }
}

pub fn train_codebook(
    vectors: &VectorSet,
    weights: &[f64],
    k: usize,
    opts: &TrainOptions,
) -> Result<TrainedCodebook> {
    train(vectors, weights, k, opts, &opts.forced_seeds, CodebookRole::Main)
}

/// Like [`train_codebook`] with the zero vector prepended to the forced seeds.
pub fn train_residual_codebook(
    residuals: &VectorSet,
    weights: &[f64],
    k: usize,
    opts: &TrainOptions,
) -> Result<TrainedCodebook> {
    let mut seeds = Vec::with_capacity(opts.forced_seeds.len() + 1);
    seeds.push(vec![0.0; residuals.vector_len()]);
    seeds.extend(opts.forced_seeds.iter().cloned());
    train(residuals, weights, k, opts, &seeds, CodebookRole::Residual)
}

fn train(
    vectors: &VectorSet,
    weights: &[f64],
    k: usize,
    opts: &TrainOptions,
    forced: &[Vec<f32>],
    role: CodebookRole,
) -> Result<TrainedCodebook> {
    let v = vectors.vector_len();
    let d_count = vectors.len();
    if !k.is_power_of_two() {
        return Err(Error::InvalidK(k));
    }
    if d_count == 0 || k > d_count {
        return Err(Error::InsufficientData {
            k,
            available: d_count,
        });
    }
    if weights.len() != d_count {
        return Err(Error::shape(format!(
            "{d_count} vectors but {} weights",
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::InvalidOptions(format!("weight {i} is not a positive finite number")));
    }
    let problems = opts.validate();
    if !problems.is_empty() {
        return Err(Error::InvalidOptions(problems.join("; ")));
    }
    if forced.len() > k {
        return Err(Error::InvalidOptions(format!(
            "{} forced seeds exceed k = {k}",
            forced.len()
        )));
    }
    if let Some(s) = forced.iter().find(|s| s.len() != v) {
        return Err(Error::shape(format!("forced seed of length {} for v = {v}", s.len())));
    }

    // Sampling and respawn decisions use max-normalized weights, so uniform
    // weights of any magnitude behave exactly like unit weights.
    let w_max = weights.iter().cloned().fold(0.0, f64::max);
    let w_norm: Vec<f64> = weights.iter().map(|w| w / w_max).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let centroids = init_plus_plus(vectors, &w_norm, k, forced, &mut rng);
    let mut cb = Codebook::new(v, centroids, role, 0)?;

    let mut assigned = assign_all(vectors, &cb)?;
    let mut history = vec![objective_of(&assigned, weights)];

    for _ in 0..opts.max_iters {
        let assignments: Vec<u32> = assigned.iter().map(|(a, _)| *a).collect();
        let means = weighted_centroids(vectors, &w_norm, &assignments, k);
        let mut empties = Vec::new();
        for (c, mean) in means.into_iter().enumerate() {
            match mean {
                Some(m) => {
                    for (dst, x) in cb.centroids[c * v..(c + 1) * v].iter_mut().zip(m) {
                        *dst = x as f32;
                    }
                }
                None => empties.push(c),
            }
        }
        if !empties.is_empty() {
            respawn_empty(vectors, &w_norm, &assignments, &mut cb, &empties);
        }

        assigned = assign_all(vectors, &cb)?;
        let prev = *history.last().unwrap();
        let obj = objective_of(&assigned, weights);
        history.push(obj);
        if prev - obj <= opts.rel_tol * prev {
            break;
        }
    }

    Ok(TrainedCodebook {
        codebook: cb,
        assignments: assigned.into_iter().map(|(a, _)| a).collect(),
        history,
    })
}

fn objective_of(assigned: &[(u32, f64)], weights: &[f64]) -> f64 {
    assigned.iter().zip(weights).map(|((_, d), w)| w * d).sum()
}

/// Weighted k-means++ seeding: forced seeds first, then draws with
/// probability ∝ weight · (distance² to the nearest chosen centroid).
fn init_plus_plus(
    vectors: &VectorSet,
    w_norm: &[f64],
    k: usize,
    forced: &[Vec<f32>],
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let v = vectors.vector_len();
    let mut centroids: Vec<f32> = Vec::with_capacity(k * v);
    let mut min_d2 = vec![f64::INFINITY; vectors.len()];
    let add = |c: &[f32], centroids: &mut Vec<f32>, min_d2: &mut [f64]| {
        centroids.extend_from_slice(c);
        for (m, x) in min_d2.iter_mut().zip(vectors.iter()) {
            *m = m.min(sq_dist(x, c));
        }
    };
    for s in forced {
        add(s, &mut centroids, &mut min_d2);
    }
    while centroids.len() < k * v {
        let scores: Vec<f64> = if centroids.is_empty() {
            w_norm.to_vec()
        } else {
            w_norm.iter().zip(&min_d2).map(|(w, d)| w * d).collect()
        };
        let total: f64 = scores.iter().sum();
        let pick = if total > 0.0 {
            sample_index(&scores, total, rng)
        } else {
            // every vector already coincides with a centroid
            sample_index(w_norm, w_norm.iter().sum(), rng)
        };
        let chosen = vectors.get(pick).to_vec();
        add(&chosen, &mut centroids, &mut min_d2);
    }
    centroids
}

fn sample_index(scores: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > 0.0 {
            acc += s;
            last_positive = i;
            if acc > target {
                return i;
            }
        }
    }
    last_positive
}

fn respawn_empty(
    vectors: &VectorSet,
    w_norm: &[f64],
    assignments: &[u32],
    cb: &mut Codebook,
    empties: &[usize],
) {
    let v = cb.vector_len;
    let mut cost: Vec<f64> = vectors
        .iter()
        .zip(w_norm)
        .zip(assignments)
        .map(|((x, w), &a)| w * sq_dist(x, cb.centroid(a as usize)))
        .collect();
    for &c in empties {
        let (far, _) = cost
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        cb.centroids[c * v..(c + 1) * v].copy_from_slice(vectors.get(far));
        cost[far] = 0.0;
    }
}
