//! Residual vector quantization over latent frames, with codebooks fit by
//! k-means stage by stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{LatentTensor, Tensor};

/// One `n_q × F` codebook per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebooks {
    stages: Vec<Tensor>,
}

/// Code indices, `stages × D`, each in `[0, n_q)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedLatent {
    pub indices: Vec<Vec<usize>>,
}

impl QuantizedLatent {
    pub fn num_stages(&self) -> usize {
        self.indices.len()
    }

    pub fn num_frames(&self) -> usize {
        self.indices.first().map_or(0, Vec::len)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebooks {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = stages.first() {
            ensure!(
                stages.iter().all(|s| s.shape() == first.shape()),
                "all codebooks must share a shape"
            );
            ensure!(first.rows() >= 1, "codebooks need at least one entry");
        }
        for s in &stages {
            s.ensure_finite("codebook")?;
        }
        Ok(Self { stages })
    }

    pub fn empty() -> Self {
        Self { stages: Vec::new() }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn size(&self) -> usize {
        self.stages.first().map_or(0, Tensor::rows)
    }

    pub fn dim(&self) -> usize {
        self.stages.first().map_or(0, Tensor::cols)
    }

    pub fn stage(&self, s: usize) -> &Tensor {
        &self.stages[s]
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    /// Index of the nearest codeword (Euclidean); ties go to the lowest index.
    pub fn nearest(&self, stage: usize, v: &[f64]) -> usize {
        let book = &self.stages[stage];
        let mut best = (f64::INFINITY, 0);
        for k in 0..book.rows() {
            let d = sq_dist(book.row(k), v);
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    fn check_latent(&self, latent: &LatentTensor) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Unsupported("quantization is disabled (no RVQ stages)".into()));
        }
        ensure!(
            latent.rows() == self.dim(),
            "latent has {} features, codebooks expect {}",
            latent.rows(),
            self.dim()
        );
        Ok(())
    }

    /// Greedy RVQ using the first `stages` codebooks.
    pub fn quantize_stages(&self, latent: &LatentTensor, stages: usize) -> Result<QuantizedLatent> {
        self.check_latent(latent)?;
        ensure!(stages <= self.num_stages(), "requested {stages} stages of {}", self.num_stages());
        let d = latent.cols();
        let mut indices = vec![vec![0; d]; stages];
        for t in 0..d {
            let mut residual = latent.column(t);
            for (s, row) in indices.iter_mut().enumerate() {
                let k = self.nearest(s, &residual);
                row[t] = k;
                for (r, c) in residual.iter_mut().zip(self.stages[s].row(k)) {
                    *r -= c;
                }
            }
        }
        Ok(QuantizedLatent { indices })
    }

    pub fn quantize(&self, latent: &LatentTensor) -> Result<QuantizedLatent> {
        self.quantize_stages(latent, self.num_stages())
    }

    /// Sum over stages of the indexed codewords.
    pub fn dequantize(&self, q: &QuantizedLatent) -> Result<LatentTensor> {
        if self.stages.is_empty() {
            return Err(Error::Unsupported("quantization is disabled (no RVQ stages)".into()));
        }
        ensure!(q.num_stages() <= self.num_stages(), "too many stages in quantized latent");
        let d = q.num_frames();
        ensure!(q.indices.iter().all(|r| r.len() == d), "ragged quantized latent");
        let mut out = Tensor::zeros(self.dim(), d);
        for (s, row) in q.indices.iter().enumerate() {
            for (t, &k) in row.iter().enumerate() {
                ensure!(k < self.size(), "code index {k} out of range [0, {})", self.size());
                let cw = self.stages[s].row(k);
                for (f, &c) in cw.iter().enumerate() {
                    let v = out.get(f, t) + c;
                    out.set(f, t, v);
                }
            }
        }
        Ok(out)
    }

    /// Fits `stages` codebooks of `size` entries on the rows of `vectors`:
    /// stage `s` is k-means on the residuals left by stages `0..s`.
    pub fn fit(vectors: &[Vec<f64>], stages: usize, size: usize, iters: usize, seed: u64) -> Result<Self> {
        ensure!(!vectors.is_empty(), "no vectors to fit codebooks on");
        let mut residual = vectors.to_vec();
        let mut books = Vec::with_capacity(stages);
        for s in 0..stages {
            let mut book = kmeans(&residual, size, iters, seed.wrapping_add(s as u64))?;
            // Stored at checkpoint precision so save/load is lossless.
            crate::params::round_to_f32(book.data_mut());
            for r in residual.iter_mut() {
                let k = nearest_row(&book, r);
                for (x, c) in r.iter_mut().zip(book.row(k)) {
                    *x -= c;
                }
            }
            books.push(book);
        }
        Self::new(books)
    }
}

fn nearest_row(book: &Tensor, v: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for k in 0..book.rows() {
        let d = sq_dist(book.row(k), v);
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded at
/// the point currently farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<Tensor> {
    ensure!(!points.is_empty() && k >= 1, "k-means needs points and k >= 1");
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut u = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        };
        centers.push(points[next].clone());
        let c = centers.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    let mut assign = vec![0usize; points.len()];
    for _ in 0..iters {
        let book = Tensor::from_rows(&centers)?;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            assign[i] = nearest_row(&book, p);
            dists[i] = sq_dist(p, &centers[assign[i]]);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                let far = (0..points.len())
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .unwrap();
                centers[c] = points[far].clone();
                dists[far] = 0.0;
            }
        }
    }
    Tensor::from_rows(&centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar_books(stages: usize) -> Codebooks {
        let book = Tensor::from_vec(3, 1, vec![-1.0, 0.0, 1.0]).unwrap();
        Codebooks::new(vec![book; stages]).unwrap()
    }

    #[test]
    fn single_stage_nearest_neighbour() {
        let cb = scalar_books(1);
        let q = cb.quantize(&Tensor::full(1, 1, 0.4)).unwrap();
        assert_eq!(q.indices, vec![vec![1]]);
    }

    #[test]
    fn two_stage_greedy_residuals() {
        let cb = scalar_books(2);
        let q = cb.quantize(&Tensor::full(1, 1, 1.6)).unwrap();
        assert_eq!(q.indices, vec![vec![2], vec![2]]);
        assert_eq!(cb.dequantize(&q).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn exact_codeword_then_zero_vectors() {
        let s0 = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 0.0]]).unwrap();
        let s1 = Tensor::from_rows(&[vec![0.3, 0.3], vec![0.0, 0.0], vec![-0.2, 0.1]]).unwrap();
        let cb = Codebooks::new(vec![s0, s1.clone(), s1]).unwrap();
        let x = Tensor::from_rows(&[vec![-3.0], vec![0.5]]).unwrap();
        assert_eq!(cb.quantize(&x).unwrap().indices, vec![vec![1], vec![1], vec![1]]);
        let zeros = QuantizedLatent {
            indices: vec![vec![2, 2], vec![1, 1], vec![1, 1]],
        };
        assert_eq!(cb.dequantize(&zeros).unwrap(), Tensor::zeros(2, 2));
    }

    #[test]
    fn errors() {
        let cb = Codebooks::empty();
        assert!(matches!(cb.quantize(&Tensor::zeros(1, 1)), Err(Error::Unsupported(_))));
        let cb = scalar_books(1);
        let bad = QuantizedLatent { indices: vec![vec![3]] };
        assert!(matches!(cb.dequantize(&bad), Err(Error::InvalidArgument(_))));
        assert!(cb.quantize(&Tensor::zeros(2, 1)).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut pts = Vec::new();
        for c in [-5.0, 0.0, 5.0] {
            for i in 0..20 {
                pts.push(vec![c + (i as f64 - 10.0) * 0.01, -c]);
            }
        }
        let book = kmeans(&pts, 3, 10, 1).unwrap();
        let mut xs: Vec<f64> = (0..3).map(|k| book.get(k, 0)).collect();
        xs.sort_by(f64::total_cmp);
        for (x, c) in xs.iter().zip([-5.0, 0.0, 5.0]) {
            assert!((x - c).abs() < 0.05);
        }
    }

    fn random_books(seed: u64, stages: usize, size: usize, dim: usize) -> Codebooks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books = (0..stages)
            .map(|s| {
                let scale = 0.5f64.powi(s as i32);
                Tensor::from_fn(size, dim, |_, _| rng.random_range(-1.0..1.0) * scale)
            })
            .collect();
        Codebooks::new(books).unwrap()
    }

    proptest! {
        #[test]
        fn error_non_increasing_in_stages(seed in any::<u64>()) {
            let cb = random_books(seed, 4, 16, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let x = Tensor::from_fn(3, 10, |_, _| rng.random_range(-1.5..1.5));
            let mut prev = x.sum_sq();
            for s in 1..=4 {
                let q = cb.quantize_stages(&x, s).unwrap();
                let err = cb.dequantize(&q).unwrap().sub(&x).unwrap().sum_sq();
                prop_assert!(err <= prev + 1e-12);
                prev = err;
            }
        }

        #[test]
        fn quantization_is_idempotent(seed in any::<u64>()) {
            // Nested grids: each stage's codewords are distinct and finer than
            // half the spacing of the stage before.
            let grid = |step: f64| {
                let pts: Vec<Vec<f64>> = [-1.0, 0.0, 1.0]
                    .iter()
                    .flat_map(|&a| [-1.0, 0.0, 1.0].map(move |b| vec![a * step, b * step]))
                    .collect();
                Tensor::from_rows(&pts).unwrap()
            };
            let cb = Codebooks::new(vec![grid(1.0), grid(0.25), grid(0.0625)]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(2, 6, |_, _| rng.random_range(-1.5..1.5));
            let q = cb.quantize(&x).unwrap();
            let again = cb.quantize(&cb.dequantize(&q).unwrap()).unwrap();
            prop_assert_eq!(again, q);
        }
    }
}
