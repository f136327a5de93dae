//! Batch draws for the resampled chains and the bootstrap baselines.
//!
//! Every batch is produced from its own ChaCha sub-stream, addressed by
//! `(seed, stream_id, index)`. A chain stores the index of each batch it
//! consumed, so any batch can be regenerated later without replaying the
//! whole chain, and parallel workers never share generator state.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Words reserved per sub-stream (2^36 64-bit outputs).
const SUBSTREAM_SHIFT: u32 = 36;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream: identical `(seed, stream_id)` pairs always
/// produce identical sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Generator positioned at the start of the stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Generator for the `index`-th disjoint block of the stream.
    pub fn substream(&self, index: u64) -> ChaCha8Rng {
        assert!(index < (1u64 << 32), "sub-stream index out of range");
        let mut rng = self.rng();
        rng.set_word_pos(u128::from(index) << SUBSTREAM_SHIFT);
        rng
    }

    /// A child stream labelled by `label`, independent of the parent.
    pub fn derive(&self, label: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(label.wrapping_add(0xA5A5_A5A5))),
        }
    }
}

/// Which observations enter one evaluation of the objective.
///
/// Indices are zero-based and may repeat. In weight mode every observation
/// carries a nonnegative weight; evaluations divide by the total weight.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchSelector {
    Indices(Vec<usize>),
    Weights(Vec<f64>),
}

impl BatchSelector {
    /// Indices `0..n`: the full sample.
    pub fn full(n: usize) -> Self {
        BatchSelector::Indices((0..n).collect())
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            BatchSelector::Indices(idx) => {
                if idx.is_empty() {
                    return Err(Error::Config("batch has no indices".into()));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                    return Err(Error::Config(format!("batch index {bad} out of range for n = {n}")));
                }
            }
            BatchSelector::Weights(w) => {
                if w.len() != n {
                    return Err(Error::Config(format!("weight vector has length {}, expected {n}", w.len())));
                }
                if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(Error::Config("weights must be finite and nonnegative".into()));
                }
                if w.iter().all(|&x| x == 0.0) {
                    return Err(Error::Config("weights are all zero".into()));
                }
            }
        }
        Ok(())
    }

    /// Calls `f(row, weight)` for each contribution, in order. Zero weights are skipped.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            BatchSelector::Indices(idx) => idx.iter().for_each(|&i| f(i, 1.0)),
            BatchSelector::Weights(w) => w
                .iter()
                .enumerate()
                .filter(|(_, &wi)| wi != 0.0)
                .for_each(|(i, &wi)| f(i, wi)),
        }
    }

    pub fn total_weight(&self) -> f64 {
        match self {
            BatchSelector::Indices(idx) => idx.len() as f64,
            BatchSelector::Weights(w) => w.iter().sum(),
        }
    }

    /// Number of contributions (indices) or of positive weights.
    pub fn len(&self) -> usize {
        match self {
            BatchSelector::Indices(idx) => idx.len(),
            BatchSelector::Weights(w) => w.iter().filter(|&&x| x > 0.0).count(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The resampling scheme used to build each batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    /// `m` indices uniform on the sample, with replacement.
    Iid { m: usize },
    /// A contiguous block `t, …, t+m−1` with `t` uniform on the admissible starts.
    MovingBlock { m: usize },
    /// A contiguous block of length `m`, then `m` indices drawn with
    /// replacement from inside it (the time-series scheme used for MA(1)).
    BlockResampled { m: usize },
    /// Whole clusters drawn with replacement; `m_clusters` defaults to the cluster count.
    Cluster { m_clusters: Option<usize> },
    /// `n` iid Exponential(1) weights.
    ExponentialWeights,
}

/// A scheme bound to a concrete sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ResamplePlan {
    scheme: Scheme,
    n: usize,
    /// Rows eligible for resampling; `None` means all rows.
    support: Option<Vec<usize>>,
    /// Row lists per cluster (cluster scheme only).
    clusters: Option<Vec<Vec<usize>>>,
}

impl ResamplePlan {
    pub fn new(scheme: Scheme, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("sample size must be positive".into()));
        }
        match scheme {
            Scheme::Iid { m } | Scheme::MovingBlock { m } | Scheme::BlockResampled { m } => {
                if m == 0 || m > n {
                    return Err(Error::Config(format!("batch size m = {m} must satisfy 1 <= m <= n = {n}")));
                }
            }
            Scheme::Cluster { .. } => {
                return Err(Error::Config("cluster resampling needs cluster ids; use ResamplePlan::clusters".into()))
            }
            Scheme::ExponentialWeights => {}
        }
        Ok(Self {
            scheme,
            n,
            support: None,
            clusters: None,
        })
    }

    pub fn iid(n: usize, m: usize) -> Result<Self> {
        Self::new(Scheme::Iid { m }, n)
    }

    pub fn moving_block(n: usize, m: usize) -> Result<Self> {
        Self::new(Scheme::MovingBlock { m }, n)
    }

    pub fn block_resampled(n: usize, m: usize) -> Result<Self> {
        Self::new(Scheme::BlockResampled { m }, n)
    }

    pub fn exponential(n: usize) -> Result<Self> {
        Self::new(Scheme::ExponentialWeights, n)
    }

    /// Cluster resampling from per-row cluster labels. Clusters are ordered by
    /// first appearance so the plan does not depend on label values.
    pub fn clusters(cluster_ids: &[i64], m_clusters: Option<usize>) -> Result<Self> {
        if cluster_ids.is_empty() {
            return Err(Error::Config("cluster ids are empty".into()));
        }
        let mut order: Vec<i64> = Vec::new();
        let mut lookup = std::collections::HashMap::new();
        let mut rows: Vec<Vec<usize>> = Vec::new();
        for (row, id) in cluster_ids.iter().enumerate() {
            let k = *lookup.entry(*id).or_insert_with(|| {
                order.push(*id);
                rows.push(Vec::new());
                rows.len() - 1
            });
            rows[k].push(row);
        }
        if let Some(mc) = m_clusters {
            if mc == 0 {
                return Err(Error::Config("m_clusters must be positive".into()));
            }
        }
        Ok(Self {
            scheme: Scheme::Cluster { m_clusters },
            n: cluster_ids.len(),
            support: None,
            clusters: Some(rows),
        })
    }

    pub fn scheme(&self) -> &Scheme {
        &self.scheme
    }

    /// Number of rows in the underlying sample.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Resample size and sample size in the units resampling operates on
    /// (observations, or clusters for the cluster scheme). The variance
    /// adjustment uses their ratio.
    pub fn sizes(&self) -> (usize, usize) {
        let available = self.support.as_ref().map_or(self.n, Vec::len);
        match &self.scheme {
            Scheme::Iid { m } => (*m, available),
            Scheme::MovingBlock { m } | Scheme::BlockResampled { m } => (*m, self.n),
            Scheme::Cluster { m_clusters } => {
                let k = self.cluster_rows().len();
                (m_clusters.unwrap_or(k), k)
            }
            Scheme::ExponentialWeights => (available, available),
        }
    }

    fn cluster_rows(&self) -> &[Vec<usize>] {
        self.clusters.as_deref().unwrap_or(&[])
    }

    /// A plan that never draws the given rows. Clusters left empty are dropped.
    pub fn excluding(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Ok(self.clone());
        }
        let drop: std::collections::HashSet<usize> = rows.iter().copied().collect();
        let mut out = self.clone();
        match &self.scheme {
            Scheme::MovingBlock { .. } | Scheme::BlockResampled { .. } => {
                return Err(Error::Config("cannot exclude rows from a block scheme".into()))
            }
            Scheme::Cluster { m_clusters } => {
                let kept: Vec<Vec<usize>> = self
                    .cluster_rows()
                    .iter()
                    .map(|c| c.iter().copied().filter(|r| !drop.contains(r)).collect::<Vec<_>>())
                    .filter(|c| !c.is_empty())
                    .collect();
                if kept.is_empty() {
                    return Err(Error::Config("exclusion leaves no clusters".into()));
                }
                // An explicit cluster count keeps its meaning only if still admissible.
                let m_clusters = m_clusters.filter(|&m| m < self.cluster_rows().len());
                out.scheme = Scheme::Cluster { m_clusters };
                out.clusters = Some(kept);
            }
            Scheme::Iid { m } => {
                let base: Vec<usize> = self.support.clone().unwrap_or_else(|| (0..self.n).collect());
                let kept: Vec<usize> = base.into_iter().filter(|r| !drop.contains(r)).collect();
                if kept.is_empty() {
                    return Err(Error::Config("exclusion leaves no rows".into()));
                }
                let m = if *m >= self.support.as_ref().map_or(self.n, Vec::len) { kept.len() } else { (*m).min(kept.len()) };
                out.scheme = Scheme::Iid { m };
                out.support = Some(kept);
            }
            Scheme::ExponentialWeights => {
                let base: Vec<usize> = self.support.clone().unwrap_or_else(|| (0..self.n).collect());
                let kept: Vec<usize> = base.into_iter().filter(|r| !drop.contains(r)).collect();
                if kept.is_empty() {
                    return Err(Error::Config("exclusion leaves no rows".into()));
                }
                out.support = Some(kept);
            }
        }
        Ok(out)
    }

    /// One realized batch from `rng`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> BatchSelector {
        match &self.scheme {
            Scheme::Iid { m } => {
                let idx = match &self.support {
                    None => (0..*m).map(|_| rng.random_range(0..self.n)).collect(),
                    Some(s) => (0..*m).map(|_| s[rng.random_range(0..s.len())]).collect(),
                };
                BatchSelector::Indices(idx)
            }
            Scheme::MovingBlock { m } => {
                let t = rng.random_range(0..=self.n - m);
                BatchSelector::Indices((t..t + m).collect())
            }
            Scheme::BlockResampled { m } => {
                let t = rng.random_range(0..=self.n - m);
                BatchSelector::Indices((0..*m).map(|_| t + rng.random_range(0..*m)).collect())
            }
            Scheme::Cluster { m_clusters } => {
                let clusters = self.cluster_rows();
                let draws = m_clusters.unwrap_or(clusters.len());
                let mut idx = Vec::new();
                for _ in 0..draws {
                    idx.extend_from_slice(&clusters[rng.random_range(0..clusters.len())]);
                }
                BatchSelector::Indices(idx)
            }
            Scheme::ExponentialWeights => match &self.support {
                None => BatchSelector::Weights(exponential_weights(self.n, rng)),
                Some(s) => {
                    let mut w = vec![0.0; self.n];
                    for &r in s {
                        w[r] = Exp1.sample(rng);
                    }
                    BatchSelector::Weights(w)
                }
            },
        }
    }

    /// The batch stored under sub-stream `index` of `stream`.
    pub fn draw_batch(&self, stream: &RngStream, index: u64) -> BatchSelector {
        self.draw(&mut stream.substream(index))
    }
}

/// `n` iid Exponential(1) weights.
pub fn exponential_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| Exp1.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_block_full_length_is_identity() {
        let plan = ResamplePlan::moving_block(7, 7).unwrap();
        let stream = RngStream::new(3, 0);
        for k in 0..20 {
            assert_eq!(plan.draw_batch(&stream, k), BatchSelector::full(7));
        }
    }

    #[test]
    fn block_draws_stay_inside_series() {
        let plan = ResamplePlan::moving_block(50, 12).unwrap();
        let stream = RngStream::new(11, 4);
        for k in 0..500 {
            let BatchSelector::Indices(idx) = plan.draw_batch(&stream, k) else { panic!() };
            assert_eq!(idx.len(), 12);
            assert!(idx.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(*idx.last().unwrap() < 50);
        }
        let plan = ResamplePlan::block_resampled(50, 12).unwrap();
        for k in 0..500 {
            let BatchSelector::Indices(idx) = plan.draw_batch(&stream, k) else { panic!() };
            let lo = *idx.iter().min().unwrap();
            let hi = *idx.iter().max().unwrap();
            assert!(hi - lo < 12 && hi < 50);
        }
    }

    #[test]
    fn oversized_batch_is_a_config_error() {
        assert!(matches!(ResamplePlan::iid(10, 11), Err(Error::Config(_))));
        assert!(matches!(ResamplePlan::moving_block(10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn iid_index_frequencies() {
        let plan = ResamplePlan::iid(10, 1).unwrap();
        let mut rng = RngStream::new(99, 1).rng();
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            let BatchSelector::Indices(idx) = plan.draw(&mut rng) else { panic!() };
            counts[idx[0]] += 1;
        }
        let p = 0.1;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts {
            assert!((c as f64 / draws as f64 - p).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn exponential_weight_moments() {
        let mut rng = RngStream::new(5, 2).rng();
        let w = exponential_weights(100_000, &mut rng);
        assert!(w.iter().all(|&x| x > 0.0));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn clusters_stay_intact() {
        let ids: Vec<i64> = (0..94).flat_map(|c| std::iter::repeat(c * 7).take(1 + (c as usize % 5))).collect();
        let plan = ResamplePlan::clusters(&ids, None).unwrap();
        assert_eq!(plan.sizes(), (94, 94));
        let stream = RngStream::new(1, 1);
        for k in 0..50 {
            let BatchSelector::Indices(idx) = plan.draw_batch(&stream, k) else { panic!() };
            let mut i = 0;
            let mut drawn = 0;
            while i < idx.len() {
                let c = ids[idx[i]];
                let size = ids.iter().filter(|&&x| x == c).count();
                let run = &idx[i..i + size];
                assert!(run.iter().all(|&r| ids[r] == c));
                assert_eq!(run.iter().collect::<std::collections::HashSet<_>>().len(), size);
                i += size;
                drawn += 1;
            }
            assert_eq!(drawn, 94);
        }
    }

    #[test]
    fn substreams_reproduce_and_differ() {
        let s = RngStream::new(42, 7);
        let a: Vec<u64> = (0..4).map(|_| s.substream(3).random()).collect();
        let b: Vec<u64> = (0..4).map(|_| s.substream(3).random()).collect();
        assert_eq!(a, b);
        let mut r3 = s.substream(3);
        let mut r4 = s.substream(4);
        assert_ne!(r3.random::<u64>(), r4.random::<u64>());
        assert_ne!(s.derive(1), s.derive(2));
    }

    #[test]
    fn exclusion_removes_rows() {
        let plan = ResamplePlan::iid(20, 20).unwrap().excluding(&[0, 1, 2]).unwrap();
        assert_eq!(plan.sizes(), (17, 17));
        let stream = RngStream::new(8, 8);
        for k in 0..100 {
            let BatchSelector::Indices(idx) = plan.draw_batch(&stream, k) else { panic!() };
            assert!(idx.iter().all(|&i| i >= 3));
        }
        let same = ResamplePlan::iid(20, 20).unwrap().excluding(&[]).unwrap();
        assert_eq!(same, ResamplePlan::iid(20, 20).unwrap());
    }

    #[test]
    fn weight_batch_validation() {
        assert!(BatchSelector::Weights(vec![0.0; 3]).validate(3).is_err());
        assert!(BatchSelector::Weights(vec![1.0, f64::NAN, 1.0]).validate(3).is_err());
        assert!(BatchSelector::Indices(vec![3]).validate(3).is_err());
        assert!(BatchSelector::Weights(vec![0.0, 2.0, 1.0]).validate(3).is_ok());
    }
}
