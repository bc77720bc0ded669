//! Exact cosine nearest-neighbour search and Recall@K.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::vmf::UnitDescriptor;

/// Rows of a bank are stored at single precision, so their norms are checked
/// against this looser tolerance.
pub const BANK_UNIT_TOLERANCE: f64 = 1e-6;

/// Descriptors with their metadata, stored as parallel arrays.
///
/// Descriptor values are always exactly representable as `f32`, which keeps
/// a write/read round-trip through the binary bank format bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorBank {
    dim: usize,
    descriptors: Vec<f64>,
    ids: Vec<u64>,
    labels: Vec<usize>,
    poses: Option<Vec<[f64; 2]>>,
    true_kappa: Option<Vec<f64>>,
    kappas: Option<Vec<f64>>,
}

/// Rounds a unit vector to single precision.
pub fn quantize(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v as f32 as f64).collect()
}

impl DescriptorBank {
    /// Builds a bank from unit descriptors, rounding them to `f32`.
    pub fn from_descriptors(
        rows: &[UnitDescriptor],
        ids: Vec<u64>,
        labels: Vec<usize>,
        poses: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.dim())
            .ok_or_else(|| Error::Domain("bank needs at least one descriptor".into()))?;
        let mut flat = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.dim() != dim {
                return Err(Error::Shape("descriptors have mixed dimensions".into()));
            }
            flat.extend(quantize(r.as_slice()));
        }
        Self::from_flat(dim, flat, ids, labels, poses)
    }

    /// Builds a bank from a row-major matrix that is already `f32`-exact.
    pub fn from_flat(
        dim: usize,
        descriptors: Vec<f64>,
        ids: Vec<u64>,
        labels: Vec<usize>,
        poses: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        if dim < 2 || !descriptors.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} values do not form rows of dim {dim}",
                descriptors.len()
            )));
        }
        let n = descriptors.len() / dim;
        if ids.len() != n || labels.len() != n || poses.as_ref().is_some_and(|p| p.len() != n) {
            return Err(Error::Shape(format!(
                "bank of {n} rows has {} ids, {} labels",
                ids.len(),
                labels.len()
            )));
        }
        for (i, row) in descriptors.chunks_exact(dim).enumerate() {
            let nr = norm(row);
            if !nr.is_finite() || (nr - 1.0).abs() > BANK_UNIT_TOLERANCE {
                return Err(Error::Domain(format!("bank row {i} has norm {nr}")));
            }
        }
        let unique: BTreeSet<u64> = ids.iter().copied().collect();
        if unique.len() != n {
            return Err(Error::Domain("bank ids must be unique".into()));
        }
        Ok(Self {
            dim,
            descriptors,
            ids,
            labels,
            poses,
            true_kappa: None,
            kappas: None,
        })
    }

    pub fn with_true_kappa(mut self, k: Vec<f64>) -> Result<Self> {
        self.check_len(k.len(), "true_kappa")?;
        self.true_kappa = Some(k);
        Ok(self)
    }

    pub fn with_kappas(mut self, k: Vec<f64>) -> Result<Self> {
        self.check_len(k.len(), "kappas")?;
        self.kappas = Some(k);
        Ok(self)
    }

    pub fn set_kappas(&mut self, k: Option<Vec<f64>>) -> Result<()> {
        if let Some(k) = &k {
            self.check_len(k.len(), "kappas")?;
        }
        self.kappas = k;
        Ok(())
    }

    pub fn without_poses(mut self) -> Self {
        self.poses = None;
        self
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n != self.len() {
            return Err(Error::Shape(format!("{what} has {n} entries for {} rows", self.len())));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn descriptors(&self) -> &[f64] {
        &self.descriptors
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn poses(&self) -> Option<&[[f64; 2]]> {
        self.poses.as_deref()
    }

    pub fn true_kappa(&self) -> Option<&[f64]> {
        self.true_kappa.as_deref()
    }

    pub fn kappas(&self) -> Option<&[f64]> {
        self.kappas.as_deref()
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            dim: self.dim,
            descriptors: indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            poses: self.poses.as_ref().map(|p| indices.iter().map(|&i| p[i]).collect()),
            true_kappa: self.true_kappa.as_ref().map(pick),
            kappas: self.kappas.as_ref().map(pick),
        }
    }
}

/// Top-K neighbours of one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: u64,
    /// Bank row indices, best first.
    pub indices: Vec<usize>,
    pub reference_ids: Vec<u64>,
    pub similarities: Vec<f64>,
}

impl RetrievalResult {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// Exact top-K by cosine similarity, ties broken by ascending reference id.
pub fn knn(query_id: u64, query: &[f64], bank: &DescriptorBank, k: usize) -> Result<RetrievalResult> {
    if k == 0 || k > bank.len() {
        return Err(Error::Domain(format!("K={k} outside 1..={}", bank.len())));
    }
    if query.len() != bank.dim() {
        return Err(Error::Shape(format!(
            "query dim {} vs bank dim {}",
            query.len(),
            bank.dim()
        )));
    }
    let mut scored: Vec<(f64, u64, usize)> = (0..bank.len())
        .map(|i| (dot(query, bank.row(i)), bank.ids[i], i))
        .collect();
    let order = |a: &(f64, u64, usize), b: &(f64, u64, usize)| -> Ordering {
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(order);
    Ok(RetrievalResult {
        query_id,
        indices: scored.iter().map(|s| s.2).collect(),
        reference_ids: scored.iter().map(|s| s.1).collect(),
        similarities: scored.iter().map(|s| s.0).collect(),
    })
}

/// [`knn`] for every row of `queries`, in query order.
pub fn knn_all(queries: &DescriptorBank, bank: &DescriptorBank, k: usize) -> Result<Vec<RetrievalResult>> {
    (0..queries.len())
        .into_par_iter()
        .map(|i| knn(queries.ids[i], queries.row(i), bank, k))
        .collect()
}

/// How positives are decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    /// A reference is positive when its pose lies within `τ` of the query's.
    DistanceThreshold(f64),
    /// Query id → reference ids.
    ExplicitPositives(BTreeMap<u64, BTreeSet<u64>>),
}

pub const DEFAULT_THRESHOLD: f64 = 25.0;

impl Default for GroundTruth {
    fn default() -> Self {
        GroundTruth::DistanceThreshold(DEFAULT_THRESHOLD)
    }
}

impl GroundTruth {
    /// Positive sets precomputed from poses under the distance threshold.
    pub fn explicit_from_threshold(
        queries: &DescriptorBank,
        bank: &DescriptorBank,
        tau: f64,
    ) -> Result<Self> {
        let gt = GroundTruth::DistanceThreshold(tau);
        let mut map = BTreeMap::new();
        for q in 0..queries.len() {
            let mut set = BTreeSet::new();
            for r in 0..bank.len() {
                if gt.is_positive(queries, q, bank, r)? {
                    set.insert(bank.ids[r]);
                }
            }
            map.insert(queries.ids[q], set);
        }
        Ok(GroundTruth::ExplicitPositives(map))
    }

    /// Whether bank row `r` is a positive for query row `q`.
    pub fn is_positive(
        &self,
        queries: &DescriptorBank,
        q: usize,
        bank: &DescriptorBank,
        r: usize,
    ) -> Result<bool> {
        match self {
            GroundTruth::DistanceThreshold(tau) => {
                if !(*tau > 0.0) {
                    return Err(Error::Config(format!("threshold must be > 0, got {tau}")));
                }
                let (Some(qp), Some(rp)) = (queries.poses(), bank.poses()) else {
                    return Err(Error::Unsupported(
                        "distance-threshold ground truth needs poses".into(),
                    ));
                };
                let (a, b) = (qp[q], rp[r]);
                Ok((a[0] - b[0]).hypot(a[1] - b[1]) <= *tau)
            }
            GroundTruth::ExplicitPositives(map) => {
                let qid = queries.ids[q];
                let set = map
                    .get(&qid)
                    .ok_or_else(|| Error::Lookup(format!("query {qid} has no ground-truth entry")))?;
                Ok(set.contains(&bank.ids[r]))
            }
        }
    }

    /// Positive flag per rank for each result; `results[i]` must belong to
    /// query row `i`.
    pub fn mark(
        &self,
        results: &[RetrievalResult],
        queries: &DescriptorBank,
        bank: &DescriptorBank,
    ) -> Result<Vec<Vec<bool>>> {
        if results.len() != queries.len() {
            return Err(Error::Shape(format!(
                "{} results for {} queries",
                results.len(),
                queries.len()
            )));
        }
        results
            .iter()
            .enumerate()
            .map(|(q, res)| {
                if res.query_id != queries.ids[q] {
                    return Err(Error::Lookup(format!(
                        "result {q} belongs to query {} not {}",
                        res.query_id, queries.ids[q]
                    )));
                }
                res.indices
                    .iter()
                    .map(|&r| self.is_positive(queries, q, bank, r))
                    .collect()
            })
            .collect()
    }
}

/// Whether any of the first `k` ranks is positive.
pub fn success_at(flags: &[bool], k: usize) -> bool {
    flags.iter().take(k).any(|&f| f)
}

/// Mean over queries of the any-positive-in-top-K indicator.
pub fn recall_at_k(
    results: &[RetrievalResult],
    gt: &GroundTruth,
    queries: &DescriptorBank,
    bank: &DescriptorBank,
    k: usize,
) -> Result<f64> {
    let flags = gt.mark(results, queries, bank)?;
    recall_from_flags(&flags, k)
}

pub fn recall_from_flags(flags: &[Vec<bool>], k: usize) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::Domain("recall over zero queries".into()));
    }
    if let Some(short) = flags.iter().find(|f| f.len() < k) {
        return Err(Error::Domain(format!(
            "Recall@{k} requested but a result has only {} ranks",
            short.len()
        )));
    }
    let hits = flags.iter().filter(|f| success_at(f, k)).count();
    Ok(hits as f64 / flags.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bank(rows: Vec<Vec<f64>>, ids: Vec<u64>) -> DescriptorBank {
        let n = rows.len();
        let units: Vec<UnitDescriptor> = rows
            .into_iter()
            .map(|r| UnitDescriptor::normalize(r).unwrap())
            .collect();
        let poses = (0..n).map(|i| [i as f64 * 100.0, 0.0]).collect();
        DescriptorBank::from_descriptors(&units, ids, vec![0; n], Some(poses)).unwrap()
    }

    #[test]
    fn self_query_ranks_first() {
        let b = bank(
            vec![vec![1.0, 0.2, 0.0], vec![0.0, 1.0, 0.3], vec![0.5, 0.5, 0.5]],
            vec![10, 11, 12],
        );
        let r = knn(0, b.row(1), &b, 3).unwrap();
        assert_eq!(r.indices[0], 1);
        assert!((r.similarities[0] - 1.0).abs() < 1e-6);
        assert!(r.similarities.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn orthogonal_pair() {
        let b = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let r = knn(0, &[1.0, 0.0], &b, 2).unwrap();
        assert_eq!(r.similarities, vec![1.0, 0.0]);
        assert!(knn(0, &[1.0, 0.0], &b, 3).is_err());
        assert!(knn(0, &[1.0, 0.0], &b, 0).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let b = bank(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]], vec![5, 9, 3]);
        let r = knn(0, &[1.0, 0.0], &b, 3).unwrap();
        assert_eq!(r.reference_ids, vec![3, 9, 5]);
    }

    #[test]
    fn five_vector_full_sort_oracle() {
        let rows = vec![
            vec![0.9, 0.1, 0.3],
            vec![-0.2, 0.8, 0.1],
            vec![0.4, 0.4, -0.7],
            vec![0.1, -0.9, 0.2],
            vec![0.7, 0.6, 0.2],
        ];
        let b = bank(rows, vec![0, 1, 2, 3, 4]);
        let q = UnitDescriptor::normalize(vec![0.5, 0.5, 0.1]).unwrap();
        let mut oracle: Vec<(f64, u64)> = (0..5)
            .map(|i| (b.row(i).iter().zip(q.as_slice()).map(|(a, c)| a * c).sum(), i as u64))
            .collect();
        oracle.sort_by(|a, c| c.0.partial_cmp(&a.0).unwrap());
        let r = knn(0, q.as_slice(), &b, 5).unwrap();
        assert_eq!(r.reference_ids, oracle.iter().map(|o| o.1).collect::<Vec<_>>());
    }

    #[test]
    fn recall_hand_case() {
        let flags = vec![vec![true], vec![true], vec![false], vec![true]];
        assert_eq!(recall_from_flags(&flags, 1).unwrap(), 0.75);
        assert_eq!(recall_from_flags(&vec![vec![true]; 3], 1).unwrap(), 1.0);
        assert_eq!(recall_from_flags(&vec![vec![false, false]; 3], 2).unwrap(), 0.0);
    }

    #[test]
    fn explicit_positives_missing_query() {
        let b = bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let results = knn_all(&b, &b, 1).unwrap();
        let gt = GroundTruth::ExplicitPositives(BTreeMap::from([(0, BTreeSet::from([0]))]));
        assert!(matches!(recall_at_k(&results, &gt, &b, &b, 1), Err(Error::Lookup(_))));
        let no_pose = b.clone().without_poses();
        assert!(matches!(
            recall_at_k(&results, &GroundTruth::default(), &no_pose, &no_pose, 1),
            Err(Error::Unsupported(_))
        ));
    }

    fn random_bank(seed: u64, n: usize) -> DescriptorBank {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<UnitDescriptor> = (0..n)
            .map(|_| {
                // coarse values so that ties actually occur
                UnitDescriptor::normalize((0..3).map(|_| rng.random_range(-2i32..=2) as f64 + 0.5).collect())
                    .unwrap()
            })
            .collect();
        let poses = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        DescriptorBank::from_descriptors(&rows, (0..n as u64).collect(), vec![0; n], Some(poses)).unwrap()
    }

    proptest! {
        #[test]
        fn recall_monotone_and_modes_agree(seed in 0u64..500) {
            let db = random_bank(seed, 20);
            let qs = random_bank(seed + 10_000, 6);
            let results = knn_all(&qs, &db, 10).unwrap();
            let thr = GroundTruth::DistanceThreshold(30.0);
            let exp = GroundTruth::explicit_from_threshold(&qs, &db, 30.0).unwrap();
            let mut prev = 0.0;
            for k in 1..=10 {
                let a = recall_at_k(&results, &thr, &qs, &db, k).unwrap();
                let b = recall_at_k(&results, &exp, &qs, &db, k).unwrap();
                prop_assert_eq!(a, b);
                prop_assert!(a >= prev);
                prev = a;
            }
        }

        #[test]
        fn knn_invariant_to_row_order(seed in 0u64..500) {
            let db = random_bank(seed, 15);
            let mut order: Vec<usize> = (0..15).collect();
            order.reverse();
            order.swap(2, 9);
            let shuffled = db.subset(&order);
            let q = db.row(3).to_vec();
            let a = knn(0, &q, &db, 15).unwrap();
            let b = knn(0, &q, &shuffled, 15).unwrap();
            prop_assert_eq!(a.reference_ids, b.reference_ids);
            prop_assert_eq!(a.similarities, b.similarities);
        }
    }
}
