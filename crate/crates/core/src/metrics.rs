//! Accuracies, clustering congruence against a k-means oracle, selection
//! stability, and the empirical discrepancy diagnostic.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{Frozen, PromptMode};
use crate::data::Sample;
use crate::encoder::argmax;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::rng_for;
use crate::server::{self, GlobalState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub global: f64,
    pub mean_local: f64,
    pub worst_local: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub accuracy: Option<Accuracies>,
    /// Selections per group summed over this round's clients.
    pub group_counts: Vec<u64>,
    /// `(client id, per-group selections)` for every participant.
    pub client_histograms: Vec<(usize, Vec<u64>)>,
    pub congruence: Option<f64>,
    pub wall_ms: f64,
}

fn accuracy_of(samples: &[Sample], predict: &(impl Fn(&Sample) -> Result<usize> + Sync)) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let correct = samples
        .par_iter()
        .map(|s| predict(s).map(|p| usize::from(p == s.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / samples.len() as f64)
}

/// Global, mean-local and worst-local accuracy of an arbitrary predictor.
pub fn accuracies_with(
    predict: impl Fn(&Sample) -> Result<usize> + Sync,
    client_tests: &[Vec<Sample>],
    global_test: &[Sample],
) -> Result<Accuracies> {
    if client_tests.is_empty() {
        return Err(Error::Empty("client test sets"));
    }
    let global = accuracy_of(global_test, &predict)?;
    let local = client_tests
        .iter()
        .map(|t| accuracy_of(t, &predict))
        .collect::<Result<Vec<_>>>()?;
    Ok(Accuracies {
        global,
        mean_local: local.iter().sum::<f64>() / local.len() as f64,
        worst_local: local.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

pub fn accuracies(
    state: &GlobalState,
    frozen: Frozen<'_>,
    mode: PromptMode,
    client_tests: &[Vec<Sample>],
    global_test: &[Sample],
) -> Result<Accuracies> {
    accuracies_with(
        |s| server::infer(state, frozen, mode, &s.x).map(|(c, _)| c),
        client_tests,
        global_test,
    )
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::Degenerate("zero-norm feature in k-means".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let s = dot(x, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn kmeans_once(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    // k-means++ seeding under cosine distance 1 - cos.
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d: Vec<f64> = points.iter().map(|p| (1.0 - nearest(p, &centroids).1).max(0.0)).collect();
        let total: f64 = d.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            d.iter()
                .position(|&w| {
                    r -= w;
                    r <= 0.0
                })
                .unwrap_or(points.len() - 1)
        };
        centroids.push(points[pick].clone());
    }

    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..iters.max(1) {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let changed = next != labels;
        labels = next;
        if !changed {
            break;
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            let mut sum = vec![0.0; c.len()];
            for (p, _) in points.iter().zip(&labels).filter(|(_, &l)| l == j) {
                sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
            }
            if let Ok(n) = normalized(&sum) {
                *c = n;
            }
        }
    }
    let objective = points.iter().zip(&labels).map(|(p, &l)| dot(p, &centroids[l])).sum();
    (labels, objective)
}

/// Cosine Lloyd's algorithm with k-means++ seeding; best of five restarts.
pub fn kmeans_oracle(features: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    if features.is_empty() {
        return Err(Error::Empty("k-means input"));
    }
    if k == 0 || k > features.len() {
        return Err(Error::Config(format!("k-means with k={k} on {} points", features.len())));
    }
    let points = features.iter().map(|f| normalized(f)).collect::<Result<Vec<_>>>()?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..5u64 {
        let (labels, obj) = kmeans_once(&points, k, iters, &mut rng_for(seed, &[0x3EA, restart]));
        if best.as_ref().is_none_or(|(_, b)| obj > *b) {
            best = Some((labels, obj));
        }
    }
    Ok(best.expect("at least one restart").0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverlapWeighting {
    /// `sum_r max_c n_rc / N`.
    #[default]
    Mass,
    /// Mean over non-empty rows of `max_c n_rc / n_r`.
    RowNormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Congruence {
    pub acc_overlap: f64,
    pub q_kmeans: f64,
    pub score: f64,
}

fn contingency(rows: &[usize], cols: &[usize]) -> Vec<Vec<usize>> {
    let r = rows.iter().max().map_or(0, |m| m + 1);
    let c = cols.iter().max().map_or(0, |m| m + 1);
    let mut m = vec![vec![0; c]; r];
    for (&a, &b) in rows.iter().zip(cols) {
        m[a][b] += 1;
    }
    m
}

/// Overlap between Select groups (rows) and oracle clusters (columns),
/// divided by the oracle's class purity.
pub fn congruence(
    select_labels: &[usize],
    oracle_labels: &[usize],
    class_labels: &[usize],
    weighting: OverlapWeighting,
) -> Result<Congruence> {
    let n = select_labels.len();
    if n == 0 {
        return Err(Error::Empty("congruence input"));
    }
    if oracle_labels.len() != n || class_labels.len() != n {
        return Err(Error::shape("congruence", "label vectors differ in length"));
    }
    let table = contingency(select_labels, oracle_labels);
    let row_max = |row: &Vec<usize>| row.iter().copied().max().unwrap_or(0);
    let acc_overlap = match weighting {
        OverlapWeighting::Mass => table.iter().map(row_max).sum::<usize>() as f64 / n as f64,
        OverlapWeighting::RowNormalized => {
            let rows: Vec<f64> = table
                .iter()
                .filter(|r| r.iter().sum::<usize>() > 0)
                .map(|r| row_max(r) as f64 / r.iter().sum::<usize>() as f64)
                .collect();
            rows.iter().sum::<f64>() / rows.len() as f64
        }
    };
    let purity = contingency(oracle_labels, class_labels);
    let clusters: Vec<f64> = purity
        .iter()
        .filter(|r| r.iter().sum::<usize>() > 0)
        .map(|r| row_max(r) as f64 / r.iter().sum::<usize>() as f64)
        .collect();
    let q_kmeans = clusters.iter().sum::<f64>() / clusters.len() as f64;
    Ok(Congruence {
        acc_overlap,
        q_kmeans,
        score: acc_overlap / q_kmeans,
    })
}

/// Per-group `(mean, population std)` of selection counts across rounds.
pub fn selection_stability(histories: &[Vec<u64>]) -> Result<Vec<(f64, f64)>> {
    if histories.len() < 2 {
        return Err(Error::Degenerate(format!(
            "selection stability needs at least 2 rounds, got {}",
            histories.len()
        )));
    }
    let g = histories[0].len();
    if histories.iter().any(|h| h.len() != g) {
        return Err(Error::shape("selection_stability", "rounds disagree on group count"));
    }
    let n = histories.len() as f64;
    Ok((0..g)
        .map(|j| {
            let mean = histories.iter().map(|h| h[j] as f64).sum::<f64>() / n;
            let var = histories.iter().map(|h| (h[j] as f64 - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .collect())
}

/// Linear classifier `argmax(x W)` on frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHypothesis {
    pub w: Tensor,
}

impl LinearHypothesis {
    pub fn predict(&self, x: &[f64]) -> usize {
        let (d, c) = (self.w.rows(), self.w.cols());
        let scores: Vec<f64> = (0..c).map(|j| (0..d).map(|i| x[i] * self.w.at(i, j)).sum()).collect();
        argmax(&scores)
    }
}

/// `count` classifiers with unit-norm random columns.
pub fn random_hypotheses(dim: usize, classes: usize, count: usize, seed: u64) -> Vec<LinearHypothesis> {
    let mut rng = rng_for(seed, &[0xD15C]);
    (0..count)
        .map(|_| {
            let mut w = Tensor::randn(&[dim, classes], 1.0, &mut rng);
            for j in 0..classes {
                let n = (0..dim).map(|i| w.at(i, j).powi(2)).sum::<f64>().sqrt();
                for i in 0..dim {
                    w.data_mut()[i * classes + j] /= n;
                }
            }
            LinearHypothesis { w }
        })
        .collect()
}

/// Labelled frozen feature.
pub type Labelled = (Vec<f64>, usize);

fn zero_one_loss(h: &LinearHypothesis, data: &[Labelled]) -> f64 {
    data.iter().filter(|(x, y)| h.predict(x) != *y).count() as f64 / data.len() as f64
}

/// `max_h |L_a(h) - L_b(h)|` over a finite hypothesis set, 0/1 loss.
pub fn empirical_discrepancy(a: &[Labelled], b: &[Labelled], hypotheses: &[LinearHypothesis]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("hypothesis set"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("discrepancy sample"));
    }
    Ok(hypotheses
        .iter()
        .map(|h| (zero_one_loss(h, a) - zero_one_loss(h, b)).abs())
        .fold(0.0, f64::max))
}

/// One-sided sign test p-value for "differences tend to be positive".
/// Zero differences are dropped; with nothing left the p-value is 1.
pub fn sign_test(diffs: &[f64]) -> f64 {
    let n = diffs.iter().filter(|d| **d != 0.0).count();
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let mut choose = 1.0;
    let mut tail = 0.0;
    for j in 0..=n {
        if j >= wins {
            tail += choose;
        }
        choose = choose * (n - j) as f64 / (j + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sign_test_tail_probabilities() {
        assert_eq!(sign_test(&[1.0; 5]), 1.0 / 32.0);
        assert_eq!(sign_test(&[1.0, 1.0, 1.0, 1.0, -1.0]), 6.0 / 32.0);
        assert_eq!(sign_test(&[1.0, 1.0, 1.0, 1.0, 0.0]), 1.0 / 16.0);
        assert_eq!(sign_test(&[-1.0; 3]), 1.0);
        assert_eq!(sign_test(&[]), 1.0);
    }

    fn sample(label: usize) -> Sample {
        Sample {
            id: 0,
            x: vec![label as f64],
            label,
            group: 0,
        }
    }

    #[test]
    fn accuracy_examples() {
        let tests: Vec<Vec<Sample>> = vec![(0..4).map(sample).collect(), (0..4).map(sample).collect()];
        let global: Vec<Sample> = tests.concat();
        let perfect = accuracies_with(|s| Ok(s.label), &tests, &global).unwrap();
        assert_eq!((perfect.global, perfect.mean_local, perfect.worst_local), (1.0, 1.0, 1.0));
        let constant = accuracies_with(|_| Ok(0), &tests, &global).unwrap();
        assert!((constant.global - 0.25).abs() < 1e-12);

        let skewed = vec![vec![sample(1), sample(1)], vec![sample(0)]];
        let a = accuracies_with(|_| Ok(0), &skewed, &skewed.concat()).unwrap();
        assert_eq!(a.worst_local, 0.0);
        assert_eq!(a.mean_local, 0.5);
        assert!(matches!(accuracies_with(|_| Ok(0), &[vec![]], &global), Err(Error::Empty(_))));
    }

    #[test]
    fn kmeans_examples() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64 * 0.1]).collect();
        assert_eq!(kmeans_oracle(&pts, 1, 10, 0).unwrap(), vec![0; 6]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut anti = Vec::new();
        for i in 0..40 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            anti.push(vec![s * 5.0 + rng.random::<f64>(), s * 5.0 + rng.random::<f64>()]);
        }
        let labels = kmeans_oracle(&anti, 2, 20, 1).unwrap();
        for (i, l) in labels.iter().enumerate() {
            assert_eq!(*l, labels[i % 2]);
        }
        assert_ne!(labels[0], labels[1]);
        assert_eq!(kmeans_oracle(&anti, 2, 20, 1).unwrap(), labels);

        let dup = vec![vec![1.0, 0.0]; 3];
        assert_eq!(kmeans_oracle(&dup, 2, 5, 0).unwrap(), vec![0; 3]);
    }

    #[test]
    fn congruence_examples() {
        let x = vec![0, 0, 1, 1, 2, 2];
        for w in [OverlapWeighting::Mass, OverlapWeighting::RowNormalized] {
            let c = congruence(&x, &x, &x, w).unwrap();
            assert_eq!(c.score, 1.0);
        }
        let collapsed = vec![0; 4];
        let oracle = vec![0, 0, 1, 1];
        let c = congruence(&collapsed, &oracle, &oracle, OverlapWeighting::Mass).unwrap();
        assert_eq!(c.acc_overlap, 0.5);
        assert_eq!(c.score, 0.5);
        assert!(congruence(&[], &[], &[], OverlapWeighting::Mass).is_err());
    }

    #[test]
    fn stability_examples() {
        let constant = vec![vec![3, 1]; 5];
        assert!(selection_stability(&constant).unwrap().iter().all(|&(_, s)| s == 0.0));
        let alt: Vec<Vec<u64>> = (0..6).map(|i| vec![if i % 2 == 0 { 0 } else { 4 }]).collect();
        assert_eq!(selection_stability(&alt).unwrap(), vec![(2.0, 2.0)]);
        assert!(selection_stability(&alt[..1]).is_err());
    }

    fn labelled(seed: u64, n: usize) -> Vec<Labelled> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (vec![rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, 1.0], rng.random_range(0..3)))
            .collect()
    }

    #[test]
    fn discrepancy_examples() {
        let hs = random_hypotheses(3, 3, 64, 5);
        let a = labelled(1, 30);
        assert_eq!(empirical_discrepancy(&a, &a, &hs).unwrap(), 0.0);
        let b = labelled(2, 20);
        let one = &hs[..1];
        let direct = (zero_one_loss(&one[0], &a) - zero_one_loss(&one[0], &b)).abs();
        assert_eq!(empirical_discrepancy(&a, &b, one).unwrap(), direct);
        assert!(empirical_discrepancy(&a, &b, &[]).is_err());
        for h in &hs {
            for j in 0..3 {
                let n: f64 = (0..3).map(|i| h.w.at(i, j).powi(2)).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn congruence_identity_for_any_labeling(x in proptest::collection::vec(0usize..5, 1..40)) {
            for w in [OverlapWeighting::Mass, OverlapWeighting::RowNormalized] {
                prop_assert_eq!(congruence(&x, &x, &x, w).unwrap().score, 1.0);
            }
        }

        #[test]
        fn discrepancy_is_a_pseudometric(s in 0u64..1000) {
            let hs = random_hypotheses(3, 3, 16, s);
            let (a, b, c) = (labelled(s, 15), labelled(s + 1, 12), labelled(s + 2, 9));
            let ab = empirical_discrepancy(&a, &b, &hs).unwrap();
            prop_assert_eq!(ab, empirical_discrepancy(&b, &a, &hs).unwrap());
            let ac = empirical_discrepancy(&a, &c, &hs).unwrap();
            let cb = empirical_discrepancy(&c, &b, &hs).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn accuracies_ignore_sample_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut t: Vec<Sample> = (0..12).map(|_| sample(rng.random_range(0..3))).collect();
            let pred = |s: &Sample| Ok((s.label * 7 + 1) % 3);
            let a = accuracies_with(pred, &[t.clone()], &t).unwrap();
            t.reverse();
            prop_assert_eq!(a, accuracies_with(pred, &[t.clone()], &t).unwrap());
        }
    }
}
