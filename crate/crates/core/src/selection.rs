//! Key-based group selection.
//!
//! Routing picks the key with the highest cosine similarity to the frozen
//! backbone feature. During training the score is calibrated by the
//! accumulated selection probability `q`, `(cos - 1) * q_g`, which is never
//! positive and penalizes heavily used groups unless the match is near exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::LayerPrompts;
use crate::error::{Error, Result};
use crate::numerics::kernels::{cosine_grad_b, cosine_slices};
use crate::numerics::Tensor;
use crate::rng::seed_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyBank {
    pub keys: Vec<Tensor>,
    /// Accumulated selection counts `v_g`.
    pub counts: Vec<u64>,
    /// Selection probabilities derived from `counts`.
    pub q: Vec<f64>,
    pub shadow_keys: Option<Vec<Tensor>>,
    pub shadow_group_prompts: Option<Vec<LayerPrompts>>,
}

impl KeyBank {
    /// Unit-norm random keys, zero counts, uniform `q`.
    pub fn init(groups: usize, dim: usize, seed: u64) -> Result<Self> {
        if groups == 0 || dim == 0 {
            return Err(Error::Config("key bank needs at least one group and dimension".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, &[0x4E75]));
        let keys = (0..groups)
            .map(|_| loop {
                let t = Tensor::randn(&[dim], 1.0, &mut rng);
                let n = t.norm();
                if n > 1e-12 {
                    break t.map(|v| v / n);
                }
            })
            .collect();
        Ok(Self::from_keys(keys))
    }

    pub fn from_keys(keys: Vec<Tensor>) -> Self {
        let g = keys.len();
        Self {
            keys,
            counts: vec![0; g],
            q: update_q(&vec![0; g]),
            shadow_keys: None,
            shadow_group_prompts: None,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.keys.len()
    }

    pub fn check(&self) -> Result<()> {
        let g = self.keys.len();
        if g == 0 || self.counts.len() != g || self.q.len() != g {
            return Err(Error::Invariant("key bank arrays disagree on group count".into()));
        }
        if update_q(&self.counts) != self.q {
            return Err(Error::Invariant("q does not reflect accumulated counts".into()));
        }
        if self.keys.iter().any(|k| k.norm() == 0.0) {
            return Err(Error::Invariant("zero-norm key".into()));
        }
        Ok(())
    }
}

fn argmax_lowest(scores: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, s) in scores.enumerate() {
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

fn similarities(feature: &[f64], keys: &[Tensor]) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::Empty("key set"));
    }
    if feature.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("routing feature has zero norm".into()));
    }
    keys.iter().map(|k| cosine_slices(feature, k.data())).collect()
}

/// `argmax_g cos(feature, k_g)`, ties to the lowest index.
pub fn select(feature: &[f64], keys: &[Tensor]) -> Result<usize> {
    Ok(argmax_lowest(similarities(feature, keys)?.into_iter()))
}

/// `argmax_g (cos(feature, k_g) - 1) * q_g`, ties to the lowest index.
pub fn select_calibrated(feature: &[f64], keys: &[Tensor], q: &[f64]) -> Result<usize> {
    if q.len() != keys.len() {
        return Err(Error::shape("select_calibrated", format!("{} keys, {} probabilities", keys.len(), q.len())));
    }
    let cos = similarities(feature, keys)?;
    Ok(argmax_lowest(cos.iter().zip(q).map(|(c, p)| (c - 1.0) * p)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyLoss {
    pub group: usize,
    /// `-cos(feature, k_group)`.
    pub loss: f64,
    /// Gradient of `loss` with respect to `k_group`; the feature is constant.
    pub grad: Tensor,
}

/// Calibrated routing when `q` is given, plain cosine argmax otherwise.
pub fn route(feature: &[f64], keys: &[Tensor], q: Option<&[f64]>) -> Result<usize> {
    match q {
        Some(q) => select_calibrated(feature, keys, q),
        None => select(feature, keys),
    }
}

/// `-cos(feature, key)` and its gradient with respect to `key`.
pub fn key_loss_at(feature: &[f64], key: &Tensor) -> Result<(f64, Tensor)> {
    let loss = -cosine_slices(feature, key.data())?;
    let grad = Tensor::new(key.shape().to_vec(), cosine_grad_b(feature, key.data(), -1.0)?)?;
    Ok((loss, grad))
}

/// Routing plus the key loss for the chosen group.
pub fn key_loss(feature: &[f64], keys: &[Tensor], q: Option<&[f64]>) -> Result<KeyLoss> {
    let group = route(feature, keys, q)?;
    let (loss, grad) = key_loss_at(feature, &keys[group])?;
    Ok(KeyLoss { group, loss, grad })
}

/// Normalized counts; uniform when nothing has been selected yet.
pub fn update_q(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        let g = counts.len().max(1) as f64;
        return vec![1.0 / g; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// `alpha * shadow + (1 - alpha) * fresh`.
pub fn momentum_merge(shadow: &Tensor, fresh: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("momentum rate {alpha} outside [0, 1]")));
    }
    if !shadow.same_shape(fresh) {
        return Err(Error::shape("momentum_merge", format!("{:?} vs {:?}", shadow.shape(), fresh.shape())));
    }
    // Endpoints are exact copies so that alpha = 0 reproduces plain averaging bit for bit.
    if alpha == 0.0 {
        return Ok(fresh.clone());
    }
    if alpha == 1.0 {
        return Ok(shadow.clone());
    }
    let data = shadow
        .data()
        .iter()
        .zip(fresh.data())
        .map(|(s, f)| alpha * s + (1.0 - alpha) * f)
        .collect();
    Tensor::new(shadow.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference, max_rel_error};
    use proptest::prelude::*;

    fn keys(rows: &[&[f64]]) -> Vec<Tensor> {
        rows.iter().map(|r| Tensor::vector(r.to_vec())).collect()
    }

    #[test]
    fn select_examples() {
        let k = keys(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(select(&[1.0, 0.0], &k).unwrap(), 0);
        assert_eq!(select(&[-3.0, 2.0], &keys(&[&[1.0, 0.0]])).unwrap(), 0);
        let k = keys(&[&[1.0, 0.0], &[0.6, 0.8]]);
        assert_eq!(select(&[1.0, 1.0], &k).unwrap(), 1);
        assert!(matches!(select(&[0.0, 0.0], &k), Err(Error::Degenerate(_))));
    }

    #[test]
    fn select_ties_break_low() {
        let k = keys(&[&[1.0, 1.0], &[1.0, 1.0], &[2.0, 2.0]]);
        assert_eq!(select(&[0.3, 0.7], &k).unwrap(), 0);
    }

    /// Keys chosen so that cos(f, k0) = 0.9 and cos(f, k1) = 0.8 for f = e1.
    fn two_keys_09_08() -> Vec<Tensor> {
        let k0 = [0.9, (1.0f64 - 0.81).sqrt()];
        let k1 = [0.8, -(1.0f64 - 0.64).sqrt()];
        keys(&[&k0, &k1])
    }

    #[test]
    fn calibrated_examples() {
        let k = two_keys_09_08();
        let f = [1.0, 0.0];
        assert_eq!(select_calibrated(&f, &k, &[0.5, 0.5]).unwrap(), 0);
        assert_eq!(select_calibrated(&f, &k, &[0.9, 0.1]).unwrap(), 1);
        // An unused group scores 0, the maximum.
        assert_eq!(select_calibrated(&f, &k, &[1.0, 0.0]).unwrap(), 1);
        assert!(select_calibrated(&f, &k, &[1.0]).is_err());
    }

    #[test]
    fn key_loss_examples() {
        let k = keys(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let kl = key_loss(&[3.0, 0.0], &k, Some(&[0.5, 0.5])).unwrap();
        assert_eq!(kl.group, 0);
        assert!((kl.loss + 1.0).abs() < 1e-12);
        assert!(kl.grad.data()[0].abs() < 1e-12);

        let kl = key_loss(&[0.0, 1.0], &keys(&[&[1.0, 0.0]]), Some(&[1.0])).unwrap();
        assert_eq!(kl.loss, 0.0);
    }

    #[test]
    fn key_loss_gradient_matches_finite_differences() {
        let f = [0.3, -1.2, 0.7];
        let k = keys(&[&[0.5, 0.1, -0.4], &[-0.2, 0.9, 0.3]]);
        let kl = key_loss(&f, &k, Some(&[0.5, 0.5])).unwrap();
        let numeric = finite_difference(&k[kl.group], 1e-5, |t| -cosine_slices(&f, t.data()).unwrap());
        assert!(max_rel_error(&kl.grad, &numeric, 1e-8) < 1e-6);
    }

    #[test]
    fn update_q_examples() {
        assert_eq!(update_q(&[3, 1]), vec![0.75, 0.25]);
        assert_eq!(update_q(&[0, 0]), vec![0.5, 0.5]);
        assert_eq!(update_q(&[5]), vec![1.0]);
    }

    #[test]
    fn momentum_examples() {
        let s = Tensor::scalar(1.0);
        let f = Tensor::scalar(0.0);
        assert_eq!(momentum_merge(&s, &f, 0.0).unwrap(), f);
        assert_eq!(momentum_merge(&s, &f, 1.0).unwrap(), s);
        assert_eq!(momentum_merge(&s, &f, 0.5).unwrap().data(), &[0.5]);
        assert!(momentum_merge(&s, &f, 1.5).is_err());
        assert!(momentum_merge(&s, &Tensor::zeros(&[2]), 0.5).is_err());
    }

    #[test]
    fn key_bank_init_invariants() {
        let kb = KeyBank::init(4, 8, 3).unwrap();
        kb.check().unwrap();
        assert!(kb.keys.iter().all(|k| (k.norm() - 1.0).abs() < 1e-12));
        assert_eq!(kb.q, vec![0.25; 4]);
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, n)
    }

    proptest! {
        #[test]
        fn routing_ignores_positive_scale(
            f in vec_strategy(4),
            raw in prop::collection::vec(vec_strategy(4), 3),
            scales in prop::collection::vec(0.01f64..100.0, 4),
            counts in prop::collection::vec(0u64..50, 3),
        ) {
            prop_assume!(f.iter().any(|v| v.abs() > 1e-3));
            prop_assume!(raw.iter().all(|k| k.iter().any(|v| v.abs() > 1e-3)));
            let ks: Vec<Tensor> = raw.iter().map(|k| Tensor::vector(k.clone())).collect();
            let scaled: Vec<Tensor> = ks.iter().zip(&scales[1..]).map(|(k, s)| k.map(|v| v * s)).collect();
            let fs: Vec<f64> = f.iter().map(|v| v * scales[0]).collect();
            let q = update_q(&counts);
            let a = select(&f, &ks).unwrap();
            let b = select(&fs, &scaled).unwrap();
            let ca = select_calibrated(&f, &ks, &q).unwrap();
            let cb = select_calibrated(&fs, &scaled, &q).unwrap();
            // Rescaling may move cosines by an ulp; only assert when the winner is clear.
            let cos: Vec<f64> = ks.iter().map(|k| cosine_slices(&f, k.data()).unwrap()).collect();
            let mut sorted = cos.clone();
            sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
            if sorted[0] - sorted[1] > 1e-9 {
                prop_assert_eq!(a, b);
            }
            let mut cal: Vec<f64> = cos.iter().zip(&q).map(|(c, p)| (c - 1.0) * p).collect();
            cal.sort_by(|x, y| y.partial_cmp(x).unwrap());
            if cal[0] - cal[1] > 1e-9 {
                prop_assert_eq!(ca, cb);
            }
        }

        #[test]
        fn momentum_is_affine(
            s in vec_strategy(5),
            f in vec_strategy(5),
            alpha in 0.0f64..=1.0,
            c in -3.0f64..3.0,
        ) {
            let st = Tensor::vector(s);
            let ft = Tensor::vector(f);
            let merged_then_scaled = momentum_merge(&st, &ft, alpha).unwrap().map(|v| v * c);
            let scaled_then_merged = momentum_merge(&st.map(|v| v * c), &ft.map(|v| v * c), alpha).unwrap();
            for (x, y) in merged_then_scaled.data().iter().zip(scaled_then_merged.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
    }
}
