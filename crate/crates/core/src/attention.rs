//! Reference attention kernels.
//!
//! Both kernels share one code path: logits are `q·k/√d` plus an optional
//! per-entry bias, normalized with a max-subtracted softmax. The compensated
//! kernel uses `alpha * ln(fusion_count)` as the bias, so entries with
//! `fusion_count == 1` contribute exactly as they would under plain attention.

use crate::error::{Error, Result};
use crate::types::{check_compensation, dot, CacheEntry, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// One weight per attended entry, in input order.
    pub weights: Vec<f64>,
    pub output: Vector,
}

/// Max-subtracted softmax.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty);
    }
    if let Some(index) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Attends `q` over `(key, value, logit_bias)` triples.
pub(crate) fn attend<'a, I>(q: &Vector, items: I) -> Result<AttentionResult>
where
    I: IntoIterator<Item = (&'a Vector, &'a Vector, f64)>,
{
    let dim = q.dim();
    let scale = (dim as f64).sqrt().recip();
    let mut logits = Vec::new();
    let mut values = Vec::new();
    for (key, value, bias) in items {
        key.check_dim(dim)?;
        value.check_dim(dim)?;
        logits.push(dot(q, key) * scale + bias);
        values.push(value);
    }
    let weights = stable_softmax(&logits)?;
    let mut output = vec![0.0; dim];
    for (w, v) in weights.iter().zip(&values) {
        for (o, x) in output.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    Ok(AttentionResult {
        weights,
        output: Vector::from_raw(output),
    })
}

/// Plain scaled dot-product attention over parallel key/value slices.
pub fn full_attention(q: &Vector, keys: &[Vector], values: &[Vector]) -> Result<AttentionResult> {
    if keys.len() != values.len() {
        return Err(Error::LengthMismatch {
            keys: keys.len(),
            values: values.len(),
        });
    }
    attend(q, keys.iter().zip(values).map(|(k, v)| (k, v, 0.0)))
}

/// Plain attention over cache entries, ignoring fusion counts.
pub fn entry_attention<'a, I>(q: &Vector, entries: I) -> Result<AttentionResult>
where
    I: IntoIterator<Item = &'a CacheEntry>,
{
    attend(q, entries.into_iter().map(|e| (&e.key, &e.value, 0.0)))
}

/// Attention with a `alpha * ln(w)` logit bonus for every entry of fusion
/// count `w`.
pub fn compensated_attention<'a, I>(q: &Vector, entries: I, alpha: f64) -> Result<AttentionResult>
where
    I: IntoIterator<Item = &'a CacheEntry>,
{
    check_compensation(alpha)?;
    let mut bad_count = false;
    let items = entries.into_iter().map(|e| {
        let bias = match e.fusion_count {
            0 => {
                bad_count = true;
                0.0
            }
            1 => 0.0,
            w => alpha * (w as f64).ln(),
        };
        (&e.key, &e.value, bias)
    });
    let result = attend(q, items);
    if bad_count {
        return Err(Error::ZeroFusionCount);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::EntryId;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    fn entry(id: u64, key: &[f64], value: &[f64], w: u64) -> CacheEntry {
        let mut e = CacheEntry::new(EntryId(id), v(key), v(value), id as usize + 1);
        e.fusion_count = w;
        e
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(stable_softmax(&[-1234.5]).unwrap(), vec![1.0]);
        assert_eq!(stable_softmax(&[1e300]).unwrap(), vec![1.0]);
        let w = stable_softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_errors() {
        assert_eq!(stable_softmax(&[]), Err(Error::Empty));
        assert_eq!(
            stable_softmax(&[0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        );
        assert!(stable_softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_survives_large_spread() {
        let w = stable_softmax(&[1000.0, 0.0, -1000.0]).unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn full_attention_single_token() {
        let r = full_attention(&v(&[0.3, -2.0]), &[v(&[1.0, 5.0])], &[v(&[7.0, -1.0])]).unwrap();
        assert_eq!(r.weights, vec![1.0]);
        assert_eq!(r.output, v(&[7.0, -1.0]));
    }

    #[test]
    fn full_attention_identical_keys_split_mass() {
        let r = full_attention(
            &v(&[1.0, 0.0]),
            &[v(&[1.0, 0.0]), v(&[1.0, 0.0])],
            &[v(&[2.0, 0.0]), v(&[0.0, 2.0])],
        )
        .unwrap();
        assert_eq!(r.weights, vec![0.5, 0.5]);
        assert_eq!(r.output, v(&[1.0, 1.0]));
    }

    #[test]
    fn full_attention_matches_high_precision_oracle() {
        // softmax([1/sqrt(2), 0]) evaluated at 40 significant digits.
        const W0: f64 = 0.6697615493266569;
        const W1: f64 = 0.33023845067334306;
        let r = full_attention(
            &v(&[1.0, 0.0]),
            &[v(&[1.0, 0.0]), v(&[0.0, 1.0])],
            &[v(&[1.0, 0.0]), v(&[0.0, 1.0])],
        )
        .unwrap();
        assert!((r.weights[0] - W0).abs() < 1e-15);
        assert!((r.weights[1] - W1).abs() < 1e-15);
        assert!((r.output[0] - W0).abs() < 1e-15);
        assert!((r.output[1] - W1).abs() < 1e-15);
    }

    #[test]
    fn full_attention_errors() {
        let q = v(&[1.0, 0.0]);
        assert_eq!(full_attention(&q, &[], &[]), Err(Error::Empty));
        assert_eq!(
            full_attention(&q, &[v(&[1.0, 0.0])], &[]),
            Err(Error::LengthMismatch { keys: 1, values: 0 })
        );
        assert_eq!(
            full_attention(&q, &[v(&[1.0, 0.0, 0.0])], &[v(&[1.0, 0.0])]),
            Err(Error::DimensionMismatch {
                expected: 2,
                actual: 3
            })
        );
    }

    #[test]
    fn compensation_log_two_gap() {
        let entries = [
            entry(0, &[0.5, 0.5], &[1.0, 0.0], 1),
            entry(1, &[0.5, 0.5], &[0.0, 1.0], 2),
        ];
        let r = compensated_attention(&v(&[0.2, -0.7]), &entries, 1.0).unwrap();
        assert!((r.weights[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.weights[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn compensated_errors() {
        let q = v(&[1.0]);
        let none: [CacheEntry; 0] = [];
        assert_eq!(compensated_attention(&q, &none, 0.5), Err(Error::Empty));
        let e = [entry(0, &[1.0], &[1.0], 1)];
        assert!(compensated_attention(&q, &e, 0.0).is_err());
        assert!(compensated_attention(&q, &e, 1.5).is_err());
        let z = [entry(0, &[1.0], &[1.0], 0)];
        assert_eq!(
            compensated_attention(&q, &z, 0.5),
            Err(Error::ZeroFusionCount)
        );
    }

    /// Independent straight-line evaluation of the compensated kernel.
    #[allow(clippy::needless_range_loop)]
    fn straight_line(q: &[f64], entries: &[CacheEntry], alpha: f64) -> (Vec<f64>, Vec<f64>) {
        let d = q.len() as f64;
        let mut nums = Vec::new();
        for e in entries {
            let mut s = 0.0;
            for i in 0..q.len() {
                s += q[i] * e.key[i];
            }
            nums.push((s / d.sqrt() + alpha * (e.fusion_count as f64).ln()).exp());
        }
        let den: f64 = nums.iter().sum();
        let a: Vec<f64> = nums.iter().map(|n| n / den).collect();
        let mut out = vec![0.0; q.len()];
        for (w, e) in a.iter().zip(entries) {
            for i in 0..q.len() {
                out[i] += w * e.value[i];
            }
        }
        (a, out)
    }

    fn arb_entries(dim: usize) -> impl Strategy<Value = Vec<CacheEntry>> {
        prop::collection::vec(
            (
                prop::collection::vec(-2.0f64..2.0, dim),
                prop::collection::vec(-2.0f64..2.0, dim),
                1u64..20,
            ),
            1..12,
        )
        .prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (k, val, w))| entry(i as u64, &k, &val, w))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn compensated_matches_straight_line(
            q in prop::collection::vec(-2.0f64..2.0, 4),
            entries in arb_entries(4),
        ) {
            let r = compensated_attention(&v(&q), &entries, 0.6).unwrap();
            let (a, out) = straight_line(&q, &entries, 0.6);
            for (x, y) in r.weights.iter().zip(&a) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in r.output.iter().zip(&out) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn weights_normalized(
            q in prop::collection::vec(-30.0f64..30.0, 3),
            entries in arb_entries(3),
            alpha in 0.01f64..=1.0,
        ) {
            let r = compensated_attention(&v(&q), &entries, alpha).unwrap();
            let sum: f64 = r.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(r.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        }

        #[test]
        fn softmax_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..16),
            shift in -100.0f64..100.0,
        ) {
            let a = stable_softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let b = stable_softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn unit_fusion_reduces_to_full(
            q in prop::collection::vec(-3.0f64..3.0, 4),
            entries in arb_entries(4),
            alpha in 0.01f64..=1.0,
        ) {
            let entries: Vec<CacheEntry> = entries
                .into_iter()
                .map(|mut e| { e.fusion_count = 1; e })
                .collect();
            let keys: Vec<Vector> = entries.iter().map(|e| e.key.clone()).collect();
            let values: Vec<Vector> = entries.iter().map(|e| e.value.clone()).collect();
            let c = compensated_attention(&v(&q), &entries, alpha).unwrap();
            let f = full_attention(&v(&q), &keys, &values).unwrap();
            for (x, y) in c.weights.iter().zip(&f.weights) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in c.output.iter().zip(f.output.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn raising_fusion_count_shifts_mass(
            q in prop::collection::vec(-3.0f64..3.0, 4),
            entries in arb_entries(4),
            pick in any::<prop::sample::Index>(),
            alpha in 0.05f64..=1.0,
        ) {
            prop_assume!(entries.len() >= 2);
            let i = pick.index(entries.len());
            let before = compensated_attention(&v(&q), &entries, alpha).unwrap();
            let mut bumped = entries.clone();
            bumped[i].fusion_count += 1;
            let after = compensated_attention(&v(&q), &bumped, alpha).unwrap();
            prop_assert!(after.weights[i] > before.weights[i]);
            for j in (0..entries.len()).filter(|&j| j != i) {
                prop_assert!(after.weights[j] < before.weights[j]);
            }
        }
    }
}
