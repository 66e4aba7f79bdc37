//! Market-neutral long/short weights from an edge cross-section.

use std::collections::BTreeMap;

use chrono::NaiveDate;

use crate::signals::{standardize, SignalFrame};

/// Capital on each side of the book.
pub const SIDE_GROSS: f64 = 0.5;

/// Signed weights per ticker (fraction of capital), aligned with the panel's
/// ticker order. Zero means no position.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFrame {
    pub date: NaiveDate,
    pub weights: Vec<f64>,
}

impl WeightFrame {
    pub fn flat(date: NaiveDate, n: usize) -> Self {
        Self {
            date,
            weights: vec![0.0; n],
        }
    }

    pub fn is_flat(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0)
    }

    pub fn long_sum(&self) -> f64 {
        self.weights.iter().filter(|w| **w > 0.0).sum()
    }

    pub fn short_sum(&self) -> f64 {
        self.weights.iter().filter(|w| **w < 0.0).sum()
    }

    pub fn gross(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    pub fn net(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn n_long(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    pub fn n_short(&self) -> usize {
        self.weights.iter().filter(|w| **w < 0.0).count()
    }

    pub fn max_abs(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    pub fn to_map(&self, tickers: &[String]) -> BTreeMap<String, f64> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, w)| (tickers[i].clone(), *w))
            .collect()
    }

    /// Net weight per sector label; names without a label go to `"Unknown"`.
    pub fn sector_net(&self, tickers: &[String], sectors: &BTreeMap<String, String>) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (i, w) in self.weights.iter().enumerate() {
            if *w != 0.0 {
                let s = sectors.get(&tickers[i]).map(String::as_str).unwrap_or("Unknown");
                *out.entry(s.to_string()).or_insert(0.0) += w;
            }
        }
        out
    }
}

pub fn build_weights(edge: &SignalFrame) -> WeightFrame {
    build_weights_capped(edge, None)
}

/// As [`build_weights`], with an optional per-name cap on `|w|`. Excess over
/// the cap is redistributed pro-rata within the same side.
pub fn build_weights_capped(edge: &SignalFrame, cap: Option<f64>) -> WeightFrame {
    let mut weights = vec![0.0; edge.len()];
    fill_weights(edge.values(), cap, &mut weights);
    WeightFrame {
        date: edge.date,
        weights,
    }
}

/// Reusable buffers for [`fill_weights_with`].
#[derive(Debug, Default)]
pub(crate) struct WeightScratch {
    idx: Vec<usize>,
    z: Vec<f64>,
}

/// Writes unscaled weights for one edge row into `out`; returns whether the
/// book is non-flat.
pub(crate) fn fill_weights(edge: &[f64], cap: Option<f64>, out: &mut [f64]) -> bool {
    fill_weights_with(edge, cap, out, &mut WeightScratch::default())
}

pub(crate) fn fill_weights_with(edge: &[f64], cap: Option<f64>, out: &mut [f64], scratch: &mut WeightScratch) -> bool {
    out.fill(0.0);
    let WeightScratch { idx, z } = scratch;
    idx.clear();
    z.clear();
    for (i, e) in edge.iter().enumerate() {
        if !e.is_nan() && *e != 0.0 {
            idx.push(i);
            z.push(*e);
        }
    }
    if !standardize(z) {
        return false;
    }
    let long_total: f64 = z.iter().filter(|v| **v > 0.0).sum();
    let short_total: f64 = z.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    if long_total <= 0.0 || short_total <= 0.0 {
        return false;
    }
    for (i, v) in idx.iter().zip(z.iter()) {
        if *v > 0.0 {
            out[*i] = SIDE_GROSS * v / long_total;
        } else if *v < 0.0 {
            out[*i] = -SIDE_GROSS * (-v) / short_total;
        }
    }
    if let Some(cap) = cap {
        apply_cap(out, cap, 1.0);
        apply_cap(out, cap, -1.0);
    }
    true
}

fn apply_cap(w: &mut [f64], cap: f64, sign: f64) {
    let side: Vec<usize> = (0..w.len()).filter(|&i| w[i] * sign > 0.0).collect();
    let strength: Vec<f64> = side.iter().map(|&i| w[i].abs()).collect();
    let mut capped = vec![false; side.len()];
    loop {
        let n_capped = capped.iter().filter(|c| **c).count();
        let budget = SIDE_GROSS - cap * n_capped as f64;
        let free: f64 = strength.iter().zip(&capped).filter(|(_, c)| !**c).map(|(s, _)| s).sum();
        if free <= 0.0 || budget <= 0.0 {
            for (k, &i) in side.iter().enumerate() {
                w[i] = sign * if capped[k] { cap } else { 0.0 };
            }
            return;
        }
        let mut changed = false;
        for (k, &i) in side.iter().enumerate() {
            if capped[k] {
                w[i] = sign * cap;
            } else {
                let x = budget * strength[k] / free;
                if x > cap {
                    capped[k] = true;
                    changed = true;
                }
                w[i] = sign * x;
            }
        }
        if !changed {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(values: &[f64]) -> SignalFrame {
        SignalFrame::new("2020-01-01".parse().unwrap(), values.to_vec())
    }

    #[test]
    fn four_name_example() {
        // EDGE {2, 1, -1, -2}: mean 0, sample sd sqrt(10/3), so z is
        // proportional to EDGE and the long side splits 2:1.
        let w = build_weights(&frame(&[2.0, 1.0, -1.0, -2.0]));
        let expect = [1.0 / 3.0, 1.0 / 6.0, -1.0 / 6.0, -1.0 / 3.0];
        for (a, b) in w.weights.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((w.long_sum() - 0.5).abs() < 1e-15);
        assert!((w.short_sum() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_zero_edge_is_flat() {
        assert!(build_weights(&frame(&[0.0, 0.0, 0.0])).is_flat());
    }

    #[test]
    fn no_dispersion_is_flat() {
        assert!(build_weights(&frame(&[1.0, 1.0])).is_flat());
        assert!(build_weights(&frame(&[1.0, f64::NAN, 0.0])).is_flat());
    }

    #[test]
    fn zero_and_missing_names_get_no_position() {
        let w = build_weights(&frame(&[0.9, 0.0, f64::NAN, 0.1, 0.4]));
        assert_eq!(w.weights[1], 0.0);
        assert_eq!(w.weights[2], 0.0);
        assert!(!w.is_flat());
    }

    #[test]
    fn cap_redistributes_within_side() {
        let edge: Vec<f64> = vec![10.0, 1.0, 1.1, 1.2, -1.0, -1.1, -1.2, -1.3];
        let w = build_weights_capped(&frame(&edge), Some(0.2));
        assert!(w.max_abs() <= 0.2 + 1e-15);
        assert!((w.long_sum() - 0.5).abs() < 1e-12);
        assert!((w.short_sum() + 0.5).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn book_invariants(edge in proptest::collection::vec(-3.0f64..3.0, 0..60), c in 0.01f64..100.0) {
                let w = build_weights(&frame(&edge));
                if !w.is_flat() {
                    prop_assert!((w.long_sum() - 0.5).abs() < 1e-10);
                    prop_assert!((w.short_sum() + 0.5).abs() < 1e-10);
                    prop_assert!((w.gross() - 1.0).abs() < 1e-10);
                    prop_assert!(w.net().abs() < 1e-10);
                }
                // scale invariance
                let scaled: Vec<f64> = edge.iter().map(|e| e * c).collect();
                let v = build_weights(&frame(&scaled));
                for (a, b) in w.weights.iter().zip(&v.weights) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
                // monotone within the long side
                let longs: Vec<(f64, f64)> = edge.iter().zip(&w.weights).filter(|(_, w)| **w > 0.0).map(|(e, w)| (*e, *w)).collect();
                for x in &longs {
                    for y in &longs {
                        if x.0 > y.0 {
                            prop_assert!(x.1 >= y.1);
                        }
                    }
                }
                for (e, w) in edge.iter().zip(&w.weights) {
                    if *e == 0.0 {
                        prop_assert_eq!(*w, 0.0);
                    }
                }
            }
        }
    }
}
