//! Segmentation metrics (IoU, F1), plausibility IoU over activation maps,
//! and the exact one-sided Wilcoxon signed-rank test.

use crate::error::{Error, Result};
use crate::tensor::kernels::bilinear_resize;
use crate::tensor::scalar::normal_cdf;
use crate::tensor::Tensor;

/// Pixel confusion counts between two binary masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn pixel_count(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

fn as_bits(t: &Tensor) -> Vec<bool> {
    t.data().iter().map(|&v| v > 0.5).collect()
}

/// Confusion counts; values above 0.5 count as foreground.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::Dimension(format!(
            "mask shapes differ: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (p, g) in as_bits(pred).into_iter().zip(as_bits(gt)) {
        match (p, g) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// Intersection over union: tp / (tp + fp + fn); 1.0 when both masks are
/// empty.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let denom = c.true_pos + c.false_pos + c.false_neg;
    Ok(if denom == 0 {
        1.0
    } else {
        c.true_pos as f64 / denom as f64
    })
}

/// F1 / Dice: 2 tp / (2 tp + fp + fn); 1.0 when both masks are empty.
pub fn f1(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let denom = 2 * c.true_pos + c.false_pos + c.false_neg;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * c.true_pos as f64 / denom as f64
    })
}

/// How an activation map is binarized before comparison with a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThresholdRule {
    /// Threshold at the map mean; `>=` keeps a uniform map all-foreground.
    Mean,
    /// Otsu's method on a 256-bin histogram.
    Otsu,
}

fn otsu_threshold(map: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in map {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return lo; // degenerate uniform map: everything >= lo is foreground
    }
    const BINS: usize = 256;
    let mut hist = [0u64; BINS];
    let scale = BINS as f64 / (hi - lo);
    for &v in map {
        let b = (((v - lo) * scale) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = map.len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| i as f64 * h as f64)
        .sum::<f64>()
        / total;
    let (mut w0, mut sum0, mut best_var, mut best_bin) = (0.0, 0.0, -1.0, 0);
    for (i, &h) in hist.iter().enumerate() {
        w0 += h as f64 / total;
        sum0 += i as f64 * h as f64 / total;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / (1.0 - w0);
        let var = w0 * (1.0 - w0) * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_bin = i;
        }
    }
    lo + (best_bin as f64 + 1.0) / scale
}

/// Binarize an activation map by `rule` and score its IoU against a binary
/// ground-truth mask. The map is bilinearly resized to the mask resolution
/// when the shapes differ.
pub fn plausibility_iou(
    map: &[f64],
    map_dims: (usize, usize),
    gt: &Tensor,
    rule: ThresholdRule,
) -> Result<f64> {
    let (mh, mw) = map_dims;
    if mh * mw == 0 || map.len() != mh * mw {
        return Err(Error::Data(format!(
            "empty or inconsistent activation map: {} values for {mh}x{mw}",
            map.len()
        )));
    }
    let gs = gt.shape();
    if gs.len() != 2 {
        return Err(Error::Dimension(format!(
            "ground-truth mask must be [H,W], got {gs:?}"
        )));
    }
    let (h, w) = (gs[0], gs[1]);
    let resized;
    let view: &[f64] = if (mh, mw) == (h, w) {
        map
    } else {
        resized = bilinear_resize(map, mh, mw, h, w);
        &resized
    };
    let t = match rule {
        ThresholdRule::Mean => view.iter().sum::<f64>() / view.len() as f64,
        ThresholdRule::Otsu => otsu_threshold(view),
    };
    let binary: Vec<f64> = view.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
    iou(&Tensor::from_vec(&[h, w], binary)?, gt)
}

/// Aligned (score_a, score_b) pairs for the signed-rank test.
#[derive(Clone, Debug)]
pub struct PairedScores(pub Vec<(f64, f64)>);

/// One-sided Wilcoxon signed-rank test of "a > b".
///
/// Returns (W, p) where W is the positive-rank sum with midrank tie
/// handling. For n <= 20 effective pairs the p-value enumerates all 2^n
/// sign assignments exactly; beyond that a tie-corrected normal
/// approximation with continuity correction is used.
pub fn wilcoxon_one_sided(pairs: &PairedScores) -> Result<(f64, f64)> {
    if pairs.0.is_empty() {
        return Err(Error::UndefinedTest("no paired scores".into()));
    }
    let diffs: Vec<f64> = pairs
        .0
        .iter()
        .map(|&(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::UndefinedTest(
            "all paired differences are zero".into(),
        ));
    }
    let n = diffs.len();

    // midranks of |d|
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks = vec![0.0; n];
    let mut tie_correction = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        let t = (j - i + 1) as f64;
        tie_correction += t * t * t - t;
        i = j + 1;
    }

    let w: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();

    let p = if n <= 20 {
        // exact: count sign assignments with rank sum >= W
        let mut count = 0u64;
        for mask in 0u64..(1u64 << n) {
            let mut s = 0.0;
            for (bit, r) in ranks.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    s += r;
                }
            }
            if s >= w {
                count += 1;
            }
        }
        count as f64 / (1u64 << n) as f64
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_correction / 48.0;
        let z = (w - 0.5 - mean) / var.sqrt();
        normal_cdf(-z)
    };
    Ok((w, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(shape: &[usize], bits: &[u8]) -> Tensor {
        Tensor::from_vec(shape, bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn iou_f1_basic_cases() {
        let a = mask(&[2, 2], &[1, 1, 0, 0]);
        let b = mask(&[2, 2], &[0, 0, 1, 1]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(f1(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let empty = mask(&[2, 2], &[0, 0, 0, 0]);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(f1(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn iou_half_frame_case() {
        // pred = left half, gt = full frame on 4x4 -> 8/16
        let mut pred_bits = [0u8; 16];
        for y in 0..4 {
            pred_bits[y * 4] = 1;
            pred_bits[y * 4 + 1] = 1;
        }
        let pred = mask(&[4, 4], &pred_bits);
        let gt = mask(&[4, 4], &[1; 16]);
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
        assert!((f1(&pred, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_iou_identity_and_symmetry_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let bits_a: Vec<u8> = (0..36).map(|_| rng.gen_range(0..=1)).collect();
            let bits_b: Vec<u8> = (0..36).map(|_| rng.gen_range(0..=1)).collect();
            let a = mask(&[6, 6], &bits_a);
            let b = mask(&[6, 6], &bits_b);
            let i = iou(&a, &b).unwrap();
            let f = f1(&a, &b).unwrap();
            assert!((f - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            assert!(0.0 <= i && i <= f && f <= 1.0);
            assert_eq!(i, iou(&b, &a).unwrap());
            assert_eq!(f, f1(&b, &a).unwrap());
        }
    }

    #[test]
    fn confusion_pixels_sum_to_total() {
        let a = mask(&[3, 3], &[1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let b = mask(&[3, 3], &[1, 1, 0, 0, 1, 0, 0, 0, 1]);
        let c = confusion(&a, &b).unwrap();
        assert_eq!(c.pixel_count(), 9);
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = mask(&[2, 2], &[0; 4]);
        let b = mask(&[2, 3], &[0; 6]);
        assert!(matches!(iou(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn plausibility_perfect_map_scores_one() {
        let gt = mask(&[4, 4], &[0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0]);
        let map: Vec<f64> = gt.data_vec();
        let v = plausibility_iou(&map, (4, 4), &gt, ThresholdRule::Mean).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn plausibility_uniform_map_is_all_foreground() {
        let gt = mask(&[4, 4], &[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let map = vec![0.7; 16];
        let v = plausibility_iou(&map, (4, 4), &gt, ThresholdRule::Mean).unwrap();
        assert!((v - 4.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn plausibility_gaussian_bump_matches_enumeration_oracle() {
        // disk mask; gaussian bump centered on it
        let n = 16usize;
        let mut bits = vec![0u8; n * n];
        let mut map = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 - 7.5, x as f64 - 7.5);
                let r2 = dy * dy + dx * dx;
                if r2 <= 16.0 {
                    bits[y * n + x] = 1;
                }
                map[y * n + x] = (-r2 / 20.0).exp();
            }
        }
        let gt = mask(&[n, n], &bits);
        let got = plausibility_iou(&map, (n, n), &gt, ThresholdRule::Mean).unwrap();
        // oracle: binarize by mean then count pixels directly
        let mean = map.iter().sum::<f64>() / map.len() as f64;
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (m, &b) in map.iter().zip(&bits) {
            let p = *m >= mean;
            match (p, b == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let want = tp as f64 / (tp + fp + fneg) as f64;
        assert_eq!(got, want);
    }

    #[test]
    fn plausibility_rejects_empty_map() {
        let gt = mask(&[2, 2], &[1, 0, 0, 1]);
        assert!(matches!(
            plausibility_iou(&[], (0, 0), &gt, ThresholdRule::Mean),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn plausibility_resizes_smaller_maps() {
        let gt = mask(&[4, 4], &[1; 16]);
        let map = vec![1.0, 1.0, 1.0, 1.0];
        let v = plausibility_iou(&map, (2, 2), &gt, ThresholdRule::Mean).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn otsu_separates_bimodal_map() {
        let mut map = vec![0.1; 50];
        map.extend(vec![0.9; 14]);
        let gt_bits: Vec<u8> = (0..64).map(|i| u8::from(i >= 50)).collect();
        let gt = mask(&[8, 8], &gt_bits);
        let v = plausibility_iou(&map, (8, 8), &gt, ThresholdRule::Otsu).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn wilcoxon_all_positive_nine_pairs() {
        let pairs = PairedScores((1..=9).map(|i| (i as f64 + 10.0, 10.0)).collect());
        let (w, p) = wilcoxon_one_sided(&pairs).unwrap();
        assert_eq!(w, 45.0); // 9*10/2
        assert_eq!(p, 1.0 / 512.0); // 2^-9 ~ 0.00195
    }

    #[test]
    fn wilcoxon_single_positive_pair() {
        let pairs = PairedScores(vec![(2.0, 1.0)]);
        let (w, p) = wilcoxon_one_sided(&pairs).unwrap();
        assert_eq!(w, 1.0);
        assert_eq!(p, 0.5);
    }

    #[test]
    fn wilcoxon_w39_structure_gives_p_0_027() {
        // With n=9 distinct magnitudes and negatives exactly at ranks {1, 5},
        // W = 45 - 6 = 39 and the exact tail count is 14/512 = 0.0273.
        let mut pairs = Vec::new();
        for i in 1..=9 {
            let d = i as f64 * 0.01;
            if i == 1 || i == 5 {
                pairs.push((10.0 - d, 10.0));
            } else {
                pairs.push((10.0 + d, 10.0));
            }
        }
        let (w, p) = wilcoxon_one_sided(&PairedScores(pairs)).unwrap();
        assert_eq!(w, 39.0);
        assert!((p - 14.0 / 512.0).abs() < 1e-15);
    }

    #[test]
    fn wilcoxon_matches_independent_enumeration_oracle_n8() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<(f64, f64)> = (0..8)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let (w, p) = wilcoxon_one_sided(&PairedScores(pairs.clone())).unwrap();

        // oracle: rank by sorting, enumerate 2^8 sign patterns from scratch
        let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
        let mut idx: Vec<usize> = (0..8).collect();
        idx.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
        let mut rank = vec![0.0; 8];
        for (pos, &i) in idx.iter().enumerate() {
            rank[i] = pos as f64 + 1.0;
        }
        let w_oracle: f64 = (0..8).filter(|&i| diffs[i] > 0.0).map(|i| rank[i]).sum();
        let mut count = 0;
        for m in 0u32..256 {
            let s: f64 = (0..8).filter(|&i| m >> i & 1 == 1).map(|i| rank[i]).sum();
            if s >= w_oracle {
                count += 1;
            }
        }
        assert_eq!(w, w_oracle);
        assert_eq!(p, count as f64 / 256.0);
    }

    #[test]
    fn wilcoxon_p_monotone_in_w() {
        // fixed n=6, no ties: p must be nonincreasing as W grows
        let mut last_p = 1.1;
        for neg_mask in [0b111111u32, 0b011111, 0b001111, 0b000111, 0b000011, 0b000001, 0] {
            let pairs: Vec<(f64, f64)> = (0..6)
                .map(|i| {
                    let d = (i + 1) as f64;
                    if neg_mask >> i & 1 == 1 {
                        (0.0 - d, 0.0)
                    } else {
                        (d, 0.0)
                    }
                })
                .collect();
            let (_, p) = wilcoxon_one_sided(&PairedScores(pairs)).unwrap();
            assert!(p <= last_p + 1e-15);
            last_p = p;
        }
    }

    #[test]
    fn wilcoxon_all_zero_differences_is_undefined() {
        let pairs = PairedScores(vec![(1.0, 1.0), (2.0, 2.0)]);
        assert!(matches!(
            wilcoxon_one_sided(&pairs),
            Err(Error::UndefinedTest(_))
        ));
    }

    #[test]
    fn wilcoxon_normal_approximation_beyond_exact_range() {
        // n=25 all positive: p should be tiny but well-defined
        let pairs = PairedScores((1..=25).map(|i| (i as f64, 0.0)).collect());
        let (w, p) = wilcoxon_one_sided(&pairs).unwrap();
        assert_eq!(w, 325.0);
        assert!(p > 0.0 && p < 1e-4);
    }
}
