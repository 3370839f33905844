//! Global inference by median pooling, angular-error statistics,
//! cross-validation folds, and geometric-mean aggregation over subsets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::color::{angular_error, Illuminant};
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::nets::{EstimateLevel, IlluminantModel};
use crate::sampling::{sample_patch_pairs, SamplerConfig};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub best25: f64,
    pub worst25: f64,
    pub pct95: f64,
    pub n: usize,
}

impl MetricsReport {
    /// Column order of the metrics CSV after the method name.
    pub const COLUMNS: [&'static str; 6] = ["mean", "med", "tri", "best25", "worst25", "pct95"];

    pub fn values(&self) -> [f64; 6] {
        [self.mean, self.median, self.trimean, self.best25, self.worst25, self.pct95]
    }
}

/// Linear interpolation between closest ranks: position `q·(n−1)` in the sorted list.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn compute_metrics(errors: &[f64]) -> Result<MetricsReport> {
    let n = errors.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 errors for metrics, got {n}")));
    }
    if errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::InvalidArgument("errors must be finite and nonnegative".into()));
    }
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    let mean_of = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let k = n.div_ceil(4);
    let (q1, q2, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    Ok(MetricsReport {
        mean: mean_of(&s),
        median: q2,
        trimean: (q1 + 2.0 * q2 + q3) / 4.0,
        best25: mean_of(&s[..k]),
        worst25: mean_of(&s[n - k..]),
        pct95: quantile(&s, 0.95),
        n,
    })
}

/// Field-wise geometric mean; `n` is the total sample count.
pub fn geomean_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to aggregate".into()));
    }
    let mut logs = [0.0; 6];
    for r in reports {
        for (l, v) in logs.iter_mut().zip(r.values()) {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("geometric mean needs positive fields, got {v}")));
            }
            *l += v.ln();
        }
    }
    let k = reports.len() as f64;
    // Identical inputs return that input exactly.
    let same = reports.iter().all(|r| r.values() == reports[0].values());
    let g = |i: usize| if same { reports[0].values()[i] } else { (logs[i] / k).exp() };
    Ok(MetricsReport {
        mean: g(0),
        median: g(1),
        trimean: g(2),
        best25: g(3),
        worst25: g(4),
        pct95: g(5),
        n: reports.iter().map(|r| r.n).sum(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// Everything outside fold `i`.
    pub fn train_ids(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }

    pub fn fold_of(&self, id: usize) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&id))
    }
}

/// Seeded shuffle, then round-robin assignment.
pub fn make_folds(ids: &[usize], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 || ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need k >= 2 and at least k ids, got k={k} with {} ids",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in shuffled.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldSplit { folds })
}

/// Per-channel median of the non-degenerate estimates, renormalized.
/// Returns `None` when every estimate is degenerate.
pub fn median_pool(estimates: &[Option<[f64; 3]>]) -> Result<Option<Illuminant>> {
    let valid: Vec<[f64; 3]> = estimates.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Ok(None);
    }
    let mut med = [0.0; 3];
    for (c, m) in med.iter_mut().enumerate() {
        let mut v: Vec<f64> = valid.iter().map(|e| e[c]).collect();
        v.sort_by(f64::total_cmp);
        *m = quantile(&v, 0.5);
    }
    Illuminant::normalize(med).map(Some)
}

#[derive(Clone, Debug)]
pub struct GlobalEstimate {
    pub illuminant: Illuminant,
    pub patches: usize,
    pub degenerate_patches: usize,
    /// Every patch estimate was degenerate; the neutral illuminant was returned.
    pub all_degenerate: bool,
    pub fell_back_to_random: bool,
}

/// Samples patch pairs, estimates each at the model's trained level, and median-pools.
pub fn infer_global<T: Real>(
    model: &IlluminantModel<T>,
    image: &LinearImage,
    sampler: &SamplerConfig,
) -> Result<GlobalEstimate> {
    infer_global_at(model, image, sampler, EstimateLevel::for_stage(model.stage))
}

pub fn infer_global_at<T: Real>(
    model: &IlluminantModel<T>,
    image: &LinearImage,
    sampler: &SamplerConfig,
    level: EstimateLevel,
) -> Result<GlobalEstimate> {
    let sampled = sample_patch_pairs::<T>(image, sampler)?;
    let estimates = sampled
        .pairs
        .iter()
        .map(|p| {
            Ok(model
                .estimate(&p.central, &p.surround, level)?
                .map(|e| e.cast::<f64>().rgb()))
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = median_pool(&estimates)?;
    Ok(GlobalEstimate {
        illuminant: pooled.unwrap_or_else(Illuminant::neutral),
        patches: estimates.len(),
        degenerate_patches: estimates.iter().filter(|e| e.is_none()).count(),
        all_degenerate: pooled.is_none(),
        fell_back_to_random: sampled.fell_back_to_random,
    })
}

/// Angular error of the global estimate for each image, in input order.
/// Image `i` uses sampler seed `sampler.seed + i`.
pub fn evaluate_model<T: Real>(
    model: &IlluminantModel<T>,
    images: &[(LinearImage, Illuminant)],
    sampler: &SamplerConfig,
    level: EstimateLevel,
) -> Result<Vec<f64>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, (img, gt))| {
            let cfg = sampler.with_seed(sampler.seed.wrapping_add(i as u64));
            let est = infer_global_at(model, img, &cfg, level)?;
            angular_error(est.illuminant.rgb(), gt.rgb())
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_one_to_eight() {
        let r = compute_metrics(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(r.mean, 4.5);
        assert_eq!(r.median, 4.5);
        assert_eq!(r.best25, 1.5);
        assert_eq!(r.worst25, 7.5);
        assert_eq!(r.trimean, 4.5);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 0.25), 2.75);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], 0.75), 6.25);
    }

    #[test]
    fn constant_list() {
        let r = compute_metrics(&[2.0; 4]).unwrap();
        assert_eq!(r.values(), [2.0; 6]);
    }

    #[test]
    fn too_few_errors() {
        assert!(compute_metrics(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn best_worst_use_ceiling() {
        // n = 5 → 2 items in each tail.
        let r = compute_metrics(&[1.0, 2.0, 3.0, 4.0, 10.0]).unwrap();
        assert_eq!(r.best25, 1.5);
        assert_eq!(r.worst25, 7.0);
    }

    #[test]
    fn folds() {
        let ids: Vec<usize> = (0..9).collect();
        let f = make_folds(&ids, 3, 1).unwrap();
        assert!(f.folds.iter().all(|x| x.len() == 3));
        let ten: Vec<usize> = (0..10).collect();
        let f = make_folds(&ten, 3, 1).unwrap();
        let mut sizes: Vec<_> = f.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert_eq!(make_folds(&ten, 3, 5).unwrap(), make_folds(&ten, 3, 5).unwrap());
        assert!(make_folds(&ten, 1, 0).is_err());
        assert!(make_folds(&ten[..2], 3, 0).is_err());
        assert_eq!(f.train_ids(0).len() + f.folds[0].len(), 10);
    }

    fn report(v: f64) -> MetricsReport {
        MetricsReport {
            mean: v,
            median: v,
            trimean: v,
            best25: v,
            worst25: v,
            pct95: v,
            n: 4,
        }
    }

    #[test]
    fn geomean_basics() {
        let r = compute_metrics(&[0.3, 1.7, 2.2, 9.1, 4.4]).unwrap();
        let g = geomean_report(&[r, r, r]).unwrap();
        assert_eq!(g.values(), r.values());
        let g = geomean_report(&[report(1.0), report(4.0)]).unwrap();
        assert!((g.mean - 2.0).abs() < 1e-15);
        assert!(geomean_report(&[report(1.0), report(0.0)]).is_err());
    }

    #[test]
    fn geomean_matches_product_root() {
        let rs: Vec<_> = (1..=8).map(|i| report(i as f64 * 0.7)).collect();
        let g = geomean_report(&rs).unwrap();
        // Oracle: direct product then n-th root.
        let prod: f64 = rs.iter().map(|r| r.mean).product();
        assert!((g.mean - prod.powf(1.0 / 8.0)).abs() < 1e-12);
    }

    #[test]
    fn median_pool_hand_example() {
        let e = median_pool(&[Some([0.5, 0.5, 0.7]), Some([0.6, 0.5, 0.6]), Some([0.4, 0.6, 0.7])])
            .unwrap()
            .unwrap();
        let want = Illuminant::normalize([0.5, 0.5, 0.7]).unwrap();
        assert_eq!(e.rgb(), want.rgb());
    }

    #[test]
    fn median_pool_robust_to_outlier() {
        let base = [0.3, 0.5, 0.8];
        let mut v = vec![Some(base); 14];
        v.push(Some([50.0, 0.001, 0.001]));
        let e = median_pool(&v).unwrap().unwrap();
        assert_eq!(e.rgb(), Illuminant::normalize(base).unwrap().rgb());
    }

    #[test]
    fn median_pool_all_degenerate() {
        assert!(median_pool(&[None, None]).unwrap().is_none());
        let e = median_pool(&[None, Some([1.0, 2.0, 2.0])]).unwrap().unwrap();
        assert_eq!(e.rgb(), Illuminant::normalize([1.0, 2.0, 2.0]).unwrap().rgb());
    }

    proptest! {
        #[test]
        fn metrics_permutation_invariant(mut v in proptest::collection::vec(0.0f64..50.0, 4..40), seed in any::<u64>()) {
            let a = compute_metrics(&v).unwrap();
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = compute_metrics(&v).unwrap();
            prop_assert_eq!(a.values(), b.values());
        }

        #[test]
        fn metrics_ordering(v in proptest::collection::vec(0.0f64..50.0, 4..40)) {
            let r = compute_metrics(&v).unwrap();
            prop_assert!(r.best25 <= r.median && r.median <= r.worst25);
            prop_assert!(r.values().iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn adding_larger_error_is_monotone(v in proptest::collection::vec(0.0f64..50.0, 4..40), extra in 0.0f64..10.0) {
            let a = compute_metrics(&v).unwrap();
            let max = v.iter().cloned().fold(0.0, f64::max);
            let mut w = v.clone();
            w.push(max + extra);
            let b = compute_metrics(&w).unwrap();
            prop_assert!(b.mean >= a.mean - 1e-12);
            prop_assert!(b.worst25 >= a.worst25 - 1e-12);
            prop_assert!(b.pct95 >= a.pct95 - 1e-12);
        }

        #[test]
        fn geomean_idempotent(x in 0.01f64..100.0, k in 1usize..10) {
            let r = report(x);
            prop_assert_eq!(geomean_report(&vec![r; k]).unwrap().values(), r.values());
        }

        #[test]
        fn median_pool_order_free(v in proptest::collection::vec(proptest::array::uniform3(0.01f64..1.0), 1..20), seed in any::<u64>()) {
            let a: Vec<_> = v.iter().copied().map(Some).collect();
            let mut b = a.clone();
            b.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(median_pool(&a).unwrap().unwrap().rgb(), median_pool(&b).unwrap().unwrap().rgb());
        }
    }
}
