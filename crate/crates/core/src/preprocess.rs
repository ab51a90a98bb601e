//! RSSI cleaning: access-point selection, imputation of missing readings and
//! the powed normalization, plus the meta signal space dimension.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::FingerprintDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PreprocessConfig {
    /// Visibility threshold τ; columns missing in more than `1 − τ` of the
    /// samples are dropped when τ > 0.
    pub visibility_threshold: f64,
    /// Value marking a missing reading (100 in UJIIndoorLoc).
    pub sentinel: f64,
    /// Missing readings become `min observed − impute_offset`.
    pub impute_offset: f64,
    /// Exponent of the powed transform.
    pub pow_exponent: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            visibility_threshold: 0.0,
            sentinel: 100.0,
            impute_offset: 1.0,
            pow_exponent: core::f64::consts::E,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.visibility_threshold) {
            return Err(Error::InvalidConfig("visibility threshold must lie in [0, 1]".into()));
        }
        if !(self.pow_exponent > 0.0) {
            return Err(Error::InvalidConfig("pow exponent must be > 0".into()));
        }
        if !self.impute_offset.is_finite() {
            return Err(Error::InvalidConfig("impute offset must be finite".into()));
        }
        Ok(())
    }
}

/// What the pipeline did to one dataset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PreprocessReport {
    pub dropped_aps: Vec<String>,
    /// Original column index of every kept AP, in order.
    pub kept_indices: Vec<usize>,
    pub sentinel_count: usize,
    pub imputed_value: Option<f64>,
    pub rssi_min: f64,
    pub rssi_max: f64,
    pub pow_exponent: f64,
}

fn missing_fraction(ds: &FingerprintDataset, col: usize, sentinel: f64) -> f64 {
    let rssi = ds.rssi();
    let missing = (0..rssi.rows()).filter(|&r| rssi.get(r, col) == sentinel).count();
    missing as f64 / rssi.rows() as f64
}

/// Drops APs never observed, and with τ > 0 those missing in more than
/// `1 − τ` of the samples. Kept columns retain their order.
pub fn select_aps(
    dataset: &FingerprintDataset,
    cfg: &PreprocessConfig,
) -> Result<(FingerprintDataset, Vec<usize>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tau = cfg.visibility_threshold;
    let kept: Vec<usize> = (0..dataset.num_aps())
        .filter(|&c| {
            let f = missing_fraction(dataset, c, cfg.sentinel);
            f < 1.0 && !(tau > 0.0 && f > 1.0 - tau)
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptySignalSpace);
    }
    Ok((dataset.select_aps(&kept), kept))
}

/// Smallest non-sentinel reading.
pub fn min_observed(dataset: &FingerprintDataset, sentinel: f64) -> Option<f64> {
    dataset
        .rssi()
        .as_slice()
        .iter()
        .copied()
        .filter(|v| *v != sentinel)
        .reduce(f64::min)
}

/// Replaces every sentinel with `min observed − offset`.
pub fn impute_missing(dataset: &FingerprintDataset, cfg: &PreprocessConfig) -> Result<FingerprintDataset> {
    let fill = min_observed(dataset, cfg.sentinel).ok_or(Error::NoObservedValues)? - cfg.impute_offset;
    let mut rssi = dataset.rssi().clone();
    rssi.map_inplace(|v| if v == cfg.sentinel { fill } else { v });
    dataset.with_rssi(rssi)
}

/// `((v − min) / (max − min))^exponent` with dataset-wide min and max.
/// Returns the transformed dataset with the min and max used.
pub fn powed_transform(dataset: &FingerprintDataset, exponent: f64) -> Result<(FingerprintDataset, f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let values = dataset.rssi().as_slice();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidConfig("powed transform needs finite RSSI values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Err(Error::DegenerateRange(lo));
    }
    let span = hi - lo;
    let mut rssi = dataset.rssi().clone();
    rssi.map_inplace(|v| libm::pow((v - lo) / span, exponent));
    Ok((dataset.with_rssi(rssi)?, lo, hi))
}

/// Full pipeline: AP selection, imputation, powed transform.
pub fn preprocess(
    dataset: &FingerprintDataset,
    cfg: &PreprocessConfig,
) -> Result<(FingerprintDataset, PreprocessReport)> {
    let (selected, kept) = select_aps(dataset, cfg)?;
    let dropped_aps = (0..dataset.num_aps())
        .filter(|c| kept.binary_search(c).is_err())
        .map(|c| dataset.ap_names()[c].clone())
        .collect();
    let sentinel_count = selected
        .rssi()
        .as_slice()
        .iter()
        .filter(|v| **v == cfg.sentinel)
        .count();
    let imputed_value = (sentinel_count > 0)
        .then(|| min_observed(&selected, cfg.sentinel).map(|m| m - cfg.impute_offset))
        .flatten();
    let imputed = impute_missing(&selected, cfg)?;
    let (out, lo, hi) = powed_transform(&imputed, cfg.pow_exponent)?;
    Ok((
        out,
        PreprocessReport {
            dropped_aps,
            kept_indices: kept,
            sentinel_count,
            imputed_value,
            rssi_min: lo,
            rssi_max: hi,
            pow_exponent: cfg.pow_exponent,
        },
    ))
}

/// Median of the AP counts; an even-length median rounds half away from zero.
pub fn meta_signal_dim(ap_counts: &[usize]) -> Result<usize> {
    if ap_counts.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut sorted = ap_counts.to_vec();
    sorted.sort_unstable();
    let k = sorted.len();
    Ok(if k % 2 == 1 {
        sorted[k / 2]
    } else {
        (sorted[k / 2 - 1] + sorted[k / 2] + 1) / 2
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    const S: f64 = 100.0;

    fn ds(rows: &[Vec<f64>]) -> FingerprintDataset {
        let rssi = Matrix::from_rows(rows).unwrap();
        let n = rssi.rows();
        let names = (0..rssi.cols()).map(|i| format!("WAP{i:03}")).collect();
        FingerprintDataset::new(rssi, Matrix::zeros(n, 2), None, names).unwrap()
    }

    #[test]
    fn fully_missing_column_is_dropped() {
        let d = ds(&[vec![-60.0, S, -70.0], vec![-65.0, S, S]]);
        let (out, kept) = select_aps(&d, &PreprocessConfig::default()).unwrap();
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(out.ap_names(), &["WAP000".to_string(), "WAP002".to_string()]);
    }

    #[test]
    fn zero_threshold_keeps_any_observed_column() {
        let d = ds(&[vec![-60.0, S], vec![S, -50.0], vec![S, S]]);
        let (_, kept) = select_aps(&d, &PreprocessConfig::default()).unwrap();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn visibility_threshold_drops_sparse_columns() {
        // column 0: 8/10 missing, column 1: 6/10 missing
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![if i < 8 { S } else { -70.0 }, if i < 6 { S } else { -70.0 }])
            .collect();
        let cfg = PreprocessConfig { visibility_threshold: 0.3, ..Default::default() };
        let (_, kept) = select_aps(&ds(&rows), &cfg).unwrap();
        assert_eq!(kept, vec![1]);
    }

    #[test]
    fn dropping_everything_is_an_error() {
        let d = ds(&[vec![S, S]]);
        assert_eq!(select_aps(&d, &PreprocessConfig::default()).unwrap_err(), Error::EmptySignalSpace);
    }

    #[test]
    fn imputation_uses_global_minimum_minus_offset() {
        let d = ds(&[vec![-80.0, S], vec![S, -60.0]]);
        let out = impute_missing(&d, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.rssi().as_slice(), &[-80.0, -81.0, -81.0, -60.0]);
        assert!(out.rssi().as_slice().iter().all(|v| *v != S));
    }

    #[test]
    fn imputation_without_sentinels_is_identity() {
        let d = ds(&[vec![-80.0, -70.0]]);
        assert_eq!(impute_missing(&d, &PreprocessConfig::default()).unwrap(), d);
        let empty = ds(&[vec![S, S]]);
        assert_eq!(impute_missing(&empty, &PreprocessConfig::default()).unwrap_err(), Error::NoObservedValues);
    }

    #[test]
    fn powed_endpoints_and_midpoint() {
        let d = ds(&[vec![-90.0, -50.0, -70.0]]);
        let (out, lo, hi) = powed_transform(&d, core::f64::consts::E).unwrap();
        assert_eq!((lo, hi), (-90.0, -50.0));
        let v = out.rssi().as_slice();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - 0.5f64.powf(core::f64::consts::E)).abs() < 1e-15);
        assert!((v[2] - 0.15196).abs() < 1e-5);
    }

    #[test]
    fn powed_rejects_constant_dataset() {
        let d = ds(&[vec![-70.0, -70.0]]);
        assert_eq!(powed_transform(&d, 2.0).unwrap_err(), Error::DegenerateRange(-70.0));
    }

    #[test]
    fn meta_signal_dim_examples() {
        assert_eq!(meta_signal_dim(&[3, 5, 7]).unwrap(), 5);
        assert_eq!(meta_signal_dim(&[2, 4, 6, 8]).unwrap(), 5);
        assert_eq!(meta_signal_dim(&[4, 7]).unwrap(), 6);
        assert_eq!(meta_signal_dim(&[7, 4]).unwrap(), 6);
        assert!(meta_signal_dim(&[]).is_err());
    }

    #[test]
    fn pipeline_reports_its_work() {
        let d = ds(&[vec![-80.0, S, S], vec![S, S, -60.0], vec![-70.0, S, -65.0]]);
        let (out, report) = preprocess(&d, &PreprocessConfig::default()).unwrap();
        assert_eq!(report.dropped_aps, vec!["WAP001".to_string()]);
        assert_eq!(report.kept_indices, vec![0, 2]);
        assert_eq!(report.sentinel_count, 2);
        assert_eq!(report.imputed_value, Some(-81.0));
        assert_eq!((report.rssi_min, report.rssi_max), (-81.0, -60.0));
        assert!(out.rssi().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    fn arb_dataset() -> impl Strategy<Value = FingerprintDataset> {
        (1usize..8, 1usize..6).prop_flat_map(|(rows, cols)| {
            proptest::collection::vec(
                prop_oneof![3 => -100.0f64..-20.0, 1 => Just(S)],
                rows * cols,
            )
            .prop_map(move |v| {
                let names = (0..cols).map(|i| format!("AP{i}")).collect();
                FingerprintDataset::new(Matrix::from_vec(rows, cols, v).unwrap(), Matrix::zeros(rows, 2), None, names)
                    .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn imputation_is_idempotent(d in arb_dataset()) {
            let cfg = PreprocessConfig::default();
            if let Ok(once) = impute_missing(&d, &cfg) {
                prop_assert!(once.rssi().as_slice().iter().all(|v| *v != S));
                prop_assert_eq!(impute_missing(&once, &cfg).unwrap(), once);
            }
        }

        #[test]
        fn powed_is_monotone_and_bounded(d in arb_dataset(), beta in 0.2f64..5.0) {
            let cfg = PreprocessConfig::default();
            let Ok(imp) = impute_missing(&d, &cfg) else { return Ok(()); };
            let Ok((out, _, _)) = powed_transform(&imp, beta) else { return Ok(()); };
            let (a, b) = (imp.rssi().as_slice(), out.rssi().as_slice());
            prop_assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
            for i in 0..a.len() {
                for j in 0..a.len() {
                    if a[i] < a[j] { prop_assert!(b[i] <= b[j]); }
                }
            }
        }

        #[test]
        fn selection_preserves_column_order(d in arb_dataset(), tau in 0.0f64..1.0) {
            let cfg = PreprocessConfig { visibility_threshold: tau, ..Default::default() };
            if let Ok((out, kept)) = select_aps(&d, &cfg) {
                prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
                for (k, &c) in kept.iter().enumerate() {
                    prop_assert_eq!(&out.ap_names()[k], &d.ap_names()[c]);
                }
            }
        }

        #[test]
        fn meta_signal_dim_is_permutation_invariant(mut m in proptest::collection::vec(1usize..600, 1..20), seed in 0u64..100) {
            let d = meta_signal_dim(&m).unwrap();
            let k = m.len();
            m.rotate_left((seed as usize) % k);
            m.reverse();
            prop_assert_eq!(meta_signal_dim(&m).unwrap(), d);
        }
    }
}
