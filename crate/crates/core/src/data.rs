//! Fingerprint datasets, localization tasks and a log-distance path-loss
//! generator for synthetic environments.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupLabel {
    pub building: i64,
    pub floor: i64,
}

/// RSSI matrix (`samples × APs`) with coordinate labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDataset {
    rssi: Matrix,
    coords: Matrix,
    groups: Option<Vec<GroupLabel>>,
    ap_names: Vec<String>,
}

impl FingerprintDataset {
    pub fn new(
        rssi: Matrix,
        coords: Matrix,
        groups: Option<Vec<GroupLabel>>,
        ap_names: Vec<String>,
    ) -> Result<Self> {
        if rssi.rows() != coords.rows() {
            return Err(Error::dims("coordinate rows", rssi.rows(), coords.rows()));
        }
        if ap_names.len() != rssi.cols() {
            return Err(Error::dims("AP names", rssi.cols(), ap_names.len()));
        }
        if let Some(g) = &groups {
            if g.len() != rssi.rows() {
                return Err(Error::dims("group labels", rssi.rows(), g.len()));
            }
        }
        if rssi.as_slice().iter().any(|v| v.is_nan()) || !coords.is_finite() {
            return Err(Error::InvalidConfig("dataset contains NaN or infinite values".into()));
        }
        Ok(FingerprintDataset {
            rssi,
            coords,
            groups,
            ap_names,
        })
    }

    pub fn len(&self) -> usize {
        self.rssi.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_aps(&self) -> usize {
        self.rssi.cols()
    }

    pub fn coord_dim(&self) -> usize {
        self.coords.cols()
    }

    pub fn rssi(&self) -> &Matrix {
        &self.rssi
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    pub fn groups(&self) -> Option<&[GroupLabel]> {
        self.groups.as_deref()
    }

    pub fn ap_names(&self) -> &[String] {
        &self.ap_names
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        FingerprintDataset {
            rssi: self.rssi.select_rows(idx),
            coords: self.coords.select_rows(idx),
            groups: self
                .groups
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i]).collect()),
            ap_names: self.ap_names.clone(),
        }
    }

    pub fn select_aps(&self, cols: &[usize]) -> Self {
        FingerprintDataset {
            rssi: self.rssi.select_cols(cols),
            coords: self.coords.clone(),
            groups: self.groups.clone(),
            ap_names: cols.iter().map(|&c| self.ap_names[c].clone()).collect(),
        }
    }

    /// Same labels, replaced RSSI values.
    pub fn with_rssi(&self, rssi: Matrix) -> Result<Self> {
        FingerprintDataset::new(rssi, self.coords.clone(), self.groups.clone(), self.ap_names.clone())
    }
}

/// Affine label scaling: `(y − center) / scale` per coordinate, with
/// `center` the mean and `scale` the range of the fitting set.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CoordNormalizer {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl CoordNormalizer {
    pub fn fit(coords: &Matrix) -> Result<Self> {
        if coords.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let p = coords.cols();
        let mut center = alloc::vec![0.0; p];
        let mut lo = alloc::vec![f64::INFINITY; p];
        let mut hi = alloc::vec![f64::NEG_INFINITY; p];
        for row in coords.row_iter() {
            for c in 0..p {
                center[c] += row[c];
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
        let n = coords.rows() as f64;
        center.iter_mut().for_each(|c| *c /= n);
        let scale = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if h > l { h - l } else { 1.0 })
            .collect();
        Ok(CoordNormalizer { center, scale })
    }

    pub fn normalize(&self, coords: &Matrix) -> Matrix {
        let mut out = coords.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.center[c]) / self.scale[c];
            }
        }
        out
    }

    pub fn denormalize(&self, coords: &Matrix) -> Matrix {
        let mut out = coords.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.scale[c] + self.center[c];
            }
        }
        out
    }
}

/// A client's dataset split into support and query halves, with labels
/// normalized by statistics of the support half.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationTask {
    pub id: String,
    pub support: FingerprintDataset,
    pub query: FingerprintDataset,
    normalizer: CoordNormalizer,
    support_targets: Matrix,
    query_targets: Matrix,
}

impl LocalizationTask {
    pub fn new(id: impl Into<String>, support: FingerprintDataset, query: FingerprintDataset) -> Result<Self> {
        if support.is_empty() || query.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if support.ap_names() != query.ap_names() {
            return Err(Error::InvalidConfig("support and query AP columns differ".into()));
        }
        if support.coord_dim() != query.coord_dim() {
            return Err(Error::dims("query coordinates", support.coord_dim(), query.coord_dim()));
        }
        let normalizer = CoordNormalizer::fit(support.coords())?;
        Ok(LocalizationTask {
            id: id.into(),
            support_targets: normalizer.normalize(support.coords()),
            query_targets: normalizer.normalize(query.coords()),
            support,
            query,
            normalizer,
        })
    }

    pub fn num_aps(&self) -> usize {
        self.support.num_aps()
    }

    pub fn normalizer(&self) -> &CoordNormalizer {
        &self.normalizer
    }

    /// Normalized support labels.
    pub fn support_targets(&self) -> &Matrix {
        &self.support_targets
    }

    /// Normalized query labels.
    pub fn query_targets(&self) -> &Matrix {
        &self.query_targets
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PartitionRule {
    Building,
    Floor,
    BuildingFloor,
}

/// Splits a labelled dataset into one dataset per group key, ordered by key
/// and named `B{i}`, `F{j}` or `B{i}_F{j}`.
pub fn partition_tasks(
    dataset: &FingerprintDataset,
    by: PartitionRule,
) -> Result<Vec<(String, FingerprintDataset)>> {
    let groups = dataset.groups().ok_or(Error::MissingLabels)?;
    let mut buckets: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        let key = match by {
            PartitionRule::Building => (g.building, 0),
            PartitionRule::Floor => (g.floor, 0),
            PartitionRule::BuildingFloor => (g.building, g.floor),
        };
        buckets.entry(key).or_default().push(i);
    }
    Ok(buckets
        .into_iter()
        .map(|((a, b), idx)| {
            let name = match by {
                PartitionRule::Building => format!("B{a}"),
                PartitionRule::Floor => format!("F{a}"),
                PartitionRule::BuildingFloor => format!("B{a}_F{b}"),
            };
            (name, dataset.select_rows(&idx))
        })
        .collect())
}

/// Number of support rows for `ratio` of `total`, i.e. `⌈ratio·total⌉`
/// clamped so that both halves are nonempty.
pub fn support_size(total: usize, ratio: f64) -> usize {
    // the epsilon absorbs representation error, e.g. 0.7·10 = 7.000000000000001
    let raw = libm::ceil(ratio * total as f64 - 1e-9) as usize;
    raw.clamp(1, total.saturating_sub(1).max(1))
}

/// Seeded uniform shuffle; the first `⌈ratio·S⌉` rows form the support set.
/// Each half keeps the original row order.
pub fn split_support_query(
    dataset: &FingerprintDataset,
    ratio: f64,
    seed: u64,
) -> Result<(FingerprintDataset, FingerprintDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig("support ratio must lie in (0, 1)".into()));
    }
    if dataset.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            available: dataset.len(),
        });
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng::seeded(seed, 0x5EED));
    let cut = support_size(dataset.len(), ratio);
    let (s, q) = idx.split_at_mut(cut);
    s.sort_unstable();
    q.sort_unstable();
    Ok((dataset.select_rows(s), dataset.select_rows(q)))
}

/// Parameters of a synthetic single-room environment.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticEnvSpec {
    pub num_aps: usize,
    /// Width and height in meters.
    pub area: (f64, f64),
    pub samples: usize,
    /// RSSI at 1 m, dBm.
    pub tx_power: f64,
    pub path_loss_exponent: f64,
    /// Standard deviation of log-normal shadowing, dB.
    pub noise_sigma: f64,
    /// Readings below this level are reported as `sentinel`.
    pub sensitivity: Option<f64>,
    pub sentinel: f64,
    pub seed: u64,
}

impl Default for SyntheticEnvSpec {
    fn default() -> Self {
        SyntheticEnvSpec {
            num_aps: 16,
            area: (30.0, 20.0),
            samples: 400,
            tx_power: -40.0,
            path_loss_exponent: 2.5,
            noise_sigma: 2.0,
            sensitivity: None,
            sentinel: 100.0,
            seed: 0,
        }
    }
}

impl SyntheticEnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_aps == 0 {
            return Err(Error::InvalidConfig("num_aps must be >= 1".into()));
        }
        if !(self.path_loss_exponent > 0.0) {
            return Err(Error::InvalidConfig("path-loss exponent must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise sigma must be >= 0".into()));
        }
        if !(self.area.0 > 0.0 && self.area.1 > 0.0) {
            return Err(Error::InvalidConfig("area must be positive".into()));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be >= 1".into()));
        }
        Ok(())
    }
}

pub const MIN_DISTANCE_M: f64 = 0.1;

/// Log-distance path loss: `P0 − 10·γ·log10(max(d, 0.1 m) / 1 m)`.
pub fn path_loss_rssi(tx_power: f64, exponent: f64, distance: f64) -> f64 {
    tx_power - 10.0 * exponent * libm::log10(distance.max(MIN_DISTANCE_M))
}

/// Access point positions of a synthetic environment.
pub fn synth_ap_positions(spec: &SyntheticEnvSpec) -> Vec<(f64, f64)> {
    let mut r = rng::seeded(spec.seed, 1);
    (0..spec.num_aps)
        .map(|_| (r.random::<f64>() * spec.area.0, r.random::<f64>() * spec.area.1))
        .collect()
}

/// RSSI of each AP at `loc` without shadowing noise.
pub fn noiseless_fingerprint(spec: &SyntheticEnvSpec, aps: &[(f64, f64)], loc: (f64, f64)) -> Vec<f64> {
    aps.iter()
        .map(|&(ax, ay)| {
            let d = libm::hypot(loc.0 - ax, loc.1 - ay);
            path_loss_rssi(spec.tx_power, spec.path_loss_exponent, d)
        })
        .collect()
}

/// Samples a synthetic environment; bit-identical for equal specs.
pub fn synth_environment(spec: &SyntheticEnvSpec) -> Result<FingerprintDataset> {
    spec.validate()?;
    let aps = synth_ap_positions(spec);
    let mut loc_rng = rng::seeded(spec.seed, 2);
    let mut noise_rng = rng::seeded(spec.seed, 3);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|_| Error::InvalidConfig("noise sigma".into()))?)
    } else {
        None
    };
    let mut rssi = Matrix::zeros(spec.samples, spec.num_aps);
    let mut coords = Matrix::zeros(spec.samples, 2);
    for s in 0..spec.samples {
        let loc = (
            loc_rng.random::<f64>() * spec.area.0,
            loc_rng.random::<f64>() * spec.area.1,
        );
        coords.row_mut(s).copy_from_slice(&[loc.0, loc.1]);
        let clean = noiseless_fingerprint(spec, &aps, loc);
        for (slot, v) in rssi.row_mut(s).iter_mut().zip(clean) {
            let mut reading = v + noise.as_ref().map_or(0.0, |n| n.sample(&mut noise_rng));
            if spec.sensitivity.is_some_and(|floor| reading < floor) {
                reading = spec.sentinel;
            }
            *slot = reading;
        }
    }
    let names = (1..=spec.num_aps).map(|i| format!("AP{i:03}")).collect();
    FingerprintDataset::new(rssi, coords, None, names)
}
