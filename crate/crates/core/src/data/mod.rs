//! Dataset ingestion, normalization, sliding windows, chronological splits,
//! and the bundled synthetic dataset generator.

mod io;

pub use io::{load_dataset, load_dataset_with_scale, load_observations, save_coords, save_observations};

use crate::graph;
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Min-max normalization stats; a single global pair per dataset so the
/// inverse transform is exact. Scaling targets [-1, 1]: the generator's
/// noise-to-sample map produces zero-mean output by construction, so the
/// normalized data must be centered for the first moment to be reachable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    pub fn forward(&self, v: f64) -> f64 {
        2.0 * (v - self.min) / (self.max - self.min) - 1.0
    }

    pub fn inverse(&self, v: f64) -> f64 {
        (v + 1.0) * 0.5 * (self.max - self.min) + self.min
    }
}

/// Node coordinates, graph matrices, and the (time x node) observations.
#[derive(Debug, Clone)]
pub struct SpatioTemporalDataset {
    pub node_ids: Vec<String>,
    pub coords: Option<Vec<(f64, f64)>>,
    pub adjacency: Tensor,
    pub laplacian: Tensor,
    /// time x N, no NaN after ingestion.
    pub observations: Tensor,
    /// Present after [`normalize`] ran (or when loaded from a checkpoint).
    pub norm: Option<NormStats>,
}

impl SpatioTemporalDataset {
    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn series_len(&self) -> usize {
        self.observations.rows()
    }

    /// Same graph, a contiguous row range of the observations.
    fn with_rows(&self, start: usize, end: usize) -> SpatioTemporalDataset {
        let n = self.n_nodes();
        let data = self.observations.data()[start * n..end * n].to_vec();
        SpatioTemporalDataset {
            node_ids: self.node_ids.clone(),
            coords: self.coords.clone(),
            adjacency: self.adjacency.clone(),
            laplacian: self.laplacian.clone(),
            observations: Tensor::new(vec![end - start, n], data).expect("subrange is valid"),
            norm: self.norm,
        }
    }
}

/// Scale observations to [-1, 1] with one global min/max; the stats are
/// retained on the dataset for the exact inverse transform.
pub fn normalize(dataset: &mut SpatioTemporalDataset) -> Result<NormStats> {
    let data = dataset.observations.data();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min > 0.0) {
        return Err(DataError::Validation(
            "constant dataset cannot be min-max normalized".into(),
        ));
    }
    let stats = NormStats { min, max };
    let scaled: Vec<f64> = data.iter().map(|&v| stats.forward(v)).collect();
    dataset.observations = Tensor::new(dataset.observations.shape().to_vec(), scaled)?;
    dataset.norm = Some(stats);
    Ok(stats)
}

/// Undo [`normalize`] on a single value.
pub fn denormalize(stats: &NormStats, v: f64) -> f64 {
    stats.inverse(v)
}

/// Input/target window pairs extracted with stride 1 by default.
#[derive(Debug, Clone)]
pub struct WindowedSamples {
    /// Each `window_len x N`.
    pub inputs: Vec<Tensor>,
    /// Each `horizon x N`.
    pub targets: Vec<Tensor>,
    pub window_len: usize,
    pub horizon: usize,
}

impl WindowedSamples {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Input and target stacked into one `(window_len + horizon) x N`
    /// sample; this is what the GAN trains on.
    pub fn full_sample(&self, i: usize) -> Tensor {
        let n = self.inputs[i].cols();
        let mut data = self.inputs[i].data().to_vec();
        data.extend_from_slice(self.targets[i].data());
        Tensor::new(vec![self.window_len + self.horizon, n], data).expect("stack is valid")
    }

    pub fn full_samples(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.full_sample(i)).collect()
    }
}

/// Slide a `(window_len, horizon)` pair over the series.
///
/// Sample count is `series_len - window_len - horizon + 1` at stride 1;
/// windows are chronological and stay inside the series.
pub fn make_windows(
    observations: &Tensor,
    window_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowedSamples> {
    if stride == 0 {
        return Err(DataError::Validation("stride must be >= 1".into()));
    }
    let t = observations.rows();
    let n = observations.cols();
    let span = window_len + horizon;
    if t < span {
        return Err(DataError::Validation(format!(
            "series length {} is shorter than window {} + horizon {} = {}",
            t, window_len, horizon, span
        )));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut start = 0;
    while start + span <= t {
        let data = observations.data();
        let input = data[start * n..(start + window_len) * n].to_vec();
        let target = data[(start + window_len) * n..(start + span) * n].to_vec();
        inputs.push(Tensor::new(vec![window_len, n], input)?);
        targets.push(Tensor::new(vec![horizon, n], target)?);
        start += stride;
    }
    Ok(WindowedSamples {
        inputs,
        targets,
        window_len,
        horizon,
    })
}

/// Chronological contiguous split by fractions (floor, floor, remainder).
pub fn split(
    dataset: &SpatioTemporalDataset,
    f_train: f64,
    f_val: f64,
    f_test: f64,
) -> Result<(SpatioTemporalDataset, SpatioTemporalDataset, SpatioTemporalDataset)> {
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(DataError::Validation(format!(
            "split fractions must sum to 1, got {}",
            f_train + f_val + f_test
        )));
    }
    if f_train <= 0.0 || f_val < 0.0 || f_test < 0.0 {
        return Err(DataError::Validation("split fractions must be nonnegative".into()));
    }
    let t = dataset.series_len();
    let n_train = (f_train * t as f64).floor() as usize;
    let n_val = (f_val * t as f64).floor() as usize;
    let n_test = t - n_train - n_val;
    if n_train == 0 || n_test == 0 {
        return Err(DataError::Validation(format!(
            "split of {} rows leaves an empty part ({}/{}/{})",
            t, n_train, n_val, n_test
        )));
    }
    Ok((
        dataset.with_rows(0, n_train),
        dataset.with_rows(n_train, n_train + n_val),
        dataset.with_rows(n_train + n_val, t),
    ))
}

/// Sinusoid period of the synthetic signals, in timesteps.
const SYNTH_PERIOD: f64 = 50.0;
/// Graph-diffusion mixing strength of the bundled dataset.
const SYNTH_DIFFUSION: f64 = 0.3;
/// Observation noise standard deviation of the bundled dataset.
const SYNTH_NOISE_SD: f64 = 0.05;

/// Bundled synthetic dataset: nodes on a ring, per-node phase-shifted
/// sinusoids mixed once through `x <- x + 0.3 S x` with
/// `S = D^{-1/2} W D^{-1/2}`, plus Gaussian observation noise (sd 0.05).
/// Deterministic per seed.
pub fn synth_dataset(n_nodes: usize, length: usize, seed: u64) -> Result<SpatioTemporalDataset> {
    synth_dataset_with(n_nodes, length, seed, SYNTH_DIFFUSION, SYNTH_NOISE_SD)
}

/// Synthetic dataset with explicit diffusion strength and noise level;
/// zero diffusion and zero noise give pure unit-amplitude sinusoids.
pub fn synth_dataset_with(
    n_nodes: usize,
    length: usize,
    seed: u64,
    diffusion: f64,
    noise_sd: f64,
) -> Result<SpatioTemporalDataset> {
    if n_nodes < 2 {
        return Err(DataError::Validation(format!(
            "synthetic dataset needs at least 2 nodes, got {}",
            n_nodes
        )));
    }
    if length == 0 {
        return Err(DataError::Validation("length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles: Vec<f64> = (0..n_nodes)
        .map(|i| 2.0 * std::f64::consts::PI * i as f64 / n_nodes as f64)
        .collect();
    let coords: Vec<(f64, f64)> = angles.iter().map(|th| (th.cos(), th.sin())).collect();
    let dist = graph::euclidean_distances(&coords)?;
    // alpha_k = mean nearest-neighbor distance keeps a sparse ring-like
    // topology after thresholding
    let n = n_nodes;
    let mean_nn = io::mean_nearest_neighbor_distance(&dist).expect("n_nodes >= 2");
    let adjacency = graph::build_adjacency(&dist, mean_nn, 0.05)?;
    let laplacian = graph::normalized_laplacian(&adjacency)?;

    // S = I - L applied as x + diffusion * S x
    let s_matrix: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            (if i == j { 1.0 } else { 0.0 }) - laplacian.data()[idx]
        })
        .collect();

    let mut obs = vec![0.0; length * n];
    for t in 0..length {
        let raw: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * t as f64 / SYNTH_PERIOD + angles[i]).sin())
            .collect();
        for i in 0..n {
            let mixed: f64 = (0..n).map(|j| s_matrix[i * n + j] * raw[j]).sum();
            let noise: f64 = if noise_sd > 0.0 {
                noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            obs[t * n + i] = raw[i] + diffusion * mixed + noise;
        }
    }

    Ok(SpatioTemporalDataset {
        node_ids: (0..n).map(|i| format!("n{}", i)).collect(),
        coords: Some(coords),
        adjacency,
        laplacian,
        observations: Tensor::new(vec![length, n], obs)?,
        norm: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(rows: usize) -> SpatioTemporalDataset {
        let n = 2;
        let obs: Vec<f64> = (0..rows * n).map(|i| i as f64).collect();
        SpatioTemporalDataset {
            node_ids: vec!["a".into(), "b".into()],
            coords: None,
            adjacency: Tensor::zeros(vec![n, n]),
            laplacian: Tensor::identity(n),
            observations: Tensor::new(vec![rows, n], obs).unwrap(),
            norm: None,
        }
    }

    #[test]
    fn normalize_affine_map_and_round_trip() {
        let mut ds = toy_dataset(6); // values 0..11
        let original = ds.observations.clone();
        let stats = normalize(&mut ds).unwrap();
        assert_eq!(stats.min, 0.0);
        assert_eq!(stats.max, 11.0);
        // affine map: endpoints at -1 and 1, midpoint at 0
        assert!((stats.forward(0.0) + 1.0).abs() < 1e-15);
        assert!((stats.forward(11.0) - 1.0).abs() < 1e-15);
        assert!(stats.forward(5.5).abs() < 1e-15);
        for (norm, orig) in ds.observations.data().iter().zip(original.data()) {
            assert!((stats.inverse(*norm) - orig).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_constant_series() {
        let mut ds = toy_dataset(4);
        ds.observations = Tensor::new(vec![4, 2], vec![3.0; 8]).unwrap();
        assert!(normalize(&mut ds).is_err());
    }

    #[test]
    fn window_counts() {
        let obs = Tensor::new(vec![10, 2], (0..20).map(|v| v as f64).collect()).unwrap();
        let w = make_windows(&obs, 6, 3, 1).unwrap();
        assert_eq!(w.len(), 2); // 10 - 6 - 3 + 1

        let obs9 = Tensor::new(vec![9, 2], (0..18).map(|v| v as f64).collect()).unwrap();
        let w9 = make_windows(&obs9, 6, 3, 1).unwrap();
        assert_eq!(w9.len(), 1);

        assert!(make_windows(&Tensor::zeros(vec![8, 2]), 6, 3, 1).is_err());
    }

    #[test]
    fn window_alignment() {
        let obs = Tensor::new(vec![10, 2], (0..20).map(|v| v as f64).collect()).unwrap();
        let w = make_windows(&obs, 6, 3, 1).unwrap();
        // first target block equals observation rows 6..8
        assert_eq!(w.targets[0].data(), &obs.data()[6 * 2..9 * 2]);
        // stride-1 window first-rows reconstruct the series prefix
        for (i, input) in w.inputs.iter().enumerate() {
            assert_eq!(&input.data()[..2], &obs.data()[i * 2..i * 2 + 2]);
        }
        // full sample stacks input and target
        let full = w.full_sample(0);
        assert_eq!(full.shape(), &[9, 2]);
        assert_eq!(&full.data()[..12], w.inputs[0].data());
        assert_eq!(&full.data()[12..], w.targets[0].data());
    }

    #[test]
    fn split_fractions_and_rounding() {
        let ds = toy_dataset(100);
        let (tr, va, te) = split(&ds, 0.70, 0.20, 0.10).unwrap();
        assert_eq!(tr.series_len(), 70);
        assert_eq!(va.series_len(), 20);
        assert_eq!(te.series_len(), 10);

        // 101 rows: floor-floor-remainder -> 70/20/11
        let ds = toy_dataset(101);
        let (tr, va, te) = split(&ds, 0.70, 0.20, 0.10).unwrap();
        assert_eq!((tr.series_len(), va.series_len(), te.series_len()), (70, 20, 11));

        assert!(split(&toy_dataset(10), 0.5, 0.2, 0.2).is_err());
    }

    #[test]
    fn split_is_chronological_and_disjoint() {
        let ds = toy_dataset(50);
        let (tr, va, te) = split(&ds, 0.70, 0.20, 0.10).unwrap();
        let mut all = tr.observations.data().to_vec();
        all.extend_from_slice(va.observations.data());
        all.extend_from_slice(te.observations.data());
        assert_eq!(all, ds.observations.data());
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_dataset(8, 100, 7).unwrap();
        let b = synth_dataset(8, 100, 7).unwrap();
        assert_eq!(a.observations.data(), b.observations.data());
        let c = synth_dataset(8, 100, 8).unwrap();
        assert_ne!(a.observations.data(), c.observations.data());
    }

    #[test]
    fn synth_zero_diffusion_zero_noise_is_pure_sinusoid() {
        let ds = synth_dataset_with(6, 200, 1, 0.0, 0.0).unwrap();
        let coords = ds.coords.as_ref().unwrap();
        for t in 0..200 {
            for i in 0..6 {
                let phase = coords[i].1.atan2(coords[i].0);
                let expect = (2.0 * std::f64::consts::PI * t as f64 / 50.0 + phase).sin();
                assert!((ds.observations.at2(t, i) - expect).abs() < 1e-12);
            }
        }
        let max = ds.observations.data().iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 1.0).abs() < 1e-3);
    }

    #[test]
    fn synth_rejects_degenerate_sizes() {
        assert!(synth_dataset(1, 100, 0).is_err());
        assert!(synth_dataset(4, 0, 0).is_err());
    }

    #[test]
    fn synth_neighbors_correlate_more_than_antipodes() {
        // regression on the bundled instance: N=8, length=2000, seed=7
        let ds = synth_dataset(8, 2000, 7).unwrap();
        let col = |j: usize| -> Vec<f64> { (0..2000).map(|t| ds.observations.at2(t, j)).collect() };
        let pearson = |a: &[f64], b: &[f64]| -> f64 {
            let n = a.len() as f64;
            let (ma, mb) = (
                a.iter().sum::<f64>() / n,
                b.iter().sum::<f64>() / n,
            );
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
            let (va, vb): (f64, f64) = (
                a.iter().map(|x| (x - ma) * (x - ma)).sum(),
                b.iter().map(|y| (y - mb) * (y - mb)).sum(),
            );
            cov / (va.sqrt() * vb.sqrt())
        };
        let r_neighbor = pearson(&col(0), &col(1));
        let r_antipodal = pearson(&col(0), &col(4));
        assert!(
            r_neighbor - r_antipodal > 0.1,
            "neighbor r {} vs antipodal r {}",
            r_neighbor,
            r_antipodal
        );
    }
}
