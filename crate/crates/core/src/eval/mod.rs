//! Train-on-synthetic/test-on-real utility evaluation: regressors fitted on
//! real or generated windows, scored on real test windows with MSE/MAE.

mod regressors;

pub use regressors::{fit_regressor, FittedRegressor, OlsModel, RegressorKind};

use crate::data::WindowedSamples;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Flattened design matrix: `x` is n x d row-major window features,
/// `y` is n x k targets.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub k: usize,
}

impl DataMatrix {
    /// Flatten windowed samples: inputs to `window_len * N` features,
    /// targets to `horizon * N` outputs.
    pub fn from_windows(w: &WindowedSamples) -> Result<DataMatrix> {
        if w.is_empty() {
            return Err(EvalError::Validation("no windows to evaluate".into()));
        }
        let n = w.len();
        let d = w.inputs[0].numel();
        let k = w.targets[0].numel();
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n * k);
        for i in 0..n {
            x.extend_from_slice(w.inputs[i].data());
            y.extend_from_slice(w.targets[i].data());
        }
        Ok(DataMatrix { x, y, n, d, k })
    }
}

/// Mean squared error over all elements.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean absolute error over all elements.
pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(EvalError::Validation("empty prediction".into()));
    }
    if pred.len() != truth.len() {
        return Err(EvalError::Validation(format!(
            "prediction length {} != truth length {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainedOn {
    Real,
    Generated,
}

impl TrainedOn {
    pub fn name(&self) -> &'static str {
        match self {
            TrainedOn::Real => "real",
            TrainedOn::Generated => "generated",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TstrRow {
    pub regressor: String,
    pub source: TrainedOn,
    pub mse: f64,
    pub mae: f64,
}

/// Optional run context echoed into the report by the caller.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TstrConfigEcho {
    pub epsilon: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TstrReport {
    pub rows: Vec<TstrRow>,
    /// One averages row per source, arithmetic mean of the rows above.
    pub averages: Vec<TstrRow>,
    pub config: TstrConfigEcho,
}

impl TstrReport {
    pub fn average_for(&self, source: TrainedOn) -> Option<&TstrRow> {
        self.averages.iter().find(|r| r.source == source)
    }

    pub fn row(&self, kind: RegressorKind, source: TrainedOn) -> Option<&TstrRow> {
        self.rows
            .iter()
            .find(|r| r.regressor == kind.name() && r.source == source)
    }

    /// CSV with the fixed column set `regressor,source,mse,mae`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("regressor,source,mse,mae\n");
        for row in self.rows.iter().chain(self.averages.iter()) {
            let name = if self.averages.iter().any(|a| std::ptr::eq(a, row)) {
                "average".to_string()
            } else {
                row.regressor.clone()
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                name,
                row.source.name(),
                row.mse,
                row.mae
            ));
        }
        out
    }
}

/// Fit every requested regressor on real and on generated windows, score
/// both on the real test windows.
///
/// The fit seed depends only on the regressor, so identical training data
/// yields identical rows for both sources.
pub fn tstr(
    real_train: &WindowedSamples,
    real_test: &WindowedSamples,
    generated_train: &WindowedSamples,
    kinds: &[RegressorKind],
    seed: u64,
    config: TstrConfigEcho,
) -> Result<TstrReport> {
    let real_train_m = DataMatrix::from_windows(real_train)?;
    let test_m = DataMatrix::from_windows(real_test)?;
    let gen_train_m = DataMatrix::from_windows(generated_train)?;
    if gen_train_m.d != real_train_m.d || gen_train_m.k != real_train_m.k {
        return Err(EvalError::Validation(format!(
            "generated windows ({}, {}) not formatted like real windows ({}, {})",
            gen_train_m.d, gen_train_m.k, real_train_m.d, real_train_m.k
        )));
    }

    let mut rows = Vec::new();
    for (kind_idx, &kind) in kinds.iter().enumerate() {
        let fit_seed = seed.wrapping_add(1000 * kind_idx as u64);
        for (source, train_m) in [
            (TrainedOn::Real, &real_train_m),
            (TrainedOn::Generated, &gen_train_m),
        ] {
            let model = fit_regressor(kind, train_m, fit_seed)?;
            let pred = model.predict(&test_m);
            rows.push(TstrRow {
                regressor: kind.name().to_string(),
                source,
                mse: mse(&pred, &test_m.y)?,
                mae: mae(&pred, &test_m.y)?,
            });
        }
    }

    let mut averages = Vec::new();
    for source in [TrainedOn::Real, TrainedOn::Generated] {
        let subset: Vec<&TstrRow> = rows.iter().filter(|r| r.source == source).collect();
        let n = subset.len() as f64;
        averages.push(TstrRow {
            regressor: "average".into(),
            source,
            mse: subset.iter().map(|r| r.mse).sum::<f64>() / n,
            mae: subset.iter().map(|r| r.mae).sum::<f64>() / n,
        });
    }

    Ok(TstrReport {
        rows,
        averages,
        config,
    })
}
