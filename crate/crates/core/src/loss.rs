//! Training objective: trajectory MSE plus a physiology-informed
//! regularizer (PIR) that penalizes negative predicted concentrations,
//! `total = mse + lambda * (1/n) * sum_i min(0, y_hat_i)^2`.
//!
//! The PIR is evaluated on denormalized (physical-unit) predictions by
//! default, since z-scored values are legitimately negative; the
//! denormalization affine map is recorded on the tape so the penalty stays
//! differentiable. A normalized-space mode exists behind [`PirSpace`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adiff::{AdiffError, Tape, Tensor, Var};
use crate::odeint::TapedTrajectory;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("prediction has {pred} rows but observation has {obs}")]
    GridMismatch { pred: usize, obs: usize },
    #[error("prediction dim {pred} != observation dim {obs}")]
    DimMismatch { pred: usize, obs: usize },
    #[error("observations contain non-finite values")]
    NonFiniteObservation,
    #[error("no trajectories supplied")]
    EmptyBatch,
    #[error("feature mask length {mask} != dim {dim}")]
    MaskLength { mask: usize, dim: usize },
    #[error(transparent)]
    Adiff(#[from] AdiffError),
}

/// Which feature columns enter the MSE term. The PIR always covers every
/// predicted cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFeatures {
    #[default]
    All,
    StatesOnly,
}

/// Space in which the negativity penalty is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PirSpace {
    #[default]
    Physical,
    Normalized,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub features: LossFeatures,
    pub pir_space: PirSpace,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            features: LossFeatures::All,
            pir_space: PirSpace::Physical,
        }
    }
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        LossConfig {
            lambda,
            ..LossConfig::default()
        }
    }
}

/// Per-feature affine map from normalized to physical units:
/// `phys = norm * scale + shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl Denorm {
    pub fn identity(dim: usize) -> Self {
        Denorm {
            scale: vec![1.0; dim],
            shift: vec![0.0; dim],
        }
    }
}

/// Evaluation context: how to map predictions to physical units, and which
/// columns count as states for [`LossFeatures::StatesOnly`].
#[derive(Clone, Debug)]
pub struct LossContext {
    pub denorm: Denorm,
    pub state_mask: Vec<bool>,
}

impl LossContext {
    pub fn plain(dim: usize) -> Self {
        LossContext {
            denorm: Denorm::identity(dim),
            state_mask: vec![true; dim],
        }
    }
}

/// The composed objective, plus its parts read back off the tape.
#[derive(Debug)]
pub struct LossValue {
    pub total: Var,
    pub mse: Var,
    pub pir: Var,
    pub total_value: f64,
    pub mse_value: f64,
    pub pir_value: f64,
}

/// Observed values for one trajectory: a `rows x dim` row-major matrix.
#[derive(Clone, Copy)]
pub struct ObsBlock<'a> {
    pub values: &'a [f64],
    pub rows: usize,
    pub dim: usize,
}

impl<'a> ObsBlock<'a> {
    pub fn new(values: &'a [f64], rows: usize, dim: usize) -> Self {
        assert_eq!(values.len(), rows * dim);
        ObsBlock { values, rows, dim }
    }

    fn row(&self, i: usize) -> &'a [f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Loss for a single predicted trajectory against its observation;
/// `n` in both means is the trajectory's cell count.
pub fn trajectory_loss(
    tape: &mut Tape,
    pred: &TapedTrajectory,
    obs: ObsBlock<'_>,
    cfg: &LossConfig,
    ctx: &LossContext,
) -> Result<LossValue, LossError> {
    batch_trajectory_loss(tape, &[pred], &[obs], cfg, ctx)
}

/// Loss over a batch of trajectories (one per training strain). Both means
/// run over every cell of the batch, i.e. `n = rows * dim * batch`.
pub fn batch_trajectory_loss(
    tape: &mut Tape,
    preds: &[&TapedTrajectory],
    obs: &[ObsBlock<'_>],
    cfg: &LossConfig,
    ctx: &LossContext,
) -> Result<LossValue, LossError> {
    if preds.is_empty() || preds.len() != obs.len() {
        return Err(LossError::EmptyBatch);
    }

    let dim = obs[0].dim;
    if ctx.state_mask.len() != dim {
        return Err(LossError::MaskLength {
            mask: ctx.state_mask.len(),
            dim,
        });
    }
    for (pred, ob) in preds.iter().zip(obs) {
        if pred.rows.len() != ob.rows {
            return Err(LossError::GridMismatch {
                pred: pred.rows.len(),
                obs: ob.rows,
            });
        }
        let pred_dim = tape.value(pred.rows[0]).shape().0;
        if pred_dim != ob.dim || ob.dim != dim {
            return Err(LossError::DimMismatch {
                pred: pred_dim,
                obs: ob.dim,
            });
        }
        if ob.values.iter().any(|x| !x.is_finite()) {
            return Err(LossError::NonFiniteObservation);
        }
    }

    let mask_vec = match cfg.features {
        LossFeatures::All => None,
        LossFeatures::StatesOnly => Some(Tensor::col(
            ctx.state_mask
                .iter()
                .map(|&s| if s { 1.0 } else { 0.0 })
                .collect(),
        )),
    };
    let included_per_row = match cfg.features {
        LossFeatures::All => dim,
        LossFeatures::StatesOnly => ctx.state_mask.iter().filter(|&&s| s).count(),
    };

    let scale_t = Tensor::col(ctx.denorm.scale.clone());
    let shift_t = Tensor::col(ctx.denorm.shift.clone());

    let mut sq_err_sum: Option<Var> = None;
    let mut neg_sq_sum: Option<Var> = None;
    let mut total_rows = 0usize;

    for (pred, ob) in preds.iter().zip(obs) {
        for (i, &row) in pred.rows.iter().enumerate() {
            // Squared residual against the observed row.
            let obs_row = tape.constant(Tensor::col(ob.row(i).to_vec()))?;
            let mut diff = tape.sub(row, obs_row)?;
            if let Some(mask) = &mask_vec {
                diff = tape.mul_const(diff, mask)?;
            }
            let sq = tape.square(diff)?;
            let s = tape.sum(sq)?;
            sq_err_sum = Some(match sq_err_sum {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });

            // Negativity penalty on the (optionally denormalized) prediction.
            let phys = match cfg.pir_space {
                PirSpace::Physical => {
                    let scaled = tape.mul_const(row, &scale_t)?;
                    tape.add_const(scaled, &shift_t)?
                }
                PirSpace::Normalized => row,
            };
            let clipped = tape.min_zero(phys)?;
            let nsq = tape.square(clipped)?;
            let ns = tape.sum(nsq)?;
            neg_sq_sum = Some(match neg_sq_sum {
                Some(acc) => tape.add(acc, ns)?,
                None => ns,
            });
        }
        total_rows += ob.rows;
    }

    let n_mse = (total_rows * included_per_row) as f64;
    let n_pir = (total_rows * dim) as f64;
    let mse = tape.scale(sq_err_sum.unwrap(), 1.0 / n_mse)?;
    let pir = tape.scale(neg_sq_sum.unwrap(), 1.0 / n_pir)?;
    let weighted = tape.scale(pir, cfg.lambda)?;
    let total = tape.add(mse, weighted)?;

    Ok(LossValue {
        total,
        mse,
        pir,
        total_value: tape.scalar_value(total),
        mse_value: tape.scalar_value(mse),
        pir_value: tape.scalar_value(pir),
    })
}
