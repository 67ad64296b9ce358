//! Evaluation metrics: relative ℓ2 error, spectral error measures and
//! climatology statistics.

use crate::error::{Error, Result};
use crate::rollout::Trajectory;
use crate::spectral::SpectrumSeries;
use crate::tensor::Tensor;

/// Truth power at or below this marks a shell as excluded from spectral
/// ratio metrics.
pub const TRUTH_FLOOR: f64 = 1e-30;

/// `‖pred − truth‖₂ / ‖truth‖₂` over all entries jointly.
pub fn rel_l2_metric(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    pred.expect_same_shape(truth)?;
    let denom = truth.norm_l2();
    if denom == 0.0 {
        return Err(Error::invalid("relative error against an all-zero truth"));
    }
    Ok(pred.sub(truth)?.norm_l2() / denom)
}

/// Relative ℓ2 error of each trailing channel separately.
pub fn rel_l2_per_channel(pred: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
    pred.expect_same_shape(truth)?;
    let (_, _, c) = truth.hwc()?;
    (0..c)
        .map(|ch| rel_l2_metric(&pred.channel_slice(ch, 1)?, &truth.channel_slice(ch, 1)?))
        .collect()
}

/// A spectral metric value with the shells that entered it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralError {
    pub value: f64,
    pub included: usize,
    /// Shells skipped because the truth power was at or below [`TRUTH_FLOOR`].
    pub excluded: Vec<usize>,
}

fn spectral_mean(
    pred: &SpectrumSeries,
    truth: &SpectrumSeries,
    term: impl Fn(usize, f64, f64) -> Result<f64>,
) -> Result<SpectralError> {
    if pred.kind != truth.kind || pred.power.len() != truth.power.len() {
        return Err(Error::shape(format!(
            "cannot compare {} spectrum over {} shells with {} spectrum over {} shells",
            pred.kind,
            pred.power.len(),
            truth.kind,
            truth.power.len()
        )));
    }
    let mut sum = 0.0;
    let mut included = 0;
    let mut excluded = Vec::new();
    for (k, (&p, &t)) in pred.power.iter().zip(&truth.power).enumerate() {
        if t <= TRUTH_FLOOR {
            excluded.push(k);
            continue;
        }
        sum += term(k, p, t)?;
        included += 1;
    }
    if included == 0 {
        return Err(Error::invalid(
            "no spectral shell has truth power above the floor",
        ));
    }
    Ok(SpectralError {
        value: sum / included as f64,
        included,
        excluded,
    })
}

/// Mean of `|(P̂_k − P_k)/P_k|` over included shells (SMAE/EMAE).
pub fn spectrum_mae(pred: &SpectrumSeries, truth: &SpectrumSeries) -> Result<SpectralError> {
    spectral_mean(pred, truth, |_, p, t| Ok(((p - t) / t).abs()))
}

/// Mean of `|ln(P̂_k/P_k)|` over included shells (SMLR/EMLR).
pub fn spectrum_mlr(pred: &SpectrumSeries, truth: &SpectrumSeries) -> Result<SpectralError> {
    spectral_mean(pred, truth, |k, p, t| {
        if !(p > 0.0) {
            return Err(Error::invalid(format!(
                "predicted power {p} at shell {k} is not positive"
            )));
        }
        Ok((p / t).ln().abs())
    })
}

/// Climatology of one state channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelClimatology {
    pub model_mean: Tensor,
    pub reference_mean: Tensor,
    /// `b(s) = x̄_model(s) − x̄_ref(s)`.
    pub bias: Tensor,
    pub min_bias: f64,
    pub max_bias: f64,
    pub mean_bias: f64,
    pub rmse: f64,
    /// Per-row (constant latitude/`y`) averages of the time means.
    pub model_zonal: Vec<f64>,
    pub reference_zonal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimatologyReport {
    pub channels: Vec<ChannelClimatology>,
}

/// `(1/T) Σ_t x(t, ·)` of `H×W×C` states.
pub fn time_mean(states: &[Tensor]) -> Result<Tensor> {
    let first = states
        .first()
        .ok_or_else(|| Error::invalid("time mean of an empty trajectory"))?;
    first.hwc()?;
    let mut acc = Tensor::zeros(first.shape());
    for s in states {
        s.expect_same_shape(first)?;
        acc.add_assign(s);
    }
    Ok(acc.scale(1.0 / states.len() as f64))
}

fn zonal(field: &Tensor) -> Vec<f64> {
    let (h, w) = (field.shape()[0], field.shape()[1]);
    (0..h)
        .map(|i| field.data()[i * w..(i + 1) * w].iter().sum::<f64>() / w as f64)
        .collect()
}

/// Bias statistics between two `H×W×C` time-mean fields.
pub fn climatology_from_means(
    model_mean: &Tensor,
    reference_mean: &Tensor,
) -> Result<ClimatologyReport> {
    if model_mean.shape() != reference_mean.shape() {
        return Err(Error::shape(format!(
            "climatology grids differ: {:?} vs {:?}",
            model_mean.shape(),
            reference_mean.shape()
        )));
    }
    let (h, w, c) = model_mean.hwc()?;
    let mut channels = Vec::with_capacity(c);
    for ch in 0..c {
        let m = model_mean.channel_slice(ch, 1)?.reshape(&[h, w])?;
        let r = reference_mean.channel_slice(ch, 1)?.reshape(&[h, w])?;
        let bias = m.sub(&r)?;
        let n = bias.len() as f64;
        let min_bias = bias.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max_bias = bias
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mean_bias = bias.sum() / n;
        let rmse = (bias.data().iter().map(|b| b * b).sum::<f64>() / n).sqrt();
        channels.push(ChannelClimatology {
            model_zonal: zonal(&m),
            reference_zonal: zonal(&r),
            model_mean: m,
            reference_mean: r,
            bias,
            min_bias,
            max_bias,
            mean_bias,
            rmse,
        });
    }
    Ok(ClimatologyReport { channels })
}

pub fn climatology(model: &Trajectory, reference: &Trajectory) -> Result<ClimatologyReport> {
    climatology_from_means(&time_mean(&model.states)?, &time_mean(&reference.states)?)
}

/// Averages member time means, then compares the ensemble mean with the
/// reference.
pub fn ensemble_mean_climatology(
    members: &[Trajectory],
    reference: &Trajectory,
) -> Result<ClimatologyReport> {
    if members.is_empty() {
        return Err(Error::invalid(
            "ensemble climatology needs at least one member",
        ));
    }
    let means = members
        .iter()
        .map(|m| time_mean(&m.states))
        .collect::<Result<Vec<_>>>()?;
    climatology_from_means(&time_mean(&means)?, &time_mean(&reference.states)?)
}
