//! SNR metric and closed-form noise predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fov::FovStack;
use crate::grid::Grid2D;
use crate::mask::delroughness;
use crate::noise::{NoiseConfig, SimResult, Source};
use crate::planner::Plan;
use crate::target::TargetImage;

/// `sqrt(E[I^2] / E[nu^2])` with `nu = (P - mean P) - (I - mean I)` over the
/// region left after removing `border` pixels from every side. A residual at
/// rounding level (RMS below a few ulps of the largest value) counts as zero
/// and gives `+inf`.
pub fn snr(target: &TargetImage, projection: &Grid2D, border: usize) -> Result<f64> {
    projection.ensure_shape(target.shape())?;
    let p = projection.crop_border(border)?;
    let i = target.grid().crop_border(border)?;
    let (pm, im) = (p.mean(), i.mean());
    let noise: f64 = p
        .values()
        .iter()
        .zip(i.values())
        .map(|(pv, iv)| {
            let nu = (pv - pm) - (iv - im);
            nu * nu
        })
        .sum::<f64>()
        / p.len() as f64;
    let scale = p.values().iter().chain(i.values()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = ROUNDING_ULPS * f64::EPSILON * scale;
    if noise <= floor * floor {
        return Ok(f64::INFINITY);
    }
    Ok((i.mean_sq() / noise).sqrt())
}

const ROUNDING_ULPS: f64 = 8.0;

/// JSON helpers: infinite SNR is written as the string `"exact"`.
pub mod snr_json {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v == f64::INFINITY {
            Repr::Tag("exact".into())
        } else {
            Repr::Num(v)
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Tag(s) if s == "exact" => Ok(f64::INFINITY),
            Repr::Tag(s) => Err(E::custom(format!("unexpected SNR tag {s:?}"))),
        }
    }

    pub fn format(v: f64) -> String {
        if v == f64::INFINITY {
            "exact".into()
        } else {
            format!("{v}")
        }
    }

    pub mod scalar {
        use super::*;

        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            to_repr(*v).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            from_repr(Repr::deserialize(d)?)
        }
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|x| to_repr(*x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.map(to_repr).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePrediction {
    pub source: Source,
    pub noise_std: f64,
    #[serde(with = "snr_json::scalar")]
    pub predicted_snr: f64,
}

impl NoisePrediction {
    fn new(source: Source, norm_sq: f64, noise_std: f64) -> Self {
        let predicted_snr = if noise_std == 0.0 { f64::INFINITY } else { norm_sq.sqrt() / noise_std };
        NoisePrediction { source, noise_std, predicted_snr }
    }
}

/// Photon-noise SNR `sqrt(lambda E[I^2] / pedestal)`.
pub fn poisson_snr(lambda: f64, norm_sq: f64, pedestal: f64) -> Result<f64> {
    Ok(poisson_prediction(lambda, norm_sq, pedestal)?.predicted_snr)
}

fn poisson_prediction(lambda: f64, norm_sq: f64, pedestal: f64) -> Result<NoisePrediction> {
    if !(lambda > 0.0) {
        return Err(Error::Argument(format!("lambda must be positive, got {lambda}")));
    }
    if !(pedestal > 0.0) {
        return Err(Error::Domain(format!("Poisson prediction needs a positive pedestal, got {pedestal}")));
    }
    Ok(NoisePrediction::new(Source::Poisson, norm_sq, (pedestal / lambda).sqrt()))
}

pub fn predict_poisson(target: &TargetImage, plan: &Plan, cfg: &NoiseConfig) -> Result<NoisePrediction> {
    poisson_prediction(cfg.lambda_photons, target.norm_sq(), plan.pedestal)
}

/// Mean of the per-FOV (population) pixel variances over the support.
pub fn pooled_support_variance(stack: &FovStack, plan: &Plan) -> Result<f64> {
    if plan.support.is_empty() {
        return Err(Error::Undefined("plan has an empty support".into()));
    }
    Ok(plan.support.iter().map(|&k| stack.fov(k).variance()).sum::<f64>() / plan.n_prime() as f64)
}

/// Exposure-noise SNR from `sigma_w sqrt(N' Var[R])`.
pub fn exposure_snr(sigma_w: f64, n_prime: usize, var_r: f64, norm_sq: f64) -> Result<f64> {
    if !(sigma_w >= 0.0) {
        return Err(Error::Argument(format!("sigma_w must be non-negative, got {sigma_w}")));
    }
    Ok(NoisePrediction::new(Source::Exposure, norm_sq, sigma_w * (n_prime as f64 * var_r).sqrt()).predicted_snr)
}

pub fn predict_exposure(target: &TargetImage, stack: &FovStack, plan: &Plan, cfg: &NoiseConfig) -> Result<NoisePrediction> {
    let var_r = pooled_support_variance(stack, plan)?;
    let std = cfg.sigma_w * (plan.n_prime() as f64 * var_r).sqrt();
    Ok(NoisePrediction::new(Source::Exposure, target.norm_sq(), std))
}

/// Positional-noise SNR from `sigma_ij sqrt(sum_k w_k^2 D_k^2)`, with `D_k`
/// the delroughness of FOV `k`.
pub fn predict_translational(target: &TargetImage, stack: &FovStack, plan: &Plan, cfg: &NoiseConfig) -> Result<NoisePrediction> {
    if plan.weights.len() != stack.len() {
        return Err(Error::Shape { expected: (stack.len(), 1), got: (plan.weights.len(), 1) });
    }
    let mut sum = 0.0;
    for &k in &plan.support {
        let d = delroughness(stack.fov(k))?;
        sum += (plan.weights[k] * d).powi(2);
    }
    Ok(NoisePrediction::new(Source::Translational, target.norm_sq(), cfg.sigma_ij * sum.sqrt()))
}

pub fn predict_all(target: &TargetImage, stack: &FovStack, plan: &Plan, cfg: &NoiseConfig) -> Result<Vec<NoisePrediction>> {
    Ok(vec![
        predict_poisson(target, plan, cfg)?,
        predict_exposure(target, stack, plan, cfg)?,
        predict_translational(target, stack, plan, cfg)?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrStat {
    #[serde(with = "snr_json::scalar")]
    pub mean: f64,
    #[serde(with = "snr_json::scalar")]
    pub std: f64,
}

/// One row of the consolidated results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mask_label: String,
    pub n: usize,
    pub stride: String,
    #[serde(with = "snr_json::scalar")]
    pub nnls_snr: f64,
    pub pedestal: f64,
    pub n_prime: usize,
    pub norm_sq: f64,
    pub predictions: Vec<NoisePrediction>,
    pub simulated: Vec<(Source, SnrStat)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_e: Option<f64>,
}

pub const CSV_HEADER: &str = "mask_label,N,stride,NNLS_SNR,pedestal,N_prime,SNR_poisson_mean,SNR_poisson_std,SNR_exposure_mean,SNR_exposure_std,SNR_translational_mean,SNR_translational_std,SNR_all_mean,SNR_all_std,t_s,t_e";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Report {
    pub fn simulated(&self, source: Source) -> Option<SnrStat> {
        self.simulated.iter().find(|(s, _)| *s == source).map(|(_, v)| *v)
    }

    pub fn prediction(&self, source: Source) -> Option<NoisePrediction> {
        self.predictions.iter().find(|p| p.source == source).copied()
    }

    /// CSV row matching [`CSV_HEADER`]; missing values are empty fields.
    pub fn csv_row(&self) -> String {
        let mut f = vec![
            csv_field(&self.mask_label),
            self.n.to_string(),
            csv_field(&self.stride),
            snr_json::format(self.nnls_snr),
            format!("{}", self.pedestal),
            self.n_prime.to_string(),
        ];
        for src in [Source::Poisson, Source::Exposure, Source::Translational, Source::All] {
            match self.simulated(src) {
                Some(s) => {
                    f.push(snr_json::format(s.mean));
                    f.push(snr_json::format(s.std));
                }
                None => f.extend([String::new(), String::new()]),
            }
        }
        f.push(self.t_s.map(|v| format!("{v}")).unwrap_or_default());
        f.push(self.t_e.map(|v| format!("{v}")).unwrap_or_default());
        f.join(",")
    }
}

/// Bundles the plan summary, predictions and any simulation results.
#[allow(clippy::too_many_arguments)]
pub fn report_plan(
    mask_label: &str,
    stride: &str,
    target: &TargetImage,
    stack: &FovStack,
    plan: &Plan,
    cfg: &NoiseConfig,
    sim_results: &[(Source, SimResult)],
    durations: Option<(f64, f64)>,
) -> Result<Report> {
    let mut predictions = Vec::new();
    if plan.pedestal > 0.0 {
        predictions.push(predict_poisson(target, plan, cfg)?);
    }
    if !plan.support.is_empty() {
        predictions.push(predict_exposure(target, stack, plan, cfg)?);
        predictions.push(predict_translational(target, stack, plan, cfg)?);
    }
    let mut simulated: Vec<(Source, SnrStat)> = sim_results
        .iter()
        .map(|(s, r)| (*s, SnrStat { mean: r.snr_mean, std: r.snr_std }))
        .collect();
    simulated.sort_by_key(|(s, _)| *s);
    Ok(Report {
        mask_label: mask_label.to_string(),
        n: stack.len(),
        stride: stride.to_string(),
        nnls_snr: plan.noise_free_snr,
        pedestal: plan.pedestal,
        n_prime: plan.n_prime(),
        norm_sq: target.norm_sq(),
        predictions,
        simulated,
        t_s: durations.map(|d| d.0),
        t_e: durations.map(|d| d.1),
    })
}
