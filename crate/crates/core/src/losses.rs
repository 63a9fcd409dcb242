//! Training objectives. Each loss exists twice: as a plain function over
//! matrices and as a graph builder used by the trainer. Both reduce by the
//! mean over every element (and over mapped layers for the layer-wise
//! feature loss).

use std::rc::Rc;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, softmax_rows, Graph, Var};
use crate::error::{config_err, invalid, Error, Result};
use crate::model::{EncodedFeature, ScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Softmax temperature of the score-distillation loss.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 25.0,
            lambda3: 1.0,
            temperature: 1.0,
        }
    }
}

impl LossWeights {
    /// All distillation weights zero: plain cross-entropy prompt learning.
    pub fn ce_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(format!("loss.{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(config_err("loss.temperature must be positive"));
        }
        Ok(())
    }
}

macro_rules! string_enum {
    ($name:ident, $key:literal, { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$variant),)+
                    other => Err(config_err(format!(
                        concat!($key, " must be one of [", $($s, " ",)+ "], got {:?}"),
                        other
                    ))),
                }
            }
        }
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s,)+ }
            }
            pub fn all() -> &'static [$name] {
                &[$($name::$variant),+]
            }
        }
    };
}
pub(crate) use string_enum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MacLossType {
    #[default]
    Kl,
    L1,
    Mse,
}
string_enum!(MacLossType, "loss.mac_type", { Kl => "kl", L1 => "l1", Mse => "mse" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MacSource {
    #[default]
    LearnedScores,
    PromptedLogits,
}
string_enum!(MacSource, "loss.mac_source", { LearnedScores => "learned_scores", PromptedLogits => "prompted_logits" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VacMode {
    #[default]
    LayerWise,
    LastLayer,
}
string_enum!(VacMode, "loss.vac_mode", { LayerWise => "layer_wise", LastLayer => "last_layer" });

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(invalid(format!("{what}: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(invalid(format!("{} labels for {rows} score rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(S)[n][y_n]`.
pub fn ce_loss(scores: &ScoreMatrix, labels: &[usize]) -> Result<f64> {
    let s = &scores.values;
    check_labels(labels, s.nrows(), s.ncols())?;
    let lp = log_softmax_rows(s);
    Ok(-labels.iter().enumerate().map(|(n, &y)| lp[[n, y]]).sum::<f64>() / labels.len() as f64)
}

pub fn ce_loss_graph(g: &mut Graph, scores: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = g.shape(scores);
    check_labels(labels, rows, cols)?;
    let lp = g.log_softmax(scores);
    Ok(g.nll_mean(lp, Rc::new(labels.to_vec())))
}

fn l1_mean(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).mean().unwrap_or(0.0)
}

pub fn l1_mean_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(invalid(format!("L1: shapes {:?} and {:?} differ", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Feature distillation between the student's per-layer features and the
/// gated teacher features. `LastLayer` compares only the final pair.
pub fn vac_loss(student: &[Array2<f64>], teacher: &[Array2<f64>], mode: VacMode) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(invalid(format!(
            "{} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    if student.is_empty() {
        return Err(invalid("no mapped layers"));
    }
    let pairs: Vec<(&Array2<f64>, &Array2<f64>)> = match mode {
        VacMode::LayerWise => student.iter().zip(teacher).collect(),
        VacMode::LastLayer => vec![(student.last().unwrap(), teacher.last().unwrap())],
    };
    let mut total = 0.0;
    for (s, t) in &pairs {
        same_shape(s, t, "vac")?;
        total += l1_mean(s, t);
    }
    Ok(total / pairs.len() as f64)
}

/// Class-indexed feature distillation for the text branch.
pub fn lac_loss(t: &EncodedFeature, gated: &EncodedFeature) -> Result<f64> {
    same_shape(&t.values, &gated.values, "lac")?;
    Ok(l1_mean(&t.values, &gated.values))
}

/// Score distillation between the student's scores and the gated agent
/// scores. For `Kl` this is `KL(softmax(S_P/τ) ‖ softmax(S_A/τ))` averaged over
/// rows; `L1` and `Mse` compare the same two probability vectors element-wise.
pub fn mac_loss(
    student: &ScoreMatrix,
    agents: &ScoreMatrix,
    loss_type: MacLossType,
    temperature: f64,
) -> Result<f64> {
    same_shape(&student.values, &agents.values, "mac")?;
    if !(temperature > 0.0) {
        return Err(config_err("temperature must be positive"));
    }
    let sp = &student.values / temperature;
    let sa = &agents.values / temperature;
    Ok(match loss_type {
        MacLossType::Kl => {
            let lp = log_softmax_rows(&sp);
            let lq = log_softmax_rows(&sa);
            let p = lp.mapv(f64::exp);
            (&p * &(&lp - &lq)).sum() / sp.nrows() as f64
        }
        MacLossType::L1 => l1_mean(&softmax_rows(&sp), &softmax_rows(&sa)),
        MacLossType::Mse => (softmax_rows(&sp) - softmax_rows(&sa)).mapv(|v| v * v).mean().unwrap_or(0.0),
    })
}

pub fn mac_loss_graph(
    g: &mut Graph,
    student: Var,
    agents: Var,
    loss_type: MacLossType,
    temperature: f64,
) -> Result<Var> {
    if g.shape(student) != g.shape(agents) {
        return Err(invalid("mac: score shapes differ"));
    }
    let rows = g.shape(student).0 as f64;
    let sp = g.scale(student, 1.0 / temperature);
    let sa = g.scale(agents, 1.0 / temperature);
    Ok(match loss_type {
        MacLossType::Kl => {
            let lp = g.log_softmax(sp);
            let lq = g.log_softmax(sa);
            let p = g.exp(lp);
            let diff = g.sub(lp, lq);
            let terms = g.mul(p, diff);
            let s = g.sum(terms);
            g.scale(s, 1.0 / rows)
        }
        MacLossType::L1 => {
            let p = g.softmax(sp);
            let q = g.softmax(sa);
            l1_mean_graph(g, p, q)?
        }
        MacLossType::Mse => {
            let p = g.softmax(sp);
            let q = g.softmax(sa);
            let d = g.sub(p, q);
            let d = g.square(d);
            g.mean(d)
        }
    })
}

/// `ce + λ1·vac + λ2·lac + λ3·mac`.
pub fn total_loss(ce: f64, vac: f64, lac: f64, mac: f64, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    for (name, v) in [("ce", ce), ("vac", vac), ("lac", lac), ("mac", mac)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} loss is {v}")));
        }
    }
    Ok(ce + w.lambda1 * vac + w.lambda2 * lac + w.lambda3 * mac)
}
