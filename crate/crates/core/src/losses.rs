//! Training objectives. Each loss is a graph node with an analytic backward
//! rule so it can sit at the end of any network.

use cq_tensor::{CustomOp, Graph, Result as TResult, Scalar, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CqError, Result};

/// Smoothing constant added to Dice numerators and denominators.
pub const DICE_SMOOTH: f64 = 1e-6;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceVariant {
    /// `1 - (1/K) Σ w_k (Σ y p + ε) / (Σ y + Σ p + ε)`.
    Verbatim,
    /// `1 - Σ w_k (2 Σ y p + ε) / (Σ y + Σ p + ε)`.
    Canonical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Per-class Dice weights (background, cavity, myocardium).
    pub class_weights: Vec<f64>,
    pub dice_variant: DiceVariant,
    /// Multi-stage weights on MSE and BCE.
    pub multistage: [f64; 2],
    /// End-to-end weights on Dice, MSE and BCE.
    pub end_to_end: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class_weights: vec![0.2, 0.3, 0.5],
            dice_variant: DiceVariant::Verbatim,
            multistage: [1.0, 4.0],
            end_to_end: [10.0, 1.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.class_weights.iter().chain(&self.multistage).chain(&self.end_to_end);
        if let Some(w) = all.copied().find(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(CqError::config("loss weights", format!("{w} is not a finite non-negative weight")));
        }
        if self.class_weights.is_empty() {
            return Err(CqError::config("class_weights", "need one weight per class"));
        }
        Ok(())
    }
}

/// Per-class overlap sums over a `[N, K, spatial...]` layout.
fn class_sums<T: Scalar>(probs: &Tensor<T>, onehot: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let s = probs.shape();
    let (n, k) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let (mut inter, mut total) = (vec![0.0; k], vec![0.0; k]);
    for b in 0..n {
        for c in 0..k {
            let base = (b * k + c) * inner;
            let (p, y) = (&probs.data()[base..base + inner], &onehot.data()[base..base + inner]);
            for (&pi, &yi) in p.iter().zip(y) {
                inter[c] += (pi * yi).as_f64();
                total[c] += (pi + yi).as_f64();
            }
        }
    }
    (inter, total)
}

struct DiceOp<T: Scalar> {
    onehot: Tensor<T>,
    weights: Vec<f64>,
    variant: DiceVariant,
}

impl<T: Scalar> DiceOp<T> {
    /// `(overall scale, numerator factor)` of the chosen variant.
    fn factors(&self) -> (f64, f64) {
        match self.variant {
            DiceVariant::Verbatim => (1.0 / self.weights.len() as f64, 1.0),
            DiceVariant::Canonical => (1.0, 2.0),
        }
    }

    fn value(&self, probs: &Tensor<T>) -> f64 {
        let (scale, a) = self.factors();
        let (inter, total) = class_sums(probs, &self.onehot);
        let score: f64 = (0..self.weights.len())
            .map(|c| self.weights[c] * (a * inter[c] + DICE_SMOOTH) / (total[c] + DICE_SMOOTH))
            .sum();
        1.0 - scale * score
    }
}

impl<T: Scalar> CustomOp<T> for DiceOp<T> {
    fn name(&self) -> &'static str {
        "soft_dice"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> TResult<Vec<Option<Tensor<T>>>> {
        let probs = inputs[0];
        let (scale, a) = self.factors();
        let (inter, total) = class_sums(probs, &self.onehot);
        let s = probs.shape();
        let (n, k) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let up = grad.item()?.as_f64();
        let mut out = probs.zeros_like();
        for c in 0..k {
            let den = total[c] + DICE_SMOOTH;
            let num = a * inter[c] + DICE_SMOOTH;
            // d/dp of num/den for a pixel with label y is (a·y·den − num) / den².
            let coef = -up * scale * self.weights[c] / (den * den);
            let (hit, miss) = (T::of_f64(coef * (a * den - num)), T::of_f64(coef * -num));
            for b in 0..n {
                let base = (b * k + c) * inner;
                let y = &self.onehot.data()[base..base + inner];
                for (g, &yi) in out.data_mut()[base..base + inner].iter_mut().zip(y) {
                    *g = if yi > T::zero() { hit } else { miss };
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

fn check_probabilities<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    match t.data().iter().position(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        Some(i) => Err(CqError::invalid(op, format!("probability {} at flat index {i} lies outside [0, 1]", t.data()[i]))),
        None => Ok(()),
    }
}

/// Weighted multi-class soft Dice over `[N, K, spatial...]` probabilities.
pub fn soft_dice<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    onehot: &Tensor<T>,
    class_weights: &[f64],
    variant: DiceVariant,
) -> Result<Var> {
    let p = g.value(probs);
    if p.shape() != onehot.shape() {
        return Err(TensorError::Shape {
            op: "soft_dice",
            detail: format!("probabilities {:?} vs one-hot {:?}", p.shape(), onehot.shape()),
        }
        .into());
    }
    if p.rank() < 2 || p.shape()[1] != class_weights.len() {
        return Err(CqError::invalid(
            "soft_dice",
            format!("{} class weights for probabilities of shape {:?}", class_weights.len(), p.shape()),
        ));
    }
    check_probabilities("soft_dice", p)?;
    let s = onehot.shape();
    let (n, k) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    for b in 0..n {
        for i in 0..inner {
            let mut ones = 0;
            for c in 0..k {
                let v = onehot.data()[(b * k + c) * inner + i];
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    ones = usize::MAX;
                    break;
                }
            }
            if ones != 1 {
                return Err(CqError::invalid("soft_dice", format!("ground truth at sample {b}, pixel {i} is not one-hot")));
            }
        }
    }
    let op = DiceOp { onehot: onehot.clone(), weights: class_weights.to_vec(), variant };
    let value = Tensor::scalar(T::of_f64(op.value(p)));
    Ok(g.custom(&[probs], value, Box::new(op)))
}

struct BceOp<T: Scalar> {
    labels: Tensor<T>,
}

impl<T: Scalar> CustomOp<T> for BceOp<T> {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> TResult<Vec<Option<Tensor<T>>>> {
        let p = inputs[0];
        let scale = grad.item()?.as_f64() / p.len() as f64;
        let mut out = p.zeros_like();
        for ((g, &pi), &yi) in out.data_mut().iter_mut().zip(p.data()).zip(self.labels.data()) {
            let (pi, yi) = (pi.as_f64(), yi.as_f64());
            // The clamp is flat outside its range.
            if pi > BCE_CLAMP && pi < 1.0 - BCE_CLAMP {
                *g = T::of_f64(scale * (-yi / pi + (1.0 - yi) / (1.0 - pi)));
            }
        }
        Ok(vec![Some(out)])
    }
}

/// Mean binary cross-entropy of probabilities `P(ED)` against 0/1 labels.
pub fn bce<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &Tensor<T>) -> Result<Var> {
    let p = g.value(probs);
    if p.shape() != labels.shape() {
        return Err(TensorError::Shape { op: "bce", detail: format!("{:?} vs labels {:?}", p.shape(), labels.shape()) }.into());
    }
    check_probabilities("bce", p)?;
    if let Some(y) = labels.data().iter().find(|y| **y != T::zero() && **y != T::one()) {
        return Err(CqError::invalid("bce", format!("label {y} is not 0 or 1")));
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&pi, &yi)| {
            let pi = pi.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let yi = yi.as_f64();
            -(yi * pi.ln() + (1.0 - yi) * (1.0 - pi).ln())
        })
        .sum();
    let value = Tensor::scalar(T::of_f64(total / p.len() as f64));
    Ok(g.custom(&[probs], value, Box::new(BceOp { labels: labels.clone() })))
}

struct MseOp<T: Scalar> {
    target: Tensor<T>,
}

impl<T: Scalar> CustomOp<T> for MseOp<T> {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> TResult<Vec<Option<Tensor<T>>>> {
        let p = inputs[0];
        let scale = T::of_f64(2.0 * grad.item()?.as_f64() / p.len() as f64);
        let data = p.data().iter().zip(self.target.data()).map(|(&a, &b)| scale * (a - b)).collect();
        Ok(vec![Some(Tensor::new(p.shape(), data)?)])
    }
}

/// Mean squared error over every frame and index.
pub fn mse<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let p = g.value(pred);
    if p.shape() != target.shape() {
        return Err(TensorError::Shape { op: "mse", detail: format!("{:?} vs target {:?}", p.shape(), target.shape()) }.into());
    }
    let total: f64 = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
    let value = Tensor::scalar(T::of_f64(total / p.len() as f64));
    Ok(g.custom(&[pred], value, Box::new(MseOp { target: target.clone() })))
}

/// `λ1·MSE + λ2·BCE`.
pub fn multitask<T: Scalar>(g: &mut Graph<T>, mse: Var, bce: Var, lambda: [f64; 2]) -> Result<Var> {
    Ok(g.weighted_sum(&[(mse, lambda[0]), (bce, lambda[1])])?)
}

/// `λ1·Dice + λ2·MSE + λ3·BCE`.
pub fn end_to_end<T: Scalar>(g: &mut Graph<T>, dice: Var, mse: Var, bce: Var, lambda: [f64; 3]) -> Result<Var> {
    Ok(g.weighted_sum(&[(dice, lambda[0]), (mse, lambda[1]), (bce, lambda[2])])?)
}

/// Dice loss value without recording a graph.
pub fn soft_dice_value(probs: &Tensor<f64>, onehot: &Tensor<f64>, class_weights: &[f64], variant: DiceVariant) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(probs.clone());
    let l = soft_dice(&mut g, p, onehot, class_weights, variant)?;
    Ok(g.value(l).item()?)
}

/// BCE value without recording a graph.
pub fn bce_value(probs: &[f64], labels: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(Tensor::new(&[probs.len()], probs.to_vec())?);
    let l = bce(&mut g, p, &Tensor::new(&[labels.len()], labels.to_vec())?)?;
    Ok(g.value(l).item()?)
}

/// MSE value without recording a graph.
pub fn mse_value(pred: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(pred.clone());
    let l = mse(&mut g, p, target)?;
    Ok(g.value(l).item()?)
}
