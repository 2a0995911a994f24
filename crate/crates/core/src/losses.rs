//! Client-side loss terms and the composite loss/gradient used by local SGD.
//!
//! All batch reductions are means over the batch. The matching loss sums
//! squared errors over sites and units before averaging over the batch; the
//! weight-divergence term is a plain squared distance (no batch factor).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{MatchingDecoder, ModelArch, Site};
use crate::nn::{backward_with, forward, forward_with, ForwardTrace, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Set from the experiment's algorithm flags, not the loss section.
    #[serde(skip)]
    pub use_matching: bool,
    pub matching_coeff: f64,
    #[serde(skip)]
    pub use_wd: bool,
    pub wd_coeff: f64,
    pub use_er: bool,
    /// Entropy floor in nats.
    pub h_min: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_matching: false,
            matching_coeff: 1.0,
            use_wd: false,
            wd_coeff: 0.1,
            use_er: true,
            h_min: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("loss.matching_coeff", self.matching_coeff),
            ("loss.wd_coeff", self.wd_coeff),
            ("loss.h_min", self.h_min),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Values of each loss term on one batch. Disabled terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub matching: f64,
    pub er: f64,
    pub wd: f64,
    pub total: f64,
}

struct RowSoftmax {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

fn softmax_rows(logits: &Tensor) -> Result<(usize, usize, RowSoftmax)> {
    if logits.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut probs = vec![0.0; b * c];
    let mut log_probs = vec![0.0; b * c];
    for i in 0..b {
        let z = logits.row(i);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let ls = s.ln();
        for k in 0..c {
            log_probs[i * c + k] = z[k] - m - ls;
            probs[i * c + k] = log_probs[i * c + k].exp();
        }
    }
    Ok((b, c, RowSoftmax { probs, log_probs }))
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape("labels", &[batch], &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Mean cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c, sm) = softmax_rows(logits)?;
    check_labels(labels, b, c)?;
    let mut grad = sm.probs;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= sm.log_probs[i * c + y];
        grad[i * c + y] -= 1.0;
    }
    let inv = 1.0 / b as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok((loss * inv, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean cross-entropy without a gradient, plus the number of correct argmax
/// predictions.
pub fn cross_entropy_and_hits(logits: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
    let (b, c, sm) = softmax_rows(logits)?;
    check_labels(labels, b, c)?;
    let mut loss = 0.0;
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= sm.log_probs[i * c + y];
        let row = logits.row(i);
        let pred = (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best });
        hits += usize::from(pred == y);
    }
    Ok((loss / b as f64, hits))
}

fn er_value_and_grad(logits: &Tensor, h_min: f64, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let (b, c, sm) = softmax_rows(logits)?;
    let inv = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; b * c]);
    for i in 0..b {
        let p = &sm.probs[i * c..(i + 1) * c];
        let lp = &sm.log_probs[i * c..(i + 1) * c];
        let h: f64 = -p.iter().zip(lp).map(|(p, l)| p * l).sum::<f64>();
        if h < h_min {
            loss += h_min - h;
            if let Some(g) = grad.as_mut() {
                // d(-H)/dz_k = p_k (log p_k + H)
                for k in 0..c {
                    g[i * c + k] = p[k] * (lp[k] + h) * inv;
                }
            }
        }
    }
    let grad = grad.map(|g| Tensor::new(logits.shape().to_vec(), g)).transpose()?;
    Ok((loss * inv, grad))
}

/// Mean over the batch of `max(0, h_min - H(softmax(logits)))`, entropy in nats.
pub fn er_loss(logits: &Tensor, h_min: f64) -> Result<f64> {
    Ok(er_value_and_grad(logits, h_min, false)?.0)
}

/// `||w_round - w_local||²` over all parameters.
pub fn wd_loss(w_round: &ParamSet, w_local: &ParamSet) -> Result<f64> {
    w_round.squared_distance(w_local)
}

/// Gradient of [`wd_loss`] with respect to `w_local`: `2 (w_local - w_round)`.
pub fn wd_grad(w_round: &ParamSet, w_local: &ParamSet) -> Result<ParamSet> {
    let mut g = w_local.clone();
    g.axpy(-1.0, w_round)?;
    g.scale(2.0);
    Ok(g)
}

/// Result of evaluating the matching loss on one batch.
#[derive(Debug, Clone)]
pub struct MatchingEval {
    pub value: f64,
    /// Per matching layer, batch-mean squared reconstruction error.
    pub per_layer: Vec<f64>,
    pub decoder_traces: Vec<ForwardTrace>,
    /// Per matching layer, `reconstruction - target`.
    pub residuals: Vec<Tensor>,
}

/// `Σ_j ||f_j(a_{j+1}(x; w_local); θ_j) - a_j(x; w)||²`, batch mean. The
/// fixed-model activations are constants.
pub fn matching_loss(
    decoder: &MatchingDecoder,
    trace_trainable: &ForwardTrace,
    trace_fixed: &ForwardTrace,
    theta: &ParamSet,
) -> Result<MatchingEval> {
    let batch = trace_trainable.input.batch();
    if trace_fixed.input.batch() != batch || trace_fixed.outputs.len() != trace_trainable.outputs.len() {
        return Err(Error::invalid(
            "trainable and fixed traces come from different batches or graphs",
        ));
    }
    let mut value = 0.0;
    let mut per_layer = Vec::with_capacity(decoder.layers.len());
    let mut decoder_traces = Vec::with_capacity(decoder.layers.len());
    let mut residuals = Vec::with_capacity(decoder.layers.len());
    for (j, layer) in decoder.layers.iter().enumerate() {
        let src = layer.source.activation(trace_trainable);
        let target = layer.target.activation(trace_fixed);
        let ext = layer.switches(trace_trainable)?;
        let dtrace = forward_with(&layer.graph, decoder.theta_params(theta, j), src, &ext)?;
        let recon = dtrace.output();
        recon.ensure_shape(target.shape(), "matching reconstruction")?;
        let mut diff = recon.clone();
        diff.axpy(-1.0, target)?;
        let term = diff.sum_squares() / batch as f64;
        value += term;
        per_layer.push(term);
        residuals.push(diff);
        decoder_traces.push(dtrace);
    }
    Ok(MatchingEval {
        value,
        per_layer,
        decoder_traces,
        residuals,
    })
}

/// Gradients of the composite loss over `[w_local, θ]`.
#[derive(Debug, Clone)]
pub struct CompositeGrads {
    pub w: ParamSet,
    pub theta: ParamSet,
}

/// Composite client loss on one batch and its gradient with respect to both
/// the local model parameters and the matching parameters.
///
/// `total = CE + matching_coeff·matching + ER + wd_coeff·WD`, each term
/// included only when enabled.
pub fn total_loss_and_grads(
    arch: &ModelArch,
    decoder: &MatchingDecoder,
    x: &Tensor,
    labels: &[usize],
    w_local: &ParamSet,
    w_round: &ParamSet,
    theta: &ParamSet,
    config: &LossConfig,
) -> Result<(LossBreakdown, CompositeGrads)> {
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let graph = &arch.graph;
    let trace = forward(graph, w_local, x)?;
    let logits = trace.output();
    let (ce, mut out_grad) = cross_entropy(logits, labels)?;
    let mut parts = LossBreakdown {
        cross_entropy: ce,
        ..Default::default()
    };

    if config.use_er {
        let (er, g) = er_value_and_grad(logits, config.h_min, true)?;
        parts.er = er;
        out_grad.axpy(1.0, &g.expect("requested"))?;
    }

    let mut injections = vec![None; graph.layers().len()];
    let mut theta_grad = theta.zeros_like();
    if config.use_matching {
        let fixed = forward(graph, w_round, x)?;
        let m = matching_loss(decoder, &trace, &fixed, theta)?;
        parts.matching = m.value;
        let scale = 2.0 * config.matching_coeff / x.batch() as f64;
        for (j, layer) in decoder.layers.iter().enumerate() {
            let mut g_out = m.residuals[j].clone();
            g_out.scale(scale);
            let ext = layer.switches(&trace)?;
            let mut inner = vec![None; layer.graph.layers().len()];
            let g = backward_with(
                &layer.graph,
                decoder.theta_params(theta, j),
                &m.decoder_traces[j],
                Some(g_out),
                &mut inner,
                &ext,
                true,
            )?;
            let range = decoder.param_ranges[j].clone();
            for (dst, src) in theta_grad.tensors_mut()[range].iter_mut().zip(g.params) {
                *dst = src;
            }
            let Site::Layer(src_layer) = layer.source else {
                return Err(Error::invalid("matching source cannot be the input"));
            };
            let g_in = g.input.expect("requested");
            match injections[src_layer].as_mut() {
                Some(acc) => Tensor::axpy(acc, 1.0, &g_in)?,
                None => injections[src_layer] = Some(g_in),
            }
        }
    }

    let g = backward_with(
        graph,
        w_local.tensors(),
        &trace,
        Some(out_grad),
        &mut injections,
        &[],
        false,
    )?;
    let mut w_grad = w_local.zeros_like();
    for (dst, src) in w_grad.tensors_mut().iter_mut().zip(g.params) {
        *dst = src;
    }

    if config.use_wd {
        parts.wd = wd_loss(w_round, w_local)?;
        w_grad.axpy(config.wd_coeff, &wd_grad(w_round, w_local)?)?;
    }

    parts.total = parts.cross_entropy
        + if config.use_matching {
            config.matching_coeff * parts.matching
        } else {
            0.0
        }
        + parts.er
        + if config.use_wd { config.wd_coeff * parts.wd } else { 0.0 };
    Ok((
        parts,
        CompositeGrads {
            w: w_grad,
            theta: theta_grad,
        },
    ))
}
