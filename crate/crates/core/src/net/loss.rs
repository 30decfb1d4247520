//! The variational training objective: data cross-entropy plus a KL pull of
//! the weight posterior toward its Gaussian prior.

use crate::tensor::{Tensor, TensorId, Trace};

use super::{BoundModel, Layer, ModelError, NoiseVector, ParamRole, StochasticModel};

fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn kl_closed_form(mu: &Tensor, rho: &Tensor, prior_sigma: f64) -> f64 {
    let mus = mu.to_f64_vec();
    let rhos = rho.to_f64_vec();
    let mut total = 0.0;
    for (m, r) in mus.iter().zip(&rhos) {
        let sigma = softplus_f64(*r);
        total += (prior_sigma / sigma).ln() + (sigma * sigma + m * m) / (2.0 * prior_sigma * prior_sigma)
            - 0.5;
    }
    total
}

/// Closed-form KL(posterior || prior) summed over every weight and bias
/// entry of the layer, for a prior N(0, prior_sigma^2 I). Always >= 0 and
/// zero exactly when the posterior equals the prior.
pub fn kl_to_prior(layer: &super::GaussianVariationalLayer) -> Result<f64, ModelError> {
    if layer.prior_sigma <= 0.0 {
        return Err(ModelError::NonPositivePrior(layer.prior_sigma));
    }
    Ok(kl_closed_form(&layer.mu_w, &layer.rho_w, layer.prior_sigma)
        + kl_closed_form(&layer.mu_b, &layer.rho_b, layer.prior_sigma))
}

/// KL of one (mu, rho) parameter pair, recorded on the trace so it is
/// differentiable with respect to both tensors.
fn kl_on(
    trace: &mut Trace,
    mu: TensorId,
    rho: TensorId,
    prior_sigma: f64,
) -> Result<TensorId, ModelError> {
    let sigma = trace.softplus(rho)?;
    let neg_log_sigma = {
        let l = trace.log(sigma)?;
        trace.scale(l, -1.0)?
    };
    let log_ratio = trace.offset(neg_log_sigma, prior_sigma.ln())?;
    let sigma_sq = trace.mul(sigma, sigma)?;
    let mu_sq = trace.mul(mu, mu)?;
    let quad = {
        let s = trace.add(sigma_sq, mu_sq)?;
        trace.scale(s, 1.0 / (2.0 * prior_sigma * prior_sigma))?
    };
    let elem = {
        let s = trace.add(log_ratio, quad)?;
        trace.offset(s, -0.5)?
    };
    Ok(trace.sum(elem)?)
}

/// Records the variational loss on `trace`:
///
/// ```text
/// mean cross-entropy(batch at eps) + kl_weight * sum_layers KL / dataset_size
/// ```
///
/// With `kl_weight = 0` (or a deterministic model) the node is exactly the
/// mean cross-entropy. Differentiable with respect to whatever `bound`
/// marked, including the input leaf.
#[allow(clippy::too_many_arguments)]
pub fn variational_loss_on(
    trace: &mut Trace,
    model: &StochasticModel,
    bound: &BoundModel,
    x: TensorId,
    labels: &[usize],
    eps: &NoiseVector,
    kl_weight: f64,
    dataset_size: usize,
) -> Result<TensorId, ModelError> {
    assert!(kl_weight >= 0.0, "kl_weight must be non-negative");
    assert!(dataset_size >= 1, "dataset_size must be at least 1");
    if labels.is_empty() || trace.value(x).shape()[0] == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let logits = model.logits_on(trace, bound, x, eps)?;
    let ce = trace.cross_entropy_logits(logits, labels)?;
    let data_term = trace.mean(ce)?;
    if kl_weight == 0.0 || !model.is_stochastic() {
        return Ok(data_term);
    }
    let mut kl_total: Option<TensorId> = None;
    for (i, layer) in model.layers().iter().enumerate() {
        if let Layer::Variational(v) = layer {
            let kl_w = kl_on(
                trace,
                bound.get(i, ParamRole::MuW),
                bound.get(i, ParamRole::RhoW),
                v.prior_sigma,
            )?;
            let kl_b = kl_on(
                trace,
                bound.get(i, ParamRole::MuB),
                bound.get(i, ParamRole::RhoB),
                v.prior_sigma,
            )?;
            let layer_kl = trace.add(kl_w, kl_b)?;
            kl_total = Some(match kl_total {
                None => layer_kl,
                Some(acc) => trace.add(acc, layer_kl)?,
            });
        }
    }
    let kl_total = kl_total.expect("stochastic model has variational layers");
    let scaled = trace.scale(kl_total, kl_weight / dataset_size as f64)?;
    Ok(trace.add(data_term, scaled)?)
}

/// Loss value on a fresh trace, without gradients.
pub fn variational_loss_value(
    model: &StochasticModel,
    x: &Tensor,
    labels: &[usize],
    eps: &NoiseVector,
    kl_weight: f64,
    dataset_size: usize,
) -> Result<f64, ModelError> {
    let mut trace = Trace::new();
    let x_id = trace.constant(x.clone());
    let bound = model.bind(&mut trace, false);
    let loss = variational_loss_on(
        &mut trace,
        model,
        &bound,
        x_id,
        labels,
        eps,
        kl_weight,
        dataset_size,
    )?;
    Ok(trace.value(loss).scalar_value()?)
}
