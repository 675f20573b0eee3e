"""Training objective: reconstruction, KL regularizers, prediction loss,
and the acyclicity penalty on the concept graph.

Reductions are fixed throughout: sum over channels / concepts / latent
dimensions / steps, mean over regions and batch. With reduction order
pinned, loss values are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteError


@dataclass
class LossReport:
    recon_nll: float
    kl_eps: float
    kl_z: float
    pred_l2: float
    acyclicity: float
    total: float

    def to_dict(self) -> dict:
        return {
            "recon_nll": self.recon_nll,
            "kl_eps": self.kl_eps,
            "kl_z": self.kl_z,
            "pred_l2": self.pred_l2,
            "acyclicity": self.acyclicity,
            "total": self.total,
        }


def reparameterize(mean: ad.Tensor, logvar: ad.Tensor, noise: ad.Tensor) -> ad.Tensor:
    """mean + exp(logvar / 2) * noise."""
    std = ad.exp(ad.mul(logvar, ad.constant(0.5)))
    return ad.add(mean, ad.mul(std, noise))


def _channel_sum_region_mean(x: ad.Tensor, channel_axes: int = 1) -> ad.Tensor:
    """Sum the trailing ``channel_axes`` axes, then mean the leading ones."""
    axes = tuple(range(-channel_axes, 0))
    summed = ad.reduce_sum(x, axis=axes)
    if summed.ndim == 0:
        return summed
    return ad.reduce_mean(summed)


def gaussian_kl(q_mean: ad.Tensor, q_logvar: ad.Tensor,
                p_mean: ad.Tensor, p_logvar: ad.Tensor) -> ad.Tensor:
    """KL(q || p) for diagonal Gaussians given as (..., K, d) tensors.

    Summed over the last two axes, averaged over the leading ones.
    """
    diff = ad.sub(q_mean, p_mean)
    log_ratio = ad.sub(p_logvar, q_logvar)
    var_ratio = ad.exp(ad.sub(q_logvar, p_logvar))
    scaled_sq = ad.mul(ad.square(diff), ad.exp(ad.neg(p_logvar)))
    per_elem = ad.mul(
        ad.add(ad.add(log_ratio, var_ratio), ad.sub(scaled_sq, ad.constant(1.0))),
        ad.constant(0.5),
    )
    return _channel_sum_region_mean(per_elem, channel_axes=min(2, per_elem.ndim))


def recon_loss(prediction, truth) -> ad.Tensor:
    """Unit-variance Gaussian negative log-likelihood, constants dropped:
    0.5 * squared error summed over channels, averaged over regions.

    Accepts a single tensor pair or dicts keyed by modality (summed).
    """
    if isinstance(prediction, dict):
        total = None
        for m in prediction:
            term = recon_loss(prediction[m], truth[m])
            total = term if total is None else ad.add(total, term)
        return total
    err = ad.mul(ad.squared_error(prediction, truth), ad.constant(0.5))
    return _channel_sum_region_mean(err)


def pred_loss(predictions, truths) -> ad.Tensor:
    """Squared-error prediction loss summed over steps and modalities,
    averaged over regions and batch. Accepts sequences of per-step values."""
    if not isinstance(predictions, (list, tuple)):
        predictions, truths = [predictions], [truths]
    total = None
    for pred_t, truth_t in zip(predictions, truths):
        if isinstance(pred_t, dict):
            for m in pred_t:
                term = _channel_sum_region_mean(ad.squared_error(pred_t[m], truth_t[m]))
                total = term if total is None else ad.add(total, term)
        else:
            term = _channel_sum_region_mean(ad.squared_error(pred_t, truth_t))
            total = term if total is None else ad.add(total, term)
    return total


def acyclicity(a_tilde: ad.Tensor) -> ad.Tensor:
    """trace((I + A o A)^k) - k; zero exactly when the weighted graph is a DAG."""
    k = a_tilde.shape[0]
    base = ad.add(ad.constant(np.eye(k)), ad.square(a_tilde))
    return ad.sub(ad.trace(ad.matrix_power(base, k)), ad.constant(float(k)))


def total_loss(rollout, obs_window: dict[str, np.ndarray], a_tilde: ad.Tensor,
               lam: float) -> tuple[ad.Tensor, LossReport]:
    """Assemble the full objective over one window (or batch of windows).

    ``obs_window`` maps modality -> (..., T, N, c) arrays aligned with the
    rollout steps. Returns the differentiable total plus a float report.
    """
    steps = len(rollout.recon)
    truth_steps = []
    for t in range(steps):
        truth_steps.append(
            {m: ad.constant(obs_window[m][..., t, :, :]) for m in obs_window}
        )

    recon = None
    for t in range(steps):
        term = recon_loss(rollout.recon[t], truth_steps[t])
        recon = term if recon is None else ad.add(recon, term)

    if rollout.eps_prior is not None:
        kl_eps = None
        kl_z = None
        for t in range(steps):
            qm, qlv = rollout.eps_post[t]
            pm, plv = rollout.eps_prior[t]
            term = gaussian_kl(qm, qlv, pm, plv)
            kl_eps = term if kl_eps is None else ad.add(kl_eps, term)
            qm, qlv = rollout.z_post[t]
            pm, plv = rollout.z_prior[t]
            term = gaussian_kl(qm, qlv, pm, plv)
            kl_z = term if kl_z is None else ad.add(kl_z, term)
    else:
        kl_eps = ad.constant(0.0)
        kl_z = ad.constant(0.0)

    prediction = pred_loss(rollout.pred, truth_steps)
    acyc = acyclicity(a_tilde)

    total = ad.add(ad.add(ad.add(recon, kl_eps), ad.add(kl_z, prediction)),
                   ad.mul(acyc, ad.constant(float(lam))))

    components = {
        "recon_nll": recon.item(),
        "kl_eps": kl_eps.item(),
        "kl_z": kl_z.item(),
        "pred_l2": prediction.item(),
        "acyclicity": acyc.item(),
        "total": total.item(),
    }
    for name, value in components.items():
        if not np.isfinite(value):
            raise NonFiniteError(f"loss component '{name}' is non-finite: {value}")
    return total, LossReport(**components)
