"""Adam optimizer, the windowed training loop, and the ablation switchboard."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .concepts import MODALITIES
from .data import DatasetBundle, denormalize, normalized_arrays, window_starts
from .errors import ConfigError, GradientError, NonFiniteError, TrainingAbort
from .evaluation import MetricReport, metrics
from .losses import total_loss
from .model import CCHMM, ModelSpec, init_params

VARIANT_FLAGS = ("entangle", "no_scm", "linear_scm", "no_prior", "no_cond", "no_gcn", "no_gru")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    lam: float = 1.0
    alpha: float = 3.0
    latent_dim: int = 8
    history_steps: int = 6
    seed: int = 0
    clip_norm: float = 5.0
    entangle: bool = False
    no_scm: bool = False
    linear_scm: bool = False
    no_prior: bool = False
    no_cond: bool = False
    no_gcn: bool = False
    no_gru: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def active_variant(self) -> str | None:
        active = [f for f in VARIANT_FLAGS if getattr(self, f)]
        if len(active) > 1:
            raise ConfigError(f"conflicting variant flags: {active}")
        return active[0] if active else None


def apply_variant(config: TrainConfig, cond_dim: int) -> ModelSpec:
    """Translate a config's variant flag into the architecture switches."""
    variant = config.active_variant()
    return ModelSpec(
        cond_dim=cond_dim,
        latent_dim=config.latent_dim,
        alpha=config.alpha,
        use_prior=variant != "no_prior",
        use_scm=variant != "no_scm",
        use_gcn=variant != "no_gcn",
        use_gru=variant != "no_gru",
        use_cond=variant != "no_cond",
        linear_transform=variant == "linear_scm",
        entangled=variant == "entangle",
    )


class Adam:
    """Standard Adam with bias correction, acting in place on the params."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise GradientError(f"non-finite gradient for parameter '{name}'")
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def zero_grads(params: dict[str, ad.Tensor]) -> None:
    for p in params.values():
        p.grad = None


def clip_gradients(params: dict[str, ad.Tensor], max_norm: float) -> float:
    """Scale all gradients by min(1, max_norm / global_l2_norm); returns the norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    model: CCHMM                       # best validation-MAE parameters
    final_model: CCHMM
    history: list[dict] = field(default_factory=list)
    adjacency_history: list[np.ndarray] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")


def _snapshot(model: CCHMM) -> CCHMM:
    params = {
        name: ad.Tensor(p.data.copy(), requires_grad=True, name=name)
        for name, p in model.params.items()
    }
    return CCHMM(model.spec, params)


def _gather_batch(norm, starts, history):
    idx = starts[:, None] + np.arange(history)
    cond_w = norm["cond"][idx]
    obs_w = {m: norm[m][idx] for m in MODALITIES}
    cond_next = norm["cond"][starts + history]
    return cond_w, obs_w, cond_next


def _epoch_record(epoch, split, sums, weight, report: MetricReport) -> dict:
    agg = report.aggregate()
    rec = {"epoch": epoch, "split": split}
    rec.update({k: sums[k] / weight for k in
                ("recon_nll", "kl_eps", "kl_z", "pred_l2", "acyclicity", "total")})
    rec.update({"mae": agg["mae"], "rmse": agg["rmse"], "mape": agg["mape"]})
    rec["per_modality"] = report.per_modality
    return rec


def fit(bundle: DatasetBundle, config: TrainConfig, on_record=None) -> FitResult:
    """Train on the bundle's train split, tracking validation forecasts.

    Deterministic given the config seed: initialization, shuffling, and
    reparameterization noise come from separate child generators of it.
    Emits one record per split per epoch via ``on_record`` as it goes.
    """
    if bundle.timesteps == 0 or not MODALITIES or bundle.n_regions == 0:
        raise ConfigError("empty dataset")
    spec = apply_variant(config, bundle.cond_dim)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    model = CCHMM(spec, init_params(spec, np.random.default_rng(seeds[0])))
    rng_shuffle = np.random.default_rng(seeds[1])
    rng_noise = np.random.default_rng(seeds[2])

    norm = normalized_arrays(bundle)
    g_hat = ad.constant(bundle.operator())
    history = config.history_steps
    train_starts = window_starts(bundle, "train", history)
    val_starts = window_starts(bundle, "val", history)
    optimizer = Adam(model.params, lr=config.lr)

    result = FitResult(model=model, final_model=model)
    loss_keys = ("recon_nll", "kl_eps", "kl_z", "pred_l2", "acyclicity", "total")

    for epoch in range(config.epochs):
        order = rng_shuffle.permutation(len(train_starts))
        sums = dict.fromkeys(loss_keys, 0.0)
        weight = 0
        train_preds = {m: [] for m in MODALITIES}
        train_truth = {m: [] for m in MODALITIES}

        for batch_idx, ofs in enumerate(range(0, len(order), config.batch_size)):
            starts = train_starts[order[ofs:ofs + config.batch_size]]
            cond_w, obs_w, cond_next = _gather_batch(norm, starts, history)
            zero_grads(model.params)
            try:
                with ad.Tape() as tape:
                    ro = model.rollout(cond_w, obs_w, cond_next, g_hat,
                                       mode="train", rng=rng_noise)
                    loss, report = total_loss(ro, obs_w, model.adjacency(), config.lam)
                ad.backward(tape, loss)
                clip_gradients(model.params, config.clip_norm)
                optimizer.step()
            except (NonFiniteError, GradientError) as e:
                raise TrainingAbort(
                    f"non-finite training state at epoch {epoch} batch {batch_idx}: {e}",
                    epoch=epoch, batch=batch_idx,
                ) from e

            b = len(starts)
            weight += b
            for k in loss_keys:
                sums[k] += getattr(report, k) * b
            tail = starts + history
            for m in MODALITIES:
                train_preds[m].append(denormalize(ro.forecast[m].data, *bundle.stats[m]))
                train_truth[m].append(bundle.obs[m][tail])

        train_report = metrics(
            {m: np.concatenate(train_preds[m]) for m in MODALITIES},
            {m: np.concatenate(train_truth[m]) for m in MODALITIES},
        )
        rec = _epoch_record(epoch, "train", sums, weight, train_report)
        result.history.append(rec)
        if on_record:
            on_record(rec)

        val_sums = dict.fromkeys(loss_keys, 0.0)
        val_weight = 0
        val_preds = {m: [] for m in MODALITIES}
        val_truth = {m: [] for m in MODALITIES}
        for ofs in range(0, len(val_starts), 256):
            starts = val_starts[ofs:ofs + 256]
            cond_w, obs_w, cond_next = _gather_batch(norm, starts, history)
            ro = model.rollout(cond_w, obs_w, cond_next, g_hat, mode="eval")
            _, report = total_loss(ro, obs_w, model.adjacency(), config.lam)
            b = len(starts)
            val_weight += b
            for k in loss_keys:
                val_sums[k] += getattr(report, k) * b
            tail = starts + history
            for m in MODALITIES:
                val_preds[m].append(denormalize(ro.forecast[m].data, *bundle.stats[m]))
                val_truth[m].append(bundle.obs[m][tail])
        val_report = metrics(
            {m: np.concatenate(val_preds[m]) for m in MODALITIES},
            {m: np.concatenate(val_truth[m]) for m in MODALITIES},
        )
        rec = _epoch_record(epoch, "val", val_sums, val_weight, val_report)
        result.history.append(rec)
        if on_record:
            on_record(rec)

        result.adjacency_history.append(model.adjacency().data.copy())
        val_mae = val_report.aggregate()["mae"]
        if val_mae < result.best_val_mae:
            result.best_val_mae = val_mae
            result.best_epoch = epoch
            result.model = _snapshot(model)

    result.final_model = model
    return result
