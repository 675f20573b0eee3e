"""The causal conditional hidden Markov model.

Five concept latents per region (attraction, bike demand, taxi demand, bus
demand, speed) evolve through per-concept graph-gated recurrent cells. A
shared causal propagation module turns independent exogenous features into
causally related endogenous ones through a learnable concept graph, and a
globally shared generator maps each concept slot to its modality's
observation channels. The posterior side reads conditions plus observations;
the prior side reads conditions only and carries the forecasting path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .concepts import CONCEPTS, MODALITIES, OBS_CHANNELS, TOTAL_OBS_CHANNELS
from .container import dump_json, load_arrays, read_json, save_arrays
from .errors import BundleFormatError, ShapeError, SingularMatrixError, ValidationError
from .graph import graph_conv
from .losses import reparameterize

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class ModelSpec:
    """Architecture switches; the all-defaults instance is the full model."""

    cond_dim: int
    latent_dim: int = 8
    alpha: float = 3.0
    use_prior: bool = True
    use_scm: bool = True
    use_gcn: bool = True
    use_gru: bool = True
    use_cond: bool = True
    linear_transform: bool = False
    entangled: bool = False

    @property
    def concepts(self) -> tuple[str, ...]:
        return ("all",) if self.entangled else CONCEPTS

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def slot_of(self, modality: str) -> int:
        return 0 if self.entangled else CONCEPTS.index(modality)

    def posterior_obs_channels(self, concept: str) -> int:
        # the attraction concept has no observation of its own; it reads the
        # concatenation of every modality as evidence of total activity
        if concept in ("poi", "all"):
            return TOTAL_OBS_CHANNELS
        return OBS_CHANNELS[concept]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    s = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-s, s, size=shape)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> dict[str, ad.Tensor]:
    """Build the full parameter dictionary in a fixed, seed-stable order."""
    d = spec.latent_dim
    params: dict[str, ad.Tensor] = {}

    def dense(name: str, fan_in: int, fan_out: int) -> None:
        params[f"{name}.w"] = ad.Tensor(
            _uniform(rng, fan_in, (fan_in, fan_out)), requires_grad=True, name=f"{name}.w"
        )
        params[f"{name}.b"] = ad.Tensor(
            np.zeros(fan_out), requires_grad=True, name=f"{name}.b"
        )

    sides = ["posterior"] + (["prior"] if spec.use_prior else [])
    for side in sides:
        for concept in spec.concepts:
            in_dim = (spec.cond_dim if spec.use_cond else 0) + (
                spec.posterior_obs_channels(concept) if side == "posterior" else 0
            )
            dense(f"{side}.{concept}.input", in_dim, d)
            if spec.use_gru:
                for gate in ("reset", "update", "cand"):
                    dense(f"{side}.{concept}.{gate}", 2 * d, d)
            else:
                dense(f"{side}.{concept}.cand", d, d)
            for role in ("eps", "z"):
                dense(f"{side}.{concept}.{role}_mean", d, d)
                dense(f"{side}.{concept}.{role}_logvar", d, d)

    k = spec.n_concepts
    w_a = np.full((k, k), -1.0)
    iu = np.triu_indices(k, 1)
    w_a[iu] = rng.standard_normal(len(iu[0]))
    params["shared.causal_graph"] = ad.Tensor(w_a, requires_grad=True, name="shared.causal_graph")

    for concept in spec.concepts:
        if spec.linear_transform:
            dense(f"shared.transform.{concept}", d, d)
        else:
            dense(f"shared.transform.{concept}.l1", d, d)
            dense(f"shared.transform.{concept}.l2", d, d)

    if spec.use_prior:
        params["shared.attention"] = ad.Tensor(
            _uniform(rng, d, (d, d)), requires_grad=True, name="shared.attention"
        )

    for m in MODALITIES:
        dense(f"generator.{m}.hidden", d, d)
        dense(f"generator.{m}.out", d, OBS_CHANNELS[m])

    if not spec.use_prior:
        for m in MODALITIES:
            dense(f"pred.{m}", k * d, OBS_CHANNELS[m])
    return params


# ---------------------------------------------------------------------------
# module-level pieces, reusable outside the full model


# largest double below 1: keeps graph entries strictly inside [0, 1) even
# where tanh rounds to 1.0; the tanh gradient is exactly zero there anyway
_ADJ_CEIL = np.nextafter(1.0, 0.0)


def causal_adjacency(w_a: ad.Tensor, alpha: float) -> ad.Tensor:
    """relu(tanh(alpha * w_a)) with a forced-zero diagonal; entries in [0, 1)."""
    if alpha <= 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    k = w_a.shape[0]
    raw = ad.relu(ad.tanh(ad.mul(w_a, ad.constant(float(alpha)))))
    return ad.mul(ad.clamp(raw, 0.0, _ADJ_CEIL), ad.constant(1.0 - np.eye(k)))


def causal_propagate(a_tilde: ad.Tensor, eps: ad.Tensor) -> ad.Tensor:
    """Solve h = eps + A^T-routed parents, i.e. (I - A^T) h = eps.

    ``eps`` has shape (..., K, d); the solve runs jointly over all leading
    axes and latent dimensions without forming the inverse.
    """
    k = a_tilde.shape[0]
    if eps.shape[-2] != k:
        raise ShapeError(f"causal_propagate: eps {eps.shape} vs graph {a_tilde.shape}")
    system = ad.sub(ad.constant(np.eye(k)), ad.swap_last_axes(a_tilde))
    moved = ad.moveaxis(eps, -2, 0)
    flat = ad.reshape(moved, (k, eps.size // k))
    try:
        solved = ad.solve_small(system, flat)
    except SingularMatrixError as e:
        raise SingularMatrixError(
            f"causal graph near-cyclic with unit gain: {e}", pivot=e.pivot
        ) from e
    return ad.moveaxis(ad.reshape(solved, moved.shape), 0, -2)


def attention_fuse(z_post_prev: ad.Tensor, z_prior: ad.Tensor, w_att: ad.Tensor) -> ad.Tensor:
    """Weight current prior concept latents by their affinity to the previous
    posterior state: softmax(z_prev W z_prior^T) z_prior, per region."""
    scores = ad.matmul(ad.matmul(z_post_prev, w_att), ad.swap_last_axes(z_prior))
    return ad.matmul(ad.softmax(scores, axis=-1), z_prior)


def _affine(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(x, w), b)


@dataclass
class StepResult:
    """Distributions and sample produced by one inference step, all (..., K, d)."""

    eps_mean: ad.Tensor
    eps_logvar: ad.Tensor
    z_mean: ad.Tensor
    z_logvar: ad.Tensor
    z_sample: ad.Tensor


@dataclass
class Rollout:
    """Everything a training step or evaluation needs from one window pass."""

    recon: list[dict[str, ad.Tensor]]
    pred: list[dict[str, ad.Tensor]] | None
    eps_post: list[tuple[ad.Tensor, ad.Tensor]]
    z_post: list[tuple[ad.Tensor, ad.Tensor]]
    eps_prior: list[tuple[ad.Tensor, ad.Tensor]] | None
    z_prior: list[tuple[ad.Tensor, ad.Tensor]] | None
    z_samples: list[ad.Tensor]
    forecast: dict[str, ad.Tensor]


class CCHMM:
    """Model parameters plus the inference/generation procedures."""

    def __init__(self, spec: ModelSpec, params: dict[str, ad.Tensor]):
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: ModelSpec, seed: int) -> "CCHMM":
        return cls(spec, init_params(spec, np.random.default_rng(seed)))

    # -- small helpers ------------------------------------------------------

    def _p(self, name: str) -> ad.Tensor:
        return self.params[name]

    def adjacency(self) -> ad.Tensor:
        return causal_adjacency(self._p("shared.causal_graph"), self.spec.alpha)

    def _graph_op(self, g_hat: ad.Tensor, n: int) -> ad.Tensor:
        if self.spec.use_gcn:
            return g_hat
        return ad.constant(np.eye(n))

    def _posterior_obs(self, concept: str, x_t: dict[str, ad.Tensor]) -> ad.Tensor:
        if concept in ("poi", "all"):
            missing = [m for m in MODALITIES if m not in x_t]
            if missing:
                raise ValidationError(f"posterior step missing observations: {missing}")
            return ad.concat([x_t[m] for m in MODALITIES], axis=-1)
        if concept not in x_t:
            raise ValidationError(f"posterior step missing observation for '{concept}'")
        return x_t[concept]

    def graphgru_step(self, side: str, concept: str, c_t: ad.Tensor | None,
                      obs: ad.Tensor | None, z_prev_i: ad.Tensor,
                      g_hat: ad.Tensor) -> ad.Tensor:
        """One gated recurrence for one concept; returns the exogenous feature."""
        parts = []
        if self.spec.use_cond and c_t is not None:
            parts.append(c_t)
        if obs is not None:
            parts.append(obs)
        if parts:
            inp = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
        else:
            inp = ad.constant(np.zeros(z_prev_i.shape[:-1] + (0,)))
        s = _affine(inp, self._p(f"{side}.{concept}.input.w"), self._p(f"{side}.{concept}.input.b"))
        g_op = self._graph_op(g_hat, z_prev_i.shape[-2])
        if not self.spec.use_gru:
            return graph_conv(
                g_op, s, self._p(f"{side}.{concept}.cand.w"), self._p(f"{side}.{concept}.cand.b")
            )
        sz = ad.concat([s, z_prev_i], axis=-1)
        r = ad.sigmoid(graph_conv(
            g_op, sz, self._p(f"{side}.{concept}.reset.w"), self._p(f"{side}.{concept}.reset.b")))
        u = ad.sigmoid(graph_conv(
            g_op, sz, self._p(f"{side}.{concept}.update.w"), self._p(f"{side}.{concept}.update.b")))
        gated = ad.concat([s, ad.mul(r, z_prev_i)], axis=-1)
        cand = ad.tanh(graph_conv(
            g_op, gated, self._p(f"{side}.{concept}.cand.w"), self._p(f"{side}.{concept}.cand.b")))
        keep = ad.mul(u, z_prev_i)
        update = ad.mul(ad.sub(ad.constant(1.0), u), cand)
        return ad.add(keep, update)

    def gaussian_head(self, side: str, concept: str, role: str,
                      h: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        mean = _affine(h, self._p(f"{side}.{concept}.{role}_mean.w"),
                       self._p(f"{side}.{concept}.{role}_mean.b"))
        logvar = ad.clamp(
            _affine(h, self._p(f"{side}.{concept}.{role}_logvar.w"),
                    self._p(f"{side}.{concept}.{role}_logvar.b")),
            LOGVAR_MIN, LOGVAR_MAX,
        )
        return mean, logvar

    def concept_transform(self, h: ad.Tensor) -> list[ad.Tensor]:
        """Shared per-concept nonlinear map applied to each slot of (..., K, d)."""
        outs = []
        for i, concept in enumerate(self.spec.concepts):
            hi = ad.take_slot(h, -2, i)
            if self.spec.linear_transform:
                outs.append(_affine(hi, self._p(f"shared.transform.{concept}.w"),
                                    self._p(f"shared.transform.{concept}.b")))
            else:
                inner = ad.tanh(_affine(hi, self._p(f"shared.transform.{concept}.l1.w"),
                                        self._p(f"shared.transform.{concept}.l1.b")))
                outs.append(_affine(inner, self._p(f"shared.transform.{concept}.l2.w"),
                                    self._p(f"shared.transform.{concept}.l2.b")))
        return outs

    # -- inference steps ----------------------------------------------------

    def _step(self, side: str, c_t: ad.Tensor | None, x_t: dict[str, ad.Tensor] | None,
              z_prev: ad.Tensor, g_hat: ad.Tensor, a_tilde: ad.Tensor,
              noise: tuple[np.ndarray, np.ndarray] | None) -> StepResult:
        eps_means, eps_logvars = [], []
        for i, concept in enumerate(self.spec.concepts):
            obs = self._posterior_obs(concept, x_t) if side == "posterior" else None
            z_prev_i = ad.take_slot(z_prev, -2, i)
            feat = self.graphgru_step(side, concept, c_t, obs, z_prev_i, g_hat)
            m, lv = self.gaussian_head(side, concept, "eps", feat)
            eps_means.append(m)
            eps_logvars.append(lv)
        eps_mean = ad.stack(eps_means, axis=-2)
        eps_logvar = ad.stack(eps_logvars, axis=-2)
        if noise is None:
            eps_sample = eps_mean
        else:
            eps_sample = reparameterize(eps_mean, eps_logvar, ad.constant(noise[0]))

        h = causal_propagate(a_tilde, eps_sample) if self.spec.use_scm else eps_sample
        z_means, z_logvars = [], []
        for concept, feat in zip(self.spec.concepts, self.concept_transform(h)):
            m, lv = self.gaussian_head(side, concept, "z", feat)
            z_means.append(m)
            z_logvars.append(lv)
        z_mean = ad.stack(z_means, axis=-2)
        z_logvar = ad.stack(z_logvars, axis=-2)
        if noise is None:
            z_sample = z_mean
        else:
            z_sample = reparameterize(z_mean, z_logvar, ad.constant(noise[1]))
        return StepResult(eps_mean, eps_logvar, z_mean, z_logvar, z_sample)

    def posterior_step(self, c_t, x_t, z_prev, g_hat, noise=None) -> StepResult:
        return self._step("posterior", c_t, x_t, z_prev, g_hat, self.adjacency(), noise)

    def prior_step(self, c_t, z_prev, g_hat, noise=None) -> StepResult:
        return self._step("prior", c_t, None, z_prev, g_hat, self.adjacency(), noise)

    # -- generation ---------------------------------------------------------

    def generate(self, z: ad.Tensor) -> dict[str, ad.Tensor]:
        """Decode each modality from its own concept slot."""
        out = {}
        for m in MODALITIES:
            zi = ad.take_slot(z, -2, self.spec.slot_of(m))
            hidden = ad.tanh(_affine(zi, self._p(f"generator.{m}.hidden.w"),
                                     self._p(f"generator.{m}.hidden.b")))
            out[m] = _affine(hidden, self._p(f"generator.{m}.out.w"),
                             self._p(f"generator.{m}.out.b"))
        return out

    def _pred_head(self, z: ad.Tensor) -> dict[str, ad.Tensor]:
        flat = ad.reshape(z, z.shape[:-2] + (z.shape[-2] * z.shape[-1],))
        return {
            m: _affine(flat, self._p(f"pred.{m}.w"), self._p(f"pred.{m}.b"))
            for m in MODALITIES
        }

    # -- full window pass ----------------------------------------------------

    def init_state(self, lead: tuple[int, ...]) -> ad.Tensor:
        return ad.constant(np.zeros(lead + (self.spec.n_concepts, self.spec.latent_dim)))

    def rollout(self, cond: np.ndarray, obs: dict[str, np.ndarray],
                cond_next: np.ndarray, g_hat: ad.Tensor, mode: str = "train",
                rng: np.random.Generator | None = None) -> Rollout:
        """Run the model over a window and produce the one-step forecast.

        ``cond`` is (..., T, N, c_c); each obs entry is (..., T, N, c_m);
        ``cond_next`` is (..., N, c_c). In train mode both inference paths
        draw reparameterized samples from ``rng``; eval mode uses means.
        """
        if mode not in ("train", "eval"):
            raise ValidationError(f"rollout mode must be train or eval, got '{mode}'")
        if mode == "train" and rng is None:
            raise ValidationError("train-mode rollout requires an rng for sampling")
        steps = cond.shape[-3]
        if steps < 1:
            raise ValidationError("rollout needs at least one history step")
        lead = cond.shape[:-3] + cond.shape[-2:-1]
        k, d = self.spec.n_concepts, self.spec.latent_dim

        def draw():
            if mode == "eval":
                return None
            return (rng.standard_normal(lead + (k, d)), rng.standard_normal(lead + (k, d)))

        use_prior = self.spec.use_prior
        recon, pred = [], []
        eps_post, z_post = [], []
        eps_prior = [] if use_prior else None
        z_prior = [] if use_prior else None
        z_samples = []
        z_prev = self.init_state(lead)

        for t in range(steps):
            c_t = ad.constant(cond[..., t, :, :])
            x_t = {m: ad.constant(obs[m][..., t, :, :]) for m in MODALITIES}

            post = self.posterior_step(c_t, x_t, z_prev, g_hat, noise=draw())
            eps_post.append((post.eps_mean, post.eps_logvar))
            z_post.append((post.z_mean, post.z_logvar))
            recon.append(self.generate(post.z_sample))

            if use_prior:
                prior = self.prior_step(c_t, z_prev, g_hat, noise=draw())
                eps_prior.append((prior.eps_mean, prior.eps_logvar))
                z_prior.append((prior.z_mean, prior.z_logvar))
                fused = attention_fuse(z_prev, prior.z_sample, self._p("shared.attention"))
                pred.append(self.generate(fused))
            else:
                pred.append(self._pred_head(z_prev))

            z_samples.append(post.z_sample)
            z_prev = post.z_sample

        c_next = ad.constant(cond_next)
        if use_prior:
            prior = self.prior_step(c_next, z_prev, g_hat, noise=draw())
            fused = attention_fuse(z_prev, prior.z_sample, self._p("shared.attention"))
            forecast = self.generate(fused)
        else:
            forecast = self._pred_head(z_prev)

        return Rollout(recon, pred, eps_post, z_post, eps_prior, z_prior,
                       z_samples, forecast)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory: str, model: CCHMM) -> None:
    os.makedirs(directory, exist_ok=True)
    save_arrays(directory, {name: t.data for name, t in model.params.items()})
    manifest = {
        "format": "cchmm-checkpoint",
        "model": model.spec.to_dict(),
        "params": {name: name for name in model.params},
    }
    dump_json(os.path.join(directory, "manifest.json"), manifest)


def load_checkpoint(directory: str) -> CCHMM:
    manifest = read_json(os.path.join(directory, "manifest.json"))
    if manifest.get("format") != "cchmm-checkpoint":
        raise BundleFormatError(f"{directory} is not a checkpoint directory")
    arrays = load_arrays(directory)
    spec = ModelSpec.from_dict(manifest["model"])
    params = {}
    for name, array_name in manifest["params"].items():
        if array_name not in arrays:
            raise BundleFormatError(f"checkpoint missing array '{array_name}'")
        params[name] = ad.Tensor(arrays[array_name], requires_grad=True, name=name)
    return CCHMM(spec, params)
