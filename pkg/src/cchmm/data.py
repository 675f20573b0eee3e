"""Synthetic scenario generation, dataset container IO, normalization,
and history/target windowing.

The generator owns a known ground-truth concept graph: regional attraction
drives the three demand factors, taxi demand drives the congestion factor
that depresses observed speed, and weather shifts bike demand down and taxi
demand up. That gives training runs a recoverable causal structure and the
evaluation suite an exact reference to score against.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .concepts import CONCEPTS, MODALITIES, N_CONCEPTS, OBS_CHANNELS
from .container import dump_json, load_arrays, read_json, save_arrays
from .errors import BundleFormatError, ConfigError, ValidationError
from .graph import normalize_adjacency

SPLIT_FRACTIONS = {"train": 0.6, "val": 0.2, "test": 0.2}
STD_FLOOR = 1e-8

# concept order: poi, bike, taxi, bus, v
DEFAULT_CAUSAL_WEIGHTS = [
    [0.0, 0.9, 0.8, 0.7, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.9],
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0],
]

# per-concept state persistence and innovation scale
_RHO = np.array([0.85, 0.7, 0.7, 0.7, 0.8])
_INNOVATION_STD = np.array([0.5, 0.25, 0.25, 0.25, 0.05])

_BURN_IN_DAYS = 2


@dataclass
class ScenarioConfig:
    n_rows: int = 5
    n_cols: int = 4
    timesteps: int = 2000
    steps_per_day: int = 48
    poi_dim: int = 8
    time_dim: int = 4
    weather_dim: int = 3
    emission_noise: float = 1.0
    seed: int = 7
    causal_weights: list = field(default_factory=lambda: [row[:] for row in DEFAULT_CAUSAL_WEIGHTS])
    weather_bike: float = -0.9
    weather_taxi: float = 0.7
    weather_speed: float = 0.25
    grid_sigma: float = 1.0
    edge_threshold: float = 0.1

    @property
    def n_regions(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def cond_dim(self) -> int:
        return self.poi_dim + self.time_dim + self.weather_dim

    def validate(self) -> None:
        if self.n_rows < 1 or self.n_cols < 1:
            raise ConfigError(f"grid {self.n_rows}x{self.n_cols} is empty")
        if self.timesteps < self.steps_per_day:
            raise ConfigError("timesteps must cover at least one day")
        if self.poi_dim < 1:
            raise ConfigError("poi_dim must be positive")
        if self.time_dim != 4:
            raise ConfigError("time encoding is day+week sin/cos pairs; time_dim must be 4")
        if self.weather_dim < 1:
            raise ConfigError("weather_dim must be positive")
        if self.emission_noise < 0:
            raise ConfigError("emission_noise must be nonnegative")
        a = np.asarray(self.causal_weights, dtype=np.float64)
        if a.shape != (N_CONCEPTS, N_CONCEPTS):
            raise ConfigError(f"causal_weights must be {N_CONCEPTS}x{N_CONCEPTS}, got {a.shape}")
        if np.any(np.tril(a) != 0):
            raise ConfigError("causal_weights must be strictly upper triangular in concept order")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetBundle:
    cond: np.ndarray                      # (T, N, c_c)
    obs: dict[str, np.ndarray]            # modality -> (T, N, c_m)
    adjacency: np.ndarray                 # (N, N) raw symmetric weights
    stats: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (mean, std) per channel
    splits: dict[str, tuple[int, int]]
    steps_per_day: int
    ground_truth: np.ndarray | None = None

    @property
    def n_regions(self) -> int:
        return self.cond.shape[1]

    @property
    def timesteps(self) -> int:
        return self.cond.shape[0]

    @property
    def cond_dim(self) -> int:
        return self.cond.shape[2]

    def operator(self) -> np.ndarray:
        return normalize_adjacency(self.adjacency)


# ---------------------------------------------------------------------------
# generation


def _region_grid_adjacency(cfg: ScenarioConfig) -> np.ndarray:
    rows = np.arange(cfg.n_regions) // cfg.n_cols
    cols = np.arange(cfg.n_regions) % cfg.n_cols
    d2 = (rows[:, None] - rows[None, :]) ** 2 + (cols[:, None] - cols[None, :]) ** 2
    g = np.exp(-d2 / cfg.grid_sigma**2)
    g[g < cfg.edge_threshold] = 0.0
    np.fill_diagonal(g, 0.0)
    return g


def _time_features(total_steps: int, steps_per_day: int) -> np.ndarray:
    t = np.arange(total_steps)
    day = 2 * np.pi * (t % steps_per_day) / steps_per_day
    week_len = 7 * steps_per_day
    week = 2 * np.pi * (t % week_len) / week_len
    return np.stack([np.sin(day), np.cos(day), np.sin(week), np.cos(week)], axis=1)


def _weather(total_steps: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((total_steps, dim))
    for j in range(dim - 1):
        coef, scale = (0.95, 0.15) if j == 0 else (0.9, 0.2)
        for t in range(1, total_steps):
            out[t, j] = coef * out[t - 1, j] + scale * rng.standard_normal()
    # last channel: precipitation bursts (two-state process with intensities)
    wet = False
    for t in range(total_steps):
        if wet:
            if rng.uniform() < 0.08:
                wet = False
        else:
            if rng.uniform() < 0.02:
                wet = True
        out[t, dim - 1] = abs(rng.normal(1.0, 0.3)) if wet else 0.0
    return out


def _poi_vectors(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    poi = np.zeros((cfg.n_regions, cfg.poi_dim))
    for i in range(cfg.n_regions):
        n_active = int(rng.integers(2, min(4, cfg.poi_dim) + 1))
        idx = rng.choice(cfg.poi_dim, size=n_active, replace=False)
        poi[i, idx] = np.abs(rng.normal(1.0, 0.4, size=n_active))
    return poi


def _condition_drive(cfg: ScenarioConfig) -> np.ndarray:
    """Map condition features to per-concept drives (K x c_c)."""
    b = np.zeros((N_CONCEPTS, cfg.cond_dim))
    poi_w = 0.6 * 0.75 ** np.arange(cfg.poi_dim)
    t0 = cfg.poi_dim                      # day sin, day cos, week sin, week cos
    w_precip = cfg.poi_dim + cfg.time_dim + cfg.weather_dim - 1
    b[0, :cfg.poi_dim] = poi_w            # attraction from regional amenities
    b[0, t0] = 0.9
    b[0, t0 + 1] = -0.4
    b[0, t0 + 2] = 0.15
    b[1, t0] = 0.2
    b[1, w_precip] = cfg.weather_bike
    b[2, w_precip] = cfg.weather_taxi
    b[3, t0 + 1] = 0.25
    b[4, w_precip] = cfg.weather_speed
    return b


def synth_generate(cfg: ScenarioConfig) -> DatasetBundle:
    """Generate a bundle whose observations follow the known concept graph."""
    cfg.validate()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_static = np.random.default_rng(seeds[0])
    rng_latent = np.random.default_rng(seeds[1])
    rng_emit = np.random.default_rng(seeds[2])
    n, t_out = cfg.n_regions, cfg.timesteps
    burn = _BURN_IN_DAYS * cfg.steps_per_day
    total = t_out + burn

    g = _region_grid_adjacency(cfg)
    g_hat = normalize_adjacency(g)
    poi = _poi_vectors(cfg, rng_static)
    times = _time_features(total, cfg.steps_per_day)
    weather = _weather(total, cfg.weather_dim, rng_static)

    cond = np.concatenate(
        [
            np.broadcast_to(poi[None, :, :], (total, n, cfg.poi_dim)),
            np.broadcast_to(times[:, None, :], (total, n, cfg.time_dim)),
            np.broadcast_to(weather[:, None, :], (total, n, cfg.weather_dim)),
        ],
        axis=2,
    ).copy()

    a_true = np.asarray(cfg.causal_weights, dtype=np.float64)
    system = np.eye(N_CONCEPTS) - a_true.T
    b_drive = _condition_drive(cfg)

    z = np.zeros((total, n, N_CONCEPTS))
    state = np.zeros((n, N_CONCEPTS))
    for t in range(total):
        drive = cond[t] @ b_drive.T
        shock = rng_latent.standard_normal((n, N_CONCEPTS)) * _INNOVATION_STD
        routed = np.linalg.solve(system, (drive + shock).T).T
        state = _RHO * state + routed
        z[t] = state

    noise = cfg.emission_noise
    obs: dict[str, np.ndarray] = {}
    flow_scale = 8.0
    emit = {
        "bike": (0.9, 1.2, 0.8, 1.3),
        "taxi": (0.9, 1.1, 0.8, 1.2),
        "bus": (0.9, 1.3, 0.8, 1.4),
    }
    for m, (a_in, b_in, a_out, b_out) in emit.items():
        zc = z[:, :, CONCEPTS.index(m)]
        inflow = flow_scale * np.logaddexp(0.0, a_in * zc + b_in)
        outflow = flow_scale * np.logaddexp(0.0, a_out * zc + b_out)
        stackd = np.stack([inflow, outflow], axis=2)
        stackd = stackd + rng_emit.standard_normal(stackd.shape) * noise
        obs[m] = stackd
    zv = z[:, :, CONCEPTS.index("v")]
    speed = 45.0 - 6.0 * zv + rng_emit.standard_normal(zv.shape) * (1.5 * noise)
    obs["v"] = speed[:, :, None]

    # one pass of spatial smoothing through the normalized operator
    for m in MODALITIES:
        obs[m] = np.einsum("ij,tjc->tic", g_hat, obs[m])
    for m in ("bike", "taxi", "bus"):
        obs[m] = np.maximum(obs[m], 0.0)
    obs["v"] = np.maximum(obs["v"], 1.0)

    cond = cond[burn:]
    obs = {m: np.ascontiguousarray(obs[m][burn:]) for m in MODALITIES}

    splits = compute_splits(t_out)
    stats = {"cond": channel_stats(cond, splits["train"])}
    for m in MODALITIES:
        stats[m] = channel_stats(obs[m], splits["train"])

    return DatasetBundle(
        cond=cond,
        obs=obs,
        adjacency=g,
        stats=stats,
        splits=splits,
        steps_per_day=cfg.steps_per_day,
        ground_truth=a_true,
    )


# ---------------------------------------------------------------------------
# splits, stats, windows


def compute_splits(timesteps: int) -> dict[str, tuple[int, int]]:
    """Contiguous 60/20/20 partition in time order."""
    i = int(timesteps * SPLIT_FRACTIONS["train"])
    j = int(timesteps * (SPLIT_FRACTIONS["train"] + SPLIT_FRACTIONS["val"]))
    return {"train": (0, i), "val": (i, j), "test": (j, timesteps)}


def channel_stats(arr: np.ndarray, train_span: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = train_span
    sample = arr[lo:hi].reshape(-1, arr.shape[-1])
    mean = sample.mean(axis=0)
    std = sample.std(axis=0)
    flat = std < STD_FLOOR
    if np.any(flat):
        warnings.warn(f"constant channel(s) {np.where(flat)[0].tolist()}; std floored")
        std = np.where(flat, STD_FLOOR, std)
    return mean, std


def normalize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (values - mean) / std


def denormalize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return values * std + mean


def normalized_arrays(bundle: DatasetBundle) -> dict[str, np.ndarray]:
    out = {"cond": normalize(bundle.cond, *bundle.stats["cond"])}
    for m in MODALITIES:
        out[m] = normalize(bundle.obs[m], *bundle.stats[m])
    return out


def window_starts(bundle: DatasetBundle, split: str, history: int) -> np.ndarray:
    """Start indices of stride-1 windows lying entirely inside one split.

    A window covers ``history`` input steps plus one target step.
    """
    if split not in bundle.splits:
        raise ValidationError(f"unknown split '{split}'")
    lo, hi = bundle.splits[split]
    if history < 1:
        raise ValidationError("history must be at least 1 step")
    if history >= hi - lo:
        raise ValidationError(
            f"history {history} does not fit in split '{split}' of length {hi - lo}"
        )
    return np.arange(lo, hi - history)


# ---------------------------------------------------------------------------
# container IO


def save_bundle(bundle: DatasetBundle, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    arrays = {"cond": bundle.cond, "adjacency": bundle.adjacency}
    for m in MODALITIES:
        arrays[m] = bundle.obs[m]
    for name, (mean, std) in bundle.stats.items():
        arrays[f"stats.{name}.mean"] = mean
        arrays[f"stats.{name}.std"] = std
    if bundle.ground_truth is not None:
        arrays["ground_truth_adjacency"] = bundle.ground_truth
    save_arrays(directory, arrays)
    splits_doc = {name: [int(lo), int(hi)] for name, (lo, hi) in bundle.splits.items()}
    splits_doc["steps_per_day"] = int(bundle.steps_per_day)
    dump_json(os.path.join(directory, "splits.json"), splits_doc)
    if bundle.ground_truth is not None:
        dump_json(
            os.path.join(directory, "ground_truth.json"),
            {"concepts": list(CONCEPTS), "array": "ground_truth_adjacency"},
        )


def load_bundle(directory: str) -> DatasetBundle:
    arrays = load_arrays(directory)
    splits_doc = read_json(os.path.join(directory, "splits.json"))
    for key in ("cond", "adjacency", *MODALITIES):
        if key not in arrays:
            raise BundleFormatError(f"dataset missing array '{key}'")
    obs = {m: arrays[m] for m in MODALITIES}
    stats = {}
    for name in ("cond", *MODALITIES):
        mk, sk = f"stats.{name}.mean", f"stats.{name}.std"
        if mk not in arrays or sk not in arrays:
            raise BundleFormatError(f"dataset missing normalization stats for '{name}'")
        stats[name] = (arrays[mk], arrays[sk])
    if "steps_per_day" not in splits_doc:
        raise BundleFormatError("splits.json missing steps_per_day")
    steps_per_day = int(splits_doc.pop("steps_per_day"))
    splits = {name: (int(lo), int(hi)) for name, (lo, hi) in splits_doc.items()}
    ground_truth = None
    gt_path = os.path.join(directory, "ground_truth.json")
    if os.path.exists(gt_path):
        gt_doc = read_json(gt_path)
        name = gt_doc.get("array", "ground_truth_adjacency")
        if name not in arrays:
            raise BundleFormatError(f"ground_truth.json points at missing array '{name}'")
        ground_truth = arrays[name]
    for m in MODALITIES:
        if obs[m].shape[-1] != OBS_CHANNELS[m]:
            raise BundleFormatError(
                f"array '{m}' has {obs[m].shape[-1]} channels, expected {OBS_CHANNELS[m]}"
            )
    return DatasetBundle(
        cond=arrays["cond"],
        obs=obs,
        adjacency=arrays["adjacency"],
        stats=stats,
        splits=splits,
        steps_per_day=steps_per_day,
        ground_truth=ground_truth,
    )
