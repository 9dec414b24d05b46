"""Synthetic planar navigation datasets with odometry and GPS measurements.

Four presets mirror the navigation benchmarks:

* ``N1``: fixed covariances, accurate odometry and coarse GPS.
* ``N2``: fixed covariances with the odometry/GPS magnitudes swapped.
* ``N3``: GPS noise switches with a binary light-detector label.
* ``N4``: both odometry and GPS noise switch with the label.

Ground truth comes from a smooth random-walk controller: speed wanders in a
fixed band and heading rate follows an Ornstein-Uhlenbeck process. Noise is
composed on the right, ``z = truth (+) n``, which is exactly the convention
of the graph residuals, so residuals at ground truth equal the injected noise.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import manifold
from .graph import FactorGraph, gps_factor, odom_factor
from .models import CovBlock, CovMode, ThetaParams
from .learning import Example

STD_FLOOR = 1e-9


class DatasetId(str, enum.Enum):
    N1 = "N1"
    N2 = "N2"
    N3 = "N3"
    N4 = "N4"

    @property
    def conditioned(self) -> bool:
        return self in (DatasetId.N3, DatasetId.N4)


_ODOM = (0.05, 0.05, 0.01)
_GPS = (0.5, 0.5, 0.1)


def _default_stds(dataset_id: DatasetId):
    if dataset_id == DatasetId.N1:
        return [_ODOM], [_GPS]
    if dataset_id == DatasetId.N2:
        return [_GPS], [_ODOM]
    odom0, gps0 = np.array(_ODOM), np.array(_GPS)
    if dataset_id == DatasetId.N3:
        return [odom0.tolist(), odom0.tolist()], [gps0.tolist(), (4 * gps0).tolist()]
    return [odom0.tolist(), (4 * odom0).tolist()], [gps0.tolist(), (4 * gps0).tolist()]


@dataclass
class GenSpec:
    dataset_id: DatasetId = DatasetId.N1
    num_traj: int = 50
    steps_T: int = 300
    train_count: int = 30
    sigma_odom: list = None  # per-label std rows
    sigma_gps: list = None
    label_stay: float = 0.95
    seed: int = 0
    speed_band: tuple = (0.5, 1.5)
    speed_jitter: float = 0.05
    turn_reversion: float = 0.1
    turn_noise: float = 0.02

    def __post_init__(self):
        self.dataset_id = DatasetId(self.dataset_id)
        odom, gps = _default_stds(self.dataset_id)
        if self.sigma_odom is None:
            self.sigma_odom = odom
        if self.sigma_gps is None:
            self.sigma_gps = gps
        self.sigma_odom = np.atleast_2d(np.asarray(self.sigma_odom, dtype=float)).tolist()
        self.sigma_gps = np.atleast_2d(np.asarray(self.sigma_gps, dtype=float)).tolist()
        self.speed_band = tuple(float(v) for v in self.speed_band)
        self.validate()

    def validate(self):
        if self.num_traj < 1 or self.steps_T < 2:
            raise ValueError("need at least one trajectory of at least two steps")
        if not 0 <= self.train_count < self.num_traj:
            raise ValueError("train_count must satisfy 0 <= train_count < num_traj")
        labels = 2 if self.dataset_id.conditioned else 1
        for name in ("sigma_odom", "sigma_gps"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (labels, 3):
                raise ValueError(f"{name} must have shape ({labels}, 3) for {self.dataset_id.value}")
            if not np.all(arr > 0):
                raise ValueError(f"{name} entries must be positive")
        if not 0.0 <= self.label_stay <= 1.0:
            raise ValueError("label_stay must lie in [0, 1]")
        if not 0 < self.speed_band[0] <= self.speed_band[1]:
            raise ValueError("speed_band must be an increasing pair of positive speeds")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset_id"] = self.dataset_id.value
        d["speed_band"] = list(self.speed_band)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        return cls(**d)


@dataclass
class Episode:
    gt: np.ndarray  # (T, 3)
    odom_meas: np.ndarray  # (T-1, 3), odom_meas[k-1] relates poses k-1 and k
    gps_meas: np.ndarray  # (T, 3)
    light_labels: np.ndarray | None  # (T,) ints, only for conditioned datasets
    seed: int
    index: int = 0
    split: str = "train"
    dataset_id: DatasetId = DatasetId.N1

    def __post_init__(self):
        self.gt = np.asarray(self.gt, dtype=float).reshape(-1, 3)
        T = self.gt.shape[0]
        self.odom_meas = np.asarray(self.odom_meas, dtype=float).reshape(-1, 3)
        self.gps_meas = np.asarray(self.gps_meas, dtype=float).reshape(-1, 3)
        if self.light_labels is not None:
            self.light_labels = np.asarray(self.light_labels, dtype=int)
        self.dataset_id = DatasetId(self.dataset_id)
        if self.odom_meas.shape[0] != T - 1 or self.gps_meas.shape[0] != T:
            raise ValueError("measurement counts inconsistent with trajectory length")
        if (self.light_labels is not None) != self.dataset_id.conditioned:
            raise ValueError("light labels are present iff the dataset is conditioned")
        if self.light_labels is not None and self.light_labels.shape != (T,):
            raise ValueError("need one light label per step")

    @property
    def steps(self) -> int:
        return self.gt.shape[0]

    def to_graph(self) -> FactorGraph:
        return to_graph(self)

    def initial_guess(self) -> np.ndarray:
        """GPS measurements, used as the cold-start linearization point."""
        return self.gps_meas.copy()

    def to_example(self) -> Example:
        return Example(self.to_graph(), self.gt, self.initial_guess(), f"{self.split}/{self.index}")


@dataclass
class Dataset:
    episodes: list = field(default_factory=list)
    spec: GenSpec | None = None

    @property
    def train(self) -> list:
        return [e for e in self.episodes if e.split == "train"]

    @property
    def test(self) -> list:
        return [e for e in self.episodes if e.split == "test"]

    def split(self, name: str) -> list:
        if name == "all":
            return list(self.episodes)
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test

    def __len__(self):
        return len(self.episodes)


def _episode_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def _simulate(spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    T = spec.steps_T
    lo, hi = spec.speed_band
    gt = np.zeros((T, 3))
    gt[0] = [rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-np.pi, np.pi)]
    gt[0, 2] = manifold.wrap_angle(gt[0, 2])
    v = rng.uniform(lo, hi)
    w = 0.0
    for k in range(1, T):
        v = float(np.clip(v + spec.speed_jitter * rng.standard_normal(), lo, hi))
        w = (1.0 - spec.turn_reversion) * w + spec.turn_noise * rng.standard_normal()
        gt[k] = manifold.retract(gt[k - 1], [v, 0.0, w])
    return gt


def _labels(spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    T = spec.steps_T
    flips = rng.random(T) >= spec.label_stay
    labels = np.empty(T, dtype=int)
    labels[0] = rng.integers(2)
    for k in range(1, T):
        labels[k] = 1 - labels[k - 1] if flips[k] else labels[k - 1]
    return labels


def generate_episode(spec: GenSpec, seed: int, index: int = 0) -> Episode:
    rng = np.random.default_rng(seed)
    gt = _simulate(spec, rng)
    T = spec.steps_T
    labels = _labels(spec, rng) if spec.dataset_id.conditioned else None
    lab = labels if labels is not None else np.zeros(T, dtype=int)
    s_odom = np.maximum(np.asarray(spec.sigma_odom), STD_FLOOR)[lab]
    s_gps = np.maximum(np.asarray(spec.sigma_gps), STD_FLOOR)[lab]
    n_odom = rng.standard_normal((T - 1, 3)) * s_odom[1:]
    n_gps = rng.standard_normal((T, 3)) * s_gps
    odom = manifold.retract(manifold.between(gt[:-1], gt[1:]), n_odom)
    gps = manifold.retract(gt, n_gps)
    split = "train" if index < spec.train_count else "test"
    return Episode(gt, odom, gps, labels, seed, index, split, spec.dataset_id)


def generate(spec: GenSpec) -> Dataset:
    """Deterministic dataset for ``spec``; the first ``train_count`` episodes train."""
    spec.validate()
    seeds = _episode_seeds(spec.seed, spec.num_traj)
    return Dataset([generate_episode(spec, s, i) for i, s in enumerate(seeds)], spec)


def to_graph(episode: Episode) -> FactorGraph:
    """One odometry factor per consecutive pair plus one GPS unary per pose."""
    T = episode.steps
    labels = episode.light_labels if episode.light_labels is not None else np.zeros(T, dtype=int)
    factors = [odom_factor(k - 1, k, episode.odom_meas[k - 1], "odom", labels[k]) for k in range(1, T)]
    factors += [gps_factor(k, episode.gps_meas[k], "gps", labels[k]) for k in range(T)]
    return FactorGraph(T, factors)


def theta_from_stds(sigma_odom, sigma_gps, conditioned: bool) -> ThetaParams:
    mode = CovMode.CONDITIONED if conditioned else CovMode.FIXED
    return ThetaParams(
        {
            "odom": CovBlock(mode, np.log(np.atleast_2d(sigma_odom))),
            "gps": CovBlock(mode, np.log(np.atleast_2d(sigma_gps))),
        }
    )


def generating_theta(spec: GenSpec) -> ThetaParams:
    """The theta whose covariances produced the data."""
    return theta_from_stds(spec.sigma_odom, spec.sigma_gps, spec.dataset_id.conditioned)


def model_theta(dataset_id, log_std=0.0) -> ThetaParams:
    """Theta with the structure used for ``dataset_id`` and constant log-stds."""
    dataset_id = DatasetId(dataset_id)
    labels = 2 if dataset_id.conditioned else 1
    row = np.full((labels, 3), float(log_std))
    return theta_from_stds(np.exp(row), np.exp(row), dataset_id.conditioned)


def random_theta(dataset_id, seed: int, low: float = -3.0, high: float = 1.0) -> ThetaParams:
    template = model_theta(dataset_id)
    rng = np.random.default_rng(seed)
    return template.with_vector(rng.uniform(low, high, template.size))


# -- serialization ----------------------------------------------------------

class DatasetParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def _episode_to_json(ep: Episode) -> str:
    return json.dumps(
        {
            "index": ep.index,
            "split": ep.split,
            "dataset_id": ep.dataset_id.value,
            "seed": ep.seed,
            "gt": ep.gt.tolist(),
            "odom": ep.odom_meas.tolist(),
            "gps": ep.gps_meas.tolist(),
            "labels": None if ep.light_labels is None else ep.light_labels.tolist(),
        }
    )


def save(dataset: Dataset, path) -> None:
    """Write one JSON episode per line, plus the generator spec sidecar if known."""
    with open(path, "w") as fh:
        for ep in dataset.episodes:
            fh.write(_episode_to_json(ep) + "\n")
    if dataset.spec is not None:
        spec_path(path).write_text(json.dumps(dataset.spec.to_dict(), indent=2, sort_keys=True) + "\n")


def spec_path(path) -> Path:
    """Sidecar file holding the generator spec of a dataset file."""
    path = Path(path)
    return path.with_name(path.name + ".spec.json")


def load(path) -> Dataset:
    episodes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                episodes.append(
                    Episode(
                        gt=d["gt"],
                        odom_meas=d["odom"],
                        gps_meas=d["gps"],
                        light_labels=d["labels"],
                        seed=d["seed"],
                        index=d["index"],
                        split=d["split"],
                        dataset_id=d["dataset_id"],
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetParseError(lineno, str(exc)) from exc
    spec = None
    side = spec_path(path)
    if side.exists():
        spec = GenSpec.from_dict(json.loads(side.read_text()))
    return Dataset(episodes, spec)
