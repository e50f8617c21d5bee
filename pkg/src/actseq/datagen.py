"""Seeded semi-Markov generator of primitive-like labeled time series.

Labels follow a semi-Markov chain: a class is held for a duration drawn from a
shifted negative binomial (at least ``min_duration`` frames), then the next
class is drawn from a transition matrix with a zero diagonal. Features are the
class signature vector of the current frame, box-smoothed over ``crossfade``
frames so that adjacent segments blend linearly at each boundary, plus
Gaussian noise (optionally AR(1)-correlated in time).

Sample ``i`` of a call with seed ``s`` draws from
``PCG64(SeedSequence([s, i]))``, so samples are independent of each other and
of how many are requested.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import FeatureSequence, FrameLabeling, LabeledSample
from .errors import ConfigError, ShapeError

PRIMITIVES = ("reach", "transport", "reposition", "stabilize", "idle")


@dataclass
class GeneratorConfig:
    transition: list[list[float]]
    mean_durations: list[float]          # seconds, per class
    emission_means: list[list[float]]    # c x D
    frame_rate: float = 100.0
    dispersion: float | list[float] = 4.0
    noise_sigma: float = 0.5
    noise_correlation: float = 0.0       # AR(1) coefficient of the noise, 0 = white
    crossfade: int = 6
    length_range: tuple[int, int] = (400, 1000)
    min_duration: int = 3
    seed: int = 0
    class_names: list[str] | None = None
    subjects: int = 10

    def __post_init__(self):
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.mean_durations)

    @property
    def feature_dim(self) -> int:
        return len(self.emission_means[0])

    @property
    def names(self) -> list[str]:
        if self.class_names:
            return list(self.class_names)
        if self.num_classes == len(PRIMITIVES):
            return list(PRIMITIVES)
        return [f"class{i}" for i in range(self.num_classes)]

    def validate(self):
        c = len(self.mean_durations)
        if c < 1:
            raise ConfigError("need at least one class")
        P = np.asarray(self.transition, dtype=np.float64)
        if P.shape != (c, c):
            raise ConfigError(f"transition matrix must be {c}x{c}")
        if c > 1:
            if np.any(np.diag(P) != 0):
                raise ConfigError("transition matrix must have a zero diagonal")
            if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-9):
                raise ConfigError("transition rows must be non-negative and sum to 1")
        if any(d <= 0 for d in self.mean_durations):
            raise ConfigError("mean durations must be positive")
        E = np.asarray(self.emission_means, dtype=np.float64)
        if E.ndim != 2 or E.shape[0] != c or E.shape[1] < 1:
            raise ConfigError(f"emission means must be {c} x D")
        disp = np.broadcast_to(np.asarray(self.dispersion, dtype=np.float64), (c,))
        if np.any(disp <= 0):
            raise ConfigError("dispersion must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if not 0 <= self.noise_correlation < 1:
            raise ConfigError("noise correlation must be in [0, 1)")
        if self.crossfade < 0 or self.min_duration < 1:
            raise ConfigError("crossfade must be >= 0 and min_duration >= 1")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ConfigError("length range must satisfy 1 <= min <= max")
        if self.frame_rate <= 0:
            raise ConfigError("frame rate must be positive")
        if self.class_names is not None and len(self.class_names) != c:
            raise ConfigError("class_names length must equal class count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["length_range"] = list(self.length_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "length_range" in d:
            d["length_range"] = tuple(d["length_range"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


def _random_transition(rng: np.random.Generator, c: int, concentration: float) -> list[list[float]]:
    if c == 1:
        return [[1.0]]
    rows = []
    for i in range(c):
        w = rng.dirichlet(np.full(c - 1, concentration))
        rows.append(np.insert(w, i, 0.0).tolist())
    return rows


def stroke_like(seed: int = 0, **overrides) -> GeneratorConfig:
    """Five primitive classes with sub-second mean durations, 16 channels at 100 fps."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    c, D = 5, 16
    params = dict(
        transition=_random_transition(rng, c, 1.0),
        mean_durations=[0.4, 0.6, 0.8, 1.0, 1.5],
        emission_means=(rng.standard_normal((c, D)) * 0.35).tolist(),
        frame_rate=100.0,
        dispersion=4.0,
        noise_sigma=0.5,
        noise_correlation=0.9,
        crossfade=6,
        length_range=(500, 900),
        seed=seed,
        class_names=list(PRIMITIVES),
    )
    params.update(overrides)
    return GeneratorConfig(**params)


def mixed_durations(seed: int = 0, **overrides) -> GeneratorConfig:
    """Three classes with mean durations 0.3 s, 1 s and 4 s."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0A]))
    c, D = 3, 16
    params = dict(
        transition=_random_transition(rng, c, 1.0),
        mean_durations=[0.3, 1.0, 4.0],
        emission_means=(rng.standard_normal((c, D)) * 0.35).tolist(),
        frame_rate=100.0,
        dispersion=8.0,
        noise_sigma=0.5,
        noise_correlation=0.9,
        crossfade=6,
        length_range=(1200, 2000),
        seed=seed,
        class_names=["short", "medium", "long"],
    )
    params.update(overrides)
    return GeneratorConfig(**params)


PROFILES = {"stroke-like": stroke_like, "mixed-durations": mixed_durations}


def _durations_sampler(cfg: GeneratorConfig):
    disp = np.broadcast_to(np.asarray(cfg.dispersion, dtype=np.float64), (cfg.num_classes,))
    means = np.asarray(cfg.mean_durations) * cfg.frame_rate

    def draw(rng: np.random.Generator, k: int) -> int:
        excess = max(means[k] - cfg.min_duration, 1e-9)
        r = disp[k]
        # numpy counts failures before r successes: mean r (1 - p) / p
        return cfg.min_duration + int(rng.negative_binomial(r, r / (r + excess)))

    return draw


def sample_labels(cfg: GeneratorConfig, rng: np.random.Generator, length: int) -> np.ndarray:
    draw = _durations_sampler(cfg)
    P = np.asarray(cfg.transition, dtype=np.float64)
    c = cfg.num_classes
    k = int(rng.integers(c))
    segs: list[list[int]] = []
    total = 0
    while total < length:
        d = draw(rng, k)
        segs.append([k, d])
        total += d
        if c > 1:
            k = int(rng.choice(c, p=P[k]))
    overshoot = total - length
    segs[-1][1] -= overshoot
    if segs[-1][1] < cfg.min_duration and len(segs) > 1:
        segs[-2][1] += segs.pop()[1]
    return np.repeat([s[0] for s in segs], [s[1] for s in segs]).astype(np.int64)


def box_smooth(track: np.ndarray, width: int) -> np.ndarray:
    """Moving average over ``width`` frames with edge replication (linear crossfade)."""
    if width <= 1:
        return track
    left = width // 2
    padded = np.concatenate([np.repeat(track[:1], left, axis=0), track,
                             np.repeat(track[-1:], width - 1 - left, axis=0)])
    csum = np.concatenate([np.zeros((1, track.shape[1])), np.cumsum(padded, axis=0)])
    return (csum[width:] - csum[:-width]) / width


def emit(cfg: GeneratorConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    E = np.asarray(cfg.emission_means, dtype=np.float64)
    mean_track = box_smooth(E[labels], cfg.crossfade)
    noise = rng.standard_normal(mean_track.shape)
    a = cfg.noise_correlation
    if a > 0:
        # stationary AR(1) with unit marginal variance
        scale = np.sqrt(1.0 - a * a)
        for t in range(1, noise.shape[0]):
            noise[t] = a * noise[t - 1] + scale * noise[t]
    return mean_track + cfg.noise_sigma * noise


def generate(cfg: GeneratorConfig, n: int) -> list[LabeledSample]:
    cfg.validate()
    width = max(3, len(str(max(n - 1, 0))))
    samples = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        lo, hi = cfg.length_range
        length = int(rng.integers(lo, hi + 1))
        labels = sample_labels(cfg, rng, length)
        feats = emit(cfg, labels, rng)
        subject = i % max(cfg.subjects, 1)
        meta = {"subject": f"s{subject:02d}", "group": f"s{subject:02d}"}
        samples.append(LabeledSample(FeatureSequence(feats, cfg.frame_rate, meta),
                                     FrameLabeling(labels, cfg.frame_rate),
                                     sample_id=f"sample{i:0{width}d}"))
    return samples


def normalize_per_sample(x: FeatureSequence) -> FeatureSequence:
    """Zero-mean, unit (population) standard deviation per channel."""
    if len(x) < 2:
        raise ShapeError("normalization needs at least two frames")
    f = x.frames
    mu = f.mean(axis=0)
    sd = f.std(axis=0)
    centered = f - mu
    varying = (f.max(axis=0) > f.min(axis=0))[None, :]
    out = np.divide(centered, sd, out=np.zeros_like(centered), where=varying)
    return FeatureSequence(out, x.frame_rate, dict(x.metadata))
