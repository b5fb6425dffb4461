"""Similarity-weighted reward prediction over user characteristics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Literal, Mapping, Sequence

import numpy as np

from .dataset import INVOLVEMENT, Dataset, TransitionSample, UserProfile

Kernel = Literal["linear", "exponential"]


@dataclass(frozen=True)
class SimilarityConfig:
    """Which characteristics define similarity and how distance turns into weight.

    ``ranges`` holds per-characteristic (min, max) used to scale differences
    to [0, 1]; see :meth:`fitted`.
    """

    characteristics: tuple[str, ...]
    kernel: Kernel = "linear"
    sharpness: float = 1.0
    ranges: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self) -> None:
        if not self.characteristics:
            raise ValueError("a similarity config needs at least one characteristic")
        if self.kernel not in ("linear", "exponential"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if not self.sharpness > 0:
            raise ValueError(f"sharpness must be positive, got {self.sharpness}")
        if self.ranges is not None and len(self.ranges) != len(self.characteristics):
            raise ValueError("one range per characteristic is required")

    @property
    def label(self) -> str:
        return f"{'+'.join(self.characteristics)}|{self.kernel}|{self.sharpness:g}"

    def fitted(self, profiles: Iterable[UserProfile]) -> SimilarityConfig:
        values = profile_matrix({p.user_id: p for p in profiles}, None, self.characteristics)
        ranges = []
        for j, name in enumerate(self.characteristics):
            col = values[:, j][~np.isnan(values[:, j])]
            if col.size == 0:
                raise ValueError(f"no profile carries {name!r}")
            ranges.append((float(col.min()), float(col.max())))
        return SimilarityConfig(self.characteristics, self.kernel, self.sharpness, tuple(ranges))

    def to_dict(self) -> dict[str, Any]:
        return {"characteristics": list(self.characteristics), "kernel": self.kernel, "sharpness": self.sharpness}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SimilarityConfig:
        return cls(tuple(data["characteristics"]), data.get("kernel", "linear"), float(data.get("sharpness", 1.0)))


def profile_matrix(
    profiles: Mapping[str, UserProfile], users: Sequence[str] | None, names: Sequence[str]
) -> np.ndarray:
    """[user, characteristic] values, NaN where a profile lacks a characteristic."""
    users = sorted(profiles) if users is None else users
    rows = []
    for u in users:
        feats = profiles[u].features if u in profiles else {}
        rows.append([feats.get(n, np.nan) for n in names])
    return np.array(rows, dtype=float).reshape(len(users), len(names))


def _kernel(d: np.ndarray, config: SimilarityConfig) -> np.ndarray:
    if config.kernel == "linear":
        return np.power(1.0 - d, config.sharpness)
    return np.exp(-config.sharpness * d)


def _distances(target: np.ndarray, others: np.ndarray, config: SimilarityConfig) -> np.ndarray:
    diff = np.abs(others - target)
    if config.ranges is not None:
        span = np.array([hi - lo for lo, hi in config.ranges])
        diff = np.divide(diff, span, out=np.zeros_like(diff), where=span > 0)
    return np.clip(diff.mean(axis=-1), 0.0, 1.0)


def similarity_weight(target: UserProfile, other: UserProfile, config: SimilarityConfig) -> float | None:
    """Weight in [0, 1] of ``other``'s samples when predicting for ``target``.

    Returns None when either profile lacks a configured characteristic, which
    excludes that pairing from the weighted pool.
    """
    a, b = target.features, other.features
    if any(c not in a or c not in b for c in config.characteristics):
        return None
    t = np.array([a[c] for c in config.characteristics])
    o = np.array([b[c] for c in config.characteristics])
    return float(_kernel(_distances(t, o, config), config))


def fold_weights(values: np.ndarray, target: int, config: SimilarityConfig) -> np.ndarray | None:
    """Weights of every user relative to user row ``target`` with fold-local ranges.

    Users lacking a characteristic get NaN; the target's own row is NaN too.
    Returns None when the target itself lacks a characteristic.
    """
    if np.isnan(values[target]).any():
        return None
    complete = ~np.isnan(values).any(axis=1)
    complete[target] = False
    if not complete.any():
        return None
    pool = values[complete]
    ranges = tuple((float(lo), float(hi)) for lo, hi in zip(pool.min(axis=0), pool.max(axis=0)))
    cfg = SimilarityConfig(config.characteristics, config.kernel, config.sharpness, ranges)
    w = np.full(len(values), np.nan)
    w[complete] = _kernel(_distances(values[target], pool, cfg), cfg)
    return w


def _unweighted_fallback(samples: Sequence[TransitionSample], s: int, a: int) -> float:
    rewards = [t.reward for t in samples]
    if not rewards:
        raise ValueError("no samples to predict from")
    cell = [t.reward for t in samples if t.state == s and t.action == a]
    if cell:
        return float(np.mean(cell))
    by_action = [t.reward for t in samples if t.action == a]
    return float(np.mean(by_action if by_action else rewards))


def weighted_reward_predict(
    target: UserProfile,
    samples_with_profiles: Sequence[tuple[TransitionSample, UserProfile]],
    s: int,
    a: int,
    config: SimilarityConfig,
    fallback: float | None = None,
) -> float:
    """Similarity-weighted mean reward of the (s, a) samples.

    Falls back to ``fallback`` (or the unweighted state+action, action,
    overall chain) when no (s, a) sample carries positive weight.
    """
    total = acc = 0.0
    for sample, profile in samples_with_profiles:
        if sample.state != s or sample.action != a:
            continue
        w = similarity_weight(target, profile, config)
        if w is None or w == 0.0:
            continue
        total += w
        acc += w * sample.reward
    if total > 0.0:
        return acc / total
    if fallback is not None:
        return fallback
    return _unweighted_fallback([t for t, _ in samples_with_profiles], s, a)


# -- configuration grid ------------------------------------------------------


def default_grid(
    pre_triple: Sequence[str],
    all_triple: Sequence[str],
    characteristic_names: Sequence[str],
) -> list[SimilarityConfig]:
    """Involvement only, the two selected triples, and everything, across kernels and sharpness levels."""
    sets: list[tuple[str, ...]] = [(INVOLVEMENT,), tuple(pre_triple), tuple(all_triple)]
    everything = tuple(characteristic_names) + ((INVOLVEMENT,) if INVOLVEMENT not in characteristic_names else ())
    sets.append(everything)
    grid = []
    seen = set()
    for chars in sets:
        if not chars or chars in seen:
            continue
        seen.add(chars)
        for kernel in ("linear", "exponential"):
            for sharp in (0.5, 1.0, 2.0, 4.0):
                grid.append(SimilarityConfig(chars, kernel, sharp))
    # sharp edge cases on the single strongest characteristic
    for kernel in ("linear", "exponential"):
        for sharp in (8.0, 16.0):
            grid.append(SimilarityConfig((INVOLVEMENT,), kernel, sharp))
    return grid


def load_grid(path: str | Path) -> list[SimilarityConfig]:
    """Read a JSON grid: ``{"configs": [{"characteristics": [...], "kernel": ..., "sharpness": ...}]}``."""
    data = json.loads(Path(path).read_text())
    entries = data["configs"] if isinstance(data, dict) else data
    grid = [SimilarityConfig.from_dict(e) for e in entries]
    if not grid:
        raise ValueError(f"{path}: empty configuration grid")
    return grid


def save_grid(grid: Sequence[SimilarityConfig], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"configs": [c.to_dict() for c in grid]}, indent=1) + "\n")


@dataclass(frozen=True)
class RankedConfig:
    rank: int
    index: int
    config: SimilarityConfig
    result: Any  # EvalResult


def config_search(dataset: Dataset, config_grid: Sequence[SimilarityConfig], feature_set, options=None) -> list[RankedConfig]:
    """Full leave-one-out run per configuration, ranked by overall mean L1 error.

    Ties keep grid order.
    """
    from dataclasses import replace

    from .evaluation import LoocvOptions, loocv_reward

    if not config_grid:
        raise ValueError("configuration grid is empty")
    options = options or LoocvOptions()
    scored = []
    for i, cfg in enumerate(config_grid):
        res = loocv_reward(dataset, "similarity_weighted", feature_set, replace(options, similarity=cfg))
        scored.append((res.overall.mean, i, cfg, res.overall))
    scored.sort(key=lambda x: (x[0], x[1]))
    return [RankedConfig(r + 1, i, cfg, ev) for r, (_, i, cfg, ev) in enumerate(scored)]


def format_ranking(ranking: Sequence[RankedConfig]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["rank", "config_id", "config", "mean_l1", "ci_low", "ci_high", "n"])
    for r in ranking:
        ev = r.result
        lo = f"{ev.ci_low:.6f}" if math.isfinite(ev.ci_low) else "-inf"
        hi = f"{ev.ci_high:.6f}" if math.isfinite(ev.ci_high) else "inf"
        writer.writerow([r.rank, r.index, r.config.label, f"{ev.mean:.6f}", lo, hi, ev.n])
    return buf.getvalue()
