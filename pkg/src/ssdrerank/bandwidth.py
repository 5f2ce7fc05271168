"""Capacity-planning calculators for overlapping SSD reads with ANN search.

All functions are pure and keep the numeric type of their inputs, so
passing :class:`fractions.Fraction` values gives exact answers::

    >>> from fractions import Fraction as F
    >>> table = AnnTimeTable([(0, F(0)), (2000, F(20, 1000))])
    >>> prefetch_budget(BudgetInputs(table, eta=2000, delta=200))
    Fraction(9, 500)
"""

from __future__ import annotations

import json
import math
from bisect import bisect_left
from dataclasses import dataclass
from numbers import Real
from pathlib import Path

import numpy as np

from .exceptions import InvalidConfigError, InvalidInputError

__all__ = [
    "SsdProfile",
    "AnnTimeTable",
    "BudgetInputs",
    "prefetch_budget",
    "prefetch_step",
    "batch_threshold",
    "index_size_estimate",
    "bytes_per_query",
    "load_profile",
]


def _positive(value, name):
    if isinstance(value, bool) or not isinstance(value, Real):
        raise InvalidInputError(f"{name} must be a number, got {value!r}")
    if not (value > 0 and math.isfinite(value)):
        raise InvalidInputError(f"{name} must be positive and finite, got {value!r}")


@dataclass(frozen=True)
class SsdProfile:
    random_read_bandwidth: float
    block_size: int = 4096

    def __post_init__(self):
        _positive(self.random_read_bandwidth, "random_read_bandwidth")
        _positive(self.block_size, "block_size")


class AnnTimeTable:
    """Measured ``nprobe -> seconds`` points, linearly interpolated in between.

    Points must be nondecreasing in time once sorted by nprobe. Lookups
    outside the measured range are rejected rather than extrapolated.
    """

    def __init__(self, points):
        pts = sorted((p, t) for p, t in points)
        if not pts:
            raise InvalidInputError("ann time table needs at least one point")
        probes = [p for p, _ in pts]
        if len(set(probes)) != len(probes):
            raise InvalidInputError("ann time table has duplicate nprobe entries")
        for p, t in pts:
            if p < 0 or t < 0:
                raise InvalidInputError(f"negative entry in ann time table: {(p, t)}")
        if any(b[1] < a[1] for a, b in zip(pts, pts[1:])):
            raise InvalidInputError("ann time must be nondecreasing in nprobe")
        self._probes = probes
        self._times = [t for _, t in pts]

    @classmethod
    def linear(cls, seconds_per_probe, max_probe):
        return cls([(0, 0 * seconds_per_probe), (max_probe, seconds_per_probe * max_probe)])

    @property
    def points(self):
        return list(zip(self._probes, self._times))

    def __call__(self, nprobe):
        i = bisect_left(self._probes, nprobe)
        if i < len(self._probes) and self._probes[i] == nprobe:
            return self._times[i]
        if i == 0 or i == len(self._probes):
            raise InvalidInputError(
                f"nprobe={nprobe} outside measured range [{self._probes[0]}, {self._probes[-1]}]"
            )
        p0, p1 = self._probes[i - 1], self._probes[i]
        t0, t1 = self._times[i - 1], self._times[i]
        return t0 + (t1 - t0) * (nprobe - p0) / (p1 - p0)


@dataclass(frozen=True)
class BudgetInputs:
    ann_time: AnnTimeTable
    eta: int
    delta: int
    bytes_per_query: float | None = None

    def __post_init__(self):
        if self.delta < 1 or self.delta > self.eta:
            raise InvalidInputError(f"need 1 <= delta <= eta, got delta={self.delta}, eta={self.eta}")


def prefetch_budget(inputs):
    """Seconds of search left after the snapshot at ``delta`` clusters."""
    if inputs.delta > inputs.eta:
        raise InvalidInputError("delta must not exceed eta")
    return inputs.ann_time(inputs.eta) - inputs.ann_time(inputs.delta)


def prefetch_step(delta, eta):
    """Snapshot point as a percentage of the probe count."""
    if isinstance(delta, bool) or isinstance(eta, bool) or not 1 <= delta <= eta:
        raise InvalidInputError(f"need 1 <= delta <= eta, got delta={delta}, eta={eta}")
    return delta * 100 / eta


def batch_threshold(profile, budget, bytes_per_query):
    """Largest number of concurrent queries whose reads fit in ``budget``.

    Fractional; callers floor it when they need a batch size.
    """
    if budget < 0:
        raise InvalidInputError(f"budget must be non-negative, got {budget!r}")
    if not bytes_per_query > 0:
        raise InvalidInputError(f"bytes_per_query must be positive, got {bytes_per_query!r}")
    return profile.random_read_bandwidth * budget / bytes_per_query


def index_size_estimate(n_docs, t_avg, d, b, cls_bytes_per_doc):
    """Return ``(candidate_gen_bytes, rerank_bytes, total)``."""
    for name, v in (("n_docs", n_docs), ("t_avg", t_avg), ("d", d), ("b", b), ("I", cls_bytes_per_doc)):
        _positive(v, name)
    cand = n_docs * cls_bytes_per_doc
    rerank = n_docs * t_avg * d * b
    return cand, rerank, cand + rerank


def bytes_per_query(manifest, rerank_count):
    """Expected bytes read per query when fetching ``rerank_count`` docs."""
    if rerank_count < 1:
        raise InvalidInputError("rerank_count must be >= 1")
    lengths = manifest.read_lengths(np.arange(manifest.count))
    return rerank_count * float(lengths.mean())


def load_profile(path):
    """Read a JSON profile into ``(SsdProfile, AnnTimeTable)``.

    Expected keys: ``bandwidth_bytes_per_sec``, ``block_size`` and
    ``ann_time_table`` (a list of ``[nprobe, seconds]`` pairs).
    """
    try:
        raw = json.loads(Path(path).read_text())
        profile = SsdProfile(raw["bandwidth_bytes_per_sec"], raw.get("block_size", 4096))
        table = AnnTimeTable([(int(p), float(t)) for p, t in raw["ann_time_table"]])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InvalidConfigError(f"malformed profile {path}: {exc}") from exc
    return profile, table
