"""Valuation samplers, setting specifications and seeded random streams.

All randomness goes through ``numpy.random.Generator`` backed by PCG64,
so a seed reproduces the same draws on any platform.  Sub-streams are keyed
by ``SeedSequence`` spawn keys, which keeps per-(sample, bidder) streams
disjoint by construction.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SettingSpec", "MultiSettingSpec", "seeded_stream", "substream", "sample_profiles",
    "parse_setting", "pad_profiles", "Batch", "make_batch", "PRESETS",
    "STANDARD_MULTI", "MULTI_TRAIN", "MULTI_TEST", "ASYMMETRIC_1x2",
]


@dataclass(frozen=True)
class SettingSpec:
    """n bidders, m items, independent Uniform(lo_j, hi_j) value per item."""

    n: int
    m: int
    lo: tuple = ()
    hi: tuple = ()
    label: str = ""

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError(f"setting needs n, m >= 1, got {self.n}x{self.m}")
        lo = tuple(float(x) for x in self.lo) or (0.0,) * self.m
        hi = tuple(float(x) for x in self.hi) or (1.0,) * self.m
        if len(lo) != self.m or len(hi) != self.m:
            raise ValueError("per-item bounds must have m entries")
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("every item needs hi > lo")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if not self.label:
            object.__setattr__(self, "label", f"{self.n}x{self.m}")

    @property
    def shape(self) -> tuple:
        return (self.n, self.m)

    @property
    def is_unit_uniform(self) -> bool:
        return all(l == 0.0 for l in self.lo) and all(h == 1.0 for h in self.hi)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.lo), np.asarray(self.hi)


@dataclass(frozen=True)
class MultiSettingSpec:
    """Uniform mixture of fixed-size settings."""

    settings: tuple
    label: str = "multi"

    def __post_init__(self):
        if not self.settings:
            raise ValueError("multi-setting needs at least one setting")
        object.__setattr__(self, "settings", tuple(self.settings))

    @property
    def frame(self) -> tuple:
        return (max(s.n for s in self.settings), max(s.m for s in self.settings))


def parse_setting(text: str) -> SettingSpec:
    match = re.fullmatch(r"\s*(\d+)\s*x\s*(\d+)\s*", text)
    if not match:
        if text in PRESETS:
            preset = PRESETS[text]
            if isinstance(preset, SettingSpec):
                return preset
        raise ValueError(f"malformed setting {text!r}, expected like '2x3'")
    return SettingSpec(int(match.group(1)), int(match.group(2)))


def seeded_stream(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical sequences."""
    return np.random.Generator(np.random.PCG64(seed))


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent stream addressed by an integer key path (e.g. sample, bidder)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(key))))


def sample_profiles(spec: SettingSpec, count: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = spec.bounds()
    u = rng.random((count, spec.n, spec.m))
    return (lo + (hi - lo) * u).astype(dtype, copy=False)


def pad_profiles(bids: np.ndarray, frame: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Embed (B, n, m) bids in a zero (B, N, M) frame; mask is True on real entries."""
    b, n, m = bids.shape
    big_n, big_m = frame
    if n > big_n or m > big_m:
        raise ValueError(f"{n}x{m} does not fit in a {big_n}x{big_m} frame")
    padded = np.zeros((b, big_n, big_m), dtype=bids.dtype)
    padded[:, :n, :m] = bids
    mask = np.zeros((big_n, big_m), dtype=bool)
    mask[:n, :m] = True
    return padded, mask


@dataclass
class Batch:
    bids: np.ndarray
    setting: SettingSpec
    padded: np.ndarray | None = None
    mask: np.ndarray | None = None


def make_batch(source, size: int, rng: np.random.Generator, frame: tuple | None = None) -> Batch:
    """Draw one batch; a multi-setting source picks one constituent uniformly."""
    if isinstance(source, MultiSettingSpec):
        spec = source.settings[int(rng.integers(len(source.settings)))]
    else:
        spec = source
    bids = sample_profiles(spec, size, rng)
    batch = Batch(bids=bids, setting=spec)
    if frame is not None:
        batch.padded, batch.mask = pad_profiles(bids, frame)
    return batch


def _grid(labels):
    return tuple(parse_setting(x) for x in labels)


STANDARD_MULTI = MultiSettingSpec(
    _grid(["2x3", "2x4", "2x5", "2x6", "2x7", "3x3", "3x4", "3x5", "3x6", "3x7"]), label="multi")
MULTI_TRAIN = MultiSettingSpec(_grid(["2x3", "2x5", "2x7", "3x4", "3x6"]), label="multi-train")
MULTI_TEST = MultiSettingSpec(_grid(["2x4", "2x6", "3x3", "3x5", "3x7"]), label="multi-test")
ASYMMETRIC_1x2 = SettingSpec(1, 2, lo=(4.0, 4.0), hi=(16.0, 7.0), label="asym1x2")

PRESETS: dict = {
    "multi": STANDARD_MULTI,
    "multi-train": MULTI_TRAIN,
    "multi-test": MULTI_TEST,
    "asym1x2": ASYMMETRIC_1x2,
}


def resolve_source(text: str):
    """Setting string ('2x3'), preset name, or comma list ('2x3,2x5') to a spec."""
    if text in PRESETS:
        return PRESETS[text]
    if "," in text:
        return MultiSettingSpec(_grid([t for t in text.split(",") if t.strip()]), label=text)
    return parse_setting(text)


@dataclass
class DataSource:
    """Training stream: a fixed dataset cycled in mini-batches, or fresh draws.

    The fixed dataset is split into consecutive mini-batches that are visited
    in order, epoch after epoch; for a multi-setting the constituent is drawn
    uniformly per batch and each constituent keeps its own cursor.
    """

    source: object
    batch_size: int
    seed: int
    dataset_size: int = 640_000
    resample: bool = False
    frame: tuple | None = None
    rng: np.random.Generator = field(init=False)
    cursors: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.rng = seeded_stream(self.seed)
        self.settings = (self.source.settings if isinstance(self.source, MultiSettingSpec)
                         else (self.source,))
        self._datasets = []
        if not self.resample:
            per = max(self.batch_size, self.dataset_size // len(self.settings))
            per -= per % self.batch_size
            data_rng = substream(self.seed, 1)
            self._datasets = [sample_profiles(s, per, data_rng) for s in self.settings]
            self.cursors = [0] * len(self.settings)

    def next_batch(self) -> Batch:
        if self.resample:
            return make_batch(self.source, self.batch_size, self.rng, self.frame)
        k = int(self.rng.integers(len(self.settings))) if len(self.settings) > 1 else 0
        data = self._datasets[k]
        start = self.cursors[k]
        self.cursors[k] = (start + self.batch_size) % len(data)
        bids = data[start:start + self.batch_size]
        batch = Batch(bids=bids, setting=self.settings[k])
        if self.frame is not None:
            batch.padded, batch.mask = pad_profiles(bids, self.frame)
        return batch

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "cursors": list(self.cursors)}

    def load_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.cursors = list(state["cursors"])
