"""Symbol-span masks: random for training, impulse-guided for inference."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .waveform import Waveform


class EmptyMaskError(ValueError):
    """A mask with no symbols has no prediction targets."""


@dataclass(frozen=True)
class MaskSpec:
    masked_symbols: tuple[int, ...]
    sps: int

    def __post_init__(self):
        syms = tuple(sorted(set(int(i) for i in self.masked_symbols)))
        if syms and syms[0] < 0:
            raise ValueError("negative symbol index in mask")
        object.__setattr__(self, "masked_symbols", syms)

    def __len__(self) -> int:
        return len(self.masked_symbols)

    @property
    def is_empty(self) -> bool:
        return not self.masked_symbols

    @property
    def spans(self) -> list[range]:
        L = self.sps
        return [range(i * L, (i + 1) * L) for i in self.masked_symbols]

    def symbol_mask(self, num_symbols: int) -> np.ndarray:
        m = np.zeros(num_symbols, dtype=bool)
        if self.masked_symbols:
            if self.masked_symbols[-1] >= num_symbols:
                raise IndexError(
                    f"masked symbol {self.masked_symbols[-1]} outside [0, {num_symbols})"
                )
            m[list(self.masked_symbols)] = True
        return m

    def to_json(self) -> str:
        return json.dumps({"masked_symbols": list(self.masked_symbols), "sps": self.sps})

    @classmethod
    def from_json(cls, text: str) -> "MaskSpec":
        d = json.loads(text)
        return cls(tuple(d["masked_symbols"]), int(d["sps"]))


def mask_count(num_symbols: int, fraction: float) -> int:
    # floor with a small guard so e.g. 0.15 * 140 = 20.999... still gives 21
    return int(math.floor(fraction * num_symbols + 1e-9))


def random_mask(num_symbols: int, fraction: float, sps: int, rng: np.random.Generator) -> MaskSpec:
    """Mask exactly floor(fraction * num_symbols) distinct symbols."""
    if num_symbols < 1:
        raise ValueError("num_symbols must be >= 1")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"mask fraction must be in (0, 1), got {fraction}")
    n = mask_count(num_symbols, fraction)
    if n == 0:
        raise EmptyMaskError(f"floor({fraction} * {num_symbols}) = 0 masked symbols")
    chosen = rng.choice(num_symbols, size=n, replace=False)
    return MaskSpec(tuple(chosen.tolist()), sps)


def impulse_guided_mask(hits, sps: int, allow_empty: bool = False) -> MaskSpec:
    """Mask exactly the symbols hit by impulsive noise."""
    spec = MaskSpec(tuple(int(i) for i in np.ravel(sorted(hits))), sps)
    if spec.is_empty and not allow_empty:
        raise EmptyMaskError("no hit symbols: nothing to predict")
    return spec


def apply_mask(w: Waveform, spec: MaskSpec) -> Waveform:
    """Zero the I and Q samples of every masked span; labels are kept."""
    if spec.sps != w.sps:
        raise ValueError(f"mask sps={spec.sps} does not match waveform sps={w.sps}")
    sample_mask = np.repeat(spec.symbol_mask(w.num_symbols), w.sps)
    i_s = np.where(sample_mask, 0.0, w.i_samples)
    q_s = np.where(sample_mask, 0.0, w.q_samples)
    return w.replace_samples(i_s, q_s)
