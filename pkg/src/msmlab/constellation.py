"""Modulation constellations and the shared symbol-ID vocabulary.

All eight modulations draw their points from two disjoint canonical sets:

* 16 unit-circle points at multiples of 22.5 degrees (BPSK, QPSK, PSK8, PSK16)
* 256 odd-integer grid points in {-15, ..., 15}^2 (QAM4 through QAM256)

Points are keyed exactly (circle index or integer grid pair), so two
modulations sharing a point share its ID without any float comparison.
The vocabulary therefore has 16 + 256 = 272 entries.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

N_CIRCLE = 16
GRID_LEVELS = tuple(range(-15, 16, 2))


class Modulation(str, enum.Enum):
    BPSK = "BPSK"
    QPSK = "QPSK"
    PSK8 = "PSK8"
    PSK16 = "PSK16"
    QAM4 = "QAM4"
    QAM16 = "QAM16"
    QAM64 = "QAM64"
    QAM256 = "QAM256"

    @classmethod
    def parse(cls, name: str) -> "Modulation":
        try:
            return cls(name.upper())
        except ValueError:
            raise ValueError(
                f"unknown modulation {name!r}; expected one of {[m.value for m in cls]}"
            ) from None

    @property
    def order(self) -> int:
        return _ORDERS[self]

    @property
    def tag(self) -> int:
        """Stable small-integer code used in binary file headers."""
        return list(Modulation).index(self)

    @classmethod
    def from_tag(cls, tag: int) -> "Modulation":
        return list(cls)[tag]


_ORDERS = {
    Modulation.BPSK: 2,
    Modulation.QPSK: 4,
    Modulation.PSK8: 8,
    Modulation.PSK16: 16,
    Modulation.QAM4: 4,
    Modulation.QAM16: 16,
    Modulation.QAM64: 64,
    Modulation.QAM256: 256,
}

ALL_MODULATIONS: tuple[Modulation, ...] = tuple(Modulation)

# A key is ("c", k) for the circle point at angle k * 22.5 deg, or ("g", i, q)
# for the odd-integer grid point i + jq.
PointKey = tuple


def _psk_keys(mod: Modulation) -> list[PointKey]:
    step = N_CIRCLE // mod.order
    offset = step // 2 if mod is Modulation.QPSK else 0
    return [("c", offset + j * step) for j in range(mod.order)]


def _qam_keys(mod: Modulation) -> list[PointKey]:
    side = int(round(np.sqrt(mod.order)))
    levels = range(-(side - 1), side, 2)
    return [("g", i, q) for i in levels for q in levels]


def modulation_keys(mod: Modulation) -> list[PointKey]:
    """Canonical point keys of ``mod`` in local symbol-index order."""
    if mod.name.startswith("QAM"):
        return _qam_keys(mod)
    return _psk_keys(mod)


def key_to_point(key: PointKey) -> complex:
    if key[0] == "c":
        # exact values on the axes and diagonals avoid cos(pi/2) = 6e-17 style residue
        k = key[1] % N_CIRCLE
        exact = {0: 1 + 0j, 4: 1j, 8: -1 + 0j, 12: -1j}
        if k in exact:
            return exact[k]
        angle = 2 * np.pi * k / N_CIRCLE
        return complex(np.cos(angle), np.sin(angle))
    return complex(key[1], key[2])


@dataclass(frozen=True)
class ModulationScheme:
    name: Modulation
    points: np.ndarray  # complex128, canonical un-normalized

    def __post_init__(self):
        self.points.setflags(write=False)

    @property
    def order(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Vocabulary:
    keys: tuple[PointKey, ...]
    points: np.ndarray  # complex128, indexed by ID
    id_of: dict[PointKey, int] = field(repr=False)
    members: dict[Modulation, np.ndarray] = field(repr=False)  # local index -> global ID
    class_freq: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.keys)

    def scheme(self, mod: Modulation | str) -> ModulationScheme:
        mod = Modulation.parse(mod) if isinstance(mod, str) else mod
        return ModulationScheme(mod, self.points[self.members[mod]].copy())

    def id_to_point(self, idx: int) -> complex:
        return complex(self.points[idx])

    def lookup(self, point: complex, tol: float = 1e-9) -> int:
        """ID of the vocabulary point equal to ``point`` (within ``tol``)."""
        d = np.abs(self.points - point)
        idx = int(np.argmin(d))
        if d[idx] > tol:
            raise KeyError(f"{point!r} is not a constellation point")
        return idx

    def modulations_of(self, idx: int) -> list[Modulation]:
        return [m for m, ids in self.members.items() if idx in ids]


def class_frequencies(
    vocab_members: dict[Modulation, np.ndarray],
    size: int,
    modulations: Sequence[Modulation] | None = None,
) -> np.ndarray:
    """Per-ID probability when the modulation is uniform over ``modulations``
    and the symbol is uniform over that modulation's points."""
    mods = list(modulations) if modulations else list(ALL_MODULATIONS)
    freq = np.zeros(size)
    for mod in mods:
        ids = vocab_members[mod]
        np.add.at(freq, ids, 1.0 / (len(mods) * len(ids)))
    return freq


@lru_cache(maxsize=1)
def build_vocabulary() -> Vocabulary:
    keys: list[PointKey] = [("c", k) for k in range(N_CIRCLE)]
    keys += [("g", i, q) for i in GRID_LEVELS for q in GRID_LEVELS]
    id_of = {k: n for n, k in enumerate(keys)}
    points = np.array([key_to_point(k) for k in keys], dtype=np.complex128)
    points.setflags(write=False)
    members = {}
    for mod in ALL_MODULATIONS:
        ids = np.array([id_of[k] for k in modulation_keys(mod)], dtype=np.int64)
        ids.setflags(write=False)
        members[mod] = ids
    freq = class_frequencies(members, len(keys))
    freq.setflags(write=False)
    return Vocabulary(tuple(keys), points, id_of, members, freq)


def inverse_frequency_weights(freq: np.ndarray) -> np.ndarray:
    """1/freq for classes that can occur, 0 otherwise; scaled to mean 1 over
    the occurring classes."""
    w = np.zeros_like(freq, dtype=np.float64)
    live = freq > 0
    w[live] = 1.0 / freq[live]
    w[live] /= w[live].mean()
    return w


@dataclass(frozen=True)
class SymbolSequence:
    modulation: Modulation
    ids: np.ndarray  # global IDs, int64
    iq: np.ndarray  # complex128 canonical amplitudes

    def __len__(self) -> int:
        return len(self.ids)


def draw_symbols(
    mod: Modulation | str, count: int, rng: np.random.Generator
) -> SymbolSequence:
    """Draw ``count`` i.i.d. uniform symbols of ``mod``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    mod = Modulation.parse(mod) if isinstance(mod, str) else mod
    vocab = build_vocabulary()
    local = rng.integers(0, mod.order, size=count)
    ids = vocab.members[mod][local]
    return SymbolSequence(mod, ids, vocab.points[ids])


def parse_modulations(names: Iterable[str] | str | None) -> tuple[Modulation, ...]:
    if names is None:
        return ALL_MODULATIONS
    if isinstance(names, str):
        names = [n for n in names.replace(",", " ").split() if n]
    mods = []
    for n in names:
        if str(n).lower() == "mixed" or str(n).lower() == "all":
            return ALL_MODULATIONS
        mods.append(Modulation.parse(str(n)))
    return tuple(mods)


def format_vocabulary(vocab: Vocabulary) -> str:
    lines = [f"{'id':>3}  {'I':>10}  {'Q':>10}  modulations"]
    for idx in range(vocab.size):
        p = vocab.points[idx]
        mods = ",".join(m.value for m in vocab.modulations_of(idx))
        lines.append(f"{idx:>3}  {p.real:>10.6f}  {p.imag:>10.6f}  {mods}")
    return "\n".join(lines)
