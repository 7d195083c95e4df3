"""Raised-cosine pulse shaping and oversampled I/Q waveform synthesis."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, Sequence

import numpy as np

from .constellation import (
    ALL_MODULATIONS,
    Modulation,
    SymbolSequence,
    build_vocabulary,
    draw_symbols,
    parse_modulations,
)

ROLL_OFFS = (0.25, 0.35, 0.45, 0.55, 0.65, 0.75)
SPANS = (10, 12, 14, 16)
SPS = 8
NUM_SYMBOLS = 128

_SINGULAR_TOL = 1e-9


@dataclass(frozen=True)
class PulseShape:
    beta: float
    span: int
    sps: int
    taps: np.ndarray

    @property
    def center(self) -> int:
        return self.span * self.sps // 2


def raised_cosine(t: np.ndarray, beta: float) -> np.ndarray:
    """RC impulse response at times ``t`` in units of the symbol period."""
    t = np.asarray(t, dtype=np.float64)
    denom = 1.0 - (2.0 * beta * t) ** 2
    singular = np.abs(denom) < _SINGULAR_TOL
    safe = np.where(singular, 1.0, denom)
    g = np.sinc(t) * np.cos(np.pi * beta * t) / safe
    return np.where(singular, (beta / 2.0) * np.sin(np.pi / (2.0 * beta)), g)


def design_rc_filter(beta: float, span: int, sps: int = SPS) -> PulseShape:
    """Truncated RC FIR filter with ``span * sps + 1`` taps and unit center tap."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"roll-off must be in (0, 1], got {beta}")
    if span < 2 or span % 2:
        raise ValueError(f"span must be even and >= 2, got {span}")
    if sps < 1:
        raise ValueError(f"sps must be >= 1, got {sps}")
    n = np.arange(span * sps + 1) - span * sps // 2
    taps = raised_cosine(n / sps, beta)
    taps.setflags(write=False)
    return PulseShape(float(beta), int(span), int(sps), taps)


@dataclass(frozen=True)
class Waveform:
    i_samples: np.ndarray
    q_samples: np.ndarray
    symbol_ids: np.ndarray
    sps: int
    modulation: Modulation
    beta: float
    span: int
    gain: float

    @property
    def num_symbols(self) -> int:
        return len(self.symbol_ids)

    @property
    def num_samples(self) -> int:
        return len(self.i_samples)

    @property
    def complex_samples(self) -> np.ndarray:
        return self.i_samples + 1j * self.q_samples

    def span_of(self, symbol: int) -> slice:
        return slice(symbol * self.sps, (symbol + 1) * self.sps)

    def replace_samples(self, i_samples: np.ndarray, q_samples: np.ndarray) -> "Waveform":
        return Waveform(
            i_samples, q_samples, self.symbol_ids, self.sps,
            self.modulation, self.beta, self.span, self.gain,
        )


def synthesize(symbols: SymbolSequence, pulse: PulseShape, num_symbols: int) -> Waveform:
    """Pulse-shape ``symbols`` and keep the ``num_symbols`` central symbols.

    ``symbols`` must carry ``pulse.span // 2`` guard symbols on each side.
    Retained symbol ``i`` peaks at sample ``i * sps``; the guards only
    contribute inter-symbol overlap and are dropped from the labels.
    """
    L, span = pulse.sps, pulse.span
    if len(symbols) != num_symbols + span:
        raise ValueError(
            f"expected {num_symbols + span} symbols (including {span} guards), got {len(symbols)}"
        )
    impulses = np.zeros(len(symbols) * L, dtype=np.complex128)
    impulses[::L] = symbols.iq
    i_full = np.convolve(impulses.real, pulse.taps)
    q_full = np.convolve(impulses.imag, pulse.taps)
    # peak of guard-inclusive symbol k sits at k*L + center; retained i = k - span/2
    start = span * L
    stop = start + num_symbols * L
    i_s, q_s = i_full[start:stop], q_full[start:stop]
    power = np.mean(i_s**2 + q_s**2)
    gain = 1.0 / np.sqrt(power)
    guard = span // 2
    return Waveform(
        i_s * gain, q_s * gain,
        symbols.ids[guard:guard + num_symbols].copy(),
        L, symbols.modulation, pulse.beta, span, float(gain),
    )


@dataclass
class DatasetConfig:
    modulations: tuple[Modulation, ...] = ALL_MODULATIONS
    roll_offs: tuple[float, ...] = ROLL_OFFS
    spans: tuple[int, ...] = SPANS
    num_symbols: int = NUM_SYMBOLS
    sps: int = SPS

    def __post_init__(self):
        self.modulations = parse_modulations(
            [m.value if isinstance(m, Modulation) else m for m in self.modulations]
        )
        self.roll_offs = tuple(float(b) for b in self.roll_offs)
        self.spans = tuple(int(s) for s in self.spans)
        if self.num_symbols < 1 or self.sps < 1:
            raise ValueError("num_symbols and sps must be >= 1")
        if not (self.modulations and self.roll_offs and self.spans):
            raise ValueError("dataset ranges must be non-empty")

    @property
    def num_samples(self) -> int:
        return self.num_symbols * self.sps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modulations"] = [m.value for m in self.modulations]
        d["roll_offs"] = list(self.roll_offs)
        d["spans"] = list(self.spans)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(**d)


def generate_example(
    cfg: DatasetConfig,
    rng: np.random.Generator,
    modulation: Modulation | None = None,
) -> Waveform:
    mod = modulation or cfg.modulations[rng.integers(len(cfg.modulations))]
    beta = cfg.roll_offs[rng.integers(len(cfg.roll_offs))]
    span = cfg.spans[rng.integers(len(cfg.spans))]
    symbols = draw_symbols(mod, cfg.num_symbols + span, rng)
    return synthesize(symbols, _cached_filter(beta, span, cfg.sps), cfg.num_symbols)


_FILTERS: dict[tuple[float, int, int], PulseShape] = {}


def _cached_filter(beta: float, span: int, sps: int) -> PulseShape:
    key = (beta, span, sps)
    if key not in _FILTERS:
        _FILTERS[key] = design_rc_filter(beta, span, sps)
    return _FILTERS[key]


def peak_samples(w: Waveform) -> np.ndarray:
    """Complex samples at the symbol peaks, with the normalization undone."""
    return w.complex_samples[:: w.sps] / w.gain


# -- file format ------------------------------------------------------------
#
# Records are concatenated. Each record: little-endian header
#   magic "MSMW", u16 version, u32 K, u32 L, u32 N, u8 modulation tag,
#   f64 beta, u32 span, f64 gain
# followed by N f32 I samples, N f32 Q samples, K u16 symbol IDs.

MAGIC = b"MSMW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIBdId")


def write_waveform(fh: BinaryIO, w: Waveform) -> None:
    fh.write(_HEADER.pack(
        MAGIC, FORMAT_VERSION, w.num_symbols, w.sps, w.num_samples,
        w.modulation.tag, w.beta, w.span, w.gain,
    ))
    fh.write(np.asarray(w.i_samples, dtype="<f4").tobytes())
    fh.write(np.asarray(w.q_samples, dtype="<f4").tobytes())
    fh.write(np.asarray(w.symbol_ids, dtype="<u2").tobytes())


def read_waveforms(fh: BinaryIO) -> Iterator[Waveform]:
    while True:
        head = fh.read(_HEADER.size)
        if not head:
            return
        if len(head) != _HEADER.size:
            raise ValueError("truncated waveform header")
        magic, version, K, L, N, tag, beta, span, gain = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported waveform format version {version}")
        if N != K * L:
            raise ValueError(f"inconsistent header: N={N} but K*L={K * L}")
        body = fh.read(8 * N + 2 * K)
        if len(body) != 8 * N + 2 * K:
            raise ValueError("truncated waveform body")
        i_s = np.frombuffer(body, dtype="<f4", count=N).astype(np.float64)
        q_s = np.frombuffer(body, dtype="<f4", count=N, offset=4 * N).astype(np.float64)
        ids = np.frombuffer(body, dtype="<u2", count=K, offset=8 * N).astype(np.int64)
        yield Waveform(i_s, q_s, ids, L, Modulation.from_tag(tag), beta, span, gain)


def save_waveforms(path: str | Path, waves: Sequence[Waveform]) -> None:
    with open(path, "wb") as fh:
        for w in waves:
            write_waveform(fh, w)


def load_waveforms(path: str | Path) -> list[Waveform]:
    with open(path, "rb") as fh:
        return list(read_waveforms(fh))


def waveform_to_json(w: Waveform) -> dict:
    vocab = build_vocabulary()
    return {
        "num_symbols": w.num_symbols,
        "sps": w.sps,
        "num_samples": w.num_samples,
        "modulation": w.modulation.value,
        "beta": w.beta,
        "span": w.span,
        "gain": w.gain,
        "symbol_ids": [int(i) for i in w.symbol_ids],
        "symbols": [[float(vocab.points[i].real), float(vocab.points[i].imag)] for i in w.symbol_ids],
        "i": [float(x) for x in w.i_samples],
        "q": [float(x) for x in w.q_samples],
    }


def waveform_from_json(d: dict) -> Waveform:
    return Waveform(
        np.asarray(d["i"], dtype=np.float64),
        np.asarray(d["q"], dtype=np.float64),
        np.asarray(d["symbol_ids"], dtype=np.int64),
        int(d["sps"]),
        Modulation.parse(d["modulation"]),
        float(d["beta"]),
        int(d["span"]),
        float(d["gain"]),
    )


def save_waveforms_json(path: str | Path, waves: Sequence[Waveform]) -> None:
    Path(path).write_text(json.dumps([waveform_to_json(w) for w in waves], indent=1))


def load_waveforms_json(path: str | Path) -> list[Waveform]:
    return [waveform_from_json(d) for d in json.loads(Path(path).read_text())]
