"""Streaming self-supervised training: fresh clean waveforms every step,
random symbol masking, weighted masked cross-entropy, Adam."""

from __future__ import annotations

import csv
import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .constellation import build_vocabulary, class_frequencies, inverse_frequency_weights
from .masking import MaskSpec, apply_mask, random_mask
from .model import (
    MaskedSymbolTransformer,
    ModelConfig,
    backward,
    build_model,
    load_checkpoint,
    save_checkpoint,
    stack_batch,
    write_npz,
)
from .waveform import DatasetConfig, Waveform, generate_example

log = logging.getLogger(__name__)

FULL_SCALE_TRAIN_STEPS = 37_551  # full-scale reference run; desk runs use far fewer


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_steps: int = 2000
    seed: int = 0
    mask_fraction: float = 0.15
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_every: int = 500
    log_every: int = 50
    fixed_batch: bool = False  # reuse the step-0 batch forever (overfit check)
    target_accuracy: float | None = None  # stop once batch accuracy reaches this
    grad_clip: float | None = None
    dtype: str = "float32"
    test_mode: bool = False  # float64 + deterministic kernels
    prefetch: int = 0  # batches generated ahead on a worker thread

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetConfig.from_dict(self.dataset)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 < self.mask_fraction < 1.0:
            raise ValueError("mask_fraction must be in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.model.max_len < self.dataset.num_samples:
            raise ValueError("model max_len is shorter than the generated waveforms")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.test_mode or self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# -- data ---------------------------------------------------------------------


@dataclass
class Batch:
    waves: list[Waveform]  # masked
    specs: list[MaskSpec]
    targets: np.ndarray  # ground-truth IDs of the masked symbols, row-major

    @property
    def num_targets(self) -> int:
        return len(self.targets)


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for (seed, step); batches are random-access."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, step)))


def next_batch(
    dataset: DatasetConfig, mask_fraction: float, batch_size: int, rng: np.random.Generator
) -> Batch:
    waves, specs, targets = [], [], []
    for _ in range(batch_size):
        w = generate_example(dataset, rng)
        spec = random_mask(w.num_symbols, mask_fraction, w.sps, rng)
        waves.append(apply_mask(w, spec))
        specs.append(spec)
        targets.append(w.symbol_ids[list(spec.masked_symbols)])
    return Batch(waves, specs, np.concatenate(targets))


class BatchStream:
    """Endless batch iterator; batch ``t`` depends only on (seed, t).

    With ``prefetch > 0`` a worker thread keeps up to that many batches
    ready in a bounded queue.
    """

    def __init__(self, cfg: TrainConfig, start_step: int = 0):
        self.cfg = cfg
        self.step = start_step
        self._fixed = None

    def make(self, step: int) -> Batch:
        if self.cfg.fixed_batch:
            if self._fixed is None:
                self._fixed = self._generate(0)
            return self._fixed
        return self._generate(step)

    def _generate(self, step: int) -> Batch:
        c = self.cfg
        return next_batch(c.dataset, c.mask_fraction, c.batch_size, step_rng(c.seed, step))

    def __iter__(self) -> Iterator[Batch]:
        if self.cfg.prefetch <= 0 or self.cfg.fixed_batch:
            while True:
                yield self.make(self.step)
                self.step += 1
        q: queue.Queue = queue.Queue(maxsize=self.cfg.prefetch)
        stop = threading.Event()

        def worker(step):
            while not stop.is_set():
                b = self.make(step)
                while not stop.is_set():
                    try:
                        q.put(b, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                step += 1

        t = threading.Thread(target=worker, args=(self.step,), daemon=True)
        t.start()
        try:
            while True:
                yield q.get()
                self.step += 1
        finally:
            stop.set()


# -- optimizer ----------------------------------------------------------------


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: dict[str, torch.nn.Parameter], grads: dict[str, torch.Tensor], state: AdamState) -> AdamState:
    """In-place bias-corrected Adam update of ``params``.

    A step with any non-finite gradient is rejected before anything changes.
    """
    bad = [n for n, g in grads.items() if not torch.isfinite(g).all()]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {bad[:5]}")
    if set(grads) != set(params):
        raise KeyError("gradient names do not match parameter names")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"{name}: gradient shape {tuple(grads[name].shape)} != {tuple(p.shape)}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


# -- loop ---------------------------------------------------------------------


class TrainingError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"training failed at step {step}: {cause}")
        self.step = step


@dataclass
class TrainState:
    model: MaskedSymbolTransformer
    adam: AdamState
    step: int = 0
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def class_weights_for(dataset: DatasetConfig) -> torch.Tensor:
    vocab = build_vocabulary()
    freq = class_frequencies(vocab.members, vocab.size, dataset.modulations)
    return torch.from_numpy(inverse_frequency_weights(freq))


def init_state(cfg: TrainConfig) -> TrainState:
    model = build_model(cfg.model, np.random.default_rng([cfg.seed, 1]), cfg.torch_dtype)
    adam = AdamState(cfg.learning_rate, cfg.betas[0], cfg.betas[1], cfg.adam_eps)
    return TrainState(model, adam)


def train_step(state: TrainState, batch: Batch, weights: torch.Tensor, cfg: TrainConfig) -> tuple[float, float]:
    dtype = next(state.model.parameters()).dtype
    samples, mask, targets = stack_batch(batch.waves, batch.specs, dtype)
    logits = state.model(samples, mask)
    loss, grads = backward(state.model, logits, targets, weights)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    if cfg.grad_clip:
        total = torch.sqrt(sum((g**2).sum() for g in grads.values()))
        scale = min(1.0, cfg.grad_clip / (float(total) + 1e-12))
        grads = {n: g * scale for n, g in grads.items()}
    adam_step(dict(state.model.named_parameters()), grads, state.adam)
    state.step += 1
    acc = float((logits.detach().argmax(-1) == targets).double().mean())
    return loss, acc


def train(cfg: TrainConfig, out_dir: str | Path | None = None, state: TrainState | None = None) -> TrainState:
    """Run up to ``cfg.max_steps`` optimizer steps (resuming ``state`` if given)."""
    if cfg.test_mode:
        torch.use_deterministic_algorithms(True)
    state = state or init_state(cfg)
    weights = class_weights_for(cfg.dataset)
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    stream = iter(BatchStream(cfg, start_step=state.step))
    t0 = time.time()
    try:
        while state.step < cfg.max_steps:
            batch = next(stream)
            try:
                loss, acc = train_step(state, batch, weights, cfg)
            except (FloatingPointError, ValueError) as exc:
                raise TrainingError(state.step, exc) from exc
            state.losses.append(loss)
            state.accuracies.append(acc)
            if cfg.log_every and state.step % cfg.log_every == 0:
                log.info("step %d loss %.4f acc %.4f (%.1fs)", state.step, loss, acc, time.time() - t0)
            if out and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_train_state(out / "checkpoints" / f"step_{state.step:07d}", state, cfg)
            if cfg.target_accuracy is not None and acc >= cfg.target_accuracy:
                log.info("reached accuracy %.4f at step %d", acc, state.step)
                break
    finally:
        stream.close()
    if out:
        save_checkpoint(out / "model.npz", state.model, {"step": state.step, "seed": cfg.seed})
        save_train_state(out / "checkpoints" / f"step_{state.step:07d}", state, cfg)
        write_loss_curve(out / "loss.csv", state)
    return state


def write_loss_curve(path: Path, state: TrainState) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "accuracy"])
        for i, (l, a) in enumerate(zip(state.losses, state.accuracies), start=1):
            w.writerow([i, repr(l), repr(a)])


def save_train_state(prefix: Path, state: TrainState, cfg: TrainConfig) -> None:
    """``prefix``.npz holds the model, ``prefix``.adam.npz the moments."""
    save_checkpoint(prefix.with_suffix(".npz"), state.model, {"step": state.step, "seed": cfg.seed})
    a = state.adam
    arrays = {}
    for n in a.m:
        arrays["m/" + n] = a.m[n].detach().to(torch.float64).numpy()
        arrays["v/" + n] = a.v[n].detach().to(torch.float64).numpy()
    meta = {"t": a.t, "lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps,
            "step": state.step, "losses": state.losses, "accuracies": state.accuracies}
    write_npz(str(prefix) + ".adam.npz", {"__meta__": np.array(json.dumps(meta)), **arrays})


def load_train_state(prefix: str | Path, cfg: TrainConfig) -> TrainState:
    prefix = Path(prefix)
    model, _ = load_checkpoint(prefix.with_suffix(".npz"), cfg.torch_dtype)
    with np.load(str(prefix) + ".adam.npz", allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        adam = AdamState(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], meta["t"])
        for key in data.files:
            if key == "__meta__":
                continue
            kind, name = key.split("/", 1)
            getattr(adam, kind)[name] = torch.from_numpy(data[key]).to(cfg.torch_dtype)
    return TrainState(model, adam, meta["step"], meta["losses"], meta["accuracies"])
