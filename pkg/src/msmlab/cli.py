"""``msm`` command-line entry point.

Config precedence for ``train`` and ``eval``: command-line flags override
values from ``--config`` (a JSON file), which override built-in defaults.

Exit status: 0 success, 1 runtime failure, 2 bad usage/unknown flag,
3 malformed config, 4 missing input file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .constellation import build_vocabulary, format_vocabulary
from .masking import MaskSpec, apply_mask, random_mask
from .noise import (
    calibrate_impulsive_index,
    concentration_epsilon,
    exact_chernoff_epsilon,
    hit_mask,
    params_from_snr,
    sample_hit_probability,
    sample_noise,
    symbol_hit_probability,
)
from .waveform import (
    DatasetConfig,
    generate_example,
    load_waveforms,
    load_waveforms_json,
    save_waveforms,
    save_waveforms_json,
)

EXIT_FAILURE, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3, 4


class ConfigError(Exception):
    pass


class MissingInputError(Exception):
    pass


def _fmt(x: float) -> str:
    # repr of a Python float is locale-independent and round-trips
    return repr(float(x))


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise MissingInputError(f"missing required input: {what}")
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} not found: {p}")
    return p


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = _require(path, "config file")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return cfg


def _write_manifest(path: Path | None, args, config: dict, outputs: list[str], started: float) -> None:
    """One manifest per run: next to the outputs, or one JSON line on stderr."""
    manifest = {
        "subcommand": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "outputs": outputs,
        "duration_s": time.time() - started,
    }
    if path is None:
        print("manifest: " + json.dumps(manifest, sort_keys=True, default=str), file=sys.stderr)
    else:
        Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _dataset_from_args(args, base: dict | None = None) -> DatasetConfig:
    d = dict(base or {})
    if getattr(args, "modulation", None) and args.modulation.lower() != "mixed":
        d["modulations"] = [m for m in args.modulation.replace(",", " ").split()]
    for flag, key in (("symbols", "num_symbols"), ("sps", "sps"), ("roll_off", "roll_offs"), ("span", "spans")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    try:
        return DatasetConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad dataset config: {exc}") from exc


# -- subcommands --------------------------------------------------------------


def cmd_vocab(args) -> list[str]:
    vocab = build_vocabulary()
    if args.format == "csv":
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["id", "i", "q", "modulations"])
        for idx in range(vocab.size):
            p = vocab.points[idx]
            w.writerow([idx, _fmt(p.real), _fmt(p.imag), " ".join(m.value for m in vocab.modulations_of(idx))])
    else:
        print(format_vocabulary(vocab))
    return []


def cmd_gen(args) -> list[str]:
    cfg = _dataset_from_args(args)
    rng = np.random.default_rng(args.seed)
    waves = [generate_example(cfg, rng) for _ in range(args.count)]
    if args.format == "json":
        save_waveforms_json(args.out, waves)
    else:
        save_waveforms(args.out, waves)
    return [str(args.out)]


def cmd_noise_calibrate(args) -> list[str]:
    A = calibrate_impulsive_index(args.p_star, args.sps)
    p_sym = symbol_hit_probability(A, args.sps)
    rep = concentration_epsilon(p_sym, args.symbols, args.delta)
    lo, hi = rep.interval
    print(f"A*          {A:.10f}")
    print(f"p_sample    {sample_hit_probability(A):.10f}")
    print(f"p_sym       {p_sym:.10f}")
    print(f"epsilon     {rep.epsilon:.6f}")
    print(f"interval    [{lo:.6f}, {hi:.6f}]")
    print(f"epsilon_kl  {exact_chernoff_epsilon(p_sym, args.symbols, args.delta):.6f}  (exact KL inversion)")
    return []


def cmd_noise_stats(args) -> list[str]:
    K, L = args.symbols, args.sps
    A = args.impulsive_index or calibrate_impulsive_index(args.p_star, L)
    params = params_from_snr(args.snr_db, args.gamma, A)
    rng = np.random.default_rng(args.seed)
    hist = np.zeros(K + 1, dtype=np.int64)
    power_sum, n_samples = 0.0, 0
    remaining = args.waveforms
    while remaining:
        chunk = min(remaining, 1000)
        noise = sample_noise(params, (chunk, K * L), rng)
        hist += np.bincount(hit_mask(noise.counts, L).sum(axis=1), minlength=K + 1)
        power_sum += float(np.sum(noise.z_i**2 + noise.z_q**2))
        n_samples += noise.counts.size
        remaining -= chunk
    p = symbol_hit_probability(A, L)
    binom = np.array([math.comb(K, s) * p**s * (1 - p) ** (K - s) for s in range(K + 1)])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["hits", "hit_rate", "waveforms", "empirical_prob", "binomial_prob"])
        for s in range(K + 1):
            w.writerow([s, _fmt(s / K), int(hist[s]), _fmt(hist[s] / args.waveforms), _fmt(binom[s])])
    finally:
        if out is not sys.stdout:
            out.close()
    mean_rate = float(np.dot(np.arange(K + 1), hist) / (K * args.waveforms))
    print(f"mean hit rate {mean_rate:.6f} (expected {p:.6f}); noise power {power_sum / n_samples:.6g} "
          f"(expected {params.sigma_total2:.6g})", file=sys.stderr)
    return [str(args.out)] if args.out else []


def cmd_mask(args) -> list[str]:
    src = _require(args.input, "waveform file")
    waves = load_waveforms_json(src) if args.format == "json" else load_waveforms(src)
    if args.spec:
        spec_path = _require(args.spec, "mask spec")
        try:
            specs = [MaskSpec.from_json(spec_path.read_text())] * len(waves)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{spec_path}: {exc}") from exc
    else:
        rng = np.random.default_rng(args.seed)
        specs = [random_mask(w.num_symbols, args.fraction, w.sps, rng) for w in waves]
    masked = [apply_mask(w, s) for w, s in zip(waves, specs)]
    if args.format == "json":
        save_waveforms_json(args.out, masked)
    else:
        save_waveforms(args.out, masked)
    outputs = [str(args.out)]
    if args.spec_out:
        Path(args.spec_out).write_text(
            json.dumps([json.loads(s.to_json()) for s in specs], indent=1)
        )
        outputs.append(str(args.spec_out))
    return outputs


def _train_config(args):
    from .training import TrainConfig

    d = _load_config(args.config)
    overrides = {
        "seed": args.seed, "max_steps": args.steps, "batch_size": args.batch_size,
        "learning_rate": args.lr, "checkpoint_every": args.checkpoint_every,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.test_mode:
        d["test_mode"] = True
    ds = _dataset_from_args(args, d.get("dataset"))
    d["dataset"] = ds.to_dict()
    try:
        cfg = TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc
    return cfg


def cmd_train(args) -> list[str]:
    from .training import load_train_state, train

    cfg = _train_config(args)
    args._config_snapshot = cfg.to_dict()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    state = None
    if args.resume:
        _require(str(Path(args.resume).with_suffix(".npz")), "resume checkpoint")
        state = load_train_state(args.resume, cfg)
    state = train(cfg, out, state)
    print(f"trained {state.step} steps; final loss {state.losses[-1]:.6f}" if state.losses else "no steps run")
    return [str(out / "model.npz"), str(out / "loss.csv"), str(out / "config.json")]


def _eval_config(args):
    from .evaluation import EvalConfig

    d = _load_config(args.config)
    overrides = {"batch_size": args.batch_size, "batches_per_seed": args.batches,
                 "min_targets": args.min_targets}
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.seeds is not None:
        d["seeds"] = args.seeds
    elif args.seed is not None:
        d["seeds"] = [args.seed, args.seed + 1, args.seed + 2]
    if args.modulation:
        d["modulation"] = args.modulation
    ds = dict(d.get("dataset") or {})
    if args.train_modulations:
        ds["modulations"] = args.train_modulations.replace(",", " ").split()
    d["dataset"] = _dataset_from_args(argparse.Namespace(
        modulation=None, symbols=args.symbols, sps=args.sps, roll_off=None, span=None), ds).to_dict()
    try:
        return EvalConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad evaluation config: {exc}") from exc


def cmd_eval(args) -> list[str]:
    import torch

    from .evaluation import DEFAULT_GAMMAS, run_clean_scenario, run_impulsive_scenario
    from .model import CheckpointError, load_checkpoint

    ckpt = _require(args.checkpoint, "checkpoint (--checkpoint)")
    cfg = _eval_config(args)
    args._config_snapshot = cfg.to_dict()
    try:
        model, _ = load_checkpoint(ckpt, torch.float64 if args.test_mode else torch.float32)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    if args.test_mode:
        torch.use_deterministic_algorithms(True)
    if args.scenario == "clean":
        reports = [run_clean_scenario(model, cfg)]
    else:
        gammas = args.gamma or list(DEFAULT_GAMMAS)
        reports = [run_impulsive_scenario(model, cfg, g, args.snr_grid) for g in gammas]
    out = Path(args.out)
    payload = [json.loads(r.to_json()) for r in reports]
    out.write_text(json.dumps(payload if len(payload) > 1 else payload[0], indent=2, sort_keys=True))
    csv_path = out.with_suffix(".csv")
    csv_text = "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports))
    csv_path.write_text(csv_text)
    for r in reports:
        print(r.summary())
    return [str(out), str(csv_path)]


def cmd_report(args) -> list[str]:
    from .evaluation import EvalReport

    p = _require(args.report, "report file")
    try:
        data = json.loads(p.read_text())
        reports = [EvalReport(**d) for d in (data if isinstance(data, list) else [data])]
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"{p}: not an evaluation report ({exc})") from exc
    print("\n\n".join(r.summary() for r in reports))
    return []


# -- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msm", description="Masked symbol modeling lab for pulse-shaped baseband signals.")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap on worker/BLAS threads")
    common.add_argument("--manifest", default=None,
                        help="run manifest path (default: <first output>.manifest.json, "
                             "or one JSON line on stderr for commands that only print)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("vocab", parents=[common], help="print the 272-entry symbol vocabulary")
    s.add_argument("--format", choices=("text", "csv"), default="text", help="text table or CSV")
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")

    def dataset_flags(s, with_modulation=True):
        if with_modulation:
            s.add_argument("--modulation", default="mixed",
                           help="'mixed' or comma-separated modulation names (default mixed)")
        s.add_argument("--symbols", type=int, default=None, help="symbols per waveform K (default 128)")
        s.add_argument("--sps", type=int, default=None, help="samples per symbol L (default 8)")
        s.add_argument("--roll-off", type=_floats, default=None, help="roll-off set, e.g. '0.25,0.35'")
        s.add_argument("--span", type=_ints, default=None, help="filter span set in symbols")

    s = sub.add_parser("gen", parents=[common], help="write synthesized waveforms")
    dataset_flags(s)
    s.add_argument("--count", type=int, default=1, help="number of waveforms")
    s.add_argument("--seed", type=int, default=0, help="RNG seed")
    s.add_argument("--out", default="waveforms.bin", help="output file")
    s.add_argument("--format", choices=("bin", "json"), default="bin", help="bin (compact binary) or json")

    s = sub.add_parser("noise-calibrate", parents=[common], help="impulsive index and hit-rate concentration")
    s.add_argument("--p-star", type=float, default=0.15, help="target average symbol-hit rate")
    s.add_argument("--sps", type=int, default=8, help="samples per symbol L")
    s.add_argument("--symbols", type=int, default=128, help="symbols per waveform K")
    s.add_argument("--delta", type=float, default=0.05, help="failure probability of the bound")
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")

    s = sub.add_parser("noise-stats", parents=[common], help="Monte-Carlo symbol-hit histogram as CSV")
    s.add_argument("--waveforms", type=int, default=10_000, help="number of noise realizations")
    s.add_argument("--symbols", type=int, default=128, help="symbols per waveform K")
    s.add_argument("--sps", type=int, default=8, help="samples per symbol L")
    s.add_argument("--p-star", type=float, default=0.15, help="target average symbol-hit rate")
    s.add_argument("--impulsive-index", type=float, default=None, help="override A (default: calibrated)")
    s.add_argument("--gamma", type=float, default=1e-3, help="Gaussian-to-impulsive power ratio")
    s.add_argument("--snr-db", type=float, default=10.0, help="SNR in dB (unit signal power)")
    s.add_argument("--seed", type=int, default=0, help="RNG seed")
    s.add_argument("--out", default=None, help="CSV path (default stdout)")

    s = sub.add_parser("mask", parents=[common], help="apply a mask spec to a waveform file")
    s.add_argument("--in", dest="input", required=True, help="input waveform file")
    s.add_argument("--out", required=True, help="output waveform file")
    s.add_argument("--spec", default=None, help="JSON mask spec applied to every waveform")
    s.add_argument("--fraction", type=float, default=0.15, help="random mask rate when no --spec")
    s.add_argument("--spec-out", default=None, help="write the applied specs as JSON")
    s.add_argument("--format", choices=("bin", "json"), default="bin", help="file format of input and output")
    s.add_argument("--seed", type=int, default=0, help="RNG seed for random masks")

    s = sub.add_parser("train", parents=[common], help="streaming masked-symbol training")
    s.add_argument("--config", default=None, help="JSON training config")
    dataset_flags(s)
    s.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    s.add_argument("--steps", type=int, default=None, help="optimizer steps (default 2000)")
    s.add_argument("--batch-size", type=int, default=None, help="waveforms per step (default 64)")
    s.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 1e-3)")
    s.add_argument("--checkpoint-every", type=int, default=None, help="steps between checkpoints (default 500)")
    s.add_argument("--test-mode", action="store_true", help="float64 and deterministic kernels")
    s.add_argument("--resume", default=None, help="checkpoint prefix to resume from")
    s.add_argument("--out", default="run", help="run directory for checkpoints, loss curve and manifest")

    s = sub.add_parser("eval", parents=[common], help="SER evaluation of a checkpoint")
    s.add_argument("--checkpoint", default=None, help="model.npz from a training run (required)")
    s.add_argument("--config", default=None, help="JSON evaluation config")
    s.add_argument("--scenario", choices=("clean", "impulsive"), default="clean",
                   help="clean random masks, or impulsive noise with impulse-guided masks")
    s.add_argument("--modulation", default=None, help="'mixed' or a single modulation")
    s.add_argument("--train-modulations", default=None,
                   help="modulation set sampled in mixed mode (default: all eight)")
    s.add_argument("--symbols", type=int, default=None, help="symbols per waveform K")
    s.add_argument("--sps", type=int, default=None, help="samples per symbol L")
    s.add_argument("--gamma", type=_floats, default=None, help="Gamma values (default 1e-3,1e-6)")
    s.add_argument("--snr-grid", type=_floats, default=[-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
                   help="SNR points in dB; write --snr-grid=-5,0,... when the first value is negative")
    s.add_argument("--seeds", type=_ints, default=None, help="evaluation seeds (default 0,1,2)")
    s.add_argument("--seed", type=int, default=None, help="base seed; uses seed, seed+1, seed+2")
    s.add_argument("--batch-size", type=int, default=None, help="waveforms per batch (default 64)")
    s.add_argument("--batches", type=int, default=None, help="batches per seed (clean scenario)")
    s.add_argument("--min-targets", type=int, default=None, help="targets per seed and SNR (impulsive)")
    s.add_argument("--test-mode", action="store_true", help="float64 and deterministic kernels")
    s.add_argument("--out", default="report.json", help="JSON report path (CSV written alongside)")

    s = sub.add_parser("report", parents=[common], help="render an evaluation report as a table")
    s.add_argument("report", help="JSON report written by eval")
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    return p


COMMANDS = {
    "vocab": cmd_vocab, "gen": cmd_gen, "noise-calibrate": cmd_noise_calibrate,
    "noise-stats": cmd_noise_stats, "mask": cmd_mask, "train": cmd_train,
    "eval": cmd_eval, "report": cmd_report,
}


def _default_manifest(args, outputs: list[str]) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    if args.command == "train":
        return Path(args.out) / "manifest.json"
    if outputs:
        return Path(outputs[0] + ".manifest.json")
    return None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    started = time.time()
    try:
        outputs = COMMANDS[args.command](args)
    except MissingInputError as exc:
        print(f"msm {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"msm {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"msm {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    config = getattr(args, "_config_snapshot", None) or {
        k: v for k, v in vars(args).items() if not k.startswith("_")
    }
    _write_manifest(_default_manifest(args, outputs), args, config, outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
