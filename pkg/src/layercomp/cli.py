"""Command-line driver: ``layercomp MODE [--config FILE] [--KEY VALUE ...]``.

Configuration is a flat JSON object; every key has a matching ``--key`` flag
and flags override file values. Exit codes: 0 success, 1 validation error,
2 runtime assertion failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from . import cost, reports
from .encoder import EncoderConfig, init_encoder_params, resolve_k, shape_trace
from .errors import ConfigurationError, DivisibilityError, EvaluationError, LayerCompError
from .experiments import TrainConfig, train_stage1
from .pml import MergerVariant, save_params
from .verify import encode_gradcheck, pml_gradcheck

MODES = ("shapes", "flops", "bench", "gradcheck", "train", "sweep")
THREADS_ENV = "LACO_KIT_THREADS"

EXIT_OK, EXIT_VALIDATION, EXIT_ASSERTION, EXIT_IO = 0, 1, 2, 3

# key -> (parser, default, help)
KEYS = {
    "mode": (str, "shapes", "one of " + ", ".join(MODES)),
    "L": (int, 12, "number of encoder blocks"),
    "d": (int, 64, "model width"),
    "heads": (int, 2, "attention heads (must divide d)"),
    "mlp_width": (int, None, "feed-forward width (default 4*d)"),
    "patch": (int, 4, "patch edge in pixels"),
    "image_edge": (int, 64, "input image edge in pixels (multiple of patch)"),
    "r": (int, 2, "merge ratio; token count shrinks by r^2"),
    "k": (int, None, "insert the merger after block k (0..L); exclusive with fraction"),
    "fraction": (float, None, "insertion depth as a fraction of L, k = round(L*fraction) >= 1 "
                              "(default 0.25 when neither k nor fraction is given)"),
    "variant": (str, "pml_residual", "merger: " + ", ".join(v.value for v in MergerVariant)),
    "variants": (str, None, "comma-separated merger variants for sweep (default: variant)"),
    "hidden": (int, None, "merger MLP hidden width (default r^2*d)"),
    "seed": (int, 0, "random seed"),
    "out": (str, None, "output file (default: stdout)"),
    "format": (str, "json", "report format: json or csv"),
    "trials": (int, 5, "timed trials for bench/sweep (>= 5)"),
    "warmup": (int, 1, "untimed warmup runs (>= 1)"),
    "fractions": (str, "1/12,1/6,1/4,1/2,1", "comma-separated depth fractions for sweep"),
    "bench": (int, 0, "sweep only: 1 to also measure latency"),
    "plot": (str, None, "sweep only: stem for <stem>.dat and <stem>.gp plot files"),
    "coords": (int, 100, "gradcheck: sampled coordinates per check"),
    "steps": (int, 200, "train: gradient-descent steps"),
    "lr": (float, 0.05, "train: learning rate"),
    "batch": (int, 4, "train: images in the fixed training batch"),
    "params_out": (str, None, "train: write trained merger params to this file"),
}


@dataclass
class RunConfig:
    mode: str
    encoder: EncoderConfig
    r: int
    k: int | None
    fraction: float | None
    variant: MergerVariant
    variants: list[MergerVariant]
    hidden: int | None
    seed: int
    out: str | None
    format: str
    trials: int
    warmup: int
    fractions: list[float]
    bench: bool
    plot: str | None
    coords: int
    steps: int
    lr: float
    batch: int
    params_out: str | None

    def metadata(self) -> dict:
        return {
            "mode": self.mode,
            "config": dataclasses.asdict(self.encoder),
            "k": self.k,
            "fraction": self.fraction,
            "r": self.r,
            "variant": self.variant.value,
            "seed": self.seed,
        }


def _parse_fraction(text) -> float:
    return float(Fraction(str(text).strip()))


def _parse_fractions(value) -> list[float]:
    if isinstance(value, (list, tuple)):
        return [_parse_fraction(v) for v in value]
    text = str(value).strip()
    return [_parse_fraction(v) for v in text.split(",")] if text else []


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for failed postconditions
    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="layercomp",
        description="Layer-wise token merging in a toy ViT: shapes, FLOPs, latency, "
                    "gradient checks, frozen-encoder training and depth sweeps.",
        epilog=f"Environment: {THREADS_ENV} caps sweep worker threads (ignored when timing). "
               "Exit codes: 0 success, 1 invalid config, 2 failed check, 3 I/O error.",
    )
    parser.add_argument("mode_arg", nargs="?", choices=MODES, metavar="MODE",
                        help="one of " + ", ".join(MODES) + " (overrides the config's mode)")
    parser.add_argument("--config", help="flat JSON config file; flags override its values")
    for key, (_, default, text) in KEYS.items():
        if key == "mode":
            continue
        shown = "" if default is None else f" [default: {default}]"
        parser.add_argument(f"--{key}", default=argparse.SUPPRESS, help=text + shown)
    return parser


def _coerce(key, value):
    kind = KEYS[key][0]
    if value is None:
        return None
    if key == "fractions":
        return _parse_fractions(value)
    if key == "fraction":
        return _parse_fraction(value)
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


def parse_config(argv=None) -> RunConfig:
    """Build a validated config; flags override the JSON file, which overrides defaults."""
    args = vars(build_parser().parse_args(argv))
    values = {key: _coerce(key, entry[1]) for key, entry in KEYS.items()}
    given: dict = {}

    config_path = args.pop("config", None)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {config_path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {config_path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"config {config_path} must be a JSON object")
        for key, value in doc.items():
            if key not in KEYS:
                raise ConfigurationError(f"unknown config key {key!r}")
            given[key] = value
    mode_arg = args.pop("mode_arg", None)
    given.update(args)
    if mode_arg is not None:
        given["mode"] = mode_arg
    for key, value in given.items():
        values[key] = _coerce(key, value)

    mode = values["mode"]
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r} (expected one of {', '.join(MODES)})")
    if values["format"] not in ("json", "csv"):
        raise ConfigurationError(f"unknown format {values['format']!r} (expected json or csv)")
    enc = EncoderConfig(
        L=values["L"], d=values["d"], heads=values["heads"], mlp_width=values["mlp_width"],
        patch=values["patch"], image_edge=values["image_edge"],
    )
    r = values["r"]
    if r is None or r < 1:
        raise ConfigurationError(f"r must be an integer >= 1, got {r!r}")
    if enc.grid_edge % r:
        raise DivisibilityError(f"grid edge {enc.grid_edge} (image_edge/patch) is not divisible by r={r}")

    k, fraction = values["k"], values["fraction"]
    if k is not None and fraction is not None:
        raise ConfigurationError(f"both k={k} and fraction={fraction} given; set exactly one")
    if k is None and fraction is None:
        fraction = 0.25
    if fraction is not None:
        k = resolve_k(enc.L, fraction)
    if not 0 <= k <= enc.L:
        raise ConfigurationError(f"k={k} must lie in [0, L={enc.L}]")

    variant = MergerVariant.parse(values["variant"])
    variants = (
        [MergerVariant.parse(v) for v in values["variants"].split(",") if v.strip()]
        if values["variants"] else [variant]
    )
    for f in values["fractions"]:
        if not 0.0 < f <= 1.0:
            raise ConfigurationError(f"sweep fraction {f} outside (0, 1]")
    if values["trials"] < 5 or values["warmup"] < 1:
        raise ConfigurationError(
            f"need trials >= 5 and warmup >= 1, got trials={values['trials']} warmup={values['warmup']}"
        )
    try:
        TrainConfig(steps=values["steps"], lr=values["lr"], seed=values["seed"], batch=values["batch"])
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None

    return RunConfig(
        mode=mode, encoder=enc, r=r, k=k, fraction=fraction, variant=variant, variants=variants,
        hidden=values["hidden"], seed=values["seed"], out=values["out"], format=values["format"],
        trials=values["trials"], warmup=values["warmup"], fractions=values["fractions"],
        bench=bool(values["bench"]), plot=values["plot"], coords=values["coords"],
        steps=values["steps"], lr=values["lr"], batch=values["batch"], params_out=values["params_out"],
    )


class PostconditionError(LayerCompError, AssertionError):
    """A run finished but one of its declared postconditions did not hold."""


def _expect(ok: bool, message: str) -> None:
    if not ok:
        raise PostconditionError(message)


def _workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def _run_shapes(cfg: RunConfig) -> dict:
    trace = shape_trace(cfg.encoder, cfg.k, cfg.r, cfg.variant)
    n, r = cfg.encoder.num_tokens, cfg.r
    k_eff = cfg.encoder.L if cfg.variant is MergerVariant.EXTERNAL else cfg.k
    _expect(all(t == (n if i <= k_eff else n // (r * r)) for i, t in enumerate(trace, 1)),
            "shape trace violates the token-count contract")
    return {
        "mode": "shapes",
        "metadata": cfg.metadata(),
        "tokens_out": n // (r * r),
        "trace": [{"layer": i, "tokens": t} for i, t in enumerate(trace, start=1)],
    }


def _check_cost(rep: cost.CostReport, cfg: RunConfig) -> None:
    if rep.error:
        return
    _expect(rep.tokens_out == cfg.encoder.num_tokens // (cfg.r * cfg.r), "tokens_out mismatch")
    _expect(all(c.attn_flops >= 0 and c.mlp_flops >= 0 and c.merger_flops >= 0 for c in rep.layers),
            "negative FLOP entry")
    if rep.latency is not None:
        _expect(rep.latency.median_s > 0, "non-positive latency")


def _run_flops(cfg: RunConfig) -> dict:
    rep = cost.estimate_flops(cfg.encoder, cfg.k, cfg.r, cfg.variant, cfg.hidden,
                              seed=cfg.seed, fraction=cfg.fraction)
    _check_cost(rep, cfg)
    return reports.cost_document(rep, "flops")


def _run_bench(cfg: RunConfig) -> dict:
    rep = cost.bench(cfg.encoder, cfg.k, cfg.r, cfg.variant, cfg.trials, cfg.warmup, cfg.seed,
                     fraction=cfg.fraction)
    _check_cost(rep, cfg)
    return reports.cost_document(rep, "bench")


def _run_gradcheck(cfg: RunConfig) -> dict:
    checks = [
        pml_gradcheck(channels=cfg.encoder.d, r=cfg.r, hidden=cfg.hidden or cfg.r * cfg.r * cfg.encoder.d,
                      height=2 * cfg.r, width=2 * cfg.r, seed=cfg.seed, coords=cfg.coords),
        encode_gradcheck(cfg.encoder, cfg.k, cfg.r, cfg.variant, seed=cfg.seed, coords=cfg.coords),
    ]
    doc = {"mode": "gradcheck", "metadata": cfg.metadata(), "checks": [c.to_dict() for c in checks]}
    doc["passed"] = all(c.passed for c in checks)
    return doc


def _run_train(cfg: RunConfig) -> dict:
    tcfg = TrainConfig(steps=cfg.steps, lr=cfg.lr, seed=cfg.seed, batch=cfg.batch)
    params = init_encoder_params(cfg.encoder, cfg.r, seed=cfg.seed, hidden=cfg.hidden)
    before = [t.data.copy() for t in params.encoder_tensors()]
    log = train_stage1(params, tcfg, cfg.encoder, cfg.k, cfg.r, cfg.variant)
    _expect(len(log.losses) == tcfg.steps, "loss trace length differs from step count")
    _expect(all(math.isfinite(v) for v in log.losses), "non-finite loss in trace")
    _expect(all((a == t.data).all() for a, t in zip(before, params.encoder_tensors())),
            "frozen encoder weights changed during training")
    if cfg.params_out:
        save_params(params.pml, cfg.params_out)
    meta = cfg.metadata()
    meta.update(steps=tcfg.steps, lr=tcfg.lr, batch=tcfg.batch, objective=tcfg.objective)
    return {
        "mode": "train",
        "metadata": meta,
        "initial_loss": log.losses[0],
        "final_loss": log.losses[-1],
        "steps": list(log.rows()),
    }


def _run_sweep(cfg: RunConfig) -> tuple[dict, list[cost.CostReport]]:
    reps = cost.sweep(cfg.encoder, cfg.fractions, cfg.r, cfg.variants, measure=cfg.bench,
                      trials=cfg.trials, warmup=cfg.warmup, seed=cfg.seed, workers=_workers())
    for rep in reps:
        _check_cost(rep, cfg)
    meta = cfg.metadata()
    meta.update(fractions=cfg.fractions, variants=[v.value for v in cfg.variants])
    return reports.sweep_document(reps, meta), reps


def run(cfg: RunConfig) -> int:
    """Run one mode and return the process exit code; the report goes to ``--out`` or stdout."""
    try:
        reps = None
        if cfg.mode == "sweep":
            doc, reps = _run_sweep(cfg)
        else:
            doc = {
                "shapes": _run_shapes, "flops": _run_flops, "bench": _run_bench,
                "gradcheck": _run_gradcheck, "train": _run_train,
            }[cfg.mode](cfg)
    except (ConfigurationError, DivisibilityError) as exc:
        print(f"layercomp: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PostconditionError, EvaluationError) as exc:
        print(f"layercomp: {cfg.mode} failed: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    except OSError as exc:
        print(f"layercomp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        text = reports.emit_report(doc, cfg.format, cfg.out)
        if cfg.out is None:
            sys.stdout.write(text)
        if reps and cfg.plot:
            reports.emit_plot(reps, cfg.plot)
    except OSError as exc:
        print(f"layercomp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO

    if cfg.mode == "gradcheck" and not doc["passed"]:
        worst = max(doc["checks"], key=lambda c: c["max_rel_error"] / c["tolerance"])
        print(f"layercomp: gradient check {worst['name']} failed: relative error "
              f"{worst['max_rel_error']:.3g} > {worst['tolerance']:.0e}", file=sys.stderr)
        return EXIT_ASSERTION
    if cfg.mode == "sweep" and any(r.error for r in reps or []):
        for r in reps:
            if r.error:
                print(f"layercomp: sweep point fraction={r.metadata.get('fraction')}: {r.error}",
                      file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_OK


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except (ConfigurationError, DivisibilityError) as exc:
        print(f"layercomp: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
