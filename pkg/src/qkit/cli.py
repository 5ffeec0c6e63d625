"""``qkit`` command line: calibrate -> ptq -> sensitivity/partial -> qat, plus eval and make-toy.

Exit codes: 0 success, 1 error, 2 accuracy target not met (``ptq`` with no
method within ``--accept-drop``, ``partial`` when the target is unreachable).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from qkit import __version__, toy
from qkit.calib import DEFAULT_BINS, DEFAULT_METHODS, CacheEntry, CalibrationMethod, read_cache, write_cache
from qkit.formats import load_dataset, load_model, save_dataset, save_model
from qkit.graph import Model
from qkit.qat import TrainConfig, train
from qkit.quant import scale_params
from qkit.workflow import (PtqReport, SensitivityReport, apply_calibration, calibrate_model, calibrated_layers,
                           evaluate, gelu10, partial_quantize, run_ptq, sensitivity_scan)

log = logging.getLogger("qkit")

EXIT_OK, EXIT_ERROR, EXIT_REJECTED = 0, 1, 2


class CliError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    inputs: list[str]
    config_hash: str
    version: str = __version__
    wall_clock_s: float = 0.0
    outputs: list[str] = field(default_factory=list)
    exit_code: int = 0

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n")


def _file_digest(path: str) -> str:
    p = Path(path)
    return hashlib.sha256(p.read_bytes()).hexdigest() if p.is_file() else "missing"


def config_hash(args: argparse.Namespace, inputs: list[str]) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "manifest")}
    blob = json.dumps({"args": cfg, "inputs": {p: _file_digest(p) for p in inputs}}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _need(path: Optional[str], what: str) -> str:
    if path is None:
        raise CliError(f"missing {what}")
    if not Path(path).is_file():
        raise CliError(f"{what} not found: {path}")
    return path


def _model(path: str) -> Model:
    return load_model(_need(path, "model file"))


def _data(path: str, what: str = "dataset"):
    return load_dataset(_need(path, what))


def _method(args) -> CalibrationMethod:
    if args.method == "percentile":
        return CalibrationMethod.percentile(args.fraction)
    return CalibrationMethod.parse(args.method)


def _prepare(model: Model, args) -> Model:
    return gelu10(model) if getattr(args, "gelu10", False) else model


# -- commands -----------------------------------------------------------------

def cmd_make_toy(args, outputs: list[str]) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, train_data, eval_data = toy.make_toy(seed=args.seed, poison=args.poison)
    for name, write, obj in (("model.qkm", save_model, model), ("train.qkd", save_dataset, train_data),
                             ("eval.qkd", save_dataset, eval_data)):
        write(out / name, obj)
        outputs.append(str(out / name))
    return EXIT_OK


def cmd_calibrate(args, outputs: list[str]) -> int:
    model = _prepare(_model(args.model), args)
    entries = calibrate_model(model, _data(args.data), _method(args), args.bins, args.bits)
    done = {e.tensor for e in entries}
    for layer in model.quantizable_layers:
        if layer.input_tensor not in done:
            print(f"degenerate tensor {layer.input_tensor} (all zeros): not calibrated", file=sys.stderr)
    write_cache(args.out, entries)
    outputs.append(args.out)
    return EXIT_OK


def cmd_ptq(args, outputs: list[str]) -> int:
    model = _prepare(_model(args.model), args)
    methods = [CalibrationMethod.parse(m) for m in args.methods] if args.methods else list(DEFAULT_METHODS)
    report = run_ptq(model, _data(args.calib_data, "calibration data"), _data(args.eval_data, "evaluation data"),
                     methods, args.metric, args.bins, args.bits)
    Path(args.out).write_text(report.to_text())
    outputs.append(args.out)
    if args.cache_out:
        write_cache(args.cache_out, report.best.entries)
        outputs.append(args.cache_out)
    print(report.render_table(), end="")
    if not report.acceptable(args.accept_drop):
        print(f"no method within {100 * args.accept_drop:g}% of fp32 accuracy")
        return EXIT_REJECTED
    return EXIT_OK


def _calibrated(model: Model, args, cache: Optional[str], method: Optional[CalibrationMethod]) -> Model:
    if cache:
        entries = read_cache(_need(cache, "calibration cache"))
    else:
        entries = calibrate_model(model, _data(args.calib_data, "calibration data"), method, args.bins, args.bits)
    return apply_calibration(model, entries, args.bits)


def cmd_sensitivity(args, outputs: list[str]) -> int:
    model = _prepare(_model(args.model), args)
    if not args.cache and not args.calib_data:
        raise CliError("sensitivity needs --cache or --calib-data")
    model = _calibrated(model, args, args.cache, CalibrationMethod.parse(args.method))
    report = sensitivity_scan(model, _data(args.eval_data, "evaluation data"), args.metric, args.threads)
    Path(args.out).write_text(report.to_text())
    outputs.append(args.out)
    print(report.render_table(), end="")
    return EXIT_OK


def cmd_partial(args, outputs: list[str]) -> int:
    ptq = PtqReport.from_text(Path(_need(args.ptq_report, "PTQ report (run `qkit ptq` first)")).read_text())
    model = _prepare(_model(args.model), args)
    if not args.cache and not args.calib_data:
        raise CliError("partial needs --cache or --calib-data")
    model = _calibrated(model, args, args.cache, ptq.best.method)
    eval_data = _data(args.eval_data, "evaluation data")
    if args.sensitivity:
        sens = SensitivityReport.from_text(Path(_need(args.sensitivity, "sensitivity report")).read_text())
    else:
        sens = sensitivity_scan(model, eval_data, ptq.metric, args.threads)
    target = ptq.fp32_accuracy * (1.0 - args.accept_drop)
    result = partial_quantize(model, eval_data, sens, target, ptq.metric)
    save_model(args.out, result.model)
    outputs.append(args.out)
    report_path = args.report_out or f"{args.out}.partial.txt"
    Path(report_path).write_text(result.to_text())
    outputs.append(report_path)
    print(f"skipped: {', '.join(result.skipped) or '(none)'}")
    print(f"accuracy: {result.accuracy:.2f} (target {target:.2f}) {result.status}")
    return EXIT_OK if result.reached else EXIT_REJECTED


def cmd_qat(args, outputs: list[str]) -> int:
    entries = read_cache(_need(args.cache, "calibration cache (run `qkit calibrate` or `qkit ptq` first)"))
    model = _model(args.model)
    data = _data(args.train_data, "training data")
    enabled = [l.name for l in model.quantizable_layers if l.quant.enabled]

    def attach(layer):
        e = entries.get(layer.input_tensor)
        if not layer.quantizable or e is None:
            return layer
        return layer.with_quant(activation_params=scale_params(e.alpha, args.bits))

    calibrated = model.map_layers(attach)
    calibrated = calibrated.with_enabled(enabled or calibrated_layers(calibrated))
    config = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                         weight_decay=args.weight_decay, learn_ranges=args.learn_ranges, alpha_lr=args.alpha_lr)
    trained = train(calibrated, data, config)
    # checkpoint keeps the input's layer configs; ranges live in the cache
    layers = [l.with_quant(weight_params=t.quant.weight_params) if l.quant.weight_params is not None else l
              for l, t in zip(model.layers, trained.layers)]
    save_model(args.out, Model(tuple(layers), trained.weights, model.input_shape))
    outputs.append(args.out)
    if args.cache_out:
        new_entries = []
        for e in entries.values():
            act = trained.layer(e.tensor[:-len(".input")]).quant.activation_params if args.learn_ranges else None
            alpha = e.alpha if act is None else float(act.qmax / act.scale)
            new_entries.append(CacheEntry(e.tensor, e.method, alpha))
        write_cache(args.cache_out, new_entries)
        outputs.append(args.cache_out)
    return EXIT_OK


def cmd_eval(args, outputs: list[str]) -> int:
    model = _prepare(_model(args.model), args)
    if args.cache:
        model = apply_calibration(model, read_cache(_need(args.cache, "calibration cache")), args.bits)
    acc = evaluate(model, _data(args.data), args.metric, quantized=not args.fp32, threshold=args.threshold)
    print(f"accuracy: {acc:.4f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qkit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    common.add_argument("--threads", type=int, default=1, help="worker threads for parallel stages")
    common.add_argument("--manifest", help="run manifest path (default: next to the first output)")
    common.add_argument("--bits", type=int, default=8, help="quantization bit width")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=func)
        return sp

    def calib_opts(sp):
        sp.add_argument("--bins", type=int, default=DEFAULT_BINS)
        sp.add_argument("--gelu10", action="store_true", help="clip GELU outputs at 10 before calibrating")

    sp = add("make-toy", cmd_make_toy, "write the two-moons toy model and datasets")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--poison", action="store_true", help="add a constant 1e4 input feature")

    sp = add("calibrate", cmd_calibrate, "write an activation calibration cache")
    sp.add_argument("model")
    sp.add_argument("data")
    sp.add_argument("--method", default="max", help="max, entropy, percentile or percentile(<f>)")
    sp.add_argument("--fraction", type=float, default=0.9999, help="coverage for --method percentile")
    sp.add_argument("--out", required=True)
    calib_opts(sp)

    sp = add("ptq", cmd_ptq, "compare calibration methods")
    sp.add_argument("model")
    sp.add_argument("--calib-data", required=True)
    sp.add_argument("--eval-data", required=True)
    sp.add_argument("--methods", nargs="+", help="default: max entropy 99.99%% 99.999%%")
    sp.add_argument("--metric", default="top1", choices=["top1", "mse-threshold"])
    sp.add_argument("--accept-drop", type=float, default=0.01, help="max relative accuracy drop")
    sp.add_argument("--out", required=True, help="PTQ report path")
    sp.add_argument("--cache-out", help="write the best method's calibration cache here")
    calib_opts(sp)

    sp = add("sensitivity", cmd_sensitivity, "one-layer-at-a-time sensitivity scan")
    sp.add_argument("model")
    sp.add_argument("--eval-data", required=True)
    sp.add_argument("--cache")
    sp.add_argument("--calib-data")
    sp.add_argument("--method", default="max")
    sp.add_argument("--metric", default="top1", choices=["top1", "mse-threshold"])
    sp.add_argument("--out", required=True)
    calib_opts(sp)

    sp = add("partial", cmd_partial, "skip sensitive layers until the accuracy target is met")
    sp.add_argument("model")
    sp.add_argument("--ptq-report", required=True)
    sp.add_argument("--eval-data", required=True)
    sp.add_argument("--cache")
    sp.add_argument("--calib-data")
    sp.add_argument("--sensitivity", help="reuse a sensitivity report")
    sp.add_argument("--accept-drop", type=float, default=0.01)
    sp.add_argument("--out", required=True, help="partially quantized model path")
    sp.add_argument("--report-out")
    calib_opts(sp)

    sp = add("qat", cmd_qat, "fine-tune with fake quantization")
    sp.add_argument("model")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--train-data", required=True)
    sp.add_argument("--epochs", type=int, default=1)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--weight-decay", type=float, default=0.0)
    sp.add_argument("--learn-ranges", action="store_true", help="learn activation ranges (PACT)")
    sp.add_argument("--alpha-lr", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cache-out")

    sp = add("eval", cmd_eval, "print accuracy")
    sp.add_argument("model")
    sp.add_argument("data")
    sp.add_argument("--cache", help="quantize every layer with this cache")
    sp.add_argument("--fp32", action="store_true", help="ignore quantization flags")
    sp.add_argument("--metric", default="top1", choices=["top1", "mse-threshold"])
    sp.add_argument("--threshold", type=float, default=0.1)
    return p


def _inputs(args) -> list[str]:
    keys = ("model", "data", "calib_data", "eval_data", "train_data", "cache", "ptq_report", "sensitivity")
    return [getattr(args, k) for k in keys if isinstance(getattr(args, k, None), str)]


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("QK_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    inputs = _inputs(args)
    manifest = RunManifest(args.command, inputs, config_hash(args, inputs))
    outputs: list[str] = []
    start = time.perf_counter()
    try:
        code = args.func(args, outputs)
    except (CliError, OSError, ValueError, LookupError, RuntimeError) as exc:
        print(f"qkit {args.command}: error: {exc}", file=sys.stderr)
        code = EXIT_ERROR
    manifest.wall_clock_s = time.perf_counter() - start
    manifest.outputs = outputs
    manifest.exit_code = code
    path = args.manifest or (f"{outputs[0]}.manifest.json" if outputs else f"qkit-{args.command}.manifest.json")
    manifest.write(Path(path))
    return code


if __name__ == "__main__":
    sys.exit(main())
