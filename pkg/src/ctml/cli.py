"""Command-line interface: ``ctml {simulate,train,reconstruct,eval,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O
error. Every command validates its inputs before writing anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

from .errors import CTMLError, ConfigurationError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("ctml")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _ablation(value: str) -> str:
    from .trainer import ABLATIONS

    v = value.replace("-", "_")
    if v not in ABLATIONS:
        raise argparse.ArgumentTypeError(f"unknown ablation {value!r}; choose from {', '.join(ABLATIONS)}")
    return v


def build_parser() -> argparse.ArgumentParser:
    from .degradation import SimulationConfig

    d = SimulationConfig()
    p = _Parser(prog="ctml", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="build a task-triplet dataset from random phantoms")
    s.add_argument("--phantoms", type=int, default=d.phantoms)
    s.add_argument("--size", type=int, default=d.size)
    s.add_argument("--views", type=int, default=d.views)
    s.add_argument("--detectors", type=int, default=d.detectors)
    s.add_argument("--dose", type=float, default=d.dose, help="dose fraction in (0, 1]")
    s.add_argument("--sparse-keep", type=int, default=d.sparse_keep)
    s.add_argument("--limited-deg", type=float, default=d.limited_deg)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--i0", type=float, default=d.I0, help="full-dose photons per detector bin")
    s.add_argument("--pixel-size", type=float, default=d.pixel_size)
    s.add_argument("--ellipses", type=int, default=d.ellipses)
    s.add_argument("--edge-sigma", type=float, default=d.edge_sigma)
    s.add_argument("--beam", choices=("fan-equiangular", "parallel"), default=d.beam)
    s.add_argument("--window", choices=("ram-lak", "hann"), default=d.window)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="mutual-learning training")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="training config JSON (TrainConfig fields)")
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", type=_ablation)
    t.add_argument("--val", help="held-out dataset with phantoms for validation PSNR")
    t.add_argument("--steps", type=int, help="override the config's step count")

    r = sub.add_parser("reconstruct", help="single-slice inference")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--input", required=True, help="slice directory")
    r.add_argument("--task", required=True, choices=("fvct", "svct", "lvct"))
    r.add_argument("--out", required=True, help=".ctim or .png output path")
    r.add_argument("--png", help="additional windowed PNG output")
    r.add_argument("--display", type=float, nargs=2, metavar=("CENTER", "WIDTH"),
                   help="PNG display window (default: phantom-scale 0.5 1.2)")

    e = sub.add_parser("eval", help="PSNR/NMSE/SSIM report over a dataset")
    e.add_argument("--ckpt")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--methods", default="ss-ctml,fbp",
                   help="comma list of ss-ctml, fbp, reference (reference scores the phantom itself)")

    g = sub.add_parser("gradcheck", help="finite-difference verification suite")
    g.add_argument("--full", action="store_true", help="include fan-beam geometry")
    g.add_argument("--seed", type=int, default=0)
    return p


# -- commands ----------------------------------------------------------------

def _fresh_output(path: Path):
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise ConfigurationError(f"output {path} already exists")


def cmd_simulate(a) -> int:
    from .degradation import SimulationConfig, build_dataset

    cfg = SimulationConfig(phantoms=a.phantoms, size=a.size, views=a.views, detectors=a.detectors,
                           dose=a.dose, sparse_keep=a.sparse_keep, limited_deg=a.limited_deg, seed=a.seed,
                           I0=a.i0, pixel_size=a.pixel_size, ellipses=a.ellipses, edge_sigma=a.edge_sigma,
                           beam=a.beam, window=a.window)
    out = build_dataset(a.out, cfg)
    print(f"wrote {cfg.phantoms} slices to {out}")
    return EXIT_OK


def cmd_train(a) -> int:
    from .trainer import TrainConfig, load_dataset, train

    raw = {}
    if a.config:
        raw = TrainConfig.from_json(a.config).to_dict()
    if a.ablation:
        raw["ablation"] = a.ablation
    if a.steps is not None:
        raw["steps"] = a.steps
    cfg = TrainConfig.from_dict(raw) if raw else TrainConfig()
    out = Path(a.out)
    _fresh_output(out)
    data = load_dataset(a.data)
    val = load_dataset(a.val) if a.val else None
    tmp = out.with_name(out.name + ".partial")
    shutil.rmtree(tmp, ignore_errors=True)
    try:
        result = train(data, cfg, tmp, val_dataset=val)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        out.rmdir()
    tmp.rename(out)
    last = result.history[-1] if result.history else {}
    summary = ", ".join(f"{k}={v:.4g}" for k, v in last.items() if k != "step" and v is not None)
    print(f"trained {cfg.steps} steps ({cfg.ablation}); {summary}; checkpoint {out / 'checkpoint.ctpk'}")
    return EXIT_OK


def cmd_reconstruct(a) -> int:
    from . import io
    from .degradation import read_slice
    from .projector import ImageGrid
    from .trainer import load_model, reconstruct

    out = Path(a.out)
    if out.suffix not in (".ctim", ".png"):
        raise ConfigurationError(f"--out must end in .ctim or .png, got {out.name}")
    params, model, _ = load_model(a.ckpt)
    trip, _ = read_slice(a.input)
    if trip.p_ld.geom != model.geometry:
        raise ConfigurationError("slice geometry does not match the checkpoint's model")
    if a.task not in model.tasks:
        raise ConfigurationError(f"checkpoint has no {a.task} subnetwork")
    img = ImageGrid(reconstruct(trip, params, model, a.task), model.geometry.pixel_size)
    window = tuple(a.display) if a.display else (0.5, 1.2)
    if out.suffix == ".png":
        io.export_png(out, img, window)
    else:
        io.write_image(out, img, {"task": a.task})
    if a.png:
        io.export_png(a.png, img, window)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from . import metrics
    from .trainer import load_dataset, load_model, reconstruct

    methods = [m.strip() for m in a.methods.split(",") if m.strip()]
    unknown = set(methods) - {"ss-ctml", "fbp", "reference"}
    if unknown or not methods:
        raise ConfigurationError(f"unknown methods {sorted(unknown)}")
    model = params = None
    if "ss-ctml" in methods:
        if not a.ckpt:
            raise ConfigurationError("--ckpt is required for the ss-ctml method")
        params, model, _ = load_model(a.ckpt)
    data = load_dataset(a.data)
    if any(ph is None for ph in data.phantoms):
        raise ConfigurationError(f"{a.data}: evaluation needs phantom.ctim in every slice")
    if model is not None and data.geometry != model.geometry:
        raise ConfigurationError("dataset geometry does not match the checkpoint's model")
    drange = float(max(p.max() for p in data.phantoms) - min(p.min() for p in data.phantoms))
    tasks = model.tasks if model is not None else ("fvct", "svct", "lvct")
    rows = []
    for trip, ph in zip(data.slices, data.phantoms):
        for task in tasks:
            for method in methods:
                if method == "ss-ctml":
                    img = reconstruct(trip, params, model, task)
                elif method == "fbp":
                    img = trip.image(task).data
                else:
                    img = ph
                rows.append({"slice_id": trip.slice_id, "task": task, "method": method,
                             **metrics.evaluate(img, ph, drange)})
    metrics.write_report(a.report, rows)
    for s in metrics.summarize(rows):
        print(f"{s['task']:<5} {s['method']:<9} PSNR {s['psnr'][0]:.2f}±{s['psnr'][1]:.2f}  "
              f"NMSE {s['nmse'][0]:.4g}  SSIM {s['ssim'][0]:.4f}")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .gradcheck import run_suite

    report = run_suite(full=a.full, seed=a.seed)
    for line in report.lines():
        print(line)
    failed = [r for r in report.results if not r.passed]
    for r in failed:
        print(f"  failed: {r.category}/{r.name} rel. error {r.error:.3e}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_NUMERICAL


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except CTMLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
