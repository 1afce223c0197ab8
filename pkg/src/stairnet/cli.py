"""Command-line entry point: profile, gradcheck, train, eval, correlate, synth.

Exit codes: 0 success, 1 runtime failure (including failed checks),
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import List, Optional

import numpy as np

from . import __version__
from .config import RunConfig, load, with_overrides
from .net import ConfigError, build_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW such as 256x192, got {text!r}")
    return h, w


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2, default=_json_default))
    else:
        print(text)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


CONFIG_DIR = os.path.join(os.path.dirname(__file__), "configs")


def resolve_config(name: Optional[str]) -> Optional[str]:
    """A path, or the name of a bundled config (``default``, ``overfit``, ``tiny``)."""
    if name is None or os.path.exists(name):
        return name
    bundled = os.path.join(CONFIG_DIR, name if name.endswith(".json") else name + ".json")
    if os.path.exists(bundled):
        return bundled
    raise FileNotFoundError(f"config {name!r} is neither a file nor a bundled config "
                            f"({', '.join(sorted(f[:-5] for f in os.listdir(CONFIG_DIR)))})")


def _run_config(args) -> RunConfig:
    cfg = load(resolve_config(args.config))
    return with_overrides(cfg, seed=args.seed, dtype=args.dtype)


# --- commands ------------------------------------------------------------------

def cmd_profile(args) -> int:
    from .profiler import profile

    cfg = _run_config(args)
    report = profile(cfg.model, args.input_size)
    _emit(args, report.to_dict(), report.to_text(args.depth))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import checks

    lines = []

    def show(item):
        line = (f"{item.scope:<10} {item.name:<40} worst {item.worst:.3e}  "
                f"{'PASS' if item.passed else 'FAIL'}  ({item.checked} entries, {item.seconds:.1f}s)")
        lines.append(line)
        if not args.json:
            print(line, flush=True)

    items = checks.run(args.scope, seed=args.seed or 0, max_entries=args.max_entries, report=show)
    ok = all(i.passed for i in items)
    payload = {"tolerance": checks.TOL, "passed": ok,
               "items": [dict(scope=i.scope, name=i.name, worst=i.worst, checked=i.checked,
                              passed=i.passed) for i in items]}
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(f"gradcheck {'passed' if ok else 'FAILED'}: worst "
              f"{max(i.worst for i in items):.3e} (tolerance {checks.TOL:g})")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_train(args) -> int:
    from .train import TrainingDiverged, evaluate, new_trainer, resume

    cfg = _run_config(args)
    if args.iterations is not None:
        import dataclasses
        cfg = RunConfig(cfg.model, dataclasses.replace(cfg.train, iterations=args.iterations),
                        cfg.dtype)
    os.makedirs(args.out, exist_ok=True)
    tr = resume(args.resume) if args.resume else new_trainer(cfg)
    if args.resume and args.iterations is not None:
        import dataclasses
        tr.cfg = dataclasses.replace(tr.cfg, iterations=args.iterations)
    t0 = time.perf_counter()

    def log(entry):
        if not args.json:
            print(f"step {entry['step']:>6}  loss {entry['loss']:.6e}  pck@0.1 {entry['pck@0.1']:.4f}"
                  f"  ({time.perf_counter() - t0:.0f}s)", flush=True)

    try:
        history = tr.run(log=log, dump_dir=args.out)
    except TrainingDiverged as e:
        return _fail(args, EXIT_FAIL, f"error: {e}")
    path = os.path.join(args.out, "model.stnt")
    tr.save(path)
    with open(os.path.join(args.out, "history.jsonl"), "w") as f:
        for h in history:
            f.write(json.dumps(h) + "\n")
    final = evaluate(tr.model, tr.data)
    payload = {"checkpoint": path, "steps": tr.step, "seconds": time.perf_counter() - t0,
               "first_loss": history[0]["loss"] if history else None,
               "final_loss": history[-1]["loss"] if history else None, "eval": final}
    _emit(args, payload, f"saved {path} after {tr.step} steps; " + ", ".join(
        f"{k} {v:.4f}" for k, v in final.items() if k.startswith("pck") and v is not None))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .codec import format_table
    from .train import evaluate, load_model, make_dataset

    model, _, meta = load_model(args.checkpoint)
    tcfg = meta.get("train", {})
    n = args.samples if args.samples is not None else tcfg.get("num_samples", 16)
    seed = args.data_seed if args.data_seed is not None else tcfg.get("data_seed", 0)
    if n < 1:
        raise RuntimeError("no samples: dataset is empty")
    data = make_dataset(n, model.cfg.input_size, seed, tcfg.get("sigma", 2.0),
                        model.head.weight.dtype, model.cfg.num_joints)
    res = evaluate(model, data)
    text = format_table([(k, "undefined" if v is None else (f"{v:.4f}" if isinstance(v, float) else v))
                         for k, v in res.items()])
    _emit(args, res, text)
    return EXIT_OK


def render_matrix(m: np.ndarray) -> str:
    shades = " .:-=+*#%@"
    rows = ["      " + " ".join(f"C{j + 1:<6}" for j in range(len(m)))]
    for i, row in enumerate(m):
        cells = []
        for v in row:
            if np.isnan(v):
                cells.append("  n/a  ")
            else:
                cells.append(f"{v:+.3f}{shades[min(9, int(abs(v) * 9.999))]}")
        rows.append(f"C{i + 1:<4} " + " ".join(cells))
    return "\n".join(rows)


def cmd_correlate(args) -> int:
    from .blocks import branch_correlation
    from .synth import make_sample, normalize
    from .tensor import Tensor, no_grad
    from .train import load_model

    if args.checkpoint:
        model, _, meta = load_model(args.checkpoint)
    else:
        cfg = _run_config(args)
        model = build_model(cfg.model, seed=cfg.train.seed)
    sample = make_sample(args.sample, model.cfg.input_size, args.data_seed)
    cells = model.stair_cells()
    for _, c in cells:
        c.capture = True
    model.eval()
    with no_grad():
        model(Tensor(normalize(sample.image[None]).astype(model.head.weight.dtype)))
    out, text = {}, []
    for path, c in cells:
        m = branch_correlation(c.taps)
        c.capture, c.taps = False, None
        out[path] = m
        text.append(f"{path}\n{render_matrix(m)}\n")
    payload = {k: [[None if np.isnan(v) else v for v in row] for row in m.tolist()]
               for k, m in out.items()}
    _emit(args, payload, "\n".join(text))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import export, synth_dataset

    cfg = _run_config(args)
    size = args.image_size or cfg.model.input_size
    samples = synth_dataset(args.n, size, args.seed if args.seed is not None else cfg.train.data_seed)
    path = export(samples, args.out, args.split)
    _emit(args, {"directory": path, "samples": len(samples), "image_size": list(size)},
          f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def globals_(defaults: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags; SUPPRESS keeps them from
        # clobbering values given before the subcommand name
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=d(None),
                       help="JSON run configuration, or a bundled name (default, overfit, tiny)")
        g.add_argument("--seed", type=int, default=d(None), help="override the training/init seed")
        g.add_argument("--json", action="store_true", default=d(False), help="machine-readable output")
        g.add_argument("--dtype", choices=("f32", "f64"), default=d(None))
        return g

    common = globals_(False)

    p = argparse.ArgumentParser(prog="stairnet", parents=[globals_(True)],
                                description="Stair network tools: cost profiling, gradient "
                                            "checks and desk-scale training.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("profile", parents=[common], help="parameter / MAC report")
    s.add_argument("--input-size", type=_size, default=None, metavar="HxW")
    s.add_argument("--depth", type=int, default=2, help="breakdown grouping depth")
    s.set_defaults(fn=cmd_profile)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--scope", choices=("primitive", "block", "model", "all"), default="all")
    s.add_argument("--max-entries", type=int, default=None,
                   help="elements sampled per tensor (default: suite-specific)")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("train", parents=[common], help="Adam training on synthetic poses")
    s.add_argument("--out", default="runs/train", help="output directory")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="PCK of a checkpoint on synthetic data")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--samples", type=int, default=None)
    s.add_argument("--data-seed", type=int, default=None)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("correlate", parents=[common], help="stair-cell branch correlation")
    s.add_argument("--checkpoint", default=None, help="weights (default: fresh initialisation)")
    s.add_argument("--sample", type=int, default=0, help="synthetic sample index")
    s.add_argument("--data-seed", type=int, default=0)
    s.set_defaults(fn=cmd_correlate)

    s = sub.add_parser("synth", parents=[common], help="export a synthetic dataset (PPM + JSONL)")
    s.add_argument("--out", required=True)
    s.add_argument("-n", type=int, default=16)
    s.add_argument("--split", default="train")
    s.add_argument("--image-size", type=_size, default=None, metavar="HxW")
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigError, UsageError, FileNotFoundError) as e:
        kind = "config error" if isinstance(e, ConfigError) else "error"
        return _fail(args, EXIT_USAGE, f"{kind}: {e}", getattr(e, "field", None))
    except Exception as e:  # runtime failure
        return _fail(args, EXIT_FAIL, f"error: {type(e).__name__}: {e}")


def _fail(args, code: int, message: str, field: Optional[str] = None) -> int:
    print(message, file=sys.stderr)
    if getattr(args, "json", False):
        print(json.dumps({"error": message, "field": field, "exit_code": code}))
    return code

if __name__ == "__main__":
    sys.exit(main())
