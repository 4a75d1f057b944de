"""Command-line entry point: shapes, gradcheck, profile, compare, sweep, train-toy.

Exit status: 0 on success, 1 when a check fails, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from typing import IO

import numpy as np

from . import checks, profiler
from . import tensor as T
from .attention import PatchGrid, fcgsa, reassemble, reconstruct
from .bottleneck import Bottleneck, IsbConfig, isb_branch
from .head import DecoupledHead, HeadConfig
from .tensor import ConfigError, ShapeError, Tensor

SCHEMA_VERSION = profiler.SCHEMA_VERSION
MODULES = ("isb", "isadh", "bottleneck", "head", "attention")
GRADCHECK_MAX_SIDE = 16
GRADCHECK_MAX_CHANNELS = 32


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = ""
    module: str = "isb"
    preset: str | None = None
    channels: int = 64
    ratio: int = 8
    patch: int = 4
    nc: int | None = None
    reg_max: int = 16
    levels: list[int] | None = None
    size: tuple[int, int] = (32, 32)
    seed: int = 0
    precision: int = 64
    format: str = "rows"
    out: str | None = None
    plot: str | None = None
    sizes: list[int] = field(default_factory=lambda: [64, 128, 256, 512, 1024])
    steps: int = 300
    lr: float = 0.05
    samples: int = 64
    variant: str = "both"
    execute: bool = False

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def head_config(self) -> HeadConfig:
        nc = 80 if self.nc is None else self.nc
        if self.levels:
            return HeadConfig(tuple(self.levels), nc=nc, reg_max=self.reg_max)
        return profiler.preset_head_config(self.preset or "L", nc=nc, reg_max=self.reg_max)

    def isb_config(self) -> IsbConfig:
        return IsbConfig(self.channels, self.ratio, self.patch)


def parse_size(text: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    return parts[0], parts[1]


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    common.add_argument("--config", default=S, help="JSON file with RunConfig overrides")
    common.add_argument("--module", choices=MODULES, default=S)
    common.add_argument("--preset", type=str.upper, choices=list(profiler.PRESETS), default=S)
    common.add_argument("--channels", type=int, default=S)
    common.add_argument("--ratio", type=int, default=S, help="channel compression ratio s")
    common.add_argument("--patch", type=int, default=S, help="patch side K")
    common.add_argument("--nc", type=int, default=S)
    common.add_argument("--reg-max", dest="reg_max", type=int, default=S)
    common.add_argument("--levels", type=_int_list, default=S, help="per-level head channels")
    common.add_argument("--size", type=parse_size, default=S, help="HxW")
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--precision", type=int, choices=(32, 64), default=S)
    common.add_argument("--format", choices=("rows", "records"), default=S)
    common.add_argument("--out", default=S)
    common.add_argument("--plot", default=S, help="optional PNG path (sweep, train-toy)")

    parser = argparse.ArgumentParser(prog="isbkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("shapes", parents=[common], help="trace intermediate tensor shapes")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    sub.add_parser("profile", parents=[common], help="parameter/FLOP report")
    sub.add_parser("compare", parents=[common], help="baseline vs variant cost deltas")
    sw = sub.add_parser("sweep", parents=[common], help="attention cost over input sizes")
    sw.add_argument("--sizes", type=_int_list, default=S, help="pixels per side, e.g. 64,128")
    sw.add_argument("--execute", action="store_true", default=S,
                    help="also run the attention and tally executed operations")
    tt = sub.add_parser("train-toy", parents=[common], help="train the toy detector")
    tt.add_argument("--steps", type=int, default=S)
    tt.add_argument("--lr", type=float, default=S)
    tt.add_argument("--samples", type=int, default=S)
    tt.add_argument("--variant", choices=("baseline", "isb", "isadh", "both"), default=S)
    return parser


def resolve_config(argv: list[str] | None) -> RunConfig:
    """Defaults < config file < command-line flags."""
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    values = asdict(RunConfig())
    path = ns.pop("config", None)
    if path:
        try:
            with open(path) as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file {path}: {exc}")
        unknown = set(file_values) - {f.name for f in fields(RunConfig)}
        if unknown:
            parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(file_values)
    values.update(ns)
    if isinstance(values["size"], str):
        values["size"] = parse_size(values["size"])
    values["size"] = tuple(values["size"])
    if values["preset"] is not None:
        values["preset"] = str(values["preset"]).upper()
        if values["preset"] not in profiler.PRESETS:
            parser.error(f"unknown preset {values['preset']!r}")
    if values["module"] not in MODULES:
        parser.error(f"unknown module {values['module']!r}")
    return RunConfig(**values)


# --------------------------------------------------------------------------
# output


def emit(cfg: RunConfig, rows: list[dict], totals: dict | None = None,
         convention: dict | None = None, stream: IO[str] | None = None) -> None:
    fh = stream or (open(cfg.out, "w") if cfg.out else sys.stdout)
    try:
        if cfg.format == "records":
            _emit_records(fh, cfg, rows, totals, convention)
        else:
            _emit_rows(fh, cfg, rows, totals)
    finally:
        if fh is not sys.stdout and stream is None:
            fh.close()


def _config_echo(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["size"] = list(cfg.size)
    return d


def _emit_records(fh, cfg, rows, totals, convention):
    head = {"schema_version": SCHEMA_VERSION, "command": cfg.command, "record": "header",
            "config": _config_echo(cfg), "convention": convention or {}}
    fh.write(json.dumps(head, sort_keys=True) + "\n")
    for r in rows:
        fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "command": cfg.command,
                             "record": "row", **r}, sort_keys=True) + "\n")
    fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "command": cfg.command,
                         "record": "totals", "totals": totals or {}}, sort_keys=True) + "\n")


def read_records(path_or_lines) -> dict:
    """Reassemble a record stream into ``{schema_version, command, config, rows, totals, convention}``."""
    if isinstance(path_or_lines, str):
        with open(path_or_lines) as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(path_or_lines)
    out = {"rows": []}
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("record")
        out["schema_version"] = rec.pop("schema_version")
        out["command"] = rec.pop("command")
        if kind == "header":
            out["config"] = rec["config"]
            out["convention"] = rec["convention"]
        elif kind == "row":
            out["rows"].append(rec)
        else:
            out["totals"] = rec["totals"]
    return out


def _emit_rows(fh, cfg, rows, totals):
    fh.write(f"# schema_version={SCHEMA_VERSION} command={cfg.command}\n")
    fh.write(f"# config={json.dumps(_config_echo(cfg), sort_keys=True)}\n")
    if not rows:
        return
    keys = list(rows[0])
    if cfg.command == "train-toy":
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")
    else:
        cells = [[_fmt(r.get(k)) for k in keys] for r in rows]
        widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
        fh.write("  ".join(k.ljust(w) for k, w in zip(keys, widths)).rstrip() + "\n")
        for c in cells:
            fh.write("  ".join(v.ljust(w) for v, w in zip(c, widths)).rstrip() + "\n")
    if totals:
        fh.write("# totals " + " ".join(f"{k}={_fmt(v)}" for k, v in totals.items()) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return "x".join(str(i) for i in v)
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# --------------------------------------------------------------------------
# commands


def cmd_shapes(cfg: RunConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.size
    trace: list[tuple[str, tuple]] = []
    if cfg.module in ("attention",):
        x = Tensor(rng.normal(size=(1, cfg.channels, H, W)), dtype=cfg.dtype)
        trace.append(("input", x.shape))
        x3 = reconstruct(x, cfg.patch, trace)
        f = fcgsa(x3, x3, x3)
        trace.append(("attention", f.shape))
        trace.append(("output", reassemble(f, cfg.patch, H, W, trace).shape))
    elif cfg.module in ("isb", "bottleneck"):
        isb = cfg.isb_config() if cfg.module == "isb" else None
        block = Bottleneck(cfg.channels, True, isb, rng=rng)
        x = Tensor(rng.normal(size=(1, cfg.channels, H, W)), dtype=cfg.dtype)
        trace.append(("input", x.shape))
        if isb is not None:
            isb_branch(x, block, isb, trace)
        y1 = block.cv1(x)
        trace.append(("cv1", y1.shape))
        trace.append(("cv2", block.cv2(y1).shape))
        trace.append(("output", block(x).shape))
    else:
        hc = cfg.head_config()
        head = DecoupledHead(hc, "isadh" if cfg.module == "isadh" else "baseline", rng=rng)
        feats = []
        for cin, st in zip(hc.level_channels, hc.strides):
            if H % st or W % st:
                raise UsageError(f"size {H}x{W} is not divisible by level stride {st}")
            feats.append(Tensor(rng.normal(size=(1, cin, H // st, W // st)), dtype=cfg.dtype))
            trace.append((f"level{len(feats) - 1}.input", feats[-1].shape))
        out = head(feats)
        for i, (c, b) in enumerate(zip(out.cls, out.box)):
            trace.append((f"level{i}.cls", c.shape))
            trace.append((f"level{i}.box", b.shape))
    emit(cfg, [{"stage": s, "shape": list(shape)} for s, shape in trace])
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    H, W = cfg.size
    if max(H, W) > GRADCHECK_MAX_SIDE or cfg.channels > GRADCHECK_MAX_CHANNELS:
        raise UsageError(
            f"gradcheck is capped at {GRADCHECK_MAX_SIDE}x{GRADCHECK_MAX_SIDE} maps and "
            f"{GRADCHECK_MAX_CHANNELS} channels; got {H}x{W} with {cfg.channels} channels"
        )
    if cfg.module == "attention":
        c2 = max(cfg.channels // cfg.ratio, 1)
        L = PatchGrid(cfg.patch, H, W).L
        reports = checks.attention_suite((1, cfg.patch ** 2, c2, L), cfg.seed)
        reports.update(checks.layer_suite(cfg.seed))
    elif cfg.module in ("isb", "bottleneck"):
        reports = checks.bottleneck_suite(cfg.channels, cfg.ratio, cfg.patch, (H, W), cfg.seed)
    else:
        variant = "isadh" if cfg.module == "isadh" else "baseline"
        nc = 2 if cfg.nc is None else cfg.nc
        reports = checks.head_suite(variant, cfg.channels, cfg.channels, nc, cfg.reg_max,
                                    (H, W), cfg.seed)
    rows = []
    for name, rep in reports.items():
        for key in rep.max_rel_error:
            rows.append({"name": f"{name}[{key}]", "max_rel": rep.max_rel_error[key],
                         "max_abs": rep.max_abs_error[key],
                         "pass": rep.per_input_pass[key]})
    ok = all(r.passed for r in reports.values())
    emit(cfg, rows, {"pass": ok, "tol": checks.TOL, "step": checks.STEP})
    return 0 if ok else 1


def _descriptions(cfg: RunConfig):
    if cfg.module in ("head", "isadh"):
        hc = cfg.head_config()
        return profiler.describe_head(hc, "baseline"), profiler.describe_head(hc, "isadh")
    if cfg.module in ("bottleneck", "isb"):
        return (profiler.describe_bottleneck(cfg.channels),
                profiler.describe_bottleneck(cfg.channels, cfg.isb_config()))
    c2 = cfg.isb_config().c2
    d = profiler.describe_attention(c2, cfg.patch)
    return d, d


def _cost_rows(report) -> list[dict]:
    return [{"name": r.name, "params": r.params, "flops": r.flops} for r in report.rows]


def cmd_profile(cfg: RunConfig) -> int:
    base, variant = _descriptions(cfg)
    desc = base if cfg.module in ("head", "bottleneck") else variant
    rep = profiler.count_flops(desc, cfg.size)
    emit(cfg, _cost_rows(rep), rep.totals, rep.convention)
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    a, b = _descriptions(cfg)
    delta = profiler.compare(a, b, cfg.size)
    totals = {**delta.totals, "params_a": delta.a.params, "params_b": delta.b.params,
              "flops_a": delta.a.flops, "flops_b": delta.b.flops}
    emit(cfg, _cost_rows(delta), totals, delta.a.convention)
    return 0


def fit_exponent(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def attention_sweep(sizes, c2: int, K: int, execute: bool = False, seed: int = 0,
                    dtype=np.float64) -> tuple[list[dict], dict]:
    rows = []
    rng = np.random.default_rng(seed)
    for side in sizes:
        L = PatchGrid(K, side, side).L
        row = {"name": f"{side}x{side}", "pixels": side * side, "L": L,
               "flops": profiler.attention_flops(c2, K, L)}
        if execute:
            q, k, v = (Tensor(rng.normal(size=(1, K * K, c2, L)), dtype=dtype) for _ in range(3))
            with T.census() as c:
                t0 = time.perf_counter()
                fcgsa(q, k, v)
                row["seconds"] = time.perf_counter() - t0
            row["executed_ops"] = c.macs * profiler.FLOPS_PER_MAC + c.elementwise
        rows.append(row)
    px = [r["pixels"] for r in rows]
    totals = {"exponent_flops": fit_exponent(px, [r["flops"] for r in rows])}
    if execute:
        totals["exponent_executed"] = fit_exponent(px, [r["executed_ops"] for r in rows])
        totals["exponent_seconds"] = fit_exponent(px, [r["seconds"] for r in rows])
    return rows, totals


def cmd_sweep(cfg: RunConfig) -> int:
    if len(cfg.sizes) < 2:
        raise UsageError("sweep needs at least two sizes")
    rows, totals = attention_sweep(cfg.sizes, cfg.isb_config().c2, cfg.patch, cfg.execute,
                                   cfg.seed, cfg.dtype)
    emit(cfg, rows, totals, profiler.default_convention())
    if cfg.plot:
        _plot(cfg.plot, [r["pixels"] for r in rows], [r["flops"] for r in rows],
              "pixels", "attention FLOPs", log=True)
    return 0


def cmd_train_toy(cfg: RunConfig) -> int:
    from .estimator import ToyDetector
    from .toytrain import gen_synthetic, stack_samples

    if cfg.size[0] != cfg.size[1]:
        raise UsageError("train-toy needs square images")
    nc = 2 if cfg.nc is None else cfg.nc
    X, Y = stack_samples(gen_synthetic(cfg.samples, cfg.size[0], nc, cfg.seed))
    est = ToyDetector(isb=cfg.variant in ("isb", "both"),
                      head="isadh" if cfg.variant in ("isadh", "both") else "baseline",
                      ratio=cfg.ratio, patch=cfg.patch, steps=cfg.steps, lr=cfg.lr,
                      seed=cfg.seed).fit(X, Y)
    curve = est.loss_curve_
    rows = [{"step": i, "loss": v} for i, v in enumerate(curve)]
    emit(cfg, rows, {"initial": curve[0], "final": curve[-1], "ratio": curve[-1] / curve[0]})
    if cfg.plot:
        _plot(cfg.plot, range(len(curve)), curve, "step", "loss")
    return 0


def _plot(path, x, y, xlabel, ylabel, log=False):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(list(x), list(y), marker="o" if log else None)
    if log:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


COMMANDS = {
    "shapes": cmd_shapes,
    "gradcheck": cmd_gradcheck,
    "profile": cmd_profile,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "train-toy": cmd_train_toy,
}


def main(argv: list[str] | None = None) -> int:
    cfg = resolve_config(argv)
    try:
        return COMMANDS[cfg.command](cfg)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"isbkit {cfg.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
