"""``abba`` command line: reconstruct | gradcheck | train | merge.

Configuration is a JSON file whose top-level sections are named after the
subcommands, plus ``output_dir`` and ``seed``. ``--set a.b=v`` overrides a
dotted path; ``v`` is parsed as JSON when possible and kept as a string
otherwise. Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .adapters import merge, unmerge
from .checkpoint import load_adapter
from .errors import AbbaError, DataFileError, FormatError, NumericError, ParameterError, ShapeError
from .gradients import abba_backward, check_abba_gradients, check_input_gradient, random_abba
from .linalg import read_matrix_csv, write_matrix_csv
from .reconstruction import ReconConfig, abba_win_fractions, run_grid
from .training import TrainConfig, accuracy_summary, run_toy_mnist, write_outputs

log = logging.getLogger("abba")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "output_dir": "abba-out",
    "seed": 0,
    "reconstruct": asdict(ReconConfig()),
    "gradcheck": {
        # [m, n, r1, r2]; "random" draws m, n <= 24 and r1, r2 <= 4 per trial
        "sizes": "random",
        "trials": 50,
        "tolerance": 1e-6,
        "step": 1e-5,
    },
    "train": asdict(TrainConfig()),
    "merge": {"checkpoint": None, "base": None, "output": None},
}


class UsageError(Exception):
    pass


def _parse_json(text: str, origin: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise UsageError(f"{origin}: malformed JSON at byte offset {offset} (line {exc.lineno}): {exc.msg}") from exc


def _deep_update(base: dict, extra: dict, path: str = "") -> None:
    for key, value in extra.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _deep_update(base[key], value, where + ".")
        else:
            base[key] = value


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise UsageError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
        node = node[part]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
        loaded = _parse_json(text, str(path))
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: the top level must be a JSON object")
        _deep_update(cfg, loaded)
    for assignment in args.set or []:
        _apply_set(cfg, assignment)
    if args.output_dir is not None:
        cfg["output_dir"] = args.output_dir
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise UsageError(f"invalid {name} config: {exc}") from exc
    except ParameterError as exc:
        raise UsageError(f"invalid {name} config: {exc}") from exc


def _write_resolved(out_dir: Path, name: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- subcommands ------------------------------------------------------------


def cmd_reconstruct(cfg: dict, out=sys.stdout) -> int:
    recon = _build(ReconConfig, cfg["reconstruct"], "reconstruct")
    out_dir = Path(cfg["output_dir"])
    _write_resolved(out_dir, "reconstruct", cfg["reconstruct"])
    path = out_dir / "recon.csv"
    rows = run_grid(recon, path)
    print(f"wrote {len(rows)} rows to {path}", file=out)
    print(f"{'family':<48} {'abba_win_fraction':>18}", file=out)
    for family, frac in sorted(abba_win_fractions(rows).items()):
        print(f"{family:<48} {frac:>18.3f}", file=out)
    return EXIT_OK


@dataclass
class GradcheckRow:
    factor: str
    max_rel_error: float
    index: tuple[int, int]
    trial: int
    shape: tuple[int, int, int, int]


def run_gradcheck(section: dict, seed: int, backward=abba_backward) -> list[GradcheckRow]:
    """Worst relative error per factor (and for the input gradient) over all trials."""
    trials = section.get("trials")
    if not isinstance(trials, int) or trials < 1:
        raise UsageError(f"gradcheck.trials must be a positive integer, got {trials!r}")
    step = float(section.get("step", 1e-5))
    sizes = section.get("sizes", "random")
    if sizes != "random" and (not isinstance(sizes, list) or not sizes or any(len(s) != 4 for s in sizes)):
        raise UsageError("gradcheck.sizes must be 'random' or a non-empty list of [m, n, r1, r2]")
    rng = np.random.default_rng(seed)
    worst: dict[str, GradcheckRow] = {}
    for t in range(trials):
        if sizes == "random":
            m, n = (int(v) for v in rng.integers(1, 25, size=2))
            r1, r2 = (int(v) for v in rng.integers(1, 5, size=2))
        else:
            m, n, r1, r2 = (int(v) for v in sizes[t % len(sizes)])
        ad = random_abba(rng, m, n, r1, r2, alpha=float(rng.uniform(0.5, 2.0)))
        g = rng.standard_normal((m, n))
        checks = check_abba_gradients(ad, g, step, backward)
        w0 = rng.standard_normal((m, n))
        checks.append(check_input_gradient(ad, w0, rng.standard_normal((n, 3)), rng.standard_normal((m, 3)), step))
        for c in checks:
            name = "g_x" if c.factor == "x" else f"g_{c.factor}"
            if name not in worst or c.max_rel_error > worst[name].max_rel_error:
                worst[name] = GradcheckRow(name, c.max_rel_error, c.index, t, (m, n, r1, r2))
    return [worst[k] for k in ("g_b1", "g_a1", "g_b2", "g_a2", "g_x")]


def cmd_gradcheck(cfg: dict, out=sys.stdout, backward=abba_backward) -> int:
    section = cfg["gradcheck"]
    tol = float(section.get("tolerance", 1e-6))
    rows = run_gradcheck(section, int(cfg["seed"]), backward)
    out_dir = Path(cfg["output_dir"])
    _write_resolved(out_dir, "gradcheck", section)
    report = [{"factor": r.factor, "max_rel_error": r.max_rel_error, "index": list(r.index), "trial": r.trial,
               "shape_m_n_r1_r2": list(r.shape)} for r in rows]
    (out_dir / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"{'factor':<8} {'max_rel_error':>14} {'index':>10} {'trial':>6}  status", file=out)
    for r in rows:
        status = "ok" if r.max_rel_error < tol else "FAIL"
        print(f"{r.factor:<8} {r.max_rel_error:>14.3e} {str(r.index):>10} {r.trial:>6}  {status}", file=out)
    bad = max(rows, key=lambda r: r.max_rel_error)
    if bad.max_rel_error >= tol:
        m, n, r1, r2 = bad.shape
        print(f"gradient check failed: {bad.factor} at index {bad.index} in trial {bad.trial} "
              f"(m={m}, n={n}, r1={r1}, r2={r2}) has relative error {bad.max_rel_error:.3e} >= {tol:g}", file=out)
        return EXIT_FAILURE
    print(f"all gradients within {tol:g}; worst {bad.max_rel_error:.3e} ({bad.factor})", file=out)
    return EXIT_OK


def cmd_train(cfg: dict, out=sys.stdout) -> int:
    train = _build(TrainConfig, cfg["train"], "train")
    out_dir = Path(cfg["output_dir"])
    result = run_toy_mnist(train)
    _write_resolved(out_dir, "train", cfg["train"])
    records, meta = write_outputs(result, out_dir)
    print(f"wrote {records} and {meta}", file=out)
    params = result.metadata["parameters"]
    print(f"{'method':<12} {'mean_acc':>9} {'min':>7} {'max':>7} {'trainable':>10} {'adapter':>9}", file=out)
    for method, (mean, lo, hi) in accuracy_summary(result).items():
        p = params[method]
        print(f"{method:<12} {mean:>9.4f} {lo:>7.4f} {hi:>7.4f} {p['trainable']:>10d} {p['hidden_layers']:>9d}",
              file=out)
        print(f"  {method}: final test accuracy {mean:.4f} +/- {(hi - lo) / 2:.4f} over {len(train.seeds)} seeds",
              file=out)
    return EXIT_OK


def cmd_merge(cfg: dict, unmerge_mode: bool = False, out=sys.stdout) -> int:
    section = cfg["merge"]
    if not section.get("checkpoint") or not section.get("base"):
        raise UsageError("merge needs merge.checkpoint (adapter directory) and merge.base (weight CSV)")
    base_path, ckpt = Path(section["base"]), Path(section["checkpoint"])
    if not base_path.exists():
        raise DataFileError(f"base weight file not found: {base_path}")
    if not (ckpt / "adapter.json").exists():
        raise DataFileError(f"adapter checkpoint not found: {ckpt / 'adapter.json'}")
    weight = read_matrix_csv(base_path)
    ad = load_adapter(ckpt, w0=weight)
    if ad.shape != weight.shape:
        raise ShapeError(f"checkpoint update is {ad.shape} but {base_path} is {weight.shape}")
    out_dir = Path(cfg["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if unmerge_mode:
        result = unmerge(weight, ad)
        back = merge(ad, result)
        name = "unmerged.csv"
    else:
        result = merge(ad, weight)
        back = unmerge(result, ad)
        name = "merged.csv"
    path = Path(section["output"]) if section.get("output") else out_dir / name
    write_matrix_csv(path, result)
    err = float(np.max(np.abs(back - weight))) if weight.size else 0.0
    print(f"wrote {path}", file=out)
    print(f"round-trip max abs error: {err:.3e}", file=out)
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abba", description="Hadamard-product adapter experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config path")
    common.add_argument("--output-dir", help="directory for all artifacts")
    common.add_argument("--seed", type=int, help="global seed (gradcheck draws)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("reconstruct", parents=[common], help="reconstruction grid: ABBA vs truncated SVD")
    sub.add_parser("gradcheck", parents=[common], help="closed-form gradients vs finite differences")
    sub.add_parser("train", parents=[common], help="two-phase MLP fine-tuning experiment")
    m = sub.add_parser("merge", parents=[common], help="fold an adapter checkpoint into a base weight")
    m.add_argument("--unmerge", action="store_true", help="subtract the update instead")
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfg, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        return cmd_merge(cfg, args.unmerge, out)
    except UsageError as exc:
        print(f"abba: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DataFileError, ShapeError, FormatError, OSError) as exc:
        print(f"abba: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except AbbaError as exc:
        print(f"abba: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
