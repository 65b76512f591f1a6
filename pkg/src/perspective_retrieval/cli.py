"""Command-line entry point: ``perspective-retrieval <command> [options]``.

Commands
--------
gen-data   write a seeded synthetic corpus (MPSF container)
train      train adapters and MPR, write checkpoint, history and val report
eval       re-evaluate a checkpoint on a corpus split
gradcheck  run the randomized finite-difference suite
ablate     train one model per grid row and tabulate retrieval results
report     re-render stored CSVs as markdown tables and SVG line plots

Every command writes its outputs under ``--out`` together with
``manifest.json`` (command, resolved arguments, training config, seed and the
SHA-256 of every artifact). Settings are resolved in the order: command-line
flag, then the JSON ``--config`` file, then ``MPS_SEED`` (seed only), then
built-in defaults.

Exit status: 0 on success, 1 on usage or validation errors, 2 on runtime or
numeric failures (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import DESK_CORPUS, SPLITS, Corpus, FeatureFormatError, gen_corpus, load_features, save_features
from .g2a import ConfigurationError
from .gradcheck import run_suite
from .numerics import NumericError
from .retrieval import read_report_csv, reports_to_csv, reports_to_markdown
from .trainer import (
    GRIDS,
    HISTORY_COLUMNS,
    TrainConfig,
    TrainingError,
    ablate,
    evaluate,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

__all__ = ["main", "run", "UsageError", "svg_line_plot"]


GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    """Bad command line or configuration file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# ------------------------------------------------------------------ options

_TRAIN_FIELDS = [f for f in dataclasses.fields(TrainConfig) if f.name != "seed"]


def _field_type(f: dataclasses.Field):
    t = str(f.type)
    if "bool" in t:
        return bool
    if "int" in t:
        return int
    return float


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (override --config)")
    for f in _TRAIN_FIELDS:
        flag = "--" + f.name.replace("_", "-")
        kind = _field_type(f)
        if kind is bool:
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(flag, dest=f.name, type=kind, default=None, metavar=kind.__name__.upper())


def _add_corpus_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("corpus")
    g.add_argument("--data", type=Path, help="corpus file from gen-data (default: desk corpus at --data-seed)")
    g.add_argument("--data-seed", type=int, default=0, help="seed of the generated desk corpus")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed (fallback: MPS_SEED, then 0)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="perspective-retrieval", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    _add_common(p)
    p.add_argument("--classes", type=int, default=DESK_CORPUS["n_classes"])
    p.add_argument("--images", type=int, default=DESK_CORPUS["n_images"])
    p.add_argument("--k", type=int, default=DESK_CORPUS["K"], help="sub-perspectives per image")
    p.add_argument("--dim", type=int, default=DESK_CORPUS["D_in"], help="token width")
    p.add_argument("--tokens", type=int, default=DESK_CORPUS["n_tokens"], help="tokens per grid")
    p.add_argument("--noise", type=float, default=DESK_CORPUS["noise_level"])
    p.add_argument("--name", default="corpus.mpsf")

    for name, helptext in (("train", "train adapters and MPR"), ("ablate", "run an ablation grid")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--config", type=Path, help="JSON file of training settings")
        _add_corpus_flags(p)
        _add_train_flags(p)
        if name == "ablate":
            p.add_argument("--grid", choices=sorted(GRIDS), default="attn_gate")
            p.add_argument("--split", choices=SPLITS, default="test")
            p.add_argument("--jobs", type=int, default=1, help="parallel training runs")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("checkpoint", type=Path)
    _add_corpus_flags(p)
    p.add_argument("--split", choices=SPLITS, default="val")
    p.add_argument("--best", action="store_true", help="use the best-validation weights")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p)
    p.add_argument("--n-seeds", type=int, default=100)
    p.add_argument("--step", type=float, default=1e-4, help="central-difference step")

    p = sub.add_parser("report", help="render CSVs as markdown and SVG")
    _add_common(p)
    p.add_argument("csv", type=Path, nargs="+")
    return parser


# ------------------------------------------------------------------- config


def _resolve_seed(args, file_values: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in file_values:
        return int(file_values["seed"])
    env = os.environ.get("MPS_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MPS_SEED must be an integer, got {env!r}") from None
    return 0


def _read_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        values = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(values, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown keys in {path}: {', '.join(unknown)}")
    return values


def resolve_train_config(args) -> TrainConfig:
    """Merge defaults, config file, ``MPS_SEED`` and flags into a TrainConfig."""
    values = _read_config(getattr(args, "config", None))
    seed = _resolve_seed(args, values)
    values.update({f.name: getattr(args, f.name) for f in _TRAIN_FIELDS if getattr(args, f.name) is not None})
    values["seed"] = seed
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid training configuration: {e}") from None


def _load_corpus(args) -> tuple[Corpus, dict]:
    if args.data is None:
        return gen_corpus(args.data_seed, **DESK_CORPUS), {"desk_corpus_seed": args.data_seed, **DESK_CORPUS}
    return Corpus.from_bank(load_features(args.data)), {"path": str(args.data), "sha256": _sha256(args.data)}


# ---------------------------------------------------------------- artifacts


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out: Path, argv: list[str], args, seed: int, artifacts: list[Path], extra: dict) -> Path:
    echo = {k: [str(x) for x in v] if isinstance(v, list) else str(v) if isinstance(v, Path) else v
            for k, v in vars(args).items()}
    manifest = {
        "command": args.command,
        "argv": argv,
        "arguments": echo,
        "seed": seed,
        "artifacts": {p.name: _sha256(p) for p in artifacts},
        **extra,
    }
    path = out / "manifest.json"
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def history_to_csv(history: dict[str, list[float]]) -> str:
    """Per-epoch history with full float precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(HISTORY_COLUMNS)
    for i in range(len(history["epoch"])):
        writer.writerow([int(history["epoch"][i])] + [repr(history[c][i]) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


def svg_line_plot(
    series: dict[str, Sequence[float]],
    x: Sequence[float],
    title: str,
    width: int = 480,
    height: int = 300,
) -> str:
    """Minimal SVG line chart; one polyline per series, shared y axis."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    left, right, top, bottom = 50, 20, 30, 40
    xs = np.asarray(x, dtype=float)
    ys = np.concatenate([np.asarray(v, dtype=float) for v in series.values()]) if series else np.zeros(1)
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - left - right, height - top - bottom

    def px(v):
        return left + (v - x0) / (x1 - x0) * pw

    def py(v):
        return top + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for v in (y0, (y0 + y1) / 2, y1):
        out.append(f'<text x="{left - 4}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    for v in (x0, x1):
        out.append(f'<text x="{px(v):.1f}" y="{top + ph + 16}" text-anchor="middle">{v:.3g}</text>')
    for i, (name, vals) in enumerate(series.items()):
        color = colors[i % len(colors)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, vals))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 12 + 14 * i
        out.append(f'<line x1="{left + pw - 110}" y1="{ly - 4}" x2="{left + pw - 92}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw - 88}" y="{ly}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


# ----------------------------------------------------------------- commands


def _cmd_gen_data(args, out: Path) -> tuple[list[Path], int, dict]:
    seed = _resolve_seed(args, {})
    corpus = gen_corpus(seed, args.classes, args.images, args.k, args.dim, args.tokens, args.noise)
    path = out / args.name
    save_features(path, corpus.to_bank())
    print(f"wrote {path} ({corpus.n_images} images, K={corpus.K})")
    return [path], seed, {}


def _train_artifacts(out: Path, ckpt) -> list[Path]:
    ck_path = out / "checkpoint.mpsf"
    save_checkpoint(ck_path, ckpt)
    hist = out / "history.csv"
    _write_text(hist, history_to_csv(ckpt.history))
    rows = [({"epoch": "final"}, ckpt.final_val_report())]
    rep_csv, rep_md = out / "val_report.csv", out / "val_report.md"
    _write_text(rep_csv, reports_to_csv(rows))
    _write_text(rep_md, reports_to_markdown(rows))
    return [ck_path, hist, rep_csv, rep_md]


def _cmd_train(args, out: Path):
    cfg = resolve_train_config(args)
    corpus, corpus_info = _load_corpus(args)
    ckpt = train(corpus, cfg)
    artifacts = _train_artifacts(out, ckpt)
    h = ckpt.history
    print(f"trained {cfg.epochs} epochs: final loss {h['loss_total'][-1]:.4f}, "
          f"val mR {h['val_mR'][-1]:.2f} (best {max(h['val_mR']):.2f} at epoch {ckpt.best_epoch})")
    return artifacts, cfg.seed, {"config": dataclasses.asdict(cfg), "corpus": corpus_info}


def _cmd_eval(args, out: Path):
    ckpt = load_checkpoint(args.checkpoint)
    corpus, corpus_info = _load_corpus(args)
    report = evaluate(model_from_checkpoint(ckpt, best=args.best), corpus, args.split, ckpt.config)
    rows = [({"split": args.split, "weights": "best" if args.best else "final"}, report)]
    rep_csv, rep_md = out / "eval_report.csv", out / "eval_report.md"
    _write_text(rep_csv, reports_to_csv(rows))
    _write_text(rep_md, reports_to_markdown(rows))
    print(reports_to_markdown(rows), end="")
    extra = {"config": dataclasses.asdict(ckpt.config), "corpus": corpus_info,
             "checkpoint": {"path": str(args.checkpoint), "sha256": _sha256(args.checkpoint)}}
    return [rep_csv, rep_md], ckpt.config.seed, extra


def _cmd_gradcheck(args, out: Path):
    seed = _resolve_seed(args, {})
    errors = run_suite(seed, args.n_seeds, args.step)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["component", "worst_relative_error", "pass"])
    for name, err in errors.items():
        ok = err < GRADCHECK_TOLERANCE
        writer.writerow([name, f"{err:.3e}", ok])
        print(f"{name:30s} {err:.3e}  {'ok' if ok else 'FAIL'}")
    path = out / "gradcheck.csv"
    _write_text(path, buf.getvalue())
    failed = [n for n, e in errors.items() if not e < GRADCHECK_TOLERANCE]
    return [path], seed, {"worst_relative_error": errors, "failed": failed}


def _cmd_ablate(args, out: Path):
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    cfg = resolve_train_config(args)
    corpus, corpus_info = _load_corpus(args)
    rows = ablate(corpus, cfg, GRIDS[args.grid], split=args.split, jobs=args.jobs)
    csv_path, md_path = out / f"ablation_{args.grid}.csv", out / f"ablation_{args.grid}.md"
    _write_text(csv_path, reports_to_csv(rows))
    _write_text(md_path, reports_to_markdown(rows))
    print(reports_to_markdown(rows), end="")
    return [csv_path, md_path], cfg.seed, {"config": dataclasses.asdict(cfg), "corpus": corpus_info}


def _markdown_from_csv(header: list[str], rows: list[dict[str, str]]) -> str:
    names = {"True": "✓", "False": "×"}
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        lines.append("| " + " | ".join(names.get(r[c], r[c]) for c in header) + " |")
    return "\n".join(lines) + "\n"


def _cmd_report(args, out: Path):
    artifacts = []
    for src in args.csv:
        try:
            header, rows = read_report_csv(src.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"no such file: {src}") from None
        if not header:
            raise UsageError(f"{src} has no header row")
        md = out / (src.stem + ".md")
        _write_text(md, _markdown_from_csv(header, rows))
        artifacts.append(md)
        if "epoch" in header and "loss_total" in header:
            try:
                epochs = [float(r["epoch"]) for r in rows]
                loss = {c: [float(r[c]) for r in rows] for c in ("loss_total", "loss_base", "loss_mpc", "loss_mpt", "train_loss") if c in header}
                recall = {c: [float(r[c]) for r in rows] for c in header if c.startswith("val_")}
            except ValueError as e:
                raise UsageError(f"{src}: non-numeric history value ({e})") from None
            for suffix, series, title in (("loss", loss, "training loss"), ("recall", recall, "validation recall")):
                svg = out / f"{src.stem}_{suffix}.svg"
                _write_text(svg, svg_line_plot(series, epochs, title))
                artifacts.append(svg)
        print(f"rendered {src}")
    return artifacts, _resolve_seed(args, {}), {"inputs": {str(p): _sha256(p) for p in args.csv}}


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Execute one command and return its exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    out: Path = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        artifacts, seed, extra = _COMMANDS[args.command](args, out)
        _write_manifest(out, argv, args, seed, artifacts, extra)
    except (UsageError, ConfigurationError, FeatureFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, NumericError, ArithmeticError, OSError) as e:
        print(f"failure: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.command == "gradcheck" and extra.get("failed"):
        print(f"gradient check failed for: {', '.join(extra['failed'])}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
