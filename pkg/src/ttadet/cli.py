"""Command-line entry point.

    ttadet {pretrain|fit-stats|adapt|ablate|report} --config PATH [--set k=v ...] [--seed N] [--out DIR]

Artifacts live under the output directory: ``checkpoint/`` and
``pretrain.json`` from ``pretrain``, ``stats/`` from ``fit-stats``,
``adapt/`` from ``adapt``, ``ablation/`` from ``ablate`` and ``report.md``.
Exit codes: 2 bad config, 3 pretraining below the mAP floor, 4 covariance
not positive definite after jitter, 5 statistics/model dimension mismatch,
1 missing input artifact.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .alignment import check_positive_definite
from .detector import DetectorParams, load_checkpoint, save_checkpoint
from .engine import PRESETS
from .errors import DimMismatch, NotPositiveDefinite
from .experiment import (
    ConfigError, ExperimentConfig, build_config, load_config, run_preset, source_data, stats_scenes, stream_data,
    validation_data,
)
from .source import SourceStats, clean_map, fit_source_stats, pretrain
from .stats import GaussianStats, default_jitter, regularize

log = logging.getLogger("ttadet")

EXIT_MISSING, EXIT_CONFIG, EXIT_FLOOR, EXIT_PSD, EXIT_DIM = 1, 2, 3, 4, 5
ABLATION_ORDER = ("direct-test", "st", "align", "st+global", "stfar")


class CommandFailed(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    if not path.exists():
        raise CommandFailed(EXIT_MISSING, f"missing artifact {path}; run the earlier pipeline step first")
    return json.loads(path.read_text())


def _load_model(out: Path) -> DetectorParams:
    if not (out / "checkpoint" / "manifest.json").exists():
        raise CommandFailed(EXIT_MISSING, f"no checkpoint under {out}; run `ttadet pretrain` first")
    params, _ = load_checkpoint(out / "checkpoint")
    return params


def _load_stats(out: Path) -> SourceStats:
    paths = [out / "stats" / "global.json", out / "stats" / "foreground.json"]
    for p in paths:
        if not p.exists():
            raise CommandFailed(EXIT_MISSING, f"missing {p}; run `ttadet fit-stats` first")
    return SourceStats(GaussianStats.load(paths[0]), GaussianStats.load(paths[1]))


def _check_dims(params: DetectorParams, stats: SourceStats) -> None:
    model = params.config
    if stats.global_stats.dim != model.feature_channels or stats.foreground_stats.dim != model.roi_dim:
        raise CommandFailed(
            EXIT_DIM,
            f"statistics dims ({stats.global_stats.dim}, {stats.foreground_stats.dim}) do not match "
            f"the model's (C, D) = ({model.feature_channels}, {model.roi_dim})")


def cmd_pretrain(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    params = pretrain(cfg.model, source_data(cfg), cfg.pretrain, seed)
    score = clean_map(params, validation_data(cfg))
    save_checkpoint(params, out / "checkpoint", extra={"seed": seed})
    report = {"seed": seed, "clean_map": score, "map_floor": cfg.pretrain.map_floor,
              "passed": score >= cfg.pretrain.map_floor}
    _write_json(out / "pretrain.json", report)
    print(f"pretrain: clean mAP@{cfg.eval_iou} = {score:.4f} (floor {cfg.pretrain.map_floor})")
    if not report["passed"]:
        raise CommandFailed(EXIT_FLOOR, f"clean mAP {score:.4f} is below the floor {cfg.pretrain.map_floor}")
    return report


def cmd_fit_stats(cfg: ExperimentConfig, out: Path, seed: int) -> SourceStats:
    params = _load_model(out)
    stats = fit_source_stats(params, stats_scenes(cfg))
    for name, s in (("global", stats.global_stats), ("foreground", stats.foreground_stats)):
        eps = cfg.tta.jitter if cfg.tta.jitter is not None else default_jitter(s.cov)
        try:
            check_positive_definite(regularize(s, eps))
        except NotPositiveDefinite as exc:
            raise CommandFailed(EXIT_PSD, f"{name} covariance: {exc}") from exc
    _check_dims(params, stats)
    (out / "stats").mkdir(parents=True, exist_ok=True)
    stats.global_stats.save(out / "stats" / "global.json")
    stats.foreground_stats.save(out / "stats" / "foreground.json")
    print(f"fit-stats: global dim {stats.global_stats.dim}, foreground dim {stats.foreground_stats.dim}")
    return stats


def cmd_adapt(cfg: ExperimentConfig, out: Path, seed: int, flags: str = "stfar") -> dict:
    params, stats = _load_model(out), _load_stats(out)
    _check_dims(params, stats)
    rows = {}
    for corruption in cfg.stream.corruptions:
        stream = stream_data(cfg, corruption)
        direct = run_preset(params, stats, stream, cfg, "direct-test", seed)
        adapted = direct if flags == "direct-test" else run_preset(params, stats, stream, cfg, flags, seed)
        path = out / "adapt" / f"{corruption.name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(adapted.to_csv())
        rows[corruption.name] = {
            "direct_test_map": direct.final_map,
            "adapted_map": adapted.final_map,
            "gain": adapted.final_map - direct.final_map,
            "updates": adapted.summary()["updates"],
        }
        print(f"adapt [{flags}] {corruption.name}: direct {direct.final_map:.4f} -> adapted {adapted.final_map:.4f}")
    summary = {
        "flags": flags,
        "seed": seed,
        "corruptions": rows,
        "mean": {k: float(np.mean([r[k] for r in rows.values()])) for k in ("direct_test_map", "adapted_map", "gain")},
    }
    _write_json(out / "adapt" / "summary.json", summary)
    return summary


def ablation_table(maps: dict[str, list[float]], seeds: Sequence[int]) -> list[dict]:
    """One row per preset with mean/std over seeds and how often it was the best row."""
    best = [max(ABLATION_ORDER, key=lambda p: (maps[p][i], ABLATION_ORDER.index(p))) for i in range(len(seeds))]
    rows = []
    for preset in ABLATION_ORDER:
        flags = PRESETS[preset]
        vals = np.array(maps[preset])
        row = {
            "preset": preset,
            "self_training": int(flags["self_training"]),
            "global_align": int(flags["global_align"]),
            "foreground_align": int(flags["foreground_align"]),
            "mean_map": f"{vals.mean():.6f}",
            "std_map": f"{vals.std():.6f}",
            "best_in_seeds": sum(b == preset for b in best),
        }
        row.update({f"map_seed{s}": f"{v:.6f}" for s, v in zip(seeds, vals)})
        rows.append(row)
    return rows


def cmd_ablate(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    params, stats = _load_model(out), _load_stats(out)
    _check_dims(params, stats)
    tables = {}
    for corruption in cfg.stream.corruptions:
        stream = stream_data(cfg, corruption)
        maps = {p: [run_preset(params, stats, stream, cfg, p, s).final_map for s in cfg.seeds]
                for p in ABLATION_ORDER}
        rows = ablation_table(maps, cfg.seeds)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        path = out / "ablation" / f"{corruption.name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue())
        tables[corruption.name] = rows
        print(f"ablate {corruption.name} over seeds {list(cfg.seeds)}:")
        for r in rows:
            print(f"  {r['preset']:<12} {r['mean_map']} +- {r['std_map']}")
    return tables


def cmd_report(cfg: ExperimentConfig, out: Path, seed: int) -> str:
    lines = ["# Adaptation report", ""]
    pre = out / "pretrain.json"
    if pre.exists():
        doc = json.loads(pre.read_text())
        lines += [f"Source model: clean mAP {doc['clean_map']:.4f} (floor {doc['map_floor']}, seed {doc['seed']}).", ""]
    summary = out / "adapt" / "summary.json"
    if summary.exists():
        doc = json.loads(summary.read_text())
        lines += [f"## Adaptation ({doc['flags']}, seed {doc['seed']})", "",
                  "| stream | direct test | adapted | gain |", "|---|---|---|---|"]
        for name, r in doc["corruptions"].items():
            lines.append(f"| {name} | {r['direct_test_map']:.4f} | {r['adapted_map']:.4f} | {r['gain']:+.4f} |")
        lines.append("")
    for path in sorted((out / "ablation").glob("*.csv")) if (out / "ablation").exists() else []:
        rows = list(csv.DictReader(io.StringIO(path.read_text())))
        lines += [f"## Ablation on {path.stem}", "", "| preset | mean mAP | std | best in seeds |", "|---|---|---|---|"]
        lines += [f"| {r['preset']} | {r['mean_map']} | {r['std_map']} | {r['best_in_seeds']} |" for r in rows]
        lines.append("")
    if len(lines) == 2:
        raise CommandFailed(EXIT_MISSING, f"nothing to report under {out}")
    text = "\n".join(lines)
    (out / "report.md").write_text(text)
    print(text, end="")
    return text


COMMANDS = {
    "pretrain": cmd_pretrain,
    "fit-stats": cmd_fit_stats,
    "adapt": cmd_adapt,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttadet", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dot-path override, e.g. tta.gamma=0.015625; repeatable")
    parser.add_argument("--seed", type=int, help="run seed (overrides the config's seed)")
    parser.add_argument("--out", help="output directory (overrides the config's output_dir)")
    parser.add_argument("--flags", choices=sorted(PRESETS), default="stfar",
                        help="component preset for `adapt`")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides) if args.config else build_config({}, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "adapt":
            cmd_adapt(cfg, out, seed, args.flags)
        else:
            COMMANDS[args.command](cfg, out, seed)
    except CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DimMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIM
    return 0


if __name__ == "__main__":
    sys.exit(main())
