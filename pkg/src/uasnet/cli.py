"""Command-line entry points.

Every command prints one JSON line to stdout on success (``status`` and the
list of written ``artifacts``) and one JSON line to stderr on failure. Exit
codes: 0 ok, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyRegionError, InvalidInputError, UASNetError

log = logging.getLogger("uasnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; route it through our usage code instead
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# generate / validate


def cmd_generate(args) -> list[Path]:
    from .data import PhantomSpec, generate_dataset, phantom_spec_from_dict, write_dataset

    spec = PhantomSpec()
    if args.spec:
        spec = phantom_spec_from_dict(_read_json(args.spec))
    overrides = {k: v for k, v in (("patch_size", args.patch_size), ("noise_sigma", args.noise_sigma),
                                   ("annotator_jitter_hu", args.jitter), ("annotator_spread", args.spread))
                 if v is not None}
    spec = replace(spec, **overrides).validate()
    if args.count < 0:
        raise InvalidInputError("--count must be >= 0")
    samples = generate_dataset(args.count, args.seed, spec, args.malignant_fraction, args.cavity_fraction)
    out = Path(args.out)
    write_dataset(samples, out, spec.patch_size)
    return [out / "manifest.json"] + [out / s.sample_id for s in samples]


def cmd_validate(args) -> list[Path]:
    from .data import validate_dataset

    problems = validate_dataset(args.dataset)
    if problems:
        raise DataError(f"{len(problems)} problem(s): " + "; ".join(problems[:5]))
    return []


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> list[Path]:
    from filelock import FileLock, Timeout

    from .data import read_manifest
    from .training import TrainConfig, load_config, out_of_fold_predictions, run_cv, write_metrics_csv

    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jap is not None:
        overrides["jap_enabled"] = args.jap
        overrides["compare_jap"] = False
    if args.fa_cat_placement is not None:
        overrides["fa_cat_placement"] = args.fa_cat_placement
    if args.dataset is not None:
        overrides["dataset"] = args.dataset
    if args.name is not None:
        overrides["name"] = args.name
    config = TrainConfig.from_dict({**config.to_dict(), **overrides})
    if not config.dataset:
        raise InvalidInputError("no dataset: set 'dataset' in the config or pass --dataset")

    run_dir = Path(args.out) / config.name
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise RuntimeError(f"run directory {run_dir} is locked by another process") from None
    try:
        resolved = run_dir / "config-resolved.json"
        resolved.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        manifest = read_manifest(config.dataset)
        samples = {s.sample_id: s for s in manifest.load_all()}
        report = run_cv(manifest, config, run_dir, samples)
        artifacts = [resolved, write_metrics_csv(report, run_dir / "metrics.csv"), run_dir / "losses.csv",
                     run_dir / "report.csv", run_dir / "report.md", run_dir / "checkpoints"]
        for arm in report.folds:
            preds = out_of_fold_predictions(run_dir, report, samples, arm)
            try:
                artifacts += _write_curves(run_dir / "curves" / arm, [samples[i] for i in preds],
                                           list(preds.values()), args.bandwidth, skip_empty=True)
            except EmptyRegionError as exc:
                log.warning("no HU curves for arm %s: %s", arm, exc)
        return artifacts
    finally:
        lock.release()


# ---------------------------------------------------------------------------
# predict


def _load_inputs(path):
    """A dataset root (with manifest.json) or a single sample directory."""
    from .data import read_manifest, read_sample

    path = Path(path)
    if (path / "manifest.json").exists():
        return read_manifest(path).load_all()
    if (path / "meta.json").exists():
        return [read_sample(path)]
    raise DataError(f"{path} is neither a dataset root nor a sample directory")


def _write_map(out_dir: Path, name: str, array, discrete_png=None) -> list[Path]:
    from .metrics import save_png

    raw = out_dir / f"{name}.f32"
    raw.write_bytes(np.asarray(array, dtype="<f4").tobytes(order="C"))
    png = save_png(array if discrete_png is None else discrete_png, out_dir / f"{name}.png")
    return [png, raw]


def cmd_predict(args) -> list[Path]:
    from .checkpoint import load_models
    from .masks import build_mcm
    from .model import predict

    seg, _, _ = load_models(args.checkpoint)
    artifacts = []
    for sample in _load_inputs(args.dataset):
        out_dir = Path(args.out) / sample.sample_id
        out_dir.mkdir(parents=True, exist_ok=True)
        p = predict(seg, sample.image)
        mcm = build_mcm(p["union"], p["inter"])
        artifacts += _write_map(out_dir, "p_union", p["union"])
        artifacts += _write_map(out_dir, "p_inter", p["inter"])
        artifacts += _write_map(out_dir, "p_mcm", mcm.soft, mcm.discrete)
        artifacts += _write_map(out_dir, "r", p["r"])
        if sample.n_annotations:
            t = sample.targets()
            s_mcm = sample.mcm()
            artifacts += _write_map(out_dir, "s_union", t["union"])
            artifacts += _write_map(out_dir, "s_inter", t["inter"])
            artifacts += _write_map(out_dir, "s_mcm", s_mcm.soft, s_mcm.discrete)
    return artifacts


# ---------------------------------------------------------------------------
# analyze-hu


def _plot_curves(curves: dict, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {"hc": "tab:red", "lc": "tab:blue"}
    for key, curve in sorted(curves.items()):
        kind, region = key.split("_")
        ax.plot(curve.grid, curve.normalized(), color=colors[region], linestyle=":" if kind == "real" else "-",
                label=f"{kind} {region.upper()}")
    ax.set_xlabel("HU")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _write_curves(out_dir: Path, samples, predictions=None, bandwidth=None, skip_empty=False) -> list[Path]:
    from .metrics import hu_curve_set, write_curve_csv

    curves, distances = hu_curve_set(samples, predictions, bandwidth, skip_empty_predictions=skip_empty)
    if predictions is not None:
        for key in ("hc", "lc"):
            if f"pred_{key}" not in curves:
                log.warning("predicted %s region is empty in every sample; curve skipped", key.upper())
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = [write_curve_csv(c, out_dir / f"{k}.csv") for k, c in sorted(curves.items())]
    summary = {k: {"mode": c.mode(), "bandwidth": c.bandwidth, "n": c.n} for k, c in sorted(curves.items())}
    if distances:
        summary["distance"] = distances
    summary_path = out_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    artifacts += [summary_path, _plot_curves(curves, out_dir / "hu_curves.png")]
    return artifacts


def cmd_analyze_hu(args) -> list[Path]:
    from .checkpoint import load_models
    from .model import predict

    samples = [s for s in _load_inputs(args.dataset) if s.n_annotations > 0]
    predictions = None
    if args.checkpoint:
        seg, _, _ = load_models(args.checkpoint)
        predictions = [predict(seg, s.image)["mcm"] for s in samples]
    return _write_curves(Path(args.out), samples, predictions, args.bandwidth)


# ---------------------------------------------------------------------------
# plumbing


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidInputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON ({exc})") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uasnet", description="Multi-annotation lung nodule segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--spec", help="JSON file with phantom parameters")
    g.add_argument("--patch-size", type=int)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--jitter", type=float, help="annotator HU threshold jitter")
    g.add_argument("--spread", type=float, help="annotator disagreement scale (0 = identical readers)")
    g.add_argument("--malignant-fraction", type=float, default=0.4)
    g.add_argument("--cavity-fraction", type=float, default=0.2)
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", help="check a dataset against its manifest")
    v.add_argument("--dataset", required=True)
    v.set_defaults(func=cmd_validate)

    t = sub.add_parser("train", help="five-fold cross-validated training")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="runs", help="parent of the run directory (default: runs)")
    t.add_argument("--dataset", help="override the config's dataset path")
    t.add_argument("--name", help="override the run name")
    t.add_argument("--seed", type=int)
    t.add_argument("--jap", dest="jap", action="store_true", default=None)
    t.add_argument("--no-jap", dest="jap", action="store_false")
    t.add_argument("--fa-cat-placement", help="high, low, none or comma-separated levels")
    t.add_argument("--bandwidth", type=float, help="KDE bandwidth in HU (default: Silverman)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write P-Union, P-Intersection, P-MCM and R maps")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--dataset", required=True, help="dataset root or single sample directory")
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("analyze-hu", help="HC/LC HU density curves, real and predicted")
    a.add_argument("--dataset", required=True)
    a.add_argument("--checkpoint")
    a.add_argument("--out", required=True)
    a.add_argument("--bandwidth", type=float)
    a.set_defaults(func=cmd_analyze_hu)
    return p


def _fail(code: int, exc: BaseException) -> int:
    payload = {"status": "error", "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    terms = getattr(exc, "terms", None)
    if terms:
        payload["terms"] = terms
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        artifacts = args.func(args)
    except EmptyRegionError as exc:
        return _fail(EXIT_DATA, exc)
    except (UsageError, InvalidInputError) as exc:
        return _fail(EXIT_USAGE, exc)
    except DataError as exc:
        return _fail(EXIT_DATA, exc)
    except (UASNetError, RuntimeError, OSError) as exc:
        return _fail(EXIT_RUNTIME, exc)
    print(json.dumps({"status": "ok", "command": args.command, "artifacts": [str(a) for a in artifacts]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
