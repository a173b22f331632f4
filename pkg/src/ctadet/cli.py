"""Command-line surface: dataset synthesis, detection, rescoring,
evaluation, and two-run comparison.

Exit codes: 0 success, 2 configuration or usage error, 3 data error
(missing or corrupt files), 4 consistency error (mismatched volume sets).
Every command is deterministic given its config (seeds included); reruns
produce byte-identical outputs, independent of ``--jobs``.
"""

from __future__ import annotations

import argparse
import importlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .evaluation import EvalVolume, build_report, fisher_exact
from .formats import (
    Manifest,
    ManifestVolume,
    read_annotations,
    read_candidates,
    read_manifest,
    write_annotations,
    write_candidates,
    write_froc_csv,
    write_manifest,
    write_roc_csv,
)
from .pipeline import detect_volume, oracle_scorer_factory, reduce_volume
from .synth import PhantomSpec, generate_phantom, perfect_classifier, reference_classifier
from .volume import read_volume, write_volume


class ConfigError(Exception):
    exit_code = 2


class DataError(Exception):
    exit_code = 3


class ConsistencyError(Exception):
    exit_code = 4


def _load_config(args) -> RunConfig:
    if args.config:
        try:
            cfg = RunConfig.from_file(args.config)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {args.config}") from e
        except (ValueError, TypeError, json.JSONDecodeError) as e:
            raise ConfigError(f"invalid config {args.config}: {e}") from e
    else:
        cfg = RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    if cfg.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {cfg.jobs}")
    return cfg


def _run_tasks(worker, tasks, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, tasks))


def _resolve_plugin(spec: str):
    module, _, attr = spec.partition(":")
    if not attr:
        raise ConfigError(f"plugin must be 'module:callable', got {spec!r}")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"cannot load plugin {spec!r}: {e}") from e


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _phantom_spec(cfg: RunConfig, seed: int, n_aneurysms: int) -> PhantomSpec:
    return PhantomSpec(
        dims=cfg.phantom_dims,
        spacing=cfg.phantom_spacing,
        n_vessels=cfg.n_vessels,
        vessel_radius_range=cfg.vessel_radius_range,
        n_aneurysms=n_aneurysms,
        aneurysm_diameter_range=cfg.aneurysm_diameter_range,
        vessel_hu=cfg.vessel_hu,
        aneurysm_hu=cfg.aneurysm_hu,
        background_hu=cfg.background_hu,
        noise_sigma=cfg.phantom_noise_sigma,
        seed=seed,
    )


def _synth_worker(task):
    vid, spec, out_dir = task
    volume, lesions = generate_phantom(spec, volume_id=vid)
    write_volume(volume, Path(out_dir) / vid)
    return vid, lesions


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory not writable: {out_dir} ({e})") from e

    try:
        tasks = []
        for i in range(cfg.n_volumes):
            vid = f"vol-{i:04d}"
            # phantom seed is base seed + volume index; the lesion-free
            # decision draws from its own (seed, 9090, index) stream
            negative = (
                cfg.negative_fraction > 0
                and np.random.default_rng([cfg.seed, 9090, i]).random()
                < cfg.negative_fraction
            )
            n_an = 0 if negative else cfg.n_aneurysms
            tasks.append((vid, _phantom_spec(cfg, cfg.seed + i, n_an), str(out_dir)))
        results = _run_tasks(_synth_worker, tasks, cfg.jobs)
    except ValueError as e:
        raise ConfigError(f"invalid phantom configuration: {e}") from e

    annotations = {vid: lesions for vid, lesions in results if lesions}
    write_annotations(out_dir / "annotations.jsonl", annotations)
    manifest = Manifest(
        volumes=tuple(
            ManifestVolume(vid, f"{vid}.vol.json", len(lesions))
            for vid, lesions in results
        ),
        annotations="annotations.jsonl",
        seed=cfg.seed,
    )
    write_manifest(out_dir / "manifest.json", manifest)
    print(f"wrote {len(results)} volumes to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

def _load_dataset(manifest_path) -> tuple[Manifest, Path, dict]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    manifest = read_manifest(manifest_path)
    base = manifest_path.parent
    ann_path = base / manifest.annotations
    if not ann_path.exists():
        raise DataError(f"annotation file not found: {ann_path}")
    annotations = read_annotations(ann_path)
    unknown = sorted(set(annotations) - set(manifest.volume_ids()))
    if unknown:
        raise ConsistencyError(
            f"annotations reference volume ids missing from the manifest: {unknown}"
        )
    return manifest, base, annotations


def _detect_worker(task):
    vid, volume_path, boxes, cfg, seed, detector = task
    try:
        volume = read_volume(volume_path)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(f"cannot read volume {vid!r}: {e}") from e
    factory = (
        oracle_scorer_factory if detector == "oracle" else _resolve_plugin(detector)
    )
    return vid, detect_volume(volume, boxes, cfg, seed, factory)


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    manifest, base, annotations = _load_dataset(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [
        (
            entry.volume_id,
            str(base / entry.volume),
            [l.box for l in annotations.get(entry.volume_id, [])],
            cfg,
            cfg.seed + i,
            args.detector,
        )
        for i, entry in enumerate(manifest.volumes)
    ]
    results = _run_tasks(_detect_worker, tasks, cfg.jobs)
    for vid, cands in results:
        write_candidates(out_dir / f"{vid}.cand.jsonl", vid, cands)
    print(f"wrote candidates for {len(results)} volumes to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# reduce
# ---------------------------------------------------------------------------

def _read_volume_candidates(path, vid):
    # records for other manifest volumes are legal and ignored here; the
    # parent already rejected ids outside the manifest
    if not Path(path).exists():
        raise DataError(f"candidate file not found for volume {vid!r}: {path}")
    return [cand for rec_vid, cand in read_candidates(path) if rec_vid == vid]


def _reduce_worker(task):
    vid, volume_path, cand_path, lesions, cfg, classifier = task
    try:
        volume = read_volume(volume_path)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(f"cannot read volume {vid!r}: {e}") from e
    cands = _read_volume_candidates(cand_path, vid)
    if classifier == "reference":
        clf = reference_classifier
    elif classifier == "perfect":
        clf = perfect_classifier(lesions)
    else:
        clf = _resolve_plugin(classifier)(volume, lesions, cfg)
    return vid, reduce_volume(volume, cands, clf, cfg)


def cmd_reduce(args) -> int:
    cfg = _load_config(args)
    manifest, base, annotations = _load_dataset(args.manifest)
    cand_dir = Path(args.candidates)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    known = set(manifest.volume_ids())
    # reject candidate files whose records point at ids outside the manifest
    for path in sorted(cand_dir.glob("*.cand.jsonl")):
        for rec_vid, _ in read_candidates(path):
            if rec_vid not in known:
                raise DataError(
                    f"{path}: candidate references unknown volume id {rec_vid!r}"
                )
    tasks = [
        (
            entry.volume_id,
            str(base / entry.volume),
            str(cand_dir / f"{entry.volume_id}.cand.jsonl"),
            annotations.get(entry.volume_id, []),
            cfg,
            args.classifier,
        )
        for entry in manifest.volumes
    ]
    results = _run_tasks(_reduce_worker, tasks, cfg.jobs)
    for vid, cands in results:
        write_candidates(out_dir / f"{vid}.cand.jsonl", vid, cands)
    print(f"wrote rescored candidates for {len(results)} volumes to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _load_config(args)
    manifest, base, annotations = _load_dataset(args.manifest)
    cand_dir = Path(args.candidates)
    ids = manifest.volume_ids()
    id_set = set(ids)

    missing = [vid for vid in ids if not (cand_dir / f"{vid}.cand.jsonl").exists()]
    extra_files = sorted(
        p.name[: -len(".cand.jsonl")]
        for p in cand_dir.glob("*.cand.jsonl")
        if p.name[: -len(".cand.jsonl")] not in id_set
    )
    if missing or extra_files:
        raise ConsistencyError(
            "candidate files do not match the manifest volume ids; "
            f"missing candidates: {missing}; unknown candidate files: {extra_files}"
        )
    candidates = {}
    foreign = set()
    for vid in ids:
        cands = []
        for rec_vid, cand in read_candidates(cand_dir / f"{vid}.cand.jsonl"):
            if rec_vid not in id_set:
                foreign.add(rec_vid)
            elif rec_vid == vid:
                cands.append(cand)
        candidates[vid] = cands
    if foreign:
        raise ConsistencyError(
            f"candidate records reference unknown volume ids: {sorted(foreign)}"
        )

    volumes = [
        EvalVolume(
            vid,
            tuple(annotations.get(vid, [])),
            tuple(candidates[vid]),
        )
        for vid in ids
    ]
    try:
        report = build_report(
            volumes,
            fppv_grid=cfg.fppv_grid,
            operating_fppvs=cfg.operating_fppvs,
            strata_keys=cfg.strata_keys if annotations else (),
            n_resamples=cfg.bootstrap_resamples,
            level=cfg.bootstrap_level,
            seed=cfg.seed,
            provenance={
                "manifest": str(args.manifest),
                "candidates": str(args.candidates),
                "seed": cfg.seed,
                "bootstrap_resamples": cfg.bootstrap_resamples,
                "fppv_grid": list(cfg.fppv_grid),
                "operating_fppvs": list(cfg.operating_fppvs),
            },
        )
    except ValueError as e:
        raise DataError(f"cannot evaluate dataset: {e}") from e
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    write_froc_csv(out_dir / "froc.csv", report.froc.thresholds, report.froc.points)
    if report.roc is not None:
        write_roc_csv(out_dir / "roc.csv", report.roc.thresholds, report.roc.points)
    else:
        write_roc_csv(out_dir / "roc.csv", (), ())
    print(f"wrote report to {out_dir / 'report.json'}")
    return 0


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _predictions(report: dict, op: dict) -> dict[str, tuple[bool, bool]]:
    """volume id -> (predicted, has_lesion) at one operating point."""
    out = {}
    for rec in report["volume_scores"]:
        score = rec["score"]
        threshold = op["threshold"]
        predicted = score >= threshold if op["score_rule"] == "ge" else score > threshold
        out[rec["volume_id"]] = (predicted, rec["has_lesion"])
    return out


def _fisher_or_none(table) -> float | None:
    if sum(table[0]) + sum(table[1]) == 0:
        return None
    return fisher_exact(table)


def cmd_compare(args) -> int:
    try:
        report_a = json.loads(Path(args.report_a).read_text())
        report_b = json.loads(Path(args.report_b).read_text())
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    ids_a = {r["volume_id"] for r in report_a["volume_scores"]}
    ids_b = {r["volume_id"] for r in report_b["volume_scores"]}
    if ids_a != ids_b:
        raise ConsistencyError(
            "reports cover different volume sets; "
            f"only in A: {sorted(ids_a - ids_b)}; only in B: {sorted(ids_b - ids_a)}"
        )
    ops_a = {op["name"]: op for op in report_a["operating_points"]}
    ops_b = {op["name"]: op for op in report_b["operating_points"]}
    rows = []
    for name in [n for n in ops_a if n in ops_b]:
        preds_a = _predictions(report_a, ops_a[name])
        preds_b = _predictions(report_b, ops_b[name])
        ids = sorted(ids_a)

        def counts(preds, subset):
            correct = sum(
                preds[v][0] == preds[v][1] for v in ids if subset(preds[v][1])
            )
            total = sum(1 for v in ids if subset(preds[v][1]))
            return [correct, total - correct]

        acc = [counts(preds_a, lambda _: True), counts(preds_b, lambda _: True)]
        sens = [counts(preds_a, lambda pos: pos), counts(preds_b, lambda pos: pos)]
        spec = [
            counts(preds_a, lambda pos: not pos),
            counts(preds_b, lambda pos: not pos),
        ]
        rows.append(
            {
                "name": name,
                "a": ops_a[name]["metrics"],
                "b": ops_b[name]["metrics"],
                "p_accuracy": _fisher_or_none(acc),
                "p_sensitivity": _fisher_or_none(sens),
                "p_specificity": _fisher_or_none(spec),
            }
        )
    comparison = {
        "n_volumes": len(ids_a),
        "operating_points": rows,
        "froc_a": report_a["froc"]["points"],
        "froc_b": report_b["froc"]["points"],
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(comparison, sort_keys=True, indent=2) + "\n")
    print(f"wrote comparison to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--jobs", type=int, default=None, help="parallel volume workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctadet",
        description="Two-stage volumetric lesion detection pipeline and evaluator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="run first-stage detection over a dataset")
    _add_common(p)
    p.add_argument("--manifest", required=True, help="dataset manifest.json")
    p.add_argument("--out", required=True, help="candidate output directory")
    p.add_argument(
        "--detector",
        default="oracle",
        help="'oracle' or a plugin 'module:factory' (default: oracle)",
    )
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("reduce", help="rescore candidates with a patch classifier")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--candidates", required=True, help="first-stage candidate dir")
    p.add_argument("--out", required=True, help="rescored candidate directory")
    p.add_argument(
        "--classifier",
        default="reference",
        help="'reference', 'perfect', or a plugin 'module:factory'",
    )
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("eval", help="evaluate candidates against annotations")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True, help="report output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare two evaluation reports")
    _add_common(p)
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.add_argument("--out", required=True, help="comparison JSON path")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, ConsistencyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
