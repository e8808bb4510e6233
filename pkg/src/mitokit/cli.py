"""Command-line interface.

Every subcommand resolves a configuration from built-in defaults, then a JSON
config file (``--config`` or the ``MITOKIT_CONFIG`` environment variable),
then command-line flags, in increasing precedence. The resolved configuration
is embedded in the report, and output files are named after its hash, so a
rerun with the same configuration reproduces the same files.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 integrity
error, 5 partial failure.
"""
from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

from mitokit import __version__
from mitokit.catalog import (
    counts_summary,
    ingest_manifest,
    merge_annotations,
    recount,
    write_annotations,
    write_manifest,
)
from mitokit.detector import ExternalDetections, MockOracleDetector, calibrate_mock
from mitokit.ema import (
    EmaTracker,
    ema_update,
    export_ensemble,
    load_checkpoint,
    record_validation,
    save_checkpoint,
)
from mitokit.errors import ConfigError, DataError, IntegrityError, MitokitError, PartialFailure
from mitokit.evaluator import evaluate as evaluate_detections
from mitokit.evaluator import read_detections, sweep_threshold, write_detections, write_report_csv
from mitokit.mining import MiningConfig, mine_hard_negatives, mining_report
from mitokit.pipeline import run_bench, run_end2end
from mitokit.sampler import (
    BatchSpec,
    build_plan,
    draw_batch,
    dump_plan,
    empirical_marginals,
    expected_marginals,
)
from mitokit.splitter import grouped_stratified_split, load_folds, save_folds, stratum_fold_counts
from mitokit.synth import dense_catalog, synthetic_catalog
from mitokit.tta import FusionConfig, back_transform, by_id, fuse_detections

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTEGRITY, EXIT_PARTIAL = 0, 2, 3, 4, 5
CONFIG_ENV = "MITOKIT_CONFIG"

DEFAULTS = {
    "seed": None,
    "out_dir": "reports",
    "parallelism": 1,
    "paths": {"manifest": None, "folds": None, "detections": None, "checkpoints": [], "out_manifest": None},
    "split": {"k": 5, "strata_key": None},
    "sampler": {
        "batch_size": 24,
        "n_batches": 1,
        "with_replacement": True,
        "factors": ["dataset", "image", "class"],
        "image_norm": "global",
        "dump_plan": False,
    },
    "evaluator": {"radius": 30.0, "threshold": 0.0, "thresholds": None},
    "tta": {"views": ["identity"], "fusion": {"method": "confidence_average_cluster", "cluster_radius": 16.0, "min_votes": 1}},
    "mining": {"confidence_floor": 0.25, "region_tags": []},
    "mock": {"recall": 0.84, "precision": 0.78, "jitter_px": 3.0, "n_models": 1},
    "ema": {"decay_rates": [1e-3, 5e-4, 2.5e-4]},
    "synth": {"n_patches": None, "scale": 1.0},
}


# -- configuration ---------------------------------------------------------


def _set(cfg: dict, dotted: str, value) -> None:
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    path = ns.config or os.environ.get(CONFIG_ENV)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path!r} is not valid JSON: {exc.msg}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg = _merge(cfg, file_cfg)
    for dest, value in vars(ns).items():
        if "." in dest or dest in ("seed", "out_dir", "parallelism"):
            if value is not None:
                _set(cfg, dest, value)
    if cfg["seed"] is None:
        raise ConfigError("a seed is required (--seed or the config's 'seed' field)")
    cfg["command"] = command
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _require(cfg: dict, key: str) -> str:
    value = cfg["paths"].get(key)
    if not value:
        raise ConfigError(f"{cfg['command']} needs paths.{key} (--{key.replace('_', '-')})")
    if key not in ("out_manifest",) and not Path(value).exists():
        raise ConfigError(f"paths.{key} {value!r} does not exist")
    return value


class Outputs:
    """Content-addressed output files for one command run."""

    def __init__(self, cfg: dict):
        self.dir = Path(cfg["out_dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.prefix = f"{cfg['command']}-{config_hash(cfg)}"
        self.cfg = cfg

    def path(self, suffix: str) -> Path:
        return self.dir / f"{self.prefix}{suffix}"

    def write(self, suffix: str, writer) -> Path:
        """Write through ``writer(tmp_path)``; an existing file must match byte for byte."""
        target = self.path(suffix)
        tmp = target.with_name(target.name + ".tmp")
        writer(tmp)
        if target.exists():
            same = target.read_bytes() == tmp.read_bytes()
            tmp.unlink()
            if not same:
                raise IntegrityError(f"refusing to overwrite {str(target)!r} with different content")
        else:
            tmp.replace(target)
        return target

    def report(self, result: dict, volatile: dict | None = None) -> Path:
        """Write the report once. Run-dependent values (timestamp, timings) go in the header."""
        body = {"config": self.cfg, "result": result}
        target = self.path(".json")
        if target.exists():
            try:
                old = json.loads(target.read_text("utf-8"))
            except json.JSONDecodeError:
                old = None
            if old is None or {k: v for k, v in old.items() if k != "header"} != json.loads(json.dumps(body)):
                raise IntegrityError(f"refusing to overwrite {str(target)!r} with a different report")
            return target
        doc = {
            "header": {
                "tool": "mitokit",
                "version": __version__,
                "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                **({"volatile": volatile} if volatile else {}),
            },
            **body,
        }
        target.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return target


def _catalog(cfg: dict):
    if cfg["paths"].get("manifest"):
        return ingest_manifest(_require(cfg, "manifest"))
    synth = cfg["synth"]
    if synth.get("n_patches"):
        return dense_catalog(int(synth["n_patches"]), seed=cfg["seed"])
    raise ConfigError(f"{cfg['command']} needs --manifest (or --n-patches for a synthetic corpus)")


def _fusion(cfg: dict) -> FusionConfig:
    f = cfg["tta"]["fusion"]
    return FusionConfig(f["method"], float(f["cluster_radius"]), int(f["min_votes"]))


def _mock_detectors(catalog, cfg: dict) -> list[MockOracleDetector]:
    m = cfg["mock"]
    params = calibrate_mock(
        catalog, float(m["recall"]), float(m["precision"]), float(cfg["evaluator"]["threshold"]),
        jitter_px=float(m["jitter_px"]),
    )
    return [
        MockOracleDetector(catalog, params, seed=cfg["seed"], model_id=f"mock{i}")
        for i in range(int(m["n_models"]))
    ]


def _folds(catalog, cfg: dict):
    if cfg["paths"].get("folds"):
        return load_folds(_require(cfg, "folds"))
    return grouped_stratified_split(catalog, int(cfg["split"]["k"]), cfg["split"]["strata_key"], cfg["seed"])


# -- commands --------------------------------------------------------------


def cmd_ingest(cfg, out: Outputs):
    catalog = _catalog(cfg)
    path = out.write(".manifest.jsonl", lambda p: write_manifest(catalog, p))
    summary = counts_summary(catalog.counts)
    print(f"ingested {len(catalog.datasets)} datasets, {len(catalog.slides)} slides, "
          f"{summary['n_patches']} patches, {summary['n_annotations']} annotations")
    return {"counts": summary, "manifest": str(path)}


def cmd_recount(cfg, out: Outputs):
    catalog = _catalog(cfg)
    summary = counts_summary(recount(catalog))
    print(f"MF patches {summary['class_sizes']['MF']}, NMF patches {summary['class_sizes']['NMF']}")
    return {"counts": summary}


def cmd_split(cfg, out: Outputs):
    catalog = _catalog(cfg)
    folds = grouped_stratified_split(catalog, int(cfg["split"]["k"]), cfg["split"]["strata_key"], cfg["seed"])
    path = out.write(".folds.json", lambda p: save_folds(folds, p))
    sizes = [len(folds.slides_in(f)) for f in range(folds.k)]
    spread = max((max(c) - min(c) for c in stratum_fold_counts(catalog, folds).values()), default=0)
    print(f"{folds.k} folds with {sizes} slides; max per-stratum spread {spread}")
    return {"folds_file": str(path), "fold_sizes": sizes, "max_stratum_spread": spread}


def cmd_sample(cfg, out: Outputs):
    catalog = _catalog(cfg)
    s = cfg["sampler"]
    plan = build_plan(catalog, s["factors"], s["image_norm"])
    batches = [
        draw_batch(plan, BatchSpec(int(s["batch_size"]), bool(s["with_replacement"]), cfg["seed"] + i))
        for i in range(int(s["n_batches"]))
    ]
    result = {
        "batches": batches,
        "expected_marginals": expected_marginals(plan),
        "batch_marginals": empirical_marginals(plan, [p for b in batches for p in b]),
    }
    if s["dump_plan"]:
        result["plan_file"] = str(out.write(".plan.json", lambda p: dump_plan(plan, p)))
    cls = result["expected_marginals"]["class"]
    print(f"drew {len(batches)} batch(es) of {s['batch_size']}; expected class marginals "
          + ", ".join(f"{k}={v:.3f}" for k, v in cls.items()))
    return result


def cmd_mine(cfg, out: Outputs):
    catalog = _catalog(cfg)
    m = cfg["mining"]
    config = MiningConfig(float(m["confidence_floor"]), region_tags=frozenset(m["region_tags"]))
    if cfg["paths"].get("detections"):
        detectors = ExternalDetections.from_file(_require(cfg, "detections"))
    else:
        detectors = _mock_detectors(catalog, cfg)
    mined, failures = [], {}
    for det in detectors:
        res = mine_hard_negatives(merge_annotations(catalog, mined), det, config)
        mined.extend(res.annotations)
        failures.update({f"{det.model_id}:{k}": v for k, v in res.failures.items()})
    mined_path = out.write(".mined.jsonl", lambda p: write_annotations(mined, p))
    merged = merge_annotations(catalog, mined)
    manifest_path = out.write(".manifest.jsonl", lambda p: write_manifest(merged, p))
    result = {
        "mined_file": str(mined_path),
        "merged_manifest": str(manifest_path),
        "summary": mining_report(mined, catalog),
        "failures": failures,
    }
    print(f"mined {len(mined)} hard negatives at confidence >= {config.confidence_floor}")
    if failures:
        result["_partial"] = failures
    return result


def cmd_ema(cfg, out: Outputs):
    paths = cfg["paths"]["checkpoints"]
    if isinstance(paths, str):
        paths = [paths]
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.glob("*.ckpt")))
        elif p.exists():
            files.append(p)
        else:
            raise ConfigError(f"checkpoint path {str(p)!r} does not exist")
    if not files:
        raise ConfigError("ema needs at least one checkpoint (--checkpoints)")
    snaps = sorted((load_checkpoint(f) for f in files), key=lambda s: s.step)
    tracker = EmaTracker(cfg["ema"]["decay_rates"])
    for snap in snaps:
        if snap.validation_loss is not None:
            record_validation(tracker, snap)
        else:
            ema_update(tracker, snap)
    ensemble = export_ensemble(tracker)
    written = {}
    for snap in ensemble:
        written[snap.model_id] = {
            "file": str(out.write(f".{snap.model_id}.ckpt", lambda p, s=snap: save_checkpoint(s, p))),
            "step": snap.step,
            "validation_loss": snap.validation_loss,
        }
    print(f"exported {len(ensemble)} snapshots from {len(snaps)} checkpoints")
    return {"ensemble": written, "n_checkpoints": len(snaps)}


def cmd_fuse(cfg, out: Outputs):
    catalog = _catalog(cfg)
    sets = read_detections(_require(cfg, "detections"))
    by_patch = {}
    for s in sets:
        if s.patch_id not in catalog.patches:
            raise IntegrityError(f"detections reference unknown patch {s.patch_id!r}", s.patch_id)
        view = by_id(s.transform_id, catalog.patches[s.patch_id].size_wh)
        by_patch.setdefault(s.patch_id, []).append(back_transform(s, view))
    fusion = _fusion(cfg)
    fused = [fuse_detections(by_patch[pid], fusion) for pid in sorted(by_patch)]
    path = out.write(".fused.jsonl", lambda p: write_detections(fused, p))
    n_in, n_out = sum(len(s) for s in sets), sum(len(s) for s in fused)
    print(f"fused {n_in} detections from {len(sets)} sources into {n_out}")
    return {"fused_file": str(path), "n_input": n_in, "n_output": n_out}


def cmd_evaluate(cfg, out: Outputs):
    catalog = _catalog(cfg)
    sets = read_detections(_require(cfg, "detections"))
    folds = load_folds(_require(cfg, "folds")).fold_of_slide if cfg["paths"].get("folds") else None
    e = cfg["evaluator"]
    report = evaluate_detections(catalog, sets, float(e["radius"]), float(e["threshold"]), folds)
    csv_path = out.write(".csv", lambda p: write_report_csv(report, p))
    result = {"report": report.to_json(), "csv": str(csv_path)}
    if e.get("thresholds"):
        result["sweep"] = [
            {"threshold": t, **r.counts.as_dict()}
            for t, r in sweep_threshold(catalog, sets, float(e["radius"]), sorted(e["thresholds"]))
        ]
    print(f"precision {report.precision:.4f} recall {report.recall:.4f} F1 {report.f1:.4f} "
          f"(radius {report.radius_used:g} px, threshold {report.threshold_used:g})")
    return result


def cmd_bench(cfg, out: Outputs):
    catalog = _catalog(cfg)
    bench = run_bench(
        catalog,
        _mock_detectors(catalog, cfg),
        cfg["tta"]["views"],
        _fusion(cfg),
        float(cfg["evaluator"]["radius"]),
        float(cfg["evaluator"]["threshold"]),
        int(cfg["parallelism"]),
    )
    res = bench.to_json()
    print(f"{bench.n_patches} patches: pipeline overhead {bench.overhead_ms_per_patch:.3f} ms/patch, "
          f"batch detect {bench.batch.throughput:.0f} patches/s")
    return {"_volatile": res, "f1": res["f1"], "n_patches": res["n_patches"]}


def cmd_end2end(cfg, out: Outputs):
    catalog = _catalog(cfg)
    folds = _folds(catalog, cfg)
    e = cfg["evaluator"]
    result = run_end2end(
        catalog,
        folds,
        _mock_detectors(catalog, cfg),
        cfg["tta"]["views"],
        _fusion(cfg),
        float(e["radius"]),
        float(e["threshold"]),
    )
    for f, r in sorted(result.folds.items()):
        print(f"fold {f}: F1 {r.f1:.4f} (P {r.precision:.4f}, R {r.recall:.4f})")
    p = result.pooled
    print(f"pooled: F1 {p.f1:.4f} (P {p.precision:.4f}, R {p.recall:.4f})")
    return result.to_json()


def cmd_synth(cfg, out: Outputs):
    target = cfg["paths"].get("out_manifest")
    if not target:
        raise ConfigError("synth needs --out-manifest")
    if cfg["synth"].get("n_patches"):
        catalog = dense_catalog(int(cfg["synth"]["n_patches"]), seed=cfg["seed"])
    else:
        catalog = synthetic_catalog(cfg["seed"], scale=float(cfg["synth"]["scale"]))
    write_manifest(catalog, target)
    print(f"wrote {len(catalog.patches)} patches to {target}")
    return {"manifest": target, "counts": counts_summary(catalog.counts)}


COMMANDS = {
    "ingest": cmd_ingest,
    "recount": cmd_recount,
    "split": cmd_split,
    "sample": cmd_sample,
    "mine": cmd_mine,
    "ema": cmd_ema,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "end2end": cmd_end2end,
    "synth": cmd_synth,
}


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _str_list(text: str) -> list[str]:
    return [v for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mitokit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"mitokit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", dest="out_dir", default=None)
    common.add_argument("--manifest", dest="paths.manifest", default=None)
    common.add_argument("--n-patches", dest="synth.n_patches", type=int, default=None,
                        help="use a synthetic single-dataset corpus of this size instead of a manifest")
    sub = parser.add_subparsers(dest="command", required=True)

    eval_flags = argparse.ArgumentParser(add_help=False)
    eval_flags.add_argument("--radius", dest="evaluator.radius", type=float, default=None)
    eval_flags.add_argument("--threshold", dest="evaluator.threshold", type=float, default=None)

    mock_flags = argparse.ArgumentParser(add_help=False)
    mock_flags.add_argument("--mock-recall", dest="mock.recall", type=float, default=None)
    mock_flags.add_argument("--mock-precision", dest="mock.precision", type=float, default=None)
    mock_flags.add_argument("--mock-jitter", dest="mock.jitter_px", type=float, default=None)
    mock_flags.add_argument("--models", dest="mock.n_models", type=int, default=None)

    tta_flags = argparse.ArgumentParser(add_help=False)
    tta_flags.add_argument("--views", dest="tta.views", type=_str_list, default=None,
                           help="comma-separated transform ids, e.g. identity,hflip,rot90")
    tta_flags.add_argument("--fusion", dest="tta.fusion.method", default=None,
                           choices=["nms", "confidence_average_cluster"])
    tta_flags.add_argument("--cluster-radius", dest="tta.fusion.cluster_radius", type=float, default=None)
    tta_flags.add_argument("--min-votes", dest="tta.fusion.min_votes", type=int, default=None)

    split_flags = argparse.ArgumentParser(add_help=False)
    split_flags.add_argument("--k", dest="split.k", type=int, default=None)
    split_flags.add_argument("--strata-key", dest="split.strata_key", default=None,
                             help="domain-tag prefix combined with the dataset id, e.g. 'tumor:'")

    sub.add_parser("ingest", parents=[common], help="validate a manifest and write its canonical form")
    sub.add_parser("recount", parents=[common], help="recount datasets, slides and classes")
    sub.add_parser("split", parents=[common, split_flags], help="grouped stratified k-fold split")

    p = sub.add_parser("sample", parents=[common], help="draw weighted training batches")
    p.add_argument("--batch-size", dest="sampler.batch_size", type=int, default=None)
    p.add_argument("--n-batches", dest="sampler.n_batches", type=int, default=None)
    p.add_argument("--without-replacement", dest="sampler.with_replacement", action="store_const",
                   const=False, default=None)
    p.add_argument("--factors", dest="sampler.factors", type=_str_list, default=None)
    p.add_argument("--image-norm", dest="sampler.image_norm", choices=["global", "per_dataset"], default=None)
    p.add_argument("--dump-plan", dest="sampler.dump_plan", action="store_const", const=True, default=None)

    p = sub.add_parser("mine", parents=[common, mock_flags, eval_flags], help="mine hard negatives")
    p.add_argument("--detections", dest="paths.detections", default=None,
                   help="external detections to mine instead of the mock detector")
    p.add_argument("--confidence-floor", dest="mining.confidence_floor", type=float, default=None)
    p.add_argument("--region-tags", dest="mining.region_tags", type=_str_list, default=None)

    p = sub.add_parser("ema", parents=[common], help="select the EMA checkpoint ensemble")
    p.add_argument("--checkpoints", dest="paths.checkpoints", nargs="+", default=None)
    p.add_argument("--decay-rates", dest="ema.decay_rates", type=_float_list, default=None)

    p = sub.add_parser("fuse", parents=[common, tta_flags], help="fuse multi-model, multi-view detections")
    p.add_argument("--detections", dest="paths.detections", default=None)

    p = sub.add_parser("evaluate", parents=[common, eval_flags], help="score detections against the truth")
    p.add_argument("--detections", dest="paths.detections", default=None)
    p.add_argument("--folds", dest="paths.folds", default=None)
    p.add_argument("--thresholds", dest="evaluator.thresholds", type=_float_list, default=None)

    p = sub.add_parser("bench", parents=[common, mock_flags, eval_flags, tta_flags],
                       help="time the pipeline stages over mock detections")
    p.add_argument("--parallelism", type=int, default=None)

    p = sub.add_parser("end2end", parents=[common, mock_flags, eval_flags, tta_flags, split_flags],
                       help="mock detect, fuse and evaluate over cross-validation folds")
    p.add_argument("--folds", dest="paths.folds", default=None)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic manifest")
    p.add_argument("--out-manifest", dest="paths.out_manifest", default=None)
    p.add_argument("--scale", dest="synth.scale", type=float, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve_config(ns.command, ns)
        out = Outputs(cfg)
        result = COMMANDS[ns.command](cfg, out)
        partial = result.pop("_partial", None)
        volatile = result.pop("_volatile", None)
        path = out.report(result, volatile)
        print(f"report: {path}")
        if partial:
            raise PartialFailure(f"{len(partial)} item(s) failed", partial)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PartialFailure as exc:
        print(f"partial failure: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except MitokitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
