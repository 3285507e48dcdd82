"""Run artifact emission: manifest, score CSVs, mask index lists and the
structured metrics/diagnostics document. Identical config and seed must
reproduce every file byte for byte, so nothing time- or path-dependent is
written."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__
from .models import save_params
from .scoring import export_scores

MANIFEST = "manifest.json"
SCORES_THETA = "scores_theta.csv"
SCORES_DATA = "scores_data.csv"
MASKS = "masks.json"
REPORT = "report.json"
FINAL_CHECKPOINT = "theta_star.bin"

REPORT_FILES = (MANIFEST, SCORES_THETA, SCORES_DATA, MASKS, REPORT)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _write_json(path: Path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_manifest(out_dir: Path, config, split, checkpoints: dict):
    _write_json(out_dir / MANIFEST, {
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": {"dualsft": __version__, "numpy": np.__version__},
        "split": {
            "train": len(split.train),
            "val": len(split.val),
            "anchor": len(split.anchor),
            "warm": int(split.warm_indices.size),
            "pool": int(split.pool_indices.size),
            "meta": split.meta,
        },
        "checkpoints": checkpoints,
    })


def write_scores(out_dir: Path, param_scores, data_scores):
    export_scores(out_dir / SCORES_THETA, param_scores)
    export_scores(out_dir / SCORES_DATA, data_scores)


def write_masks(out_dir: Path, context):
    _write_json(out_dir / MASKS, {
        "param_mask": context.param_mask_sel.members,
        "data_selected_pool_positions": context.data_sel.members,
        "data_selected_train_indices": context.selected_train_indices,
        "budgets": {"param_count": context.param_budget_count,
                    "data_count": context.data_budget_count},
    })


def emit_report(artifacts, out_dir) -> list[str]:
    """Write the full artifact set for a finished run; returns file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    context = artifacts.context
    write_manifest(out, artifacts.config, context.split, {
        "theta_old": context.theta_old.fingerprint(),
        "theta_bar": context.theta_bar.fingerprint(),
        "theta_star": artifacts.theta_star.fingerprint(),
    })
    write_scores(out, context.param_scores, context.data_scores)
    write_masks(out, context)
    _write_json(out / REPORT, {"metrics": artifacts.metrics,
                               "diagnostics": artifacts.diagnostics})
    save_params(artifacts.theta_star, out / FINAL_CHECKPOINT)
    return list(REPORT_FILES) + [FINAL_CHECKPOINT]


def load_report(out_dir) -> dict:
    out = Path(out_dir)
    loaded = {}
    for name in (MANIFEST, MASKS, REPORT):
        with open(out / name) as fh:
            loaded[name] = json.load(fh)
    return loaded
