"""
Alignment and disentanglement diagnostics.

For a handful of instances this writes patch-by-patch cosine similarity matrices
(numeric-visual, numeric-caption) as CSV, histograms of cross-modal similarities for the
continuous, common and unique token spaces, and a JSON summary of the headline scalars.
"""

import json
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from assembly import MadiModel, ModuleToggles
from datagen import QASample
from ddi import codebook_usage, rvq_forward
from diffcore import no_grad

logger = logging.getLogger(__name__)

HISTOGRAM_BINS = 64
HISTOGRAM_RANGE = (-1.0, 1.0)


def similarity_matrix(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), floor)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), floor)
    return np.clip(a @ b.T, -1.0, 1.0)


def diagonal_stats(matrix: np.ndarray) -> Dict[str, float]:
    diagonal = np.diag(matrix)
    mask = ~np.eye(matrix.shape[0], dtype=bool)
    off = matrix[mask]
    return {
        "diagonal_mean": float(diagonal.mean()),
        "off_diagonal_mean": float(off.mean()) if off.size else 0.0,
    }


def histogram(values: np.ndarray) -> Dict[str, List]:
    counts, edges = np.histogram(np.asarray(values).ravel(), bins=HISTOGRAM_BINS, range=HISTOGRAM_RANGE)
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def write_similarity_csv(matrix: np.ndarray, path: str) -> None:
    frame = pd.DataFrame(matrix, columns=[str(j) for j in range(matrix.shape[1])])
    frame.to_csv(path, index=False, float_format="%.6f")


def diagnose(model: MadiModel, samples: Sequence[QASample], output_dir: str,
             max_instances: int = 8) -> Dict[str, float]:
    """
    Compute diagnostics on up to ``max_instances`` series and write them under ``output_dir``.

    Works on an untrained model too; the codebooks are then used as initialized.
    """
    os.makedirs(output_dir, exist_ok=True)
    toggles = ModuleToggles.from_tag("full")
    pools = {"continuous": [], "common": [], "unique": []}
    matched = {"continuous": [], "common": []}
    summaries: List[Dict[str, float]] = []
    zu_numeric, zu_visual = [], []
    assignments = []

    instance = 0
    with no_grad():
        for sample in samples:
            prepared = model.prepare_sample(sample)
            for series in prepared.series:
                if instance >= max_instances:
                    break
                trace = model.encode_instance(series, toggles)
                e_n = trace.numeric.data
                e_v = trace.visual.data
                e_s = model.text.encode_caption_ids(series.caption_ids).data.data

                nv = similarity_matrix(e_n, e_v)
                ns = similarity_matrix(e_n, e_s)
                write_similarity_csv(nv, os.path.join(output_dir, f"numeric_visual_{instance}.csv"))
                write_similarity_csv(ns, os.path.join(output_dir, f"numeric_caption_{instance}.csv"))
                summaries.append({f"nv_{k}": v for k, v in diagonal_stats(nv).items()}
                                 | {f"ns_{k}": v for k, v in diagonal_stats(ns).items()})

                tokens_n = rvq_forward(trace.numeric, model.hierarchy)
                tokens_v = rvq_forward(trace.visual, model.hierarchy)
                assignments.extend([tokens_n, tokens_v])
                z_n, z_v = tokens_n.common.data, tokens_v.common.data
                u_n, u_v = tokens_n.unique.data, tokens_v.unique.data

                pools["continuous"].append(nv.ravel())
                pools["common"].append(similarity_matrix(z_n, z_v).ravel())
                pools["unique"].append(similarity_matrix(u_n, u_v).ravel())
                matched["continuous"].append(np.diag(nv))
                matched["common"].append(np.diag(similarity_matrix(z_n, z_v)))
                zu_numeric.append(np.abs(np.diag(similarity_matrix(z_n, u_n))))
                zu_visual.append(np.abs(np.diag(similarity_matrix(z_v, u_v))))
                instance += 1
            if instance >= max_instances:
                break

    if not summaries:
        logger.warning("No series available for diagnostics")
        return {}

    histograms = {kind: histogram(np.concatenate(values)) for kind, values in pools.items()}
    with open(os.path.join(output_dir, "histograms.json"), "w", encoding="utf-8") as f:
        json.dump(histograms, f, sort_keys=True)

    summary = pd.DataFrame(summaries).mean().to_dict()
    summary.update({
        "instances": instance,
        "mean_sim_continuous": float(np.mean(np.concatenate(matched["continuous"]))),
        "mean_sim_common": float(np.mean(np.concatenate(matched["common"]))),
        "mean_abs_sim_zu_numeric": float(np.mean(np.concatenate(zu_numeric))),
        "mean_abs_sim_zu_visual": float(np.mean(np.concatenate(zu_visual))),
    })
    for level, usage in enumerate(codebook_usage(model.hierarchy, assignments)):
        summary[f"codebook_usage_level_{level}"] = usage
    summary = {k: float(v) for k, v in summary.items()}
    with open(os.path.join(output_dir, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
    logger.info(f"Diagnostics for {instance} instances written to {output_dir}")
    return summary
