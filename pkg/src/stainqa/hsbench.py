"""Benchmark for artifact detection on conventionally stained tiles.

Positives are clean stained tiles degraded by the corruption operators at a
grid of severities; negatives are the clean tiles themselves. A classifier
trained on this domain is compared against the hand-crafted nuclei
baselines, and rejection rates are tracked per corruption mode and
severity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import auc, confusion, count_nuclei
from .synth import CORRUPTION_MODES, corrupt_hs


class HsBenchmarkError(ValueError):
    pass


def corrupted_id(tile_id: str, mode: str, severity: float) -> str:
    return f"{tile_id}|{mode}|{severity:g}"


@dataclass
class HsBenchmark:
    """Clean/corrupted tile roster for the stained-slide experiment."""

    clean: dict  # role -> list of tile ids
    corrupted: dict  # role -> list of {tile_id, mode, severity}
    modes: list
    severities: list
    eval_severity: float | None = None

    def validate(self) -> "HsBenchmark":
        clean_ids = {t for ids in self.clean.values() for t in ids}
        for role, entries in self.corrupted.items():
            for e in entries:
                if e["tile_id"] not in clean_ids:
                    raise HsBenchmarkError(
                        f"corrupted entry {e} in role {role!r} has no clean source"
                    )
        return self


def build_hs_benchmark(
    tiles_by_role: dict,
    modes=CORRUPTION_MODES,
    severities=(0.3, 0.6, 0.9),
    eval_severity: float | None = None,
) -> HsBenchmark:
    """Cross every role's clean tiles with modes x severities.

    ``eval_severity`` adds extra test-role positives at a severity unseen
    during training, to probe interpolation.
    """
    if not severities:
        raise HsBenchmarkError("severity list must be nonempty")
    for mode in modes:
        if mode not in CORRUPTION_MODES:
            raise HsBenchmarkError(f"unknown corruption mode {mode!r}")
    if not any(tiles_by_role.values()):
        raise HsBenchmarkError("no clean tiles given")
    corrupted = {}
    for role, ids in tiles_by_role.items():
        entries = [
            {"tile_id": tile_id, "mode": mode, "severity": float(sev)}
            for tile_id in ids
            for mode in modes
            for sev in severities
        ]
        if eval_severity is not None and role == "test":
            entries += [
                {"tile_id": tile_id, "mode": mode, "severity": float(eval_severity)}
                for tile_id in ids
                for mode in modes
            ]
        corrupted[role] = entries
    return HsBenchmark(
        clean={role: list(ids) for role, ids in tiles_by_role.items()},
        corrupted=corrupted,
        modes=list(modes),
        severities=[float(s) for s in severities],
        eval_severity=eval_severity,
    ).validate()


def materialize(bench: HsBenchmark, role: str, load_he):
    """Load clean + corrupted pixels for one role.

    ``load_he(tile_id)`` must return the clean stained patch. Returns
    (stack, ids, labels, entries) with labels 1 for corrupted tiles; the
    entries list aligns with the stack and is None for clean tiles.
    """
    stacks, ids, labels, entries = [], [], [], []
    for tile_id in bench.clean.get(role, []):
        patch = load_he(tile_id)
        stacks.append(patch.pixels)
        ids.append(tile_id)
        labels.append(0)
        entries.append(None)
    for entry in bench.corrupted.get(role, []):
        patch = load_he(entry["tile_id"])
        bad = corrupt_hs(patch, entry["mode"], entry["severity"])
        stacks.append(bad.pixels)
        ids.append(corrupted_id(entry["tile_id"], entry["mode"], entry["severity"]))
        labels.append(1)
        entries.append(entry)
    if not stacks:
        raise HsBenchmarkError(f"role {role!r} is empty")
    return np.stack(stacks), ids, np.asarray(labels), entries


def run_hs_assessment(bench: HsBenchmark, load_he, scorer, alpha: float) -> dict:
    """Score the test role and compare against the nuclei baselines.

    Returns the separation report at ``alpha``, AUCs of the confidence
    score and of both nuclei baselines (each baseline gets its better
    orientation), per-(mode, severity) rejection rates, and the per-tile
    rows for reporting.
    """
    stack, ids, labels, entries = materialize(bench, "test", load_he)
    _, mean_scores, _, _ = scorer.score_arrays(stack)
    counts = np.empty(stack.shape[0])
    areas = np.empty(stack.shape[0])
    for i in range(stack.shape[0]):
        counts[i], areas[i] = count_nuclei(stack[i])

    pos, neg = labels == 1, labels == 0
    score_auc = auc(mean_scores[pos], mean_scores[neg])
    baseline_aucs = {}
    for name, values in (("nuclei_count", counts), ("nuclei_area", areas)):
        raw = auc(values[pos], values[neg])
        baseline_aucs[name] = max(raw, 1.0 - raw)

    rejection = {}
    for entry, score in zip(entries, mean_scores):
        if entry is None:
            continue
        key = (entry["mode"], entry["severity"])
        rejection.setdefault(key, []).append(score >= alpha)
    rejection_rows = [
        {"mode": mode, "severity": sev, "rejection_rate": float(np.mean(flags)),
         "n": len(flags)}
        for (mode, sev), flags in sorted(rejection.items())
    ]

    rows = [
        {
            "tile_id": ids[i],
            "label_true": "positive" if labels[i] else "negative",
            "mode": entries[i]["mode"] if entries[i] else "",
            "severity": entries[i]["severity"] if entries[i] else 0.0,
            "confidence_score": float(mean_scores[i]),
            "nuclei_count": float(counts[i]),
            "nuclei_area": float(areas[i]),
        }
        for i in range(stack.shape[0])
    ]
    return {
        "report": confusion(mean_scores, labels, alpha, metric_name="confidence_score"),
        "auc_score": float(score_auc),
        "auc_baselines": baseline_aucs,
        "rejection_rows": rejection_rows,
        "rows": rows,
    }
