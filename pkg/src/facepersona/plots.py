"""PNG plot emission: per-tap similarity histograms and the best-of-N curve.

Every plot gets a JSON sidecar with the exact numbers drawn, and the
PNG bytes are deterministic for fixed inputs.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .encoder import SimilarityDistribution, roc_auc  # noqa: E402

logger = logging.getLogger(__name__)


def emit_similarity_histogram(
    dist: SimilarityDistribution, path: str | Path, bins: int = 30,
    provenance: Mapping | None = None,
) -> Path:
    """Overlaid same/different cosine histograms for one tap depth."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=110)
    ax.hist(dist.same_scores, bins=bins, range=(-1, 1), alpha=0.6,
            color="tab:blue", label="same identity")
    ax.hist(dist.diff_scores, bins=bins, range=(-1, 1), alpha=0.6,
            color="tab:orange", label="different identity")
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("count")
    ax.set_title(f"layer {dist.layer}  (AUC {roc_auc(dist):.4f})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    payload = {
        "layer": dist.layer,
        "same_scores": list(dist.same_scores),
        "diff_scores": list(dist.diff_scores),
        "auc": roc_auc(dist),
        **(provenance or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(payload, indent=2))
    return path


def emit_upper_bound_plot(
    points: Sequence[tuple[int, float]], path: str | Path,
    provenance: Mapping | None = None,
) -> Path:
    """Best-hmean-of-N curve with a data sidecar listing every marker."""
    path = Path(path)
    ns = [n for n, _v in points]
    vs = [v for _n, v in points]
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=110)
    ax.plot(ns, vs, marker="o", color="tab:blue")
    ax.set_xscale("log", base=2)
    ax.set_xticks(ns, [str(n) for n in ns])
    ax.set_xlabel("generations per set (N)")
    ax.set_ylabel("mean best hMean")
    ax.set_title("best-of-N quality")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    payload = {"points": [[n, v] for n, v in points], **(provenance or {})}
    path.with_suffix(".json").write_text(json.dumps(payload, indent=2))
    return path


def emit_plots(
    out_dir: str | Path,
    distributions: Mapping[int, SimilarityDistribution] | None = None,
    upper_bound: Sequence[tuple[int, float]] | None = None,
    provenance: Mapping | None = None,
) -> list[Path]:
    """Emit whatever series are present; skip empty ones with a warning."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emitted = []
    for layer in sorted(distributions or {}):
        dist = distributions[layer]
        if not dist.same_scores or not dist.diff_scores:
            logger.warning("skipping histogram for layer %d: empty series", layer)
            continue
        emitted.append(emit_similarity_histogram(
            dist, out_dir / f"similarity_layer{layer:02d}.png", provenance=provenance
        ))
    if upper_bound is not None:
        if len(upper_bound) == 0:
            logger.warning("skipping upper-bound plot: no points")
        else:
            emitted.append(emit_upper_bound_plot(
                upper_bound, out_dir / "upper_bound.png", provenance=provenance
            ))
    return emitted
