"""Identity/text fidelity metrics and report aggregation.

Six scores per generated image: three identity-similarity slots
(recognition models behind the FaceEmbedder interface) and three
image-text similarities (plain cosine, directional cosine against a
reference pair, and a sigmoid-calibrated cosine). Each image's harmonic
and geometric mean over the six summarize joint quality; dataset-level
numbers are always means of per-image values, never re-aggregations of
column means. A Fréchet distance between feature sets covers the
distributional comparison against a reference corpus.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import EmptyInputError, InputQualityError, InputShapeError
from .interfaces import FaceEmbedder, ImageTextEncoder, SigmoidCalibration

METRIC_COLUMNS = ("adaface", "sphereface", "facenet", "clip", "dclip", "siglip")


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def identity_similarity(
    input_image: torch.Tensor,
    generated_image: torch.Tensor,
    face_extractor: FaceEmbedder,
) -> float:
    """Clipped cosine similarity between recognition features.

    Returns 0.0 when no face is detected in the *generated* image. A
    detection failure on the input image is an error in the evaluation
    data, not a model failure, and raises InputQualityError.
    """
    f_input = face_extractor.embed(input_image)
    if f_input is None:
        raise InputQualityError("no face detected in the input (reference) image")
    f_generated = face_extractor.embed(generated_image)
    if f_generated is None:
        return 0.0
    return max(_cos(np.asarray(f_input), np.asarray(f_generated)), 0.0)


def clip_score(image: torch.Tensor, prompt: str, encoder: ImageTextEncoder) -> float:
    """Clipped cosine between image and prompt embeddings."""
    return max(_cos(encoder.encode_image(image), encoder.encode_text(prompt)), 0.0)


def dclip_score(
    image: torch.Tensor,
    prompt: str,
    ref_image: torch.Tensor,
    ref_prompt: str,
    encoder: ImageTextEncoder,
) -> float:
    """Clipped cosine between image-space and text-space difference vectors.

    Differences are taken against a reference (image, prompt) pair. If
    either difference vector has zero norm the score is 0.0.
    """
    d_image = encoder.encode_image(image) - encoder.encode_image(ref_image)
    d_text = encoder.encode_text(prompt) - encoder.encode_text(ref_prompt)
    if np.linalg.norm(d_image) == 0.0 or np.linalg.norm(d_text) == 0.0:
        return 0.0
    return max(_cos(d_image, d_text), 0.0)


def siglip_score(
    image: torch.Tensor,
    prompt: str,
    encoder: ImageTextEncoder,
    calibration: SigmoidCalibration,
) -> float:
    """Sigmoid of the scaled-and-shifted image-text cosine."""
    c = _cos(encoder.encode_image(image), encoder.encode_text(prompt))
    return 1.0 / (1.0 + math.exp(-(calibration.scale * c + calibration.bias)))


def id_text_aggregate(scores: Sequence[float]) -> tuple[float, float]:
    """Harmonic and geometric mean of per-image metric scores.

    Any zero score sends both means to zero (the limit convention).
    """
    if not scores:
        raise EmptyInputError("no scores to aggregate")
    for s in scores:
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"score outside [0, 1]: {s}")
    n = len(scores)
    if any(s == 0.0 for s in scores):
        return 0.0, 0.0
    hmean = n / sum(1.0 / s for s in scores)
    gmean = math.exp(sum(math.log(s) for s in scores) / n)
    return hmean, gmean


@dataclass(frozen=True)
class SampleReport:
    """Six metric scores plus their per-image aggregates for one image."""

    image_id: str
    prompt_id: str
    sample_idx: int
    adaface: float
    sphereface: float
    facenet: float
    clip: float
    dclip: float
    siglip: float
    hmean: float
    gmean: float

    def __post_init__(self):
        vals = self.scores()
        amean = sum(vals) / len(vals)
        # AM-GM-HM ordering must hold up to float noise.
        assert self.hmean <= self.gmean + 1e-9 and self.gmean <= amean + 1e-9, (
            f"mean ordering violated: h={self.hmean} g={self.gmean} a={amean}"
        )

    def scores(self) -> tuple[float, ...]:
        return (self.adaface, self.sphereface, self.facenet, self.clip, self.dclip, self.siglip)

    @classmethod
    def from_scores(
        cls, image_id: str, prompt_id: str, sample_idx: int, scores: Sequence[float]
    ) -> "SampleReport":
        if len(scores) != len(METRIC_COLUMNS):
            raise InputShapeError(f"expected {len(METRIC_COLUMNS)} scores, got {len(scores)}")
        scores = [float(s) for s in scores]
        hmean, gmean = id_text_aggregate(scores)
        return cls(image_id, prompt_id, sample_idx, *scores, hmean=hmean, gmean=gmean)


@dataclass
class UpperBoundCurve:
    """Mean best-aggregate score as a function of the per-set budget N."""

    points: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        values = [v for _n, v in self.points]
        assert all(b >= a - 1e-12 for a, b in zip(values, values[1:])), (
            "upper-bound curve must be non-decreasing"
        )


def upper_bound_curve(
    reports: Mapping[tuple[str, str], Sequence[SampleReport]],
    Ns: Sequence[int] = (1, 2, 4, 8, 16),
) -> UpperBoundCurve:
    """Best-of-N analysis over per-set report lists.

    For each (image, prompt) set, point N scores only the best hmean
    among the first N reports (generation order); the curve averages
    that over sets. Every set must contain at least max(Ns) reports.
    """
    if not reports:
        raise EmptyInputError("no report sets")
    Ns = sorted(Ns)
    need = Ns[-1]
    for key, seq in reports.items():
        if len(seq) < need:
            raise InputShapeError(
                f"set {key} has {len(seq)} reports; upper bound at N={need} needs {need}"
            )
    points = []
    for n in Ns:
        best = [max(r.hmean for r in seq[:n]) for seq in reports.values()]
        points.append((n, sum(best) / len(best)))
    return UpperBoundCurve(points=points)


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the
    cross term evaluated through the symmetric product
    sqrt(S_a) S_b sqrt(S_a); small negative eigenvalues from numerical
    error are clipped at zero.
    """
    a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InputShapeError("each feature set needs at least 2 vectors")
    if a.shape[1] != b.shape[1]:
        raise InputShapeError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1])
    cov_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1])

    eigvals_a, eigvecs_a = np.linalg.eigh(cov_a)
    root_a = eigvecs_a @ np.diag(np.sqrt(np.clip(eigvals_a, 0.0, None))) @ eigvecs_a.T
    cross = root_a @ cov_b @ root_a
    cross_eigs = np.linalg.eigvalsh((cross + cross.T) / 2.0)
    tr_cross = float(np.sqrt(np.clip(cross_eigs, 0.0, None)).sum())

    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)


@dataclass
class DatasetSummary:
    """Dataset-level metric summary: per-column means of per-image scores.

    `hmean_mean`/`gmean_mean` are means of the per-image aggregates (not
    aggregates of the column means, which would be a different and wrong
    quantity).
    """

    metric_means: dict[str, float]
    hmean_mean: float
    gmean_mean: float
    num_reports: int
    upper_bound: list[tuple[int, float]] = field(default_factory=list)
    frechet: float | None = None


def summarize_reports(
    reports: Sequence[SampleReport],
    Ns: Sequence[int] | None = None,
) -> DatasetSummary:
    """Aggregate per-image reports into the dataset summary."""
    if not reports:
        raise EmptyInputError("no reports to summarize")
    means = {
        col: sum(getattr(r, col) for r in reports) / len(reports) for col in METRIC_COLUMNS
    }
    summary = DatasetSummary(
        metric_means=means,
        hmean_mean=sum(r.hmean for r in reports) / len(reports),
        gmean_mean=sum(r.gmean for r in reports) / len(reports),
        num_reports=len(reports),
    )
    if Ns:
        grouped: dict[tuple[str, str], list[SampleReport]] = {}
        for r in reports:
            grouped.setdefault((r.image_id, r.prompt_id), []).append(r)
        for seq in grouped.values():
            seq.sort(key=lambda r: r.sample_idx)
        summary.upper_bound = upper_bound_curve(grouped, Ns).points
    return summary


_CSV_HEADER = ("image_id", "prompt_id", "sample_idx") + METRIC_COLUMNS + ("hmean", "gmean")


def write_reports_csv(reports: Sequence[SampleReport], path: str | Path) -> None:
    """Write per-image reports; floats use repr so round-trips are lossless."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for r in reports:
            row = [r.image_id, r.prompt_id, r.sample_idx]
            row += [repr(v) for v in r.scores() + (r.hmean, r.gmean)]
            writer.writerow(row)


def read_reports_csv(path: str | Path) -> list[SampleReport]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != _CSV_HEADER:
            raise InputShapeError(f"unexpected CSV header: {header}")
        out = []
        for row in reader:
            image_id, prompt_id, sample_idx = row[0], row[1], int(row[2])
            values = [float(v) for v in row[3:]]
            out.append(SampleReport(image_id, prompt_id, sample_idx, *values))
        return out


def write_summary_json(summary: DatasetSummary, path: str | Path, **extra) -> None:
    payload = {
        "metric_means": summary.metric_means,
        "hmean_mean": summary.hmean_mean,
        "gmean_mean": summary.gmean_mean,
        "num_reports": summary.num_reports,
        "upper_bound": [[n, v] for n, v in summary.upper_bound],
    }
    if summary.frechet is not None:
        payload["frechet"] = summary.frechet
    payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def read_summary_json(path: str | Path) -> DatasetSummary:
    payload = json.loads(Path(path).read_text())
    return DatasetSummary(
        metric_means=payload["metric_means"],
        hmean_mean=payload["hmean_mean"],
        gmean_mean=payload["gmean_mean"],
        num_reports=payload["num_reports"],
        upper_bound=[(int(n), float(v)) for n, v in payload.get("upper_bound", [])],
        frechet=payload.get("frechet"),
    )
