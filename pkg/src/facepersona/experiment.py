"""End-to-end experiment runner.

Loads a dataset manifest and prompt set, trains (or resumes) the mapper
against a frozen stack, generates a grid of images per (face, prompt)
pair, scores them with the six-metric protocol, and writes CSV/JSON
reports plus plots. All randomness flows from the single experiment
seed through named substreams, so identical configs reproduce identical
bytes; every artifact records the seed and the mapper checkpoint hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import checkpoints
from .diffusion import FrozenStack, TrainState, TrainStepConfig, train_mapper
from .encoder import (
    EncoderConfig,
    MultiScaleIdentityEncoder,
    PretrainConfig,
    pretrain_identity_encoder,
    roc_auc,
    similarity_distribution,
)
from .errors import ConfigError, ManifestError, StageError
from .evaluation import (
    METRIC_COLUMNS,
    SampleReport,
    clip_score,
    dclip_score,
    frechet_distance,
    identity_similarity,
    siglip_score,
    summarize_reports,
    write_reports_csv,
    write_summary_json,
)
from .mapper import FaceMapper, MapperConfig, PromptTemplate
from .plots import emit_plots
from .sampler import InferenceConfig, generate
from .synthetic import load_image_png, save_image_png
from .toys import EvalComponents, ToyStackConfig, build_toy_eval, build_toy_stack

logger = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "FACEPERSONA_OUTPUT_DIR"
DEFAULT_PROMPTS = Path(__file__).parent / "data" / "prompts.txt"


def substream_seed(seed: int, label: str) -> int:
    """Stable per-stage seed derived from the experiment seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


@dataclass
class ManifestSample:
    """One dataset record: an aligned face, its identity, its mask."""

    image: torch.Tensor
    identity: str
    mask: torch.Tensor
    image_path: str
    mask_path: str


def _load_binary_mask(path: str, line: int) -> torch.Tensor:
    try:
        raw = np.asarray(Image.open(path).convert("L"))
    except FileNotFoundError:
        raise ManifestError(f"mask file not found: {path}", line=line) from None
    values = set(np.unique(raw).tolist())
    if not values <= {0, 255}:
        raise ManifestError(
            f"mask {path} is not binary (values {sorted(values)[:6]}...)", line=line
        )
    return torch.from_numpy((raw == 255).astype(np.float32))


def load_manifest(path: str | Path) -> list[ManifestSample]:
    """Parse a newline-delimited JSON manifest, preserving file order.

    Each record needs "image", "identity", and "mask" keys; masks must
    be strictly binary PNGs. Malformed records raise ManifestError with
    their line number.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    samples = []
    with open(path) as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            raw_line = raw_line.strip()
            if not raw_line:
                continue
            try:
                record = json.loads(raw_line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc}", line=lineno) from None
            for key in ("image", "identity", "mask"):
                if key not in record:
                    raise ManifestError(f"missing '{key}' field", line=lineno)
            try:
                image = load_image_png(record["image"])
            except FileNotFoundError:
                raise ManifestError(
                    f"image file not found: {record['image']}", line=lineno
                ) from None
            mask = _load_binary_mask(record["mask"], lineno)
            samples.append(
                ManifestSample(
                    image=image,
                    identity=str(record["identity"]),
                    mask=mask,
                    image_path=record["image"],
                    mask_path=record["mask"],
                )
            )
    return samples


@dataclass
class PromptSet:
    """Ordered prompt templates, each with exactly one placeholder."""

    templates: list[PromptTemplate]

    def __len__(self) -> int:
        return len(self.templates)


def load_prompt_set(path: str | Path | None = None) -> PromptSet:
    """Read one template per non-empty line; defaults to the shipped set."""
    path = Path(path) if path is not None else DEFAULT_PROMPTS
    if not path.exists():
        raise ConfigError(f"prompt file not found: {path}")
    templates = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            templates.append(PromptTemplate(line))
    if not templates:
        raise ConfigError(f"prompt file {path} contains no prompts")
    return PromptSet(templates=templates)


def _dataclass_from(cls, payload: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    coerced = dict(payload)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    return cls(**coerced)


@dataclass
class ExperimentConfig:
    """Everything a full run needs; JSON-serializable."""

    run_name: str = "run"
    seed: int = 0
    output_dir: str = "outputs"
    manifest: str = ""
    prompts: Optional[str] = None
    encoder_checkpoint: Optional[str] = None
    backend: str = "toy"
    samples_per_pair: int = 4
    upper_bound_ns: tuple[int, ...] = (1, 2, 4)
    train_steps: int = 50
    mapper_hidden: Optional[int] = None
    mapper_dropout: float = 0.1
    fid_reference: Optional[str] = None
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        num_layers=4, depth_set=(1, 2, 3, 4), embed_dim=32, image_size=32, patch_size=8
    ))
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(steps=300))
    stack: ToyStackConfig = field(default_factory=ToyStackConfig)
    train: TrainStepConfig = field(default_factory=lambda: TrainStepConfig(lr=1e-2, batch_size=8))
    num_steps: int = 10
    guidance_scale: float = 7.0

    def __post_init__(self):
        if self.backend != "toy":
            raise ConfigError(f"unknown backend '{self.backend}'")
        if max(self.upper_bound_ns) > self.samples_per_pair:
            raise ConfigError(
                f"upper_bound_ns {self.upper_bound_ns} exceeds "
                f"samples_per_pair {self.samples_per_pair}"
            )

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        payload = json.loads(Path(path).read_text())
        payload.update({k: v for k, v in overrides.items() if v is not None})
        nested = {
            "encoder": EncoderConfig,
            "pretrain": PretrainConfig,
            "stack": ToyStackConfig,
            "train": TrainStepConfig,
        }
        kwargs = {}
        for key, value in payload.items():
            if key in nested:
                kwargs[key] = _dataclass_from(nested[key], value, key)
            elif key == "upper_bound_ns":
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kwargs) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        return json.dumps(payload, indent=2, sort_keys=True)

    def resolved_output_dir(self) -> Path:
        base = os.environ.get(OUTPUT_DIR_ENV, self.output_dir)
        return Path(base) / self.run_name

    def inference_config(self, seed: int) -> InferenceConfig:
        return InferenceConfig(
            num_steps=self.num_steps, guidance_scale=self.guidance_scale, seed=seed
        )

    def train_signature(self) -> str:
        """Hash of everything that determines the trained mapper."""
        return checkpoints.config_signature({
            "seed": self.seed,
            "train_steps": self.train_steps,
            "train": dataclasses.asdict(self.train),
            "encoder": dataclasses.asdict(self.encoder),
            "stack": dataclasses.asdict(self.stack),
            "mapper_hidden": self.mapper_hidden,
            "mapper_dropout": self.mapper_dropout,
            "manifest": str(self.manifest),
            "encoder_checkpoint": self.encoder_checkpoint,
        })


class RunLog:
    """Append-only stage log; failures are recorded before propagating."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, stage: str, status: str, detail: str = "") -> None:
        with open(self.path, "a") as fh:
            fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {stage} {status} {detail}\n")


def _stage(log: RunLog, name: str):
    class _StageContext:
        def __enter__(self):
            log.record(name, "start")
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is None:
                log.record(name, "ok")
                return False
            log.record(name, "failed", repr(exc))
            raise StageError(name, exc) from exc

    return _StageContext()


def build_mapper(config: ExperimentConfig) -> FaceMapper:
    cond_dim = config.encoder.feature_dim + config.stack.expression_dim
    mcfg = MapperConfig(
        condition_dim=cond_dim,
        text_embed_dim=config.stack.text_embed_dim,
        hidden_dim=config.mapper_hidden,
        dropout=config.mapper_dropout,
    )
    with torch.random.fork_rng():
        torch.manual_seed(substream_seed(config.seed, "mapper-init"))
        return FaceMapper(mcfg, expression_dim=config.stack.expression_dim)


def load_encoder_checkpoint(path: str | Path) -> MultiScaleIdentityEncoder:
    header, state = checkpoints.load_checkpoint(path)
    cfg = _dataclass_from(EncoderConfig, header["config"], "encoder checkpoint header")
    encoder = MultiScaleIdentityEncoder(cfg)
    encoder.load_state_dict(state)
    encoder.requires_grad_(False)
    encoder.eval()
    return encoder


def save_encoder_checkpoint(
    path: str | Path, encoder: MultiScaleIdentityEncoder, train_steps: int, signature: str
) -> None:
    header = {
        "kind": "identity_encoder",
        "config": dataclasses.asdict(encoder.cfg),
        "train_steps": train_steps,
        "signature": signature,
    }
    save_path = Path(path)
    save_path.parent.mkdir(parents=True, exist_ok=True)
    checkpoints.save_checkpoint(save_path, header, encoder.state_dict())


def save_mapper_checkpoint(
    path: str | Path, mapper: FaceMapper, train_steps: int, signature: str
) -> None:
    header = {
        "kind": "mapper",
        "config": dataclasses.asdict(mapper.cfg),
        "expression_dim": mapper.expression_dim,
        "train_steps": train_steps,
        "signature": signature,
    }
    save_path = Path(path)
    save_path.parent.mkdir(parents=True, exist_ok=True)
    checkpoints.save_checkpoint(save_path, header, mapper.state_dict())


def load_mapper_checkpoint(path: str | Path) -> FaceMapper:
    header, state = checkpoints.load_checkpoint(path)
    mcfg = _dataclass_from(MapperConfig, header["config"], "mapper checkpoint header")
    mapper = FaceMapper(mcfg, expression_dim=header["expression_dim"])
    mapper.load_state_dict(state)
    return mapper


def build_stack(
    config: ExperimentConfig, encoder: MultiScaleIdentityEncoder | None = None
) -> FrozenStack:
    """Frozen stack for the configured backend, reusing `encoder` if given."""
    if encoder is None and config.encoder_checkpoint:
        encoder = load_encoder_checkpoint(config.encoder_checkpoint)
    return build_toy_stack(
        seed=substream_seed(config.seed, "stack"),
        cfg=config.stack,
        identity_encoder=encoder,
        encoder_cfg=config.encoder,
    )


def _sidecar_path(image_path: Path) -> Path:
    return image_path.with_suffix(".json")


def _generate_one(
    face: torch.Tensor,
    template: PromptTemplate,
    seed: int,
    config: ExperimentConfig,
    frozen: FrozenStack,
    mapper: FaceMapper,
    out_path: Path,
    mapper_hash: str,
    meta: dict,
) -> torch.Tensor:
    """Generate (or reuse) one image; writes PNG + provenance sidecar."""
    sidecar = _sidecar_path(out_path)
    icfg = config.inference_config(seed)
    expected = {
        "template": template.text,
        "seed": seed,
        "num_steps": icfg.num_steps,
        "guidance_scale": icfg.guidance_scale,
        "scheduler_kind": icfg.scheduler_kind,
        "checkpoint_hash": mapper_hash,
        "run_seed": config.seed,
        **meta,
    }
    if out_path.exists() and sidecar.exists():
        try:
            if json.loads(sidecar.read_text()) == expected:
                return load_image_png(out_path)
        except json.JSONDecodeError:
            pass
    image = generate(face, template, icfg, frozen, mapper)
    save_image_png(image, out_path)
    sidecar.write_text(json.dumps(expected, indent=2, sort_keys=True))
    # score the quantized PNG, not the raw floats, so resumed reruns
    # reproduce identical metric bytes
    return load_image_png(out_path)


def evaluate_reports(
    samples: Sequence[ManifestSample],
    prompts: PromptSet,
    generated: dict[tuple[int, int, int], torch.Tensor],
    references: dict[int, torch.Tensor],
    evaluators: EvalComponents,
    class_prompt: str,
    class_word: str = "a person",
) -> list[SampleReport]:
    """Score every generated image with the six-metric protocol.

    Prompts are scored with the placeholder replaced by the class word;
    the directional score uses the per-face reference image and the
    class prompt as its reference pair.
    """
    reports = []
    for (f_idx, p_idx, s_idx), image in sorted(generated.items()):
        face = samples[f_idx]
        prompt_text = prompts.templates[p_idx].with_class_word(class_word)
        scores = []
        for slot in METRIC_COLUMNS[:3]:
            scores.append(
                identity_similarity(face.image, image, evaluators.face_embedders[slot])
            )
        scores.append(clip_score(image, prompt_text, evaluators.image_text))
        scores.append(
            dclip_score(
                image, prompt_text, references[f_idx], class_prompt, evaluators.image_text
            )
        )
        scores.append(
            siglip_score(
                image, prompt_text, evaluators.siglip_image_text,
                evaluators.siglip_calibration,
            )
        )
        reports.append(
            SampleReport.from_scores(
                image_id=f"{face.identity}_f{f_idx:03d}",
                prompt_id=f"p{p_idx:02d}",
                sample_idx=s_idx,
                scores=scores,
            )
        )
    return reports


def collect_generated_images(
    run_dir: Path,
    num_faces: int,
    num_prompts: int,
    samples_per_pair: int,
) -> tuple[dict[tuple[int, int, int], torch.Tensor], dict[int, torch.Tensor]]:
    """Load a run's generated grid and reference images from disk.

    Expects the runner's layout: images/fFFF_pPP_sSS.png plus
    references/fFFF.png, each with a JSON provenance sidecar.
    """
    generated = {}
    for f_idx in range(num_faces):
        for p_idx in range(num_prompts):
            for s_idx in range(samples_per_pair):
                path = run_dir / "images" / f"f{f_idx:03d}_p{p_idx:02d}_s{s_idx:02d}.png"
                if not path.exists():
                    raise ConfigError(f"missing generated image: {path}")
                generated[(f_idx, p_idx, s_idx)] = load_image_png(path)
    references = {}
    for f_idx in range(num_faces):
        path = run_dir / "references" / f"f{f_idx:03d}.png"
        if not path.exists():
            raise ConfigError(f"missing reference image: {path}")
        references[f_idx] = load_image_png(path)
    return generated, references


def evaluate_run(config: ExperimentConfig, run_dir: str | Path) -> Path:
    """Score an existing run directory; rewrites reports.csv + summary.json.

    The generation stage must have completed; images and references are
    read back from their PNGs, so scores match the in-pipeline ones.
    """
    run_dir = Path(run_dir)
    samples = load_manifest(config.manifest)
    prompts = load_prompt_set(config.prompts)
    generated, references = collect_generated_images(
        run_dir, len(samples), len(prompts), config.samples_per_pair
    )
    evaluators = build_toy_eval(seed=substream_seed(config.seed, "eval"))
    reports = evaluate_reports(
        samples, prompts, generated, references, evaluators,
        class_prompt=config.train.class_prompt,
    )
    write_reports_csv(reports, run_dir / "reports.csv")
    summary = summarize_reports(reports, Ns=config.upper_bound_ns)
    checkpoint = run_dir / "checkpoints" / "mapper.ckpt"
    mapper_hash = checkpoints.file_digest(checkpoint) if checkpoint.exists() else None
    _write_csv_provenance(run_dir / "reports.meta.json", config.seed, mapper_hash)
    write_summary_json(
        summary, run_dir / "summary.json",
        seed=config.seed, checkpoint_hash=mapper_hash, run_name=config.run_name,
    )
    return run_dir / "reports.csv"


def _write_csv_provenance(path: Path, seed: int, checkpoint_hash: str | None) -> None:
    path.write_text(json.dumps(
        {"seed": seed, "checkpoint_hash": checkpoint_hash}, indent=2, sort_keys=True
    ))


def run_experiment(config: ExperimentConfig) -> Path:
    """Execute train -> generate -> evaluate -> plots; returns the run dir.

    Resumable: an existing mapper checkpoint with a matching training
    signature is loaded instead of retrained, and generated images with
    matching provenance sidecars are reused.
    """
    out_dir = config.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "run.log")

    with _stage(log, "setup"):
        samples = load_manifest(config.manifest)
        if not samples:
            raise ConfigError(f"manifest {config.manifest} has no samples")
        prompts = load_prompt_set(config.prompts)
        frozen = build_stack(config)
        (out_dir / "config.json").write_text(config.to_json())

    ckpt_path = out_dir / "checkpoints" / "mapper.ckpt"
    signature = config.train_signature()
    with _stage(log, "train"):
        mapper = None
        if ckpt_path.exists():
            try:
                header = checkpoints.read_header(ckpt_path)
                if header.get("signature") == signature:
                    mapper = load_mapper_checkpoint(ckpt_path)
                    log.record("train", "resumed", f"signature {signature[:12]}")
            except Exception:  # noqa: BLE001 - fall back to retraining
                mapper = None
        if mapper is None:
            mapper = build_mapper(config)
            state = TrainState.create(mapper, lr=config.train.lr)
            loss_csv = out_dir / "loss.csv"
            loss_csv.unlink(missing_ok=True)
            train_mapper(
                [(s.image, s.mask) for s in samples],
                state,
                config.train,
                frozen,
                steps=config.train_steps,
                seed=substream_seed(config.seed, "train"),
                loss_csv=str(loss_csv),
            )
            save_mapper_checkpoint(ckpt_path, mapper, config.train_steps, signature)
        mapper_hash = checkpoints.file_digest(ckpt_path)
        _write_csv_provenance(out_dir / "loss.meta.json", config.seed, mapper_hash)

    images_dir = out_dir / "images"
    refs_dir = out_dir / "references"
    images_dir.mkdir(exist_ok=True)
    refs_dir.mkdir(exist_ok=True)
    with _stage(log, "generate"):
        generated: dict[tuple[int, int, int], torch.Tensor] = {}
        references: dict[int, torch.Tensor] = {}
        ref_template = PromptTemplate(config.train.identity_prompt_template)
        for f_idx, sample in enumerate(samples):
            references[f_idx] = _generate_one(
                sample.image, ref_template,
                substream_seed(config.seed, f"ref/{f_idx}"),
                config, frozen, mapper,
                refs_dir / f"f{f_idx:03d}.png", mapper_hash,
                meta={"face_index": f_idx, "prompt_index": -1, "sample_index": -1},
            )
            for p_idx, template in enumerate(prompts.templates):
                for s_idx in range(config.samples_per_pair):
                    generated[(f_idx, p_idx, s_idx)] = _generate_one(
                        sample.image, template,
                        substream_seed(config.seed, f"gen/{f_idx}/{p_idx}/{s_idx}"),
                        config, frozen, mapper,
                        images_dir / f"f{f_idx:03d}_p{p_idx:02d}_s{s_idx:02d}.png",
                        mapper_hash,
                        meta={"face_index": f_idx, "prompt_index": p_idx,
                              "sample_index": s_idx},
                    )

    with _stage(log, "evaluate"):
        evaluators = build_toy_eval(seed=substream_seed(config.seed, "eval"))
        reports = evaluate_reports(
            samples, prompts, generated, references, evaluators,
            class_prompt=config.train.class_prompt,
        )
        write_reports_csv(reports, out_dir / "reports.csv")
        _write_csv_provenance(out_dir / "reports.meta.json", config.seed, mapper_hash)
        summary = summarize_reports(reports, Ns=config.upper_bound_ns)
        if config.fid_reference:
            ref_features = np.load(config.fid_reference)["features"]
            gen_features = np.stack(
                [evaluators.image_text.encode_image(img)
                 for _k, img in sorted(generated.items())]
            )
            summary.frechet = frechet_distance(gen_features, ref_features)
        write_summary_json(
            summary, out_dir / "summary.json",
            seed=config.seed, checkpoint_hash=mapper_hash, run_name=config.run_name,
        )

    with _stage(log, "plots"):
        distributions = {}
        by_identity: dict[str, list[int]] = {}
        for idx, s in enumerate(samples):
            by_identity.setdefault(s.identity, []).append(idx)
        if len(by_identity) >= 2 and all(len(v) >= 2 for v in by_identity.values()):
            gallery = {
                ident: [frozen.identity_encoder.extract(samples[i].image) for i in idxs]
                for ident, idxs in sorted(by_identity.items())
            }
            for depth in frozen.identity_encoder.cfg.depth_set:
                distributions[depth] = similarity_distribution(
                    gallery, depth, seed=substream_seed(config.seed, f"analyze/{depth}")
                )
        else:
            logger.warning("manifest lacks a multi-image gallery; skipping histograms")
        emit_plots(
            out_dir / "plots", distributions or None, summary.upper_bound,
            provenance={"seed": config.seed, "checkpoint_hash": mapper_hash},
        )

    return out_dir


def pretrain_encoder_run(
    config: ExperimentConfig, checkpoint_out: str | Path
) -> MultiScaleIdentityEncoder:
    """Train the identity encoder on the manifest gallery and save it."""
    samples = load_manifest(config.manifest)
    identities = sorted({s.identity for s in samples})
    label_of = {ident: i for i, ident in enumerate(identities)}
    images = torch.stack([s.image for s in samples])
    labels = torch.tensor([label_of[s.identity] for s in samples])
    cfg = dataclasses.replace(config.encoder, num_identities=len(identities))
    pcfg = dataclasses.replace(
        config.pretrain, seed=substream_seed(config.seed, "pretrain")
    )
    result = pretrain_identity_encoder(images, labels, cfg, pcfg)
    signature = checkpoints.config_signature({
        "encoder": dataclasses.asdict(cfg),
        "pretrain": dataclasses.asdict(pcfg),
        "manifest": str(config.manifest),
    })
    save_encoder_checkpoint(checkpoint_out, result.encoder, pcfg.steps, signature)
    return result.encoder


def analyze_encoder_run(
    config: ExperimentConfig, out_dir: str | Path,
    encoder: MultiScaleIdentityEncoder | None = None,
) -> dict[int, float]:
    """Per-depth triplet AUC on the manifest gallery, with histograms."""
    samples = load_manifest(config.manifest)
    if encoder is None:
        if config.encoder_checkpoint:
            encoder = load_encoder_checkpoint(config.encoder_checkpoint)
        else:
            encoder = build_stack(config).identity_encoder
    gallery: dict[str, list] = {}
    for s in samples:
        gallery.setdefault(s.identity, []).append(encoder.extract(s.image))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aucs = {}
    distributions = {}
    for depth in encoder.cfg.depth_set:
        dist = similarity_distribution(
            gallery, depth, seed=substream_seed(config.seed, f"analyze/{depth}")
        )
        distributions[depth] = dist
        aucs[depth] = roc_auc(dist)
    emit_plots(out_dir, distributions, None)
    (out_dir / "auc.json").write_text(json.dumps(
        {str(k): v for k, v in sorted(aucs.items())}, indent=2
    ))
    return aucs
