"""End-to-end runs: k-shot training, bundle I/O, evaluation, ablation.

A *bundle* is the trained artifact for one (category, seed): prompt
prototypes for both levels, the patch-feature memory, per-prompt
features, loss traces, and a config echo.  Bundles are written
atomically next to a small JSON manifest whose bytes are reproducible,
so identical configs hash to identical manifests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ._version import __version__
from .backbone import DualEncoder, build_encoder
from .config import AblationFlags, RunConfig
from .data import (
    CategorySpec,
    PreprocessSpec,
    preprocess,
    preprocess_mask,
    sample_k_shot,
    scan_category,
    scan_dataset,
)
from .errors import InputError, StructuralError
from .memory import FeatureMemory, build_memory
from .metrics import (
    MetricReport,
    MetricRow,
    aggregate,
    auroc,
    aupr,
    pro,
    report_csv,
    report_table,
)
from .prompts import (
    DEFAULT_GENERIC_SUFFIXES,
    ClipPromptEncoder,
    PromptFeature,
    PromptKind,
    Prototypes,
    SuffixLexicon,
    build_bank,
)
from .scoring import save_heatmap, save_overlay, score_image
from .training import BankTrainResult, TrainConfig, TrainedModel, train_bank

BUNDLE_VERSION = 1


@dataclass
class BundleRecord:
    category: str
    seed: int
    shots: list[str]
    bundle_path: Path
    manifest_path: Path
    manifest_hash: str


@dataclass
class LoadedBundle:
    model: TrainedModel
    memory: FeatureMemory | None
    meta: dict


@dataclass
class TrainRunResult:
    records: list[BundleRecord]
    run_manifest_path: Path
    config_hash: str


@dataclass
class EvalRunResult:
    report: MetricReport
    csv_path: Path
    table_path: Path


@lru_cache(maxsize=4)
def _cached_encoder(
    architecture: str,
    checkpoint: str | None,
    bpe_vocab: str | None,
    tap_layers: tuple[int, ...],
    temperature: float | None,
    cache_dir: str | None,
    init_seed: int,
) -> DualEncoder:
    return build_encoder(
        architecture=architecture,
        checkpoint=checkpoint,
        bpe_vocab=bpe_vocab,
        tap_layers=tap_layers,
        temperature=temperature,
        cache_dir=cache_dir,
        init_seed=init_seed,
    )


def build_backbone(cfg: RunConfig) -> DualEncoder:
    """Build (or reuse) the frozen encoder for a config.

    Encoders are immutable after construction, so sharing one across
    requests with identical backbone settings is safe and saves the
    checkpoint load on every service call.
    """
    b = cfg.backbone
    return _cached_encoder(
        b.architecture,
        None if b.checkpoint is None else str(b.checkpoint),
        None if b.bpe_vocab is None else str(b.bpe_vocab),
        tuple(b.tap_layers),
        b.temperature,
        None if b.feature_cache is None else str(b.feature_cache),
        b.init_seed,
    )


def resolve_categories(cfg: RunConfig) -> list[str]:
    if cfg.categories:
        return list(cfg.categories)
    return scan_dataset(cfg.dataset_root)


def category_lexicon(cfg: RunConfig, spec: CategorySpec) -> SuffixLexicon:
    """Dataset defect labels (underscores to spaces) merged with generic
    suffixes and any user lexicon file; deduplicated downstream."""
    if cfg.prompts.lexicon_file is not None:
        base = SuffixLexicon.from_file(cfg.prompts.lexicon_file)
        if not base.generic:
            base.generic = list(DEFAULT_GENERIC_SUFFIXES)
    else:
        base = SuffixLexicon(generic=list(DEFAULT_GENERIC_SUFFIXES), per_object={})
    auto = [f"with {label.replace('_', ' ')}" for label in spec.anomaly_labels]
    per_object = base.per_object.get(spec.name, []) + auto
    return SuffixLexicon(generic=base.generic, per_object={spec.name: per_object})


def _bundle_dir(cfg: RunConfig, category: str, seed: int) -> Path:
    return Path(cfg.output_dir) / category / f"seed{seed}"


def _bank_payload(result: BankTrainResult | None) -> dict | None:
    if result is None:
        return None
    protos = result.prototypes
    return {
        "prototypes": {
            "normal_raw": protos.normal_raw,
            "anomaly_raw": protos.anomaly_raw,
            "manual_raw": protos.manual_raw,
            "learned_raw": protos.learned_raw,
            "anomaly_features": protos.anomaly_features,
            # normalized copies duplicated for external readers of the bundle
            "normal_unit": protos.normal,
            "anomaly_unit": protos.anomaly,
            "manual_unit": protos.manual,
            "learned_unit": protos.learned,
        },
        "features": torch.stack([f.feature for f in result.prompt_features]),
        "feature_ids": [f.prompt_id for f in result.prompt_features],
        "feature_kinds": [f.kind.value for f in result.prompt_features],
        "loss_trace": result.loss_trace,
    }


def _bank_from_payload(payload: dict | None) -> BankTrainResult | None:
    if payload is None:
        return None
    raw = payload["prototypes"]
    protos = Prototypes(
        normal_raw=raw["normal_raw"],
        anomaly_raw=raw["anomaly_raw"],
        manual_raw=raw["manual_raw"],
        learned_raw=raw["learned_raw"],
        anomaly_features=raw["anomaly_features"],
    )
    features = [
        PromptFeature(pid, PromptKind(kind), feat)
        for pid, kind, feat in zip(
            payload["feature_ids"], payload["feature_kinds"], payload["features"]
        )
    ]
    return BankTrainResult(
        prototypes=protos, prompt_features=features, loss_trace=payload["loss_trace"]
    )


def save_bundle(
    cfg: RunConfig,
    category: str,
    seed: int,
    shots: list[Path],
    model: TrainedModel,
    memory: FeatureMemory | None,
) -> BundleRecord:
    """Write bundle.pt (atomically) and its manifest; manifest bytes are a
    pure function of the config, category, seed, and shot list."""
    directory = _bundle_dir(cfg, category, seed)
    directory.mkdir(parents=True, exist_ok=True)
    bundle_path = directory / "bundle.pt"
    payload = {
        "version": BUNDLE_VERSION,
        "package_version": __version__,
        "config": cfg.model_dump(mode="json"),
        "config_hash": cfg.config_hash(),
        "category": category,
        "seed": seed,
        "k": cfg.k,
        "shots": [str(p) for p in shots],
        "temperature": model.temperature,
        "image_bank": _bank_payload(model.image),
        "pixel_bank": _bank_payload(model.pixel),
        "memory": None
        if memory is None
        else {str(layer): rows for layer, rows in memory.layers.items()},
    }
    tmp = bundle_path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(bundle_path)

    manifest = {
        "bundle_version": BUNDLE_VERSION,
        "package_version": __version__,
        "config_hash": cfg.config_hash(),
        "category": category,
        "seed": seed,
        "k": cfg.k,
        "shots": [str(p) for p in shots],
    }
    manifest_path = directory / "manifest.json"
    manifest_bytes = (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode()
    manifest_path.write_bytes(manifest_bytes)
    return BundleRecord(
        category=category,
        seed=seed,
        shots=[str(p) for p in shots],
        bundle_path=bundle_path,
        manifest_path=manifest_path,
        manifest_hash=hashlib.sha256(manifest_bytes).hexdigest(),
    )


def load_bundle(path: str | Path) -> LoadedBundle:
    path = Path(path)
    if not path.exists():
        raise InputError(f"bundle not found: {path} (run train first)")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != BUNDLE_VERSION:
        raise InputError(
            f"bundle {path} has version {payload.get('version')}, expected {BUNDLE_VERSION}"
        )
    model = TrainedModel(
        image=_bank_from_payload(payload["image_bank"]),
        pixel=_bank_from_payload(payload["pixel_bank"]),
        temperature=payload["temperature"],
    )
    memory = None
    if payload["memory"] is not None:
        memory = FeatureMemory(
            layers={int(layer): rows for layer, rows in payload["memory"].items()}
        )
    meta = {key: payload[key] for key in ("config", "config_hash", "category", "seed", "k", "shots")}
    return LoadedBundle(model=model, memory=memory, meta=meta)


def train_category_seed(
    cfg: RunConfig, encoder: DualEncoder, spec: CategorySpec, seed: int
) -> BundleRecord:
    """Sample shots, train both prompt banks, build the memory, persist."""
    pspec = PreprocessSpec(image_size=cfg.preprocess.image_size)
    shots = sample_k_shot(spec, cfg.k, seed)
    outputs = [encoder.encode_image_path(p, lambda q: preprocess(q, pspec)) for p in shots]

    memory = build_memory(outputs) if cfg.ablation.vad else None

    image_result = None
    pixel_result = None
    if cfg.ablation.sc:
        lexicon = category_lexicon(cfg, spec)
        train_cfg = TrainConfig(
            lr=cfg.train.lr,
            momentum=cfg.train.momentum,
            weight_decay=cfg.train.weight_decay,
            align_weight=cfg.train.align_weight,
            steps=cfg.train.steps,
            use_margin=cfg.ablation.eam,
            use_align=cfg.ablation.align,
        )
        prompt_encoder = ClipPromptEncoder(encoder)

        def make_bank(init_seed: int):
            return build_bank(
                object_name=spec.name.replace("_", " "),
                lexicon=lexicon,
                tokenizer=encoder.tokenizer,
                context_length=encoder.dims.context_length,
                embed_width=encoder.dims.text_width,
                prefix_count=cfg.prompts.prefix_count,
                learned_suffix_count=cfg.prompts.learned_suffix_count,
                prefix_length=cfg.prompts.prefix_length,
                learned_suffix_length=cfg.prompts.learned_suffix_length,
                init_seed=init_seed,
            )

        # independent banks per level; disjoint seeds keep them distinct
        image_result = train_bank(
            make_bank(seed * 2),
            [out.cls_feature for out in outputs],
            prompt_encoder,
            train_cfg,
            encoder.temperature,
        )
        patch_features = [
            row for out in outputs for row in out.patch_map.reshape(-1, out.patch_map.shape[-1])
        ]
        pixel_result = train_bank(
            make_bank(seed * 2 + 1),
            patch_features,
            prompt_encoder,
            train_cfg,
            encoder.temperature,
        )

    model = TrainedModel(
        image=image_result,
        pixel=pixel_result,
        temperature=encoder.temperature,
        config=train_cfg if cfg.ablation.sc else TrainConfig(steps=0),
    )
    return save_bundle(cfg, spec.name, seed, shots, model, memory)


def run_train(cfg: RunConfig) -> TrainRunResult:
    # validate the dataset before paying for encoder construction
    specs = [scan_category(cfg.dataset_root, c) for c in resolve_categories(cfg)]
    encoder = build_backbone(cfg)
    records: list[BundleRecord] = []
    for spec in specs:
        for seed in cfg.seeds:
            try:
                records.append(train_category_seed(cfg, encoder, spec, seed))
            except (InputError, StructuralError) as exc:
                raise type(exc)(f"category {spec.name!r}, seed {seed}: {exc}") from exc

    manifest = {
        "package_version": __version__,
        "config": cfg.model_dump(mode="json"),
        "config_hash": cfg.config_hash(),
        "bundles": [
            {
                "category": rec.category,
                "seed": rec.seed,
                "k": cfg.k,
                "shots": rec.shots,
                "manifest_hash": rec.manifest_hash,
            }
            for rec in records
        ],
    }
    run_manifest_path = Path(cfg.output_dir) / "run_manifest.json"
    run_manifest_path.parent.mkdir(parents=True, exist_ok=True)
    run_manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return TrainRunResult(
        records=records,
        run_manifest_path=run_manifest_path,
        config_hash=cfg.config_hash(),
    )


def evaluate_category_seed(
    cfg: RunConfig,
    encoder: DualEncoder,
    spec: CategorySpec,
    seed: int,
    loaded: LoadedBundle,
) -> MetricRow:
    """Score every test image, write per-image artifacts, compute metrics.

    Pixel metrics pool all pixels of the category's test set into one
    ranking; anomalous items without masks only contribute image-level.
    """
    pspec = PreprocessSpec(image_size=cfg.preprocess.image_size)
    eval_dir = Path(cfg.output_dir) / "eval" / spec.name / f"seed{seed}"
    eval_dir.mkdir(parents=True, exist_ok=True)

    image_scores: list[float] = []
    image_labels: list[int] = []
    pixel_maps = []
    pixel_masks = []
    csv_lines = ["image_path,image_score"]
    for item in spec.test_items:
        output = encoder.encode_image_path(item.path, lambda q: preprocess(q, pspec))
        bundle = score_image(
            output,
            loaded.model,
            loaded.memory,
            out_size=pspec.image_size,
            smooth_sigma=cfg.score.smooth_sigma,
        )
        image_scores.append(bundle.image_score)
        image_labels.append(1 if item.is_anomaly else 0)
        csv_lines.append(f"{item.path},{bundle.image_score:.6f}")

        if item.is_anomaly and item.mask_path is None:
            pass  # no mask: image-level only
        else:
            mask = (
                preprocess_mask(item.mask_path, pspec)
                if item.is_anomaly
                else torch.zeros(pspec.image_size, pspec.image_size)
            )
            pixel_maps.append(bundle.pixel_map.numpy())
            pixel_masks.append(mask.numpy())

        if cfg.score.heatmaps:
            stem = f"{item.label}_{item.path.stem}"
            save_heatmap(bundle.pixel_map, eval_dir / "heatmaps" / f"{stem}.png")
            save_overlay(
                bundle.pixel_map,
                Image.open(item.path),
                eval_dir / "heatmaps" / f"{stem}_overlay.png",
            )

    (eval_dir / "scores.csv").write_text("\n".join(csv_lines) + "\n")

    pixel_auroc = None
    pixel_pro = None
    if pixel_maps:
        flat_masks = [m.ravel() for m in pixel_masks]
        has_pos = any(m.any() for m in flat_masks)
        has_neg = any((m == 0).any() for m in flat_masks)
        if has_pos and has_neg:
            pixel_auroc = auroc(
                np.concatenate([m.ravel() for m in pixel_maps]),
                np.concatenate(flat_masks).astype(int),
            )
            pixel_pro = pro(pixel_maps, pixel_masks)
    return MetricRow(
        category=spec.name,
        seed=seed,
        image_auroc=auroc(image_scores, image_labels),
        image_aupr=aupr(image_scores, image_labels),
        pixel_auroc=pixel_auroc,
        pixel_pro=pixel_pro,
    )


def run_eval(cfg: RunConfig) -> EvalRunResult:
    specs = [scan_category(cfg.dataset_root, c) for c in resolve_categories(cfg)]
    bundles = {
        (spec.name, seed): load_bundle(_bundle_dir(cfg, spec.name, seed) / "bundle.pt")
        for spec in specs
        for seed in cfg.seeds
    }
    encoder = build_backbone(cfg)
    rows: list[MetricRow] = []
    for spec in specs:
        for seed in cfg.seeds:
            rows.append(
                evaluate_category_seed(cfg, encoder, spec, seed, bundles[(spec.name, seed)])
            )
    report = aggregate(rows)
    eval_dir = Path(cfg.output_dir) / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    csv_path = eval_dir / "report.csv"
    table_path = eval_dir / "report.txt"
    csv_path.write_text(report_csv(report))
    table_path.write_text(report_table(report))
    return EvalRunResult(report=report, csv_path=csv_path, table_path=table_path)


def run_score(
    cfg: RunConfig,
    bundle_path: str | Path,
    image_path: str | Path,
    heatmap_dir: str | Path | None = None,
) -> dict:
    """Score a single image against one bundle; optionally write heatmaps."""
    image_path = Path(image_path)
    if not image_path.exists():
        raise InputError(f"image not found: {image_path}")
    encoder = build_backbone(cfg)
    loaded = load_bundle(bundle_path)
    pspec = PreprocessSpec(image_size=cfg.preprocess.image_size)
    output = encoder.encode_image_path(image_path, lambda q: preprocess(q, pspec))
    bundle = score_image(
        output,
        loaded.model,
        loaded.memory,
        out_size=pspec.image_size,
        smooth_sigma=cfg.score.smooth_sigma,
    )
    heatmap_path = None
    overlay_path = None
    if heatmap_dir is not None:
        heatmap_dir = Path(heatmap_dir)
        heatmap_path = heatmap_dir / f"{image_path.stem}.png"
        overlay_path = heatmap_dir / f"{image_path.stem}_overlay.png"
        save_heatmap(bundle.pixel_map, heatmap_path)
        save_overlay(bundle.pixel_map, Image.open(image_path), overlay_path)
    vision_peak = None if bundle.vision_map is None else float(bundle.vision_map.max())
    return {
        "image_score": bundle.image_score,
        "prompt_image_score": bundle.prompt_image_score,
        "vision_peak": vision_peak,
        "provenance": bundle.provenance,
        "heatmap": None if heatmap_path is None else str(heatmap_path),
        "overlay": None if overlay_path is None else str(overlay_path),
    }


# rows mirroring the published ablation grid; the all-off row is omitted
# because scoring with both branches disabled is undefined by contract
DEFAULT_ABLATION_ROWS = [
    AblationFlags(sc=True, eam=False, vad=False, align=True),
    AblationFlags(sc=True, eam=True, vad=False, align=True),
    AblationFlags(sc=False, eam=False, vad=True, align=False),
    AblationFlags(sc=True, eam=True, vad=True, align=True),
]


def run_ablate(
    cfg: RunConfig, rows: list[AblationFlags] | None = None
) -> dict[str, EvalRunResult]:
    """Train + eval once per ablation row, each in its own output tree."""
    rows = rows if rows is not None else list(DEFAULT_ABLATION_ROWS)
    results: dict[str, EvalRunResult] = {}
    for flags in rows:
        sub_cfg = cfg.with_ablation(flags, Path(cfg.output_dir) / "ablate" / flags.name())
        run_train(sub_cfg)
        results[flags.name()] = run_eval(sub_cfg)
    return results
