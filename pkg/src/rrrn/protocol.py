"""Experiment harness: run configuration, HDE/CDE folds, training, evaluation,
and report assembly.

Determinism contract: one global seed fans out through stable hashing to
parameter init, epoch shuffling, and occlusion synthesis, so a rerun with the
same config and inputs reproduces checkpoints and reports byte for byte.
Augmentation only ever touches training ids; evaluation always reads the
single un-augmented flow pair of each test sample.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .augment import augment_sample
from .dataset import AnnotationRecord, DatasetManifest
from .flow import (
    FlowEstimator,
    RegionCropSpec,
    RegionStack,
    compute_flow,
    crop_regions,
    read_stack,
    write_stack,
)
from .frames import load_sequence, to_grayscale
from .losses import LossWeights, compute_losses
from .metrics import ConfusionMatrix, Metrics, compute_metrics, pool_matrices
from .model import BackboneConfig, ModelConfig, RRRN, build_model, load_checkpoint, save_checkpoint


class ProtocolError(Exception):
    pass


class EmptyManifestError(ProtocolError):
    pass


class SingleSubjectError(ProtocolError):
    pass


class CacheMissError(ProtocolError):
    def __init__(self, key: str):
        super().__init__(f"no cached region stack for {key!r}")
        self.key = key


class DivergedLossError(ProtocolError):
    pass


def derive_seed(seed: int, *parts: str) -> int:
    """Stable sub-seed from a global seed and a label path."""
    text = ":".join([str(seed), *parts])
    digest = hashlib.blake2b(text.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind.lower() != "adam":
            raise ValueError(f"unsupported optimizer {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.0005
    loss_weights: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    reduction_ratio: int = 2
    seed: int = 0
    augmentation_enabled: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs >= 1, batch_size >= 1, learning_rate >= 0 required")

    def model_config(self, num_classes: int = 5) -> ModelConfig:
        return ModelConfig(
            backbone=self.backbone,
            num_classes=num_classes,
            reduction_ratio=self.reduction_ratio,
        )

    def crop_spec(self) -> RegionCropSpec:
        return RegionCropSpec(output_size=self.backbone.input_size)


def config_to_flat(cfg: RunConfig) -> dict[str, str]:
    def fmt(v) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)

    return {
        "optimizer.kind": cfg.optimizer.kind,
        "optimizer.beta1": fmt(cfg.optimizer.beta1),
        "optimizer.beta2": fmt(cfg.optimizer.beta2),
        "optimizer.epsilon": fmt(cfg.optimizer.epsilon),
        "epochs": fmt(cfg.epochs),
        "batch_size": fmt(cfg.batch_size),
        "learning_rate": fmt(cfg.learning_rate),
        "loss_weights.beta": fmt(cfg.loss_weights.beta),
        "loss_weights.lambda1": fmt(cfg.loss_weights.lambda1),
        "loss_weights.lambda2": fmt(cfg.loss_weights.lambda2),
        "backbone.variant": cfg.backbone.variant.value,
        "backbone.stream_channels": fmt(cfg.backbone.stream_channels),
        "backbone.input_size": fmt(cfg.backbone.input_size),
        "backbone.pretrained_init": fmt(cfg.backbone.pretrained_init),
        "reduction_ratio": fmt(cfg.reduction_ratio),
        "seed": fmt(cfg.seed),
        "augmentation_enabled": fmt(cfg.augmentation_enabled),
    }


def config_from_flat(flat: dict[str, str]) -> RunConfig:
    defaults = config_to_flat(RunConfig())
    unknown = set(flat) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config key(s): {sorted(unknown)}")
    merged = {**defaults, **flat}

    def as_bool(s: str) -> bool:
        if s.lower() in ("true", "1", "yes"):
            return True
        if s.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {s!r}")

    from .model import BackboneVariant

    return RunConfig(
        optimizer=OptimizerConfig(
            kind=merged["optimizer.kind"],
            beta1=float(merged["optimizer.beta1"]),
            beta2=float(merged["optimizer.beta2"]),
            epsilon=float(merged["optimizer.epsilon"]),
        ),
        epochs=int(merged["epochs"]),
        batch_size=int(merged["batch_size"]),
        learning_rate=float(merged["learning_rate"]),
        loss_weights=LossWeights(
            beta=float(merged["loss_weights.beta"]),
            lambda1=float(merged["loss_weights.lambda1"]),
            lambda2=float(merged["loss_weights.lambda2"]),
        ),
        backbone=BackboneConfig(
            variant=BackboneVariant(merged["backbone.variant"]),
            stream_channels=int(merged["backbone.stream_channels"]),
            input_size=int(merged["backbone.input_size"]),
            pretrained_init=as_bool(merged["backbone.pretrained_init"]),
        ),
        reduction_ratio=int(merged["reduction_ratio"]),
        seed=int(merged["seed"]),
        augmentation_enabled=as_bool(merged["augmentation_enabled"]),
    )


def load_config(path: Path | str) -> RunConfig:
    """Flat ``key = value`` file; '#' starts a comment, blank lines ignored."""
    flat: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{line_no}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        flat[key.strip()] = value.strip()
    return config_from_flat(flat)


def save_config(cfg: RunConfig, path: Path | str) -> None:
    lines = [f"{k} = {v}" for k, v in config_to_flat(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def config_fingerprint(cfg: RunConfig) -> str:
    flat = config_to_flat(cfg)
    text = "\n".join(f"{k}={flat[k]}" for k in sorted(flat))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    name: str
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)[:3]}")


def _mapped_or_raise(manifest: DatasetManifest, side: str) -> list[AnnotationRecord]:
    records = manifest.mapped_records()
    if not records:
        raise EmptyManifestError(f"{side} manifest has no class-mapped records")
    return records


def _database_label(records: Sequence[AnnotationRecord]) -> str:
    names = sorted({r.database_id.value for r in records})
    return names[0] if len(names) == 1 else "+".join(names)


def hde_folds(casme2: DatasetManifest, samm: DatasetManifest) -> list[Fold]:
    """Two cross-database folds: train on one corpus, test on the other."""
    a = _mapped_or_raise(casme2, "first")
    b = _mapped_or_raise(samm, "second")
    name_a = _database_label(a)
    name_b = _database_label(b)
    ids_a = tuple(r.sample_id for r in a)
    ids_b = tuple(r.sample_id for r in b)
    return [
        Fold(name=f"{name_a}_to_{name_b}", train_ids=ids_a, test_ids=ids_b),
        Fold(name=f"{name_b}_to_{name_a}", train_ids=ids_b, test_ids=ids_a),
    ]


def loso_folds(composite: DatasetManifest) -> list[Fold]:
    """One fold per subject: that subject's samples held out, rest trained."""
    records = _mapped_or_raise(composite, "composite")
    by_subject: dict[tuple[str, str], list[str]] = {}
    for r in records:
        by_subject.setdefault(r.subject_key, []).append(r.sample_id)
    if len(by_subject) < 2:
        raise SingleSubjectError("leave-one-subject-out needs at least two subjects")
    folds = []
    for key in sorted(by_subject):
        test_ids = tuple(by_subject[key])
        train_ids = tuple(r.sample_id for r in records if r.subject_key != key)
        folds.append(
            Fold(name=f"loso_{key[0]}_{key[1]}", train_ids=train_ids, test_ids=test_ids)
        )
    return folds


# ---------------------------------------------------------------------------
# preprocessed stack cache


class StackCache:
    """Directory of binary region-stack records, keyed by sample id.

    Augmented variants use ``<sample_id>.augNNN`` keys; evaluation reads only
    the bare sample id.
    """

    SUFFIX = ".rrn"

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, key: str) -> Path:
        return self.directory / f"{key}{self.SUFFIX}"

    def has(self, key: str) -> bool:
        return self.path(key).is_file()

    def put(self, key: str, stack: RegionStack) -> None:
        write_stack(self.path(key), stack)

    def get(self, key: str) -> RegionStack:
        path = self.path(key)
        if not path.is_file():
            raise CacheMissError(key)
        return read_stack(path)

    @staticmethod
    def aug_key(sample_id: str, index: int) -> str:
        return f"{sample_id}.aug{index:03d}"

    def aug_keys(self, sample_id: str) -> list[str]:
        pattern = f"{sample_id}.aug*{self.SUFFIX}"
        return sorted(p.name[: -len(self.SUFFIX)] for p in self.directory.glob(pattern))


def preprocess_record(
    record: AnnotationRecord,
    cache: StackCache,
    crop_spec: RegionCropSpec,
    estimator: FlowEstimator | None = None,
    augmented: bool = False,
    skip_existing: bool = True,
) -> list[str]:
    """Compute and cache the onset->apex stack (always) and, optionally, the
    full augmented pair set. Returns the cache keys written or found."""
    keys: list[str] = []
    frames = None

    def get_frames():
        nonlocal frames
        if frames is None:
            frames = [to_grayscale(f).astype(np.float32) for f in load_sequence(record.frames_dir)]
        return frames

    base_key = record.sample_id
    if not (skip_existing and cache.has(base_key)):
        seq = get_frames()
        if record.apex_idx >= len(seq):
            raise ProtocolError(
                f"{record.sample_id}: apex index {record.apex_idx} outside "
                f"{len(seq)}-frame sequence"
            )
        flow = compute_flow(seq[record.onset_idx], seq[record.apex_idx], estimator)
        cache.put(base_key, crop_regions(flow, crop_spec))
    keys.append(base_key)

    if augmented:
        existing = cache.aug_keys(record.sample_id)
        if skip_existing and existing:
            keys.extend(existing)
        else:
            pairs = augment_sample(record, get_frames())
            for i, pair in enumerate(pairs):
                key = cache.aug_key(record.sample_id, i)
                flow = compute_flow(pair.onset_frame, pair.apex_frame, estimator)
                cache.put(key, crop_regions(flow, crop_spec))
                keys.append(key)
    return keys


def preprocess_manifest(
    manifest: DatasetManifest,
    cache: StackCache,
    crop_spec: RegionCropSpec,
    estimator: FlowEstimator | None = None,
    augmented: bool = False,
    skip_existing: bool = True,
    progress: Optional[Callable[[str], None]] = None,
) -> dict[str, list[str]]:
    out = {}
    for record in manifest:
        out[record.sample_id] = preprocess_record(
            record, cache, crop_spec, estimator, augmented, skip_existing
        )
        if progress:
            progress(record.sample_id)
    return out


# ---------------------------------------------------------------------------
# normalization over the training set


@dataclass(frozen=True)
class NormStats:
    """Per-component standardization constants (vertical then horizontal)."""

    v_mean: float
    v_std: float
    u_mean: float
    u_std: float

    def as_dict(self) -> dict:
        return {
            "v_mean": self.v_mean,
            "v_std": self.v_std,
            "u_mean": self.u_mean,
            "u_std": self.u_std,
        }

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        return NormStats(
            v_mean=float(d["v_mean"]),
            v_std=float(d["v_std"]),
            u_mean=float(d["u_mean"]),
            u_std=float(d["u_std"]),
        )

    def apply(self, stack: RegionStack) -> tuple[np.ndarray, np.ndarray]:
        vert = (stack.vertical - self.v_mean) / self.v_std
        horz = (stack.horizontal - self.u_mean) / self.u_std
        return vert.astype(np.float32), horz.astype(np.float32)


IDENTITY_STATS = None  # sentinel docs only


def compute_norm_stats(cache: StackCache, keys: Iterable[str]) -> NormStats:
    v_sum = v_sq = u_sum = u_sq = 0.0
    count = 0
    for key in keys:
        stack = cache.get(key)
        v = stack.vertical.astype(np.float64)
        u = stack.horizontal.astype(np.float64)
        v_sum += v.sum()
        v_sq += (v * v).sum()
        u_sum += u.sum()
        u_sq += (u * u).sum()
        count += v.size
    if count == 0:
        raise ProtocolError("cannot compute normalization stats over nothing")
    v_mean = v_sum / count
    u_mean = u_sum / count
    v_std = float(np.sqrt(max(v_sq / count - v_mean**2, 0.0)))
    u_std = float(np.sqrt(max(u_sq / count - u_mean**2, 0.0)))
    return NormStats(
        v_mean=float(v_mean),
        v_std=v_std if v_std > 1e-6 else 1.0,
        u_mean=float(u_mean),
        u_std=u_std if u_std > 1e-6 else 1.0,
    )


# ---------------------------------------------------------------------------
# training


def _label_map(manifest: DatasetManifest) -> dict[str, int]:
    return {r.sample_id: r.label for r in manifest if r.label is not None}


def _training_keys(fold: Fold, cfg: RunConfig, cache: StackCache) -> list[str]:
    keys: list[str] = []
    for sid in fold.train_ids:
        if cfg.augmentation_enabled:
            aug = cache.aug_keys(sid)
            if not aug:
                raise CacheMissError(f"{sid} (augmented)")
            keys.extend(aug)
        else:
            if not cache.has(sid):
                raise CacheMissError(sid)
            keys.append(sid)
    return keys


_PRELOAD_BUDGET_BYTES = 1 << 29


class _TrainSet:
    """Standardized training tensors; preloaded when they fit in memory."""

    def __init__(self, cache: StackCache, keys: list[str], labels: list[int], stats: NormStats):
        self.cache = cache
        self.keys = keys
        self.labels = np.asarray(labels, dtype=np.int64)
        self.stats = stats
        probe = cache.get(keys[0])
        item_bytes = probe.vertical.nbytes * 2
        self._preloaded = None
        if item_bytes * len(keys) <= _PRELOAD_BUDGET_BYTES:
            verts, horzs = [], []
            for key in keys:
                v, u = stats.apply(cache.get(key))
                verts.append(v)
                horzs.append(u)
            self._preloaded = (np.stack(verts), np.stack(horzs))

    def batch(self, indices: np.ndarray) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if self._preloaded is not None:
            vert = self._preloaded[0][indices]
            horz = self._preloaded[1][indices]
        else:
            parts = [self.stats.apply(self.cache.get(self.keys[i])) for i in indices]
            vert = np.stack([p[0] for p in parts])
            horz = np.stack([p[1] for p in parts])
        return (
            torch.from_numpy(vert),
            torch.from_numpy(horz),
            torch.from_numpy(self.labels[indices]),
        )


def train(
    fold: Fold,
    cfg: RunConfig,
    cache: StackCache,
    manifest: DatasetManifest,
    out_dir: Path | str,
) -> Path:
    """Train one fold to completion; returns the final checkpoint path.

    Writes ``epoch_NNN.ckpt`` at every epoch end plus ``final.ckpt``, and a
    ``train_log.txt`` with per-epoch mean loss components. Deterministic for
    a fixed seed: fixed init, fixed shuffle order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels_by_id = _label_map(manifest)
    missing = [sid for sid in fold.train_ids if sid not in labels_by_id]
    if missing:
        raise ProtocolError(f"unlabeled train ids: {missing[:3]}")

    keys = _training_keys(fold, cfg, cache)
    labels = [labels_by_id[key.split(".aug")[0]] for key in keys]
    stats = compute_norm_stats(cache, keys)
    dataset = _TrainSet(cache, keys, labels, stats)

    model = build_model(cfg.model_config(), seed=derive_seed(cfg.seed, "init"))
    model.train()
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
        eps=cfg.optimizer.epsilon,
    )
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle", fold.name))
    fingerprint = config_fingerprint(cfg)

    log_lines: list[str] = []
    n = len(keys)
    final_path = out_dir / "final.ckpt"
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            vert, horz, y = dataset.batch(idx)
            out = model(vert, horz)
            losses = compute_losses(
                out.logits, out.region_logits, out.attention, y, cfg.loss_weights
            )
            if not torch.isfinite(losses.total):
                raise DivergedLossError(
                    f"non-finite loss at epoch {epoch}, batch {batches}: "
                    f"cls={float(losses.cls)} rb={float(losses.rb)} cor={float(losses.cor)}"
                )
            optimizer.zero_grad()
            losses.total.backward()
            optimizer.step()
            sums += [float(losses.total), float(losses.cls), float(losses.rb), float(losses.cor)]
            batches += 1
        means = sums / max(batches, 1)
        log_lines.append(
            f"epoch={epoch} loss_total={means[0]:.6f} loss_cls={means[1]:.6f} "
            f"loss_rb={means[2]:.6f} loss_cor={means[3]:.6f}"
        )
        extra = {
            "epoch": epoch,
            "fold": fold.name,
            "seed": cfg.seed,
            "config_fingerprint": fingerprint,
            "norm_stats": stats.as_dict(),
        }
        save_checkpoint(out_dir / f"epoch_{epoch:03d}.ckpt", model, extra=extra)
        if epoch == cfg.epochs:
            save_checkpoint(final_path, model, extra=extra)

    (out_dir / "train_log.txt").write_text("\n".join(log_lines) + "\n")
    return final_path


# ---------------------------------------------------------------------------
# evaluation


class CheckpointPredictor:
    """Wraps a trained checkpoint as a stack -> class-index callable."""

    def __init__(self, model: RRRN, stats: NormStats):
        self.model = model.eval()
        self.stats = stats

    @classmethod
    def from_file(cls, path: Path | str) -> "CheckpointPredictor":
        model, extra = load_checkpoint(path)
        return cls(model, NormStats.from_dict(extra["norm_stats"]))

    def __call__(self, stack: RegionStack) -> int:
        vert, horz = self.stats.apply(stack)
        with torch.no_grad():
            out = self.model(
                torch.from_numpy(vert[None]), torch.from_numpy(horz[None])
            )
        return int(out.logits.argmax(dim=-1).item())

    def attention(self, stack: RegionStack) -> np.ndarray:
        vert, horz = self.stats.apply(stack)
        with torch.no_grad():
            out = self.model(
                torch.from_numpy(vert[None]), torch.from_numpy(horz[None])
            )
        return out.attention[0].numpy()


def make_predictor(checkpoint: Path | str) -> CheckpointPredictor:
    return CheckpointPredictor.from_file(checkpoint)


@dataclass(frozen=True)
class FoldResult:
    name: str
    confusion: ConfusionMatrix
    metrics: Metrics

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "confusion": self.confusion.counts.tolist(),
            **self.metrics.as_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "FoldResult":
        cm = ConfusionMatrix(np.asarray(d["confusion"]))
        return FoldResult(name=d["name"], confusion=cm, metrics=compute_metrics(cm))


def evaluate(
    predictor: Callable[[RegionStack], int],
    fold: Fold,
    manifest: DatasetManifest,
    cache: StackCache,
    num_classes: int = 5,
) -> FoldResult:
    """Argmax evaluation of every test sample's single un-augmented stack."""
    labels_by_id = _label_map(manifest)
    y_true: list[int] = []
    y_pred: list[int] = []
    for sid in fold.test_ids:
        if sid not in labels_by_id:
            raise ProtocolError(f"unlabeled test id {sid}")
        y_true.append(labels_by_id[sid])
        y_pred.append(int(predictor(cache.get(sid))))
    cm = ConfusionMatrix.from_predictions(y_true, y_pred, num_classes)
    return FoldResult(name=fold.name, confusion=cm, metrics=compute_metrics(cm))


# ---------------------------------------------------------------------------
# reports


def aggregate_results(task: str, results: Sequence[FoldResult]) -> dict:
    if not results:
        raise ProtocolError("no fold results to aggregate")
    if task == "hde":
        per = [r.metrics for r in results]
        return {
            "rule": "fold_mean",
            "war": float(np.mean([m.war for m in per])),
            "uar": float(np.mean([m.uar for m in per])),
            "f1": float(np.mean([m.f1 for m in per])),
            "wf1": float(np.mean([m.wf1 for m in per])),
        }
    if task == "cde":
        pooled = pool_matrices(r.confusion for r in results)
        return {"rule": "pooled_confusion", **compute_metrics(pooled).as_dict()}
    raise ProtocolError(f"unknown task {task!r}")


def build_report(
    task: str,
    occlusion: str,
    results: Sequence[FoldResult],
    fingerprint: str,
) -> dict:
    return {
        "task": task,
        "occlusion": occlusion,
        "folds": [r.to_dict() for r in results],
        "aggregate": aggregate_results(task, results),
        "config_fingerprint": fingerprint,
    }


def recompute_aggregate(report: dict) -> dict:
    """Re-derive the aggregate from the stored per-fold matrices."""
    results = [FoldResult.from_dict(d) for d in report["folds"]]
    return aggregate_results(report["task"], results)


def write_report(report: dict, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# end-to-end orchestration


def run_experiment(
    task: str,
    occlusion: str,
    cfg: RunConfig,
    out_dir: Path | str,
    casme2: Optional[DatasetManifest] = None,
    samm: Optional[DatasetManifest] = None,
    composite: Optional[DatasetManifest] = None,
    assets_dir: Optional[Path] = None,
    landmarks_dir: Optional[Path] = None,
    estimator: FlowEstimator | None = None,
    progress: Optional[Callable[[str], None]] = None,
) -> dict:
    """preprocess -> (optional) occlusion synthesis -> augment -> train ->
    evaluate -> report, for one (task, occlusion) pair."""
    from . import occlusion as occ

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if task == "hde":
        if casme2 is None or samm is None:
            raise ProtocolError("hde needs both source manifests")
        manifests = {"casme2": casme2, "samm": samm}
    elif task == "cde":
        if composite is None:
            if casme2 is None or samm is None:
                raise ProtocolError("cde needs a composite manifest or both sources")
            from .dataset import merge_manifests

            composite = merge_manifests(casme2, samm, source_note="composite")
        manifests = {"composite": composite}
    else:
        raise ProtocolError(f"unknown task {task!r}")

    if occlusion != "none":
        spec = parse_occlusion_tag(occlusion, seed=derive_seed(cfg.seed, "occlusion"))
        landmark_source = (
            occ.DirectoryLandmarkSource(landmarks_dir) if landmarks_dir else None
        )
        assets = None
        if spec.kind in (occ.OcclusionKind.MASK, occ.OcclusionKind.GLASS):
            if assets_dir is None:
                raise ProtocolError(f"{occlusion} synthesis needs --assets")
            kind = occ.AssetKind.MASK if spec.kind is occ.OcclusionKind.MASK else occ.AssetKind.GLASSES
            assets = occ.load_assets(assets_dir, kind)
        manifests = {
            name: occ.synthesize_database(
                m, spec, out_dir / "synth" / name, landmark_source, assets
            )
            for name, m in manifests.items()
        }

    cache = StackCache(out_dir / "cache")
    crop_spec = cfg.crop_spec()
    for name, manifest in manifests.items():
        preprocess_manifest(
            manifest,
            cache,
            crop_spec,
            estimator=estimator,
            augmented=cfg.augmentation_enabled,
            progress=progress,
        )

    if task == "hde":
        folds = hde_folds(manifests["casme2"], manifests["samm"])
        from .dataset import merge_manifests

        full_manifest = merge_manifests(
            manifests["casme2"], manifests["samm"], source_note="hde union"
        )
    else:
        folds = loso_folds(manifests["composite"])
        full_manifest = manifests["composite"]

    results = []
    for fold in folds:
        fold_dir = out_dir / f"fold_{fold.name}"
        ckpt = train(fold, cfg, cache, full_manifest, fold_dir)
        result = evaluate(make_predictor(ckpt), fold, full_manifest, cache)
        write_report(result.to_dict(), fold_dir / "fold_report.json")
        results.append(result)
        if progress:
            progress(f"fold {fold.name}: war={result.metrics.war:.3f}")

    report = build_report(task, occlusion, results, config_fingerprint(cfg))
    write_report(report, out_dir / "report.json")
    return report


def parse_occlusion_tag(tag: str, seed: int = 0) -> "occlusion.OcclusionSpec":
    from . import occlusion as occ

    tag = tag.lower()
    if tag == "mask":
        return occ.OcclusionSpec(kind=occ.OcclusionKind.MASK, seed=seed)
    if tag == "glass":
        return occ.OcclusionSpec(kind=occ.OcclusionKind.GLASS, seed=seed)
    if tag.startswith("random_"):
        pct = int(tag.split("_", 1)[1])
        return occ.OcclusionSpec(
            kind=occ.OcclusionKind.RANDOM, ratio=pct / 100.0, seed=seed
        )
    raise ProtocolError(f"unknown occlusion tag {tag!r}")
