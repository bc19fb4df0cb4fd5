"""Batching, Adam, the joint training loop, evaluation and experiment drivers."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import imenc, losses, txtenc
from . import ndgrad as nd
from .hsidata import HsiCube, LabelRaster, augment_batch, extract_patches, normalize, split_train_val
from .imenc import ImageEncoderConfig
from .model import LDGModel, build_model
from .ndgrad import NonFiniteError, Tensor
from .textpipe import BpeVocab, ClassMeta, build_coarse_prompt, encode, pad_batch, prompt_corpus, train_bpe
from .txtenc import TextEncoderConfig

log = logging.getLogger(__name__)

VARIANTS = ("cls", "coarse", "fine", "full")
DEFAULT_GRIDS = {
    "lr": (1e-5, 1e-4, 1e-3, 1e-2, 1e-1),
    "lam": (1e-3, 1e-2, 1e-1, 1e0, 1e1),
    "alpha": (0.1, 0.3, 0.5, 0.7, 0.9),
}


@dataclass
class TrainConfig:
    lr: float = 1e-2
    lam: float = 1.0
    alpha: float = 0.3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    patch: int = 13
    seed: int = 0
    variant: str = "full"
    augment: bool = False
    # desk-scale architecture and pipeline knobs
    widths: tuple[int, int] = (8, 16)
    d_sem: int = 64
    text_layers: int = 2
    text_width: int = 64
    text_heads: int = 4
    bpe_merges: int = 512
    val_fraction: float = 0.2
    normalize: bool = True
    eval_batch: int = 256

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    def effective(self) -> tuple[float, float]:
        """(lambda, alpha) after the variant overrides."""
        if self.variant == "cls":
            return 0.0, self.alpha
        if self.variant == "coarse":
            return self.lam, 0.0
        if self.variant == "fine":
            return self.lam, 1.0
        return self.lam, self.alpha

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(obj)
        if "widths" in kw:
            kw["widths"] = tuple(int(w) for w in kw["widths"])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    confusion: np.ndarray  # rows = true class, cols = predicted class
    oa: float
    ca: list[float]
    kappa: float

    def to_json(self) -> dict:
        return {
            "oa": self.oa,
            "kappa": self.kappa,
            "ca": list(self.ca),
            "confusion": self.confusion.astype(int).tolist(),
        }


def metrics_from_confusion(confusion) -> Metrics:
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    total = int(cm.sum())
    if total == 0:
        return Metrics(cm, 0.0, [0.0] * cm.shape[0], 0.0)
    oa = float(np.trace(cm)) / total
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    ca = [int(cm[c, c]) / int(rows[c]) if rows[c] else 0.0 for c in range(cm.shape[0])]
    # kappa = (OA - p_e) / (1 - p_e) scaled by total**2, in exact integers
    # so the only rounding is the final division
    trace = int(np.trace(cm))
    chance = sum(int(r) * int(c) for r, c in zip(rows, cols))
    denom = total * total - chance
    if denom == 0:
        kappa = 1.0 if trace == total else 0.0
    else:
        kappa = (total * trace - chance) / denom
    return Metrics(cm, oa, ca, kappa)


def confusion_matrix(true: np.ndarray, pred: np.ndarray, classes: int) -> np.ndarray:
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


# ---------------------------------------------------------------------------
# text side
# ---------------------------------------------------------------------------


@dataclass
class ClassTexts:
    """Token ids for every class prompt: row c is the coarse prompt of class
    index c, rows C + 2c and C + 2c + 1 its two fine texts."""

    ids: np.ndarray
    key_mask: np.ndarray
    classes: int

    def coarse_rows(self, labels: np.ndarray) -> np.ndarray:
        return np.asarray(labels)

    def fine_rows(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([self.classes + 2 * labels, self.classes + 2 * labels + 1], axis=1).ravel()


def class_texts(metas: Sequence[ClassMeta], template: str, vocab: BpeVocab) -> ClassTexts:
    seqs = [encode(vocab, build_coarse_prompt(m, template)) for m in metas]
    for m in metas:
        seqs.extend(encode(vocab, f) for f in m.fine)
    ids, mask = pad_batch(seqs, vocab.pad)
    return ClassTexts(ids, mask, len(metas))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    patches: np.ndarray  # (n, d, s, s)
    labels: np.ndarray  # 0-based class index
    coarse: list[tuple[int, ...]]
    fine: list[tuple[int, ...]]  # two per patch, image by image


@dataclass
class SourceData:
    """A preprocessed source scene with its training/validation split."""

    cube: HsiCube
    labels: LabelRaster
    train_idx: np.ndarray  # flat pixel indices
    val_idx: np.ndarray

    def coords(self, flat: np.ndarray) -> np.ndarray:
        return np.column_stack(np.unravel_index(flat, (self.cube.height, self.cube.width)))


def prepare_source(cube: HsiCube, labels: LabelRaster, config: TrainConfig) -> SourceData:
    if config.normalize:
        cube = normalize(cube)
    train_idx, val_idx = split_train_val(labels, 1.0 - config.val_fraction, config.seed)
    return SourceData(cube, labels, train_idx, val_idx)


def build_batch(
    source: SourceData,
    texts: ClassTexts | None,
    config: TrainConfig,
    rng: np.random.Generator,
) -> Batch:
    """Uniformly sample labeled training pixels and pair each patch with its
    class's coarse prompt and both fine texts."""
    pool = source.train_idx
    if len(pool) == 0:
        raise ValueError("empty training split")
    n = min(config.batch_size, len(pool))
    picked = rng.choice(pool, size=n, replace=False)
    coords = source.coords(picked)
    patches = extract_patches(source.cube, coords, config.patch)
    if config.augment:
        patches = augment_batch(patches, rng)
    labels = source.labels.ids.ravel()[picked] - 1
    coarse, fine = [], []
    if texts is not None:
        for c in labels:
            coarse.append(_seq(texts, int(c)))
            fine.extend(_seq(texts, int(r)) for r in texts.fine_rows(np.array([c])))
    return Batch(patches, labels, coarse, fine)


def _seq(texts: ClassTexts, row: int) -> tuple[int, ...]:
    return tuple(int(t) for t in texts.ids[row][texts.key_mask[row]])


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    """One bias-corrected Adam step with L2 decay folded into the gradient.

    Only parameters present in ``grads`` move; the step counter is shared.
    """
    if state.step < 0:
        raise ValueError("step counter must be >= 0")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {w.shape}")
        if weight_decay:
            g = g + weight_decay * w.data
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        w.data = w.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class LossReport:
    l_sd: float
    l_total: float
    l_coarse: float | None = None
    l_fine: float | None = None
    tau: float | None = None

    @property
    def l_ce(self) -> float:
        return self.l_sd


class TrainingError(RuntimeError):
    pass


def _alignment_terms(model: LDGModel, feats: Tensor, labels: np.ndarray, texts: ClassTexts, alpha: float):
    """(L_coarse, L_fine) tensors; a term whose weight is zero is None."""
    visual = imenc.project(model.params, feats)
    table = txtenc.encode_text(model.params, model.txt_config, texts.ids, texts.key_mask)
    scale = model.temperature.scale()
    l_coarse = l_fine = None
    if alpha < 1.0:
        coarse = table[texts.coarse_rows(labels)]
        l_coarse = losses.coarse_alignment(visual, labels, coarse, scale)
    if alpha > 0.0:
        fine = table[texts.fine_rows(labels)]
        l_fine = losses.fine_alignment(visual, labels, fine, scale)
    return l_coarse, l_fine


def train_step(
    model: LDGModel,
    batch: Batch,
    config: TrainConfig,
    state: AdamState,
    texts: ClassTexts | None = None,
) -> LossReport:
    lam, alpha = config.effective()
    if config.variant != "cls" and not model.has_text:
        raise ValueError(f"variant {config.variant!r} needs a model with a text encoder")
    trainable = model.trainable()
    for t in trainable.values():
        t.zero_grad()
    try:
        feats = imenc.backbone_forward(model.params, model.buffers, model.img_config, batch.patches, training=True)
        logits, _ = imenc.classify(model.params, feats)
        l_sd = losses.classification_loss_sd(logits, batch.labels)
        l_coarse = l_fine = None
        if config.variant != "cls" and texts is not None:
            if lam > 0:
                l_coarse, l_fine = _alignment_terms(model, feats, batch.labels, texts, alpha)
            else:
                with nd.no_grad():
                    l_coarse, l_fine = _alignment_terms(model, feats.detach(), batch.labels, texts, alpha)
        total = losses.total_loss(l_sd, l_coarse, l_fine, lam, alpha)
    except NonFiniteError as e:
        raise TrainingError(f"non-finite value in the forward pass: {e}") from e
    value = float(total.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    try:
        nd.backward(total)
    except NonFiniteError as e:
        raise TrainingError(f"non-finite gradient: {e}") from e
    grads = {k: t.grad for k, t in trainable.items() if t.grad is not None}
    adam_update(trainable, grads, state, config.lr, weight_decay=config.weight_decay)
    if model.temperature is not None:
        model.temperature.clamp()
    return LossReport(
        l_sd=float(l_sd.data),
        l_total=value,
        l_coarse=None if l_coarse is None else float(l_coarse.data),
        l_fine=None if l_fine is None else float(l_fine.data),
        tau=model.temperature.tau if model.temperature is not None else None,
    )


def init_model(config: TrainConfig, bands: int, metas: Sequence[ClassMeta], template: str):
    """Fresh model for ``config.variant`` plus the tokenised class texts."""
    img_config = ImageEncoderConfig(
        patch=config.patch, bands=bands, widths=tuple(config.widths), d_sem=config.d_sem,
        classes=len(metas),
    )
    if config.variant == "cls":
        return build_model(img_config, config.seed, normalize_input=config.normalize), None
    vocab = train_bpe(prompt_corpus(metas, template), config.bpe_merges)
    txt_config = TextEncoderConfig(
        layers=config.text_layers, width=config.text_width, heads=config.text_heads,
        vocab_size=vocab.size, d_sem=config.d_sem,
    )
    model = build_model(img_config, config.seed, txt_config, vocab, normalize_input=config.normalize)
    return model, class_texts(metas, template, vocab)


@dataclass
class FitResult:
    model: LDGModel
    val_metrics: Metrics
    best_epoch: int
    history: list[dict] = field(default_factory=list)


def fit(
    cube: HsiCube,
    labels: LabelRaster,
    metas: Sequence[ClassMeta],
    template: str,
    config: TrainConfig,
) -> FitResult:
    """Train on the source scene; keep the parameters with the best validation OA."""
    config.validate()
    if labels.num_classes > len(metas):
        raise ValueError(f"labels reference class {labels.num_classes} but only {len(metas)} classes are described")
    source = prepare_source(cube, labels, config)
    model, texts = init_model(config, cube.bands, metas, template)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    state = AdamState()
    val_cube, val_labels = source.cube, _subset_labels(labels, source.val_idx)
    best = _evaluate_prepared(model, val_cube, val_labels, config.eval_batch)
    best_state, best_epoch = model.snapshot(), 0
    history = [{"epoch": 0, "val_oa": best.oa}]
    steps = max(1, math.ceil(len(source.train_idx) / config.batch_size))
    for epoch in range(1, config.epochs + 1):
        reports = [train_step(model, build_batch(source, texts, config, rng), config, state, texts) for _ in range(steps)]
        val = _evaluate_prepared(model, val_cube, val_labels, config.eval_batch)
        history.append({
            "epoch": epoch,
            "val_oa": val.oa,
            "l_total": float(np.mean([r.l_total for r in reports])),
            "l_sd": float(np.mean([r.l_sd for r in reports])),
        })
        log.debug("epoch %d: loss %.4f val OA %.4f", epoch, history[-1]["l_total"], val.oa)
        if val.oa > best.oa:
            best, best_state, best_epoch = val, model.snapshot(), epoch
    model.restore(best_state)
    return FitResult(model, best, best_epoch, history)


def _subset_labels(labels: LabelRaster, flat: np.ndarray) -> LabelRaster:
    ids = np.zeros(labels.ids.size, dtype=np.int64)
    ids[flat] = labels.ids.ravel()[flat]
    return LabelRaster(ids.reshape(labels.ids.shape))


# ---------------------------------------------------------------------------
# evaluation (image encoder + Cls only)
# ---------------------------------------------------------------------------


def predict_patches(model: LDGModel, patches: np.ndarray) -> np.ndarray:
    with nd.no_grad():
        feats = imenc.backbone_forward(model.params, model.buffers, model.img_config, patches, training=False)
        logits, _ = imenc.classify(model.params, feats)
    return logits.data.argmax(axis=1)


def predict_coords(model: LDGModel, cube: HsiCube, coords: np.ndarray, batch: int = 256) -> np.ndarray:
    """0-based class predictions for (n, 2) pixel coordinates of a prepared cube."""
    out = np.empty(len(coords), dtype=np.int64)
    for start in range(0, len(coords), batch):
        chunk = coords[start : start + batch]
        out[start : start + len(chunk)] = predict_patches(model, extract_patches(cube, chunk, model.img_config.patch))
    return out


def prepare_cube(model: LDGModel, cube: HsiCube) -> HsiCube:
    if cube.bands != model.img_config.bands:
        raise ValueError(f"cube has {cube.bands} bands, model expects {model.img_config.bands}")
    return normalize(cube) if model.normalize_input else cube


def _evaluate_prepared(model: LDGModel, cube: HsiCube, labels: LabelRaster, batch: int = 256) -> Metrics:
    coords = labels.labeled_coords()
    pred = predict_coords(model, cube, coords, batch)
    true = labels.ids[coords[:, 0], coords[:, 1]] - 1
    return metrics_from_confusion(confusion_matrix(true, pred, model.img_config.classes))


def evaluate(model: LDGModel, cube: HsiCube, labels: LabelRaster, batch: int = 256) -> Metrics:
    """Target-domain metrics from eval-mode image-encoder + Cls predictions.
    Text-encoder parameters are never read."""
    if (cube.height, cube.width) != labels.ids.shape:
        raise ValueError("labels do not match the cube")
    return _evaluate_prepared(model, prepare_cube(model, cube), labels, batch)


def predict_map(model: LDGModel, cube: HsiCube, mask: np.ndarray | None = None, batch: int = 256) -> np.ndarray:
    """Per-pixel 1-based class map; pixels outside ``mask`` are 0."""
    cube = prepare_cube(model, cube)
    if mask is None:
        mask = np.ones((cube.height, cube.width), dtype=bool)
    coords = np.argwhere(mask)
    out = np.zeros((cube.height, cube.width), dtype=np.int64)
    out[coords[:, 0], coords[:, 1]] = predict_coords(model, cube, coords, batch) + 1
    return out


def export_features(model: LDGModel, cube: HsiCube, labels: LabelRaster, batch: int = 256) -> np.ndarray:
    """Rows of (row, col, label, projected feature...) for every labeled pixel."""
    if not model.has_proj:
        raise ValueError("model has no projection head (cls variant); nothing to export")
    cube = prepare_cube(model, cube)
    coords = labels.labeled_coords()
    rows = []
    with nd.no_grad():
        for start in range(0, len(coords), batch):
            chunk = coords[start : start + batch]
            patches = extract_patches(cube, chunk, model.img_config.patch)
            feats = imenc.backbone_forward(model.params, model.buffers, model.img_config, patches, training=False)
            rows.append(imenc.project(model.params, feats).data)
    feats = np.concatenate(rows) if rows else np.zeros((0, model.img_config.d_sem))
    lab = labels.ids[coords[:, 0], coords[:, 1]]
    return np.column_stack([coords, lab, feats])


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------


@dataclass
class GridRow:
    lr: float
    lam: float
    alpha: float
    val_oa: float


def grid_search(
    cube: HsiCube,
    labels: LabelRaster,
    metas: Sequence[ClassMeta],
    template: str,
    base: TrainConfig,
    grids: dict[str, Iterable[float]] | None = None,
    cartesian: bool = False,
) -> tuple[list[GridRow], TrainConfig]:
    """Select (lr, lam, alpha) by source validation OA.

    Coordinate-wise by default: sweep lr with lam/alpha at the base values,
    then lam at the best lr, then alpha.  Only grid cells are ever trained.
    Ties prefer smaller lr, lam, alpha.
    """
    grids = {k: tuple(v) for k, v in (grids or DEFAULT_GRIDS).items()}
    for k in ("lr", "lam", "alpha"):
        grids.setdefault(k, (getattr(base, k),))
        if not grids[k]:
            raise ValueError(f"grid {k!r} is empty")
    cache: dict[tuple[float, float, float], float] = {}

    def run(lr, lam, alpha):
        key = (lr, lam, alpha)
        if key not in cache:
            cfg = dataclasses.replace(base, lr=lr, lam=lam, alpha=alpha)
            cache[key] = fit(cube, labels, metas, template, cfg).val_metrics.oa
        return cache[key]

    def best_of(keys):
        return min(keys, key=lambda k: (-cache[k], k))

    if cartesian:
        for lr in grids["lr"]:
            for lam in grids["lam"]:
                for alpha in grids["alpha"]:
                    run(lr, lam, alpha)
    else:
        # untouched coordinates sit at the base value, or at the first grid
        # value when the base lies outside the grid
        cur = [getattr(base, k) if getattr(base, k) in grids[k] else grids[k][0] for k in ("lr", "lam", "alpha")]
        for pos, name in enumerate(("lr", "lam", "alpha")):
            keys = []
            for value in grids[name]:
                key = list(cur)
                key[pos] = value
                run(*key)
                keys.append(tuple(key))
            cur = list(best_of(keys))
    rows = [GridRow(lr, lam, alpha, oa) for (lr, lam, alpha), oa in cache.items()]
    lr, lam, alpha = best_of(cache.keys())
    return rows, dataclasses.replace(base, lr=lr, lam=lam, alpha=alpha)


@dataclass
class AblationRow:
    variant: str
    oa: float
    kappa: float
    val_oa: float


def ablate(
    source: tuple[HsiCube, LabelRaster],
    target: tuple[HsiCube, LabelRaster],
    metas: Sequence[ClassMeta],
    template: str,
    config: TrainConfig,
    variants: Sequence[str] = VARIANTS,
) -> list[AblationRow]:
    """Train each variant on the source with a shared seed; report target OA/kappa."""
    rows = []
    for variant in variants:
        cfg = dataclasses.replace(config, variant=variant)
        res = fit(source[0], source[1], metas, template, cfg)
        m = evaluate(res.model, target[0], target[1], config.eval_batch)
        rows.append(AblationRow(variant, m.oa, m.kappa, res.val_metrics.oa))
    return rows
