"""Phased cross-domain PAD training.

Phase 1 fits backbone + PAD head on target-domain images. Phase 2 freezes
both and trains only the subnet spliced into the source stream, so the
frozen classifier can only be satisfied by moving source features toward
what it learned on the target domain. Optional stages add a domain
classifier (IDR) and MMD/DIL/IDR regularizers to the adaptation objective.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import core
from .core import AdamState, ParamSet
from .dda import SourceStream, SubnetConfig, build_dda
from .errors import ConfigError, ShapeError, StageError
from .metrics import ScoreSet, error_rates
from .model import BackboneConfig, BackboneModel, Heads, build_backbone
from .regularizers import SOURCE, TARGET, KernelSpec, dil_loss_vjp, idr_loss_vjp, mmd_squared_vjp
from .synthdata import Split

log = logging.getLogger(__name__)

VARIANTS = ("none", "mmd", "dil", "idr")
FROZEN_PREFIXES = ("backbone.", "pad_head.")


@dataclass
class PhaseConfig:
    phase: str = "target"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    patience: int = 5
    variant: str = "none"
    weight: float = 1.0
    augment: bool = True
    seed: int = 7

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown regularizer variant {self.variant!r}")
        if self.weight < 0:
            raise ConfigError("regularizer weight must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and patience >= 1 required")


@dataclass
class TrainState:
    params: ParamSet
    backbone: BackboneModel
    heads: Heads
    stream: SourceStream
    backbone_config: BackboneConfig
    subnet_config: SubnetConfig
    seed: int
    stages: list[str] = field(default_factory=list)
    history: dict[str, list] = field(default_factory=dict)


def build_state(backbone_config: BackboneConfig | None = None, subnet_config: SubnetConfig | None = None,
                seed: int = 7, dtype=np.float32) -> TrainState:
    backbone_config = backbone_config or BackboneConfig()
    subnet_config = subnet_config or SubnetConfig()
    ps = ParamSet()
    backbone = build_backbone(backbone_config, seed=seed, dtype=dtype, params=ps)
    heads = Heads(backbone.embed_dim, ps, np.random.default_rng([seed, 1]), dtype)
    channels = backbone.tap_shape(subnet_config.tap)[-1]
    subnet = build_dda(subnet_config, channels, ps, seed=seed + 2, dtype=dtype)
    stream = SourceStream(backbone, subnet, subnet_config.tap)
    ps.set_trainable([])
    return TrainState(ps, backbone, heads, stream, backbone_config, subnet_config, seed)


# --------------------------------------------------------------------------
# data helpers


def augment(image: np.ndarray, rng: np.random.Generator, flip: bool | None = None,
            angle: float | None = None) -> np.ndarray:
    """Random horizontal flip (p=0.5) and rotation in [-10, 10] degrees.

    Rotation is bilinear about the image centre; uncovered pixels are 0.
    ``flip``/``angle`` force the corresponding choice.
    """
    if image.ndim != 3 or image.shape[-1] != 1:
        raise ShapeError(f"augment expects a single-channel (H, W, 1) image, got {image.shape}")
    if flip is None:
        flip = bool(rng.random() < 0.5)
    if angle is None:
        angle = float(rng.uniform(-10.0, 10.0))
    out = image[:, ::-1] if flip else image
    if angle != 0.0:
        out = ndimage.rotate(out[..., 0], angle, reshape=False, order=1, mode="constant", cval=0.0)[..., None]
    return np.ascontiguousarray(out, dtype=image.dtype)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(im, rng) for im in images])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _check_split(split: Split | None, what: str) -> Split:
    if split is None or len(split) == 0:
        raise StageError(f"{what} split is empty")
    return split


def check_label_overlap(source_labels: np.ndarray, target_labels: np.ndarray) -> None:
    """Adaptation needs every source label to also occur in the target label set."""
    missing = set(np.unique(source_labels).tolist()) - set(np.unique(target_labels).tolist())
    if missing:
        raise StageError(f"source labels {sorted(missing)} are absent from the target label set")


# --------------------------------------------------------------------------
# scoring


def _embed(fn, images: np.ndarray, batch: int = 256) -> np.ndarray:
    return np.concatenate([fn(images[i:i + batch])[0] for i in range(0, len(images), batch)])


def target_embeddings(state: TrainState, images: np.ndarray) -> np.ndarray:
    return _embed(lambda x: state.backbone.forward(x), images)


def source_embeddings(state: TrainState, images: np.ndarray, adapted: bool = True) -> np.ndarray:
    if adapted:
        return _embed(lambda x: state.stream.forward(x), images)
    return target_embeddings(state, images)


def pad_scores(state: TrainState, embeddings: np.ndarray) -> np.ndarray:
    z, _ = state.heads.logits(embeddings, "pad")
    return core.pointwise(z.astype(np.float64), "sigmoid")


def domain_probs(state: TrainState, embeddings: np.ndarray) -> np.ndarray:
    z, _ = state.heads.logits(embeddings, "domain")
    return core.pointwise(z.astype(np.float64), "sigmoid")


def score_split(state: TrainState, split: Split, domain: str, stream: str) -> ScoreSet:
    """PAD scores for ``split`` imagery of ``domain`` pushed through ``stream``.

    ``stream`` is ``target`` (plain backbone) or ``source`` (backbone with subnet).
    """
    images = split.images(domain)
    emb = source_embeddings(state, images) if stream == "source" else target_embeddings(state, images)
    return ScoreSet(pad_scores(state, emb), split.labels, list(split.categories), list(split.ids),
                    ["-"] * len(split))


def _dev_key(state: TrainState, split: Split, domain: str, stream: str) -> tuple[float, float]:
    s = score_split(state, split, domain, stream)
    acer = error_rates(s, 0.5)[2]
    loss = core.bce_loss(s.scores, s.labels)
    return acer, loss


def _dev_objective(state: TrainState, dev: Split, variant: str, lam: float,
                   dev_target: Split | None) -> tuple[float, float]:
    """(total dev objective, dev ACER) for regularized adaptation.

    Selecting on ACER alone would discard the regularizer's effect whenever it
    costs a little PAD accuracy, so regularized stages select on the same
    objective they optimize.
    """
    emb = source_embeddings(state, dev.source)
    scores = pad_scores(state, emb)
    acer = error_rates(ScoreSet(scores, dev.labels), 0.5)[2]
    total = core.bce_loss(scores, dev.labels)
    if variant == "idr":
        total += lam * idr_loss_vjp(domain_probs(state, emb), np.full(len(emb), SOURCE), "adapt")[0]
    elif variant in ("mmd", "dil"):
        et = target_embeddings(state, dev_target.target)
        if variant == "mmd":
            total += lam * mmd_squared_vjp(emb, et, KernelSpec())[0]
        else:
            total += lam * dil_loss_vjp(domain_probs(state, np.concatenate([emb, et])))[0]
    return float(total), acer


# --------------------------------------------------------------------------
# phases


def _snapshot(ps: ParamSet, prefixes) -> dict:
    return {k: v for k, v in ps.snapshot().items()
            if k.removeprefix("buffer:").startswith(tuple(prefixes))}


def train_target_phase(state: TrainState, train: Split, dev: Split, cfg: PhaseConfig) -> TrainState:
    """Fit backbone + PAD head on target images; keeps the best dev-ACER epoch."""
    train, dev = _check_split(train, "target train"), _check_split(dev, "target dev")
    ps = state.params
    prefixes = FROZEN_PREFIXES
    ps.set_trainable(prefixes)
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 11])
    hist = state.history.setdefault("target", [])
    best = _dev_key(state, dev, "target", "target") if cfg.epochs else None
    best_snap, best_epoch, bad = _snapshot(ps, prefixes), 0, 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            x = train.target[idx]
            if cfg.augment:
                x = augment_batch(x, rng)
            emb, back = state.backbone.forward(x, train=True)
            z, head_back = state.heads.logits(emb, "pad")
            loss, dz = core.bce_with_logits_vjp(z, train.labels[idx])
            back(head_back(dz()))
            core.adam_step(ps, adam)
            losses.append(loss)
        key = _dev_key(state, dev, "target", "target")
        hist.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "dev_acer": key[0], "dev_loss": key[1]})
        log.info("target epoch %d loss %.4f dev acer %.4f", epoch, np.mean(losses), key[0])
        if key < best:
            best, best_snap, best_epoch, bad = key, _snapshot(ps, prefixes), epoch, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    ps.restore(best_snap)
    ps.set_trainable([])
    state.history.setdefault("best_epoch", []).append({"phase": "target", "epoch": best_epoch})
    state.stages.append("target")
    return state


def _require(state: TrainState, stage: str, why: str) -> None:
    if stage not in state.stages:
        raise StageError(f"{why}: run the {stage!r} stage first")


def _adapt(state: TrainState, train: Split, dev: Split, cfg: PhaseConfig, target_train: Split | None,
           stage_name: str, dev_target: Split | None = None) -> TrainState:
    train, dev = _check_split(train, "source train"), _check_split(dev, "source dev")
    _require(state, "target", "adaptation needs a trained target classifier")
    if state.stream.subnet is None:
        raise StageError("no subnet inserted; nothing to adapt")
    if target_train is not None:
        check_label_overlap(train.labels, target_train.labels)
    variant, lam = cfg.variant, cfg.weight
    if variant == "idr":
        _require(state, "domain", "IDR needs a trained domain classifier")
    if variant in ("mmd", "dil") and target_train is None:
        raise StageError(f"{variant} needs target-domain batches")
    ps = state.params
    trainable = ["subnet."] + (["domain_head."] if variant == "dil" else [])
    ps.set_trainable(trainable)
    frozen = ps.checksum(FROZEN_PREFIXES)
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 21])
    trng = np.random.default_rng([cfg.seed, 22])
    hist = state.history.setdefault(stage_name, [])
    steps = state.history.setdefault(stage_name + "_steps", [])
    if variant == "none" or lam == 0:
        def dev_key():
            acer, loss = _dev_key(state, dev, "source", "source")
            return (acer, loss), acer, loss
    else:
        dev_t = dev_target if dev_target is not None else target_train

        def dev_key():
            total, acer = _dev_objective(state, dev, variant, lam, dev_t)
            return (total, acer), acer, total
    best = dev_key()[0]
    best_snap, best_epoch, bad = _snapshot(ps, trainable), 0, 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(train), cfg.batch_size, rng):
            x = train.source[idx]
            if cfg.augment:
                x = augment_batch(x, rng)
            emb, back = state.stream.forward(x, train=True)
            z, head_back = state.heads.logits(emb, "pad")
            cd_loss, dz = core.bce_with_logits_vjp(z, train.labels[idx])
            demb = head_back(dz())
            reg = 0.0
            if variant != "none":
                reg, dreg = _regularizer(state, variant, emb, target_train, trng, cfg, len(idx))
                demb = demb + (lam * dreg).astype(demb.dtype)
            back(demb)
            core.adam_step(ps, adam)
            if ps.checksum(FROZEN_PREFIXES) != frozen:
                raise StageError("frozen backbone/classifier parameters changed during adaptation")
            total = cd_loss + lam * reg
            steps.append({"epoch": epoch, "cdpad": cd_loss, "reg": reg, "weight": lam, "total": total})
            losses.append(total)
        key, acer, dev_loss = dev_key()
        hist.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "dev_acer": acer, "dev_loss": dev_loss})
        log.info("%s epoch %d loss %.4f dev acer %.4f", stage_name, epoch, np.mean(losses), acer)
        if key < best:
            best, best_snap, best_epoch, bad = key, _snapshot(ps, trainable), epoch, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    ps.restore(best_snap)
    ps.set_trainable([])
    state.history.setdefault("best_epoch", []).append({"phase": stage_name, "epoch": best_epoch})
    state.stages.append(stage_name)
    return state


def _regularizer(state, variant, emb, target_train, trng, cfg, n):
    """Regularizer value and its gradient with respect to the source embeddings."""
    if variant == "idr":
        z, dback = state.heads.logits(emb, "domain")
        p, sback = core.sigmoid_vjp(z.astype(np.float64))
        loss, dp = idr_loss_vjp(p, np.full(len(p), SOURCE), "adapt")
        return loss, dback(sback(dp()).astype(emb.dtype))
    idx = trng.choice(len(target_train), size=min(n, len(target_train)), replace=False)
    xt = target_train.target[idx]
    if cfg.augment:
        xt = augment_batch(xt, trng)
    et, _ = state.backbone.forward(xt)
    if variant == "mmd":
        loss, back = mmd_squared_vjp(emb, et, KernelSpec())
        return loss, back(1.0)[0]
    # dil: both domains toward 0.5; the domain head trains alongside the subnet
    both = np.concatenate([emb, et])
    z, dback = state.heads.logits(both, "domain")
    p, sback = core.sigmoid_vjp(z.astype(np.float64))
    loss, dp = dil_loss_vjp(p)
    return loss, dback(sback(dp()).astype(emb.dtype))[: len(emb)]


def adapt_source_phase(state: TrainState, train: Split, dev: Split, cfg: PhaseConfig,
                       target_train: Split | None = None) -> TrainState:
    """Train only the subnet on source images against the frozen target classifier."""
    cfg = PhaseConfig(**{**asdict(cfg), "variant": "none"})
    return _adapt(state, train, dev, cfg, target_train, "adapt")


def adapt_with_regularizer(state: TrainState, train: Split, dev: Split, cfg: PhaseConfig,
                           target_train: Split | None = None, dev_target: Split | None = None) -> TrainState:
    """Subnet training on CD-PAD BCE + weight * (MMD | DIL | inverted-label IDR).

    Regularized runs keep the epoch with the lowest dev objective; ``dev_target``
    supplies the target half of that objective for MMD/DIL (defaults to
    ``target_train``).
    """
    return _adapt(state, train, dev, cfg, target_train, f"adapt_{cfg.variant}", dev_target)


def train_domain_classifier(state: TrainState, source: Split, target: Split, cfg: PhaseConfig,
                            dev_source: Split | None = None, dev_target: Split | None = None) -> TrainState:
    """Fit the domain head to tell source-stream from target-stream embeddings.

    Embeddings are computed once (all other weights are frozen); the head is
    trained with correct domain labels (target = 1).
    """
    if source is None or target is None or len(source) == 0 or len(target) == 0:
        raise StageError("domain classifier needs samples from both domains")
    _require(state, "target", "domain classifier needs a trained backbone")
    ps = state.params
    ps.set_trainable(["domain_head."])
    frozen = ps.checksum(FROZEN_PREFIXES + ("subnet.",))
    es = source_embeddings(state, source.source)
    et = target_embeddings(state, target.target)
    emb = np.concatenate([es, et])
    dom = np.concatenate([np.full(len(es), SOURCE), np.full(len(et), TARGET)])
    dev = None
    if dev_source is not None and dev_target is not None:
        dev = (np.concatenate([source_embeddings(state, dev_source.source), target_embeddings(state, dev_target.target)]),
               np.concatenate([np.full(len(dev_source), SOURCE), np.full(len(dev_target), TARGET)]))
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 31])
    hist = state.history.setdefault("domain", [])
    prefixes = ("domain_head.",)
    best, best_snap, bad = None, _snapshot(ps, prefixes), 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in _batches(len(emb), cfg.batch_size, rng):
            z, back = state.heads.logits(emb[idx], "domain")
            loss, dz = core.bce_with_logits_vjp(z, dom[idx])
            back(dz())
            core.adam_step(ps, adam)
            losses.append(loss)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if dev is not None:
            p = domain_probs(state, dev[0])
            rec["dev_loss"] = idr_loss_vjp(p, dev[1], "classify")[0]
            rec["dev_accuracy"] = domain_accuracy(p, dev[1])
            key = rec["dev_loss"]
            if best is None or key < best:
                best, best_snap, bad = key, _snapshot(ps, prefixes), 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    hist.append(rec)
                    break
        hist.append(rec)
    if dev is not None:
        ps.restore(best_snap)
    if ps.checksum(FROZEN_PREFIXES + ("subnet.",)) != frozen:
        raise StageError("non-domain parameters changed while training the domain head")
    ps.set_trainable([])
    state.stages.append("domain")
    return state


def domain_accuracy(probs: np.ndarray, domains: np.ndarray) -> float:
    return float(np.mean((np.asarray(probs) > 0.5) == (np.asarray(domains) == TARGET)))
