"""Deterministic paired-domain face imagery for cross-domain PAD experiments.

Target images are thermal-like: bonafide faces carry a warm radial core,
attacks are flat and cold, so the classes are far apart. Source images are
visible-like: identity albedo, random lighting and a stray highlight
dominate, and the classes differ only by a faint random-phase texture
(print halftone, screen moire, mask grain) plus a weak shading bump on live
faces. Every sample is a pure function of ``(seed, identity, index)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

CATEGORIES = ("disguise", "fake_face", "photo", "video")
SPLITS = ("train", "dev", "test")
DOMAINS = ("source", "target")
BONAFIDE, ATTACK = 1, 0

IMAGE_MAGIC = b"CDPI"
IMAGE_VERSION = 1
_HEADER = struct.Struct("<4sHII")


@dataclass
class SyntheticConfig:
    image_size: int = 32
    identities: dict[str, int] = field(default_factory=lambda: {"train": 12, "dev": 6, "test": 8})
    samples_per_identity: int = 40
    bonafide_fraction: float = 0.5
    category_mix: dict[str, float] = field(default_factory=lambda: {c: 0.25 for c in CATEGORIES})
    source_margin: float = 0.06
    source_shading: float = 0.075
    target_margin: float = 0.2
    noise: float = 0.03
    highlight: float = 0.25
    seed: int = 7

    def __post_init__(self):
        unknown = set(self.identities) - set(SPLITS)
        if unknown:
            raise ConfigError(f"unknown splits {sorted(unknown)}")
        if sum(self.identities.get(s, 0) for s in SPLITS) < 3 or any(self.identities.get(s, 0) < 1 for s in SPLITS):
            raise ConfigError("need at least one identity in each of train/dev/test")
        if set(self.category_mix) - set(CATEGORIES):
            raise ConfigError(f"unknown attack categories {sorted(set(self.category_mix) - set(CATEGORIES))}")
        total = sum(self.category_mix.values())
        if total <= 0 or min(self.category_mix.values()) < 0:
            raise ConfigError("category mix must be non-negative with positive total")
        if not 0 < self.bonafide_fraction < 1:
            raise ConfigError("bonafide_fraction must lie in (0, 1)")
        if self.image_size < 8 or self.samples_per_identity < 1:
            raise ConfigError("image_size >= 8 and samples_per_identity >= 1 required")


# --------------------------------------------------------------------------
# rendering


@dataclass
class Identity:
    cx: float
    cy: float
    rx: float
    ry: float
    albedo: float
    skin_temp: float

    @classmethod
    def draw(cls, seed: int, identity: int, size: int) -> "Identity":
        rng = np.random.default_rng([seed, 1, identity])
        return cls(cx=size / 2 + rng.uniform(-1.5, 1.5), cy=size / 2 + rng.uniform(-1.5, 1.5),
                   rx=size * rng.uniform(0.28, 0.34), ry=size * rng.uniform(0.34, 0.40),
                   albedo=rng.uniform(0.4, 0.75), skin_temp=rng.uniform(-0.03, 0.03))


def _geometry(ident: Identity, size: int, rng: np.random.Generator):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx = ident.cx + rng.uniform(-2, 2)
    cy = ident.cy + rng.uniform(-2, 2)
    s = rng.uniform(0.95, 1.05)
    u = (xx - cx) / (ident.rx * s)
    v = (yy - cy) / (ident.ry * s)
    r2 = u * u + v * v
    mask = 1.0 / (1.0 + np.exp(-(1.0 - np.sqrt(r2)) / 0.06))
    core = np.exp(-r2 / 0.35) * mask
    eyes = sum(np.exp(-(((u - ex) / 0.14) ** 2 + ((v + 0.25) / 0.1) ** 2)) for ex in (-0.38, 0.38))
    mouth = np.exp(-((u / 0.3) ** 2 + ((v - 0.5) / 0.07) ** 2))
    return dict(xx=xx, yy=yy, u=u, v=v, mask=mask, core=core, eyes=eyes, mouth=mouth)


def _texture(category: str, g, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, random-phase texture that marks an attack in the visible domain."""
    xx, yy = g["xx"], g["yy"]
    th = rng.uniform(0, np.pi)
    a, b = np.cos(th), np.sin(th)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    if category == "photo":
        f = 2 * np.pi / rng.uniform(2.6, 3.2)
        return np.cos(f * (a * xx + b * yy) + p1) * np.cos(f * (-b * xx + a * yy) + p2) * 2.0
    if category == "video":
        f = 2 * np.pi / rng.uniform(2.2, 2.8)
        return np.cos(f * (a * xx + b * yy) + p1) * 1.4
    if category == "fake_face":
        grain = rng.standard_normal(xx.shape)
        grain = (grain + np.roll(grain, 1, 0) + np.roll(grain, 1, 1) + np.roll(grain, (1, 1), (0, 1))) / 2
        return grain * g["mask"]
    # disguise: textured occluder over the upper face
    band = 1.0 / (1.0 + np.exp((g["v"] + 0.05) / 0.08))
    f = 2 * np.pi / rng.uniform(2.4, 3.0)
    return np.cos(f * (a * xx + b * yy) + p1) * 1.6 * band


def _render_target(g, ident: Identity, label: int, category: str, cfg: SyntheticConfig, rng) -> np.ndarray:
    mask, core = g["mask"], g["core"]
    base_level = 0.24
    img = np.full(mask.shape, 0.08)
    if label == BONAFIDE:
        warm = core + 0.35 * mask
        img += mask * (base_level + ident.skin_temp) + cfg.target_margin * warm / warm.mean()
        img -= 0.05 * g["eyes"] * mask
    else:
        level = {"photo": 0.12, "video": 0.2, "fake_face": 0.18, "disguise": 0.22}[category]
        img += mask * (level + 0.3 * ident.skin_temp)
        if category == "disguise":
            band = 1.0 / (1.0 + np.exp((g["v"] + 0.05) / 0.08))
            img += 0.15 * core * (1.0 - band)
    img += rng.normal(0.0, cfg.noise, img.shape)
    return img


def _render_source(g, ident: Identity, label: int, category: str, cfg: SyntheticConfig, rng) -> np.ndarray:
    mask = g["mask"]
    xx, yy = g["xx"], g["yy"]
    size = mask.shape[0]
    bg = rng.uniform(0.3, 0.7) + rng.uniform(-0.1, 0.1) * (xx - size / 2) / size
    th = rng.uniform(0, 2 * np.pi)
    light = 1.0 + rng.uniform(0.0, 0.35) * (np.cos(th) * g["u"] + np.sin(th) * g["v"])
    face = ident.albedo * light * (1.0 - 0.45 * g["eyes"]) * (1.0 - 0.3 * g["mouth"])
    img = bg * (1.0 - mask) + face * mask
    hx, hy = rng.uniform(0, size, size=2)
    img += rng.uniform(0.0, cfg.highlight) * np.exp(-((xx - hx) ** 2 + (yy - hy) ** 2) / (2 * (0.22 * size) ** 2))
    if label == BONAFIDE:
        img += cfg.source_shading * (g["core"] - 0.5 * mask)
    else:
        img += cfg.source_margin * _texture(category, g, rng)
    img += rng.normal(0.0, cfg.noise, img.shape)
    return img


def render_sample(ident: Identity, label: int, category: str, domain: str, cfg: SyntheticConfig,
                  seed: int, identity: int, index: int) -> np.ndarray:
    """One (size, size, 1) float32 image in [0, 1]; source and target share geometry."""
    geo_rng = np.random.default_rng([seed, 2, identity, index])
    g = _geometry(ident, cfg.image_size, geo_rng)
    if domain == "target":
        img = _render_target(g, ident, label, category, cfg, np.random.default_rng([seed, 3, identity, index]))
    elif domain == "source":
        img = _render_source(g, ident, label, category, cfg, np.random.default_rng([seed, 4, identity, index]))
    else:
        raise ValueError(f"unknown domain {domain!r}")
    return np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]


# --------------------------------------------------------------------------
# datasets


@dataclass
class Split:
    source: np.ndarray
    target: np.ndarray
    labels: np.ndarray
    categories: list[str]
    identities: np.ndarray
    ids: list[str]

    def __len__(self):
        return len(self.labels)

    def images(self, domain: str) -> np.ndarray:
        return self.source if domain == "source" else self.target


@dataclass
class Dataset:
    config: SyntheticConfig
    splits: dict[str, Split]

    def manifest(self) -> dict:
        stats = {}
        for name, sp in self.splits.items():
            cats = {c: sp.categories.count(c) for c in CATEGORIES}
            stats[name] = {"samples": len(sp), "bonafide": int((sp.labels == BONAFIDE).sum()),
                           "attack": int((sp.labels == ATTACK).sum()), "categories": cats,
                           "identities": sorted(int(i) for i in set(sp.identities.tolist()))}
        return {"config": asdict(self.config), "splits": stats}


def allocate(counts_total: int, mix: dict[str, float]) -> dict[str, int]:
    """Largest-remainder allocation of ``counts_total`` attacks over categories."""
    total = sum(mix.values())
    cats = [c for c in CATEGORIES if c in mix]
    exact = {c: counts_total * mix[c] / total for c in cats}
    out = {c: int(np.floor(exact[c])) for c in cats}
    rest = counts_total - sum(out.values())
    for c in sorted(cats, key=lambda c: (-(exact[c] - out[c]), cats.index(c)))[:rest]:
        out[c] += 1
    return out


def generate_dataset(cfg: SyntheticConfig) -> Dataset:
    splits = {}
    next_identity = 0
    for si, split in enumerate(SPLITS):
        n_ids = cfg.identities[split]
        n = n_ids * cfg.samples_per_identity
        n_bona = int(round(n * cfg.bonafide_fraction))
        alloc = allocate(n - n_bona, cfg.category_mix)
        slots = [(BONAFIDE, "bonafide")] * n_bona
        for c in CATEGORIES:
            slots += [(ATTACK, c)] * alloc.get(c, 0)
        order = np.random.default_rng([cfg.seed, 5, si]).permutation(n)
        slots = [slots[i] for i in order]
        src, tgt, labels, cats, idents, ids = [], [], [], [], [], []
        for k in range(n_ids):
            identity = next_identity + k
            ident = Identity.draw(cfg.seed, identity, cfg.image_size)
            for j in range(cfg.samples_per_identity):
                label, cat = slots[k * cfg.samples_per_identity + j]
                src.append(render_sample(ident, label, cat, "source", cfg, cfg.seed, identity, j))
                tgt.append(render_sample(ident, label, cat, "target", cfg, cfg.seed, identity, j))
                labels.append(label)
                cats.append(cat)
                idents.append(identity)
                ids.append(f"{split}-{identity:04d}-{j:03d}")
        next_identity += n_ids
        splits[split] = Split(np.stack(src), np.stack(tgt), np.array(labels, dtype=np.int64), cats,
                              np.array(idents, dtype=np.int64), ids)
    return Dataset(cfg, splits)


# --------------------------------------------------------------------------
# on-disk format


def write_image(path: Path, img: np.ndarray) -> None:
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, h, w))
        f.write(np.ascontiguousarray(img[..., 0] if img.ndim == 3 else img, dtype="<f4").tobytes())


def read_image(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing image file {path}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, h, w = _HEADER.unpack_from(raw)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != IMAGE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) != _HEADER.size + 4 * h * w:
        raise FormatError(f"{path}: expected {h}x{w} pixels")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, 1).astype(np.float32)


def write_dataset(ds: Dataset, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for split, sp in ds.splits.items():
        d = root / "images" / split
        d.mkdir(parents=True, exist_ok=True)
        for i, sid in enumerate(sp.ids):
            files = {}
            for domain in DOMAINS:
                rel = f"images/{split}/{sid}_{domain}.bin"
                write_image(root / rel, sp.images(domain)[i])
                files[domain] = rel
            records.append({"id": sid, "split": split, "label": int(sp.labels[i]), "category": sp.categories[i],
                            "identity": int(sp.identities[i]), "files": files})
    manifest = ds.manifest()
    manifest["format_version"] = IMAGE_VERSION
    manifest["samples"] = records
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def read_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"no manifest.json under {root}") from exc
    if manifest.get("format_version") != IMAGE_VERSION:
        raise FormatError(f"unsupported dataset format {manifest.get('format_version')!r}")
    cfg = SyntheticConfig(**manifest["config"])
    grouped: dict[str, list] = {s: [] for s in SPLITS}
    for rec in manifest["samples"]:
        grouped[rec["split"]].append(rec)
    splits = {}
    for split, recs in grouped.items():
        splits[split] = Split(
            np.stack([read_image(root / r["files"]["source"]) for r in recs]),
            np.stack([read_image(root / r["files"]["target"]) for r in recs]),
            np.array([r["label"] for r in recs], dtype=np.int64), [r["category"] for r in recs],
            np.array([r["identity"] for r in recs], dtype=np.int64), [r["id"] for r in recs])
    return Dataset(cfg, splits)
