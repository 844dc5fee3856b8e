"""Deterministic two-modality toy dataset with a tunable modality gap.

Each identity is a smooth random template (two-tone body split, a few colour
blobs, a low-frequency stripe). VIS samples jitter, re-light and add noise to
the template; IR samples additionally go through a channel collapse towards a
luminance image plus a brightness offset, both scaled by ``modality_gap``.
Every record draws from its own seeded stream, so generation order does not
matter.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError
from .ndtensor import snapshot

VIS, IR = 0, 1
MODALITY_NAMES = {VIS: "VIS", IR: "IR"}
_STREAM_TEMPLATE, _STREAM_SAMPLE, _STREAM_MODALITY, _STREAM_SPLIT, _STREAM_CAMERA = range(5)


@dataclass
class SyntheticConfig:
    num_identities: int = 30
    samples_per_id_per_modality: int = 12
    image_hw: Tuple[int, int] = (64, 32)
    channels: int = 3
    num_cameras_per_modality: int = 2
    modality_gap: float = 0.6
    noise_sigma: float = 0.35
    max_shift: float = 0.12
    train_fraction: float = 2 / 3
    seed: int = 0

    def __post_init__(self):
        self.image_hw = tuple(int(v) for v in self.image_hw)

    def validate(self) -> "SyntheticConfig":
        if self.num_identities < 4:
            raise ConfigError("need at least 4 identities")
        if min(self.samples_per_id_per_modality, self.channels, self.num_cameras_per_modality) < 1:
            raise ConfigError("sample, channel and camera counts must be positive")
        if len(self.image_hw) != 2 or min(self.image_hw) < 4:
            raise ConfigError(f"degenerate image geometry {self.image_hw}")
        if self.modality_gap < 0 or self.noise_sigma < 0 or self.max_shift < 0:
            raise ConfigError("modality_gap, noise_sigma and max_shift must be >= 0")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d


@dataclass
class SampleRecord:
    image: np.ndarray  # C x H x W, float32
    identity: int
    modality: int
    camera: int
    index: int = 0


@dataclass
class DatasetIndex:
    """Training-side lookup: per identity, positions of its VIS and IR records."""

    records: List[SampleRecord]
    vis: Dict[int, List[int]]
    ir: Dict[int, List[int]]
    class_of: Dict[int, int]

    @classmethod
    def from_records(cls, records: Sequence[SampleRecord]) -> "DatasetIndex":
        records = list(records)
        vis: Dict[int, List[int]] = {}
        ir: Dict[int, List[int]] = {}
        for pos, r in enumerate(records):
            (vis if r.modality == VIS else ir).setdefault(r.identity, []).append(pos)
        ids = sorted(set(vis) | set(ir))
        missing = [i for i in ids if i not in vis or i not in ir]
        if missing:
            raise DataError(f"training identities {missing} lack one modality")
        return cls(records, vis, ir, {ident: k for k, ident in enumerate(ids)})

    @property
    def identities(self) -> List[int]:
        return sorted(self.class_of)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    train: List[SampleRecord]
    test: List[SampleRecord]
    train_ids: List[int] = field(default_factory=list)
    test_ids: List[int] = field(default_factory=list)

    @property
    def train_index(self) -> DatasetIndex:
        return DatasetIndex.from_records(self.train)


# ---------------------------------------------------------------- rendering


def _grid(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")


def identity_template(identity: int, cfg: SyntheticConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, _STREAM_TEMPLATE, identity])
    h, w = cfg.image_hw
    c = cfg.channels
    yy, xx = _grid(h, w)
    split = rng.uniform(0.35, 0.6)
    top, bottom = rng.uniform(0.1, 0.9, c), rng.uniform(0.1, 0.9, c)
    img = np.where(yy[None] < split, top[:, None, None], bottom[:, None, None])
    for _ in range(3):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        sigma = rng.uniform(0.08, 0.2)
        amp = rng.normal(0.0, 0.35, c)
        bump = np.exp(-((yy - cy) ** 2 + ((xx - cx) * w / h) ** 2) / (2 * sigma**2))
        img = img + amp[:, None, None] * bump[None]
    freq = rng.integers(1, 4)
    phase = rng.uniform(0, 2 * np.pi)
    stripe = np.sin(2 * np.pi * freq * yy + phase)
    img = img + rng.uniform(0, 0.25) * rng.uniform(0, 1, c)[:, None, None] * stripe[None]
    return img


def modality_transform(cfg: SyntheticConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Channel-mixing matrix and brightness offset for the IR rendering."""
    rng = np.random.default_rng([cfg.seed, _STREAM_MODALITY])
    lum = rng.uniform(0.2, 1.0, cfg.channels)
    lum /= lum.sum()
    collapse = np.tile(lum, (cfg.channels, 1))
    g = cfg.modality_gap
    mix = (1 - g) * np.eye(cfg.channels) + g * collapse
    offset = g * rng.uniform(0.15, 0.35) * np.ones(cfg.channels)
    return mix, offset


def camera_casts(cfg: SyntheticConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, _STREAM_CAMERA])
    return rng.normal(0.0, 0.04, (2, cfg.num_cameras_per_modality, cfg.channels))


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = img.shape[1:]
    p = max(abs(dy), abs(dx))
    if p == 0:
        return img
    padded = np.pad(img, ((0, 0), (p, p), (p, p)), mode="edge")
    return padded[:, p - dy:p - dy + h, p - dx:p - dx + w]


def render_sample(
    template: np.ndarray, identity: int, modality: int, k: int, cfg: SyntheticConfig
) -> SampleRecord:
    rng = np.random.default_rng([cfg.seed, _STREAM_SAMPLE, identity, modality, k])
    h, w = cfg.image_hw
    camera = k % cfg.num_cameras_per_modality
    span_h = int(round(cfg.max_shift * h))
    span_w = int(round(cfg.max_shift * w))
    dy = int(rng.integers(-span_h, span_h + 1))
    dx = int(rng.integers(-span_w, span_w + 1))
    img = _shift(template, dy, dx) * rng.uniform(0.85, 1.15)
    img = img + camera_casts(cfg)[modality, camera][:, None, None]
    if modality == IR:
        mix, offset = modality_transform(cfg)
        img = np.einsum("dc,chw->dhw", mix, img) + offset[:, None, None]
    img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return SampleRecord(img.astype(np.float32), identity, modality, camera)


def generate_dataset(cfg: SyntheticConfig) -> SyntheticDataset:
    """Render every identity in both modalities and split identities about 2:1."""
    cfg.validate()
    order = np.random.default_rng([cfg.seed, _STREAM_SPLIT]).permutation(cfg.num_identities)
    n_train = int(round(cfg.num_identities * cfg.train_fraction))
    n_train = min(max(n_train, 2), cfg.num_identities - 2)
    train_ids = sorted(int(i) for i in order[:n_train])
    test_ids = sorted(int(i) for i in order[n_train:])

    def render(ids):
        out = []
        for ident in ids:
            tpl = identity_template(ident, cfg)
            for modality in (VIS, IR):
                for k in range(cfg.samples_per_id_per_modality):
                    rec = render_sample(tpl, ident, modality, k, cfg)
                    rec.index = len(out)
                    out.append(rec)
        return out

    return SyntheticDataset(cfg, render(train_ids), render(test_ids), train_ids, test_ids)


def dataset_stats(pool: Sequence[SampleRecord]) -> dict:
    """Exact record counts by identity, modality, camera and (identity, modality)."""
    pool = list(pool)
    return {
        "total": len(pool),
        "per_identity": dict(sorted(Counter(r.identity for r in pool).items())),
        "per_modality": {MODALITY_NAMES[m]: sum(r.modality == m for r in pool) for m in (VIS, IR)},
        "per_camera": dict(sorted(Counter((MODALITY_NAMES[r.modality], r.camera) for r in pool).items())),
        "per_identity_modality": dict(
            sorted(Counter((r.identity, MODALITY_NAMES[r.modality]) for r in pool).items())
        ),
    }


def nearest_centroid_accuracy(
    fit: Sequence[SampleRecord], query: Sequence[SampleRecord]
) -> float:
    """Identity accuracy of a raw-pixel nearest-centroid classifier."""
    ids = sorted({r.identity for r in fit})
    cents = np.stack([np.mean([r.image.ravel() for r in fit if r.identity == i], axis=0) for i in ids])
    q = np.stack([r.image.ravel() for r in query])
    d = ((q[:, None, :] - cents[None]) ** 2).sum(-1)
    pred = np.asarray(ids)[d.argmin(axis=1)]
    return float(np.mean(pred == np.array([r.identity for r in query])))


# ------------------------------------------------------------------ on disk

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ["index", "split", "identity", "modality", "camera", "path"]


def write_dataset(ds: SyntheticDataset, root: Union[str, Path]) -> Path:
    """Write ``manifest.csv``, ``dataset.json`` and one tensor snapshot per record.

    Manifest columns: index, split (train|test), identity, modality (VIS|IR),
    camera, path (relative to ``root``).
    """
    root = Path(root)
    rows = []
    for split, pool in (("train", ds.train), ("test", ds.test)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for r in pool:
            rel = f"{split}/{r.index:05d}.ndts"
            snapshot.save(root / rel, r.image)
            rows.append([r.index, split, r.identity, MODALITY_NAMES[r.modality], r.camera, rel])
    with open(root / MANIFEST, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_FIELDS)
        wr.writerows(rows)
    meta = {"config": ds.config.to_dict(), "train_ids": ds.train_ids, "test_ids": ds.test_ids}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root / MANIFEST


def read_dataset(root: Union[str, Path]) -> SyntheticDataset:
    root = Path(root)
    if not (root / MANIFEST).exists():
        raise DataError(f"no {MANIFEST} under {root}")
    meta = json.loads((root / "dataset.json").read_text()) if (root / "dataset.json").exists() else {}
    cfg = SyntheticConfig(**meta["config"]) if "config" in meta else SyntheticConfig()
    names = {v: k for k, v in MODALITY_NAMES.items()}
    pools: Dict[str, List[SampleRecord]] = {"train": [], "test": []}
    with open(root / MANIFEST, newline="") as fh:
        for row in csv.DictReader(fh):
            img = snapshot.load(root / row["path"])
            rec = SampleRecord(
                img, int(row["identity"]), names[row["modality"]], int(row["camera"]), int(row["index"])
            )
            pools.setdefault(row["split"], []).append(rec)
    train_ids = sorted({r.identity for r in pools["train"]})
    test_ids = sorted({r.identity for r in pools["test"]})
    return SyntheticDataset(cfg, pools["train"], pools["test"], train_ids, test_ids)
