"""Cross-modality retrieval metrics, the per-camera trial protocol and distance analysis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .backbone import IR, VIS, DeenNet, load_checkpoint
from .errors import ConfigError, ContractError, DataError, DimensionError, ProtocolError
from .ndtensor import no_grad, ops, snapshot
from .synthdata import MODALITY_NAMES, SampleRecord

DIRECTIONS = {"ir_to_vis": (IR, VIS), "vis_to_ir": (VIS, IR)}
REPORT_RANKS = (1, 10, 20)
METRIC_COLUMNS = ["R-1", "R-10", "R-20", "mAP"]


@dataclass
class RankingResult:
    cmc: np.ndarray  # cmc[k-1] = rank-k accuracy
    map: float
    num_queries: int
    num_excluded: int = 0
    ap: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def rank(self, k: int) -> float:
        """Rank-k accuracy; ranks past the gallery size saturate at the last entry."""
        if k < 1:
            raise ContractError("ranks start at 1")
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def summary(self) -> Dict[str, float]:
        row = {f"R-{k}": self.rank(k) for k in REPORT_RANKS}
        row["mAP"] = float(self.map)
        return row

    def to_dict(self) -> dict:
        return {
            **self.summary(),
            "num_queries": self.num_queries,
            "num_excluded": self.num_excluded,
            "cmc": [float(v) for v in self.cmc],
        }


def rank_from_distances(
    dist: np.ndarray, query_ids: Sequence[int], gallery_ids: Sequence[int]
) -> RankingResult:
    """CMC and mAP from a (Nq, Ng) distance matrix.

    Gallery items are ordered by ascending distance, ties by ascending gallery
    index. Queries whose identity has no gallery item are skipped and counted
    in ``num_excluded``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q = np.asarray(query_ids)
    g = np.asarray(gallery_ids)
    if dist.shape != (len(q), len(g)):
        raise DimensionError(f"distance matrix {dist.shape} does not match {len(q)} queries x {len(g)} gallery")
    if len(g) == 0:
        raise ProtocolError("empty gallery")
    order = np.argsort(dist, axis=1, kind="stable")
    hits = g[order] == q[:, None]
    valid = hits.any(axis=1)
    hits = hits[valid]
    ng = len(g)
    if len(hits) == 0:
        return RankingResult(np.zeros(ng), 0.0, 0, int((~valid).sum()), np.zeros(0))
    first = hits.argmax(axis=1)
    cmc = (first[:, None] <= np.arange(ng)[None, :]).mean(axis=0)
    cum = np.cumsum(hits, axis=1)
    precision = cum / np.arange(1, ng + 1)
    # correctly rounded sums make AP independent of summation order
    ap = np.array([math.fsum(p[h]) / h.sum() for p, h in zip(precision, hits)])
    return RankingResult(cmc, math.fsum(ap) / len(ap), int(len(hits)), int((~valid).sum()), ap)


def normalized_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)

    qn, gn = unit(np.asarray(query, np.float64)), unit(np.asarray(gallery, np.float64))
    sq = (qn**2).sum(1)[:, None] + (gn**2).sum(1)[None, :] - 2.0 * qn @ gn.T
    return np.sqrt(np.maximum(sq, 0.0))


def rank_and_score(
    query: np.ndarray, gallery: np.ndarray, query_ids: Sequence[int], gallery_ids: Sequence[int]
) -> RankingResult:
    """Rank the gallery for each query by Euclidean distance between L2-normalized features."""
    query, gallery = np.asarray(query), np.asarray(gallery)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise DimensionError(f"feature shapes {query.shape} and {gallery.shape} are incompatible")
    return rank_from_distances(normalized_distances(query, gallery), query_ids, gallery_ids)


def average_results(results: Sequence[RankingResult]) -> RankingResult:
    if not results:
        raise ContractError("nothing to average")
    width = max(len(r.cmc) for r in results)
    # pad each CMC with its final value so galleries of different size line up
    cmcs = np.stack([np.concatenate([r.cmc, np.full(width - len(r.cmc), r.cmc[-1])]) for r in results])
    return RankingResult(
        np.array([math.fsum(col) / len(results) for col in cmcs.T]),
        math.fsum(r.map for r in results) / len(results),
        int(round(np.mean([r.num_queries for r in results]))),
        int(round(np.mean([r.num_excluded for r in results]))),
    )


# ------------------------------------------------------------ trial protocol


@dataclass
class FeatureTable:
    features: np.ndarray  # N x D
    identity: np.ndarray
    modality: np.ndarray
    camera: np.ndarray

    def __post_init__(self):
        n = len(self.features)
        if not len(self.identity) == len(self.modality) == len(self.camera) == n:
            raise DimensionError("feature rows and labels disagree in length")

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class TrialConfig:
    direction: str = "ir_to_vis"
    num_trials: int = 10
    seed: int = 0

    def validate(self) -> "TrialConfig":
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {sorted(DIRECTIONS)}, got {self.direction!r}")
        if self.num_trials < 1:
            raise ConfigError("num_trials must be >= 1")
        return self


@dataclass
class TrialReport:
    direction: str
    mean: RankingResult
    trials: List[RankingResult]
    galleries: List[np.ndarray]  # row positions into the feature table
    excluded_identities: List[int]

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "mean": self.mean.to_dict(),
            "trials": [t.to_dict() for t in self.trials],
            "excluded_identities": self.excluded_identities,
        }


def draw_gallery(table: FeatureTable, modality: int, rng: np.random.Generator) -> np.ndarray:
    """One random row per (identity, camera) among ``modality`` rows, sorted by row position."""
    rows = np.flatnonzero(table.modality == modality)
    keys = sorted({(int(table.identity[r]), int(table.camera[r])) for r in rows})
    picks = []
    for ident, cam in keys:
        cands = rows[(table.identity[rows] == ident) & (table.camera[rows] == cam)]
        picks.append(int(cands[rng.integers(len(cands))]))
    return np.array(sorted(picks), dtype=np.int64)


def llcm_trial_eval(table: FeatureTable, cfg: TrialConfig) -> TrialReport:
    """Repeat gallery sampling ``num_trials`` times and average the metrics.

    Queries are every row of the query-side modality; trial ``t`` draws its
    gallery from ``default_rng([seed, t])``.
    """
    cfg.validate()
    q_mod, g_mod = DIRECTIONS[cfg.direction]
    if not (np.any(table.modality == VIS) and np.any(table.modality == IR)):
        raise ProtocolError("trial evaluation needs both VIS and IR rows")
    q_rows = np.flatnonzero(table.modality == q_mod)
    g_ids = set(table.identity[table.modality == g_mod].tolist())
    excluded = sorted(set(table.identity[q_rows].tolist()) - g_ids)
    trials, galleries = [], []
    for t in range(cfg.num_trials):
        gal = draw_gallery(table, g_mod, np.random.default_rng([cfg.seed, t]))
        res = rank_and_score(
            table.features[q_rows], table.features[gal], table.identity[q_rows], table.identity[gal]
        )
        trials.append(res)
        galleries.append(gal)
    return TrialReport(cfg.direction, average_results(trials), trials, galleries, excluded)


# ------------------------------------------------------------ distance stats


@dataclass
class DistanceStats:
    intra: np.ndarray
    inter: np.ndarray

    @property
    def intra_mean(self) -> Optional[float]:
        return float(self.intra.mean()) if len(self.intra) else None

    @property
    def inter_mean(self) -> Optional[float]:
        return float(self.inter.mean()) if len(self.inter) else None

    @property
    def mean_gap(self) -> Optional[float]:
        if self.intra_mean is None or self.inter_mean is None:
            return None
        return self.inter_mean - self.intra_mean

    def summary(self) -> dict:
        return {
            "num_intra": int(len(self.intra)),
            "num_inter": int(len(self.inter)),
            "intra_mean": self.intra_mean,
            "inter_mean": self.inter_mean,
            "mean_gap": self.mean_gap,
        }


def distance_stats(features: np.ndarray, identity: Sequence[int], modality: Sequence[int]) -> DistanceStats:
    """Euclidean distances of every VIS-IR pair, split by same or different identity."""
    features = np.asarray(features, dtype=np.float64)
    identity, modality = np.asarray(identity), np.asarray(modality)
    v, n = np.flatnonzero(modality == VIS), np.flatnonzero(modality == IR)
    if len(v) == 0 or len(n) == 0:
        raise ProtocolError("distance analysis compares VIS with IR features; one modality is missing")
    diff = features[v][:, None, :] - features[n][None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    same = identity[v][:, None] == identity[n][None, :]
    return DistanceStats(d[same], d[~same])


# ---------------------------------------------------------------- features


def extract_features(
    model: Union[DeenNet, str, Path], pool: Sequence[SampleRecord], batch_size: int = 64
) -> FeatureTable:
    """Post-BN, L2-normalized eval-mode embeddings, one row per record in pool order."""
    if not isinstance(model, DeenNet):
        model = load_checkpoint(model)
    pool = list(pool)
    if not pool:
        raise DataError("empty pool")
    cfg = model.config
    want = (cfg.in_channels,) + tuple(cfg.input_hw)
    for r in pool:
        if r.image.shape != want:
            raise ConfigError(f"record {r.index} has geometry {r.image.shape}, model expects {want}")
    empty = np.zeros((0,) + want, dtype=model.dtype)
    feats = np.zeros((len(pool), cfg.embed_dim), dtype=np.float64)
    with no_grad():
        for m in (VIS, IR):
            rows = [k for k, r in enumerate(pool) if r.modality == m]
            for s in range(0, len(rows), batch_size):
                chunk = rows[s:s + batch_size]
                imgs = np.stack([pool[k].image for k in chunk])
                args = (imgs, empty) if m == VIS else (empty, imgs)
                out = model.forward(*args, mode="eval")
                feats[chunk] = ops.l2_normalize(out.pooled_post_bn, axis=1).data
    return FeatureTable(
        feats,
        np.array([r.identity for r in pool]),
        np.array([r.modality for r in pool]),
        np.array([r.camera for r in pool]),
    )


# ------------------------------------------------------------------ output


def write_results(reports: Sequence[TrialReport], out_dir: Union[str, Path], stem: str = "metrics") -> None:
    """``{stem}.json`` with per-trial and averaged results, ``{stem}.csv`` with one row per direction."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {r.direction: r.to_dict() for r in reports}
    (out_dir / f"{stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["direction"] + METRIC_COLUMNS)
        for r in reports:
            s = r.mean.summary()
            wr.writerow([r.direction] + [repr(s[c]) for c in METRIC_COLUMNS])


def write_distance_stats(stats: DistanceStats, out_dir: Union[str, Path]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "distances.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["kind", "distance"])
        wr.writerows(("intra", repr(float(d))) for d in stats.intra)
        wr.writerows(("inter", repr(float(d))) for d in stats.inter)
    (out_dir / "distance_summary.json").write_text(json.dumps(stats.summary(), indent=2, sort_keys=True) + "\n")


def save_features(table: FeatureTable, path: Union[str, Path]) -> None:
    """Feature snapshot plus a ``.labels.csv`` sidecar (identity, modality, camera per row)."""
    path = Path(path)
    snapshot.save(path, table.features)
    with open(path.with_suffix(".labels.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["identity", "modality", "camera"])
        for i, m, c in zip(table.identity, table.modality, table.camera):
            wr.writerow([int(i), MODALITY_NAMES[int(m)], int(c)])


def load_features(path: Union[str, Path]) -> FeatureTable:
    path = Path(path)
    feats = snapshot.load(path)
    names = {v: k for k, v in MODALITY_NAMES.items()}
    ident, mod, cam = [], [], []
    with open(path.with_suffix(".labels.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            ident.append(int(row["identity"]))
            mod.append(names[row["modality"]])
            cam.append(int(row["camera"]))
    return FeatureTable(np.asarray(feats, np.float64), np.array(ident), np.array(mod), np.array(cam))
