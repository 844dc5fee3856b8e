"""Training objectives: cross entropy, batch-hard triplet, CPM and orthogonal losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import IR, VIS, ForwardBundle
from .errors import ContractError, ProtocolError
from .ndtensor import Tensor, ops


@dataclass
class LossWeights:
    lambda1: float = 0.8  # CPM
    lambda2: float = 0.1  # orthogonal
    alpha: float = 0.2  # CPM margin
    triplet_margin: float = 0.3
    cpm_hard_negative: bool = False
    orthogonal_mode: str = "squared_cosine"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.alpha, self.triplet_margin) < 0:
            raise ContractError("loss weights and margins must be non-negative")
        if self.orthogonal_mode not in ("squared_cosine", "literal"):
            raise ContractError(f"unknown orthogonal mode {self.orthogonal_mode!r}")


@dataclass
class CenterSet:
    """Batch-local class centers.

    ``original[m]`` is a (J, D) tensor of modality-``m`` centers of the original
    embeddings; ``generated[m][i]`` holds the branch-``i`` centers of embeddings
    generated from modality ``m``. Row ``j`` of every tensor belongs to
    ``identities[j]``.
    """

    identities: np.ndarray
    original: Dict[int, Tensor]
    generated: Dict[int, List[Tensor]]
    excluded: List[int] = field(default_factory=list)

    @property
    def num_branches(self) -> int:
        return len(self.generated.get(VIS, []))


def _mean_rows(x: Tensor, groups: Sequence[np.ndarray]) -> Tensor:
    # averaging matrix keeps the gradient split as 1/n per member
    avg = np.zeros((len(groups), x.shape[0]), dtype=x.dtype)
    for r, members in enumerate(groups):
        avg[r, members] = 1.0 / len(members)
    return ops.matmul(Tensor._wrap(avg), x)


def class_centers(
    pooled: Tensor,
    identity: Sequence[int],
    modality: Sequence[int],
    branch: Optional[Sequence[int]] = None,
) -> CenterSet:
    """Per-identity, per-modality, per-branch means of ``pooled`` rows.

    Identities missing a modality (or a generated branch of one) are dropped and
    listed in ``excluded`` with a warning.
    """
    identity = np.asarray(identity)
    modality = np.asarray(modality)
    branch = np.zeros_like(identity) if branch is None else np.asarray(branch)
    if pooled.shape[0] < 1 or pooled.shape[0] != len(identity):
        raise ContractError("class_centers needs one label per embedding row")
    num_branches = int(branch.max())
    ids, excluded = [], []
    for j in np.unique(identity):
        ok = all(
            np.any((identity == j) & (modality == m) & (branch == b))
            for m in (VIS, IR)
            for b in range(num_branches + 1)
        )
        (ids if ok else excluded).append(int(j))
    if excluded:
        warnings.warn(f"identities {excluded} lack a modality or branch and were excluded from centers")
    ids = np.asarray(ids, dtype=np.int64)

    def centers(m: int, b: int) -> Tensor:
        groups = [np.flatnonzero((identity == j) & (modality == m) & (branch == b)) for j in ids]
        return _mean_rows(pooled, groups)

    original = {m: centers(m, 0) for m in (VIS, IR)}
    generated = {m: [centers(m, b) for b in range(1, num_branches + 1)] for m in (VIS, IR)}
    return CenterSet(ids, original, generated, excluded)


def _cpm_direction(
    src: Tensor, other: Tensor, gen: Sequence[Tensor], alpha: float, hard_negative: bool
) -> Tensor:
    """Mean over (branch i, identity j, identity k != j) of
    ``[D(other_j, gen_ij) - D(src_j, gen_ij) - D(src_j, src_k) + alpha]_+``."""
    j = src.shape[0]
    off = ~np.eye(j, dtype=bool)
    inter = ops.pairwise_distance(src, src)
    terms = []
    for g in gen:
        pull = ops.euclidean_distance(other, g)
        push = ops.euclidean_distance(src, g)
        base = ops.sub(pull, push)  # (J,)
        if hard_negative:
            masked = np.where(off, inter.data, np.inf)
            k = masked.argmin(axis=1)
            neg = ops.index(inter, (np.arange(j), k))
            terms.append(ops.relu(ops.shift(ops.sub(base, neg), alpha)))
        else:
            rows, cols = np.nonzero(off)
            b = ops.index(base, rows)
            neg = ops.index(inter, (rows, cols))
            terms.append(ops.relu(ops.shift(ops.sub(b, neg), alpha)))
    return ops.mean(ops.concat(terms, axis=0))


def cpm_loss(centers: CenterSet, alpha: float = 0.2, hard_negative: bool = False) -> Tensor:
    """Center-guided pair mining loss: VIS-generated term plus IR-generated term."""
    if len(centers.identities) < 2:
        raise ProtocolError("CPM needs at least 2 identities with both modalities")
    if centers.num_branches < 1:
        raise ProtocolError("CPM needs generated embeddings (no DEE branches found)")
    cv, cn = centers.original[VIS], centers.original[IR]
    vis_term = _cpm_direction(cv, cn, centers.generated[VIS], alpha, hard_negative)
    ir_term = _cpm_direction(cn, cv, centers.generated[IR], alpha, hard_negative)
    return ops.add(vis_term, ir_term)


def cpm_direction_loss(centers: CenterSet, source: int, alpha: float = 0.2, hard_negative: bool = False) -> Tensor:
    """One direction of :func:`cpm_loss`: generated from ``source`` (VIS or IR)."""
    other = IR if source == VIS else VIS
    return _cpm_direction(
        centers.original[source], centers.original[other], centers.generated[source], alpha, hard_negative
    )


def cpm_loss_samplewise(
    f_v: Tensor,
    f_n: Tensor,
    f_v_gen: Sequence[Tensor],
    labels: Sequence[int],
    alpha: float = 0.0,
    f_n_gen: Optional[Sequence[Tensor]] = None,
) -> Tensor:
    """Sample-level form on raw embeddings (no centers, no margin by default).

    Row ``r`` of ``f_v``, ``f_n`` and every ``f_v_gen[i]`` belongs to identity
    ``labels[r]``, one row per identity; the hinge is averaged over all valid
    (branch, j, k != j) triples. Passing ``f_n_gen`` adds the mirrored term for
    embeddings generated from IR.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) != len(labels):
        raise ContractError("sample-wise CPM expects exactly one row per identity")
    if len(labels) < 2:
        raise ProtocolError("CPM needs at least 2 identities")
    if not f_v_gen:
        raise ProtocolError("CPM needs at least one generated branch")
    loss = _cpm_direction(f_v, f_n, f_v_gen, alpha, hard_negative=False)
    if f_n_gen is not None:
        loss = ops.add(loss, _cpm_direction(f_n, f_v, f_n_gen, alpha, hard_negative=False))
    return loss


def branch_groups(bundle_or_pooled, branch: Optional[Sequence[int]] = None) -> List[Tensor]:
    """Generated embeddings split per branch: list of B tensors, row r = copy of original sample r."""
    if isinstance(bundle_or_pooled, ForwardBundle):
        pooled, branch = bundle_or_pooled.pooled_pre_bn, bundle_or_pooled.branch_of_sample
    else:
        pooled = bundle_or_pooled
    branch = np.asarray(branch)
    return [ops.index(pooled, np.flatnonzero(branch == b)) for b in range(1, int(branch.max()) + 1)]


def orthogonal_loss(groups: Sequence[Tensor], mode: str = "squared_cosine") -> Tensor:
    """Pairwise branch overlap averaged over original samples.

    ``squared_cosine``: sum over branch pairs of the squared cosine similarity
    (zero-norm vectors count as orthogonal). ``literal``: sum over pairs of the
    raw inner products.
    """
    if len(groups) < 2:
        raise ProtocolError("orthogonal loss needs at least 2 branches")
    if mode == "squared_cosine":
        vecs = [ops.l2_normalize(g, axis=1) for g in groups]
    elif mode == "literal":
        vecs = list(groups)
    else:
        raise ContractError(f"unknown orthogonal mode {mode!r}")
    pair_terms = []
    for m in range(len(vecs)):
        for n in range(m + 1, len(vecs)):
            d = ops.sum(ops.mul(vecs[m], vecs[n]), axis=1)
            pair_terms.append(ops.square(d) if mode == "squared_cosine" else d)
    total = pair_terms[0]
    for t in pair_terms[1:]:
        total = ops.add(total, t)
    return ops.mean(total)


def batch_hard_triplet(pooled: Tensor, labels: Sequence[int], margin: float = 0.3) -> Tensor:
    """Mean over anchors of ``[max positive distance - min negative distance + margin]_+``."""
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise ProtocolError("batch-hard triplet needs at least 2 identities")
    if counts.min() < 2:
        raise ProtocolError("batch-hard triplet needs at least 2 samples per identity")
    n = len(labels)
    dist = ops.pairwise_distance(pooled, pooled)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    d = dist.data
    hardest_pos = np.where(pos_mask, d, -np.inf).argmax(axis=1)
    hardest_neg = np.where(~same, d, np.inf).argmin(axis=1)
    rows = np.arange(n)
    ap = ops.index(dist, (rows, hardest_pos))
    an = ops.index(dist, (rows, hardest_neg))
    return ops.mean(ops.relu(ops.shift(ops.sub(ap, an), margin)))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels)
    n, k = logits.shape
    if len(labels) != n:
        raise ContractError("one label per logit row required")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in 0..{k - 1}")
    logp = ops.log_softmax(logits, axis=1)
    return ops.scale(ops.mean(ops.index(logp, (np.arange(n), labels))), -1.0)


@dataclass
class LossBreakdown:
    ce: float
    tri: float
    cpm: float
    ort: float
    total: float
    weighted: Dict[str, float]


def total_loss(bundle: ForwardBundle, weights: LossWeights) -> Tuple[Tensor, LossBreakdown]:
    """``ce + tri + lambda1 * cpm + lambda2 * ort`` for one training forward pass.

    CE and triplet see every sample (originals and generated copies under their
    source labels). CPM and orthogonal terms are only formed when the bundle
    carries DEE branches and their weight is positive.
    """
    labels = bundle.identity_of_sample
    ce = cross_entropy(bundle.logits, labels)
    tri = batch_hard_triplet(bundle.pooled_pre_bn, labels, weights.triplet_margin)
    total = ops.add(ce, tri)
    weighted = {"ce": ce.item(), "tri": tri.item(), "cpm": 0.0, "ort": 0.0}
    cpm_val = ort_val = 0.0
    if bundle.num_branches and weights.lambda1 > 0:
        centers = class_centers(
            bundle.pooled_pre_bn, labels, bundle.modality_of_sample, bundle.branch_of_sample
        )
        cpm = cpm_loss(centers, weights.alpha, weights.cpm_hard_negative)
        cpm_val = cpm.item()
        term = ops.scale(cpm, weights.lambda1)
        weighted["cpm"] = term.item()
        total = ops.add(total, term)
    if bundle.num_branches >= 2 and weights.lambda2 > 0:
        ort = orthogonal_loss(branch_groups(bundle), weights.orthogonal_mode)
        ort_val = ort.item()
        term = ops.scale(ort, weights.lambda2)
        weighted["ort"] = term.item()
        total = ops.add(total, term)
    return total, LossBreakdown(weighted["ce"], weighted["tri"], cpm_val, ort_val, total.item(), weighted)
