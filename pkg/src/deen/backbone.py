"""Two-stream staged network with the DEE expansion module and MFA blocks.

Stage layout (NCHW): stage-0 is modality specific (one weight set per
modality), stages 1-4 are shared and halve the spatial size on entry. Each
stage is two conv3x3 + BN + ReLU blocks. After the last stage the map is
global-average pooled (pre-BN embedding), passed through a BN neck (post-BN
embedding) and a bias-free identity classifier.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError
from .ndtensor import Tensor, ops, snapshot

VIS, IR = 0, 1


@dataclass
class ModelConfig:
    stage_channels: Tuple[int, ...] = (8, 16, 32, 64, 128)
    input_hw: Tuple[int, int] = (64, 32)
    in_channels: int = 3
    num_identities: int = 20
    dee_stage: Optional[int] = 3
    dee_branches: int = 3
    mfa_stages: Tuple[int, ...] = (1, 2, 3)
    drop_stage4: bool = False
    reduction_ratio: int = 4
    mfa_zero_init: bool = False
    mfa_scaled: bool = False
    mfa_omega_gain: float = 0.01  # small output projections: MFA starts near identity
    dtype: str = "float32"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.mfa_stages = tuple(sorted({int(s) for s in self.mfa_stages}))
        if self.dee_stage is not None:
            self.dee_stage = int(self.dee_stage)

    @property
    def num_stages(self) -> int:
        return 4 if self.drop_stage4 else 5

    @property
    def embed_dim(self) -> int:
        return self.stage_channels[self.num_stages - 1]

    def stage_hw(self, s: int) -> Tuple[int, int]:
        h, w = self.input_hw
        for _ in range(s):
            h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        return h, w

    def validate(self) -> "ModelConfig":
        if len(self.stage_channels) != 5 or min(self.stage_channels) < 1:
            raise ConfigError(f"stage_channels needs 5 positive ints, got {self.stage_channels}")
        if min(self.input_hw) < 1 or self.in_channels < 1 or self.num_identities < 1:
            raise ConfigError("input geometry and identity count must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        last = self.num_stages - 1
        if self.dee_stage is not None:
            if not 0 <= self.dee_stage <= last:
                raise ConfigError(f"dee_stage {self.dee_stage} outside stages 0..{last}")
            if self.dee_branches < 2:
                raise ConfigError("DEE needs at least 2 branches")
            if self.stage_channels[self.dee_stage] % 4:
                raise ConfigError(
                    f"DEE stage width {self.stage_channels[self.dee_stage]} is not divisible by 4"
                )
        for s in self.mfa_stages:
            if not 0 <= s <= last:
                raise ConfigError(f"MFA stage {s} outside stages 0..{last}")
            if self.stage_channels[s] // self.reduction_ratio < 1:
                raise ConfigError(f"reduction ratio {self.reduction_ratio} leaves no channels at stage {s}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["input_hw"] = list(self.input_hw)
        d["mfa_stages"] = list(self.mfa_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class DeeModule:
    """Per branch: dilated 3x3 convs (dilation 1, 2, 3; C -> C/4) and a 1x1 conv (C/4 -> C)."""

    branches: List[Dict[str, Tensor]]

    @property
    def num_branches(self) -> int:
        return len(self.branches)


@dataclass
class MfaBlock:
    psi1_q: Tensor
    psi1_k: Tensor
    psi1_v: Tensor
    omega_c: Tensor
    psi2_q: Tensor
    psi2_k: Tensor
    psi2_v: Tensor
    omega_s: Tensor
    scaled: bool = False  # divide affinities by sqrt(contraction length)


@dataclass
class ForwardBundle:
    pooled_pre_bn: Tensor
    pooled_post_bn: Tensor
    logits: Tensor
    branch_of_sample: np.ndarray
    identity_of_sample: np.ndarray
    modality_of_sample: np.ndarray
    num_input: int
    num_branches: int
    attention: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


# ------------------------------------------------------------------ DEE


def dee_forward(f: Tensor, module: DeeModule) -> List[Tensor]:
    """Generated maps ``theta(relu(phi1(f) + phi2(f) + phi3(f)))``, one per branch."""
    c = f.shape[1]
    if c % 4:
        raise ConfigError(f"DEE input width {c} is not divisible by 4")
    outs = []
    for br in module.branches:
        acc = ops.conv2d(f, br["phi1"], padding=1, dilation=1)
        acc = ops.add(acc, ops.conv2d(f, br["phi2"], padding=2, dilation=2))
        acc = ops.add(acc, ops.conv2d(f, br["phi3"], padding=3, dilation=3))
        outs.append(ops.conv2d(ops.relu(acc), br["theta"]))
    return outs


def dee_expand_batch(
    f: Tensor, labels: Sequence[int], modalities: Sequence[int], module: DeeModule
) -> Tuple[Tensor, np.ndarray, np.ndarray, np.ndarray]:
    """Stack ``[original, branch 1, ..., branch B]`` along the sample axis."""
    generated = dee_forward(f, module)
    n = f.shape[0]
    reps = 1 + len(generated)
    out = ops.concat([f] + generated, axis=0)
    labels = np.tile(np.asarray(labels), reps)
    modalities = np.tile(np.asarray(modalities), reps)
    tags = np.repeat(np.arange(reps), n)
    return out, labels, modalities, tags


# ------------------------------------------------------------------ MFA


def mfa_forward(f_l: Tensor, f_h: Tensor, block: MfaBlock, return_maps: bool = False):
    """Channel-then-spatial aggregation of a low-level map into a high-level one.

    ``f_l`` is average-pooled to ``f_h``'s spatial size first. The channel
    affinity is ``softmax(q_c @ k_c^T)`` over key channels and the spatial
    affinity ``softmax(q_s^T @ k_s)`` over key positions; each path adds its
    projected aggregate back onto its input (residual), so zero output
    projections make the block an exact identity.
    """
    n, ch, hh, wh = f_h.shape
    hl, wl = f_l.shape[2:]
    if hl < hh or wl < wh:
        raise ConfigError(f"MFA low-level map {hl}x{wl} is smaller than high-level map {hh}x{wh}")
    if f_l.shape[0] != n:
        raise DimensionError(f"MFA batch sizes differ: {f_l.shape[0]} vs {n}")
    s = hh * wh
    pooled = ops.adaptive_avg_pool2d(f_l, (hh, wh))

    def tokens(x: Tensor) -> Tensor:
        return ops.reshape(x, (n, x.shape[1], s))

    q = tokens(ops.conv2d(f_h, block.psi1_q))
    k = tokens(ops.conv2d(pooled, block.psi1_k))
    v = tokens(ops.conv2d(pooled, block.psi1_v))
    aff_c = ops.matmul(q, ops.swap_last(k))
    if block.scaled:
        aff_c = ops.scale(aff_c, 1.0 / np.sqrt(s))
    m_c = ops.softmax(aff_c, axis=-1)
    agg = ops.reshape(ops.matmul(m_c, v), (n, -1, hh, wh))
    f_c = ops.add(ops.conv2d(agg, block.omega_c), f_h)

    q2 = tokens(ops.conv2d(f_c, block.psi2_q))
    k2 = tokens(ops.conv2d(pooled, block.psi2_k))
    v2 = tokens(ops.conv2d(pooled, block.psi2_v))
    aff_s = ops.matmul(ops.swap_last(q2), k2)
    if block.scaled:
        aff_s = ops.scale(aff_s, 1.0 / np.sqrt(q2.shape[1]))
    m_s = ops.softmax(aff_s, axis=-1)
    agg2 = ops.reshape(ops.matmul(v2, ops.swap_last(m_s)), (n, -1, hh, wh))
    f_s = ops.add(ops.conv2d(agg2, block.omega_s), f_c)
    if return_maps:
        return f_s, m_c.data, m_s.data
    return f_s


# -------------------------------------------------------------- network


class DeenNet:
    """Parameters, BN buffers and the forward pass for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.dtype = np.dtype(config.dtype)
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # -- construction

    def _param(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv(self, name: str, o: int, c: int, k: int, gain: float = 2.0) -> Tensor:
        std = np.sqrt(gain / (c * k * k))
        return self._param(name, self._rng.standard_normal((o, c, k, k)) * std)

    def _bn(self, name: str, c: int) -> None:
        self._param(f"{name}.weight", np.ones(c))
        self._param(f"{name}.bias", np.zeros(c))
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)

    def _stage_params(self, prefix: str, c_in: int, c_out: int) -> None:
        self._conv(f"{prefix}.conv1", c_out, c_in, 3)
        self._bn(f"{prefix}.bn1", c_out)
        self._conv(f"{prefix}.conv2", c_out, c_out, 3)
        self._bn(f"{prefix}.bn2", c_out)

    def _build(self) -> None:
        cfg = self.config
        ch = cfg.stage_channels
        self._stage_params("stage0.vis", cfg.in_channels, ch[0])
        self._stage_params("stage0.ir", cfg.in_channels, ch[0])
        for s in range(1, cfg.num_stages):
            self._stage_params(f"stage{s}", ch[s - 1], ch[s])

        self.mfa: Dict[int, MfaBlock] = {}
        for s in cfg.mfa_stages:
            c_h = ch[s]
            c_l = cfg.in_channels if s == 0 else ch[s - 1]
            cr = c_h // cfg.reduction_ratio
            p = f"mfa{s}"
            parts = {
                "psi1_q": self._conv(f"{p}.psi1_q", cr, c_h, 1, 1.0),
                "psi1_k": self._conv(f"{p}.psi1_k", cr, c_l, 1, 1.0),
                "psi1_v": self._conv(f"{p}.psi1_v", cr, c_l, 1, 1.0),
                "omega_c": self._conv(f"{p}.omega_c", c_h, cr, 1, cfg.mfa_omega_gain),
                "psi2_q": self._conv(f"{p}.psi2_q", cr, c_h, 1, 1.0),
                "psi2_k": self._conv(f"{p}.psi2_k", cr, c_l, 1, 1.0),
                "psi2_v": self._conv(f"{p}.psi2_v", cr, c_l, 1, 1.0),
                "omega_s": self._conv(f"{p}.omega_s", c_h, cr, 1, cfg.mfa_omega_gain),
            }
            if cfg.mfa_zero_init:
                parts["omega_c"].data[...] = 0
                parts["omega_s"].data[...] = 0
            self.mfa[s] = MfaBlock(**parts, scaled=cfg.mfa_scaled)

        self.dee: Optional[DeeModule] = None
        if cfg.dee_stage is not None:
            c = ch[cfg.dee_stage]
            branches = []
            for b in range(cfg.dee_branches):
                p = f"dee.branch{b}"
                branches.append(
                    {
                        "phi1": self._conv(f"{p}.phi1", c // 4, c, 3),
                        "phi2": self._conv(f"{p}.phi2", c // 4, c, 3),
                        "phi3": self._conv(f"{p}.phi3", c // 4, c, 3),
                        "theta": self._conv(f"{p}.theta", c, c // 4, 1),
                    }
                )
            self.dee = DeeModule(branches)

        self._bn("neck.bn", cfg.embed_dim)
        self._param(
            "classifier.weight",
            self._rng.standard_normal((cfg.embed_dim, cfg.num_identities)) * 1e-3,
        )

    # -- forward

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _bn_apply(self, x: Tensor, name: str, training: bool) -> Tensor:
        return ops.batchnorm2d(
            x,
            self.params[f"{name}.weight"],
            self.params[f"{name}.bias"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training,
            self.config.bn_momentum,
            self.config.bn_eps,
        )

    def _stage(self, s: int, prefix: str, x: Tensor, training: bool) -> Tensor:
        stride = 1 if s == 0 else 2
        x = ops.conv2d(x, self.params[f"{prefix}.conv1"], stride=stride, padding=1)
        x = ops.relu(self._bn_apply(x, f"{prefix}.bn1", training))
        x = ops.conv2d(x, self.params[f"{prefix}.conv2"], stride=1, padding=1)
        return ops.relu(self._bn_apply(x, f"{prefix}.bn2", training))

    def _as_input(self, x) -> Tensor:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        arr = arr.astype(self.dtype, copy=False)
        if arr.ndim != 4:
            raise DimensionError(f"expected an NCHW batch, got shape {arr.shape}")
        return Tensor._wrap(arr)

    def forward(
        self,
        vis_batch,
        ir_batch,
        vis_labels: Optional[Sequence[int]] = None,
        ir_labels: Optional[Sequence[int]] = None,
        mode: str = "train",
        keep_attention: bool = False,
    ) -> ForwardBundle:
        """Run both modality streams; samples are ordered VIS block then IR block.

        In train mode the DEE module (if configured) expands the batch to
        ``N * (1 + B)`` samples after ``dee_stage``; in eval mode only the
        original embeddings are produced.
        """
        if mode not in ("train", "eval"):
            raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        cfg = self.config
        vis, ir = self._as_input(vis_batch), self._as_input(ir_batch)
        nv, ni = vis.shape[0], ir.shape[0]
        if nv + ni == 0:
            raise ContractError("forward() got an empty batch")
        if nv and ni and vis.shape[1:] != ir.shape[1:]:
            raise DimensionError(f"VIS {vis.shape[1:]} and IR {ir.shape[1:]} geometry differ")
        geom = (vis if nv else ir).shape[1:]
        if geom != (cfg.in_channels,) + cfg.input_hw:
            raise ConfigError(f"input geometry {geom} != configured {(cfg.in_channels,) + cfg.input_hw}")

        labels = np.concatenate(
            [
                np.asarray(vis_labels if vis_labels is not None else np.full(nv, -1), dtype=np.int64),
                np.asarray(ir_labels if ir_labels is not None else np.full(ni, -1), dtype=np.int64),
            ]
        )
        modalities = np.concatenate([np.full(nv, VIS), np.full(ni, IR)]).astype(np.int64)
        tags = np.zeros(nv + ni, dtype=np.int64)

        streams, raw = [], []
        if nv:
            streams.append(self._stage(0, "stage0.vis", vis, training))
            raw.append(vis)
        if ni:
            streams.append(self._stage(0, "stage0.ir", ir, training))
            raw.append(ir)
        x = streams[0] if len(streams) == 1 else ops.concat(streams, axis=0)
        f_in = raw[0] if len(raw) == 1 else ops.concat(raw, axis=0)

        attention = {}
        branches = 0
        for s in range(cfg.num_stages):
            if s > 0:
                f_in = x
                x = self._stage(s, f"stage{s}", x, training)
            if s in self.mfa:
                if keep_attention:
                    x, m_c, m_s = mfa_forward(f_in, x, self.mfa[s], return_maps=True)
                    attention[s] = (m_c, m_s)
                else:
                    x = mfa_forward(f_in, x, self.mfa[s])
            if training and self.dee is not None and s == cfg.dee_stage:
                x, labels, modalities, tags = dee_expand_batch(x, labels, modalities, self.dee)
                branches = self.dee.num_branches

        pooled = ops.global_avg_pool(x)
        post = self._bn_apply(pooled, "neck.bn", training)
        logits = ops.linear(post, self.params["classifier.weight"])
        return ForwardBundle(
            pooled_pre_bn=pooled,
            pooled_post_bn=post,
            logits=logits,
            branch_of_sample=tags,
            identity_of_sample=labels,
            modality_of_sample=modalities,
            num_input=nv + ni,
            num_branches=branches,
            attention=attention,
        )

    __call__ = forward

    # -- state

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.params.items()}
        state.update(self.buffers)
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        missing = (set(self.params) | set(self.buffers)) - set(state)
        if missing:
            raise DataError(f"checkpoint is missing {sorted(missing)[:5]}")
        for k, t in self.params.items():
            if state[k].shape != t.shape:
                raise DataError(f"{k}: checkpoint shape {state[k].shape} != model {t.shape}")
            t.data = np.array(state[k], dtype=self.dtype)
        for k in self.buffers:
            self.buffers[k] = np.array(state[k], dtype=self.dtype)


# ----------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DEENCKPT"
CKPT_VERSION = 1


def checkpoint_bytes(model: DeenNet, extra: Optional[dict] = None) -> bytes:
    """Serialise a model to the checkpoint container.

    Layout: ``b"DEENCKPT"``, uint32 version, uint64 header length, a UTF-8 JSON
    header (sorted keys) with ``config``, ``extra`` and ``entries`` (name, kind,
    offset, length relative to the payload start), then the payload: one tensor
    snapshot (``ndtensor.snapshot`` format) per entry, back to back.
    """
    entries, blobs, offset = [], [], 0
    for kind, table in (("param", {k: v.data for k, v in model.params.items()}), ("buffer", model.buffers)):
        for name in table:
            blob = snapshot.to_bytes(table[name])
            entries.append({"name": name, "kind": kind, "offset": offset, "length": len(blob)})
            blobs.append(blob)
            offset += len(blob)
    header = json.dumps(
        {"config": model.config.to_dict(), "extra": extra or {}, "entries": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header + b"".join(blobs)


def save_checkpoint(path: Union[str, Path], model: DeenNet, extra: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def read_checkpoint(path: Union[str, Path]) -> Tuple[ModelConfig, Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    start = 20
    header = json.loads(buf[start:start + hlen])
    payload = start + hlen
    state = {}
    for e in header["entries"]:
        lo = payload + e["offset"]
        state[e["name"]] = snapshot.from_bytes(buf[lo:lo + e["length"]])
    return ModelConfig.from_dict(header["config"]), state, header.get("extra", {})


def load_checkpoint(path: Union[str, Path]) -> DeenNet:
    config, state, _ = read_checkpoint(path)
    model = DeenNet(config)
    model.load_state(state)
    return model
