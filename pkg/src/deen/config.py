"""Run configuration: a plain-text ``section.key = value`` file format, ablation
presets and the reproducibility record written into every run directory.

File format::

    # comments start with '#'; blank lines are ignored
    seed = 3
    data.modality_gap = 0.6
    model.mfa_stages = [1, 2, 3]
    model.dee_stage = null          # values are JSON literals
    train.epochs = 30
    loss.lambda1 = 0.8
    augment.flip_p = 0.5
    eval.direction = "both"

A value that is not valid JSON is taken as a bare string. Later lines win.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from .augment import AugmentConfig
from .backbone import ModelConfig
from .errors import ConfigError
from .losses import LossWeights
from .synthdata import SyntheticConfig
from .training import TrainConfig

ABLATIONS = ("baseline", "dee", "dee_cpm", "dee_ort", "dee_cpm_ort", "mfa", "full")
DIRECTION_CHOICES = ("ir_to_vis", "vis_to_ir", "both")


@dataclass
class EvalSettings:
    trials: int = 10
    direction: str = "both"
    seed: Optional[int] = None  # None: follow the run seed

    def validate(self) -> "EvalSettings":
        if self.trials < 1:
            raise ConfigError("eval.trials must be >= 1")
        if self.direction not in DIRECTION_CHOICES:
            raise ConfigError(f"eval.direction must be one of {DIRECTION_CHOICES}")
        return self

    @property
    def directions(self) -> Tuple[str, ...]:
        return ("ir_to_vis", "vis_to_ir") if self.direction == "both" else (self.direction,)


@dataclass
class RunConfig:
    seed: int = 0
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    ablation: Optional[str] = None

    # section name -> object holding its fields
    def _sections(self) -> Dict[str, Any]:
        return {
            "data": self.data,
            "model": self.model,
            "train": self.train,
            "loss": self.train.weights,
            "augment": self.train.augment,
            "eval": self.eval,
        }

    def set(self, key: str, value: Any) -> None:
        if key in ("seed", "ablation"):
            setattr(self, key, value)
            if key == "ablation" and value is not None:
                apply_ablation(self, value)
            return
        section, _, name = key.partition(".")
        target = self._sections().get(section)
        if target is None or not name:
            raise ConfigError(f"unknown config key {key!r}; sections are {sorted(self._sections())}")
        valid = {f.name for f in fields(target)} - {"weights", "augment"}
        if name not in valid:
            raise ConfigError(f"unknown key {name!r} in section {section!r}; known: {sorted(valid)}")
        setattr(target, name, value)
        if hasattr(target, "__post_init__"):
            try:
                target.__post_init__()  # re-normalise tuples, re-check loss weights
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key} = {value!r}: {exc}") from None

    def resolve(self) -> "RunConfig":
        """Propagate the run seed and check every section."""
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        self.train.seed = self.seed
        if self.eval.seed is None:
            self.eval.seed = self.seed
        self.train.augment.out_hw = tuple(self.model.input_hw)
        if tuple(self.data.image_hw) != tuple(self.model.input_hw):
            raise ConfigError(
                f"data.image_hw {tuple(self.data.image_hw)} differs from model.input_hw {tuple(self.model.input_hw)}"
            )
        if self.data.channels != self.model.in_channels:
            raise ConfigError("data.channels must equal model.in_channels")
        try:
            self.train.weights.__post_init__()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.data.validate()
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        return self

    def items(self) -> List[Tuple[str, Any]]:
        out: List[Tuple[str, Any]] = [("seed", self.seed), ("ablation", self.ablation)]
        for section, obj in self._sections().items():
            for f in fields(obj):
                v = getattr(obj, f.name)
                if is_dataclass(v):
                    continue
                out.append((f"{section}.{f.name}", _plain(v)))
        return out

    def dumps(self) -> str:
        lines = ["# resolved run configuration"]
        lines += [f"{k} = {json.dumps(v)}" for k, v in self.items()]
        return "\n".join(lines) + "\n"


def _plain(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


# ----------------------------------------------------------------- parsing


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignment(line: str) -> Tuple[str, Any]:
    if "=" not in line:
        raise ConfigError(f"expected 'key = value', got {line!r}")
    key, _, value = line.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"missing key in {line!r}")
    return key, parse_value(value)


def parse_config_text(text: str) -> List[Tuple[str, Any]]:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("#") else ""
        if not line:
            continue
        try:
            pairs.append(parse_assignment(line))
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return pairs


def load_config(path: Union[str, Path, None], overrides: Iterable[Tuple[str, Any]] = ()) -> RunConfig:
    cfg = RunConfig()
    pairs: List[Tuple[str, Any]] = []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        pairs += parse_config_text(p.read_text())
    pairs += list(overrides)
    # an ablation preset is applied first so explicit keys can refine it
    for key, value in pairs:
        if key == "ablation":
            cfg.set(key, value)
    for key, value in pairs:
        if key != "ablation":
            cfg.set(key, value)
    return cfg


# --------------------------------------------------------------- ablations


def apply_ablation(cfg: RunConfig, name: str) -> None:
    """Switch DEE, CPM, orthogonal loss and MFA on or off as one preset."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    defaults_m, defaults_w = ModelConfig(), LossWeights()
    dee = name.startswith("dee") or name == "full"
    cpm = name in ("dee_cpm", "dee_cpm_ort", "full")
    ort = name in ("dee_ort", "dee_cpm_ort", "full")
    mfa = name in ("mfa", "full")
    cfg.ablation = name
    cfg.model.dee_stage = (cfg.model.dee_stage if cfg.model.dee_stage is not None else defaults_m.dee_stage) if dee else None
    cfg.model.mfa_stages = (cfg.model.mfa_stages or defaults_m.mfa_stages) if mfa else ()
    w = cfg.train.weights
    w.lambda1 = (w.lambda1 or defaults_w.lambda1) if cpm else 0.0
    w.lambda2 = (w.lambda2 or defaults_w.lambda2) if ort else 0.0


# ------------------------------------------------------------ run records


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(config_text: str, files: Iterable[Path], root: Optional[Path] = None) -> str:
    """Tree-style digest over the resolved config and every input file (path + blob hash)."""
    entries = [f"config {git_blob_hash(config_text.encode())}"]
    for f in sorted(Path(p) for p in files):
        rel = f.relative_to(root).as_posix() if root is not None else f.as_posix()
        entries.append(f"{rel} {git_blob_hash(f.read_bytes())}")
    return hashlib.sha1("\n".join(entries).encode()).hexdigest()


def write_run_record(run_dir: Union[str, Path], cfg: RunConfig, command: str, inputs: Dict[str, str]) -> None:
    """``config.resolved`` plus ``run.json`` (command, seed, input hashes)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    text = cfg.dumps()
    (run_dir / "config.resolved").write_text(text)
    record = {"command": command, "seed": cfg.seed, "inputs": inputs, "config_hash": git_blob_hash(text.encode())}
    (run_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
