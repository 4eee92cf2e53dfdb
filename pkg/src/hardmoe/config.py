"""Pipeline configuration.

A run is described by one YAML (or JSON) file. Unknown keys anywhere are
rejected so that typos surface as errors instead of silently falling back to
defaults. Example::

    workdir: runs/demo
    seed: 0
    synthetic:
      n_modes: 8
      examples_per_mode: 2500
    trunk:
      layer_dims: [32, 16, 16, 100]
      sgd: {base_lr: 0.05, max_epochs: 40, lr_decay_every: 15}
    experts:
      sgd: {base_lr: 0.5, max_epochs: 30}
    K: 8
    pca_dim: 16
    mode: independent
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import SyntheticSpec
from .errors import ConfigError
from .moe import INDEPENDENT, SHARED, derive_seed
from .neuralcore import SgdConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SgdSection(_Strict):
    minibatch_size: int = 256
    base_lr: float = 0.1
    momentum: Optional[float] = None
    weight_decay: float = 1e-4
    epoch_size: Optional[int] = None
    max_epochs: int = 30
    early_stop_patience: int = 5
    lr_decay_every: Optional[int] = None
    valid_samples: int = 10000

    def build(self, schedule: str) -> SgdConfig:
        kw = self.model_dump()
        if kw["momentum"] is None:
            kw.pop("momentum")
        try:
            return SgdConfig.trunk(**kw) if schedule == "trunk" else SgdConfig.expert(**kw)
        except ConfigError as exc:
            raise ConfigError(f"{schedule} sgd: {exc}") from exc


class TrunkSection(_Strict):
    layer_dims: list[int]
    sgd: SgdSection = SgdSection()


class ExpertSection(_Strict):
    layer_dims: Optional[list[int]] = None
    sgd: SgdSection = SgdSection(base_lr=0.1)


class DatasetPaths(_Strict):
    train: Optional[str] = None
    valid: Optional[str] = None
    test: Optional[str] = None
    transfer_train: Optional[str] = None
    transfer_test: Optional[str] = None


class TransferSection(_Strict):
    classes_per_mode: int = 4
    task_seed: int = 1
    train_per_mode: int = 500
    test_per_mode: int = 500


class SyntheticSection(_Strict):
    n_modes: int = 8
    examples_per_mode: int = 2500
    valid_per_mode: int = 300
    test_per_mode: int = 600
    feature_dim: int = 32
    n_tags: int = 100
    tags_per_mode: int = 25
    mean_tags: float = 2.0
    max_tags: int = 6
    concentration: float = 5.0
    noise: float = 0.15
    n_generic: Optional[int] = 10
    mode_scale: float = 2.0
    within_scale: float = 1.0
    affinity_rank: Optional[int] = 12
    transfer: Optional[TransferSection] = TransferSection()

    def spec(self) -> SyntheticSpec:
        kw = self.model_dump(exclude={"valid_per_mode", "test_per_mode", "transfer"})
        spec = SyntheticSpec(**kw)
        spec.validate()
        return spec


class EvalSection(_Strict):
    S: Optional[int] = Field(default=None, ge=1)
    ms: list[int] = [1, 5, 10]


class PipelineConfig(_Strict):
    workdir: str
    seed: int = 0
    dataset: DatasetPaths = DatasetPaths()
    synthetic: Optional[SyntheticSection] = None
    trunk: TrunkSection
    experts: ExpertSection = ExpertSection()
    K: int = Field(default=50, ge=1)
    pca_dim: int = Field(default=256, ge=1)
    pca_subsample: Optional[int] = Field(default=None, ge=2)
    kmeans_restarts: int = Field(default=4, ge=1)
    mode: Literal["independent", "shared"] = "independent"
    n_ensemble: Optional[int] = Field(default=None, ge=1)
    eval: EvalSection = EvalSection()
    probe_l2: float = Field(default=1e-4, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if len(self.trunk.layer_dims) < 3:
            raise ValueError("trunk.layer_dims needs at least one hidden layer")
        if self.experts.layer_dims is not None:
            e = self.experts.layer_dims
            if e[0] != self.trunk.layer_dims[0] or e[-1] != self.trunk.layer_dims[-1]:
                raise ValueError("experts.layer_dims must share the trunk's input and output sizes")
        if self.synthetic is not None:
            s = self.synthetic
            if s.feature_dim != self.trunk.layer_dims[0] or s.n_tags != self.trunk.layer_dims[-1]:
                raise ValueError("synthetic feature_dim/n_tags must match trunk.layer_dims ends")
        if self.pca_dim > self.trunk.layer_dims[-2]:
            raise ValueError(f"pca_dim={self.pca_dim} exceeds the trunk feature width "
                             f"{self.trunk.layer_dims[-2]}")
        return self

    @property
    def moe_mode(self) -> str:
        return SHARED if self.mode == "shared" else INDEPENDENT

    def trunk_sgd(self) -> SgdConfig:
        return self.trunk.sgd.build("trunk")

    def expert_sgd(self) -> SgdConfig:
        return self.experts.sgd.build("expert")

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def fingerprint(self, *sections: str) -> str:
        """Hash of the named top-level sections (all when none given)."""
        data = self.model_dump(mode="json")
        if sections:
            data = {k: data[k] for k in sections}
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def stage_seed(master: int, stage: str) -> int:
    """Per-stage seed from the master seed and a hash of the stage name."""
    key = int.from_bytes(hashlib.sha256(stage.encode("utf-8")).digest()[:4], "little")
    return derive_seed(master, key)


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def _resolve_paths(cfg: PipelineConfig, base: Path) -> PipelineConfig:
    def fix(p):
        return p if p is None or Path(p).is_absolute() else str(base / p)

    paths = DatasetPaths(**{k: fix(v) for k, v in cfg.dataset.model_dump().items()})
    return cfg.model_copy(update={"workdir": fix(cfg.workdir), "dataset": paths})


def parse_config(data, base_dir=None) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    try:
        cfg = PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    if base_dir is not None:
        cfg = _resolve_paths(cfg, Path(base_dir))
    if cfg.synthetic is not None:
        try:
            cfg.synthetic.spec()
        except (ConfigError, TypeError, ValueError) as exc:
            raise ConfigError(f"synthetic: {exc}") from None
    cfg.trunk_sgd()
    cfg.expert_sgd()
    return cfg


def load_config(path, seed: int | None = None) -> PipelineConfig:
    """Read a YAML/JSON config; relative ``workdir`` resolves against the file."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from None
    if isinstance(data, dict) and seed is not None:
        data = {**data, "seed": seed}
    return parse_config(data, base_dir=p.parent)
