"""Experiment configuration: one JSON file, validated before any run."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .alignment import AlignmentConfig
from .corpus import CorpusSpec
from .federation import FedConfig
from .model import ModelConfig
from .pruning import PruningConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    V: int = Field(64, ge=1)
    S: int = Field(64, ge=1)
    d_model: int = Field(64, ge=1)
    f: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    m: int = Field(16, ge=2)
    L_A: int = Field(3, ge=1)

    @model_validator(mode="after")
    def _shape(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.L_A >= self.m:
            raise ValueError("L_A must be smaller than m")
        return self


class PruningSection(_Strict):
    n: int = Field(2, ge=1)
    p: int = Field(3, ge=1)
    token_position: Literal["last", "mean"] = "last"
    calibration_samples: int = Field(256, ge=1)


class AlignmentSection(_Strict):
    alpha: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    E_p: int = Field(1, ge=0)
    E_r: int = Field(2, ge=0)
    r_interval: int = Field(5, ge=1)
    sample_count: int = Field(64, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    persist_optimizer: bool = True
    pre_align: bool = True


class FedSection(_Strict):
    N: int = Field(10, ge=1)
    I: int = Field(20, ge=1)
    H: int = Field(1, ge=1)
    mu: float = Field(0.01, ge=0)
    dirichlet_beta: float = Field(1.0, gt=0)
    mode: Literal["fedsoda", "full_lora", "no_realign", "align_every_round"] = "fedsoda"
    batch_size: int = Field(16, ge=1)
    max_local_steps: Optional[int] = Field(None, ge=1)
    parallel: bool = False
    workers: int = Field(4, ge=1)


class LoraSection(_Strict):
    r: int = Field(8, ge=1)
    alpha: float = Field(16.0, gt=0)
    sigma_A: float = Field(0.02, gt=0)
    targets: tuple[Literal["q", "k", "v", "o"], ...] = ("q", "v")


class OptimizerSection(_Strict):
    lr: float = Field(1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.95)


class PretrainSection(_Strict):
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(3e-3, gt=0)
    warmup: int = Field(50, ge=0)


class CorpusSection(_Strict):
    public: int = Field(3200, ge=1)
    public_eval: int = Field(256, ge=1)
    public_len: int = Field(32, ge=2)
    pretrain_tasks: int = Field(0, ge=0)
    private: int = Field(1000, ge=1)
    eval: int = Field(200, ge=1)
    public_family: Literal["pattern", "task"] = "pattern"


class QuantSection(_Strict):
    enabled: bool = True
    block_size: int = Field(64, ge=2)
    double_quant: bool = False


class PathsSection(_Strict):
    corpus_dir: Optional[str] = None
    output_dir: Optional[str] = None


class ExperimentConfig(_Strict):
    seed: int = 0
    model: ModelSection = ModelSection()
    corpus: CorpusSection = CorpusSection()
    pretrain: PretrainSection = PretrainSection()
    pruning: PruningSection = PruningSection()
    alignment: AlignmentSection = AlignmentSection()
    fed: FedSection = FedSection()
    lora: LoraSection = LoraSection()
    optimizer: OptimizerSection = OptimizerSection()
    quant: QuantSection = QuantSection()
    paths: PathsSection = PathsSection()

    @model_validator(mode="after")
    def _fit(self):
        L_E = self.model.m - self.model.L_A
        if self.pruning.n * self.pruning.p >= L_E:
            raise ValueError(f"n*p = {self.pruning.n * self.pruning.p} must be below the emulator size {L_E}")
        if 2 * self.lora.r > self.model.d_model:
            raise ValueError("LoRA rank must be at most d_model / 2")
        if self.corpus.public_len + 1 > self.model.S:
            raise ValueError("public sequences do not fit the context length")
        return self

    # -- conversions ----------------------------------------------------
    def to_model_config(self) -> ModelConfig:
        return ModelConfig(**self.model.model_dump())

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(seed=self.seed, **self.corpus.model_dump())

    def pruning_config(self) -> PruningConfig:
        return PruningConfig(self.pruning.n, self.pruning.p, self.pruning.token_position)

    def alignment_config(self) -> AlignmentConfig:
        d = self.alignment.model_dump()
        d.pop("pre_align")
        return AlignmentConfig(**d)

    def fed_config(self, mode: str | None = None) -> FedConfig:
        d = self.fed.model_dump()
        if mode is not None:
            d["mode"] = mode
        return FedConfig(seed=self.seed, lr=self.optimizer.lr, **d)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with some sections partially replaced, e.g. ``fed={"mode": "no_realign"}``."""
        data = self.model_dump()
        for key, val in sections.items():
            if isinstance(val, dict):
                data[key].update(val)
            else:
                data[key] = val
        return ExperimentConfig.model_validate(data)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


class ConfigError(ValueError):
    pass


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        return ExperimentConfig.model_validate_json(p.read_text())
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()
