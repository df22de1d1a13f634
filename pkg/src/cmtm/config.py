"""Run configuration: flat key=value files, env overrides, run-dir hashing."""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from cmtm.model import ModelConfig

ENV_PREFIX = "CMTM_"


@dataclass
class RunConfig:
    """Everything one training/decoding run depends on. Seed is mandatory."""

    # model
    layers: int = 2
    model_dim: int = 64
    ffn_dim: int = 256
    heads: int = 4
    max_target_len: int = 64
    dropout: float = 0.0
    review_mask_mode: str = "inclusive"
    init: str = "normal"
    init_scale: float = 0.02
    # data: either a synthetic task or file paths
    task: str = "copy"  # copy | reverse | toy_grammar | file
    train_size: int = 5000
    dev_size: int = 500
    max_len: int = 12  # max synthetic source length
    data_src: Optional[str] = None
    data_tgt: Optional[str] = None
    data_tsv: Optional[str] = None
    min_count: int = 1
    # training
    seed: Optional[int] = None
    steps: int = 3000
    batch_tokens: int = 1000
    warmup: int = 500
    peak_lr: float = 5e-4
    weight_dec: float = 1.0
    weight_len: float = 1.0
    weight_rev: float = 1.0
    mask_eos: bool = True
    sample_review_input: bool = False  # sample y_hat instead of argmax
    eval_interval: int = 200
    eval_size: int = 200
    eval_iterations: int = 4
    checkpoint_interval: int = 1000
    # decoding
    iterations: int = 4
    length_beam: int = 3
    remask_threshold: Optional[float] = None

    def validate(self) -> None:
        if self.seed is None:
            raise ValueError("seed required")
        if self.task not in ("copy", "reverse", "toy_grammar", "file"):
            raise ValueError(f"unknown task: {self.task!r}")
        if self.task == "file" and not (self.data_tsv or (self.data_src and self.data_tgt)):
            raise ValueError("task=file requires data_tsv or data_src+data_tgt")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            layers=self.layers,
            model_dim=self.model_dim,
            ffn_dim=self.ffn_dim,
            heads=self.heads,
            max_target_len=self.max_target_len,
            dropout=self.dropout,
            review_mask_mode=self.review_mask_mode,
            init=self.init,
            init_scale=self.init_scale,
        )

    def config_hash(self) -> str:
        """Hash of every field except the seed; run dirs are <hash>-s<seed>."""
        items = sorted((k, v) for k, v in asdict(self).items() if k != "seed")
        digest = hashlib.sha1(repr(items).encode()).hexdigest()
        return digest[:10]

    def run_dir_name(self) -> str:
        return f"{self.config_hash()}-s{self.seed}"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    ftype = _FIELD_TYPES[key]
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    if ftype == "int" or ftype == "Optional[int]":
        return int(raw)
    if ftype == "float" or ftype == "Optional[float]":
        return float(raw)
    return raw


def load_config(path: str | Path, env: dict | None = None) -> RunConfig:
    """Parse a flat key=value config file. Unknown keys are errors.

    Environment variables CMTM_<KEY> override file values.
    """
    cfg = RunConfig()
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{i + 1}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key: {key}")
        setattr(cfg, key, _parse_value(key, raw))
    env = os.environ if env is None else env
    for key in _FIELD_TYPES:
        var = ENV_PREFIX + key.upper()
        if var in env:
            setattr(cfg, key, _parse_value(key, env[var]))
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, path: str | Path) -> None:
    lines = [f"{k}={'' if v is None else v}" for k, v in asdict(cfg).items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
