"""Flat TOML configuration for the command-line pipeline.

Every key is optional; defaults reproduce the reference hyperparameters
(alpha 0.65, omega 0.03, tau1 0.7, tau2 0.6, lambda1 = lambda2 = 1).
Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import tomli

from .errors import ConfigError
from .extraction import ExtractionConfig
from .grouping import GroupConfig
from .metrics import AUC_THRESHOLDS
from .similarity import SarlConfig
from .synth import SynthConfig
from .training import LossSettings, TrainConfig

_KNOWN_KEYS = {
    # similarity / masking
    "alpha",
    "omega",
    "background_cut",
    # extraction loop
    "epsilon",
    "t_max",
    # grouping thresholds
    "tau1",
    "tau2",
    # objective weights
    "lambda1",
    "lambda2",
    # evaluation grids
    "auc_thresholds",
    "iou_thresholds",
    # synthetic scenes
    "height",
    "width",
    "channels",
    "count_values",
    "count_weights",
    "rect_min",
    "rect_max",
    "source_cos_max",
    "background_cos_max",
    "noise_sigma",
    # training
    "lr",
    "momentum",
    "steps",
    "batch",
    "seed",
    "proj_channels",
}


@dataclass(frozen=True)
class PipelineConfig:
    sarl: SarlConfig
    extraction: ExtractionConfig
    group: GroupConfig
    lambda1: float
    lambda2: float
    auc_thresholds: tuple[float, ...]
    iou_thresholds: tuple[float, ...]
    synth: SynthConfig
    train: TrainConfig
    proj_channels: Optional[int]

    def loss_settings(self) -> LossSettings:
        return LossSettings(
            sarl=self.sarl,
            extraction=self.extraction,
            group=self.group,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
        )


def _build(doc: dict) -> PipelineConfig:
    unknown = set(doc) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def pick(key, default):
        return doc.get(key, default)

    try:
        sarl = SarlConfig(
            alpha=float(pick("alpha", 0.65)),
            omega=float(pick("omega", 0.03)),
            background_cut=float(pick("background_cut", 0.5)),
        )
        extraction = ExtractionConfig(
            epsilon=float(doc["epsilon"]) if "epsilon" in doc else None,
            t_max=int(doc["t_max"]) if "t_max" in doc else None,
        )
        group = GroupConfig(tau1=float(pick("tau1", 0.7)), tau2=float(pick("tau2", 0.6)))
        synth = SynthConfig(
            height=int(pick("height", 7)),
            width=int(pick("width", 7)),
            channels=int(pick("channels", 32)),
            count_values=tuple(int(v) for v in pick("count_values", (1, 2, 3))),
            count_weights=tuple(float(v) for v in pick("count_weights", (1.0, 1.0, 1.0))),
            rect_min=int(pick("rect_min", 2)),
            rect_max=int(pick("rect_max", 3)),
            source_cos_max=float(pick("source_cos_max", 0.2)),
            background_cos_max=float(pick("background_cos_max", 0.0)),
            noise_sigma=float(pick("noise_sigma", 0.0)),
        )
        train = TrainConfig(
            learning_rate=float(pick("lr", 1e-2)),
            momentum=float(pick("momentum", 0.9)),
            steps=int(pick("steps", 200)),
            batch_size=int(pick("batch", 8)),
            seed=int(pick("seed", 0)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return PipelineConfig(
        sarl=sarl,
        extraction=extraction,
        group=group,
        lambda1=float(pick("lambda1", 1.0)),
        lambda2=float(pick("lambda2", 1.0)),
        auc_thresholds=tuple(float(t) for t in pick("auc_thresholds", AUC_THRESHOLDS)),
        iou_thresholds=tuple(float(t) for t in pick("iou_thresholds", (0.5,))),
        synth=synth,
        train=train,
        proj_channels=int(doc["proj_channels"]) if "proj_channels" in doc else None,
    )


def load_pipeline_config(path=None) -> PipelineConfig:
    """Parse a flat TOML file; with no path, return pure defaults."""
    if path is None:
        return _build({})
    raw = Path(path).read_bytes()
    try:
        doc = tomli.loads(raw.decode("utf-8"))
    except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for key, value in doc.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: nested tables are not allowed (key {key!r})")
    return _build(doc)
