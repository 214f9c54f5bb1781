"""Run configuration: one JSON-serializable tree that fully determines a run.

Strict parsing: unknown keys anywhere in the tree are an error, so config
typos fail fast instead of silently training the wrong model.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from minibev.encoder import EncoderConfig, HybridSequenceConfig
from minibev.heads import LossWeights
from minibev.scene import SceneConfig


class ConfigError(ValueError):
    """Malformed run configuration (unknown key, bad type, bad value)."""


@dataclass(frozen=True)
class RigSettings:
    n_cameras: int = 3
    width: int = 112
    height: int = 64
    fov_deg: float = 110.0
    mount_height: float = 1.6
    pitch_deg: float = 10.0


@dataclass(frozen=True)
class EncoderSettings:
    input_hw: tuple[int, int]
    stage_channels: tuple[int, ...]
    stage_blocks: tuple[int, ...]
    depth_refine_layers: int
    n_depth_bins: int
    depth_range: tuple[float, float] = (1.0, 30.0)
    feature_channels: int = 16

    def to_encoder_config(self, path_kind: str) -> EncoderConfig:
        return EncoderConfig(
            path_kind=path_kind,
            input_hw=self.input_hw,
            stage_channels=self.stage_channels,
            stage_blocks=self.stage_blocks,
            depth_refine_layers=self.depth_refine_layers,
            n_depth_bins=self.n_depth_bins,
            depth_range=self.depth_range,
            feature_channels=self.feature_channels,
        )


@dataclass(frozen=True)
class HybridSettings:
    k_short: int = 2
    m_long: int = 7
    share_backbone: bool = False
    path_mode: str = "hybrid"  # hybrid | all_large | all_small

    def to_sequence_config(self) -> HybridSequenceConfig:
        return HybridSequenceConfig(
            k_short=self.k_short, m_long=self.m_long, share_backbone=self.share_backbone
        )


@dataclass(frozen=True)
class GridSettings:
    cell_m: float
    n_cells: int


@dataclass(frozen=True)
class FusionSettings:
    kind: str = "backward_forward_affm"
    window: int = 4
    gamma_init: float = 0.0
    token_budget: int = 8192


@dataclass(frozen=True)
class TaskSettings:
    adaptive_selection: bool = True
    independent_encoders: bool = True
    n_det_classes: int = 1
    score_thresh: float = 0.25
    max_dets: int = 24
    encoder_extra_blocks: int = 0


@dataclass(frozen=True)
class OptimSettings:
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 2000
    seed: int = 0
    warmup_steps: int = 100
    clip_norm: float = 10.0


@dataclass(frozen=True)
class EvalSettings:
    n_scenes: int = 12
    seed_base: int = 900_000_000


@dataclass(frozen=True)
class AblationSettings:
    steps: int = 350
    eval_scenes: int = 8
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig: RigSettings = field(default_factory=RigSettings)
    large_encoder: EncoderSettings = field(default_factory=lambda: EncoderSettings(
        input_hw=(64, 112), stage_channels=(12, 24, 40), stage_blocks=(1, 1, 1),
        depth_refine_layers=3, n_depth_bins=32,
    ))
    small_encoder: EncoderSettings = field(default_factory=lambda: EncoderSettings(
        input_hw=(32, 56), stage_channels=(8, 16, 24), stage_blocks=(1, 1, 1),
        depth_refine_layers=1, n_depth_bins=16,
    ))
    hybrid: HybridSettings = field(default_factory=HybridSettings)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    det_grid: GridSettings = field(default_factory=lambda: GridSettings(0.4, 64))
    seg_grid: GridSettings = field(default_factory=lambda: GridSettings(0.8, 32))
    tasks: TaskSettings = field(default_factory=TaskSettings)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimSettings = field(default_factory=OptimSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    out_dir: str = "runs/default"

    def validate(self) -> None:
        if self.scene.n_timestamps < self.hybrid.k_short + self.hybrid.m_long:
            raise ConfigError(
                f"scene has {self.scene.n_timestamps} timestamps but the hybrid split "
                f"needs {self.hybrid.k_short + self.hybrid.m_long}"
            )
        if tuple(self.large_encoder.input_hw) != (self.rig.height, self.rig.width):
            raise ConfigError(
                f"large encoder input {self.large_encoder.input_hw} must match the "
                f"render resolution {(self.rig.height, self.rig.width)}"
            )
        if self.large_encoder.feature_channels != self.small_encoder.feature_channels:
            raise ConfigError("both encoder paths must produce the same channel width")
        if self.hybrid.path_mode not in ("hybrid", "all_large", "all_small"):
            raise ConfigError(f"unknown path_mode {self.hybrid.path_mode!r}")
        from minibev.temporal import BASELINE_KINDS
        if self.fusion.kind != "backward_forward_affm" and \
                self.fusion.kind not in BASELINE_KINDS:
            raise ConfigError(f"unknown fusion kind {self.fusion.kind!r}")
        try:
            self.scene.validate()
            self.large_encoder.to_encoder_config("large").feat_hw
            self.small_encoder.to_encoder_config("small").feat_hw
        except Exception as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# strict dict/json round trip
# ---------------------------------------------------------------------------

def to_dict(obj) -> dict:
    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        return v

    return convert(obj)


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        kwargs[f.name] = _convert(hints[f.name], data[f.name], f"{path}.{f.name}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _convert(hint, value, path: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return _from_dict(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config field type {hint}")


def from_dict(data: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=1)
        fh.write("\n")


def default_config() -> RunConfig:
    cfg = RunConfig()
    cfg.validate()
    return cfg


def micro_config(steps: int = 40) -> RunConfig:
    """Tiny everything: for tests and full-pipeline gradient checks."""
    cfg = RunConfig(
        scene=SceneConfig(n_timestamps=3, n_boxes=3, occlusion_pair=True),
        rig=RigSettings(n_cameras=2, width=32, height=16),
        large_encoder=EncoderSettings(
            input_hw=(16, 32), stage_channels=(4, 6), stage_blocks=(1, 1),
            depth_refine_layers=1, n_depth_bins=6, depth_range=(1.0, 20.0),
            feature_channels=6,
        ),
        small_encoder=EncoderSettings(
            input_hw=(8, 16), stage_channels=(3, 4), stage_blocks=(1, 1),
            depth_refine_layers=0, n_depth_bins=4, depth_range=(1.0, 20.0),
            feature_channels=6,
        ),
        hybrid=HybridSettings(k_short=1, m_long=2),
        fusion=FusionSettings(window=4),
        det_grid=GridSettings(0.8, 16),
        seg_grid=GridSettings(1.6, 8),
        optim=OptimSettings(steps=steps, lr=0.02),
        eval=EvalSettings(n_scenes=2),
        ablation=AblationSettings(steps=6, eval_scenes=1, seeds=(0,)),
        out_dir="runs/micro",
    )
    cfg.validate()
    return cfg
