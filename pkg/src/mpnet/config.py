"""Flat key=value run configuration with desk and full-scale presets."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .grouping import MeanShiftConfig
from .losses import LossConfig
from .model import ModelConfig
from .numerics import OptimizerConfig
from .scenes import BlockSpec, GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "desk"
    # data
    data_dir: str = "data"
    num_train: int = 40
    num_test: int = 10
    num_classes: int = 6
    points_per_scene: int = 20000
    rare_pattern_rate: float = 0.1
    data_seed: int = 0
    # blocks
    block_size: float = 1.0
    stride: float = 0.5
    samples_per_block: int = 512
    min_block_points: int = 100
    # network
    input_dim: int = 6
    hidden_widths: str = "32,64"
    feature_dim: int = 32
    shared_dim: int = 64
    grid_cell: float = 0.25
    room_xyz: bool = False
    centroid_hidden: int = 16
    # memory
    per_class_slots: int = 8
    temperature: float = 0.1
    use_ins_mem: bool = True
    use_seg_mem: bool = True
    # losses
    margin_m: float = 5.0
    sigma_v: float = 0.5
    sigma_d: float = 1.5
    lambda_ins: float = 0.1
    embed_dim: int = 5
    focal_gamma: float = 2.0
    use_squash: bool = True
    use_focal: bool = False
    use_reg_seg: bool = True
    use_reg_ins: bool = True
    # optimisation
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_every: int = 300000
    decay_factor: float = 0.5
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    keep_checkpoints: str = "all"
    resume: str = ""
    # inference
    bandwidth: float = 0.6
    max_iters: int = 100
    convergence_eps: float = 1e-4
    merge_radius: float = 0.3
    voxel_size: float = 0.05
    merge_iou: float = 0.3
    # ablation
    ablate_configs: str = "baseline,fl,insmem,segmem,full"
    ablate_seeds: str = "0,1,2,3,4"

    # ------------------------------------------------------------------
    def widths(self) -> list[int]:
        return [int(w) for w in self.hidden_widths.split(",") if w.strip()]

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(self.input_dim, self.widths(), self.feature_dim, self.shared_dim, self.grid_cell,
                            self.room_xyz)
        loss = LossConfig(self.margin_m, self.sigma_v, self.sigma_d, self.lambda_ins, self.embed_dim, self.focal_gamma,
                          self.use_squash, self.use_focal, self.use_reg_seg, self.use_reg_ins)
        return ModelConfig(self.num_classes, self.per_class_slots, self.temperature, self.use_ins_mem,
                           self.use_seg_mem, self.centroid_hidden, enc, loss)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon, self.decay_every,
                               self.decay_factor)

    def block_spec(self) -> BlockSpec:
        return BlockSpec(self.block_size, self.stride, self.samples_per_block, self.min_block_points)

    def mean_shift_config(self) -> MeanShiftConfig:
        return MeanShiftConfig(self.bandwidth, self.max_iters, self.convergence_eps, self.merge_radius)

    def generator_config(self, seed: int, force_rare: bool = False) -> GeneratorConfig:
        return GeneratorConfig(num_classes=self.num_classes, rare_pattern_rate=self.rare_pattern_rate,
                               points_per_scene=self.points_per_scene, seed=seed, force_rare=force_rare)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def model_hash(self) -> bytes:
        """Digest of the keys that determine parameter shapes and meaning."""
        keys = ("num_classes", "input_dim", "hidden_widths", "feature_dim", "shared_dim", "grid_cell", "room_xyz",
                "centroid_hidden", "per_class_slots", "temperature", "use_ins_mem", "use_seg_mem", "use_reg_ins",
                "embed_dim",
                "use_squash")
        text = ";".join(f"{k}={getattr(self, k)}" for k in keys)
        return hashlib.sha256(text.encode()).digest()

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    "desk": {},
    # original training scale: 150 slots per class, 100 epochs, 4096-point blocks
    "full-scale": {"per_class_slots": 150, "epochs": 100, "samples_per_block": 4096},
    "full-scale-lambda-0.01": {"per_class_slots": 150, "epochs": 100, "samples_per_block": 4096, "lambda_ins": 0.01},
}

# memory/loss switches for each ablation row
VARIANTS = {
    "baseline": dict(use_ins_mem=False, use_seg_mem=False, use_focal=False, use_squash=False,
                     use_reg_seg=False, use_reg_ins=False),
    "fl": dict(use_ins_mem=False, use_seg_mem=False, use_focal=True, use_squash=False,
               use_reg_seg=False, use_reg_ins=False),
    "insmem": dict(use_ins_mem=True, use_seg_mem=False, use_focal=False, use_squash=False,
                   use_reg_seg=False, use_reg_ins=False),
    "segmem": dict(use_ins_mem=True, use_seg_mem=True, use_focal=False, use_squash=True,
                   use_reg_seg=False, use_reg_ins=False),
    "full": dict(use_ins_mem=True, use_seg_mem=True, use_focal=False, use_squash=True,
                 use_reg_seg=True, use_reg_ins=True),
}


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse key=value lines (``#`` comments allowed). Unknown keys are errors.

    A ``preset`` key is applied first so explicit keys override it.
    """
    types = {f.name: f.type for f in fields(RunConfig)}
    pairs: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        pairs.append((key, value))
    cfg = base or RunConfig()
    values = {}
    for key, value in pairs:
        if key == "preset":
            cfg = apply_preset(cfg, value)
    for key, value in pairs:
        values[key] = _coerce(key, value, types[key])
    return dataclasses.replace(cfg, **values)


def apply_preset(cfg: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(cfg, preset=name, **PRESETS[name])


def apply_variant(cfg: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown ablation config {name!r}; choose from {sorted(VARIANTS)}")
    return dataclasses.replace(cfg, **VARIANTS[name])


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    return dataclasses.replace(cfg, **overrides) if overrides else cfg
