"""Architecture and run configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .tensor import InvalidArgument

FUSION_MODES = ("fam", "sum", "cat", "none")
EMSA_ORDERS = ("literal", "norm_first")


@dataclass(frozen=True)
class BackboneConfig:
    stage_dims: tuple[int, ...] = (64, 128, 256, 512)
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    kv_reduction: tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratio: float = 4.0
    patch_stride: int = 2
    stem_hidden: int | None = None  # defaults to stage_dims[0] // 2
    emsa_order: str = "literal"

    def __post_init__(self):
        for name in ("stage_dims", "stage_depths", "heads", "kv_reduction"):
            if len(getattr(self, name)) != 4:
                raise InvalidArgument(f"{name} needs 4 entries, got {getattr(self, name)}")
        for d, h in zip(self.stage_dims, self.heads):
            if d % h:
                raise InvalidArgument(f"stage dim {d} not divisible by {h} heads")
        if min(self.kv_reduction) < 1:
            raise InvalidArgument(f"kv_reduction values must be >= 1, got {self.kv_reduction}")
        if self.emsa_order not in EMSA_ORDERS:
            raise InvalidArgument(f"emsa_order must be one of {EMSA_ORDERS}")

    @property
    def hidden(self) -> int:
        return self.stem_hidden or max(self.stage_dims[0] // 2, 1)


@dataclass(frozen=True)
class FusionConfig:
    fusion_mode: str = "fam"
    head_hidden_channels: int = 128
    num_classes: int = 6
    la_key_ratio: int = 8
    aem_upsample: str = "nearest"
    af_upsample: str = "bilinear"

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise InvalidArgument(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.num_classes < 2:
            raise InvalidArgument(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    texture_channels: tuple[int, int] = (64, 128)

    def replace(self, backbone: dict | None = None, fusion: dict | None = None, **top) -> "ModelConfig":
        """Copy with some top-level, backbone or fusion fields changed."""
        return dataclasses.replace(
            self,
            backbone=dataclasses.replace(self.backbone, **(backbone or {})),
            fusion=dataclasses.replace(self.fusion, **(fusion or {})),
            **top,
        )


PRESETS: dict[str, ModelConfig] = {
    # ResT-Lite sized dependency path
    "lite": ModelConfig(),
    "toy": ModelConfig(
        backbone=BackboneConfig(stage_dims=(16, 32, 64, 128), heads=(1, 2, 2, 4),
                                kv_reduction=(4, 2, 1, 1)),
        fusion=FusionConfig(num_classes=4, head_hidden_channels=64),
    ),
    # small enough (< 5k parameters) to finite-difference every weight
    "micro": ModelConfig(
        backbone=BackboneConfig(stage_dims=(4, 4, 8, 8), stage_depths=(1, 1, 1, 1),
                                heads=(1, 2, 2, 2), kv_reduction=(2, 2, 1, 1), mlp_ratio=1.5),
        # at least 4 key channels: with one, the attention denominator can vanish
        fusion=FusionConfig(num_classes=3, head_hidden_channels=4, la_key_ratio=2),
        texture_channels=(4, 4),
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidArgument(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# run configuration (key=value files, flags override)
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    preset: str = "toy"
    num_classes: int | None = None
    fusion_mode: str | None = None
    emsa_order: str = "literal"
    tile: int = 512
    stride: int | None = None
    seed: int = 0
    lr: float = 3e-4
    batch: int = 8
    steps: int = 500
    images: int = 8
    size: int = 64
    jobs: int = 1

    def model_config(self) -> ModelConfig:
        cfg = preset(self.preset)
        fusion = {}
        if self.num_classes is not None:
            fusion["num_classes"] = self.num_classes
        if self.fusion_mode is not None:
            fusion["fusion_mode"] = self.fusion_mode
        return cfg.replace(backbone={"emsa_order": self.emsa_order}, fusion=fusion)

    def update(self, values: dict[str, object]) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(self)}
        for key, raw in values.items():
            if raw is None:
                continue
            key = key.replace("-", "_")
            if key not in fields:
                raise InvalidArgument(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, raw, getattr(RunConfig(), key)))
        return self


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    if key in ("num_classes", "stride"):
        return None if raw.lower() == "none" else int(raw)
    if key == "fusion_mode":
        return None if raw.lower() == "default" else raw
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise InvalidArgument(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_run_config(source: str | None) -> RunConfig:
    """`source` is a preset name, a key=value file path, or None for defaults."""
    cfg = RunConfig()
    if source is None:
        return cfg
    if source in PRESETS:
        cfg.preset = source
        return cfg
    path = Path(source)
    if not path.is_file():
        raise InvalidArgument(f"config {source!r} is neither a preset ({sorted(PRESETS)}) nor a file")
    return cfg.update(parse_config_text(path.read_text()))
