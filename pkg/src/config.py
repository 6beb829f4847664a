"""
Run configuration for the C-DIRA pipeline
Nested pydantic models serialized as flat dotted key=value text
"""

import math
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union, get_args, get_origin

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.autodiff import CdiraError


class ConfigError(CdiraError, ValueError):
    """Invalid or unknown configuration"""


def _ref(value: str) -> Dict[str, str]:
    return {"reference": value}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class BackboneConfig(_Section):
    input_size: int = Field(64, ge=8, description="square input side in pixels", json_schema_extra=_ref("224"))
    input_channels: int = Field(3, ge=1, description="input channels")
    stage_widths: List[int] = Field([16, 32, 64], min_length=1, description="channels per stride-2 stage")
    feature_channels: int = Field(64, ge=1, description="C_f, channels of the feature map", json_schema_extra=_ref("576"))
    kernel_size: int = Field(3, ge=1, description="conv kernel size (odd)")

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size must be odd for 'same' padding")
        return value

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.feature_channels != self.stage_widths[-1]:
            raise ValueError(
                f"feature_channels ({self.feature_channels}) must equal the last stage width ({self.stage_widths[-1]})"
            )
        height, width = self.output_hw()
        if height < 2 or width < 2:
            raise ValueError(f"feature map would be {height}x{width}; Top-K pooling needs at least 2x2")
        return self

    def output_hw(self) -> Tuple[int, int]:
        size = self.input_size
        for _ in self.stage_widths:
            size = math.ceil(size / 2)
        return size, size


class ModelConfig(_Section):
    global_hidden: int = Field(256, ge=1, description="global head hidden width", json_schema_extra=_ref("256"))
    roi_dim: int = Field(512, ge=1, description="refined ROI feature width", json_schema_extra=_ref("512"))
    fused_hidden: int = Field(512, ge=1, description="fused head hidden width", json_schema_extra=_ref("512"))
    route_hidden: int = Field(64, ge=1, description="routing head hidden width")
    domain_hidden: int = Field(128, ge=1, description="domain head hidden width")
    topk: Optional[int] = Field(None, ge=1, description="Top-K cells pooled; none = ceil(0.1*H*W)")
    tau: float = Field(0.9, gt=0, le=1, description="routing confidence threshold", json_schema_extra=_ref("0.9"))


class TrainConfig(_Section):
    max_epochs: int = Field(50, ge=1, description="epoch cap", json_schema_extra=_ref("50"))
    patience: int = Field(5, ge=1, description="early-stopping patience on validation loss", json_schema_extra=_ref("5"))
    lr: float = Field(1e-3, gt=0, description="AdamW learning rate", json_schema_extra=_ref("1e-5"))
    weight_decay: float = Field(1e-4, ge=0, description="decoupled weight decay")
    beta1: float = Field(0.9, ge=0, lt=1, description="Adam beta1")
    beta2: float = Field(0.999, ge=0, lt=1, description="Adam beta2")
    adam_eps: float = Field(1e-8, gt=0, description="Adam epsilon")
    batch_size: int = Field(64, ge=1, description="mini-batch size")
    grl_lambda: float = Field(1.0, ge=0, description="gradient reversal scale")
    warmup_epochs: int = Field(2, ge=0, description="global-only epochs before clustering")
    lambda_g: float = Field(0.5, ge=0, description="weight of global CE", json_schema_extra=_ref("0.5"))
    lambda_f: float = Field(1.0, ge=0, description="weight of fused CE", json_schema_extra=_ref("1.0"))
    lambda_route: float = Field(0.5, ge=0, description="weight of routing BCE", json_schema_extra=_ref("0.5"))
    lambda_reg: float = Field(0.01, ge=0, description="weight of ROI usage penalty", json_schema_extra=_ref("0.01"))
    lambda_dom: float = Field(0.5, ge=0, description="weight of domain CE", json_schema_extra=_ref("0.5"))
    hflip: bool = Field(False, description="random horizontal flip (breaks position-coded classes)")
    augment_brightness: bool = Field(False, description="random brightness shift of up to +-0.1")
    seed: int = Field(0, description="training seed")

    @model_validator(mode="after")
    def _check_patience(self):
        if self.patience > self.max_epochs:
            raise ValueError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")
        return self


class SynthSpec(_Section):
    n_classes: int = Field(10, ge=2, le=10, description="classes (one glyph shape each)")
    n_domains: int = Field(8, ge=2, description="background styles")
    per_cell: int = Field(100, ge=1, description="images per (class, domain)")
    image_size: int = Field(64, ge=8, description="square image side", json_schema_extra=_ref("224"))
    glyph_min: int = Field(8, ge=2, description="smallest glyph side")
    glyph_max: int = Field(14, ge=2, description="largest glyph side")
    jitter: int = Field(4, ge=0, description="glyph position jitter radius")
    seed: int = Field(0, description="generator seed")

    @model_validator(mode="after")
    def _check_glyph(self):
        if self.glyph_min > self.glyph_max:
            raise ValueError(f"glyph_min ({self.glyph_min}) exceeds glyph_max ({self.glyph_max})")
        return self


class ClusterConfig(_Section):
    candidates: List[int] = Field([4, 6, 8, 10, 12, 16, 20, 24, 30], min_length=1, description="candidate K values")
    sample_size: int = Field(5000, ge=2, description="silhouette subsample size", json_schema_extra=_ref("5000"))
    max_iter: int = Field(100, ge=1, description="Lloyd iteration cap")
    tol: float = Field(1e-4, gt=0, description="center-shift convergence tolerance")
    seed: int = Field(0, description="clustering seed")


class EvalConfig(_Section):
    routing_mode: str = Field("confidence", description="confidence | routing_head")
    tau_grid: str = Field("0.1:0.9:0.1", description="start:stop:step of the tau sweep")
    batch_size: int = Field(128, ge=1, description="evaluation batch size")
    latency_runs: int = Field(100, ge=1, description="timed single-image runs")
    latency_warmup: int = Field(10, ge=0, description="untimed warm-up runs")
    severities: List[int] = Field([0, 1, 2, 3, 4, 5], min_length=1, description="robustness severities")
    kinds: List[str] = Field(["blur", "jpeg", "lowlight", "occlusion"], min_length=1, description="degradations")
    loco_group: str = Field("small", description="large | middle | small | all")
    loco_variants: List[str] = Field(["full", "no_adversarial"], min_length=1, description="LOCO variants")
    loco_seeds: List[int] = Field([0], min_length=1, description="LOCO seeds")
    ablation_variants: List[str] = Field(
        ["full", "no_roi", "no_adversarial", "no_routing"], min_length=1, description="ablation variants"
    )

    @field_validator("routing_mode")
    @classmethod
    def _mode(cls, value: str) -> str:
        if value not in ("confidence", "routing_head"):
            raise ValueError(f"routing_mode must be confidence or routing_head, got {value!r}")
        return value

    @field_validator("loco_group")
    @classmethod
    def _group(cls, value: str) -> str:
        if value not in ("large", "middle", "small", "all"):
            raise ValueError(f"loco_group must be large, middle, small or all, got {value!r}")
        return value


class RunConfig(_Section):
    backbone: BackboneConfig = BackboneConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    synth: SynthSpec = SynthSpec()
    cluster: ClusterConfig = ClusterConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check_sizes(self):
        if self.synth.image_size != self.backbone.input_size:
            raise ValueError(
                f"synth.image_size ({self.synth.image_size}) must equal backbone.input_size ({self.backbone.input_size})"
            )
        return self

    def topk(self) -> int:
        height, width = self.backbone.output_hw()
        if self.model.topk is not None:
            return self.model.topk
        return max(1, math.ceil(0.1 * height * width))

    def canonical_text(self) -> str:
        return "\n".join(f"{key}={_format_value(value)}" for key, value in sorted(flatten(self).items())) + "\n"

    def config_hash(self) -> str:
        return f"{zlib.crc32(self.canonical_text().encode('utf-8')):08x}"

    def model_hash(self) -> str:
        """Hash of the architecture-relevant keys only (checkpoint guard)"""
        flat = flatten(self)
        text = "\n".join(
            f"{key}={_format_value(value)}" for key, value in sorted(flat.items())
            if key.startswith("backbone.") or key == "synth.n_classes"
            or (key.startswith("model.") and key not in ("model.tau", "model.topk"))
        )
        return f"{zlib.crc32(text.encode('utf-8')):08x}"


PRESETS: Dict[str, Dict[str, str]] = {
    "default": {},
    "fullscale": {
        "train.lr": "1e-5",
        "backbone.input_size": "224",
        "synth.image_size": "224",
        "synth.glyph_min": "28",
        "synth.glyph_max": "48",
        "synth.jitter": "12",
    },
}


def flatten(config: BaseModel, prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for name in type(config).model_fields:
        value = getattr(config, name)
        key = f"{prefix}{name}"
        if isinstance(value, BaseModel):
            flat.update(flatten(value, key + "."))
        else:
            flat[key] = value
    return flat


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_annotation(key: str):
    section_name, _, field_name = key.partition(".")
    section = RunConfig.model_fields.get(section_name)
    if section is None or not field_name:
        raise ConfigError(f"unknown config key: {key}")
    field = section.annotation.model_fields.get(field_name)
    if field is None:
        raise ConfigError(f"unknown config key: {key}")
    return field.annotation


def _coerce(key: str, raw: str) -> Any:
    annotation = _field_annotation(key)
    text = raw.strip()
    if get_origin(annotation) is Union and type(None) in get_args(annotation) and text.lower() in ("none", ""):
        return None
    if get_origin(annotation) in (list, List):
        return [item.strip() for item in text.split(",") if item.strip()]
    return text


def build_config(overrides: Dict[str, str]) -> RunConfig:
    """Validate dotted-key overrides on top of the defaults"""
    nested: Dict[str, Dict[str, Any]] = {}
    for key, raw in overrides.items():
        section, _, field = key.partition(".")
        nested.setdefault(section, {})[field] = _coerce(key, raw)
    try:
        return RunConfig(**nested)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def parse_config_text(text: str) -> Dict[str, str]:
    overrides = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_config(source: Union[str, Path, None] = "default", extra: Optional[Dict[str, str]] = None) -> RunConfig:
    """
    Load a preset name or a key=value config file, then apply extra overrides

    Args:
        source: preset name ("default", "fullscale") or path to a config file
        extra: dotted-key overrides applied last (e.g. from --set)
    """
    source = "default" if source is None else source
    if str(source) in PRESETS:
        overrides = dict(PRESETS[str(source)])
    else:
        path = Path(source)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        overrides = parse_config_text(path.read_text(encoding="utf-8"))
    overrides.update(extra or {})
    return build_config(overrides)


def save_config(config: RunConfig, path: Union[str, Path]):
    Path(path).write_text(config.canonical_text(), encoding="utf-8")


def describe_keys() -> str:
    """Every key with its default and the full-scale value where one exists (for --help)"""
    defaults = flatten(RunConfig())
    lines = []
    for section_name, section in RunConfig.model_fields.items():
        for field_name, field in section.annotation.model_fields.items():
            key = f"{section_name}.{field_name}"
            extra = field.json_schema_extra or {}
            ref = f" [full-scale: {extra['reference']}]" if "reference" in extra else ""
            lines.append(f"  {key}={_format_value(defaults[key])}{ref}  {field.description or ''}")
    return "\n".join(lines)
