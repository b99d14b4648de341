"""Run configuration: defaults, flat key=value files, and CLI overrides.

Two profiles carry the stock hyperparameters:

* ``two_class``  - per-domain unconditional GANs; Adam lr 1e-5 for the
  generator and 1e-3 for adaptor/discriminator, betas (0.0, 0.99), batch 16.
* ``multi_class`` - one class-conditional GAN; Adam lr 5e-5 / 2e-4,
  betas (0.0, 0.999), batch 16.

Config files are flat ``key = value`` lines (``#`` comments).  Unknown keys
are hard errors so ablation sweeps cannot silently typo a knob.
"""

import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .nets import ArchitectureSpec

PROFILES = ("two_class", "multi_class")

# profile -> (lr_g, lr_ad, beta1, beta2)
_PROFILE_OPT = {
    "two_class": (1e-5, 1e-3, 0.0, 0.99),
    "multi_class": (5e-5, 2e-4, 0.0, 0.999),
}


@dataclass(frozen=True)
class StageConfig:
    """Every knob a stage run reads, plus the data source description."""

    profile: str = "two_class"
    # architecture
    image_size: int = 32
    channels_base: int = 64
    num_resblocks: int = 4
    latent_dim: int = 128
    num_classes: int = 2
    # optimizer
    optimizer: str = "adam"
    lr_g: float = 1e-5
    lr_ad: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    batch_size: int = 16
    # per-stage step budgets (steps = the translation stage)
    steps: int = 1000
    base_steps: int = 1000
    pretrain_steps: int = 400
    selfinit_steps: int = 400
    # loss weights
    lambda_aux: float = 0.01
    lambda_rec: float = 1.0
    alpha_levels: tuple[float, ...] = ()  # empty -> all ones
    injection_weights: tuple[float, ...] = ()  # empty -> stock rule
    shared_resblocks: int = 4
    aux_generator: bool = True
    seed: int = 0
    # data source
    data_kind: str = "synthetic"  # synthetic | folder
    data_root: str = ""
    per_class: int = 100
    split_fraction: float = 0.9
    test_per_class: int = 0  # 0 -> use split_fraction
    # artifacts & evaluation
    sample_every: int = 0
    snapshot_every: int = 0
    extractor_steps: int = 600
    rcfc_steps: int = 400
    eval_inputs_cap: int = 100
    eval_z_per_input: int = 1
    ablate_seeds: tuple[int, ...] = (0, 1, 2)
    # checkpoints consumed by subcommands (paths; empty = unset)
    base_checkpoint: str = ""
    gan_checkpoint: str = ""
    source_checkpoint: str = ""
    target_checkpoint: str = ""
    generator_checkpoint: str = ""
    discriminator_checkpoint: str = ""
    adaptor_checkpoint: str = ""
    adaptor_1to2_checkpoint: str = ""
    adaptor_2to1_checkpoint: str = ""
    i2i_checkpoint: str = ""
    extractor_checkpoint: str = ""

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigurationError(
                f"profile '{self.profile}' not in {PROFILES}"
            )
        if self.profile == "two_class" and self.num_classes != 2:
            raise ConfigurationError("two_class profile requires num_classes = 2")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2 (domains or classes)")
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer '{self.optimizer}'")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for knob in ("steps", "base_steps", "pretrain_steps", "selfinit_steps"):
            if getattr(self, knob) < 0:
                raise ConfigurationError(f"{knob} must be >= 0")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigurationError("split_fraction must be in (0, 1)")
        if self.data_kind not in ("synthetic", "folder"):
            raise ConfigurationError(f"unknown data_kind '{self.data_kind}'")
        if self.alpha_levels and len(self.alpha_levels) != self.num_resblocks:
            raise ConfigurationError(
                f"alpha_levels needs {self.num_resblocks} entries"
            )
        if self.injection_weights and len(self.injection_weights) != self.num_resblocks:
            raise ConfigurationError(
                f"injection_weights needs {self.num_resblocks} entries"
            )
        if not 0 <= self.shared_resblocks <= self.num_resblocks:
            raise ConfigurationError(
                f"shared_resblocks must be in 0..{self.num_resblocks}"
            )

    @property
    def conditional(self) -> bool:
        return self.profile == "multi_class"

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    def arch_spec(self) -> ArchitectureSpec:
        """Architecture for the pipeline nets (two-class nets are unconditional)."""
        return ArchitectureSpec(
            image_size=self.image_size,
            channels_base=self.channels_base,
            num_resblocks=self.num_resblocks,
            latent_dim=self.latent_dim,
            num_classes=self.num_classes if self.conditional else 1,
        )

    def alphas(self) -> list[float]:
        return list(self.alpha_levels) or [1.0] * self.num_resblocks

    @classmethod
    def two_class(cls, **kw) -> "StageConfig":
        return cls(profile="two_class", **kw)

    @classmethod
    def multi_class(cls, num_classes: int, **kw) -> "StageConfig":
        lr_g, lr_ad, b1, b2 = _PROFILE_OPT["multi_class"]
        kw.setdefault("lr_g", lr_g)
        kw.setdefault("lr_ad", lr_ad)
        kw.setdefault("beta1", b1)
        kw.setdefault("beta2", b2)
        return cls(profile="multi_class", num_classes=num_classes, **kw)

    def with_overrides(self, overrides: dict[str, str]) -> "StageConfig":
        parsed = {k: _parse_value(k, v) for k, v in overrides.items()}
        return replace(self, **parsed)

    def to_file_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out


def _type_category(ftype) -> str:
    if isinstance(ftype, str):
        # annotations stored as strings
        return {
            "int": "int",
            "float": "float",
            "bool": "bool",
            "str": "str",
        }.get(ftype, "floats" if "float" in ftype else "ints")
    if ftype is int:
        return "int"
    if ftype is float:
        return "float"
    if ftype is bool:
        return "bool"
    if ftype is str:
        return "str"
    args = typing.get_args(ftype)
    if typing.get_origin(ftype) is tuple and args:
        return "floats" if args[0] is float else "ints"
    raise ConfigurationError(f"unparseable config field type {ftype!r}")


_FIELD_TYPES = {f.name: _type_category(f.type) for f in fields(StageConfig)}


def _parse_value(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigurationError(f"unknown config key '{key}'")
    category = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if category == "int":
            return int(raw)
        if category == "float":
            return float(raw)
        if category == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if category == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip()) if raw else ()
        if category == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw else ()
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"config key '{key}': {exc}") from exc


def parse_config_text(text: str, base: StageConfig | None = None) -> StageConfig:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _parse_value(key, raw)
    # profile decides the stock optimizer block for keys the file leaves unset
    profile = values.get("profile", base.profile if base else "two_class")
    if profile not in PROFILES:
        raise ConfigurationError(f"profile '{profile}' not in {PROFILES}")
    lr_g, lr_ad, b1, b2 = _PROFILE_OPT[profile]
    defaults = {
        "profile": profile,
        "lr_g": lr_g,
        "lr_ad": lr_ad,
        "beta1": b1,
        "beta2": b2,
    }
    merged = base.to_dict() if base else {}
    init = {}
    for f in fields(StageConfig):
        if f.name in values:
            init[f.name] = values[f.name]
        elif f.name in merged:
            v = merged[f.name]
            init[f.name] = tuple(v) if isinstance(v, list) else v
        elif f.name in defaults:
            init[f.name] = defaults[f.name]
    return StageConfig(**init)


def load_config(path, base: StageConfig | None = None) -> StageConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), base=base)
