"""
Config objects for decoding, adaptive KV selection, the decoder
FLOPs model and flow distillation, plus the JSON loader behind the
command-line `--config` option

Scalar fields are typed descriptors (see `descriptor.py`), so a bad
value is rejected the moment it is assigned, both in the generated
`__init__` and later on. Cross-field invariants are checked in
`__post_init__`
"""

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

from .descriptor import (
    BoundedFloat,
    Choice,
    Flag,
    Float,
    Fraction,
    NonNegativeInteger,
    PositiveFloat,
    PositiveInteger,
)

T = TypeVar("T")

SELECTION_MODES = ("mean_topk", "topn_merge")
DISTRIBUTIONS = ("gmm8", "checkerboard")
LOSSES = ("huber", "l2")
CFD_TEACHERS = ("original", "distilled")


@dataclass
class HeadConfig:
    """
    Shape of the cross-attention decoder head whose per-query cost
    is modelled by `field.flops_per_query`
    """

    width: int = PositiveInteger(512)
    kv_width: int = PositiveInteger(512)
    mlp_ratio: float = BoundedFloat(1.0, low=1.0)
    num_layernorms: int = NonNegativeInteger(1)
    m_kv: int = PositiveInteger(3072)


BASELINE_HEAD = HeadConfig(
    width=1024, kv_width=1024, mlp_ratio=4.0, num_layernorms=4, m_kv=3072
)
EFFICIENT_HEAD = HeadConfig(
    width=512, kv_width=512, mlp_ratio=1.0, num_layernorms=1, m_kv=3072
)


@dataclass
class LatentsConfig:
    """
    How the toy vecset is built: token count, softmax temperature and
    truncation distance (0 picks the default for the base resolution)
    """

    tokens: int = PositiveInteger(1024)
    tau: float = PositiveFloat(1e-3)
    trunc: float = BoundedFloat(0.0, low=0.0)


@dataclass
class AkvsConfig:
    r: int = PositiveInteger(16)
    n_probe: int = PositiveInteger(8)
    mode: str = Choice("mean_topk", SELECTION_MODES)
    K: int = PositiveInteger(512)
    N: int = PositiveInteger(50)
    pack_batch: int = PositiveInteger(4096)
    kept_mass_samples: int = NonNegativeInteger(4096)


@dataclass
class DecodeConfig:
    target_res: int = PositiveInteger(256)
    base_res: int = PositiveInteger(64)
    gamma: float = Float(0.0)
    eta: float = Float(0.95)
    dilation_radius: int = NonNegativeInteger(1)
    find_near: bool = Flag(True)
    final_skip_findnear: bool = Flag(True)
    final_double_expand: bool = Flag(True)
    chunk_size: int = PositiveInteger(2048)
    workers: int = PositiveInteger(1)
    seed: int = NonNegativeInteger(0)
    akvs: Optional[AkvsConfig] = None
    head: HeadConfig = field(default_factory=lambda: HeadConfig())

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < self.eta <= 1.0:
            raise ValueError(
                f"expected 0 <= gamma < eta <= 1, got gamma={self.gamma}, eta={self.eta}"
            )
        if self.base_res > self.target_res:
            raise ValueError(
                f"base_res {self.base_res} exceeds target_res {self.target_res}"
            )
        if self.base_res < 8:
            raise ValueError(f"base_res must be at least 8, got {self.base_res}")
        if self.akvs is not None and not isinstance(self.akvs, AkvsConfig):
            raise TypeError(f"akvs must be an AkvsConfig, got {type(self.akvs)}")


@dataclass
class DistillConfig:
    """
    Every knob of the desk-scale flow distillation pipeline

    Step counts and learning rates keep the ratios of the full-size
    recipe: guidance distillation and consistency distillation share a
    learning rate, phase-1 finetuning and the generator of the
    adversarial stage run ten times slower, the discriminator runs at
    the distillation rate
    """

    dist: str = Choice("gmm8", DISTRIBUTIONS)
    hidden: int = PositiveInteger(128)
    layers: int = PositiveInteger(3)
    freqs: int = PositiveInteger(16)
    batch_size: int = PositiveInteger(256)
    label_dropout: float = Fraction(0.1)
    k_skip: int = PositiveInteger(10)
    num_timesteps: int = PositiveInteger(100)
    phases: int = PositiveInteger(5)
    ema_decay: float = Fraction(0.999)
    huber_c: float = PositiveFloat(1e-3)
    w_min: float = Float(2.0)
    w_max: float = Float(8.0)
    w_const: float = Float(5.0)
    lambda_adv: float = BoundedFloat(0.1, low=0.0)
    teacher_steps: int = NonNegativeInteger(20000)
    teacher_lr: float = PositiveFloat(1e-3)
    gd_steps: int = NonNegativeInteger(2000)
    gd_lr: float = PositiveFloat(1e-4)
    cfd_steps: int = NonNegativeInteger(4000)
    cfd_lr: float = PositiveFloat(1e-4)
    finetune_steps: int = NonNegativeInteger(1600)
    finetune_lr: float = PositiveFloat(1e-5)
    adv_steps: int = NonNegativeInteger(1000)
    adv_lr: float = PositiveFloat(1e-4)
    disc_hidden: int = PositiveInteger(64)
    use_ema: bool = Flag(True)
    loss: str = Choice("huber", LOSSES)
    gd_warmup: bool = Flag(True)
    phase1_finetune: bool = Flag(True)
    cfd_teacher: str = Choice("original", CFD_TEACHERS)
    log_every: int = PositiveInteger(100)
    seed: int = NonNegativeInteger(0)

    def __post_init__(self) -> None:
        if self.w_min > self.w_max:
            raise ValueError(f"empty guidance range [{self.w_min}, {self.w_max}]")

    @property
    def w_range(self) -> Tuple[float, float]:
        return self.w_min, self.w_max


def to_dict(cfg: Any) -> Dict[str, Any]:
    """
    Plain-dict echo of a config dataclass (nested configs included)
    """
    return asdict(cfg)


def from_dict(cls: Type[T], values: Mapping[str, Any]) -> T:
    """
    Build a config dataclass from a mapping, rejecting unknown keys

    Nested `akvs`/`head` sections of `DecodeConfig` are built
    recursively
    """
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")

    kwds = dict(values)
    if cls is DecodeConfig:
        if isinstance(kwds.get("akvs"), Mapping):
            kwds["akvs"] = from_dict(AkvsConfig, kwds["akvs"])
        if isinstance(kwds.get("head"), Mapping):
            kwds["head"] = from_dict(HeadConfig, kwds["head"])
    return cls(**kwds)


SECTIONS: Dict[str, type] = {
    "latents": LatentsConfig,
    "decode": DecodeConfig,
    "akvs": AkvsConfig,
    "head": HeadConfig,
    "distill": DistillConfig,
}


@dataclass
class CliConfig:
    """
    Fully resolved configuration of one command: file values layered
    over the defaults, explicit flags layered over the file
    """

    latents: LatentsConfig = field(default_factory=LatentsConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    akvs: AkvsConfig = field(default_factory=AkvsConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    @classmethod
    def from_sections(
        cls,
        sections: Mapping[str, Mapping[str, Any]],
        overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
    ) -> "CliConfig":
        unknown = sorted(set(sections) - set(SECTIONS))
        if unknown:
            raise ValueError(f"unknown config sections: {', '.join(unknown)}")

        overrides = overrides or {}
        built = {}
        for name, section_cls in SECTIONS.items():
            values = dict(sections.get(name, {}))
            # flags left unset on the command line arrive as None
            values.update(
                {k: v for k, v in overrides.get(name, {}).items() if v is not None}
            )
            built[name] = from_dict(section_cls, values)
        return cls(**built)

    def to_dict(self) -> Dict[str, Any]:
        return {name: to_dict(getattr(self, name)) for name in SECTIONS}


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
) -> CliConfig:
    """
    Read a JSON config file (optional) and apply flag overrides

    Arguments:

    + `path`: str or None, JSON document with the sections of `SECTIONS`
    + `overrides`: section -> {key: value}, `None` values are ignored

    Raises `ValueError` on unknown sections/keys or invalid values
    """
    sections: Mapping[str, Mapping[str, Any]] = {}
    if path is not None:
        with open(path, encoding="utf-8") as file:
            sections = json.load(file)
        if not isinstance(sections, Mapping):
            raise ValueError(f"config {path} must hold a JSON object")
    return CliConfig.from_sections(sections, overrides)
