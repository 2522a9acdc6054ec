"""Structured run configuration shared by every CLI command.

A run configuration is a JSON object with these keys, all optional::

    {
      "seed": 0,                 # root seed, split per subsystem
      "data": "data",            # dataset directory
      "out": "runs",             # output directory
      "variants": ["both", "scl", "tcl"],
      "pretrain_epochs": 0,      # auxiliary-head stage before global training
      "synthetic": {...},        # SyntheticConfig fields
      "network": {"preset": "desk", ...},  # NetworkConfig fields
      "train": {...},            # TrainConfig fields
      "clip": {...},             # ClipSpec fields
      "crops": {"positions": [...], "flips": [false, true]}
    }

Unknown keys at any level raise ``ValueError``. The network's input size,
clip length and channel count are derived from ``clip`` and the dataset,
so they cannot be set under ``network``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .clips import ClipSpec, CropSet
from .network import NetworkConfig, desk_config, full_config
from .synthetic import ActionClass, SyntheticConfig
from .trainer import TrainConfig

VARIANTS = ("both", "scl", "tcl")
PRESETS = {"desk": desk_config, "full": full_config}
_DERIVED_NET_KEYS = ("input_size", "l_t", "channels", "num_classes", "paths")
_TOP_KEYS = ("seed", "data", "out", "variants", "pretrain_epochs",
             "synthetic", "network", "train", "clip", "crops")


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ValueError(f"unknown key(s) in {section}: {sorted(unknown)}")


def _field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _default_clip() -> dict:
    return {"l_x": 32, "l_y": 32, "l_t": 5, "s_t": 4, "d_t": 2, "clips_per_sequence": 5}


@dataclass
class RunConfig:
    seed: int = 0
    data: str = "data"
    out: str = "runs"
    variants: tuple = VARIANTS
    pretrain_epochs: int = 0
    synthetic: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    clip: dict = field(default_factory=dict)
    crops: dict = field(default_factory=dict)

    def __post_init__(self):
        self.variants = tuple(self.variants)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ValueError(f"variants must be a non-empty subset of {VARIANTS}, got {list(self.variants)}")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")
        _check_keys("synthetic", self.synthetic, [n for n in _field_names(SyntheticConfig) if n != "seed"])
        _check_keys("network", self.network, ["preset"] + [n for n in _field_names(NetworkConfig)
                                                           if n not in _DERIVED_NET_KEYS])
        if self.network.get("preset", "desk") not in PRESETS:
            raise ValueError(f"network.preset must be one of {sorted(PRESETS)}")
        _check_keys("train", self.train, [n for n in _field_names(TrainConfig) if n != "seed"])
        _check_keys("clip", self.clip, _field_names(ClipSpec))
        _check_keys("crops", self.crops, _field_names(CropSet))
        # build everything once so bad values fail at load time
        self.synthetic_config()
        self.train_config()
        self.clip_spec()
        self.crop_set()
        self.network_config(num_classes=2, channels=1, paths="both")

    # -- seeds -------------------------------------------------------------

    def seeds(self) -> dict:
        """Independent integer seeds for data, init and training, from ``seed``."""
        kids = np.random.SeedSequence(self.seed).spawn(3)
        return {name: int(k.generate_state(1)[0])
                for name, k in zip(("data", "init", "train"), kids)}

    # -- builders ----------------------------------------------------------

    def synthetic_config(self) -> SyntheticConfig:
        d = dict(self.synthetic)
        if "classes" in d:
            d["classes"] = tuple(c if isinstance(c, ActionClass) else ActionClass(
                **{**c, "velocity": tuple(c.get("velocity", (0.0, 0.0)))}) for c in d["classes"])
        for key in ("frame_size", "speed_range"):
            if key in d:
                d[key] = tuple(d[key])
        return SyntheticConfig(seed=self.seeds()["data"], **d)

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        if d.get("trainable") is not None:
            d["trainable"] = tuple(d["trainable"])
        return TrainConfig(seed=self.seeds()["train"], **d)

    def clip_spec(self) -> ClipSpec:
        return ClipSpec(**{**_default_clip(), **self.clip})

    def crop_set(self) -> CropSet:
        d = {k: tuple(v) for k, v in self.crops.items()}
        return CropSet(**d)

    def network_config(self, num_classes: int, channels: int, paths: str) -> NetworkConfig:
        over = dict(self.network)
        preset = PRESETS[over.pop("preset", "desk")]
        spec = self.clip_spec()
        base = preset(num_classes).to_dict()
        base.update(over)
        base.update(input_size=(spec.l_x, spec.l_y), l_t=spec.l_t, channels=channels,
                    num_classes=num_classes, paths=paths)
        return NetworkConfig.from_dict(base)

    # -- io ----------------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("a run configuration must be a JSON object")
        _check_keys("run configuration", d, _TOP_KEYS)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def resolved(self) -> dict:
        """Every effective value, defaults included."""
        return _jsonable({
            "seed": self.seed,
            "seeds": self.seeds(),
            "data": self.data,
            "out": self.out,
            "variants": list(self.variants),
            "pretrain_epochs": self.pretrain_epochs,
            "synthetic": asdict(self.synthetic_config()),
            "network": {"preset": self.network.get("preset", "desk"),
                        **{k: v for k, v in self.network.items() if k != "preset"}},
            "train": asdict(self.train_config()),
            "clip": asdict(self.clip_spec()),
            "crops": asdict(self.crop_set()),
        })

    def echo(self, directory, extra: dict | None = None) -> Path:
        """Write :meth:`resolved` (plus ``extra``) to ``directory/resolved_config.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "resolved_config.json"
        body = {**self.resolved(), **_jsonable(extra or {})}
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return path


def set_path(cfg_dict: dict, dotted: str, value: Any) -> None:
    """Set ``a.b.c`` inside a nested dict, creating sections as needed."""
    keys = dotted.split(".")
    node = cfg_dict
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ValueError(f"{dotted}: {k!r} is not a section")
    node[keys[-1]] = value
