"""Run configuration: nested sub-configs, JSON loading, hashing."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..alignment import AlignmentConfig
from ..encoders import EncoderConfig
from ..segmenter import SegmenterConfig

TOGGLES = ("tvp", "cmc", "cmpc", "cmcc", "crf")
SEED_ENV = "PCAS_SEED"


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    epochs: int = 9
    warmup_epochs: int = 2
    lr_main: float = 0.0012
    lr_aux: float = 0.0006
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    seed: int = 0
    pseudo_refresh_epochs: int = 0
    vsem_cls: bool = True
    tvp: bool = True
    cmc: bool = True
    cmpc: bool = True
    cmcc: bool = True
    crf: bool = True

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}")
        if self.lr_main <= 0 or self.lr_aux <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (instance contrast needs two clips)")
        if self.pseudo_refresh_epochs < 0:
            raise ValueError("pseudo_refresh_epochs must be >= 0 (0 = computed once after warm-up)")

    @property
    def enabled_terms(self) -> dict[str, bool]:
        return {"cls": True, "cmc": self.cmc, "cmpc": self.cmpc, "cmcc": self.cmcc}

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["encoder"] = self.encoder.to_dict()
        d["alignment"] = self.alignment.to_dict()
        d["segmenter"] = self.segmenter.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        """Nested sections or flat keys; unknown keys are an error."""
        subs = {"encoder": EncoderConfig, "alignment": AlignmentConfig, "segmenter": SegmenterConfig}
        sub_fields = {name: {f.name for f in fields(kind)} for name, kind in subs.items()}
        top = {f.name for f in fields(cls)} - set(subs)
        sections: dict[str, dict] = {name: {} for name in subs}
        kw = {}
        for key, value in d.items():
            if key in subs:
                if not isinstance(value, dict):
                    raise ValueError(f"config section '{key}' must be an object")
                unknown = set(value) - sub_fields[key]
                if unknown:
                    raise ValueError(f"unknown {key} fields: {sorted(unknown)}")
                sections[key].update(value)
            elif key in top:
                kw[key] = value
            else:
                owners = [name for name, names in sub_fields.items() if key in names]
                if len(owners) != 1:
                    raise ValueError(f"unknown or ambiguous config field '{key}'")
                sections[owners[0]][key] = value
        for name, kind in subs.items():
            kw[name] = kind.from_dict(sections[name])
        return cls(**kw)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_toggles(self, **toggles) -> RunConfig:
        bad = set(toggles) - set(TOGGLES)
        if bad:
            raise ValueError(f"unknown toggles {sorted(bad)}")
        d = self.to_dict()
        d.update(toggles)
        return RunConfig.from_dict(d)


def load_config(path: Path | None = None, env: dict | None = None) -> RunConfig:
    """Read a JSON config (every field optional); PCAS_SEED overrides the seed."""
    env = os.environ if env is None else env
    d = json.loads(Path(path).read_text()) if path else {}
    if SEED_ENV in env:
        d["seed"] = int(env[SEED_ENV])
    return RunConfig.from_dict(d)
