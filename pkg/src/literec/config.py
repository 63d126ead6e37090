"""Run configuration: a flat ``section.key=value`` file plus overrides.

Precedence, lowest first: dataclass defaults, the ``train.profile`` preset,
the config file (``--config`` or ``$LLREC_CONFIG``), then ``--set`` and
dedicated command-line flags. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Mapping, get_type_hints

from .errors import ContractError
from .generative import GenConfig
from .item_encoder import ItemEncoderConfig
from .rec_encoder import RecEncoderConfig
from .training import TrainConfig

ENV_VAR = "LLREC_CONFIG"


@dataclass
class DataSection:
    path: str = ""
    format: str = "movielens-dat"
    items_path: str = ""
    kcore: int = 5
    min_freq: int = 1


@dataclass
class EvalSection:
    ks: tuple[int, ...] = (10, 20)
    topn_ks: tuple[int, ...] = (1, 5, 10)
    negatives: int = 99
    include_valid: bool = True


@dataclass
class BenchSection:
    beam_widths: tuple[int, ...] = (1, 5, 20)
    warmup: int = 3
    reps: int = 5
    batches: int = 100
    batch_size: int = 32
    k: int = 20


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    item: ItemEncoderConfig = field(default_factory=ItemEncoderConfig)
    rec: RecEncoderConfig = field(default_factory=RecEncoderConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    out: str = "runs/default"
    seed: int = 0
    profile: str = "desk"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_lines(self) -> list[str]:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if is_dataclass(value):
                for g in fields(value):
                    lines.append(f"{f.name}.{g.name}={_render(getattr(value, g.name))}")
            else:
                lines.append(f"{f.name}={_render(value)}")
        return lines


def _render(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(map(str, value))
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(raw: str, hint, key: str):
    text = raw.strip()
    origin = getattr(hint, "__origin__", None)
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if origin in (tuple, list):
            return tuple(int(p) for p in text.split(",") if p.strip())
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot read {raw!r} as {getattr(hint, '__name__', hint)}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _known_keys() -> dict[str, tuple[str, str | None, object]]:
    keys = {}
    top_hints = get_type_hints(RunConfig)
    for f in fields(RunConfig):
        hint = top_hints[f.name]
        if is_dataclass(hint):
            sub_hints = get_type_hints(hint)
            for g in fields(hint):
                keys[f"{f.name}.{g.name}"] = (f.name, g.name, sub_hints[g.name])
        else:
            keys[f.name] = (f.name, None, hint)
    return keys


def build_config(
    path: str | os.PathLike | None = None,
    overrides: Mapping[str, str] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    env = os.environ if env is None else env
    values: dict[str, str] = {}
    path = path or env.get(ENV_VAR) or None
    if path:
        p = Path(path)
        if not p.is_file():
            raise ContractError(f"config file {p} does not exist")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    values.update(overrides or {})
    known = _known_keys()
    unknown = sorted(k for k in values if k not in known)
    if unknown:
        raise ContractError(f"unknown config key(s): {', '.join(unknown)}")

    profile = values.get("profile", "desk")
    cfg = RunConfig(profile=profile)
    cfg.train = TrainConfig.profile(profile)
    sections: dict[str, dict] = {}
    for key, raw in values.items():
        sec, sub, hint = known[key]
        value = _coerce(raw, hint, key)
        if sub is None:
            setattr(cfg, sec, value)
        else:
            sections.setdefault(sec, {})[sub] = value
    if "seed" in values and "seed" not in sections.get("train", {}):
        sections.setdefault("train", {})["seed"] = cfg.seed
    for sec, updates in sections.items():
        current = getattr(cfg, sec)
        try:
            setattr(cfg, sec, type(current)(**{**asdict(current), **updates}))
        except (TypeError, ValueError) as exc:
            raise ContractError(f"invalid {sec} settings: {exc}") from None
    _sync_dropout(cfg, sections)
    return cfg


def _sync_dropout(cfg: RunConfig, sections: dict) -> None:
    """``train.dropout`` drives every model's dropout unless set per model."""
    rate = cfg.train.dropout
    for sec in ("item", "rec", "gen"):
        if "dropout" not in sections.get(sec, {}):
            current = getattr(cfg, sec)
            setattr(cfg, sec, type(current)(**{**asdict(current), "dropout": rate}))
