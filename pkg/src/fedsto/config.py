"""INI-style experiment configuration with per-field validation.

Sections: [model] [federation] [losses] [pseudo] [data] [run]. Every key has a
default; unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field

from .losses import LossWeights
from .model import ArchConfig, ConfigError, scope_parts


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 3
    sample_ratio: float = 1.0
    warmup_rounds: int = 10
    phase1_rounds: int = 20
    phase2_rounds: int = 30
    lr: float = 0.01
    batch_size: int = 8
    local_epochs: int = 1
    # what a Phase-1 upload is billed as: "backbone" or "model_minus_neck"
    phase1_upload: str = "backbone"
    # parameters clients train in Phase 1; "backbone_neck" freezes only the head
    phase1_train: str = "backbone"
    skip_phase1: bool = False
    # model sizes for cost accounting in MB; 0 means measure the toy model
    model_size_mb: float = 0.0
    phase1_size_mb: float = 0.0


@dataclass(frozen=True)
class LossConfig:
    w_cls: float = 0.3
    w_obj: float = 0.7
    w_reg: float = 1.0
    lambda_orn: float = 0.01
    power_iterations: int = 30
    cls_loss: str = "ce"
    focal_gamma: float = 2.0

    def weights(self) -> LossWeights:
        return LossWeights(self.w_cls, self.w_obj, self.w_reg, self.lambda_orn)


@dataclass(frozen=True)
class PseudoConfig:
    tau1: float = 0.1
    tau2: float = 0.6
    ema_decay: float = 0.999
    nms_iou: float = 0.65
    conf_threshold: float = 0.1
    # "local_ema" or "global" (teacher = last broadcast)
    labeler: str = "local_ema"


@dataclass(frozen=True)
class DataConfig:
    mode: str = "noniid"
    server_scenes: int = 200
    client_scenes: int = 400
    test_scenes: int = 100
    aug_noise: float = 0.02


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (1,)
    output: str = "runs/default"
    theory_samples: int = 100000
    theory_triples: int = 20


@dataclass(frozen=True)
class Config:
    model: ArchConfig = field(default_factory=ArchConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def with_updates(self, **sections) -> "Config":
        """``cfg.with_updates(federation={"phase1_rounds": 0})``; result is re-validated."""
        new = {}
        for name, changes in sections.items():
            new[name] = dataclasses.replace(getattr(self, name), **changes)
        cfg = dataclasses.replace(self, **new)
        validate(cfg)
        return cfg


SECTIONS = ("model", "federation", "losses", "pseudo", "data", "run")


def _convert(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip("\"'")
        if typing.get_origin(typ) is tuple:
            items = raw.strip("[]()").replace(",", " ").split()
            return tuple(int(x) for x in items)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _section_types(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_config(text: str) -> Config:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                   default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"line {e.lineno}: key outside any section") from None
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else "?"
        raise ConfigError(f"line {lineno}: cannot parse config line") from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as e:
        raise ConfigError(f"line {e.lineno}: {e.message if hasattr(e, 'message') else e}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s): {unknown}")
    base = Config()
    parts = {}
    for sec in SECTIONS:
        cls = type(getattr(base, sec))
        types = _section_types(cls)
        values = {}
        if cp.has_section(sec):
            for key, raw in cp.items(sec):
                if key not in types:
                    raise ConfigError(f"{sec}.{key}: unknown key")
                values[key] = _convert(raw, types[key], f"{sec}.{key}")
        try:
            parts[sec] = cls(**values)
        except ConfigError as e:
            raise ConfigError(f"{sec}.{e}") from None
    cfg = Config(**parts)
    validate(cfg)
    return cfg


def load_config(path) -> Config:
    with open(path) as fh:
        return parse_config(fh.read())


def validate(cfg: Config) -> None:
    errs: list[str] = []
    f, lo, p, d, r = cfg.federation, cfg.losses, cfg.pseudo, cfg.data, cfg.run
    if f.num_clients < 1:
        errs.append("federation.num_clients: must be >= 1")
    if not 0.0 < f.sample_ratio <= 1.0:
        errs.append("federation.sample_ratio: must lie in (0, 1]")
    for k in ("warmup_rounds", "phase1_rounds", "phase2_rounds"):
        if getattr(f, k) < 0:
            errs.append(f"federation.{k}: must be >= 0")
    if f.lr <= 0:
        errs.append("federation.lr: must be > 0")
    if f.batch_size < 1:
        errs.append("federation.batch_size: must be >= 1")
    if f.local_epochs < 1:
        errs.append("federation.local_epochs: must be >= 1")
    for k in ("phase1_upload", "phase1_train"):
        try:
            scope_parts(getattr(f, k))
        except ValueError as e:
            errs.append(f"federation.{k}: {e}")
    if f.phase1_train not in ("backbone", "backbone_neck"):
        errs.append("federation.phase1_train: must be 'backbone' or 'backbone_neck'")
    if f.model_size_mb < 0 or f.phase1_size_mb < 0:
        errs.append("federation.model_size_mb/phase1_size_mb: must be >= 0")
    for k in ("w_cls", "w_obj", "w_reg"):
        if getattr(lo, k) < 0:
            errs.append(f"losses.{k}: must be >= 0")
    if lo.lambda_orn < 0:
        errs.append("losses.lambda_orn: must be >= 0")
    if lo.power_iterations < 1:
        errs.append("losses.power_iterations: must be >= 1")
    if lo.cls_loss not in ("ce", "focal"):
        errs.append("losses.cls_loss: must be 'ce' or 'focal'")
    if lo.focal_gamma < 0:
        errs.append("losses.focal_gamma: must be >= 0")
    for k in ("tau1", "tau2", "nms_iou", "conf_threshold"):
        if not 0.0 <= getattr(p, k) <= 1.0:
            errs.append(f"pseudo.{k}: must lie in [0, 1]")
    if not p.tau1 < p.tau2:
        errs.append("pseudo.tau1, pseudo.tau2: tau1 must be < tau2")
    if not 0.0 <= p.ema_decay <= 1.0:
        errs.append("pseudo.ema_decay: must lie in [0, 1]")
    if p.labeler not in ("local_ema", "global"):
        errs.append("pseudo.labeler: must be 'local_ema' or 'global'")
    if d.mode.lower().replace("-", "").replace("_", "") not in ("iid", "noniid"):
        errs.append("data.mode: must be 'iid' or 'noniid'")
    elif d.mode.lower().replace("-", "").replace("_", "") == "noniid" and f.num_clients > 3:
        errs.append("federation.num_clients: non-IID mode has only 3 client domains")
    for k in ("server_scenes", "client_scenes", "test_scenes"):
        if getattr(d, k) < 1:
            errs.append(f"data.{k}: must be >= 1")
    if d.aug_noise < 0:
        errs.append("data.aug_noise: must be >= 0")
    if not r.seeds:
        errs.append("run.seeds: at least one seed required")
    if r.theory_samples < 2:
        errs.append("run.theory_samples: must be >= 2")
    if r.theory_triples < 1:
        errs.append("run.theory_triples: must be >= 1")
    if errs:
        raise ConfigError("; ".join(errs))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: Config) -> str:
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
