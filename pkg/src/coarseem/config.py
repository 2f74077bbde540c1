"""INI run configuration with sections data, model, em, baseline and eval.

Every key of every section must be present and unknown keys are errors, so a
config file is a complete record of a run.  Values are coerced to the type
of the matching dataclass default.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .synthgen import GenConfig
from .training import BaselineConfig, ConfigError, EMConfig

SECTIONS = ("data", "model", "em", "baseline", "eval")


@dataclass(frozen=True)
class DataConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    n_part: int = 40
    n_coarse: int = 1000
    n_val: int = 75
    n_test: int = 75


@dataclass(frozen=True)
class EvalConfig:
    pck_threshold: float = 0.1
    seeds: tuple = (0, 1, 2)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    width: int = 16
    em: EMConfig = field(default_factory=EMConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        gen = replace(self.data.gen, seed=seed)
        return RunConfig(
            data=replace(self.data, gen=gen),
            width=self.width,
            em=replace(self.em, seed=seed),
            baseline=replace(self.baseline, seed=seed),
            eval=self.eval,
        )


def _section_items(cfg: RunConfig) -> dict[str, dict]:
    data = {k: v for k, v in cfg.data.gen.to_dict().items()}
    data.update(n_part=cfg.data.n_part, n_coarse=cfg.data.n_coarse, n_val=cfg.data.n_val, n_test=cfg.data.n_test)
    baseline = {f.name: getattr(cfg.baseline, f.name) for f in fields(cfg.baseline) if f.name not in ("width", "seed")}
    em = {f.name: getattr(cfg.em, f.name) for f in fields(cfg.em)}
    return {
        "data": data,
        "model": {"width": cfg.width},
        "em": em,
        "baseline": baseline,
        "eval": {"pck_threshold": cfg.eval.pck_threshold, "seeds": cfg.eval.seeds},
    }


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(like[0]) if like else float
            return tuple(kind(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, items in _section_items(cfg).items():
        parser[name] = {k: _format(v) for k, v in items.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    extra = set(parser.sections()) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown sections: {sorted(extra)}")
    defaults = _section_items(RunConfig())
    values: dict[str, dict] = {}
    for name in SECTIONS:
        if name not in parser:
            raise ConfigError(f"missing section [{name}]")
        given = dict(parser[name])
        unknown = set(given) - set(defaults[name])
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
        missing = [k for k in defaults[name] if k not in given]
        if missing:
            raise ConfigError(f"missing keys in [{name}]: {', '.join(missing)}")
        values[name] = {k: _coerce(given[k], defaults[name][k], f"{name}.{k}") for k in defaults[name]}
    return _build(values)


def _build(values: dict[str, dict]) -> RunConfig:
    data = dict(values["data"])
    counts = {k: data.pop(k) for k in ("n_part", "n_coarse", "n_val", "n_test")}
    try:
        gen = GenConfig.from_dict(data)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[data]: {exc}") from exc
    if min(counts.values()) < 1:
        raise ConfigError("[data]: split counts must be >= 1")
    width = values["model"]["width"]
    if width < 1:
        raise ConfigError("[model]: width must be >= 1")
    em = EMConfig(**values["em"])
    baseline = BaselineConfig(width=width, seed=em.seed, **values["baseline"])
    ev = EvalConfig(**values["eval"])
    if not 0 < ev.pck_threshold <= 1:
        raise ConfigError("[eval]: pck_threshold must lie in (0, 1]")
    return RunConfig(DataConfig(gen=gen, **counts), width, em, baseline, ev)


def load_config(path) -> RunConfig:
    return loads(Path(path).read_text())


def default_config_path() -> Path:
    return Path(__file__).with_name("default.ini")
