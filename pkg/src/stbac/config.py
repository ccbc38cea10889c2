"""Run configuration.

A run is described by one UTF-8 file of ``[section]`` headers and ``key = value``
lines. Every key has a default, so an empty file is a valid config. Unknown
sections or keys, unparsable values and out-of-range values raise
:class:`ConfigError` carrying the offending ``section.key`` path.

Sections and their keys::

    [run]           seed, output_dir
    [dataset]       path, top_k_genes, plus every SynthConfig field
                    (dispersion_range written as "low, high")
    [gene_encoder]  every GeneEncoderConfig field except seed
    [contrastive]   every ContrastiveConfig field except seed, plus gene_embedding
    [eval]          every EvalConfig field, plus protocol

``alpha`` may be left empty for the class-count default. List values are comma
separated. ``#`` starts a comment, also after a value. The run seed feeds the
synthetic generator and both training stages.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .contrastive import ContrastiveConfig
from .dataio import SynthConfig
from .evaluation import EvalConfig
from .gene_encoder import GeneEncoderConfig

OUTPUT_ROOT_ENV = "STBAC_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "stbac-runs"
GENE_EMBEDDINGS = ("encoder", "log-counts")
PROTOCOLS = ("checkpoint", "louo")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _parse_list(text: str, item: Callable[[str], Any]) -> list:
    return [item(t.strip()) for t in text.split(",") if t.strip()]


def _parse_optional_float(text: str) -> float | None:
    return None if text.strip() in ("", "auto", "none") else float(text)


def _parser_for(default: Any) -> Callable[[str], Any]:
    if isinstance(default, bool):
        return lambda t: {"true": True, "false": False}[t.strip().lower()]
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, str):
        return str.strip
    if isinstance(default, (list, tuple)):
        item = type(default[0]) if default else str
        kind = type(default)
        return lambda t: kind(_parse_list(t, item))
    return _parse_optional_float


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _defaults(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        else:
            out[f.name] = f.default_factory()
    return out


# sections whose keys are a stage dataclass's fields; _EXTRAS adds keys the dataclasses lack
_STAGES = {
    "dataset": SynthConfig,
    "gene_encoder": GeneEncoderConfig,
    "contrastive": ContrastiveConfig,
    "eval": EvalConfig,
}
_EXTRAS: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "output_dir": ""},
    "dataset": {"path": "", "top_k_genes": 1000},
    "contrastive": {"gene_embedding": "encoder"},
    "eval": {"protocol": "checkpoint"},
}
_OPTIONAL_FLOATS = {("gene_encoder", "alpha")}


def _stage_keys(section: str) -> dict[str, Any]:
    cls = _STAGES.get(section)
    if cls is None:
        return {}
    keys = _defaults(cls)
    keys.pop("seed", None)
    return keys


def _check_extra(section: str, key: str, value: Any) -> None:
    if key == "seed" and value < 0:
        raise ValueError("must be >= 0")
    if key == "top_k_genes" and value < 1:
        raise ValueError("must be >= 1")
    if key == "gene_embedding" and value not in GENE_EMBEDDINGS:
        raise ValueError(f"expected one of {GENE_EMBEDDINGS}, got {value!r}")
    if key == "protocol" and value not in PROTOCOLS:
        raise ValueError(f"expected one of {PROTOCOLS}, got {value!r}")


@dataclass
class RunConfig:
    """Typed view of a config file; stage configs already carry the run seed."""

    seed: int = 0
    output_dir: str = ""
    dataset_path: str = ""
    top_k_genes: int = 1000
    synth: SynthConfig = field(default_factory=SynthConfig)
    gene: GeneEncoderConfig = field(default_factory=GeneEncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    gene_embedding: str = "encoder"
    eval: EvalConfig = field(default_factory=EvalConfig)
    protocol: str = "checkpoint"

    def with_seed(self, seed: int) -> RunConfig:
        if seed < 0:
            raise ConfigError("run.seed", "must be >= 0")
        return dataclasses.replace(
            self,
            seed=seed,
            synth=dataclasses.replace(self.synth, seed=seed),
            gene=dataclasses.replace(self.gene, seed=seed),
            contrastive=dataclasses.replace(self.contrastive, seed=seed),
        )

    def sections(self) -> dict[str, dict[str, Any]]:
        """Resolved values keyed like the config file (output_dir excluded)."""
        stage_objs = {"dataset": self.synth, "gene_encoder": self.gene, "contrastive": self.contrastive, "eval": self.eval}
        extras = {
            "run": {"seed": self.seed},
            "dataset": {"path": self.dataset_path, "top_k_genes": self.top_k_genes},
            "contrastive": {"gene_embedding": self.gene_embedding},
            "eval": {"protocol": self.protocol},
        }
        out: dict[str, dict[str, Any]] = {}
        for section in ("run", "dataset", "gene_encoder", "contrastive", "eval"):
            values = dict(extras.get(section, {}))
            obj = stage_objs.get(section)
            if obj is not None:
                values.update({k: getattr(obj, k) for k in _stage_keys(section)})
            out[section] = values
        return out

    def canonical_text(self) -> str:
        lines = []
        for section, values in self.sections().items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_format(values[k])}" for k in sorted(values))
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def output_root(self, override: str | os.PathLike | None = None) -> Path:
        """``override`` beats ``[run] output_dir``, which beats the environment variable."""
        for candidate in (override, self.output_dir, os.environ.get(OUTPUT_ROOT_ENV)):
            if candidate:
                return Path(candidate)
        return Path(DEFAULT_OUTPUT_ROOT)


def parse_config(text: str) -> RunConfig:
    """Parse config text into a :class:`RunConfig`; see the module docstring for keys."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from exc

    parsed: dict[str, dict[str, Any]] = {s: {} for s in _EXTRAS.keys() | _STAGES.keys()}
    for section in cp.sections():
        if section not in parsed:
            raise ConfigError(section, f"unknown section; expected one of {sorted(parsed)}")
        stage_keys, extras = _stage_keys(section), _EXTRAS.get(section, {})
        for key, raw in cp.items(section):
            path = f"{section}.{key}"
            if key in extras:
                default = extras[key]
            elif key in stage_keys:
                default = stage_keys[key]
            else:
                raise ConfigError(path, "unknown key")
            parse = _parse_optional_float if (section, key) in _OPTIONAL_FLOATS else _parser_for(default)
            try:
                value = parse(raw)
            except (ValueError, KeyError) as exc:
                raise ConfigError(path, f"cannot parse {raw!r}") from exc
            try:
                if key in extras:
                    _check_extra(section, key, value)
                else:
                    # range checks live in the stage dataclasses; try the key on its own
                    _STAGES[section](**{key: value})
            except (ValueError, TypeError) as exc:
                raise ConfigError(path, str(exc)) from exc
            parsed[section][key] = value

    def stage(section: str):
        own = {k: v for k, v in parsed[section].items() if k not in _EXTRAS.get(section, {})}
        try:
            return _STAGES[section](**own)
        except (ValueError, TypeError) as exc:
            raise ConfigError(section, str(exc)) from exc

    run, ds, con, ev = parsed["run"], parsed["dataset"], parsed["contrastive"], parsed["eval"]
    cfg = RunConfig(
        output_dir=run.get("output_dir", ""),
        dataset_path=ds.get("path", ""),
        top_k_genes=ds.get("top_k_genes", 1000),
        synth=stage("dataset"),
        gene=stage("gene_encoder"),
        contrastive=stage("contrastive"),
        gene_embedding=con.get("gene_embedding", "encoder"),
        eval=stage("eval"),
        protocol=ev.get("protocol", "checkpoint"),
    )
    return cfg.with_seed(run.get("seed", 0))


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Read a config file; ``None`` gives the all-defaults config."""
    if path is None:
        return parse_config("")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise ConfigError("<file>", f"{path} is not UTF-8") from exc
    return parse_config(text)
