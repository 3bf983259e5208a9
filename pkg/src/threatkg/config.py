"""Plain-text pipeline configuration (INI sections, key = value).

Command-line flags override file values, and the output directory can
additionally be overridden by the THREATKG_OUTPUT_DIR environment
variable (CLI flag wins).
"""

from __future__ import annotations

import configparser
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InputFormatError
from .graph import BuildOptions
from .training import TrainConfig


@dataclass
class InputPaths:
    cpe: list[str] = field(default_factory=list)
    cve: list[str] = field(default_factory=list)
    cwe: list[str] = field(default_factory=list)
    capec: list[str] = field(default_factory=list)


@dataclass
class EvalConfig:
    n_test: int = 100
    per_cve_negatives: int = 50
    seed: int = 0
    targets: list[str] = field(default_factory=lambda: ["all", "cve-cpe", "cve-cwe"])


@dataclass
class OpenWorldConfig:
    older_graph: str = ""
    newer_graph: str = ""


@dataclass
class PredictConfig:
    alpha: float = 0.5
    top_k: int | None = None
    target: str = "CPE"


@dataclass
class PipelineConfig:
    inputs: InputPaths = field(default_factory=InputPaths)
    build: BuildOptions = field(default_factory=BuildOptions)
    snapshot: str = ""
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    open_world: OpenWorldConfig = field(default_factory=OpenWorldConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    output_dir: str = "out"


def _paths(value: str) -> list[str]:
    return [p.strip() for p in value.split(",") if p.strip()]


def _bool(section, key: str, default: bool) -> bool:
    raw = section.get(key)
    if raw is None:
        return default
    raw = raw.strip().lower()
    if raw in ("true", "yes", "1", "on"):
        return True
    if raw in ("false", "no", "0", "off"):
        return False
    raise InputFormatError(f"boolean expected for {key}, got {raw!r}")


def load_config(path) -> PipelineConfig:
    """Read a pipeline config file; unknown keys are rejected."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise InputFormatError(f"config file not found: {path}")
    config = PipelineConfig()
    known = {"inputs", "build", "train", "eval", "open", "predict", "output"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise InputFormatError(f"unknown config sections: {sorted(unknown)}")

    if parser.has_section("inputs"):
        section = parser["inputs"]
        _reject_unknown(section, {"cpe", "cve", "cwe", "capec"}, "inputs")
        config.inputs = InputPaths(
            cpe=_paths(section.get("cpe", "")),
            cve=_paths(section.get("cve", "")),
            cwe=_paths(section.get("cwe", "")),
            capec=_paths(section.get("capec", "")),
        )

    if parser.has_section("build"):
        section = parser["build"]
        _reject_unknown(
            section,
            {"merge_versions", "remove_unconnected", "date_cutoff",
             "with_capec", "with_cvss", "snapshot"},
            "build",
        )
        cutoff_raw = section.get("date_cutoff", "").strip()
        cutoff = None
        if cutoff_raw and cutoff_raw != "-":
            try:
                cutoff = dt.date.fromisoformat(cutoff_raw)
            except ValueError as exc:
                raise InputFormatError(f"bad date_cutoff: {exc}") from exc
        config.build = BuildOptions(
            merge_versions=_bool(section, "merge_versions", True),
            remove_unconnected=_bool(section, "remove_unconnected", True),
            date_cutoff=cutoff,
            with_capec=_bool(section, "with_capec", False),
            with_cvss=_bool(section, "with_cvss", False),
        )
        config.snapshot = section.get("snapshot", "").strip()

    if parser.has_section("train"):
        section = parser["train"]
        _reject_unknown(
            section,
            {"model", "k", "eta", "loss", "margin", "epochs", "batch_size",
             "learning_rate", "seed", "regularization_weight", "norm_order",
             "max_grad_norm"},
            "train",
        )
        try:
            max_grad = section.get("max_grad_norm", "").strip()
            config.train = TrainConfig(
                kind=section.get("model", "TransE").strip(),
                k=section.getint("k", 32),
                eta=section.getint("eta", 2),
                loss=section.get("loss", "pairwise_margin").strip(),
                margin=section.getfloat("margin", 1.0),
                epochs=section.getint("epochs", 100),
                batch_size=section.getint("batch_size", 128),
                learning_rate=section.getfloat("learning_rate", 0.05),
                seed=section.getint("seed", 0),
                regularization_weight=section.getfloat("regularization_weight", 0.0),
                norm_order=section.getint("norm_order", 2),
                max_grad_norm=float(max_grad) if max_grad else None,
            )
        except ValueError as exc:
            raise InputFormatError(f"bad [train] value: {exc}") from exc

    if parser.has_section("eval"):
        section = parser["eval"]
        _reject_unknown(
            section, {"n_test", "per_cve_negatives", "seed", "targets"}, "eval"
        )
        try:
            config.eval = EvalConfig(
                n_test=section.getint("n_test", 100),
                per_cve_negatives=section.getint("per_cve_negatives", 50),
                seed=section.getint("seed", 0),
                targets=[t.strip() for t in section.get(
                    "targets", "all, cve-cpe, cve-cwe").split(",") if t.strip()],
            )
        except ValueError as exc:
            raise InputFormatError(f"bad [eval] value: {exc}") from exc

    if parser.has_section("open"):
        section = parser["open"]
        _reject_unknown(section, {"older_graph", "newer_graph"}, "open")
        config.open_world = OpenWorldConfig(
            older_graph=section.get("older_graph", "").strip(),
            newer_graph=section.get("newer_graph", "").strip(),
        )

    if parser.has_section("predict"):
        section = parser["predict"]
        _reject_unknown(section, {"alpha", "top_k", "target"}, "predict")
        top_k_raw = section.get("top_k", "").strip()
        try:
            config.predict = PredictConfig(
                alpha=section.getfloat("alpha", 0.5),
                top_k=int(top_k_raw) if top_k_raw else None,
                target=section.get("target", "CPE").strip(),
            )
        except ValueError as exc:
            raise InputFormatError(f"bad [predict] value: {exc}") from exc

    if parser.has_section("output"):
        section = parser["output"]
        _reject_unknown(section, {"directory"}, "output")
        config.output_dir = section.get("directory", "out").strip()

    _validate_targets(config.eval.targets)
    return config


def _reject_unknown(section, allowed: set[str], name: str):
    unknown = set(section.keys()) - allowed
    if unknown:
        raise InputFormatError(f"unknown keys in [{name}]: {sorted(unknown)}")


def _validate_targets(targets: list[str]):
    legal = {"all", "cve-cpe", "cve-cwe"}
    bad = [t for t in targets if t not in legal]
    if bad:
        raise InputFormatError(f"unknown eval targets {bad}; expected subset of {sorted(legal)}")


def resolve_output_dir(cli_value: str | None, config: PipelineConfig, env: dict) -> Path:
    """CLI flag > THREATKG_OUTPUT_DIR > config > ./out."""
    if cli_value:
        return Path(cli_value)
    env_value = env.get("THREATKG_OUTPUT_DIR")
    if env_value:
        return Path(env_value)
    return Path(config.output_dir)
