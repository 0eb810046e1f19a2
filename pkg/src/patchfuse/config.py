"""Run configuration: a flat key=value file with a fixed, typed schema.

Every experiment knob lives under a dotted key (``gen.height``, ``vit.lr``,
``fusion.threshold``). Defaults reproduce the reduced synthetic preset, so an
empty file is a valid config. Parsing is strict: unknown keys, duplicate
keys, and malformed values are rejected with the offending line number.
Comments start the line with ``#``; inline comments are not supported.

The resolved config echoes back through :meth:`RunConfig.to_text` in schema
order, one key per line, so a run directory always records exactly what the
run used, independent of which keys the input file happened to set.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cnn import CnnConfig
from .evaluate import ExperimentConfig
from .exceptions import ConfigError
from .fusion import FusionConfig
from .synthetic import GeneratorSpec
from .vit import VitConfig


def _parse_int(text):
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"expected an integer, got {text!r}") from None


def _parse_float(text):
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"expected a number, got {text!r}") from None


def _parse_str(text):
    if not text:
        raise ValueError("expected a non-empty string")
    return text


def _tuple_parser(element, count, label):
    def parse(text):
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != count:
            raise ValueError(
                f"expected {count} comma-separated {label}, got {text!r}"
            )
        return tuple(element(p) for p in parts)

    return parse


_PARSERS = {
    "int": _parse_int,
    "float": _parse_float,
    "str": _parse_str,
    "int2": _tuple_parser(_parse_int, 2, "integers"),
    "int3": _tuple_parser(_parse_int, 3, "integers"),
    "float2": _tuple_parser(_parse_float, 2, "numbers"),
    "float3": _tuple_parser(_parse_float, 3, "numbers"),
}

# key -> (kind, default); iteration order is the echo order
SCHEMA = {
    "seed": ("int", 0),
    "out.dir": ("str", "run"),
    "gen.height": ("int", 1200),
    "gen.width": ("int", 1600),
    "gen.margin": ("int", 100),
    "gen.benign_color": ("float3", (0.30, 0.45, 0.62)),
    "gen.lesion_color": ("float3", (0.78, 0.55, 0.22)),
    "gen.noise_sigma": ("float", 0.04),
    "gen.lesion_noise_sigma": ("float", 0.06),
    "gen.background_level": ("float", 0.02),
    "gen.lesion_count": ("int2", (1, 3)),
    "gen.lesion_radius": ("float2", (180.0, 320.0)),
    "gen.malignant_coverage": ("float", 0.30),
    "gen.min_contrast": ("float", 0.20),
    "gen.n_benign": ("int", 12),
    "gen.n_malignant": ("int", 18),
    "tile.background_max_fraction": ("float", 0.80),
    "vit.image_size": ("int", 32),
    "vit.sub_patch": ("int", 8),
    "vit.embed_dim": ("int", 64),
    "vit.depth": ("int", 4),
    "vit.heads": ("int", 4),
    "vit.mlp_hidden": ("int", 128),
    "vit.epochs": ("int", 20),
    "vit.lr": ("float", 3e-4),
    "vit.momentum": ("float", 0.9),
    "vit.batch_size": ("int", 16),
    "cnn.input_size": ("int", 64),
    "cnn.channels": ("int3", (8, 16, 32)),
    "cnn.kernel": ("int", 3),
    "cnn.strides": ("int3", (2, 1, 1)),
    "cnn.pool": ("int", 2),
    "cnn.bn_momentum": ("float", 0.1),
    "cnn.epochs": ("int", 30),
    "cnn.lr": ("float", 1e-4),
    "cnn.dropout": ("float", 0.40),
    "cnn.batch_size": ("int", 8),
    "fusion.threshold": ("float", 0.30),
    "eval.k": ("int", 5),
    "eval.flip_fraction": ("float", 0.0),
}


def _format_value(kind, value):
    if kind in ("int2", "int3"):
        return ",".join(str(int(v)) for v in value)
    if kind in ("float2", "float3"):
        return ",".join(repr(float(v)) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    """Immutable view over the schema with a (possibly empty) override map."""

    overrides: tuple = ()

    @classmethod
    def default(cls):
        return cls()

    @classmethod
    def from_mapping(cls, mapping):
        for key in mapping:
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
        return cls(overrides=tuple(sorted(mapping.items())))

    def get(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        for name, value in self.overrides:
            if name == key:
                return value
        return SCHEMA[key][1]

    def replace(self, mapping):
        """New config with ``mapping`` laid over the current overrides."""
        merged = dict(self.overrides)
        for key in mapping:
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
        merged.update(mapping)
        return RunConfig.from_mapping(merged)

    def to_text(self):
        lines = [
            f"{key}={_format_value(kind, self.get(key))}"
            for key, (kind, _) in SCHEMA.items()
        ]
        return "\n".join(lines) + "\n"

    # ---- typed views ----------------------------------------------------

    def generator_spec(self, seed=None):
        return GeneratorSpec(
            height=self.get("gen.height"),
            width=self.get("gen.width"),
            margin=self.get("gen.margin"),
            benign_color=self.get("gen.benign_color"),
            lesion_color=self.get("gen.lesion_color"),
            noise_sigma=self.get("gen.noise_sigma"),
            lesion_noise_sigma=self.get("gen.lesion_noise_sigma"),
            background_level=self.get("gen.background_level"),
            lesion_count=self.get("gen.lesion_count"),
            lesion_radius=self.get("gen.lesion_radius"),
            malignant_coverage=self.get("gen.malignant_coverage"),
            min_contrast=self.get("gen.min_contrast"),
            seed=self.get("seed") if seed is None else int(seed),
        )

    def counts(self):
        return self.get("gen.n_benign"), self.get("gen.n_malignant")

    def vit_config(self):
        return VitConfig(
            image_size=self.get("vit.image_size"),
            sub_patch=self.get("vit.sub_patch"),
            embed_dim=self.get("vit.embed_dim"),
            depth=self.get("vit.depth"),
            heads=self.get("vit.heads"),
            mlp_hidden=self.get("vit.mlp_hidden"),
        )

    def cnn_config(self):
        return CnnConfig(
            input_size=self.get("cnn.input_size"),
            channels=self.get("cnn.channels"),
            kernel=self.get("cnn.kernel"),
            strides=self.get("cnn.strides"),
            pool=self.get("cnn.pool"),
            bn_momentum=self.get("cnn.bn_momentum"),
        )

    def fusion_config(self):
        return FusionConfig(threshold=self.get("fusion.threshold"))

    def experiment_config(self, seed=None):
        return ExperimentConfig(
            k=self.get("eval.k"),
            seed=self.get("seed") if seed is None else int(seed),
            vit_config=self.vit_config(),
            vit_epochs=self.get("vit.epochs"),
            vit_lr=self.get("vit.lr"),
            vit_momentum=self.get("vit.momentum"),
            vit_batch_size=self.get("vit.batch_size"),
            cnn_config=self.cnn_config(),
            cnn_epochs=self.get("cnn.epochs"),
            cnn_lr=self.get("cnn.lr"),
            cnn_dropout=self.get("cnn.dropout"),
            cnn_batch_size=self.get("cnn.batch_size"),
            fusion=self.fusion_config(),
            background_max_fraction=self.get("tile.background_max_fraction"),
            flip_fraction=self.get("eval.flip_fraction"),
        )


def parse_run_config(text):
    """Parse key=value text into a RunConfig; errors carry the line number."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {line!r}", line=lineno)
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        kind = SCHEMA[key][0]
        try:
            values[key] = _PARSERS[kind](value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", line=lineno) from None
    return RunConfig.from_mapping(values)


def load_run_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_run_config(f.read())


def write_resolved_config(path, config):
    with open(path, "w", encoding="utf-8") as f:
        f.write(config.to_text())
