"""Run configuration: a flat registry of dotted keys with strict parsing.

Config files are UTF-8 lines of ``section.key=value``; blank lines and
``#`` comments are allowed, unknown keys are an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from atmseg.encoder import EncoderConfig
from atmseg.losses import LossWeights
from atmseg.model import ModelConfig
from atmseg.shrunk import ShrunkConfig


class ConfigError(ValueError):
    pass


def _parse_int(v):
    return int(v)


def _parse_float(v):
    return float(v)


def _parse_str(v):
    return v


def _parse_bool(v):
    lv = v.lower()
    if lv in ("1", "true", "yes", "on"):
        return True
    if lv in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_ints(v):
    return tuple(int(x) for x in v.split(",") if x.strip())


def _parse_tasks(v):
    # "0,1,2,3|4,5" -> ((0,1,2,3), (4,5))
    return tuple(tuple(int(x) for x in part.split(",") if x.strip())
                 for part in v.split("|") if part.strip())


# key -> (parser, default)
SCHEMA = {
    "seed": (_parse_int, 0),
    "out": (_parse_str, "run_out"),

    "data.dir": (_parse_str, ""),
    "data.classes": (_parse_int, 5),
    "data.image_size": (_parse_int, 64),
    "data.train_count": (_parse_int, 200),
    "data.val_count": (_parse_int, 50),
    "data.shapes_min": (_parse_int, 1),
    "data.shapes_max": (_parse_int, 3),
    "data.size_min": (_parse_int, 18),
    "data.size_max": (_parse_int, 40),
    "data.noise_std": (_parse_float, 8.0),
    "data.seed": (_parse_int, 0),

    "encoder.patch": (_parse_int, 8),
    "encoder.width": (_parse_int, 64),
    "encoder.depth": (_parse_int, 4),
    "encoder.heads": (_parse_int, 4),
    "encoder.mlp_ratio": (_parse_float, 4.0),
    "encoder.taps": (_parse_ints, (2, 3, 4)),

    "variant.kind": (_parse_str, "single"),
    "variant.qd_layer": (_parse_int, 2),
    "variant.qd_stride": (_parse_int, 2),
    "variant.edge_tau": (_parse_float, 0.7),

    "head.kind": (_parse_str, "atm"),

    "loss.focal_weight": (_parse_float, 20.0),
    "loss.dice_weight": (_parse_float, 1.0),
    "loss.edge_weight": (_parse_float, 1.0),
    "loss.focal_gamma": (_parse_float, 2.0),
    "loss.dice_smooth": (_parse_float, 1.0),

    "optim.lr": (_parse_float, 0.5),
    "optim.momentum": (_parse_float, 0.9),
    "optim.steps": (_parse_int, 2000),
    "optim.batch": (_parse_int, 8),
    "optim.lr_decay_every": (_parse_int, 0),
    "optim.lr_decay_factor": (_parse_float, 0.1),
    "optim.eval_every": (_parse_int, 250),
    "optim.stop_at_miou": (_parse_float, 0.0),

    "augment.flip": (_parse_bool, False),
    "augment.scale_crop": (_parse_bool, False),

    "cl.tasks": (_parse_tasks, ((0, 1, 2, 3), (4, 5))),
    "cl.steps_per_task": (_parse_int, 1500),

    "eval.checkpoint": (_parse_str, ""),
    "infer.checkpoint": (_parse_str, ""),
    "infer.inputs": (_parse_str, ""),

    "cost.presets": (_parse_str, ""),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: d for k, (_, d) in SCHEMA.items()}
        merged.update(self.values)
        self.values = merged

    def __getitem__(self, key):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        return self.values[key]

    def set(self, key, raw_value: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        parser, _ = SCHEMA[key]
        try:
            self.values[key] = parser(raw_value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc
        return self

    def text(self) -> str:
        """Canonical serialized form (sorted keys; output paths excluded so
        two runs of one config hash identically wherever they land)."""
        lines = []
        for key in sorted(self.values):
            if key == "out":
                continue
            v = self.values[key]
            if isinstance(v, tuple) and v and isinstance(v[0], tuple):
                s = "|".join(",".join(str(x) for x in part) for part in v)
            elif isinstance(v, tuple):
                s = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                s = "true" if v else "false"
            else:
                s = str(v)
            lines.append(f"{key}={s}")
        return "\n".join(lines) + "\n"

    # ---- builders -------------------------------------------------------

    def encoder_config(self) -> EncoderConfig:
        size = self["data.image_size"]
        return EncoderConfig(
            patch=self["encoder.patch"],
            width=self["encoder.width"],
            depth=self["encoder.depth"],
            heads=self["encoder.heads"],
            mlp_ratio=self["encoder.mlp_ratio"],
            image_hw=(size, size),
            tap_layers=self["encoder.taps"],
        )

    def variant_config(self) -> ShrunkConfig:
        kind = self["variant.kind"]
        return ShrunkConfig(
            variant=kind,
            qd_layer=self["variant.qd_layer"] if kind == "shrunk" else 0,
            qd_stride=self["variant.qd_stride"],
            edge_tau=self["variant.edge_tau"],
        )

    def model_config(self, n_classes=None) -> ModelConfig:
        return ModelConfig(
            encoder=self.encoder_config(),
            variant=self.variant_config(),
            head=self["head.kind"],
            n_classes=n_classes if n_classes is not None else self["data.classes"],
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            focal=self["loss.focal_weight"],
            dice=self["loss.dice_weight"],
            edge=self["loss.edge_weight"],
            focal_gamma=self["loss.focal_gamma"],
            dice_smooth=self["loss.dice_smooth"],
        )


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        try:
            cfg.set(key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)
