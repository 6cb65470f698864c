"""Plain-text ``key = value`` run configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Tuple, Union

from .allocator import DEFAULT_BITS, DEFAULT_CAP
from .calibrate import CalibOptions
from .nervlite import ModelSpec, TrainOptions


class ConfigError(ValueError):
    pass


def _ints(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _blocks(text: str) -> Tuple[Tuple[int, int], ...]:
    return tuple(tuple(int(p) for p in b.split("x")) for b in text.split(",") if b.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text

    return parse


def _show(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("x".join(str(p) for p in v) for v in value)
        return ",".join(str(v) for v in value)
    return str(value)


_spec, _train, _calib = ModelSpec(), TrainOptions(), CalibOptions()

# key -> (default, parser)
SCHEMA: Dict[str, Tuple[object, Callable[[str], object]]] = {
    "seed": (0, int),
    "clip.frames": (_spec.frames, int),
    "clip.height": (_spec.height, int),
    "clip.width": (_spec.width, int),
    "clip.motif": ("blobs", _choice("blobs", "gradient", "checker-drift")),
    "model.posenc_freqs": (_spec.posenc_freqs, int),
    "model.posenc_base": (_spec.posenc_base, float),
    "model.stem_dims": (_spec.stem_dims, _ints),
    "model.seed_shape": (_spec.seed_shape, _ints),
    "model.blocks": (_spec.blocks, _blocks),
    "train.epochs": (_train.epochs, int),
    "train.lr": (_train.lr, float),
    "train.batch": (_train.batch, int),
    "train.lr_min_frac": (_train.lr_min_frac, float),
    "calib.iterations": (_calib.iterations, int),
    "calib.lr": (_calib.lr, float),
    "calib.batch": (_calib.batch, int),
    "calib.lambda": (_calib.lam, float),
    "calib.beta_start": (_calib.beta_start, float),
    "calib.beta_end": (_calib.beta_end, float),
    "calib.phase1_frac": (_calib.phase1_frac, float),
    "calib.granularity": ("network", _choice("network", "layer")),
    "quant.steps": ("channel", _choice("channel", "layer")),
    "rate.targets": ((3.0, 4.0, 6.0, 8.0), _floats),
    "rate.tolerance": (0.05, float),
    "rate.candidate_bits": (DEFAULT_BITS, _ints),
    "rate.cap": (DEFAULT_CAP, int),
    "path.clip": ("clip.bin", str),
    "path.checkpoint": ("model.ckpt", str),
    "path.out": ("out", str),
}


@dataclass
class RunConfig:
    values: Dict[str, object] = field(default_factory=lambda: {k: d for k, (d, _) in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, text: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            self.values[key] = SCHEMA[key][1](text.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key = value")
            cfg.set(key.strip(), value)
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def to_text(self) -> str:
        return "".join(f"{k} = {_show(self.values[k])}\n" for k in SCHEMA)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            posenc_freqs=self["model.posenc_freqs"],
            posenc_base=self["model.posenc_base"],
            stem_dims=self["model.stem_dims"],
            seed_shape=self["model.seed_shape"],
            blocks=self["model.blocks"],
            frames=self["clip.frames"],
        )

    def train_options(self) -> TrainOptions:
        return TrainOptions(
            epochs=self["train.epochs"],
            lr=self["train.lr"],
            batch=self["train.batch"],
            seed=self["seed"],
            lr_min_frac=self["train.lr_min_frac"],
        )

    def calib_options(self) -> CalibOptions:
        return CalibOptions(
            iterations=self["calib.iterations"],
            lr=self["calib.lr"],
            batch=self["calib.batch"],
            lam=self["calib.lambda"],
            beta_start=self["calib.beta_start"],
            beta_end=self["calib.beta_end"],
            phase1_frac=self["calib.phase1_frac"],
            seed=self["seed"],
        )

    def targets(self) -> List[float]:
        return list(self["rate.targets"])
