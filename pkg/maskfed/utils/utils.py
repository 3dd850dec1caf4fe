import csv
import hashlib
import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import imageio.v3 as iio
import numpy as np
import yaml

from maskfed.federation import FederationConfig
from maskfed.models.masks import MaskPolicy
from maskfed.models.vit import ModelConfig, param_shapes
from maskfed.numerics import MAX_SEED, Matrix
from maskfed.utils.errors import (
    ConfigError,
    ContractViolation,
    DataFormatError,
)

logger = logging.getLogger(__name__)

DATASET_KINDS = ("synth", "cifar10")
ATTACK_MODES = ("paper-literal", "pseudo-inverse")
DEFAULT_POLICIES = ("none", "per-epoch:0.5")
DEFAULT_ZERO_PROBS = (0.2, 0.5, 0.8)
DEFAULT_ATTACK_POLICIES = (
    "none",
    "fixed-position",
    "per-epoch:0.2",
    "per-epoch:0.5",
    "per-epoch:0.8",
)
RAW_IMAGE_MAGIC = b"MFIMG\0"
RAW_IMAGE_HEADER = struct.Struct("<6sIIH")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synth"
    path: Optional[str] = None
    classes: int = 4
    per_class: int = 50
    test_per_class: int = 20
    noise: float = 0.1
    resize: Optional[int] = None
    train_size: Optional[int] = None
    test_size: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(
                f"dataset.kind: '{self.kind}' is not one of {DATASET_KINDS}"
            )
        if self.kind == "cifar10" and not self.path:
            raise ConfigError("dataset.path: required for cifar10")
        if self.classes < 2:
            raise ConfigError("dataset.classes: must be >= 2")
        if self.per_class < 1 or self.test_per_class < 0:
            raise ConfigError("dataset.per_class: must be >= 1")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError("dataset.noise: must be in [0, 1]")
        if self.resize is not None and self.resize < 1:
            raise ConfigError("dataset.resize: must be >= 1")
        for name in ("train_size", "test_size"):
            size = getattr(self, name)
            if size is not None and size < 1:
                raise ConfigError(f"dataset.{name}: must be >= 1")


@dataclass(frozen=True)
class AttackConfig:
    """Attack options. ``model`` replaces the experiment model for the
    attack; it must read the same images and labels."""

    mode: str = "pseudo-inverse"
    seeds: tuple[int, ...] = tuple(range(10))
    policies: tuple[str, ...] = DEFAULT_ATTACK_POLICIES
    exact_model: bool = True
    warmup_epochs: int = 0
    model: Optional[ModelConfig] = None

    def __post_init__(self) -> None:
        if self.mode not in ATTACK_MODES:
            raise ConfigError(
                f"attack.mode: '{self.mode}' is not one of {ATTACK_MODES}"
            )
        if not self.seeds:
            raise ConfigError("attack.seeds: at least one seed is needed")
        if any(not 0 <= s < MAX_SEED for s in self.seeds):
            raise ConfigError("attack.seeds: seeds must be u64 values")
        if not self.policies:
            raise ConfigError("attack.policies: at least one policy is needed")
        if self.warmup_epochs < 0:
            raise ConfigError("attack.warmup_epochs: must be >= 0")

    @property
    def mask_policies(self) -> tuple[MaskPolicy, ...]:
        return tuple(MaskPolicy.from_str(p) for p in self.policies)


@dataclass(frozen=True)
class AnalysisConfig:
    epochs: int = 10
    clients: int = 5
    zero_probs: tuple[float, ...] = DEFAULT_ZERO_PROBS
    trials: int = 100000

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("analysis.epochs: must be >= 0")
        if self.clients < 1:
            raise ConfigError("analysis.clients: must be >= 1")
        if self.trials < 1:
            raise ConfigError("analysis.trials: must be >= 1")
        if not self.zero_probs:
            raise ConfigError("analysis.zero_probs: at least one R is needed")
        for r in self.zero_probs:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"analysis.zero_probs: {r} not in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, read from a YAML file.

    The ``federation`` section holds the FederationConfig fields except the
    model, mask policy, seed, telemetry and thread count, which come from
    their own sections and top-level keys.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    policies: tuple[MaskPolicy, ...] = tuple(
        MaskPolicy.from_str(p) for p in DEFAULT_POLICIES
    )
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = "out"
    seed: int = 0
    telemetry: bool = False
    threads: int = 1
    logging_level: Union[int, str] = logging.INFO

    def __post_init__(self) -> None:
        if not 0 <= self.seed < MAX_SEED:
            raise ConfigError(f"seed: {self.seed} is not a u64")
        if not self.policies:
            raise ConfigError("policies: at least one policy is needed")
        if self.dataset.kind == "synth" and (
            self.dataset.classes != self.model.classes
        ):
            raise ConfigError(
                f"dataset.classes: {self.dataset.classes} differs from "
                f"model.classes {self.model.classes}"
            )
        if self.dataset.kind == "cifar10":
            if self.model.channels != 3:
                raise ConfigError("model.channels: CIFAR-10 images are RGB")
            if self.model.classes != 10:
                raise ConfigError("model.classes: CIFAR-10 has 10 classes")
        side = self.image_side
        if side is not None and (
            side != self.model.image_h or side != self.model.image_w
        ):
            raise ConfigError(
                f"dataset.resize: images are {side}x{side}, the model "
                f"expects {self.model.image_h}x{self.model.image_w}"
            )
        shapes = param_shapes(self.model)
        for policy in self.policies:
            policy.validate_layers(shapes)
        attack_model = self.attack.model
        if attack_model is not None:
            for name in ("image_h", "image_w", "channels", "classes"):
                if getattr(attack_model, name) != getattr(self.model, name):
                    raise ConfigError(
                        f"attack.model.{name}: must match model.{name}"
                    )

    @property
    def attack_model(self) -> ModelConfig:
        """Model the attack runs on, made attack-exact when asked to."""
        model = self.attack.model or self.model
        if self.attack.exact_model:
            model = replace(
                model,
                first_block_pre_ln_identity=True,
                first_block_residual=False,
            )
        return model

    @property
    def image_side(self) -> Optional[int]:
        """Side of the images the dataset produces, if fixed by it."""
        if self.dataset.resize is not None:
            return self.dataset.resize
        if self.dataset.kind == "cifar10":
            return 32
        return None

    @staticmethod
    def from_file(path: Path = Path("config.yaml")) -> "ExperimentConfig":
        with open(path) as file:
            config_dict = yaml.load(file, Loader=yaml.FullLoader)
        return ExperimentConfig.from_dict(config_dict or {})

    @staticmethod
    def from_dict(raw: Mapping[str, Any]) -> "ExperimentConfig":
        _check_keys(
            raw,
            {
                "model",
                "federation",
                "policies",
                "layer_zero_probs",
                "dataset",
                "attack",
                "analysis",
                "output_dir",
                "seed",
                "telemetry",
                "threads",
                "logging_level",
            },
            "",
        )
        model = _build(ModelConfig, raw.get("model"), "model")
        attack = _section(raw.get("attack"), "attack")
        attack_model = None
        if attack.get("model") is not None:
            attack_model = _build(
                ModelConfig,
                {**asdict(model), **_section(attack["model"], "attack.model")},
                "attack.model",
            )
        attack.pop("model", None)
        policies = _parse_policies(
            raw.get("policies", DEFAULT_POLICIES),
            _section(raw.get("layer_zero_probs"), "layer_zero_probs"),
        )
        top = {
            key: raw[key]
            for key in (
                "output_dir",
                "seed",
                "telemetry",
                "threads",
                "logging_level",
            )
            if key in raw
        }
        federation = _build(
            FederationConfig,
            raw.get("federation"),
            "federation",
            reserved={
                "model",
                "mask_policy",
                "root_seed",
                "telemetry",
                "threads",
            },
            model=model,
            root_seed=top.get("seed", 0),
            telemetry=bool(top.get("telemetry", False)),
            threads=top.get("threads", 1),
        )
        try:
            return ExperimentConfig(
                model=model,
                federation=federation,
                policies=policies,
                dataset=_build(DatasetConfig, raw.get("dataset"), "dataset"),
                attack=_build(
                    AttackConfig,
                    attack,
                    "attack",
                    reserved={"model"},
                    tuples=True,
                    model=attack_model,
                ),
                analysis=_build(
                    AnalysisConfig,
                    raw.get("analysis"),
                    "analysis",
                    tuples=True,
                ),
                **top,
            )
        except TypeError as e:
            raise ConfigError(f"Invalid configuration: {e}")

    def with_overrides(
        self,
        seed: Optional[int] = None,
        output_dir: Optional[str] = None,
        policy: Optional[str] = None,
        zero_prob: Optional[float] = None,
        epochs: Optional[int] = None,
        clients: Optional[int] = None,
    ) -> "ExperimentConfig":
        """Apply command-line flags, which take precedence over the file.

        ``--epochs`` and ``--clients`` also set m and n of the update-count
        analysis; ``--zero-prob`` fills in the R of ``--policy`` or, alone,
        replaces the R of every random policy.
        """
        config = self
        if seed is not None:
            config = replace(
                config,
                seed=seed,
                federation=replace(config.federation, root_seed=seed),
            )
        if output_dir is not None:
            config = replace(config, output_dir=output_dir)
        layers = {
            p.kind: p.layer_zero_probs for p in config.policies if p.is_random
        }
        if policy is not None:
            text = policy
            if zero_prob is not None and ":" not in policy:
                text = f"{policy}:{zero_prob}"
            parsed = MaskPolicy.from_str(text)
            if parsed.is_random and parsed.kind in layers:
                parsed = replace(parsed, layer_zero_probs=layers[parsed.kind])
            config = replace(config, policies=(parsed,))
        elif zero_prob is not None:
            config = replace(
                config,
                policies=tuple(
                    replace(p, zero_prob=zero_prob) if p.is_random else p
                    for p in config.policies
                ),
            )
        if zero_prob is not None:
            config = replace(
                config,
                analysis=replace(config.analysis, zero_probs=(zero_prob,)),
            )
        if epochs is not None:
            config = replace(
                config,
                federation=replace(config.federation, epochs=epochs),
                analysis=replace(config.analysis, epochs=epochs),
            )
        if clients is not None:
            config = replace(
                config,
                federation=replace(config.federation, num_clients=clients),
                analysis=replace(config.analysis, clients=clients),
            )
        return config

    def as_dict(self) -> dict[str, Any]:
        """Settings that influence results; output location, log level and
        thread count are left out."""
        resolved = asdict(self)
        for key in ("output_dir", "logging_level", "threads"):
            resolved.pop(key)
        resolved["federation"].pop("model")
        resolved["federation"].pop("threads")
        return resolved

    @property
    def sha256(self) -> str:
        """Hash of the resolved configuration, stable across runs."""
        canonical = json.dumps(self.as_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _parse_policies(
    value: Any, layer_zero_probs: Mapping[str, float]
) -> tuple[MaskPolicy, ...]:
    policies = []
    for i, text in enumerate(_as_list(value, "policies")):
        try:
            policy = MaskPolicy.from_str(str(text))
            if policy.is_random and layer_zero_probs:
                policy = replace(policy, layer_zero_probs=layer_zero_probs)
        except ConfigError as e:
            raise ConfigError(f"policies.{i}: {e}")
        policies.append(policy)
    return tuple(policies)


def _as_list(value: Any, path: str) -> list[Any]:
    if isinstance(value, (list, tuple)):
        return list(value)
    raise ConfigError(f"{path}: expected a list, got {value!r}")


def _section(value: Any, path: str) -> dict[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"{path}: expected a mapping, got {value!r}")
    return dict(value)


def _check_keys(
    section: Mapping[str, Any], known: set[str], path: str
) -> None:
    for key in section:
        if key not in known:
            raise ConfigError(f"{path}{key}: unknown key")


def _build(
    cls: Any,
    value: Any,
    path: str,
    reserved: Iterable[str] = (),
    tuples: bool = False,
    **extra: Any,
) -> Any:
    """Construct a config dataclass from a YAML section, naming the dotted
    key path of anything it rejects."""
    section = _section(value, path)
    known = {f.name for f in fields(cls)} - set(reserved)
    _check_keys(section, known, f"{path}.")
    if tuples:
        section = {
            k: tuple(v) if isinstance(v, list) else v
            for k, v in section.items()
        }
    try:
        return cls(**section, **extra)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}")


def csv_text(
    header: Sequence[str],
    rows: Sequence[Sequence[object]],
    comments: Sequence[str] = (),
) -> str:
    """CSV with leading ``#`` comment lines; floats keep repr precision."""
    buffer = io.StringIO()
    for comment in comments:
        buffer.write(f"# {comment}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def atomic_write(path: Path, data: Union[str, bytes]) -> None:
    """Write to a temporary file next to ``path`` and rename it over."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as file:
            file.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_csv(
    path: Path,
    header: Sequence[str],
    rows: Sequence[Sequence[object]],
    config: ExperimentConfig,
    notes: Sequence[str] = (),
) -> None:
    comments = [f"config_sha256={config.sha256} root_seed={config.seed}"]
    atomic_write(path, csv_text(header, rows, [*comments, *notes]))
    logger.info(f"Wrote {len(rows)} rows to {path}")


def _as_pixels(image: Matrix, channels: int) -> np.ndarray:
    h, wc = image.shape
    if channels < 1 or wc % channels:
        raise ContractViolation(
            f"Image of width {wc} does not hold {channels} channels"
        )
    return image.reshape(h, wc // channels, channels)


def write_ppm(path: Path, image: Matrix, channels: int) -> None:
    """8-bit PPM of an H x (W*C) image, min-max normalized for viewing."""
    pixels = _as_pixels(image, channels)
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    elif channels != 3:
        raise ContractViolation(f"PPM needs 1 or 3 channels, not {channels}")
    low, high = float(pixels.min()), float(pixels.max())
    span = high - low
    if span > 0 and np.isfinite(span):
        scaled = (pixels - low) / span
    else:
        scaled = np.zeros_like(pixels)
    data = np.rint(scaled * 255).astype(np.uint8)
    atomic_write(path, iio.imwrite("<bytes>", data, extension=".ppm"))


def write_raw_image(path: Path, image: Matrix, channels: int) -> None:
    """Bit-exact dump: 16-byte header, then little-endian float64 pixels in
    row-major order."""
    pixels = _as_pixels(image, channels)
    h, w, _ = pixels.shape
    header = RAW_IMAGE_HEADER.pack(RAW_IMAGE_MAGIC, h, w, channels)
    body = np.ascontiguousarray(image, dtype="<f8").tobytes()
    atomic_write(path, header + body)


def read_raw_image(path: Path) -> tuple[Matrix, int]:
    """Inverse of write_raw_image; returns the image and its channel count."""
    data = Path(path).read_bytes()
    if len(data) < RAW_IMAGE_HEADER.size:
        raise DataFormatError(f"{path}: too short for an image header")
    magic, h, w, channels = RAW_IMAGE_HEADER.unpack_from(data)
    if magic != RAW_IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    expected = RAW_IMAGE_HEADER.size + 8 * h * w * channels
    if len(data) != expected:
        raise DataFormatError(
            f"{path}: expected {expected} bytes, found {len(data)}"
        )
    image = np.frombuffer(data, dtype="<f8", offset=RAW_IMAGE_HEADER.size)
    return image.astype(np.float64).reshape(h, w * channels), channels
