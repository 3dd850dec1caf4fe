import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from maskfed.models.vit import POSITIONAL_EMBEDDING, GradSet
from maskfed.numerics import RandomStream, bernoulli_array
from maskfed.utils.errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)


class MaskKind(enum.Enum):
    NONE = "none"
    PER_EPOCH = "per-epoch"
    LOCKED = "locked"
    FIXED_POSITION = "fixed-position"


@dataclass(frozen=True)
class MaskPolicy:
    """How a client zeroes its gradients before sending them.

    zero_prob is R, the probability each mask entry is 0. layer_zero_probs
    overrides R for parameters whose name equals a key or starts with
    ``key + "."``; the longest matching key wins.
    """

    kind: MaskKind = MaskKind.NONE
    zero_prob: float = 0.0
    layer_zero_probs: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        probs = [self.zero_prob, *self.layer_zero_probs.values()]
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"Zero probability {p} is not in [0, 1]")
        if self.layer_zero_probs and not self.is_random:
            raise ConfigError(
                f"Per-layer zero probabilities need a random policy, "
                f"not {self.kind.value}"
            )

    @staticmethod
    def no_mask() -> "MaskPolicy":
        return MaskPolicy(MaskKind.NONE)

    @staticmethod
    def per_epoch(
        zero_prob: float,
        layer_zero_probs: Optional[Mapping[str, float]] = None,
    ) -> "MaskPolicy":
        return MaskPolicy(
            MaskKind.PER_EPOCH, zero_prob, dict(layer_zero_probs or {})
        )

    @staticmethod
    def locked(
        zero_prob: float,
        layer_zero_probs: Optional[Mapping[str, float]] = None,
    ) -> "MaskPolicy":
        return MaskPolicy(
            MaskKind.LOCKED, zero_prob, dict(layer_zero_probs or {})
        )

    @staticmethod
    def fixed_position() -> "MaskPolicy":
        return MaskPolicy(MaskKind.FIXED_POSITION)

    @staticmethod
    def from_str(
        text: str, layer_zero_probs: Optional[Mapping[str, float]] = None
    ) -> "MaskPolicy":
        """Parse ``none``, ``fixed-position``, ``per-epoch:R`` or
        ``locked:R``."""
        name, _, value = text.strip().lower().partition(":")
        try:
            kind = MaskKind(name)
        except ValueError:
            raise ConfigError(f"Unknown mask policy '{text}'")
        if kind in (MaskKind.PER_EPOCH, MaskKind.LOCKED):
            try:
                zero_prob = float(value)
            except ValueError:
                raise ConfigError(
                    f"Mask policy '{text}' needs a zero probability, "
                    f"e.g. '{kind.value}:0.5'"
                )
            return MaskPolicy(kind, zero_prob, dict(layer_zero_probs or {}))
        if value:
            raise ConfigError(f"Mask policy '{name}' takes no parameter")
        return MaskPolicy(kind)

    @property
    def is_random(self) -> bool:
        return self.kind in (MaskKind.PER_EPOCH, MaskKind.LOCKED)

    @property
    def label(self) -> str:
        if self.is_random:
            return f"{self.kind.value}:{self.zero_prob:g}"
        return self.kind.value

    def zero_prob_for(self, name: str) -> float:
        """Effective R of one parameter tensor."""
        if self.kind == MaskKind.NONE:
            return 0.0
        if self.kind == MaskKind.FIXED_POSITION:
            return 1.0 if name == POSITIONAL_EMBEDDING else 0.0
        best: Optional[str] = None
        for key in self.layer_zero_probs:
            if _matches(name, key) and (best is None or len(key) > len(best)):
                best = key
        return self.zero_prob if best is None else self.layer_zero_probs[best]

    def validate_layers(self, names: Iterable[str]) -> None:
        names = list(names)
        for key in self.layer_zero_probs:
            if not any(_matches(name, key) for name in names):
                raise ConfigError(
                    f"layer_zero_probs.{key}: no parameter named '{key}'"
                )


def _matches(name: str, key: str) -> bool:
    return name == key or name.startswith(key + ".")


@dataclass(frozen=True)
class BinaryMask:
    """Boolean tree congruent to a GradSet; True keeps the gradient."""

    bits: dict[str, np.ndarray]
    client: int
    epoch: int
    seed: int

    def count_zeros(self) -> int:
        return sum(int((~b).sum()) for b in self.bits.values())

    def size(self) -> int:
        return sum(b.size for b in self.bits.values())


def generate_mask(
    policy: MaskPolicy,
    shapes: Mapping[str, tuple[int, int]],
    client: int,
    epoch: int,
    seed: int,
) -> BinaryMask:
    """Per-client, per-epoch mask.

    Random masks are drawn layer by layer from streams keyed by
    (seed, client, epoch, layer). Locked masks always use epoch 0, so every
    epoch repeats the client's first mask.
    """
    policy.validate_layers(shapes)
    bits: dict[str, np.ndarray] = {}
    if policy.is_random:
        key_epoch = epoch if policy.kind == MaskKind.PER_EPOCH else 0
        stream = RandomStream(seed).derive("mask", client, key_epoch)
        for name, shape in shapes.items():
            bits[name] = bernoulli_array(
                stream.derive(name), 1.0 - policy.zero_prob_for(name), shape
            )
    else:
        for name, shape in shapes.items():
            keep = policy.zero_prob_for(name) == 0.0
            bits[name] = np.full(shape, keep, dtype=bool)
    return BinaryMask(bits=bits, client=client, epoch=epoch, seed=seed)


def apply_mask(grads: GradSet, mask: BinaryMask) -> GradSet:
    """Elementwise product of gradients and mask bits."""
    if grads.keys() != mask.bits.keys():
        raise ContractViolation(
            "Mask and gradients name different parameters: "
            f"{sorted(grads.keys() ^ mask.bits.keys())}"
        )
    masked: GradSet = {}
    for name, grad in grads.items():
        bits = mask.bits[name]
        if grad.shape != bits.shape:
            raise ContractViolation(
                f"{name}: gradient shape {grad.shape} does not match mask "
                f"shape {bits.shape}"
            )
        masked[name] = np.where(bits, grad, 0.0)
    return masked
