import logging
import zlib
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg

from maskfed.utils.errors import ContractViolation

logger = logging.getLogger(__name__)

Matrix = np.ndarray
Label = Union[int, str]

MAX_SEED = 2**64
STRING_LABEL_OFFSET = 2**32


def as_matrix(data: Union[Sequence[Sequence[float]], np.ndarray]) -> Matrix:
    """Build a float64 2-D matrix, rejecting NaN/Inf entries."""
    matrix = np.array(data, dtype=np.float64)
    if matrix.ndim != 2 or 0 in matrix.shape:
        raise ContractViolation(
            f"Expected a non-empty 2-D matrix, got shape {matrix.shape}"
        )
    if not np.isfinite(matrix).all():
        raise ContractViolation("Matrix entries must be finite")
    return matrix


def _check_2d(a: Matrix, name: str) -> None:
    if a.ndim != 2:
        raise ContractViolation(
            f"{name} must be a 2-D matrix, got shape {a.shape}"
        )


def matmul(a: Matrix, b: Matrix) -> Matrix:
    _check_2d(a, "a")
    _check_2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"Cannot multiply {a.shape[0]}x{a.shape[1]} by "
            f"{b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def transpose(a: Matrix) -> Matrix:
    _check_2d(a, "a")
    return np.ascontiguousarray(a.T)


def least_squares(a: Matrix, b: Matrix) -> Matrix:
    """Minimum-norm X minimizing ||aX - b||_F.

    Uses LAPACK's complete orthogonal factorization with column pivoting
    (gelsy), so rank-deficient systems return the minimum-norm minimizer.
    """
    _check_2d(a, "a")
    _check_2d(b, "b")
    if a.shape[0] == 0:
        raise ContractViolation("least_squares needs at least one row")
    if a.shape[0] != b.shape[0]:
        raise ContractViolation(
            f"Row mismatch: a is {a.shape[0]}x{a.shape[1]}, "
            f"b is {b.shape[0]}x{b.shape[1]}"
        )
    solution, _, rank, _ = scipy.linalg.lstsq(a, b, lapack_driver="gelsy")
    if rank < min(a.shape):
        logger.debug(
            f"least_squares: rank {rank} system of shape {a.shape}, "
            "returning minimum-norm solution"
        )
    return np.asarray(solution, dtype=np.float64)


def residual_norm(a: Matrix, x: Matrix, b: Matrix) -> float:
    return float(np.linalg.norm(a @ x - b))


def _label_to_int(label: Label) -> int:
    if isinstance(label, str):
        return STRING_LABEL_OFFSET + zlib.crc32(label.encode("utf-8"))
    if label < 0:
        raise ContractViolation(f"Stream labels must be >= 0, got {label}")
    return label


class RandomStream:
    """Seeded, splittable random stream.

    Each stream is a Philox generator keyed by a SeedSequence built from the
    root seed and a tuple of derivation labels, so child streams depend only
    on their labels and never on the order they were created in.
    """

    def __init__(self, seed: int, labels: Sequence[Label] = ()) -> None:
        if not 0 <= seed < MAX_SEED:
            raise ContractViolation(f"Seed must be a u64, got {seed}")
        self.seed = seed
        self.labels = tuple(_label_to_int(x) for x in labels)
        self.position = 0
        sequence = np.random.SeedSequence(
            entropy=seed, spawn_key=self.labels
        )
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def derive(self, *labels: Label) -> "RandomStream":
        return RandomStream(self.seed, (*self.labels, *labels))

    def random(
        self, shape: Optional[Union[int, tuple[int, ...]]] = None
    ) -> np.ndarray:
        """Uniform draws in [0, 1)."""
        values = self._generator.random(shape)
        self.position += int(np.size(values))
        return np.asarray(values)

    def uniform(
        self, low: float, high: float, shape: Union[int, tuple[int, ...]]
    ) -> np.ndarray:
        values = self._generator.uniform(low, high, shape)
        self.position += int(np.size(values))
        return values

    def permutation(self, n: int) -> np.ndarray:
        self.position += n
        return self._generator.permutation(n)

    def __repr__(self) -> str:
        return (
            f"RandomStream(seed={self.seed}, labels={self.labels}, "
            f"position={self.position})"
        )


def _check_probability(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ContractViolation(f"Probability must be in [0, 1], got {p}")


def bernoulli_draw(stream: RandomStream, p_one: float) -> int:
    _check_probability(p_one)
    return int(stream.random() < p_one)


def bernoulli_array(
    stream: RandomStream, p_one: float, shape: tuple[int, ...]
) -> np.ndarray:
    """Boolean array whose entries are True with probability p_one."""
    _check_probability(p_one)
    return stream.random(shape) < p_one
