import enum
import logging
import math
from dataclasses import dataclass

import numpy as np

from maskfed.federation import ClientUpdate, client_train_step
from maskfed.models.masks import MaskPolicy
from maskfed.models.vit import (
    PATCH_EMBEDDING,
    POSITIONAL_EMBEDDING,
    ModelConfig,
    ParamSet,
    head_key,
    unpatchify,
)
from maskfed.numerics import Matrix, least_squares, residual_norm
from maskfed.utils.datasets import LabeledImage
from maskfed.utils.errors import ContractViolation

logger = logging.getLogger(__name__)

ATTACK_HEADER = [
    "seed", "policy", "R", "residual", "mse", "psnr", "degenerate"
]


class ReconstructionMode(enum.Enum):
    PAPER_LITERAL = "paper-literal"
    PSEUDO_INVERSE = "pseudo-inverse"


@dataclass(frozen=True)
class CapturedUpdate:
    """What an eavesdropper holds after one FedSGD round: the first block's
    q/k/v gradients and the E_pos gradient sent by a client, plus the
    global parameters the client computed them at."""

    grad_uq: tuple[Matrix, ...]
    grad_uk: tuple[Matrix, ...]
    grad_uv: tuple[Matrix, ...]
    grad_e_pos: Matrix
    e: Matrix
    e_pos: Matrix
    uq: tuple[Matrix, ...]
    uk: tuple[Matrix, ...]
    uv: tuple[Matrix, ...]
    config: ModelConfig

    def __post_init__(self) -> None:
        cfg = self.config
        heads = [self.grad_uq, self.grad_uk, self.grad_uv]
        heads += [self.uq, self.uk, self.uv]
        if any(len(h) != cfg.heads for h in heads):
            raise ContractViolation(f"Expected {cfg.heads} heads per map")
        head_shape = (cfg.embed_dim, cfg.head_dim)
        for matrices in heads:
            for m in matrices:
                if m.shape != head_shape:
                    raise ContractViolation(
                        f"Attention map of shape {m.shape}, expected "
                        f"{head_shape}"
                    )
        tokens_shape = (cfg.tokens, cfg.embed_dim)
        if self.grad_e_pos.shape != tokens_shape:
            raise ContractViolation(
                f"E_pos gradient {self.grad_e_pos.shape}, expected "
                f"{tokens_shape}"
            )
        if self.e_pos.shape != tokens_shape:
            raise ContractViolation(
                f"E_pos {self.e_pos.shape}, expected {tokens_shape}"
            )
        if self.e.shape != (cfg.patch_dim, cfg.embed_dim):
            raise ContractViolation(
                f"E {self.e.shape}, expected "
                f"{(cfg.patch_dim, cfg.embed_dim)}"
            )

    @staticmethod
    def from_update(
        update: ClientUpdate, global_params: ParamSet, config: ModelConfig
    ) -> "CapturedUpdate":
        if config.blocks < 1:
            raise ContractViolation("The attack needs at least one block")
        heads = range(1, config.heads + 1)

        def per_head(tree: ParamSet, kind: str) -> tuple[Matrix, ...]:
            return tuple(tree[head_key(1, kind, t)] for t in heads)

        grads = update.masked_grads
        return CapturedUpdate(
            grad_uq=per_head(grads, "U_q"),
            grad_uk=per_head(grads, "U_k"),
            grad_uv=per_head(grads, "U_v"),
            grad_e_pos=grads[POSITIONAL_EMBEDDING],
            e=global_params[PATCH_EMBEDDING],
            e_pos=global_params[POSITIONAL_EMBEDDING],
            uq=per_head(global_params, "U_q"),
            uk=per_head(global_params, "U_k"),
            uv=per_head(global_params, "U_v"),
            config=config,
        )


@dataclass(frozen=True)
class Z0Estimate:
    z0_hat: Matrix
    residual_norm: float
    product_norm: float
    degenerate: bool

    @property
    def relative_residual(self) -> float:
        if self.product_norm == 0:
            return 0.0
        return self.residual_norm / self.product_norm


@dataclass(frozen=True)
class Reconstruction:
    patches_hat: Matrix
    image_hat: Matrix


@dataclass(frozen=True)
class AttackResult:
    z0_hat: Matrix
    patches_hat: Matrix
    image_hat: Matrix
    residual_norm: float
    mse: float
    psnr: float
    degenerate: bool


def attention_product(cap: CapturedUpdate) -> Matrix:
    """Sum over q/k/v maps and heads of dL/dU @ U.T, a D x D matrix equal
    to z0.T @ (gradient reaching z0 through the first attention)."""
    d = cap.config.embed_dim
    product = np.zeros((d, d))
    pairs = zip(
        cap.grad_uq + cap.grad_uk + cap.grad_uv, cap.uq + cap.uk + cap.uv
    )
    for grad, u in pairs:
        product += grad @ u.T
    return product


def recover_z0(cap: CapturedUpdate) -> Z0Estimate:
    """Solve G.T @ z0 = M.T for the encoder input z0 in least squares,
    where G is the E_pos gradient and M the attention product."""
    g = cap.grad_e_pos
    m = attention_product(cap)
    product_norm = float(np.linalg.norm(m))
    if not g.any():
        logger.warning(
            "E_pos gradient is identically zero, z0 cannot be recovered"
        )
        return Z0Estimate(np.zeros_like(g), product_norm, product_norm, True)
    z0_hat = least_squares(g.T, m.T)
    residual = residual_norm(g.T, z0_hat, m.T)
    return Z0Estimate(z0_hat, residual, product_norm, False)


def reconstruct_image(
    z0_hat: Matrix,
    cap: CapturedUpdate,
    mode: ReconstructionMode = ReconstructionMode.PSEUDO_INVERSE,
) -> Reconstruction:
    """Invert the patch embedding.

    PAPER_LITERAL multiplies each embedded row by E as written in the
    attack's closed form; PSEUDO_INVERSE solves patch @ E = row in least
    squares, which is exact when E has full row rank.
    """
    cfg = cap.config
    if z0_hat.shape != (cfg.tokens, cfg.embed_dim):
        raise ContractViolation(
            f"z0 estimate {z0_hat.shape}, expected "
            f"{(cfg.tokens, cfg.embed_dim)}"
        )
    rows = (z0_hat - cap.e_pos)[1:]
    if mode == ReconstructionMode.PAPER_LITERAL:
        patches = rows @ cap.e.T
    else:
        patches = least_squares(cap.e.T, rows.T).T
    return Reconstruction(patches, unpatchify(patches, cfg))


def attack_metrics(image_hat: Matrix, original: Matrix) -> tuple[float, float]:
    """MSE and PSNR in dB with peak = max - min of the original (1.0 for a
    constant original). Identical images give an infinite PSNR."""
    if image_hat.shape != original.shape:
        raise ContractViolation(
            f"Cannot compare {image_hat.shape} with {original.shape}"
        )
    mse = float(np.mean((image_hat - original) ** 2))
    if mse == 0:
        return 0.0, math.inf
    peak = float(original.max() - original.min()) or 1.0
    return mse, 10.0 * math.log10(peak**2 / mse)


def run_attack(
    update: ClientUpdate,
    global_params: ParamSet,
    original: Matrix,
    config: ModelConfig,
    mode: ReconstructionMode = ReconstructionMode.PSEUDO_INVERSE,
) -> AttackResult:
    """Closed-form gradient inversion of a single-image update.

    The ground truth is only used for scoring; masked and unmasked
    gradients are attacked the same way.
    """
    cap = CapturedUpdate.from_update(update, global_params, config)
    estimate = recover_z0(cap)
    recon = reconstruct_image(estimate.z0_hat, cap, mode)
    mse, psnr = attack_metrics(recon.image_hat, original)
    logger.debug(
        f"attack client {update.client}: residual "
        f"{estimate.residual_norm:.3e}, mse {mse:.3e}, psnr {psnr:.2f}"
    )
    return AttackResult(
        z0_hat=estimate.z0_hat,
        patches_hat=recon.patches_hat,
        image_hat=recon.image_hat,
        residual_norm=estimate.residual_norm,
        mse=mse,
        psnr=psnr,
        degenerate=estimate.degenerate,
    )


def attack_single_image(
    global_params: ParamSet,
    item: LabeledImage,
    policy: MaskPolicy,
    seed: int,
    config: ModelConfig,
    mode: ReconstructionMode = ReconstructionMode.PSEUDO_INVERSE,
) -> AttackResult:
    """Capture one client's update on a one-image batch and attack it."""
    update = client_train_step(
        global_params, [item], policy, client=0, epoch=0, seed=seed,
        config=config,
    )
    return run_attack(update, global_params, item.image, config, mode)
