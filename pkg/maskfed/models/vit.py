import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from maskfed.numerics import Matrix, RandomStream
from maskfed.utils.datasets import LabeledImage
from maskfed.utils.errors import ConfigError, ContractViolation

logger = logging.getLogger(__name__)

ParamSet = dict[str, Matrix]
GradSet = dict[str, Matrix]

POSITIONAL_EMBEDDING = "E_pos"
PATCH_EMBEDDING = "E"
ATTENTION_KINDS = ("U_q", "U_k", "U_v")
ZERO_INIT = ("x_class", "mlp_b1", "mlp_b2", "classifier_b")


@dataclass(frozen=True)
class ModelConfig:
    """Shape of a Vision Transformer.

    Images are H x (W*C) matrices with channels interleaved per pixel. The
    model splits them into S = (H/P)*(W/P) patches of P*P*C values, embeds
    them to D dimensions, prepends a class token and runs L encoder blocks
    with T attention heads of width D/T.

    The two first_block_* switches build the attack-exact model: block 1
    then feeds z0 to attention without LN1, and without the residual path
    around attention, so z0 reaches the rest of the network only through
    U_q, U_k and U_v.
    """

    image_h: int = 16
    image_w: int = 16
    channels: int = 3
    patch: int = 4
    embed_dim: int = 16
    heads: int = 2
    blocks: int = 2
    mlp_hidden: int = 32
    classes: int = 4
    eps: float = 1e-6
    first_block_pre_ln_identity: bool = False
    first_block_residual: bool = True

    def __post_init__(self) -> None:
        for name in (
            "image_h",
            "image_w",
            "channels",
            "patch",
            "embed_dim",
            "heads",
            "mlp_hidden",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}: must be >= 1")
        if self.blocks < 0:
            raise ConfigError("model.blocks: must be >= 0")
        if self.classes < 2:
            raise ConfigError("model.classes: must be >= 2")
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"model.patch: {self.patch} does not tile a "
                f"{self.image_h}x{self.image_w} image"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"model.heads: {self.heads} does not divide embed_dim "
                f"{self.embed_dim}"
            )
        if self.eps <= 0:
            raise ConfigError("model.eps: must be > 0")

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch) * (self.image_w // self.patch)

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def block_key(block: int, name: str) -> str:
    return f"block{block}.{name}"


def head_key(block: int, kind: str, head: int) -> str:
    return f"block{block}.{kind}.{head}"


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Parameter names and shapes in canonical order."""
    d, dh = config.embed_dim, config.head_dim
    shapes: dict[str, tuple[int, int]] = {
        PATCH_EMBEDDING: (config.patch_dim, d),
        "x_class": (1, d),
        POSITIONAL_EMBEDDING: (config.tokens, d),
    }
    for b in range(1, config.blocks + 1):
        shapes[block_key(b, "ln1_gamma")] = (1, d)
        shapes[block_key(b, "ln1_beta")] = (1, d)
        for kind in ATTENTION_KINDS:
            for t in range(1, config.heads + 1):
                shapes[head_key(b, kind, t)] = (d, dh)
        shapes[block_key(b, "U_msa")] = (config.heads * dh, d)
        shapes[block_key(b, "ln2_gamma")] = (1, d)
        shapes[block_key(b, "ln2_beta")] = (1, d)
        shapes[block_key(b, "mlp_w1")] = (d, config.mlp_hidden)
        shapes[block_key(b, "mlp_b1")] = (1, config.mlp_hidden)
        shapes[block_key(b, "mlp_w2")] = (config.mlp_hidden, d)
        shapes[block_key(b, "mlp_b2")] = (1, d)
    shapes["head_gamma"] = (1, d)
    shapes["head_beta"] = (1, d)
    shapes["classifier_w"] = (d, config.classes)
    shapes["classifier_b"] = (1, config.classes)
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(r * c for r, c in param_shapes(config).values())


def check_shapes(
    tree: dict[str, Matrix], shapes: dict[str, tuple[int, int]]
) -> None:
    missing = shapes.keys() - tree.keys()
    extra = tree.keys() - shapes.keys()
    if missing or extra:
        raise ContractViolation(
            f"Parameter names differ: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    for name, shape in shapes.items():
        if tree[name].shape != shape:
            raise ContractViolation(
                f"{name} has shape {tree[name].shape}, expected {shape}"
            )


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """Seeded initialization.

    Weight matrices (E, E_pos, U_*, MLP, classifier) are uniform in
    +-1/sqrt(fan_in), x_class and biases start at zero, LN gains at one.
    """
    root = RandomStream(seed).derive("init")
    params: ParamSet = {}
    for name, shape in param_shapes(config).items():
        short = name.split(".")[1] if name.startswith("block") else name
        if short.endswith("gamma"):
            params[name] = np.ones(shape)
        elif short.endswith("beta") or short in ZERO_INIT:
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1] if name == POSITIONAL_EMBEDDING else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = root.derive(name).uniform(-bound, bound, shape)
    return params


def zeros_like(tree: dict[str, Matrix]) -> GradSet:
    return {name: np.zeros_like(value) for name, value in tree.items()}


def save_params(params: ParamSet, file: Union[Path, BinaryIO]) -> None:
    np.savez(file, **params)


def load_params(path: Path) -> ParamSet:
    with np.load(path) as archive:
        return {name: archive[name] for name in archive.files}


def patchify(image: Matrix, config: ModelConfig) -> Matrix:
    """Split an H x (W*C) image into S rows of P*P*C values.

    Patches are scanned left to right, top to bottom; inside a patch values
    are ordered by (row, col, channel).
    """
    h, w, c, p = config.image_h, config.image_w, config.channels, config.patch
    if image.shape != (h, w * c):
        raise ContractViolation(
            f"Image shape {image.shape} does not match config "
            f"{h}x{w * c}"
        )
    blocks = image.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(config.num_patches, config.patch_dim)


def unpatchify(patches: Matrix, config: ModelConfig) -> Matrix:
    h, w, c, p = config.image_h, config.image_w, config.channels, config.patch
    if patches.shape != (config.num_patches, config.patch_dim):
        raise ContractViolation(
            f"Patch matrix shape {patches.shape} does not match config "
            f"{config.num_patches}x{config.patch_dim}"
        )
    blocks = patches.reshape(h // p, w // p, p, p, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(h, w * c)


def embed(patches: Matrix, params: ParamSet) -> Matrix:
    tokens = np.vstack([params["x_class"], patches @ params[PATCH_EMBEDDING]])
    return tokens + params[POSITIONAL_EMBEDDING]


@dataclass
class LayerNormCache:
    x_hat: Matrix
    inv_std: Matrix
    gamma: Matrix


def _layer_norm_forward(
    x: Matrix, gamma: Matrix, beta: Matrix, eps: float
) -> tuple[Matrix, LayerNormCache]:
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return gamma * x_hat + beta, LayerNormCache(x_hat, inv_std, gamma)


def _layer_norm_backward(
    d_out: Matrix, cache: LayerNormCache
) -> tuple[Matrix, Matrix, Matrix]:
    d_gamma = (d_out * cache.x_hat).sum(axis=0, keepdims=True)
    d_beta = d_out.sum(axis=0, keepdims=True)
    d_xhat = d_out * cache.gamma
    d_x = cache.inv_std * (
        d_xhat
        - d_xhat.mean(axis=1, keepdims=True)
        - cache.x_hat * (d_xhat * cache.x_hat).mean(axis=1, keepdims=True)
    )
    return d_x, d_gamma, d_beta


def layer_norm(x: Matrix, gamma: Matrix, beta: Matrix, eps: float) -> Matrix:
    """Row-wise LN with population variance."""
    if gamma.shape[-1] != x.shape[1] or beta.shape[-1] != x.shape[1]:
        raise ContractViolation(
            f"LN parameters {gamma.shape}/{beta.shape} do not match input "
            f"{x.shape}"
        )
    out, _ = _layer_norm_forward(x, gamma, beta, eps)
    return out


def softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def gelu(u: Matrix) -> Matrix:
    return 0.5 * u * (1.0 + erf(u / math.sqrt(2.0)))


def gelu_derivative(u: Matrix) -> Matrix:
    cdf = 0.5 * (1.0 + erf(u / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi)
    return cdf + u * pdf


@dataclass
class HeadCache:
    q: Matrix
    k: Matrix
    v: Matrix
    probs: Matrix


def _attention_forward(
    z_ln: Matrix, u_q: Matrix, u_k: Matrix, u_v: Matrix, head_dim: int
) -> tuple[Matrix, HeadCache]:
    q, k, v = z_ln @ u_q, z_ln @ u_k, z_ln @ u_v
    probs = softmax((q @ k.T) / math.sqrt(head_dim))
    return probs @ v, HeadCache(q, k, v, probs)


def self_attention(
    z_ln: Matrix, u_q: Matrix, u_k: Matrix, u_v: Matrix, head_dim: int
) -> Matrix:
    if head_dim <= 0:
        raise ContractViolation(f"head_dim must be > 0, got {head_dim}")
    out, _ = _attention_forward(z_ln, u_q, u_k, u_v, head_dim)
    return out


def _msa_forward(
    z_ln: Matrix, params: ParamSet, block: int, config: ModelConfig
) -> tuple[Matrix, Matrix, list[HeadCache]]:
    outputs, caches = [], []
    for t in range(1, config.heads + 1):
        out, cache = _attention_forward(
            z_ln,
            params[head_key(block, "U_q", t)],
            params[head_key(block, "U_k", t)],
            params[head_key(block, "U_v", t)],
            config.head_dim,
        )
        outputs.append(out)
        caches.append(cache)
    concat = np.hstack(outputs)
    return concat @ params[block_key(block, "U_msa")], concat, caches


def msa(
    z_ln: Matrix, params: ParamSet, block: int, config: ModelConfig
) -> Matrix:
    out, _, _ = _msa_forward(z_ln, params, block, config)
    return out


@dataclass
class BlockCache:
    z_in: Matrix
    attn_in: Matrix
    ln1: Optional[LayerNormCache]
    heads: list[HeadCache]
    concat: Matrix
    ln2_out: Matrix
    ln2: LayerNormCache
    mlp_pre: Matrix
    mlp_act: Matrix


def _uses_ln1(block: int, config: ModelConfig) -> bool:
    return not (block == 1 and config.first_block_pre_ln_identity)


def _uses_residual(block: int, config: ModelConfig) -> bool:
    return block != 1 or config.first_block_residual


def _block_forward(
    z_prev: Matrix, params: ParamSet, block: int, config: ModelConfig
) -> tuple[Matrix, BlockCache]:
    ln1: Optional[LayerNormCache] = None
    if _uses_ln1(block, config):
        attn_in, ln1 = _layer_norm_forward(
            z_prev,
            params[block_key(block, "ln1_gamma")],
            params[block_key(block, "ln1_beta")],
            config.eps,
        )
    else:
        attn_in = z_prev
    attn_out, concat, heads = _msa_forward(attn_in, params, block, config)
    z_mid = attn_out + z_prev if _uses_residual(block, config) else attn_out
    ln2_out, ln2 = _layer_norm_forward(
        z_mid,
        params[block_key(block, "ln2_gamma")],
        params[block_key(block, "ln2_beta")],
        config.eps,
    )
    mlp_pre = (
        ln2_out @ params[block_key(block, "mlp_w1")]
        + params[block_key(block, "mlp_b1")]
    )
    mlp_act = gelu(mlp_pre)
    mlp_out = (
        mlp_act @ params[block_key(block, "mlp_w2")]
        + params[block_key(block, "mlp_b2")]
    )
    cache = BlockCache(
        z_prev, attn_in, ln1, heads, concat, ln2_out, ln2, mlp_pre, mlp_act
    )
    return mlp_out + z_mid, cache


def encoder_block(
    z_prev: Matrix, params: ParamSet, block: int, config: ModelConfig
) -> Matrix:
    out, _ = _block_forward(z_prev, params, block, config)
    return out


@dataclass
class ForwardCache:
    patches: Matrix
    z0: Matrix
    blocks: list[BlockCache] = field(default_factory=list)
    z_final: Optional[Matrix] = None
    head_ln: Optional[LayerNormCache] = None
    y: Optional[Matrix] = None
    logits: Optional[Matrix] = None


def forward(
    image: Matrix, params: ParamSet, config: ModelConfig
) -> tuple[Matrix, ForwardCache]:
    patches = patchify(image, config)
    z = embed(patches, params)
    cache = ForwardCache(patches=patches, z0=z)
    for b in range(1, config.blocks + 1):
        z, block_cache = _block_forward(z, params, b, config)
        cache.blocks.append(block_cache)
    y, head_ln = _layer_norm_forward(
        z[0:1], params["head_gamma"], params["head_beta"], config.eps
    )
    logits = y @ params["classifier_w"] + params["classifier_b"]
    cache.z_final, cache.head_ln, cache.y, cache.logits = z, head_ln, y, logits
    return logits, cache


def _block_backward(
    d_out: Matrix,
    cache: BlockCache,
    params: ParamSet,
    block: int,
    config: ModelConfig,
    grads: GradSet,
) -> Matrix:
    w1 = params[block_key(block, "mlp_w1")]
    w2 = params[block_key(block, "mlp_w2")]
    grads[block_key(block, "mlp_w2")] += cache.mlp_act.T @ d_out
    grads[block_key(block, "mlp_b2")] += d_out.sum(axis=0, keepdims=True)
    d_pre = (d_out @ w2.T) * gelu_derivative(cache.mlp_pre)
    grads[block_key(block, "mlp_w1")] += cache.ln2_out.T @ d_pre
    grads[block_key(block, "mlp_b1")] += d_pre.sum(axis=0, keepdims=True)
    d_ln2, d_gamma2, d_beta2 = _layer_norm_backward(d_pre @ w1.T, cache.ln2)
    grads[block_key(block, "ln2_gamma")] += d_gamma2
    grads[block_key(block, "ln2_beta")] += d_beta2
    d_mid = d_out + d_ln2

    u_msa = params[block_key(block, "U_msa")]
    grads[block_key(block, "U_msa")] += cache.concat.T @ d_mid
    d_concat = d_mid @ u_msa.T
    scale = 1.0 / math.sqrt(config.head_dim)
    d_attn_in = np.zeros_like(cache.attn_in)
    for t, head in enumerate(cache.heads, start=1):
        cols = slice((t - 1) * config.head_dim, t * config.head_dim)
        d_head = d_concat[:, cols]
        d_probs = d_head @ head.v.T
        d_v = head.probs.T @ d_head
        d_logits = head.probs * (
            d_probs - (d_probs * head.probs).sum(axis=1, keepdims=True)
        )
        d_q = d_logits @ head.k * scale
        d_k = d_logits.T @ head.q * scale
        for kind, d_proj in zip(ATTENTION_KINDS, (d_q, d_k, d_v)):
            name = head_key(block, kind, t)
            grads[name] += cache.attn_in.T @ d_proj
            d_attn_in += d_proj @ params[name].T

    if cache.ln1 is None:
        d_in = d_attn_in
    else:
        d_in, d_gamma1, d_beta1 = _layer_norm_backward(d_attn_in, cache.ln1)
        grads[block_key(block, "ln1_gamma")] += d_gamma1
        grads[block_key(block, "ln1_beta")] += d_beta1
    return d_mid + d_in if _uses_residual(block, config) else d_in


def backward(
    cache: ForwardCache,
    d_logits: Matrix,
    params: ParamSet,
    config: ModelConfig,
    grads: Optional[GradSet] = None,
) -> tuple[GradSet, Matrix]:
    """Accumulate parameter gradients of one image into grads.

    Returns the gradient tree and the gradient with respect to the encoder
    input z0.
    """
    assert cache.y is not None and cache.head_ln is not None
    assert cache.z_final is not None
    if grads is None:
        grads = zeros_like(params)
    grads["classifier_w"] += cache.y.T @ d_logits
    grads["classifier_b"] += d_logits
    d_y = d_logits @ params["classifier_w"].T
    d_cls, d_gamma, d_beta = _layer_norm_backward(d_y, cache.head_ln)
    grads["head_gamma"] += d_gamma
    grads["head_beta"] += d_beta
    d_z = np.zeros_like(cache.z_final)
    d_z[0:1] = d_cls
    for b in range(config.blocks, 0, -1):
        d_z = _block_backward(
            d_z, cache.blocks[b - 1], params, b, config, grads
        )
    grads[POSITIONAL_EMBEDDING] += d_z
    grads["x_class"] += d_z[0:1]
    grads[PATCH_EMBEDDING] += cache.patches.T @ d_z[1:]
    return grads, d_z


def _check_batch(batch: Sequence[LabeledImage], config: ModelConfig) -> None:
    if not batch:
        raise ContractViolation("Cannot compute a loss on an empty batch")
    for item in batch:
        if not 0 <= item.label < config.classes:
            raise ContractViolation(
                f"Label {item.label} outside [0, {config.classes})"
            )


def _cross_entropy(logits: Matrix, label: int) -> tuple[float, Matrix]:
    probs = softmax(logits)
    shifted = logits - logits.max()
    loss = float(np.log(np.exp(shifted).sum()) - shifted[0, label])
    probs[0, label] -= 1.0
    return loss, probs


def loss_grad_and_input_grad(
    batch: Sequence[LabeledImage], params: ParamSet, config: ModelConfig
) -> tuple[float, GradSet, Matrix]:
    """Mean cross-entropy, its gradient and the summed gradient at z0."""
    _check_batch(batch, config)
    grads = zeros_like(params)
    d_z0 = np.zeros((config.tokens, config.embed_dim))
    total = 0.0
    for item in batch:
        logits, cache = forward(item.image, params, config)
        loss, d_logits = _cross_entropy(logits, item.label)
        total += loss
        _, d_z = backward(cache, d_logits / len(batch), params, config, grads)
        d_z0 += d_z
    return total / len(batch), grads, d_z0


def loss_and_grad(
    batch: Sequence[LabeledImage], params: ParamSet, config: ModelConfig
) -> tuple[float, GradSet]:
    loss, grads, _ = loss_grad_and_input_grad(batch, params, config)
    return loss, grads


def batch_loss(
    batch: Sequence[LabeledImage], params: ParamSet, config: ModelConfig
) -> float:
    _check_batch(batch, config)
    total = 0.0
    for item in batch:
        logits, _ = forward(item.image, params, config)
        total += _cross_entropy(logits, item.label)[0]
    return total / len(batch)


def predict(image: Matrix, params: ParamSet, config: ModelConfig) -> int:
    """Arg-max class; ties go to the lowest index."""
    logits, _ = forward(image, params, config)
    return int(np.argmax(logits[0]))


def grad_check_report(
    params: ParamSet,
    batch: Sequence[LabeledImage],
    config: ModelConfig,
    fd_step: float = 1e-5,
    analytic: Optional[GradSet] = None,
) -> dict[str, float]:
    """Worst elementwise relative error per parameter tensor between analytic
    gradients and central finite differences.

    Each entry scores |a - b| / max(|a|, |b|, 1e-8).
    """
    if fd_step <= 0:
        raise ContractViolation(f"fd_step must be > 0, got {fd_step}")
    if analytic is None:
        _, analytic = loss_and_grad(batch, params, config)
    work = dict(params)
    errors: dict[str, float] = {}
    for name, value in params.items():
        perturbed = value.copy()
        work[name] = perturbed
        numeric = np.zeros_like(value)
        for idx in np.ndindex(*value.shape):
            original = perturbed[idx]
            perturbed[idx] = original + fd_step
            loss_plus = batch_loss(batch, work, config)
            perturbed[idx] = original - fd_step
            loss_minus = batch_loss(batch, work, config)
            perturbed[idx] = original
            numeric[idx] = (loss_plus - loss_minus) / (2.0 * fd_step)
        work[name] = value
        a = analytic[name]
        scale = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        errors[name] = float((np.abs(a - numeric) / scale).max())
        logger.debug(f"grad check {name}: {errors[name]:.3e}")
    return errors


def grad_check(
    params: ParamSet,
    batch: Sequence[LabeledImage],
    config: ModelConfig,
    fd_step: float = 1e-5,
) -> float:
    return max(grad_check_report(params, batch, config, fd_step).values())
