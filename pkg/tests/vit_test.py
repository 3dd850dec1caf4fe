from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from maskfed.models import vit
from maskfed.models.vit import ModelConfig, ParamSet
from maskfed.utils.datasets import LabeledImage, synth_dataset
from maskfed.utils.errors import ConfigError, ContractViolation


def test_param_shapes_order(tiny_config: ModelConfig) -> None:
    names = list(vit.param_shapes(tiny_config))
    assert names[:3] == ["E", "x_class", "E_pos"]
    assert names[3:5] == ["block1.ln1_gamma", "block1.ln1_beta"]
    assert names[5:7] == ["block1.U_q.1", "block1.U_q.2"]
    assert names[-4:] == [
        "head_gamma",
        "head_beta",
        "classifier_w",
        "classifier_b",
    ]


def test_param_shapes(desk_config: ModelConfig) -> None:
    shapes = vit.param_shapes(desk_config)
    assert shapes["E"] == (48, 16)
    assert shapes["E_pos"] == (17, 16)
    assert shapes["block2.U_v.2"] == (16, 8)
    assert shapes["block1.U_msa"] == (16, 16)
    assert shapes["classifier_w"] == (16, 4)
    assert vit.count_params(desk_config) == sum(
        r * c for r, c in shapes.values()
    )


@pytest.mark.parametrize(
    "kwargs, key",
    [
        ({"patch": 3}, "model.patch"),
        ({"heads": 3}, "model.heads"),
        ({"classes": 1}, "model.classes"),
        ({"embed_dim": 0}, "model.embed_dim"),
        ({"eps": 0.0}, "model.eps"),
    ],
)
def test_model_config_rejects(kwargs: dict[str, Any], key: str) -> None:
    with pytest.raises(ConfigError) as excinfo:
        ModelConfig(**kwargs)
    assert key in str(excinfo.value)


def test_init_params(desk_config: ModelConfig) -> None:
    params = vit.init_params(desk_config, seed=1)
    vit.check_shapes(params, vit.param_shapes(desk_config))
    assert np.array_equal(params["x_class"], np.zeros((1, 16)))
    assert np.array_equal(params["block1.ln1_gamma"], np.ones((1, 16)))
    assert np.array_equal(params["block2.mlp_b1"], np.zeros((1, 32)))
    assert np.abs(params["E"]).max() <= 1 / np.sqrt(48)
    assert np.abs(params["E_pos"]).max() <= 1 / np.sqrt(16)
    again = vit.init_params(desk_config, seed=1)
    assert all(np.array_equal(params[k], again[k]) for k in params)
    other = vit.init_params(desk_config, seed=2)
    assert not np.array_equal(params["E"], other["E"])


def test_check_shapes_mismatch(tiny_config: ModelConfig) -> None:
    params = vit.init_params(tiny_config, 0)
    params["E"] = np.zeros((2, 2))
    with pytest.raises(ContractViolation) as excinfo:
        vit.check_shapes(params, vit.param_shapes(tiny_config))
    assert "E has shape" in str(excinfo.value)
    del params["E"]
    with pytest.raises(ContractViolation) as excinfo:
        vit.check_shapes(params, vit.param_shapes(tiny_config))
    assert "missing ['E']" in str(excinfo.value)


def test_patchify_order(tiny_config: ModelConfig) -> None:
    image = np.arange(16.0).reshape(4, 4)
    patches = vit.patchify(image, tiny_config)
    assert patches.shape == (4, 4)
    assert np.array_equal(patches[0], [0, 1, 4, 5])
    assert np.array_equal(patches[1], [2, 3, 6, 7])
    assert np.array_equal(patches[2], [8, 9, 12, 13])


def test_patchify_channels_interleaved() -> None:
    config = ModelConfig(image_h=2, image_w=2, channels=3, patch=2)
    image = np.arange(12.0).reshape(2, 6)
    patches = vit.patchify(image, config)
    assert np.array_equal(patches[0], np.arange(12.0))


def test_patchify_round_trip(desk_config: ModelConfig) -> None:
    image = np.random.default_rng(0).random((16, 48))
    patches = vit.patchify(image, desk_config)
    assert np.array_equal(vit.unpatchify(patches, desk_config), image)


def test_patchify_wrong_shape(desk_config: ModelConfig) -> None:
    with pytest.raises(ContractViolation):
        vit.patchify(np.zeros((16, 16)), desk_config)


def test_layer_norm() -> None:
    x = np.random.default_rng(0).normal(size=(5, 8)) * 3 + 2
    out = vit.layer_norm(x, np.ones((1, 8)), np.zeros((1, 8)), 1e-6)
    assert np.allclose(out.mean(axis=1), 0, atol=1e-12)
    assert np.allclose(out.var(axis=1), 1, atol=1e-5)


def test_layer_norm_shape_mismatch() -> None:
    with pytest.raises(ContractViolation):
        vit.layer_norm(np.ones((2, 3)), np.ones((1, 4)), np.ones((1, 4)), 1e-6)


def test_softmax_stable() -> None:
    probs = vit.softmax(np.array([[1000.0, 1000.0], [0.0, -1000.0]]))
    assert np.allclose(probs.sum(axis=1), 1)
    assert np.allclose(probs[0], [0.5, 0.5])
    assert probs[1, 0] == pytest.approx(1.0)


def test_gelu() -> None:
    assert vit.gelu(np.zeros((1, 1)))[0, 0] == 0
    u = np.linspace(-3, 3, 13).reshape(1, -1)
    step = 1e-6
    numeric = (vit.gelu(u + step) - vit.gelu(u - step)) / (2 * step)
    assert np.allclose(vit.gelu_derivative(u), numeric, atol=1e-8)


def test_forward_shapes(
    tiny_config: ModelConfig, tiny_params: ParamSet
) -> None:
    image = np.random.default_rng(1).random((4, 4))
    logits, cache = vit.forward(image, tiny_params, tiny_config)
    assert logits.shape == (1, 3)
    assert cache.z0.shape == (5, 4)
    assert len(cache.blocks) == 1
    assert 0 <= vit.predict(image, tiny_params, tiny_config) < 3


def test_zero_blocks_forward() -> None:
    config = ModelConfig(blocks=0)
    params = vit.init_params(config, 0)
    logits, _ = vit.forward(np.zeros((16, 48)), params, config)
    assert logits.shape == (1, 4)


def _batch(
    config: ModelConfig, seed: int, size: int = 2
) -> list[LabeledImage]:
    items = synth_dataset(
        config.classes,
        1,
        config.image_h,
        config.image_w,
        config.channels,
        seed,
    )
    return items[:size]


@pytest.mark.parametrize("exact", [False, True])
def test_positional_gradient_equals_input_gradient(exact: bool) -> None:
    config = ModelConfig(first_block_pre_ln_identity=exact)
    params = vit.init_params(config, 4)
    for size in (1, 3):
        batch = _batch(config, 4, size)
        _, grads, d_z0 = vit.loss_grad_and_input_grad(batch, params, config)
        assert np.abs(grads["E_pos"] - d_z0).max() < 1e-12
        assert np.abs(grads["x_class"] - d_z0[0:1]).max() < 1e-12


def test_patch_embedding_gradient(
    tiny_config: ModelConfig, tiny_params: ParamSet
) -> None:
    item = _batch(tiny_config, 0, 1)[0]
    _, grads, d_z0 = vit.loss_grad_and_input_grad(
        [item], tiny_params, tiny_config
    )
    patches = vit.patchify(item.image, tiny_config)
    assert np.allclose(grads["E"], patches.T @ d_z0[1:], atol=1e-14)


def test_exact_model_skips_first_layer_norm(
    attack_config: ModelConfig,
) -> None:
    params = vit.init_params(attack_config, 0)
    batch = _batch(attack_config, 0)
    _, grads = vit.loss_and_grad(batch, params, attack_config)
    assert not grads["block1.ln1_gamma"].any()
    assert not grads["block1.ln1_beta"].any()
    assert grads["block1.ln2_gamma"].any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_desk(desk_config: ModelConfig, seed: int) -> None:
    params = vit.init_params(desk_config, seed)
    batch = _batch(desk_config, seed)
    report = vit.grad_check_report(params, batch, desk_config)
    assert set(report) == set(params)
    assert max(report.values()) < 1e-4


def test_grad_check_exact_model(attack_config: ModelConfig) -> None:
    params = vit.init_params(attack_config, 5)
    batch = _batch(attack_config, 5, 3)
    assert vit.grad_check(params, batch, attack_config) < 1e-4


def test_grad_check_detects_sabotage(
    tiny_config: ModelConfig, tiny_params: ParamSet
) -> None:
    batch = _batch(tiny_config, 1)
    _, grads = vit.loss_and_grad(batch, tiny_params, tiny_config)
    grads["block1.mlp_w2"] = grads["block1.mlp_w2"] + 0.1
    report = vit.grad_check_report(
        tiny_params, batch, tiny_config, analytic=grads
    )
    assert max(report, key=lambda k: report[k]) == "block1.mlp_w2"
    assert report["block1.mlp_w2"] > 1e-4


def test_grad_check_scores_small_entries(
    tiny_config: ModelConfig, tiny_params: ParamSet
) -> None:
    batch = _batch(tiny_config, 2)
    _, grads = vit.loss_and_grad(batch, tiny_params, tiny_config)
    magnitude = np.abs(grads["E"])
    large = magnitude >= 1e-3 * magnitude.max()
    candidates = np.where(large, magnitude, np.inf)
    idx = np.unravel_index(np.argmin(candidates), magnitude.shape)
    grads["E"] = grads["E"].copy()
    grads["E"][idx] = -grads["E"][idx]
    report = vit.grad_check_report(
        tiny_params, batch, tiny_config, analytic=grads
    )
    # a flipped sign scores 2 however small the entry is
    assert report["E"] > 1.0


@pytest.mark.parametrize(
    "batch, message",
    [([], "empty batch"), ([LabeledImage(np.zeros((4, 4)), 7)], "Label 7")],
)
def test_loss_rejects(
    tiny_config: ModelConfig,
    tiny_params: ParamSet,
    batch: list[LabeledImage],
    message: str,
) -> None:
    with pytest.raises(ContractViolation) as excinfo:
        vit.loss_and_grad(batch, tiny_params, tiny_config)
    assert message in str(excinfo.value)


def test_loss_is_mean_over_batch(
    tiny_config: ModelConfig, tiny_params: ParamSet
) -> None:
    batch = _batch(tiny_config, 2, 3)
    losses = [vit.batch_loss([x], tiny_params, tiny_config) for x in batch]
    loss, _ = vit.loss_and_grad(batch, tiny_params, tiny_config)
    assert loss == pytest.approx(np.mean(losses), abs=1e-12)


def test_save_load_params(
    tmp_path: Path, tiny_config: ModelConfig, tiny_params: ParamSet
) -> None:
    path = tmp_path / "params.npz"
    vit.save_params(tiny_params, path)
    loaded = vit.load_params(path)
    assert list(loaded) == list(tiny_params)
    assert all(np.array_equal(loaded[k], tiny_params[k]) for k in loaded)


def _attention_loop(
    z: np.ndarray, u_q: np.ndarray, u_k: np.ndarray, u_v: np.ndarray
) -> np.ndarray:
    q, k, v = z @ u_q, z @ u_k, z @ u_v
    rows, width = z.shape[0], u_q.shape[1]
    out = np.zeros((rows, width))
    for i in range(rows):
        scores = [
            sum(q[i, c] * k[j, c] for c in range(width)) / np.sqrt(width)
            for j in range(rows)
        ]
        top = max(scores)
        weights = [np.exp(s - top) for s in scores]
        total = sum(weights)
        for j in range(rows):
            out[i] += weights[j] / total * v[j]
    return out


def test_embed(tiny_config: ModelConfig, tiny_params: ParamSet) -> None:
    patches = np.random.default_rng(3).random((4, 4))
    tokens = vit.embed(patches, tiny_params)
    e, e_pos = tiny_params["E"], tiny_params["E_pos"]
    assert tokens.shape == (5, 4)
    assert np.array_equal(tokens[0], (tiny_params["x_class"] + e_pos[0])[0])
    for i in range(4):
        row = sum(patches[i, k] * e[k] for k in range(4)) + e_pos[i + 1]
        assert np.allclose(tokens[i + 1], row, atol=1e-14)


def test_self_attention_single_row() -> None:
    rng = np.random.default_rng(0)
    z = rng.normal(size=(1, 4))
    u_q, u_k, u_v = (rng.normal(size=(4, 2)) for _ in range(3))
    # one token attends only to itself
    out = vit.self_attention(z, u_q, u_k, u_v, 2)
    assert np.allclose(out, z @ u_v, atol=1e-14)


def test_self_attention_zero_queries_average_values() -> None:
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 4))
    u_k, u_v = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    out = vit.self_attention(z, np.zeros((4, 2)), u_k, u_v, 2)
    mean = (z @ u_v).mean(axis=0)
    assert np.allclose(out, np.tile(mean, (5, 1)), atol=1e-14)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_self_attention_against_loop(seed: int) -> None:
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(5, 4))
    u_q, u_k, u_v = (rng.normal(size=(4, 2)) for _ in range(3))
    expected = _attention_loop(z, u_q, u_k, u_v)
    out = vit.self_attention(z, u_q, u_k, u_v, 2)
    assert np.allclose(out, expected, atol=1e-12)
    with pytest.raises(ContractViolation):
        vit.self_attention(z, u_q, u_k, u_v, 0)


def test_msa_single_head_is_self_attention() -> None:
    config = ModelConfig(
        image_h=4, image_w=4, channels=1, patch=2, embed_dim=4, heads=1
    )
    params = vit.init_params(config, 2)
    params["block1.U_msa"] = np.eye(4)
    z = np.random.default_rng(2).normal(size=(5, 4))
    expected = vit.self_attention(
        z,
        params["block1.U_q.1"],
        params["block1.U_k.1"],
        params["block1.U_v.1"],
        4,
    )
    assert np.allclose(vit.msa(z, params, 1, config), expected, atol=1e-14)


def test_msa_zero_output_map(
    tiny_config: ModelConfig, tiny_params: ParamSet
) -> None:
    params = dict(tiny_params)
    params["block1.U_msa"] = np.zeros((4, 4))
    z = np.random.default_rng(3).normal(size=(5, 4))
    assert not vit.msa(z, params, 1, tiny_config).any()


def test_msa_against_loop(
    tiny_config: ModelConfig, tiny_params: ParamSet
) -> None:
    z = np.random.default_rng(4).normal(size=(5, 4))
    heads = [
        _attention_loop(
            z,
            tiny_params[f"block1.U_q.{t}"],
            tiny_params[f"block1.U_k.{t}"],
            tiny_params[f"block1.U_v.{t}"],
        )
        for t in (1, 2)
    ]
    expected = np.hstack(heads) @ tiny_params["block1.U_msa"]
    out = vit.msa(z, tiny_params, 1, tiny_config)
    assert np.allclose(out, expected, atol=1e-12)


def _zero_block(params: ParamSet) -> ParamSet:
    return {
        name: np.zeros_like(value) if name.startswith("block") else value
        for name, value in params.items()
    }


def test_encoder_block_zero_branches_is_identity(
    tiny_config: ModelConfig, tiny_params: ParamSet
) -> None:
    z = np.random.default_rng(5).normal(size=(5, 4))
    out = vit.encoder_block(z, _zero_block(tiny_params), 1, tiny_config)
    assert np.array_equal(out, z)


def test_encoder_block_without_first_residual(
    attack_config: ModelConfig,
) -> None:
    params = _zero_block(vit.init_params(attack_config, 0))
    z = np.random.default_rng(6).normal(size=(5, 8))
    assert not vit.encoder_block(z, params, 1, attack_config).any()
    # later blocks keep both residual paths
    assert np.array_equal(vit.encoder_block(z, params, 2, attack_config), z)


@pytest.mark.parametrize("exact", [False, True])
def test_encoder_block_against_composition(
    tiny_config: ModelConfig, tiny_params: ParamSet, exact: bool
) -> None:
    config = replace(
        tiny_config,
        first_block_pre_ln_identity=exact,
        first_block_residual=not exact,
    )
    p = tiny_params
    z = np.random.default_rng(7).normal(size=(5, 4))
    eps = config.eps
    ln1 = p["block1.ln1_gamma"], p["block1.ln1_beta"]
    attn_in = z if exact else vit.layer_norm(z, *ln1, eps)
    z_mid = vit.msa(attn_in, p, 1, config) + (0 if exact else z)
    hidden = vit.gelu(
        vit.layer_norm(z_mid, p["block1.ln2_gamma"], p["block1.ln2_beta"], eps)
        @ p["block1.mlp_w1"]
        + p["block1.mlp_b1"]
    )
    expected = hidden @ p["block1.mlp_w2"] + p["block1.mlp_b2"] + z_mid
    out = vit.encoder_block(z, p, 1, config)
    assert np.allclose(out, expected, atol=1e-14)


def test_first_block_without_residual_changes_gradients(
    attack_config: ModelConfig,
) -> None:
    with_residual = replace(attack_config, first_block_residual=True)
    params = vit.init_params(attack_config, 3)
    batch = _batch(attack_config, 3, 1)
    _, exact, _ = vit.loss_grad_and_input_grad(batch, params, attack_config)
    _, plain, _ = vit.loss_grad_and_input_grad(batch, params, with_residual)
    assert not np.allclose(exact["E_pos"], plain["E_pos"])
