import numpy as np
import pytest
import torch
from dataclasses import replace

from modules.errors import ConfigError, ContractError, NumericError, ShapeError
from modules.mpm_model import (
    SEGMENTS,
    ModelConfig,
    TokenMatrix,
    assemble_icl_sequence,
    build_model,
    global_feature,
    loss,
    mask_count,
    mask_tokens,
)
from modules.tokenizer import patchify_pair, to_tensors

from tests.conftest import TINY_MODEL

ATOL = 1e-6


def token_matrix(m, c, segment, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    pos = torch.randn(1, m, c, generator=gen, dtype=dtype)
    return TokenMatrix(
        tokens=torch.randn(1, m, c, generator=gen, dtype=dtype) + pos,
        pos=pos,
        centers=torch.randn(1, m, 3, generator=gen, dtype=dtype),
        segments=(segment,) * m,
    )


def icl_sequence(m, c):
    return assemble_icl_sequence(*(token_matrix(m, c, name, seed=i) for i, name in enumerate(SEGMENTS)))


def patch_batch(pair, dtype=torch.float64):
    patches = patchify_pair(pair.input, pair.target, TINY_MODEL.patch_count, TINY_MODEL.patch_size)
    return to_tensors([patches], dtype=dtype)


# ----- config -----
def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(feature_dim=10, n_heads=4).validate()
    assert TINY_MODEL.with_overrides(seed=5).seed == 5
    assert "feature_dim" in ModelConfig.field_names()


def test_build_model_deterministic():
    a, b = build_model(TINY_MODEL), build_model(TINY_MODEL)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


# ----- embedding -----
def test_embed_permutation_invariant(tiny_model_f64, tiny_benchmark):
    centers, points, _ = patch_batch(tiny_benchmark.source[0].all_pairs()[0])
    shuffled = points.clone()
    shuffled[0, 3] = points[0, 3, torch.randperm(points.shape[2])]
    a = tiny_model_f64.embed_patches(centers, points).tokens
    b = tiny_model_f64.embed_patches(centers, shuffled).tokens
    assert torch.allclose(a, b, atol=1e-12)


def test_embed_identical_patches(tiny_model_f64):
    centers = torch.zeros(1, 2, 3, dtype=torch.float64)
    points = torch.randn(1, 1, TINY_MODEL.patch_size, 3, dtype=torch.float64).repeat(1, 2, 1, 1)
    tokens = tiny_model_f64.embed_patches(centers, points).tokens
    assert torch.allclose(tokens[0, 0], tokens[0, 1], atol=1e-12)


def test_embed_zero_weights_gives_position(tiny_model_f64):
    with torch.no_grad():
        tiny_model_f64.patch_embed[2].weight.zero_()
        tiny_model_f64.patch_embed[2].bias.zero_()
    centers = torch.randn(1, 4, 3, dtype=torch.float64)
    points = torch.randn(1, 4, TINY_MODEL.patch_size, 3, dtype=torch.float64)
    out = tiny_model_f64.embed_patches(centers, points)
    assert torch.equal(out.tokens, out.pos)


def test_embed_wrong_patch_size(tiny_model):
    with pytest.raises(ShapeError):
        tiny_model.embed_patches(torch.zeros(1, 4, 3), torch.zeros(1, 4, TINY_MODEL.patch_size + 1, 3))


# ----- global feature -----
def test_global_feature():
    assert torch.equal(global_feature(torch.tensor([[1.0, 0.0], [0.0, 1.0]])), torch.tensor([1.0, 1.0]))
    single = torch.tensor([[0.3, -2.0]])
    assert torch.equal(global_feature(single), single[0])
    x = torch.randn(5, 4)
    assert torch.equal(global_feature(torch.cat([x, x[2:3]])), global_feature(x))


def test_global_feature_array_matches_tensor():
    x = torch.randn(2, 6, 4)
    assert np.array_equal(global_feature(x.numpy()), global_feature(x).numpy())
    with pytest.raises(ShapeError):
        global_feature(np.zeros((0, 4)))


# ----- sequence -----
def test_assemble_layout():
    seq = icl_sequence(8, 4)
    assert seq.length == 32
    for i, name in enumerate(SEGMENTS):
        assert seq.bounds(name) == (8 * i, 8 * (i + 1))
        assert set(seq.segments[8 * i:8 * (i + 1)]) == {name}


def test_assemble_reslice_round_trip():
    seq = icl_sequence(8, 4)
    again = assemble_icl_sequence(*(seq.slice(name) for name in SEGMENTS))
    assert torch.equal(again.tokens, seq.tokens)
    assert again.segments == seq.segments


def test_assemble_length_mismatch():
    parts = [token_matrix(8, 4, name) for name in SEGMENTS]
    parts[2] = token_matrix(7, 4, SEGMENTS[2])
    with pytest.raises(ShapeError):
        assemble_icl_sequence(*parts)


# ----- masking -----
def test_mask_count_arithmetic():
    assert mask_count(0.7, 64) == 45
    assert mask_count(0.0, 64) == 0
    assert mask_count(1.0, 64) == 64


def test_mask_tokens_default_ratio():
    seq = icl_sequence(64, 4)
    mask = torch.randn(4, dtype=torch.float64)
    out, positions = mask_tokens(seq, 0.7, mask, seed=3)
    assert len(positions) == 45 == len(set(positions.tolist()))
    assert positions.min() >= 64 and positions.max() < 128
    assert torch.equal(out.tokens[:, positions], mask + seq.pos[:, positions])
    untouched = [i for i in range(256) if i not in set(positions.tolist())]
    assert torch.equal(out.tokens[:, untouched], seq.tokens[:, untouched])


def test_mask_tokens_extremes():
    seq = icl_sequence(64, 4)
    mask = torch.zeros(4, dtype=torch.float64)
    out, positions = mask_tokens(seq, 0.0, mask, seed=0)
    assert len(positions) == 0 and torch.equal(out.tokens, seq.tokens)
    _, positions = mask_tokens(seq, 1.0, mask, seed=0)
    assert positions.tolist() == list(range(64, 128))


def test_mask_tokens_seeded():
    seq = icl_sequence(16, 4)
    mask = torch.zeros(4, dtype=torch.float64)
    assert torch.equal(mask_tokens(seq, 0.5, mask, 7)[1], mask_tokens(seq, 0.5, mask, 7)[1])


# ----- transformer -----
def test_zero_blocks_is_identity():
    model = build_model(replace(TINY_MODEL, n_blocks=0), dtype=torch.float64)
    seq = icl_sequence(TINY_MODEL.patch_count, TINY_MODEL.feature_dim)
    assert torch.equal(model.transformer_forward(seq).tokens, seq.tokens)


def test_transformer_permutation_equivariant(tiny_model_f64):
    seq = icl_sequence(TINY_MODEL.patch_count, TINY_MODEL.feature_dim)
    perm = torch.randperm(seq.length, generator=torch.Generator().manual_seed(1))
    out = tiny_model_f64.transformer_forward(seq).tokens
    out_perm = tiny_model_f64.transformer_forward(seq.with_tokens(seq.tokens[:, perm])).tokens
    assert torch.allclose(out_perm, out[:, perm], atol=1e-10)


def test_transformer_equal_tokens(tiny_model_f64):
    seq = icl_sequence(TINY_MODEL.patch_count, TINY_MODEL.feature_dim)
    same = torch.randn(1, 1, TINY_MODEL.feature_dim, dtype=torch.float64).expand_as(seq.tokens).clone()
    out = tiny_model_f64.transformer_forward(seq.with_tokens(same)).tokens
    assert torch.allclose(out, out[:, :1].expand_as(out), atol=ATOL)


def test_transformer_non_finite(tiny_model_f64):
    seq = icl_sequence(TINY_MODEL.patch_count, TINY_MODEL.feature_dim)
    tokens = seq.tokens.clone()
    tokens[0, 5, 0] = float("nan")
    with pytest.raises(NumericError) as err:
        tiny_model_f64.transformer_forward(seq.with_tokens(tokens))
    assert err.value.block_index == 0


# ----- reconstruction -----
def test_zero_head_collapses_to_centers(tiny_model_f64):
    with torch.no_grad():
        tiny_model_f64.recon_head.weight.zero_()
        tiny_model_f64.recon_head.bias.zero_()
    seq = icl_sequence(TINY_MODEL.patch_count, TINY_MODEL.feature_dim)
    idx = torch.tensor([8, 10, 15])
    pred = tiny_model_f64.reconstruct_patches(seq, idx)
    assert pred.shape == (1, 3, TINY_MODEL.patch_size, 3)
    expected = seq.centers[:, idx].unsqueeze(-2).expand_as(pred)
    assert torch.equal(pred, expected)


def test_reconstruct_outside_segment(tiny_model_f64):
    seq = icl_sequence(TINY_MODEL.patch_count, TINY_MODEL.feature_dim)
    with pytest.raises(ContractError):
        tiny_model_f64.reconstruct_patches(seq, torch.tensor([0]))


# ----- loss -----
def test_loss_identity():
    gt = torch.randn(2, 5, 8, 3, dtype=torch.float64)
    assert loss(gt.clone(), gt).item() == 0.0


def test_loss_matches_chamfer_examples():
    p = torch.tensor([[[0.0, 0.0, 0.0]]], dtype=torch.float64)
    g = torch.tensor([[[1.0, 0.0, 0.0]]], dtype=torch.float64)
    assert loss(p, g).item() == 2.0
    p2 = torch.tensor([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]], dtype=torch.float64)
    g2 = torch.tensor([[[0.0, 0.0, 0.0]]], dtype=torch.float64)
    assert loss(p2, g2).item() == 0.5


def test_loss_mean_invariant_to_duplication():
    pred = torch.randn(3, 8, 3, dtype=torch.float64)
    gt = torch.randn(3, 8, 3, dtype=torch.float64)
    doubled = loss(torch.cat([pred, pred]), torch.cat([gt, gt]))
    assert torch.allclose(doubled, loss(pred, gt), atol=1e-12)


def test_loss_count_mismatch():
    with pytest.raises(ContractError):
        loss(torch.zeros(3, 8, 3), torch.zeros(2, 8, 3))


def test_loss_gradient_zero_at_optimum():
    gt = torch.randn(4, 8, 3, dtype=torch.float64)
    pred = gt.clone().requires_grad_()
    loss(pred, gt).backward()
    assert pred.grad.abs().max().item() < 1e-8


def test_loss_gradient_linear():
    gt = torch.randn(4, 8, 3, dtype=torch.float64)
    pred = torch.randn(4, 8, 3, dtype=torch.float64, requires_grad=True)
    loss(pred, gt).backward()
    once = pred.grad.clone()
    pred.grad = None
    (2 * loss(pred, gt)).backward()
    assert torch.allclose(pred.grad, 2 * once, atol=1e-9)


# ----- full passes -----
def test_training_step_shapes(tiny_model_f64, tiny_benchmark):
    source = tiny_benchmark.source
    query = patch_batch(source[0].all_pairs()[0])
    prompt = patch_batch(source[1].all_pairs()[0])
    value, pred, gt, _ = tiny_model_f64.training_step(query, prompt, mask_seed=0)
    n = mask_count(TINY_MODEL.mask_ratio, TINY_MODEL.patch_count)
    assert pred.shape == gt.shape == (1, n, TINY_MODEL.patch_size, 3)
    assert np.isfinite(value.item()) and value.item() >= 0.0


def test_predict_masks_every_query_target(tiny_model_f64, tiny_benchmark):
    q = patch_batch(tiny_benchmark.target.all_pairs()[0])
    p = patch_batch(tiny_benchmark.source[0].all_pairs()[0])
    q_in = tiny_model_f64.embed_patches(q[0], q[1])
    p_in, p_tgt = tiny_model_f64.encode_pair(*p, "prompt")
    pred, seq = tiny_model_f64.predict(q_in, q[0], p_in, p_tgt)
    assert pred.shape == (1, TINY_MODEL.patch_count, TINY_MODEL.patch_size, 3)
    start, stop = seq.bounds("query-target")
    expected = tiny_model_f64.mask_token + seq.pos[:, start:stop]
    assert torch.allclose(seq.tokens[:, start:stop], expected)
