"""
Masked point modeling model: patch tokenization, in-context sequence
assembly, masking, transformer blocks and per-patch coordinate
reconstruction.

Token tensors are token-major, (B, L, C). A sequence has four segments of M
tokens each, in the fixed order of SEGMENTS.
"""

import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
import torch
import torch.nn as nn

from modules.errors import ConfigError, ContractError, NumericError, ShapeError

logger = logging.getLogger("MPMModel")

SEGMENTS = ("query-input", "query-target", "prompt-input", "prompt-target")


# ==============================
# CONFIG
# ==============================
@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 128
    patch_count: int = 64
    patch_size: int = 32
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: float = 2.0
    mask_ratio: float = 0.7
    learning_rate: float = 0.001
    weight_decay: float = 0.05
    batch_size: int = 128
    epochs: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def validate(self):
        if self.feature_dim < 1 or self.n_heads < 1 or self.feature_dim % self.n_heads:
            raise ConfigError(
                f"feature_dim {self.feature_dim} must be divisible by n_heads {self.n_heads}"
            )
        if self.patch_count < 1 or self.patch_size < 1 or self.n_blocks < 0:
            raise ConfigError("patch_count and patch_size must be >= 1, n_blocks >= 0")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        return self

    def to_dict(self):
        return asdict(self)

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# ==============================
# TOKENS
# ==============================
@dataclass
class TokenMatrix:
    tokens: torch.Tensor     # (B, L, C) content + positional embedding
    pos: torch.Tensor        # (B, L, C) positional embedding alone
    centers: torch.Tensor    # (B, L, 3)
    segments: tuple          # L segment names
    pool_index: torch.Tensor = None  # (B, L, C) max-pool winners, when freshly embedded

    @property
    def length(self):
        return self.tokens.shape[1]

    def bounds(self, segment):
        if segment not in self.segments:
            raise ContractError(f"sequence has no '{segment}' segment")
        start = self.segments.index(segment)
        return start, start + self.segments.count(segment)

    def slice(self, segment):
        start, stop = self.bounds(segment)
        return TokenMatrix(
            tokens=self.tokens[:, start:stop],
            pos=self.pos[:, start:stop],
            centers=self.centers[:, start:stop],
            segments=self.segments[start:stop],
        )

    def with_tokens(self, tokens):
        return TokenMatrix(tokens=tokens, pos=self.pos, centers=self.centers, segments=self.segments)


def global_feature(tokens):
    """Element-wise max over the token axis of a TokenMatrix, (..., M, C) tensor or array."""
    x = tokens.tokens if isinstance(tokens, TokenMatrix) else tokens
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError("global_feature needs at least one token")
    if isinstance(x, np.ndarray):
        return x.max(axis=-2)
    return x.amax(dim=-2)


def assemble_icl_sequence(q_in, q_tgt, p_in, p_tgt):
    parts = (q_in, q_tgt, p_in, p_tgt)
    m = q_in.length
    for name, part in zip(SEGMENTS, parts):
        if part.length != m:
            raise ShapeError(f"segment '{name}' has {part.length} tokens, expected {m}")
    return TokenMatrix(
        tokens=torch.cat([p.tokens for p in parts], dim=1),
        pos=torch.cat([p.pos for p in parts], dim=1),
        centers=torch.cat([p.centers for p in parts], dim=1),
        segments=tuple(name for name in SEGMENTS for _ in range(m)),
    )


def mask_count(ratio, m):
    return math.ceil(round(ratio * m, 9))


def mask_tokens(seq, ratio, mask_token, seed):
    """Replace ceil(ratio * M) query-target tokens by mask_token + their
    positional embedding. Returns (sequence, absolute positions)."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio must lie in [0, 1], got {ratio}")
    start, stop = seq.bounds("query-target")
    m = stop - start
    n = mask_count(ratio, m)
    gen = torch.Generator().manual_seed(int(seed))
    rel = torch.sort(torch.randperm(m, generator=gen)[:n]).values
    positions = rel + start
    if n == 0:
        return seq, positions
    tokens = seq.tokens.clone()
    tokens[:, positions] = mask_token.to(tokens.dtype) + seq.pos[:, positions]
    return seq.with_tokens(tokens), positions


# ==============================
# LOSS
# ==============================
def chamfer_terms(pred, gt):
    """Per-patch Chamfer distance plus the nearest-neighbour assignments."""
    diff = pred[..., :, None, :] - gt[..., None, :, :]
    d = (diff * diff).sum(-1)
    to_gt, idx_p = d.min(dim=-1)
    to_pred, idx_g = d.min(dim=-2)
    return to_gt.mean(-1) + to_pred.mean(-1), (idx_p, idx_g)


def loss(pred_patches, gt_patches):
    """Mean Chamfer distance over masked patches."""
    if pred_patches.shape[:-2] != gt_patches.shape[:-2]:
        raise ContractError(
            f"{tuple(pred_patches.shape[:-2])} predicted vs {tuple(gt_patches.shape[:-2])} "
            "ground-truth patches"
        )
    cd, _ = chamfer_terms(pred_patches, gt_patches)
    return cd.mean()


# ==============================
# LAYERS
# ==============================
class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


# ==============================
# MODEL
# ==============================
class PointInContextModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        C = config.feature_dim
        self.patch_embed = nn.Sequential(nn.Linear(3, C), nn.GELU(), nn.Linear(C, C))
        self.pos_embed = nn.Sequential(nn.Linear(3, C), nn.GELU(), nn.Linear(C, C))
        self.blocks = nn.ModuleList(
            [Block(C, config.n_heads, config.mlp_ratio) for _ in range(config.n_blocks)]
        )
        self.norm = nn.LayerNorm(C)
        self.mask_token = nn.Parameter(torch.zeros(C))
        self.recon_head = nn.Linear(C, config.patch_size * 3)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @property
    def dtype(self):
        return self.mask_token.dtype

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())

    # ----- tokenization -----
    def embed_patches(self, centers, points, segment="query-input"):
        """centers (B, M, 3), points (B, M, k, 3) in cloud coordinates."""
        if points.shape[-2] != self.config.patch_size or points.shape[-1] != 3:
            raise ShapeError(
                f"patches of {points.shape[-2]} points, model expects {self.config.patch_size}"
            )
        rel = points - centers.unsqueeze(-2)
        pooled, pool_index = self.patch_embed(rel).max(dim=-2)
        pos = self.pos_embed(centers)
        return TokenMatrix(
            tokens=pooled + pos,
            pos=pos,
            centers=centers,
            segments=(segment,) * centers.shape[1],
            pool_index=pool_index,
        )

    def placeholder(self, centers, segment="query-target"):
        """Tokens for a segment whose content is unknown: positional embedding only."""
        pos = self.pos_embed(centers)
        return TokenMatrix(tokens=pos, pos=pos, centers=centers, segments=(segment,) * centers.shape[1])

    # ----- transformer -----
    def transformer_forward(self, seq):
        x = seq.tokens
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activation after block {i}", block_index=i)
        return seq.with_tokens(x)

    def reconstruct_patches(self, seq_out, indices):
        """Predicted (B, |indices|, k, 3) patch points in cloud coordinates."""
        start, stop = seq_out.bounds("query-target")
        indices = torch.as_tensor(indices, dtype=torch.long)
        if indices.numel() and (indices.min() < start or indices.max() >= stop):
            raise ContractError(f"indices must lie in the query-target segment [{start}, {stop})")
        x = self.norm(seq_out.tokens[:, indices])
        B, n, _ = x.shape
        offsets = self.recon_head(x).reshape(B, n, self.config.patch_size, 3)
        return seq_out.centers[:, indices].unsqueeze(-2) + offsets

    # ----- full passes -----
    def encode_pair(self, centers, input_points, target_points, prefix):
        return (
            self.embed_patches(centers, input_points, f"{prefix}-input"),
            self.embed_patches(centers, target_points, f"{prefix}-target"),
        )

    def training_step(self, query, prompt, mask_seed, mask_ratio=None):
        """query / prompt: (centers, input_points, target_points) tensors.

        Returns (loss, predicted patches, ground-truth patches, sequence)."""
        q_in, q_tgt = self.encode_pair(*query, "query")
        p_in, p_tgt = self.encode_pair(*prompt, "prompt")
        seq = assemble_icl_sequence(q_in, q_tgt, p_in, p_tgt)
        ratio = self.config.mask_ratio if mask_ratio is None else mask_ratio
        seq, positions = mask_tokens(seq, ratio, self.mask_token, mask_seed)
        out = self.transformer_forward(seq)
        pred = self.reconstruct_patches(out, positions)
        m = self.config.patch_count
        gt = query[2][:, positions - m]
        return loss(pred, gt), pred, gt, (q_in, q_tgt, p_in, p_tgt)

    def predict(self, query_in, query_centers, prompt_in, prompt_tgt):
        """In-context prediction with every query-target token masked."""
        q_tgt = self.placeholder(query_centers)
        seq = assemble_icl_sequence(query_in, q_tgt, prompt_in, prompt_tgt)
        seq, positions = mask_tokens(seq, 1.0, self.mask_token, 0)
        out = self.transformer_forward(seq)
        return self.reconstruct_patches(out, positions), seq


def build_model(config, dtype=torch.float32):
    """Fresh model whose initial weights depend only on config.seed."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = PointInContextModel(config)
    return model.to(dtype)
