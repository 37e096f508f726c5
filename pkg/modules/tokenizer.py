"""Turns clouds and sample pairs into the patch arrays the model consumes."""

from dataclasses import dataclass

import numpy as np
import torch

from modules.geometry import farthest_point_sample, group_around, knn_group


@dataclass(frozen=True)
class PairPatches:
    centers: np.ndarray        # (M, 3), canonical order, taken from the input cloud
    input_points: np.ndarray   # (M, k, 3) absolute coordinates
    target_points: np.ndarray  # (M, k, 3) absolute coordinates, grouped at the same centers


def patchify_cloud(cloud, patch_count, patch_size, seed=0):
    centers = farthest_point_sample(cloud, patch_count, seed)
    return knn_group(cloud, centers, patch_size)


def patchify_pair(input_cloud, target_cloud, patch_count, patch_size, seed=0):
    patches = patchify_cloud(input_cloud, patch_count, patch_size, seed)
    target = np.asarray(target_cloud, dtype=np.float64)
    return PairPatches(
        centers=patches.centers,
        input_points=patches.points(input_cloud),
        target_points=target[group_around(target, patches.centers, patch_size)],
    )


def to_tensors(patch_list, dtype=torch.float32):
    """Stack PairPatches into (B, M, 3) centers and (B, M, k, 3) point tensors."""
    centers = torch.as_tensor(np.stack([p.centers for p in patch_list]), dtype=dtype)
    inputs = torch.as_tensor(np.stack([p.input_points for p in patch_list]), dtype=dtype)
    targets = torch.as_tensor(np.stack([p.target_points for p in patch_list]), dtype=dtype)
    return centers, inputs, targets
