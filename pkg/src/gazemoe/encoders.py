"""Desk-scale stand-ins for the image encoders.

The semantic branch is a frozen random projection over image patches that
yields a global vector and one token per patch. The convolutional branch is a
single trainable 3x3 convolution, GELU and average pooling, flattened into
spatial tokens in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gazemoe import tensor as T
from gazemoe.errors import DimensionError
from gazemoe.nn import Module, param
from gazemoe.tensor import Tensor


@dataclass
class FeatureBundle:
    f_global: Tensor  # (d,) or (B, d)
    t_patch: Tensor  # (N, d) or (B, N, d)
    t_cnn: Tensor  # (M, C) or (B, M, C)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, 3) -> (B, N, patch*patch*3), patches in row-major order."""
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


def im2col_3x3(images: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H*W, 9*C) zero-padded 3x3 neighbourhoods."""
    b, h, w, c = images.shape
    padded = np.pad(images, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [padded[:, dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1).reshape(b, h * w, 9 * c)


class EncoderSuite(Module):
    """Frozen global/patch encoders plus the trainable CNN branch."""

    def __init__(self, image_size: int, patch_size: int, feature_dim: int, cnn_channels: int,
                 cnn_grid: int, frozen_seed: int, rng: np.random.Generator):
        if image_size % patch_size or image_size % cnn_grid:
            raise DimensionError(
                f"image_size {image_size} must be divisible by patch_size {patch_size} and cnn_grid {cnn_grid}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.cnn_grid = cnn_grid
        frozen = np.random.default_rng(frozen_seed)
        patch_dim = patch_size * patch_size * 3
        n_patches = (image_size // patch_size) ** 2
        self.global_map = Tensor(frozen.normal(0.0, 1.0 / np.sqrt(patch_dim * n_patches),
                                               size=(n_patches * patch_dim, feature_dim)))
        self.patch_map = Tensor(frozen.normal(0.0, 1.0 / np.sqrt(patch_dim), size=(patch_dim, feature_dim)))
        self.conv_weight = param(rng.normal(0.0, np.sqrt(2.0 / 27), size=(27, cnn_channels)))
        self.conv_bias = param(np.zeros(cnn_channels))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_cnn_tokens(self) -> int:
        return self.cnn_grid ** 2

    def _check(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images)
        expected = (self.image_size, self.image_size, 3)
        if images.shape[1:] != expected:
            raise DimensionError(f"expected images of shape (B, {expected}), got {images.shape}")
        return images

    def frozen_features(self, images: np.ndarray):
        """Global vectors (B, d) and patch tokens (B, N, d) as plain arrays."""
        images = self._check(images)
        dtype = self.patch_map.dtype
        patches = patchify(images.astype(dtype) - 0.5, self.patch_size)
        f_global = patches.reshape(len(images), -1) @ self.global_map.data
        t_patch = patches @ self.patch_map.data
        return f_global, t_patch

    def cnn_tokens(self, images: np.ndarray) -> Tensor:
        """Trainable branch: (B, H, W, 3) -> (B, grid*grid, C)."""
        images = self._check(images)
        b, size = len(images), self.image_size
        cols = Tensor(im2col_3x3(images.astype(self.conv_weight.dtype) - 0.5))
        fmap = T.gelu(T.matmul(cols, self.conv_weight) + self.conv_bias)
        pool = size // self.cnn_grid
        c = self.conv_weight.shape[1]
        fmap = fmap.reshape(b, self.cnn_grid, pool, self.cnn_grid, pool, c).mean(axis=(2, 4))
        return fmap.reshape(b, self.cnn_grid * self.cnn_grid, c)

    def encode_batch(self, images: np.ndarray) -> FeatureBundle:
        f_global, t_patch = self.frozen_features(images)
        return FeatureBundle(Tensor(f_global), Tensor(t_patch), self.cnn_tokens(images))

    def encode(self, image: np.ndarray) -> FeatureBundle:
        """Single image (H, W, 3) -> unbatched bundle."""
        image = np.asarray(image)
        if image.ndim != 3:
            raise DimensionError(f"expected a single (H, W, 3) image, got shape {image.shape}")
        b = self.encode_batch(image[None])
        return FeatureBundle(b.f_global.reshape(-1), b.t_patch.reshape(b.t_patch.shape[1:]),
                             b.t_cnn.reshape(b.t_cnn.shape[1:]))
