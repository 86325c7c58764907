"""Codebook and the quantisation block.

Encoder vectors are snapped to their nearest codebook row; gradients reach
the encoder through a straight-through copy, while the two VQ loss terms
route updates to the codebook and the encoder respectively.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .errors import ConfigError, DimensionError, FormatError


@dataclass
class Codebook:
    """K x D dictionary.  ``vectors`` is a trainable leaf tensor."""

    vectors: Tensor
    unit_sphere: bool = False

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    def numpy(self) -> np.ndarray:
        return self.vectors.data

    @classmethod
    def from_array(cls, arr, unit_sphere: bool = False, requires_grad: bool = True) -> "Codebook":
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim != 2:
            raise DimensionError(f"codebook must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ConfigError(f"codebook needs K >= 2 vectors, got {arr.shape[0]}")
        return cls(Tensor(arr.copy(), requires_grad=requires_grad), unit_sphere)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for row in self.vectors.data:
            buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, unit_sphere: bool = False) -> "Codebook":
        rows = [line for line in text.splitlines() if line.strip() and not line.startswith("#")]
        try:
            arr = np.array([[float(v) for v in line.split(",")] for line in rows], dtype=np.float32)
        except ValueError as exc:
            raise FormatError(f"malformed codebook CSV: {exc}") from exc
        if arr.ndim != 2:
            raise FormatError("codebook CSV rows have inconsistent lengths")
        return cls.from_array(arr, unit_sphere=unit_sphere)


def codebook_init(K: int, D: int, seed: int, unit_sphere: bool = False) -> Codebook:
    """Gaussian rows with per-component std 1/sqrt(D); row-normalised on request."""
    if K < 2:
        raise ConfigError(f"codebook needs K >= 2, got {K}")
    if D < 1:
        raise ConfigError(f"codebook needs D >= 1, got {D}")
    rng = np.random.default_rng(seed)
    while True:
        vecs = rng.normal(0.0, 1.0 / np.sqrt(D), size=(K, D))
        if unit_sphere:
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs = vecs.astype(np.float32)
        if len(np.unique(vecs, axis=0)) == K:
            return Codebook(Tensor(vecs, requires_grad=True), unit_sphere)


def pairwise_sq_dist(e: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Squared L2 distances in float64, shape (M, K)."""
    e64 = np.asarray(e, dtype=np.float64)
    v64 = np.asarray(vectors, dtype=np.float64)
    d = (e64 * e64).sum(1)[:, None] - 2.0 * e64 @ v64.T + (v64 * v64).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest_assign(e, codebook: Codebook | np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row for every row of ``e``; ties go to the lowest index."""
    vectors = codebook.numpy() if isinstance(codebook, Codebook) else np.asarray(codebook)
    e = e.data if isinstance(e, Tensor) else np.asarray(e)
    if e.ndim != 2 or e.shape[1] != vectors.shape[1]:
        raise DimensionError(f"latent rows of shape {e.shape} do not match codebook dimensionality {vectors.shape[1]}")
    d = pairwise_sq_dist(e, vectors)
    idx = np.argmin(d, axis=1)
    # the expanded form can misorder near-ties; settle any close contest exactly
    best = d[np.arange(len(d)), idx]
    e64 = e.astype(np.float64)
    scale = 1.0 + (e64 * e64).sum(1) + float((vectors.astype(np.float64) ** 2).sum(1).max())
    close = (d <= (best + 1e-9 * scale)[:, None]).sum(1) > 1
    if close.any():
        rows = np.nonzero(close)[0]
        diff = e64[rows][:, None, :] - vectors.astype(np.float64)[None, :, :]
        exact = (diff * diff).sum(axis=2)
        idx[rows] = np.argmin(exact, axis=1)
    return idx


@dataclass
class QuantOutput:
    z_q: Tensor
    indices: np.ndarray  # [N, H, W]
    codebook_loss: Tensor
    commitment_loss: Tensor


def quantise(e: Tensor, codebook: Codebook, beta: float = 0.25) -> QuantOutput:
    """Quantise ``e[N,D,H,W]`` position-wise against ``codebook``."""
    if e.ndim != 4:
        raise DimensionError(f"quantise expects [N,D,H,W], got {e.shape}")
    N, D, H, W = e.shape
    if D != codebook.D:
        raise DimensionError(f"latent axis 1 has {D} channels but codebook D={codebook.D}")
    if beta < 0:
        raise ConfigError(f"beta must be non-negative, got {beta}")

    flat = ops.reshape(ops.transpose(e, (0, 2, 3, 1)), (N * H * W, D))
    idx = nearest_assign(flat.data, codebook)
    rows = ops.take_rows(codebook.vectors, idx)

    # codebook term: gradient only to the codebook rows
    cb_diff = ops.sub(ops.stop_gradient(flat), rows)
    codebook_loss = ops.mean(ops.sum(ops.square(cb_diff), axis=1))
    # commitment term: gradient only to the encoder
    cm_diff = ops.sub(flat, ops.stop_gradient(rows))
    commitment_loss = ops.mul(ops.mean(ops.sum(ops.square(cm_diff), axis=1)), float(beta))

    zq_flat = ops.straight_through(flat, ops.stop_gradient(rows))
    z_q = ops.transpose(ops.reshape(zq_flat, (N, H, W, D)), (0, 3, 1, 2))
    return QuantOutput(z_q=z_q, indices=idx.reshape(N, H, W), codebook_loss=codebook_loss, commitment_loss=commitment_loss)


def usage_counts(indices: np.ndarray, K: int) -> np.ndarray:
    return np.bincount(np.asarray(indices).reshape(-1), minlength=K).astype(np.int64)


def reseed_dead_codes(codebook: Codebook, counts: np.ndarray, encoder_rows: np.ndarray, rng: np.random.Generator) -> int:
    """Move never-assigned codebook rows onto randomly chosen encoder outputs.

    Off by default during training; returns the number of rows moved.
    """
    dead = np.nonzero(np.asarray(counts) == 0)[0]
    if len(dead) == 0 or len(encoder_rows) == 0:
        return 0
    pick = rng.choice(len(encoder_rows), size=len(dead), replace=len(encoder_rows) < len(dead))
    codebook.vectors.data[dead] = encoder_rows[pick]
    return int(len(dead))
