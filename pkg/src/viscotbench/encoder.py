"""Differentiable image encoders for white-box embedding attacks.

Ships a small analytic encoder (average pool -> seeded dense projection ->
tanh) whose input gradients are exact, plus a finite-difference checker and
a from-scratch Adam update used by the tanh-space attack.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .imagecore import derive_seed, make_rng

__all__ = [
    "EncoderModel",
    "ToyEncoder",
    "mse_embed_loss",
    "grad_check",
    "AdamState",
    "adam_step",
]


class EncoderModel(Protocol):
    """Deterministic image -> embedding map with analytic input gradients."""

    @property
    def embed_dim(self) -> int: ...

    def embed(self, img: np.ndarray) -> np.ndarray: ...

    def grad_input(
        self, img: np.ndarray, reference: np.ndarray, loss: str = "mse"
    ) -> np.ndarray:
        """Gradient of the scalar embedding loss against `reference`,
        with respect to every input intensity. Shape matches `img`."""
        ...


def mse_embed_loss(z_a: np.ndarray, z_b: np.ndarray) -> float:
    """Mean squared componentwise difference between two embeddings."""
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    if z_a.shape != z_b.shape:
        raise ValueError(f"embedding shapes differ: {z_a.shape} vs {z_b.shape}")
    d = z_a - z_b
    return float(np.mean(d * d))


class ToyEncoder:
    """Average-pool -> flatten -> seeded dense projection -> tanh -> gain.

    Small enough for finite differences yet nonlinear enough to exercise
    the attacks. The projection matrix is regenerated deterministically
    from (seed, input size), so any input resolution works. With
    linear=True the tanh is dropped, making the embedding-MSE loss exactly
    quadratic in the input.

    The output gain puts embedding deviations on the scale of real vision
    towers; without it the distortion term of the tanh-space attack
    dominates its embedding term at every preset trade-off weight and that
    attack degenerates to the identity.
    """

    # images up to this many values get a cached fused pool+project matrix
    _collapse_limit = 65536

    def __init__(
        self,
        pool: int = 4,
        dim: int = 32,
        seed: int = 0,
        linear: bool = False,
        gain: float = 100.0,
    ):
        if pool < 1 or dim < 1:
            raise ValueError("pool and dim must be >= 1")
        if gain <= 0:
            raise ValueError("gain must be > 0")
        self.pool = pool
        self.dim = dim
        self.seed = seed
        self.linear = linear
        self.gain = gain
        # benign races under concurrent reads: both writers store equal matrices
        self._proj_cache: dict[int, np.ndarray] = {}
        self._fused_cache: dict[tuple, np.ndarray] = {}

    @property
    def embed_dim(self) -> int:
        return self.dim

    def _projection(self, n: int) -> np.ndarray:
        w = self._proj_cache.get(n)
        if w is None:
            rng = make_rng(derive_seed("toy-encoder", self.seed, n, self.dim))
            w = rng.standard_normal((self.dim, n)) / np.sqrt(n)
            self._proj_cache[n] = w
        return w

    def _block_layout(self, h: int, w: int):
        p = self.pool
        bh = -(-h // p)
        bw = -(-w // p)
        row_block = np.arange(h) // p
        col_block = np.arange(w) // p
        n_rows = np.minimum(p, h - np.arange(0, h, p)).astype(np.float64)
        n_cols = np.minimum(p, w - np.arange(0, w, p)).astype(np.float64)
        counts = np.outer(n_rows, n_cols)
        return bh, bw, row_block, col_block, counts

    def _fused_matrix(self, h: int, w: int) -> np.ndarray:
        """projection @ pooling collapsed to one (dim, h*w*3) matrix."""
        key = (h, w)
        m = self._fused_cache.get(key)
        if m is None:
            bh, bw, row_block, col_block, counts = self._block_layout(h, w)
            proj = self._projection(bh * bw * 3)
            block = row_block[:, None] * bw + col_block[None, :]
            pooled_idx = (block[:, :, None] * 3 + np.arange(3)).ravel()
            inv_count = (1.0 / counts)[row_block][:, col_block]
            # advanced indexing on axis 1 yields an F-ordered array; keep the
            # hot matvec on a C-contiguous buffer
            m = np.ascontiguousarray(
                proj[:, pooled_idx] * np.repeat(inv_count.ravel(), 3)[None, :]
            )
            self._fused_cache[key] = m
        return m

    def _pool_image(self, img: np.ndarray):
        """Fallback block-mean pooling for images beyond the fused limit."""
        h, w = img.shape[:2]
        p = self.pool
        row_idx = np.arange(0, h, p)
        col_idx = np.arange(0, w, p)
        sums = np.add.reduceat(np.add.reduceat(img, row_idx, axis=0), col_idx, axis=1)
        _, _, _, _, counts = self._block_layout(h, w)
        return sums / counts[:, :, None], counts

    def embed(self, img: np.ndarray) -> np.ndarray:
        h, w = img.shape[:2]
        if img.size <= self._collapse_limit:
            u = self._fused_matrix(h, w) @ img.ravel()
        else:
            pooled, _ = self._pool_image(img)
            u = self._projection(pooled.size) @ pooled.ravel()
        return self.gain * (u if self.linear else np.tanh(u))

    def loss_and_grad(self, img: np.ndarray, reference: np.ndarray):
        """Embedding-MSE loss against `reference` and its input gradient,
        sharing one forward pass."""
        h, w = img.shape[:2]
        fused = img.size <= self._collapse_limit
        if fused:
            m = self._fused_matrix(h, w)
            u = m @ img.ravel()
        else:
            pooled, counts = self._pool_image(img)
            proj = self._projection(pooled.size)
            u = proj @ pooled.ravel()
        t = u if self.linear else np.tanh(u)
        z = self.gain * t
        diff = z - np.asarray(reference, dtype=np.float64)
        loss = float(diff @ diff) / self.dim
        d_u = (2.0 / self.dim) * self.gain * diff
        if not self.linear:
            d_u *= 1.0 - t * t
        if fused:
            return loss, (d_u @ m).reshape(h, w, 3)
        p = self.pool
        d_pooled = (proj.T @ d_u).reshape(pooled.shape)
        per_pixel = d_pooled / counts[:, :, None]
        grad = np.repeat(np.repeat(per_pixel, p, axis=0), p, axis=1)
        return loss, grad[:h, :w]

    def grad_input(self, img: np.ndarray, reference: np.ndarray, loss: str = "mse") -> np.ndarray:
        if loss != "mse":
            raise ValueError(f"unsupported loss kind {loss!r}")
        return self.loss_and_grad(img, reference)[1]


def grad_check(
    enc: EncoderModel,
    img: np.ndarray,
    h: float,
    rng: np.random.Generator | None = None,
    num_coords: int = 64,
) -> float:
    """Max discrepancy between analytic and central-difference gradients.

    The reference embedding comes from a randomly perturbed copy of `img`
    so the gradient is not trivially zero. Errors are measured relative to
    the largest analytic gradient magnitude over >= `num_coords` sampled
    coordinates.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    if rng is None:
        rng = make_rng(0)
    probe = np.clip(img + rng.normal(0.0, 0.1, img.shape), 0.0, 1.0)
    reference = enc.embed(probe)
    analytic = enc.grad_input(img, reference)
    scale = max(float(np.abs(analytic).max()), 1e-12)

    flat_idx = rng.choice(img.size, size=min(num_coords, img.size), replace=False)
    worst = 0.0
    for idx in flat_idx:
        unit = np.zeros(img.size)
        unit[idx] = h
        unit = unit.reshape(img.shape)
        loss_plus = mse_embed_loss(enc.embed(img + unit), reference)
        loss_minus = mse_embed_loss(enc.embed(img - unit), reference)
        numeric = (loss_plus - loss_minus) / (2.0 * h)
        worst = max(worst, abs(numeric - analytic.flat[idx]) / scale)
    return worst


@dataclass
class AdamState:
    """Moment buffers for a bias-corrected Adam update."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kwargs) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **kwargs)


def adam_step(
    state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float
) -> np.ndarray:
    """One bias-corrected Adam step; advances `state` and returns new params."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.m.shape}"
        )
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
