"""White-box embedding attacks: FGSM, BIM, PGD and untargeted C&W.

All four maximize the MSE between the adversarial and clean embeddings of
an encoder. FGSM/BIM/PGD stay inside an l-inf ball of radius epsilon
(pixel units); C&W optimizes in tanh space with an l2 distortion penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .encoder import AdamState, EncoderModel, adam_step, mse_embed_loss
from .errors import PresetError
from .imagecore import make_rng

__all__ = [
    "AttackKind",
    "AttackConfig",
    "AttackResult",
    "ATTACK_PRESETS",
    "attack_preset",
    "fgsm",
    "bim",
    "pgd",
    "cw",
    "apply_attack",
]

class AttackKind(str, Enum):
    FGSM = "fgsm"
    BIM = "bim"
    PGD = "pgd"
    CW = "cw"


@dataclass(frozen=True)
class AttackConfig:
    """Resolved attack parameters; fields unused by a kind stay None."""

    kind: AttackKind
    level: int
    epsilon: float | None = None
    alpha: float | None = None
    iters: int | None = None
    c_weight: float | None = None
    lr: float | None = None


ATTACK_PRESETS: dict[AttackKind, tuple[dict, ...]] = {
    AttackKind.FGSM: tuple({"epsilon": e / 255.0} for e in (1, 2, 4, 6, 8)),
    AttackKind.BIM: tuple(
        {"epsilon": e / 255.0, "alpha": a / 255.0, "iters": t}
        for e, a, t in ((1, 0.2, 100), (2, 0.4, 200), (4, 0.8, 300), (6, 1.0, 400), (8, 1.2, 500))
    ),
    AttackKind.PGD: tuple(
        {"epsilon": e / 255.0, "alpha": a / 255.0, "iters": t}
        for e, a, t in ((1, 0.2, 100), (2, 0.4, 200), (4, 0.8, 300), (6, 1.0, 400), (8, 1.2, 500))
    ),
    AttackKind.CW: tuple(
        {"c_weight": c, "lr": lr, "iters": t}
        for c, lr, t in ((0.1, 1e-3, 100), (0.5, 1e-3, 200), (1.0, 5e-4, 300), (2.0, 1e-4, 400), (5.0, 1e-4, 500))
    ),
}


def attack_preset(kind, level: int) -> AttackConfig:
    """Resolve (kind, severity level 1..5) to its exact configuration."""
    try:
        kind = AttackKind(kind)
    except ValueError:
        raise PresetError(f"unknown attack kind {kind!r}") from None
    if level not in (1, 2, 3, 4, 5):
        raise PresetError(f"severity level must be 1..5, got {level}")
    return AttackConfig(kind=kind, level=level, **ATTACK_PRESETS[kind][level - 1])


def _loss_and_grad(enc: EncoderModel, img: np.ndarray, reference: np.ndarray):
    fused = getattr(enc, "loss_and_grad", None)
    if fused is not None:
        return fused(img, reference)
    return mse_embed_loss(enc.embed(img), reference), enc.grad_input(img, reference)


def _symmetry_break(shape, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    # the embedding-MSE gradient vanishes identically at delta = 0, so the
    # sign-step attacks start from a vanishingly small random offset
    return rng.uniform(-epsilon * 1e-3, epsilon * 1e-3, shape)


def fgsm(
    img: np.ndarray,
    enc: EncoderModel,
    cfg: AttackConfig,
    rng: np.random.Generator,
    symmetry_break: bool = True,
    loss_trace: list | None = None,
) -> np.ndarray:
    """Single signed-gradient step of size epsilon, clipped to [0, 1]."""
    if cfg.kind != AttackKind.FGSM:
        raise ValueError(f"config is for {cfg.kind}, not fgsm")
    eps = cfg.epsilon
    if eps == 0:
        return img.copy()
    z_clean = enc.embed(img)
    delta = _symmetry_break(img.shape, eps, rng) if symmetry_break else np.zeros_like(img)
    loss, grad = _loss_and_grad(enc, img + delta, z_clean)
    if loss_trace is not None:
        loss_trace.append(loss)
    out = np.clip(img + eps * np.sign(grad), 0.0, 1.0)
    if loss_trace is not None:
        loss_trace.append(mse_embed_loss(enc.embed(out), z_clean))
    return out


def bim(
    img: np.ndarray,
    enc: EncoderModel,
    cfg: AttackConfig,
    rng: np.random.Generator,
    symmetry_break: bool = True,
    loss_trace: list | None = None,
) -> np.ndarray:
    """Iterative sign ascent; delta clipped to the l-inf ball and the image
    kept in [0, 1] every step."""
    if cfg.kind != AttackKind.BIM:
        raise ValueError(f"config is for {cfg.kind}, not bim")
    eps, alpha, iters = cfg.epsilon, cfg.alpha, cfg.iters
    if iters == 0 or eps == 0:
        return img.copy()
    z_clean = enc.embed(img)
    delta = _symmetry_break(img.shape, eps, rng) if symmetry_break else np.zeros_like(img)
    for _ in range(iters):
        loss, grad = _loss_and_grad(enc, img + delta, z_clean)
        if loss_trace is not None:
            loss_trace.append(loss)
        delta = delta + alpha * np.sign(grad)
        delta = np.clip(delta, -eps, eps)
        delta = np.clip(img + delta, 0.0, 1.0) - img
    out = np.clip(img + delta, 0.0, 1.0)
    if loss_trace is not None:
        loss_trace.append(mse_embed_loss(enc.embed(out), z_clean))
    return out


def pgd(
    img: np.ndarray,
    enc: EncoderModel,
    cfg: AttackConfig,
    rng: np.random.Generator,
    loss_trace: list | None = None,
) -> np.ndarray:
    """Uniform random start in the l-inf ball, sign ascent with per-step
    projection back onto the ball, final clip to [0, 1]."""
    if cfg.kind != AttackKind.PGD:
        raise ValueError(f"config is for {cfg.kind}, not pgd")
    eps, alpha, iters = cfg.epsilon, cfg.alpha, cfg.iters
    if eps == 0:
        return img.copy()
    z_clean = enc.embed(img)
    delta = rng.uniform(-eps, eps, img.shape)
    for _ in range(iters):
        loss, grad = _loss_and_grad(enc, img + delta, z_clean)
        if loss_trace is not None:
            loss_trace.append(loss)
        delta = delta + alpha * np.sign(grad)
        delta = np.clip(delta, -eps, eps)
    out = np.clip(img + delta, 0.0, 1.0)
    if loss_trace is not None:
        loss_trace.append(mse_embed_loss(enc.embed(out), z_clean))
    return out


# pixels are pulled this far inside (0, 1) before the arctanh mapping
_ATANH_MARGIN = 1e-6
# fixed stream for the deterministic tanh-space symmetry break
_CW_BREAK_SEED = 0x0C57


def cw(
    img: np.ndarray,
    enc: EncoderModel,
    cfg: AttackConfig,
    literal_sign: bool = False,
    symmetry_break: bool = True,
    loss_trace: list | None = None,
) -> np.ndarray:
    """Adam optimization of a tanh-space variable; fully deterministic.

    The objective combines the embedding deviation (weighted by c_weight)
    with the squared l2 distortion. By default the deviation term is
    maximized (gradient ascent on it) while distortion is minimized;
    literal_sign=True instead descends on both, which drives the output
    back toward the input.

    At the exact tanh round-trip of the input the embedding loss sits at
    its minimum with a vanishing gradient that Adam's epsilon floor cannot
    escape, so (unless disabled) the start point is offset by a tiny
    fixed-seed pattern in tanh space; the offset never exceeds 5e-5 in
    pixel units and the run stays deterministic.
    """
    if cfg.kind != AttackKind.CW:
        raise ValueError(f"config is for {cfg.kind}, not cw")
    c_weight, lr, iters = cfg.c_weight, cfg.lr, cfg.iters
    z_clean = enc.embed(img)
    clamped = np.clip(img, _ATANH_MARGIN, 1.0 - _ATANH_MARGIN)
    w = np.arctanh(2.0 * clamped - 1.0)
    if symmetry_break and iters > 0:
        w = w + make_rng(_CW_BREAK_SEED).uniform(-1e-4, 1e-4, w.shape)
    state = AdamState.zeros(w.size)
    embed_sign = 1.0 if literal_sign else -1.0
    for _ in range(iters):
        x_adv = 0.5 * (np.tanh(w) + 1.0)
        embed_loss, embed_grad = _loss_and_grad(enc, x_adv, z_clean)
        if loss_trace is not None:
            loss_trace.append(embed_loss)
        total_grad_x = embed_sign * c_weight * embed_grad + 2.0 * (x_adv - img)
        # d x_adv / d w = 0.5 * (1 - tanh(w)^2) = 2 * x_adv * (1 - x_adv)
        grad_w = total_grad_x * 2.0 * x_adv * (1.0 - x_adv)
        w = adam_step(state, w.ravel(), grad_w.ravel(), lr).reshape(w.shape)
    x_adv = 0.5 * (np.tanh(w) + 1.0)
    if loss_trace is not None:
        loss_trace.append(mse_embed_loss(enc.embed(x_adv), z_clean))
    return x_adv


@dataclass
class AttackResult:
    """Adversarial image plus the run's bookkeeping."""

    image: np.ndarray
    config: AttackConfig
    seed: int
    losses: list[float] = field(default_factory=list)
    linf: float = 0.0
    l2: float = 0.0


def apply_attack(
    img: np.ndarray,
    enc: EncoderModel,
    kind,
    level: int,
    seed: int = 0,
    symmetry_break: bool = True,
    literal_cw_sign: bool = False,
) -> AttackResult:
    """Resolve the preset for (kind, level), run it, and record the loss
    trace plus final perturbation norms."""
    cfg = attack_preset(kind, level)
    rng = make_rng(seed)
    trace: list[float] = []
    if cfg.kind == AttackKind.FGSM:
        out = fgsm(img, enc, cfg, rng, symmetry_break=symmetry_break, loss_trace=trace)
    elif cfg.kind == AttackKind.BIM:
        out = bim(img, enc, cfg, rng, symmetry_break=symmetry_break, loss_trace=trace)
    elif cfg.kind == AttackKind.PGD:
        out = pgd(img, enc, cfg, rng, loss_trace=trace)
    else:
        out = cw(img, enc, cfg, literal_sign=literal_cw_sign, loss_trace=trace)
    diff = out - img
    return AttackResult(
        image=out,
        config=cfg,
        seed=seed,
        losses=trace,
        linf=float(np.abs(diff).max()),
        l2=float(np.sqrt(np.sum(diff * diff))),
    )
