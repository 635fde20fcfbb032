"""Training losses and image-quality metrics.

Losses are tape ops over :class:`~lmvp.numerics.Tensor`; metrics are plain
numpy on float64 and never touch the tape.  Frame stacks for the pixel losses
are laid out (N, H, W, C') where C' may hold several frames stacked on the
channel axis: every pixel term is a mean and the gradient-difference term
only pairs spatial neighbours, so the stacking does not change any value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import numerics as nx
from .numerics import ContractError, Tensor

EPS = 1e-7
PSNR_CAP = 99.0


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.1
    gdl_weight: float = 1.0
    gdl_alpha: float = 1.0
    recon: str = "bce"
    eps: float = EPS

    def validate(self):
        bad = []
        if self.gamma < 0:
            bad.append("gamma >= 0")
        if self.gdl_weight < 0:
            bad.append("gdl_weight >= 0")
        if self.gdl_alpha < 1:
            bad.append("gdl_alpha >= 1")
        if self.recon not in ("bce", "mse"):
            bad.append("recon in {bce, mse}")
        if not 0 < self.eps < 0.5:
            bad.append("0 < eps < 0.5")
        if bad:
            raise ContractError("loss config violates: " + ", ".join(bad))


# ---------------------------------------------------------------- adversarial

def loss_dis(real_probs: Sequence[Tensor], fake_probs: Sequence[Tensor], eps: float = EPS) -> Tensor:
    """-mean log D(real) - mean log(1 - D(fake)) over every clip score given."""
    if not real_probs or not fake_probs:
        raise ContractError("loss_dis: need at least one real and one fake score")
    real = nx.clamp(nx.concat([nx.reshape(r, (-1,)) for r in real_probs], 0), eps, 1 - eps)
    fake = nx.clamp(nx.concat([nx.reshape(f, (-1,)) for f in fake_probs], 0), eps, 1 - eps)
    return nx.sub(nx.scale(nx.mean_all(nx.log(real)), -1.0),
                  nx.mean_all(nx.log(nx.one_minus(fake))))


# ---------------------------------------------------------------- motion guider

def motion_target(f_seq: Sequence[np.ndarray]) -> list[np.ndarray]:
    """m_t = f_{t+1} - f_t for consecutive leaked features."""
    if len(f_seq) < 2:
        raise ContractError(f"motion_target: need at least 2 feature maps, got {len(f_seq)}")
    return [f_seq[t + 1] - f_seq[t] for t in range(len(f_seq) - 1)]


def _batch(x) -> int:
    d = x.data if isinstance(x, Tensor) else x
    return d.shape[0] if d.ndim == 4 else 1


def loss_guider_learner(m_hat_seq: Sequence[Tensor], m_seq: Sequence[np.ndarray]) -> Tensor:
    """sum_t ||m_hat_t - m_t||^2, averaged over the batch axis."""
    if len(m_hat_seq) != len(m_seq) or not m_seq:
        raise ContractError(f"loss_guider_learner: {len(m_hat_seq)} predictions vs {len(m_seq)} targets")
    terms = []
    for mh, m in zip(m_hat_seq, m_seq):
        m = m if isinstance(m, Tensor) else Tensor(np.asarray(m, mh.dtype))
        terms.append(nx.sum_all(nx.square(nx.sub(mh, m))))
    return nx.scale(_sum(terms), 1.0 / _batch(m_hat_seq[0]))


@dataclass
class TeacherTerm:
    """One prediction step of the teacher loss.

    ``f_next`` is F of the clip that ends in the new frame (on the tape);
    ``f_hat`` and ``m_hat`` are detached inputs.
    """
    f_next: Tensor
    f_hat: np.ndarray | None
    m_hat: np.ndarray | None


def loss_guider_teacher(cache: Sequence[TeacherTerm]) -> Tensor:
    """sum_t ||(F([x_hat_{t-c+1:t}, G(.)]) - f_hat_t) - m_hat_t||^2, averaged over the batch axis."""
    if not cache:
        raise ContractError("loss_guider_teacher: empty rollout cache")
    terms = []
    for i, term in enumerate(cache):
        if term.f_hat is None or term.m_hat is None:
            raise ContractError(f"loss_guider_teacher: step {i} lacks detached f_hat/m_hat")
        f_hat = term.f_hat.data if isinstance(term.f_hat, Tensor) else term.f_hat
        m_hat = term.m_hat.data if isinstance(term.m_hat, Tensor) else term.m_hat
        target = Tensor(np.asarray(f_hat + m_hat, term.f_next.dtype))
        terms.append(nx.sum_all(nx.square(nx.sub(term.f_next, target))))
    return nx.scale(_sum(terms), 1.0 / _batch(cache[0].f_next))


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = nx.add(out, t)
    return out


# ---------------------------------------------------------------- reconstruction

def bce_loss(x: np.ndarray, pred: Tensor, eps: float = EPS) -> Tensor:
    """Mean per-pixel binary cross-entropy with the prediction clamped to [eps, 1-eps]."""
    if x.shape != pred.shape:
        raise ContractError(f"bce: target {x.shape} vs prediction {pred.shape}")
    q = np.clip(pred.data, eps, 1 - eps)
    x = x.astype(q.dtype, copy=False)
    n = q.size
    val = -(x * np.log(q) + (1 - x) * np.log(1 - q)).mean()
    inside = (pred.data >= eps) & (pred.data <= 1 - eps)

    def backward(g):
        return (g * inside * ((1 - x) / (1 - q) - x / q) / n,)

    return nx._node(np.asarray(val, q.dtype), (pred,), backward, "bce")


def mse_loss(x: np.ndarray, pred: Tensor) -> Tensor:
    if x.shape != pred.shape:
        raise ContractError(f"mse: target {x.shape} vs prediction {pred.shape}")
    d = pred.data - x.astype(pred.dtype, copy=False)
    n = d.size
    return nx._node(np.asarray((d * d).mean(), pred.dtype), (pred,),
                    lambda g: (g * 2 * d / n,), "mse")


def gdl_loss(x: np.ndarray, pred: Tensor, alpha: float = 1.0) -> Tensor:
    """Gradient difference loss, mean over all horizontal and vertical neighbour pairs."""
    if x.shape != pred.shape:
        raise ContractError(f"gdl: target {x.shape} vs prediction {pred.shape}")
    if pred.data.ndim < 3:
        raise ContractError(f"gdl: need (..., H, W, C) arrays, got {pred.shape}")
    y = pred.data
    x = x.astype(y.dtype, copy=False)
    parts = []
    total, n_pairs = 0.0, 0
    for axis in (-3, -2):
        dx = np.abs(np.diff(x, axis=axis))
        dy = np.diff(y, axis=axis)
        e = dx - np.abs(dy)
        total += (np.abs(e) ** alpha).sum()
        n_pairs += e.size
        parts.append((axis, dy, e))
    val = total / n_pairs if n_pairs else 0.0

    def backward(g):
        gy = np.zeros_like(y)
        for axis, dy, e in parts:
            # d|e|^a / d(dy) = a |e|^(a-1) sign(e) * (-sign(dy))
            gd = -alpha * np.abs(e) ** (alpha - 1) * np.sign(e) * np.sign(dy) * (g / n_pairs)
            lo = [slice(None)] * y.ndim
            hi = [slice(None)] * y.ndim
            lo[axis] = slice(None, -1)
            hi[axis] = slice(1, None)
            gy[tuple(hi)] += gd
            gy[tuple(lo)] -= gd
        return (gy,)

    return nx._node(np.asarray(val, y.dtype), (pred,), backward, "gdl")


def loss_recons(x: np.ndarray, pred: Tensor, cfg: LossConfig) -> Tensor:
    pixel = bce_loss(x, pred, cfg.eps) if cfg.recon == "bce" else mse_loss(x, pred)
    if cfg.gdl_weight == 0:
        return pixel
    return nx.add(pixel, nx.scale(gdl_loss(x, pred, cfg.gdl_alpha), cfg.gdl_weight))


def loss_gen(recons: Tensor, teacher: Tensor | None, gamma: float) -> Tensor:
    if teacher is None:
        return recons
    return nx.add(recons, nx.scale(teacher, gamma))


# ---------------------------------------------------------------- metrics

@dataclass
class MetricRecord:
    bce: float
    mse: float
    psnr: float
    ssim: float


def bce_metric(x: np.ndarray, y: np.ndarray, eps: float = EPS) -> float:
    x = np.asarray(x, np.float64)
    q = np.clip(np.asarray(y, np.float64), eps, 1 - eps)
    return float(-(x * np.log(q) + (1 - x) * np.log(1 - q)).mean())


def mse_metric(x: np.ndarray, y: np.ndarray) -> float:
    d = np.asarray(x, np.float64) - np.asarray(y, np.float64)
    return float((d * d).mean())


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10 * np.log10(1.0 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0, K1=0.01, K2=0.03,
         win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM of two (H, W) or (H, W, C) images, Gaussian window, valid region only."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if x.shape != y.shape:
        raise ContractError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 3:
        return float(np.mean([ssim(x[..., ch], y[..., ch], data_range, K1, K2, win, sigma)
                              for ch in range(x.shape[2])]))
    if min(x.shape) < win:
        raise ContractError(f"ssim: image {x.shape} smaller than the {win}x{win} window")
    g = gaussian_window(win, sigma)
    C1, C2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return float((num / den).mean())


def frame_metrics(x: np.ndarray, y: np.ndarray) -> MetricRecord:
    mse = mse_metric(x, y)
    return MetricRecord(bce_metric(x, y), mse, psnr_from_mse(mse), ssim(x, y))


def evaluate_metrics(x: np.ndarray, y: np.ndarray) -> MetricRecord:
    """Metrics for a stack of frames (F, H, W, C), each computed per frame then averaged."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ContractError(f"evaluate_metrics: shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x, y = x[None], y[None]
    recs = [frame_metrics(a, b) for a, b in zip(x, y)]
    return MetricRecord(*(float(np.mean([getattr(r, k) for r in recs])) for k in ("bce", "mse", "psnr", "ssim")))
