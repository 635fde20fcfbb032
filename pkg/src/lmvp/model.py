"""The three networks: discriminator (extractor F + head C), motion guider M, generator G.

Parameters live in one flat ``name -> ndarray`` mapping; the prefix of each
name (``F.``, ``C.``, ``M.``, ``G.``) is its group.  Forward functions take a
``name -> Tensor`` mapping produced by :meth:`ModelParams.leaves`, which
decides per pass which groups carry gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor

GROUPS = ("F", "C", "M", "G")
DISCRIMINATOR = ("F", "C")


@dataclass(frozen=True)
class ModelConfig:
    C: int = 1
    c: int = 3  # clips hold c+1 frames
    K: int = 5  # dynamic filter size
    feat: int = 64  # channels of f^d, m, f^s, f^m
    width1: int = 32  # first conv width in F and in the spatial encoder
    hidden: int = 64  # guider GRU state channels
    dec1: int = 64
    dec2: int = 32

    def validate(self):
        if self.c < 1 or self.K < 1 or self.K % 2 == 0:
            raise ContractError(f"model config: need c >= 1 and odd K, got c={self.c}, K={self.K}")


def _conv_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    C, f, w1, hd = cfg.C, cfg.feat, cfg.width1, cfg.hidden
    clip_ch = (cfg.c + 1) * C
    return {
        "F.conv1": (3, 3, clip_ch, w1),
        "F.conv2": (3, 3, w1, f),
        "F.conv3": (3, 3, f, f),
        "C.conv": (3, 3, f, f),
        "C.fc": (1, f),
        "M.gru.zr": (3, 3, f + hd, 2 * hd),
        "M.gru.h": (3, 3, f + hd, hd),
        "M.out": (3, 3, hd, f),
        "G.enc1": (3, 3, C, w1),
        "G.enc2": (3, 3, w1, f),
        "G.enc3": (3, 3, f, f),
        "G.motion": (3, 3, f, f),
        "G.dec1": (3, 3, 2 * f, cfg.dec1),
        "G.dec2": (3, 3, cfg.dec1, cfg.dec2),
        "G.filt": (1, 1, cfg.dec2, cfg.K * cfg.K),
    }


class ModelParams:
    """Named parameter arrays partitioned into the groups F, C, M and G."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays
        for name in arrays:
            if name.split(".", 1)[0] not in GROUPS:
                raise ContractError(f"parameter {name!r} belongs to no group")

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "ModelParams":
        cfg.validate()
        rng = np.random.default_rng(seed)
        arrays = {}
        for base, shape in _conv_shapes(cfg).items():
            if len(shape) == 4:
                fan_in = shape[0] * shape[1] * shape[2]
                fan_out = shape[0] * shape[1] * shape[3]
            else:
                fan_out, fan_in = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[base + ".w"] = rng.uniform(-a, a, size=shape).astype(dtype)
            arrays[base + ".b"] = np.zeros(shape[-1] if len(shape) == 4 else shape[0], dtype)
        return cls(arrays)

    def group(self, g: str) -> list[str]:
        return [n for n in self.arrays if n.startswith(g + ".")]

    def names(self, groups: Sequence[str]) -> list[str]:
        return [n for g in groups for n in self.group(g)]

    def leaves(self, trainable: Sequence[str] = ()) -> dict[str, Tensor]:
        """Wrap every array as a tape leaf; only groups in ``trainable`` require grads."""
        return {n: Tensor(a, requires_grad=n.split(".", 1)[0] in trainable, name=n)
                for n, a in self.arrays.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: a.copy() for n, a in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.snapshot())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({n: a.astype(dtype) for n, a in self.arrays.items()})


def _conv(x, p, name, stride=1, act=None):
    y = nx.bias_add(nx.conv2d(x, p[name + ".w"], stride=stride), p[name + ".b"])
    return nx.activation(y, act) if act else y


def _check_frames(frames, cfg: ModelConfig):
    if len(frames) != cfg.c + 1:
        raise ContractError(f"clip must hold c+1={cfg.c + 1} frames, got {len(frames)}")


def extract_features(frames: Sequence[Tensor], p, cfg: ModelConfig) -> Tensor:
    """Leaked feature f^d of a clip; frames are stacked on the channel axis."""
    _check_frames(frames, cfg)
    x = nx.concat(list(frames), axis=-1)
    x = _conv(x, p, "F.conv1", 1, "leaky_relu")
    x = _conv(x, p, "F.conv2", 2, "leaky_relu")
    return _conv(x, p, "F.conv3", 2, "leaky_relu")


def classify(f: Tensor, p) -> Tensor:
    x = _conv(f, p, "C.conv", 2, "leaky_relu")
    x = nx.global_avg_pool(x)
    logit = nx.dense(x, p["C.fc.w"], p["C.fc.b"])
    return nx.reshape(nx.activation(logit, "sigmoid"), (-1,))


def discriminate(frames: Sequence[Tensor], p, cfg: ModelConfig) -> Tensor:
    """Probability that each clip in the batch is real, shape (N,)."""
    return classify(extract_features(frames, p, cfg), p)


def zero_hidden(f: Tensor, cfg: ModelConfig) -> Tensor:
    N, h, w, _ = f.shape
    return Tensor(np.zeros((N, h, w, cfg.hidden), f.dtype))


def guide_motion(f: Tensor, hidden: Tensor | None, p, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    if hidden is None:
        hidden = zero_hidden(f, cfg)
    if hidden.shape[:3] != f.shape[:3] or hidden.shape[3] != cfg.hidden:
        raise ContractError(f"guide_motion: hidden {hidden.shape} does not fit features {f.shape}")
    gru = {"w_zr": p["M.gru.zr.w"], "b_zr": p["M.gru.zr.b"], "w_h": p["M.gru.h.w"], "b_h": p["M.gru.h.b"]}
    h = nx.conv_gru_step(hidden, f, gru)
    return _conv(h, p, "M.out"), h


def encode_spatial(frame: Tensor, p) -> Tensor:
    x = _conv(frame, p, "G.enc1", 1, "relu")
    x = _conv(x, p, "G.enc2", 2, "relu")
    return _conv(x, p, "G.enc3", 2, "relu")


def encode_motion(m: Tensor, p) -> Tensor:
    return _conv(m, p, "G.motion", 1, "relu")


def filter_logits(f_s: Tensor, f_m: Tensor, p) -> Tensor:
    if f_s.shape != f_m.shape:
        raise ContractError(f"make_filters: spatial {f_s.shape} and motion {f_m.shape} features differ")
    x = nx.concat([f_s, f_m], axis=-1)
    x = _conv(nx.upsample2x(x), p, "G.dec1", 1, "relu")
    x = _conv(nx.upsample2x(x), p, "G.dec2", 1, "relu")
    return _conv(x, p, "G.filt")


def make_filters(f_s: Tensor, f_m: Tensor, p) -> Tensor:
    """Per-pixel K*K filter bank (N, H, W, K*K), softmax-normalized per pixel."""
    return nx.softmax_sites(filter_logits(f_s, f_m, p))


def apply_dynamic_filter(frame: Tensor, filters: Tensor) -> Tensor:
    """out(i,j) = sum_{u,v} w_ij(u,v) * frame(i+u, j+v) with edge-replicated borders."""
    KK = filters.shape[-1]
    K = int(round(KK ** 0.5))
    if K * K != KK or K % 2 == 0:
        raise ContractError(f"apply_dynamic_filter: {KK} taps is not an odd square filter")
    if filters.shape[:3] != frame.shape[:3]:
        raise ContractError(f"apply_dynamic_filter: filters {filters.shape} do not cover frame {frame.shape}")
    return nx.local_filter(nx.pad_replicate(frame, K // 2), filters)


def _unit_range(x: Tensor) -> Tensor:
    # float32 softmax weights sum to 1 only up to rounding; trim the overshoot
    # and pass the gradient straight through
    return nx._node(np.clip(x.data, 0, 1), (x,), lambda g: (g,), "unit_range")


def predict_next(frame: Tensor, m_hat: Tensor, p) -> Tensor:
    f_s = encode_spatial(frame, p)
    f_m = encode_motion(m_hat, p)
    return _unit_range(apply_dynamic_filter(frame, make_filters(f_s, f_m, p)))


def predict_next_ablation(frame: Tensor, f_s: Tensor, f_s_prev: Tensor, p) -> Tensor:
    """No-guider generator step: motion comes from the change in spatial encodings."""
    f_m = encode_motion(nx.sub(f_s, f_s_prev), p)
    return _unit_range(apply_dynamic_filter(frame, make_filters(f_s, f_m, p)))


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
