"""Rollout, pretraining, the three-phase training loop, checkpoints and evaluation.

Frames are indexed from 0.  Frames ``0 .. T0-1`` are given; ``T0 .. T-1``
are predicted.  The clip ending at ``t`` holds frames ``t-c .. t`` and the
guider runs for ``t = c .. T-2``.  From ``t = T0-1`` on, every guider step is
followed by a generator step producing frame ``t+1``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import VideoSet, batch_order, FormatError
from .losses import (LossConfig, TeacherTerm, loss_dis, loss_gen, loss_guider_learner,
                     loss_guider_teacher, loss_recons, motion_target, evaluate_metrics,
                     MetricRecord)
from .model import (ModelConfig, ModelParams, extract_features, classify, guide_motion,
                    encode_spatial, predict_next, predict_next_ablation, DISCRIMINATOR)
from .numerics import AdamState, ContractError, NumericalError, Tensor, no_grad

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ["iter", "loss_dis", "loss_recons", "loss_teacher", "loss_gen", "loss_guider"]
EVAL_HEADER = ["step", "bce", "mse", "psnr", "ssim", "baseline_bce", "baseline_mse",
               "baseline_psnr", "baseline_ssim"]
OPTIMIZERS = {"F": "dis", "C": "dis", "M": "guider", "G": "gen"}


class TrainingAborted(RuntimeError):
    def __init__(self, phase, iteration, cause):
        super().__init__(f"non-finite value in phase '{phase}' at iteration {iteration}: {cause}")
        self.phase = phase
        self.iteration = iteration


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def state(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps)


@dataclass(frozen=True)
class TrainConfig:
    T0: int = 6
    batch_size: int = 8
    pretrain_iters: int = 300
    main_iters: int = 1500
    eval_interval: int = 500
    seed: int = 0
    mode: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    adam_dis: AdamConfig = field(default_factory=AdamConfig)
    adam_guider: AdamConfig = field(default_factory=AdamConfig)
    adam_gen: AdamConfig = field(default_factory=AdamConfig)

    @property
    def c(self) -> int:
        return self.model.c

    @property
    def gamma(self) -> float:
        return 0.0 if self.mode == "ablation" else self.loss.gamma

    @property
    def total_iters(self) -> int:
        return self.pretrain_iters + self.main_iters

    def validate(self, T: int | None = None):
        bad = []
        if self.c + 1 > self.T0:
            bad.append(f"c+1 <= T0 (c={self.c}, T0={self.T0})")
        if T is not None and self.T0 >= T:
            bad.append(f"T0 < T (T0={self.T0}, T={T})")
        if min(self.pretrain_iters, self.main_iters) < 0 or self.eval_interval < 0:
            bad.append("iteration counts >= 0")
        if self.batch_size < 1:
            bad.append("batch_size >= 1")
        if self.mode not in ("full", "ablation"):
            bad.append("mode in {full, ablation}")
        if bad:
            raise ContractError("train config violates: " + ", ".join(bad))
        self.model.validate()
        self.loss.validate()

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------- rollout

@dataclass
class RolloutCache:
    preds: list[Tensor]  # frames T0 .. T-1
    f_hat: list[Tensor] = field(default_factory=list)  # guider inputs, t = c .. T-2
    m_hat: list[Tensor] = field(default_factory=list)
    hidden: list[Tensor] = field(default_factory=list)
    teacher: list[TeacherTerm] = field(default_factory=list)


def _frames(videos: np.ndarray) -> list[Tensor]:
    return [Tensor(np.ascontiguousarray(videos[:, t])) for t in range(videos.shape[1])]


def _detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def rollout(videos: np.ndarray, p: dict, cfg: TrainConfig, *, detach_motion=True,
            teacher=False) -> RolloutCache:
    """Teacher-forced on the first T0 frames, autoregressive afterwards.

    With ``detach_motion`` the guider sees detached features and the generator
    a detached motion feature, so only the generator's own path is on the tape.
    With ``teacher`` the cache also collects the teacher-loss terms.
    """
    T = videos.shape[1]
    c, T0 = cfg.c, cfg.T0
    if T0 < c + 1 or T0 >= T:
        raise ContractError(f"rollout: need c+1 <= T0 < T, got c={c}, T0={T0}, T={T}")
    seq = _frames(videos)[:T0]
    if cfg.mode == "ablation":
        return _rollout_ablation(seq, p, T)

    cache = RolloutCache(preds=[])
    hidden = None
    pending = None  # (f_hat, m_hat) of the last generator step, awaiting F of its new clip
    for t in range(c, T - 1):
        f = extract_features(seq[t - c:t + 1], p, cfg.model)
        if pending is not None:
            cache.teacher.append(TeacherTerm(f, *pending))
            pending = None
        f_in = _detach(f) if detach_motion else f
        m_hat, hidden = guide_motion(f_in, hidden, p, cfg.model)
        cache.f_hat.append(f)
        cache.m_hat.append(m_hat)
        cache.hidden.append(hidden)
        if t >= T0 - 1:
            m_in = _detach(m_hat) if detach_motion else m_hat
            x_next = predict_next(seq[t], m_in, p)
            seq.append(x_next)
            cache.preds.append(x_next)
            if teacher:
                pending = (f.data, m_hat.data)
    if pending is not None:
        f = extract_features(seq[T - 1 - c:T], p, cfg.model)
        cache.teacher.append(TeacherTerm(f, *pending))
    return cache


def _rollout_ablation(seq: list[Tensor], p: dict, T: int) -> RolloutCache:
    cache = RolloutCache(preds=[])
    T0 = len(seq)
    f_prev = encode_spatial(seq[T0 - 2], p)
    for t in range(T0 - 1, T - 1):
        f_s = encode_spatial(seq[t], p)
        x_next = predict_next_ablation(seq[t], f_s, f_prev, p)
        seq.append(x_next)
        cache.preds.append(x_next)
        f_prev = f_s
    return cache


def real_features(videos: np.ndarray, p: dict, cfg: TrainConfig) -> list[Tensor]:
    """F on every real clip, t = c .. T-1, evaluated as one batch."""
    N, T = videos.shape[:2]
    c = cfg.c
    steps = list(range(c, T))
    frames = [Tensor(np.concatenate([videos[:, t - c + j] for t in steps], axis=0)) for j in range(c + 1)]
    f = extract_features(frames, p, cfg.model)
    return [Tensor(f.data[i * N:(i + 1) * N]) for i in range(len(steps))]


def _stack_channels(frames: Sequence) -> Tensor:
    return nx.concat(list(frames), axis=-1)


def _targets(videos: np.ndarray, T0: int) -> np.ndarray:
    # (N, T-T0, H, W, C) -> (N, H, W, (T-T0)*C), the layout of _stack_channels
    tgt = videos[:, T0:]
    N, S, H, W, C = tgt.shape
    return np.ascontiguousarray(tgt.transpose(0, 2, 3, 1, 4).reshape(N, H, W, S * C))


# ---------------------------------------------------------------- trainer

@dataclass
class PhaseReport:
    iteration: int
    loss_dis: float | None = None
    loss_recons: float | None = None
    loss_teacher: float | None = None
    loss_gen: float | None = None
    loss_guider: float | None = None

    def row(self) -> list[str]:
        vals = [self.loss_dis, self.loss_recons, self.loss_teacher, self.loss_gen, self.loss_guider]
        return [str(self.iteration)] + ["" if v is None else repr(float(v)) for v in vals]


def _finite(value: Tensor, phase: str, it: int) -> float:
    v = float(value.data)
    if not np.isfinite(v):
        raise TrainingAborted(phase, it, "loss is not finite")
    return v


class Trainer:
    """Owns parameters and optimizer states and runs Algorithm-style updates.

    ``iteration`` counts completed iterations over pretraining and the main
    loop together; minibatch order and everything else random derive from
    ``(seed, iteration)``, so a restored trainer continues exactly.
    """

    def __init__(self, cfg: TrainConfig, train: VideoSet, params: ModelParams | None = None,
                 states: dict[str, AdamState] | None = None, iteration: int = 0):
        cfg.validate(train.videos.shape[1])
        if train.videos.shape[-1] != cfg.model.C:
            raise ContractError(f"data has C={train.videos.shape[-1]} channels, model expects {cfg.model.C}")
        if len(train) == 0:
            raise ContractError("empty training set")
        self.cfg = cfg
        self.train = train
        self.params = params if params is not None else ModelParams.init(cfg.model, cfg.seed)
        self.states = states if states is not None else {
            "dis": cfg.adam_dis.state(), "guider": cfg.adam_guider.state(), "gen": cfg.adam_gen.state()}
        self.iteration = iteration
        self.history: list[PhaseReport] = []
        self._orders: dict[int, list[np.ndarray]] = {}

    # -- batches
    def batch(self, iteration: int | None = None) -> np.ndarray:
        it = self.iteration if iteration is None else iteration
        n, bs = len(self.train), self.cfg.batch_size
        n_batches = -(-n // bs) if bs <= n else 1
        epoch, b = divmod(it, n_batches)
        if epoch not in self._orders:
            self._orders = {epoch: batch_order(len(self.train), self.cfg.batch_size, [self.cfg.seed, epoch])}
        return self.train.videos[self._orders[epoch][b]]

    # -- parameter updates
    def _apply(self, grads: dict[str, np.ndarray]):
        by_state: dict[str, dict] = {}
        for name, g in grads.items():
            by_state.setdefault(OPTIMIZERS[name.split(".", 1)[0]], {})[name] = g
        for key, gs in by_state.items():
            nx.adam_update(self.params.arrays, gs, self.states[key])

    def _grads(self, loss: Tensor, p: dict, groups: Sequence[str]) -> dict:
        wrt = {n: p[n] for n in self.params.names(groups)}
        return nx.backprop(loss, wrt)

    # -- losses
    def discriminator_loss(self, videos: np.ndarray):
        cfg = self.cfg
        T = videos.shape[1]
        with no_grad():
            fake = rollout(videos, self.params.leaves(), cfg)
        seq_fake = [f.data for f in _frames(videos)[:cfg.T0]] + [x.data for x in fake.preds]
        steps = range(cfg.T0, T)
        c = cfg.c
        p = self.params.leaves(DISCRIMINATOR)
        real_clip = [Tensor(np.concatenate([videos[:, t - c + j] for t in steps], 0)) for j in range(c + 1)]
        fake_clip = [Tensor(np.concatenate([seq_fake[t - c + j] for t in steps], 0)) for j in range(c + 1)]
        d_real = classify(extract_features(real_clip, p, cfg.model), p)
        d_fake = classify(extract_features(fake_clip, p, cfg.model), p)
        return loss_dis([d_real], [d_fake], cfg.loss.eps), p

    def guider_loss(self, videos: np.ndarray):
        p = self.params.leaves(("M",))
        f = real_features(videos, p, self.cfg)
        targets = motion_target([x.data for x in f])
        hidden = None
        m_hat = []
        for ft in f[:-1]:
            m, hidden = guide_motion(ft, hidden, p, self.cfg.model)
            m_hat.append(m)
        return loss_guider_learner(m_hat, targets), p

    def generator_loss(self, videos: np.ndarray, groups=("G",)):
        """(L_recons, L_teacher or None, L_gen, leaves) for a batch.

        With ``groups=("G",)`` the motion path is detached (main loop); with
        F and M included it stays on the tape (pretraining).
        """
        cfg = self.cfg
        joint = groups != ("G",)
        p = self.params.leaves(groups)
        want_teacher = not joint and cfg.mode == "full"
        cache = rollout(videos, p, cfg, detach_motion=not joint, teacher=want_teacher)
        recons = loss_recons(_targets(videos, cfg.T0), _stack_channels(cache.preds), cfg.loss)
        teacher = loss_guider_teacher(cache.teacher) if want_teacher else None
        gamma = 0.0 if joint else cfg.gamma
        return recons, teacher, loss_gen(recons, teacher, gamma), p

    # -- phases
    def phase_discriminator(self, videos, report: PhaseReport):
        try:
            loss, p = self.discriminator_loss(videos)
            report.loss_dis = _finite(loss, "discriminator", report.iteration)
            self._apply(self._grads(loss, p, DISCRIMINATOR))
        except NumericalError as e:
            raise TrainingAborted("discriminator", report.iteration, e) from e

    def phase_guider(self, videos, report: PhaseReport):
        if self.cfg.mode == "ablation":
            return
        try:
            loss, p = self.guider_loss(videos)
            report.loss_guider = _finite(loss, "guider", report.iteration)
            self._apply(self._grads(loss, p, ("M",)))
        except NumericalError as e:
            raise TrainingAborted("guider", report.iteration, e) from e

    def phase_generator(self, videos, report: PhaseReport, pretrain=False):
        phase = "pretrain-generator" if pretrain else "generator"
        groups = ("F", "M", "G") if pretrain and self.cfg.mode == "full" else ("G",)
        try:
            recons, teacher, total, p = self.generator_loss(videos, groups)
            report.loss_recons = _finite(recons, phase, report.iteration)
            if teacher is not None:
                report.loss_teacher = _finite(teacher, phase, report.iteration)
            report.loss_gen = _finite(total, phase, report.iteration)
            self._apply(self._grads(total, p, groups))
        except NumericalError as e:
            raise TrainingAborted(phase, report.iteration, e) from e

    def pretrain_iteration(self) -> PhaseReport:
        videos = self.batch()
        report = PhaseReport(self.iteration)
        self.phase_discriminator(videos, report)
        self.phase_generator(videos, report, pretrain=True)
        return self._finish(report)

    def train_iteration(self) -> PhaseReport:
        videos = self.batch()
        report = PhaseReport(self.iteration)
        self.phase_discriminator(videos, report)
        self.phase_guider(videos, report)
        self.phase_generator(videos, report)
        return self._finish(report)

    def _finish(self, report):
        self.iteration += 1
        self.history.append(report)
        return report

    def step(self) -> PhaseReport:
        if self.iteration < self.cfg.pretrain_iters:
            return self.pretrain_iteration()
        return self.train_iteration()

    def run(self, until: int | None = None, callback=None) -> list[PhaseReport]:
        end = self.cfg.total_iters if until is None else min(until, self.cfg.total_iters)
        out = []
        while self.iteration < end:
            r = self.step()
            out.append(r)
            if callback is not None:
                callback(self, r)
        return out

    # -- checkpoints
    def checkpoint(self) -> "Checkpoint":
        return Checkpoint(self.params.copy(), {k: s.copy() for k, s in self.states.items()},
                          self.iteration, self.cfg.seed)

    @classmethod
    def restore(cls, cfg: TrainConfig, train: VideoSet, ckpt: "Checkpoint") -> "Trainer":
        states = {"dis": cfg.adam_dis.state(), "guider": cfg.adam_guider.state(), "gen": cfg.adam_gen.state()}
        for key, s in ckpt.states.items():
            states[key].m, states[key].v, states[key].t = dict(s.m), dict(s.v), dict(s.t)
        return cls(replace(cfg, seed=ckpt.seed), train, ckpt.params.copy(), states, ckpt.iteration)


def pretrain(data: VideoSet, cfg: TrainConfig, params: ModelParams) -> ModelParams:
    """Run the pretraining budget on ``params`` and return the updated parameters."""
    tr = Trainer(cfg, data, params.copy())
    tr.run(until=cfg.pretrain_iters)
    return tr.params


def train_iteration(trainer: Trainer) -> PhaseReport:
    return trainer.train_iteration()


def write_loss_log(path_or_file, reports: Sequence[PhaseReport]):
    own = not hasattr(path_or_file, "write")
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOSS_LOG_HEADER)
        for r in reports:
            w.writerow(r.row())
    finally:
        if own:
            f.close()


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"LMVPCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    states: dict[str, AdamState]
    iteration: int
    seed: int


def _write_tensor(buf, name: str, arr: np.ndarray):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """LMVPCKPT v1: params, then Adam moments ('.m', '.v') and step counts ('.t', rank 0)."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(ckpt.params.arrays)))
    for name, arr in ckpt.params.arrays.items():
        _write_tensor(buf, name, arr)
    opt = []
    for name in ckpt.params.arrays:
        state = ckpt.states.get(OPTIMIZERS[name.split(".", 1)[0]])
        if state is not None and name in state.m:
            opt += [(name + ".m", state.m[name]), (name + ".v", state.v[name]),
                    (name + ".t", np.asarray(state.t[name], np.float32))]
    buf.write(struct.pack("<I", len(opt)))
    for name, arr in opt:
        _write_tensor(buf, name, arr)
    buf.write(struct.pack("<QQ", ckpt.iteration, ckpt.seed))
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated while reading {what}", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def tensor(self):
        start = self.pos
        n = self.u32("name length")
        if n > 4096 or self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: implausible tensor name length {n}", start)
        try:
            name = self.take(n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.path}: tensor name is not UTF-8", start + 4) from None
        rank_at = self.pos
        rank = self.u32("rank")
        if rank > 8:
            raise FormatError(f"{self.path}: implausible rank {rank} for {name!r}", rank_at)
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(4 * count, f"payload of {name!r}"), dtype="<f4").reshape(dims)
        return name, arr.astype(np.float32)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(8, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic, not an LMVPCKPT file", 0)
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 8)
    arrays = {}
    for _ in range(r.u32("tensor count")):
        name, arr = r.tensor()
        arrays[name] = arr
    try:
        params = ModelParams(arrays)
    except ContractError as e:
        raise FormatError(f"{path}: {e}") from None
    states = {k: AdamState() for k in ("dis", "guider", "gen")}
    for _ in range(r.u32("optimizer tensor count")):
        at = r.pos
        name, arr = r.tensor()
        base, kind = name.rsplit(".", 1)
        if base not in arrays or kind not in ("m", "v", "t"):
            raise FormatError(f"{path}: optimizer tensor {name!r} matches no parameter", at)
        st = states[OPTIMIZERS[base.split(".", 1)[0]]]
        if kind == "t":
            st.t[base] = int(arr)
        else:
            if arr.shape != arrays[base].shape:
                raise FormatError(f"{path}: moment {name!r} has shape {arr.shape}, "
                                  f"parameter {arrays[base].shape}", at)
            getattr(st, kind)[base] = arr
    iteration, seed = struct.unpack("<QQ", r.take(16, "iteration and seed"))
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes", r.pos)
    return Checkpoint(params, states, iteration, seed)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalTable:
    model: list[MetricRecord]
    baseline: list[MetricRecord]

    def aggregate(self, which="model") -> MetricRecord:
        rows = self.model if which == "model" else self.baseline
        return MetricRecord(*(float(np.mean([getattr(r, k) for r in rows])) for k in ("bce", "mse", "psnr", "ssim")))

    def rows(self) -> list[list]:
        out = []
        for i, (m, b) in enumerate(zip(self.model, self.baseline), start=1):
            out.append([i, m.bce, m.mse, m.psnr, m.ssim, b.bce, b.mse, b.psnr, b.ssim])
        return out

    def write_csv(self, path_or_file):
        own = not hasattr(path_or_file, "write")
        f = open(path_or_file, "w", newline="") if own else path_or_file
        try:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(EVAL_HEADER)
            for row in self.rows():
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        finally:
            if own:
                f.close()


def predict(videos: np.ndarray, params: ModelParams, cfg: TrainConfig, batch_size: int = 16) -> np.ndarray:
    """Predicted frames T0 .. T-1 for every video, shape (N, T-T0, H, W, C)."""
    out = []
    with no_grad():
        leaves = params.leaves()
        for i in range(0, videos.shape[0], batch_size):
            cache = rollout(videos[i:i + batch_size], leaves, cfg)
            out.append(np.stack([x.data for x in cache.preds], axis=1))
    return np.concatenate(out, axis=0)


def evaluate(testset: VideoSet, params: ModelParams, cfg: TrainConfig, preds: np.ndarray | None = None) -> EvalTable:
    """Per-step metrics of the model and of the last-frame-copy baseline, averaged over videos."""
    videos = testset.videos
    if len(testset) == 0:
        raise ContractError("evaluate: empty test set")
    T0 = cfg.T0
    if preds is None:
        preds = predict(videos, params, cfg)
    steps = videos.shape[1] - T0
    last = videos[:, T0 - 1]
    model_rows, base_rows = [], []
    for s in range(steps):
        truth = videos[:, T0 + s]
        model_rows.append(_mean_records([evaluate_metrics(truth[i], preds[i, s]) for i in range(len(videos))]))
        base_rows.append(_mean_records([evaluate_metrics(truth[i], last[i]) for i in range(len(videos))]))
    return EvalTable(model_rows, base_rows)


def _mean_records(recs: list[MetricRecord]) -> MetricRecord:
    return MetricRecord(*(float(np.mean([getattr(r, k) for r in recs])) for k in ("bce", "mse", "psnr", "ssim")))
