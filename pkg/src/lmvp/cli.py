"""``lmvp`` command line: gen-data, train, eval, predict.

Exit status: 0 ok, 2 config or compatibility error, 3 I/O or file-format
error, 4 non-finite loss during training.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgmod
from .data import ConfigError, FormatError, generate_bouncing, read_videoset, write_videoset
from .model import ModelParams, config_dict
from .numerics import ContractError
from .training import (LOSS_LOG_HEADER, Checkpoint, Trainer, TrainingAborted, evaluate, load_checkpoint,
                       predict, save_checkpoint)

log = logging.getLogger("lmvp")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
LOSS_LOG = "loss_log.csv"
EVAL_CSV = "eval.csv"
RESOLVED = "config.resolved.txt"


class Incompatible(ValueError):
    pass


# ---------------------------------------------------------------- helpers

def _path(out: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else out / p


def _load_config(args) -> cfgmod.RunConfig:
    text = ""
    if args.config:
        text = Path(args.config).read_text()
    cfg = cfgmod.parse_config(text)
    return cfg.with_overrides(seed=args.seed, mode=args.mode)


def _echo(cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED).write_text(cfgmod.render(cfg))


def sidecar_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".json")


def _write_sidecar(ckpt_path: Path, cfg: cfgmod.RunConfig, ckpt: Checkpoint):
    tc = cfg.train_config()
    meta = {"format": "LMVPCKPT", "iteration": ckpt.iteration, "seed": ckpt.seed,
            "config_digest": tc.digest(), "T0": tc.T0, "mode": tc.mode,
            "H": cfg["H"], "W": cfg["W"], "C": cfg["C"], "model": config_dict(tc.model)}
    sidecar_path(ckpt_path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def check_compatible(params: ModelParams, cfg: cfgmod.RunConfig, videos: np.ndarray, meta: dict | None):
    """Checkpoint tensors must fit the configured model, and the data must fit both."""
    problems = []
    expected = ModelParams.init(cfg.model_config(), 0).arrays
    for name, arr in expected.items():
        got = params.arrays.get(name)
        if got is None or got.shape != arr.shape:
            problems.append(f"{name}: checkpoint {None if got is None else got.shape}, config {arr.shape}")
    _, T, H, W, C = videos.shape
    if (H, W, C) != (cfg["H"], cfg["W"], cfg["C"]) or T <= cfg["T0"]:
        problems.append(f"dataset (T,H,W,C)={(T, H, W, C)}, config T0={cfg['T0']} (H,W,C)="
                        f"{(cfg['H'], cfg['W'], cfg['C'])}")
    if meta is not None:
        trained = (meta["H"], meta["W"], meta["C"], meta["model"]["c"])
        if trained != (H, W, C, cfg["c"]):
            problems.append(f"checkpoint trained on (H,W,C,c)={trained}, dataset/config has {(H, W, C, cfg['c'])}")
    if problems:
        raise Incompatible("checkpoint/dataset mismatch: " + "; ".join(problems))


def _read_meta(ckpt_path: Path):
    side = sidecar_path(ckpt_path)
    return json.loads(side.read_text()) if side.exists() else None


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg, out: Path):
    for split, stream, key in (("train", 0, "train_data"), ("test", 1, "test_data")):
        vs = generate_bouncing(cfg.data_config(split), stream=stream)
        path = _path(out, cfg[key])
        write_videoset(path, vs)
        N, T, H, W, C = vs.videos.shape
        print(f"{split}: {path} N={N} T={T} H={H} W={W} C={C}")


def _read_loss_rows(path: Path, before: int) -> list[list[str]]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != LOSS_LOG_HEADER:
        raise FormatError(f"{path}: not a loss log")
    return [r for r in rows[1:] if int(r[0]) < before]


def cmd_train(cfg, out: Path, resume: str | None = None, stop_at: int | None = None):
    tc = cfg.train_config()
    train = read_videoset(_path(out, cfg["train_data"]))
    ckpt_path = _path(out, cfg["checkpoint"])
    log_path = out / LOSS_LOG
    if resume:
        ck = load_checkpoint(resume)
        check_compatible(ck.params, cfg, train.videos, _read_meta(Path(resume)))
        if ck.seed != tc.seed:
            raise Incompatible(f"checkpoint seed {ck.seed} differs from configured seed {tc.seed}")
        tr = Trainer.restore(tc, train, ck)
        previous = _read_loss_rows(log_path, ck.iteration)
    else:
        tr = Trainer(tc, train)
        previous = []
    end = tc.total_iters if stop_at is None else min(stop_at, tc.total_iters)

    def save():
        ck = tr.checkpoint()
        save_checkpoint(ckpt_path, ck)
        _write_sidecar(ckpt_path, cfg, ck)

    def flush():
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOSS_LOG_HEADER)
            w.writerows(previous)
            w.writerows(r.row() for r in tr.history)

    def on_step(trainer, report):
        i = trainer.iteration
        if tc.eval_interval and i % tc.eval_interval == 0 and i < end:
            save()
        if i % 50 == 0 or i == end:
            log.info("iter %d/%d %s", i, tc.total_iters, ",".join(report.row()[1:]))

    try:
        tr.run(until=end, callback=on_step)
    finally:
        flush()
    save()
    print(f"trained to iteration {tr.iteration}; checkpoint {ckpt_path}; loss log {log_path}")


def _load_for_inference(cfg, out: Path):
    test = read_videoset(_path(out, cfg["test_data"]))
    ckpt_path = _path(out, cfg["checkpoint"])
    ck = load_checkpoint(ckpt_path)
    check_compatible(ck.params, cfg, test.videos, _read_meta(ckpt_path))
    return test, ck


def cmd_eval(cfg, out: Path):
    test, ck = _load_for_inference(cfg, out)
    table = evaluate(test, ck.params, cfg.train_config())
    table.write_csv(out / EVAL_CSV)
    for label, which in (("model", "model"), ("last-frame", "baseline")):
        a = table.aggregate(which)
        print(f"{label:>10}: bce={a.bce:.5f} mse={a.mse:.5f} psnr={a.psnr:.3f} ssim={a.ssim:.4f}")
    print(f"per-step table: {out / EVAL_CSV}")
    return table


def grid_image(video: np.ndarray, pred: np.ndarray, T0: int) -> np.ndarray:
    """uint8 grid: ground truth / model / last-frame copy, one column per frame.

    Every tile sits in a (H+2)x(W+2) cell and the whole grid has one more
    pixel of border, all drawn at mid grey.  The first T0 columns of the
    lower rows show the given frames.
    """
    T, H, W, _ = video.shape
    gray = video.mean(axis=-1)
    model = np.concatenate([gray[:T0], pred.mean(axis=-1)], 0)
    baseline = np.concatenate([gray[:T0], np.repeat(gray[T0 - 1:T0], T - T0, 0)], 0)
    canvas = np.full((3 * (H + 2) + 2, T * (W + 2) + 2), 128, np.uint8)
    for r, row in enumerate((gray, model, baseline)):
        for t in range(T):
            y, x = 2 + r * (H + 2), 2 + t * (W + 2)
            canvas[y:y + H, x:x + W] = np.rint(255 * np.clip(row[t], 0, 1)).astype(np.uint8)
    return canvas


def write_pgm(path: Path, img: np.ndarray):
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.astype(np.uint8).tobytes())


def cmd_predict(cfg, out: Path):
    test, ck = _load_for_inference(cfg, out)
    n = min(cfg["n_show"], len(test))
    tc = cfg.train_config()
    preds = predict(test.videos[:n], ck.params, tc)
    paths = []
    for i in range(n):
        p = out / f"predict_{i:03d}.pgm"
        write_pgm(p, grid_image(test.videos[i], preds[i], tc.T0))
        paths.append(p)
    print(f"wrote {n} grids to {out}")
    return paths


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults for missing keys)")
    common.add_argument("--out", default=".", help="output directory; relative paths in the config resolve here")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = deterministic mode)")
    common.add_argument("--mode", choices=["full", "ablation"], help="override the config mode")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="lmvp", description="Leaked-motion video prediction at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/test video files")
    tr = sub.add_parser("train", parents=[common], help="pretrain + main loop, checkpoint and loss log")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--stop-at", type=int, help="stop after this many iterations (for split runs)")
    sub.add_parser("eval", parents=[common], help="per-step metrics vs the last-frame baseline")
    sub.add_parser("predict", parents=[common], help="PGM grids of truth / prediction / baseline")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load_config(args)
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_IO
    except cfgmod.ConfigParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        with threadpool_limits(limits=args.threads):
            _echo(cfg, out)
            if args.command == "gen-data":
                cmd_gen_data(cfg, out)
            elif args.command == "train":
                cmd_train(cfg, out, args.resume, args.stop_at)
            elif args.command == "eval":
                cmd_eval(cfg, out)
            else:
                cmd_predict(cfg, out)
    except TrainingAborted as e:
        print(f"error: training aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (Incompatible, ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
