"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Omitted keys take their defaults; unknown keys are an error.  ``render``
writes every key back out, and parsing that text yields the same config.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .data import DataConfig, ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .numerics import ContractError
from .training import AdamConfig, TrainConfig


class ConfigParseError(ValueError):
    pass


# key -> default; the default also fixes the value type
DEFAULTS: dict[str, object] = {
    # data
    "N_train": 256, "N_test": 64, "T": 12, "T0": 6, "H": 32, "W": 32, "C": 1,
    "n_objects": 2, "sprite": "square", "sprite_size": 8, "speed_min": 1, "speed_max": 2,
    # model
    "c": 3, "K": 5, "feat": 64, "width1": 32, "hidden": 64, "dec1": 64, "dec2": 32,
    # loss
    "gamma": 0.1, "gdl_weight": 1.0, "gdl_alpha": 1.0, "recon": "bce", "eps": 1e-7,
    # optimization
    "lr_dis": 2e-4, "lr_guider": 2e-4, "lr_gen": 2e-4, "beta1": 0.5, "beta2": 0.999, "adam_eps": 1e-8,
    "batch_size": 8, "pretrain_iters": 300, "main_iters": 1500, "eval_interval": 500,
    "seed": 0, "mode": "full",
    # paths (relative ones resolve against --out) and export
    "train_data": "train.vid", "test_data": "test.vid", "checkpoint": "model.ckpt", "n_show": 4,
}

SECTIONS = [
    ("data", ["N_train", "N_test", "T", "T0", "H", "W", "C", "n_objects", "sprite", "sprite_size",
              "speed_min", "speed_max"]),
    ("model", ["c", "K", "feat", "width1", "hidden", "dec1", "dec2"]),
    ("loss", ["gamma", "gdl_weight", "gdl_alpha", "recon", "eps"]),
    ("training", ["lr_dis", "lr_guider", "lr_gen", "beta1", "beta2", "adam_eps", "batch_size",
                  "pretrain_iters", "main_iters", "eval_interval", "seed", "mode"]),
    ("paths", ["train_data", "test_data", "checkpoint", "n_show"]),
]

# invariants checked here, each naming the keys it involves
CHECKS = [
    (("T0", "T"), lambda v: 0 < v["T0"] < v["T"], "need 0 < T0 < T"),
    (("c", "T0"), lambda v: v["c"] + 1 <= v["T0"], "need c + 1 <= T0"),
    (("sprite_size", "H", "W"), lambda v: 1 <= v["sprite_size"] < min(v["H"], v["W"]),
     "need 1 <= sprite_size < min(H, W)"),
    (("H", "W"), lambda v: v["H"] % 4 == 0 and v["W"] % 4 == 0, "H and W must be multiples of 4"),
    (("C",), lambda v: v["C"] in (1, 3), "C must be 1 or 3"),
    (("K",), lambda v: v["K"] >= 1 and v["K"] % 2 == 1, "K must be odd"),
    (("speed_min", "speed_max"), lambda v: 0 <= v["speed_min"] <= v["speed_max"], "need 0 <= speed_min <= speed_max"),
    (("N_train",), lambda v: v["N_train"] >= 1, "need N_train >= 1"),
    (("N_test",), lambda v: v["N_test"] >= 1, "need N_test >= 1"),
    (("batch_size",), lambda v: v["batch_size"] >= 1, "need batch_size >= 1"),
    (("pretrain_iters", "main_iters", "eval_interval"),
     lambda v: min(v["pretrain_iters"], v["main_iters"], v["eval_interval"]) >= 0, "iteration counts must be >= 0"),
    (("mode",), lambda v: v["mode"] in ("full", "ablation"), "mode must be full or ablation"),
    (("recon",), lambda v: v["recon"] in ("bce", "mse"), "recon must be bce or mse"),
    (("gamma",), lambda v: v["gamma"] >= 0, "need gamma >= 0"),
    (("gdl_weight",), lambda v: v["gdl_weight"] >= 0, "need gdl_weight >= 0"),
    (("gdl_alpha",), lambda v: v["gdl_alpha"] >= 1, "need gdl_alpha >= 1"),
    (("eps",), lambda v: 0 < v["eps"] < 0.5, "need 0 < eps < 0.5"),
    (("n_show",), lambda v: v["n_show"] >= 0, "need n_show >= 0"),
    (("seed",), lambda v: 0 <= v["seed"] < 2**64, "seed must fit in u64"),
]


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kw) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kw.items():
            if v is not None:
                vals[k] = v
        out = RunConfig(vals)
        check(out.values, {})
        return out

    def data_config(self, split="train") -> DataConfig:
        v = self.values
        return DataConfig(N=v["N_train"] if split == "train" else v["N_test"], T=v["T"], H=v["H"], W=v["W"],
                          C=v["C"], T0=v["T0"], n_objects=v["n_objects"], sprite=v["sprite"],
                          sprite_size=v["sprite_size"], speed_min=v["speed_min"],
                          speed_max=v["speed_max"], seed=v["seed"])

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(C=v["C"], c=v["c"], K=v["K"], feat=v["feat"], width1=v["width1"],
                           hidden=v["hidden"], dec1=v["dec1"], dec2=v["dec2"])

    def train_config(self) -> TrainConfig:
        v = self.values
        adam = lambda lr: AdamConfig(lr, v["beta1"], v["beta2"], v["adam_eps"])
        return TrainConfig(T0=v["T0"], batch_size=v["batch_size"], pretrain_iters=v["pretrain_iters"],
                           main_iters=v["main_iters"], eval_interval=v["eval_interval"], seed=v["seed"],
                           mode=v["mode"], model=self.model_config(),
                           loss=LossConfig(v["gamma"], v["gdl_weight"], v["gdl_alpha"], v["recon"], v["eps"]),
                           adam_dis=adam(v["lr_dis"]), adam_guider=adam(v["lr_guider"]),
                           adam_gen=adam(v["lr_gen"]))


def _convert(key, raw, lineno):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw, 10)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        kind = type(default).__name__
        raise ConfigParseError(f"line {lineno}: key '{key}': cannot parse {raw!r} as {kind}") from None
    return raw


def check(values: dict, lines: dict):
    problems = []
    for keys, ok, msg in CHECKS:
        if not ok(values):
            where = ", ".join(f"{k}={values[k]!r}" + (f" (line {lines[k]})" if k in lines else "") for k in keys)
            problems.append(f"{msg}: {where}")
    if problems:
        raise ConfigParseError("invalid config: " + "; ".join(problems))


def parse_config(text: str) -> RunConfig:
    values = dict(DEFAULTS)
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigParseError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigParseError(f"line {lineno}: unknown key '{key}'")
        if key in lines:
            raise ConfigParseError(f"line {lineno}: key '{key}' already set on line {lines[key]}")
        if not raw:
            raise ConfigParseError(f"line {lineno}: key '{key}' has no value")
        values[key] = _convert(key, raw, lineno)
        lines[key] = lineno
    check(values, lines)
    cfg = RunConfig(values)
    # the typed configs have their own checks; surface anything they catch too
    try:
        cfg.data_config().validate()
        cfg.train_config().validate(values["T"])
    except (ConfigError, ContractError) as e:
        raise ConfigParseError(str(e)) from None
    return cfg


def render(cfg: RunConfig) -> str:
    out = []
    for name, keys in SECTIONS:
        out.append(f"# {name}")
        out += [f"{k} = {cfg.values[k]!r}" if isinstance(cfg.values[k], float) else f"{k} = {cfg.values[k]}"
                for k in keys]
        out.append("")
    return "\n".join(out)
