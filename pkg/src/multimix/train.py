"""Minibatch training loop, Adam, step-decay schedule, checkpoints and evaluation."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from . import augment, losses, metrics
from .data import Datasets, Stream
from .model import (
    CHECKPOINT_VERSION,
    ArchSpec,
    CheckpointError,
    ModelParams,
    forward_joint,
    init_params,
    params_from_tensors,
    predict,
    read_tensors,
    write_tensors,
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "L_total", "L_c_sup", "L_c_unsup", "L_s_dice", "L_s_kl", "retained_count"]
LOG_FORMAT_VERSION = 1
STREAM_IDS = {"cls_labeled": 0, "cls_unlabeled": 1, "seg_labeled": 2, "seg_unlabeled": 3}


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, snapshot: Path | None = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    hp: losses.HyperParams = field(default_factory=losses.HyperParams)
    input_size: int = 64
    width_multiplier: float = 0.5
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_epochs: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    cls_labeled_budget: int | None = None
    seg_labeled_budget: int | None = None
    bridge: bool = True
    ssl_classification: bool = True
    ssl_segmentation: bool = True
    checkpoint_every: int = 0
    strict_deterministic: bool = False
    cls_labeled: str | None = None
    cls_unlabeled: str | None = None
    seg_labeled: str | None = None
    seg_unlabeled: str | None = None

    def arch(self) -> ArchSpec:
        return ArchSpec.scaled(
            self.input_size,
            self.width_multiplier,
            bridge_enabled=self.bridge,
            ssl_classification_enabled=self.ssl_classification,
            ssl_segmentation_enabled=self.ssl_segmentation,
        )

    def validate(self) -> None:
        self.hp.validate()
        self.arch().validate()
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ValueError("epochs and max_steps must be nonnegative")
        if self.lr <= 0 or self.lr_decay_epochs < 1:
            raise ValueError("lr must be positive and lr_decay_epochs >= 1")


# --------------------------------------------------------------------------
# Flat key = value configuration
# --------------------------------------------------------------------------

# config key -> (TrainConfig attribute or "hp.<field>", parser)
def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v: str) -> int | None:
    return None if v.strip().lower() in ("", "full", "none") else int(v)


def _path(v: str) -> str | None:
    v = v.strip().strip('"').strip("'")
    return v or None


CONFIG_KEYS: dict[str, tuple[str, Callable[[str], object]]] = {
    "hp.t": ("hp.t", float),
    "hp.lambda": ("hp.lam", float),
    "hp.alpha": ("hp.alpha", float),
    "hp.beta": ("hp.beta", float),
    "hp.m": ("hp.m", int),
    "hp.eps_dice": ("hp.eps_dice", float),
    "hp.eps_kl": ("hp.eps_kl", float),
    "hp.unsup_normalization": ("hp.unsup_normalization", lambda v: v.strip().strip('"')),
    "model.input_size": ("input_size", int),
    "model.width_multiplier": ("width_multiplier", float),
    "train.epochs": ("epochs", int),
    "train.max_steps": ("max_steps", _opt_int),
    "train.seed": ("seed", int),
    "train.lr": ("lr", float),
    "train.lr_decay": ("lr_decay", float),
    "train.lr_decay_epochs": ("lr_decay_epochs", int),
    "train.adam_beta1": ("adam_beta1", float),
    "train.adam_beta2": ("adam_beta2", float),
    "train.adam_eps": ("adam_eps", float),
    "train.checkpoint_every": ("checkpoint_every", int),
    "train.strict_deterministic": ("strict_deterministic", _bool),
    "budget.cls_labeled": ("cls_labeled_budget", _opt_int),
    "budget.seg_labeled": ("seg_labeled_budget", _opt_int),
    "ablation.bridge": ("bridge", _bool),
    "ablation.ssl_classification": ("ssl_classification", _bool),
    "ablation.ssl_segmentation": ("ssl_segmentation", _bool),
    "data.cls_labeled": ("cls_labeled", _path),
    "data.cls_unlabeled": ("cls_unlabeled", _path),
    "data.seg_labeled": ("seg_labeled", _path),
    "data.seg_unlabeled": ("seg_unlabeled", _path),
}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def apply_settings(cfg: TrainConfig, settings: dict[str, str]) -> TrainConfig:
    hp_changes, changes = {}, {}
    for key, value in settings.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parse = CONFIG_KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if attr.startswith("hp."):
            hp_changes[attr[3:]] = parsed
        else:
            changes[attr] = parsed
    cfg = replace(cfg, hp=replace(cfg.hp, **hp_changes), **changes)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> TrainConfig:
    settings: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        try:
            settings.update(parse_config_text(p.read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from None
        base = p.parent
        for key in ("data.cls_labeled", "data.cls_unlabeled", "data.seg_labeled", "data.seg_unlabeled"):
            v = _path(settings.get(key, ""))
            if v and not Path(v).is_absolute():
                settings[key] = str(base / v)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip()] = v.strip()
    return apply_settings(TrainConfig(), settings)


def config_items(cfg: TrainConfig) -> list[tuple[str, object]]:
    items = []
    for key, (attr, _) in CONFIG_KEYS.items():
        obj = cfg.hp if attr.startswith("hp.") else cfg
        items.append((key, getattr(obj, attr.split(".")[-1])))
    return items


# --------------------------------------------------------------------------
# Optimizer and schedule
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-4

    @classmethod
    def zeros(cls, params: ModelParams, **kw) -> OptimizerState:
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            **kw,
        )


def lr_schedule(epoch: int, base: float = 1e-4, decay: float = 0.1, every: int = 8) -> float:
    """Multiplicative step decay: ``base * decay ** (epoch // every)``."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    return base * decay ** (epoch // every)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float | None = None) -> tuple[ModelParams, OptimizerState]:
    """Bias-corrected Adam update applied in place."""
    lr = state.lr if lr is None else lr
    state.lr = lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        if not np.all(np.isfinite(update)):
            raise ad.NonFiniteError(f"non-finite update for {name}")
        p.data -= update
    return params, state


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path: str | Path, params: ModelParams, state: OptimizerState | None = None,
                    force: bool = True) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    tensors: dict[str, np.ndarray] = {k: t.data for k, t in params.items()}
    if state is not None:
        for k in params:
            tensors[f"adam.m.{k}"] = state.m[k]
            tensors[f"adam.v.{k}"] = state.v[k]
        tensors["adam.step"] = np.array([state.step], dtype=np.float32)
    write_tensors(path, tensors)
    return path


def load_checkpoint(path: str | Path, input_size: int = 256, **toggles) -> tuple[ModelParams, OptimizerState | None]:
    raw = read_tensors(path)
    model_tensors = {k: v for k, v in raw.items() if not k.startswith("adam.")}
    from .model import arch_from_tensors

    arch = replace(arch_from_tensors(model_tensors, input_size), **toggles)
    params = params_from_tensors(model_tensors, arch)
    if "adam.step" not in raw:
        return params, None
    try:
        state = OptimizerState(
            m={k: raw[f"adam.m.{k}"].copy() for k in params},
            v={k: raw[f"adam.v.{k}"].copy() for k in params},
            step=int(raw["adam.step"][0]),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: incomplete optimizer state, missing {exc}") from None
    return params, state


# --------------------------------------------------------------------------
# Minibatches
# --------------------------------------------------------------------------


@dataclass
class Batch:
    x_cl: np.ndarray | None = None
    y_cl: np.ndarray | None = None
    x_cw: np.ndarray | None = None
    x_cg: np.ndarray | None = None
    x_sl: np.ndarray | None = None
    s_l: np.ndarray | None = None
    x_su: np.ndarray | None = None


def stream_indices(n: int, seed: int, stream: str, step: int, m: int) -> np.ndarray:
    """Indices for ``step``: each stream cycles through reshuffled passes of itself.

    Stateless in ``step``, so a resumed run draws the same minibatches.
    """
    sid = STREAM_IDS[stream]
    pos = np.arange(step * m, (step + 1) * m)
    out = np.empty(m, dtype=np.int64)
    for cycle in np.unique(pos // n):
        perm = np.random.default_rng(np.random.SeedSequence([seed, 1000 + sid, int(cycle)])).permutation(n)
        sel = pos // n == cycle
        out[sel] = perm[pos[sel] % n]
    return out


def select_budget(stream: Stream, budget: int | None, seed: int, name: str) -> Stream:
    if budget is None or budget == len(stream):
        return stream
    if budget > len(stream):
        raise ValueError(f"{name} budget {budget} exceeds dataset size {len(stream)}")
    keep = np.sort(np.random.default_rng(np.random.SeedSequence([seed, 77, STREAM_IDS[name]])).permutation(len(stream))[:budget])
    return Stream(
        stream.images[keep],
        None if stream.labels is None else stream.labels[keep],
        None if stream.masks is None else stream.masks[keep],
        [stream.paths[i] for i in keep] if stream.paths else [],
    )


def steps_per_epoch(data: Datasets, m: int) -> int:
    return max(1, math.ceil(max(len(data.cls_labeled), len(data.seg_labeled)) / m))


def make_batch(data: Datasets, cfg: TrainConfig, step: int) -> Batch:
    m, seed = cfg.hp.m, cfg.seed
    b = Batch()
    cl = data.cls_labeled
    if len(cl):
        idx = stream_indices(len(cl), seed, "cls_labeled", step, m)
        b.x_cl = np.stack([
            augment.weak_augment(cl.images[i, 0], augment.sample_rng(seed, step, 0, j))[None]
            for j, i in enumerate(idx)
        ])
        b.y_cl = cl.labels[idx]
    cu = data.cls_unlabeled
    if cfg.ssl_classification and len(cu):
        idx = stream_indices(len(cu), seed, "cls_unlabeled", step, m)
        weak, strong = [], []
        for j, i in enumerate(idx):
            pair = augment.augment_pair(cu.images[i, 0], augment.sample_rng(seed, step, 1, j))
            weak.append(pair.x_w[None])
            strong.append(pair.x_g[None])
        b.x_cw, b.x_cg = np.stack(weak), np.stack(strong)
    sl = data.seg_labeled
    if len(sl):
        idx = stream_indices(len(sl), seed, "seg_labeled", step, m)
        b.x_sl, b.s_l = sl.images[idx], sl.masks[idx]
    su = data.seg_unlabeled
    if cfg.ssl_segmentation and len(su):
        idx = stream_indices(len(su), seed, "seg_unlabeled", step, m)
        b.x_su = su.images[idx]
    return b


def minibatch_loss(params: ModelParams, batch: Batch, hp: losses.HyperParams,
                   rng: np.random.Generator | None, training: bool = True) -> tuple[ad.Tensor, losses.LossReport]:
    """Forward every stream and assemble the combined loss for one minibatch."""
    out = forward_joint(params, batch, training=training, rng=rng)
    plb = losses.pseudo_label(out.c_w, hp.t) if out.c_w is not None else None
    zero = ad.Tensor(np.zeros((), dtype=params["head.fc.weight"].dtype))
    if out.c_l is not None:
        _, cls_terms = losses.classification_objective(out.c_l, batch.y_cl, out.c_g, plb, hp.lam,
                                                       hp.unsup_normalization)
    else:
        cls_terms = {"L_c_sup": zero, "L_c_unsup": zero}
    if out.s_l is not None:
        _, seg_terms = losses.segmentation_objective(batch.s_l, out.s_l, out.s_u, hp.alpha, hp.beta,
                                                     hp.eps_dice, hp.eps_kl)
    else:
        seg_terms = {"L_s_dice": zero, "L_s_kl": zero}
    return losses.total_loss(cls_terms, seg_terms, hp, retained=0 if plb is None else plb.retained)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 4242, step]))


def param_grads(params: ModelParams, loss: ad.Tensor) -> dict[str, np.ndarray]:
    g = ad.backward(loss)
    return {k: g[t] for k, t in params.items()}


# --------------------------------------------------------------------------
# Threads
# --------------------------------------------------------------------------


@contextlib.contextmanager
def thread_limit(strict: bool = False):
    """Cap BLAS threads from ``MULTIMIX_THREADS``; strict mode pins one thread."""
    limit = 1 if strict else os.environ.get("MULTIMIX_THREADS")
    if limit is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(limit)):
        yield


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    log: list[losses.LossReport]
    steps: list[int]


def resolve_datasets(data: Datasets, cfg: TrainConfig) -> Datasets:
    return Datasets(
        cls_labeled=select_budget(data.cls_labeled, cfg.cls_labeled_budget, cfg.seed, "cls_labeled"),
        cls_unlabeled=data.cls_unlabeled,
        seg_labeled=select_budget(data.seg_labeled, cfg.seg_labeled_budget, cfg.seed, "seg_labeled"),
        seg_unlabeled=data.seg_unlabeled,
    )


def total_steps(data: Datasets, cfg: TrainConfig) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * steps_per_epoch(data, cfg.hp.m)


def train(
    cfg: TrainConfig,
    data: Datasets,
    params: ModelParams | None = None,
    state: OptimizerState | None = None,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    stop_after: int | None = None,
    on_step: Callable[[int, losses.LossReport], None] | None = None,
) -> TrainResult:
    """Run the minibatch loop from ``state.step`` (0 for a fresh run).

    ``stop_after`` ends the run early at that absolute step count, which is how
    a run is split for checkpoint-resume checks.
    """
    cfg.validate()
    data = resolve_datasets(data, cfg)
    if len(data.cls_labeled) == 0 and len(data.seg_labeled) == 0:
        raise ValueError("training needs at least one labeled stream")
    if params is None:
        params = init_params(cfg.seed, cfg.arch())
    if state is None:
        state = OptimizerState.zeros(params, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps, lr=cfg.lr)
    spe = steps_per_epoch(data, cfg.hp.m)
    end = total_steps(data, cfg)
    if stop_after is not None:
        end = min(end, stop_after)
    writer = LogWriter(log_path, cfg, append=state.step > 0) if log_path else None
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    log, steps = [], []
    with thread_limit(cfg.strict_deterministic):
        while state.step < end:
            step = state.step
            lr = lr_schedule(step // spe, cfg.lr, cfg.lr_decay, cfg.lr_decay_epochs)
            batch = make_batch(data, cfg, step)
            try:
                loss, report = minibatch_loss(params, batch, cfg.hp, step_rng(cfg.seed, step))
                adam_step(params, param_grads(params, loss), state, lr)
            except ad.NonFiniteError as exc:
                snap = None
                if ckdir is not None:
                    ckdir.mkdir(parents=True, exist_ok=True)
                    snap = save_checkpoint(ckdir / f"diverged_step{step}.mmix", params, state)
                raise TrainingDiverged(f"step {step}: {exc}", snap) from exc
            log.append(report)
            steps.append(step)
            if writer:
                writer.write(step, report)
            if on_step:
                on_step(step, report)
            if ckdir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                ckdir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(ckdir / f"ckpt_step{state.step}.mmix", params, state)
    if writer:
        writer.close()
    return TrainResult(params, state, log, steps)


def format_row(step: int, r: losses.LossReport) -> list[str]:
    return [str(step), repr(r.L_total), repr(r.L_c_sup), repr(r.L_c_unsup), repr(r.L_s_dice), repr(r.L_s_kl),
            str(r.retained_count)]


def header_lines(cfg: TrainConfig) -> list[str]:
    lines = [
        f"# log_format_version = {LOG_FORMAT_VERSION}",
        f"# checkpoint_format_version = {CHECKPOINT_VERSION}",
    ]
    lines += [f"# {k} = {v}" for k, v in config_items(cfg)]
    return lines


class LogWriter:
    def __init__(self, path: str | Path, cfg: TrainConfig, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self.fh = self.path.open("w" if fresh else "a", newline="", encoding="utf-8")
        self.csv = csv.writer(self.fh, lineterminator="\n")
        if fresh:
            for line in header_lines(cfg):
                self.fh.write(line + "\n")
            self.csv.writerow(LOG_COLUMNS)

    def write(self, step: int, report: losses.LossReport) -> None:
        self.csv.writerow(format_row(step, report))
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def read_log(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def _batches(n: int, size: int) -> Iterator[slice]:
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def predict_stream(params: ModelParams, stream: Stream, batch_size: int = 10) -> tuple[np.ndarray, np.ndarray]:
    if len(stream) == 0:
        raise ValueError("empty dataset")
    probs, masks = [], []
    for sl in _batches(len(stream), batch_size):
        p, s = predict(params, stream.images[sl].astype(params["head.fc.weight"].dtype))
        probs.append(p)
        masks.append(s)
    return np.concatenate(probs), np.concatenate(masks)


def classify_stream(params: ModelParams, stream: Stream, batch_size: int = 10) -> np.ndarray:
    from .model import classify, encode

    if len(stream) == 0:
        raise ValueError("empty dataset")
    out = []
    with ad.no_grad():
        for sl in _batches(len(stream), batch_size):
            logits = classify(params, encode(params, ad.Tensor(stream.images[sl])))
            out.append(ad.softmax(logits).data)
    return np.concatenate(out)


def evaluate(params: ModelParams, stream: Stream, task: str, batch_size: int = 10) -> metrics.MetricsReport:
    """Eval-mode metrics for ``task`` in {"classification", "segmentation", "both"}."""
    if task not in ("classification", "segmentation", "both"):
        raise ValueError(f"unknown task {task!r}")
    if len(stream) == 0:
        raise ValueError("empty dataset")
    report = metrics.MetricsReport()
    if task in ("segmentation", "both"):
        if stream.masks is None:
            raise ValueError("segmentation evaluation needs masks")
        probs, masks = predict_stream(params, stream, batch_size)
        metrics.segmentation_report(masks[:, 0], stream.masks[:, 0], report)
    else:
        probs = classify_stream(params, stream, batch_size)
    if task in ("classification", "both"):
        if stream.labels is None:
            raise ValueError("classification evaluation needs labels")
        metrics.classification_report(probs, stream.labels, report)
    return report
