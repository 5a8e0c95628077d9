"""AdamW training with warmup + step decay, early stopping on validation macro-F1."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .config import ModelConfig, TrainConfig, config_hash, derive_seed, section_from_items, section_to_text
from .container import Container, FormatError
from .data import ModalitySession, inject_missing, stack_sessions
from .losses import KL_EPS, LOG_EPS, accuracy, macro_f1, per_class_f1, sequence_loss
from .model import Model, forward, init_params
from .tensor import ContractError, DimensionError, Tape

EVAL_CHUNK = 50
LOG_HEADER = ["epoch", "lr", "train_ce", "train_kl", "train_total", "val_total", "val_acc", "val_macro_f1",
              "config_hash", "seed"]


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict[str, "object"], grads: dict[str, np.ndarray], state: AdamState, lr: float,
               weight_decay: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Decoupled weight decay, then the bias-corrected Adam update, in place."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(f"{name}: gradient {g.shape} vs parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then x decay_factor at each decay epoch (1-indexed)."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    if cfg.warmup_epochs and epoch <= cfg.warmup_epochs:
        return cfg.lr * epoch / cfg.warmup_epochs
    n = sum(1 for e in cfg.decay_epochs if epoch >= e)
    return cfg.lr * cfg.decay_factor ** n


@dataclass
class MetricsRecord:
    accuracy: float
    macro_f1: float
    per_class_f1: list[float]
    ce: float
    kl: float
    total: float
    n_steps: int
    missing_rate: float = 0.0
    seed: int = 0
    config_hash: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_ce: float
    train_kl: float
    train_total: float
    val_total: float
    val_acc: float
    val_macro_f1: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    best_epoch: int
    best_val_macro_f1: float


class EarlyStopping:
    """Stop after ``patience`` epochs without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, metric: float) -> bool:
        """Record ``metric``; True if it is a new best."""
        if metric > self.best:
            self.best, self.best_epoch, self.wait = metric, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def predict_sessions(model, sessions: list[ModalitySession], threads: int = 1) -> np.ndarray:
    """[N, T, K] probabilities; fixed-size chunks so the thread count cannot change results."""
    parts = _chunks(len(sessions), EVAL_CHUNK)

    def run(sl):
        X, _ = stack_sessions(sessions[sl])
        return model.predict_proba(X)

    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(run, parts))
    else:
        outs = [run(sl) for sl in parts]
    return np.concatenate(outs, axis=0)


def evaluate(model, sessions: list[ModalitySession], missing_rate: float = 0.0, mode: str = "at_most_one",
             seed: int = 0, lam: float = 0.1, threads: int = 1) -> MetricsRecord:
    """Per-step metrics pooled over all sessions and steps, dropout off.

    Missing cells are injected per session from a stream derived from
    (seed, session id), so every model sees identical masks.
    """
    if not sessions:
        raise ContractError("cannot evaluate an empty split")
    if missing_rate > 0:
        sessions = [inject_missing(s, missing_rate, mode,
                                   np.random.default_rng(derive_seed(seed, f"missing/{s.id}"))) for s in sessions]
    probs = predict_sessions(model, sessions, threads)
    labels = np.stack([s.labels for s in sessions])
    K = probs.shape[-1]
    preds = probs.argmax(axis=-1)
    picked = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    ce = float(np.mean(-np.log(picked + LOG_EPS)))
    T = probs.shape[1]
    if T > 1:
        p, q = probs[:, :-1], probs[:, 1:]
        kl = float((p * (np.log(p + KL_EPS) - np.log(q + KL_EPS))).sum(axis=-1).mean() * (T - 1) / T)
    else:
        kl = 0.0
    cfg = getattr(model, "cfg", None)
    return MetricsRecord(
        accuracy=accuracy(preds, labels),
        macro_f1=macro_f1(preds, labels, K),
        per_class_f1=[float(x) for x in per_class_f1(preds, labels, K)],
        ce=ce, kl=kl, total=ce + lam * kl, n_steps=int(labels.size), missing_rate=missing_rate,
        seed=seed, config_hash=config_hash(cfg) if cfg is not None else "",
    )


def effective_lambda(model_cfg: ModelConfig, train_cfg: TrainConfig) -> float:
    return 0.0 if model_cfg.variant == "no_tfl" else train_cfg.lam


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, train_sessions: list[ModalitySession],
          val_sessions: list[ModalitySession], log=None, threads: int = 1) -> TrainResult:
    """Fit a model; returns the checkpoint with the best validation macro-F1.

    ``log`` (optional) is called with each EpochRecord as soon as it exists.
    """
    if not train_sessions or not val_sessions:
        raise ContractError("training needs nonempty train and validation splits")
    model_cfg.validate()
    train_cfg.validate()
    lam = effective_lambda(model_cfg, train_cfg)
    params = init_params(model_cfg, train_cfg.seed)
    named = params.named()
    for t in named.values():
        t.requires_grad = True
    state = AdamState()
    drop_rng = np.random.default_rng(derive_seed(train_cfg.seed, "dropout"))
    stopper = EarlyStopping(train_cfg.patience)
    best = params.copy()
    history: list[EpochRecord] = []
    n = len(train_sessions)
    for epoch in range(1, train_cfg.epochs + 1):
        lr = lr_schedule(epoch, train_cfg)
        order = np.random.default_rng(derive_seed(train_cfg.seed, f"shuffle/{epoch}")).permutation(n)
        sums = np.zeros(3)
        for b, sl in enumerate(_chunks(n, train_cfg.batch_size)):
            batch = [train_sessions[i] for i in order[sl]]
            X, y = stack_sessions(batch)
            for t in named.values():
                t.grad = None
            with Tape() as tape:
                out = forward(params, model_cfg, X, train_mode=True, rng=drop_rng)
                loss = sequence_loss(out.y, y, lam, train_cfg.kl_stop_grad)
            if not math.isfinite(loss.value):
                raise TrainingError("loss is not finite", epoch, b + 1)
            tape.backward(loss.total, named.values())
            grads = {k: t.grad for k, t in named.items()}
            adamw_step(named, grads, state, lr, train_cfg.weight_decay, train_cfg.beta1, train_cfg.beta2,
                       train_cfg.adam_eps)
            sums += len(batch) * np.array([loss.ce, loss.kl, loss.value])
        sums /= n
        val = evaluate(Model(model_cfg, params), val_sessions, lam=lam, threads=threads)
        rec = EpochRecord(epoch, lr, *map(float, sums), val.total, val.accuracy, val.macro_f1)
        history.append(rec)
        if log is not None:
            log(rec)
        if stopper.update(epoch, val.macro_f1):
            best = params.copy()
        if stopper.should_stop:
            break
    return TrainResult(Model(model_cfg, best), history, stopper.best_epoch, stopper.best)


def write_history_csv(path, history: list[EpochRecord], cfg_hash: str, seed: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_ce), repr(r.train_kl), repr(r.train_total),
                        repr(r.val_total), repr(r.val_acc), repr(r.val_macro_f1), cfg_hash, seed])


def checkpoint_container(model: Model, extra: dict[str, str] | None = None) -> Container:
    lines = section_to_text("model", model.cfg)
    for k, v in (extra or {}).items():
        lines.append(f"checkpoint.{k} = {v}")
    records = {name: t.data for name, t in model.params.named().items()}
    return Container(container.KIND_CHECKPOINT, "\n".join(lines) + "\n", records)


def save_checkpoint(path, model: Model, extra: dict[str, str] | None = None) -> None:
    container.write(path, checkpoint_container(model, extra))


def model_from_container(c: Container) -> tuple[Model, dict[str, str]]:
    meta = container.parse_meta(c.meta)
    items = {k.split(".", 1)[1]: v for k, v in meta.items() if k.startswith("model.")}
    extra = {k.split(".", 1)[1]: v for k, v in meta.items() if k.startswith("checkpoint.")}
    try:
        cfg = section_from_items(ModelConfig, items, "model")
        cfg.validate()
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}", 8) from None
    params = init_params(cfg, 0)
    named = params.named()
    if set(named) != set(c.records):
        missing = sorted(set(named) ^ set(c.records))[:3]
        raise FormatError(f"checkpoint tensors do not match the model layout: {missing}", 0)
    for name, t in named.items():
        arr = c.records[name]
        if arr.shape != t.data.shape:
            raise FormatError(f"{name}: stored shape {arr.shape} vs expected {t.data.shape}", 0)
        t.data = arr.astype(np.float64)
    return Model(cfg, params), extra


def load_checkpoint(path) -> tuple[Model, dict[str, str]]:
    return model_from_container(container.read(path, expected_kind=container.KIND_CHECKPOINT))
