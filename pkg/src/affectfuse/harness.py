"""Experiment protocols: missing-rate sweeps, confidence traces, ablations, result files."""
from __future__ import annotations

import csv
import json
import os
import statistics
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .config import MODALITIES, ConfigError, ModelConfig, TrainConfig, config_hash
from .data import EmotionDataset, ModalitySession, stack_sessions
from .model import forward
from .training import MetricsRecord, TrainResult, evaluate, train

VARIANTS = ("full", "no_cmaa", "no_mie", "no_tfl")
VARIANT_LABELS = {"full": "Full Model", "no_cmaa": "- CMAA", "no_mie": "- MIE", "no_tfl": "- TFL"}


class ProtocolError(RuntimeError):
    pass


@dataclass
class SweepResult:
    rates: list[float]
    accuracy: dict[str, list[float]]
    macro_f1: dict[str, list[float]]
    seed: int
    config_hashes: dict[str, str]
    mode: str = "at_most_one"

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])) or any(not 0 <= r <= 1 for r in self.rates):
            raise ProtocolError("sweep rates must be strictly increasing within [0, 1]")

    def drop(self, name: str) -> float:
        """Accuracy lost between the lowest and highest rate."""
        acc = self.accuracy[name]
        return acc[0] - acc[-1]

    def rows(self) -> list[dict]:
        return [{"model": name, "rate": r, "accuracy": self.accuracy[name][i], "macro_f1": self.macro_f1[name][i],
                 "config_hash": self.config_hashes[name], "seed": self.seed}
                for name in self.accuracy for i, r in enumerate(self.rates)]


def _fingerprint_guard(models: dict, fingerprint: str | None) -> None:
    seen = {name: getattr(m, "data_fingerprint", None) for name, m in models.items()}
    if fingerprint is not None:
        bad = [n for n, fp in seen.items() if fp is not None and fp != fingerprint]
        if bad:
            raise ProtocolError(f"models {bad} were trained on a different dataset than {fingerprint}")
    if len({fp for fp in seen.values() if fp is not None}) > 1:
        raise ProtocolError(f"models were trained on different datasets: {seen}")


def missing_rate_sweep(models: dict, sessions: list[ModalitySession], rates=(0.0, 0.2, 0.4, 0.6),
                       mode: str = "at_most_one", seed: int = 0, fingerprint: str | None = None,
                       threads: int = 1) -> SweepResult:
    """Evaluate every model at every rate with identical injected masks.

    Masks depend only on (seed, session id), never on the model. The models
    are therefore compared on exactly the same corrupted inputs.
    """
    _fingerprint_guard(models, fingerprint)
    rates = [float(r) for r in rates]
    acc: dict[str, list[float]] = {}
    f1: dict[str, list[float]] = {}
    hashes = {}
    for name, model in models.items():
        recs = [evaluate(model, sessions, r, mode, seed, threads=threads) for r in rates]
        acc[name] = [r.accuracy for r in recs]
        f1[name] = [r.macro_f1 for r in recs]
        hashes[name] = config_hash(model.cfg)
    return SweepResult(rates, acc, f1, seed, hashes, mode)


@dataclass
class ConfidenceTrace:
    session_id: str
    weights: np.ndarray  # T x 3
    present: np.ndarray  # 3 x T
    noise: np.ndarray  # 3 x T
    labels: np.ndarray
    predictions: np.ndarray

    def rows(self) -> list[dict]:
        out = []
        for t in range(self.weights.shape[0]):
            row = {"step": t + 1, "label": int(self.labels[t]), "prediction": int(self.predictions[t])}
            for i, m in enumerate(MODALITIES):
                row[f"w_{m}"] = float(self.weights[t, i])
                row[f"sigma_{m}"] = float(self.noise[i, t])
                row[f"present_{m}"] = int(self.present[i, t])
            out.append(row)
        return out


def confidence_trace(model, session: ModalitySession) -> ConfidenceTrace:
    X, _ = stack_sessions([session])
    out = forward(model.params, model.cfg, X)
    return ConfidenceTrace(session.id, out.weights.data[0], np.stack([session.streams[m].present for m in MODALITIES]),
                           np.asarray(session.noise), session.labels, out.y.data[0].argmax(axis=-1))


@dataclass(frozen=True)
class AblationSpec:
    variant: str
    description: str

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


ABLATIONS = (
    AblationSpec("full", "all modules"),
    AblationSpec("no_cmaa", "g^i replaced by h^i (no cross-modal attention)"),
    AblationSpec("no_mie", "fixed weights 1/3 per modality"),
    AblationSpec("no_tfl", "classifier on z_t directly, lambda = 0"),
)


def mean_std(values: list[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    return statistics.fmean(values), (statistics.stdev(values) if len(values) > 1 else 0.0)


def format_mean_std(values: list[float]) -> str:
    m, s = mean_std(values)
    return f"{m:.2f} ± {s:.3f}"


@dataclass
class AblationTable:
    specs: list[AblationSpec]
    seeds: list[int]
    cells: dict[tuple[str, int], MetricsRecord] = field(default_factory=dict)
    best_epochs: dict[tuple[str, int], int] = field(default_factory=dict)

    def values(self, variant: str, metric: str) -> list[float]:
        return [getattr(self.cells[(variant, s)], metric) for s in self.seeds]

    def mean(self, variant: str, metric: str = "macro_f1") -> float:
        return mean_std(self.values(variant, metric))[0]

    def rows(self) -> list[dict]:
        return [{"variant": v.variant, "seed": s, "accuracy": self.cells[(v.variant, s)].accuracy,
                 "macro_f1": self.cells[(v.variant, s)].macro_f1, "best_epoch": self.best_epochs[(v.variant, s)],
                 "config_hash": self.cells[(v.variant, s)].config_hash}
                for v in self.specs for s in self.seeds]

    def format(self) -> str:
        lines = [f"{'Setting':<12} {'Accuracy':>14} {'Macro-F1':>14}"]
        order = [s for s in self.specs if s.variant != "full"] + [s for s in self.specs if s.variant == "full"]
        for spec in order:
            lines.append(f"{VARIANT_LABELS[spec.variant]:<12} "
                         f"{format_mean_std(self.values(spec.variant, 'accuracy')):>14} "
                         f"{format_mean_std(self.values(spec.variant, 'macro_f1')):>14}")
        return "\n".join(lines)


def run_ablation(specs, dataset: EmotionDataset, model_cfg: ModelConfig, train_cfg: TrainConfig, seeds,
                 threads: int = 1, on_result=None) -> AblationTable:
    """Train and test every (variant, seed) cell independently.

    ``on_result(spec, seed, TrainResult, MetricsRecord)`` is called after each cell.
    """
    specs = [s if isinstance(s, AblationSpec) else AblationSpec(s, "") for s in specs]
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("an ablation needs at least one seed")
    table = AblationTable(specs, seeds)
    for spec in specs:
        cfg = replace(model_cfg, variant=spec.variant)
        for seed in seeds:
            res: TrainResult = train(cfg, replace(train_cfg, seed=seed), dataset.splits["train"],
                                     dataset.splits["val"], threads=threads)
            res.model.data_fingerprint = dataset.fingerprint
            rec = evaluate(res.model, dataset.splits["test"], seed=seed, threads=threads)
            table.cells[(spec.variant, seed)] = rec
            table.best_epochs[(spec.variant, seed)] = res.best_epoch
            if on_result is not None:
                on_result(spec, seed, res, rec)
    return table


def result_path(out_dir, experiment: str, cfg_hash: str, seed: int, suffix: str = "csv") -> str:
    return os.path.join(out_dir, f"{experiment}_{cfg_hash}_{seed}.{suffix}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(path, rows: list[dict], header: list[str] | None = None) -> None:
    """One row per cell; floats use repr so reruns are byte-identical."""
    if header is None:
        header = list(rows[0]) if rows else []
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in header])
    os.replace(tmp, path)


def write_summary_json(path, summary: dict) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
