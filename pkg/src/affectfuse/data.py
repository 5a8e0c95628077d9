"""Seeded synthetic multimodal emotion sessions.

Each session's label sequence is a first-order Markov chain over the classes.
Every modality emits ``mean[modality, class] + N(0, sigma(t)^2 I)`` where the
class means are random unit vectors drawn once per dataset.  With
``balance_labels`` the sessions of a split come in groups of ``n_classes``
whose label sequences are cyclic relabelings of one chain, so class shares
are exactly uniform whenever the split size is a multiple of the class count.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import container
from .config import MODALITIES, ConfigError, GeneratorConfig, derive_seed, section_from_items, section_to_text
from .container import Container, FormatError

SPLITS = ("train", "val", "test")


@dataclass
class ModalityStream:
    modality: str
    raw: np.ndarray  # T x D_m
    present: np.ndarray  # bool[T]

    def __post_init__(self):
        if self.present.shape != (self.raw.shape[0],):
            raise ValueError(f"{self.modality}: mask length {self.present.shape} does not match T={self.raw.shape[0]}")


@dataclass
class ModalitySession:
    id: str
    streams: dict[str, ModalityStream]
    labels: np.ndarray  # int[T]
    noise: np.ndarray  # 3 x T per-step sigma, modality order as MODALITIES

    @property
    def T(self) -> int:
        return len(self.labels)

    def copy(self) -> "ModalitySession":
        streams = {m: ModalityStream(m, s.raw.copy(), s.present.copy()) for m, s in self.streams.items()}
        return ModalitySession(self.id, streams, self.labels.copy(), self.noise.copy())


@dataclass
class EmotionDataset:
    config: GeneratorConfig
    means: dict[str, np.ndarray]  # modality -> K x D_m
    splits: dict[str, list[ModalitySession]] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return dataset_fingerprint(self.config)

    def dims(self) -> dict[str, int]:
        return self.config.dims()


def dataset_meta(cfg: GeneratorConfig) -> str:
    return "\n".join(section_to_text("data", cfg)) + "\n"


def dataset_fingerprint(cfg: GeneratorConfig) -> str:
    return hashlib.sha256(dataset_meta(cfg).encode("utf-8")).hexdigest()[:12]


def transition_matrix(n_classes: int, self_transition: float) -> np.ndarray:
    off = (1.0 - self_transition) / (n_classes - 1) if n_classes > 1 else 0.0
    P = np.full((n_classes, n_classes), off)
    np.fill_diagonal(P, self_transition if n_classes > 1 else 1.0)
    return P


def sample_markov_chain(T: int, P: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"transition matrix must be square, got {P.shape}")
    if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-12):
        raise ValueError("transition matrix rows must be nonnegative and sum to 1")
    K = P.shape[0]
    cum = np.cumsum(P, axis=1)
    u = rng.random(T)
    states = np.empty(T, dtype=np.int64)
    states[0] = min(int(u[0] * K), K - 1)
    for t in range(1, T):
        states[t] = min(int(np.searchsorted(cum[states[t - 1]], u[t], side="right")), K - 1)
    return states


def draw_means(n_classes: int, dims: dict[str, int], rng: np.random.Generator) -> dict[str, np.ndarray]:
    means = {}
    for m in MODALITIES:
        mu = rng.normal(size=(n_classes, dims[m]))
        means[m] = mu / np.linalg.norm(mu, axis=1, keepdims=True)
    return means


def emit_observations(states: np.ndarray, means: dict[str, np.ndarray], noise_sigma: dict[str, np.ndarray | float],
                      rng: np.random.Generator) -> dict[str, ModalityStream]:
    """x[m, t] = means[m][states[t]] + sigma[m](t) * standard normal noise."""
    T = len(states)
    streams = {}
    for m in MODALITIES:
        mu = means[m][states]
        sigma = np.broadcast_to(np.asarray(noise_sigma[m], dtype=float), (T,))
        raw = mu + sigma[:, None] * rng.normal(size=mu.shape)
        streams[m] = ModalityStream(m, raw, np.ones(T, dtype=bool))
    return streams


def noise_schedule(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    T = cfg.T
    sig = np.array([[cfg.sigmas()[m]] * T for m in MODALITIES], dtype=float)
    if cfg.noise_schedule == "audio_burst":
        # steps 3..(3 + burst_len - 1), counted from 1
        sig[0, 2:2 + cfg.burst_len] *= cfg.burst_factor
    elif cfg.noise_schedule == "random_burst":
        m = int(rng.integers(len(MODALITIES)))
        start = int(rng.integers(max(T - cfg.burst_len + 1, 1)))
        sig[m, start:start + cfg.burst_len] *= cfg.burst_factor
    return sig


def missing_masks(T: int, rates: dict[str, float], mode: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Presence masks (True = present).

    ``at_most_one``: per step, modality m goes missing with probability
    ``rates[m]`` and never two at once (rates must sum to at most 1).
    ``independent``: every (step, modality) cell is dropped independently.
    """
    r = np.array([rates[m] for m in MODALITIES], dtype=float)
    if np.any(r < 0) or np.any(r > 1):
        raise ValueError("missing rates must lie in [0, 1]")
    present = np.ones((len(MODALITIES), T), dtype=bool)
    if mode == "at_most_one":
        if r.sum() > 1 + 1e-12:
            raise ValueError("at_most_one mode needs rates summing to at most 1")
        u = rng.random(T)
        edges = np.cumsum(r)
        for t in range(T):
            hit = int(np.searchsorted(edges, u[t], side="right"))
            if hit < len(MODALITIES):
                present[hit, t] = False
    elif mode == "independent":
        present = rng.random((T, len(MODALITIES))).T >= r[:, None]
    else:
        raise ValueError(f"unknown missing mode {mode!r}")
    return {m: present[i] for i, m in enumerate(MODALITIES)}


def apply_masks(session: ModalitySession, masks: dict[str, np.ndarray]) -> ModalitySession:
    out = session.copy()
    for m, keep in masks.items():
        s = out.streams[m]
        if keep.shape != s.present.shape:
            raise ValueError(f"{m}: mask length {keep.shape[0]} does not match T={s.raw.shape[0]}")
        s.raw[~keep] = 0.0
        s.present &= keep
    return out


def inject_missing(session: ModalitySession, rate: float, mode: str, rng: np.random.Generator) -> ModalitySession:
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if mode == "at_most_one":
        rates = {m: rate / len(MODALITIES) for m in MODALITIES}
    else:
        rates = {m: rate for m in MODALITIES}
    return apply_masks(session, missing_masks(session.T, rates, mode, rng))


def generate_session(cfg: GeneratorConfig, means, P, sid: str, rng: np.random.Generator,
                     states: np.ndarray | None = None) -> ModalitySession:
    if states is None:
        states = sample_markov_chain(cfg.T, P, rng)
    sig = noise_schedule(cfg, rng)
    streams = emit_observations(states, means, {m: sig[i] for i, m in enumerate(MODALITIES)}, rng)
    session = ModalitySession(sid, streams, states, sig)
    rates = cfg.missing_rates()
    if any(v > 0 for v in rates.values()):
        session = apply_masks(session, missing_masks(cfg.T, rates, cfg.missing_mode, rng))
    return session


def generate_dataset(cfg: GeneratorConfig) -> EmotionDataset:
    cfg.validate()
    if cfg.missing_mode == "at_most_one" and sum(cfg.missing_rates().values()) > 1:
        raise ConfigError("missing_rate_*: at_most_one mode needs rates summing to at most 1")
    means = draw_means(cfg.n_classes, cfg.dims(), np.random.default_rng(derive_seed(cfg.seed, "means")))
    P = transition_matrix(cfg.n_classes, cfg.self_transition)
    ds = EmotionDataset(cfg, means)
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    for split in SPLITS:
        sessions = []
        for i in range(sizes[split]):
            rng = np.random.default_rng(derive_seed(cfg.seed, f"session/{split}/{i}"))
            states = None
            if cfg.balance_labels:
                # P is invariant under relabeling, so each shifted copy is itself a chain draw
                group, shift = divmod(i, cfg.n_classes)
                base_rng = np.random.default_rng(derive_seed(cfg.seed, f"chain/{split}/{group}"))
                states = (sample_markov_chain(cfg.T, P, base_rng) + shift) % cfg.n_classes
            sessions.append(generate_session(cfg, means, P, f"{split}-{i:05d}", rng, states))
        ds.splits[split] = sessions
    return ds


def stack_sessions(sessions: list[ModalitySession]) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Stack equal-length sessions into ({modality: B x T x D}, labels B x T)."""
    X = {m: np.stack([s.streams[m].raw for s in sessions]) for m in MODALITIES}
    y = np.stack([s.labels for s in sessions])
    return X, y


def to_container(ds: EmotionDataset) -> Container:
    records: dict[str, np.ndarray] = {}
    for m in MODALITIES:
        records[f"means/{m}"] = ds.means[m]
    for split in SPLITS:
        for s in ds.splits.get(split, []):
            base = f"{split}/{s.id}"
            records[f"{base}/labels"] = s.labels.astype(np.int64)
            records[f"{base}/noise"] = s.noise
            for m in MODALITIES:
                records[f"{base}/{m}"] = s.streams[m].raw
                records[f"{base}/{m}_present"] = s.streams[m].present.astype(np.uint8)
    return Container(container.KIND_DATASET, dataset_meta(ds.config), records)


def from_container(c: Container) -> EmotionDataset:
    items = {k.split(".", 1)[1]: v for k, v in container.parse_meta(c.meta).items() if k.startswith("data.")}
    try:
        cfg = section_from_items(GeneratorConfig, items, "data")
    except (ConfigError, TypeError) as exc:
        raise FormatError(f"bad dataset metadata: {exc}", 8) from None
    try:
        means = {m: c.records[f"means/{m}"] for m in MODALITIES}
        ds = EmotionDataset(cfg, means, {s: [] for s in SPLITS})
        ids: dict[str, list[str]] = {s: [] for s in SPLITS}
        for name in c.records:
            parts = name.split("/")
            if len(parts) == 3 and parts[0] in ids and parts[2] == "labels":
                ids[parts[0]].append(parts[1])
        for split in SPLITS:
            for sid in ids[split]:
                base = f"{split}/{sid}"
                streams = {m: ModalityStream(m, c.records[f"{base}/{m}"],
                                             c.records[f"{base}/{m}_present"].astype(bool)) for m in MODALITIES}
                ds.splits[split].append(ModalitySession(sid, streams, c.records[f"{base}/labels"],
                                                        c.records[f"{base}/noise"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"dataset records incomplete: {exc}", 0) from None
    return ds


def serialize_dataset(ds: EmotionDataset, path) -> None:
    container.write(path, to_container(ds))


def deserialize_dataset(path) -> EmotionDataset:
    return from_container(container.read(path, expected_kind=container.KIND_DATASET))
