"""Synthetic multimodal records, embedding-file ingestion and splitting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataFormatError

log = logging.getLogger(__name__)

CANONICAL_ORDER = ("EHR", "CXR", "RR", "DN")
FILE_FORMAT = "medpatch-embeddings"
FILE_VERSION = 1

MORTALITY_PREVALENCE = 0.125
# Train-split positive rates of the 25 clinical conditions.
CONDITION_PREVALENCE = (
    0.269, 0.056, 0.075, 0.326, 0.206, 0.143, 0.189, 0.100, 0.255, 0.311,
    0.114, 0.172, 0.405, 0.418, 0.372, 0.070, 0.215, 0.125, 0.095, 0.048,
    0.067, 0.127, 0.160, 0.158, 0.123,
)


def order_modalities(names) -> tuple[str, ...]:
    """Canonical EHR, CXR, RR, DN order; unknown names follow alphabetically."""
    names = set(names)
    known = [m for m in CANONICAL_ORDER if m in names]
    return tuple(known + sorted(names - set(known)))


@dataclass
class ModalityTokens:
    modality: str
    tokens: np.ndarray
    present: bool = True

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise DataFormatError(f"{self.modality}: token matrix must be 2-D, got shape {self.tokens.shape}")
        if self.present and self.tokens.shape[0] < 1:
            raise DataFormatError(f"{self.modality}: present modality needs at least one token")
        if not self.present and self.tokens.shape[0] != 0:
            raise DataFormatError(f"{self.modality}: missing modality must have no tokens")

    @classmethod
    def missing(cls, modality, dim=0):
        return cls(modality, np.zeros((0, dim)), present=False)


@dataclass
class Sample:
    id: str
    modalities: dict[str, ModalityTokens]
    a: np.ndarray
    y: np.ndarray

    def tokens(self, modality) -> np.ndarray:
        return self.modalities[modality].tokens

    def present(self, modality) -> bool:
        mt = self.modalities.get(modality)
        return mt is not None and mt.present


@dataclass
class Dataset:
    samples: list[Sample]
    modalities: tuple[str, ...]
    n_classes: int

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}

    def subset(self, ids: Sequence[str]) -> "Dataset":
        index = self.by_id()
        return Dataset([index[i] for i in ids], self.modalities, self.n_classes)

    def labels(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.n_classes))
        return np.stack([s.y for s in self.samples])

    def availability(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, len(self.modalities)))
        return np.stack([s.a for s in self.samples])


def _per_modality(value, modalities, name):
    if isinstance(value, Mapping):
        missing = set(modalities) - set(value)
        if missing:
            raise ConfigError(f"{name}: no value for modalities {sorted(missing)}")
        return {m: value[m] for m in modalities}
    if isinstance(value, (list, tuple)) and len(value) == len(modalities) and not (
        name == "token_range" and len(value) == 2 and all(isinstance(v, (int, np.integer)) for v in value)
    ):
        return dict(zip(modalities, value))
    return {m: value for m in modalities}


@dataclass
class GeneratorConfig:
    """Parameters of the synthetic multimodal generator.

    Per-modality fields accept a scalar (shared), a sequence aligned with
    ``modalities`` or a mapping keyed by modality name.
    """

    modalities: tuple[str, ...] = CANONICAL_ORDER
    token_range: object = (4, 12)
    dim: int = 16
    signal: object = 0.5
    missing: object = 0.0
    n_classes: int = 1
    prevalence: object = MORTALITY_PREVALENCE
    n_samples: int = 1000
    seed: int = 0
    anchor: str = "EHR"
    noise: float = 1.0
    signal_scale: float = 0.25

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if not self.modalities:
            raise ConfigError("modalities: at least one modality required")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigError("modalities: duplicate names")
        self.token_range = {m: tuple(int(v) for v in r) for m, r in
                            _per_modality(self.token_range, self.modalities, "token_range").items()}
        for m, (lo, hi) in self.token_range.items():
            if lo < 1 or hi < lo:
                raise ConfigError(f"token_range: invalid range ({lo}, {hi}) for {m}")
        self.signal = {m: float(v) for m, v in _per_modality(self.signal, self.modalities, "signal").items()}
        for m, s in self.signal.items():
            if not 0.0 <= s <= 1.0:
                raise ConfigError(f"signal: strength for {m} must lie in [0, 1], got {s}")
        self.missing = {m: float(v) for m, v in _per_modality(self.missing, self.modalities, "missing").items()}
        for m, p in self.missing.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"missing: probability for {m} must lie in [0, 1], got {p}")
        if self.dim < 1:
            raise ConfigError("dim: must be >= 1")
        if self.n_classes < 1:
            raise ConfigError("n_classes: must be >= 1")
        prev = np.atleast_1d(np.asarray(self.prevalence, dtype=np.float64))
        if prev.size == 1:
            prev = np.full(self.n_classes, prev[0])
        if prev.shape != (self.n_classes,):
            raise ConfigError(f"prevalence: expected {self.n_classes} values, got {prev.size}")
        if not np.all((prev > 0) & (prev < 1)):
            raise ConfigError("prevalence: values must lie strictly between 0 and 1")
        self.prevalence = tuple(float(p) for p in prev)
        if self.n_samples < 0:
            raise ConfigError("n_samples: must be non-negative")
        if self.anchor is not None:
            if self.anchor not in self.modalities:
                raise ConfigError(f"anchor: {self.anchor!r} is not a configured modality")
            self.missing[self.anchor] = 0.0
        if self.noise < 0:
            raise ConfigError("noise: must be non-negative")
        if self.signal_scale < 0:
            raise ConfigError("signal_scale: must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"generator: unknown keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "token_range": {m: list(r) for m, r in self.token_range.items()},
            "dim": self.dim,
            "signal": dict(self.signal),
            "missing": dict(self.missing),
            "n_classes": self.n_classes,
            "prevalence": list(self.prevalence),
            "n_samples": self.n_samples,
            "seed": self.seed,
            "anchor": self.anchor,
            "noise": self.noise,
            "signal_scale": self.signal_scale,
        }


def signal_directions(config: GeneratorConfig) -> dict[str, np.ndarray]:
    """Unit class directions per modality, shape (n_classes, dim)."""
    rng = np.random.default_rng([config.seed, 0xD1])
    out = {}
    for m in config.modalities:
        u = rng.standard_normal((config.n_classes, config.dim))
        out[m] = u / np.linalg.norm(u, axis=1, keepdims=True)
    return out


def generate_dataset(config: GeneratorConfig) -> Dataset:
    """Draw labelled records whose modalities each carry part of the label signal.

    Token i of a present modality m is
    ``noise * N(0, I) + signal_scale * s_m * w_i * sum_c (2 y_c - 1) u_{m,c}``
    with per-token informativeness ``w_i ~ U(0, 2)``, so some tokens are far
    more decisive than others.
    """
    directions = signal_directions(config)
    rng = np.random.default_rng(config.seed)
    prev = np.asarray(config.prevalence)
    samples = []
    for k in range(config.n_samples):
        y = (rng.random(config.n_classes) < prev).astype(np.float64)
        sign = 2.0 * y - 1.0
        mods = {}
        a = np.zeros(len(config.modalities))
        for j, m in enumerate(config.modalities):
            drop = rng.random() < config.missing[m]
            lo, hi = config.token_range[m]
            t = int(rng.integers(lo, hi + 1))
            noise = rng.standard_normal((t, config.dim)) * config.noise
            w = rng.uniform(0.0, 2.0, size=(t, 1))
            if drop:
                mods[m] = ModalityTokens.missing(m, config.dim)
                continue
            direction = sign @ directions[m]
            tokens = noise + config.signal_scale * config.signal[m] * w * direction
            mods[m] = ModalityTokens(m, tokens)
            a[j] = 1.0
        samples.append(Sample(f"s{k:06d}", mods, a, y))
    return Dataset(samples, config.modalities, config.n_classes)


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer sizes summing to n; leftover units go to the largest fractional parts.

    Ties in the fractional part go to the earlier ratio.
    """
    quotas = [n * r for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    left = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


@dataclass
class DatasetSplit:
    train: list[str]
    validation: list[str]
    test: list[str]

    def to_dict(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["train"]), list(d["validation"]), list(d["test"]))


def split_dataset(dataset, ratios=(0.70, 0.10, 0.20), seed=0) -> DatasetSplit:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError("ratios: need three positive values")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios: must sum to 1, got {sum(ratios)}")
    ids = [s.id for s in dataset]
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n_train, n_val, _ = largest_remainder(len(ids), ratios)
    return DatasetSplit(
        shuffled[:n_train],
        shuffled[n_train:n_train + n_val],
        shuffled[n_train + n_val:],
    )


# ---------------------------------------------------------------------------
# Ingestion format
# ---------------------------------------------------------------------------


def sample_record(sample: Sample) -> dict:
    return {
        "id": sample.id,
        "label": [int(v) for v in sample.y],
        "modalities": {
            m: {"tokens": mt.tokens.tolist()}
            for m, mt in sample.modalities.items() if mt.present
        },
    }


def save_embeddings(dataset: Dataset, path):
    """Write a header line followed by one JSON record per sample."""
    header = {"format": FILE_FORMAT, "version": FILE_VERSION,
              "modalities": list(dataset.modalities), "n_classes": dataset.n_classes}
    lines = [json.dumps(header)]
    lines += [json.dumps(sample_record(s)) for s in dataset]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_embeddings(path, modalities: Sequence[str] | None = None) -> Dataset:
    """Read line-delimited sample records.

    An optional first line ``{"format": "medpatch-embeddings", ...}`` declares
    the modality set and class count; without it both are inferred from the
    records.  A modality key absent from a record marks it missing.
    """
    records = []
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataFormatError(f"line {lineno}: record must be a JSON object")
            if "format" in obj and not records and header is None:
                header = _check_header(obj, lineno)
                continue
            records.append((lineno, obj))

    if modalities is None and header is not None:
        modalities = header["modalities"]
    if modalities is None:
        seen = set()
        for _, obj in records:
            seen.update((obj.get("modalities") or {}).keys())
        modalities = order_modalities(seen)
    modalities = tuple(modalities)
    n_classes = header["n_classes"] if header and "n_classes" in header else None

    dims: dict[str, int] = {}
    samples = []
    ids = set()
    for lineno, obj in records:
        for key in ("id", "label", "modalities"):
            if key not in obj:
                raise DataFormatError(f"line {lineno}: missing key {key!r}")
        sid = obj["id"]
        if not isinstance(sid, str):
            raise DataFormatError(f"line {lineno}: id must be a string")
        if sid in ids:
            raise DataFormatError(f"line {lineno}: duplicate sample id {sid!r}")
        ids.add(sid)
        label = obj["label"]
        if not isinstance(label, list) or not label or any(v not in (0, 1) for v in label):
            raise DataFormatError(f"line {lineno}: label must be a non-empty list of 0/1")
        if n_classes is None:
            n_classes = len(label)
        if len(label) != n_classes:
            raise DataFormatError(f"line {lineno}: expected {n_classes} labels, got {len(label)}")
        blocks = obj["modalities"]
        if not isinstance(blocks, dict):
            raise DataFormatError(f"line {lineno}: modalities must be an object")
        unknown = set(blocks) - set(modalities)
        if unknown:
            raise DataFormatError(f"line {lineno}: unknown modalities {sorted(unknown)}")
        mods = {}
        a = np.zeros(len(modalities))
        for j, m in enumerate(modalities):
            if m not in blocks:
                mods[m] = ModalityTokens.missing(m, dims.get(m, 0))
                continue
            tokens = blocks[m].get("tokens") if isinstance(blocks[m], dict) else None
            if not isinstance(tokens, list) or not tokens:
                raise DataFormatError(f"line {lineno}: {m} needs a non-empty 'tokens' list")
            widths = {len(row) if isinstance(row, list) else -1 for row in tokens}
            if len(widths) != 1 or -1 in widths or 0 in widths:
                raise DataFormatError(f"line {lineno}: {m} token rows have inconsistent shape")
            width = widths.pop()
            if dims.setdefault(m, width) != width:
                raise DataFormatError(
                    f"line {lineno}: {m} token dim {width} does not match earlier dim {dims[m]}")
            try:
                arr = np.array(tokens, dtype=np.float64)
            except (TypeError, ValueError):
                raise DataFormatError(f"line {lineno}: {m} tokens must be numbers") from None
            if not np.all(np.isfinite(arr)):
                raise DataFormatError(f"line {lineno}: {m} tokens contain non-finite values")
            mods[m] = ModalityTokens(m, arr)
            a[j] = 1.0
        samples.append(Sample(sid, mods, a, np.asarray(label, dtype=np.float64)))

    for s in samples:
        for m, mt in s.modalities.items():
            if not mt.present and m in dims:
                s.modalities[m] = ModalityTokens.missing(m, dims[m])
    return Dataset(samples, modalities, n_classes or 1)


def _check_header(obj, lineno):
    if obj.get("format") != FILE_FORMAT:
        raise DataFormatError(f"line {lineno}: malformed header, unknown format {obj.get('format')!r}")
    if obj.get("version") != FILE_VERSION:
        raise DataFormatError(f"line {lineno}: malformed header, unsupported version {obj.get('version')!r}")
    mods = obj.get("modalities")
    if mods is not None and (not isinstance(mods, list) or not all(isinstance(m, str) for m in mods)
                             or len(set(mods)) != len(mods)):
        raise DataFormatError(f"line {lineno}: malformed header, bad modality list")
    n = obj.get("n_classes")
    if n is not None and (not isinstance(n, int) or n < 1):
        raise DataFormatError(f"line {lineno}: malformed header, bad n_classes")
    return obj


def chunk_pool_document(tokens, chunk: int = 512) -> np.ndarray:
    """Pool a long token sequence through non-overlapping chunks.

    Each chunk is averaged on its own and the chunk means are combined with
    weights proportional to chunk length, which equals the overall mean.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("chunk_pool_document needs a non-empty (n_tokens, dim) sequence")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    n = tokens.shape[0]
    pooled = np.zeros(tokens.shape[1])
    for start in range(0, n, chunk):
        block = tokens[start:start + chunk]
        pooled += block.mean(axis=0) * (block.shape[0] / n)
    return pooled
