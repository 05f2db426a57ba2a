"""Token-level confidence heads, temperature scaling and calibration error."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import MissingModalityError
from .numeric import ParameterStore, Tape, adam_step
from .training import fit
from .unimodal import encode

log = logging.getLogger(__name__)

DEFAULT_ECE_BINS = 15


@dataclass
class ConfidenceHead:
    """Linear map applied independently to every token embedding."""

    modality: str
    store: ParameterStore

    @classmethod
    def zeros(cls, modality, n_classes, dim):
        store = ParameterStore()
        store.add("W", np.zeros((n_classes, dim)))
        store.add("b", np.zeros(n_classes))
        return cls(modality, store)

    @property
    def weight(self):
        return self.store["W"]

    @property
    def bias(self):
        return self.store["b"]


def token_logits(z, head: ConfidenceHead) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != head.weight.shape[1]:
        raise ValueError(f"{head.modality}: token width {z.shape[-1]} does not match head dim "
                         f"{head.weight.shape[1]}")
    return z @ head.weight.T + head.bias


@dataclass
class TokenTable:
    """All token embeddings of one modality, flattened, with sample offsets."""

    tokens: np.ndarray      # (n_tokens, d)
    labels: np.ndarray      # (n_tokens, C), each token carries its sample label
    offsets: np.ndarray     # (n_samples + 1,)

    @property
    def n_samples(self):
        return self.offsets.size - 1

    def rows(self, sample_idx) -> np.ndarray:
        return np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in sample_idx])


def token_table(samples, modality, stub) -> TokenTable:
    blocks, labels, offsets = [], [], [0]
    for s in samples:
        if not s.present(modality):
            continue
        z = encode(s.modalities[modality], stub)
        blocks.append(z)
        labels.append(np.repeat(s.y[None, :], z.shape[0], axis=0))
        offsets.append(offsets[-1] + z.shape[0])
    if not blocks:
        return TokenTable(np.zeros((0, stub.d_out)), np.zeros((0, 0)), np.zeros(1, dtype=int))
    return TokenTable(np.concatenate(blocks), np.concatenate(labels), np.asarray(offsets))


def train_confidence_head(modality, stub, train, val, lr, epochs=100, patience=15,
                          batch_size=16, seed=0):
    """Fit one modality's confidence head against inherited sample labels.

    Batches are groups of ``batch_size`` samples (all their tokens).  The
    epoch with the lowest validation token BCE is kept.
    """
    tr = token_table(train, modality, stub)
    if tr.n_samples == 0:
        raise MissingModalityError(f"modality {modality} is absent from the whole training set")
    va = token_table(val, modality, stub)
    head = ConfidenceHead.zeros(modality, tr.labels.shape[1], stub.d_out)

    def loss_fn(tape, idx):
        rows = tr.rows(idx)
        logits = tape.constant(tr.tokens[rows]) @ nm.einsum("cd->dc", tape.param(head.store, "W")) \
            + tape.param(head.store, "b")
        return nm.bce(nm.vsigmoid(logits), tr.labels[rows])

    def val_loss():
        if va.n_samples == 0:
            return float("nan")
        return nm.bce_loss(nm.sigmoid(token_logits(va.tokens, head)), va.labels)

    record = fit(head.store, loss_fn, tr.n_samples, val_loss, lr, epochs, patience, batch_size, seed,
                 maximize=False)
    return head, record


def train_confidence_heads(modalities, stubs, train, val, lr, epochs=100, patience=15,
                           batch_size=16, seed=0):
    heads, records = {}, {}
    for k, m in enumerate(modalities):
        heads[m], records[m] = train_confidence_head(m, stubs[m], train, val, lr, epochs, patience,
                                                     batch_size, seed + k)
    return heads, records


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------


def calibrated_confidence(logit, tau):
    """gamma = max(sigma(l / tau), 1 - sigma(l / tau)), always in [0.5, 1]."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise ValueError("temperature must be positive")
    p = nm.sigmoid(np.asarray(logit, dtype=np.float64) / tau)
    return np.maximum(p, 1.0 - p)


def expected_calibration_error(confidences, correct, bins=DEFAULT_ECE_BINS, lo=0.5, hi=1.0) -> float:
    """Equal-width binned ECE over [lo, hi]; empty bins contribute nothing."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    if conf.size == 0:
        raise ValueError("ECE of an empty set")
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness flags differ in length")
    width = (hi - lo) / bins
    idx = np.clip(np.floor((conf - lo) / width).astype(int), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=corr, minlength=bins)
    nz = counts > 0
    gap = np.abs(acc_sum[nz] - conf_sum[nz])  # n_b * |acc_b - conf_b|
    return float(gap.sum() / conf.size)


def logit_ece(logits, labels, tau=1.0, bins=DEFAULT_ECE_BINS) -> float:
    """ECE of binary predictions sigma(l / tau) against 0/1 labels."""
    p = nm.sigmoid(np.asarray(logits, dtype=np.float64) / tau)
    p = np.atleast_1d(p)
    gamma = np.maximum(p, 1.0 - p)
    correct = (p >= 0.5) == (np.asarray(labels) == 1)
    return expected_calibration_error(gamma, correct, bins)


@dataclass
class TemperatureParams:
    """One positive temperature per (modality, class)."""

    taus: dict = field(default_factory=dict)

    @classmethod
    def ones(cls, modalities, n_classes):
        return cls({m: np.ones(n_classes) for m in modalities})

    def __getitem__(self, modality) -> np.ndarray:
        return self.taus[modality]

    def to_json(self) -> str:
        return json.dumps({m: {str(c): float(t) for c, t in enumerate(v)} for m, v in self.taus.items()},
                          indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "TemperatureParams":
        raw = json.loads(text)
        taus = {}
        for m, per_class in raw.items():
            arr = np.array([per_class[str(c)] for c in range(len(per_class))], dtype=np.float64)
            if np.any(arr <= 0):
                raise ValueError(f"non-positive temperature for {m}")
            taus[m] = arr
        return cls(taus)


@dataclass
class CalibrationResult:
    tau: np.ndarray
    candidates: np.ndarray   # (epochs + 1, C), row 0 is the initial tau = 1
    ece: np.ndarray          # (epochs + 1, C)
    selected: np.ndarray     # (C,) index into candidates


def calibrate_temperature(logits, labels, epochs=5, lr=0.05, batch_size=64,
                          bins=DEFAULT_ECE_BINS, seed=0) -> CalibrationResult:
    """Temperature per class by NLL descent, selected by lowest validation ECE.

    ``logits`` and ``labels`` are (n_tokens, C).  The temperature is
    parametrized as exp(s) to stay positive.  After every epoch the current
    temperatures are recorded; for each class the candidate (including the
    starting value 1) with the lowest ECE on the same data is returned.  A
    class whose labels are all equal keeps tau = 1.
    """
    l = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if l.ndim == 1:
        l, y = l[:, None], y[:, None]
    n, n_classes = l.shape
    if n == 0:
        raise ValueError("calibration needs validation logits")
    store = ParameterStore()
    store.add("log_tau", np.zeros(n_classes))
    rng = np.random.default_rng(seed)
    candidates = [np.ones(n_classes)]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            inv_tau = nm.vexp(nm.neg(tape.param(store, "log_tau")))
            loss = nm.bce(nm.vsigmoid(tape.constant(l[idx]) * inv_tau), y[idx])
            tape.backward(loss)
            adam_step(store, lr)
        candidates.append(np.exp(store["log_tau"]))
    candidates = np.stack(candidates)
    ece = np.array([[logit_ece(l[:, c], y[:, c], cand[c], bins) for c in range(n_classes)]
                    for cand in candidates])
    selected = np.argmin(ece, axis=0)  # first minimum, so ties keep tau = 1
    tau = candidates[selected, np.arange(n_classes)]
    for c in range(n_classes):
        if y[:, c].min() == y[:, c].max():
            log.warning("class %d has a single label value in validation; tau fixed at 1", c)
            tau[c] = 1.0
            selected[c] = 0
    return CalibrationResult(tau, candidates, ece, selected)


def calibrate_temperatures(val_tables: dict, heads: dict, epochs=5, lr=0.05, bins=DEFAULT_ECE_BINS,
                           seed=0):
    """Calibrate every modality from its validation :class:`TokenTable`."""
    taus, results = {}, {}
    for k, (m, table) in enumerate(val_tables.items()):
        if table.n_samples == 0:
            log.warning("no validation tokens for %s; tau fixed at 1", m)
            taus[m] = np.ones(heads[m].weight.shape[0])
            continue
        res = calibrate_temperature(token_logits(table.tokens, heads[m]), table.labels, epochs, lr,
                                    bins=bins, seed=seed + k)
        taus[m], results[m] = res.tau, res
    return TemperatureParams(taus), results


def token_entropy(p, tol=1e-9) -> float:
    """Shannon entropy in bits, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > tol:
        raise ValueError("token_entropy needs a probability vector")
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log2(nz))))


def binary_entropy(q):
    """Entropy in bits of (q, 1 - q), elementwise."""
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(q * np.log2(q) + (1.0 - q) * np.log2(1.0 - q))
    return np.where((q <= 0) | (q >= 1), 0.0, h)


def confidence_map(sample, modalities, stubs, heads, temps: TemperatureParams) -> dict:
    """gamma matrices (T_m, C) for the present modalities of one sample."""
    out = {}
    for m in modalities:
        if sample.present(m):
            z = encode(sample.modalities[m], stubs[m])
            out[m] = calibrated_confidence(token_logits(z, heads[m]), temps[m])
    return out
