"""Frozen encoder stubs and per-modality prediction heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .errors import MissingModalityError
from .metrics import safe_macro_auroc
from .numeric import ParameterStore
from .training import TrainingRecord, fit

NEUTRAL_PREDICTION = 0.5


class EncoderStub:
    """Per-token ``tanh(W x + b)`` with parameters fixed at construction."""

    def __init__(self, modality: str, d_in: int, d_out: int, seed: int = 0, weight=None, bias=None):
        self.modality = modality
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.seed = seed
        rng = np.random.default_rng([seed, d_in, d_out])
        if weight is None:
            weight = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        if bias is None:
            bias = rng.standard_normal(d_out) * 0.1
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        if self.weight.shape != (d_out, d_in) or self.bias.shape != (d_out,):
            raise ValueError("encoder weight/bias shapes do not match (d_out, d_in)")
        self.weight.flags.writeable = False
        self.bias.flags.writeable = False

    @classmethod
    def identity(cls, modality: str, dim: int):
        return cls(modality, dim, dim, weight=np.eye(dim), bias=np.zeros(dim))

    def tensors(self) -> dict:
        return {f"{self.modality}.W": self.weight, f"{self.modality}.b": self.bias}

    def digest(self) -> str:
        return ParameterStore.from_tensors(self.tensors()).digest()

    def __call__(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != self.d_in:
            raise ValueError(f"{self.modality}: expected tokens of width {self.d_in}, got {tokens.shape}")
        return np.tanh(tokens @ self.weight.T + self.bias)


def encode(x, stub: EncoderStub) -> np.ndarray:
    """Token embeddings of a present modality."""
    if not x.present:
        raise MissingModalityError(f"cannot encode missing modality {x.modality}")
    return stub(x.tokens)


@dataclass
class UnimodalHead:
    """Single linear layer on the mean-pooled token embedding."""

    modality: str
    store: ParameterStore
    trained: bool = False

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

    @property
    def dim(self):
        return self.weight.shape[1]

    def logits(self, tape, pooled):
        """Tape logits for a batch of pooled embeddings (n, d)."""
        return tape.constant(pooled) @ nm.einsum("cd->dc", tape.param(self.store, "W")) + tape.param(self.store, "b")


def unimodal_predict(z, head: UnimodalHead) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != head.dim:
        raise ValueError(f"{head.modality}: embedding width {z.shape[-1]} does not match head dim {head.dim}")
    return nm.sigmoid(head.weight @ z.mean(axis=0) + head.bias)


def pooled_embeddings(samples, modality, stub):
    """Mean-pooled embeddings and labels of the samples where ``modality`` is present."""
    rows, labels = [], []
    for s in samples:
        if s.present(modality):
            rows.append(encode(s.modalities[modality], stub).mean(axis=0))
            labels.append(s.y)
    if not rows:
        return np.zeros((0, stub.d_out)), np.zeros((0, 0))
    return np.stack(rows), np.stack(labels)


def pretrain_unimodal(modality, stub: EncoderStub, train, val, lr, n_classes=None,
                      max_epochs=100, patience=15, batch_size=16, seed=0):
    """Fit a unimodal head with BCE; keep the epoch with best validation AUROC.

    Only samples where the modality is present take part.
    Returns ``(head, TrainingRecord)``.
    """
    x_tr, y_tr = pooled_embeddings(train, modality, stub)
    if x_tr.shape[0] == 0:
        raise MissingModalityError(f"no training sample has modality {modality}")
    x_va, y_va = pooled_embeddings(val, modality, stub)
    n_classes = n_classes or y_tr.shape[1]
    head = UnimodalHead.zeros(modality, n_classes, stub.d_out)

    def loss_fn(tape, idx):
        return nm.bce(nm.vsigmoid(head.logits(tape, x_tr[idx])), y_tr[idx])

    def score():
        if x_va.shape[0] == 0:
            return float("nan")
        return safe_macro_auroc(nm.sigmoid(x_va @ head.weight.T + head.bias), y_va)

    record = fit(head.store, loss_fn, x_tr.shape[0], score, lr, max_epochs, patience, batch_size, seed)
    head.trained = True
    return head, record


def predict_all(samples, modalities, stubs, heads, n_classes) -> np.ndarray:
    """Unimodal predictions (n, M, C); missing modalities imputed at 0.5."""
    out = np.full((len(samples), len(modalities), n_classes), NEUTRAL_PREDICTION)
    for i, s in enumerate(samples):
        for j, m in enumerate(modalities):
            if s.present(m):
                out[i, j] = unimodal_predict(encode(s.modalities[m], stubs[m]), heads[m])
    return out
