"""Confidence-guided token partition, pooling, projection and joint heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .confidence import binary_entropy, calibrated_confidence, token_logits
from .errors import ConfigError
from .unimodal import encode

DEFAULT_THETA = 0.75
DEFAULT_D_PROJ = 64


def partition_tokens(gamma, theta=DEFAULT_THETA):
    """Split token indices into (high, low) by ``gamma >= theta``."""
    if not 0.5 < theta <= 1.0:
        raise ConfigError(f"theta must lie in (0.5, 1], got {theta}")
    gamma = np.asarray(gamma, dtype=np.float64)
    mask = gamma >= theta
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def entropy_partition(entropy, theta_h):
    """Split by entropy: ``H <= theta_h`` is the confident group."""
    if not 0.0 <= theta_h <= 1.0:
        raise ConfigError(f"theta_entropy must lie in [0, 1], got {theta_h}")
    entropy = np.asarray(entropy, dtype=np.float64)
    mask = entropy <= theta_h
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def entropy_threshold(theta=DEFAULT_THETA) -> float:
    """Binary entropy at confidence ``theta``; partitions match the confidence rule."""
    return float(binary_entropy(theta))


def pool_mean(z, idx) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    idx = np.asarray(idx, dtype=int)
    if idx.size == 0:
        return np.zeros(z.shape[1])
    if idx.min() < 0 or idx.max() >= z.shape[0]:
        raise IndexError("pool index out of range")
    return z[idx].mean(axis=0)


def project(h, weight, bias=None) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if h.shape[-1] != weight.shape[1]:
        raise ValueError(f"projection expects width {weight.shape[1]}, got {h.shape[-1]}")
    out = h @ weight.T
    return out if bias is None else out + bias


@dataclass
class JointRepresentation:
    high: np.ndarray   # (C, M * d_proj)
    low: np.ndarray

    @property
    def dim(self):
        return self.high.shape[-1]


def assemble_joint(projected: dict, a, modalities) -> JointRepresentation:
    """Concatenate per-modality (high, low) projections in the given order.

    ``projected[m]`` is a pair of (C, d_proj) arrays.  Slots of modalities with
    ``a_m = 0`` (or absent from ``projected``) are exact zeros.
    """
    a = np.asarray(a)
    shapes = {np.shape(p[0]) for p in projected.values()} | {np.shape(p[1]) for p in projected.values()}
    if len(shapes) > 1:
        raise ValueError(f"inconsistent projected shapes {sorted(shapes)}")
    if not shapes:
        raise ValueError("no projected pools to assemble")
    shape = shapes.pop()
    high, low = [], []
    for j, m in enumerate(modalities):
        if a[j] == 1 and m in projected:
            h, l = projected[m]
            high.append(np.asarray(h, dtype=np.float64))
            low.append(np.asarray(l, dtype=np.float64))
        else:
            high.append(np.zeros(shape))
            low.append(np.zeros(shape))
    return JointRepresentation(np.concatenate(high, axis=-1), np.concatenate(low, axis=-1))


def joint_predict(rep: JointRepresentation, w_high, b_high, w_low, b_low):
    """sigma(w . h + b) for each class's representation.

    Weights of shape (D,) are shared across classes; (C, D) gives one head
    per class.
    """
    def head(h, w, b):
        w = np.asarray(w, dtype=np.float64)
        if w.shape[-1] != h.shape[-1]:
            raise ValueError(f"joint head width {w.shape[-1]} does not match representation {h.shape[-1]}")
        s = h @ w if w.ndim == 1 else np.sum(h * w, axis=-1)
        return nm.sigmoid(s + b)

    return np.atleast_1d(head(rep.high, w_high, b_high)), np.atleast_1d(head(rep.low, w_low, b_low))


# ---------------------------------------------------------------------------
# Batch precomputation (frozen stages)
# ---------------------------------------------------------------------------


def sample_pools(z, logits, tau, theta=DEFAULT_THETA, mode="confidence", theta_entropy=None):
    """High/low mean pools (C, d) of one modality's tokens for every class."""
    gamma = calibrated_confidence(logits, tau)
    n_classes = gamma.shape[1]
    high = np.zeros((n_classes, z.shape[1]))
    low = np.zeros((n_classes, z.shape[1]))
    if mode == "entropy":
        th = entropy_threshold(theta) if theta_entropy is None else theta_entropy
        ent = binary_entropy(gamma)
    elif mode != "confidence":
        raise ConfigError(f"patching must be 'confidence' or 'entropy', got {mode!r}")
    for c in range(n_classes):
        if mode == "entropy":
            hi, lo = entropy_partition(ent[:, c], th)
        else:
            hi, lo = partition_tokens(gamma[:, c], theta)
        high[c] = pool_mean(z, hi)
        low[c] = pool_mean(z, lo)
    return high, low


def patch_features(samples, modalities, stubs, conf_heads, temps, n_classes, theta=DEFAULT_THETA,
                   mode="confidence", theta_entropy=None):
    """Pooled high/low arrays per modality, each (n, C, d_m); zeros where missing."""
    high = {m: np.zeros((len(samples), n_classes, stubs[m].d_out)) for m in modalities}
    low = {m: np.zeros((len(samples), n_classes, stubs[m].d_out)) for m in modalities}
    for i, s in enumerate(samples):
        for m in modalities:
            if not s.present(m):
                continue
            z = encode(s.modalities[m], stubs[m])
            high[m][i], low[m][i] = sample_pools(z, token_logits(z, conf_heads[m]), temps[m], theta,
                                                 mode, theta_entropy)
    return high, low
