"""Missingness head, learnable late fusion, the three-term loss and baselines."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numeric as nm
from .errors import AbsentOutputError, ConfigError
from .metrics import safe_macro_auroc
from .numeric import ParameterStore, Tape
from .training import fit
from .unimodal import NEUTRAL_PREDICTION

HIGH, LOW, MISS = "high", "low", "miss"
ABLATIONS = {
    0: "full model",
    1: "no unimodal predictions in late fusion",
    2: "no missingness module",
    3: "no temperature calibration",
    4: "no confidence-based patching",
}


# ---------------------------------------------------------------------------
# Functional forms (numpy)
# ---------------------------------------------------------------------------


def missingness_predict(a, weight, bias) -> np.ndarray:
    """sigma(W a + b) for an availability vector (M,) or batch (n, M)."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("missingness vector entries must be 0 or 1")
    return nm.sigmoid(a @ np.asarray(weight).T + bias)


def late_fuse(preds, alpha) -> np.ndarray:
    """Per class, the softmax(alpha[:, c])-weighted mean of the K predictions."""
    preds = np.asarray(preds, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if preds.shape[-2:] != alpha.shape:
        raise ConfigError(f"expected {alpha.shape[0]} fused predictors, got {preds.shape[-2]}")
    return np.sum(nm.softmax(alpha, axis=0) * preds, axis=-2)


def total_loss(y, late, high, low, beta) -> float:
    """softmax(beta)-weighted sum of the late, high and low BCE terms."""
    w = nm.softmax(beta)
    return float(w[0] * nm.bce_loss(late, y) + w[1] * nm.bce_loss(high, y) + w[2] * nm.bce_loss(low, y))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class FusionConfig:
    modalities: tuple
    n_classes: int
    dims: dict
    d_proj: int = 64
    ablation: int = 0
    low_target: str = "low"
    per_class_heads: bool = False

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation: unknown setting {self.ablation!r}")
        if self.low_target not in ("low", "late"):
            raise ConfigError(f"loss.low_target must be 'low' or 'late', got {self.low_target!r}")
        if self.d_proj < 1:
            raise ConfigError("d_proj: must be >= 1")
        missing = set(self.modalities) - set(self.dims)
        if missing:
            raise ConfigError(f"dims: no embedding width for {sorted(missing)}")

    @property
    def has_patching(self):
        return self.ablation != 4

    @property
    def calibrated(self):
        return self.ablation != 3

    @property
    def predictors(self) -> list[str]:
        """Fused predictor order: high, low, miss, then one per modality."""
        names = []
        if self.ablation != 4:
            names += [HIGH, LOW]
        if self.ablation != 2:
            names.append(MISS)
        if self.ablation != 1:
            names += list(self.modalities)
        return names

    def to_dict(self):
        return {
            "modalities": list(self.modalities), "n_classes": self.n_classes,
            "dims": dict(self.dims), "d_proj": self.d_proj, "ablation": self.ablation,
            "low_target": self.low_target, "per_class_heads": self.per_class_heads,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def ablation_variant(setting: int, base: FusionConfig) -> FusionConfig:
    if setting not in ABLATIONS:
        raise ConfigError(f"unknown ablation setting {setting!r}")
    return replace(base, ablation=setting)


@dataclass
class FusionInputs:
    """Frozen-stage outputs for a set of samples.

    ``high[m]``/``low[m]`` hold pooled token embeddings (n, C, d_m) and are
    exact zeros for missing modalities; ``unimodal`` is (n, M, C) with
    missing entries set to 0.5.
    """

    y: np.ndarray
    a: np.ndarray
    unimodal: np.ndarray
    high: dict = field(default_factory=dict)
    low: dict = field(default_factory=dict)

    def __len__(self):
        return self.y.shape[0]

    def take(self, idx) -> "FusionInputs":
        return FusionInputs(self.y[idx], self.a[idx], self.unimodal[idx],
                            {m: v[idx] for m, v in self.high.items()},
                            {m: v[idx] for m, v in self.low.items()})


@dataclass
class FusionOutputs:
    values: dict

    def __getitem__(self, name) -> np.ndarray:
        if name not in self.values:
            raise AbsentOutputError(f"output {name!r} is not produced by this variant")
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def names(self):
        return list(self.values)


def derived_predictions(outputs) -> tuple[np.ndarray, np.ndarray]:
    """(combined, reduced) = ((high + late + low) / 3, (high + late) / 2)."""
    get = outputs.__getitem__ if isinstance(outputs, FusionOutputs) else outputs.get
    high, late, low = get(HIGH), get("late"), get(LOW)
    if high is None or late is None or low is None:
        raise AbsentOutputError("combined/reduced need high, low and late predictions")
    return (high + late + low) / 3.0, (high + late) / 2.0


class MedPatchFusion:
    """Trainable fusion stage: projections, joint heads, missingness head, alpha, beta."""

    def __init__(self, config: FusionConfig, seed: int = 0, store: ParameterStore | None = None):
        self.config = config
        self.store = store if store is not None else self._init_store(seed)

    def _init_store(self, seed):
        cfg = self.config
        rng = np.random.default_rng(seed)
        s = ParameterStore()
        n_mod = len(cfg.modalities)
        if cfg.has_patching:
            for m in cfg.modalities:
                d = cfg.dims[m]
                s.add(f"proj.{m}", rng.standard_normal((cfg.d_proj, d)) / np.sqrt(d))
            width = n_mod * cfg.d_proj
            for head in ("g_high", "g_low"):
                shape = (cfg.n_classes, width) if cfg.per_class_heads else (width,)
                s.add(f"{head}.w", rng.standard_normal(shape) * 0.01)
                s.add(f"{head}.b", np.zeros(cfg.n_classes if cfg.per_class_heads else 1))
        if MISS in cfg.predictors:
            s.add("g_miss.W", rng.standard_normal((cfg.n_classes, n_mod)) * 0.01)
            s.add("g_miss.b", np.zeros(cfg.n_classes))
        s.add("alpha", np.zeros((len(cfg.predictors), cfg.n_classes)))
        if cfg.has_patching:
            s.add("beta", np.zeros(3))
        return s

    # -- forward -----------------------------------------------------------

    def _joint(self, tape, pools, head):
        cfg = self.config
        parts = [nm.einsum("ncd,pd->ncp", tape.constant(pools[m]), tape.param(self.store, f"proj.{m}"))
                 for m in cfg.modalities]
        rep = nm.concat(parts, axis=-1)
        w = tape.param(self.store, f"{head}.w")
        subscripts = "ncD,cD->nc" if cfg.per_class_heads else "ncD,D->nc"
        return nm.vsigmoid(nm.einsum(subscripts, rep, w) + tape.param(self.store, f"{head}.b"))

    def forward(self, tape: Tape, inputs: FusionInputs) -> dict:
        cfg = self.config
        out = {}
        if cfg.has_patching:
            out[HIGH] = self._joint(tape, inputs.high, "g_high")
            out[LOW] = self._joint(tape, inputs.low, "g_low")
        if MISS in cfg.predictors:
            if not np.all((inputs.a == 0) | (inputs.a == 1)):
                raise ValueError("missingness vector entries must be 0 or 1")
            out[MISS] = nm.vsigmoid(nm.einsum("nm,cm->nc", tape.constant(inputs.a),
                                              tape.param(self.store, "g_miss.W"))
                                    + tape.param(self.store, "g_miss.b"))
        for j, m in enumerate(cfg.modalities):
            out[m] = tape.constant(inputs.unimodal[:, j, :])
        preds = nm.stack([out[k] for k in cfg.predictors], axis=1)  # (n, K, C)
        weights = nm.vsoftmax(tape.param(self.store, "alpha"), axis=0)
        out["late"] = nm.vsum(preds * weights, axis=1)
        return out

    def loss(self, tape: Tape, inputs: FusionInputs):
        out = self.forward(tape, inputs)
        y = inputs.y
        late = nm.bce(out["late"], y)
        if not self.config.has_patching:
            return late
        beta = nm.vsoftmax(tape.param(self.store, "beta"))
        low_pred = out[LOW] if self.config.low_target == "low" else out["late"]
        return beta[0] * late + beta[1] * nm.bce(out[HIGH], y) + beta[2] * nm.bce(low_pred, y)

    def predict(self, inputs: FusionInputs) -> FusionOutputs:
        out = self.forward(Tape(), inputs)
        values = {k: v.value for k, v in out.items()}
        if self.config.has_patching:
            values["combined"], values["reduced"] = derived_predictions(values)
        return FusionOutputs(values)

    # -- reporting ---------------------------------------------------------

    def alpha_weights(self) -> np.ndarray:
        return nm.softmax(self.store["alpha"], axis=0)

    def beta_weights(self) -> np.ndarray | None:
        return nm.softmax(self.store["beta"]) if "beta" in self.store else None


def train_medpatch(train: FusionInputs, val: FusionInputs, config: FusionConfig, lr: float,
                   max_epochs=100, patience=15, batch_size=16, seed=0):
    """Fit the fusion stage; keep the epoch with best validation AUROC of the late prediction."""
    model = MedPatchFusion(config, seed=seed)

    def loss_fn(tape, idx):
        return model.loss(tape, train.take(idx))

    def score():
        return safe_macro_auroc(model.predict(val)["late"], val.y)

    record = fit(model.store, loss_fn, len(train), score, lr, max_epochs, patience, batch_size, seed + 1)
    return model, record


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def late_baseline(unimodal) -> np.ndarray:
    """Unweighted mean over modalities of (n, M, C) predictions (missing already 0.5)."""
    return np.asarray(unimodal, dtype=np.float64).mean(axis=1)


def mean_pooled(samples, modalities, stubs) -> np.ndarray:
    """Concatenated per-modality mean embeddings, zeros for missing: (n, sum d_m)."""
    blocks = []
    for m in modalities:
        stub = stubs[m]
        x = np.zeros((len(samples), stub.d_out))
        for i, s in enumerate(samples):
            if s.present(m):
                x[i] = stub(s.modalities[m].tokens).mean(axis=0)
        blocks.append(x)
    return np.concatenate(blocks, axis=1)


class EarlyFusion:
    """Linear classifier on concatenated frozen mean-pooled embeddings."""

    def __init__(self, width, n_classes, seed=0):
        rng = np.random.default_rng(seed)
        self.store = ParameterStore()
        self.store.add("W", rng.standard_normal((n_classes, width)) * 0.01)
        self.store.add("b", np.zeros(n_classes))

    def _forward(self, tape, x):
        return nm.vsigmoid(nm.einsum("nd,cd->nc", tape.constant(x), tape.param(self.store, "W"))
                           + tape.param(self.store, "b"))

    def predict(self, x) -> np.ndarray:
        return nm.sigmoid(np.asarray(x) @ self.store["W"].T + self.store["b"])

    def fit(self, x_tr, y_tr, x_va, y_va, lr, max_epochs=100, patience=15, batch_size=16, seed=0):
        return fit(self.store, lambda tape, idx: nm.bce(self._forward(tape, x_tr[idx]), y_tr[idx]),
                   x_tr.shape[0], lambda: safe_macro_auroc(self.predict(x_va), y_va), lr, max_epochs,
                   patience, batch_size, seed)


@dataclass
class PaddedTokens:
    """Raw tokens per modality padded to a common length with a presence mask."""

    tokens: dict   # m -> (n, T_max, d_in)
    mask: dict     # m -> (n, T_max)

    def take(self, idx):
        return PaddedTokens({m: v[idx] for m, v in self.tokens.items()},
                            {m: v[idx] for m, v in self.mask.items()})


def pad_tokens(samples, modalities, dims_in) -> PaddedTokens:
    tokens, mask = {}, {}
    for m in modalities:
        t_max = max([s.tokens(m).shape[0] for s in samples if s.present(m)] or [1])
        x = np.zeros((len(samples), t_max, dims_in[m]))
        k = np.zeros((len(samples), t_max))
        for i, s in enumerate(samples):
            if s.present(m):
                t = s.tokens(m).shape[0]
                x[i, :t] = s.tokens(m)
                k[i, :t] = 1.0
        tokens[m], mask[m] = x, k
    return PaddedTokens(tokens, mask)


class JointFusion:
    """Encoders (initialized from the stubs) and classifier trained end to end."""

    def __init__(self, stubs, modalities, n_classes, seed=0):
        self.modalities = tuple(modalities)
        rng = np.random.default_rng(seed)
        self.store = ParameterStore()
        width = 0
        for m in self.modalities:
            self.store.add(f"enc.{m}.W", stubs[m].weight)
            self.store.add(f"enc.{m}.b", stubs[m].bias)
            width += stubs[m].d_out
        self.store.add("W", rng.standard_normal((n_classes, width)) * 0.01)
        self.store.add("b", np.zeros(n_classes))

    def _forward(self, tape, padded: PaddedTokens):
        pooled = []
        for m in self.modalities:
            mask = padded.mask[m]
            z = nm.vtanh(nm.einsum("ntd,ed->nte", tape.constant(padded.tokens[m]),
                                   tape.param(self.store, f"enc.{m}.W"))
                         + tape.param(self.store, f"enc.{m}.b"))
            count = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
            pooled.append(nm.vsum(z * (mask / count)[:, :, None], axis=1))
        rep = nm.concat(pooled, axis=-1)
        return nm.vsigmoid(nm.einsum("nd,cd->nc", rep, tape.param(self.store, "W"))
                           + tape.param(self.store, "b"))

    def predict(self, padded) -> np.ndarray:
        return self._forward(Tape(), padded).value

    def fit(self, tr: PaddedTokens, y_tr, va: PaddedTokens, y_va, lr, max_epochs=100, patience=15,
            batch_size=16, seed=0):
        return fit(self.store, lambda tape, idx: nm.bce(self._forward(tape, tr.take(idx)), y_tr[idx]),
                   y_tr.shape[0], lambda: safe_macro_auroc(self.predict(va), y_va), lr, max_epochs,
                   patience, batch_size, seed)


def ensemble_predict(members, k=3) -> np.ndarray:
    """Mean prediction of the ``k`` members with the best validation AUROC.

    ``members`` is a sequence of ``(val_auroc, predictions)`` pairs; ties keep
    the earlier member.
    """
    if len(members) < k:
        raise ValueError(f"ensemble needs at least {k} members, got {len(members)}")
    order = sorted(range(len(members)), key=lambda i: (-members[i][0], i))[:k]
    return np.mean([np.asarray(members[i][1], dtype=np.float64) for i in order], axis=0)


def baseline_predict(kind, model=None, inputs=None, members=None):
    """Dispatch to a baseline.

    ``late`` takes (n, M, C) unimodal predictions as ``inputs``; ``early`` and
    ``joint`` take a fitted model and its input batch; ``ensemble`` takes
    ``members``.
    """
    if kind == "late":
        return late_baseline(inputs)
    if kind in ("early", "joint"):
        return model.predict(inputs)
    if kind == "ensemble":
        return ensemble_predict(members)
    raise ConfigError(f"unknown baseline kind {kind!r}")


def neutral_unimodal(n, n_mod, n_classes):
    return np.full((n, n_mod, n_classes), NEUTRAL_PREDICTION)
