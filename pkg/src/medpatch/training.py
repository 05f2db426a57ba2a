"""Mini-batch Adam loop with best-epoch restoration and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numeric import ParameterStore, Tape, Var, adam_step


@dataclass
class TrainingRecord:
    best_epoch: int
    best_score: float
    epochs_run: int
    history: list = field(default_factory=list)  # (epoch, train_loss, val_score)

    def to_dict(self):
        return {
            "best_epoch": self.best_epoch,
            "best_score": self.best_score,
            "epochs_run": self.epochs_run,
            "history": [list(h) for h in self.history],
        }


def fit(store: ParameterStore,
        loss_fn: Callable[[Tape, np.ndarray], Var],
        n_train: int,
        score_fn: Callable[[], float],
        lr: float,
        max_epochs: int = 100,
        patience: int = 15,
        batch_size: int = 16,
        seed: int = 0,
        maximize: bool = True) -> TrainingRecord:
    """Train ``store`` in place and leave it at the best-scoring epoch.

    ``loss_fn(tape, idx)`` builds the loss of the training rows ``idx``;
    ``score_fn()`` evaluates the current parameters on validation data.  A NaN
    score never counts as an improvement.  Training stops once ``patience``
    epochs pass without improvement.  If no epoch ever scores, the parameters
    after epoch 1 are kept.
    """
    if n_train < 1:
        raise ValueError("no training rows")
    rng = np.random.default_rng(seed)
    sign = 1.0 if maximize else -1.0
    best = -math.inf
    best_epoch = 0
    best_params = None
    history = []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape()
            loss = loss_fn(tape, idx)
            tape.backward(loss)
            adam_step(store, lr)
            total += float(loss.value) * idx.size
        score = float(score_fn())
        history.append((epoch, total / n_train, score))
        if not math.isnan(score) and sign * score > best:
            best = sign * score
            best_epoch = epoch
            best_params = store.snapshot()
        elif best_params is None and epoch == 1:
            best_params = store.snapshot()
            best_epoch = 1
        if epoch - best_epoch >= patience:
            break
    store.restore(best_params)
    best_score = sign * best if best > -math.inf else float("nan")
    return TrainingRecord(best_epoch, best_score, epoch, history)
