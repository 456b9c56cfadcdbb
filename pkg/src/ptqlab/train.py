"""Reference full-precision trainer: SGD with momentum to a test-accuracy plateau."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import NumericsError
from .models import ModelGraph, forward
from .tensor import Tensor


def evaluate(model: ModelGraph, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256, hooks=None, param_fn=None) -> float:
    """Top-1 accuracy under eval-mode forward."""
    correct = 0
    with T.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            x = Tensor(images[lo:lo + batch_size])
            logits = forward(model, x, hooks=hooks, param_fn=param_fn, training=False)
            correct += int((logits.data.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return correct / images.shape[0]


def train_reference(model: ModelGraph, train_images: np.ndarray, train_labels: np.ndarray,
                    test_images: np.ndarray, test_labels: np.ndarray, *,
                    epochs: int = 25, batch_size: int = 64, lr: float = 0.05,
                    momentum: float = 0.9, seed: int = 0,
                    plateau_patience: int = 5, plateau_delta: float = 0.002,
                    log=None) -> dict:
    """Train in place; returns a history dict.

    Stops early once test accuracy has not improved by `plateau_delta` for
    `plateau_patience` consecutive epochs. Raises NumericsError on divergence.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E41]))
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    n = train_images.shape[0]
    history = {"train_loss": [], "test_acc": []}
    best_acc, stale = 0.0, 0
    first_loss = None

    if epochs == 0:
        history["test_acc"].append(evaluate(model, test_images, test_labels))
        return history

    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for lo in range(0, n - batch_size + 1, batch_size):
            idx = order[lo:lo + batch_size]
            x = Tensor(train_images[idx])
            logits = forward(model, x, training=True)
            loss = T.cross_entropy(logits, train_labels[idx])
            lval = loss.item()
            if not np.isfinite(lval):
                raise NumericsError(f"training diverged at epoch {epoch} (loss={lval}); lower the learning rate")
            if first_loss is None:
                first_loss = lval
            elif lval > 10.0 * first_loss + 10.0:
                raise NumericsError(f"training diverged at epoch {epoch} (loss={lval}); lower the learning rate")
            for p in params:
                p.zero_grad()
            T.backward(loss)
            for p, v in zip(params, velocity):
                if p.grad is None:
                    continue
                v *= momentum
                v += p.grad
                p.data -= lr * v
            epoch_loss += lval
            batches += 1
        acc = evaluate(model, test_images, test_labels)
        history["train_loss"].append(epoch_loss / max(batches, 1))
        history["test_acc"].append(acc)
        if log:
            log(f"epoch {epoch}: loss {history['train_loss'][-1]:.4f} test acc {acc:.4f}")
        if acc > best_acc + plateau_delta:
            best_acc, stale = acc, 0
        else:
            stale += 1
            if stale >= plateau_patience:
                break
    return history
