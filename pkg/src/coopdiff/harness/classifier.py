"""Classifier training for the terminal cost.

A small tanh MLP trained with softmax cross-entropy; the trained network
feeds the negative log-likelihood terminal cost and the accuracy metric.
"""
from __future__ import annotations

import numpy as np

from .. import tape
from ..nn import Mlp
from ..optim import AdamState, adam_step
from ..sde import derive_rng
from .shapes import ShapesDataset

Array = np.ndarray


class ClassifierTrainingError(RuntimeError):
    """Held-out accuracy never reached the target; carries the curve."""

    def __init__(self, message: str, curve: list):
        super().__init__(message)
        self.curve = curve


def cross_entropy(logits, labels: Array):
    """mean over rows of  logsumexp(logits) - logits[label]."""
    lse = tape.logsumexp(logits, axis=1, keepdims=True)
    picked = tape.gather_rowwise(logits, labels)
    per_row = tape.sub(lse, picked)
    return tape.scale(tape.reduce_sum(per_row), 1.0 / labels.shape[0])


def accuracy(classifier: Mlp, images: Array, labels: Array) -> float:
    with tape.no_grad():
        logits = classifier(images).value
    return float((logits.argmax(axis=1) == labels).mean())


def predict(classifier: Mlp, images: Array) -> Array:
    with tape.no_grad():
        return classifier(images).value.argmax(axis=1)


def confusion_matrix(classifier: Mlp, images: Array, labels: Array) -> Array:
    pred = predict(classifier, images)
    n = classifier.out_dim
    out = np.zeros((n, n), dtype=np.int64)
    np.add.at(out, (labels, pred), 1)
    return out


def train_classifier(
    dataset: ShapesDataset,
    seed: int = 0,
    hidden=(64,),
    lr: float = 1e-3,
    batch: int = 64,
    max_steps: int = 4000,
    target_accuracy: float = 0.95,
) -> Mlp:
    """Train until held-out accuracy >= target (raises if never reached).

    The guard catches degenerate datasets: when the images carry no class
    signal (for example all-constant images), accuracy stalls at the class
    prior and training errors out instead of shipping a useless cost.
    """
    x_train, y_train = dataset.train()
    x_held, y_held = dataset.heldout()
    dim = x_train.shape[1]
    model = Mlp([dim, *hidden, dataset.num_classes], derive_rng(seed, 42),
                name="classifier")
    adam = AdamState.for_params(model.params(), lr=lr)
    data_rng = derive_rng(seed, 43)
    curve: list[tuple[int, float, float]] = []
    check_every = 200
    for step in range(max_steps):
        pick = data_rng.integers(0, x_train.shape[0], size=batch)
        loss = cross_entropy(model(x_train[pick]), y_train[pick])
        tape.backward(loss)
        adam_step(model.params(), [p.grad for p in model.params()], adam)
        if (step + 1) % check_every == 0 or step == max_steps - 1:
            acc = accuracy(model, x_held, y_held)
            curve.append((step + 1, float(loss.value), acc))
            if acc >= target_accuracy:
                return model
    raise ClassifierTrainingError(
        f"held-out accuracy stuck below {target_accuracy:.0%} after "
        f"{max_steps} steps (last checkpoints: {curve[-3:]})",
        curve,
    )
