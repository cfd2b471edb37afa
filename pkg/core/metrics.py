import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix

from core.errors import DataError


def pair_hop_counts(logits: np.ndarray, D: np.ndarray, valid_mask: np.ndarray) -> tuple[int, int]:
    # argmax over the hop classes, valid ordered pairs only
    valid = np.asarray(valid_mask, dtype=bool)
    if not valid.any():
        raise DataError("hop accuracy: no valid part pairs")
    correct = accuracy_score(D[valid], np.argmax(logits, axis=-1)[valid], normalize=False)
    return int(correct), int(valid.sum())


def hop_counts(hop_logits: list, hop) -> np.ndarray:
    """(L x 2) correct and total valid pairs per layer, for pooling over a dataset."""
    return np.array([pair_hop_counts(logits, hop.D, hop.valid_mask) for logits in hop_logits])


def hop_accuracy(counts: np.ndarray) -> tuple[float, list[float]]:
    """Pooled pair accuracy per layer and its mean over the layers."""
    per_layer = [float(c / t) for c, t in counts]
    return float(np.mean(per_layer)), per_layer


def classification_accuracy(labels, predictions) -> float:
    if len(labels) == 0:
        raise DataError("classification accuracy: no samples")
    return float(accuracy_score(labels, predictions))


def confusion(labels, predictions, n_classes: int) -> np.ndarray:
    return confusion_matrix(labels, predictions, labels=list(range(n_classes)))
