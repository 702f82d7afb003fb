"""Frozen-feature evaluation: weighted k-NN vote and a softmax-regression probe."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KNN_TEMPERATURE = 0.07
DEFAULT_LR_GRID = (0.01, 0.1, 1.0)


@dataclass
class FeatureBank:
    """Embeddings (rows L2-normalized on construction) with their class ids."""

    embeddings: np.ndarray
    labels: np.ndarray
    split: str = "train"
    raw_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        emb = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(emb) != len(labels):
            raise ValueError(f"bank has {len(emb)} embeddings but {len(labels)} labels")
        self.raw_norms = np.linalg.norm(emb, axis=1)
        self.embeddings = emb / np.maximum(self.raw_norms, 1e-12)[:, None]
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def _normalize(q: np.ndarray) -> np.ndarray:
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    return q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)


def knn_votes(bank: FeatureBank, queries, k: int = 20, temp: float = KNN_TEMPERATURE,
              num_classes: int | None = None) -> np.ndarray:
    """Per-class vote mass ``(Q, C)`` from the ``k`` most cosine-similar bank rows."""
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(bank))
    C = num_classes or bank.num_classes
    q = _normalize(queries)
    sim = q @ bank.embeddings.T
    # stable order so equal similarities resolve to the lower bank index
    idx = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sim, idx, axis=1)
    w = np.exp((top - top[:, :1]) / temp)  # shifted for range; argmax unchanged
    votes = np.zeros((len(q), C))
    np.add.at(votes, (np.arange(len(q))[:, None], bank.labels[idx]), w)
    return votes


def knn_classify(bank: FeatureBank, query, k: int = 20, temp: float = KNN_TEMPERATURE):
    """Weighted k-NN label(s); ties between classes go to the lowest class id.

    ``query`` may be one embedding (returns an int) or a batch (returns an array).
    """
    single = np.asarray(query).ndim == 1
    pred = knn_votes(bank, query, k, temp).argmax(axis=1)  # argmax picks the first maximum
    return int(pred[0]) if single else pred


def knn_accuracy(train_bank: FeatureBank, test_bank: FeatureBank, k: int = 20, temp: float = KNN_TEMPERATURE,
                 chunk: int = 1024) -> float:
    if len(test_bank) == 0:
        raise ValueError("empty test bank")
    C = max(train_bank.num_classes, test_bank.num_classes)
    correct = 0
    for s in range(0, len(test_bank), chunk):
        votes = knn_votes(train_bank, test_bank.embeddings[s:s + chunk], k, temp, C)
        correct += int((votes.argmax(axis=1) == test_bank.labels[s:s + chunk]).sum())
    return correct / len(test_bank)


@dataclass
class ProbeResult:
    accuracy: float
    lr: float
    per_lr: dict[float, float]
    loss_curve: list[float]


def _train_softmax(X, y, C: int, epochs: int, lr: float, weight_decay: float, batch_size: int,
                   rng: np.random.Generator):
    N, D = X.shape
    W = np.zeros((D, C))
    b = np.zeros(C)
    Y = np.eye(C)[y]
    curve = []
    for _ in range(epochs):
        order = rng.permutation(N)
        for s in range(0, N, batch_size):
            i = order[s:s + batch_size]
            z = X[i] @ W + b
            z -= z.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - Y[i]) / len(i)
            W -= lr * (X[i].T @ g + weight_decay * W)
            b -= lr * g.sum(axis=0)
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        curve.append(float(-logp[np.arange(N), y].mean()))
    return W, b, curve


def linear_probe(train_bank: FeatureBank, test_bank: FeatureBank, epochs: int = 100,
                 lr_grid=DEFAULT_LR_GRID, weight_decay: float = 0.0, batch_size: int = 256,
                 seed: int = 0) -> ProbeResult:
    """Multinomial logistic regression on frozen features, one run per lr.

    Features are standardized with training statistics. Returns the best
    test accuracy over the grid together with the lr that achieved it
    (earliest grid entry on ties).
    """
    C = max(train_bank.num_classes, test_bank.num_classes)
    mu = train_bank.embeddings.mean(axis=0)
    sd = train_bank.embeddings.std(axis=0) + 1e-6
    Xtr = (train_bank.embeddings - mu) / sd
    Xte = (test_bank.embeddings - mu) / sd
    per_lr, curves = {}, {}
    for lr in lr_grid:
        rng = np.random.default_rng(seed)
        W, b, curve = _train_softmax(Xtr, train_bank.labels, C, epochs, float(lr), weight_decay, batch_size, rng)
        pred = (Xte @ W + b).argmax(axis=1)
        per_lr[float(lr)] = float((pred == test_bank.labels).mean())
        curves[float(lr)] = curve
    best = max(per_lr, key=lambda lr: (per_lr[lr], -list(per_lr).index(lr)))
    return ProbeResult(per_lr[best], best, per_lr, curves[best])
