"""White-box membership inference attack harness.

The attack fits a binary logistic regression on per-example features built
from a model's output logits and scalar loss, labelled 1 for training
members and 0 for non-members, then reports threshold metrics and AUC on a
balanced held-out split.  AUC near 0.5 means the model leaks little
membership signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from .clipping import ClippingRule, privatize_gradient

Array = np.ndarray


class SoftmaxModel:
    """Linear softmax classifier used as the attack target at desk scale."""

    def __init__(self, weights: Array, bias: Array):
        self.weights = np.asarray(weights, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (k, d) with a matching bias")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def logits(self, x: Array) -> Array:
        return self.weights @ np.asarray(x, dtype=float) + self.bias

    def batch_logits(self, xs: Array) -> Array:
        return np.atleast_2d(np.asarray(xs, dtype=float)) @ self.weights.T + self.bias

    def example_loss(self, x: Array, y: int) -> float:
        z = self.logits(x)
        z = z - z.max()
        return float(np.log(np.exp(z).sum()) - z[int(y)])

    def example_losses(self, xs: Array, ys: Array) -> Array:
        z = self.batch_logits(xs)
        z = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1))
        return log_norm - z[np.arange(len(ys)), np.asarray(ys, dtype=int)]


def _softmax_grads(model: SoftmaxModel, xs: Array, ys: Array) -> Array:
    """Per-sample cross-entropy gradients, flattened to (m, k*(d+1))."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.asarray(ys, dtype=int)
    z = model.batch_logits(xs)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(ys)), ys] -= 1.0
    g_w = np.einsum("mk,md->mkd", p, xs)
    return np.concatenate([g_w.reshape(len(ys), -1), p], axis=1)


def fit_softmax(
    xs: Array,
    ys: Array,
    n_classes: int,
    epochs: int,
    lr: float,
    rng: np.random.Generator | None = None,
    *,
    sigma: float = 0.0,
    rule: ClippingRule | None = None,
) -> SoftmaxModel:
    """Full-batch gradient training of the toy classifier.

    With ``sigma > 0`` (and ordinarily a clipping rule) every step uses the
    privatized batch gradient, so the result is a DP-trained model; with
    ``sigma = 0`` and no rule it is plain gradient descent.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.asarray(ys, dtype=int)
    d = xs.shape[1]
    model = SoftmaxModel(np.zeros((n_classes, d)), np.zeros(n_classes))
    for _ in range(epochs):
        grads = _softmax_grads(model, xs, ys)
        g = privatize_gradient(grads, rule, sigma, rng)
        g_w = g[: n_classes * d].reshape(n_classes, d)
        g_b = g[n_classes * d :]
        model = SoftmaxModel(model.weights - lr * g_w, model.bias - lr * g_b)
    return model


@dataclass(frozen=True)
class MiaDataset:
    """Membership features/labels with a train/test partition."""

    features: Array  # (N, n_classes + 1): logits then scalar loss
    labels: Array  # 1 = member, 0 = non-member
    train_idx: Array
    test_idx: Array

    def __post_init__(self):
        for idx in (self.train_idx, self.test_idx):
            part = self.labels[idx]
            if not (np.any(part == 1) and np.any(part == 0)):
                raise ValueError("each split must contain both classes")


def _row_keys(xs: Array) -> set[bytes]:
    return {np.ascontiguousarray(row).tobytes() for row in np.atleast_2d(xs)}


def build_mia_dataset(
    model: SoftmaxModel,
    member_set: tuple[Array, Array],
    nonmember_set: tuple[Array, Array],
    split_fraction: float,
    rng: np.random.Generator,
    member_train_fraction: float = 0.1,
) -> MiaDataset:
    """Assemble attack features and a balanced test split.

    The test split takes ``split_fraction`` of the non-members plus the same
    number of members; the attack's training split gets all remaining
    non-members and a ``member_train_fraction`` share of the members.  Member
    and non-member example sets must be disjoint.
    """
    x_mem, y_mem = member_set
    x_non, y_non = nonmember_set
    x_mem = np.atleast_2d(np.asarray(x_mem, dtype=float))
    x_non = np.atleast_2d(np.asarray(x_non, dtype=float))
    if x_mem.shape[0] == 0 or x_non.shape[0] == 0:
        raise ValueError("member and non-member sets must be nonempty")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    if _row_keys(x_mem) & _row_keys(x_non):
        raise ValueError("member and non-member sets overlap")

    n_test = int(round(split_fraction * x_non.shape[0]))
    n_test = max(1, min(n_test, x_non.shape[0] - 1, x_mem.shape[0] - 1))
    perm_non = rng.permutation(x_non.shape[0])
    perm_mem = rng.permutation(x_mem.shape[0])
    test_non, train_non = perm_non[:n_test], perm_non[n_test:]
    test_mem = perm_mem[:n_test]
    n_train_mem = max(1, int(round(member_train_fraction * x_mem.shape[0])))
    remaining = perm_mem[n_test:]
    if len(remaining) < n_train_mem:
        raise ValueError("not enough members left for the attack training split")
    train_mem = remaining[:n_train_mem]

    def _features(xs, ys):
        losses = model.example_losses(xs, ys)
        return np.concatenate([model.batch_logits(xs), losses[:, None]], axis=1)

    feats = np.concatenate(
        [
            _features(x_mem[train_mem], np.asarray(y_mem)[train_mem]),
            _features(x_non[train_non], np.asarray(y_non)[train_non]),
            _features(x_mem[test_mem], np.asarray(y_mem)[test_mem]),
            _features(x_non[test_non], np.asarray(y_non)[test_non]),
        ]
    )
    labels = np.concatenate(
        [
            np.ones(len(train_mem)),
            np.zeros(len(train_non)),
            np.ones(len(test_mem)),
            np.zeros(len(test_non)),
        ]
    )
    n_train = len(train_mem) + len(train_non)
    return MiaDataset(
        features=feats,
        labels=labels,
        train_idx=np.arange(n_train),
        test_idx=np.arange(n_train, len(labels)),
    )


@dataclass(frozen=True)
class MiaClassifier:
    """Standardised-feature logistic regression attack model."""

    coef: Array
    intercept: float
    feature_mean: Array
    feature_scale: Array

    def scores(self, features: Array) -> Array:
        z = (np.atleast_2d(features) - self.feature_mean) / self.feature_scale
        return 1.0 / (1.0 + np.exp(-(z @ self.coef + self.intercept)))


def fit_mia_classifier(
    dataset: MiaDataset, epochs: int = 50, class_reweighting: bool = True
) -> MiaClassifier:
    """Fit the attack's logistic regression on the training split.

    Quasi-second-order (L-BFGS) minimisation of the (optionally
    inverse-frequency weighted) logistic loss, run until the gradient norm
    falls below 1e-6 or the epoch cap is reached.  Deterministic: features
    are standardised and the optimiser starts from zero.
    """
    x = dataset.features[dataset.train_idx]
    y = dataset.labels[dataset.train_idx]
    if len(np.unique(y)) < 2:
        raise ValueError("attack training split is single-class")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0.0] = 1.0
    z = (x - mean) / scale
    if class_reweighting:
        n = len(y)
        n_pos = float(y.sum())
        weights = np.where(y == 1, n / (2.0 * n_pos), n / (2.0 * (n - n_pos)))
    else:
        weights = np.ones(len(y))

    design = np.concatenate([z, np.ones((len(y), 1))], axis=1)
    signs = 2.0 * y - 1.0

    def objective(theta):
        margins = signs * (design @ theta)
        losses = np.logaddexp(0.0, -margins)
        grad_scale = -signs * weights / (1.0 + np.exp(margins))
        return float(weights @ losses), design.T @ grad_scale

    result = minimize(
        objective,
        np.zeros(design.shape[1]),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": epochs, "gtol": 1e-6},
    )
    theta = result.x
    return MiaClassifier(
        coef=theta[:-1], intercept=float(theta[-1]), feature_mean=mean, feature_scale=scale
    )


@dataclass(frozen=True)
class MiaReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float


def auc_from_scores(scores: Array, labels: Array) -> float:
    """Rank-statistic AUC with midrank tie handling."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate_mia(classifier: MiaClassifier, dataset: MiaDataset) -> MiaReport:
    """Threshold-0.5 classification metrics plus rank AUC on the test split."""
    if len(dataset.test_idx) == 0:
        raise ValueError("empty test split")
    x = dataset.features[dataset.test_idx]
    y = dataset.labels[dataset.test_idx]
    scores = classifier.scores(x)
    pred = (scores >= 0.5).astype(float)
    tp = float(np.sum((pred == 1) & (y == 1)))
    fp = float(np.sum((pred == 1) & (y == 0)))
    fn = float(np.sum((pred == 0) & (y == 1)))
    accuracy = float((pred == y).mean())
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MiaReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        auc=auc_from_scores(scores, y),
    )


MIA_CSV_HEADER = "model_id,epsilon,accuracy,precision,recall,f1,auc"


def mia_csv_row(model_id: str, epsilon: float | str, report: MiaReport) -> str:
    eps = repr(epsilon) if isinstance(epsilon, float) else str(epsilon)
    return (
        f"{model_id},{eps},{report.accuracy!r},{report.precision!r},"
        f"{report.recall!r},{report.f1!r},{report.auc!r}"
    )


def two_blob_data(
    n: int, dim: int, rng: np.random.Generator, separation: float = 2.0,
    label_flip: float = 0.0,
) -> tuple[Array, Array]:
    """Two Gaussian classes along a shared axis, with optional label noise.

    The flipped labels are only memorisable, not learnable, which is what
    gives an overfit model its membership signal.
    """
    y = rng.integers(0, 2, size=n)
    centers = (y[:, None] - 0.5) * separation
    x = rng.standard_normal((n, dim))
    x[:, 0] += centers[:, 0]
    if label_flip > 0.0:
        flip = rng.random(n) < label_flip
        y = np.where(flip, 1 - y, y)
    return x, y.astype(int)
