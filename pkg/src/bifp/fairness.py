"""Group fairness metrics and the differentiable accuracy-gap surrogate.

The sensitive attribute takes two values, encoded +1 (favorable group) and
-1 (unfavorable group). Labels also live in {-1, +1} and a model predicts +1
exactly when its logit is positive.

Three report quantities matter for a (dense, pruned) model pair:
  * per-group accuracy and its absolute gap (performance fairness),
  * per-group accuracy drop from dense to pruned (degradation),
  * the absolute difference of those drops (degradation fairness).

For optimization the hard accuracy gap is replaced by a smooth estimate
built from a surrogate u with u'(0) > 0: correct-classification mass of the
favorable group plus misclassification mass of the unfavorable group, each
importance-weighted by its group prior, minus one. With u equal to the exact
0/1 indicator this reduces algebraically to acc+ - acc-.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class FairnessError(ValueError):
    pass


class EmptyDatasetError(FairnessError):
    pass


class EmptyGroupError(FairnessError):
    pass


class SingleGroupBatchError(FairnessError):
    pass


@dataclass(frozen=True)
class GroupStats:
    """Group counts and empirical priors, normally taken from the train split."""

    n_pos: int
    n_neg: int

    @property
    def p_pos(self) -> float:
        return self.n_pos / (self.n_pos + self.n_neg)

    @property
    def p_neg(self) -> float:
        return self.n_neg / (self.n_pos + self.n_neg)

    @classmethod
    def from_sensitive(cls, sensitive) -> "GroupStats":
        s = np.asarray(sensitive)
        n_pos = int((s == 1).sum())
        n_neg = int((s == -1).sum())
        if n_pos == 0 or n_neg == 0:
            raise EmptyGroupError("both sensitive groups must be present")
        return cls(n_pos=n_pos, n_neg=n_neg)


@dataclass(frozen=True)
class SurrogateSpec:
    """Surrogate u for the 0/1 indicator.

    kind "sigmoid": u(z) = sigmoid(sharpness * z), smooth with
    u'(0) = sharpness / 4 > 0. kind "indicator" is the exact step function,
    useful only in tests since it carries no gradient.
    """

    kind: str = "sigmoid"
    sharpness: float = 4.0

    def validate(self) -> None:
        if self.kind not in ("sigmoid", "indicator"):
            raise FairnessError(f"unknown surrogate kind {self.kind!r}")
        if self.kind == "sigmoid" and not self.sharpness > 0:
            raise FairnessError(
                f"sigmoid surrogate needs sharpness > 0, got {self.sharpness}"
            )


@dataclass
class FairnessReport:
    acc_overall: float
    acc_pos: float
    acc_neg: float
    perf_gap: float
    degradation_pos: float
    degradation_neg: float
    degradation_gap: float


def _correct(model, data) -> np.ndarray:
    logits = model.logits(data.features)
    preds = np.where(logits > 0, 1, -1)
    return preds == np.asarray(data.labels)


def accuracy(model, data) -> float:
    """Fraction of correct predictions over the whole dataset."""
    if len(np.asarray(data.labels)) == 0:
        raise EmptyDatasetError("accuracy of an empty dataset is undefined")
    return float(_correct(model, data).mean())


def group_accuracies(model, data):
    s = np.asarray(data.sensitive)
    if not (s == 1).any() or not (s == -1).any():
        raise EmptyGroupError("both sensitive groups must be present")
    correct = _correct(model, data)
    return float(correct[s == 1].mean()), float(correct[s == -1].mean())


def performance_fairness(model, data) -> float:
    """Absolute accuracy gap |acc+ - acc-| between the two groups."""
    acc_pos, acc_neg = group_accuracies(model, data)
    return abs(acc_pos - acc_neg)


def degradation_fairness(dense, pruned, data) -> FairnessReport:
    """Per-group accuracy drop from dense to pruned, and the drop gap."""
    from .nn import check_same_architecture

    check_same_architecture(dense, pruned)
    dense_pos, dense_neg = group_accuracies(dense, data)
    pruned_pos, pruned_neg = group_accuracies(pruned, data)
    deg_pos = dense_pos - pruned_pos
    deg_neg = dense_neg - pruned_neg
    return FairnessReport(
        acc_overall=accuracy(pruned, data),
        acc_pos=pruned_pos,
        acc_neg=pruned_neg,
        perf_gap=abs(pruned_pos - pruned_neg),
        degradation_pos=deg_pos,
        degradation_neg=deg_neg,
        degradation_gap=abs(deg_pos - deg_neg),
    )


def fairness_surrogate(
    model,
    batch,
    surrogate: SurrogateSpec,
    stats: GroupStats | None = None,
    logits=None,
):
    """Smooth signed estimate of the group accuracy gap, as a taped scalar.

    Computes mean_i [ 1(s_i=+1) u(y_i f(x_i)) / p+  +  1(s_i=-1) u(-y_i f(x_i)) / p- ] - 1
    on the given batch. Group priors come from ``stats`` (preferably the
    train split; falls back to the batch itself). Backward through the result
    yields gradients for the weights and, via the straight-through rule, the
    mask scores. Pass ``logits`` to reuse an already-taped forward pass.
    """
    surrogate.validate()
    s = np.asarray(batch.sensitive)
    if not (s == 1).any() or not (s == -1).any():
        raise SingleGroupBatchError("fairness surrogate needs both groups in the batch")
    if stats is None:
        stats = getattr(batch, "stats", None) or GroupStats.from_sensitive(s)

    y = np.asarray(batch.labels, dtype=np.float64)
    if logits is None:
        logits = model.forward(batch.features)
    margins = ad.mul(logits, ad.constant(y))

    w_pos = ad.constant((s == 1).astype(np.float64) / stats.p_pos)
    w_neg = ad.constant((s == -1).astype(np.float64) / stats.p_neg)

    if surrogate.kind == "indicator":
        u_pos = ad.constant((margins.data > 0).astype(np.float64))
        u_neg = ad.constant((margins.data < 0).astype(np.float64))
    else:
        u_pos = ad.sigmoid(ad.scale(margins, surrogate.sharpness))
        u_neg = ad.sigmoid(ad.scale(margins, -surrogate.sharpness))

    weighted = ad.add(ad.mul(u_pos, w_pos), ad.mul(u_neg, w_neg))
    return ad.sub(ad.mean(weighted), ad.constant(1.0))


def fairness_penalty(model, batch, surrogate, lam: float, stats: GroupStats | None = None):
    """Penalty lam * F^2 added to the training loss; squaring covers both gap signs."""
    gap = fairness_surrogate(model, batch, surrogate, stats)
    return ad.scale(ad.mul(gap, gap), lam)
