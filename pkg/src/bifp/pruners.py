"""Pruning methods: the bilevel fair pruner and the classic baselines.

The bilevel pruner alternates two plain SGD levels. The inner level takes T
steps on the weights with the fairness penalty in the loss; the outer level
takes one step on the continuous mask scores (gradients arrive through the
straight-through rule), clamps them to [0, 1], and re-projects the binary
mask to the target sparsity with a hard top-k. Sparsity therefore holds
exactly after every outer step instead of being encouraged by a penalty.

The mask-score gradient is, by default, the first-order approximation that
treats the inner solution as constant. The optional "unrolled-T" mode adds
the correction term obtained by backpropagating through the last T inner SGD
steps, with Hessian-vector products approximated by central finite
differences of first-order gradients.

Baselines: iterative magnitude pruning with weight rewinding (lottery),
single-batch connection sensitivity (snip), per-layer medoid row pruning
(fpgm), and the two-stage fair pipelines that bolt a fairness phase before
or after the magnitude pruner.

Every gradient step at either level counts as one training iteration in the
TrainLog; that count is the unit of the efficiency comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import fairness
from .fairness import GroupStats, SurrogateSpec
from .nn import STRUCTURED, UNSTRUCTURED, MaskedModel, check_same_architecture

METHODS = (
    "bifp-str",
    "bifp-uns",
    "lottery",
    "snip",
    "fpgm",
    "fair-then-prune",
    "prune-then-fair",
)

# dropping the lowest-magnitude 20% of surviving weights per round is the
# conventional iterative-magnitude-pruning schedule
LOTTERY_RATE = 0.2


class PruneConfigError(ValueError):
    pass


class TrialDivergedError(RuntimeError):
    """Training aborted: non-finite gradients or runaway loss."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


@dataclass
class PruneConfig:
    """Full configuration of one pruning trial."""

    method: str = "bifp-uns"
    target_sparsity: float = 0.5
    alpha: float = 0.05            # inner (weight) learning rate
    beta: float = 0.01             # outer (mask score) learning rate
    lambda_fair: float = 1.0
    inner_steps_T: int = 5
    outer_steps: int = 120
    hypergrad: str = "first-order"  # or "unrolled-T"
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    seed: int = 0
    fair_mask_on: bool = True
    fair_weight_on: bool = True
    scope: str = "global"
    batch_size: int = 128
    epochs_per_round: int = 10     # lottery training per pruning round
    finetune_epochs: int = 20      # final fixed-mask phase (lottery, snip, fpgm, P&F)
    train_epochs: int = 30         # dense fair stage of F&P and snip post-prune budget
    pretrain_epochs: int = 10      # fpgm dense warmup before row selection
    validate_every: int = 10
    divergence_limit: float = 1e6

    def validate(self) -> None:
        if self.method not in METHODS:
            raise PruneConfigError(f"unknown method {self.method!r} (choose from {METHODS})")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise PruneConfigError(f"target_sparsity must be in [0, 1), got {self.target_sparsity}")
        if self.alpha <= 0 or self.beta < 0:
            raise PruneConfigError(f"alpha must be > 0 and beta >= 0, got {self.alpha}, {self.beta}")
        if self.inner_steps_T < 1:
            raise PruneConfigError(f"inner_steps_T must be >= 1, got {self.inner_steps_T}")
        if self.hypergrad not in ("first-order", "unrolled-T"):
            raise PruneConfigError(f"unknown hypergrad mode {self.hypergrad!r}")
        self.surrogate.validate()

    def mask_mode(self) -> str:
        return STRUCTURED if self.method in ("bifp-str", "fpgm") else UNSTRUCTURED


@dataclass
class StepRecord:
    step: int
    level: str  # "inner" or "outer"
    loss: float
    fair: float
    sparsity: float


@dataclass
class ValRecord:
    step: int
    acc: float
    gap: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    val_records: list = field(default_factory=list)
    total_iterations: int = 0

    def log_step(self, level, loss, fair, sparsity) -> int:
        self.total_iterations += 1
        self.records.append(StepRecord(self.total_iterations, level, loss, fair, sparsity))
        return self.total_iterations


def _check_mode(model, cfg):
    expected = cfg.mask_mode()
    if model.mode != expected:
        raise PruneConfigError(
            f"method {cfg.method!r} needs a {expected}-mode model, got {model.mode!r}"
        )


class _Trial:
    """Shared state of one pruning run: model, splits, config, rng, log."""

    def __init__(self, model: MaskedModel, splits: datamod.Splits, cfg: PruneConfig):
        cfg.validate()
        self.model = model
        self.splits = splits
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.log = TrainLog()
        self.stats = GroupStats.from_sensitive(splits.train.sensitive)

    def batches(self):
        """Endless stream of stratified train batches, reshuffled per epoch."""
        while True:
            yield from datamod.stratified_batches(
                self.splits.train, self.cfg.batch_size, self.rng, self.stats
            )

    def after_step(self, level, loss_val, fair_val) -> None:
        step = self.log.log_step(level, loss_val, fair_val, self.model.sparsity())
        if loss_val > self.cfg.divergence_limit or not math.isfinite(loss_val):
            raise TrialDivergedError(
                f"loss {loss_val} at {level} step {step} exceeds {self.cfg.divergence_limit}",
                log=self.log,
            )
        if step % self.cfg.validate_every == 0:
            acc = fairness.accuracy(self.model, self.splits.val)
            gap = fairness.performance_fairness(self.model, self.splits.val)
            self.log.val_records.append(ValRecord(step, acc, gap))


def _composite_loss(model, batch, cfg, lam, stats):
    """ell_c plus, when lam > 0, the squared fairness-gap penalty."""
    logits = model.forward(batch.features)
    loss = ad.logistic_loss(logits, ad.constant(np.asarray(batch.labels, dtype=np.float64)))
    fair_val = 0.0
    if lam > 0:
        gap = fairness.fairness_surrogate(model, batch, cfg.surrogate, stats, logits=logits)
        loss = ad.add(loss, ad.scale(ad.mul(gap, gap), lam))
        fair_val = gap.item()
    return loss, fair_val


def _grad_or_abort(tensor, what, log):
    g = tensor.grad
    if g is None:
        return np.zeros_like(tensor.data)
    if not np.all(np.isfinite(g)):
        raise TrialDivergedError(f"non-finite gradient in {what}", log=log)
    return g


def inner_update(model, batch, cfg, stats=None, log=None, lam=None):
    """One SGD step on the weights at fixed masks: theta -= alpha * grad.

    The loss is ell_c plus lambda * F^2; the fairness term is dropped
    entirely when fair_weight_on is false (or lambda is zero), which makes
    the step bitwise identical to plain masked SGD. ``lam`` overrides the
    config-derived penalty weight (baseline phases pass it explicitly).
    """
    if lam is None:
        lam = cfg.lambda_fair if cfg.fair_weight_on else 0.0
    loss, fair_val = _composite_loss(model, batch, cfg, lam, stats)
    ad.backward(loss)
    for p in model.parameters():
        p.data = p.data - cfg.alpha * _grad_or_abort(p, "inner update", log)
    return loss.item(), fair_val


def outer_update(model, batch, cfg, stats=None, log=None, inner_trace=None):
    """One SGD step on the mask scores at fixed weights, then re-project.

    Scores move against the straight-through gradient of the composite loss
    (first-order hypergradient). When cfg.hypergrad is "unrolled-T" and an
    inner trace is supplied, the correction from differentiating through
    those inner steps is added. Scores are clamped to [0, 1] and the binary
    mask is re-binarized at the target sparsity.
    """
    lam = cfg.lambda_fair if cfg.fair_mask_on else 0.0
    loss, fair_val = _composite_loss(model, batch, cfg, lam, stats)
    ad.backward(loss)
    score_grads = [_grad_or_abort(s, "outer update", log) for s in model.score_tensors()]

    if cfg.hypergrad == "unrolled-T" and inner_trace:
        correction = _unrolled_correction(model, batch, cfg, lam, stats, inner_trace, log)
        score_grads = [g + c for g, c in zip(score_grads, correction)]

    for s, g in zip(model.score_tensors(), score_grads):
        s.data = s.data - cfg.beta * g
    model.clamp_scores()
    model.binarize_masks(cfg.target_sparsity, cfg.scope)
    return loss.item(), fair_val


def _get_params(model):
    return [p.data for p in model.parameters()]


def _set_params(model, values):
    for p, v in zip(model.parameters(), values):
        p.data = v


def _loss_grads(model, batch, cfg, lam, stats, log):
    """Gradients of the composite loss w.r.t. (weights+biases, scores)."""
    loss, _ = _composite_loss(model, batch, cfg, lam, stats)
    ad.backward(loss)
    pg = [_grad_or_abort(p, "hypergradient probe", log) for p in model.parameters()]
    sg = [_grad_or_abort(s, "hypergradient probe", log) for s in model.score_tensors()]
    return pg, sg


def _unrolled_correction(model, batch, cfg, lam, stats, inner_trace, log):
    """Backpropagate the outer gradient through the recorded inner SGD steps.

    Reverse accumulation over theta_t = theta_{t-1} - alpha * g(theta_{t-1}, m):
    running vector v starts as d(outer loss)/d(theta_T); at each recorded step
    the score correction picks up -alpha * d2L/(dm dtheta) v and v itself is
    damped by -alpha * d2L/(dtheta dtheta) v. Both Hessian-vector products use
    central finite differences of first-order gradients (probe width scaled
    to 0.01 / |v|), so only taped first-order passes are ever needed.
    """
    inner_lam = cfg.lambda_fair if cfg.fair_weight_on else 0.0
    saved = _get_params(model)
    v = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in model.parameters()]
    correction = [np.zeros_like(s.data) for s in model.score_tensors()]

    for theta_prev, inner_batch in reversed(inner_trace):
        vnorm = math.sqrt(sum(float(np.sum(x * x)) for x in v))
        if vnorm == 0:
            break
        eps = 0.01 / vnorm

        _set_params(model, [t + eps * x for t, x in zip(theta_prev, v)])
        pg_hi, sg_hi = _loss_grads(model, inner_batch, cfg, inner_lam, stats, log)
        _set_params(model, [t - eps * x for t, x in zip(theta_prev, v)])
        pg_lo, sg_lo = _loss_grads(model, inner_batch, cfg, inner_lam, stats, log)

        for c, hi, lo in zip(correction, sg_hi, sg_lo):
            c -= cfg.alpha * (hi - lo) / (2 * eps)
        v = [x - cfg.alpha * (hi - lo) / (2 * eps) for x, hi, lo in zip(v, pg_hi, pg_lo)]

    _set_params(model, saved)
    return correction


# ---------------------------------------------------------------------------
# the bilevel fair pruner
# ---------------------------------------------------------------------------


def bifp_prune(model: MaskedModel, splits: datamod.Splits, cfg: PruneConfig):
    """Alternate T fairness-penalized weight steps with one mask-score step.

    The binary mask starts as the top-k projection of the initial scores and
    is re-projected to the target sparsity after every outer step, so the
    sparsity constraint holds exactly throughout. Returns the pruned model
    and the full step log.
    """
    if cfg.method not in ("bifp-str", "bifp-uns"):
        raise PruneConfigError(f"bifp_prune got method {cfg.method!r}")
    _check_mode(model, cfg)
    trial = _Trial(model, splits, cfg)
    unrolled = cfg.hypergrad == "unrolled-T"
    stream = trial.batches()

    model.binarize_masks(cfg.target_sparsity, cfg.scope)
    for _ in range(cfg.outer_steps):
        trace = [] if unrolled else None
        for _ in range(cfg.inner_steps_T):
            batch = next(stream)
            if unrolled:
                trace.append(([p.copy() for p in _get_params(model)], batch))
            loss_val, fair_val = inner_update(model, batch, cfg, trial.stats, trial.log)
            trial.after_step("inner", loss_val, fair_val)
        batch = next(stream)
        loss_val, fair_val = outer_update(
            model, batch, cfg, trial.stats, trial.log, inner_trace=trace
        )
        trial.after_step("outer", loss_val, fair_val)
    return model, trial.log


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def _train_epochs(trial, epochs, lam):
    """Fixed-mask SGD epochs over the train split; every step is one iteration."""
    cfg = trial.cfg
    for _ in range(epochs):
        for batch in datamod.stratified_batches(
            trial.splits.train, cfg.batch_size, trial.rng, trial.stats
        ):
            loss_val, fair_val = inner_update(
                trial.model, batch, cfg, trial.stats, trial.log, lam=lam
            )
            trial.after_step("inner", loss_val, fair_val)


def _lottery_rounds_needed(target: float) -> int:
    if target <= 0:
        return 0
    return math.ceil(math.log(1.0 - target) / math.log(1.0 - LOTTERY_RATE) - 1e-12)


def _magnitude_mask(model, sparsity: float) -> None:
    """Project to the top-|theta| surviving weights globally.

    Scores become surviving magnitudes shifted above zero (so an exact-zero
    surviving weight still outranks every pruned entry) and the shared top-k
    projection re-derives the mask; pruned weights can never return.
    """
    peak = max(float(np.abs(layer.weight.data).max()) for layer in model.layers)
    for layer in model.layers:
        mag = np.abs(layer.weight.data)
        layer.mask_scores.data = (mag + 1.0) / (peak + 1.0) * layer.binary_mask
    model.binarize_masks(sparsity, scope="global")
    for layer in model.layers:
        layer.mask_scores.data = layer.binary_mask.copy()


def _lottery_core(model, splits, cfg, finetune_lambda: float):
    """Iterative magnitude pruning with rewinding, then a fixed-mask phase.

    Each round trains, drops the lowest-magnitude 20% of surviving weights
    (capped so the cumulative sparsity never overshoots the target), and
    rewinds the weights to their values at entry. The final phase fine-tunes
    the surviving ticket; a two-stage pipeline passes its fairness weight
    here, the plain pruner passes zero.
    """
    trial = _Trial(model, splits, cfg)
    anchor = [p.copy() for p in _get_params(model)]

    rounds = _lottery_rounds_needed(cfg.target_sparsity)
    for r in range(1, rounds + 1):
        _train_epochs(trial, cfg.epochs_per_round, lam=0.0)
        sparsity_r = min(1.0 - (1.0 - LOTTERY_RATE) ** r, cfg.target_sparsity)
        _magnitude_mask(model, sparsity_r)
        _set_params(model, [a.copy() for a in anchor])

    _train_epochs(trial, cfg.finetune_epochs, lam=finetune_lambda)
    return model, trial.log


def lottery_prune(model: MaskedModel, splits: datamod.Splits, cfg: PruneConfig):
    """Magnitude pruning on the lottery-ticket schedule (20% per round)."""
    _check_mode(model, cfg)
    return _lottery_core(model, splits, cfg, finetune_lambda=0.0)


def snip_sensitivity(model, batch) -> np.ndarray:
    """Per-weight saliency |g * theta| normalized to sum to one."""
    logits = model.forward(batch.features)
    loss = ad.logistic_loss(logits, ad.constant(np.asarray(batch.labels, dtype=np.float64)))
    ad.backward(loss)
    parts = []
    for layer in model.layers:
        g = layer.weight.grad if layer.weight.grad is not None else np.zeros_like(layer.weight.data)
        parts.append(np.abs(g * layer.weight.data).ravel())
    sens = np.concatenate(parts)
    total = sens.sum()
    return sens / total if total > 0 else sens


def snip_prune(model: MaskedModel, splits: datamod.Splits, cfg: PruneConfig):
    """Single-shot pruning by connection sensitivity at initialization.

    One stratified mini-batch supplies the gradient; weights with the lowest
    normalized |g * theta| are pruned globally to the target, and the fixed
    ticket then trains for the configured budget. A zero-gradient batch is
    resampled once before giving up.
    """
    _check_mode(model, cfg)
    trial = _Trial(model, splits, cfg)
    stream = trial.batches()

    sens = snip_sensitivity(model, next(stream))
    if sens.sum() == 0:
        sens = snip_sensitivity(model, next(stream))
        if sens.sum() == 0:
            raise TrialDivergedError("zero sensitivity on two batches", log=trial.log)

    pos = 0
    for layer in model.layers:
        n = layer.weight.data.size
        layer.mask_scores.data = sens[pos: pos + n].reshape(layer.weight.shape).copy()
        pos += n
    model.binarize_masks(cfg.target_sparsity, scope="global")

    _train_epochs(trial, cfg.train_epochs, lam=0.0)
    return model, trial.log


def fpgm_row_order(weight: np.ndarray) -> np.ndarray:
    """Row indices sorted by total euclidean distance to the other rows.

    The first entries are the most redundant rows (nearest the ensemble's
    medoid, the deterministic stand-in for the geometric median); ties break
    toward the lowest row index.
    """
    diffs = weight[:, None, :] - weight[None, :, :]
    dist = np.sqrt((diffs**2).sum(axis=2))
    totals = dist.sum(axis=1)
    return np.argsort(totals, kind="stable")


def fpgm_prune(model: MaskedModel, splits: datamod.Splits, cfg: PruneConfig):
    """Structured pruning of rows nearest their layer's medoid.

    The dense net warms up first, then each layer's rows are scored by their
    total distance to the layer's other rows; low-distance (redundant) rows
    are pruned by the structured projection and the ticket fine-tunes with
    the mask fixed. Layers with a single row are never pruned.
    """
    if model.mode != STRUCTURED:
        raise PruneConfigError("fpgm needs a structured-mode model")
    trial = _Trial(model, splits, cfg)

    _train_epochs(trial, cfg.pretrain_epochs, lam=0.0)

    for layer in model.layers:
        w = layer.weight.data
        if w.shape[0] <= 1:
            layer.mask_scores.data = np.ones_like(w)
            continue
        order = fpgm_row_order(w)
        totals_rank = np.empty(w.shape[0])
        totals_rank[order] = np.arange(w.shape[0])
        # normalize per layer so rows are comparable across layers in [0, 1]
        row_score = totals_rank / (w.shape[0] - 1)
        layer.mask_scores.data = np.repeat(row_score[:, None], w.shape[1], axis=1)
    model.binarize_masks(cfg.target_sparsity, scope="global")

    _train_epochs(trial, cfg.finetune_epochs, lam=0.0)
    return model, trial.log


def two_stage(model: MaskedModel, splits: datamod.Splits, cfg: PruneConfig):
    """Fair-then-prune or prune-then-fair pipelines around the lottery pruner.

    fair-then-prune trains the dense net under the fairness penalty and then
    runs magnitude pruning from that state (at target sparsity zero the
    pruning stage is skipped entirely). prune-then-fair is the lottery
    schedule whose final fixed-mask phase carries the fairness penalty.
    Iteration counts accumulate across both stages.
    """
    if cfg.method not in ("fair-then-prune", "prune-then-fair"):
        raise PruneConfigError(f"two_stage got method {cfg.method!r}")
    _check_mode(model, cfg)

    if cfg.method == "prune-then-fair":
        return _lottery_core(model, splits, cfg, finetune_lambda=cfg.lambda_fair)

    trial = _Trial(model, splits, cfg)
    _train_epochs(trial, cfg.train_epochs, lam=cfg.lambda_fair)
    if cfg.target_sparsity == 0:
        return model, trial.log
    stage2 = replace(cfg, seed=cfg.seed + 1)
    model, log2 = _lottery_core(model, splits, stage2, finetune_lambda=0.0)
    trial.log.records.extend(
        StepRecord(r.step + trial.log.total_iterations, r.level, r.loss, r.fair, r.sparsity)
        for r in log2.records
    )
    trial.log.val_records.extend(
        ValRecord(v.step + trial.log.total_iterations, v.acc, v.gap) for v in log2.val_records
    )
    trial.log.total_iterations += log2.total_iterations
    return model, trial.log


def prune(model: MaskedModel, splits: datamod.Splits, cfg: PruneConfig):
    """Dispatch to the pruner named by cfg.method."""
    cfg.validate()
    if cfg.method in ("bifp-str", "bifp-uns"):
        return bifp_prune(model, splits, cfg)
    if cfg.method == "lottery":
        return lottery_prune(model, splits, cfg)
    if cfg.method == "snip":
        return snip_prune(model, splits, cfg)
    if cfg.method == "fpgm":
        return fpgm_prune(model, splits, cfg)
    return two_stage(model, splits, cfg)


# ---------------------------------------------------------------------------
# loss surface interpolation
# ---------------------------------------------------------------------------


def loss_interpolation(model_a, model_b, data, steps: int, surrogate=None, stats=None):
    """Loss and fairness gap along the straight line between two solutions.

    Interpolation happens in effective-weight space (mask times weight, plus
    biases): each point loads (1-t) w_a + t w_b into an identity-mask clone
    and evaluates the logistic loss and smooth gap on the given data.
    """
    check_same_architecture(model_a, model_b)
    if steps < 2:
        raise ValueError(f"need at least 2 interpolation steps, got {steps}")
    surrogate = surrogate or SurrogateSpec()
    va = model_a.effective_weights()
    vb = model_b.effective_weights()

    probe = model_a.copy()
    for layer in probe.layers:
        layer.binary_mask = np.ones_like(layer.binary_mask)
        layer.mask_scores.data = np.ones_like(layer.mask_scores.data)

    batch = data.as_batch(stats)
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        probe.load_effective_weights((1.0 - t) * va + t * vb)
        logits = probe.forward(batch.features)
        loss = ad.logistic_loss(
            logits, ad.constant(np.asarray(batch.labels, dtype=np.float64))
        )
        gap = fairness.fairness_surrogate(probe, batch, surrogate, stats)
        out.append((float(t), loss.item(), gap.item()))
    return out
