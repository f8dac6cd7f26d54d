"""Gradient-based training, quantization-aware training and local learning rules."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SurrogateSpec, Tape, value_of

log = logging.getLogger(__name__)


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int, message: str = "loss is not finite"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


# loss specs -----------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    kind: str = "rate_target"
    target: float = 2.5
    margin: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("rate_target", "class_margin"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not np.isfinite(self.target) or self.target < 0:
            raise ValueError("loss target must be finite and >= 0")


def rate_loss(count, duration: float, target: float):
    """Squared rate error; ``count`` is the surrogate-differentiable spike count."""
    err = count * (1.0 / duration) - target
    return err * err


def class_margin_loss(counts, labels, scale: float = 1.0, margin: float = 0.0):
    """Two-class logistic loss on readout spike counts, averaged over the batch.

    ``counts`` has shape (batch, 2); the score is the count difference between
    the correct and the wrong readout neuron.
    """
    labels = np.asarray(labels)
    sign = np.where(labels == 0, 1.0, -1.0)
    diff = ad.matmul(counts, np.array([1.0, -1.0])) * sign
    z = (margin - diff) * scale
    # softplus, written to stay finite for large |z|
    vz = value_of(z)
    big = vz > 30
    sp = ad.log(1.0 + ad.exp(ad.minimum(z, 30.0)))
    sp = ad.where(big, z, sp)
    return ad.mean(sp)


# optimizer ------------------------------------------------------------------

@dataclass
class Adam:
    """Adaptive-moment optimizer over a dict of named numpy parameters."""

    lr: float | Mapping[str, float] = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    def _lr(self, name):
        return self.lr[name] if isinstance(self.lr, Mapping) else self.lr

    def step(self, params: dict, grads: Mapping, mask: Mapping | None = None) -> dict:
        self.step_count += 1
        t = self.step_count
        out = {}
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=float)
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
                raise TrainingDiverged(t, f"non-finite moments for {name}")
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            upd = self._lr(name) * mhat / (np.sqrt(vhat) + self.eps)
            if mask is not None and name in mask:
                upd = upd * mask[name]
                m = np.where(mask[name], m, self.m.get(name, 0.0))
                v = np.where(mask[name], v, self.v.get(name, 0.0))
            self.m[name], self.v[name] = m, v
            out[name] = p - upd
        return out


@dataclass
class TrainResult:
    params: dict
    history: list          # (epoch, loss, metric)
    converged_epoch: np.ndarray | None = None
    best_epoch: int | None = None


def train_parameters(closure: Callable, init: Mapping[str, np.ndarray], epochs: int,
                     lr: float | Mapping[str, float] = 1e-2,
                     log_domain: Sequence[str] = (), floor: Mapping[str, float] | None = None,
                     project: Callable | None = None,
                     done: Callable | None = None,
                     betas: tuple[float, float] = (0.9, 0.999),
                     keep_best: bool = False) -> TrainResult:
    """First-order optimization with adaptive moments.

    ``closure(tape, params)`` receives the parameters as Vars (names in
    ``log_domain`` are exponentiated from an optimized log value, which keeps
    currents positive) and returns ``(loss, metric)``. ``done(metric)`` may
    return a boolean mask; masked elements stop updating from that epoch on.
    With ``keep_best`` the parameters of the lowest-loss epoch are returned;
    straight-through training tends to drift between rounding cells.
    """
    theta = {k: (np.log(np.asarray(v, dtype=float)) if k in log_domain else
                 np.asarray(v, dtype=float).copy()) for k, v in init.items()}
    floor = floor or {}
    opt = Adam(lr, beta1=betas[0], beta2=betas[1])
    history = []
    frozen = None
    converged = None
    best = None
    for epoch in range(epochs + 1):
        tape = Tape()
        leaves = {k: tape.var(v) for k, v in theta.items()}
        params = {k: (ad.exp(leaves[k]) if k in log_domain else leaves[k]) for k in theta}
        loss, metric = closure(tape, params)
        lv = float(np.sum(value_of(loss)))
        if not np.isfinite(lv):
            raise TrainingDiverged(epoch)
        history.append((epoch, lv, metric))
        if keep_best and (best is None or lv < best[2]):
            best = (epoch, {k: (np.exp(v) if k in log_domain else v.copy()) for k, v in theta.items()}, lv)
        log.debug("epoch %d loss %.6g metric %s", epoch, lv, metric)
        if done is not None:
            ok = np.asarray(done(metric), dtype=bool)
            if converged is None:
                converged = np.full(ok.shape, -1)
            converged = np.where((converged < 0) & ok, epoch, converged)
            frozen = converged >= 0
            if np.all(frozen):
                break
        if epoch == epochs:
            break
        grads = tape.backward(ad.sum(loss) if np.ndim(value_of(loss)) else loss)
        g = {k: grads[leaves[k]] for k in theta}
        mask = None if frozen is None else {k: ~np.broadcast_to(frozen, np.shape(theta[k]))
                                            for k in theta if np.shape(theta[k]) == frozen.shape}
        theta = opt.step(theta, g, mask)
        for k in theta:
            if k in floor:
                lo = np.log(floor[k]) if k in log_domain else floor[k]
                theta[k] = np.maximum(theta[k], lo)
        if project is not None:
            theta = project(theta)
        with np.errstate(over="ignore"):
            bad = [k for k, v in theta.items()
                   if not np.all(np.isfinite(np.exp(v) if k in log_domain else v))]
        if bad:
            raise TrainingDiverged(epoch + 1, f"parameters {bad} are not finite")
    final = {k: (np.exp(v) if k in log_domain else v) for k, v in theta.items()}
    if keep_best:
        return TrainResult(best[1], history, converged, best[0])
    return TrainResult(final, history, converged)


# quantization-aware training -------------------------------------------------

@dataclass(frozen=True)
class QatSpec:
    enabled: bool = True
    fan_in_limit: int = 64
    l1_lambda: float = 0.0
    l2_lambda: float = 0.0
    target_fanin: float = 64.0
    per_weight: bool = False

    def __post_init__(self):
        if self.fan_in_limit < 1:
            raise ValueError("fan_in_limit must be >= 1")
        if self.l1_lambda < 0 or self.l2_lambda < 0:
            raise ValueError("regularization strengths must be >= 0")


def fake_quantize_forward(W):
    """Rounded weights in the forward pass, identity gradient in the backward pass."""
    return ad.ste_round(W)


def fanin_regularizer(W, spec: QatSpec):
    """Fan-in penalty ``l1*|rowsum - C| + l2*(rowsum - C)^2`` summed over post neurons.

    ``W`` is one matrix (post, pre) or a sequence of matrices sharing the post
    dimension (e.g. AMPA and GABA_a), whose counts share one budget. With
    ``spec.per_weight`` the comparison is made per entry instead of per row.
    """
    mats = list(W) if isinstance(W, (list, tuple)) else [W]
    if spec.l1_lambda == 0 and spec.l2_lambda == 0:
        return 0.0
    C = spec.target_fanin
    if spec.per_weight:
        terms = [w - C for w in mats]
        total = 0.0
        for d in terms:
            total = total + spec.l1_lambda * ad.sum(ad.absolute(d)) + spec.l2_lambda * ad.sum(d * d)
        return total
    rows = None
    for w in mats:
        r = ad.sum(w, axis=1)
        rows = r if rows is None else rows + r
    d = rows - C
    return spec.l1_lambda * ad.sum(ad.absolute(d)) + spec.l2_lambda * ad.sum(d * d)


def fanin_final_adjust(W, fanin: int) -> np.ndarray:
    """Shift each row by ``C = (fanin - sum(round(W))) / N`` and round again.

    Negative counts are clamped to zero. If rounding still leaves a row above
    ``fanin``, the entries that were rounded up the most give back one synapse
    each (largest remainder) until the budget holds.
    """
    if fanin < 0:
        raise ValueError("fanin must be >= 0")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    out = np.zeros(W.shape, dtype=np.int64)
    n = W.shape[1]
    for i, row in enumerate(W):
        c = (fanin - ad.round_half_away(row).sum()) / n
        shifted = row + c
        q = np.maximum(ad.round_half_away(shifted), 0.0)
        excess = int(q.sum() - fanin)
        if excess > 0:
            residual = q - shifted
            order = sorted(range(n), key=lambda j: (-residual[j], j))
            k = 0
            while excess > 0:
                j = order[k % n]
                if q[j] > 0:
                    q[j] -= 1
                    excess -= 1
                k += 1
        out[i] = q.astype(np.int64)
    return out


def prune_to_fanin(W, limit: int) -> np.ndarray:
    """Remove synapses from the smallest nonzero entries until each row fits ``limit``."""
    if limit < 0:
        raise ValueError("limit must be >= 0")
    W = np.array(np.atleast_2d(W), dtype=np.int64)
    for row in W:
        excess = int(row.sum()) - limit
        while excess > 0:
            nz = np.flatnonzero(row > 0)
            j = nz[np.argmin(row[nz])]
            take = min(int(row[j]), excess)
            row[j] -= take
            excess -= take
    return W


def project_fanin(mats: Sequence[np.ndarray], limit: int) -> list[np.ndarray]:
    """Clamp weights at zero and lower rows whose rounded total exceeds ``limit``.

    An over-budget row is shifted down by the smallest constant (found by
    bisection) that brings ``sum(round(max(row - c, 0)))`` within the budget,
    so strong synapses survive and weak ones drop out. The budget is shared
    across ``mats`` (same post dimension); afterwards the fake-quantized
    forward pass already satisfies the deployed fan-in limit.
    """
    mats = [np.maximum(np.asarray(m, dtype=float), 0.0) for m in mats]
    widths = [m.shape[1] for m in mats]
    joint = np.concatenate(mats, axis=1)

    def total(row, c):
        return ad.round_half_away(np.maximum(row - c, 0.0)).sum()

    for i, row in enumerate(joint):
        if total(row, 0.0) <= limit:
            continue
        lo, hi = 0.0, float(row.max())
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if total(row, mid) > limit:
                lo = mid
            else:
                hi = mid
        joint[i] = np.maximum(row - hi, 0.0)
    return np.split(joint, np.cumsum(widths)[:-1], axis=1)


def quantize_rows(mats: Sequence[np.ndarray], limit: int) -> list[np.ndarray]:
    """Deploy real weights as integer counts under a shared per-row budget.

    Rows whose rounded total fits the budget are just rounded; the others go
    through :func:`fanin_final_adjust` and a final :func:`prune_to_fanin`.
    """
    mats = [np.maximum(np.asarray(value_of(m), dtype=float), 0.0) for m in mats]
    widths = [m.shape[1] for m in mats]
    joint = np.concatenate(mats, axis=1)
    q = ad.round_half_away(joint).astype(np.int64)
    over = q.sum(axis=1) > limit
    if np.any(over):
        q[over] = fanin_final_adjust(joint[over], limit)
    q = prune_to_fanin(q, limit)
    return np.split(q, np.cumsum(widths)[:-1], axis=1)


# local learning --------------------------------------------------------------

class LocalRulePlugin(Protocol):
    """Online per-synapse update; returns dW with the shape of the weight matrix."""

    def __call__(self, pre_trace: np.ndarray, post_factor: np.ndarray, teach_signal: np.ndarray,
                 post_trace: np.ndarray, lr: float) -> np.ndarray: ...


@dataclass
class ThreeFactorRule:
    """dW = lr * pre_trace * psi(I_mem) * (teach_signal - post_trace).

    ``psi`` is the spike surrogate density normalized to 1 at threshold, so the
    update concentrates where the neuron is close to firing.
    """

    w_max: float = 4.0

    def __call__(self, pre_trace, post_factor, teach_signal, post_trace, lr):
        err = (np.asarray(teach_signal) - np.asarray(post_trace)) * np.asarray(post_factor)
        if np.ndim(err) == 1:
            return lr * np.outer(err, pre_trace)
        # batched: (B, post) x (B, pre) -> averaged over the batch
        return lr * np.einsum("bi,bj->ij", err, pre_trace) / err.shape[0]


def post_factor(i_mem, threshold, spec: SurrogateSpec) -> np.ndarray:
    x = np.asarray(i_mem) - np.asarray(threshold)
    return spec.density(x) / spec.density(0.0)


def local_rule_step(plugin: LocalRulePlugin, W: np.ndarray, pre_trace, post_i_mem, threshold,
                    teach_signal, post_trace, lr: float, spec: SurrogateSpec,
                    w_max: float | None = None) -> np.ndarray:
    """Apply one online update in place; returns the applied delta."""
    dw = plugin(pre_trace, post_factor(post_i_mem, threshold, spec), teach_signal, post_trace, lr)
    w_max = getattr(plugin, "w_max", np.inf) if w_max is None else w_max
    new = np.clip(W + dw, 0.0, w_max)
    delta = new - W
    W[...] = new
    return delta
