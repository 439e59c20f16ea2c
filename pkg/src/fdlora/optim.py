"""Inner (AdamW), outer (Nesterov) and fusion-weight (derivative-free) optimizers."""
from dataclasses import dataclass, field, replace

import numpy as np

from fdlora import kernels
from fdlora.errors import ConfigError, ContractError, OptimizationError, ShapeError
from fdlora.lora import DEFAULT_BOUNDS, FusionWeights, pairwise_sum


@dataclass(frozen=True)
class InnerOptState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr_decay: float = 0.1

    @classmethod
    def fresh(cls, params, **hyper):
        zeros = {k: np.zeros_like(v) for k, v in params.params().items()}
        return cls(zeros, {k: np.zeros_like(v) for k, v in zeros.items()}, **hyper)

    def decayed(self):
        """Copy with the learning rate multiplied by ``lr_decay``."""
        return replace(self, lr=self.lr * self.lr_decay)


def _check_grads(params, grads):
    if set(grads) != set(params):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise ContractError(f"gradient keys do not match parameters (missing {missing}, extra {extra})")
    for k, p in params.items():
        if grads[k].shape != p.shape:
            raise ShapeError(f"{k}: gradient {grads[k].shape} vs parameter {p.shape}")


def inner_step(adapters, grads, state):
    """One AdamW step; returns ``(new_adapters, new_state)``.

    Bias-corrected adaptive-moment update followed by the decoupled decay
    ``p <- p - lr * weight_decay * p``.
    """
    params = adapters.params()
    _check_grads(params, grads)
    step = state.step_count + 1
    b1, b2 = state.betas
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        new_p[k], new_m[k], new_v[k] = kernels.adamw_update(
            p, grads[k], state.first_moment[k], state.second_moment[k],
            state.lr, b1, b2, state.eps, state.weight_decay, step,
        )
    return adapters.with_params(new_p), replace(
        state, first_moment=new_m, second_moment=new_v, step_count=step
    )


def sgd_step(adapters, grads, lr):
    """Plain gradient descent, used for the data-parallel reduction."""
    params = adapters.params()
    _check_grads(params, grads)
    return adapters.with_params({k: p - lr * grads[k] for k, p in params.items()})


@dataclass(frozen=True)
class OuterOptState:
    momentum_buffer: dict
    lr: float = 1e-3
    momentum: float = 0.5

    @classmethod
    def fresh(cls, params, lr=1e-3, momentum=0.5):
        return cls({k: np.zeros_like(v) for k, v in params.params().items()}, lr, momentum)


def outer_delta(global_prev, client_results):
    """Mean over clients of (previous global - client's updated copy)."""
    client_results = list(client_results)
    if not client_results:
        raise ContractError("outer_delta needs at least one client result")
    prev = global_prev.params()
    per_client = [c.params() for c in client_results]
    for c in per_client:
        if set(c) != set(prev) or any(c[k].shape != prev[k].shape for k in prev):
            raise ShapeError("client result does not match the global adapter layout")
    n = len(per_client)
    return global_prev.with_params(
        {k: pairwise_sum(prev[k] - c[k] for c in per_client) / n for k in prev}
    )


def outer_step(global_prev, delta, state):
    """Nesterov step on the outer gradient; returns ``(new_global, new_state)``.

    ``v <- m v + delta`` then ``theta <- theta - lr (delta + m v)``. With
    m = 0 and lr = 1 this is exactly ``theta - delta``.
    """
    prev = global_prev.params()
    d = delta.params()
    if set(d) != set(prev) or any(d[k].shape != prev[k].shape for k in prev):
        raise ShapeError("outer delta does not match the global adapter layout")
    new_theta, new_buf = {}, {}
    for k, p in prev.items():
        new_theta[k], new_buf[k] = kernels.nesterov_update(
            p, d[k], state.momentum_buffer[k], state.lr, state.momentum
        )
    return global_prev.with_params(new_theta), replace(state, momentum_buffer=new_buf)


@dataclass(frozen=True)
class FusionBudget:
    max_steps: int = 5
    lambda_reg: float = 0.05
    bounds: tuple = DEFAULT_BOUNDS
    seed: int = 0
    grid_points: int = 9
    random_starts: int = 2

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.lambda_reg < 0:
            raise ConfigError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        lo, hi = self.bounds
        if not lo < hi:
            raise ConfigError(f"empty weight box {self.bounds}")
        if self.grid_points < 2:
            raise ConfigError("grid_points must be >= 2")

    def max_evaluations(self):
        """Upper bound on objective calls made by :func:`fusion_search`."""
        return len(ANCHORS) + 1 + self.random_starts + 2 * self.max_steps * self.grid_points


# personalized-only, global-only, average, sum
ANCHORS = ((1.0, 0.0), (0.0, 1.0), (0.5, 0.5), (1.0, 1.0))


@dataclass
class FusionSearch:
    weights: FusionWeights
    value: float
    history: list = field(default_factory=list)

    @property
    def evaluations(self):
        return len(self.history)


def fusion_search(objective, budget, initial=None):
    """Coordinate search over a shrinking grid for min f(w) + lambda (|w1| + |w2|).

    Starts from the best of the anchor weights (plus ``initial`` and a few
    seeded random points), then for ``max_steps`` passes tries
    ``grid_points`` values per coordinate spread over +-h around the
    incumbent, halving h after each pass. Only strict improvements move the
    incumbent. Candidates whose objective is non-finite are dropped.
    """
    lo, hi = budget.bounds
    lam = budget.lambda_reg
    cache = {}
    history = []

    def score(w):
        w = (min(max(float(w[0]), lo), hi), min(max(float(w[1]), lo), hi))
        if w in cache:
            return w, cache[w]
        try:
            raw = float(objective(FusionWeights(*w)))
        except (ArithmeticError, ValueError):
            raw = float("nan")
        val = raw + lam * (abs(w[0]) + abs(w[1])) if np.isfinite(raw) else float("nan")
        cache[w] = val
        history.append((w, val))
        return w, val

    rng = np.random.default_rng(budget.seed)
    starts = list(ANCHORS)
    if initial is not None:
        starts.insert(0, tuple(initial.as_tuple() if isinstance(initial, FusionWeights) else initial))
    starts += [tuple(rng.uniform(lo, hi, size=2)) for _ in range(budget.random_starts)]
    best_w, best_v = None, float("inf")
    for w in starts:
        w, v = score(w)
        if np.isfinite(v) and v < best_v:
            best_w, best_v = w, v
    if best_w is None:
        raise OptimizationError("every starting candidate gave a non-finite objective")

    half = (hi - lo) / 4.0
    offsets = np.linspace(-1.0, 1.0, budget.grid_points)
    for _ in range(budget.max_steps):
        for coord in (0, 1):
            for off in offsets:
                cand = list(best_w)
                cand[coord] = best_w[coord] + half * off
                w, v = score(cand)
                if np.isfinite(v) and v < best_v:
                    best_w, best_v = w, v
        half /= 2.0
    return FusionSearch(FusionWeights(*best_w), best_v, history)


def fusion_opt(objective, budget, initial=None):
    """Best fusion weights found by :func:`fusion_search`."""
    return fusion_search(objective, budget, initial).weights


def lr_schedule_milestone(total_steps):
    """Step index from which the decayed learning rate applies (80% mark)."""
    return int(np.floor(0.8 * total_steps))
