"""Zeroth-order black-box evasion attack.

Coordinate-wise gradient estimation by symmetric finite differences over
model queries, per-coordinate Adam descent on ``||delta||^2 + c * margin``,
an outer binary search over the penalty constant c, importance-weighted
coordinate sampling, and projection onto the box / mutability / integrality
constraints of the feature schema.  The attacker touches nothing but
predict_proba.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ImmutableCoordinate,
    NoEligibleCoordinates,
    NonFiniteGradient,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_PROB_FLOOR = 1e-12
_IMPORTANCE_DECAY = 0.9
_IMPORTANCE_FLOOR = 1e-3
_IMPROVEMENT_RTOL = 1e-4


@dataclass(frozen=True)
class ZooConfig:
    """Attack parameters; every knob the optimizer honours.

    confidence is the required log-probability margin between the winning
    wrong class and the runner-up; variable_h is the finite-difference step
    in scaled-feature units; nb_parallel is how many coordinates get a
    gradient estimate per iteration.
    """

    confidence: float = 0.0
    targeted: bool = False
    learning_rate: float = 1e-2
    max_iter: int = 100
    binary_search_steps: int = 5
    initial_const: float = 1e-1
    abort_early: bool = True
    use_resize: bool = False
    use_importance: bool = True
    nb_parallel: int = 8
    batch_size: int = 32
    variable_h: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.confidence < 0:
            raise ValueError("confidence must be >= 0")
        if self.learning_rate <= 0 or self.initial_const <= 0 or self.variable_h <= 0:
            raise ValueError("learning_rate, initial_const and variable_h must be > 0")
        if self.max_iter < 1 or self.binary_search_steps < 1:
            raise ValueError("max_iter and binary_search_steps must be >= 1")
        if self.nb_parallel < 1 or self.batch_size < 1:
            raise ValueError("nb_parallel and batch_size must be >= 1")

    def to_dict(self):
        return {
            "confidence": self.confidence,
            "targeted": self.targeted,
            "learning_rate": self.learning_rate,
            "max_iter": self.max_iter,
            "binary_search_steps": self.binary_search_steps,
            "initial_const": self.initial_const,
            "abort_early": self.abort_early,
            "use_resize": self.use_resize,
            "use_importance": self.use_importance,
            "nb_parallel": self.nb_parallel,
            "batch_size": self.batch_size,
            "variable_h": self.variable_h,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AdamState:
    """Per-coordinate Adam moments with individual step counters."""

    m: np.ndarray
    v: np.ndarray
    t: np.ndarray

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), np.zeros(dim), np.zeros(dim, dtype=np.int64))


@dataclass
class AttackConstraints:
    """Feasible-move description in scaled space.

    mutable marks coordinates the attack may touch (schema-mutable and not
    constant under the scaler); lower/upper is the per-coordinate box, the
    intersection of [0,1] with any schema valid_range mapped through the
    scaler; integral marks features that must be whole numbers in raw units.
    """

    mutable: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    integral: np.ndarray
    scaler: object | None = None

    @classmethod
    def from_schema(cls, schema, scaler):
        mutable = schema.mutable_mask() & ~scaler.constant_mask()
        lower = np.zeros(schema.arity)
        upper = np.ones(schema.arity)
        for i, col in enumerate(schema.columns):
            if col.valid_range is not None and scaler.spans[i] > 0:
                lo = (col.valid_range[0] - scaler.mins[i]) / scaler.spans[i]
                hi = (col.valid_range[1] - scaler.mins[i]) / scaler.spans[i]
                lower[i] = min(max(lo, 0.0), 1.0)
                upper[i] = min(max(hi, 0.0), 1.0)
        mutable &= upper > lower
        return cls(mutable, lower, upper, schema.integral_mask(), scaler)

    @classmethod
    def free(cls, dim):
        """Everything mutable on the unit box; handy for tests and demos."""
        return cls(np.ones(dim, dtype=bool), np.zeros(dim), np.ones(dim),
                   np.zeros(dim, dtype=bool), None)


@dataclass
class AttackResult:
    original: np.ndarray
    adversarial: np.ndarray
    success: bool
    queries_used: int
    l2_perturbation: float
    best_const: float
    iterations_run: int
    loss_trace: list | None = None
    error: str | None = None

    def to_json_dict(self, scaler=None):
        doc = {
            "success": self.success,
            "queries_used": self.queries_used,
            "l2_perturbation": self.l2_perturbation,
            "best_const": self.best_const,
            "iterations_run": self.iterations_run,
            "original": self.original.tolist(),
            "adversarial": self.adversarial.tolist(),
            "error": self.error,
        }
        if scaler is not None:
            orig_raw = scaler.inverse(self.original)
            adv_raw = scaler.inverse(self.adversarial)
            doc["original_raw"] = orig_raw.tolist()
            doc["adversarial_raw"] = adv_raw.tolist()
            doc["l2_perturbation_raw"] = float(np.linalg.norm(adv_raw - orig_raw))
        if self.loss_trace is not None:
            doc["loss_trace"] = [float(v) for v in self.loss_trace]
        return doc


# ---------------------------------------------------------------------------
# Loss pieces
# ---------------------------------------------------------------------------

def _raw_log_margins(probs, label, targeted):
    """Unfloored attack margins from a (n, k) probability matrix.

    Untargeted: log p_true - max_{i != true} log p_i (positive while the
    model still prefers the true class).  Targeted: max_{i != target}
    log p_i - log p_target.
    """
    logs = np.log(np.maximum(probs, _PROB_FLOOR))
    own = logs[:, label]
    others = logs.copy()
    others[:, label] = -np.inf
    best_other = others.max(axis=1)
    if targeted:
        return best_other - own
    return own - best_other


def margin_loss(probs, label, targeted=False, confidence=0.0):
    """Hinged log-margin loss; <= -confidence exactly when the attack goal
    is met with the requested margin."""
    probs = np.asarray(probs, dtype=np.float64)
    raw = _raw_log_margins(probs[None, :], label, targeted)[0]
    return float(max(raw, -confidence))


def attack_goal_met(probs, label, targeted=False, confidence=0.0):
    """Strict success test: the margin must clear ``confidence`` outright,
    so a probability tie never counts as a successful evasion."""
    probs = np.asarray(probs, dtype=np.float64)
    raw = _raw_log_margins(probs[None, :], label, targeted)[0]
    return bool(raw < -confidence)


class AttackObjective:
    """``||x - x0||^2 + c * margin`` composed over model queries, with an
    exact query counter.  Safe to call with batches of candidate points."""

    def __init__(self, model, x0, label, targeted, confidence, const):
        self.model = model
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.label = label
        self.targeted = targeted
        self.confidence = confidence
        self.const = const
        self.queries = 0

    def query_probs(self, x):
        self.queries += 1
        return np.asarray(self.model.predict_proba(x), dtype=np.float64)

    def evaluate_batch(self, points):
        """Returns (total losses, raw margins, squared l2 distances)."""
        points = np.atleast_2d(points)
        probs = np.asarray(self.model.predict_proba_batch(points), dtype=np.float64)
        self.queries += points.shape[0]
        raw = _raw_log_margins(probs, self.label, self.targeted)
        hinged = np.maximum(raw, -self.confidence)
        l2sq = np.sum((points - self.x0) ** 2, axis=1)
        return l2sq + self.const * hinged, raw, l2sq

    def __call__(self, x):
        return float(self.evaluate_batch(np.atleast_2d(x))[0][0])


# ---------------------------------------------------------------------------
# Estimation and update primitives
# ---------------------------------------------------------------------------

def _fd_points(x, coords, h, lower, upper):
    """Probe points x +/- h*e_c for each coordinate, clipped to the box.
    Rows alternate (+, -) per coordinate."""
    k = len(coords)
    pts = np.repeat(x[None, :], 2 * k, axis=0)
    rows = np.arange(k)
    pts[2 * rows, coords] += h
    pts[2 * rows + 1, coords] -= h
    if lower is not None:
        np.clip(pts, lower, upper, out=pts)
    return pts


def estimate_coordinate_gradient(objective, x, coord, h, lower=None, upper=None,
                                 mutable=None):
    """Symmetric finite difference (L(x+h e) - L(x-h e)) / (2h).

    ``objective`` maps a batch of points to loss values (an AttackObjective
    or any callable oracle with the same evaluate_batch shape); exactly two
    evaluations are spent.  Probe points are clipped to [lower, upper] when
    bounds are given, matching the attack's feasible box.
    """
    x = np.asarray(x, dtype=np.float64)
    if mutable is not None and not mutable[coord]:
        raise ImmutableCoordinate(f"coordinate {coord} is not attackable")
    pts = _fd_points(x, np.array([coord]), h, lower, upper)
    if hasattr(objective, "evaluate_batch"):
        losses = objective.evaluate_batch(pts)[0]
    else:
        losses = np.array([objective(p) for p in pts])
    return float((losses[0] - losses[1]) / (2.0 * h))


def adam_coordinate_step(state, coord, grad, learning_rate):
    """One Adam update confined to a single coordinate; mutates ``state``
    in place and returns the additive delta for that coordinate."""
    if not np.isfinite(grad):
        raise NonFiniteGradient(f"gradient estimate for coordinate {coord} "
                                f"is {grad!r}")
    state.t[coord] += 1
    t = state.t[coord]
    state.m[coord] = ADAM_BETA1 * state.m[coord] + (1 - ADAM_BETA1) * grad
    state.v[coord] = ADAM_BETA2 * state.v[coord] + (1 - ADAM_BETA2) * grad * grad
    m_hat = state.m[coord] / (1.0 - ADAM_BETA1 ** t)
    v_hat = state.v[coord] / (1.0 - ADAM_BETA2 ** t)
    return float(-learning_rate * m_hat / (math.sqrt(v_hat) + ADAM_EPS))


def sample_coordinates(weights, k, rng):
    """Draw k distinct indices with probability proportional to weights."""
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("importance weights must be non-negative")
    eligible = int(np.count_nonzero(weights))
    if eligible == 0 or k > eligible:
        raise NoEligibleCoordinates(
            f"need {k} coordinates, only {eligible} have positive weight")
    return rng.choice(weights.size, size=k, replace=False,
                      p=weights / weights.sum())


@dataclass
class ResizePlan:
    """Coordinate-space plan; identity for flat tabular inputs."""

    identity: bool = True

    def apply(self, x):
        return x


def resize_schedule(config, num_features):
    """Tabular vectors have no spatial hierarchy to coarsen, so use_resize
    degrades to an identity plan (with a warning when it was requested)."""
    if config.use_resize:
        logger.warning(
            "use_resize requested on a flat %d-feature tabular input; "
            "hierarchical resizing targets image grids, proceeding with an "
            "identity plan", num_features)
    return ResizePlan(identity=True)


# ---------------------------------------------------------------------------
# Single-sample inner loop
# ---------------------------------------------------------------------------

@dataclass
class SearchResult:
    candidate: np.ndarray | None
    candidate_l2: float
    best_objective: float
    success: bool
    queries: int
    iterations: int
    trace: list


def attack_one(model, x, label, const, config, constraints, rng):
    """Coordinate-descent attack at a fixed penalty constant.

    Per iteration: sample nb_parallel eligible coordinates, estimate each
    gradient from one batched pair of probe queries, apply Adam updates in
    ascending coordinate order, project back onto the feasible box.  Probe
    points double as candidate adversarials, so the query budget is exactly
    1 + 2 * nb_parallel * iterations when no early exit fires.
    """
    x = np.asarray(x, dtype=np.float64)
    eligible = np.flatnonzero(constraints.mutable)
    if eligible.size == 0:
        raise NoEligibleCoordinates("no mutable, non-constant coordinates")

    objective = AttackObjective(model, x, label, config.targeted,
                                config.confidence, const)
    probs0 = objective.query_probs(x)
    if attack_goal_met(probs0, label, config.targeted, config.confidence):
        return SearchResult(x.copy(), 0.0, 0.0, True, objective.queries, 0, [])

    dim = x.size
    adam = AdamState.zeros(dim)
    importance_ema = np.zeros(dim)
    delta = np.zeros(dim)
    k = min(config.nb_parallel, eligible.size)
    window = math.ceil(config.max_iter / 10)

    best_objective = np.inf
    since_improvement = 0
    candidate, candidate_l2 = None, np.inf
    trace = []
    iterations = 0

    for _ in range(config.max_iter):
        iterations += 1
        if config.use_importance:
            weights = np.maximum(importance_ema[eligible], _IMPORTANCE_FLOOR)
        else:
            weights = np.ones(eligible.size)
        picked = sample_coordinates(weights, k, rng)
        coords = np.sort(eligible[picked])

        current = x + delta
        pts = _fd_points(current, coords, config.variable_h,
                         constraints.lower, constraints.upper)
        losses, raw_margins, l2sq = objective.evaluate_batch(pts)
        grads = (losses[0::2] - losses[1::2]) / (2.0 * config.variable_h)

        # updates are applied in ascending coordinate order, so results do
        # not depend on how the probe queries were scheduled
        for g, coord in zip(grads, coords):
            delta[coord] += adam_coordinate_step(adam, coord, g,
                                                 config.learning_rate)
        projected = np.clip(x + delta, constraints.lower, constraints.upper)
        delta = projected - x
        importance_ema[coords] = (_IMPORTANCE_DECAY * importance_ema[coords]
                                  + (1 - _IMPORTANCE_DECAY) * np.abs(grads))

        # probe points are feasible by construction; any that meets the goal
        # is a valid adversarial candidate
        hits = raw_margins < -config.confidence
        if hits.any():
            idx = np.flatnonzero(hits)
            best_hit = idx[np.argmin(l2sq[idx])]
            if l2sq[best_hit] < candidate_l2 ** 2:
                candidate = pts[best_hit].copy()
                candidate_l2 = math.sqrt(l2sq[best_hit])

        iter_objective = float(losses.min())
        trace.append(iter_objective)
        if not math.isfinite(best_objective) or iter_objective < (
                best_objective - _IMPROVEMENT_RTOL * max(abs(best_objective), 1e-12)):
            best_objective = iter_objective
            since_improvement = 0
        else:
            since_improvement += 1
        if config.abort_early and since_improvement >= window:
            break

    return SearchResult(candidate, candidate_l2, best_objective,
                        candidate is not None, objective.queries, iterations,
                        trace)


# ---------------------------------------------------------------------------
# Batch attack with binary search over the penalty constant
# ---------------------------------------------------------------------------

def _project_integral(adversarial, original, constraints):
    """Round integral features to whole raw units, clamped into the feasible
    raw box; returns None when the candidate is already integral."""
    scaler = constraints.scaler
    int_idx = np.flatnonzero(constraints.integral)
    raw = scaler.inverse(adversarial)
    raw_lo = scaler.mins + constraints.lower * scaler.spans
    raw_hi = scaler.mins + constraints.upper * scaler.spans
    rounded = raw.copy()
    for i in int_idx:
        lo = math.ceil(raw_lo[i] - 1e-9)
        hi = math.floor(raw_hi[i] + 1e-9)
        r = round(raw[i])
        if lo <= hi:
            r = min(max(r, lo), hi)
        rounded[i] = r
    if np.array_equal(rounded, raw):
        return None
    fixed = scaler.transform(rounded)
    out = adversarial.copy()
    out[int_idx] = fixed[int_idx]
    # immutable coordinates must stay bit-identical to the original
    out[~constraints.mutable] = original[~constraints.mutable]
    return out


def _attack_single_sample(model, x, label, config, constraints, sample_index):
    rng = np.random.default_rng([config.seed, sample_index])
    x = np.asarray(x, dtype=np.float64)

    lower_bound = 0.0
    upper_bound = np.inf
    const = config.initial_const
    best = None  # (candidate, l2, const, trace)
    total_queries = 0
    total_iterations = 0
    last_const = const
    error = None

    for _ in range(config.binary_search_steps):
        last_const = const
        try:
            res = attack_one(model, x, label, const, config, constraints, rng)
        except Exception as exc:  # per-sample faults stay in the result
            error = f"{type(exc).__name__}: {exc}"
            break
        total_queries += res.queries
        total_iterations += res.iterations
        if res.success:
            if best is None or res.candidate_l2 < best[1]:
                best = (res.candidate, res.candidate_l2, const, res.trace)
            upper_bound = min(upper_bound, const)
            const = (lower_bound + upper_bound) / 2.0
            if best[1] == 0.0:
                break  # unperturbed input already evades; nothing to refine
        else:
            lower_bound = max(lower_bound, const)
            if np.isfinite(upper_bound):
                const = (lower_bound + upper_bound) / 2.0
            else:
                const *= 10.0

    if best is None:
        return AttackResult(
            original=x.copy(), adversarial=x.copy(), success=False,
            queries_used=total_queries, l2_perturbation=0.0,
            best_const=last_const, iterations_run=total_iterations,
            loss_trace=None, error=error)

    adversarial, l2, best_const, trace = best
    success = True
    if constraints.integral.any() and constraints.scaler is not None:
        fixed = _project_integral(adversarial, x, constraints)
        if fixed is not None:
            probs = model.predict_proba(fixed)
            total_queries += 1
            if attack_goal_met(probs, label, config.targeted, config.confidence):
                adversarial = fixed
            else:
                # rounding broke the evasion; report an honest failure
                success = False
                adversarial = x.copy()
    l2 = float(np.linalg.norm(adversarial - x))
    return AttackResult(
        original=x.copy(), adversarial=adversarial, success=success,
        queries_used=total_queries, l2_perturbation=l2,
        best_const=best_const, iterations_run=total_iterations,
        loss_trace=trace, error=error)


def attack(model, batch, config, constraints, workers=1):
    """Attack a batch of (x, label) pairs; one AttackResult per input.

    Samples are processed in chunks of config.batch_size; within a chunk,
    samples may run on a thread pool.  Every sample draws its own RNG stream
    from (seed, sample index), so results are identical for any worker count.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("attack batch is empty")
    resize_schedule(config, len(np.asarray(batch[0][0])))

    def run(indexed):
        i, (x, label) = indexed
        return _attack_single_sample(model, x, int(label), config,
                                     constraints, i)

    results = []
    indexed = list(enumerate(batch))
    for start in range(0, len(indexed), config.batch_size):
        chunk = indexed[start:start + config.batch_size]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results.extend(pool.map(run, chunk))
        else:
            results.extend(map(run, chunk))
    return results
