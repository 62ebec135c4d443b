"""Independent checks: central finite differences and exact best-response search."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .policy import InputError, PolicyParams
from .toyworld import Task, ToyWorld


def finite_diff_grad(loss_fn: Callable, theta, step: float = 1e-5):
    """Central differences of ``loss_fn`` at ``theta``.

    ``theta`` is either a plain array or a :class:`PolicyParams`; for the latter
    only trainable tensors are perturbed and frozen ones get exact zeros.
    """
    if not step > 0:
        raise InputError("step must be > 0")

    def checked(value):
        value = float(value)
        if not math.isfinite(value):
            raise InputError(f"loss is not finite ({value})")
        return value

    if not isinstance(theta, PolicyParams):
        x = np.array(theta, dtype=np.float64)
        g = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            orig = x[i]
            x[i] = orig + step
            up = checked(loss_fn(x.copy()))
            x[i] = orig - step
            down = checked(loss_fn(x.copy()))
            x[i] = orig
            g[i] = (up - down) / (2 * step)
        return g

    checked(loss_fn(theta))
    grads = theta.zeros_like()
    for name in theta.trainable:
        base = np.array(theta[name])
        g = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            values = []
            for sign in (1.0, -1.0):
                pert = base.copy()
                pert[i] += sign * step
                values.append(checked(loss_fn(theta.replace({name: pert}))))
            g[i] = (values[0] - values[1]) / (2 * step)
        grads[name] = g
    return grads


def relative_error(a: dict | np.ndarray, b: dict | np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|, 1e-10)`` over all entries jointly."""
    if isinstance(a, dict):
        a = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
        b = np.concatenate([np.ravel(b[k]) for k in sorted(b)])
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-10))


def spot_check(loss_fn: Callable, params: PolicyParams, analytic: dict, rng: np.random.Generator,
               n_coords: int = 16, step: float = 1e-5) -> float:
    """Relative error of ``analytic`` against central differences on a random
    subset of trainable coordinates (cheap enough to run inside training)."""
    coords = [(name, i) for name in params.trainable for i in np.ndindex(params[name].shape)]
    if not coords:
        return 0.0
    picks = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    num, ana = [], []
    for k in picks:
        name, i = coords[k]
        values = []
        for sign in (1.0, -1.0):
            pert = np.array(params[name])
            pert[i] += sign * step
            v = float(loss_fn(params.replace({name: pert})))
            if not math.isfinite(v):
                raise InputError(f"loss is not finite ({v})")
            values.append(v)
        num.append((values[0] - values[1]) / (2 * step))
        ana.append(analytic[name][i])
    num, ana = np.array(num), np.array(ana)
    # absolute floor: coordinates whose true derivative is ~0 carry only round-off
    scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-6)
    return float(np.linalg.norm(num - ana) / scale)


# ---------------------------------------------------------------------------
# best-response search
# ---------------------------------------------------------------------------

DEFAULT_BUDGET = 2 ** 40

# tokens still needed to finish the delimiter template from each parser state
_FORMAT_NEED = {0: 6, 1: 5, 2: 4, 3: 3, 4: 2, 5: 1, 6: 0}


def _format_state(world: ToyWorld, tokens) -> int | None:
    """Parser state of ``think (x)* /think ans (x)+ /ans end``, or None once violated."""
    v = world.vocab
    state = 0
    for t in tokens:
        special = t in v.special_ids
        if state == 0:
            state = 1 if t == v.think_open else None
        elif state == 1:
            state = 2 if t == v.think_close else (None if special else 1)
        elif state == 2:
            state = 3 if t == v.answer_open else None
        elif state in (3, 4):
            if t == v.answer_close and state == 4:
                state = 5
            else:
                state = None if special else 4
        elif state == 5:
            state = 6 if t == v.end else None
        else:
            state = None
        if state is None:
            return None
    return state


def _rule_possible(world: ToyWorld, task: Task, tokens: tuple[int, ...], room: int) -> bool:
    v, gt = world.vocab, tuple(task.ground_truth_tokens)
    if v.answer_open not in tokens:
        return room >= len(gt) + 2
    start = tokens.index(v.answer_open)
    span = tokens[start + 1:]
    if v.answer_close in span:
        return span[:span.index(v.answer_close)] == gt
    return gt[:len(span)] == span and room >= len(gt) - len(span) + 1


def enumerate_best_response(world: ToyWorld, task: Task, max_len: int,
                            budget: int = DEFAULT_BUDGET) -> tuple[tuple[int, ...], float]:
    """Exact argmax of total reward over every response the sampler can emit.

    Candidates are sequences that end with the end token (which may appear only
    last) or reach ``max_len``. Ties go to the lexicographically smallest
    sequence. Branch-and-bound keeps the search small; the result equals plain
    enumeration of the ``V ** max_len`` space, which ``budget`` caps.
    """
    V = world.vocab.size
    if max_len < 0:
        raise InputError("max_len must be >= 0")
    if V ** max_len > budget:
        raise InputError(f"search space {V}^{max_len} exceeds budget {budget}")
    if max_len == 0:
        return (), world.reward(task, ()).total
    end = world.vocab.end
    bonus = world.config.format_bonus
    bag = world._bag_weights
    wmax = float(bag.max())
    zmax_tail = world._model_bias + world._closeness_weight

    def model_bound(prefix_sum: float, n: int, done: bool) -> float:
        lengths = [n] if done else range(max(n, 1), max_len + 1)
        best_bag = max((prefix_sum + (L - n) * wmax) / L for L in lengths)
        return 1.0 / (1.0 + math.exp(-(zmax_tail + best_bag)))

    best: list = [None, -math.inf]

    def consider(seq: tuple[int, ...]) -> None:
        total = world.reward(task, seq).total
        if total > best[1] or (total == best[1] and seq < best[0]):
            best[0], best[1] = seq, total

    ref = world.reference_response(task)
    if len(ref) <= max_len:
        consider(ref)
    nodes = 0

    def visit(prefix: tuple[int, ...], prefix_sum: float) -> None:
        nonlocal nodes
        nodes += 1
        if nodes > budget:
            raise InputError("enumeration budget exhausted")
        n = len(prefix)
        done = n == max_len or (n > 0 and prefix[-1] == end)
        room = 0 if done else max_len - n
        state = _format_state(world, prefix)
        bound = model_bound(prefix_sum, n, done)
        if _rule_possible(world, task, prefix, room):
            bound += 1.0
        if state is not None and _FORMAT_NEED[state] <= room:
            bound += bonus
        if bound < best[1]:
            return
        if done:
            consider(prefix)
            return
        for t in range(V):
            visit(prefix + (t,), prefix_sum + float(bag[t]))

    visit((), 0.0)
    return best[0], best[1]


def brute_force_best_response(world: ToyWorld, task: Task, max_len: int) -> tuple[tuple[int, ...], float]:
    """Unpruned enumeration; only usable for very small ``max_len``."""
    V, end = world.vocab.size, world.vocab.end
    best_seq, best_val = None, -math.inf
    stack: list[tuple[int, ...]] = [()]
    while stack:
        seq = stack.pop()
        if len(seq) == max_len or (seq and seq[-1] == end):
            total = world.reward(task, seq).total
            if total > best_val or (total == best_val and seq < best_seq):
                best_seq, best_val = seq, total
            continue
        stack.extend(seq + (t,) for t in range(V))
    return best_seq, best_val
