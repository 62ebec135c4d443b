"""Mixed preference optimisation: pair construction plus DPO, BCO and NLL losses.

All losses here are minimised. The reference policy is the snapshot that
sampled the pair, so its sequence logprobs are exactly the behaviour logprobs
stored on each response; no second network is needed at loss time.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import policy as P
from .config import MpoWeights
from .policy import InputError, PolicyParams, Response
from .toyworld import Task, ToyWorld


@dataclass(frozen=True)
class PreferenceExample:
    task: Task
    chosen: Response
    rejected: Response
    margin: float

    def __post_init__(self):
        if self.chosen.tokens == self.rejected.tokens:
            raise InputError("chosen and rejected responses are identical")

    @property
    def ref_chosen(self) -> float:
        return self.chosen.total_logprob

    @property
    def ref_rejected(self) -> float:
        return self.rejected.total_logprob


@dataclass
class DeltaTracker:
    """Exponential moving average of implicit rewards (the BCO baseline)."""

    value: float = 0.0
    decay: float = 0.99
    count: int = 0

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise InputError("decay must lie in (0, 1)")

    def update(self, observed: float) -> float:
        self.value = self.decay * self.value + (1.0 - self.decay) * float(observed)
        self.count += 1
        return self.value


def preference_score(world: ToyWorld, task: Task, tokens: Sequence[int]) -> float:
    """What pairs are ranked by: reward-model score plus rule correctness."""
    return world.model_reward(task, tokens) + world.rule_reward(task, tokens)


def pair_from_responses(world: ToyWorld, task: Task, responses: Sequence[Response],
                        threshold: float) -> PreferenceExample | None:
    scores = np.array([preference_score(world, task, r.tokens) for r in responses])
    best, worst = int(np.argmax(scores)), int(np.argmin(scores))
    margin = float(scores[best] - scores[worst])
    if margin < threshold or responses[best].tokens == responses[worst].tokens:
        return None
    return PreferenceExample(task, responses[best], responses[worst], margin)


def build_preference_pairs(reference: PolicyParams, world: ToyWorld, tasks: Sequence[Task], n_samples: int,
                           threshold: float, rng: np.random.Generator, temperature: float = 1.0,
                           max_len: int = 8) -> list[PreferenceExample]:
    """Best-vs-worst pair per task, kept only when the score margin reaches ``threshold``."""
    if n_samples < 2:
        raise InputError("n_samples must be >= 2")
    if threshold < 0:
        raise InputError("threshold must be >= 0")
    flat = [t for t in tasks for _ in range(n_samples)]
    responses = P.sample_batch(reference, flat, temperature, max_len, rng, world.vocab.end)
    pairs = []
    for i, task in enumerate(tasks):
        pair = pair_from_responses(world, task, responses[i * n_samples:(i + 1) * n_samples], threshold)
        if pair is not None:
            pairs.append(pair)
    return pairs


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


@dataclass
class MpoStats:
    loss: float
    dpo: float
    bco: float
    nll: float
    implicit_chosen: float
    implicit_rejected: float

    @property
    def implicit_mean(self) -> float:
        return 0.5 * (self.implicit_chosen + self.implicit_rejected)


def mpo_batch_loss(params: PolicyParams, examples: Sequence[PreferenceExample], weights: MpoWeights,
                   delta: float | DeltaTracker = 0.0, need_grad: bool = True
                   ) -> tuple[float, dict[str, np.ndarray] | None, MpoStats]:
    """Batch-mean ``w_pref*dpo + w_qual*bco + w_gen*nll`` and its gradient.

    ``delta`` is read once and treated as a constant; updating the tracker is
    the caller's job (once per batch, with ``stats.implicit_mean``).
    """
    if not examples:
        raise InputError("empty preference batch")
    d = delta.value if isinstance(delta, DeltaTracker) else float(delta)
    beta = weights.beta
    n = len(examples)
    tasks = [e.task for e in examples for _ in range(2)]
    seqs = [list(r.tokens) for e in examples for r in (e.chosen, e.rejected)]
    if any(len(s) == 0 for s in seqs[0::2]):
        raise InputError("chosen response is empty")
    ref_c = np.array([e.ref_chosen for e in examples])
    ref_r = np.array([e.ref_rejected for e in examples])
    out: dict[str, float] = {}

    def weight_fn(logp, mask):
        total = logp.sum(axis=1)
        lengths = mask.sum(axis=1)
        rc = beta * (total[0::2] - ref_c)
        rr = beta * (total[1::2] - ref_r)
        z = rc - rr
        a, b = rc - d, rr - d
        dpo = _softplus(-z)
        bco = _softplus(-a) + _softplus(b)
        nll = -total[0::2] / lengths[0::2]
        out.update(dpo=float(dpo.mean()), bco=float(bco.mean()), nll=float(nll.mean()),
                   rc=float(rc.mean()), rr=float(rr.mean()))
        out["loss"] = weights.w_pref * out["dpo"] + weights.w_qual * out["bco"] + weights.w_gen * out["nll"]
        # d loss / d (sequence logprob), per chosen / rejected
        coef_c = weights.w_pref * (-beta * _sigmoid(-z)) + weights.w_qual * (-beta * _sigmoid(-a))
        coef_r = weights.w_pref * (beta * _sigmoid(-z)) + weights.w_qual * (beta * _sigmoid(b))
        coef = np.empty(2 * n)
        coef[0::2], coef[1::2] = coef_c, coef_r
        W = coef[:, None] * mask
        W[0::2] += weights.w_gen * (-1.0 / lengths[0::2])[:, None] * mask[0::2]
        return W / n

    _, grad = P.weighted_logprob_grad(params, tasks, seqs, weight_fn, need_grad=need_grad)
    stats = MpoStats(out["loss"], out["dpo"], out["bco"], out["nll"], out["rc"], out["rr"])
    return out["loss"], grad, stats


def mpo_loss(params: PolicyParams, example: PreferenceExample, weights: MpoWeights,
             delta: float | DeltaTracker = 0.0, need_grad: bool = True):
    loss, grad, _ = mpo_batch_loss(params, [example], weights, delta, need_grad)
    return loss, grad


def dpo_loss(params: PolicyParams, example: PreferenceExample, beta: float = 0.1, need_grad: bool = True):
    """``-log sigmoid(beta * (chosen log-ratio - rejected log-ratio))``."""
    return mpo_loss(params, example, MpoWeights(1.0, 0.0, 0.0, beta), 0.0, need_grad)


def bco_loss(params: PolicyParams, example: PreferenceExample, beta: float = 0.1,
             delta: float | DeltaTracker = 0.0, need_grad: bool = True):
    """Chosen classified towards 1 and rejected towards 0 around the baseline ``delta``."""
    return mpo_loss(params, example, MpoWeights(0.0, 1.0, 0.0, beta), delta, need_grad)


def nll_loss(params: PolicyParams, example: PreferenceExample, need_grad: bool = True):
    """Length-normalised negative log-likelihood of the chosen response."""
    return mpo_loss(params, example, MpoWeights(0.0, 0.0, 1.0, 1.0), 0.0, need_grad)
