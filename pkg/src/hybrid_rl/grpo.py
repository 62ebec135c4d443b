"""Group-relative advantages and the clipped surrogate objective.

``grpo_objective`` returns the quantity to *maximise*; trainers negate the
gradient for descent.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import policy as P
from .config import ClipConfig
from .policy import InputError, PolicyParams, Response
from .toyworld import RewardBreakdown, Task, ToyWorld

STD_EPS = 1e-8


def group_advantages(totals: Sequence[float], eps: float = STD_EPS) -> np.ndarray:
    """(r - mean) / std with population std; all zeros when std <= eps."""
    r = np.asarray(totals, dtype=np.float64)
    std = r.std()
    if not std > eps:
        return np.zeros_like(r)
    return (r - r.mean()) / std


@dataclass
class RolloutGroup:
    task: Task
    responses: list[Response]
    rewards: list[RewardBreakdown]
    advantages: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = len(self.responses)
        if n < 2 or len(self.rewards) != n or len(self.advantages) != n:
            raise InputError("a group needs N >= 2 responses with matching rewards and advantages")

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.rewards])

    @property
    def group_stats(self) -> tuple[float, float]:
        t = self.totals
        return float(t.mean()), float(t.std())

    def samples(self) -> list["PolicySample"]:
        return [PolicySample(self.task, r, float(a)) for r, a in zip(self.responses, self.advantages)]


@dataclass(frozen=True)
class PolicySample:
    """One response with the advantage it is trained on (fresh or replayed)."""

    task: Task
    response: Response
    advantage: float


def make_group(world: ToyWorld, task: Task, responses: list[Response]) -> RolloutGroup:
    rewards = [world.reward(task, r.tokens) for r in responses]
    adv = group_advantages([r.total for r in rewards])
    return RolloutGroup(task, responses, rewards, adv)


def collect_groups(params_old: PolicyParams, world: ToyWorld, tasks: Sequence[Task], n: int,
                   temperature: float, max_len: int, rng: np.random.Generator) -> list[RolloutGroup]:
    """Roll out ``n`` responses per task against one frozen snapshot (batched)."""
    if n < 2:
        raise InputError("group size must be >= 2")
    flat = [t for t in tasks for _ in range(n)]
    responses = P.sample_batch(params_old, flat, temperature, max_len, rng, world.vocab.end)
    return [make_group(world, t, responses[i * n:(i + 1) * n]) for i, t in enumerate(tasks)]


def collect_group(params_old: PolicyParams, world: ToyWorld, task: Task, n: int, temperature: float,
                  max_len: int, rng: np.random.Generator) -> RolloutGroup:
    return collect_groups(params_old, world, [task], n, temperature, max_len, rng)[0]


def effective(group: RolloutGroup) -> bool:
    return bool(np.any(group.advantages != 0))


@dataclass
class GrpoDiagnostics:
    clip_fraction: float
    mean_ratio: float
    kl: float
    n_samples: int


def grpo_objective(params: PolicyParams, samples: Sequence[PolicySample], clip: ClipConfig,
                   kl_reference: PolicyParams | None = None, need_grad: bool = True
                   ) -> tuple[float, dict[str, np.ndarray] | None, GrpoDiagnostics]:
    """Clipped surrogate averaged per response over tokens, then over responses.

    With ``clip.kl_coeff > 0`` the per-token estimator
    ``exp(ref - lp) - (ref - lp) - 1`` against ``kl_reference`` is subtracted.
    """
    if not samples:
        return 0.0, params.zeros_like() if need_grad else None, GrpoDiagnostics(0.0, 1.0, 0.0, 0)
    for s in samples:
        if s.response.behavior_logprobs is None or len(s.response.behavior_logprobs) != len(s.response.tokens):
            raise InputError("sample is missing behaviour logprobs")
        if len(s.response.tokens) == 0:
            raise InputError("empty response")
    use_kl = clip.kl_coeff > 0
    if use_kl and kl_reference is None:
        raise InputError("kl_coeff > 0 needs a kl_reference snapshot")
    tasks = [s.task for s in samples]
    seqs = [list(s.response.tokens) for s in samples]
    G = len(samples)
    T = max(len(s) for s in seqs)
    old = np.zeros((G, T))
    ref = np.zeros((G, T))
    for i, s in enumerate(samples):
        old[i, :len(seqs[i])] = s.response.behavior_logprobs
    if use_kl:
        for i, lp in enumerate(P.token_logprobs(kl_reference, tasks, seqs)):
            ref[i, :len(lp)] = lp
    adv = np.array([s.advantage for s in samples])[:, None]
    lo, hi = 1.0 - clip.epsilon, 1.0 + clip.epsilon
    out: dict[str, float] = {}

    def weights(logp, mask):
        lengths = mask.sum(axis=1, keepdims=True)
        ratio = np.exp(np.where(mask, logp - old, 0.0))
        unclipped = ratio * adv
        clipped = np.clip(ratio, lo, hi) * adv
        surrogate = np.minimum(unclipped, clipped)
        # the clipped branch is constant in theta whenever it is the strict minimum
        active = unclipped <= clipped
        per_token = surrogate
        dobj = np.where(active, ratio * adv, 0.0)
        kl_val = 0.0
        if use_kl:
            d = np.where(mask, ref - logp, 0.0)
            kl_tok = np.exp(d) - d - 1.0
            per_token = per_token - clip.kl_coeff * kl_tok
            dobj = dobj - clip.kl_coeff * (1.0 - np.exp(d))
            kl_val = float(((kl_tok * mask).sum(axis=1) / lengths[:, 0]).mean())
        out["objective"] = float(((per_token * mask).sum(axis=1) / lengths[:, 0]).mean())
        out["clip_fraction"] = float(((~active) & mask).sum() / mask.sum())
        out["mean_ratio"] = float((ratio * mask).sum() / mask.sum())
        out["kl"] = kl_val
        return dobj * mask / lengths / G

    _, grad = P.weighted_logprob_grad(params, tasks, seqs, weights, need_grad=need_grad)
    diag = GrpoDiagnostics(out["clip_fraction"], out["mean_ratio"], out["kl"], G)
    return out["objective"], grad, diag


def grpo_loss(params: PolicyParams, group: RolloutGroup, clip: ClipConfig,
              kl_reference: PolicyParams | None = None, need_grad: bool = True):
    """Objective (to maximise), gradient and diagnostics for one rollout group."""
    return grpo_objective(params, group.samples(), clip, kl_reference, need_grad)
