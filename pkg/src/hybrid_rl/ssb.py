"""Selective Sample Buffer: cache of non-zero-advantage samples for replay."""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .config import BufferConfig
from .grpo import PolicySample, RolloutGroup, collect_groups, effective
from .policy import InputError, PolicyParams, Response
from .toyworld import Task, ToyWorld


@dataclass(frozen=True)
class BufferedSample:
    task: Task
    response: Response
    advantage: float
    insert_step: int
    uid: int

    def as_policy_sample(self) -> PolicySample:
        return PolicySample(self.task, self.response, self.advantage)


class SelectiveSampleBuffer:
    """Keeps samples with ``|advantage| > 0``.

    Over capacity, the entry with the smallest ``|advantage|`` goes first, ties
    broken by age (oldest first). Draws are weighted by
    ``|advantage| ** (1 / weight_temperature)`` without replacement; entries
    older than ``max_age`` steps are evicted when encountered by a draw.
    """

    def __init__(self, config: BufferConfig | None = None):
        self.config = config or BufferConfig()
        self._entries: dict[int, BufferedSample] = {}
        self._heap: list[tuple[float, int, int]] = []
        self._uids = itertools.count()

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(sorted(self._entries.values(), key=lambda e: e.uid))

    def _push(self, task: Task, response: Response, advantage: float, step: int) -> None:
        uid = next(self._uids)
        self._entries[uid] = BufferedSample(task, response, float(advantage), int(step), uid)
        heapq.heappush(self._heap, (abs(float(advantage)), int(step), uid))
        while len(self._entries) > self.config.capacity:
            self._evict_one()

    def _evict_one(self) -> BufferedSample:
        while True:
            _, _, uid = heapq.heappop(self._heap)
            if uid in self._entries:
                return self._entries.pop(uid)

    def add(self, task: Task, response: Response, advantage: float, step: int) -> bool:
        if advantage == 0 or not np.isfinite(advantage):
            return False
        if response.behavior_logprobs is None:
            raise InputError("replay needs behaviour logprobs")
        self._push(task, response, advantage, step)
        return True

    def insert(self, group: RolloutGroup, step: int) -> int:
        return sum(self.add(group.task, r, float(a), step) for r, a in zip(group.responses, group.advantages))

    def _expire(self, step: int) -> None:
        stale = [uid for uid, e in self._entries.items() if step - e.insert_step > self.config.max_age]
        for uid in stale:
            del self._entries[uid]
        if stale:
            self._heap = [h for h in self._heap if h[2] in self._entries]
            heapq.heapify(self._heap)

    def weights(self, entries: Sequence[BufferedSample]) -> np.ndarray:
        mags = np.array([abs(e.advantage) for e in entries])
        # log-space keeps large temperatures numerically tame
        logw = np.log(mags) / self.config.weight_temperature
        w = np.exp(logw - logw.max())
        return w / w.sum()

    def draw(self, k: int, step: int, rng: np.random.Generator) -> list[BufferedSample]:
        if k < 0:
            raise InputError("k must be >= 0")
        self._expire(step)
        if k == 0 or not self._entries:
            return []
        entries = sorted(self._entries.values(), key=lambda e: e.uid)
        k = min(k, len(entries))
        idx = rng.choice(len(entries), size=k, replace=False, p=self.weights(entries))
        return [entries[i] for i in idx]

    def snapshot(self) -> list[BufferedSample]:
        return list(self)


def effective_fraction(groups: Iterable[RolloutGroup]) -> float:
    groups = list(groups)
    if not groups:
        raise InputError("effective_fraction needs a non-empty window")
    return sum(effective(g) for g in groups) / len(groups)


@dataclass
class PoolFilterResult:
    retained: list[Task]
    total: int

    @property
    def retention(self) -> float:
        return len(self.retained) / self.total if self.total else 0.0


def filter_prompt_pool(params: PolicyParams, world: ToyWorld, tasks: Sequence[Task], n: int,
                       temperature: float, max_len: int, rng: np.random.Generator,
                       chunk: int = 256) -> PoolFilterResult:
    """Offline pass: keep only tasks whose rollout group has non-zero advantages."""
    if n < 2:
        raise InputError("n must be >= 2")
    kept: list[Task] = []
    for start in range(0, len(tasks), chunk):
        part = list(tasks[start:start + chunk])
        for task, group in zip(part, collect_groups(params, world, part, n, temperature, max_len, rng)):
            if effective(group):
                kept.append(task)
    return PoolFilterResult(kept, len(tasks))
