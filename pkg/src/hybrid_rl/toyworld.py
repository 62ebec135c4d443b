"""Synthetic verifiable tasks and the three reward channels.

Tasks are modular additions ``(a + b) mod m`` whose operands are only visible
through a seed-stable "visual" feature vector. Responses follow a
think/answer delimiter template::

    <think> ... </think> <ans> d [d] </ans> <end>
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .config import ConfigError, TaskConfig


@dataclass(frozen=True)
class Vocabulary:
    size: int = 32
    think_open: int = 10
    think_close: int = 11
    answer_open: int = 12
    answer_close: int = 13
    end: int = 14
    plus: int = 15
    image: int = 16

    def __post_init__(self):
        ids = self.special_ids + (self.plus, self.image)
        if len(set(ids)) != len(ids) or max(ids) >= self.size:
            raise ConfigError("task.vocab_size", "special token ids must be distinct and < vocabulary size")

    @property
    def special_ids(self) -> tuple[int, ...]:
        return (self.think_open, self.think_close, self.answer_open, self.answer_close, self.end)

    @property
    def filler_ids(self) -> tuple[int, ...]:
        return tuple(range(self.image + 1, self.size))

    def digits(self, value: int) -> tuple[int, ...]:
        return tuple(int(c) for c in str(value))

    def render(self, tokens: Sequence[int]) -> str:
        names = {
            self.think_open: "<think>", self.think_close: "</think>",
            self.answer_open: "<ans>", self.answer_close: "</ans>",
            self.end: "<end>", self.plus: "+", self.image: "<img>",
        }
        return "".join(names.get(t, str(t) if t < 10 else f"[w{t}]") for t in tokens)


@dataclass(frozen=True, eq=False)
class Task:
    seed: int
    difficulty: int
    operands: tuple[int, int]
    prompt_tokens: tuple[int, ...]
    visual_features: np.ndarray = field(repr=False)
    ground_truth_tokens: tuple[int, ...]

    @property
    def answer(self) -> int:
        return int("".join(map(str, self.ground_truth_tokens)))


@dataclass(frozen=True)
class RewardBreakdown:
    rule: float
    model: float
    format: float

    @property
    def total(self) -> float:
        return self.rule + self.model + self.format


class ToyWorld:
    """Task generator plus reward channels for one task-family configuration.

    Every method is a pure function of its arguments once constructed.
    """

    def __init__(self, config: TaskConfig | None = None):
        self.config = config or TaskConfig()
        self.config.validate()
        self.vocab = Vocabulary(size=self.config.vocab_size)
        m, dv = self.config.modulus, self.config.visual_dim
        rng = np.random.default_rng(self.config.embed_seed)
        # each operand is a clock-face angle 2*pi*a/m; the four (cos, sin)
        # coordinates are embedded through a fixed random projection
        proj = rng.standard_normal((4, dv))
        proj /= np.linalg.norm(proj, axis=1, keepdims=True)
        angles = 2 * np.pi * np.arange(m) / m
        circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        self._left = circle @ proj[:2]
        self._right = circle @ proj[2:]
        rrng = np.random.default_rng(self.config.reward_seed)
        self._bag_weights = rrng.normal(0.0, 0.5, size=self.config.vocab_size)
        self._closeness_weight = 3.0
        self._model_bias = -1.0

    # -- tasks -------------------------------------------------------------

    def operand_limit(self, difficulty: int) -> int:
        m, top = self.config.modulus, self.config.max_difficulty
        return max(2, int(np.ceil(m * difficulty / top)))

    def generate_task(self, rng_seed: int, difficulty: int | None = None) -> Task:
        difficulty = self.config.max_difficulty if difficulty is None else difficulty
        if not 1 <= difficulty <= self.config.max_difficulty:
            raise ConfigError("difficulty", f"{difficulty} outside [1, {self.config.max_difficulty}]")
        rng = np.random.default_rng([rng_seed, difficulty])
        hi = min(self.operand_limit(difficulty), self.config.modulus)
        a, b = (int(v) for v in rng.integers(0, hi, size=2))
        return self.make_task(a, b, seed=rng_seed, difficulty=difficulty, rng=rng)

    def make_task(self, a: int, b: int, *, seed: int = -1, difficulty: int = 0,
                  rng: np.random.Generator | None = None) -> Task:
        m = self.config.modulus
        if not (0 <= a < m and 0 <= b < m):
            raise ConfigError("operands", f"operands must lie in [0, {m})")
        visual = self._left[a] + self._right[b]
        if rng is not None and self.config.visual_noise > 0:
            visual = visual + self.config.visual_noise * rng.standard_normal(visual.shape)
        visual.setflags(write=False)
        v = self.vocab
        return Task(
            seed=seed,
            difficulty=difficulty,
            operands=(a, b),
            prompt_tokens=(v.image, v.plus, v.image),
            visual_features=visual,
            ground_truth_tokens=v.digits((a + b) % m),
        )

    def make_text_task(self, a: int, b: int) -> Task:
        """Same problem posed through prompt tokens only (no visual signal)."""
        m = self.config.modulus
        v = self.vocab
        prompt = v.digits(a) + (v.plus,) + v.digits(b)
        visual = np.zeros(self.config.visual_dim)
        visual.setflags(write=False)
        return Task(seed=-1, difficulty=0, operands=(a, b), prompt_tokens=prompt,
                    visual_features=visual, ground_truth_tokens=v.digits((a + b) % m))

    def reference_response(self, task: Task) -> tuple[int, ...]:
        """Ground truth wrapped in a well-formed template."""
        v = self.vocab
        return (v.think_open, v.think_close, v.answer_open, *task.ground_truth_tokens, v.answer_close, v.end)

    # -- parsing -------------------------------------------------------------

    def answer_span(self, response: Sequence[int]) -> tuple[int, ...] | None:
        v = self.vocab
        try:
            start = list(response).index(v.answer_open)
            stop = list(response).index(v.answer_close, start + 1)
        except ValueError:
            return None
        return tuple(response[start + 1:stop])

    def is_well_formed(self, response: Sequence[int]) -> bool:
        v = self.vocab
        r = list(response)
        specials = [(i, t) for i, t in enumerate(r) if t in v.special_ids]
        pattern = [v.think_open, v.think_close, v.answer_open, v.answer_close, v.end]
        if [t for _, t in specials] != pattern:
            return False
        pos = [i for i, _ in specials]
        # think may be empty, answer must not be, <end> terminates
        return pos[0] == 0 and pos[2] == pos[1] + 1 and pos[3] > pos[2] + 1 \
            and pos[4] == pos[3] + 1 and pos[4] == len(r) - 1

    # -- rewards -------------------------------------------------------------

    def rule_reward(self, task: Task, response: Sequence[int]) -> float:
        span = self.answer_span(response)
        return 1.0 if span is not None and span == tuple(task.ground_truth_tokens) else 0.0

    def format_reward(self, response: Sequence[int]) -> float:
        return self.config.format_bonus if self.is_well_formed(response) else 0.0

    def _closeness(self, task: Task, response: Sequence[int]) -> float:
        span = self.answer_span(response)
        if not span or len(span) > 2 or any(t > 9 for t in span):
            return 0.0
        m = self.config.modulus
        guess = int("".join(map(str, span)))
        if guess >= m:
            return 0.0
        dist = min((guess - task.answer) % m, (task.answer - guess) % m)
        return 1.0 - dist / (m / 2)

    def model_reward(self, task: Task, response: Sequence[int]) -> float:
        """Fixed synthetic scorer standing in for a learned reward model."""
        counts = np.bincount(np.asarray(response, dtype=np.int64), minlength=self.config.vocab_size)
        bag = counts / max(len(response), 1)
        z = self._model_bias + float(bag @ self._bag_weights) + self._closeness_weight * self._closeness(task, response)
        return float(1.0 / (1.0 + np.exp(-z)))

    def reward(self, task: Task, response: Sequence[int]) -> RewardBreakdown:
        response = tuple(int(t) for t in response)
        return RewardBreakdown(
            rule=self.rule_reward(task, response),
            model=self.model_reward(task, response),
            format=self.format_reward(response),
        )


@lru_cache(maxsize=8)
def _cached_world(config_items: tuple) -> ToyWorld:
    return ToyWorld(TaskConfig(**dict(config_items)))


def world_for(config: TaskConfig) -> ToyWorld:
    """Shared ToyWorld per task configuration (construction is deterministic)."""
    return _cached_world(tuple(sorted(vars(config).items())))
