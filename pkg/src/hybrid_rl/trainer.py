"""Staged training: optional SFT, MPO rounds, GRPO with the Selective Sample Buffer.

Every stage is a plain function ``(params, ..., config) -> params`` driven by
a :class:`Trainer` that owns the random stream, the metric log and the step
counter. Metrics that must be reproducible go to ``records``; wall-clock time
is kept apart in ``timings`` so metric files stay byte-identical across runs.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import policy as P
from .config import FREEZE_CONFIGURATIONS, BufferConfig, ConfigError, OptimConfig, TrainConfig, from_dict
from .grpo import PolicySample, RolloutGroup, collect_groups, effective, grpo_objective
from .mpo import DeltaTracker, build_preference_pairs, mpo_batch_loss
from .optim import Optimizer, scale_grad
from .oracle import spot_check
from .policy import PolicyParams
from .ssb import SelectiveSampleBuffer, effective_fraction, filter_prompt_pool
from .toyworld import Task, ToyWorld, world_for

log = logging.getLogger(__name__)

BASE_TASK_OFFSET = 2_000_000
STAGE_STREAMS = {"sft": 1, "mpo": 2, "grpo": 3}

METRIC_COLUMNS = (
    "step", "stage", "mean_total", "mean_rule", "mean_model", "mean_format",
    "effective_fraction", "batch_effective_fraction", "clip_fraction", "buffer_size",
    "eval_accuracy", "hallucination_rate", "loss", "retention",
)


class GradientCheckError(RuntimeError):
    pass


@dataclass
class MetricRecord:
    step: int
    stage: str
    mean_total: float | None = None
    mean_rule: float | None = None
    mean_model: float | None = None
    mean_format: float | None = None
    effective_fraction: float | None = None
    batch_effective_fraction: float | None = None
    clip_fraction: float | None = None
    buffer_size: int | None = None
    eval_accuracy: float | None = None
    hallucination_rate: float | None = None
    loss: float | None = None
    retention: float | None = None
    wall_clock: float = field(default=0.0, compare=False)

    def row(self) -> list[str]:
        out = []
        for name in METRIC_COLUMNS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


@dataclass
class Evaluation:
    accuracy: float
    hallucination_rate: float
    mean_total: float


def evaluate(params: PolicyParams, world: ToyWorld, tasks: Sequence[Task], max_len: int) -> Evaluation:
    """Greedy decoding; accuracy is exact-match rule reward, hallucination is
    "format earned but answer wrong"."""
    responses = P.sample_batch(params, tasks, 0.0, max_len, np.random.default_rng(0), world.vocab.end)
    rewards = [world.reward(t, r.tokens) for t, r in zip(tasks, responses)]
    rule = np.array([r.rule for r in rewards])
    fmt = np.array([r.format > 0 for r in rewards])
    return Evaluation(float(rule.mean()), float(np.mean(fmt & (rule == 0))), float(np.mean([r.total for r in rewards])))


def train_tasks(config: TrainConfig, world: ToyWorld) -> list[Task]:
    return [world.generate_task(i) for i in range(config.train_pool)]


def eval_tasks(config: TrainConfig, world: ToyWorld) -> list[Task]:
    return [world.generate_task(config.eval_seed_offset + i) for i in range(config.eval_tasks)]


def compose_batch(groups: Sequence[RolloutGroup], buffer: SelectiveSampleBuffer | None, bcfg: BufferConfig,
                  B: int, step: int, rng: np.random.Generator) -> list[PolicySample]:
    """Update batch for one GRPO iteration.

    Without a buffer this is every fresh sample. With one, zero-advantage fresh
    samples (which carry no gradient) are dropped and replays make up
    ``replay_fraction`` of the batch; if no fresh group is effective the batch
    is ``replay_fraction * B`` replays alone. Replays are drawn before this
    step's groups are inserted, so they always come from earlier steps.
    """
    if buffer is None:
        return [s for g in groups for s in g.samples()]
    fresh = [s for g in groups if effective(g) for s in g.samples()]
    rf = bcfg.replay_fraction
    n_replay = math.ceil(rf / (1.0 - rf) * len(fresh)) if fresh else math.ceil(rf * B)
    replays = [e.as_policy_sample() for e in buffer.draw(n_replay, step, rng)]
    for g in groups:
        buffer.insert(g, step)
    return fresh + replays


def _nll_weights(B: int):
    def weight_fn(logp, mask):
        m = mask.astype(np.float64)
        return -m / m.sum(axis=1, keepdims=True) / B
    return weight_fn


@lru_cache(maxsize=4)
def _pretrained(key: str) -> PolicyParams:
    cfg = from_dict(json.loads(key))
    world = world_for(cfg.task)
    base = cfg.base
    params = P.init_params(cfg.policy, cfg.task.vocab_size, cfg.task.visual_dim, "head_plus_adapter", seed=base.seed)
    opt = Optimizer(OptimConfig(lr=base.lr))
    rng = np.random.default_rng([base.seed, 7])
    pool = [world.generate_task(BASE_TASK_OFFSET + i) for i in range(4096)]
    refs = [list(world.reference_response(t)) for t in pool]
    dc = params["ad_b"].size
    for _ in range(base.steps):
        idx = rng.integers(0, len(pool), base.batch_size)
        offset = base.context_noise * rng.standard_normal((base.batch_size, dc))
        _, grad = P.weighted_logprob_grad(params, [pool[i] for i in idx], [refs[i] for i in idx],
                                          _nll_weights(base.batch_size), ctx_offset=offset)
        params = opt.step(params, grad)
    return params.replace(step=0)


def pretrain_base(config: TrainConfig) -> PolicyParams:
    """Language head warmed up through a throwaway adapter (cached per config).

    The head learns to answer from a noisy context, so later stages start from
    a competent head that has to be re-connected to a fresh adapter.
    """
    key = json.dumps({"task": dataclasses.asdict(config.task), "policy": dataclasses.asdict(config.policy),
                      "base": dataclasses.asdict(config.base)}, sort_keys=True)
    return _pretrained(key)


def initial_params(config: TrainConfig) -> PolicyParams:
    """Warm head plus an adapter freshly drawn from the run seed."""
    base = pretrain_base(config)
    if config.base.steps == 0:
        base = P.init_params(config.policy, config.task.vocab_size, config.task.visual_dim,
                             "head_plus_adapter", seed=config.base.seed)
    return P.reinit_adapter(base, seed=config.seed, scale=config.policy.init_scale)


def sft_dataset(config: TrainConfig, world: ToyWorld, tasks: Sequence[Task]) -> list[tuple[Task, tuple[int, ...]]]:
    rng = np.random.default_rng([config.seed, 11])
    idx = rng.choice(len(tasks), size=min(config.sft.dataset_size, len(tasks)), replace=False)
    return [(tasks[i], world.reference_response(tasks[i])) for i in sorted(idx)]


@dataclass
class StageResult:
    params: PolicyParams
    history: list[dict] = field(default_factory=list)


class Trainer:
    """Owns the step counter, random streams and metric log of one run."""

    def __init__(self, config: TrainConfig, on_record: Callable[[MetricRecord], None] | None = None):
        config.validate()
        self.config = config
        self.world = world_for(config.task)
        self.eval_set = eval_tasks(config, self.world)
        self.train_set = train_tasks(config, self.world)
        self.records: list[MetricRecord] = []
        self.history: dict[str, list[dict]] = {"sft": [], "mpo": [], "grpo": []}
        self.step = 0
        self.on_record = on_record
        self._t0 = time.perf_counter()
        self.buffer: SelectiveSampleBuffer | None = None

    def rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, STAGE_STREAMS[stage]])

    def record(self, params: PolicyParams, stage: str, **values) -> MetricRecord:
        ev = evaluate(params, self.world, self.eval_set, self.config.policy.max_len)
        rec = MetricRecord(step=self.step, stage=stage, eval_accuracy=ev.accuracy,
                           hallucination_rate=ev.hallucination_rate,
                           wall_clock=time.perf_counter() - self._t0, **values)
        self.records.append(rec)
        if self.on_record:
            self.on_record(rec)
        return rec

    # -- stages ----------------------------------------------------------------

    def run_sft(self, params: PolicyParams, dataset: Sequence[tuple[Task, Sequence[int]]]) -> PolicyParams:
        cfg = self.config.sft
        if not dataset:
            raise ConfigError("sft.dataset_size", "SFT needs a non-empty dataset")
        params = P.set_freeze(params, cfg.freeze)
        opt = Optimizer(cfg.optim)
        rng = self.rng("sft")
        self.record(params, "sft")
        losses = []
        for i in range(cfg.steps):
            idx = rng.integers(0, len(dataset), min(cfg.batch_size, len(dataset)))
            tasks = [dataset[j][0] for j in idx]
            seqs = [list(dataset[j][1]) for j in idx]
            lps, grad = P.weighted_logprob_grad(params, tasks, seqs, _nll_weights(len(idx)))
            loss = float(np.mean([-lp.sum() / len(lp) for lp in lps]))
            losses.append(loss)
            self.history["sft"].append({"step": self.step, "loss": loss})
            params = self._step(params, opt, grad, "sft", lambda q: self._sft_loss(q, tasks, seqs))
            if (i + 1) % self.config.log_every == 0 or i + 1 == cfg.steps:
                self.record(params, "sft", loss=float(np.mean(losses)))
                losses = []
        return params

    @staticmethod
    def _sft_loss(params, tasks, seqs):
        lps = P.token_logprobs(params, tasks, seqs)
        return float(np.mean([-lp.sum() / len(lp) for lp in lps]))

    def run_mpo_stage(self, params: PolicyParams, tasks: Sequence[Task]) -> PolicyParams:
        cfg = self.config.mpo
        params = P.set_freeze(params, cfg.freeze)
        opt = Optimizer(cfg.optim)
        rng = self.rng("mpo")
        delta = DeltaTracker(decay=cfg.delta_decay)
        self.record(params, "mpo")
        for rnd in range(cfg.rounds):
            reference = params  # snapshot; never mutated
            batch_tasks = [tasks[i] for i in rng.integers(0, len(tasks), cfg.tasks_per_round)]
            pairs = build_preference_pairs(reference, self.world, batch_tasks, cfg.n_samples, cfg.threshold, rng,
                                           cfg.temperature, self.config.policy.max_len)
            chosen_rewards = [self.world.reward(p.task, p.chosen.tokens) for p in pairs]
            self.history["mpo"].append({"round": rnd, "step": self.step, "pairs": len(pairs)})
            if not pairs:
                log.warning("mpo round %d: no preference pair reached margin %.3f; round skipped", rnd, cfg.threshold)
                continue
            losses = []
            for _ in range(cfg.steps_per_round):
                idx = rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False)
                batch = [pairs[i] for i in idx]
                loss, grad, stats = mpo_batch_loss(params, batch, cfg.weights, delta)
                losses.append(loss)
                params = self._step(params, opt, grad, "mpo",
                                    lambda q: mpo_batch_loss(q, batch, cfg.weights, delta, need_grad=False)[0])
                delta.update(stats.implicit_mean)
            self.record(params, "mpo", loss=float(np.mean(losses)),
                        mean_total=float(np.mean([r.total for r in chosen_rewards])),
                        mean_rule=float(np.mean([r.rule for r in chosen_rewards])),
                        mean_model=float(np.mean([r.model for r in chosen_rewards])),
                        mean_format=float(np.mean([r.format for r in chosen_rewards])))
        return params

    def run_grpo_stage(self, params: PolicyParams, tasks: Sequence[Task],
                       buffer: SelectiveSampleBuffer | None = None) -> PolicyParams:
        cfg = self.config.grpo
        bcfg = cfg.buffer
        params = P.set_freeze(params, cfg.freeze)
        opt = Optimizer(cfg.optim)
        rng = self.rng("grpo")
        max_len = self.config.policy.max_len
        kl_reference = params
        use_buffer = bcfg.enabled
        if use_buffer and buffer is None:
            buffer = SelectiveSampleBuffer(bcfg)
        self.buffer = buffer if use_buffer else None
        retention = None
        pool = list(tasks)
        if bcfg.filter_pool:
            result = filter_prompt_pool(params, self.world, pool, cfg.group_size, cfg.temperature, max_len, rng)
            retention = result.retention
            if result.retained:
                pool = result.retained
        self.record(params, "grpo", retention=retention, buffer_size=len(buffer) if use_buffer else 0)
        window: list[RolloutGroup] = []
        acc: dict[str, list[float]] = {k: [] for k in ("total", "rule", "model", "format", "batch_eff", "clip", "loss")}
        B = cfg.groups_per_step * cfg.group_size
        for it in range(cfg.iterations):
            old = params
            batch_tasks = [pool[i] for i in rng.integers(0, len(pool), cfg.groups_per_step)]
            groups = collect_groups(old, self.world, batch_tasks, cfg.group_size, cfg.temperature, max_len, rng)
            window.extend(groups)
            rewards = [r for g in groups for r in g.rewards]
            for key in ("rule", "model", "format"):
                acc[key].append(float(np.mean([getattr(r, key) for r in rewards])))
            acc["total"].append(float(np.mean([r.total for r in rewards])))
            fresh_eff = effective_fraction(groups)
            batch = compose_batch(groups, buffer if use_buffer else None, bcfg, B, self.step, rng)
            # undefined (None) when the batch is empty and the update is skipped
            batch_eff = float(np.mean([s.advantage != 0 for s in batch])) if batch else None
            self.history["grpo"].append({
                "iteration": it, "step": self.step, "fresh_effective": fresh_eff, "batch_effective": batch_eff,
                "batch_size": len(batch), "buffer_size": len(buffer) if use_buffer else 0,
                "mean_rule": acc["rule"][-1],
            })
            if batch_eff is not None:
                acc["batch_eff"].append(batch_eff)
            if not any(s.advantage != 0 for s in batch):
                log.info("grpo iteration %d: no effective samples; update skipped", it)
            else:
                kl_ref = kl_reference if cfg.clip.kl_coeff > 0 else None
                for _ in range(cfg.inner_epochs):
                    obj, grad, diag = grpo_objective(params, batch, cfg.clip, kl_ref)
                    acc["clip"].append(diag.clip_fraction)
                    acc["loss"].append(-obj)
                    params = self._step(params, opt, scale_grad(grad, -1.0), "grpo",
                                        lambda q: -grpo_objective(q, batch, cfg.clip, kl_ref, need_grad=False)[0])
            if (it + 1) % self.config.log_every == 0 or it + 1 == cfg.iterations:
                self.record(
                    params, "grpo",
                    mean_total=float(np.mean(acc["total"])), mean_rule=float(np.mean(acc["rule"])),
                    mean_model=float(np.mean(acc["model"])), mean_format=float(np.mean(acc["format"])),
                    effective_fraction=effective_fraction(window),
                    batch_effective_fraction=float(np.mean(acc["batch_eff"])) if acc["batch_eff"] else None,
                    clip_fraction=float(np.mean(acc["clip"])) if acc["clip"] else 0.0,
                    buffer_size=len(buffer) if use_buffer else 0,
                    loss=float(np.mean(acc["loss"])) if acc["loss"] else None,
                    retention=retention,
                )
                window = []
                acc = {k: [] for k in acc}
        return params

    def _step(self, params: PolicyParams, opt: Optimizer, grad, stage: str, loss_fn) -> PolicyParams:
        """One descent step on ``grad`` (gradient of the minimised loss)."""
        K = self.config.grad_check_every
        if K and self.step % K == 0:
            err = spot_check(loss_fn, params, grad, np.random.default_rng([self.config.seed, 13, self.step]))
            if err > 1e-4:
                raise GradientCheckError(f"{stage} step {self.step}: finite-difference mismatch, rel. err {err:.2e}")
        self.step += 1
        return opt.step(params, grad)

    # -- pipeline --------------------------------------------------------------

    def run(self, params: PolicyParams | None = None,
            on_stage_end: Callable[[str, PolicyParams], None] | None = None) -> PolicyParams:
        params = initial_params(self.config) if params is None else params
        for stage in self.config.stages:
            if stage == "sft":
                params = self.run_sft(params, sft_dataset(self.config, self.world, self.train_set))
            elif stage == "mpo":
                params = self.run_mpo_stage(params, self.train_set)
            else:
                params = self.run_grpo_stage(params, self.train_set)
            if on_stage_end:
                on_stage_end(stage, params)
        return params

    def final(self) -> MetricRecord:
        return self.records[-1]


def run_config(config: TrainConfig) -> tuple[PolicyParams, Trainer]:
    trainer = Trainer(config)
    params = trainer.run()
    return params, trainer


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationCell:
    name: str
    seed: int
    config: TrainConfig
    records: list[MetricRecord] = field(default_factory=list)
    history: dict = field(default_factory=dict)
    params: PolicyParams | None = None
    error: str | None = None

    @property
    def final(self) -> MetricRecord | None:
        return self.records[-1] if self.records else None


def run_ablation(matrix: Sequence[tuple[str, TrainConfig]], seeds: Sequence[int]) -> list[AblationCell]:
    """Run every (config, seed) cell; a failing cell is reported, not raised."""
    if not matrix:
        raise ConfigError("matrix", "ablation matrix is empty")
    cells = []
    for name, base_cfg in matrix:
        for seed in seeds:
            cfg = copy.deepcopy(base_cfg)
            cfg.seed = seed
            cell = AblationCell(name, seed, cfg)
            try:
                trainer = Trainer(cfg)
                cell.params = trainer.run()
                cell.records, cell.history = trainer.records, trainer.history
            except Exception as exc:  # noqa: BLE001 - isolation is the point
                log.error("ablation cell %s seed %d failed: %s", name, seed, exc)
                cell.error = f"{type(exc).__name__}: {exc}"
            cells.append(cell)
    return cells


def with_changes(config: TrainConfig, **dotted) -> TrainConfig:
    """Deep copy with dotted-path assignments, e.g. ``grpo__buffer__enabled=False``."""
    cfg = copy.deepcopy(config)
    for key, value in dotted.items():
        *path, leaf = key.split("__")
        node = cfg
        for part in path:
            node = getattr(node, part)
        if not hasattr(node, leaf):
            raise ConfigError(".".join(path + [leaf]), "unknown key")
        setattr(node, leaf, value)
    cfg.validate()
    return cfg


def ssb_matrix(config: TrainConfig) -> list[tuple[str, TrainConfig]]:
    return [("ssb_on", with_changes(config, grpo__buffer__enabled=True)),
            ("ssb_off", with_changes(config, grpo__buffer__enabled=False))]


def pipeline_matrix(config: TrainConfig) -> list[tuple[str, TrainConfig]]:
    return [("sft", with_changes(config, stages=["sft"])),
            ("mpo", with_changes(config, stages=["mpo"])),
            ("mpo+grpo", with_changes(config, stages=["mpo", "grpo"]))]


def freeze_matrix(config: TrainConfig, stage: str = "grpo") -> list[tuple[str, TrainConfig]]:
    return [(name, with_changes(config, **{f"{stage}__freeze": name})) for name in FREEZE_CONFIGURATIONS]


def threshold_matrix(config: TrainConfig, thresholds: Sequence[float] = (0.1, 0.5, 1.0)) -> list[tuple[str, TrainConfig]]:
    return [(f"threshold={t:g}", with_changes(config, mpo__threshold=float(t))) for t in thresholds]
