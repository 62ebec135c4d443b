"""Line-delimited JSON records for preference pairs, rollout groups and buffer dumps.

Tasks are stored by seed and operands and rebuilt through the task generator;
floats go through ``json`` which round-trips IEEE doubles exactly.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .grpo import RolloutGroup
from .mpo import PreferenceExample
from .policy import InputError, Response
from .ssb import BufferedSample
from .toyworld import RewardBreakdown, Task, ToyWorld


def task_record(task: Task) -> dict:
    return {"seed": task.seed, "difficulty": task.difficulty, "operands": list(task.operands),
            "prompt": list(task.prompt_tokens)}


def task_from_record(world: ToyWorld, rec: dict) -> Task:
    a, b = rec["operands"]
    v = world.vocab
    if tuple(rec["prompt"]) != (v.image, v.plus, v.image):
        return world.make_text_task(a, b)
    if rec["seed"] >= 0:
        task = world.generate_task(rec["seed"], rec["difficulty"])
        if list(task.operands) != [a, b]:
            raise InputError(f"task seed {rec['seed']} does not regenerate operands {a}, {b}")
        return task
    return world.make_task(a, b, seed=rec["seed"], difficulty=rec["difficulty"])


def _response(r: Response) -> dict:
    return {"tokens": list(r.tokens), "logprobs": [float(x) for x in r.behavior_logprobs]}


def _response_from(rec: dict) -> Response:
    return Response(tuple(rec["tokens"]), np.array(rec["logprobs"], dtype=np.float64))


def preference_to_record(ex: PreferenceExample) -> dict:
    return {"kind": "preference", "task": task_record(ex.task), "chosen": _response(ex.chosen),
            "rejected": _response(ex.rejected), "margin": ex.margin}


def group_to_record(group: RolloutGroup) -> dict:
    return {"kind": "rollout", "task": task_record(group.task),
            "responses": [_response(r) for r in group.responses],
            "rewards": [[r.rule, r.model, r.format] for r in group.rewards],
            "advantages": [float(a) for a in group.advantages]}


def buffered_to_record(entry: BufferedSample) -> dict:
    return {"kind": "buffer", "task": task_record(entry.task), "response": _response(entry.response),
            "advantage": entry.advantage, "insert_step": entry.insert_step, "uid": entry.uid}


def from_record(world: ToyWorld, rec: dict):
    task = task_from_record(world, rec["task"])
    kind = rec.get("kind")
    if kind == "preference":
        return PreferenceExample(task, _response_from(rec["chosen"]), _response_from(rec["rejected"]), rec["margin"])
    if kind == "rollout":
        return RolloutGroup(task, [_response_from(r) for r in rec["responses"]],
                            [RewardBreakdown(*r) for r in rec["rewards"]], np.array(rec["advantages"]))
    if kind == "buffer":
        return BufferedSample(task, _response_from(rec["response"]), rec["advantage"], rec["insert_step"], rec["uid"])
    raise InputError(f"unknown record kind {kind!r}")


_ENCODERS = ((PreferenceExample, preference_to_record), (RolloutGroup, group_to_record),
             (BufferedSample, buffered_to_record))


def to_record(item) -> dict:
    for cls, enc in _ENCODERS:
        if isinstance(item, cls):
            return enc(item)
    raise InputError(f"cannot serialise {type(item).__name__}")


def write_records(path: str | Path, items: Iterable) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(to_record(item), sort_keys=True) + "\n")
            n += 1
    return n


def read_records(world: ToyWorld, path: str | Path) -> Iterator:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield from_record(world, json.loads(line))
