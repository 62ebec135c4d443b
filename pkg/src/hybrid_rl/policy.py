"""Modular toy policy: frozen encoder -> adapter -> autoregressive language head.

The head is a one-hidden-layer tanh network over ``[context | mean history
embedding | last-token embedding]`` followed by a softmax over the vocabulary.
All gradients are analytic. Parameter snapshots are immutable (arrays are
marked read-only); an update always produces a new snapshot.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, PolicyConfig
from .toyworld import Task, Vocabulary

BLOCKS: dict[str, tuple[str, ...]] = {
    "encoder": ("enc",),
    "adapter": ("enc_proj", "ad_w", "ad_b"),
    "head": ("prompt_emb", "tok_emb", "w1", "b1", "w2", "b2"),
}

# configuration -> (freeze mask, trainable tensors)
CONFIGURATIONS: dict[str, tuple[dict[str, bool], tuple[str, ...]]] = {
    "adapter_only": (
        {"encoder": False, "adapter": True, "head": False},
        ("ad_w", "ad_b"),
    ),
    "head_plus_adapter": (
        {"encoder": False, "adapter": True, "head": True},
        ("ad_w", "ad_b") + BLOCKS["head"],
    ),
    # stands in for "adapter + vision encoder": the encoder itself stays frozen,
    # an encoder-side projection inside the adapter block is opened instead
    "adapter_plus_encoder_forwardonly": (
        {"encoder": False, "adapter": True, "head": False},
        ("enc_proj", "ad_w", "ad_b"),
    ),
    "head_only": (
        {"encoder": False, "adapter": False, "head": True},
        BLOCKS["head"],
    ),
    "frozen": (
        {"encoder": False, "adapter": False, "head": False},
        (),
    ),
}


class InputError(ValueError):
    pass


def _freeze_arrays(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for k, v in tensors.items():
        arr = np.array(v, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        out[k] = arr
    return out


@dataclass(frozen=True, eq=False)
class PolicyParams:
    tensors: dict[str, np.ndarray]
    configuration: str = "adapter_only"
    vocab_size: int = 32
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        if self.configuration not in CONFIGURATIONS:
            raise ConfigError("freeze", f"unknown configuration {self.configuration!r}")

    @property
    def freeze_mask(self) -> dict[str, bool]:
        """Block name -> frozen?"""
        trainable_blocks, _ = CONFIGURATIONS[self.configuration]
        return {block: not flag for block, flag in trainable_blocks.items()}

    @property
    def trainable(self) -> tuple[str, ...]:
        return CONFIGURATIONS[self.configuration][1]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def replace(self, tensors: dict[str, np.ndarray] | None = None, **changes) -> "PolicyParams":
        merged = dict(self.tensors)
        if tensors:
            merged.update(_freeze_arrays(tensors))
        fields = dict(configuration=self.configuration, vocab_size=self.vocab_size, seed=self.seed, step=self.step)
        fields.update(changes)
        return PolicyParams(tensors=merged, **fields)

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


@dataclass(frozen=True, eq=False)
class Response:
    tokens: tuple[int, ...]
    behavior_logprobs: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.tokens) != len(self.behavior_logprobs):
            raise InputError("tokens and behavior_logprobs differ in length")

    @property
    def total_logprob(self) -> float:
        return float(np.sum(self.behavior_logprobs))

    def __len__(self) -> int:
        return len(self.tokens)


def init_params(config: PolicyConfig, vocab_size: int, visual_dim: int,
                configuration: str = "adapter_only", seed: int = 0) -> PolicyParams:
    rng = np.random.default_rng([seed, 17])
    s = config.init_scale
    de, dc, dt, nh, V = config.encoder_dim, config.context_dim, config.token_dim, config.hidden_dim, vocab_size

    def u(*shape):
        return rng.uniform(-s, s, size=shape)

    # orthogonalised random encoder, seed-stable
    raw = np.random.default_rng([seed, 3]).standard_normal((max(visual_dim, de), max(visual_dim, de)))
    q, _ = np.linalg.qr(raw)
    tensors = {
        "enc": q[:visual_dim, :de],
        "enc_proj": np.eye(de),
        "ad_w": u(de, dc),
        "ad_b": u(dc),
        "prompt_emb": u(V, dc),
        "tok_emb": u(V, dt),
        "w1": u(dc + 2 * dt, nh),
        "b1": u(nh),
        "w2": u(nh, V),
        "b2": u(V),
    }
    return PolicyParams(_freeze_arrays(tensors), configuration=configuration, vocab_size=V, seed=seed)


def set_freeze(params: PolicyParams, configuration: str) -> PolicyParams:
    if configuration not in CONFIGURATIONS:
        raise ConfigError("freeze", f"unknown configuration {configuration!r}")
    return params.replace(configuration=configuration)


def reinit_adapter(params: PolicyParams, seed: int, scale: float = 0.1) -> PolicyParams:
    """Fresh adapter (and identity encoder projection) from ``seed``."""
    rng = np.random.default_rng([seed, 29])
    return params.replace({
        "ad_w": rng.uniform(-scale, scale, size=params["ad_w"].shape),
        "ad_b": rng.uniform(-scale, scale, size=params["ad_b"].shape),
        "enc_proj": np.eye(params["enc_proj"].shape[0]),
    }, seed=seed, step=0)


# ---------------------------------------------------------------------------
# context path
# ---------------------------------------------------------------------------

def _context_batch(params: PolicyParams, tasks: Sequence[Task]):
    enc, proj = params["enc"], params["enc_proj"]
    X = np.stack([t.visual_features for t in tasks])
    if X.shape[1] != enc.shape[0]:
        raise ConfigError("task.visual_dim", f"visual features have dim {X.shape[1]}, encoder expects {enc.shape[0]}")
    for t in tasks:
        if any(not 0 <= tok < params.vocab_size for tok in t.prompt_tokens):
            raise InputError("prompt token out of range")
    feat = X @ enc
    z = feat @ proj
    prompt_mean = np.stack([params["prompt_emb"][list(t.prompt_tokens)].mean(axis=0) for t in tasks])
    ctx = z @ params["ad_w"] + params["ad_b"] + prompt_mean
    return ctx, (feat, z)


def forward_context(params: PolicyParams, task: Task) -> np.ndarray:
    return _context_batch(params, [task])[0][0]


def vision_contribution(params: PolicyParams, task: Task) -> np.ndarray:
    """Adapter output alone, without the prompt-embedding term."""
    z = task.visual_features @ params["enc"] @ params["enc_proj"]
    return z @ params["ad_w"] + params["ad_b"]


# ---------------------------------------------------------------------------
# sequence scoring
# ---------------------------------------------------------------------------

def _pad(seqs: Sequence[Sequence[int]]):
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    T = int(lengths.max()) if len(seqs) else 0
    toks = np.zeros((len(seqs), max(T, 1)), dtype=np.int64)
    for i, s in enumerate(seqs):
        toks[i, :len(s)] = s
    mask = np.arange(toks.shape[1])[None, :] < lengths[:, None]
    return toks, lengths, mask


def _log_softmax(logits):
    mx = logits.max(axis=-1, keepdims=True)
    shifted = logits - mx
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _forward(params: PolicyParams, tasks: Sequence[Task], seqs: Sequence[Sequence[int]],
             ctx_offset: np.ndarray | None = None):
    V = params.vocab_size
    for s in seqs:
        if any(not 0 <= int(t) < V for t in s):
            raise InputError(f"token id out of range [0, {V})")
    ctx, ctx_cache = _context_batch(params, tasks)
    if ctx_offset is not None:
        ctx = ctx + ctx_offset
    toks, lengths, mask = _pad(seqs)
    N, T = toks.shape
    emb = params["tok_emb"][toks] * mask[..., None]
    csum = np.cumsum(emb, axis=1)
    prev_sum = np.zeros_like(emb)
    prev_sum[:, 1:] = csum[:, :-1]
    counts = np.maximum(np.arange(T), 1)[None, :, None]
    hist_mean = prev_sum / counts
    last = np.zeros_like(emb)
    last[:, 1:] = emb[:, :-1]
    inp = np.concatenate([np.broadcast_to(ctx[:, None, :], (N, T, ctx.shape[1])), hist_mean, last], axis=-1)
    hidden = np.tanh(inp @ params["w1"] + params["b1"])
    logp_all = _log_softmax(hidden @ params["w2"] + params["b2"])
    logp = np.take_along_axis(logp_all, toks[..., None], axis=-1)[..., 0] * mask
    cache = dict(ctx=ctx, ctx_cache=ctx_cache, toks=toks, mask=mask, inp=inp, hidden=hidden,
                 logp_all=logp_all, counts=counts, tasks=tasks)
    return logp, cache


def _backward(params: PolicyParams, cache, weights: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of sum(weights * per-token logprob) over trainable tensors."""
    grads = params.zeros_like()
    trainable = set(params.trainable)
    if not trainable:
        return grads
    toks, mask = cache["toks"], cache["mask"]
    w = weights * mask
    probs = np.exp(cache["logp_all"])
    dlogits = -probs * w[..., None]
    np.add.at(dlogits, (np.arange(toks.shape[0])[:, None], np.arange(toks.shape[1])[None, :], toks), w)
    hidden, inp = cache["hidden"], cache["inp"]
    V = dlogits.shape[-1]
    if "w2" in trainable:
        grads["w2"] = hidden.reshape(-1, hidden.shape[-1]).T @ dlogits.reshape(-1, V)
        grads["b2"] = dlogits.sum(axis=(0, 1))
    dpre = (dlogits @ params["w2"].T) * (1.0 - hidden ** 2)
    if "w1" in trainable:
        grads["w1"] = inp.reshape(-1, inp.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
        grads["b1"] = dpre.sum(axis=(0, 1))
    dc = cache["ctx"].shape[1]
    dt = params["tok_emb"].shape[1]
    if "tok_emb" in trainable:
        dinp = dpre @ params["w1"][dc:].T
        dmean, dlast = dinp[..., :dt], dinp[..., dt:]
        dprev = dmean / cache["counts"]
        dprev[:, 0] = 0.0
        # emb_s feeds prev_sum_t for every t > s
        rev = np.cumsum(dprev[:, ::-1], axis=1)[:, ::-1]
        demb = np.zeros_like(dprev)
        demb[:, :-1] = rev[:, 1:] + dlast[:, 1:]
        demb *= mask[..., None]
        gtok = np.zeros_like(params["tok_emb"])
        np.add.at(gtok, toks[mask], demb[mask])
        grads["tok_emb"] = gtok
    dctx = dpre.sum(axis=1) @ params["w1"][:dc].T
    if "prompt_emb" in trainable:
        gp = np.zeros_like(params["prompt_emb"])
        for i, task in enumerate(cache["tasks"]):
            p = list(task.prompt_tokens)
            np.add.at(gp, p, np.broadcast_to(dctx[i] / len(p), (len(p), dc)))
        grads["prompt_emb"] = gp
    feat, z = cache["ctx_cache"]
    if "ad_w" in trainable:
        grads["ad_w"] = z.T @ dctx
    if "ad_b" in trainable:
        grads["ad_b"] = dctx.sum(axis=0)
    if "enc_proj" in trainable:
        grads["enc_proj"] = feat.T @ (dctx @ params["ad_w"].T)
    return grads


def token_logprobs(params: PolicyParams, tasks: Sequence[Task], seqs: Sequence[Sequence[int]]) -> list[np.ndarray]:
    """Per-token logprobs for a batch of (task, sequence) pairs."""
    if not seqs:
        return []
    logp, _ = _forward(params, tasks, seqs)
    return [logp[i, :len(s)].copy() for i, s in enumerate(seqs)]


def weighted_logprob_grad(params: PolicyParams, tasks: Sequence[Task], seqs: Sequence[Sequence[int]],
                          weight_fn, ctx_offset: np.ndarray | None = None, need_grad: bool = True
                          ) -> tuple[list[np.ndarray], dict[str, np.ndarray] | None]:
    """Forward pass, then gradient of ``sum(W * logp)`` with ``W = weight_fn(per_token_logps)``.

    ``weight_fn`` receives the padded (N, T) logprob matrix and the mask and
    returns an (N, T) weight matrix; this is the single backward entry point
    used by every loss. ``ctx_offset`` perturbs the context (warm-up noise).
    With ``need_grad=False`` the backward pass is skipped and ``None`` returned.
    """
    logp, cache = _forward(params, tasks, seqs, ctx_offset)
    weights = weight_fn(logp, cache["mask"])
    grads = _backward(params, cache, np.asarray(weights, dtype=np.float64)) if need_grad else None
    return [logp[i, :len(s)].copy() for i, s in enumerate(seqs)], grads


def logprob(params: PolicyParams, task: Task, tokens: Sequence[int]) -> tuple[float, np.ndarray]:
    if len(tokens) == 0:
        return 0.0, np.zeros(0)
    per_token = token_logprobs(params, [task], [list(tokens)])[0]
    return float(per_token.sum()), per_token


def grad_logprob(params: PolicyParams, task: Task, tokens: Sequence[int]) -> dict[str, np.ndarray]:
    if len(tokens) == 0:
        return params.zeros_like()
    _, g = weighted_logprob_grad(params, [task], [list(tokens)], lambda lp, m: m.astype(float))
    return g


def next_token_logprobs(params: PolicyParams, task: Task, prefix: Sequence[int]) -> np.ndarray:
    """Full next-token log-distribution after ``prefix``."""
    logits = _step_logits(params, _context_batch(params, [task])[0], *_history_state(params, [list(prefix)]))
    return _log_softmax(logits)[0]


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _history_state(params: PolicyParams, prefixes: Sequence[Sequence[int]]):
    dt = params["tok_emb"].shape[1]
    n = len(prefixes)
    total = np.zeros((n, dt))
    last = np.zeros((n, dt))
    count = np.zeros(n)
    for i, p in enumerate(prefixes):
        if p:
            e = params["tok_emb"][list(p)]
            total[i] = e.sum(axis=0)
            last[i] = e[-1]
            count[i] = len(p)
    return total, last, count


def _step_logits(params, ctx, total, last, count):
    mean = total / np.maximum(count, 1)[:, None]
    inp = np.concatenate([ctx, mean, last], axis=1)
    return np.tanh(inp @ params["w1"] + params["b1"]) @ params["w2"] + params["b2"]


def sample_batch(params: PolicyParams, tasks: Sequence[Task], temperature: float, max_len: int,
                 rng: np.random.Generator, end_token: int) -> list[Response]:
    """One ancestral sample per entry of ``tasks`` (repeat a task for a group).

    ``temperature == 0`` selects greedy decoding. Behaviour logprobs are always
    recorded under the temperature-1 policy.
    """
    n = len(tasks)
    if n == 0:
        return []
    if temperature < 0:
        raise InputError("temperature must be positive (0 selects greedy decoding)")
    ctx, _ = _context_batch(params, tasks)
    dt = params["tok_emb"].shape[1]
    total = np.zeros((n, dt))
    last = np.zeros((n, dt))
    count = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    tokens = [[] for _ in range(n)]
    lps = [[] for _ in range(n)]
    for _ in range(max_len):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        logits = _step_logits(params, ctx[idx], total[idx], last[idx], count[idx])
        logp = _log_softmax(logits)
        if temperature == 0:
            choice = logp.argmax(axis=1)
        else:
            scaled = np.exp(_log_softmax(logits / temperature))
            cdf = np.cumsum(scaled, axis=1)
            u = rng.random(idx.size)[:, None] * cdf[:, -1:]
            choice = np.minimum((cdf < u).sum(axis=1), cdf.shape[1] - 1)
        chosen_lp = logp[np.arange(idx.size), choice]
        emb = params["tok_emb"][choice]
        total[idx] += emb
        last[idx] = emb
        count[idx] += 1
        for j, i in enumerate(idx):
            tokens[i].append(int(choice[j]))
            lps[i].append(float(chosen_lp[j]))
            if choice[j] == end_token:
                alive[i] = False
    return [Response(tuple(t), np.array(l)) for t, l in zip(tokens, lps)]


def sample(params: PolicyParams, task: Task, n: int, temperature: float, max_len: int,
           rng: np.random.Generator, vocab: Vocabulary | None = None) -> list[Response]:
    if n < 1:
        raise InputError("n must be >= 1")
    end = (vocab or Vocabulary(size=params.vocab_size)).end
    return sample_batch(params, [task] * n, temperature, max_len, rng, end)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "hybrid-rl-checkpoint v1"


def save_checkpoint(params: PolicyParams, path: str | Path, extra: dict | None = None) -> None:
    """Text checkpoint: one JSON header line, then per tensor a ``name shape`` line
    followed by one line of space-separated ``repr`` floats (exact round-trip)."""
    header = {
        "magic": CHECKPOINT_MAGIC,
        "seed": params.seed,
        "step": params.step,
        "configuration": params.configuration,
        "freeze_mask": params.freeze_mask,
        "vocab_size": params.vocab_size,
        "shapes": {k: list(v.shape) for k, v in params.tensors.items()},
    }
    if extra:
        header.update(extra)
    lines = [json.dumps(header, sort_keys=True)]
    for name in sorted(params.tensors):
        arr = params.tensors[name]
        lines.append(f"{name} {' '.join(map(str, arr.shape))}")
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> PolicyParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    tensors = {}
    for i in range(1, len(lines), 2):
        name, *shape = lines[i].split(" ")
        values = np.array([float(x) for x in lines[i + 1].split()]) if lines[i + 1] else np.zeros(0)
        tensors[name] = values.reshape([int(s) for s in shape])
    return PolicyParams(_freeze_arrays(tensors), configuration=header["configuration"],
                        vocab_size=header["vocab_size"], seed=header["seed"], step=header["step"])
