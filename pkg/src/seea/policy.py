"""Tiny autoregressive action policy over a token vocabulary.

Context is a bag of embeddings: the mean embedding of the last ``window``
context tokens (task tokens first, then the most recent history and the
current action prefix). A one-hidden-layer tanh network maps that feature
to next-token logits. Gradients are written out by hand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from seea.env import BOS, EOS, SEP, EnvConfig, build_vocabulary

FORMAT_VERSION = 1


class InputError(ValueError):
    """Unknown token or malformed action."""


class Vocabulary:
    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise InputError("vocabulary tokens must be unique")
        for special in (BOS, EOS, SEP):
            if special not in tokens:
                raise InputError(f"vocabulary is missing {special}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, tokens) -> list[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as exc:
            raise InputError(f"unknown token {exc.args[0]!r}") from None

    @classmethod
    def for_env(cls, config: EnvConfig, size: int = 64) -> "Vocabulary":
        tokens = build_vocabulary(config)
        if size < len(tokens):
            raise InputError(f"vocab_size {size} is smaller than the {len(tokens)} tokens the environment needs")
        tokens += [f"<reserved{i}>" for i in range(size - len(tokens))]
        return cls(tokens)


@dataclass(frozen=True)
class AgentState:
    """Task tokens plus the (action, observation) history."""

    initial: tuple[str, ...]
    history: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...] = ()

    def append(self, action, observation) -> "AgentState":
        return AgentState(self.initial, self.history + ((tuple(action), tuple(observation)),))

    @cached_property
    def stream(self) -> tuple[str, ...]:
        """History flattened to tokens, SEP before each (action, observation) pair."""
        out: list[str] = []
        for action, obs in self.history:
            out.append(SEP)
            out.extend(t for t in action if t != EOS)
            out.extend(obs)
        return tuple(out)

    def context_tokens(self, prefix=(), window: int = 32) -> list[str]:
        stream = list(self.stream)
        if prefix:
            stream.append(SEP)
            stream.extend(prefix)
        head = list(self.initial)[:window]
        room = window - len(head)
        return head + (stream[-room:] if room > 0 else [])

    def to_json(self) -> dict:
        return {"initial": list(self.initial), "history": [[list(a), list(o)] for a, o in self.history]}

    @classmethod
    def from_json(cls, data: dict) -> "AgentState":
        return cls(tuple(data["initial"]), tuple((tuple(a), tuple(o)) for a, o in data["history"]))


@dataclass(frozen=True)
class Dims:
    vocab: int
    embed: int = 16
    hidden: int = 32
    out: int = 64

    def segments(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        shapes = {
            "E": (self.vocab, self.embed),
            "W1": (self.embed, self.hidden),
            "b1": (self.hidden,),
            "W2": (self.hidden, self.out),
            "b2": (self.out,),
        }
        table, offset = {}, 0
        for name, shape in shapes.items():
            table[name] = (offset, shape)
            offset += int(np.prod(shape))
        return table

    @property
    def size(self) -> int:
        return self.vocab * self.embed + self.embed * self.hidden + self.hidden + self.hidden * self.out + self.out


@dataclass
class ParamVector:
    values: np.ndarray
    dims: Dims
    seed: int | None = None
    segments: dict = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.dims.size,):
            raise InputError(f"expected {self.dims.size} parameters, got {self.values.shape}")
        self.segments = self.dims.segments()
        self._views = {
            name: self.values[off : off + int(np.prod(shape))].reshape(shape)
            for name, (off, shape) in self.segments.items()
        }

    def view(self, name: str) -> np.ndarray:
        return self._views[name]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.dims, self.seed)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.dims, self.seed)

    def to_json(self, **extra) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            **extra,
            "seed": self.seed,
            "dims": {"vocab": self.dims.vocab, "embed": self.dims.embed, "hidden": self.dims.hidden, "out": self.dims.out},
            "segments": [
                {"name": n, "offset": off, "shape": list(shape)} for n, (off, shape) in self.segments.items()
            ],
            # repr of a binary64 float is the shortest string that round-trips exactly
            "values": [float(v) for v in self.values],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ParamVector":
        if data.get("format_version") != FORMAT_VERSION:
            raise InputError(f"unsupported format_version {data.get('format_version')!r}, expected {FORMAT_VERSION}")
        pv = cls(np.array(data["values"], dtype=np.float64), Dims(**data["dims"]), data.get("seed"))
        table = {s["name"]: (s["offset"], tuple(s["shape"])) for s in data["segments"]}
        if table != pv.segments:
            raise InputError("segment table does not match dims")
        if not np.all(np.isfinite(pv.values)):
            raise InputError("non-finite parameter values")
        return pv


def init_params(seed: int, dims: Dims) -> ParamVector:
    rng = np.random.default_rng(seed)
    return ParamVector(rng.uniform(-0.1, 0.1, size=dims.size), dims, seed)


def save_params(params: ParamVector, path: str | Path, **extra) -> None:
    Path(path).write_text(json.dumps(params.to_json(**extra)))


def load_params(path: str | Path) -> ParamVector:
    return ParamVector.from_json(json.loads(Path(path).read_text()))


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


class BagNetwork:
    """Mean-of-embeddings encoder with a tanh hidden layer and a linear head."""

    def __init__(self, vocab: Vocabulary, dims: Dims, window: int = 32):
        self.vocab = vocab
        self.dims = dims
        self.window = window

    def context_ids(self, state: AgentState, prefix=()) -> list[int]:
        return self.vocab.ids(state.context_tokens(prefix, self.window))

    def encode_ids(self, params: ParamVector, ids: list[int]) -> np.ndarray:
        if not ids:
            return np.zeros(self.dims.embed)
        return params.view("E")[ids].sum(axis=0) * (1.0 / len(ids))

    def encode_context(self, params: ParamVector, state: AgentState, prefix=()) -> np.ndarray:
        return self.encode_ids(params, self.context_ids(state, prefix))

    def forward(self, params: ParamVector, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(hidden activations, logits) for one feature row or a stack of them."""
        h = np.tanh(features @ params.view("W1") + params.view("b1"))
        return h, h @ params.view("W2") + params.view("b2")

    def token_logits(self, params: ParamVector, feature: np.ndarray) -> np.ndarray:
        return self.forward(params, feature)[1]

    def backward(
        self,
        params: ParamVector,
        ids_per_row: list[list[int]],
        features: np.ndarray,
        hidden: np.ndarray,
        dlogits: np.ndarray,
    ) -> np.ndarray:
        """Gradient of sum(dlogits * logits) with respect to every parameter."""
        grad = np.zeros_like(params.values)
        g = params.with_values(grad)
        g.view("W2")[...] = hidden.T @ dlogits
        g.view("b2")[...] = dlogits.sum(axis=0)
        da = (dlogits @ params.view("W2").T) * (1.0 - hidden**2)
        g.view("W1")[...] = features.T @ da
        g.view("b1")[...] = da.sum(axis=0)
        dfeat = da @ params.view("W1").T
        dE = g.view("E")
        for ids, df in zip(ids_per_row, dfeat):
            if ids:
                np.add.at(dE, ids, df / len(ids))
        return grad


class Grammar:
    """Next-token masks for the action grammar, keyed by action prefix."""

    def __init__(self, vocab: Vocabulary, receptacles, objects):
        ids = vocab.ids
        self.vocab = vocab
        self.eos = ids([EOS])
        self.verbs = ids(["go", "open", "close", "take", "put"])
        self.recs = ids(receptacles)
        self.objs = ids(objects)
        self._cache: dict[tuple[str, ...], np.ndarray] = {}

    def allowed(self, prefix: tuple[str, ...]) -> np.ndarray:
        hit = self._cache.get(prefix)
        if hit is None:
            hit = self._cache[prefix] = np.sort(np.array(self._allowed(prefix), dtype=np.int64))
        return hit

    def _allowed(self, p: tuple[str, ...]) -> list[int]:
        if not p:
            return self.verbs
        verb = p[0]
        if verb == "go":
            return {1: self.vocab.ids(["to"]), 2: self.recs}.get(len(p), self.eos)
        if verb in ("open", "close"):
            return self.recs if len(p) == 1 else self.eos
        if verb in ("take", "put"):
            return self.objs if len(p) == 1 else self.eos
        return self.eos


class Policy:
    """pi(action | state) over token sequences ending in EOS.

    With ``constrained=True`` each next-token distribution is renormalized
    over the tokens the action grammar admits after the current prefix
    (syntax only: any receptacle or object id of the right type).
    Unconstrained decoding uses the full vocabulary softmax.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        dims: Dims,
        *,
        window: int = 32,
        t_max: int = 8,
        grammar: Grammar | None = None,
    ):
        if dims.out != len(vocab) or dims.vocab != len(vocab):
            raise InputError("policy dims must match the vocabulary size")
        self.vocab = vocab
        self.dims = dims
        self.net = BagNetwork(vocab, dims, window)
        self.t_max = t_max
        self.grammar = grammar
        self.eos = vocab.index[EOS]
        self._all = np.arange(len(vocab))
        self._eos_only = np.array([self.eos])

    @classmethod
    def for_env(cls, env_config: EnvConfig, *, vocab_size=64, embed=16, hidden=32, window=32, t_max=8, constrained=True):
        vocab = Vocabulary.for_env(env_config, vocab_size)
        dims = Dims(len(vocab), embed, hidden, len(vocab))
        grammar = Grammar(vocab, env_config.receptacles, env_config.objects) if constrained else None
        return cls(vocab, dims, window=window, t_max=t_max, grammar=grammar)

    def init_params(self, seed: int) -> ParamVector:
        return init_params(seed, self.dims)

    def encode_context(self, params, state, prefix=()):
        return self.net.encode_context(params, state, prefix)

    def token_logits(self, params, feature):
        return self.net.token_logits(params, feature)

    def allowed(self, prefix: tuple[str, ...]) -> np.ndarray:
        if len(prefix) >= self.t_max - 1:
            return self._eos_only
        if self.grammar is None:
            return self._all
        return self.grammar.allowed(prefix)

    def _check(self, action) -> tuple[str, ...]:
        action = tuple(action)
        if not action or action[-1] != EOS or len(action) > self.t_max or EOS in action[:-1]:
            raise InputError(f"malformed action {action!r}")
        self.vocab.ids(action)
        return action

    def _score(self, params, state, action):
        rows = [self.net.context_ids(state, action[:k]) for k in range(len(action))]
        feats = np.stack([self.net.encode_ids(params, r) for r in rows])
        hidden, logits = self.net.forward(params, feats)
        return rows, feats, hidden, logits

    def logprob(self, params: ParamVector, state: AgentState, action) -> np.ndarray:
        action = self._check(action)
        _, _, _, logits = self._score(params, state, action)
        out = np.empty(len(action))
        for k, tok in enumerate(self.vocab.ids(action)):
            allowed = self.allowed(action[:k])
            if tok not in allowed:
                out[k] = -np.inf
                continue
            z = logits[k, allowed]
            m = z.max()
            out[k] = logits[k, tok] - m - np.log(np.exp(z - m).sum())
        return out

    def grad_logprob(self, params: ParamVector, state: AgentState, action, token_weights) -> np.ndarray:
        """Gradient of sum_k w_k * log pi(token_k | prefix_k)."""
        action = self._check(action)
        w = np.asarray(token_weights, dtype=np.float64)
        if w.shape != (len(action),) or not np.all(np.isfinite(w)):
            raise InputError("token_weights must be finite and aligned with the action")
        rows, feats, hidden, logits = self._score(params, state, action)
        dlogits = np.zeros_like(logits)
        for k, tok in enumerate(self.vocab.ids(action)):
            if w[k] == 0.0:
                continue
            allowed = self.allowed(action[:k])
            z = logits[k, allowed]
            p = np.exp(z - z.max())
            p /= p.sum()
            dlogits[k, allowed] = -w[k] * p
            dlogits[k, tok] += w[k]
        return self.net.backward(params, rows, feats, hidden, dlogits)

    def sample_action(self, params: ParamVector, state: AgentState, temperature: float, rng: np.random.Generator):
        """Decode one action; log-probs are always the temperature-1 values."""
        if temperature < 0:
            raise InputError("temperature must be >= 0")
        window = self.net.window
        head = self.vocab.ids(state.initial[:window])
        room = window - len(head)
        tail = self.vocab.ids(state.stream[-room:]) if room > 0 else []
        sep = self.vocab.index[SEP]
        E = params.view("E")
        W1, b1, W2, b2 = (params.view(n) for n in ("W1", "b1", "W2", "b2"))
        prefix: list[str] = []
        prefix_ids: list[int] = []
        logps: list[float] = []
        while True:
            allowed = self.allowed(tuple(prefix))
            if len(allowed) == 1:
                # a forced token has probability one under the masked softmax
                tok_id = int(allowed[0])
                tok = self.vocab.tokens[tok_id]
                prefix.append(tok)
                prefix_ids.append(tok_id)
                logps.append(0.0)
                if tok == EOS:
                    return tuple(prefix), np.array(logps)
                continue
            ids = head + ((tail + [sep] + prefix_ids)[-room:] if prefix and room > 0 else tail)
            feat = E[ids].sum(axis=0) * (1.0 / len(ids)) if ids else np.zeros(self.dims.embed)
            logits = np.tanh(feat @ W1 + b1) @ W2 + b2
            z = logits[allowed]
            lp = z - z.max()
            lp -= np.log(np.exp(lp).sum())
            if temperature == 0.0:
                j = int(np.argmax(z))
            else:
                q = np.exp((z - z.max()) / temperature)
                cdf = np.cumsum(q / q.sum())
                j = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(allowed) - 1)
            tok_id = int(allowed[j])
            tok = self.vocab.tokens[tok_id]
            prefix.append(tok)
            prefix_ids.append(tok_id)
            logps.append(float(lp[j]))
            if tok == EOS:
                return tuple(prefix), np.array(logps)
