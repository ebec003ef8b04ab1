"""Agent-runtime closed forms: memory decay, recall, tool selection,
step budgets, context-window sizing, alignment checks, and the analytic
latency/throughput models.

The embedding is a deterministic 64-dimension signed hashing scheme over
the tokenized text of a value (lowercased alphanumeric runs, blake2b
bucket + sign, L2-normalized). It is dependency-free and stable across
runs and platforms; real embedding services can be plugged in wherever a
vector is accepted directly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from collections import deque
from typing import Iterable, Sequence

from .canonical import Value, canonical_json
from .errors import EngineError
from .orchestration import ToolSpec

EMBED_DIM = 64


# --------------------------------------------------------------------------
# Types

@dataclass(frozen=True)
class MemoryItem:
    content: Value
    embedding: tuple[float, ...]
    last_access_ms: float


@dataclass
class WorkingMemory:
    """Short-term ring of recent interactions plus goals and tool results."""

    capacity: int = 7
    short_term: deque = field(default_factory=deque)
    active_goals: list[Value] = field(default_factory=list)
    tool_results: list[Value] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise EngineError("BAD_CONFIG", "working memory capacity must be >= 1")
        self.short_term = deque(self.short_term, maxlen=self.capacity)

    def remember(self, item: Value) -> None:
        self.short_term.append(item)


@dataclass(frozen=True)
class ToolStats:
    """Per-tool success counts; smoothed success probability (s+1)/(a+2)."""

    counts: dict[str, tuple[int, int]] = field(default_factory=dict)  # id -> (succ, att)

    def success_probability(self, tool_id: str) -> float:
        successes, attempts = self.counts.get(tool_id, (0, 0))
        return (successes + 1) / (attempts + 2)


def update_tool_stats(stats: ToolStats, tool_id: str, success: bool) -> ToolStats:
    successes, attempts = stats.counts.get(tool_id, (0, 0))
    updated = dict(stats.counts)
    updated[tool_id] = (successes + (1 if success else 0), attempts + 1)
    return ToolStats(updated)


@dataclass
class ConversationState:
    """Cross-turn agent state; the intent vector has no defined update rule."""

    intent_vector: tuple[float, ...] = ()
    completed_goals: set = field(default_factory=set)
    active_tool_contexts: set = field(default_factory=set)
    phase: str = "discovery"  # discovery | action


# --------------------------------------------------------------------------
# Embedding

def _token_hash(token: str) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    h = int.from_bytes(digest, "big")
    bucket = h % EMBED_DIM
    sign = 1.0 if (h >> 7) & 1 else -1.0
    return bucket, sign


def embed(v: Value) -> tuple[float, ...]:
    """Deterministic bag-of-tokens hashing embedding, L2-normalized."""
    if isinstance(v, str):
        text = v
    else:
        text = canonical_json(v)
    tokens = [t.lower() for t in _alnum_runs(text)]
    vec = [0.0] * EMBED_DIM
    if not tokens:
        vec[0] = 1.0
        return tuple(vec)
    for token in tokens:
        bucket, sign = _token_hash(token)
        vec[bucket] += sign
    norm = math.sqrt(sum(x * x for x in vec))
    if norm == 0.0:
        vec = [0.0] * EMBED_DIM
        vec[0] = 1.0
        return tuple(vec)
    return tuple(x / norm for x in vec)


def _alnum_runs(text: str) -> list[str]:
    runs = []
    current = []
    for ch in text:
        if ch.isalnum():
            current.append(ch)
        elif current:
            runs.append("".join(current))
            current = []
    if current:
        runs.append("".join(current))
    return runs


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise EngineError("DIMENSION_MISMATCH",
                          f"vector dimensions differ: {len(a)} vs {len(b)}")
    norm_a = math.sqrt(sum(x * x for x in a))
    norm_b = math.sqrt(sum(x * x for x in b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise EngineError("ZERO_NORM", "cosine undefined for zero-norm vectors")
    value = sum(x * y for x, y in zip(a, b)) / (norm_a * norm_b)
    # rounding can push identical vectors a hair past 1.0; clamp to the range
    return max(-1.0, min(1.0, value))


# --------------------------------------------------------------------------
# Memory

def memory_relevance(item: MemoryItem, now_ms: float, decay_per_ms: float) -> float:
    """Exponential decay of relevance with time since last access."""
    if decay_per_ms <= 0:
        raise EngineError("BAD_ARGUMENT", "decay rate must be > 0")
    elapsed = now_ms - item.last_access_ms
    if elapsed < 0:
        raise EngineError("BAD_ARGUMENT", "elapsed time is negative")
    return math.exp(-decay_per_ms * elapsed)


def recall(query: Value, store: Iterable[MemoryItem], threshold: float) -> list[MemoryItem]:
    """Items whose embedding cosine against the query exceeds the threshold,
    sorted most-similar first (ties keep store order).

    The query may be given directly as a vector matching the store's
    embedding dimension; any other value is embedded first.
    """
    if not -1.0 <= threshold <= 1.0:
        raise EngineError("BAD_ARGUMENT", "threshold must be in [-1, 1]")
    items = list(store)
    if not items:
        return []
    dim = len(items[0].embedding)
    query_vec = _as_vector(query, dim)
    if query_vec is None:
        query_vec = embed(query)
    scored = []
    for index, item in enumerate(items):
        sim = cosine(item.embedding, query_vec)
        if sim > threshold:
            scored.append((-sim, index, item))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [item for _, _, item in scored]


def _as_vector(v: Value, dim: int) -> tuple[float, ...] | None:
    if isinstance(v, (list, tuple)) and len(v) == dim \
            and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        return tuple(float(x) for x in v)
    return None


# --------------------------------------------------------------------------
# Tool selection

def select_tool(goal: Value, tools: Sequence[ToolSpec], stats: ToolStats) -> str:
    """argmax over sim(tool description, goal) x smoothed success rate.

    Ties break to the lexicographically smallest tool name.
    """
    if not tools:
        raise EngineError("BAD_ARGUMENT", "selectTool needs at least one tool")
    goal_vec = embed(goal)
    best_name = None
    best_score = -math.inf
    for tool in sorted(tools, key=lambda t: t.name):
        score = cosine(embed(tool.description), goal_vec) * stats.success_probability(tool.name)
        if score > best_score:
            best_score = score
            best_name = tool.name
    return best_name


# --------------------------------------------------------------------------
# Budgets and windows

def step_budget(goal_count: int, tool_count: int) -> int:
    """max(1, floor(ln(goals) * tools)) reasoning rounds."""
    if goal_count < 1:
        raise EngineError("BAD_ARGUMENT", "goal_count must be >= 1")
    if tool_count < 0:
        raise EngineError("BAD_ARGUMENT", "tool_count must be >= 0")
    return max(1, math.floor(math.log(goal_count) * tool_count))


def optimal_window(epsilon: float, decay: float, token_limit: float,
                   avg_turn_tokens: float) -> int:
    """floor(min(ln(1/eps)/decay, tokenLimit/turnLength)), at least 1."""
    if not 0 < epsilon < 1:
        raise EngineError("BAD_ARGUMENT", "epsilon must be in (0, 1)")
    if decay <= 0 or avg_turn_tokens <= 0:
        raise EngineError("BAD_ARGUMENT", "decay and turn length must be > 0")
    relevance_side = math.log(1.0 / epsilon) / decay
    budget_side = token_limit / avg_turn_tokens
    return max(1, math.floor(min(relevance_side, budget_side)))


# --------------------------------------------------------------------------
# Alignment and performance models

def alignment_check(action: Value, goals: Sequence[Value], threshold: float) -> bool:
    """True iff the action's best goal-cosine strictly exceeds the threshold."""
    if not goals:
        raise EngineError("BAD_ARGUMENT", "alignment check needs at least one goal")
    if not -1.0 <= threshold <= 1.0:
        raise EngineError("BAD_ARGUMENT", "threshold must be in [-1, 1]")
    action_vec = embed(action)
    best = max(cosine(action_vec, embed(goal)) for goal in goals)
    return best > threshold


def response_time_bound(llm_time_ms: float, tool_count: int,
                        invoked_tool_times_ms: Sequence[float]) -> float:
    """Upper bound: T_llm * (1 + |tools|) + sum of invoked tool times."""
    if llm_time_ms < 0 or tool_count < 0 or any(t < 0 for t in invoked_tool_times_ms):
        raise EngineError("BAD_ARGUMENT", "times and counts must be non-negative")
    return llm_time_ms * (1 + tool_count) + sum(invoked_tool_times_ms)


def scalability_model(n: int, overlap: float, base_throughput: float) -> float:
    """Throughput of n concurrent agents with shared-state overlap factor."""
    if n < 1:
        raise EngineError("BAD_ARGUMENT", "n must be >= 1")
    if not 0.0 <= overlap <= 1.0:
        raise EngineError("BAD_ARGUMENT", "overlap must be in [0, 1]")
    return n * base_throughput * (1.0 - overlap * (n - 1) / n)
