"""Tabular learning machinery for the eight-action signal agents.

Actions are phase ids 1..8.  State keys are tuples of bucket indices built
from the (P + 3)-component state vector ``(phase, green ratio, cycle,
flow_1 .. flow_P)``.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .phases import N_PHASES, SignalState

N_ACTIONS = N_PHASES
ACTIONS = tuple(range(1, N_ACTIONS + 1))
DEFAULT_GAMMA = 0.9


class UnvisitedPair(KeyError):
    pass


def _index(action: int) -> int:
    if not 1 <= action <= N_ACTIONS:
        raise ValueError(f"action must be a phase id in 1..{N_ACTIONS}, got {action}")
    return action - 1


@dataclass(frozen=True)
class StateVector:
    current_phase: int
    green_ratio: float
    cycle_s: float
    phase_flows: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "phase_flows", tuple(float(f) for f in self.phase_flows))
        if not 0.0 < self.green_ratio <= 1.0:
            raise ValueError(f"green ratio must lie in (0, 1], got {self.green_ratio}")
        if self.cycle_s <= 0:
            raise ValueError("cycle must be positive")
        if any(f < 0 for f in self.phase_flows):
            raise ValueError("phase flows must be non-negative")

    def __len__(self) -> int:
        return len(self.phase_flows) + 3

    def as_array(self) -> np.ndarray:
        return np.array([self.current_phase, self.green_ratio, self.cycle_s, *self.phase_flows])


KEY_LAYOUTS = ("full", "compact", "relative", "ratio")


@dataclass(frozen=True)
class StateEncoder:
    """Bucketing of a state vector into a hashable key.

    ``layout="full"`` keeps every flow bucket.  ``layout="compact"`` keeps the
    running phase's flow bucket plus the most loaded other phase (lowest id on
    ties) and its bucket.  ``layout="relative"`` replaces the two buckets by
    their difference clipped to +-``relative_clip``.  ``layout="ratio"`` works
    on the raw flows instead: the most loaded other phase and the rounded
    log2 of (its flow + 1) over (running phase flow + 1), clipped to
    +-``log_clip``, so the key stays informative however long the queues get.
    """

    flow_width: float = 5.0
    flow_buckets: int = 10
    ratio_width: float = 0.1
    ratio_buckets: int = 10
    cycle_width: float = 20.0
    layout: str = "full"
    relative_clip: int = 2
    log_clip: int = 3

    def __post_init__(self):
        if self.layout not in KEY_LAYOUTS:
            raise ValueError(f"unknown key layout {self.layout!r}")

    def flow_bucket(self, flow: float) -> int:
        return min(int(flow // self.flow_width), self.flow_buckets - 1)

    def key(self, vector: StateVector, extra: tuple = ()) -> tuple:
        ratio_b = min(int(vector.green_ratio / self.ratio_width + 1e-9), self.ratio_buckets - 1)
        cycle_b = int(vector.cycle_s // self.cycle_width)
        flows = [self.flow_bucket(f) for f in vector.phase_flows]
        psi = vector.current_phase
        if self.layout == "ratio":
            raw = vector.phase_flows
            others = [p for p in range(1, len(raw) + 1) if p != psi]
            best = max(others, key=lambda p: (raw[p - 1], -p))
            lr = math.log2((raw[best - 1] + 1.0) / (raw[psi - 1] + 1.0))
            rel = max(-self.log_clip, min(self.log_clip, int(round(lr))))
            return (psi, ratio_b, cycle_b, best, rel, *extra)
        if self.layout == "full":
            return (psi, ratio_b, cycle_b, *flows, *extra)
        own = flows[psi - 1]
        best, best_b = 0, -1
        for p, b in enumerate(flows, start=1):
            if p != psi and b > best_b:
                best, best_b = p, b
        if self.layout == "compact":
            return (psi, ratio_b, cycle_b, own, best, best_b, *extra)
        rel = max(-self.relative_clip, min(self.relative_clip, best_b - own))
        return (psi, ratio_b, cycle_b, best, rel, *extra)


DEFAULT_ENCODER = StateEncoder()


def green_ratio_of(signal: SignalState) -> float:
    """Share of the cycle given to the running phase.

    Fixed-time signals report their plan ratio; adaptive signals report the
    green shown so far over the nominal cycle (at least one second, at most 1).
    """
    if signal.ring:
        return signal.plan.green_ratio[signal.current_phase - 1]
    return min(1.0, max(signal.green_elapsed_s, 1.0) / signal.plan.cycle_s)


def encode_state(
    signal: SignalState,
    per_phase_flows: Sequence[float],
    encoder: StateEncoder = DEFAULT_ENCODER,
    extra: tuple = (),
) -> tuple[StateVector, tuple]:
    if len(per_phase_flows) != N_PHASES:
        raise ValueError(f"need {N_PHASES} phase flows, got {len(per_phase_flows)}")
    vector = StateVector(
        current_phase=signal.current_phase,
        green_ratio=green_ratio_of(signal),
        cycle_s=signal.plan.cycle_s,
        phase_flows=tuple(max(0.0, float(f)) for f in per_phase_flows),
    )
    return vector, encoder.key(vector, extra)


class QTable:
    """Action values with visit counts, best-return memory and the share of returns that reach it."""

    def __init__(self, n_actions: int = N_ACTIONS):
        self.n_actions = n_actions
        self.values: dict[Hashable, np.ndarray] = {}
        self.visit_counts: dict[Hashable, np.ndarray] = {}
        self.max_return_seen = np.full(n_actions, -np.inf)
        self.proportion_estimate = np.zeros(n_actions)

    def __len__(self) -> int:
        return len(self.values)

    def __contains__(self, state) -> bool:
        return state in self.values

    def row(self, state) -> np.ndarray:
        r = self.values.get(state)
        return np.zeros(self.n_actions) if r is None else r.copy()

    def get(self, state, action: int) -> float:
        r = self.values.get(state)
        return 0.0 if r is None else float(r[_index(action)])

    def set(self, state, action: int, value: float):
        self._row(state)[_index(action)] = value

    def visits(self, state, action: int) -> int:
        c = self.visit_counts.get(state)
        return 0 if c is None else int(c[_index(action)])

    def _row(self, state) -> np.ndarray:
        r = self.values.get(state)
        if r is None:
            r = self.values[state] = np.zeros(self.n_actions)
            self.visit_counts[state] = np.zeros(self.n_actions, dtype=np.int64)
        return r

    def max_value(self, state, tried_only: bool = False) -> float:
        """max_a Q(state, a); with ``tried_only`` over visited actions (0 if none)."""
        r = self.values.get(state)
        if r is None:
            return 0.0
        if tried_only:
            tried = self.visit_counts[state] > 0
            return float(r[tried].max()) if tried.any() else 0.0
        return float(r.max())

    def tried_row(self, state) -> np.ndarray:
        """Q row with untried actions set to the best tried value (zeros if none tried)."""
        r = self.values.get(state)
        if r is None:
            return np.zeros(self.n_actions)
        tried = self.visit_counts[state] > 0
        if not tried.any():
            return r.copy()
        out = r.copy()
        out[~tried] = r[tried].max()
        return out

    def to_dict(self) -> dict:
        return {
            "n_actions": self.n_actions,
            "entries": [
                [list(k), self.values[k].tolist(), self.visit_counts[k].tolist()]
                for k in self.values
            ],
            "max_return_seen": [None if math.isinf(x) else x for x in self.max_return_seen.tolist()],
            "proportion_estimate": self.proportion_estimate.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "QTable":
        q = cls(int(data["n_actions"]))
        for key, values, visits in data["entries"]:
            k = tuple(key)
            q.values[k] = np.array(values, dtype=float)
            q.visit_counts[k] = np.array(visits, dtype=np.int64)
        q.max_return_seen = np.array(
            [-np.inf if x is None else x for x in data["max_return_seen"]], dtype=float
        )
        q.proportion_estimate = np.array(data["proportion_estimate"], dtype=float)
        return q


class PolicyTable:
    """Per-state action distributions; unseen states are uniform."""

    def __init__(self, n_actions: int = N_ACTIONS):
        self.n_actions = n_actions
        self.probs: dict[Hashable, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.probs)

    def row(self, state) -> np.ndarray:
        r = self.probs.get(state)
        return np.full(self.n_actions, 1.0 / self.n_actions) if r is None else r.copy()

    def set_row(self, state, probs: Sequence[float]):
        p = np.asarray(probs, dtype=float)
        if p.shape != (self.n_actions,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("policy row must be a distribution over the actions")
        self.probs[state] = p.copy()

    def to_dict(self) -> dict:
        return {"n_actions": self.n_actions, "rows": [[list(k), v.tolist()] for k, v in self.probs.items()]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "PolicyTable":
        p = cls(int(data["n_actions"]))
        for key, row in data["rows"]:
            p.probs[tuple(key)] = np.array(row, dtype=float)
        return p


@dataclass
class TransitionLog:
    counts: dict = field(default_factory=lambda: defaultdict(int))
    reward_sums: dict = field(default_factory=lambda: defaultdict(float))

    def record(self, state, action: int, reward: float, next_state):
        key = (state, action, next_state)
        self.counts[key] += 1
        self.reward_sums[key] += reward


def empirical_transition(log: TransitionLog, state, action: int) -> dict:
    """Maximum-likelihood P(s' | s, a) from logged transition counts."""
    successors = {k[2]: c for k, c in log.counts.items() if k[0] == state and k[1] == action and c > 0}
    total = sum(successors.values())
    if total == 0:
        raise UnvisitedPair(f"no transitions logged from ({state!r}, {action})")
    return {s: c / total for s, c in successors.items()}


def empirical_reward(log: TransitionLog, state, action: int) -> float:
    """Expected one-step reward R(s, a) from logged samples."""
    total = n = 0.0
    for (s, a, _), c in log.counts.items():
        if s == state and a == action:
            n += c
            total += log.reward_sums[(s, a, _)]
    if n == 0:
        raise UnvisitedPair(f"no transitions logged from ({state!r}, {action})")
    return total / n


def discounted_return(rewards: Iterable[float], gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    g = 0.0
    for r in reversed(list(rewards)):
        g = r + gamma * g
    return g


def _step_size(q: QTable, state, action: int, alpha: float | None) -> float:
    if alpha is None:
        return 1.0 / (1.0 + q.visits(state, action))
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha


def bellman_backup(
    q: QTable,
    state,
    action: int,
    reward: float,
    next_state,
    gamma: float = DEFAULT_GAMMA,
    alpha: float | None = None,
    terminal: bool = False,
    tried_only: bool = False,
) -> QTable:
    """Sampled Q-learning update; ``alpha=None`` uses 1 / (1 + visits).

    ``tried_only`` bootstraps on the best *visited* action of ``next_state``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    a = _step_size(q, state, action, alpha)
    bootstrap = 0.0 if terminal else q.max_value(next_state, tried_only)
    row = q._row(state)
    i = _index(action)
    row[i] = (1.0 - a) * row[i] + a * (reward + gamma * bootstrap)
    q.visit_counts[state][i] += 1
    return q


def cbql_update(
    q: QTable,
    state,
    action: int,
    own_reward: float,
    shapley_value: float,
    alpha: float | None = None,
    gamma: float = DEFAULT_GAMMA,
) -> QTable:
    """Q <- (1 - alpha) Q + alpha (R + gamma * phi), phi the agent's Shapley value."""
    if not math.isfinite(shapley_value):
        raise ValueError("Shapley value must be finite")
    a = _step_size(q, state, action, alpha)
    row = q._row(state)
    i = _index(action)
    row[i] = (1.0 - a) * row[i] + a * (own_reward + gamma * shapley_value)
    q.visit_counts[state][i] += 1
    return q


def update_max_return(q: QTable, action: int, observed_return: float, a_f: float) -> QTable:
    """Track the best return per action and the share of returns reaching it.

    A new maximum resets the share to 1; otherwise it moves towards 1 by
    ``a_f`` (the equal and lower cases share one update rule).
    """
    if not 0.0 < a_f < 1.0:
        raise ValueError("a_f must lie in (0, 1)")
    i = _index(action)
    if observed_return > q.max_return_seen[i]:
        q.proportion_estimate[i] = 1.0
        q.max_return_seen[i] = observed_return
    else:
        q.proportion_estimate[i] = (1.0 - a_f) * q.proportion_estimate[i] + a_f
    return q


def policy_improve(policy: PolicyTable, q, state, a_f: float) -> PolicyTable:
    """Shift probability mass towards the greedy action of ``q`` at ``state``.

    ``q`` is a :class:`QTable` or a row of action values.  The greedy action
    gains ``a_f``, every other action loses ``a_f / (|A| - 1)``; negative
    entries are clipped and the row renormalised.
    """
    if not 0.0 < a_f < 1.0:
        raise ValueError("a_f must lie in (0, 1)")
    values = q.row(state) if isinstance(q, QTable) else np.asarray(q, dtype=float)
    n = policy.n_actions
    best = int(np.argmax(values))
    row = policy.row(state)
    row -= a_f / (n - 1)
    row[best] += a_f + a_f / (n - 1)
    np.maximum(row, 0.0, out=row)
    row /= row.sum()
    policy.probs[state] = row
    return policy


def action_distribution(
    policy: PolicyTable,
    state,
    epsilon: float = 0.0,
    ratios: Mapping[str, float] | None = None,
    priority_actions: Iterable[int] = (),
    tilt_weight: float = 0.5,
) -> np.ndarray:
    """Sampling distribution used by :func:`select_action`.

    Without ``ratios`` this is the policy row.  With ratios the row is blended
    with a tilted copy in which the priority actions jointly carry the
    priority agent's ratio and the remaining actions the private agent's,
    each group keeping the policy's internal shape.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    pi = policy.row(state)
    n = policy.n_actions
    if ratios is not None:
        mask = np.zeros(n, dtype=bool)
        for a in priority_actions:
            mask[_index(a)] = True
        tilt = np.zeros(n)
        for group, share in ((mask, ratios["priority"]), (~mask, ratios["private"])):
            k = int(group.sum())
            if k == 0:
                continue
            mass = pi[group].sum()
            tilt[group] = share * (pi[group] / mass if mass > 0 else 1.0 / k)
        pi = (1.0 - tilt_weight) * pi + tilt_weight * tilt
    if epsilon > 0.0:
        pi = (1.0 - epsilon) * pi + epsilon / n
    return pi


def select_action(
    policy: PolicyTable,
    state,
    rng: np.random.Generator,
    epsilon: float = 0.0,
    ratios: Mapping[str, float] | None = None,
    priority_actions: Iterable[int] = (),
    tilt_weight: float = 0.5,
) -> int:
    probs = action_distribution(policy, state, epsilon, ratios, priority_actions, tilt_weight)
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1)) + 1


def save_tables(path: str | Path, tables: Mapping[str, object], meta: Mapping | None = None):
    """Write Q/policy tables as JSON; floats round-trip exactly."""
    doc = {"meta": dict(meta or {}), "tables": {}}
    for name, table in tables.items():
        kind = "q" if isinstance(table, QTable) else "policy"
        doc["tables"][name] = {"kind": kind, **table.to_dict()}
    Path(path).write_text(json.dumps(doc, allow_nan=False))


def load_tables(path: str | Path) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text())
    tables = {}
    for name, data in doc["tables"].items():
        tables[name] = QTable.from_dict(data) if data["kind"] == "q" else PolicyTable.from_dict(data)
    return tables, doc["meta"]
