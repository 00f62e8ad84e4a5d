"""Exact cooperative-game tools: characteristic functions, Shapley values,
Shapley-ratio probabilities and Q-derived two-agent games.

Values may be floats or :class:`fractions.Fraction`; all arithmetic is generic,
so a game built from Fractions yields exact Shapley values.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

MAX_EXACT_AGENTS = 12
RATIO_FLOOR = 1e-6
N_ACTIONS = 8


class AgentNotInCoalition(ValueError):
    pass


class SizeOutOfRange(ValueError):
    pass


class DegenerateAllocation(ValueError):
    pass


class AgentRole(str, enum.Enum):
    PRIORITY = "priority"
    PRIVATE = "private"


@dataclass(frozen=True)
class AgentSet:
    agents: tuple[Hashable, ...]
    roles: Mapping[Hashable, AgentRole] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.agents) < 2:
            raise ValueError("a game needs at least two agents")
        if len(set(self.agents)) != len(self.agents):
            raise ValueError("agent identifiers must be unique")


PRIORITY_AGENT = "priority"
PRIVATE_AGENT = "private"
TSP_AGENTS = AgentSet(
    (PRIORITY_AGENT, PRIVATE_AGENT),
    {PRIORITY_AGENT: AgentRole.PRIORITY, PRIVATE_AGENT: AgentRole.PRIVATE},
)


def powerset(items: Sequence) -> list[frozenset]:
    items = list(items)
    return [frozenset(c) for r in range(len(items) + 1) for c in itertools.combinations(items, r)]


class CharacteristicFunction:
    """Coalition values v(S) over every subset of ``agents`` with v(empty) = 0."""

    def __init__(self, agents: Sequence[Hashable], values: Mapping[Iterable, object]):
        self.agents = tuple(agents)
        if len(set(self.agents)) != len(self.agents):
            raise ValueError("agent identifiers must be unique")
        table = {}
        for coalition, value in values.items():
            key = frozenset(coalition)
            if not key <= set(self.agents):
                raise ValueError(f"coalition {sorted(key, key=str)} has unknown agents")
            table[key] = value
        table.setdefault(frozenset(), 0)
        if table[frozenset()] != 0:
            raise ValueError("the empty coalition must be worth 0")
        missing = [c for c in powerset(self.agents) if c not in table]
        if missing:
            first = sorted(missing[0], key=str)
            raise KeyError(f"characteristic function undefined for coalition {first}")
        self.values = table

    @property
    def n(self) -> int:
        return len(self.agents)

    def __call__(self, coalition: Iterable) -> object:
        return self.values[frozenset(coalition)]

    def __add__(self, other: "CharacteristicFunction") -> "CharacteristicFunction":
        if set(self.agents) != set(other.agents):
            raise ValueError("games must share the same agents")
        return CharacteristicFunction(self.agents, {c: v + other(c) for c, v in self.values.items()})

    def __neg__(self) -> "CharacteristicFunction":
        return CharacteristicFunction(self.agents, {c: -v for c, v in self.values.items()})

    def __repr__(self):
        return f"CharacteristicFunction(agents={self.agents!r}, n_coalitions={len(self.values)})"

    @classmethod
    def from_pairs(cls, agents: Sequence[Hashable], pairs: Iterable[tuple[Iterable, object]]):
        return cls(agents, {frozenset(c): v for c, v in pairs})


def expected_payoff(
    agent: Hashable,
    char_fn: CharacteristicFunction,
    coalition: Iterable | None = None,
    containing_agent_only: bool = False,
):
    """Sum of v(T) over the subsets T of ``coalition`` (grand coalition by default).

    With ``containing_agent_only`` only subsets that include ``agent`` count.
    """
    base = frozenset(char_fn.agents if coalition is None else coalition)
    if agent not in base:
        raise AgentNotInCoalition(f"{agent!r} is not in the coalition")
    total = 0
    for t in powerset(sorted(base, key=str)):
        if containing_agent_only and agent not in t:
            continue
        total = total + char_fn(t)
    return total


def marginal_contribution(char_fn: CharacteristicFunction, coalition: Iterable, agent: Hashable):
    s = frozenset(coalition)
    if agent not in s:
        raise AgentNotInCoalition(f"{agent!r} is not a member of {sorted(s, key=str)}")
    return char_fn(s) - char_fn(s - {agent})


def shapley_weight(coalition_size: int, n: int) -> Fraction:
    """|S|! (n - |S| - 1)! / n! for a coalition S that excludes the agent."""
    if n < 1 or not 0 <= coalition_size <= n - 1:
        raise SizeOutOfRange(f"coalition size {coalition_size} outside [0, {n - 1}]")
    return Fraction(
        math.factorial(coalition_size) * math.factorial(n - coalition_size - 1),
        math.factorial(n),
    )


def shapley_value(char_fn: CharacteristicFunction, agent: Hashable):
    """Weighted average of the agent's marginal contributions over all coalitions."""
    n = char_fn.n
    if n > MAX_EXACT_AGENTS:
        raise ValueError(f"exact Shapley values are limited to {MAX_EXACT_AGENTS} agents")
    if agent not in char_fn.agents:
        raise AgentNotInCoalition(f"{agent!r} is not a player of this game")
    others = [a for a in char_fn.agents if a != agent]
    weights = [shapley_weight(k, n) for k in range(n)]
    total = 0
    for s in powerset(others):
        total = total + weights[len(s)] * marginal_contribution(char_fn, s | {agent}, agent)
    return total


def shapley_by_permutations(char_fn: CharacteristicFunction) -> dict:
    """Average marginal contribution over all n! join orders (brute-force oracle)."""
    totals = {a: 0 for a in char_fn.agents}
    count = 0
    for order in itertools.permutations(char_fn.agents):
        members: frozenset = frozenset()
        for a in order:
            joined = members | {a}
            totals[a] = totals[a] + (char_fn(joined) - char_fn(members))
            members = joined
        count += 1
    return {a: Fraction(v, count) if isinstance(v, (int, Fraction)) else v / count for a, v in totals.items()}


@dataclass
class ShapleyAllocation:
    values: dict
    ratios: dict


def shapley_ratios(
    allocation: ShapleyAllocation | Mapping,
    floor: float = RATIO_FLOOR,
    strict: bool = False,
) -> dict:
    """Turn Shapley values into a probability distribution over agents.

    All-positive values are normalised directly.  Otherwise every value is
    shifted by ``-min + floor`` before normalising.  When the shifted values
    sum to zero (only possible with ``floor=0`` and equal values) the result is
    uniform, or :class:`DegenerateAllocation` is raised if ``strict``.
    """
    values = allocation.values if isinstance(allocation, ShapleyAllocation) else allocation
    agents = list(values)
    phi = np.array([float(values[a]) for a in agents])
    if not np.all(np.isfinite(phi)):
        raise ValueError("Shapley values must be finite")
    if np.all(phi > 0):
        weights = phi
    else:
        weights = phi - phi.min() + floor
    total = weights.sum()
    if total <= 0:
        if strict:
            raise DegenerateAllocation("all Shapley values equal; ratios undefined")
        return {a: 1.0 / len(agents) for a in agents}
    probs = weights / total
    return dict(zip(agents, probs.tolist()))


def shapley_allocation(char_fn: CharacteristicFunction, floor: float = RATIO_FLOOR) -> ShapleyAllocation:
    values = {a: shapley_value(char_fn, a) for a in char_fn.agents}
    return ShapleyAllocation(values=values, ratios=shapley_ratios(values, floor=floor))


@dataclass
class PayoffMatrix:
    """r[m, n]: payoff to ``owner`` when it picks action m and the partner picks n."""

    entries: np.ndarray
    owner: Hashable

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        if self.entries.shape != (N_ACTIONS, N_ACTIONS):
            raise ValueError(f"payoff matrix must be {N_ACTIONS}x{N_ACTIONS}, got {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("payoff entries must be finite")

    @classmethod
    def from_q_row(cls, q_row: Sequence[float], owner: Hashable, as_column: bool = False) -> "PayoffMatrix":
        """Payoff that depends only on the owner's own action (rows, or columns if ``as_column``)."""
        q = np.asarray(q_row, dtype=float)
        entries = np.tile(q, (N_ACTIONS, 1)) if as_column else np.tile(q[:, None], (1, N_ACTIONS))
        return cls(entries, owner)


def _row(q, state) -> np.ndarray:
    if hasattr(q, "row"):
        return q.row(state)
    return np.asarray(q, dtype=float)


def _exact_max_pair_sum(a: np.ndarray, b: np.ndarray) -> Fraction:
    """max over (m, n) of a[m, n] + b[m, n] in exact arithmetic."""
    sums = a + b
    top = sums.max()
    slack = 4 * np.spacing(max(abs(top), 1e-300)) + 4 * np.spacing(np.abs(a).max() + np.abs(b).max())
    candidates = np.argwhere(sums >= top - slack)
    return max(Fraction(float(a[m, n])) + Fraction(float(b[m, n])) for m, n in candidates)


def build_characteristic_fn(
    q_i,
    q_j,
    state=None,
    payoffs: Mapping[Hashable, PayoffMatrix] | None = None,
    agents: tuple[Hashable, Hashable] = (PRIORITY_AGENT, PRIVATE_AGENT),
) -> CharacteristicFunction:
    """Two-agent game at ``state`` with exact (Fraction) coalition values.

    Payoffs default to the agents' Q rows: agent i picks the row action m and
    earns ``q_i[m]``, agent j picks the column action n and earns ``q_j[n]``.
    A singleton is worth its security level (max-min over its own payoff);
    the pair is worth the best joint payoff sum.
    """
    ai, aj = agents
    if payoffs is None:
        # each payoff depends on its owner's action only, so the joint best is separable
        qi, qj = _row(q_i, state), _row(q_j, state)
        if not (np.all(np.isfinite(qi)) and np.all(np.isfinite(qj))):
            raise ValueError("Q values must be finite")
        v_i = Fraction(float(qi.max()))
        v_j = Fraction(float(qj.max()))
        v_ij = v_i + v_j
    else:
        ri, rj = payoffs[ai].entries, payoffs[aj].entries
        v_i = Fraction(float(ri.min(axis=1).max()))
        v_j = Fraction(float(rj.min(axis=0).max()))
        v_ij = _exact_max_pair_sum(ri, rj)
    return CharacteristicFunction(
        agents,
        {frozenset(): 0, frozenset({ai}): v_i, frozenset({aj}): v_j, frozenset({ai, aj}): v_ij},
    )
