"""Eight-phase signal models with a bus priority partition.

Two phase models exist, one for a bus route going straight through the
intersection and one for a bus route turning left.  Both flatten the eight
conflict-free NEMA pairings of a four-leg intersection into a single ring::

    straight route (bus = EB through)      left-turn route (bus = EB left)
      1  NB-S + SB-S                         1  EB-L + EB-S   *
      2  EB-L + WB-L                         2  EB-S + WB-S
      3  WB-L + WB-S                         3  WB-L + WB-S
      4  EB-S + WB-S   *                     4  NB-S + SB-S
      5  EB-L + EB-S   *                     5  NB-L + SB-L
      6  NB-L + NB-S                         6  NB-L + NB-S
      7  SB-L + SB-S                         7  SB-L + SB-S
      8  EB-S          *                     8  EB-L + WB-L   *

(* = priority phase).  Right turns are never signal-gated.  Under the
permissive left mode a left turn may additionally filter through gaps
(at reduced saturation) whenever its own approach's through movement is green.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .ctm import Approach, MovementKind

N_PHASES = 8
PHASES = tuple(range(1, N_PHASES + 1))
PERMISSIVE_LEFT_FACTOR = 0.4
SATURATION_THRESHOLD = 0.7
_EPS = 1e-9

L, S, R = MovementKind.LEFT, MovementKind.STRAIGHT, MovementKind.RIGHT
EB, WB, NB, SB = Approach.EB, Approach.WB, Approach.NB, Approach.SB


class MinGreenViolation(RuntimeError):
    """A phase change was requested before the running phase reached min green."""


class RouteKind(str, enum.Enum):
    STRAIGHT = "straight"
    LEFT_TURN = "left"


class LeftMode(str, enum.Enum):
    PROTECTED = "protected"
    PERMISSIVE = "permissive"


# Tables are written for a bus travelling eastbound.
_TABLES = {
    RouteKind.STRAIGHT: (
        {(NB, S), (SB, S)},
        {(EB, L), (WB, L)},
        {(WB, L), (WB, S)},
        {(EB, S), (WB, S)},
        {(EB, L), (EB, S)},
        {(NB, L), (NB, S)},
        {(SB, L), (SB, S)},
        {(EB, S)},
    ),
    RouteKind.LEFT_TURN: (
        {(EB, L), (EB, S)},
        {(EB, S), (WB, S)},
        {(WB, L), (WB, S)},
        {(NB, S), (SB, S)},
        {(NB, L), (SB, L)},
        {(NB, L), (NB, S)},
        {(SB, L), (SB, S)},
        {(EB, L), (WB, L)},
    ),
}

# quarter turn counter-clockwise: heading east becomes heading north
_ROTATE = {EB: NB, NB: WB, WB: SB, SB: EB}


def _rotation_steps(bus_approach: Approach) -> int:
    steps, a = 0, EB
    while a != bus_approach:
        a = _ROTATE[a]
        steps += 1
    return steps


def _rotate(approach: Approach, steps: int) -> Approach:
    for _ in range(steps):
        approach = _ROTATE[approach]
    return approach


@dataclass(frozen=True)
class PhaseModel:
    kind: RouteKind = RouteKind.STRAIGHT
    left_mode: LeftMode = LeftMode.PROTECTED
    bus_approach: Approach = Approach.EB

    def __post_init__(self):
        object.__setattr__(self, "kind", RouteKind(self.kind))
        object.__setattr__(self, "left_mode", LeftMode(self.left_mode))
        object.__setattr__(self, "bus_approach", Approach(self.bus_approach))

    @property
    def phases(self) -> tuple[int, ...]:
        return PHASES

    @property
    def bus_movement(self) -> tuple[Approach, MovementKind]:
        kind = STRAIGHT_OR_LEFT[self.kind]
        return self.bus_approach, kind

    def with_left_mode(self, mode: LeftMode) -> "PhaseModel":
        return replace(self, left_mode=LeftMode(mode))


STRAIGHT_OR_LEFT = {RouteKind.STRAIGHT: S, RouteKind.LEFT_TURN: L}


def check_phase(phase: int) -> int:
    if not isinstance(phase, (int,)) or isinstance(phase, bool) or not 1 <= phase <= N_PHASES:
        raise ValueError(f"phase id must be an integer in 1..{N_PHASES}, got {phase!r}")
    return phase


@functools.lru_cache(maxsize=None)
def protected_movements(phase: int, model: PhaseModel) -> frozenset[tuple[Approach, MovementKind]]:
    """Left/through movements with right of way in ``phase`` (rights excluded)."""
    check_phase(phase)
    steps = _rotation_steps(model.bus_approach)
    return frozenset((_rotate(a, steps), k) for a, k in _TABLES[model.kind][phase - 1])


@functools.lru_cache(maxsize=None)
def permissive_movements(phase: int, model: PhaseModel) -> frozenset[tuple[Approach, MovementKind]]:
    if model.left_mode is LeftMode.PROTECTED:
        return frozenset()
    prot = protected_movements(phase, model)
    return frozenset((a, L) for a, k in prot if k is S and (a, L) not in prot)


def priority_phases(model: PhaseModel) -> frozenset[int]:
    """Phases whose green serves the bus route movement on the bus approach."""
    bus = model.bus_movement
    return frozenset(p for p in PHASES if bus in protected_movements(p, model))


def allowed_movements(phase: int, model: PhaseModel, approach: Approach) -> frozenset[MovementKind]:
    approach = Approach(approach)
    kinds = {k for a, k in protected_movements(phase, model) if a == approach}
    kinds |= {k for a, k in permissive_movements(phase, model) if a == approach}
    kinds.add(R)
    return frozenset(kinds)


def movement_gate(phase: int, model: PhaseModel, approach: Approach, kind: MovementKind) -> float:
    """Saturation multiplier for a movement: 1 protected, reduced when permissive, 0 red."""
    kind = MovementKind(kind)
    if kind is R:
        return 1.0
    key = (Approach(approach), kind)
    if key in protected_movements(phase, model):
        return 1.0
    if key in permissive_movements(phase, model):
        return PERMISSIVE_LEFT_FACTOR
    return 0.0


def conflicts(a: tuple[Approach, MovementKind], b: tuple[Approach, MovementKind]) -> bool:
    """Four-leg conflict matrix for left and through movements."""
    (app_a, kind_a), (app_b, kind_b) = a, b
    if R in (kind_a, kind_b) or app_a == app_b:
        return False
    if app_a.opposing == app_b:
        return kind_a != kind_b
    return True


def is_conflict_free(movements: Iterable[tuple[Approach, MovementKind]], yielding=()) -> bool:
    """True when no pair conflicts, except pairs in which one side is a yielding movement
    and the other is the opposing through."""
    moves = list(movements)
    yielding = set(yielding)
    for i, a in enumerate(moves):
        for b in moves[i + 1:]:
            if not conflicts(a, b):
                continue
            for y, other in ((a, b), (b, a)):
                if y in yielding and other == (y[0].opposing, S):
                    break
            else:
                return False
    return True


def successor(phase: int) -> int:
    return phase % N_PHASES + 1


def left_mode_for(saturation: float, threshold: float = SATURATION_THRESHOLD) -> LeftMode:
    """Permissive lefts below the saturation threshold, protected at or above it."""
    return LeftMode.PERMISSIVE if saturation < threshold else LeftMode.PROTECTED


@dataclass(frozen=True)
class TimingPlan:
    cycle_s: float = 120.0
    green_ratio: tuple[float, ...] = ()
    min_green_s: float = 8.0
    max_green_s: float = 60.0
    intergreen_s: float = 4.0

    def __post_init__(self):
        if self.cycle_s <= 0 or self.intergreen_s < 0 or self.min_green_s <= 0:
            raise ValueError("cycle and min green must be positive, intergreen non-negative")
        if self.min_green_s > self.max_green_s:
            raise ValueError("min green exceeds max green")
        if not self.green_ratio:
            share = (self.cycle_s - N_PHASES * self.intergreen_s) / N_PHASES / self.cycle_s
            object.__setattr__(self, "green_ratio", (share,) * N_PHASES)
        ratios = tuple(float(r) for r in self.green_ratio)
        object.__setattr__(self, "green_ratio", ratios)
        if len(ratios) != N_PHASES:
            raise ValueError(f"need {N_PHASES} green ratios, got {len(ratios)}")
        total = sum(self.green_s) + N_PHASES * self.intergreen_s
        if abs(total - self.cycle_s) > 0.5:
            raise ValueError(f"greens plus intergreens sum to {total:.2f} s, cycle is {self.cycle_s} s")
        for p, g in zip(PHASES, self.green_s):
            if not self.min_green_s - _EPS <= g <= self.max_green_s + _EPS:
                raise ValueError(f"phase {p} green {g:.2f} s outside [{self.min_green_s}, {self.max_green_s}]")

    @property
    def green_s(self) -> tuple[float, ...]:
        return tuple(r * self.cycle_s for r in self.green_ratio)

    def green(self, phase: int) -> float:
        return self.green_ratio[phase - 1] * self.cycle_s

    @classmethod
    def from_weights(cls, weights: Sequence[float], cycle_s: float = 120.0, **kwargs) -> "TimingPlan":
        """Split the effective green of a cycle in proportion to ``weights``."""
        intergreen = kwargs.get("intergreen_s", cls.intergreen_s)
        if len(weights) != N_PHASES or min(weights) <= 0:
            raise ValueError("need eight positive weights")
        effective = cycle_s - N_PHASES * intergreen
        total = float(sum(weights))
        ratios = tuple(effective * w / total / cycle_s for w in weights)
        return cls(cycle_s=cycle_s, green_ratio=ratios, **kwargs)


@dataclass(frozen=True)
class SignalState:
    """Signal of one intersection.

    ``elapsed_in_phase_s`` counts from the start of the current phase's green
    and keeps running through its clearance.  While ``next_phase`` is set the
    signal is in clearance: only movements common to both phases keep moving.
    With ``ring=True`` the plan's fixed-time ring drives phase changes;
    otherwise the phase holds until :func:`apply_action` requests a switch.
    """

    current_phase: int = 1
    elapsed_in_phase_s: float = 0.0
    model: PhaseModel = field(default_factory=PhaseModel)
    plan: TimingPlan = field(default_factory=TimingPlan)
    next_phase: int | None = None
    clearance_remaining_s: float = 0.0
    ring: bool = True

    def __post_init__(self):
        check_phase(self.current_phase)
        if self.next_phase is not None:
            check_phase(self.next_phase)
        if self.elapsed_in_phase_s < 0:
            raise ValueError("elapsed time cannot be negative")

    @property
    def in_clearance(self) -> bool:
        return self.next_phase is not None

    @property
    def green_elapsed_s(self) -> float:
        """Green time shown to the current phase so far (clearance excluded)."""
        if not self.in_clearance:
            return self.elapsed_in_phase_s
        return self.elapsed_in_phase_s - (self.plan.intergreen_s - self.clearance_remaining_s)

    @property
    def can_switch(self) -> bool:
        return not self.in_clearance and self.elapsed_in_phase_s >= self.plan.min_green_s - _EPS

    def gates(self, keys: tuple[tuple[Approach, MovementKind], ...]) -> tuple[float, ...]:
        return _gates(self.model, self.current_phase, self.next_phase, keys)

    def gate(self, approach: Approach, kind: MovementKind) -> float:
        return self.gates(((Approach(approach), MovementKind(kind)),))[0]


@functools.lru_cache(maxsize=4096)
def _gates(model, phase, next_phase, keys):
    out = []
    for approach, kind in keys:
        g = movement_gate(phase, model, approach, kind)
        if next_phase is not None:
            g = min(g, movement_gate(next_phase, model, approach, kind))
        out.append(g)
    return tuple(out)


def tick(state: SignalState, dt: float) -> SignalState:
    """Advance the signal clock by ``dt`` seconds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    elapsed = state.elapsed_in_phase_s + dt
    if state.ring:
        green = state.plan.green(state.current_phase)
        nxt = successor(state.current_phase)
        if elapsed >= green + state.plan.intergreen_s - _EPS:
            return replace(state, current_phase=nxt, elapsed_in_phase_s=0.0,
                           next_phase=None, clearance_remaining_s=0.0)
        if elapsed >= green - _EPS:
            return replace(state, elapsed_in_phase_s=elapsed, next_phase=nxt,
                           clearance_remaining_s=green + state.plan.intergreen_s - elapsed)
        return replace(state, elapsed_in_phase_s=elapsed)
    if state.next_phase is not None:
        remaining = state.clearance_remaining_s - dt
        if remaining <= _EPS:
            return replace(state, current_phase=state.next_phase, elapsed_in_phase_s=0.0,
                           next_phase=None, clearance_remaining_s=0.0)
        return replace(state, elapsed_in_phase_s=elapsed, clearance_remaining_s=remaining)
    return replace(state, elapsed_in_phase_s=elapsed)


def apply_action(state: SignalState, action: int) -> SignalState:
    """Request phase ``action``: hold when it is the running phase, else start clearance."""
    check_phase(action)
    if state.in_clearance:
        if action in (state.next_phase, state.current_phase):
            return state
        raise MinGreenViolation(
            f"signal is clearing {state.current_phase}->{state.next_phase}; cannot retarget to {action}"
        )
    if action == state.current_phase:
        return state
    if state.elapsed_in_phase_s < state.plan.min_green_s - _EPS:
        raise MinGreenViolation(
            f"phase {state.current_phase} green for {state.elapsed_in_phase_s:.1f} s "
            f"< min green {state.plan.min_green_s} s"
        )
    if state.plan.intergreen_s <= 0:
        return replace(state, current_phase=action, elapsed_in_phase_s=0.0)
    return replace(state, next_phase=action, clearance_remaining_s=state.plan.intergreen_s)
