"""Signal controllers behind one ``decide(observation) -> phase`` interface.

The engine calls ``decide`` for every intersection at every decision tick.
A controller must return the running phase whenever the signal is locked
(clearance or min green); fixed-time controllers always do and let the ring
clock drive the signal.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import qlearn
from .ctm import Approach, MovementKind
from .games import PRIORITY_AGENT, PRIVATE_AGENT, build_characteristic_fn, shapley_ratios, shapley_value
from .phases import N_PHASES, PHASES, PhaseModel, SignalState, TimingPlan, priority_phases, protected_movements
from .qlearn import PolicyTable, QTable, StateEncoder


class ControllerKind(str, enum.Enum):
    FIXED_TIME = "fixed-time"
    MB_TSP = "mb-tsp"
    MAX_PRESSURE = "max-pressure"
    MP_TSP = "mp-tsp"
    ASC_TSP = "asc-tsp"
    CBQL_TSP = "cbql-tsp"
    CBQL_NOTSP = "cbql-notsp"

    @property
    def tsp(self) -> bool:
        return self in (ControllerKind.MB_TSP, ControllerKind.MP_TSP, ControllerKind.ASC_TSP, ControllerKind.CBQL_TSP)


@dataclass
class Observation:
    """What a controller sees of one intersection at a decision tick.

    Queue counts are vehicles attributed to each left/through movement.
    ``downstream_queues`` are split-weighted counts on the receiving link.
    Delays are vehicle-seconds accumulated since the previous tick.
    """

    node: str
    signal: SignalState
    sim_time_s: float
    phase_queues: tuple[float, ...] = (0.0,) * N_PHASES
    movement_queues: Mapping[tuple[Approach, MovementKind], float] = field(default_factory=dict)
    downstream_queues: Mapping[tuple[Approach, MovementKind], float] = field(default_factory=dict)
    bus_present: bool = False
    bus_distance_m: float | None = None
    saturated_queue: float = 0.0
    car_delay_vs: float = 0.0
    bus_delay_vs: float = 0.0

    def __post_init__(self):
        if any(q < 0 for q in self.phase_queues) or any(q < 0 for q in self.movement_queues.values()):
            raise ValueError("queue counts must be non-negative")


def _locked(signal: SignalState) -> bool:
    return not signal.can_switch


def _must_leave(signal: SignalState, interval_s: float) -> bool:
    return signal.elapsed_in_phase_s + interval_s > signal.plan.max_green_s + 1e-9


def _argmax_lowest(values: Sequence[float], exclude: int | None = None) -> int:
    best, best_v = None, -np.inf
    for p, v in zip(PHASES, values):
        if p == exclude:
            continue
        if best is None or v > best_v:
            best, best_v = p, v
    return best


class Controller:
    kind: ControllerKind
    ring = False

    def timing_plan(self, base: TimingPlan, model: PhaseModel) -> TimingPlan:
        return base

    def reset(self, seed: int = 0):
        pass

    def decide(self, obs: Observation) -> int:
        raise NotImplementedError

    def end_episode(self):
        pass


class FixedTimeController(Controller):
    """Ring of all eight phases on a fixed plan.

    ``priority_weight > 1`` lengthens the priority phases (passive priority).
    """

    ring = True

    def __init__(self, priority_weight: float = 1.0):
        if priority_weight <= 0:
            raise ValueError("priority_weight must be positive")
        self.priority_weight = priority_weight
        self.kind = ControllerKind.FIXED_TIME if priority_weight == 1.0 else ControllerKind.MB_TSP

    def timing_plan(self, base: TimingPlan, model: PhaseModel) -> TimingPlan:
        if self.priority_weight == 1.0:
            return base
        prio = priority_phases(model)
        weights = [self.priority_weight if p in prio else 1.0 for p in PHASES]
        return TimingPlan.from_weights(weights, cycle_s=base.cycle_s, min_green_s=base.min_green_s,
                                       max_green_s=base.max_green_s, intergreen_s=base.intergreen_s)

    def decide(self, obs: Observation) -> int:
        return obs.signal.current_phase


def pressure(obs: Observation, phase: int) -> float:
    """Sum over the phase's protected movements of upstream minus split-weighted downstream queue."""
    total = 0.0
    for key in protected_movements(phase, obs.signal.model):
        total += obs.movement_queues.get(key, 0.0) - obs.downstream_queues.get(key, 0.0)
    return total


class MaxPressureController(Controller):
    """Greedy max-pressure phase choice; with ``tsp`` a bonus B goes to priority phases when a bus is near."""

    def __init__(self, tsp: bool = False, bonus_factor: float = 5.0, interval_s: float = 5.0):
        self.tsp = tsp
        self.bonus_factor = bonus_factor
        self.interval_s = interval_s
        self.kind = ControllerKind.MP_TSP if tsp else ControllerKind.MAX_PRESSURE

    def pressures(self, obs: Observation) -> list[float]:
        values = [pressure(obs, p) for p in PHASES]
        if self.tsp and obs.bus_present:
            bonus = self.bonus_factor * obs.saturated_queue
            prio = priority_phases(obs.signal.model)
            values = [v + bonus if p in prio else v for p, v in zip(PHASES, values)]
        return values

    def decide(self, obs: Observation) -> int:
        sig = obs.signal
        if _locked(sig):
            return sig.current_phase
        values = self.pressures(obs)
        exclude = sig.current_phase if _must_leave(sig, self.interval_s) else None
        if self.tsp and obs.bus_present:
            # an exact tie with the bonus applied goes to the priority phase
            prio = priority_phases(sig.model)
            candidates = [p for p in PHASES if p != exclude]
            return max(candidates, key=lambda p: (values[p - 1], p in prio, -p))
        return _argmax_lowest(values, exclude)


class ActuatedTSPController(Controller):
    """Vehicle-actuated ring with green extension and red truncation for buses."""

    def __init__(self, gap_veh: float = 2.0, interval_s: float = 5.0):
        self.gap_veh = gap_veh
        self.interval_s = interval_s
        self.kind = ControllerKind.ASC_TSP

    def decide(self, obs: Observation) -> int:
        sig = obs.signal
        if _locked(sig):
            return sig.current_phase
        prio = priority_phases(sig.model)
        leave = _must_leave(sig, self.interval_s)
        if obs.bus_present:
            if sig.current_phase in prio and not leave:
                return sig.current_phase
            if sig.current_phase not in prio:
                ranked = sorted(prio, key=lambda p: (-obs.phase_queues[p - 1], p))
                return ranked[0]
        if not leave and obs.phase_queues[sig.current_phase - 1] > self.gap_veh:
            return sig.current_phase
        nxt = sig.current_phase % N_PHASES + 1
        return nxt


@dataclass
class AgentPair:
    """Tables of one intersection: priority and private agents share a policy."""

    q_priority: QTable = field(default_factory=QTable)
    q_private: QTable = field(default_factory=QTable)
    policy: PolicyTable = field(default_factory=PolicyTable)
    prev_state: tuple | None = None
    prev_action: int | None = None
    prev_time_s: float = 0.0
    acc_car: float = 0.0
    acc_bus: float = 0.0
    rate_car: float = 0.0
    rate_bus: float = 0.0
    prev_potential: tuple[float, float] = (0.0, 0.0)
    decisions: int = 0


class CBQLController(Controller):
    """Two-agent cooperative Q-learning controller.

    At every unlocked tick: encode state, score the Q-derived two-agent game
    at the new state, apply the learning updates for the previous decision,
    then sample the next phase.  With ``tsp`` the update bootstraps on the
    agent's Shapley value and, when a bus is on the priority approach, the
    action distribution is tilted by the Shapley ratios.  ``alpha=0`` leaves
    every table untouched, policy included.
    """

    def __init__(
        self,
        tsp: bool = True,
        epsilon: float = 0.1,
        a_f: float = 0.5,
        gamma: float = qlearn.DEFAULT_GAMMA,
        alpha: float | None = 0.05,
        tilt_weight: float = 0.5,
        bus_weight: float | None = None,
        car_weight: float = 1.5,
        key_layout: str = "ratio",
        bus_in_state: bool = True,
        tried_only: bool = True,
        smdp: bool = True,
        shaping: float = 1.0,
        interval_s: float = 5.0,
        learning: bool = True,
        seed: int = 0,
    ):
        self.tsp = tsp
        self.kind = ControllerKind.CBQL_TSP if tsp else ControllerKind.CBQL_NOTSP
        self.epsilon = epsilon
        self.a_f = a_f
        self.gamma = gamma
        self.alpha = alpha
        self.tilt_weight = tilt_weight
        self.bus_weight = (20.0 if tsp else car_weight) if bus_weight is None else bus_weight
        self.car_weight = car_weight
        self.encoder = StateEncoder(layout=key_layout)
        self.bus_in_state = bus_in_state
        self.tried_only = tried_only
        self.smdp = smdp
        self.shaping = shaping
        self.interval_s = interval_s
        self.learning = learning
        self.agents: dict[str, AgentPair] = {}
        self.rng = np.random.default_rng(seed)

    # -- lifecycle --------------------------------------------------------

    def reset(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.end_episode()

    def end_episode(self):
        for pair in self.agents.values():
            pair.prev_state = pair.prev_action = None
            pair.acc_car = pair.acc_bus = pair.rate_car = pair.rate_bus = 0.0
            pair.prev_potential = (0.0, 0.0)

    def freeze(self, epsilon: float = 0.0) -> "CBQLController":
        self.learning = False
        self.epsilon = epsilon
        return self

    def agent(self, node: str) -> AgentPair:
        if node not in self.agents:
            self.agents[node] = AgentPair()
        return self.agents[node]

    @property
    def total_decisions(self) -> int:
        return sum(p.decisions for p in self.agents.values())

    # -- decision ---------------------------------------------------------

    def _bus_flag(self, obs: Observation) -> tuple:
        if not self.bus_in_state:
            return ()
        if not obs.bus_present:
            return (0,)
        return (2,) if (obs.bus_distance_m or 0.0) <= 200.0 else (1,)

    def state_key(self, obs: Observation) -> tuple:
        _, key = qlearn.encode_state(obs.signal, obs.phase_queues, self.encoder, self._bus_flag(obs))
        return key

    def _rows(self, pair: AgentPair, state) -> tuple[np.ndarray, np.ndarray]:
        if self.tried_only:
            return pair.q_priority.tried_row(state), pair.q_private.tried_row(state)
        return pair.q_priority.row(state), pair.q_private.row(state)

    def game_values(self, pair: AgentPair, state) -> dict:
        game = build_characteristic_fn(*self._rows(pair, state))
        return {a: shapley_value(game, a) for a in (PRIORITY_AGENT, PRIVATE_AGENT)}

    def ratios(self, pair: AgentPair, state, phi: Mapping | None = None) -> dict:
        """Shapley ratios of the game measured from each agent's worst action.

        Shapley values shift one-for-one with a constant added to an agent's
        payoffs, so this is ``phi - min Q`` per agent.
        """
        phi = phi if phi is not None else self.game_values(pair, state)
        row_p, row_c = self._rows(pair, state)
        stake = {
            PRIORITY_AGENT: float(phi[PRIORITY_AGENT]) - float(row_p.min()),
            PRIVATE_AGENT: float(phi[PRIVATE_AGENT]) - float(row_c.min()),
        }
        r = shapley_ratios(stake)
        return {"priority": r[PRIORITY_AGENT], "private": r[PRIVATE_AGENT]}

    def _discount(self, elapsed_s: float) -> float:
        if not self.smdp:
            return self.gamma
        # a transition lasting k decision intervals is discounted k times
        return self.gamma ** (elapsed_s / self.interval_s)

    def _potential(self, pair: AgentPair) -> tuple[float, float]:
        """Shaping potential: minus the discounted delay if the latest rate persisted."""
        if not self.shaping:
            return 0.0, 0.0
        k = self.shaping * self.interval_s / (1.0 - self.gamma)
        return -k * self.bus_weight * pair.rate_bus, -k * self.car_weight * pair.rate_car

    def _learn(self, pair: AgentPair, state, phi, now_s: float):
        s, a = pair.prev_state, pair.prev_action
        gamma = self._discount(now_s - pair.prev_time_s)
        (old_bus, old_car), (new_bus, new_car) = pair.prev_potential, self._potential(pair)
        # potential-based shaping leaves the optimal policy unchanged
        r_bus = -self.bus_weight * pair.acc_bus + gamma * new_bus - old_bus
        r_car = -self.car_weight * pair.acc_car + gamma * new_car - old_car
        if self.tsp:
            qlearn.cbql_update(pair.q_priority, s, a, r_bus, float(phi[PRIORITY_AGENT]), self.alpha, gamma)
            qlearn.cbql_update(pair.q_private, s, a, r_car, float(phi[PRIVATE_AGENT]), self.alpha, gamma)
        else:
            qlearn.bellman_backup(pair.q_priority, s, a, r_bus, state, gamma, self.alpha,
                                  tried_only=self.tried_only)
            qlearn.bellman_backup(pair.q_private, s, a, r_car, state, gamma, self.alpha,
                                  tried_only=self.tried_only)
        team = pair.q_priority.row(s) + pair.q_private.row(s)
        if self.tried_only:
            # untried actions keep their default 0 but are not candidates for the argmax
            team[pair.q_private.visit_counts[s] == 0] = -np.inf
        qlearn.policy_improve(pair.policy, team, s, self.a_f)
        qlearn.update_max_return(pair.q_priority, a, r_bus, self.a_f)
        qlearn.update_max_return(pair.q_private, a, r_car, self.a_f)

    def decide(self, obs: Observation) -> int:
        pair = self.agent(obs.node)
        pair.acc_car += obs.car_delay_vs
        pair.acc_bus += obs.bus_delay_vs
        pair.rate_car = obs.car_delay_vs / self.interval_s
        pair.rate_bus = obs.bus_delay_vs / self.interval_s
        sig = obs.signal
        if _locked(sig):
            return sig.current_phase

        state = self.state_key(obs)
        phi = None
        if self.tsp:
            phi = self.game_values(pair, state)
        if self.learning and self.alpha != 0.0 and pair.prev_state is not None:
            self._learn(pair, state, phi, obs.sim_time_s)

        ratios = None
        if self.tsp and obs.bus_present:
            ratios = self.ratios(pair, state, phi)
        probs = qlearn.action_distribution(
            pair.policy, state, self.epsilon, ratios, priority_phases(sig.model), self.tilt_weight
        )
        if _must_leave(sig, self.interval_s):
            probs = probs.copy()
            probs[sig.current_phase - 1] = 0.0
            if probs.sum() <= 0.0:
                probs = np.ones(N_PHASES)
                probs[sig.current_phase - 1] = 0.0
        cdf = np.cumsum(probs)
        u = self.rng.random() * cdf[-1]
        action = int(min(np.searchsorted(cdf, u, side="right"), N_PHASES - 1)) + 1

        pair.prev_state, pair.prev_action, pair.prev_time_s = state, action, obs.sim_time_s
        pair.prev_potential = self._potential(pair)
        pair.acc_car = pair.acc_bus = 0.0
        pair.decisions += 1
        return action

    # -- persistence ------------------------------------------------------

    def save(self, path: str | Path):
        tables = {}
        for node, pair in sorted(self.agents.items()):
            tables[f"{node}/priority"] = pair.q_priority
            tables[f"{node}/private"] = pair.q_private
            tables[f"{node}/policy"] = pair.policy
        meta = {
            "kind": self.kind.value,
            "decisions": {node: pair.decisions for node, pair in sorted(self.agents.items())},
            "key_layout": self.encoder.layout,
            "bus_in_state": self.bus_in_state,
        }
        qlearn.save_tables(path, tables, meta)

    def load(self, path: str | Path) -> "CBQLController":
        tables, meta = qlearn.load_tables(path)
        if "key_layout" in meta:
            self.encoder = StateEncoder(layout=meta["key_layout"])
        self.bus_in_state = bool(meta.get("bus_in_state", self.bus_in_state))
        self.agents = {}
        for name, table in tables.items():
            node, role = name.split("/")
            pair = self.agent(node)
            if role == "priority":
                pair.q_priority = table
            elif role == "private":
                pair.q_private = table
            else:
                pair.policy = table
        for node, count in meta.get("decisions", {}).items():
            self.agent(node).decisions = int(count)
        return self


def make_controller(name: str | ControllerKind, params: Mapping | None = None, interval_s: float = 5.0,
                    seed: int = 0) -> Controller:
    kind = ControllerKind(name)
    params = dict(params or {})
    try:
        if kind is ControllerKind.FIXED_TIME:
            return FixedTimeController(**params)
        if kind is ControllerKind.MB_TSP:
            params.setdefault("priority_weight", 1.6)
            return FixedTimeController(**params)
        if kind in (ControllerKind.MAX_PRESSURE, ControllerKind.MP_TSP):
            return MaxPressureController(tsp=kind is ControllerKind.MP_TSP, interval_s=interval_s, **params)
        if kind is ControllerKind.ASC_TSP:
            return ActuatedTSPController(interval_s=interval_s, **params)
        checkpoint = params.pop("checkpoint", None)
        ctrl = CBQLController(tsp=kind is ControllerKind.CBQL_TSP, interval_s=interval_s, seed=seed, **params)
        if checkpoint is not None:
            ctrl.load(checkpoint).freeze(params.get("epsilon", 0.0))
        return ctrl
    except TypeError as exc:
        raise ValueError(f"bad parameters for controller {kind.value}: {exc}") from None
