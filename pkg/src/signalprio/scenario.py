"""Scenario configuration and the built-in test networks.

Scenario files are JSON objects.  Every key is optional; unknown keys are an
error so that typos surface instead of silently falling back to defaults.
See ``ScenarioConfig`` for the schema.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .ctm import Approach, CellParams, Link, Movement, MovementKind, Network, Origin
from .phases import PhaseModel, RouteKind, SignalState, TimingPlan

CONTROLLER_NAMES = (
    "fixed-time",
    "mb-tsp",
    "max-pressure",
    "mp-tsp",
    "asc-tsp",
    "cbql-tsp",
    "cbql-notsp",
)
NETWORKS = ("arterial5", "two-intersection")
LEFT_MODES = ("auto", "protected", "permissive")

L, S, R = MovementKind.LEFT, MovementKind.STRAIGHT, MovementKind.RIGHT
EB, WB, NB, SB = Approach.EB, Approach.WB, Approach.NB, Approach.SB


class ConfigError(ValueError):
    """Invalid scenario configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DemandPulse:
    start_s: float
    end_s: float
    vph: float


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to reproduce one run.

    ``demand_vph`` is the total private-car demand, split over the origins by
    ``demand_weights`` (keys ``arterial`` and ``cross``: share of one arterial
    end and of one cross-street end).  ``turn_splits`` gives L/S/R fractions
    for arterial and cross-street approaches.
    """

    network: str = "arterial5"
    demand_vph: float = 6000.0
    demand_weights: Mapping[str, float] = field(
        default_factory=lambda: {"arterial": 0.15, "cross": 0.07}
    )
    turn_splits: Mapping[str, tuple] = field(
        default_factory=lambda: {"arterial": (0.1, 0.8, 0.1), "cross": (0.2, 0.6, 0.2)}
    )
    arterial_lanes: int = 2
    cross_lanes: int = 1
    link_length_m: float = 400.0
    bus_headway_min: float = 30.0
    bus_offset_s: float | None = None
    duration_s: float = 7200.0
    warmup_s: float = 900.0
    dt_s: float = 1.0
    decision_interval_s: float = 5.0
    flow_rule: str = "triangular"
    arrivals: str = "fluid"
    controller: str = "fixed-time"
    controller_params: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0
    phase_model: str = "straight"
    left_mode: str = "auto"
    cycle_s: float = 120.0
    min_green_s: float = 8.0
    max_green_s: float = 60.0
    intergreen_s: float = 4.0
    series_interval_s: float = 60.0
    demand_pulses: tuple = ()

    def __post_init__(self):
        def bad(name, msg):
            raise ConfigError(name, msg)

        if self.network not in NETWORKS:
            bad("network", f"unknown network {self.network!r}; choose from {', '.join(NETWORKS)}")
        if self.controller not in CONTROLLER_NAMES:
            bad("controller", f"unknown controller {self.controller!r}; choose from {', '.join(CONTROLLER_NAMES)}")
        for name in ("demand_vph",):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                bad(name, "must be a non-negative number")
        for name in ("bus_headway_min", "dt_s", "decision_interval_s", "cycle_s", "link_length_m",
                     "series_interval_s", "duration_s"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                bad(name, "must be a positive number")
        if not (isinstance(self.warmup_s, (int, float)) and 0 <= self.warmup_s < self.duration_s):
            bad("warmup_s", "must satisfy 0 <= warmup_s < duration_s")
        if self.flow_rule not in ("triangular", "paper-literal"):
            bad("flow_rule", "must be 'triangular' or 'paper-literal'")
        if self.arrivals not in ("fluid", "poisson"):
            bad("arrivals", "must be 'fluid' or 'poisson'")
        if self.left_mode not in LEFT_MODES:
            bad("left_mode", f"must be one of {', '.join(LEFT_MODES)}")
        if self.phase_model not in ("straight", "left"):
            bad("phase_model", "must be 'straight' or 'left'")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            bad("seed", "must be a non-negative integer")
        for name in ("arterial_lanes", "cross_lanes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                bad(name, "must be a positive integer")
        w = dict(self.demand_weights)
        if set(w) != {"arterial", "cross"} or min(w.values()) < 0:
            bad("demand_weights", "needs non-negative 'arterial' and 'cross' shares")
        for key, split in dict(self.turn_splits).items():
            if key not in ("arterial", "cross"):
                bad(f"turn_splits.{key}", "unknown approach class")
            if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
                bad(f"turn_splits.{key}", "needs three non-negative L/S/R fractions summing to 1")
        if self.bus_offset_s is not None and self.bus_offset_s < 0:
            bad("bus_offset_s", "must be non-negative")
        try:
            self.timing_plan()
        except ValueError as exc:
            bad("cycle_s", str(exc))
        object.__setattr__(
            self,
            "demand_pulses",
            tuple(p if isinstance(p, DemandPulse) else DemandPulse(**p) for p in self.demand_pulses),
        )

    def timing_plan(self, weights=None) -> TimingPlan:
        kwargs = dict(min_green_s=self.min_green_s, max_green_s=self.max_green_s,
                      intergreen_s=self.intergreen_s)
        if weights is not None:
            return TimingPlan.from_weights(weights, cycle_s=self.cycle_s, **kwargs)
        return TimingPlan(cycle_s=self.cycle_s, **kwargs)

    def phase_model_obj(self) -> PhaseModel:
        kind = RouteKind.STRAIGHT if self.phase_model == "straight" else RouteKind.LEFT_TURN
        return PhaseModel(kind=kind)

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["demand_weights"] = dict(self.demand_weights)
        d["turn_splits"] = {k: list(v) for k, v in self.turn_splits.items()}
        d["controller_params"] = dict(self.controller_params)
        d["demand_pulses"] = [asdict(p) for p in self.demand_pulses]
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        if not isinstance(data, Mapping):
            raise ConfigError("<root>", "scenario must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        kwargs = dict(data)
        if "turn_splits" in kwargs:
            defaults = cls().turn_splits
            kwargs["turn_splits"] = {**defaults, **{k: tuple(v) for k, v in kwargs["turn_splits"].items()}}
        if "demand_pulses" in kwargs:
            try:
                kwargs["demand_pulses"] = tuple(DemandPulse(**p) for p in kwargs["demand_pulses"])
            except TypeError as exc:
                raise ConfigError("demand_pulses", str(exc)) from None
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError("<root>", str(exc)) from None

    @classmethod
    def from_file(cls, path: str | Path) -> "ScenarioConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError("scenario", f"file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("scenario", f"{p} is not valid JSON ({exc})") from None
        return cls.from_dict(data)


@dataclass
class MovementInfo:
    node: str
    approach: Approach
    kind: MovementKind
    link: str
    to_link: str
    split: float


@dataclass
class Scenario:
    """A built network plus everything the engine needs to drive it."""

    network: Network
    signals: dict[str, SignalState]
    intersections: tuple[str, ...]
    origin_rates: dict[Origin, float]
    bus_origin: Origin | None
    bus_route: tuple[str, ...]
    bus_links: dict[str, str]  # intersection -> bus approach link
    movements: list[MovementInfo]
    model: PhaseModel
    car_approaches: dict[str, dict[Approach, str]]

    @property
    def free_flow_bus_time_s(self) -> float:
        return sum(self.network.links[l].length_m / self.network.links[l].cells[0].free_flow_speed_mps
                   for l in self.bus_route)


def _approach_link(lid, up, down, length, params, approach, moves, turn_bays):
    """Approach link of ``length`` m: main cells followed by one bay cell per movement."""
    n_main = max(1, round(length / params.length_m) - 1)
    movements = []
    for kind, frac, target, lanes in moves:
        bay = CellParams().with_lanes(lanes) if turn_bays else None
        movements.append(Movement(kind, frac, target, bay))
    return Link(lid, up, down, [params] * n_main, movements, approach)


def build_arterial5(config: ScenarioConfig = ScenarioConfig(), n_intersections: int = 5) -> Scenario:
    """Five four-leg intersections in series with an eastbound bus lane.

    Arterial links run W -> I1 .. In -> E and back; each intersection has a
    cross street from N_k and S_k.  Buses run eastbound end to end on a
    parallel single-lane link chain gated by the eastbound through signal.
    """
    base = CellParams()
    art = base.with_lanes(config.arterial_lanes)
    cross = base.with_lanes(config.cross_lanes)
    length = config.link_length_m
    exit_len = 200.0
    aL, aS, aR = config.turn_splits["arterial"]
    cL, cS, cR = config.turn_splits["cross"]
    k_ids = [f"I{k}" for k in range(1, n_intersections + 1)]
    n = n_intersections

    def eb_in(k):  # EB link entering intersection k (1-based)
        return f"EB{k}"

    def wb_in(k):
        return f"WB{k}"

    eb_out = lambda k: eb_in(k + 1) if k < n else "EBx"
    wb_out = lambda k: wb_in(k - 1) if k > 1 else "WBx"

    nodes = ["W", "E"] + k_ids + [f"N{k}" for k in range(1, n + 1)] + [f"S{k}" for k in range(1, n + 1)]
    links: list[Link] = []
    movements: list[MovementInfo] = []
    car_approaches: dict[str, dict[Approach, str]] = {}
    lanes_s = config.arterial_lanes

    for k in range(1, n + 1):
        node = f"I{k}"
        up_eb = "W" if k == 1 else f"I{k - 1}"
        up_wb = "E" if k == n else f"I{k + 1}"
        spec = {
            EB: (eb_in(k), up_eb, art, [(L, aL, f"Nx{k}", 1), (S, aS, eb_out(k), lanes_s), (R, aR, f"Sx{k}", 1)]),
            WB: (wb_in(k), up_wb, art, [(L, aL, f"Sx{k}", 1), (S, aS, wb_out(k), lanes_s), (R, aR, f"Nx{k}", 1)]),
            SB: (f"SB{k}", f"N{k}", cross, [(L, cL, eb_out(k), 1), (S, cS, f"Sx{k}", 1), (R, cR, wb_out(k), 1)]),
            NB: (f"NB{k}", f"S{k}", cross, [(L, cL, wb_out(k), 1), (S, cS, f"Nx{k}", 1), (R, cR, eb_out(k), 1)]),
        }
        car_approaches[node] = {}
        for approach, (lid, up, params, moves) in spec.items():
            moves = [m for m in moves if m[1] > 0]
            links.append(_approach_link(lid, up, node, length, params, approach, moves, True))
            car_approaches[node][approach] = lid
            for kind, frac, target, _ in moves:
                movements.append(MovementInfo(node, approach, kind, lid, target, frac))
        links.append(Link.uniform(f"Nx{k}", node, f"N{k}", exit_len, cross))
        links.append(Link.uniform(f"Sx{k}", node, f"S{k}", exit_len, cross))
    links.append(Link.uniform("EBx", f"I{n}", "E", exit_len, art))
    links.append(Link.uniform("WBx", "I1", "W", exit_len, art))

    # dedicated bus lane
    bus_route = []
    bus_links = {}
    for k in range(1, n + 1):
        lid = f"BUS{k}"
        up = "W" if k == 1 else f"I{k - 1}"
        nxt = f"BUS{k + 1}" if k < n else "BUSx"
        links.append(Link.uniform(lid, up, f"I{k}", length, base,
                                  movements=[Movement(S, 1.0, nxt)], approach=EB))
        bus_route.append(lid)
        bus_links[f"I{k}"] = lid
    links.append(Link.uniform("BUSx", f"I{n}", "E", 100.0, base))
    bus_route.append("BUSx")

    destinations = ["EBx", "WBx", "BUSx"] + [f"Nx{k}" for k in range(1, n + 1)] + [f"Sx{k}" for k in range(1, n + 1)]
    origins = [Origin("W", eb_in(1)), Origin("E", wb_in(n))]
    origins += [Origin(f"N{k}", f"SB{k}") for k in range(1, n + 1)]
    origins += [Origin(f"S{k}", f"NB{k}") for k in range(1, n + 1)]
    bus_origin = Origin("W", "BUS1")
    origins.append(bus_origin)

    network = Network(nodes, links, origins, destinations, flow_rule=config.flow_rule)
    wa, wc = config.demand_weights["arterial"], config.demand_weights["cross"]
    total_w = 2 * wa + 2 * n * wc
    rates = {}
    for o in origins:
        if o == bus_origin:
            continue
        share = wa if o.node in ("W", "E") else wc
        rates[o] = config.demand_vph * share / total_w if total_w > 0 else 0.0

    model = config.phase_model_obj()
    plan = config.timing_plan()
    signals = {node: SignalState(model=model, plan=plan) for node in k_ids}
    return Scenario(network, signals, tuple(k_ids), rates, bus_origin, tuple(bus_route), bus_links,
                    movements, model, car_approaches)


def build_two_intersection(config: ScenarioConfig = ScenarioConfig(network="two-intersection")) -> Scenario:
    """Two intersections of the arterial layout (used for stability smoke tests)."""
    return build_arterial5(config, n_intersections=2)


def build(config: ScenarioConfig) -> Scenario:
    if config.network == "arterial5":
        return build_arterial5(config)
    return build_two_intersection(config)


def reachable_destinations(network: Network, start_link: str) -> set[str]:
    """Destination links reachable from ``start_link`` by following movements."""
    seen, stack, found = set(), [start_link], set()
    while stack:
        lid = stack.pop()
        if lid in seen:
            continue
        seen.add(lid)
        link = network.links[lid]
        if not link.movements:
            found.add(lid)
        stack.extend(m.to_link for m in link.movements if m.split_fraction > 0)
    return found


def movement_matrix(scenario: Scenario) -> np.ndarray:
    """Rows = movements, columns = cells: vehicles attributable to each movement.

    A movement owns its bay cell plus its split share of the approach's main
    cells.
    """
    net = scenario.network
    m = np.zeros((len(scenario.movements), net.n_cells))
    for i, mv in enumerate(scenario.movements):
        m[i, net.link_cells[mv.link]] = mv.split
        bay = net.link_bays[mv.link].get(mv.to_link)
        if bay is not None:
            m[i, bay] = 1.0
    return m
