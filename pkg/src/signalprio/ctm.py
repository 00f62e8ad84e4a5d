"""Two-class cell transmission model on a signalized link network.

Roads are cut into cells holding a bus density and a non-bus density
(vehicles per metre).  Each step every cell offers a sending flow, every cell
admits a receiving flow, and each connection between two cells carries
``min(sending, receiving, signal permission)``.  Class shares of a connection
flow follow the class densities of the sending cell.

Triangular fundamental diagram::

    S = min(rho * v, q_max)
    R = min(q_max, w * (rho_jam - rho))

Per-class density update::

    rho(t + dt) = rho(t) + dt / dx * (q_in - q_out)

Links that end at a signalized node split into per-movement turn bays (one
cell each); a bay discharges into its target link only while the movement is
permitted.  Diverges are FIFO: a full bay blocks the cell feeding it.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

FLOW_RULES = ("triangular", "paper-literal")
QUEUE_SPEED_FRACTION = 0.1
SPLIT_TOL = 1e-9


class ConservationViolation(RuntimeError):
    """A cell was asked to release more vehicles than it holds."""


class TopologyError(ValueError):
    """The link/node description is inconsistent."""


class MovementKind(str, enum.Enum):
    LEFT = "L"
    STRAIGHT = "S"
    RIGHT = "R"


class Approach(str, enum.Enum):
    """Direction of travel of the traffic arriving at an intersection."""

    EB = "EB"
    WB = "WB"
    NB = "NB"
    SB = "SB"

    @property
    def opposing(self) -> "Approach":
        return _OPPOSING[self]


_OPPOSING = {
    Approach.EB: Approach.WB,
    Approach.WB: Approach.EB,
    Approach.NB: Approach.SB,
    Approach.SB: Approach.NB,
}


@dataclass(frozen=True)
class CellParams:
    length_m: float = 100.0
    free_flow_speed_mps: float = 15.0
    jam_density_vpm: float = 0.2
    saturation_flow_vps: float = 0.5
    backward_wave_speed_mps: float = 5.0

    def __post_init__(self):
        for name in (
            "length_m",
            "free_flow_speed_mps",
            "jam_density_vpm",
            "saturation_flow_vps",
            "backward_wave_speed_mps",
        ):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        if self.free_flow_speed_mps * self.jam_density_vpm < self.saturation_flow_vps:
            raise ValueError("free-flow speed x jam density must reach the saturation flow")
        if self.backward_wave_speed_mps > self.free_flow_speed_mps:
            raise ValueError("backward wave speed cannot exceed the free-flow speed")

    @property
    def critical_density_vpm(self) -> float:
        return self.saturation_flow_vps / self.free_flow_speed_mps

    def with_lanes(self, lanes: float) -> "CellParams":
        """Aggregate ``lanes`` identical lanes into one cell."""
        return CellParams(
            length_m=self.length_m,
            free_flow_speed_mps=self.free_flow_speed_mps,
            jam_density_vpm=self.jam_density_vpm * lanes,
            saturation_flow_vps=self.saturation_flow_vps * lanes,
            backward_wave_speed_mps=self.backward_wave_speed_mps,
        )


@dataclass(frozen=True)
class CellState:
    bus_density_vpm: float = 0.0
    nonbus_density_vpm: float = 0.0
    last_outflow_bus_vps: float = 0.0
    last_outflow_nonbus_vps: float = 0.0


def total_density(cell_state: CellState) -> float:
    return cell_state.bus_density_vpm + cell_state.nonbus_density_vpm


def sending_flow(
    cell_state: CellState,
    params: CellParams,
    dt: float,
    flow_rule: str = "triangular",
) -> tuple[float, float]:
    """Per-class sending flow ``(bus, nonbus)`` in veh/s.

    ``"paper-literal"`` evaluates ``min(rho, v * dx) / dt`` per class and is
    kept only for side-by-side comparison with the triangular rule.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rb, rc = cell_state.bus_density_vpm, cell_state.nonbus_density_vpm
    if flow_rule == "paper-literal":
        cap = params.free_flow_speed_mps * params.length_m
        return min(rb, cap) / dt, min(rc, cap) / dt
    if flow_rule != "triangular":
        raise ValueError(f"unknown flow rule {flow_rule!r}")
    rho = rb + rc
    if rho <= 0.0:
        return 0.0, 0.0
    total = min(rho * params.free_flow_speed_mps, params.saturation_flow_vps)
    return total * (rb / rho), total * (rc / rho)


def receiving_flow(cell_state: CellState, params: CellParams, dt: float) -> float:
    if dt <= 0:
        raise ValueError("dt must be positive")
    space = params.jam_density_vpm - total_density(cell_state)
    return max(0.0, min(params.saturation_flow_vps, params.backward_wave_speed_mps * space))


def step_density(
    cell_state: CellState,
    inflow_vps: tuple[float, float],
    outflow_vps: tuple[float, float],
    dt: float,
    dx: float,
) -> CellState:
    """Apply one conservation step to a single cell.

    Flows are ``(bus, nonbus)`` pairs.  Raises :class:`ConservationViolation`
    when an outflow would remove more vehicles than the cell holds.
    """
    if min(inflow_vps) < 0 or min(outflow_vps) < 0:
        raise ValueError("flows must be non-negative")
    densities = (cell_state.bus_density_vpm, cell_state.nonbus_density_vpm)
    new = []
    for rho, q_in, q_out in zip(densities, inflow_vps, outflow_vps):
        if q_out * dt > rho * dx * (1 + 1e-12) + 1e-15:
            raise ConservationViolation(
                f"outflow {q_out * dt:.6g} veh exceeds cell content {rho * dx:.6g} veh"
            )
        new.append(max(0.0, rho + dt / dx * (q_in - q_out)))
    return CellState(new[0], new[1], outflow_vps[0], outflow_vps[1])


def equilibrium_speed(density: float, params: CellParams) -> float:
    """Speed on the fundamental diagram at ``density``; zero at jam."""
    if density <= 0.0:
        return params.free_flow_speed_mps
    flow = min(
        params.free_flow_speed_mps * density,
        params.saturation_flow_vps,
        params.backward_wave_speed_mps * max(0.0, params.jam_density_vpm - density),
    )
    return flow / density


@dataclass
class Movement:
    kind: MovementKind
    split_fraction: float
    to_link: str
    bay: CellParams | None = None

    def __post_init__(self):
        self.kind = MovementKind(self.kind)
        if not 0.0 <= self.split_fraction <= 1.0:
            raise ValueError(f"split fraction {self.split_fraction} outside [0, 1]")


@dataclass
class Link:
    id: str
    upstream_node: str
    downstream_node: str
    cells: list[CellParams]
    movements: list[Movement] = field(default_factory=list)
    approach: Approach | None = None

    def __post_init__(self):
        if not self.cells:
            raise TopologyError(f"link {self.id} has no cells")
        if self.approach is not None:
            self.approach = Approach(self.approach)
        if self.movements:
            total = sum(m.split_fraction for m in self.movements)
            if abs(total - 1.0) > SPLIT_TOL:
                raise TopologyError(f"link {self.id}: split fractions sum to {total}, not 1")

    @classmethod
    def uniform(
        cls,
        id: str,
        upstream_node: str,
        downstream_node: str,
        length_m: float,
        params: CellParams = CellParams(),
        **kwargs,
    ) -> "Link":
        n = max(1, round(length_m / params.length_m))
        return cls(id, upstream_node, downstream_node, [params] * n, **kwargs)

    @property
    def length_m(self) -> float:
        return sum(c.length_m for c in self.cells)

    def movement_to(self, link_id: str) -> Movement:
        for m in self.movements:
            if m.to_link == link_id:
                return m
        raise TopologyError(f"link {self.id} has no movement into {link_id}")


@dataclass(frozen=True)
class Origin:
    node: str
    link: str


@dataclass
class BusTag:
    id: int
    route: tuple[str, ...]
    current_link: str
    position_m: float = 0.0
    entry_time_s: float = 0.0
    exit_time_s: float | None = None

    @property
    def travel_time_s(self) -> float | None:
        if self.exit_time_s is None:
            return None
        return self.exit_time_s - self.entry_time_s


@dataclass
class StepMetrics:
    """Bookkeeping for one call of :func:`advance_network`.

    ``link_queue`` is aligned with ``Network.link_ids``; pairs are
    ``(bus, nonbus)`` vehicle counts.
    """

    time_s: float
    link_queue: np.ndarray
    injected: tuple[float, float]
    exited: tuple[float, float]
    vehicles: tuple[float, float]
    origin_queue: tuple[float, float]
    waiting_nonbus: float
    delay_rate_nonbus: float
    link_ids: Sequence[str] = ()

    @property
    def queue_by_link(self) -> dict[str, float]:
        return dict(zip(self.link_ids, self.link_queue.tolist()))

    @property
    def total_inflow(self) -> float:
        return sum(self.injected)

    @property
    def total_outflow(self) -> float:
        return sum(self.exited)


class Network:
    """Cell network with all state held in flat numpy arrays.

    ``nodes`` lists node identifiers, ``links`` the :class:`Link` objects,
    ``origins`` the entry points fed by :func:`inject_demand` and
    ``destinations`` the links whose last cell drains into an unbounded sink.
    A link that ends at a node present in the ``signal_states`` mapping given
    to :func:`advance_network` has its movements gated by that signal.
    """

    def __init__(
        self,
        nodes: Iterable[str],
        links: Iterable[Link],
        origins: Iterable[Origin | tuple[str, str]] = (),
        destinations: Iterable[str] = (),
        flow_rule: str = "triangular",
    ):
        if flow_rule not in FLOW_RULES:
            raise ValueError(f"flow_rule must be one of {FLOW_RULES}, got {flow_rule!r}")
        self.flow_rule = flow_rule
        self.nodes = tuple(nodes)
        self.links: dict[str, Link] = {}
        for link in links:
            if link.id in self.links:
                raise TopologyError(f"duplicate link id {link.id}")
            self.links[link.id] = link
        self.origins = tuple(o if isinstance(o, Origin) else Origin(*o) for o in origins)
        self.destinations = tuple(destinations)
        self._validate()
        self._compile()
        self.reset()

    # -- construction -----------------------------------------------------

    def _validate(self):
        node_set = set(self.nodes)
        for link in self.links.values():
            for end in (link.upstream_node, link.downstream_node):
                if end not in node_set:
                    raise TopologyError(f"link {link.id} references unknown node {end}")
            for m in link.movements:
                if m.to_link not in self.links:
                    raise TopologyError(f"link {link.id}: movement targets missing link {m.to_link}")
                if self.links[m.to_link].upstream_node != link.downstream_node:
                    raise TopologyError(
                        f"link {link.id}: movement target {m.to_link} does not start at "
                        f"{link.downstream_node}"
                    )
            if not link.movements and link.id not in self.destinations:
                raise TopologyError(f"link {link.id} has no movements and is not a destination")
        for o in self.origins:
            if o.link not in self.links:
                raise TopologyError(f"origin references missing link {o.link}")
            if o.node not in node_set:
                raise TopologyError(f"origin references unknown node {o.node}")
        for d in self.destinations:
            if d not in self.links:
                raise TopologyError(f"destination references missing link {d}")

    def _compile(self):
        params: list[CellParams] = []
        cell_link: list[int] = []
        cell_bay: list[bool] = []
        self.link_ids = tuple(self.links)
        self.link_index = {lid: i for i, lid in enumerate(self.link_ids)}
        self.link_cells: dict[str, np.ndarray] = {}
        self.link_bays: dict[str, dict[str, int]] = {}

        for lid, link in self.links.items():
            li = self.link_index[lid]
            start = len(params)
            for p in link.cells:
                params.append(p)
                cell_link.append(li)
                cell_bay.append(False)
            self.link_cells[lid] = np.arange(start, len(params))
            bays = {}
            for m in link.movements:
                if m.bay is not None:
                    bays[m.to_link] = len(params)
                    params.append(m.bay)
                    cell_link.append(li)
                    cell_bay.append(True)
            self.link_bays[lid] = bays

        n = len(params)
        self.n_cells = n
        self.sink = n
        self.cell_params = tuple(params)
        self.dx = np.array([p.length_m for p in params])
        self.v = np.array([p.free_flow_speed_mps for p in params])
        self.jam = np.array([p.jam_density_vpm for p in params])
        self.qmax = np.array([p.saturation_flow_vps for p in params])
        self.w = np.array([p.backward_wave_speed_mps for p in params])
        self.cell_link = np.array(cell_link, dtype=np.intp)
        self.cell_is_bay = np.array(cell_bay, dtype=bool)

        # gate keys grouped per node
        gate_keys: list[tuple[str, Approach, MovementKind]] = []
        gate_id: dict[tuple[str, Approach, MovementKind], int] = {}

        def gate_for(link: Link, m: Movement) -> int:
            if link.approach is None:
                return -1
            key = (link.downstream_node, link.approach, m.kind)
            if key not in gate_id:
                gate_id[key] = len(gate_keys)
                gate_keys.append(key)
            return gate_id[key]

        conns: list[tuple[int, int, float, int]] = []  # src, dst, frac, gate
        self.route_conn: dict[tuple[str, str], tuple[int, int, int]] = {}
        for lid, link in self.links.items():
            cells = self.link_cells[lid]
            for a, b in zip(cells[:-1], cells[1:]):
                conns.append((a, b, 1.0, -1))
            last = int(cells[-1])
            if not link.movements:
                conns.append((last, self.sink, 1.0, -1))
                continue
            for m in link.movements:
                target = int(self.link_cells[m.to_link][0])
                g = gate_for(link, m)
                bay = self.link_bays[lid].get(m.to_link)
                if bay is None:
                    conns.append((last, target, m.split_fraction, g))
                    self.route_conn[(lid, m.to_link)] = (last, target, g)
                else:
                    conns.append((last, bay, m.split_fraction, -1))
                    conns.append((bay, target, 1.0, g))
                    self.route_conn[(lid, m.to_link)] = (bay, target, g)
            if lid in self.destinations:
                raise TopologyError(f"destination link {lid} cannot also have movements")

        conns.sort(key=lambda c: c[0])
        src = np.array([c[0] for c in conns], dtype=np.intp)
        if not np.array_equal(np.unique(src), np.arange(n)):
            raise TopologyError("every cell needs at least one outgoing connection")
        self.conn_src = src
        self.conn_dst = np.array([c[1] for c in conns], dtype=np.intp)
        self.conn_frac = np.array([c[2] for c in conns])
        gates = np.array([c[3] for c in conns], dtype=np.intp)
        self.n_gates = len(gate_keys)
        self.conn_gate = np.where(gates < 0, self.n_gates, gates)
        self.conn_zero_split = self.conn_frac <= 0.0
        self.src_starts = np.searchsorted(src, np.arange(n))
        self.gate_keys = tuple(gate_keys)

        self.gate_nodes: dict[str, tuple[np.ndarray, tuple[tuple[Approach, MovementKind], ...]]] = {}
        by_node: dict[str, list[int]] = {}
        for i, (node, _, _) in enumerate(gate_keys):
            by_node.setdefault(node, []).append(i)
        for node, idx in by_node.items():
            self.gate_nodes[node] = (
                np.array(idx, dtype=np.intp),
                tuple((gate_keys[i][1], gate_keys[i][2]) for i in idx),
            )
        self.signalized_nodes = tuple(by_node)

        self.origin_cell = np.array([self.link_cells[o.link][0] for o in self.origins], dtype=np.intp)
        self.origin_index = {o: i for i, o in enumerate(self.origins)}

    def reset(self):
        n = self.n_cells
        self.bus_density = np.zeros(n)
        self.nonbus_density = np.zeros(n)
        self.out_bus = np.zeros(n)
        self.out_nonbus = np.zeros(n)
        self.origin_queue = np.zeros((len(self.origins), 2))
        self.gate = np.ones(self.n_gates + 1)
        self.time_s = 0.0
        self._injected = np.zeros(2)
        self._cfl_ok_dt = None

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    # -- state access -------------------------------------------------------

    def cell_state(self, index: int) -> CellState:
        return CellState(
            float(self.bus_density[index]),
            float(self.nonbus_density[index]),
            float(self.out_bus[index]),
            float(self.out_nonbus[index]),
        )

    def link_cell_states(self, link_id: str) -> list[tuple[CellParams, CellState]]:
        idx = list(self.link_cells[link_id]) + list(self.link_bays[link_id].values())
        return [(self.cell_params[i], self.cell_state(i)) for i in idx]

    def set_density(self, link_id: str, position: int, bus: float = 0.0, nonbus: float = 0.0):
        i = self.link_cells[link_id][position]
        if bus < 0 or nonbus < 0 or bus + nonbus > self.jam[i] + 1e-12:
            raise ValueError("densities must be non-negative and within jam density")
        self.bus_density[i] = bus
        self.nonbus_density[i] = nonbus

    def cell_vehicles(self) -> tuple[np.ndarray, np.ndarray]:
        return self.bus_density * self.dx, self.nonbus_density * self.dx

    def vehicle_count(self, include_origin_queues: bool = False) -> float:
        total = float(np.dot(self.bus_density + self.nonbus_density, self.dx))
        if include_origin_queues:
            total += float(self.origin_queue.sum())
        return total

    def cell_speed(self) -> np.ndarray:
        """Space-mean speed of the last step: outflow over density (free speed if empty)."""
        rho = self.bus_density + self.nonbus_density
        out = self.out_bus + self.out_nonbus
        return np.divide(out, rho, out=self.v.copy(), where=rho > 0.0)

    def queued_mask(self) -> np.ndarray:
        rho = self.bus_density + self.nonbus_density
        return (rho > 0.0) & (self.cell_speed() < QUEUE_SPEED_FRACTION * self.v)

    def receiving(self) -> np.ndarray:
        rho = self.bus_density + self.nonbus_density
        return np.maximum(0.0, np.minimum(self.qmax, self.w * (self.jam - rho)))

    def check_cfl(self, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if np.any(self.v * dt > self.dx * (1 + 1e-12)) or np.any(self.w * dt > self.dx * (1 + 1e-12)):
            raise ValueError(f"dt={dt} violates the CFL condition v*dt <= dx for some cell")

    # -- dynamics -------------------------------------------------------------

    def _update_gates(self, signal_states: Mapping[str, object] | None):
        gate = self.gate
        for node, (idx, keys) in self.gate_nodes.items():
            if signal_states is None or node not in signal_states:
                raise KeyError(f"no signal state supplied for signalized node {node!r}")
            gate[idx] = signal_states[node].gates(keys)

    def step(self, signal_states: Mapping[str, object] | None, dt: float) -> StepMetrics:
        if dt != self._cfl_ok_dt:
            self.check_cfl(dt)
            self._cfl_ok_dt = dt
        if self.n_gates:
            self._update_gates(signal_states)
        n = self.n_cells
        rb, rc = self.bus_density, self.nonbus_density
        rho = rb + rc
        if self.flow_rule == "triangular":
            send = np.minimum(rho * self.v, self.qmax)
        else:
            cap = self.v * self.dx
            send = (np.minimum(rb, cap) + np.minimum(rc, cap)) / dt
        recv = np.empty(n + 1)
        np.minimum(self.qmax, self.w * (self.jam - rho), out=recv[:n])
        np.maximum(recv[:n], 0.0, out=recv[:n])
        recv[n] = np.inf

        src, dst, frac = self.conn_src, self.conn_dst, self.conn_frac
        g = self.gate[self.conn_gate]
        demand = send[src] * frac * g
        requested = np.bincount(dst, demand, minlength=n + 1)
        admit = np.ones(n + 1)
        with np.errstate(over="ignore"):
            np.divide(recv, requested, out=admit, where=requested > 0.0)
        np.minimum(admit, 1.0, out=admit)
        passing = g * admit[dst]
        passing[self.conn_zero_split] = 1.0
        fifo = np.minimum.reduceat(passing, self.src_starts)

        flow = send[src] * frac * fifo[src]
        bus_share = np.divide(rb, rho, out=np.zeros(n), where=rho > 0.0)
        flow_bus = flow * bus_share[src]
        flow_nonbus = flow - flow_bus
        np.maximum(flow_nonbus, 0.0, out=flow_nonbus)

        out_b = np.bincount(src, flow_bus, minlength=n)
        out_c = np.bincount(src, flow_nonbus, minlength=n)
        in_b = np.bincount(dst, flow_bus, minlength=n + 1)
        in_c = np.bincount(dst, flow_nonbus, minlength=n + 1)

        tol = 1e-12 + 1e-12 * rho * self.dx
        if ((out_b * dt > rb * self.dx + tol) | (out_c * dt > rc * self.dx + tol)).any():
            raise ConservationViolation("cell outflow exceeds cell content; check CFL and flow rule")

        ratio = dt / self.dx
        self.bus_density = np.maximum(rb + ratio * (in_b[:n] - out_b), 0.0)
        self.nonbus_density = np.maximum(rc + ratio * (in_c[:n] - out_c), 0.0)
        self.out_bus, self.out_nonbus = out_b, out_c
        self.time_s += dt

        injected = (float(self._injected[0]), float(self._injected[1]))
        self._injected[:] = 0.0
        return self._metrics(injected, (float(in_b[n] * dt), float(in_c[n] * dt)))

    def _metrics(self, injected, exited) -> StepMetrics:
        nb, nc = self.cell_vehicles()
        speed = self.cell_speed()
        queued = (nb + nc > 0.0) & (speed < QUEUE_SPEED_FRACTION * self.v)
        link_queue = np.bincount(self.cell_link, (nb + nc) * queued, minlength=len(self.link_ids))
        oq = self.origin_queue.sum(axis=0) if len(self.origins) else np.zeros(2)
        lag = 1.0 - speed / self.v
        np.maximum(lag, 0.0, out=lag)
        np.minimum(lag, 1.0, out=lag)
        delay = float(np.dot(nc, lag))
        return StepMetrics(
            time_s=self.time_s,
            link_queue=link_queue,
            injected=injected,
            exited=exited,
            vehicles=(float(nb.sum()), float(nc.sum())),
            origin_queue=(float(oq[0]), float(oq[1])),
            waiting_nonbus=float(np.dot(nc, queued)) + float(oq[1]),
            delay_rate_nonbus=delay + float(oq[1]),
            link_ids=self.link_ids,
        )

    def enqueue(self, origin: Origin | tuple[str, str], bus: float = 0.0, nonbus: float = 0.0):
        """Add vehicles to an origin's virtual queue without moving them in."""
        i = self.origin_index[origin if isinstance(origin, Origin) else Origin(*origin)]
        self.origin_queue[i, 0] += bus
        self.origin_queue[i, 1] += nonbus


def advance_network(
    network: Network,
    signal_states: Mapping[str, object] | None,
    dt: float,
) -> tuple[Network, StepMetrics]:
    """Advance every cell by ``dt`` seconds (in place) and report step metrics.

    ``signal_states`` maps each signalized node to an object exposing
    ``gates(keys) -> sequence of float`` where ``keys`` are
    ``(Approach, MovementKind)`` pairs; a gate of 0 stops the movement, 1
    grants full saturation flow, values in between scale it (permissive turns).
    """
    metrics = network.step(signal_states, dt)
    return network, metrics


def _as_rates(rate_vph) -> tuple[float, float]:
    if isinstance(rate_vph, Mapping):
        return float(rate_vph.get("bus", 0.0)), float(rate_vph.get("nonbus", 0.0))
    if isinstance(rate_vph, (int, float)):
        return 0.0, float(rate_vph)
    bus, nonbus = rate_vph
    return float(bus), float(nonbus)


def inject_demand(
    network: Network,
    origin: Origin | tuple[str, str],
    rate_vph,
    dt: float,
    rng: np.random.Generator | None = None,
) -> Network:
    """Generate arrivals at ``origin`` and admit what the entry cell can receive.

    ``rate_vph`` is ``(bus, nonbus)``, a mapping with those keys, or a single
    number for non-bus traffic.  Arrivals are a deterministic fluid unless an
    ``rng`` is given, in which case they are Poisson per step.  Vehicles that
    do not fit wait in the origin's virtual queue.
    """
    rates = _as_rates(rate_vph)
    o = origin if isinstance(origin, Origin) else Origin(*origin)
    i = network.origin_index[o]
    table = np.zeros((len(network.origins), 2))
    table[i] = rates
    mask = np.zeros(len(network.origins), dtype=bool)
    mask[i] = True
    return inject_demands(network, table, dt, rng, mask)


def inject_demands(
    network: Network,
    rates_vph: np.ndarray,
    dt: float,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Network:
    """Vectorised :func:`inject_demand` for every origin at once.

    ``rates_vph`` has one ``(bus, nonbus)`` row per origin.  ``mask`` limits
    the update to some origins.  Origins are assumed to feed distinct cells.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    rates = np.asarray(rates_vph, dtype=float)
    if rates.shape != (len(network.origins), 2):
        raise ValueError("need one (bus, nonbus) rate row per origin")
    if np.any(rates < 0):
        raise ValueError("demand rates must be non-negative")
    idx = np.arange(len(network.origins)) if mask is None else np.flatnonzero(mask)
    mean = rates[idx] / 3600.0 * dt
    arrivals = rng.poisson(mean).astype(float) if rng is not None else mean
    queue = network.origin_queue[idx] + arrivals

    cells = network.origin_cell[idx]
    rho = network.bus_density[cells] + network.nonbus_density[cells]
    space = np.maximum(0.0, np.minimum(network.qmax[cells], network.w[cells] * (network.jam[cells] - rho))) * dt
    waiting = queue.sum(axis=1)
    take = np.minimum(waiting, space)
    frac = np.divide(take, waiting, out=np.zeros_like(take), where=waiting > 0.0)
    moved = queue * frac[:, None]
    network.origin_queue[idx] = np.maximum(queue - moved, 0.0)
    network.bus_density[cells] += moved[:, 0] / network.dx[cells]
    network.nonbus_density[cells] += moved[:, 1] / network.dx[cells]
    network._injected += moved.sum(axis=0)
    return network


def _tag_cell(network: Network, tag: BusTag) -> tuple[int, float]:
    """Cell index under the tag and the length available on its link."""
    cells = network.link_cells[tag.current_link]
    main_len = float(network.dx[cells].sum())
    leg = tag.route.index(tag.current_link)
    bay = None
    if leg + 1 < len(tag.route):
        bay = network.link_bays[tag.current_link].get(tag.route[leg + 1])
    length = main_len + (network.dx[bay] if bay is not None else 0.0)
    if tag.position_m >= main_len and bay is not None:
        return bay, length
    edges = np.cumsum(network.dx[cells])
    k = min(int(np.searchsorted(edges, tag.position_m, side="right")), len(cells) - 1)
    return int(cells[k]), length


def advance_buses(
    network: Network,
    bus_tags: Sequence[BusTag],
    dt: float,
) -> tuple[list[BusTag], list[BusTag]]:
    """Move discrete bus tags at the local equilibrium speed.

    Call after :func:`advance_network` so gate values and densities describe
    the same instant.  A tag reaching the end of its link moves on only if the
    serving movement is open and the next link can receive; otherwise it waits
    at the stop line.  Returns ``(active, completed)``.
    """
    active: list[BusTag] = []
    completed: list[BusTag] = []
    t_end = network.time_s
    # rearmost position placed so far on each link; tags never pass it
    tail: dict[str, float] = {}
    crossing: list[tuple[BusTag, str, float]] = []
    ordered = sorted(bus_tags, key=lambda b: (b.current_link, -b.position_m, b.entry_time_s, b.id))
    recv = network.receiving()
    for tag in ordered:
        cell, length = _tag_cell(network, tag)
        rho = network.bus_density[cell] + network.nonbus_density[cell]
        speed = equilibrium_speed(float(rho), network.cell_params[cell])
        pos = tag.position_m + speed * dt
        leg = tag.route.index(tag.current_link)
        held = tag.current_link in tail
        if pos >= length and not held:
            if leg + 1 == len(tag.route):
                overshoot = (pos - length) / speed if speed > 0 else 0.0
                tag.position_m = length
                tag.exit_time_s = t_end - overshoot
                completed.append(tag)
                continue
            nxt = tag.route[leg + 1]
            _, target, g = network.route_conn[(tag.current_link, nxt)]
            gate = network.gate[g] if g >= 0 else 1.0
            if gate > 0.0 and recv[target] > 0.0:
                crossing.append((tag, nxt, pos - length))
                continue
        tag.position_m = min(pos, length, tail.get(tag.current_link, length))
        tail[tag.current_link] = tag.position_m
        active.append(tag)
    # arrivals queue behind whatever already occupies the downstream link
    for tag, nxt, pos in crossing:
        tag.current_link = nxt
        tag.position_m = min(pos, network.links[nxt].length_m, tail.get(nxt, float("inf")))
        tail[nxt] = tag.position_m
        active.append(tag)
    active.sort(key=lambda b: b.id)
    return active, completed
