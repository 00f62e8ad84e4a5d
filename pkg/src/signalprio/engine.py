"""Run loop: demand, buses, CTM, signals and controllers advanced in lockstep."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .controllers import Controller, Observation, make_controller
from .ctm import BusTag, advance_buses, inject_demands
from .phases import LeftMode, left_mode_for, priority_phases, protected_movements, tick
from .phases import apply_action as _apply_action
from .scenario import Scenario, ScenarioConfig, build, movement_matrix

STABLE_SLOPE_VPS = 0.01


class Stability(str, enum.Enum):
    STABLE = "Stable"
    UNSTABLE = "Unstable"


@dataclass
class MetricsRecord:
    avg_waiting_private_cars: float
    avg_travel_time_s: float
    avg_bus_travel_time_s: float | None
    stability_statistic: float
    buses_completed: int
    series: dict[str, np.ndarray] = field(default_factory=dict)
    bus_travel_times_s: tuple[float, ...] = ()
    slope: float = 0.0
    stability: Stability = Stability.STABLE

    def row(self) -> dict:
        return {
            "avg_waiting": self.avg_waiting_private_cars,
            "avg_travel_time_s": self.avg_travel_time_s,
            "avg_bus_travel_time_s": self.avg_bus_travel_time_s,
            "stability": self.stability.value,
            "stability_statistic": self.stability_statistic,
            "slope": self.slope,
            "buses_completed": self.buses_completed,
        }


def trend_slope(times_s: Sequence[float], values: Sequence[float], window_s: float) -> float:
    """Least-squares slope (per second) of windowed means over the second half of the series."""
    t = np.asarray(times_s, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(t) == 0:
        return 0.0
    start, end = t[0], t[-1]
    half = start + (end - start) / 2.0
    edges = np.arange(half, end + 1e-9, window_s)
    centers, means = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (t >= lo) & (t < hi)
        if sel.any():
            centers.append((lo + hi) / 2.0)
            means.append(y[sel].mean())
    if len(centers) < 2:
        return 0.0
    return float(np.polyfit(centers, means, 1)[0])


def classify(slope: float) -> Stability:
    return Stability.STABLE if slope < STABLE_SLOPE_VPS else Stability.UNSTABLE


class Simulation:
    """One scenario wired to one controller.  ``run`` executes it to completion."""

    def __init__(self, config: ScenarioConfig, controller: Controller | None = None):
        self.config = config
        self.scenario: Scenario = build(config)
        self.controller = controller if controller is not None else make_controller(
            config.controller, config.controller_params, config.decision_interval_s, config.seed
        )
        self._prepare()

    # -- setup ------------------------------------------------------------

    def _prepare(self):
        sc, cfg = self.scenario, self.config
        net = sc.network
        ring = self.controller.ring
        self.signals = {}
        for node, sig in sc.signals.items():
            plan = self.controller.timing_plan(sig.plan, sig.model)
            model = sig.model
            if cfg.left_mode != "auto":
                model = model.with_left_mode(LeftMode(cfg.left_mode))
            self.signals[node] = replace(sig, plan=plan, model=model, ring=ring)

        self.nodes = sc.intersections
        node_index = {n: i for i, n in enumerate(self.nodes)}
        cell_node = np.full(net.n_cells, -1, dtype=np.intp)
        for node, approaches in sc.car_approaches.items():
            for lid in approaches.values():
                cell_node[net.link_cells[lid]] = node_index[node]
                for bay in net.link_bays[lid].values():
                    cell_node[bay] = node_index[node]
        self.cell_node = cell_node
        self._node_cells = cell_node >= 0
        self.origin_node = np.array(
            [node_index.get(net.links[o.link].downstream_node, -1) if o != sc.bus_origin else -1
             for o in net.origins],
            dtype=np.intp,
        )

        self.mov = movement_matrix(sc)
        mov_index = {(m.link, m.to_link): i for i, m in enumerate(sc.movements)}
        by_link: dict[str, list[int]] = {}
        for i, m in enumerate(sc.movements):
            by_link.setdefault(m.link, []).append(i)
        down = np.zeros((len(sc.movements), len(sc.movements)))
        for i, m in enumerate(sc.movements):
            for j in by_link.get(m.to_link, []):
                down[i, j] = sc.movements[j].split
        self.down = down
        self.node_movements = {n: [] for n in self.nodes}
        for i, m in enumerate(sc.movements):
            self.node_movements[m.node].append((i, (m.approach, m.kind)))
        cap = self.mov @ (net.jam * net.dx)
        self.saturated_queue = {
            n: float(np.mean([cap[i] for i, _ in self.node_movements[n]])) for n in self.nodes
        }
        self.bus_link_node = {lid: node for node, lid in sc.bus_links.items()}
        self.bus_speed = net.links[sc.bus_route[0]].cells[0].free_flow_speed_mps if sc.bus_route else 15.0
        self.approach_cells = {
            n: np.flatnonzero(cell_node == node_index[n]) for n in self.nodes
        }
        self.phase_models = {}

    # -- observations -----------------------------------------------------

    def _movement_counts(self) -> np.ndarray:
        veh = (self.net.bus_density + self.net.nonbus_density) * self.net.dx
        return self.mov @ veh

    @property
    def net(self):
        return self.scenario.network

    def observe(self, node: str, counts: np.ndarray, downstream: np.ndarray,
                car_delay: float, bus_delay: float) -> Observation:
        sig = self.signals[node]
        mq, dq = {}, {}
        for i, key in self.node_movements[node]:
            mq[key] = float(counts[i])
            dq[key] = float(downstream[i])
        phase_q = tuple(
            sum(mq.get(k, 0.0) for k in protected_movements(p, sig.model)) for p in range(1, 9)
        )
        dist = None
        bus_link = self.scenario.bus_links.get(node)
        for tag in self.tags:
            if tag.current_link == bus_link:
                d = self.net.links[bus_link].length_m - tag.position_m
                dist = d if dist is None else min(dist, d)
        return Observation(
            node=node, signal=sig, sim_time_s=self.net.time_s, phase_queues=phase_q,
            movement_queues=mq, downstream_queues=dq, bus_present=dist is not None,
            bus_distance_m=dist, saturated_queue=self.saturated_queue[node],
            car_delay_vs=car_delay, bus_delay_vs=bus_delay,
        )

    def saturation(self, node: str) -> float:
        """Mean occupancy (density over jam density) of the node's car approach cells."""
        cells = self.approach_cells[node]
        rho = self.net.bus_density[cells] + self.net.nonbus_density[cells]
        return float(np.mean(rho / self.net.jam[cells])) if len(cells) else 0.0

    # -- main loop --------------------------------------------------------

    def run(self, pulse_hook: Callable | None = None) -> MetricsRecord:
        cfg, sc = self.config, self.scenario
        net = sc.network
        net.reset()
        self.controller.reset(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        poisson_rng = np.random.default_rng([cfg.seed, 1]) if cfg.arrivals == "poisson" else None
        headway_s = cfg.bus_headway_min * 60.0
        offset = cfg.bus_offset_s if cfg.bus_offset_s is not None else float(rng.uniform(0.0, headway_s))
        offset = math.floor(offset / cfg.dt_s) * cfg.dt_s
        next_bus = offset
        dt = cfg.dt_s
        n_steps = int(round(cfg.duration_s / dt))
        decision_every = max(1, int(round(cfg.decision_interval_s / dt)))
        left_every = max(1, int(round(sc.signals[self.nodes[0]].plan.cycle_s / dt)))
        series_every = max(1, int(round(cfg.series_interval_s / dt)))
        self.tags: list[BusTag] = []
        completed: list[BusTag] = []
        bus_id = 0
        n_nodes = len(self.nodes)
        acc_car = np.zeros(n_nodes)
        acc_bus = np.zeros(n_nodes)
        origins = list(net.origins)
        rate_table = np.zeros((len(origins), 2))
        rate_table[:, 1] = [sc.origin_rates.get(o, 0.0) for o in origins]
        total_rate = float(rate_table.sum())

        waiting = np.empty(n_steps)
        vehicles = np.empty(n_steps)
        times = np.empty(n_steps)
        exited = np.empty(n_steps)
        warm_step = int(round(cfg.warmup_s / dt))

        for step in range(n_steps):
            t = step * dt
            scale = 1.0
            for pulse in cfg.demand_pulses:
                if pulse.start_s <= t < pulse.end_s and total_rate > 0:
                    scale += pulse.vph / total_rate
            if sc.bus_origin is not None:
                while next_bus <= t + 1e-9 and next_bus < cfg.duration_s:
                    net.enqueue(sc.bus_origin, bus=1.0)
                    self.tags.append(BusTag(bus_id, sc.bus_route, sc.bus_route[0], 0.0, next_bus))
                    bus_id += 1
                    next_bus += headway_s
            inject_demands(net, rate_table * scale if scale != 1.0 else rate_table, dt, poisson_rng)

            metrics = net.step(self.signals, dt)

            prev = {tag.id: (tag.current_link, tag.position_m) for tag in self.tags}
            self.tags, done = advance_buses(net, self.tags, dt)
            for tag in self.tags + done:
                link0, pos0 = prev[tag.id]
                moved = tag.position_m - pos0 if tag.current_link == link0 else (
                    net.links[link0].length_m - pos0 + tag.position_m)
                node = self.bus_link_node.get(link0)
                if node is not None:
                    acc_bus[self.nodes.index(node)] += max(0.0, dt - moved / self.bus_speed)
            completed.extend(done)

            speed = net.cell_speed()
            nc = net.nonbus_density * net.dx
            delay = nc * np.clip(1.0 - speed / net.v, 0.0, 1.0)
            sel = self._node_cells
            acc_car += np.bincount(self.cell_node[sel], delay[sel], minlength=n_nodes) * dt
            oq = net.origin_queue[:, 1]
            has = self.origin_node >= 0
            acc_car += np.bincount(self.origin_node[has], oq[has], minlength=n_nodes) * dt

            waiting[step] = metrics.waiting_nonbus
            vehicles[step] = net.vehicle_count(include_origin_queues=True)
            exited[step] = metrics.exited[0] + metrics.exited[1]
            times[step] = net.time_s

            for node in self.nodes:
                self.signals[node] = tick(self.signals[node], dt)

            if cfg.left_mode == "auto" and (step + 1) % left_every == 0:
                for node in self.nodes:
                    sig = self.signals[node]
                    mode = left_mode_for(self.saturation(node))
                    if mode is not sig.model.left_mode:
                        self.signals[node] = replace(sig, model=sig.model.with_left_mode(mode))

            if (step + 1) % decision_every == 0:
                counts = self._movement_counts()
                downstream = self.down @ counts
                for i, node in enumerate(self.nodes):
                    obs = self.observe(node, counts, downstream, float(acc_car[i]), float(acc_bus[i]))
                    action = self.controller.decide(obs)
                    self.signals[node] = _apply_action(self.signals[node], action)
                acc_car[:] = 0.0
                acc_bus[:] = 0.0

        self.controller.end_episode()
        self.completed = completed
        return self._record(times, waiting, vehicles, exited, warm_step, completed, series_every)

    def _record(self, times, waiting, vehicles, exited, warm_step, completed, series_every) -> MetricsRecord:
        cfg = self.config
        dt = cfg.dt_s
        w = slice(warm_step, len(times))
        n_exit = float(exited[w].sum())
        veh_seconds = float(vehicles[w].sum() * dt)
        avg_tt = veh_seconds / n_exit if n_exit > 1e-9 else 0.0
        bus_times = tuple(
            float(b.travel_time_s) for b in completed if b.entry_time_s >= cfg.warmup_s - 1e-9
        )
        slope = trend_slope(times[w], waiting[w], max(series_every * dt, 60.0) * 5)
        idx = np.arange(series_every - 1, len(times), series_every)
        series = {
            "time_s": times[idx],
            "waiting": np.array([waiting[max(0, i - series_every + 1): i + 1].mean() for i in idx]),
            "vehicles": np.array([vehicles[max(0, i - series_every + 1): i + 1].mean() for i in idx]),
            "exited": np.array([exited[max(0, i - series_every + 1): i + 1].sum() for i in idx]),
        }
        return MetricsRecord(
            avg_waiting_private_cars=float(waiting[w].mean()),
            avg_travel_time_s=avg_tt,
            avg_bus_travel_time_s=float(np.mean(bus_times)) if bus_times else None,
            stability_statistic=float(vehicles[w].mean()),
            buses_completed=len(bus_times),
            series=series,
            bus_travel_times_s=bus_times,
            slope=slope,
            stability=classify(slope),
        )


def run(config: ScenarioConfig, controller: Controller | None = None) -> MetricsRecord:
    return Simulation(config, controller).run()


def stability_probe(source, window_s: float = 300.0) -> tuple[Stability, float]:
    """Classify a run as Stable/Unstable from the trend of its waiting series.

    ``source`` is a :class:`ScenarioConfig` (run first), a :class:`MetricsRecord`
    or a ``(times, values)`` pair.
    """
    if isinstance(source, ScenarioConfig):
        source = run(source)
    if isinstance(source, MetricsRecord):
        times, values = source.series["time_s"], source.series["waiting"]
    else:
        times, values = source
    times = np.asarray(times, dtype=float)
    if len(times) >= 2 and times[-1] - times[0] < 4 * window_s - 1e-9:
        raise ValueError("series must span at least four windows")
    slope = trend_slope(times, values, window_s)
    return classify(slope), slope


def train_cbql(
    base: ScenarioConfig,
    controller,
    decision_steps: int = 200_000,
    demands: Iterable[float] = (6000.0, 9000.0, 12000.0),
    episode_s: float = 3600.0,
    progress: Callable[[int, MetricsRecord], None] | None = None,
):
    """Train a CBQL controller on episodes cycling through ``demands``.

    ``decision_steps`` counts intersection decisions summed over the network.
    """
    demands = list(demands)
    episode = 0
    start = controller.total_decisions
    while controller.total_decisions - start < decision_steps:
        cfg = base.with_(demand_vph=demands[episode % len(demands)], seed=base.seed + 1000 + episode,
                         duration_s=episode_s, warmup_s=0.0)
        rec = Simulation(cfg, controller).run()
        if progress is not None:
            progress(episode, rec)
        episode += 1
    return controller


TRAINING_DEMANDS = (6000.0, 9000.0, 12000.0)


def build_controller(
    config: ScenarioConfig,
    train_steps: int = 200_000,
    train_demands: Iterable[float] = TRAINING_DEMANDS,
) -> Controller:
    """Controller named by ``config``; learning controllers are trained, then frozen.

    A ``checkpoint`` entry in the controller params skips training.
    """
    ctrl = make_controller(config.controller, config.controller_params, config.decision_interval_s, config.seed)
    if getattr(ctrl, "learning", False):
        if train_steps > 0:
            train_cbql(config, ctrl, train_steps, train_demands)
        ctrl.freeze()
    return ctrl
