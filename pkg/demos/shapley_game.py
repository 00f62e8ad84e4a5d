"""Two agents, one signal: how the Shapley split steers phase choice.

At an intersection the priority (bus) agent and the private-car agent each
hold a row of action values over the eight phases.  Their coalition game is
built from those rows; the Shapley ratios then tilt the shared policy
towards the bus phases while a bus is close.

Run:  python3 demos/shapley_game.py
"""

import numpy as np

from signalprio.games import PRIORITY_AGENT, PRIVATE_AGENT, build_characteristic_fn, shapley_value
from signalprio.phases import PhaseModel, RouteKind, priority_phases
from signalprio.qlearn import PolicyTable, action_distribution

model = PhaseModel(RouteKind.STRAIGHT)
prio = priority_phases(model)
print("priority phases for a straight-through bus route:", sorted(prio))

# A bus has been held at red for a while: bus values favour the priority phases
# strongly, car values are mildly spread.
q_bus = np.array([-90, -80, -85, -10, -15, -95, -90, -12], dtype=float)
q_car = np.array([-30, -35, -40, -25, -28, -33, -31, -29], dtype=float)

game = build_characteristic_fn(q_bus, q_car)
for coalition, value in sorted(game.values.items(), key=lambda kv: len(kv[0])):
    print(f"  v({', '.join(sorted(coalition)) or 'empty'}) = {float(value):.1f}")

phi = {a: float(shapley_value(game, a)) for a in (PRIORITY_AGENT, PRIVATE_AGENT)}
print("Shapley values:", {k: round(v, 2) for k, v in phi.items()})

# The controller splits by each agent's stake above its worst action.
stake = {PRIORITY_AGENT: phi[PRIORITY_AGENT] - float(q_bus.min()), PRIVATE_AGENT: phi[PRIVATE_AGENT] - float(q_car.min())}
total = sum(stake.values())
ratios = {"priority": stake[PRIORITY_AGENT] / total, "private": stake[PRIVATE_AGENT] / total}
print("stake ratios:", {k: round(v, 3) for k, v in ratios.items()})

policy = PolicyTable()
for weight in (0.0, 0.5, 1.0):
    probs = action_distribution(policy, "s", ratios=ratios, priority_actions=prio, tilt_weight=weight)
    mass = sum(probs[p - 1] for p in prio)
    print(f"tilt weight {weight:.1f}: probability of a priority phase = {mass:.3f}")
