"""Train the cooperative learner, then compare it with max pressure.

Training cycles through hour-long episodes at 6000, 9000 and 12000 veh/h.
The budget counts signal decisions over all five intersections; the
default here is a tenth of the acceptance budget so the demo finishes in
well under a minute.  Pass a number to change it, e.g. 200000.

Run:  python3 demos/train_cbql.py [decisions] [checkpoint.json]
"""

import sys
import time

from signalprio.controllers import make_controller
from signalprio.engine import run, train_cbql
from signalprio.scenario import ScenarioConfig

budget = int(sys.argv[1]) if len(sys.argv) > 1 else 20_000
checkpoint = sys.argv[2] if len(sys.argv) > 2 else None


def report(episode, rec):
    if episode % 5 == 0:
        print(f"  episode {episode:3d}: car travel time {rec.avg_travel_time_s:7.1f} s")


ctrl = make_controller("cbql-tsp", seed=0)
t0 = time.perf_counter()
train_cbql(ScenarioConfig(controller="cbql-tsp"), ctrl, budget, progress=report)
print(f"trained on {ctrl.total_decisions} decisions in {time.perf_counter() - t0:.0f} s; "
      f"{sum(len(p.q_private) for p in ctrl.agents.values())} visited states")
if checkpoint:
    ctrl.save(checkpoint)
    print("tables written to", checkpoint)
ctrl.freeze()

for demand in (6000, 9000, 12000):
    learned = run(ScenarioConfig(demand_vph=demand, seed=1), ctrl)
    mp = run(ScenarioConfig(demand_vph=demand, seed=1, controller="mp-tsp"))
    print(f"{demand} veh/h: CBQL-TSP {learned.avg_travel_time_s:6.1f} s (bus {learned.avg_bus_travel_time_s:.0f} s)"
          f"   MP-TSP {mp.avg_travel_time_s:6.1f} s (bus {mp.avg_bus_travel_time_s:.0f} s)")
