"""The five-intersection corridor under the non-learning controllers.

Runs fixed time, passive bus priority, max pressure with and without the
bus bonus, and the actuated controller at three demand levels, then prints
the car and bus travel times with the stability verdict of each run.

Run:  python3 demos/corridor_baselines.py        (about a minute)
"""

from signalprio.engine import run, stability_probe
from signalprio.scenario import ScenarioConfig, build

CONTROLLERS = ("fixed-time", "mb-tsp", "max-pressure", "mp-tsp", "asc-tsp")

floor = build(ScenarioConfig()).free_flow_bus_time_s
print(f"bus free-flow time along the corridor: {floor:.1f} s\n")
print(f"{'controller':<14}{'demand':>8}{'car tt [s]':>12}{'bus tt [s]':>12}{'waiting':>10}  status")
for demand in (6000, 9000, 12000):
    for name in CONTROLLERS:
        rec = run(ScenarioConfig(demand_vph=demand, controller=name, seed=1))
        status, _ = stability_probe(rec)
        bus = f"{rec.avg_bus_travel_time_s:.1f}" if rec.avg_bus_travel_time_s else "-"
        print(f"{name:<14}{demand:>8}{rec.avg_travel_time_s:>12.1f}{bus:>12}"
              f"{rec.avg_waiting_private_cars:>10.1f}  {status.value}")
    print()
