"""Where does each controller lose control of the queue?

Sweeps demand upwards and classifies every run by the trend of the
private-car waiting count over the second half of the run.  A slope of
0.01 veh/s or more counts as unstable.

Run:  python3 demos/stability_sweep.py        (about a minute)
"""

from signalprio.engine import run, stability_probe
from signalprio.scenario import ScenarioConfig

demands = range(5000, 14_000, 1000)
print(f"{'demand':>8}" + "".join(f"{c:>16}" for c in ("fixed-time", "max-pressure")))
for demand in demands:
    cells = []
    for name in ("fixed-time", "max-pressure"):
        status, slope = stability_probe(run(ScenarioConfig(demand_vph=demand, controller=name, seed=1)))
        cells.append(f"{status.value} {slope:+.3f}")
    print(f"{demand:>8}" + "".join(f"{c:>16}" for c in cells))
