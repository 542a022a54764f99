from .engine import attack, load_scenario, run_scenario
from .report import RunReport

__all__ = ["attack", "load_scenario", "run_scenario", "RunReport"]
