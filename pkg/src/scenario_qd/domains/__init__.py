from .base import Domain, DomainSpec, EvalBatch, EvalResult
from .benchmarks import Plateau, SphereLP, plateau_evaluate, sphere_lp_evaluate
from .repair import RepairError, repair, repair_params
from .teleop import Scenario, Teleop, TeleopConstants, teleop_evaluate, validity

DOMAINS = ("sphere-lp", "plateau", "teleop")


def make_domain(name: str, **options) -> Domain:
    if name == "sphere-lp":
        return SphereLP(**options)
    if name == "plateau":
        return Plateau(**options)
    if name == "teleop":
        return Teleop(TeleopConstants(**options))
    raise ValueError(f"unknown domain {name!r}; expected one of {DOMAINS}")


__all__ = [
    "DOMAINS",
    "Domain",
    "DomainSpec",
    "EvalBatch",
    "EvalResult",
    "Plateau",
    "RepairError",
    "Scenario",
    "SphereLP",
    "Teleop",
    "TeleopConstants",
    "make_domain",
    "plateau_evaluate",
    "repair",
    "repair_params",
    "sphere_lp_evaluate",
    "teleop_evaluate",
    "validity",
]
