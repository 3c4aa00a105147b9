"""Polynomial entropy estimation and certification for integrable model flows."""

from . import cli_reports, constructive_bounds, dyn_core, entropy_estimators, model_flows, sections_returns
from .constructive_bounds import build_lower_bound_set, build_upper_bound_cover, verify_cover, verify_separated
from .dyn_core import DiscreteSystem, ProductPoint, SpaceSpec
from .entropy_estimators import SampleGrid, fit_growth, greedy_cover_count, greedy_separated_count
from .model_flows import default_pmodel, default_pmodel_system, planar_system, product_system

__all__ = [
    "cli_reports",
    "constructive_bounds",
    "dyn_core",
    "entropy_estimators",
    "model_flows",
    "sections_returns",
    "DiscreteSystem",
    "ProductPoint",
    "SampleGrid",
    "SpaceSpec",
    "build_lower_bound_set",
    "build_upper_bound_cover",
    "default_pmodel",
    "default_pmodel_system",
    "fit_growth",
    "greedy_cover_count",
    "greedy_separated_count",
    "planar_system",
    "product_system",
    "verify_cover",
    "verify_separated",
]
