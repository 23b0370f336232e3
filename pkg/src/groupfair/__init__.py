"""Grouped multi-armed bandits with proportionally fair exploration."""

from groupfair.instance import Group, GroupedInstance, InstanceAnalytics, analyze, validate
from groupfair.kl import bernoulli_kl, kl_budget, kl_ucb_index
from groupfair.nash import (
    NEG_INFINITY,
    NashSolution,
    PoFReport,
    max_group_gain,
    nash_welfare,
    price_of_fairness,
    solve_nash,
    util_gains,
)

__all__ = [
    "Group",
    "GroupedInstance",
    "InstanceAnalytics",
    "NEG_INFINITY",
    "NashSolution",
    "PoFReport",
    "analyze",
    "bernoulli_kl",
    "kl_budget",
    "kl_ucb_index",
    "max_group_gain",
    "nash_welfare",
    "price_of_fairness",
    "solve_nash",
    "util_gains",
    "validate",
]
