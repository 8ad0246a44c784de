"""Decentralized learning in two-sided matching markets."""
from .equilibrium import (
    NECertificate,
    enumerate_stable_matchings,
    example1_market,
    is_pure_ne,
    round_mixed_to_pure,
    verify_mixed_ne,
)
from .market import SINK, Market, MarketError, RewardDist, deferred_acceptance, is_stable

__all__ = [
    "SINK",
    "Market",
    "MarketError",
    "NECertificate",
    "RewardDist",
    "deferred_acceptance",
    "enumerate_stable_matchings",
    "example1_market",
    "is_pure_ne",
    "is_stable",
    "round_mixed_to_pure",
    "verify_mixed_ne",
]
