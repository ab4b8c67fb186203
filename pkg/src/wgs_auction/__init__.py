"""Ascending-price auctions for market equilibria with weak gross substitutes."""

from .demand import CES, CobbDouglas, Conic, DemandAnswer, GaleBASPLC, Linear, demand
from .market_model import (
    EquilibriumReport,
    ExchangeInstance,
    IndividualPrice,
    NSWInstance,
    PriceVector,
    SRInit,
    SRInstance,
    load_instance,
)

__version__ = "0.1.0"

__all__ = [
    "CES",
    "CobbDouglas",
    "Conic",
    "DemandAnswer",
    "EquilibriumReport",
    "ExchangeInstance",
    "GaleBASPLC",
    "IndividualPrice",
    "Linear",
    "NSWInstance",
    "PriceVector",
    "SRInit",
    "SRInstance",
    "demand",
    "load_instance",
]
