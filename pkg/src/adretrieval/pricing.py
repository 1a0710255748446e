"""Optimized cost-per-click pricing: CVR × item price × taking rate.

CVR comes from historical trade/click counts with Laplace-style
smoothing so cold ads fall back to the prior α/(α+β).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, TYPE_CHECKING

if TYPE_CHECKING:
    from .clicklog import Catalog, ImpressionRecord

DEFAULT_SMOOTHING = (1.0, 49.0)  # prior CVR 2%


@dataclass(frozen=True, slots=True)
class AdCommerceStats:
    trade_count: int
    click_count: int
    item_price: float
    taking_rate: float

    def __post_init__(self) -> None:
        if not 0 <= self.trade_count <= self.click_count:
            raise ValueError(f"need 0 <= trades <= clicks, got {self.trade_count}/{self.click_count}")
        if self.item_price <= 0:
            raise ValueError(f"item_price must be > 0, got {self.item_price}")
        if not 0.0 < self.taking_rate < 1.0:
            raise ValueError(f"taking_rate must be in (0,1), got {self.taking_rate}")


def estimate_cvr(stats: AdCommerceStats, smoothing: tuple[float, float] = DEFAULT_SMOOTHING) -> float:
    """Smoothed trades/clicks; with zero smoothing and zero clicks, 0."""
    alpha, beta = smoothing
    if alpha < 0 or beta < 0:
        raise ValueError("smoothing parameters must be >= 0")
    denominator = stats.click_count + alpha + beta
    if denominator == 0:
        return 0.0
    return (stats.trade_count + alpha) / denominator


def ocpc_price(cvr: float, item_price: float, taking_rate: float) -> float:
    if not 0.0 <= cvr <= 1.0:
        raise ValueError(f"cvr must be in [0,1], got {cvr}")
    if item_price <= 0:
        raise ValueError(f"item_price must be > 0, got {item_price}")
    if not 0.0 < taking_rate < 1.0:
        raise ValueError(f"taking_rate must be in (0,1), got {taking_rate}")
    return cvr * item_price * taking_rate


class Pricer:
    """Per-ad OCPC charges from commerce stats."""

    def __init__(self, stats_by_ad: dict[str, AdCommerceStats],
                 smoothing: tuple[float, float] = DEFAULT_SMOOTHING):
        alpha, beta = smoothing
        if alpha < 0 or beta < 0:
            raise ValueError("smoothing parameters must be >= 0")
        self._stats = dict(stats_by_ad)
        self._smoothing = (float(alpha), float(beta))

    @classmethod
    def from_history(cls, catalog: "Catalog", records: Iterable["ImpressionRecord"],
                     smoothing: tuple[float, float] = DEFAULT_SMOOTHING) -> "Pricer":
        """Count clicks and trades per ad; ads without history keep zeros
        and price at the smoothing prior."""
        clicks: dict[str, int] = {aid: 0 for aid in catalog.ads}
        trades: dict[str, int] = {aid: 0 for aid in catalog.ads}
        for rec in records:
            if rec.ad_id not in clicks:
                raise ValueError(f"record {rec.request_id}: ad {rec.ad_id} not in catalog")
            clicks[rec.ad_id] += 1 if rec.clicked else 0
            trades[rec.ad_id] += 1 if rec.converted else 0
        stats = {
            aid: AdCommerceStats(
                trade_count=trades[aid],
                click_count=clicks[aid],
                item_price=catalog.items[ad.item_id].price,
                taking_rate=ad.taking_rate,
            )
            for aid, ad in catalog.ads.items()
        }
        return cls(stats, smoothing)

    def stats(self, ad_id: str) -> AdCommerceStats:
        return self._stats[ad_id]

    def price(self, ad_id: str) -> float:
        try:
            stats = self._stats[ad_id]
        except KeyError:
            raise KeyError(f"no commerce stats for ad {ad_id!r}") from None
        return ocpc_price(estimate_cvr(stats, self._smoothing), stats.item_price,
                          stats.taking_rate)


class ConstantPricer:
    """Fixed charge regardless of ad; handy for oracles and benchmarks."""

    def __init__(self, value: float = 0.1):
        self._value = float(value)

    def price(self, ad_id: str) -> float:
        return self._value
