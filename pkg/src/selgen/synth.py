"""Seeded weather-like scenarios with rule-based descriptions.

Every scenario starts with a temperature and a windSpeed record, followed by
records of randomly drawn types.  A record is mentioned iff it is *active*,
and activity is a threshold rule on its own attributes:

* temperature: always active
* windSpeed: max >= 10 mph;  gust: max >= 20;  precipChance: max >= 30
* skyCover: mode in {50-75, 75-100};  rainChance / thunderChance: mode in {chance, likely}
* windDir: never mentioned

The generator decides which records are active first (exactly
``salient_count`` of them) and then samples attributes on the matching side
of each threshold, so the rule and the count always agree.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Record, Scenario

OPTIONAL_TYPES = ("windDir", "gust", "skyCover", "precipChance", "rainChance", "thunderChance")
MENTIONABLE = ("gust", "skyCover", "precipChance", "rainChance", "thunderChance")
SKY_MODES = ("0-25", "25-50", "50-75", "75-100")
CHANCE_MODES = ("none", "slight", "chance", "likely")
DIRECTIONS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")


@dataclass(frozen=True)
class SynthProfile:
    records_per_scenario: int = 12
    salient_count: int = 4
    # probability of swapping a synonym pair against the rule
    noise: float = 0.0

    def __post_init__(self):
        if self.records_per_scenario < 2:
            raise ValueError("records_per_scenario must be >= 2")
        if not 1 <= self.salient_count <= self.records_per_scenario:
            raise ValueError("salient_count must be in [1, records_per_scenario]")


def _span(rng) -> tuple[int, int]:
    begin = int(rng.choice([6, 9, 13, 17]))
    return begin, (begin + int(rng.choice([4, 8, 13]))) % 24


def _triple(rng, lo: int, hi: int, step: int) -> dict[str, int]:
    grid = np.arange(lo, hi + 1, step)
    a, b = sorted(int(x) for x in rng.choice(grid, size=2))
    return {"min": a, "mean": (a + b) // 2, "max": b}


def _record(rng, rtype: str, active: bool, j: int) -> Record:
    span = _span(rng)
    if rtype == "temperature":
        return Record(rtype, span, _triple(rng, 30, 90, 5), None, j)
    if rtype == "windSpeed":
        if not active:
            return Record(rtype, span, _triple(rng, 0, 5, 5), None, j)
        lo = 5 * int(rng.integers(0, 4))
        hi = max(lo, 10) + 5 * int(rng.integers(0, 4))
        return Record(rtype, span, {"min": lo, "mean": (lo + hi) // 2, "max": hi}, None, j)
    if rtype == "gust":
        attrs = _triple(rng, 20, 45, 5) if active else {"min": 0, "mean": 0, "max": int(rng.choice([0, 5]))}
        return Record(rtype, span, attrs, None, j)
    if rtype == "precipChance":
        attrs = _triple(rng, 30, 90, 10) if active else _triple(rng, 0, 10, 5)
        return Record(rtype, span, attrs, None, j)
    if rtype == "skyCover":
        return Record(rtype, span, {}, str(rng.choice(SKY_MODES[2:] if active else SKY_MODES[:2])), j)
    if rtype in ("rainChance", "thunderChance"):
        return Record(rtype, span, {}, str(rng.choice(CHANCE_MODES[2:] if active else CHANCE_MODES[:2])), j)
    if rtype == "windDir":
        return Record(rtype, span, {}, str(rng.choice(DIRECTIONS)), j)
    raise ValueError(rtype)


def _swap(rng, noise: float, choice: bool) -> bool:
    return (not choice) if noise > 0 and rng.random() < noise else choice


def realize(rec: Record, rng=None, noise: float = 0.0) -> list[str]:
    """Clause for one mentioned record."""
    a = rec.numeric_attrs
    morning = rec.time_span is not None and rec.time_span[0] < 12
    t = rec.record_type
    if t == "temperature":
        if _swap(rng, noise, morning):
            return ["a", "high", "near", str(a["max"])]
        return ["a", "high", "around", str(a["max"])]
    if t == "windSpeed":
        noun = "wind" if _swap(rng, noise, morning) else "winds"
        return [noun, "between", str(a["min"]), "and", str(a["max"]), "mph"]
    if t == "gust":
        return ["gusts", "as", "high", "as", str(a["max"]), "mph"]
    if t == "precipChance":
        return ["a", str(a["max"]), "percent", "chance", "of", "rain"]
    if t == "skyCover":
        return ["mostly", "cloudy"] if rec.mode_attr == "50-75" else ["cloudy"]
    if t == "rainChance":
        return ["showers", "likely"] if rec.mode_attr == "likely" else ["a", "chance", "of", "showers"]
    if t == "thunderChance":
        storms = "thunderstorms" if _swap(rng, noise, morning) else "storms"
        return [storms, "likely"] if rec.mode_attr == "likely" else ["a", "chance", "of", storms]
    raise ValueError(f"{t} is never mentioned")


def synth_scenario(rng, profile: SynthProfile) -> Scenario:
    n, k = profile.records_per_scenario, profile.salient_count
    active = {0}
    if k >= 2:
        active.add(1)
    optional_slots = list(range(2, n))
    extra = k - len(active)
    chosen = set(int(i) for i in rng.choice(optional_slots, size=extra, replace=False)) if extra > 0 else set()
    active |= chosen
    types = ["temperature", "windSpeed"]
    for j in optional_slots:
        pool = MENTIONABLE if j in chosen else OPTIONAL_TYPES
        types.append(str(rng.choice(pool)))
    records = tuple(_record(rng, t, j in active, j) for j, t in enumerate(types))
    tokens: list[str] = []
    for j in sorted(active):
        if tokens:
            tokens.append(",")
        tokens.extend(realize(records[j], rng, profile.noise))
    tokens.append(".")
    return Scenario(records, tuple(tokens), frozenset(active))


def synth_generate(seed: int, n: int, profile: SynthProfile | None = None) -> list[Scenario]:
    """``n`` scenarios; a pure function of ``(seed, n, profile)``."""
    profile = profile or SynthProfile()
    rng = np.random.default_rng(seed)
    return [synth_scenario(rng, profile) for _ in range(n)]
