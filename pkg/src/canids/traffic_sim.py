"""Synthetic stationary-vehicle CAN traffic and message-injection attacks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .canio import EXTENDED_ID_MAX, STANDARD_ID_MAX, CanFrame, Label


class AttackKind(str, Enum):
    FLOODING = "Flooding"
    FUZZY = "Fuzzy"
    MALFUNCTION = "Malfunction"


FUZZY_PERIOD = 0.0003
FLOODING_PERIOD = 0.0005
MALFUNCTION_PERIOD = 0.001


@dataclass(frozen=True)
class EcuProfile:
    can_id: int
    period: float
    jitter_std: float = 0.0
    payload_mode: str = "constant"
    offset: float = 0.0
    dlc: int = 8

    def __post_init__(self):
        if self.period <= 0:
            raise ValueError("period must be positive")
        if not 0 <= self.jitter_std < self.period / 2:
            raise ValueError("jitter_std must lie in [0, period/2)")
        if self.payload_mode not in ("constant", "counter", "random"):
            raise ValueError(f"unknown payload mode {self.payload_mode!r}")


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    start: float
    duration: float
    period: float | None = None
    target_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.duration <= 0:
            raise ValueError("attack duration must be positive")
        if self.injection_period <= 0:
            raise ValueError("injection period must be positive")
        if self.kind is AttackKind.MALFUNCTION and self.target_id is None:
            raise ValueError("malfunction attack needs a target id")

    @property
    def injection_period(self) -> float:
        if self.period is not None:
            return self.period
        return {AttackKind.FLOODING: FLOODING_PERIOD, AttackKind.FUZZY: FUZZY_PERIOD,
                AttackKind.MALFUNCTION: MALFUNCTION_PERIOD}[self.kind]


def _quantize(t: np.ndarray) -> np.ndarray:
    # microsecond grid so timestamps survive the 6-decimal text formats
    return np.round(t, 6)


def _payloads(profile: EcuProfile, n: int, rng: np.random.Generator) -> list[bytes]:
    if profile.payload_mode == "random":
        raw = rng.integers(0, 256, size=(n, profile.dlc), dtype=np.uint8)
        return [row.tobytes() for row in raw]
    if profile.payload_mode == "counter":
        return [bytes([(i + k) & 0xFF for k in range(profile.dlc)]) for i in range(n)]
    const = bytes(((profile.can_id >> (4 * (k % 3))) + k) & 0xFF for k in range(profile.dlc))
    return [const] * n


def generate_normal(profiles, horizon: float, seed: int) -> list[CanFrame]:
    """Merged periodic traffic with Gaussian jitter, all labeled Normal."""
    profiles = list(profiles)
    if not profiles:
        raise ValueError("need at least one ECU profile")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(seed)
    times, ids, payloads = [], [], []
    for idx, p in enumerate(profiles):
        n = int(np.floor((horizon - p.offset) / p.period - 1e-9)) + 1
        n = max(n, 0)
        base = p.offset + p.period * np.arange(n)
        jitter = rng.normal(0.0, p.jitter_std, n) if p.jitter_std > 0 else np.zeros(n)
        t = _quantize(np.clip(base + jitter, 0.0, None))
        keep = t < horizon
        times.append(t[keep])
        ids.append(np.full(keep.sum(), idx))
        payloads.append([pl for pl, k in zip(_payloads(p, n, rng), keep) if k])
    t_all = np.concatenate(times)
    who = np.concatenate(ids)
    flat_payloads = [pl for chunk in payloads for pl in chunk]
    perm = np.lexsort((who, t_all))
    frames = []
    for i in perm:
        p = profiles[who[i]]
        frames.append(CanFrame(float(t_all[i]), p.can_id, p.dlc, flat_payloads[i],
                               Label.NORMAL, p.can_id > STANDARD_ID_MAX))
    return frames


def _merge(frames: list[CanFrame], injected: list[CanFrame]) -> list[CanFrame]:
    # stable merge: originals win ties so they stay a subsequence in order
    out: list[CanFrame] = []
    i = j = 0
    while i < len(frames) and j < len(injected):
        if injected[j].timestamp < frames[i].timestamp:
            out.append(injected[j])
            j += 1
        else:
            out.append(frames[i])
            i += 1
    out.extend(frames[i:])
    out.extend(injected[j:])
    return out


def inject_attack(frames, spec: AttackSpec, seed: int, *, address_width: int = 11,
                  known_ids=None) -> list[CanFrame]:
    """Interleave attack frames (labeled Attack) into a sorted stream."""
    frames = list(frames)
    if not frames:
        raise ValueError("cannot inject into an empty stream")
    first, last = frames[0].timestamp, frames[-1].timestamp
    end = spec.start + spec.duration
    if spec.start < first or end > last:
        raise ValueError(f"attack window [{spec.start}, {end}] outside stream [{first}, {last}]")
    if spec.kind is AttackKind.MALFUNCTION:
        ids_present = known_ids if known_ids is not None else {f.can_id for f in frames}
        if spec.target_id not in ids_present:
            raise ValueError(f"malfunction target 0x{spec.target_id:X} not in normal traffic")
    rng = np.random.default_rng(seed)
    period = spec.injection_period
    n = int(np.floor(spec.duration / period + 1e-9))
    times = _quantize(spec.start + period * np.arange(n))
    extended = address_width == 29
    if spec.kind is AttackKind.FLOODING:
        ids = np.zeros(n, dtype=np.int64)
        payloads = [bytes(8)] * n
    elif spec.kind is AttackKind.FUZZY:
        hi = (EXTENDED_ID_MAX if extended else STANDARD_ID_MAX) + 1
        ids = rng.integers(0, hi, size=n)
        raw = rng.integers(0, 256, size=(n, 8), dtype=np.uint8)
        payloads = [r.tobytes() for r in raw]
    else:
        ids = np.full(n, spec.target_id, dtype=np.int64)
        raw = rng.integers(0, 256, size=(n, 8), dtype=np.uint8)
        payloads = [r.tobytes() for r in raw]
    injected = [CanFrame(float(t), int(i), 8, pl, Label.ATTACK, extended)
                for t, i, pl in zip(times, ids, payloads)]
    return _merge(frames, injected)


# ---------------------------------------------------------------- benchmark suite

# class balance of the reference captures: attack / total per stream
SUITE_RATIOS = {"flooding": 14_999 / 85_000, "fuzzy": 3_043 / 41_000,
                "malfunction": 3_995 / 51_000}
SUITE_NORMAL_FRAMES = {"attack_free": 140_000, "flooding": 70_001, "fuzzy": 37_957,
                       "malfunction": 47_005}
SUITE_BURSTS = {"flooding": 10, "fuzzy": 5, "malfunction": 8}
MALFUNCTION_TARGET = 0x316
_PERIODS = (0.01, 0.02, 0.05, 0.1)


def default_profiles(n_ecus: int = 40, seed: int = 0) -> list[EcuProfile]:
    """Cyclic broadcasters with distinct phases on a 100 ms hyperperiod."""
    if n_ecus < 3:
        raise ValueError("need at least 3 ECUs (the fixed attack targets)")
    rng = np.random.default_rng(seed)
    pool = [i for i in range(0x080, 0x600) if i not in (0x153, 0x18E, 0x316)]
    ids = sorted({0x153, 0x18E, 0x316, *rng.choice(pool, size=n_ecus - 3, replace=False).tolist()})
    ids = ids[:n_ecus]
    profiles = []
    modes = ("constant", "counter", "random")
    for k, can_id in enumerate(ids):
        period = _PERIODS[k % len(_PERIODS)]
        offset = round(float(rng.uniform(0.0, period)), 4)
        profiles.append(EcuProfile(can_id, period, jitter_std=2e-5,
                                   payload_mode=modes[k % 3], offset=offset))
    return profiles


def frames_per_second(profiles) -> float:
    return sum(1.0 / p.period for p in profiles)


@dataclass
class Scenario:
    profiles: list[EcuProfile]
    horizon: float
    attacks: list[AttackSpec] = field(default_factory=list)
    seed: int = 0
    address_width: int = 11

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        raw = json.loads(text)
        profiles = [EcuProfile(**{**p, "can_id": _id(p["can_id"])}) for p in raw["profiles"]]
        attacks = []
        for a in raw.get("attacks", []):
            a = dict(a)
            if a.get("target_id") is not None:
                a["target_id"] = _id(a["target_id"])
            attacks.append(AttackSpec(**a))
        return cls(profiles, float(raw["horizon"]), attacks, int(raw.get("seed", 0)),
                   int(raw.get("address_width", 11)))

    def to_json(self) -> str:
        return json.dumps({
            "profiles": [{**asdict(p), "can_id": f"0x{p.can_id:X}"} for p in self.profiles],
            "horizon": self.horizon,
            "attacks": [{**asdict(a), "kind": a.kind.value} for a in self.attacks],
            "seed": self.seed,
            "address_width": self.address_width,
        }, indent=2)

    def run(self) -> list[CanFrame]:
        frames = generate_normal(self.profiles, self.horizon, self.seed)
        known = {p.can_id for p in self.profiles}
        for k, spec in enumerate(self.attacks):
            frames = inject_attack(frames, spec, self.seed + 1000 + k,
                                   address_width=self.address_width, known_ids=known)
        return frames


def _id(value) -> int:
    return int(value, 16) if isinstance(value, str) else int(value)


def _burst_attacks(kind: AttackKind, horizon: float, n_bursts: int, n_attack: int,
                   period: float, target_id: int | None = None) -> list[AttackSpec]:
    per_burst = n_attack // n_bursts
    duration = per_burst * period
    slot = horizon / n_bursts
    specs = []
    for b in range(n_bursts):
        start = round(slot * b + (slot - duration) / 2, 4)
        specs.append(AttackSpec(kind, start, round(duration + period / 2, 6), period, target_id))
    return specs


def suite_scenarios(seed: int = 0, scale: float = 1.0, n_ecus: int = 40) -> dict[str, Scenario]:
    """The four scenarios behind :func:`make_benchmark_suite`."""
    profiles = default_profiles(n_ecus, seed)
    rate = frames_per_second(profiles)
    out = {}
    for k, name in enumerate(("attack_free", "flooding", "fuzzy", "malfunction")):
        normal = SUITE_NORMAL_FRAMES[name] * scale
        horizon = round(normal / rate, 3)
        attacks = []
        if name != "attack_free":
            ratio = SUITE_RATIOS[name]
            n_attack = int(round(normal * ratio / (1.0 - ratio)))
            kind = AttackKind(name.capitalize())
            period = {"flooding": FLOODING_PERIOD, "fuzzy": FUZZY_PERIOD,
                      "malfunction": MALFUNCTION_PERIOD}[name]
            target = MALFUNCTION_TARGET if name == "malfunction" else None
            attacks = _burst_attacks(kind, horizon, max(1, round(SUITE_BURSTS[name] * scale ** 0.5)),
                                     n_attack, period, target)
        out[name] = Scenario(profiles, horizon, attacks, seed * 10 + k)
    return out


def make_benchmark_suite(seed: int = 0, scale: float = 1.0, n_ecus: int = 40) -> dict[str, list[CanFrame]]:
    """Attack-free, flooding, fuzzy and malfunction streams sharing one ECU set."""
    return {name: sc.run() for name, sc in suite_scenarios(seed, scale, n_ecus).items()}
