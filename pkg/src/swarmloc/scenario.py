"""Experiment configuration: swarm composition, topology, churn, files.

A scenario fully determines a run together with its RNG seed: peers with
their ISP mapping, capacities and start times, the single initial seed, the
tracker policy knobs, optional inter-ISP link caps, an optional churn plan
and optional forced departures (used to engineer partitions).

Scenario files are JSON (schema ``swarmloc-scenario/1``); AS distribution
files are CSV with a ``torrent_id,total_peers`` header row followed by
``as_id,peer_count`` rows.  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from random import Random
from typing import Optional

from .peer import Content, PeerConfig
from .tracker import POLICY_BT, POLICY_LOCALITY, SELECT_RANDOM, SELECT_RR, TrackerConfig

SCENARIO_SCHEMA = "swarmloc-scenario/1"

FULL_MESH = "full_mesh_peering"
SINGLE_TRANSIT = "single_transit"

KIB = 1024.0


class ScenarioError(ValueError):
    """Invalid scenario construction or file."""


@dataclass
class Topology:
    isp_names: list[str]
    interpretation: str = FULL_MESH
    inter_link_caps: Optional[dict[str, float]] = None  # bytes/second, outbound

    def validate(self) -> None:
        if self.interpretation not in (FULL_MESH, SINGLE_TRANSIT):
            raise ScenarioError(f"unknown topology {self.interpretation!r}")
        if len(set(self.isp_names)) != len(self.isp_names):
            raise ScenarioError("duplicate ISP names")
        if self.inter_link_caps:
            unknown = set(self.inter_link_caps) - set(self.isp_names)
            if unknown:
                raise ScenarioError(f"caps reference unknown ISPs {sorted(unknown)}")


@dataclass
class PeerSpec:
    name: str
    isp: str
    capacity: float
    start: float
    first_set: bool = True


@dataclass
class SeedSpec:
    isp: str
    capacity: float
    exempt: bool = True  # served with the random policy, outside the cap bookkeeping


@dataclass
class ChurnPlan:
    start_window: float = 60.0
    replacement_pool: int = 0
    assignment: str = "inherit"  # or "uniform"

    def validate(self) -> None:
        if self.replacement_pool < 0:
            raise ScenarioError("replacement_pool must be >= 0")
        if self.assignment not in ("inherit", "uniform"):
            raise ScenarioError(f"unknown churn assignment {self.assignment!r}")


@dataclass
class ForceDeparture:
    """Crash (no stopped announce) every member of ``isp`` that has a
    neighbor outside it, at ``time``."""
    time: float
    isp: str


@dataclass
class ScenarioConfig:
    label: str
    content: Content
    peers: list[PeerSpec]
    initial_seed: SeedSpec
    tracker: TrackerConfig
    peer_defaults: PeerConfig
    topology: Topology
    churn: Optional[ChurnPlan] = None
    force_departures: list[ForceDeparture] = field(default_factory=list)
    t_max: Optional[float] = None  # None: 20x ideal completion time
    rng_seed: int = 0

    def validate(self) -> None:
        self.topology.validate()
        self.tracker.validate()
        self.peer_defaults.validate()
        if self.churn:
            self.churn.validate()
            if self.churn.replacement_pool > len(self.peers):
                raise ScenarioError("replacement_pool exceeds population")
        isps = set(self.topology.isp_names)
        if self.initial_seed.isp not in isps:
            raise ScenarioError(f"seed ISP {self.initial_seed.isp!r} not in topology")
        names = set()
        for p in self.peers:
            if p.isp not in isps:
                raise ScenarioError(f"peer {p.name} maps to unknown ISP {p.isp!r}")
            if p.name in names:
                raise ScenarioError(f"duplicate peer name {p.name}")
            names.add(p.name)
        for fd in self.force_departures:
            if fd.isp not in isps:
                raise ScenarioError(f"force departure on unknown ISP {fd.isp!r}")

    def mean_capacity(self) -> float:
        total = sum(p.capacity for p in self.peers) + self.initial_seed.capacity
        return total / (len(self.peers) + 1)

    def ideal_completion(self) -> float:
        return self.content.total_bytes / self.mean_capacity()

    def effective_t_max(self) -> float:
        if self.t_max is not None:
            return self.t_max
        return 20.0 * self.ideal_completion()

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "schema": SCENARIO_SCHEMA,
            "label": self.label,
            "rng_seed": self.rng_seed,
            "t_max": self.t_max,
            "content": asdict(self.content),
            "tracker": asdict(self.tracker),
            "peer_defaults": asdict(self.peer_defaults),
            "topology": asdict(self.topology),
            "initial_seed": asdict(self.initial_seed),
            "churn": asdict(self.churn) if self.churn else None,
            "force_departures": [asdict(f) for f in self.force_departures],
            "peers": [[p.name, p.isp, p.capacity, p.start, p.first_set]
                      for p in self.peers],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ScenarioError(f"not valid JSON: {e}") from e
        if doc.get("schema") != SCENARIO_SCHEMA:
            raise ScenarioError(f"unsupported schema {doc.get('schema')!r}")
        cfg = cls(
            label=doc["label"],
            content=Content(**doc["content"]),
            peers=[PeerSpec(n, i, c, s, fs) for n, i, c, s, fs in doc["peers"]],
            initial_seed=SeedSpec(**doc["initial_seed"]),
            tracker=TrackerConfig(**doc["tracker"]),
            peer_defaults=PeerConfig(**doc["peer_defaults"]),
            topology=Topology(**doc["topology"]),
            churn=ChurnPlan(**doc["churn"]) if doc.get("churn") else None,
            force_departures=[ForceDeparture(**f)
                              for f in doc.get("force_departures", [])],
            t_max=doc.get("t_max"),
            rng_seed=doc["rng_seed"],
        )
        cfg.validate()
        return cfg

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())


# -- AS distributions ---------------------------------------------------------


@dataclass
class AsDistribution:
    torrent_id: str
    rows: list[tuple[str, int]]  # (as id, peer count)

    def validate(self) -> None:
        seen = set()
        for as_id, count in self.rows:
            if count < 1:
                raise ScenarioError(f"AS {as_id} has count {count} < 1")
            if as_id in seen:
                raise ScenarioError(f"duplicate AS id {as_id}")
            seen.add(as_id)

    @property
    def total_peers(self) -> int:
        return sum(c for _, c in self.rows)

    def to_csv(self) -> str:
        lines = [f"{self.torrent_id},{self.total_peers}"]
        lines += [f"{a},{c}" for a, c in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AsDistribution":
        header = None
        rows: list[tuple[str, int]] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ScenarioError(f"line {lineno}: expected two fields, got {raw!r}")
            if header is None:
                header = parts[0].strip()
                continue
            try:
                rows.append((parts[0].strip(), int(parts[1])))
            except ValueError:
                raise ScenarioError(f"line {lineno}: bad peer count {parts[1]!r}")
        if header is None:
            raise ScenarioError("empty distribution file")
        dist = cls(header, rows)
        dist.validate()
        return dist

    @classmethod
    def load(cls, path: str) -> "AsDistribution":
        with open(path) as fh:
            return cls.from_csv(fh.read())


def synthetic_distribution(torrent_id: str, total_peers: int, n_ases: int,
                           max_as: int) -> AsDistribution:
    """Power-law AS-size fill honoring exact total, AS count and max size.

    Sizes follow ``max_as * rank^-alpha`` with alpha fit so the column sums
    to total_peers; the residual after rounding is spread over the largest
    ASes without touching the maximum.
    """
    if n_ases < 1 or total_peers < n_ases or max_as > total_peers:
        raise ScenarioError("infeasible synthetic distribution parameters")

    def sizes(alpha: float) -> list[int]:
        return [max(1, round(max_as * (i + 1) ** -alpha)) for i in range(n_ases)]

    lo, hi = 0.0, 8.0
    for _ in range(80):
        mid = (lo + hi) / 2
        if sum(sizes(mid)) > total_peers:
            lo = mid
        else:
            hi = mid
    vals = sizes((lo + hi) / 2)
    vals[0] = max_as
    delta = total_peers - sum(vals)
    i = 1
    guard = 0
    while delta != 0 and n_ases > 1:
        step = 1 if delta > 0 else -1
        cap = max_as if step > 0 else 1
        if (step > 0 and vals[i] < cap) or (step < 0 and vals[i] > cap):
            vals[i] += step
            delta -= step
        i = i + 1 if i + 1 < n_ases else 1
        guard += 1
        if guard > 10_000_000:
            raise ScenarioError("synthetic distribution failed to converge")
    rows = [(f"as{i:05d}", v) for i, v in enumerate(vals)]
    return AsDistribution(torrent_id, rows)


def scale_distribution(dist: AsDistribution, factor: float) -> AsDistribution:
    """Shrink a distribution keeping its shape; ASes rounding to zero drop."""
    rows = []
    for as_id, count in dist.rows:
        scaled = round(count * factor)
        if scaled >= 1:
            rows.append((as_id, scaled))
    if not rows:
        raise ScenarioError("scaling factor removed every AS")
    return AsDistribution(f"{dist.torrent_id}-x{factor:g}", rows)


# The three reference torrents' published aggregates: (peers, ASes, largest AS).
REFERENCE_TORRENTS = {
    "torrent-1": (9844, 1043, 386),
    "torrent-2": (4819, 211, 2415),
    "torrent-3": (996, 354, 31),
}


def reference_distribution(name: str) -> AsDistribution:
    """Synthetic stand-in for a reference torrent's crawl distribution."""
    try:
        total, n_ases, max_as = REFERENCE_TORRENTS[name]
    except KeyError:
        raise ScenarioError(f"unknown reference torrent {name!r}")
    return synthetic_distribution(name, total, n_ases, max_as)


# -- builders ------------------------------------------------------------------


def _default_tracker(policy: str, k_outgoing: int) -> TrackerConfig:
    return TrackerConfig(policy=policy, max_outgoing_per_isp=k_outgoing)


def _spread_starts(n: int, window: float, rng: Random) -> list[float]:
    return [rng.uniform(0.0, window) for _ in range(n)]


def build_homogeneous(n_peers: int, n_isps: int, seed_capacity: float,
                      leecher_capacity: float, k_outgoing: int,
                      policy: str = POLICY_LOCALITY, rng_seed: int = 1,
                      label: Optional[str] = None,
                      start_window: float = 60.0) -> ScenarioConfig:
    """Equal ISP populations, one extra initial seed in a random ISP."""
    if n_isps < 1 or n_peers % n_isps != 0:
        raise ScenarioError(f"{n_isps} ISPs do not divide {n_peers} peers")
    rng = Random(f"{rng_seed}|build")
    isp_names = [f"isp{i:02d}" for i in range(n_isps)]
    per = n_peers // n_isps
    starts = _spread_starts(n_peers, start_window, rng)
    peers = [PeerSpec(f"p{i:05d}", isp_names[i // per], leecher_capacity, starts[i])
             for i in range(n_peers)]
    seed_isp = isp_names[rng.randrange(n_isps)]
    cfg = ScenarioConfig(
        label=label or f"homogeneous-{n_peers}x{n_isps}-k{k_outgoing}-{policy}",
        content=Content(),
        peers=peers,
        initial_seed=SeedSpec(seed_isp, seed_capacity),
        tracker=_default_tracker(policy, k_outgoing),
        peer_defaults=PeerConfig(upload_capacity=leecher_capacity),
        topology=Topology(isp_names),
        rng_seed=rng_seed,
    )
    cfg.validate()
    return cfg


HETERO_CLASSES = (20.0 * KIB, 50.0 * KIB, 100.0 * KIB)


def build_heterogeneous(n_peers: int, n_isps: int, k_outgoing: int,
                        policy: str = POLICY_LOCALITY, rng_seed: int = 1,
                        label: Optional[str] = None) -> ScenarioConfig:
    """Per ISP, thirds of the peers upload at 20/50/100 kB/s; fast seed."""
    if n_isps < 1 or n_peers % n_isps != 0:
        raise ScenarioError(f"{n_isps} ISPs do not divide {n_peers} peers")
    per = n_peers // n_isps
    if per % 3 != 0:
        raise ScenarioError(f"{per} peers per ISP not divisible into thirds")
    rng = Random(f"{rng_seed}|build")
    isp_names = [f"isp{i:02d}" for i in range(n_isps)]
    starts = _spread_starts(n_peers, 60.0, rng)
    peers = []
    for i in range(n_peers):
        isp = isp_names[i // per]
        capacity = HETERO_CLASSES[(i % per) * 3 // per]
        peers.append(PeerSpec(f"p{i:05d}", isp, capacity, starts[i]))
    seed_isp = isp_names[rng.randrange(n_isps)]
    cfg = ScenarioConfig(
        label=label or f"heterogeneous-{n_peers}x{n_isps}-k{k_outgoing}-{policy}",
        content=Content(),
        peers=peers,
        initial_seed=SeedSpec(seed_isp, 100.0 * KIB),
        tracker=_default_tracker(policy, k_outgoing),
        peer_defaults=PeerConfig(),
        topology=Topology(isp_names),
        rng_seed=rng_seed,
    )
    cfg.validate()
    return cfg


def build_from_distribution(dist: AsDistribution, k_outgoing: int,
                            policy: str = POLICY_LOCALITY,
                            churn: Optional[ChurnPlan] = None,
                            rng_seed: int = 1,
                            selection_strategy: str = SELECT_RANDOM,
                            pm_enabled: bool = False,
                            label: Optional[str] = None) -> ScenarioConfig:
    """One virtual ISP per AS, homogeneous 20 kB/s capacities."""
    dist.validate()
    rng = Random(f"{rng_seed}|build")
    isp_names = [as_id for as_id, _ in dist.rows]
    capacity = 20.0 * KIB
    peers = []
    i = 0
    for as_id, count in dist.rows:
        for _ in range(count):
            peers.append(PeerSpec(f"p{i:05d}", as_id, capacity, 0.0))
            i += 1
    starts = _spread_starts(len(peers), 60.0, rng)
    for p, s in zip(peers, starts):
        p.start = s
    seed_isp = isp_names[rng.randrange(len(isp_names))]
    tracker = TrackerConfig(policy=policy, max_outgoing_per_isp=k_outgoing,
                            selection_strategy=selection_strategy,
                            pm_enabled=pm_enabled)
    cfg = ScenarioConfig(
        label=label or f"{dist.torrent_id}-k{k_outgoing}-{policy}",
        content=Content(),
        peers=peers,
        initial_seed=SeedSpec(seed_isp, capacity),
        tracker=tracker,
        peer_defaults=PeerConfig(upload_capacity=capacity),
        topology=Topology(isp_names),
        churn=churn,
        rng_seed=rng_seed,
    )
    if churn:
        cfg = apply_churn(cfg, churn)
    cfg.validate()
    return cfg


def apply_churn(base: ScenarioConfig, plan: ChurnPlan) -> ScenarioConfig:
    """Respread first-set starts over the churn window and attach the plan.

    Replacement peers are materialized by the engine as first-set peers
    complete; by default a replacement inherits the ISP of the peer it
    replaces, keeping per-AS populations stationary.
    """
    plan.validate()
    if plan.replacement_pool > len(base.peers):
        raise ScenarioError("replacement_pool exceeds population")
    rng = Random(f"{base.rng_seed}|churn")
    peers = [PeerSpec(p.name, p.isp, p.capacity,
                      rng.uniform(0.0, plan.start_window), True)
             for p in base.peers]
    cfg = ScenarioConfig(
        label=f"{base.label}-churn{plan.start_window:g}",
        content=base.content,
        peers=peers,
        initial_seed=base.initial_seed,
        tracker=base.tracker,
        peer_defaults=base.peer_defaults,
        topology=base.topology,
        churn=plan,
        force_departures=list(base.force_departures),
        t_max=base.t_max,
        rng_seed=base.rng_seed,
    )
    cfg.validate()
    return cfg
