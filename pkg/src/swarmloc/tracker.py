"""Tracker: peer registry, locality cap, Round Robin selection, PM grant gate.

The tracker is a passive component driven by the simulation event loop.  It
keeps one registry per ISP, counts the outside peers it has handed to each
ISP's members ("outgoing" connections), and refuses further outside peers
once an ISP's counter reaches the configured maximum.  Counters are
decremented only when a holder departs or is evicted, which makes the count
an approximation of the live outgoing connections rather than an exact
mirror of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from random import Random
from typing import Callable, Optional

POLICY_BT = "bittorrent_random"
POLICY_LOCALITY = "locality"
SELECT_RANDOM = "random_peer"
SELECT_RR = "round_robin_isp"

EV_STARTED = "started"
EV_PERIODIC = "periodic"
EV_STOPPED = "stopped"
EV_COMPLETED = "completed"


class TrackerError(ValueError):
    """Configuration or protocol error on the tracker side."""


@dataclass
class TrackerConfig:
    policy: str = POLICY_LOCALITY
    max_outgoing_per_isp: int = 4
    selection_strategy: str = SELECT_RANDOM
    pm_enabled: bool = False
    t1_grant_period: float = 60.0
    reannounce_period: float = 1800.0
    eviction_timeout: float = 2700.0
    peers_returned_per_announce: int = 80

    def validate(self) -> None:
        if self.policy not in (POLICY_BT, POLICY_LOCALITY):
            raise TrackerError(f"unknown policy {self.policy!r}")
        if self.selection_strategy not in (SELECT_RANDOM, SELECT_RR):
            raise TrackerError(f"unknown selection strategy {self.selection_strategy!r}")
        if self.max_outgoing_per_isp < 0:
            raise TrackerError("max_outgoing_per_isp must be >= 0")
        if self.t1_grant_period <= 0:
            raise TrackerError("t1_grant_period must be > 0")
        if self.eviction_timeout <= self.reannounce_period:
            raise TrackerError("eviction_timeout must exceed reannounce_period")
        if self.peers_returned_per_announce < 1:
            raise TrackerError("peers_returned_per_announce must be >= 1")


@dataclass
class AnnounceRequest:
    peer_id: int
    isp_id: int
    event: str = EV_PERIODIC
    pm_flag: bool = False


@dataclass
class AnnounceResponse:
    """Peer list handed back to the announcing client.

    ``granted`` is the outside peer charged against the ISP's outgoing
    counter; ``pm_target`` is a Partition Merging repair peer (never
    charged against the counter).  Both also appear first in ``targets``.
    """

    intra: tuple[int, ...]
    granted: Optional[int] = None
    pm_target: Optional[int] = None

    @property
    def targets(self) -> tuple[int, ...]:
        out = []
        if self.pm_target is not None:
            out.append(self.pm_target)
        if self.granted is not None and self.granted != self.pm_target:
            out.append(self.granted)
        out.extend(p for p in self.intra if p not in out)
        return tuple(out)


class _MemberList:
    """Indexable set with O(1) add/discard and seeded uniform sampling."""

    __slots__ = ("items", "pos")

    def __init__(self) -> None:
        self.items: list[int] = []
        self.pos: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, x: int) -> bool:
        return x in self.pos

    def add(self, x: int) -> None:
        if x not in self.pos:
            self.pos[x] = len(self.items)
            self.items.append(x)

    def discard(self, x: int) -> None:
        i = self.pos.pop(x, None)
        if i is None:
            return
        last = self.items.pop()
        if i < len(self.items):
            self.items[i] = last
            self.pos[last] = i

    def sample(self, rng: Random, k: int, exclude: tuple[int, ...] = ()) -> list[int]:
        pool = self.items
        n = len(pool)
        if n == 0:
            return []
        if k + len(exclude) >= n:
            out = [x for x in pool if x not in exclude]
            rng.shuffle(out)
            return out[:k]
        picked = rng.sample(pool, min(n, k + len(exclude)))
        out = [x for x in picked if x not in exclude]
        if len(out) < k:  # excluded entries ate into the sample; fall back
            out = [x for x in pool if x not in exclude]
            rng.shuffle(out)
        return out[:k]

    def choice(self, rng: Random, exclude: tuple[int, ...] = ()) -> Optional[int]:
        pool = self.items
        if not pool:
            return None
        for _ in range(32):
            cand = pool[rng.randrange(len(pool))]
            if cand not in exclude:
                return cand
        filtered = [x for x in pool if x not in exclude]
        if not filtered:
            return None
        return filtered[rng.randrange(len(filtered))]


class IspRegistry:
    """Per-ISP bookkeeping: members, outgoing counter, holders, PM stamp."""

    __slots__ = ("isp_id", "members", "last_announce", "outgoing_counter",
                 "outgoing_holders", "pm_last_grant")

    def __init__(self, isp_id: int) -> None:
        self.isp_id = isp_id
        self.members = _MemberList()
        self.last_announce: dict[int, float] = {}
        self.outgoing_counter = 0
        self.outgoing_holders: dict[int, int] = {}
        self.pm_last_grant: Optional[float] = None


class Tracker:
    """Centralized registry implementing the locality policy.

    ``exempt_peer`` is the initial seed: its announces are served with the
    plain random policy and it is excluded from the candidate pools the
    locality policy draws on, so its neighborhood is shaped only by its own
    (random) announces.
    """

    def __init__(self, config: TrackerConfig, n_isps: int, rng: Random,
                 exempt_peer: Optional[int] = None,
                 log: Optional[Callable[[dict], None]] = None) -> None:
        config.validate()
        if n_isps < 1:
            raise TrackerError("need at least one ISP")
        self.config = config
        self.rng = rng
        self.exempt_peer = exempt_peer
        self.isps = [IspRegistry(i) for i in range(n_isps)]
        self._log = log
        self._global = _MemberList()
        self._peer_isp: dict[int, int] = {}
        self._seeds: set[int] = set()
        self._rr_cursor = 0
        # diagnostics / summary counters
        self.pm_denied_disabled = 0
        self.pm_denied_gate = 0
        self.pm_grants_by_isp = [0] * n_isps
        self.grants_by_src = [0] * n_isps
        self.grants_by_dst = [0] * n_isps
        self.evicted_total = 0

    # -- membership -------------------------------------------------------

    def isp_of(self, peer_id: int) -> int:
        return self._peer_isp[peer_id]

    def n_members(self, isp_id: int) -> int:
        return len(self.isps[isp_id].members)

    def _register(self, peer_id: int, isp_id: int, now: float) -> None:
        known = self._peer_isp.get(peer_id)
        if known is not None and known != isp_id:
            raise TrackerError(f"peer {peer_id} switched ISP {known}->{isp_id}")
        reg = self.isps[isp_id]
        reg.members.add(peer_id)
        reg.last_announce[peer_id] = now
        self._global.add(peer_id)
        self._peer_isp[peer_id] = isp_id

    def remove_peer(self, peer_id: int) -> None:
        isp_id = self._peer_isp.pop(peer_id, None)
        if isp_id is None:
            return
        reg = self.isps[isp_id]
        reg.members.discard(peer_id)
        reg.last_announce.pop(peer_id, None)
        self._global.discard(peer_id)
        self._seeds.discard(peer_id)
        held = reg.outgoing_holders.pop(peer_id, None)
        if held:
            reg.outgoing_counter -= held

    # -- announce ---------------------------------------------------------

    def handle_announce(self, req: AnnounceRequest, now: float) -> AnnounceResponse:
        if not 0 <= req.isp_id < len(self.isps):
            raise TrackerError(f"unknown ISP id {req.isp_id}")
        if req.event == EV_STOPPED:
            self.remove_peer(req.peer_id)
            if self._log:
                self._log({"t": now, "kind": "tracker_stop", "peer": req.peer_id,
                           "isp": req.isp_id})
            return AnnounceResponse(())

        self._register(req.peer_id, req.isp_id, now)
        if req.event == EV_COMPLETED:
            self._seeds.add(req.peer_id)

        pm_target = None
        if req.pm_flag:
            pm_target = self.handle_pm_request(req.isp_id, now, requester=req.peer_id)

        k = self.config.peers_returned_per_announce
        exempt_req = req.peer_id == self.exempt_peer
        if self.config.policy == POLICY_BT or exempt_req:
            intra = self._global.sample(self.rng, k, exclude=(req.peer_id,))
            return AnnounceResponse(tuple(intra), None, pm_target)

        reg = self.isps[req.isp_id]
        exclude = (req.peer_id,) if self.exempt_peer is None \
            else (req.peer_id, self.exempt_peer)
        intra = reg.members.sample(self.rng, k, exclude=exclude)
        granted = None
        if (reg.outgoing_counter < self.config.max_outgoing_per_isp
                and self._holder_gate(reg, req.peer_id)):
            granted = self.select_outside_peer(req.isp_id)
            if granted is not None:
                reg.outgoing_counter += 1
                reg.outgoing_holders[req.peer_id] = \
                    reg.outgoing_holders.get(req.peer_id, 0) + 1
                dst = self._peer_isp[granted]
                self.grants_by_src[req.isp_id] += 1
                self.grants_by_dst[dst] += 1
                if self._log:
                    self._log({"t": now, "kind": "grant", "isp": req.isp_id,
                               "holder": req.peer_id, "target": granted,
                               "target_isp": dst})
        return AnnounceResponse(tuple(intra), granted, pm_target)

    def _holder_gate(self, reg: IspRegistry, peer_id: int) -> bool:
        """Even spread: grant only to announcers holding the ISP minimum."""
        count = reg.outgoing_holders.get(peer_id, 0)
        if count == 0:
            return True
        if len(reg.outgoing_holders) < len(reg.members):
            return False  # some member holds nothing yet
        return count <= min(reg.outgoing_holders.values())

    def distribute_outgoing(self, isp_id: int, candidate_members: list[int]) -> int:
        """Pick the grant recipient among candidates: fewest held, seeded ties."""
        if not candidate_members:
            raise TrackerError("candidate_members must be nonempty")
        holders = self.isps[isp_id].outgoing_holders
        best = min(holders.get(p, 0) for p in candidate_members)
        pool = [p for p in candidate_members if holders.get(p, 0) == best]
        return pool[self.rng.randrange(len(pool))]

    # -- outside peer selection -------------------------------------------

    def select_outside_peer(self, requesting_isp: int,
                            allow_exempt_fallback: bool = False) -> Optional[int]:
        if self.config.selection_strategy == SELECT_RR:
            cand = self._select_rr(requesting_isp)
        else:
            cand = self._select_random(requesting_isp)
        if cand is None and allow_exempt_fallback and self.exempt_peer is not None:
            seed_isp = self._peer_isp.get(self.exempt_peer)
            if seed_isp is not None and seed_isp != requesting_isp:
                return self.exempt_peer
        return cand

    def _eligible_count(self, reg: IspRegistry) -> int:
        n = len(reg.members)
        if self.exempt_peer is not None and self.exempt_peer in reg.members:
            n -= 1
        return n

    def _select_random(self, requesting_isp: int) -> Optional[int]:
        reg = self.isps[requesting_isp]
        outside = len(self._global) - len(reg.members)
        if self.exempt_peer is not None and self.exempt_peer in self._global \
                and self.exempt_peer not in reg.members:
            outside -= 1
        if outside <= 0:
            return None
        for _ in range(64):
            cand = self._global.items[self.rng.randrange(len(self._global.items))]
            if cand != self.exempt_peer and self._peer_isp[cand] != requesting_isp:
                return cand
        pool = [p for p in self._global.items
                if p != self.exempt_peer and self._peer_isp[p] != requesting_isp]
        return pool[self.rng.randrange(len(pool))] if pool else None

    def _select_rr(self, requesting_isp: int) -> Optional[int]:
        n = len(self.isps)
        for step in range(n):
            idx = (self._rr_cursor + step) % n
            if idx == requesting_isp:
                continue
            reg = self.isps[idx]
            if self._eligible_count(reg) == 0:
                continue
            self._rr_cursor = (idx + 1) % n
            exclude = () if self.exempt_peer is None else (self.exempt_peer,)
            return reg.members.choice(self.rng, exclude=exclude)
        return None

    # -- partition merging --------------------------------------------------

    def handle_pm_request(self, isp_id: int, now: float,
                          requester: Optional[int] = None) -> Optional[int]:
        if not self.config.pm_enabled:
            self.pm_denied_disabled += 1
            return None
        if requester is not None and requester in self._seeds:
            return None  # PM is a leecher-side repair signal
        reg = self.isps[isp_id]
        if reg.pm_last_grant is not None and \
                now - reg.pm_last_grant < self.config.t1_grant_period:
            self.pm_denied_gate += 1
            return None
        target = self.select_outside_peer(isp_id, allow_exempt_fallback=True)
        if target is None:
            return None
        reg.pm_last_grant = now
        self.pm_grants_by_isp[isp_id] += 1
        if self._log:
            self._log({"t": now, "kind": "pm_grant", "isp": isp_id,
                       "peer": requester, "target": target,
                       "target_isp": self._peer_isp[target]})
        return target

    # -- eviction -----------------------------------------------------------

    def evict_stale(self, now: float) -> int:
        """Drop peers silent for longer than the eviction timeout."""
        cutoff = now - self.config.eviction_timeout
        evicted = 0
        for reg in self.isps:
            stale = [p for p, t in reg.last_announce.items() if t < cutoff]
            for p in stale:
                self.remove_peer(p)
                evicted += 1
                if self._log:
                    self._log({"t": now, "kind": "evict", "peer": p,
                               "isp": reg.isp_id})
        self.evicted_total += evicted
        return evicted

    # -- summary ------------------------------------------------------------

    def summary(self) -> dict:
        return {
            "grants_by_src": list(self.grants_by_src),
            "grants_by_dst": list(self.grants_by_dst),
            "pm_grants_by_isp": list(self.pm_grants_by_isp),
            "pm_denied_disabled": self.pm_denied_disabled,
            "pm_denied_gate": self.pm_denied_gate,
            "outgoing_counters": [r.outgoing_counter for r in self.isps],
            "evicted": self.evicted_total,
        }
