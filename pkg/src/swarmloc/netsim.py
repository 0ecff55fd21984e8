"""Deterministic discrete-event engine with a fluid bandwidth model.

Transfers are rate-based flows, one piece per (uploader, downloader) pair at
a time.  Rate allocation is two-stage: every uploader splits its capacity
equally over its active flows, then each capped ISP scales its outbound
inter-ISP flows down proportionally to fit the link cap (freed uploader
capacity is not re-granted within the same tick).  Capped groups track a
shared virtual clock so proportional scaling stays O(log n) per flow event
instead of touching every member flow.

Determinism: one event heap ordered by (time, sequence number), all
randomness from per-run seeded PRNG streams, and no iteration over unordered
containers anywhere a decision is made.
"""

from __future__ import annotations

import json
import time as _time
from dataclasses import dataclass, field
from heapq import heappop, heappush
from random import Random
from typing import Optional

from .metrics import MetricsLedger, PartitionEpisode, PeerRecord, detect_partitions
from .peer import (
    Peer,
    PeerConfig,
    ROLE_INITIAL_SEED,
    ROLE_LEECHER,
    ROLE_SEED,
    pick_piece,
)
from .scenario import ScenarioConfig
from .tracker import (
    AnnounceRequest,
    EV_COMPLETED,
    EV_PERIODIC,
    EV_STARTED,
    EV_STOPPED,
    Tracker,
)

# event kinds, total order within a timestamp comes from the sequence number
E_START = 0        # peer_start
E_ANNOUNCE = 1     # announce_due (periodic)
E_REREQUEST = 2    # early re-announce while the peer set is under-filled
E_CHOKE = 3        # choke_round
E_OPT = 4          # optimistic_round
E_XFER = 5         # transfer_complete (uncapped flow)
E_GROUP = 6        # transfer_complete (capped group virtual clock)
E_DEPART = 7       # peer_depart
E_PM = 8           # pm_timer
E_BIN = 9          # metrics_bin_close
E_EVICT = 10       # tracker eviction sweep
E_FORCE = 11       # engineered bridge-peer removal
E_TMAX = 12

EVICT_SWEEP_PERIOD = 300.0
_RESID_EPS = 1e-9


class Flow:
    __slots__ = ("up", "dn", "piece", "remaining", "base", "group",
                 "marker_t", "marker_phi", "phi_end", "ver", "alive")

    def __init__(self, up: Peer, dn: Peer, piece: int, remaining: float) -> None:
        self.up = up
        self.dn = dn
        self.piece = piece
        self.remaining = remaining
        self.base = 0.0
        self.group: Optional[CapGroup] = None
        self.marker_t = 0.0
        self.marker_phi = 0.0
        self.phi_end = 0.0
        self.ver = 0
        self.alive = True


class CapGroup:
    """Outbound inter-ISP flows of one capped ISP under a shared scale."""

    __slots__ = ("isp", "cap", "demand", "scale", "phi", "t_last", "heap",
                 "ever", "n")

    def __init__(self, isp: int, cap: float) -> None:
        self.isp = isp
        self.cap = cap
        self.demand = 0.0
        self.scale = 1.0
        self.phi = 0.0
        self.t_last = 0.0
        self.heap: list = []
        self.ever = 0
        self.n = 0

    def phi_at(self, now: float) -> float:
        return self.phi + self.scale * (now - self.t_last)


@dataclass
class RunResult:
    label: str
    seed: int
    ledger: MetricsLedger
    episodes: list[PartitionEpisode]
    stalled: list[str]
    tracker_summary: dict
    sim_time: float
    wall_seconds: float
    events: Optional[list[dict]] = None
    message_totals: dict = field(default_factory=dict)

    def slim(self) -> "RunResult":
        self.events = None
        return self

    def event_log_lines(self) -> list[str]:
        if self.events is None:
            raise ValueError("events were dropped from this result")
        return [json.dumps(ev, sort_keys=True, separators=(",", ":"))
                for ev in self.events]


class Simulation:
    """One deterministic run of a scenario."""

    def __init__(self, scenario: ScenarioConfig, seed: Optional[int] = None) -> None:
        scenario.validate()
        self.scenario = scenario
        self.seed = scenario.rng_seed if seed is None else seed
        self.rng = Random(f"{self.seed}|run")
        self.now = 0.0
        self.heap: list = []
        self.seq = 0
        self.events: list[dict] = []
        self.isp_names = list(scenario.topology.isp_names)
        self.isp_index = {n: i for i, n in enumerate(self.isp_names)}
        content = scenario.content
        self.n_pieces = content.piece_count
        self.piece_size = float(content.piece_size)
        self.full_mask = (1 << self.n_pieces) - 1
        self.ledger = MetricsLedger(self.isp_names, content.total_bytes)

        caps = scenario.topology.inter_link_caps or {}
        self.groups: list[Optional[CapGroup]] = [
            CapGroup(i, caps[n]) if n in caps else None
            for i, n in enumerate(self.isp_names)
        ]

        self.tracker = Tracker(
            scenario.tracker, len(self.isp_names),
            Random(f"{self.seed}|tracker"),
            exempt_peer=0 if scenario.initial_seed.exempt else None,
            log=self.events.append,
        )
        self.pm_enabled = scenario.tracker.pm_enabled

        cfg = scenario.peer_defaults
        seed_spec = scenario.initial_seed
        self.peers: list[Peer] = [Peer(
            0, "seed", self.isp_index[seed_spec.isp], seed_spec.capacity, 0.0,
            cfg, self.n_pieces, role=ROLE_INITIAL_SEED, exempt=seed_spec.exempt,
        )]
        for spec in scenario.peers:
            p = Peer(len(self.peers), spec.name, self.isp_index[spec.isp],
                     spec.capacity, spec.start, cfg, self.n_pieces,
                     first_set=spec.first_set)
            self.peers.append(p)

        self.alive_regular = 0
        self.pending_starts = 0
        self.stalled_names: list[str] = []
        self.churn_pool = scenario.churn.replacement_pool if scenario.churn else 0
        self.churn_spawned = 0
        self.t_max = scenario.effective_t_max()
        self._stop = False

    # -- plumbing -------------------------------------------------------------

    def _push(self, t: float, kind: int, arg: int, obj) -> None:
        self.seq += 1
        heappush(self.heap, (t, self.seq, kind, arg, obj))

    def _log(self, record: dict) -> None:
        self.events.append(record)

    # -- run ---------------------------------------------------------------------

    def run(self) -> RunResult:
        wall0 = _time.perf_counter()
        self._log({"t": 0.0, "kind": "run_start", "label": self.scenario.label,
                   "seed": self.seed, "n_peers": len(self.peers) - 1,
                   "n_isps": len(self.isp_names)})
        self._push(self.t_max, E_TMAX, 0, None)
        self._push(self.ledger.bin_seconds, E_BIN, 0, None)
        self._push(EVICT_SWEEP_PERIOD, E_EVICT, 0, None)
        for fd in self.scenario.force_departures:
            self._push(fd.time, E_FORCE, self.isp_index[fd.isp], None)
        for p in self.peers:
            self.pending_starts += 1
            self._push(p.start_time, E_START, 0, p)

        heap = self.heap
        if self.pending_starts > 1:  # more than just the initial seed
            while heap:
                t, _, kind, arg, obj = heappop(heap)
                self.now = t
                self._dispatch(kind, arg, obj, t)
                if self._stop or (self.alive_regular == 0
                                  and self.pending_starts == 0):
                    break

        end = self.now
        self._flush_all(end)
        completed = sum(1 for p in self.peers
                        if p.completion_time is not None)
        self._log({"t": end, "kind": "run_end", "completed": completed,
                   "stalled": len(self.stalled_names)})
        for p in self.peers:
            self.ledger.peers.append(PeerRecord(
                name=p.name, isp=p.isp, capacity=p.capacity,
                start=p.start_time, completion=p.completion_time,
                depart=p.depart_time, bytes_down=p.bytes_down,
                bytes_up=p.bytes_up, first_set=p.first_set,
                initial_seed=p.role == ROLE_INITIAL_SEED, stalled=p.stalled,
            ))
        msg_totals = {
            "have": sum(p.msgs_have for p in self.peers),
            "bitfield": sum(p.msgs_bitfield for p in self.peers),
            "interested": sum(p.msgs_interested for p in self.peers),
            "not_interested": sum(p.msgs_not_interested for p in self.peers),
        }
        return RunResult(
            label=self.scenario.label, seed=self.seed, ledger=self.ledger,
            episodes=detect_partitions(self.events),
            stalled=list(self.stalled_names),
            tracker_summary=self.tracker.summary(),
            sim_time=end, wall_seconds=_time.perf_counter() - wall0,
            events=self.events, message_totals=msg_totals,
        )

    def _dispatch(self, kind: int, arg: int, obj, now: float) -> None:
        if kind == E_XFER:
            f = obj
            if f.alive and f.ver == arg:
                self._finish_flow(f, now)
        elif kind == E_GROUP:
            self._group_due(obj, arg, now)
        elif kind == E_CHOKE:
            p = obj
            if p.alive:
                self._choke_round(p, now)
                self._push(now + p.cfg.choke_period, E_CHOKE, 0, p)
        elif kind == E_OPT:
            p = obj
            if p.alive:
                self._optimistic_round(p, now)
                self._push(now + p.cfg.optimistic_period, E_OPT, 0, p)
        elif kind == E_START:
            self._start_peer(obj, now)
        elif kind == E_ANNOUNCE:
            p = obj
            if p.alive:
                self._do_announce(p, EV_PERIODIC, now)
                self._push(now + self.scenario.tracker.reannounce_period,
                           E_ANNOUNCE, 0, p)
        elif kind == E_REREQUEST:
            p = obj
            p.rerequest_pending = False
            if p.alive and len(p.neighbors) < p.cfg.max_peer_set:
                self._do_announce(p, EV_PERIODIC, now)
        elif kind == E_PM:
            self._pm_fire(obj, arg, now)
        elif kind == E_DEPART:
            p = obj
            if p.alive:
                self._depart(p, True, now)
        elif kind == E_BIN:
            self._flush_all(now)
            self._push(now + self.ledger.bin_seconds, E_BIN, 0, None)
        elif kind == E_EVICT:
            self.tracker.evict_stale(now)
            self._push(now + EVICT_SWEEP_PERIOD, E_EVICT, 0, None)
        elif kind == E_FORCE:
            self._force_depart_bridges(arg, now)
        elif kind == E_TMAX:
            self._hit_t_max(now)

    # -- peer lifecycle ---------------------------------------------------------

    def _start_peer(self, p: Peer, now: float) -> None:
        p.alive = True
        self.pending_starts -= 1
        if p.role != ROLE_INITIAL_SEED:
            self.alive_regular += 1
        self._log({"t": now, "kind": "peer_start", "peer": p.name,
                   "isp": p.isp, "role": p.role})
        self._do_announce(p, EV_STARTED, now)
        self._push(now + p.cfg.choke_period, E_CHOKE, 0, p)
        if p.role == ROLE_LEECHER:
            self._push(now + p.cfg.optimistic_period, E_OPT, 0, p)
            self._set_starved(p, now)

    def _complete(self, d: Peer, now: float) -> None:
        d.completion_time = now
        self._log({"t": now, "kind": "complete", "peer": d.name, "isp": d.isp,
                   "duration": now - d.start_time})
        peers = self.peers
        d.role = ROLE_SEED
        for x in list(d.interested_in):
            self._drop_interest(d, peers[x], now)
        d.views.clear()
        d.avail = []
        d.starved = False
        d.pm_ver += 1
        self.tracker.handle_announce(
            AnnounceRequest(d.idx, d.isp, EV_COMPLETED), now)
        self._push(now + d.cfg.seed_linger, E_DEPART, 0, d)
        churn = self.scenario.churn
        if churn and d.first_set and self.churn_pool > 0:
            self.churn_pool -= 1
            if churn.assignment == "uniform":
                isp = self.rng.randrange(len(self.isp_names))
            else:
                isp = d.isp
            rp = Peer(len(peers), f"c{self.churn_spawned:05d}", isp,
                      d.capacity, now, d.cfg, self.n_pieces, first_set=False)
            self.churn_spawned += 1
            peers.append(rp)
            self.pending_starts += 1
            self._push(now, E_START, 0, rp)

    def _depart(self, p: Peer, clean: bool, now: float) -> None:
        if not p.alive:
            return
        p.alive = False
        p.depart_time = now
        if p.role != ROLE_INITIAL_SEED:
            self.alive_regular -= 1
        if clean:
            self.tracker.handle_announce(
                AnnounceRequest(p.idx, p.isp, EV_STOPPED), now)
        nbs = [self.peers[i] for i in list(p.neighbors)]
        for nb in nbs:
            self._disconnect(p, nb, now)
        self._log({"t": now, "kind": "depart", "peer": p.name, "isp": p.isp,
                   "clean": clean})
        for nb in nbs:
            if nb.alive and len(nb.neighbors) < nb.cfg.max_peer_set:
                self._do_announce(nb, EV_PERIODIC, now)

    def _force_depart_bridges(self, isp: int, now: float) -> None:
        peers = self.peers
        victims = []
        for p in peers:
            if p.alive and p.isp == isp and p.role != ROLE_INITIAL_SEED:
                if any(peers[n].isp != isp for n in p.neighbors):
                    victims.append(p)
        self._log({"t": now, "kind": "force_depart", "isp": isp,
                   "peers": [v.name for v in victims]})
        for v in victims:
            self._depart(v, False, now)

    def _hit_t_max(self, now: float) -> None:
        for p in self.peers:
            if p.alive and p.role == ROLE_LEECHER:
                p.stalled = True
                self.stalled_names.append(p.name)
        self._log({"t": now, "kind": "stall", "peers": list(self.stalled_names)})
        self._stop = True

    # -- announces and connections ------------------------------------------------

    def _do_announce(self, p: Peer, event: str, now: float,
                     pm: bool = False) -> None:
        if not p.alive:
            return
        resp = self.tracker.handle_announce(
            AnnounceRequest(p.idx, p.isp, event, pm), now)
        peers = self.peers
        seed_dialer = p.role == ROLE_INITIAL_SEED
        for t_idx in resp.targets:
            priority = seed_dialer or t_idx == resp.granted \
                or t_idx == resp.pm_target
            self._dial(p, peers[t_idx], priority, now)
        self._ensure_rerequest(p, now)

    def _ensure_rerequest(self, p: Peer, now: float) -> None:
        if p.alive and not p.rerequest_pending \
                and len(p.neighbors) < p.cfg.max_peer_set:
            p.rerequest_pending = True
            self._push(now + p.cfg.rerequest_period, E_REREQUEST, 0, p)

    def _dial(self, a: Peer, b: Peer, priority: bool, now: float) -> bool:
        if a is b or not b.alive or not a.alive or b.idx in a.neighbors:
            return False
        if len(a.neighbors) >= a.cfg.max_peer_set \
                and not (priority and self._evict_for(a, now)):
            return False
        if len(b.neighbors) >= b.cfg.max_peer_set \
                and not (priority and self._evict_for(b, now)):
            return False
        self._connect(a, b, now)
        return True

    def _evict_for(self, x: Peer, now: float) -> bool:
        peers = self.peers
        victims = [n for n in x.neighbors
                   if peers[n].isp == x.isp
                   and peers[n].role != ROLE_INITIAL_SEED]
        if not victims:
            return False
        v = peers[victims[self.rng.randrange(len(victims))]]
        self._disconnect(x, v, now)
        self._ensure_rerequest(x, now)
        self._ensure_rerequest(v, now)
        return True

    def _connect(self, a: Peer, b: Peer, now: float) -> None:
        a.neighbors[b.idx] = None
        b.neighbors[a.idx] = None
        a.ring.append(b.idx)
        b.ring.append(a.idx)
        a.msgs_bitfield += 1
        b.msgs_bitfield += 1
        if a.role == ROLE_LEECHER:
            a.views[b.idx] = b.bitmap
            if b.bitmap:
                self._bump_avail(a, b.bitmap, 1)
            if b.bitmap & ~a.bitmap:
                self._add_interest(a, b, now)
        if b.role == ROLE_LEECHER:
            b.views[a.idx] = a.bitmap
            if a.bitmap:
                self._bump_avail(b, a.bitmap, 1)
            if a.bitmap & ~b.bitmap:
                self._add_interest(b, a, now)

    def _disconnect(self, a: Peer, b: Peer, now: float) -> None:
        a.neighbors.pop(b.idx, None)
        b.neighbors.pop(a.idx, None)
        f = a.flows_out.get(b.idx)
        if f is not None:
            self._cancel_flow(f, now)
        f = b.flows_out.get(a.idx)
        if f is not None:
            self._cancel_flow(f, now)
        for x, y in ((a, b), (b, a)):
            if x.role == ROLE_LEECHER:
                view = x.views.pop(y.idx, 0)
                if view:
                    self._bump_avail(x, view, -1)
            x.ring_remove(y.idx)
            x.unchoked.pop(y.idx, None)
            x.unchoked_by.pop(y.idx, None)
            if x.optimistic == y.idx:
                x.optimistic = None
            x.recv_total.pop(y.idx, None)
            x.rate_snapshot.pop(y.idx, None)
            x.interested_me.pop(y.idx, None)
            if y.idx in x.interested_in:
                del x.interested_in[y.idx]
                if not x.interested_in:
                    self._set_starved(x, now)

    @staticmethod
    def _bump_avail(p: Peer, mask: int, delta: int) -> None:
        avail = p.avail
        while mask:
            low = mask & -mask
            avail[low.bit_length() - 1] += delta
            mask ^= low

    # -- interest and starvation ---------------------------------------------------

    def _add_interest(self, d: Peer, u: Peer, now: float) -> None:
        if u.idx in d.interested_in:
            return
        d.interested_in[u.idx] = None
        d.msgs_interested += 1
        u.interested_me[d.idx] = None
        if len(d.interested_in) == 1:
            self._set_starved(d, now)

    def _drop_interest(self, d: Peer, u: Peer, now: float) -> None:
        if u.idx not in d.interested_in:
            return
        del d.interested_in[u.idx]
        d.msgs_not_interested += 1
        u.interested_me.pop(d.idx, None)
        if not d.interested_in:
            self._set_starved(d, now)

    def _set_starved(self, p: Peer, now: float) -> None:
        starved = p.alive and p.role == ROLE_LEECHER and not p.interested_in
        if starved == p.starved:
            return
        p.starved = starved
        p.pm_ver += 1
        self._log({"t": now, "kind": "starve", "peer": p.name, "isp": p.isp,
                   "on": starved})
        if starved:
            p.starve_since = now
            if self.pm_enabled:
                deadline = now + p.cfg.t0_pm_base * (1.0 - self.rng.random())
                self._push(deadline, E_PM, p.pm_ver, p)
        else:
            p.starve_since = None

    def _pm_fire(self, p: Peer, ver: int, now: float) -> None:
        if p.pm_ver != ver or not p.starved or not p.alive \
                or p.role != ROLE_LEECHER:
            return
        self._log({"t": now, "kind": "pm_fire", "peer": p.name, "isp": p.isp})
        self._do_announce(p, EV_PERIODIC, now, pm=True)
        if p.starved and p.alive:
            p.pm_ver += 1
            deadline = now + p.cfg.t0_pm_base * (1.0 - self.rng.random())
            self._push(deadline, E_PM, p.pm_ver, p)

    # -- choking ---------------------------------------------------------------------

    def _choke_round(self, p: Peer, now: float) -> None:
        if p.role == ROLE_LEECHER:
            rates: dict[int, float] = {}
            flows_in = p.flows_in
            snap = p.rate_snapshot
            newsnap: dict[int, float] = {}
            period = p.cfg.choke_period
            for n_idx, total in p.recv_total.items():
                f = flows_in.get(n_idx)
                cur = total if f is None else total + self._progress(f, now)
                rates[n_idx] = (cur - snap.get(n_idx, 0.0)) / period
                if f is not None:
                    newsnap[n_idx] = cur
            p.rate_snapshot = newsnap
            if len(p.recv_total) > len(flows_in):
                p.recv_total = {n: v for n, v in p.recv_total.items()
                                if n in flows_in}
            regular = p.rank_regular_unchokes(rates, self.rng)
            opt = p.optimistic
            if opt is not None and (opt not in p.neighbors
                                    or opt not in p.interested_me):
                opt = p.optimistic = None
            new = dict.fromkeys(regular)
            if opt is not None:
                new[opt] = None
        else:
            new = dict.fromkeys(p.ring_unchokes())
        self._apply_unchokes(p, new, now)
        # an unchoked downloader may have been idle (all its candidates were
        # in flight); give it another chance each round
        peers = self.peers
        flows_out = p.flows_out
        for n in p.unchoked:
            if n not in flows_out:
                self._try_request(peers[n], p, now)
        p.round_no += 1

    def _optimistic_round(self, p: Peer, now: float) -> None:
        if p.role != ROLE_LEECHER:
            return
        cands = [n for n in p.interested_me if n not in p.unchoked]
        old = p.optimistic
        new_opt = cands[self.rng.randrange(len(cands))] if cands else None
        if new_opt == old:
            return
        p.optimistic = new_opt
        new = dict(p.unchoked)
        if old is not None:
            new.pop(old, None)
        if new_opt is not None:
            new[new_opt] = None
        self._apply_unchokes(p, new, now)

    def _apply_unchokes(self, p: Peer, new: dict[int, None], now: float) -> None:
        old = p.unchoked
        peers = self.peers
        for n in old:
            if n not in new:
                nb = peers[n]
                nb.unchoked_by.pop(p.idx, None)
                f = p.flows_out.get(n)
                if f is not None:
                    self._cancel_flow(f, now)
        added = [n for n in new if n not in old]
        p.unchoked = new
        for n in added:
            nb = peers[n]
            nb.unchoked_by[p.idx] = None
            self._try_request(nb, p, now)

    # -- requests and flows -------------------------------------------------------------

    def _try_request(self, d: Peer, u: Peer, now: float) -> None:
        if not d.alive or d.role != ROLE_LEECHER or u.idx in d.flows_in:
            return
        view = d.views.get(u.idx, 0)
        if not view & ~d.bitmap:
            self._drop_interest(d, u, now)
            return
        piece = pick_piece(view & ~(d.bitmap | d.in_flight), d.avail,
                           d.partials, self.rng)
        if piece is None:
            return  # everything useful is already in flight from others
        prior = d.partials.get(piece, 0.0)
        f = Flow(u, d, piece, self.piece_size - prior)
        f.marker_t = now
        d.in_flight |= 1 << piece
        g = self.groups[u.isp]
        if g is not None and d.isp != u.isp:
            f.group = g
            f.marker_phi = g.phi_at(now)
            g.n += 1
        u.flows_out[d.idx] = f
        d.flows_in[u.idx] = f
        self._rebalance(u, now)

    def _progress(self, f: Flow, now: float) -> float:
        """Bytes delivered since the flow's last credit marker (read-only)."""
        if not f.base:
            return 0.0
        if f.group is None:
            return f.base * (now - f.marker_t)
        return f.base * (f.group.phi_at(now) - f.marker_phi)

    def _credit_flow(self, f: Flow, now: float) -> None:
        base = f.base
        if base:
            if f.group is None:
                delivered = base * (now - f.marker_t)
            else:
                phi_now = f.group.phi_at(now)
                delivered = base * (phi_now - f.marker_phi)
                f.marker_phi = phi_now
            if delivered > 0.0:
                f.remaining -= delivered
                self.ledger.credit(f.up.isp, f.dn.isp, f.marker_t, delivered)
                f.up.bytes_up += delivered
                dn = f.dn
                dn.bytes_down += delivered
                rt = dn.recv_total
                up_idx = f.up.idx
                rt[up_idx] = rt.get(up_idx, 0.0) + delivered
        f.marker_t = now

    def _rebalance(self, u: Peer, now: float) -> None:
        flows = u.flows_out
        n = len(flows)
        if n == 0:
            return
        newbase = u.capacity / n
        touched: Optional[CapGroup] = None
        for f in flows.values():
            if f.base == newbase:
                continue
            self._credit_flow(f, now)
            g = f.group
            if g is not None:
                g.demand += newbase - f.base
                f.phi_end = f.marker_phi + f.remaining / newbase
                self.seq += 1
                heappush(g.heap, (f.phi_end, self.seq, f))
                touched = g
            f.base = newbase
            if g is None:
                f.ver += 1
                self._push(now + f.remaining / newbase, E_XFER, f.ver, f)
        if touched is not None:
            self._group_changed(touched, now)

    def _group_changed(self, g: CapGroup, now: float) -> None:
        g.phi = g.phi_at(now)
        g.t_last = now
        g.scale = 1.0 if g.demand <= g.cap else g.cap / g.demand
        g.ever += 1
        heap = g.heap
        while heap:
            phi_end, _, f = heap[0]
            if f.alive and f.phi_end == phi_end:
                break
            heappop(heap)
        if heap:
            dt = (heap[0][0] - g.phi) / g.scale
            if dt < 0.0:
                dt = 0.0
            self._push(now + dt, E_GROUP, g.ever, g)
        if len(heap) > 64 and len(heap) > 4 * max(g.n, 1):
            live = [(ph, s, f) for ph, s, f in heap
                    if f.alive and f.phi_end == ph]
            live.sort()
            g.heap = live

    def _group_due(self, g: CapGroup, ever: int, now: float) -> None:
        if g.ever != ever:
            return
        phi_now = g.phi_at(now)
        tol = phi_now + _RESID_EPS * (1.0 + abs(phi_now))
        due = []
        heap = g.heap
        while heap:
            phi_end, _, f = heap[0]
            if not (f.alive and f.phi_end == phi_end):
                heappop(heap)
                continue
            if phi_end <= tol:
                heappop(heap)
                due.append(f)
            else:
                break
        for f in due:
            if f.alive:
                self._finish_flow(f, now)
        self._group_changed(g, now)

    def _remove_flow(self, f: Flow) -> None:
        f.alive = False
        f.ver += 1
        g = f.group
        if g is not None:
            g.demand -= f.base
            g.n -= 1
            if g.demand < 0.0:
                g.demand = 0.0
        del f.up.flows_out[f.dn.idx]
        del f.dn.flows_in[f.up.idx]

    def _cancel_flow(self, f: Flow, now: float) -> None:
        self._credit_flow(f, now)
        d = f.dn
        done = self.piece_size - f.remaining
        if done > _RESID_EPS:
            d.partials[f.piece] = done
        else:
            d.partials.pop(f.piece, None)
        d.in_flight &= ~(1 << f.piece)
        g = f.group
        u = f.up
        self._remove_flow(f)
        self._rebalance(u, now)
        if g is not None:
            self._group_changed(g, now)
        # the piece is requestable again; wake idle uploaders of this peer
        if d.alive and d.role == ROLE_LEECHER:
            peers = self.peers
            flows_in = d.flows_in
            for n in d.unchoked_by:
                if n not in flows_in:
                    nb = peers[n]
                    if nb.alive:
                        self._try_request(d, nb, now)

    def _finish_flow(self, f: Flow, now: float) -> None:
        self._credit_flow(f, now)
        resid = f.remaining
        if resid > 0.0:
            # force byte-exact piece totals despite float rate integration
            self.ledger.credit(f.up.isp, f.dn.isp, now, resid)
            f.up.bytes_up += resid
            f.dn.bytes_down += resid
            rt = f.dn.recv_total
            rt[f.up.idx] = rt.get(f.up.idx, 0.0) + resid
        f.remaining = 0.0
        u, d, g = f.up, f.dn, f.group
        self._remove_flow(f)
        self._rebalance(u, now)
        if g is not None:
            self._group_changed(g, now)
        self._on_piece_complete(d, f.piece, u, now)

    # -- piece completion ------------------------------------------------------------------

    def _on_piece_complete(self, d: Peer, piece: int, u: Optional[Peer],
                           now: float) -> None:
        bit = 1 << piece
        if d.bitmap & bit:
            d.dup_completions += 1
            return
        d.bitmap |= bit
        d.have_count += 1
        d.in_flight &= ~bit
        d.partials.pop(piece, None)
        peers = self.peers
        d_idx = d.idx
        for n_idx in d.neighbors:
            nb = peers[n_idx]
            nb.msgs_have += 1
            if nb.role != ROLE_LEECHER:
                continue
            nb.views[d_idx] |= bit
            nb.avail[piece] += 1
            if not nb.bitmap & bit:
                if d_idx not in nb.interested_in:
                    self._add_interest(nb, d, now)
                if d_idx in nb.unchoked_by and d_idx not in nb.flows_in:
                    self._try_request(nb, d, now)
        if d.bitmap == self.full_mask:
            self._complete(d, now)
            return
        own = d.bitmap
        views = d.views
        drop = [x for x in d.interested_in if not views[x] & ~own]
        for x in drop:
            self._drop_interest(d, peers[x], now)
        if u is not None and u.alive and d_idx in u.unchoked:
            self._try_request(d, u, now)

    # -- bookkeeping -----------------------------------------------------------------------

    def _flush_all(self, now: float) -> None:
        for p in self.peers:
            if p.flows_out:
                for f in list(p.flows_out.values()):
                    self._credit_flow(f, now)


def run(scenario: ScenarioConfig, seed: Optional[int] = None,
        keep_events: bool = True) -> RunResult:
    """Execute one scenario; byte-identical outputs for identical inputs."""
    result = Simulation(scenario, seed=seed).run()
    if not keep_events:
        result.slim()
    return result
