"""Per-peer client engine.

State is mutated only by the event loop (see netsim).  The choke algorithm
follows the mainline client lineage: leechers unchoke the three interested
neighbors with the best measured download rate plus one optimistic unchoke
rotated every optimistic period; seeds rotate their upload slots round-robin
over interested neighbors so everyone gets served.

Piece bookkeeping uses plain ints as bitmaps (bit i == piece i owned) and a
per-peer availability vector counting how many neighbor views advertise each
piece, which is what rarest-first selection ranks on.
"""

from __future__ import annotations

from dataclasses import dataclass
from heapq import nlargest
from random import Random
from typing import Optional

ROLE_LEECHER = "leecher"
ROLE_SEED = "seed"
ROLE_INITIAL_SEED = "initial_seed"


@dataclass
class PeerConfig:
    upload_capacity: float = 20.0 * 1024  # bytes/second
    upload_slots: int = 4
    max_peer_set: int = 80
    optimistic_period: float = 30.0
    choke_period: float = 10.0
    rate_window: float = 10.0
    t0_pm_base: float = 60.0
    seed_linger: float = 300.0
    rerequest_period: float = 60.0

    def validate(self) -> None:
        if self.upload_slots < 1:
            raise ValueError("upload_slots must be >= 1")
        if self.max_peer_set < self.upload_slots:
            raise ValueError("max_peer_set must be >= upload_slots")


@dataclass
class Content:
    piece_count: int = 400
    piece_size: int = 256 * 1024

    def __post_init__(self) -> None:
        if self.piece_count < 1:
            raise ValueError("piece_count must be >= 1")

    @property
    def total_bytes(self) -> int:
        return self.piece_count * self.piece_size


def pick_piece(candidates: int, availability: list[int],
               partials: dict[int, float], rng: Random) -> Optional[int]:
    """Choose the next piece to request from a candidate bitmap.

    Partially downloaded candidates are finished first (most-complete first),
    mirroring the strict-priority behavior of real clients; otherwise the
    candidate with minimum availability wins, ties broken by seeded
    reservoir sampling.
    """
    if not candidates:
        return None
    if partials:
        best_p = -1
        best_done = -1.0
        for piece, done in partials.items():
            if (candidates >> piece) & 1 and done > best_done:
                best_done = done
                best_p = piece
        if best_p >= 0:
            return best_p
    best = -1
    best_av = 1 << 30
    ties = 0
    m = candidates
    while m:
        low = m & -m
        i = low.bit_length() - 1
        m ^= low
        av = availability[i]
        if av < best_av:
            best_av = av
            best = i
            ties = 1
        elif av == best_av:
            ties += 1
            if rng.random() * ties < 1.0:
                best = i
    return best


class Peer:
    """Mutable per-peer simulation state."""

    __slots__ = (
        "idx", "name", "isp", "capacity", "cfg", "start_time", "role",
        "first_set", "exempt", "alive", "bitmap", "have_count", "in_flight",
        "partials", "neighbors", "views", "avail", "interested_in",
        "interested_me", "regular_unchoked", "optimistic", "unchoked",
        "unchoked_by", "flows_out", "flows_in", "recv_total", "rate_snapshot",
        "ring", "ring_cursor", "round_no", "bytes_down",
        "bytes_up", "completion_time", "pm_ver", "starved", "starve_since",
        "rerequest_pending", "announce_pending", "msgs_have", "msgs_bitfield",
        "msgs_interested", "msgs_not_interested", "dup_completions",
        "depart_time", "stalled",
    )

    def __init__(self, idx: int, name: str, isp: int, capacity: float,
                 start_time: float, cfg: PeerConfig, n_pieces: int,
                 role: str = ROLE_LEECHER, first_set: bool = True,
                 exempt: bool = False) -> None:
        self.idx = idx
        self.name = name
        self.isp = isp
        self.capacity = capacity
        self.cfg = cfg
        self.start_time = start_time
        self.role = role
        self.first_set = first_set
        self.exempt = exempt
        self.alive = False
        full = (1 << n_pieces) - 1
        self.bitmap = full if role != ROLE_LEECHER else 0
        self.have_count = n_pieces if role != ROLE_LEECHER else 0
        self.in_flight = 0
        self.partials: dict[int, float] = {}
        self.neighbors: dict[int, None] = {}
        self.views: dict[int, int] = {}
        self.avail: list[int] = [0] * n_pieces if role == ROLE_LEECHER else []
        self.interested_in: dict[int, None] = {}
        self.interested_me: dict[int, None] = {}
        self.regular_unchoked: tuple[int, ...] = ()
        self.optimistic: Optional[int] = None
        self.unchoked: dict[int, None] = {}
        self.unchoked_by: dict[int, None] = {}
        self.flows_out: dict[int, object] = {}
        self.flows_in: dict[int, object] = {}
        self.recv_total: dict[int, float] = {}
        self.rate_snapshot: dict[int, float] = {}
        self.ring: list[int] = []
        self.ring_cursor = 0
        self.round_no = 0
        self.bytes_down = 0.0
        self.bytes_up = 0.0
        self.completion_time: Optional[float] = None
        self.pm_ver = 0
        self.starved = False
        self.starve_since: Optional[float] = None
        self.rerequest_pending = False
        self.announce_pending = False
        self.msgs_have = 0
        self.msgs_bitfield = 0
        self.msgs_interested = 0
        self.msgs_not_interested = 0
        self.dup_completions = 0
        self.depart_time: Optional[float] = None
        self.stalled = False

    # -- protocol predicates ------------------------------------------------

    def is_seed(self) -> bool:
        return self.role != ROLE_LEECHER

    def wants_from(self, other_idx: int) -> bool:
        """True if the neighbor's advertised view holds a piece we miss."""
        view = self.views.get(other_idx, 0)
        return bool(view & ~self.bitmap)

    def select_piece(self, from_idx: int, rng: Random) -> Optional[int]:
        """Rarest-first choice among the neighbor's pieces we miss and have
        not already got in flight."""
        view = self.views.get(from_idx, 0)
        candidates = view & ~(self.bitmap | self.in_flight)
        return pick_piece(candidates, self.avail, self.partials, rng)

    # -- choking --------------------------------------------------------------

    def rank_regular_unchokes(self, rates: dict[int, float],
                              rng: Random) -> tuple[int, ...]:
        """Leecher: top (slots-1) interested neighbors by download rate.

        Ties keep currently unchoked neighbors (so a zero-rate transfer is
        not cut off mid-piece every round), then fall to seeded randomness.
        """
        n_regular = max(self.cfg.upload_slots - 1, 1)
        unchoked = self.unchoked
        ranked = nlargest(
            n_regular,
            ((rates.get(n, 0.0), 1 if n in unchoked else 0, rng.random(), n)
             for n in self.interested_me),
        )
        return tuple(r[3] for r in ranked)

    def ring_unchokes(self) -> tuple[int, ...]:
        """Seed: next upload_slots interested neighbors in ring order."""
        ring = self.ring
        n = len(ring)
        if n == 0:
            return ()
        chosen = []
        i = self.ring_cursor
        scanned = 0
        while scanned < n and len(chosen) < self.cfg.upload_slots:
            nb = ring[i % n]
            if nb in self.interested_me:
                chosen.append(nb)
            i += 1
            scanned += 1
        if chosen:
            self.ring_cursor = i % n
        return tuple(chosen)

    def ring_remove(self, nb: int) -> None:
        try:
            i = self.ring.index(nb)
        except ValueError:
            return
        self.ring.pop(i)
        if i < self.ring_cursor:
            self.ring_cursor -= 1
        if self.ring and self.ring_cursor >= len(self.ring):
            self.ring_cursor = 0
