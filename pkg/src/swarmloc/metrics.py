"""Run analytics: replication overhead, 95th percentile, slowdown, partitions.

The ledger keeps outbound inter-ISP bytes per source ISP in 300 s bins (what
the overhead and percentile metrics read) plus total bytes per (src, dst)
ISP pair for conservation checks and per-destination accounting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

BIN_SECONDS = 300.0


class MetricsError(ValueError):
    """Metric requested on a run that cannot provide it."""


@dataclass
class PeerRecord:
    name: str
    isp: int
    capacity: float
    start: float
    completion: Optional[float] = None
    depart: Optional[float] = None
    bytes_down: float = 0.0
    bytes_up: float = 0.0
    first_set: bool = True
    initial_seed: bool = False
    stalled: bool = False


class MetricsLedger:
    """Upload-byte accounting plus per-peer completion records."""

    def __init__(self, isp_names: list[str], content_bytes: int,
                 bin_seconds: float = BIN_SECONDS) -> None:
        self.isp_names = list(isp_names)
        self.content_bytes = content_bytes
        self.bin_seconds = bin_seconds
        self.out_bins: list[list[float]] = [[] for _ in isp_names]
        self.pair_totals: dict[tuple[int, int], float] = {}
        self.peers: list[PeerRecord] = []
        self.empty_reads = 0  # diagnostic: percentile asked of a silent ISP

    # -- crediting (hot path) -------------------------------------------------

    def credit(self, src: int, dst: int, interval_start: float, nbytes: float) -> None:
        if nbytes <= 0.0:
            return
        key = (src, dst)
        self.pair_totals[key] = self.pair_totals.get(key, 0.0) + nbytes
        if src != dst:
            bins = self.out_bins[src]
            b = int(interval_start // self.bin_seconds)
            if b >= len(bins):
                bins.extend([0.0] * (b + 1 - len(bins)))
            bins[b] += nbytes

    # -- metrics ---------------------------------------------------------------

    def overhead(self, isp: int) -> float:
        """Outbound inter-ISP bytes of one ISP in units of the content size."""
        return sum(self.out_bins[isp]) / self.content_bytes

    def mean_overhead(self) -> float:
        return sum(self.overhead(i) for i in range(len(self.isp_names))) \
            / len(self.isp_names)

    def percentile95(self, isp: int) -> float:
        """Nearest-rank-upper p95 of per-bin outbound bytes over the bins
        from run start through the last nonzero bin, in content units."""
        bins = self.out_bins[isp]
        last = len(bins) - 1
        while last >= 0 and bins[last] == 0.0:
            last -= 1
        if last < 0:
            self.empty_reads += 1
            return 0.0
        series = sorted(bins[: last + 1])
        idx = math.ceil(0.95 * (len(series) - 1))
        return series[idx] / self.content_bytes

    # -- slowdown ---------------------------------------------------------------

    def ideal_completion(self) -> float:
        if not self.peers:
            raise MetricsError("no peers recorded")
        mean_cap = sum(p.capacity for p in self.peers) / len(self.peers)
        return self.content_bytes / mean_cap

    def slowdown_report(self) -> "SlowdownReport":
        ideal = self.ideal_completion()
        per_peer: list[tuple[str, int, float]] = []
        stalled: list[str] = []
        for p in self.peers:
            if p.initial_seed:
                continue
            if p.completion is None:
                stalled.append(p.name)
                continue
            per_peer.append((p.name, p.isp, (p.completion - p.start) / ideal))
        if not per_peer:
            raise MetricsError("no completed peers; cannot compute slowdown")
        by_isp: dict[int, list[float]] = {}
        for _, isp, s in per_peer:
            by_isp.setdefault(isp, []).append(s)
        isp_rows = {
            isp: (sum(v) / len(v), min(v), max(v), len(v))
            for isp, v in by_isp.items()
        }
        values = [s for _, _, s in per_peer]
        return SlowdownReport(
            ideal_completion=ideal,
            per_peer=per_peer,
            per_isp=isp_rows,
            mean=sum(values) / len(values),
            minimum=min(values),
            maximum=max(values),
            stalled=stalled,
        )

    # -- conservation ------------------------------------------------------------

    def total_uploaded(self) -> float:
        return sum(self.pair_totals.values())

    def inter_isp_out(self) -> float:
        return sum(v for (s, d), v in self.pair_totals.items() if s != d)

    def inter_isp_in(self) -> float:
        return sum(v for (s, d), v in self.pair_totals.items() if d != s)


@dataclass
class SlowdownReport:
    ideal_completion: float
    per_peer: list[tuple[str, int, float]]
    per_isp: dict[int, tuple[float, float, float, int]]  # mean, min, max, n
    mean: float
    minimum: float
    maximum: float
    stalled: list[str] = field(default_factory=list)


# -- partition episodes ------------------------------------------------------


@dataclass
class PartitionEpisode:
    isp: int
    start: float
    end: float
    affected: list[str]


def detect_partitions(events: Iterable[dict]) -> list[PartitionEpisode]:
    """Scan an event log for intervals where every live leecher of an ISP is
    starved (no neighbor advertises a piece the leecher misses)."""
    leechers: dict[int, set[str]] = {}
    starved: dict[int, set[str]] = {}
    open_since: dict[int, float] = {}
    affected: dict[int, set[str]] = {}
    episodes: list[PartitionEpisode] = []
    t_end = 0.0

    def update(isp: int, t: float) -> None:
        ls = leechers.get(isp) or set()
        sv = starved.get(isp) or set()
        active = bool(ls) and sv >= ls
        if active and isp not in open_since:
            open_since[isp] = t
            affected[isp] = set(ls)
        elif not active and isp in open_since:
            episodes.append(PartitionEpisode(isp, open_since.pop(isp), t,
                                             sorted(affected.pop(isp))))
        elif active:
            affected[isp] |= ls

    for ev in events:
        kind = ev.get("kind")
        t = ev.get("t", t_end)
        t_end = max(t_end, t)
        if kind == "peer_start":
            if ev.get("role") == "leecher":
                leechers.setdefault(ev["isp"], set()).add(ev["peer"])
                update(ev["isp"], t)
        elif kind == "starve":
            isp = ev["isp"]
            if ev["on"]:
                starved.setdefault(isp, set()).add(ev["peer"])
            else:
                starved.get(isp, set()).discard(ev["peer"])
            update(isp, t)
        elif kind in ("complete", "depart"):
            isp = ev["isp"]
            leechers.get(isp, set()).discard(ev["peer"])
            starved.get(isp, set()).discard(ev["peer"])
            update(isp, t)
        elif kind == "run_end":
            t_end = max(t_end, t)
    for isp, since in sorted(open_since.items()):
        episodes.append(PartitionEpisode(isp, since, t_end,
                                         sorted(affected.get(isp, set()))))
    episodes.sort(key=lambda e: (e.start, e.isp))
    return episodes


# -- CSV export ----------------------------------------------------------------

PER_ISP_HEADER = "isp,n_peers,overhead,p95,slowdown_mean,slowdown_min,slowdown_max"
PER_PEER_HEADER = ("peer,isp,capacity,start,completion,duration,slowdown,"
                   "bytes_down,bytes_up,stalled")
EPISODES_HEADER = "isp,start,end,n_affected,affected"


def _fmt(x: float) -> str:
    return repr(round(float(x), 9))


def per_isp_csv(ledger: MetricsLedger) -> str:
    try:
        report = ledger.slowdown_report()
        per_isp = report.per_isp
    except MetricsError:
        per_isp = {}
    counts: dict[int, int] = {}
    for p in ledger.peers:
        if not p.initial_seed:
            counts[p.isp] = counts.get(p.isp, 0) + 1
    lines = [PER_ISP_HEADER]
    for i, name in enumerate(ledger.isp_names):
        s = per_isp.get(i)
        srow = f"{_fmt(s[0])},{_fmt(s[1])},{_fmt(s[2])}" if s else ",,"
        lines.append(f"{name},{counts.get(i, 0)},{_fmt(ledger.overhead(i))},"
                     f"{_fmt(ledger.percentile95(i))},{srow}")
    return "\n".join(lines) + "\n"


def per_peer_csv(ledger: MetricsLedger) -> str:
    try:
        ideal = ledger.ideal_completion()
    except MetricsError:
        ideal = float("nan")
    lines = [PER_PEER_HEADER]
    for p in ledger.peers:
        if p.initial_seed:
            continue
        if p.completion is not None:
            dur = p.completion - p.start
            comp, slow = _fmt(p.completion), _fmt(dur / ideal)
            dur_s = _fmt(dur)
        else:
            comp = slow = dur_s = ""
        lines.append(f"{p.name},{ledger.isp_names[p.isp]},{_fmt(p.capacity)},"
                     f"{_fmt(p.start)},{comp},{dur_s},{slow},"
                     f"{_fmt(p.bytes_down)},{_fmt(p.bytes_up)},"
                     f"{int(p.stalled)}")
    return "\n".join(lines) + "\n"


def episodes_csv(episodes: list[PartitionEpisode], isp_names: list[str]) -> str:
    lines = [EPISODES_HEADER]
    for e in episodes:
        lines.append(f"{isp_names[e.isp]},{_fmt(e.start)},{_fmt(e.end)},"
                     f"{len(e.affected)},{';'.join(e.affected)}")
    return "\n".join(lines) + "\n"
