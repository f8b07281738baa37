"""Wall time, resident memory and traffic per unit of work."""

from __future__ import annotations

import csv
import resource
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

FIELDS = ("layer", "unit", "party", "wall_s", "peak_rss_mb", "rss_mb", "frames_sent", "bytes_sent",
          "frames_recv", "bytes_recv")


def peak_rss_mb() -> float:
    """High-water resident set of this process.

    Prefers ``VmHWM``: ``ru_maxrss`` survives exec on Linux, so a process
    spawned from a large parent would report the parent's peak.
    """
    try:
        with open("/proc/self/status") as fh:
            for line in fh:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) / 1024.0
    except OSError:
        pass
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def current_rss_mb() -> float:
    try:
        with open("/proc/self/statm") as fh:
            pages = int(fh.read().split()[1])
        return pages * resource.getpagesize() / 2**20
    except OSError:
        return float("nan")


@dataclass
class UnitRecord:
    layer: str
    unit: str
    party: int
    wall_s: float = 0.0
    peak_rss_mb: float = 0.0
    rss_mb: float = 0.0
    frames_sent: int = 0
    bytes_sent: int = 0
    frames_recv: int = 0
    bytes_recv: int = 0


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)

    @contextmanager
    def unit(self, ctx, layer: str, unit: str):
        st = ctx.channel.stats
        before = (st.frames_sent, st.bytes_sent, st.frames_recv, st.bytes_recv)
        rec = UnitRecord(layer, unit, ctx.index)
        t0 = time.perf_counter()
        try:
            yield rec
        finally:
            rec.wall_s = time.perf_counter() - t0
            rec.peak_rss_mb = max(peak_rss_mb(), vars(ctx).pop("child_peak_rss_mb", 0.0))
            rec.rss_mb = current_rss_mb()
            rec.frames_sent += st.frames_sent - before[0]
            rec.bytes_sent += st.bytes_sent - before[1]
            rec.frames_recv += st.frames_recv - before[2]
            rec.bytes_recv += st.bytes_recv - before[3]
            self.records.append(rec)

    def add(self, rec: UnitRecord):
        self.records.append(rec)

    def totals(self) -> dict:
        tot = {"wall_s": 0.0, "frames_sent": 0, "bytes_sent": 0, "frames_recv": 0, "bytes_recv": 0,
               "peak_rss_mb": 0.0}
        for r in self.records:
            for k in ("wall_s", "frames_sent", "bytes_sent", "frames_recv", "bytes_recv"):
                tot[k] += getattr(r, k)
            tot["peak_rss_mb"] = max(tot["peak_rss_mb"], r.peak_rss_mb)
        return tot

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=FIELDS)
            w.writeheader()
            for r in self.records:
                w.writerow(asdict(r))
            tot = self.totals()
            w.writerow({"layer": "TOTAL", "unit": "", "party": self.records[0].party if self.records else "",
                        "rss_mb": "", **tot})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
