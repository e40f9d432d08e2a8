"""Open-set accuracy scores and forgetting over a stream of evaluations."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datahub import OPEN


@dataclass(frozen=True)
class MetricRecord:
    timestamp: int
    domain_id: int
    os: float
    os_star: float
    per_class: tuple[float, ...]


@dataclass(frozen=True)
class OsScores:
    os: float
    os_star: float
    per_class: tuple[float, ...]
    missing: tuple[int, ...] = ()


def os_scores(truth: Sequence[int], predicted: Sequence[int], n_known: int) -> OsScores:
    """Per-class accuracy over K known classes plus the open slot (index K).

    OS averages all K+1 class accuracies, OS* only the known ones.  A class
    with no samples in ``truth`` gets NaN, is left out of both means and is
    listed in ``missing``.
    """
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError("truth and predictions differ in length")
    t = np.where(t == OPEN, n_known, t)
    p = np.where(p == OPEN, n_known, p)
    if np.any((t < 0) | (t > n_known)):
        raise ValueError("truth must be known class ids or open")
    per_class = []
    missing = []
    for k in range(n_known + 1):
        mask = t == k
        if mask.any():
            per_class.append(float((p[mask] == k).mean()))
        else:
            per_class.append(math.nan)
            missing.append(k)
    acc = np.array(per_class)
    present = ~np.isnan(acc)
    os_ = float(acc[present].mean()) if present.any() else math.nan
    known_present = present[:n_known]
    os_star = float(acc[:n_known][known_present].mean()) if known_present.any() else math.nan
    return OsScores(os_, os_star, tuple(per_class), tuple(missing))


def forgetting(acc_sequence: Sequence[float]) -> float:
    """Average step-to-step change of one domain's accuracy.

    Negative values mean the domain got worse as later domains arrived.
    """
    a = [float(x) for x in acc_sequence]
    if len(a) < 2:
        raise ValueError("forgetting needs accuracies from at least two timestamps")
    steps = len(a) - 1
    return sum(a[k + 1] - a[k] for k in range(steps)) / steps


@dataclass
class DomainSummary:
    domain_id: int
    a_os: float
    f_os: float
    a_os_star: float
    f_os_star: float
    n_timestamps: int


@dataclass
class ForgettingReport:
    domains: list[DomainSummary] = field(default_factory=list)

    def _mean(self, attr: str) -> float:
        vals = [getattr(d, attr) for d in self.domains if not math.isnan(getattr(d, attr))]
        return sum(vals) / len(vals) if vals else math.nan

    @property
    def mean_a_os(self) -> float:
        return self._mean("a_os")

    @property
    def mean_f_os(self) -> float:
        return self._mean("f_os")

    @property
    def mean_a_os_star(self) -> float:
        return self._mean("a_os_star")

    @property
    def mean_f_os_star(self) -> float:
        return self._mean("f_os_star")


def summarize(records: Iterable[MetricRecord]) -> ForgettingReport:
    """Average accuracy A and forgetting F per domain, in domain order.

    A includes the timestamp at which the domain first arrived.  F is NaN for
    a domain evaluated only once.
    """
    by_domain: dict[int, list[MetricRecord]] = defaultdict(list)
    for r in records:
        by_domain[r.domain_id].append(r)
    report = ForgettingReport()
    for dom in sorted(by_domain):
        recs = sorted(by_domain[dom], key=lambda r: r.timestamp)
        os_seq = [r.os for r in recs]
        star_seq = [r.os_star for r in recs]
        report.domains.append(DomainSummary(
            domain_id=dom,
            a_os=sum(os_seq) / len(os_seq),
            f_os=forgetting(os_seq) if len(recs) >= 2 else math.nan,
            a_os_star=sum(star_seq) / len(star_seq),
            f_os_star=forgetting(star_seq) if len(recs) >= 2 else math.nan,
            n_timestamps=len(recs),
        ))
    return report


# ----------------------------------------------------------------- output


def _num(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_metrics_csv(records: Sequence[MetricRecord], path: str | Path) -> None:
    if not records:
        n_classes = 0
    else:
        n_classes = len(records[0].per_class)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "domain", "OS", "OS_star"] + [f"acc_c{k}" for k in range(n_classes)])
        for r in records:
            w.writerow([r.timestamp, r.domain_id, _num(r.os), _num(r.os_star)] + [_num(a) for a in r.per_class])


def read_metrics_csv(path: str | Path) -> list[MetricRecord]:
    def num(s: str) -> float:
        return math.nan if s == "" else float(s)

    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        accs = [k for k in row if k.startswith("acc_c")]
        out.append(MetricRecord(int(row["timestamp"]), int(row["domain"]), num(row["OS"]),
                                num(row["OS_star"]), tuple(num(row[k]) for k in accs)))
    return out


def write_forgetting_csv(report: ForgettingReport, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "A_OS", "F_OS", "A_OSstar", "F_OSstar"])
        for d in report.domains:
            w.writerow([d.domain_id, _num(d.a_os), _num(d.f_os), _num(d.a_os_star), _num(d.f_os_star)])
        w.writerow(["AVG", _num(report.mean_a_os), _num(report.mean_f_os),
                    _num(report.mean_a_os_star), _num(report.mean_f_os_star)])


def format_table(report: ForgettingReport) -> str:
    """Aligned text table, one column per domain plus AVG, values in percent."""

    def pct(x: float) -> str:
        return "-" if math.isnan(x) else f"{100 * x:.2f}"

    cols = [f"D{d.domain_id}" for d in report.domains] + ["AVG"]
    rows = [
        ("A (OS)", [d.a_os for d in report.domains] + [report.mean_a_os]),
        ("F (OS)", [d.f_os for d in report.domains] + [report.mean_f_os]),
        ("A (OS*)", [d.a_os_star for d in report.domains] + [report.mean_a_os_star]),
        ("F (OS*)", [d.f_os_star for d in report.domains] + [report.mean_f_os_star]),
    ]
    width = max(8, *(len(c) for c in cols))
    lines = ["metric".ljust(9) + "".join(c.rjust(width) for c in cols)]
    for name, vals in rows:
        lines.append(name.ljust(9) + "".join(pct(v).rjust(width) for v in vals))
    return "\n".join(lines)
