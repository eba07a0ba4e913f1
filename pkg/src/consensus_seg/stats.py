"""Wilcoxon signed-rank test, Bonferroni adjustment and per-method report tables."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AllZeroDifferences, EmptyInput
from .metrics import DISTANCE_METRICS, METRIC_NAMES

EXACT_MAX_N = 25
ALPHA = 0.05


@dataclass(frozen=True)
class TestResult:
    w_statistic: float
    p_value: float
    n_effective: int
    method: str  # "exact" or "normal_approx"

    __test__ = False  # not a pytest class


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def _exact_lower_tail(doubled_ranks: list, w_doubled: int) -> int:
    """Number of the 2**n sign assignments whose positive-rank sum (doubled) is <= w_doubled."""
    total = sum(doubled_ranks)
    counts = [0] * (total + 1)
    counts[0] = 1
    top = 0
    for r in doubled_ranks:
        top += r
        for s in range(top, r - 1, -1):
            counts[s] += counts[s - r]
    return sum(counts[:w_doubled + 1])


def wilcoxon_signed_rank(diffs: Sequence[float], method: str = "auto") -> TestResult:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Exact zeros are dropped and tied magnitudes share average ranks.  With at
    most 25 remaining differences the p-value is exact (enumeration of the
    sign assignments over the observed ranks); above that a normal
    approximation with tie-corrected variance and continuity correction is
    used.  ``method`` may force ``"exact"`` or ``"normal_approx"``.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if d.size == 0:
        raise EmptyInput("no differences given")
    if not np.isfinite(d).all():
        raise ValueError("differences must be finite")
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        raise AllZeroDifferences("every difference is zero")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal_approx"
    if method == "exact":
        doubled = [int(round(2 * r)) for r in ranks]
        count = _exact_lower_tail(doubled, int(round(2 * w)))
        p = min(1.0, 2 * count / 2 ** n)
    elif method == "normal_approx":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
        if var <= 0:
            p = 1.0
        else:
            z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
            p = min(1.0, math.erfc(z / math.sqrt(2.0)))
        p = max(p, math.ulp(0.0))
    else:
        raise ValueError(f"unknown method {method!r}")
    return TestResult(w, p, n, method)


def bonferroni(p_values: Sequence[float]) -> list:
    m = len(p_values)
    for p in p_values:
        if not 0 < p <= 1:
            raise ValueError(f"p-value {p} outside (0, 1]")
    return [min(1.0, p * m) for p in p_values]


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n: dict  # metric -> number of finite values
    mean: dict
    std: dict


@dataclass(frozen=True)
class SignificanceCell:
    method: str
    metric: str
    p_raw: float
    p_adjusted: float
    w_statistic: float
    n_effective: int
    test: str  # "exact", "normal_approx" or "all_zero"

    @property
    def significant(self) -> bool:
        return self.p_adjusted < ALPHA


@dataclass
class Report:
    summaries: list
    best: dict  # metric -> up to two best method names
    reference: str
    significance: list = field(default_factory=list)

    def summary(self, method: str) -> MethodSummary:
        for s in self.summaries:
            if s.method == method:
                return s
        raise KeyError(method)

    def cell(self, method: str, metric: str) -> SignificanceCell:
        for c in self.significance:
            if c.method == method and c.metric == metric:
                return c
        raise KeyError((method, metric))


def aggregate_report(records: Sequence, reference: str | None = None) -> Report:
    """Mean/std table, two best methods per metric and a significance matrix.

    *records* are ``(subject, method, EvalRecord)`` triples.  NaN metric
    values (undefined for that subject) are left out of that metric's
    statistics.  Every method other than *reference* is tested against it
    per metric on the subjects both share, and the p-values of one metric
    are Bonferroni-adjusted over the methods compared.  Identical samples
    report p = 1.
    """
    if not records:
        raise EmptyInput("no records to aggregate")
    methods = []
    table = {}
    for subject, method, rec in records:
        if method not in table:
            methods.append(method)
            table[method] = {}
        table[method][subject] = rec
    if reference is None:
        reference = sorted(methods)[0]
    if reference not in table:
        raise EmptyInput(f"reference method {reference!r} has no records")

    summaries = []
    for method in methods:
        n, mean, std = {}, {}, {}
        for metric in METRIC_NAMES:
            vals = np.array([getattr(r, metric) for r in table[method].values()], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            n[metric] = int(vals.size)
            mean[metric] = float(vals.mean()) if vals.size else math.nan
            std[metric] = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size else math.nan)
        summaries.append(MethodSummary(method, n, mean, std))

    best = {}
    for metric in METRIC_NAMES:
        scored = [(s.mean[metric], i, s.method) for i, s in enumerate(summaries) if math.isfinite(s.mean[metric])]
        if metric in DISTANCE_METRICS:
            scored.sort(key=lambda t: (t[0], t[1]))
        else:
            scored.sort(key=lambda t: (-t[0], t[1]))
        best[metric] = [m for _, _, m in scored[:2]]

    others = [m for m in methods if m != reference]
    cells = []
    for metric in METRIC_NAMES:
        raw = []
        for method in others:
            shared = sorted(set(table[method]) & set(table[reference]))
            diffs = []
            for subj in shared:
                a = getattr(table[method][subj], metric)
                b = getattr(table[reference][subj], metric)
                if math.isfinite(a) and math.isfinite(b):
                    diffs.append(a - b)
            try:
                res = wilcoxon_signed_rank(diffs)
                raw.append((res.p_value, res.w_statistic, res.n_effective, res.method))
            except (AllZeroDifferences, EmptyInput):
                raw.append((1.0, 0.0, 0, "all_zero"))
        adjusted = bonferroni([r[0] for r in raw]) if raw else []
        for method, r, adj in zip(others, raw, adjusted):
            cells.append(SignificanceCell(method, metric, r[0], adj, r[1], r[2], r[3]))
    return Report(summaries, best, reference, cells)


def _fmt(x: float, digits: int = 4) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.{digits}f}"


def report_csv_rows(report: Report) -> list:
    header = ["method"]
    for metric in METRIC_NAMES:
        header += [f"{metric}_mean", f"{metric}_std", f"{metric}_n"]
    rows = [header]
    for s in report.summaries:
        row = [s.method]
        for metric in METRIC_NAMES:
            row += [repr(s.mean[metric]), repr(s.std[metric]), str(s.n[metric])]
        rows.append(row)
    return rows


def report_markdown(report: Report, digits: int = 4) -> str:
    """Markdown table of mean ± std; the two best entries of each metric are bold."""
    lines = ["| method | " + " | ".join(METRIC_NAMES) + " |",
             "|---" * (len(METRIC_NAMES) + 1) + "|"]
    for s in report.summaries:
        cells = []
        for metric in METRIC_NAMES:
            text = f"{_fmt(s.mean[metric], digits)} ± {_fmt(s.std[metric], digits)}"
            if s.method in report.best[metric]:
                text = f"**{text}**"
            cells.append(text)
        lines.append(f"| {s.method} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append(f"Reference method for significance tests: `{report.reference}`.")
    return "\n".join(lines) + "\n"


def significance_csv_rows(report: Report) -> list:
    rows = [["method", "metric", "p_raw", "p_adjusted", "w_statistic", "n_effective", "test", "significant"]]
    for c in report.significance:
        rows.append([c.method, c.metric, repr(c.p_raw), repr(c.p_adjusted), repr(c.w_statistic),
                     str(c.n_effective), c.test, str(int(c.significant))])
    return rows


def significance_image(report: Report) -> np.ndarray:
    """Rows are the non-reference methods, columns the metrics; 0 where significant, 1 elsewhere."""
    methods = []
    for c in report.significance:
        if c.method not in methods:
            methods.append(c.method)
    img = np.ones((max(len(methods), 1), len(METRIC_NAMES)), dtype=np.float64)
    for c in report.significance:
        img[methods.index(c.method), METRIC_NAMES.index(c.metric)] = 0.0 if c.significant else 1.0
    return img
