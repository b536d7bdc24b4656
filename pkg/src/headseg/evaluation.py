"""Dice scoring, parcellation mapping, cohort statistics, paired tests.

Dice is computed per class as 2|P∩T| / (|P|+|T|); a class absent from both
volumes is undefined and excluded from subject means.  Cohort summaries
use the shared linear-interpolation percentile.  The Wilcoxon signed-rank
test enumerates the exact sign distribution for n <= 12 and falls back to
a tie- and continuity-corrected normal approximation; the Friedman test is
the rank chi-square with average ranks.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as spstats

from .errors import DomainError, ShapeError
from .volume import GM, WM, LabelVolume, percentile


def _labels_array(v):
    return v.data if isinstance(v, LabelVolume) else np.asarray(v)


def dice_per_class(pred, truth, classes=None):
    """Per-class Dice scores; a class absent from both sides maps to None."""
    p = _labels_array(pred)
    t = _labels_array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"pred {p.shape} vs truth {t.shape}")
    if isinstance(pred, LabelVolume) and isinstance(truth, LabelVolume):
        if not np.allclose(pred.affine, truth.affine, atol=1e-6):
            raise ShapeError("pred and truth affines differ")
    if classes is None:
        classes = sorted(set(np.unique(p)) | set(np.unique(t)))
    scores = {}
    for c in classes:
        pc = p == c
        tc = t == c
        denom = int(np.count_nonzero(pc)) + int(np.count_nonzero(tc))
        if denom == 0:
            scores[int(c)] = None
            continue
        inter = int(np.count_nonzero(pc & tc))
        scores[int(c)] = 2.0 * inter / denom
    return scores


def subject_score(per_class, subset=None):
    """Unweighted mean Dice over a class subset, skipping undefined classes."""
    if subset is None:
        subset = sorted(per_class)
    vals = [per_class[c] for c in subset if per_class.get(c) is not None]
    if not vals:
        raise DomainError(f"no defined Dice scores among classes {list(subset)}")
    return float(np.mean(vals))


def cohort_stats(scores):
    """(median, IQR, mean, std) across subjects; std uses n-1.

    A single subject yields IQR 0 and std reported as 0 with a flag.
    """
    scores = [float(s) for s in scores]
    if not scores:
        raise DomainError("no subject scores")
    med = percentile(scores, 0.5)
    iqr = percentile(scores, 0.75) - percentile(scores, 0.25)
    mean = float(np.mean(scores))
    if len(scores) == 1:
        return {"median": med, "iqr": iqr, "mean": mean, "std": 0.0, "std_defined": False}
    return {
        "median": med,
        "iqr": iqr,
        "mean": mean,
        "std": float(np.std(scores, ddof=1)),
        "std_defined": True,
    }


def map_parcellation(parcels, truth, targets=(WM, GM)):
    """Map fine parcels onto WM/GM by majority overlap with the truth labels.

    Ties map to GM; parcels overlapping neither tissue are excluded
    (mapped to background).  Parcel code 0 is always background.
    Returns (mapping dict code -> {tissue, wm_overlap, gm_overlap}, remapped array).
    """
    p = _labels_array(parcels)
    t = _labels_array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"parcels {p.shape} vs truth {t.shape}")
    if tuple(sorted(targets)) != (WM, GM):
        raise DomainError(f"targets {targets} must be WM/GM codes ({WM}, {GM})")
    codes = np.unique(p)
    nmax = int(codes.max()) + 1 if codes.size else 1
    wm_counts = np.bincount(p.ravel(), weights=(t == WM).ravel(), minlength=nmax)
    gm_counts = np.bincount(p.ravel(), weights=(t == GM).ravel(), minlength=nmax)
    mapping = {}
    lut = np.zeros(nmax, dtype=np.uint8)
    for code in codes:
        code = int(code)
        wm_n, gm_n = int(wm_counts[code]), int(gm_counts[code])
        if code == 0 or (wm_n == 0 and gm_n == 0):
            tissue = 0
        elif wm_n > gm_n:
            tissue = WM
        else:
            tissue = GM  # ties go to gray matter
        mapping[code] = {"tissue": tissue, "wm_overlap": wm_n, "gm_overlap": gm_n}
        lut[code] = tissue
    return mapping, lut[p]


@dataclass
class TestResult:
    name: str
    statistic: float
    p: float
    degenerate: bool = False


def wilcoxon_signed_rank(a, b):
    """Two-sided Wilcoxon signed-rank test on paired scores.

    Statistic W is the smaller signed-rank sum.  Zero differences are
    dropped; tied |differences| share average ranks.  Exact p (full sign
    enumeration distribution) for n <= 12, otherwise a normal
    approximation with tie and continuity corrections.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return TestResult("wilcoxon", 0.0, 1.0, degenerate=True)
    if n < 5:
        raise DomainError(f"only {n} nonzero differences; need at least 5")
    ranks = spstats.rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    W = min(w_plus, w_minus)
    total = float(ranks.sum())
    if n <= 12:
        p = _wilcoxon_exact_p(ranks, W, total)
    else:
        mu = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        tie_term = float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
        if sigma2 <= 0:
            return TestResult("wilcoxon", W, 1.0, degenerate=True)
        z = (W - mu + 0.5) / np.sqrt(sigma2)
        p = min(1.0, 2.0 * float(spstats.norm.cdf(z)))
    return TestResult("wilcoxon", W, p)


def _wilcoxon_exact_p(ranks, W, total):
    """P(min signed-rank sum <= W) over all 2^n equiprobable sign choices.

    Computed by convolving the distribution of the positive-rank sum over
    doubled ranks (average ties make half-integers).
    """
    scaled = np.rint(2 * ranks).astype(int)
    dist = np.zeros(int(scaled.sum()) + 1, dtype=np.float64)
    dist[0] = 1.0
    top = 0
    for r in scaled:
        nxt = dist.copy()
        nxt[r : top + r + 1] += dist[: top + 1]
        dist = nxt
        top += r
    dist /= dist.sum()
    w2 = int(np.rint(2 * W))
    total2 = int(np.rint(2 * total))
    p_low = dist[: w2 + 1].sum()
    p_high = dist[total2 - w2 :].sum()
    return min(1.0, float(p_low + p_high))


def friedman(matrix):
    """Friedman rank chi-square over a subjects x methods score matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise DomainError(f"need >= 2 subjects and >= 2 methods, got shape {m.shape}")
    n, k = m.shape
    ranks = np.apply_along_axis(lambda row: spstats.rankdata(row, method="average"), 1, m)
    col_sums = ranks.sum(axis=0)
    stat = 12.0 / (n * k * (k + 1)) * float(np.sum(col_sums**2)) - 3.0 * n * (k + 1)
    stat = max(stat, 0.0)
    p = float(spstats.chi2.sf(stat, k - 1))
    degenerate = bool(np.all(m == m[:, :1]))
    return TestResult("friedman", stat, p, degenerate=degenerate)


# -- report assembly and serialization ----------------------------------------


@dataclass
class DiceReport:
    classes: list
    per_subject: dict                  # subject -> {class: score|None}
    subject_means: dict                # subject -> mean over `classes`
    stats: dict = field(default_factory=dict)
    tests: list = field(default_factory=list)

    @property
    def subjects(self):
        return list(self.per_subject)


def build_report(per_subject, classes, tests=()):
    """Assemble a DiceReport from per-subject per-class scores."""
    classes = [int(c) for c in classes]
    means = {s: subject_score(scores, classes) for s, scores in per_subject.items()}
    stats_ = cohort_stats(list(means.values()))
    return DiceReport(
        classes=classes,
        per_subject={str(s): dict(v) for s, v in per_subject.items()},
        subject_means={str(s): m for s, m in means.items()},
        stats=stats_,
        tests=list(tests),
    )


def _fmt(x):
    if x is None:
        return "NA"
    return f"{x:.6g}"


def emit_report(report, path, fmt="csv"):
    """Write a DiceReport as CSV or structured text; both carry the same numbers."""
    if fmt == "csv":
        text = _report_csv(report)
    elif fmt in ("text", "structured-text"):
        text = _report_text(report)
    else:
        raise DomainError(f"unknown report format {fmt!r}")
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject"] + [f"class{c}" for c in report.classes] + ["mean"])
    for s in report.subjects:
        row = [s] + [_fmt(report.per_subject[s].get(c)) for c in report.classes]
        row.append(_fmt(report.subject_means[s]))
        w.writerow(row)
    for key in ("median", "iqr", "mean", "std"):
        w.writerow([f"#{key}", _fmt(report.stats[key])])
    w.writerow(["#std_defined", str(report.stats["std_defined"])])
    for t in report.tests:
        w.writerow(["#test", t.name, _fmt(t.statistic), _fmt(t.p), str(t.degenerate)])
    return buf.getvalue()


def _report_text(report):
    lines = [f"classes: {','.join(str(c) for c in report.classes)}"]
    for s in report.subjects:
        parts = [
            f"class{c}={_fmt(report.per_subject[s].get(c))}" for c in report.classes
        ]
        parts.append(f"mean={_fmt(report.subject_means[s])}")
        lines.append(f"subject {s}: " + " ".join(parts))
    for key in ("median", "iqr", "mean", "std"):
        lines.append(f"{key}: {_fmt(report.stats[key])}")
    lines.append(f"std_defined: {report.stats['std_defined']}")
    for t in report.tests:
        lines.append(
            f"test {t.name}: statistic={_fmt(t.statistic)} p={_fmt(t.p)} "
            f"degenerate={t.degenerate}"
        )
    return "\n".join(lines) + "\n"


def _parse_val(s):
    return None if s == "NA" else float(s)


def parse_report(path):
    """Read back a report written by emit_report (either format)."""
    with open(path) as fh:
        text = fh.read()
    if text.startswith("classes:"):
        return _parse_text(text)
    return _parse_csv(text)


def _parse_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    header = rows[0]
    classes = [int(h[5:]) for h in header[1:-1]]
    per_subject, means, stats_, tests = {}, {}, {}, []
    for row in rows[1:]:
        if row[0].startswith("#test"):
            tests.append(
                TestResult(row[1], float(row[2]), float(row[3]), row[4] == "True")
            )
        elif row[0] == "#std_defined":
            stats_["std_defined"] = row[1] == "True"
        elif row[0].startswith("#"):
            stats_[row[0][1:]] = float(row[1])
        else:
            per_subject[row[0]] = {
                c: _parse_val(v) for c, v in zip(classes, row[1:-1])
            }
            means[row[0]] = float(row[-1])
    return DiceReport(classes, per_subject, means, stats_, tests)


def _parse_text(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    classes = [int(c) for c in lines[0].split(":", 1)[1].split(",")]
    per_subject, means, stats_, tests = {}, {}, {}, []
    for ln in lines[1:]:
        if ln.startswith("subject "):
            head, rest = ln.split(":", 1)
            subject = head[len("subject "):].strip()
            fields = dict(kv.split("=") for kv in rest.split())
            per_subject[subject] = {
                c: _parse_val(fields[f"class{c}"]) for c in classes
            }
            means[subject] = float(fields["mean"])
        elif ln.startswith("test "):
            head, rest = ln.split(":", 1)
            fields = dict(kv.split("=") for kv in rest.split())
            tests.append(
                TestResult(
                    head[len("test "):].strip(),
                    float(fields["statistic"]),
                    float(fields["p"]),
                    fields["degenerate"] == "True",
                )
            )
        elif ln.startswith("std_defined:"):
            stats_["std_defined"] = ln.split(":", 1)[1].strip() == "True"
        else:
            key, val = ln.split(":", 1)
            stats_[key.strip()] = float(val)
    return DiceReport(classes, per_subject, means, stats_, tests)
