"""SROCC / PLCC and the repeated split-and-seed evaluation protocol."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


class EvaluationError(ValueError):
    pass


class DegenerateRankWarning(RuntimeWarning):
    """A column has a single rank value; SROCC is reported as 0."""


@dataclass(frozen=True)
class EvaluationRecord:
    subjective: float
    predicted: float
    image_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.subjective) and math.isfinite(self.predicted)):
            raise EvaluationError(f"non-finite score in record {self.image_id!r}")


def _columns(records, predicted):
    if predicted is None:
        recs = list(records)
        s = np.array([r.subjective for r in recs], dtype=np.float64)
        p = np.array([r.predicted for r in recs], dtype=np.float64)
    else:
        s = np.asarray(records, dtype=np.float64).ravel()
        p = np.asarray(predicted, dtype=np.float64).ravel()
    if s.shape != p.shape:
        raise EvaluationError(f"column lengths differ: {s.size} vs {p.size}")
    if s.size < 2:
        raise EvaluationError(f"need at least 2 samples, got {s.size}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(p))):
        raise EvaluationError("scores must be finite")
    return s, p


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    # rescale so tiny spreads do not underflow in the dot products
    da, db = da / np.abs(da).max(), db / np.abs(db).max()
    return float(np.clip(np.dot(da, db) / math.sqrt(np.dot(da, da) * np.dot(db, db)), -1.0, 1.0))


def srocc(records, predicted=None) -> float:
    """Spearman rank-order correlation.

    Accepts a list of :class:`EvaluationRecord` or two score columns.
    Tie-free data use ``1 - 6 sum d^2 / (N (N^2 - 1))``; with ties, the
    Pearson correlation of average ranks is returned instead.
    """
    s, p = _columns(records, predicted)
    rs, rp = rankdata(s), rankdata(p)
    if np.ptp(rs) == 0 or np.ptp(rp) == 0:
        warnings.warn("constant ranks, SROCC undefined; reporting 0", DegenerateRankWarning, stacklevel=2)
        return 0.0
    n = s.size
    if len(np.unique(s)) == n and len(np.unique(p)) == n:
        d = rs - rp
        return float(1.0 - 6.0 * np.dot(d, d) / (n * (n * n - 1)))
    return _pearson(rs, rp)


def plcc(records, predicted=None) -> float:
    s, p = _columns(records, predicted)
    for name, col in (("subjective", s), ("predicted", p)):
        if np.ptp(col) == 0:
            raise EvaluationError(f"PLCC undefined: {name} scores have zero variance")
    return _pearson(s, p)


# -- protocol -----------------------------------------------------------------


@dataclass
class RunResult:
    split: int
    seed: int
    srocc: float
    plcc: float
    n_train: int
    n_test: int


@dataclass
class ProtocolReport:
    runs: list[RunResult]
    train_fraction: float
    splits: int
    seeds: list[int]
    records: dict = field(default_factory=dict, repr=False)

    @property
    def srocc(self) -> float:
        return float(np.mean([r.srocc for r in self.runs]))

    @property
    def plcc(self) -> float:
        return float(np.mean([r.plcc for r in self.runs]))

    def per_seed(self, metric: str = "srocc") -> dict[int, float]:
        return {s: float(np.mean([getattr(r, metric) for r in self.runs if r.seed == s])) for s in self.seeds}

    def to_json(self) -> dict:
        return {
            "aggregate": {"srocc": self.srocc, "plcc": self.plcc, "n_runs": len(self.runs)},
            "train_fraction": self.train_fraction,
            "splits": self.splits,
            "seeds": self.seeds,
            "runs": [asdict(r) for r in self.runs],
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def partition(n: int, train_fraction: float, split: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled train/test index split for one (split, seed) run."""
    if not 0.0 < train_fraction < 1.0:
        raise EvaluationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    perm = np.random.default_rng([int(seed), int(split)]).permutation(n)
    n_train = min(max(1, int(round(train_fraction * n))), n - 2)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


Scorer = Callable[[object], float]


def run_protocol(
    rows: Sequence,
    scorer_factory: Callable[[list, int, int], Scorer],
    splits: int = 10,
    seeds: int | Iterable[int] = 5,
    train_fraction: float = 0.8,
    min_rows: int = 10,
) -> ProtocolReport:
    """Evaluate every (split, seed) run and average.

    ``scorer_factory(train_rows, seed, split)`` returns a callable mapping a
    row to its predicted score; it may train on ``train_rows`` or ignore
    them (fixed checkpoint).  Rows need a ``mos`` attribute.
    """
    rows = list(rows)
    if len(rows) < min_rows:
        raise EvaluationError(f"protocol needs at least {min_rows} rows, got {len(rows)}")
    if splits < 1:
        raise EvaluationError("splits must be >= 1")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    if not seed_list:
        raise EvaluationError("need at least one seed")
    runs, records = [], {}
    for seed in seed_list:
        for split in range(splits):
            tr, te = partition(len(rows), train_fraction, split, seed)
            scorer = scorer_factory([rows[i] for i in tr], seed, split)
            recs = [EvaluationRecord(float(rows[i].mos), float(scorer(rows[i])), str(getattr(rows[i], "path", i))) for i in te]
            runs.append(RunResult(split, seed, srocc(recs), plcc(recs), len(tr), len(te)))
            records[(split, seed)] = recs
    return ProtocolReport(runs, train_fraction, splits, seed_list, records)


def emit_scatter_plot(records: Sequence[EvaluationRecord], path, title: str | None = None) -> dict:
    """Predicted-vs-subjective scatter with identity line; returns the annotated metrics."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = list(records)
    if not records:
        raise EvaluationError("cannot plot an empty record list")
    path = Path(path)
    if not path.parent.exists():
        raise EvaluationError(f"output directory {path.parent} does not exist")
    s = np.array([r.subjective for r in records])
    p = np.array([r.predicted for r in records])
    values = {"srocc": srocc(records), "plcc": plcc(records)}
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(s, p, s=12, alpha=0.7)
    lo, hi = float(min(s.min(), p.min())), float(max(s.max(), p.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=1)
    ax.set_xlabel("subjective score")
    ax.set_ylabel("predicted score")
    ax.text(0.04, 0.96, f"SROCC {values['srocc']:.4f}\nPLCC  {values['plcc']:.4f}",
            transform=ax.transAxes, va="top", family="monospace")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    try:
        fig.savefig(path, dpi=100)
    except OSError as exc:
        raise EvaluationError(f"cannot write plot to {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return values
