"""
Per-cell crime counts, three-level binning, and class balancing.

Scores are plain crime counts per grid cell. Binning clusters the multiset of
cell scores (each distinct score weighted by how many cells have it) into
three ordered levels; ``Low`` always means the lowest crime count.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CrimeMapError, DegenerateInputError
from .geo import CellId, GridSpec, cell_center, cell_indices
from .ingest import CrimeReport

logger = logging.getLogger(__name__)

N_LEVELS = 3
DEFAULT_RESTARTS = 16
_MAX_LLOYD_ITERATIONS = 500


class CrimeLevel(IntEnum):
    """Crime-rate level of a cell."""

    LOW = 0
    NEUTRAL = 1
    HIGH = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, text: str) -> "CrimeLevel":
        try:
            return cls[text.strip().upper()]
        except KeyError as e:
            raise ValueError(f"Unknown crime level: {text!r}") from e


@dataclass(frozen=True)
class CellScore:
    """Number of reports inside one cell."""

    cell: CellId
    score: int


@dataclass
class RegionScores:
    """Scores for every grid cell plus the count of reports outside the bbox."""

    cells: List[CellScore]
    outside: int = 0

    @property
    def inside(self) -> int:
        return sum(c.score for c in self.cells)


@dataclass(frozen=True)
class LabeledCell:
    """A scored cell with its crime-rate level."""

    cell: CellId
    score: int
    level: CrimeLevel


@dataclass(frozen=True)
class BinModel:
    """
    Three-bin model over cell scores.

    Attributes:
        method: "kmeans" or "jenks"
        centroids: Ascending class means
        boundaries: Ascending thresholds; a score equal to a threshold goes up
        objective: Within-class sum of squared deviations of the fitted data
        seed: Seed used for k-means initialization (None for Jenks)
    """

    method: str
    centroids: Tuple[float, ...]
    boundaries: Tuple[float, ...]
    objective: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if len(self.centroids) != N_LEVELS or len(self.boundaries) != N_LEVELS - 1:
            raise DegenerateInputError("A bin model needs 3 centroids and 2 boundaries")
        if any(b <= a for a, b in zip(self.centroids, self.centroids[1:])):
            raise DegenerateInputError("Centroids must be strictly ascending")
        if any(b <= a for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise DegenerateInputError("Boundaries must be strictly ascending")

    def level_for(self, score: float) -> CrimeLevel:
        return CrimeLevel(int(np.searchsorted(self.boundaries, score, side="right")))

    def levels_for(self, scores: np.ndarray) -> np.ndarray:
        return np.searchsorted(np.asarray(self.boundaries), scores, side="right")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "centroids": list(self.centroids),
            "boundaries": list(self.boundaries),
            "objective": self.objective,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BinModel":
        return cls(
            method=data["method"],
            centroids=tuple(float(c) for c in data["centroids"]),
            boundaries=tuple(float(b) for b in data["boundaries"]),
            objective=float(data.get("objective", 0.0)),
            seed=data.get("seed"),
        )


def score_regions(reports: Sequence[CrimeReport], grid: GridSpec) -> RegionScores:
    """Count reports per cell; every cell is present, zeros included."""
    total = len(reports)
    lats = np.fromiter((r.latitude for r in reports), dtype=np.float64, count=total)
    lons = np.fromiter((r.longitude for r in reports), dtype=np.float64, count=total)
    rows, cols, inside = cell_indices(lats, lons, grid)
    flat = rows[inside] * grid.n_cols + cols[inside]
    counts = np.bincount(flat, minlength=grid.n_cells)
    outside = int((~inside).sum())
    if outside:
        logger.info(f"{outside} reports fall outside the grid bbox")
    return RegionScores(
        cells=[CellScore(grid.cell_at(i), int(n)) for i, n in enumerate(counts)],
        outside=outside,
    )


def merge_region_scores(parts: Iterable[RegionScores]) -> RegionScores:
    """Sum partial counts computed over disjoint report partitions."""
    totals: Dict[CellId, int] = {}
    outside = 0
    order: List[CellId] = []
    for part in parts:
        outside += part.outside
        for cs in part.cells:
            if cs.cell not in totals:
                order.append(cs.cell)
                totals[cs.cell] = 0
            totals[cs.cell] += cs.score
    return RegionScores([CellScore(c, totals[c]) for c in order], outside)


# -- weighted 1-D clustering helpers ---------------------------------------


@dataclass
class _WeightedValues:
    """Distinct sorted values with their multiplicities and prefix sums."""

    values: np.ndarray
    weights: np.ndarray
    exact: bool
    cum_w: np.ndarray = field(init=False)
    cum_s1: np.ndarray = field(init=False)
    cum_s2: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        dtype = np.int64 if self.exact else np.float64
        v = self.values.astype(dtype)
        w = self.weights.astype(dtype)
        zero = np.zeros(1, dtype=dtype)
        self.cum_w = np.concatenate([zero, np.cumsum(w)])
        self.cum_s1 = np.concatenate([zero, np.cumsum(w * v)])
        self.cum_s2 = np.concatenate([zero, np.cumsum(w * v * v)])

    def segment_sse(self, start: Any, stop: Any) -> Any:
        """Sum of squared deviations of values[start:stop] (vectorized)."""
        w = self.cum_w[stop] - self.cum_w[start]
        s1 = self.cum_s1[stop] - self.cum_s1[start]
        s2 = self.cum_s2[stop] - self.cum_s2[start]
        # W*S2 - S1^2 is an exact integer for integer data.
        numerator = w * s2 - s1 * s1
        return np.asarray(numerator, dtype=np.float64) / np.asarray(w, dtype=np.float64)

    def segment_mean(self, start: int, stop: int) -> float:
        w = self.cum_w[stop] - self.cum_w[start]
        return float(self.cum_s1[stop] - self.cum_s1[start]) / float(w)


def _weighted_values(scores: Iterable[float]) -> _WeightedValues:
    data = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores)
    if data.size == 0:
        raise DegenerateInputError("Binning needs at least 3 distinct scores, got none")
    values, counts = np.unique(data, return_counts=True)
    if len(values) < N_LEVELS:
        raise DegenerateInputError(
            f"Binning needs at least {N_LEVELS} distinct scores, got {len(values)}"
        )
    exact = bool(np.all(values == np.round(values)))
    if exact:
        # Stay in int64 only while W*S2 cannot overflow.
        total_w = float(counts.sum())
        total_s2 = float((counts * values.astype(np.float64) ** 2).sum())
        exact = total_w * total_s2 < 2.0**62
    return _WeightedValues(values=values, weights=counts, exact=exact)


def _partition_objective(wv: _WeightedValues, starts: Sequence[int]) -> float:
    """Objective of a contiguous partition given class start indices."""
    edges = list(starts) + [len(wv.values)]
    return float(sum(wv.segment_sse(a, b) for a, b in zip(edges, edges[1:])))


def _optimal_starts(wv: _WeightedValues, k: int) -> List[int]:
    """
    Exact minimum within-class SS over contiguous k-partitions (dynamic
    programming over class end positions). Returns class start indices.
    """
    n = len(wv.values)
    idx = np.arange(n + 1)
    # best[j]: cost of splitting values[:j] into the current number of classes
    best = np.full(n + 1, np.inf)
    best[1:] = wv.segment_sse(0, idx[1:])
    back: List[np.ndarray] = []
    for classes in range(2, k + 1):
        new_best = np.full(n + 1, np.inf)
        choice = np.zeros(n + 1, dtype=np.int64)
        for j in range(classes, n + 1):
            splits = idx[classes - 1 : j]
            costs = best[splits] + wv.segment_sse(splits, j)
            pick = int(np.argmin(costs))
            new_best[j] = costs[pick]
            choice[j] = splits[pick]
        back.append(choice)
        best = new_best
    starts = [0] * k
    end = n
    for classes in range(k, 1, -1):
        start = int(back[classes - 2][end])
        starts[classes - 1] = start
        end = start
    return starts


def _starts_from_assignment(assign: np.ndarray) -> List[int]:
    return [int(np.searchsorted(assign, c, side="left")) for c in range(N_LEVELS)]


def _lloyd(
    wv: _WeightedValues, centers: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted 1-D Lloyd iterations until assignments stop changing."""
    values = wv.values.astype(np.float64)
    weights = wv.weights.astype(np.float64)
    centers = np.sort(centers.astype(np.float64))
    assign = np.searchsorted((centers[:-1] + centers[1:]) / 2.0, values, side="right")
    for _ in range(_MAX_LLOYD_ITERATIONS):
        new_centers = centers.copy()
        for c in range(N_LEVELS):
            members = assign == c
            mass = weights[members].sum()
            if mass > 0:
                new_centers[c] = (weights[members] * values[members]).sum() / mass
            else:
                # Empty cluster: move it to the worst-served value.
                cost = weights * (values - centers[assign]) ** 2
                cost[np.isin(values, new_centers)] = -1.0
                new_centers[c] = values[int(np.argmax(cost))]
        new_centers = np.sort(new_centers)
        new_assign = np.searchsorted(
            (new_centers[:-1] + new_centers[1:]) / 2.0, values, side="right"
        )
        converged = np.array_equal(new_assign, assign)
        centers, assign = new_centers, new_assign
        if converged:
            break
    return centers, assign


def _kmeans_plus_plus(wv: _WeightedValues, rng: np.random.Generator) -> np.ndarray:
    values = wv.values.astype(np.float64)
    weights = wv.weights.astype(np.float64)
    chosen = [int(rng.choice(len(values), p=weights / weights.sum()))]
    for _ in range(1, N_LEVELS):
        dist = np.min(
            (values[:, None] - values[chosen][None, :]) ** 2, axis=1
        )
        mass = weights * dist
        chosen.append(int(rng.choice(len(values), p=mass / mass.sum())))
    return values[chosen]


def _model_from_starts(
    wv: _WeightedValues, starts: List[int], method: str, seed: Optional[int]
) -> BinModel:
    edges = list(starts) + [len(wv.values)]
    centroids = tuple(wv.segment_mean(a, b) for a, b in zip(edges, edges[1:]))
    if method == "kmeans":
        boundaries = tuple((a + b) / 2.0 for a, b in zip(centroids, centroids[1:]))
    else:
        boundaries = tuple(float(wv.values[s]) for s in starts[1:])
    return BinModel(
        method=method,
        centroids=centroids,
        boundaries=boundaries,
        objective=_partition_objective(wv, starts),
        seed=seed,
    )


def _seeded_starts(
    wv: _WeightedValues, seed: int, restarts: int
) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [_kmeans_plus_plus(wv, rng) for _ in range(max(restarts, 1))]


def _best_lloyd(
    wv: _WeightedValues, starting_points: Sequence[np.ndarray]
) -> Tuple[Optional[List[int]], float, Optional[int]]:
    """Lowest-SS partition over Lloyd runs from each start, and the winning index."""
    best_starts: Optional[List[int]] = None
    best_objective = np.inf
    winner: Optional[int] = None
    for i, centers in enumerate(starting_points):
        _, assign = _lloyd(wv, centers)
        if len(np.unique(assign)) < N_LEVELS:
            continue
        starts = _starts_from_assignment(assign)
        objective = _partition_objective(wv, starts)
        if objective < best_objective:
            best_objective, best_starts, winner = objective, starts, i
    return best_starts, float(best_objective), winner


def kmeans_bins(
    scores: Iterable[float], seed: int = 0, restarts: int = DEFAULT_RESTARTS
) -> BinModel:
    """
    Cluster scores into three levels with weighted 1-D k-means.

    Candidates are ``restarts`` seeded k-means++ initializations of Lloyd's
    algorithm followed by one run started from the exact contiguous optimum.
    The lowest within-cluster sum of squares wins, earliest on ties, so the
    contiguous start is chosen only when it strictly improves on every seeded
    restart. The debug log names the winning start.

    Raises:
        DegenerateInputError: If fewer than three distinct scores are given
    """
    wv = _weighted_values(scores)
    starting_points = _seeded_starts(wv, seed, restarts)
    edges = _optimal_starts(wv, N_LEVELS) + [len(wv.values)]
    starting_points.append(
        np.array([wv.segment_mean(a, b) for a, b in zip(edges, edges[1:])])
    )

    best_starts, _, winner = _best_lloyd(wv, starting_points)
    if best_starts is None or winner is None:
        raise CrimeMapError("k-means failed to produce three non-empty bins")
    model = _model_from_starts(wv, best_starts, "kmeans", seed)
    start = (
        "contiguous_optimum"
        if winner == len(starting_points) - 1
        else f"kmeans++_restart_{winner}"
    )
    record = {**model.to_dict(), "winning_start": start}
    logger.debug(f"kmeans_bins {json.dumps(record)}")
    return model


def jenks_bins(scores: Iterable[float]) -> BinModel:
    """
    Jenks natural breaks: exact minimization of within-class squared
    deviations over contiguous classes. Deterministic.

    Raises:
        DegenerateInputError: If fewer than three distinct scores are given
    """
    wv = _weighted_values(scores)
    return _model_from_starts(wv, _optimal_starts(wv, N_LEVELS), "jenks", None)


def fit_bins(scores: Iterable[float], method: str, seed: int = 0) -> BinModel:
    """Dispatch on the configured binning method."""
    if method == "kmeans":
        return kmeans_bins(scores, seed=seed)
    if method == "jenks":
        return jenks_bins(scores)
    raise DegenerateInputError(f"Unknown binning method: {method!r}")


def within_class_ss(scores: Iterable[float], model: BinModel) -> float:
    """Within-class sum of squared deviations of ``scores`` under ``model``."""
    data = np.asarray(list(scores), dtype=np.float64)
    levels = model.levels_for(data)
    total = 0.0
    for level in range(N_LEVELS):
        members = data[levels == level]
        if members.size:
            total += float(((members - members.mean()) ** 2).sum())
    return total


def assign_labels(scores: Sequence[CellScore], model: BinModel) -> List[LabeledCell]:
    """Label every scored cell by the model's boundaries."""
    return [LabeledCell(s.cell, s.score, model.level_for(s.score)) for s in scores]


def level_counts(cells: Iterable[LabeledCell]) -> Dict[CrimeLevel, int]:
    counts = {level: 0 for level in CrimeLevel}
    for c in cells:
        counts[c.level] += 1
    return counts


def balance(cells: Sequence[LabeledCell], seed: int = 0) -> List[LabeledCell]:
    """
    Downsample every level to the minority-level count.

    Sampling is uniform without replacement and seeded; kept cells stay in
    their input order.

    Raises:
        DegenerateInputError: If any level has no cells
    """
    by_level: Dict[CrimeLevel, List[int]] = {level: [] for level in CrimeLevel}
    for i, c in enumerate(cells):
        by_level[c.level].append(i)
    empty = [level.label for level, members in by_level.items() if not members]
    if empty:
        raise DegenerateInputError(
            f"Cannot balance: no cells labeled {', '.join(empty)}"
        )
    target = min(len(members) for members in by_level.values())
    rng = np.random.default_rng(seed)
    keep: List[int] = []
    for level in CrimeLevel:
        members = np.asarray(by_level[level])
        picked = rng.choice(len(members), size=target, replace=False)
        keep.extend(int(i) for i in members[np.sort(picked)])
    keep.sort()
    summary = {"per_level": target, "kept": len(keep), "input": len(cells)}
    logger.info(f"balance {json.dumps(summary)}")
    return [cells[i] for i in keep]


def write_labels(
    path: Union[str, Path], cells: Iterable[LabeledCell], grid: GridSpec
) -> None:
    """Label manifest: one JSON record per cell with id, center, score, label."""
    with open(path, "w", encoding="utf-8") as f:
        for c in cells:
            lat, lon = cell_center(c.cell, grid)
            record = {
                "cell": str(c.cell),
                "lat": round(lat, 7),
                "lon": round(lon, 7),
                "score": c.score,
                "label": c.level.label,
            }
            f.write(json.dumps(record) + "\n")


def read_labels(path: Union[str, Path]) -> List[LabeledCell]:
    cells = []
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                record = json.loads(line)
                cells.append(
                    LabeledCell(
                        CellId.parse(record["cell"]),
                        int(record["score"]),
                        CrimeLevel.parse(record["label"]),
                    )
                )
    except (OSError, ValueError, KeyError) as e:
        raise CrimeMapError(f"Failed to load labels from {path}: {e}") from e
    return cells


def write_scores(path: Union[str, Path], scores: RegionScores) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for cs in scores.cells:
            f.write(json.dumps({"cell": str(cs.cell), "score": cs.score}) + "\n")
