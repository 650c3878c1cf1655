"""Evolutionary search over a discrete hyperparameter grid.

A configuration is a tuple with one value per grid field, in grid order. Per
generation, members whose fitness is strictly above the population mean
survive (at least ``min_keep``, at most ``max_keep``). The population is then
refilled with never-seen children: a 2-pivot crossover of two parents drawn
proportionally to fitness, followed by per-field mutation.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

FAILED = -math.inf


@dataclass
class Evaluation:
    config: tuple
    fitness: float
    generation: int


@dataclass
class SearchResult:
    fields: list[str]
    best: tuple
    best_fitness: float
    archive: list[Evaluation] = field(default_factory=list)
    grid_size: int = 0

    @property
    def evaluations(self) -> int:
        return len(self.archive)

    @property
    def coverage(self) -> float:
        return self.evaluations / self.grid_size if self.grid_size else float("nan")

    def best_dict(self) -> dict:
        return dict(zip(self.fields, self.best))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(list(self.fields) + ["fitness", "generation"])
            for ev in self.archive:
                w.writerow([repr(v) for v in ev.config] + [repr(ev.fitness), ev.generation])


def grid_size(grid: dict[str, list]) -> int:
    return int(np.prod([len(v) for v in grid.values()], dtype=np.int64))


def random_config(grid: dict[str, list], rng: np.random.Generator) -> tuple:
    return tuple(values[rng.integers(len(values))] for values in grid.values())


def two_pivot_crossover(p1: tuple, p2: tuple, rng: np.random.Generator, pivots=None) -> tuple:
    """Fields in ``[lo, hi)`` come from ``p2``, the rest from ``p1``.

    ``lo < hi`` are two distinct cut positions in ``0..len(p1)``.
    """
    n = len(p1)
    if len(p2) != n:
        raise ValueError("parents have different schemas")
    if pivots is None:
        lo, hi = sorted(rng.choice(n + 1, size=2, replace=False).tolist())
    else:
        lo, hi = pivots
    return tuple(p2[i] if lo <= i < hi else p1[i] for i in range(n))


def fitness_proportional_sample(fitness, rng: np.random.Generator) -> tuple[int, int]:
    """Two independent draws of member indices with probability proportional to fitness.

    Weights are shifted to be positive only when some fitness is <= 0;
    failed members (fitness -inf) get weight 0.
    """
    f = np.asarray(fitness, dtype=np.float64)
    if f.size == 0:
        raise ValueError("nothing to sample from")
    ok = np.isfinite(f)
    if not ok.any():
        w = np.ones_like(f)
    else:
        w = np.where(ok, f, 0.0)
        lo = f[ok].min()
        if lo <= 0:
            w = np.where(ok, f - lo + 1e-6, 0.0)
        if w.sum() <= 0:
            w = ok.astype(np.float64)
    p = w / w.sum()
    a, b = rng.choice(f.size, size=2, replace=True, p=p)
    return int(a), int(b)


def mutate(config: tuple, grid: dict[str, list], rng: np.random.Generator, p: float) -> tuple:
    """Each field is redrawn uniformly from its grid with probability ``p``.

    The redraw may return the current value.
    """
    out = list(config)
    for i, values in enumerate(grid.values()):
        if rng.random() < p:
            out[i] = values[rng.integers(len(values))]
    return tuple(out)


def _select(pop, scores, min_keep, max_keep):
    finite = [s for s in scores if math.isfinite(s)]
    mean = float(np.mean(finite)) if finite else FAILED
    order = sorted(range(len(pop)), key=lambda i: -scores[i])  # stable: ties keep population order
    above = [i for i in order if scores[i] > mean]
    if len(above) < min_keep:
        above = order[:min_keep]
    return above[:max_keep]


def evolve(grid: dict[str, list], fitness_fn, rng: np.random.Generator, pop_size: int = 100,
           generations: int = 10, mutation_p: float = 0.05, min_keep: int = 2, max_keep: int = 50,
           fill_attempts: int = 1000) -> SearchResult:
    """Search ``grid`` for the configuration maximizing ``fitness_fn(dict)``.

    The fitness function receives ``{field: value}``; an exception counts as
    fitness ``-inf`` and is logged. No configuration is evaluated twice, so
    at most ``pop_size * generations`` evaluations happen.
    """
    fields = list(grid)
    if not fields or any(len(v) == 0 for v in grid.values()):
        raise ValueError("every grid field needs at least one value")
    size = grid_size(grid)
    if size < pop_size:
        warnings.warn("grid has %d configurations < population %d; shrinking" % (size, pop_size), stacklevel=2)
        pop_size = size

    scores: dict[tuple, float] = {}
    archive: list[Evaluation] = []

    def fresh(exclude) -> tuple | None:
        for _ in range(fill_attempts):
            c = random_config(grid, rng)
            if c not in scores and c not in exclude:
                return c
        return None

    def evaluate(config, gen):
        try:
            f = float(fitness_fn(dict(zip(fields, config))))
        except Exception as exc:  # noqa: BLE001 - any failure just ranks last
            log.warning("fitness failed for %r: %s", config, exc)
            f = FAILED
        if math.isnan(f):
            f = FAILED
        scores[config] = f
        archive.append(Evaluation(config, f, gen))

    if size == pop_size:
        pop = list(itertools.product(*grid.values()))
        order = rng.permutation(len(pop))
        pop = [pop[i] for i in order]
    else:
        pop = []
        seen = set()
        while len(pop) < pop_size:
            c = fresh(seen)
            if c is None:
                break
            pop.append(c)
            seen.add(c)

    for gen in range(generations):
        for c in pop:
            if c not in scores:
                evaluate(c, gen)
        if gen == generations - 1 or len(scores) >= size:
            break
        pop_scores = [scores[c] for c in pop]
        keep = [pop[i] for i in _select(pop, pop_scores, min_keep, max_keep)]
        keep_fit = [scores[c] for c in keep]
        nxt = list(keep)
        members = set(nxt)
        attempts = 0
        while len(nxt) < pop_size and attempts < fill_attempts * pop_size:
            attempts += 1
            a, b = fitness_proportional_sample(keep_fit, rng)
            child = mutate(two_pivot_crossover(keep[a], keep[b], rng), grid, rng, mutation_p)
            if child in scores or child in members:
                continue
            nxt.append(child)
            members.add(child)
        while len(nxt) < pop_size:
            c = fresh(members)
            if c is None:
                break
            nxt.append(c)
            members.add(c)
        pop = nxt

    best = max(archive, key=lambda ev: ev.fitness)  # first evaluated wins ties
    return SearchResult(fields, best.config, best.fitness, archive, size)
