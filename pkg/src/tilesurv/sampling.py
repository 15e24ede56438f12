"""Batch composition for contrastive training.

Three regimes over a cohort of tiles:

* ``random`` - classic uniform sampling of m tiles.
* ``conditional`` - two-level: draw n slides, then m/n tiles from each, so a
  batch always mixes intra-slide and inter-slide contrasts.
* ``fully_conditional`` - the n=1 limit: every tile in the batch shares one
  slide.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cohort import TileRecord, slides_of

logger = logging.getLogger(__name__)

RANDOM = "random"
CONDITIONAL = "conditional"
FULLY_CONDITIONAL = "fully_conditional"


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int
    mode: str = RANDOM
    n_slides: int | None = None  # only meaningful in conditional mode

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.mode == CONDITIONAL:
            n = self.n_slides
            if n is None or not (1 < n < self.batch_size):
                raise ValueError("conditional mode needs 1 < n_slides < batch_size; "
                                 "use fully_conditional for n=1")
            if self.batch_size % n != 0:
                raise ValueError(f"n_slides={n} must divide batch_size={self.batch_size}")
        elif self.mode == FULLY_CONDITIONAL:
            if self.n_slides not in (None, 1):
                raise ValueError("fully_conditional mode fixes n_slides=1")
        elif self.mode == RANDOM:
            if self.n_slides is not None:
                raise ValueError("random mode takes no n_slides")
        else:
            raise ValueError(f"unknown sampling mode {self.mode!r}")

    @property
    def slides_per_batch(self) -> int | None:
        if self.mode == CONDITIONAL:
            return self.n_slides
        if self.mode == FULLY_CONDITIONAL:
            return 1
        return None

    @property
    def tiles_per_slide(self) -> int | None:
        n = self.slides_per_batch
        return None if n is None else self.batch_size // n

    @classmethod
    def from_string(cls, text: str, batch_size: int) -> "BatchSpec":
        """Parse the CLI form: ``random`` or ``cond:N`` (``cond:1`` = fully conditional)."""
        text = text.strip().lower()
        if text == RANDOM:
            return cls(batch_size, RANDOM)
        if text.startswith("cond:"):
            n = int(text.split(":", 1)[1])
            if n == 1:
                return cls(batch_size, FULLY_CONDITIONAL)
            return cls(batch_size, CONDITIONAL, n)
        raise ValueError(f"cannot parse sampler spec {text!r}; expected 'random' or 'cond:N'")

    def label(self) -> str:
        if self.mode == RANDOM:
            return "random"
        return f"cond:{self.slides_per_batch}"


@dataclass(frozen=True)
class Batch:
    tile_ids: tuple[int, ...]
    slide_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tile_ids)


def _conditional_groups(tiles: list[TileRecord], spec: BatchSpec):
    per_slide = spec.tiles_per_slide
    groups = slides_of(tiles)
    eligible = {s: idx for s, idx in groups.items() if len(idx) >= per_slide}
    excluded = sorted(set(groups) - set(eligible))
    if excluded:
        logger.info("excluding %d slide(s) with fewer than %d tiles: %s",
                    len(excluded), per_slide, excluded)
    return eligible, per_slide


def _make_batch(tiles: list[TileRecord], indices) -> Batch:
    return Batch(
        tile_ids=tuple(tiles[i].tile_id for i in indices),
        slide_ids=tuple(tiles[i].slide_id for i in indices),
    )


def sample_batch(tiles: list[TileRecord], spec: BatchSpec, rng: np.random.Generator) -> Batch:
    """Draw one batch; tiles are sampled without replacement within the batch."""
    if spec.mode == RANDOM:
        if len(tiles) < spec.batch_size:
            raise ValueError(f"random sampling needs {spec.batch_size} tiles, "
                             f"cohort has {len(tiles)}")
        picks = rng.choice(len(tiles), size=spec.batch_size, replace=False)
        return _make_batch(tiles, picks.tolist())

    n = spec.slides_per_batch
    eligible, per_slide = _conditional_groups(tiles, spec)
    if len(eligible) < n:
        raise ValueError(f"conditional sampling needs {n} slide(s) with >= {per_slide} "
                         f"tiles, found {len(eligible)}")
    slide_ids = sorted(eligible)
    chosen = rng.choice(len(slide_ids), size=n, replace=False)
    indices: list[int] = []
    for c in chosen:
        idx = eligible[slide_ids[c]]
        take = rng.choice(len(idx), size=per_slide, replace=False)
        indices.extend(idx[i] for i in take)
    return _make_batch(tiles, indices)


def epoch_schedule(tiles: list[TileRecord], spec: BatchSpec,
                   rng: np.random.Generator) -> list[Batch]:
    """One epoch of batches touching each tile at most once where sizes allow.

    Random mode shuffles the cohort and chunks it; a ragged remainder is
    covered by one final batch of the last m tiles in shuffled order (those
    overlap earlier batches but keep every batch at exactly m tiles).
    Conditional mode chunks each eligible slide's shuffled tiles into m/n
    groups and rotates through slides without replacement, reshuffling the
    rotation once exhausted; per-slide ragged tails are dropped.
    """
    m = spec.batch_size
    if spec.mode == RANDOM:
        if len(tiles) < m:
            raise ValueError(f"random sampling needs {m} tiles, cohort has {len(tiles)}")
        order = rng.permutation(len(tiles)).tolist()
        batches = [_make_batch(tiles, order[i:i + m]) for i in range(0, len(order) - m + 1, m)]
        if len(order) % m != 0:
            batches.append(_make_batch(tiles, order[-m:]))
        return batches

    n = spec.slides_per_batch
    eligible, per_slide = _conditional_groups(tiles, spec)
    if len(eligible) < n:
        raise ValueError(f"conditional sampling needs {n} slide(s) with >= {per_slide} "
                         f"tiles, found {len(eligible)}")

    chunk_queues: dict[int, list[list[int]]] = {}
    for slide in sorted(eligible):
        idx = eligible[slide]
        order = rng.permutation(len(idx)).tolist()
        shuffled = [idx[i] for i in order]
        n_chunks = len(shuffled) // per_slide
        chunk_queues[slide] = [shuffled[c * per_slide:(c + 1) * per_slide]
                               for c in range(n_chunks)]

    batches: list[Batch] = []
    rotation: list[int] = []
    while True:
        rotation = [s for s in rotation if chunk_queues[s]]
        if len(rotation) < n:
            active = [s for s in sorted(chunk_queues) if chunk_queues[s]]
            if len(active) < n:
                break
            rotation = [active[i] for i in rng.permutation(len(active))]
        batch_slides, rotation = rotation[:n], rotation[n:]
        indices: list[int] = []
        for slide in batch_slides:
            indices.extend(chunk_queues[slide].pop())
        batches.append(_make_batch(tiles, indices))
    return batches
