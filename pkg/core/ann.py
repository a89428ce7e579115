from __future__ import annotations

import logging
from typing import List, Optional

import numpy as np
from datasketch.hnsw import HNSW

from core.config import settings


logger = logging.getLogger("EnsembleGP")


def euclidean(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b))


class AnnIndex:
    """Nearest-neighbour lookup over stored observations.

    Keys are insertion positions, so a hit maps directly to the stored
    embedding of that observation. `exact=True` swaps the hierarchical graph
    for a brute-force scan.
    """

    def __init__(
        self,
        *,
        exact: bool = False,
        max_degree: Optional[int] = None,
        ef: Optional[int] = None,
        seed: int = 0,
    ) -> None:
        self.exact = exact
        self.max_degree = max_degree or settings.ann_max_degree
        self.ef = ef or settings.ann_ef
        self.seed = seed
        self._points: List[np.ndarray] = []
        self._graph = None if exact else HNSW(
            distance_func=euclidean, m=self.max_degree, ef_construction=self.ef, seed=seed
        )

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return np.vstack(self._points) if self._points else np.empty((0, 0))

    def insert(self, y) -> int:
        """Store y and return its key."""
        point = np.asarray(y, dtype=float).reshape(-1)
        key = len(self._points)
        self._points.append(point)
        if self._graph is not None:
            self._graph.insert(key, point)
        return key

    def query(self, y) -> int:
        """Key of the (approximate) nearest stored observation."""
        if not self._points:
            raise ValueError("query on an empty index")
        point = np.asarray(y, dtype=float).reshape(-1)
        if self._graph is None:
            return int(np.argmin(np.linalg.norm(self.points - point, axis=1)))
        hits = self._graph.query(point, k=1, ef=self.ef)
        return int(hits[0][0])


def ann_insert(ann: AnnIndex, y) -> int:
    return ann.insert(y)


def ann_query(ann: AnnIndex, y) -> int:
    return ann.query(y)
