"""Offline construction of the frozen multi-domain prototype dictionary.

Query embeddings are collected from a trained baseline planner in a
single deterministic pass, clustered per domain (object / map / agent),
and the resulting centroid matrices are frozen behind a content hash
that is re-verified throughout downstream training.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

DOMAINS = ("object", "map", "agent")
ALGOS = ("kmeans", "kmeans_pp", "kmedoids")


class CapacityError(ValueError):
    """Requested more clusters than there are points."""


class FrozenDictionaryError(RuntimeError):
    """Dictionary content changed after freezing."""


@dataclass
class EmbeddingStore:
    """Collected query embeddings for one domain.

    ``rows`` is N x D; ``provenance`` records (scene index, query index)
    per row, in collection order.
    """

    domain: str
    rows: np.ndarray
    provenance: list

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValueError(f"rows must be N x D, got shape {self.rows.shape}")
        if len(self.provenance) != self.rows.shape[0]:
            raise ValueError("provenance length must match row count")


def collect_embeddings(model, dataset) -> dict:
    """One forward pass over ``dataset``; returns per-domain stores.

    Collects the final-layer query embeddings that downstream stages
    consume: object and map queries post-encoder, agent queries post
    motion decoder. The model is read-only here.
    """
    if not getattr(model, "trained", False):
        raise RuntimeError(
            "collect_embeddings requires a trained baseline model")
    scenes = dataset.scenes if hasattr(dataset, "scenes") else list(dataset)
    if not scenes:
        raise ValueError("collect_embeddings on an empty dataset")
    obj_rows, map_rows, agent_rows = [], [], []
    obj_prov, map_prov, agent_prov = [], [], []
    for si, scene in enumerate(scenes):
        q = model.query_embeddings(scene)
        for qi, row in enumerate(q["object"]):
            obj_rows.append(row)
            obj_prov.append((si, qi))
        for qi, row in enumerate(q["map"]):
            map_rows.append(row)
            map_prov.append((si, qi))
        for qi, row in enumerate(q["agent"]):
            agent_rows.append(row)
            agent_prov.append((si, qi))
    return {
        "object": EmbeddingStore("object", np.array(obj_rows), obj_prov),
        "map": EmbeddingStore("map", np.array(map_rows), map_prov),
        "agent": EmbeddingStore("agent", np.array(agent_rows), agent_prov),
    }


def _points_of(store) -> np.ndarray:
    if isinstance(store, EmbeddingStore):
        return store.rows
    return np.asarray(store, dtype=np.float64)


def _sq_dists_to(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(N, k) squared Euclidean distances."""
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def sse(points: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    d = points - centers[assign]
    return float(np.einsum("nd,nd->", d, d))


def kmeans_pp_init(store, k: int, seed: int) -> np.ndarray:
    """k-means++ seeding: squared-distance-weighted center selection."""
    points = _points_of(store)
    n = points.shape[0]
    if k > n:
        raise CapacityError(f"k={k} exceeds {n} available points")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    while len(chosen) < k:
        d2 = _sq_dists_to(points, points[chosen]).min(axis=1)
        d2[chosen] = 0.0
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with chosen centers
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
    return points[chosen].copy()


def _repair_empty(points, centers, assign, empty_clusters):
    """Move the globally farthest point into each empty cluster."""
    for c in empty_clusters:
        d = ((points - centers[assign]) ** 2).sum(axis=1)
        far = int(np.argmax(d))
        centers[c] = points[far]
        assign[far] = c
    return centers, assign


def _lloyd(points, centers, max_iter, medoids=False):
    """Alternating assignment/update; SSE asserted non-increasing."""
    n, k = points.shape[0], centers.shape[0]
    assign = np.full(n, -1)
    prev_obj = np.inf
    for _ in range(max_iter):
        new_assign = np.argmin(_sq_dists_to(points, centers), axis=1)
        empty = [c for c in range(k) if not (new_assign == c).any()]
        if empty:
            centers, new_assign = _repair_empty(points, centers, new_assign, empty)
        if (new_assign == assign).all():
            break
        assign = new_assign
        for c in range(k):
            members = points[assign == c]
            if medoids:
                within = _sq_dists_to(members, members).sum(axis=1)
                centers[c] = members[int(np.argmin(within))]
            else:
                centers[c] = members.mean(axis=0)
        obj = sse(points, centers, assign)
        assert obj <= prev_obj + 1e-9, "clustering objective increased"
        prev_obj = obj
    return centers


def cluster(store, k: int, algo: str = "kmeans_pp", seed: int = 0,
            max_iter: int = 100) -> np.ndarray:
    """Cluster store rows into k centers; returns the k x D center matrix.

    kmeans uses uniform distinct-row init, kmeans_pp the seeded
    squared-distance init; kmedoids alternates assignment with the
    best in-cluster medoid, so its centers are actual data rows.
    """
    if algo not in ALGOS:
        raise ValueError(f"unknown clustering algo {algo!r}; pick from {ALGOS}")
    if max_iter < 1:
        raise ValueError("max_iter must be positive")
    points = _points_of(store)
    n = points.shape[0]
    if k > n:
        raise CapacityError(f"k={k} exceeds {n} available points")
    if algo == "kmeans":
        rng = np.random.default_rng(seed)
        centers = points[rng.choice(n, size=k, replace=False)].copy()
    else:
        centers = kmeans_pp_init(points, k, seed)
    return _lloyd(points, centers, max_iter, medoids=(algo == "kmedoids"))


@dataclass
class PrototypeDictionary:
    """Frozen per-domain centroid matrices standing in for the confounder."""

    z_object: np.ndarray
    z_map: np.ndarray
    z_agent: np.ndarray
    algo: str
    seed: int
    content_hash: str = ""

    def __post_init__(self):
        self.z_object = np.asarray(self.z_object, dtype=np.float64)
        self.z_map = np.asarray(self.z_map, dtype=np.float64)
        self.z_agent = np.asarray(self.z_agent, dtype=np.float64)
        dims = {m.shape[1] for m in (self.z_object, self.z_map, self.z_agent)}
        if len(dims) != 1:
            raise ValueError(f"centroid dimensions disagree across domains: {dims}")
        for name, m in (("object", self.z_object), ("map", self.z_map),
                        ("agent", self.z_agent)):
            if len({tuple(r) for r in m}) != m.shape[0]:
                raise ValueError(f"duplicate centroids in domain {name!r}")
        if not self.content_hash:
            self.content_hash = self._hash()
        elif self.content_hash != self._hash():
            raise FrozenDictionaryError("stored hash does not match content")

    def _hash(self) -> str:
        payload = json.dumps({
            "algo": self.algo,
            "seed": self.seed,
            "Z_o": self.z_object.reshape(-1).tolist(),
            "Z_m": self.z_map.reshape(-1).tolist(),
            "Z_a": self.z_agent.reshape(-1).tolist(),
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def verify(self) -> None:
        """Re-check the frozen-content contract; raises if violated."""
        if self._hash() != self.content_hash:
            raise FrozenDictionaryError("dictionary content changed after freezing")

    def matrix(self, domain: str) -> np.ndarray:
        return {"object": self.z_object, "map": self.z_map,
                "agent": self.z_agent}[domain]

    @property
    def dim(self) -> int:
        return self.z_object.shape[1]

    def to_json(self) -> dict:
        def tens(m):
            return {"shape": list(m.shape), "data": m.reshape(-1).tolist()}
        return {"algo": self.algo, "seed": self.seed, "hash": self.content_hash,
                "Z_o": tens(self.z_object), "Z_m": tens(self.z_map),
                "Z_a": tens(self.z_agent)}

    @classmethod
    def from_json(cls, obj: dict) -> "PrototypeDictionary":
        def arr(t):
            return np.array(t["data"], dtype=np.float64).reshape(t["shape"])
        return cls(arr(obj["Z_o"]), arr(obj["Z_m"]), arr(obj["Z_a"]),
                   obj["algo"], int(obj["seed"]), obj["hash"])


def build_dictionary(stores: dict, k_object: int = 10, k_map: int = 3,
                     k_agent: int = 6, algo: str = "kmeans_pp",
                     seed: int = 0) -> PrototypeDictionary:
    """Cluster each domain store and freeze the centroid matrices.

    The default (10, 3, 6) sizes match one dominant context prototype per
    object class, per map class, and per motion mode at this toy scale.
    """
    z_o = cluster(stores["object"], k_object, algo, seed)
    z_m = cluster(stores["map"], k_map, algo, seed + 1)
    z_a = cluster(stores["agent"], k_agent, algo, seed + 2)
    return PrototypeDictionary(z_o, z_m, z_a, algo, seed)


def save_dictionary(d: PrototypeDictionary, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(d.to_json(), fh)
        fh.write("\n")


def load_dictionary(path: str) -> PrototypeDictionary:
    with open(path) as fh:
        return PrototypeDictionary.from_json(json.load(fh))
