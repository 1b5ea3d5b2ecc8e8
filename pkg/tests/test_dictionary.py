import itertools

import numpy as np
import pytest

from scis import dictionary as dlib

FOUR_POINTS = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])


def brute_force_kmeans_sse(points, k):
    """Optimal SSE over all partitions into at most k non-empty blocks."""
    n = len(points)
    best = np.inf

    def walk(i, labels, used):
        nonlocal best
        if i == n:
            sse = 0.0
            for c in range(used):
                members = points[np.array(labels) == c]
                centroid = members.mean(axis=0)
                sse += ((members - centroid) ** 2).sum()
            best = min(best, sse)
            return
        for c in range(min(used + 1, k)):
            labels.append(c)
            walk(i + 1, labels, max(used, c + 1))
            labels.pop()

    walk(0, [], 0)
    return best


def brute_force_kmedoids_sse(points, k):
    n = len(points)
    best = np.inf
    for medoids in itertools.combinations(range(n), k):
        centers = points[list(medoids)]
        d = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        best = min(best, d.min(axis=1).sum())
    return best


class TestKmeansPpInit:
    def test_k_equals_n_is_permutation(self):
        centers = dlib.kmeans_pp_init(FOUR_POINTS, 4, seed=3)
        assert sorted(centers.tolist()) == sorted(FOUR_POINTS.tolist())

    def test_k1_single_row(self):
        centers = dlib.kmeans_pp_init(FOUR_POINTS, 1, seed=5)
        assert centers.shape == (1, 2)
        assert centers[0].tolist() in FOUR_POINTS.tolist()

    def test_spread_seeding_splits_clusters(self):
        hits = sum(
            len({c[0] < 5.0 for c in dlib.kmeans_pp_init(FOUR_POINTS, 2, seed=s)}) == 2
            for s in range(1000))
        assert hits >= 990

    def test_capacity_error(self):
        with pytest.raises(dlib.CapacityError):
            dlib.kmeans_pp_init(FOUR_POINTS, 5, seed=0)

    def test_deterministic(self):
        a = dlib.kmeans_pp_init(FOUR_POINTS, 2, seed=42)
        b = dlib.kmeans_pp_init(FOUR_POINTS, 2, seed=42)
        assert np.array_equal(a, b)


class TestCluster:
    @pytest.mark.parametrize("algo", dlib.ALGOS)
    def test_two_cluster_fixture(self, algo):
        centers = dlib.cluster(FOUR_POINTS, 2, algo, seed=3)
        got = sorted(centers.tolist())
        if algo == "kmedoids":
            for row in got:
                assert row in FOUR_POINTS.tolist()
            d = ((FOUR_POINTS[:, None] - centers[None]) ** 2).sum(axis=2)
            assert abs(d.min(axis=1).sum() - brute_force_kmedoids_sse(FOUR_POINTS, 2)) < 1e-9
        else:
            assert np.allclose(got, [[0.0, 0.5], [10.0, 10.5]])

    @pytest.mark.parametrize("algo", dlib.ALGOS)
    def test_k_equals_n_zero_objective(self, algo):
        centers = dlib.cluster(FOUR_POINTS, 4, algo, seed=1)
        assert sorted(centers.tolist()) == sorted(FOUR_POINTS.tolist())

    def test_unknown_algo(self):
        with pytest.raises(ValueError):
            dlib.cluster(FOUR_POINTS, 2, "spectral", seed=0)

    @pytest.mark.parametrize("algo", dlib.ALGOS)
    @pytest.mark.parametrize("n,k,seed", [(8, 2, 0), (10, 3, 1), (12, 3, 2)])
    def test_seed_sweep_reaches_brute_force_optimum(self, algo, n, k, seed):
        rng = np.random.default_rng(seed)
        points = np.vstack([rng.normal(loc=c * 4.0, scale=0.8, size=(n // 2, 2))
                            for c in range(2)])[:n]
        if algo == "kmedoids":
            target = brute_force_kmedoids_sse(points, k)
        else:
            target = brute_force_kmeans_sse(points, k)
        best = np.inf
        for s in range(50):
            centers = dlib.cluster(points, k, algo, seed=s)
            d = ((points[:, None] - centers[None]) ** 2).sum(axis=2)
            assign = d.argmin(axis=1)
            best = min(best, dlib.sse(points, centers, assign))
        assert best <= target + 1e-9

    def test_empty_cluster_repair_keeps_k(self):
        # two far duplicate groups force an empty cluster under bad seeding
        points = np.array([[0.0, 0.0]] * 6 + [[50.0, 50.0]] * 2)
        for s in range(20):
            centers = dlib.cluster(points, 2, "kmeans", seed=s)
            assert centers.shape == (2, 2)
            assert len({tuple(c) for c in centers}) == 2


class TestPrototypeDictionary:
    def make(self, seed=0):
        rng = np.random.default_rng(seed)
        return dlib.PrototypeDictionary(
            rng.normal(size=(10, 16)), rng.normal(size=(3, 16)),
            rng.normal(size=(6, 16)), "kmeans_pp", seed)

    def test_default_shapes(self):
        d = self.make()
        assert d.z_object.shape == (10, 16)
        assert d.z_map.shape == (3, 16)
        assert d.z_agent.shape == (6, 16)

    def test_hash_stability_and_roundtrip(self, tmp_path):
        d = self.make(1)
        path = tmp_path / "dict.json"
        dlib.save_dictionary(d, str(path))
        first = path.read_bytes()
        dlib.save_dictionary(d, str(path))
        assert path.read_bytes() == first
        back = dlib.load_dictionary(str(path))
        assert back.content_hash == d.content_hash
        back.verify()

    def test_mutation_detected(self):
        d = self.make(2)
        d.z_map[0, 0] += 1.0
        with pytest.raises(dlib.FrozenDictionaryError):
            d.verify()

    def test_tampered_file_hash_rejected(self):
        d = self.make(3)
        payload = d.to_json()
        payload["Z_m"]["data"][0] += 5.0
        with pytest.raises(dlib.FrozenDictionaryError):
            dlib.PrototypeDictionary.from_json(payload)

    def test_duplicate_centroids_rejected(self):
        rows = np.ones((2, 4))
        with pytest.raises(ValueError, match="duplicate"):
            dlib.PrototypeDictionary(rows, np.eye(3, 4), np.eye(4, 4), "kmeans", 0)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dlib.PrototypeDictionary(np.eye(3, 4), np.eye(3, 5), np.eye(3, 4),
                                     "kmeans", 0)


class TestBuildDictionary:
    def test_sizes_and_determinism(self):
        rng = np.random.default_rng(9)
        stores = {
            "object": dlib.EmbeddingStore("object", rng.normal(size=(60, 16)),
                                          [(i, 0) for i in range(60)]),
            "map": dlib.EmbeddingStore("map", rng.normal(size=(40, 16)),
                                       [(i, 0) for i in range(40)]),
            "agent": dlib.EmbeddingStore("agent", rng.normal(size=(50, 16)),
                                         [(i, 0) for i in range(50)]),
        }
        d1 = dlib.build_dictionary(stores, 10, 3, 6, "kmeans_pp", seed=4)
        d2 = dlib.build_dictionary(stores, 10, 3, 6, "kmeans_pp", seed=4)
        assert (d1.z_object.shape, d1.z_map.shape, d1.z_agent.shape) == \
            ((10, 16), (3, 16), (6, 16))
        assert d1.content_hash == d2.content_hash
        for k in ((5, 2, 3), (20, 5, 10)):
            d = dlib.build_dictionary(stores, *k, algo="kmeans", seed=1)
            assert d.z_object.shape[0] == k[0]

    def test_collect_requires_trained_model(self):
        class Untrained:
            trained = False

        with pytest.raises(RuntimeError, match="trained"):
            dlib.collect_embeddings(Untrained(), [object()])

    def test_collect_requires_nonempty_dataset(self):
        class Trained:
            trained = True

        with pytest.raises(ValueError):
            dlib.collect_embeddings(Trained(), [])
