import numpy as np
import pytest
from sklearn.base import clone

from dirl.errors import ConfigError, DataError, DimensionError, NotFittedError
from dirl.estimators import DirlPretrainer, DualStreamMilClassifier
from dirl.synth_data import SynthConfig, generate_crop

TINY = dict(
    epochs=2, batch_size=4, patch_size=8, embed_dim=16, depth=1, heads=2,
    overrides={
        "ssl.k_region": 8, "ssl.k_dis": 4,
        "ssl.head_hidden": 16, "ssl.head_bottleneck": 8,
        "ssl.warmup_epochs": 1,
    },
)


def crops(n=12, size=16, seed=3):
    cfg = SynthConfig(image_size=size)
    rng = np.random.default_rng(seed)
    pairs = [generate_crop(cfg, i % 2, rng) for i in range(n)]
    return np.stack([p[0] for p in pairs]), [p[1] for p in pairs]


class TestDirlPretrainer:
    def test_fit_transform_shapes(self):
        X, maps = crops()
        est = DirlPretrainer(**TINY).fit(X, centroid_maps=maps)
        F = est.transform(X)
        assert F.shape == (12, 16)
        assert np.isfinite(F).all()
        assert est.n_features_out_ == 16
        assert len(est.history_) == 2
        assert {"epoch", "loss", "lr", "terms"} <= set(est.history_[0])

    def test_clone_roundtrip(self):
        est = DirlPretrainer(**TINY)
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        # clone must not share fitted state
        X, maps = crops(n=8)
        est.fit(X, centroid_maps=maps)
        assert not hasattr(twin, "state_")

    def test_unfitted_transform_raises(self):
        X, _ = crops(n=2)
        with pytest.raises(NotFittedError):
            DirlPretrainer(**TINY).transform(X)

    def test_seed_reproduces_features(self):
        X, maps = crops(n=8)
        a = DirlPretrainer(seed=7, **TINY).fit(X, centroid_maps=maps).transform(X)
        b = DirlPretrainer(seed=7, **TINY).fit(X, centroid_maps=maps).transform(X)
        assert np.array_equal(a, b)

    def test_missing_maps_only_ok_for_baseline(self):
        X, _ = crops(n=8)
        with pytest.raises(DataError, match="centroid_maps"):
            DirlPretrainer(**TINY).fit(X)
        base = dict(TINY, variant="baseline")
        est = DirlPretrainer(**base).fit(X)
        assert est.transform(X).shape == (8, 16)

    def test_map_count_mismatch(self):
        X, maps = crops(n=8)
        with pytest.raises(DataError, match="8 images"):
            DirlPretrainer(**TINY).fit(X, centroid_maps=maps[:5])

    def test_plain_tuple_maps_accepted(self):
        X, maps = crops(n=8)
        raw = [list(m.centroids) for m in maps]
        a = DirlPretrainer(**TINY).fit(X, centroid_maps=maps).transform(X)
        b = DirlPretrainer(**TINY).fit(X, centroid_maps=raw).transform(X)
        assert np.array_equal(a, b)

    def test_unknown_override_rejected(self):
        X, maps = crops(n=4)
        bad = dict(TINY, overrides={"ssl.nope": 1})
        with pytest.raises(ConfigError, match="ssl.nope"):
            DirlPretrainer(**bad).fit(X, centroid_maps=maps)

    def test_transform_size_mismatch(self):
        X, maps = crops(n=8)
        est = DirlPretrainer(**TINY).fit(X, centroid_maps=maps)
        other, _ = crops(n=2, size=24)
        with pytest.raises(DataError, match="tokens"):
            est.transform(other)


def split_bags(n=24, d=6, gap=3.0, seed=0):
    rng = np.random.default_rng(seed)
    bags, y = [], []
    for i in range(n):
        label = i % 2
        bags.append(rng.normal(size=(int(rng.integers(3, 7)), d)) + gap * label)
        y.append(label)
    return bags, np.array(y)


class TestDualStreamMilClassifier:
    def test_learns_separable_bags(self):
        bags, y = split_bags()
        clf = DualStreamMilClassifier(epochs=15, lr=5e-3, seed=1).fit(bags, y)
        assert (clf.predict(bags) == y).mean() >= 0.9

    def test_predict_proba_rows_sum_to_one(self):
        bags, y = split_bags(n=12)
        clf = DualStreamMilClassifier(epochs=5, seed=0).fit(bags, y)
        proba = clf.predict_proba(bags)
        assert proba.shape == (12, 2)
        assert np.allclose(proba.sum(axis=1), 1.0)
        assert (proba >= 0).all()

    def test_classes_mapping_noncontiguous_labels(self):
        bags, y = split_bags(n=12)
        relabeled = np.where(y == 0, 3, 7)
        clf = DualStreamMilClassifier(epochs=15, lr=5e-3, seed=1).fit(bags, relabeled)
        assert np.array_equal(clf.classes_, [3, 7])
        assert set(np.unique(clf.predict(bags))) <= {3, 7}

    def test_unfitted_raises(self):
        bags, _ = split_bags(n=4)
        clf = DualStreamMilClassifier()
        with pytest.raises(NotFittedError):
            clf.predict(bags)
        with pytest.raises(NotFittedError):
            clf.bag_attention(bags[0])

    def test_single_class_rejected(self):
        bags, y = split_bags(n=6)
        with pytest.raises(ConfigError):
            DualStreamMilClassifier().fit(bags, np.zeros_like(y))

    def test_bag_attention_normalized(self):
        bags, y = split_bags(n=12)
        clf = DualStreamMilClassifier(epochs=5, seed=0).fit(bags, y)
        attn = clf.bag_attention(bags[0])
        assert attn.shape == (len(bags[0]),)
        assert attn.sum() == pytest.approx(1.0)

    def test_clone_and_params(self):
        clf = DualStreamMilClassifier(query_dim=8, epochs=3, seed=9)
        twin = clone(clf)
        assert twin.get_params()["query_dim"] == 8
        assert twin.get_params()["seed"] == 9

    def test_ragged_feature_dims_rejected(self):
        rng = np.random.default_rng(0)
        bags = [rng.normal(size=(3, 6)), rng.normal(size=(4, 5))]
        with pytest.raises(DimensionError):
            DualStreamMilClassifier().fit(bags, np.array([0, 1]))
