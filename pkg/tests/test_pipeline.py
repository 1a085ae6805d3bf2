import numpy as np
import pytest

from setnet import pipeline
from setnet.model import predict
from setnet.ood import Domain
from setnet.pipeline import GzslSystem, classify_gzsl, classify_zsl
from setnet.train import TrainConfig, train_ddm, train_setnet

from conftest import random_model, random_table


@pytest.fixture(scope="module")
def small_system(tiny_bundle):
    cfg = TrainConfig(seed=1, epochs=3, head_count=2, hidden_channels=4,
                      fold_count=2, ddm_hidden=8, learning_rate=0.5)
    zsl_model = train_setnet(tiny_bundle, cfg)
    gzsl_model = train_setnet(tiny_bundle, TrainConfig(seed=2, epochs=3, head_count=2,
                                                       hidden_channels=4, fold_count=2,
                                                       ddm_hidden=8, learning_rate=0.5))
    detector = train_ddm(tiny_bundle, cfg)
    detector.theta = 0.05
    return GzslSystem(detector=detector, zsl_model=zsl_model, gzsl_model=gzsl_model,
                      unseen_table=tiny_bundle.unseen_table(),
                      full_table=tiny_bundle.table)


def test_routing_unseen_stub(small_system, tiny_bundle, monkeypatch):
    monkeypatch.setattr(pipeline, "detect", lambda e, f: Domain.UNSEEN)
    unseen = set(tiny_bundle.split.unseen_ids.tolist())
    for i in tiny_bundle.test_indices()[:20]:
        assert classify_gzsl(small_system, tiny_bundle.features[i]) in unseen


def test_routing_seen_stub(small_system, tiny_bundle, monkeypatch):
    monkeypatch.setattr(pipeline, "detect", lambda e, f: Domain.SEEN)
    for i in tiny_bundle.test_indices()[:20]:
        got = classify_gzsl(small_system, tiny_bundle.features[i])
        want = predict(small_system.gzsl_model, tiny_bundle.features[i],
                       small_system.full_table)
        assert got == want


def test_degenerate_threshold_never_flags(small_system, tiny_bundle):
    # disagreement degrees are finite, so a hugely negative theta flags nothing
    small_system.detector.theta = -1e300
    for i in tiny_bundle.test_indices()[:20]:
        got = classify_gzsl(small_system, tiny_bundle.features[i])
        want = predict(small_system.gzsl_model, tiny_bundle.features[i],
                       small_system.full_table)
        assert got == want


def test_oracle_detector_matches_zsl_accuracy(small_system, tiny_bundle, monkeypatch):
    unseen = set(tiny_bundle.split.unseen_ids.tolist())
    idx = [i for i in tiny_bundle.test_indices() if int(tiny_bundle.labels[i]) in unseen]
    truth = {}
    for i in idx:
        truth[tuple(np.round(tiny_bundle.features[i].mean(axis=(0, 1)), 12))] = Domain.UNSEEN

    def oracle(e, feat):
        return truth.get(tuple(np.round(feat, 12)), Domain.SEEN)

    monkeypatch.setattr(pipeline, "detect", oracle)
    routed = [classify_gzsl(small_system, tiny_bundle.features[i]) for i in idx]
    direct = [classify_zsl(small_system.zsl_model, tiny_bundle.features[i],
                           small_system.unseen_table) for i in idx]
    assert routed == direct


def test_classify_zsl_delegates(small_system, tiny_bundle):
    for i in tiny_bundle.test_indices()[:10]:
        assert classify_zsl(small_system.zsl_model, tiny_bundle.features[i],
                            small_system.unseen_table) == \
            predict(small_system.zsl_model, tiny_bundle.features[i],
                    small_system.unseen_table)


@pytest.mark.parametrize("seed", range(10))
def test_restricted_argmax_consistent_with_full(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, c=6, ch=4, k=2, s=5)
    table = random_table(rng, 8, 5)
    unseen_ids = [2, 5, 7]
    sub = table.subset(unseen_ids)
    fmap = rng.normal(size=(3, 3, 6))
    full_winner = predict(model, fmap, table)
    if full_winner in unseen_ids:
        assert predict(model, fmap, sub) == full_winner


def test_single_unseen_class(small_system, tiny_bundle):
    only = small_system.unseen_table.subset([int(tiny_bundle.split.unseen_ids[0])])
    fmap = tiny_bundle.features[tiny_bundle.test_indices()[0]]
    assert classify_zsl(small_system.zsl_model, fmap, only) == int(tiny_bundle.split.unseen_ids[0])


def test_system_requires_strict_subset(small_system, tiny_bundle):
    with pytest.raises(ValueError):
        GzslSystem(detector=small_system.detector, zsl_model=small_system.zsl_model,
                   gzsl_model=small_system.gzsl_model,
                   unseen_table=tiny_bundle.table, full_table=tiny_bundle.table)
