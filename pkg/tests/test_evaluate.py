import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from anatomy_ssl.backbone import BackboneConfig, SiameseModel, ViTEncoder
from anatomy_ssl.errors import ConfigurationError, EvaluationError, IntegrityError
from anatomy_ssl.evaluate import (
    ProbeConfig,
    anomaly_score,
    anomaly_score_from_patches,
    auc,
    cluster_quality,
    detection_metrics,
    encoder_bytes,
    fit_logistic,
    linear_probe,
    landmark_tokens,
    position_groups,
    score_images,
    silhouette_cosine,
    youden_threshold,
)

TINY = BackboneConfig(image_size=16, patch=4, dim=16, depth=1, heads=2, dec_dim=16, dec_depth=1, dec_heads=2,
                      num_prototypes=8, head_hidden=32)


def auc_pairs(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    hits = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return hits / (len(pos) * len(neg))


def silhouette_ref(features, groups):
    n = len(features)
    u = [f / np.linalg.norm(f) if np.linalg.norm(f) > 0 else f for f in features]
    dist = [[1.0 - float(u[i] @ u[k]) for k in range(n)] for i in range(n)]
    labels = sorted(set(groups))
    total = 0.0
    for i in range(n):
        own = [dist[i][k] for k in range(n) if groups[k] == groups[i] and k != i]
        a = sum(own) / len(own)
        b = min(np.mean([dist[i][k] for k in range(n) if groups[k] == g]) for g in labels if g != groups[i])
        a = 0.0 if abs(a) < 1e-12 else a
        b = 0.0 if abs(b) < 1e-12 else b
        total += (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return total / n


# ---- scoring ------------------------------------------------------------------------------

def test_score_perfect_and_unit_error(rng):
    x = rng.random((5, 16))
    assert anomaly_score_from_patches(x, x) == pytest.approx(1.0, abs=1e-12)
    y = x.copy()
    y[:, 0] += 1.0  # pixel-sum squared error of exactly 1 in every patch
    assert anomaly_score_from_patches(y, x) == pytest.approx(math.exp(-1), abs=1e-12)
    with pytest.raises(IntegrityError):
        anomaly_score_from_patches(x, x[:, :4])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 2.0))
def test_score_monotone_in_one_patch(seed, bump):
    g = np.random.default_rng(seed)
    x = g.random((6, 9))
    y = x + g.normal(0, 0.1, x.shape)
    j = int(g.integers(6))
    y2 = y.copy()
    y2[j] += np.sign(y[j] - x[j] + 1e-12) * bump  # moves patch j further from x
    s1, s2 = anomaly_score_from_patches(y, x), anomaly_score_from_patches(y2, x)
    assert s2 <= s1 + 1e-15
    assert 0 < s2 <= 1


def test_model_scores_batch_invariant(rng):
    torch.manual_seed(0)
    model = SiameseModel(TINY)
    imgs = rng.random((5, 16, 16))
    batch, _ = score_images(model, imgs, batch_size=5)
    alone = [anomaly_score(model, im) for im in imgs]
    assert np.allclose(batch, alone, rtol=1e-6, atol=0)
    assert np.all(batch > 0) and np.all(batch <= 1)
    with pytest.raises(IntegrityError):
        anomaly_score(model, rng.random((8, 8)))


# ---- detection metrics --------------------------------------------------------------------

def test_auc_examples():
    assert auc([0.9, 0.1], [True, False]) == 1.0
    assert auc([0.4] * 6, [True, False] * 3) == 0.5
    rep = detection_metrics([0.9, 0.8, 0.3, 0.2], [False, False, True, True])
    assert (rep.auc, rep.acc, rep.f1) == (1.0, 1.0, 1.0)
    assert rep.positive_class == "normal"
    assert rep.tp + rep.fp + rep.tn + rep.fn == 4


def test_auc_single_class_rejected():
    with pytest.raises(EvaluationError):
        auc([0.1, 0.2], [True, True])
    with pytest.raises(EvaluationError):
        detection_metrics([0.1, 0.2], [False, False])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_matches_pairwise_oracle(seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(2, 101))
    scores = np.round(g.random(n), int(g.integers(1, 4)))  # coarse rounding forces ties
    positive = g.random(n) < 0.5
    positive[0], positive[1] = True, False
    assert abs(auc(scores, positive) - auc_pairs(scores, positive)) <= 1e-12


def test_youden_threshold_maximises_j(rng):
    scores = rng.random(40)
    positive = rng.random(40) < 0.5
    t = youden_threshold(scores, positive)

    def j(th):
        pred = scores >= th
        return (pred & positive).sum() / positive.sum() + (~pred & ~positive).sum() / (~positive).sum() - 1

    assert all(j(t) >= j(c) - 1e-15 for c in scores)


# ---- linear probe -------------------------------------------------------------------------

def test_fit_logistic_separable(rng):
    x = rng.standard_normal((120, 5))
    margin = x[:, 0] + 0.5 * x[:, 3]
    x, y = x[np.abs(margin) > 0.3], margin[np.abs(margin) > 0.3] > 0
    decision = fit_logistic(x, y)
    assert np.mean((decision(x) >= 0) == y) == 1.0


def _two_class_images(rng, n):
    labels = np.arange(n) % 2 == 1
    imgs = rng.random((n, 16, 16)) * 0.2 + np.where(labels, 0.6, 0.2)[:, None, None]
    return imgs, labels


def test_probe_separable_and_frozen(rng):
    torch.manual_seed(1)
    enc = ViTEncoder(TINY)
    tr, tr_y = _two_class_images(rng, 40)
    te, te_y = _two_class_images(rng, 20)
    before = encoder_bytes(enc)
    rep = linear_probe(enc, tr, tr_y, te, te_y, ProbeConfig())
    assert encoder_bytes(enc) == before
    assert rep.extra["train_acc"] == 1.0
    assert rep.positive_class == "abnormal"
    assert rep.auc == 1.0


def test_probe_permuted_labels_near_chance(rng):
    torch.manual_seed(2)
    enc = ViTEncoder(TINY)
    aucs = []
    for rep in range(5):
        imgs = rng.random((200, 16, 16))
        labels = rng.permutation(np.arange(200) % 2 == 1)
        aucs.append(linear_probe(enc, imgs[:100], labels[:100], imgs[100:], labels[100:]).auc)
    assert abs(np.mean(aucs) - 0.5) <= 0.1


def test_probe_rejects_single_class(rng):
    enc = ViTEncoder(TINY)
    imgs = rng.random((4, 16, 16))
    with pytest.raises(EvaluationError):
        linear_probe(enc, imgs, np.zeros(4, bool), imgs, np.array([0, 1, 0, 1], bool))


# ---- cluster quality ----------------------------------------------------------------------

def test_position_groups_grid():
    g = position_groups(64, 3)
    assert g.shape == (64,) and set(g) == set(range(9))
    assert g[0] == 0 and g[7] == 2 and g[63] == 8
    grid = g.reshape(8, 8)
    assert (grid[:3, :3] == 0).all()


def test_silhouette_examples():
    groups = np.repeat(np.arange(3), 4)
    features = np.eye(3)[groups] * 2.0
    assert silhouette_cosine(features, groups) == pytest.approx(1.0, abs=1e-12)
    assert silhouette_cosine(np.ones((12, 5)), groups) == 0.0
    with pytest.raises(EvaluationError):
        silhouette_cosine(np.ones((3, 2)), np.array([0, 1, 1]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_silhouette_matches_loop_oracle(seed):
    g = np.random.default_rng(seed)
    groups = np.repeat(np.arange(int(g.integers(2, 5))), int(g.integers(2, 6)))
    g.shuffle(groups)
    feats = g.standard_normal((groups.size, 4)) + g.standard_normal((groups.max() + 1, 4))[groups]
    assert silhouette_cosine(feats, groups) == pytest.approx(silhouette_ref(feats, groups), abs=1e-10)


def test_silhouette_random_null():
    for seed in range(5):
        g = np.random.default_rng(seed)
        feats = g.standard_normal((500, 16))
        groups = np.arange(500) % 9
        assert abs(silhouette_cosine(feats, groups)) < 0.1


def test_landmark_tokens_are_cell_centres():
    assert list(landmark_tokens(64, 3)) == [9, 12, 14, 33, 36, 38, 49, 52, 54]
    assert (position_groups(64, 3)[landmark_tokens(64, 3)] == np.arange(9)).all()
    with pytest.raises(ConfigurationError):
        landmark_tokens(10)


@pytest.mark.parametrize("mode", ["landmarks", "partition"])
def test_cluster_quality_runs(rng, mode):
    torch.manual_seed(0)
    s = cluster_quality(ViTEncoder(TINY), rng.random((4, 16, 16)), grid=2, mode=mode)
    assert -1.0 <= s <= 1.0


def test_cluster_quality_unknown_mode(rng):
    with pytest.raises(ConfigurationError):
        cluster_quality(ViTEncoder(TINY), rng.random((2, 16, 16)), mode="nope")
