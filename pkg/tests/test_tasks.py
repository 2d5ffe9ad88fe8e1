import itertools
import math

import numpy as np
import pytest
import torch

from ddsmooth import tasks as T


# brute-force references, written as plain loops on purpose

def brute_iou_mean(pred, gt, num_classes):
    pred, gt = np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()
    ious = []
    for c in range(num_classes):
        inter = sum(1 for p, g in zip(pred, gt) if p == c and g == c)
        union = sum(1 for p, g in zip(pred, gt) if p == c or g == c)
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


def brute_ap(relevance):
    hits, total = 0, 0.0
    for k, r in enumerate(relevance, start=1):
        if r:
            hits += 1
            total += hits / k
    return total / hits


def brute_map(q, g, qgroups, ggroups):
    aps = []
    for i in range(len(q)):
        sims = [float(np.dot(q[i], g[j]) / (np.linalg.norm(q[i]) * np.linalg.norm(g[j]))) for j in range(len(g))]
        # selection sort, earliest index wins ties
        remaining = list(range(len(g)))
        ranked = []
        while remaining:
            best = remaining[0]
            for j in remaining[1:]:
                if sims[j] > sims[best]:
                    best = j
            ranked.append(best)
            remaining.remove(best)
        aps.append(brute_ap([ggroups[j] == qgroups[i] for j in ranked]))
    return sum(aps) / len(aps)


def test_accuracy_examples():
    assert T.accuracy([1, 2, 3, 4], [1, 2, 0, 0]) == 0.5
    assert T.accuracy([3, 3], [3, 3]) == 1.0
    with pytest.raises(ValueError):
        T.accuracy([], [])
    with pytest.raises(ValueError):
        T.accuracy([1, 2], [1])


def test_accuracy_all_label_pairs():
    for preds in itertools.product(range(3), repeat=4):
        for labels in itertools.product(range(3), repeat=4):
            expected = sum(p == l for p, l in zip(preds, labels)) / 4
            assert T.accuracy(preds, labels) == expected


def test_miou_half_cover_on_4x4():
    gt = np.zeros((4, 4), int)
    gt[:, :2] = 1
    pred = np.zeros((4, 4), int)
    pred[:, :1] = 1
    # fg: 4/8, bg: 8/12
    assert T.miou(pred, gt, 2) == (4 / 8 + 8 / 12) / 2
    assert T.miou(pred, gt, 2, include_background=False) == 0.5


def test_miou_disjoint_and_identity():
    gt = np.zeros((4, 4), int)
    gt[0, 0] = 1
    pred = np.zeros((4, 4), int)
    pred[3, 3] = 1
    assert T.miou(pred, gt, 2, include_background=False) == 0.0
    assert T.miou(gt, gt, 5) == 1.0


def test_miou_exhaustive_2x2_three_classes():
    for pred in itertools.product(range(3), repeat=4):
        for gt in itertools.product(range(3), repeat=4):
            p, g = np.array(pred).reshape(2, 2), np.array(gt).reshape(2, 2)
            assert T.miou(p, g, 3) == pytest.approx(brute_iou_mean(p, g, 3), abs=0)


def test_miou_random_5x5():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p, g = rng.integers(0, 4, (5, 5)), rng.integers(0, 4, (5, 5))
        assert T.miou(p, g, 4) == pytest.approx(brute_iou_mean(p, g, 4), abs=1e-15)


def test_miou_errors():
    with pytest.raises(ValueError):
        T.miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(ValueError):
        T.miou(np.full((2, 2), 3), np.zeros((2, 2), int), 2)


def test_rmse_examples():
    gt = np.arange(4.0).reshape(2, 2)
    assert T.rmse_depth(gt, gt) == 0.0
    assert T.rmse_depth(gt + 1, gt) == 1.0
    assert T.rmse_depth(gt + np.array([[0, 0], [0, 2]]), gt) == 1.0
    with pytest.raises(ValueError):
        T.rmse_depth(gt, gt[:1])
    with pytest.raises(ValueError):
        T.rmse_depth(gt * np.nan, gt)


def test_rmse_matches_loop():
    rng = np.random.default_rng(1)
    a, b = rng.random((5, 5)), rng.random((5, 5))
    total = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel()))
    assert T.rmse_depth(a, b) == pytest.approx(math.sqrt(total / 25), abs=1e-15)


def test_average_precision_all_relevance_patterns():
    for rel in itertools.product([False, True], repeat=6):
        if any(rel):
            assert T.average_precision(np.array(rel)) == pytest.approx(brute_ap(rel), abs=1e-15)


def test_map_perfect_and_worst_ranking():
    q = np.array([[1.0, 0.0]])
    g = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.1]])
    assert T.map_retrieval(q, g, np.array([0]), np.array([0, 1, 1])) == 1.0
    assert T.map_retrieval(q, g, np.array([0]), np.array([1, 1, 0])) == pytest.approx(1 / 3)


def test_map_ties_use_gallery_order():
    q = np.array([[1.0, 0.0]])
    g = np.array([[1.0, 0.0], [2.0, 0.0]])  # same direction, so tied
    assert T.map_retrieval(q, g, [0], [1, 0]) == 0.5
    assert T.map_retrieval(q, g, [0], [0, 1]) == 1.0


def test_map_random_galleries_match_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(100):
        q = rng.normal(size=(3, 4))
        g = rng.normal(size=(6, 4))
        g[rng.integers(0, 6)] = g[0]  # occasional exact tie
        qg = rng.integers(0, 2, 3)
        gg = np.concatenate([[0, 1], rng.integers(0, 2, 4)])
        assert T.map_retrieval(q, g, qg, gg) == pytest.approx(brute_map(q, g, qg, gg), abs=1e-12)


def test_map_query_without_positive_is_skipped():
    q = np.eye(2)
    g = np.eye(2)
    with pytest.warns(UserWarning):
        out = T.map_retrieval(q, g, np.array([0, 5]), np.array([0, 1]))
    assert out == 1.0


def test_map_exclude_self():
    e = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
    groups = np.array([0, 0, 1])
    with pytest.warns(UserWarning):
        got = T.map_retrieval(e, e, groups, exclude_self=True)
    assert got == 1.0


def test_cosine_similarity():
    v = np.array([[1.0, 2.0, 3.0]])
    assert T.cosine_similarity(v, v) == pytest.approx(1.0)
    assert T.cosine_similarity(v, -v) == pytest.approx(-1.0)
    assert T.cosine_similarity([[1.0, 0.0]], [[0.0, 1.0]]) == 0.0
    with pytest.raises(ValueError):
        T.cosine_similarity(np.zeros((1, 3)), v)


def test_psnr_uniform_perturbation():
    x = np.full((3, 8, 8), 0.5)
    assert T.psnr(x, x + 3 / 255) == pytest.approx(20 * math.log10(255 / 3), abs=1e-6)
    assert T.psnr(x, x + 3 / 255) == pytest.approx(38.588, abs=1e-3)
    assert T.psnr(x, x) == math.inf


def test_psnr_matches_loop():
    rng = np.random.default_rng(3)
    a, b = rng.random((5, 5)), rng.random((5, 5))
    mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / 25
    assert T.psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-12)


def test_margin_loss_examples():
    assert T.margin_loss([0.7, 0.2, 0.1], 0) == pytest.approx(0.5)
    assert T.margin_loss([0.2, 0.7, 0.1], 0) == pytest.approx(-0.5)
    assert T.margin_loss([0.5, 0.5], 0) == 0.0
    batch = T.margin_loss(torch.tensor([[0.7, 0.3], [0.1, 0.9]]), torch.tensor([0, 0]))
    assert torch.allclose(batch, torch.tensor([0.4, -0.8]))


@pytest.mark.parametrize("bad", [[0.5, 0.6], [1.2, -0.2], [1.0]])
def test_margin_loss_rejects_non_simplex(bad):
    with pytest.raises(ValueError):
        T.margin_loss(bad, 0)


def test_losses_sum_over_batch():
    torch.manual_seed(0)
    logits = torch.randn(4, 3)
    c = torch.tensor([0, 1, 2, 0])
    per = [T.classification_loss(logits[i : i + 1], c[i : i + 1]) for i in range(4)]
    assert torch.allclose(T.classification_loss(logits, c), sum(per))
    emb = torch.randn(4, 5)
    assert T.retrieval_loss(emb, emb).item() == pytest.approx(-4.0, abs=1e-5)
    d = torch.rand(2, 4, 4)
    assert T.depth_loss(d + 1, d).item() == pytest.approx(2.0, abs=1e-5)
    seg = torch.randn(2, 3, 4, 4)
    mask = seg.argmax(1)
    assert T.segmentation_loss(seg, mask) < T.segmentation_loss(seg, (mask + 1) % 3)


def test_attack_reference():
    logits = torch.tensor([[0.1, 2.0], [3.0, 0.0]])
    assert T.attack_reference("classification", logits).tolist() == [1, 0]
    emb = torch.randn(2, 3, requires_grad=True)
    ref = T.attack_reference("retrieval", emb)
    assert not ref.requires_grad


def test_adapter_table():
    assert {a.metric_name for a in T.ADAPTERS.values()} == {"accuracy", "miou", "rmse", "map"}
    assert T.METRIC_DIRECTIONS["rmse"] == "lower_better"
    assert T.METRIC_DIRECTIONS["psnr"] == "higher_better"
