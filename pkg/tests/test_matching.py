import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from acformer.detector import PredictionSet
from acformer.geometry import identity, transform_points
from acformer.matching import (
    InfeasibleAssignmentError,
    LossWeights,
    TargetSet,
    align_targets,
    build_targets,
    cost_matrix,
    filter_global_predictions,
    focal_loss,
    hungarian_match,
    matched_set_loss,
    overall_loss,
    set_loss,
)

D = torch.float64


# -- scalar oracles, written straight from the formulas ------------------------


def focal_scalar(c, t, a=0.25, g=2.0):
    K = len(c)
    return sum(-a * (1 - c[k] * t[k]) ** g * t[k] * math.log(max(c[k], 1e-8)) for k in range(K)) / K


def cost_scalar(pc, cc, pt, ct, w: LossWeights):
    d2 = (pc[0] - pt[0]) ** 2 + (pc[1] - pt[1]) ** 2
    return w.beta_dist * d2 + w.beta_cls * focal_scalar(cc, ct, w.focal_alpha, w.focal_gamma)


def set_loss_scalar(coords, scores, tcoords, tlabels, pairs, negatives, w: LossWeights):
    empty = [0.0] * (len(scores[0]) - 1) + [1.0]
    coord = sum((coords[p][0] - tcoords[t][0]) ** 2 + (coords[p][1] - tcoords[t][1]) ** 2 for p, t in pairs)
    pos = sum(focal_scalar(scores[p], tlabels[t], w.focal_alpha, w.focal_gamma) for p, t in pairs)
    neg = sum(focal_scalar(scores[n], empty, w.focal_alpha, w.focal_gamma) for n in negatives)
    return (w.w_coord * coord + w.w_pos * pos + w.w_neg * neg) / max(len(tcoords), 1)


def brute_force_min(cost):
    C, T = cost.shape
    return min(sum(cost[p[t], t] for t in range(T)) for p in itertools.permutations(range(C), T))


def soft(rng, n, K1):
    x = rng.uniform(0.05, 1.0, size=(n, K1))
    return x / x.sum(1, keepdims=True)


# -- focal ----------------------------------------------------------------------


class TestFocal:
    def test_perfect_prediction(self):
        assert focal_loss(torch.tensor([0.0, 1.0, 0.0]), torch.tensor([0.0, 1.0, 0.0])).item() == 0.0

    def test_no_focusing(self):
        c = torch.tensor([0.2, 0.7, 0.1], dtype=D)
        t = torch.tensor([0.0, 1.0, 0.0], dtype=D)
        got = focal_loss(c, t, focal_alpha=0.5, focal_gamma=0.0).item()
        assert got == pytest.approx(0.5 / 3 * -math.log(0.7), abs=1e-12)

    def test_hand_value(self):
        got = focal_loss(torch.tensor([0.5, 0.5], dtype=D), torch.tensor([1.0, 0.0], dtype=D),
                         focal_alpha=1.0, focal_gamma=2.0).item()
        assert got == pytest.approx(0.5 * 0.25 * math.log(2), abs=1e-12)
        assert got == pytest.approx(0.0866, abs=1e-4)

    def test_zero_score_is_finite(self):
        v = focal_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0])).item()
        assert math.isfinite(v) and v > 0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.02))
    def test_monotone_in_hot_score(self, c, dc):
        t = torch.tensor([0.0, 1.0, 0.0], dtype=D)
        lo = focal_loss(torch.tensor([0.1, c, 0.1], dtype=D), t)
        hi = focal_loss(torch.tensor([0.1, min(c + dc, 1.0), 0.1], dtype=D), t)
        assert hi <= lo + 1e-15

    def test_matches_scalar_on_soft_targets(self):
        rng = np.random.default_rng(0)
        c, t = soft(rng, 20, 4), soft(rng, 20, 4)
        got = focal_loss(torch.tensor(c), torch.tensor(t)).numpy()
        want = [focal_scalar(c[i], t[i]) for i in range(20)]
        assert np.allclose(got, want, atol=1e-12)


# -- cost matrix -------------------------------------------------------------------


class TestCost:
    def test_perfect_pair_zero(self):
        pred = PredictionSet(torch.tensor([[0.3, 0.4]]), torch.tensor([[1.0, 0.0, 0.0, 0.0]]))
        tgt = TargetSet.from_categories(torch.tensor([[0.3, 0.4]]), torch.tensor([0]), 3)
        assert cost_matrix(pred, tgt).item() == 0.0

    def test_distance_only(self):
        rng = np.random.default_rng(1)
        pred = PredictionSet(torch.tensor(rng.uniform(size=(5, 2))), torch.tensor(soft(rng, 5, 4)))
        tgt = TargetSet.from_categories(torch.tensor(rng.uniform(size=(3, 2))), torch.tensor([0, 2, 1]), 3)
        w = LossWeights(beta_cls=0.0)
        got = cost_matrix(pred, tgt, w)
        assert torch.allclose(got, w.beta_dist * torch.cdist(pred.coords, tgt.coords) ** 2)

    def test_per_entry_oracle(self):
        rng = np.random.default_rng(2)
        pc, cc = rng.uniform(size=(3, 2)), soft(rng, 3, 4)
        tc, tl = rng.uniform(size=(2, 2)), soft(rng, 2, 4)
        w = LossWeights()
        got = cost_matrix(PredictionSet(torch.tensor(pc), torch.tensor(cc)), TargetSet(torch.tensor(tc), torch.tensor(tl)), w)
        for c in range(3):
            for t in range(2):
                assert got[c, t].item() == pytest.approx(cost_scalar(pc[c], cc[c], tc[t], tl[t], w), abs=1e-12)


# -- hungarian -----------------------------------------------------------------------


class TestHungarian:
    def test_single(self):
        m = hungarian_match(np.array([[3.0]]))
        assert m.pairs.tolist() == [[0, 0]] and m.negatives.size == 0

    def test_permutation_structure(self):
        perm = [2, 0, 3, 1]
        cost = np.ones((4, 4))
        for t, p in enumerate(perm):
            cost[p, t] = 0.0
        m = hungarian_match(cost)
        assert m.pairs[:, 0].tolist() == perm
        assert cost[m.proposals, m.targets].sum() == 0.0

    def test_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            T = int(rng.integers(1, 6))
            C = int(rng.integers(T, 7))
            cost = rng.normal(size=(C, T))
            m = hungarian_match(cost)
            assert cost[m.proposals, m.targets].sum() == pytest.approx(brute_force_min(cost), abs=1e-12)

    def test_partition(self):
        m = hungarian_match(np.random.default_rng(1).normal(size=(7, 3)))
        assert sorted(m.proposals.tolist() + m.negatives.tolist()) == list(range(7))
        assert len(set(m.proposals.tolist())) == 3

    def test_infeasible(self):
        with pytest.raises(InfeasibleAssignmentError):
            hungarian_match(np.zeros((2, 3)))

    def test_no_targets(self):
        m = hungarian_match(np.zeros((4, 0)))
        assert m.pairs.shape == (0, 2) and m.negatives.tolist() == [0, 1, 2, 3]

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            cost = rng.normal(size=(6, 4))
            a, b = hungarian_match(cost), hungarian_match(cost + 3.7)
            assert cost[a.proposals, a.targets].sum() == pytest.approx(cost[b.proposals, b.targets].sum(), abs=1e-12)
            shifted = cost + 3.7
            assert shifted[b.proposals, b.targets].sum() == pytest.approx(cost[a.proposals, a.targets].sum() + 4 * 3.7)


# -- set loss --------------------------------------------------------------------------


def onehot(k, K1=4):
    v = [0.0] * K1
    v[k] = 1.0
    return v


class TestSetLoss:
    def test_perfect_is_zero(self):
        coords = torch.tensor([[0.1, 0.2], [0.5, 0.5], [0.9, 0.1]], dtype=D)
        scores = torch.tensor([onehot(0), onehot(3), onehot(2)], dtype=D)
        tgt = TargetSet.from_categories(torch.tensor([[0.1, 0.2], [0.9, 0.1]], dtype=D), torch.tensor([0, 2]), 3)
        pred = PredictionSet(coords, scores)
        m = hungarian_match(cost_matrix(pred, tgt))
        assert set_loss(pred, tgt, m).item() == 0.0

    def test_coordinate_only(self):
        rng = np.random.default_rng(4)
        pred = PredictionSet(torch.tensor(rng.uniform(size=(5, 2))), torch.tensor(soft(rng, 5, 4)))
        tgt = TargetSet.from_categories(torch.tensor(rng.uniform(size=(2, 2))), torch.tensor([1, 2]), 3)
        w = LossWeights(w_pos=0.0, w_neg=0.0)
        m = hungarian_match(cost_matrix(pred, tgt, w))
        d2 = ((pred.coords[m.proposals] - tgt.coords[m.targets]) ** 2).sum()
        assert set_loss(pred, tgt, m, w).item() == pytest.approx((w.w_coord / 2 * d2).item(), abs=1e-12)

    def test_hand_built_instance(self):
        coords = [[0.10, 0.20], [0.50, 0.55], [0.80, 0.30], [0.20, 0.90]]
        scores = [[0.6, 0.2, 0.1, 0.1], [0.1, 0.1, 0.2, 0.6], [0.1, 0.2, 0.6, 0.1], [0.25, 0.25, 0.25, 0.25]]
        tcoords = [[0.12, 0.18], [0.78, 0.33]]
        tlabels = [onehot(0), onehot(2)]
        w = LossWeights()
        pred = PredictionSet(torch.tensor(coords, dtype=D), torch.tensor(scores, dtype=D))
        tgt = TargetSet(torch.tensor(tcoords, dtype=D), torch.tensor(tlabels, dtype=D))
        m = hungarian_match(cost_matrix(pred, tgt, w))
        assert m.pairs.tolist() == [[0, 0], [2, 1]]
        want = set_loss_scalar(coords, scores, tcoords, tlabels, [(0, 0), (2, 1)], [1, 3], w)
        assert set_loss(pred, tgt, m, w).item() == pytest.approx(want, abs=1e-6)

    def test_no_targets_negatives_only(self):
        scores = torch.tensor([[0.2, 0.2, 0.2, 0.4], [0.1, 0.1, 0.1, 0.7]], dtype=D)
        pred = PredictionSet(torch.rand(2, 2, dtype=D), scores)
        tgt = TargetSet(torch.zeros(0, 2, dtype=D), torch.zeros(0, 4, dtype=D))
        w = LossWeights()
        got = matched_set_loss(pred, tgt, w).item()
        want = w.w_neg * sum(focal_scalar(s, onehot(3)) for s in scores.tolist())
        assert got == pytest.approx(want, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        C, T = int(rng.integers(1, 8)), int(rng.integers(0, 4))
        T = min(T, C)
        pred = PredictionSet(torch.tensor(rng.uniform(size=(C, 2))), torch.tensor(soft(rng, C, 4)))
        tgt = TargetSet(torch.tensor(rng.uniform(size=(T, 2))).reshape(T, 2), torch.tensor(soft(rng, T, 4)).reshape(T, 4))
        assert matched_set_loss(pred, tgt).item() >= 0.0


# -- filtering and overall objective ------------------------------------------------


class TestFilter:
    def test_threshold_boundary(self):
        scores = torch.tensor([[0.29, 0.0, 0.0, 0.71], [0.30, 0.0, 0.0, 0.70], [0.0, 0.31, 0.0, 0.69]])
        pred = PredictionSet(torch.rand(3, 2), scores)
        out = filter_global_predictions(pred, 0.3)
        assert torch.equal(out.scores, scores[1:])

    def test_zero_threshold_identity(self):
        pred = PredictionSet(torch.rand(5, 2), torch.rand(5, 4))
        out = filter_global_predictions(pred, 0.0)
        assert torch.equal(out.coords, pred.coords)

    def test_threshold_one(self):
        scores = torch.tensor([[1.0, 0.0, 0.0, 0.0], [0.0, 0.999, 0.0, 0.001]])
        out = filter_global_predictions(PredictionSet(torch.rand(2, 2), scores), 1.0)
        assert len(out) == 1

    def test_empty_score_ignored(self):
        scores = torch.tensor([[0.05, 0.05, 0.05, 0.85]])
        assert len(filter_global_predictions(PredictionSet(torch.rand(1, 2), scores), 0.3)) == 0


def random_sets(rng, M, D_, C=5):
    return [
        [PredictionSet(torch.tensor(rng.uniform(size=(C, 2))), torch.tensor(soft(rng, C, 4)), j) for j in range(D_ + 1)]
        for _ in range(M)
    ]


class TestOverall:
    def test_alpha_zero_is_ground_truth_mean(self):
        rng = np.random.default_rng(6)
        local = random_sets(rng, 2, 3)
        gts = [TargetSet.from_categories(torch.tensor(rng.uniform(size=(2, 2))), torch.tensor([0, 1]), 3) for _ in range(2)]
        glob = [[TargetSet(torch.tensor(rng.uniform(size=(1, 2))), torch.tensor(soft(rng, 1, 4))) for _ in range(4)] for _ in range(2)]
        w = LossWeights(alpha=0.0)
        got = overall_loss(local, gts, glob, w).item()
        want = sum(matched_set_loss(p, gts[i], w).item() for i in range(2) for p in local[i]) / 2
        assert got == pytest.approx(want, abs=1e-12)

    def test_alpha_zero_ignores_global(self):
        rng = np.random.default_rng(7)
        local = random_sets(rng, 2, 1)
        gts = [TargetSet.from_categories(torch.tensor(rng.uniform(size=(2, 2))), torch.tensor([2, 1]), 3) for _ in range(2)]
        glob_a = [[TargetSet(torch.tensor(rng.uniform(size=(2, 2))), torch.tensor(soft(rng, 2, 4))) for _ in range(2)] for _ in range(2)]
        glob_b = [[TargetSet(torch.tensor(rng.uniform(size=(3, 2))), torch.tensor(soft(rng, 3, 4))) for _ in range(2)] for _ in range(2)]
        w = LossWeights(alpha=0.0)
        assert overall_loss(local, gts, glob_a, w).item() == overall_loss(local, gts, glob_b, w).item()
        assert overall_loss(local, gts, glob_a, w).item() == overall_loss(local, gts, None, w).item()

    def test_single_warp_empty_global(self):
        rng = np.random.default_rng(8)
        local = random_sets(rng, 1, 3)
        gt = TargetSet.from_categories(torch.tensor(rng.uniform(size=(3, 2))), torch.tensor([0, 1, 2]), 3)
        empty = TargetSet(torch.zeros(0, 2, dtype=D), torch.zeros(0, 4, dtype=D))
        w = LossWeights(alpha=0.1)
        got = overall_loss(local, [gt], [[empty] * 4], w).item()
        neg_only = [w.w_neg * sum(focal_scalar(s, onehot(3)) for s in p.scores.tolist()) for p in local[0]]
        want = sum(matched_set_loss(p, gt, w).item() for p in local[0]) + w.alpha * sum(neg_only)
        assert got == pytest.approx(want, abs=1e-12)

    def test_unrolled_micro_instance(self):
        # M = 2 warps, D = 1 decoder layer, everything evaluated through scalar oracles
        rng = np.random.default_rng(9)
        w = LossWeights()
        local = random_sets(rng, 2, 1, C=4)
        gt_coords = rng.uniform(0.2, 0.8, size=(2, 2))
        gt = TargetSet.from_categories(torch.tensor(gt_coords), torch.tensor([0, 2]), 3)
        glob_sets = [PredictionSet(torch.tensor(rng.uniform(0.2, 0.8, size=(3, 2))), torch.tensor(soft(rng, 3, 4)), j) for j in range(2)]
        A = torch.stack([torch.tensor([[1.0, 0, 0.05], [0, 1.0, -0.05]], dtype=D),
                         torch.tensor([[1.2, 0.1, -0.1], [0.0, 0.9, 0.0]], dtype=D)])
        gts, globs = build_targets(gt, glob_sets, A, w.global_threshold)
        got = overall_loss(local, gts, globs, w).item()

        def scalar_lm(pred, tc, tl):
            C, T = len(pred.coords), len(tc)
            pc, ps = pred.coords.tolist(), pred.scores.tolist()
            best, best_pairs = math.inf, None
            for perm in itertools.permutations(range(C), T):
                c = sum(cost_scalar(pc[perm[t]], ps[perm[t]], tc[t], tl[t], w) for t in range(T))
                if c < best:
                    best, best_pairs = c, [(perm[t], t) for t in range(T)]
            negatives = [p for p in range(C) if p not in {q for q, _ in best_pairs}]
            return set_loss_scalar(pc, ps, tc, tl, best_pairs, negatives, w)

        want = 0.0
        for i in range(2):
            Ai = A[i].tolist()
            move = lambda u, v: (Ai[0][0] * u + Ai[0][1] * v + Ai[0][2], Ai[1][0] * u + Ai[1][1] * v + Ai[1][2])
            inside = lambda p: 0 <= p[0] <= 1 and 0 <= p[1] <= 1
            tc, tl = [], []
            for p, lab in zip(gt_coords.tolist(), gt.labels.tolist()):
                q = move(*p)
                if inside(q):
                    tc.append(q)
                    tl.append(lab)
            for j in range(2):
                want += scalar_lm(local[i][j], tc, tl)
                gc, gl = [], []
                for p, s in zip(glob_sets[j].coords.tolist(), glob_sets[j].scores.tolist()):
                    q = move(*p)
                    if max(s[:-1]) >= w.global_threshold and inside(q):
                        gc.append(q)
                        gl.append(s)
                want += w.alpha * scalar_lm(local[i][j], gc, gl)
        assert got == pytest.approx(want / 2, abs=1e-9)

    def test_alignment_drops_out_of_view(self):
        tgt = TargetSet.from_categories(torch.tensor([[0.1, 0.1], [0.9, 0.9]]), torch.tensor([0, 1]), 3)
        out = align_targets(tgt, torch.tensor([[1.0, 0, 0.2], [0, 1.0, 0.0]]))
        assert len(out) == 1 and out.labels[0].argmax().item() == 0

    def test_targets_are_stop_gradient(self):
        A = identity().clone().requires_grad_(True)
        gt = TargetSet.from_categories(torch.tensor([[0.4, 0.4]]), torch.tensor([1]), 3)
        gts, _ = build_targets(gt, None, A.unsqueeze(0), 0.3)
        assert not gts[0].coords.requires_grad
        assert torch.allclose(gts[0].coords, transform_points(gt.coords, identity()))
