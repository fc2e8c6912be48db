import itertools
import math

import numpy as np
import pytest

from multiunit import ctc
from multiunit import numcore as nc
from multiunit.ctc import (BLANK_ID, Hypothesis, InfeasibleAlignmentError, brute_force_label_score,
                           brute_force_labelings, collapse, ctc_label_score, ctc_loss, greedy_decode,
                           is_feasible, min_frames, prefix_beam_search)

from helpers import numeric_grad, random_lattice, rel_err


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def random_labels(rng, K, n):
    return [int(x) for x in rng.integers(1, K, size=n)]


# collapse / feasibility -------------------------------------------------------------

def test_collapse_definition():
    a, b = 1, 2
    assert collapse([a, a, 0, a, b, 0]) == [a, a, b]
    assert collapse([0, 0, 0]) == []
    assert collapse([1, 2, 3]) == [1, 2, 3]


def test_min_frames_counts_repeats():
    assert min_frames([]) == 0
    assert min_frames([1, 2]) == 2
    assert min_frames([1, 1, 2, 2, 2]) == 8


# loss --------------------------------------------------------------------------------------

def test_single_frame_single_path():
    lat = np.log(np.array([[0.2, 0.5, 0.3]]))
    loss, _ = ctc_loss(lat, [1])
    assert loss == pytest.approx(-math.log(0.5), abs=1e-15)


def test_two_frames_three_paths():
    p = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    loss, _ = ctc_loss(np.log(p), [1])
    expected = -math.log(p[0, 1] * p[1, 1] + p[0, 0] * p[1, 1] + p[0, 1] * p[1, 0])
    assert loss == pytest.approx(expected, abs=1e-15)


def test_uniform_two_frames_frozen():
    # three of the four equiprobable paths collapse to [1]
    loss, _ = ctc_loss(np.log(np.full((2, 2), 0.5)), [1])
    assert loss == pytest.approx(-math.log(0.75), abs=1e-15)


def test_loss_matches_path_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(150):
        T, K = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        lat = random_lattice(rng, T, K)
        labels = random_labels(rng, K, int(rng.integers(0, 4)))
        oracle = brute_force_label_score(lat, labels)
        score = ctc_label_score(lat, labels)
        if not is_feasible(T, labels):
            assert score == -math.inf and oracle == -math.inf
            continue
        assert abs(score - oracle) <= 1e-9 * abs(oracle)
        loss, _ = ctc_loss(lat, labels)
        assert loss >= 0 and abs(loss + oracle) <= 1e-9 * abs(oracle)


def test_empty_labels_is_all_blank_path():
    rng = np.random.default_rng(1)
    lat = random_lattice(rng, 5, 3)
    assert ctc_label_score(lat, []) == pytest.approx(lat[:, BLANK_ID].sum(), abs=1e-12)


def test_infeasible_alignments():
    lat = random_lattice(np.random.default_rng(2), 2, 3)
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(lat, [1, 1])  # the repeat needs a blank between: 3 frames
    assert ctc_label_score(lat, [1, 1]) == -math.inf
    assert ctc_label_score(lat, [1, 2]) > -math.inf
    assert ctc_label_score(lat, [1, 2, 1]) == -math.inf


def test_infeasibility_boundary_exact():
    rng = np.random.default_rng(3)
    for _ in range(100):
        T = int(rng.integers(1, 7))
        labels = random_labels(rng, 3, int(rng.integers(0, 5)))
        score = ctc_label_score(random_lattice(rng, T, 3), labels)
        assert (score == -math.inf) == (T < len(labels) + sum(a == b for a, b in zip(labels, labels[1:])))


def test_blank_in_labels_rejected():
    with pytest.raises(ValueError):
        ctc_loss(random_lattice(np.random.default_rng(4), 3, 3), [1, 0])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(25):
        T, K = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        labels = random_labels(rng, K, int(rng.integers(0, 3)))
        if not is_feasible(T, labels):
            continue
        z = rng.normal(size=(T, K))
        _, grad = ctc_loss(log_softmax(z), labels)
        num = numeric_grad(lambda: ctc_loss(log_softmax(z), labels)[0], z)
        assert rel_err(grad, num) < 1e-4


def test_normalization_over_labelings():
    rng = np.random.default_rng(6)
    for _ in range(20):
        T, K = int(rng.integers(1, 5)), int(rng.integers(2, 4))
        lat = random_lattice(rng, T, K)
        total = 0.0
        for n in range(T + 1):
            for labels in itertools.product(range(1, K), repeat=n):
                total += math.exp(ctc_label_score(lat, list(labels)))
        assert total <= 1 + 1e-9
        assert total == pytest.approx(1.0, abs=1e-9)


def test_batched_forward_backward_matches_single():
    rng = np.random.default_rng(7)
    lats = [random_lattice(rng, T, 4) for T in (6, 3, 5)]
    labels = [[1, 2], [3], [2, 2, 1]]
    pad = np.full((3, 6, 4), -1e30)
    for b, l in enumerate(lats):
        pad[b, :len(l)] = l
    loglik, occ = ctc.forward_backward(pad, labels, [6, 3, 5])
    for b in range(3):
        assert loglik[b] == pytest.approx(ctc_label_score(lats[b], labels[b]), abs=1e-12)
        # occupancies of each valid frame form a distribution over symbols
        assert np.allclose(occ[b, :len(lats[b])].sum(axis=1), 1.0, atol=1e-12)


def test_loss_op_gradient_through_autodiff():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(2, 5, 4))
    labels, lengths = [[1, 2], [3]], [5, 4]
    x = nc.Tensor(z, requires_grad=True)
    nc.tsum(ctc.ctc_loss_op(x, labels, lengths)).backward()

    def f():
        return sum(ctc_loss(log_softmax(z[b, :lengths[b]]), labels[b])[0] for b in range(2))
    assert rel_err(x.grad, numeric_grad(f, z)) < 1e-6
    assert np.all(x.grad[1, 4] == 0)  # padding frame


# decoding ------------------------------------------------------------------------------------------

def test_greedy_examples():
    a, b = 1, 2
    path = [0, a, a, 0, b]
    lat = np.log(np.full((5, 3), 0.1))
    for t, k in enumerate(path):
        lat[t, k] = math.log(0.8)
    hyp = greedy_decode(lat)
    assert hyp.ids == [a, b]
    assert hyp.scores["ctc_wordpiece"] == pytest.approx(5 * math.log(0.8))
    blank = np.log(np.tile([0.9, 0.05, 0.05], (4, 1)))
    assert greedy_decode(blank).ids == []


def test_greedy_tie_goes_to_lowest_id():
    lat = np.log(np.array([[0.2, 0.4, 0.4]]))
    assert greedy_decode(lat).ids == [1]


def test_beam_top1_is_enumeration_argmax_t2_k3():
    rng = np.random.default_rng(9)
    for _ in range(50):
        lat = random_lattice(rng, 2, 3)
        masses = brute_force_labelings(lat)
        best = max(masses.items(), key=lambda kv: kv[1])
        top = prefix_beam_search(lat, beam_width=50, nbest=1)[0]
        assert math.exp(top.scores["ctc_wordpiece"]) == pytest.approx(best[1], rel=1e-12)
        assert tuple(top.ids) == best[0]


def test_beam_scores_equal_label_scores():
    rng = np.random.default_rng(10)
    lat = random_lattice(rng, 4, 3)
    for hyp in prefix_beam_search(lat, beam_width=50, nbest=10):
        assert hyp.scores["ctc_wordpiece"] == pytest.approx(ctc_label_score(lat, hyp.ids), abs=1e-12)


def test_beam_width_one_matches_greedy_on_dominating_lattice():
    rng = np.random.default_rng(11)
    for _ in range(30):
        T, K = int(rng.integers(2, 10)), int(rng.integers(3, 7))
        path = rng.integers(0, K, size=T)
        lat = np.full((T, K), math.log(0.01 / (K - 1)))
        lat[np.arange(T), path] = math.log(0.99)
        assert prefix_beam_search(lat, 1, 1)[0].ids == greedy_decode(lat).ids


def test_nbest_distinct_and_ordered():
    rng = np.random.default_rng(12)
    for _ in range(20):
        lat = random_lattice(rng, 6, 4)
        hyps = prefix_beam_search(lat, beam_width=6, nbest=6)
        assert len({tuple(h.ids) for h in hyps}) == len(hyps) == 6
        scores = [h.scores["ctc_wordpiece"] for h in hyps]
        assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_wider_beam_never_lowers_top1_on_random_lattices():
    # not a theorem for pruned search in general; checked here on random small lattices
    rng = np.random.default_rng(13)
    for _ in range(30):
        lat = random_lattice(rng, 6, 4)
        tops = [prefix_beam_search(lat, w, 1)[0].scores["ctc_wordpiece"] for w in (1, 2, 4, 8, 32)]
        assert all(b >= a - 1e-12 for a, b in zip(tops, tops[1:]))


def test_beam_argument_checks():
    with pytest.raises(ValueError):
        prefix_beam_search(np.zeros((2, 3)), beam_width=2, nbest=3)


def test_token_limit_scores_are_lower_bounds():
    # pruned symbols drop some alignments, so beam mass never exceeds the exact score
    rng = np.random.default_rng(14)
    lat = random_lattice(rng, 5, 6)
    for hyp in prefix_beam_search(lat, 8, 4, token_limit=2):
        assert hyp.scores["ctc_wordpiece"] <= ctc_label_score(lat, hyp.ids) + 1e-12


# n-best files ----------------------------------------------------------------------------------------

def test_nbest_round_trip(tmp_path):
    syms = ["<blank>", "▁a", "b", "c"]
    nbest = {"u1": [Hypothesis([1, 2], {"ctc_wordpiece": -1.25, "aed": -math.inf}),
                    Hypothesis([], {"ctc_wordpiece": -3.0, "aed": -2.0})],
             "u2": [Hypothesis([3], {"ctc_wordpiece": -0.1, "aed": -0.3})]}
    path = tmp_path / "nbest.tsv"
    ctc.write_nbest(path, nbest, syms.__getitem__)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "u1\t1\tctc_wordpiece=-1.25;aed=-inf\t▁a b"
    back = ctc.read_nbest(path, syms.index)
    assert {u: [(h.ids, h.scores) for h in hs] for u, hs in back.items()} == \
           {u: [(h.ids, h.scores) for h in hs] for u, hs in nbest.items()}


def test_nbest_malformed_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("u1\t1\tx=1\n", encoding="utf-8")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        ctc.read_nbest(path, int)
