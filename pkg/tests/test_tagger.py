import itertools
import math

import pytest
import torch

from crowdner import tagger


def brute_force_logz(o, trans):
    n, t = o.shape
    start = trans.shape[0] - 1
    scores = []
    for y in itertools.product(range(t), repeat=n):
        s = trans[start, y[0]] + o[0, y[0]]
        for i in range(1, n):
            s = s + trans[y[i - 1], y[i]] + o[i, y[i]]
        scores.append(float(s))
    m = max(scores)
    return m + math.log(sum(math.exp(s - m) for s in scores))


def brute_force_best(o, trans):
    """argmax with the tie rule: first in lexicographic order wins."""
    n, t = o.shape
    start = trans.shape[0] - 1
    best_y, best_s = None, -math.inf
    for y in itertools.product(range(t), repeat=n):
        s = trans[start, y[0]] + o[0, y[0]]
        for i in range(1, n):
            s = s + trans[y[i - 1], y[i]] + o[i, y[i]]
        if float(s) > best_s:
            best_y, best_s = list(y), float(s)
    return best_y, best_s


def hand_instance():
    o = torch.tensor([[1.0, 2.0], [0.5, 0.0]], dtype=torch.float64)
    trans = torch.tensor(
        [[0.1, 0.2], [0.3, 0.4], [0.0, 0.0]], dtype=torch.float64
    )  # last row = virtual start, zero here
    return o, trans


def random_instance(gen, n_max=5, t_max=4, scale=1.0):
    n = int(torch.randint(1, n_max + 1, (1,), generator=gen))
    t = int(torch.randint(1, t_max + 1, (1,), generator=gen))
    o = torch.randn(n, t, generator=gen, dtype=torch.float64) * scale
    trans = torch.randn(t + 1, t, generator=gen, dtype=torch.float64) * scale
    return o, trans


# ---------------------------------------------------------------------------
# hand-derived examples (tags O=0, B=1)


def test_sequence_score_hand_values():
    o, trans = hand_instance()
    assert float(tagger.sequence_score(o, trans, torch.tensor([1, 0]))) == pytest.approx(2.8)
    assert float(tagger.sequence_score(o, trans, torch.tensor([0, 0]))) == pytest.approx(1.6)


def test_sequence_score_single_step():
    o, trans = hand_instance()
    assert float(tagger.sequence_score(o[:1], trans, torch.tensor([0]))) == pytest.approx(1.0)


def test_sequence_score_rejects_bad_index():
    o, trans = hand_instance()
    with pytest.raises(IndexError):
        tagger.sequence_score(o, trans, torch.tensor([0, 5]))


def test_log_partition_hand_value():
    o, trans = hand_instance()
    expected = math.log(sum(math.exp(s) for s in (1.6, 1.2, 2.8, 2.4)))
    assert float(tagger.log_partition(o, trans)) == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(3.576, abs=5e-4)


def test_nll_hand_value():
    o, trans = hand_instance()
    nll = float(tagger.nll_loss(o, trans, torch.tensor([1, 0])))
    assert nll == pytest.approx(3.5762977 - 2.8, abs=1e-6)


def test_viterbi_hand_value():
    o, trans = hand_instance()
    path, score = tagger.viterbi_decode(o, trans)
    assert path == [1, 0]
    assert score == pytest.approx(2.8)


def test_single_tag_degenerate_cases():
    gen = torch.Generator().manual_seed(0)
    o = torch.randn(4, 1, generator=gen, dtype=torch.float64)
    trans = torch.randn(2, 1, generator=gen, dtype=torch.float64)
    only_path_score = float(tagger.sequence_score(o, trans, torch.zeros(4, dtype=torch.long)))
    assert float(tagger.log_partition(o, trans)) == pytest.approx(only_path_score, abs=1e-12)
    assert float(tagger.nll_loss(o, trans, torch.zeros(4, dtype=torch.long))) == pytest.approx(0.0, abs=1e-12)


def test_viterbi_all_equal_scores_takes_lowest_indices():
    o = torch.zeros(3, 3, dtype=torch.float64)
    trans = torch.zeros(4, 3, dtype=torch.float64)
    path, _ = tagger.viterbi_decode(o, trans)
    assert path == [0, 0, 0]


def test_viterbi_n1_argmax():
    # n=1: argmax over T[start, .] + o_1 = [0.5+0.3, 0.0+0.9]
    o = torch.tensor([[0.3, 0.9]], dtype=torch.float64)
    trans = torch.tensor([[0.0, 0.0], [0.0, 0.0], [0.5, 0.0]], dtype=torch.float64)
    path, score = tagger.viterbi_decode(o, trans)
    assert path == [1] and score == pytest.approx(0.9)


def test_row_shift_moves_logz_by_constant():
    o, trans = hand_instance()
    base = float(tagger.log_partition(o, trans))
    shifted = o.clone()
    shifted[1] += 3.7
    assert float(tagger.log_partition(shifted, trans)) == pytest.approx(base + 3.7, abs=1e-9)


# ---------------------------------------------------------------------------
# brute-force oracle sweeps


def test_log_partition_matches_brute_force_200():
    gen = torch.Generator().manual_seed(42)
    for _ in range(200):
        o, trans = random_instance(gen)
        assert float(tagger.log_partition(o, trans)) == pytest.approx(
            brute_force_logz(o, trans), abs=1e-8
        )


def test_viterbi_matches_brute_force_200():
    gen = torch.Generator().manual_seed(43)
    for _ in range(200):
        o, trans = random_instance(gen)
        path, score = tagger.viterbi_decode(o, trans)
        ref_path, ref_score = brute_force_best(o, trans)
        assert path == ref_path
        assert score == pytest.approx(ref_score, abs=1e-9)


def test_probabilities_normalize():
    gen = torch.Generator().manual_seed(44)
    for _ in range(100):
        o, trans = random_instance(gen)
        logz = float(tagger.log_partition(o, trans))
        n, t = o.shape
        total = 0.0
        for y in itertools.product(range(t), repeat=n):
            s = float(tagger.sequence_score(o, trans, torch.tensor(y)))
            total += math.exp(s - logz)
        assert total == pytest.approx(1.0, abs=1e-9)


def test_nll_non_negative_sweep():
    gen = torch.Generator().manual_seed(45)
    for _ in range(1000):
        o, trans = random_instance(gen, n_max=4, t_max=3, scale=2.0)
        n, t = o.shape
        y = torch.randint(0, t, (n,), generator=gen)
        assert float(tagger.nll_loss(o, trans, y)) >= 0.0


def test_numerical_stability_large_scores():
    o = torch.full((6, 3), 1e4, dtype=torch.float64)
    trans = torch.full((4, 3), -1e4, dtype=torch.float64)
    logz = float(tagger.log_partition(o, trans))
    assert math.isfinite(logz)
    # every path has identical score, so logZ = score + n*log... enumerate cheaply
    assert logz == pytest.approx(brute_force_logz(o, trans), rel=1e-12)


# ---------------------------------------------------------------------------
# gradients vs brute-force marginals and finite differences


def brute_force_marginals(o, trans):
    n, t = o.shape
    logz = brute_force_logz(o, trans)
    marg = torch.zeros(n, t, dtype=torch.float64)
    for y in itertools.product(range(t), repeat=n):
        s = float(tagger.sequence_score(o, trans, torch.tensor(y)))
        p = math.exp(s - logz)
        for i, tag in enumerate(y):
            marg[i, tag] += p
    return marg


def test_loss_gradient_is_marginal_minus_onehot():
    gen = torch.Generator().manual_seed(46)
    for _ in range(10):
        o, trans = random_instance(gen, n_max=4, t_max=3)
        n, t = o.shape
        y = torch.randint(0, t, (n,), generator=gen)
        o = o.requires_grad_(True)
        loss = tagger.nll_loss(o, trans, y)
        (grad_o,) = torch.autograd.grad(loss, o)
        expected = brute_force_marginals(o.detach(), trans)
        for i in range(n):
            expected[i, y[i]] -= 1.0
        assert torch.allclose(grad_o, expected, atol=1e-8)


def test_loss_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(47)
    o, trans = random_instance(gen, n_max=4, t_max=3)
    n, t = o.shape
    y = torch.randint(0, t, (n,), generator=gen)
    o = o.requires_grad_(True)
    trans = trans.requires_grad_(True)
    loss = tagger.nll_loss(o, trans, y)
    grad_o, grad_t = torch.autograd.grad(loss, (o, trans))

    step = 1e-5
    for tensor, grad in ((o, grad_o), (trans, grad_t)):
        flat = tensor.detach().view(-1)
        gflat = grad.view(-1)
        for j in range(flat.numel()):
            orig = float(flat[j])
            flat[j] = orig + step
            up = float(tagger.nll_loss(o.detach(), trans.detach(), y))
            flat[j] = orig - step
            down = float(tagger.nll_loss(o.detach(), trans.detach(), y))
            flat[j] = orig
            fd = (up - down) / (2 * step)
            a = float(gflat[j])
            assert abs(a - fd) / max(abs(a), abs(fd), 1e-6) < 1e-4


# ---------------------------------------------------------------------------
# batched versions agree with the single-instance ones


def test_batched_ops_match_single():
    gen = torch.Generator().manual_seed(48)
    n, t, b = 5, 3, 7
    o = torch.randn(b, n, t, generator=gen, dtype=torch.float64)
    trans = torch.randn(t + 1, t, generator=gen, dtype=torch.float64)
    y = torch.randint(0, t, (b, n), generator=gen)

    scores = tagger.sequence_score_batch(o, trans, y)
    logzs = tagger.log_partition_batch(o, trans)
    nlls = tagger.nll_loss_batch(o, trans, y)
    paths, vscores = tagger.viterbi_decode_batch(o, trans)
    for i in range(b):
        assert float(scores[i]) == pytest.approx(float(tagger.sequence_score(o[i], trans, y[i])), abs=1e-10)
        assert float(logzs[i]) == pytest.approx(float(tagger.log_partition(o[i], trans)), abs=1e-10)
        assert float(nlls[i]) == pytest.approx(float(tagger.nll_loss(o[i], trans, y[i])), abs=1e-10)
        ref_path, ref_score = tagger.viterbi_decode(o[i], trans)
        assert paths[i].tolist() == ref_path
        assert float(vscores[i]) == pytest.approx(ref_score, abs=1e-10)


# ---------------------------------------------------------------------------
# BiLSTM and emissions


def test_bilstm_shapes_and_zero_case():
    lstm = torch.nn.LSTM(6, 4, batch_first=True, bidirectional=True)
    out = tagger.bilstm_encode(torch.randn(1, 6), lstm)
    assert out.shape == (1, 8)
    with torch.no_grad():
        for p in lstm.parameters():
            p.zero_()
    out = tagger.bilstm_encode(torch.zeros(5, 6), lstm)
    assert torch.all(out == 0)


def test_bilstm_reversal_swaps_direction_blocks():
    # with tied direction weights, reversing the input reverses the output
    # and swaps the forward/backward blocks
    torch.manual_seed(0)
    lstm = torch.nn.LSTM(6, 4, batch_first=True, bidirectional=True)
    with torch.no_grad():
        lstm.weight_ih_l0_reverse.copy_(lstm.weight_ih_l0)
        lstm.weight_hh_l0_reverse.copy_(lstm.weight_hh_l0)
        lstm.bias_ih_l0_reverse.copy_(lstm.bias_ih_l0)
        lstm.bias_hh_l0_reverse.copy_(lstm.bias_hh_l0)
    x = torch.randn(9, 6)
    fwd = tagger.bilstm_encode(x, lstm)
    rev = tagger.bilstm_encode(x.flip(0), lstm)
    assert torch.allclose(fwd[:, :4], rev.flip(0)[:, 4:], atol=1e-6)
    assert torch.allclose(fwd[:, 4:], rev.flip(0)[:, :4], atol=1e-6)


def test_emission_scores_zero_weight_gives_bias_rows():
    feats = torch.randn(4, 6)
    bias = torch.tensor([0.5, -1.0, 2.0])
    o = tagger.emission_scores(feats, torch.zeros(3, 6), bias)
    assert torch.allclose(o, bias.expand(4, 3))


def test_emission_scores_single_tag_shape():
    o = tagger.emission_scores(torch.randn(5, 6), torch.randn(1, 6), torch.randn(1))
    assert o.shape == (5, 1)


def test_emission_scores_hand_product():
    feats = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    weight = torch.tensor([[1.0, 0.0], [0.5, 0.5]])
    bias = torch.tensor([1.0, 0.0])
    o = tagger.emission_scores(feats, weight, bias)
    assert torch.allclose(o, torch.tensor([[2.0, 1.5], [4.0, 3.5]]))


def test_emission_scores_shape_mismatch():
    with pytest.raises(ValueError):
        tagger.emission_scores(torch.randn(4, 6), torch.randn(3, 5), torch.randn(3))
