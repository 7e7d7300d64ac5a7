import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vql.errors import CorruptionError, ParameterError, ShapeError
from vql.vq import (
    DEFAULT_BETA,
    DEFAULT_CODEBOOK_SIZE,
    Assignment,
    Codebook,
    VqLossTerms,
    assign_nearest,
    quantize,
    reinit_dead_codes,
    update_codebook,
    vq_loss,
)


def brute_force(keys, codewords):
    table = [[sum((a - b) ** 2 for a, b in zip(k, c)) for c in codewords] for k in keys]
    return np.array([min(range(len(row)), key=lambda j: (row[j], j)) for row in table])


def test_defaults():
    assert DEFAULT_BETA == 0.25 and DEFAULT_CODEBOOK_SIZE == 100


def test_codebook_invariants():
    with pytest.raises(ParameterError):
        Codebook(np.zeros((0, 2)))
    with pytest.raises(ParameterError):
        Codebook(np.array([[np.inf, 0.0]]))
    cb = Codebook(np.zeros((3, 2)))
    assert cb.size == 3 and cb.dim == 2 and np.array_equal(cb.usage, [0, 0, 0])


def test_assign_obvious_nearest():
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert assign_nearest([[0.9, 1.2]], cb).indices.tolist() == [1]


def test_assign_tie_goes_to_lowest_index():
    cb = Codebook(np.zeros((2, 2)))
    assert assign_nearest([[5.0, 5.0]], cb).indices.tolist() == [0]


def test_assign_matches_exhaustive_table(rng):
    keys, cw = rng.normal(size=(50, 3)), rng.normal(size=(8, 3))
    assert np.array_equal(assign_nearest(keys, Codebook(cw)).indices, brute_force(keys, cw))


def test_assign_shape_error():
    with pytest.raises(ShapeError):
        assign_nearest(np.ones((2, 3)), Codebook(np.ones((2, 2))))


small = st.integers(-3, 3).map(float)


@given(st.data())
def test_assign_with_ties_matches_brute_force(data):
    d = data.draw(st.integers(1, 3))
    cw = data.draw(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(d)), elements=small))
    keys = data.draw(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(d)), elements=small))
    assert np.array_equal(assign_nearest(keys, Codebook(cw)).indices, brute_force(keys, cw))


@given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_assign_scale_equivariant(s, seed):
    rng = np.random.default_rng(seed)
    keys, cw = rng.normal(size=(20, 3)), rng.normal(size=(5, 3))
    a = assign_nearest(keys, Codebook(cw)).indices
    b = assign_nearest(keys * s, Codebook(cw * s)).indices
    # scaling rounds distances, so only compare where the winner is clear
    d = ((keys[:, None, :] - cw[None]) ** 2).sum(-1)
    srt = np.sort(d, axis=1)
    clear = srt[:, 1] - srt[:, 0] > 1e-9 * srt[:, 1]
    assert np.array_equal(a[clear], b[clear])


def test_assigned_codeword_is_never_farther(rng):
    for _ in range(20):
        keys, cw = rng.normal(size=(10, 2)), rng.normal(size=(4, 2))
        a = assign_nearest(keys, Codebook(cw))
        own = np.linalg.norm(keys - quantize(keys, Codebook(cw), a), axis=1)
        every = np.linalg.norm(keys[:, None] - cw[None], axis=2)
        assert np.all(own[:, None] <= every)


def test_quantize_examples():
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    keys = np.array([[0.9, 1.2]])
    assert np.array_equal(quantize(keys, cb, assign_nearest(keys, cb)), [[1.0, 1.0]])
    exact = Codebook(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(quantize(exact.codewords, exact, assign_nearest(exact.codewords, exact)), exact.codewords)


def test_quantize_equals_dense_product(rng):
    keys, cb = rng.normal(size=(30, 3)), Codebook(rng.normal(size=(4, 3)))
    a = assign_nearest(keys, cb)
    assert np.array_equal(quantize(keys, cb, a), a.one_hot() @ cb.codewords)


def test_quantize_rejects_bad_index():
    cb = Codebook(np.zeros((2, 1)))
    with pytest.raises(CorruptionError):
        quantize(np.zeros((1, 1)), cb, Assignment(np.array([5]), 2))
    with pytest.raises(CorruptionError):
        Assignment(np.array([-1]), 2).validate()


def test_one_hot_has_one_per_row():
    oh = Assignment(np.array([1, 0, 1]), 3).one_hot()
    assert oh.shape == (3, 3) and np.array_equal(oh.sum(axis=1), [1, 1, 1])


def test_vq_loss_examples(rng):
    k = rng.normal(size=(4, 2))
    t = vq_loss(k, k)
    assert (t.codebook_loss, t.commitment_loss) == (0.0, 0.0)
    t = vq_loss([[1.0, 0.0]], [[0.0, 0.0]], 0.25)
    assert t.codebook_loss == 1.0 and t.total == 1.25
    q = rng.normal(size=(7, 3))
    t = vq_loss(q, rng.normal(size=(7, 3)))
    assert abs(t.codebook_loss - t.commitment_loss) <= 1e-12


def test_vq_loss_errors():
    with pytest.raises(ShapeError):
        vq_loss(np.ones((2, 2)), np.ones((3, 2)))
    with pytest.raises(ParameterError):
        vq_loss(np.ones((1, 1)), np.ones((1, 1)), beta=-1.0)


def test_vq_terms_total():
    assert VqLossTerms(0.5, 0.5, 0.25).total == 0.625


def test_update_single_key_step():
    cb = Codebook(np.array([[0.0, 0.0]]))
    update_codebook(cb, np.array([[2.0, 0.0]]), Assignment(np.array([0]), 1), 0.25)
    assert np.array_equal(cb.codewords, [[1.0, 0.0]])
    assert cb.usage.tolist() == [1]


def test_update_leaves_unused_and_zero_lr(rng):
    cb = Codebook(rng.normal(size=(3, 2)))
    before = cb.codewords.copy()
    update_codebook(cb, rng.normal(size=(4, 2)), Assignment(np.array([0, 0, 2, 2]), 3), 0.1)
    assert np.array_equal(cb.codewords[1], before[1])
    cb2 = Codebook(before.copy())
    update_codebook(cb2, rng.normal(size=(4, 2)), Assignment(np.array([0, 1, 2, 2]), 3), 0.0)
    assert cb2.codewords.tobytes() == before.tobytes()
    with pytest.raises(ParameterError):
        update_codebook(cb2, np.ones((1, 2)), Assignment(np.array([0]), 3), -1.0)


def test_update_codebook_loss_non_increasing(rng):
    keys = rng.normal(size=(40, 3))
    cb = Codebook(rng.normal(size=(5, 3)))
    a = assign_nearest(keys, cb)
    losses = []
    for _ in range(30):
        losses.append(vq_loss(keys, quantize(keys, cb, a)).codebook_loss)
        update_codebook(cb, keys, a, 0.1)
    assert all(b <= a_ + 1e-15 for a_, b in zip(losses, losses[1:]))


def test_reinit_dead_codes():
    keys = np.array([[7.0, 7.0]])
    cb = Codebook(np.zeros((2, 2)), usage=np.array([3, 0]))
    reinit_dead_codes(cb, keys, min_usage=1, rng_seed=0)
    assert np.array_equal(cb.codewords, [[0.0, 0.0], [7.0, 7.0]])
    assert cb.usage.tolist() == [0, 0]


def test_reinit_no_dead_codes_and_determinism(rng):
    cw = rng.normal(size=(4, 2))
    cb = Codebook(cw.copy(), usage=np.array([1, 2, 3, 4]))
    reinit_dead_codes(cb, rng.normal(size=(9, 2)), 1, 0)
    assert np.array_equal(cb.codewords, cw)
    keys = rng.normal(size=(9, 2))
    outs = []
    for _ in range(2):
        c = Codebook(cw.copy(), usage=np.array([0, 5, 0, 5]))
        outs.append(reinit_dead_codes(c, keys, 1, 42).codewords)
    assert np.array_equal(outs[0], outs[1])
    with pytest.raises(ParameterError):
        reinit_dead_codes(Codebook(cw.copy()), np.zeros((0, 2)))


def test_kmeans_pp_seeding(rng):
    keys = np.vstack([rng.normal(size=(30, 2)) * 0.01 + c for c in ([0, 0], [10, 0], [0, 10])])
    cb = Codebook.kmeans_pp(keys, 3, np.random.default_rng(0))
    a = assign_nearest(keys, cb).indices
    # one seed per well-separated cluster
    assert sorted(set(a[:30])) != sorted(set(a[30:60])) and len(set(a)) == 3
