import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stfusion.core import SOURCE_LABELED, TARGET_EVAL, InputError, Observation
from stfusion.embedder import (
    TrainConfig,
    TrainingError,
    VisualModel,
    classify,
    cosine_matrix,
    embed,
    init_model,
    loss_all,
    read_model,
    train_supervised,
    visual_score,
    write_model,
)
from stfusion.evaluation import visual_cmc
from stfusion.scenarios import campus
from stfusion.simulator import simulate

from conftest import make_dataset

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def obs(x, oid="o"):
    return Observation(oid, 0, 0, np.asarray(x, dtype=float))


def linear(W, tau=0.5):
    W = np.asarray(W, dtype=float)
    m = init_model("linear", W.shape[1], W.shape[0], tau=tau)
    return m.with_params({**m.params, "emb_w": W})


def matvec(W, x):
    # Plain-Python oracle, independent of numpy's matmul.
    return [sum(float(a) * float(b) for a, b in zip(row, x)) for row in W]


def test_embed_identity():
    assert embed(init_model("identity", 3), obs([1, 0, 2])).tolist() == [1.0, 0.0, 2.0]


def test_embed_zero_linear():
    assert not embed(linear(np.zeros((4, 3))), obs([3, -1, 2])).any()


@given(st.integers(0, 10_000))
def test_embed_linear_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    W, x = rng.normal(size=(5, 7)), rng.normal(size=7)
    assert np.allclose(embed(linear(W), obs(x)), matvec(W, x), rtol=1e-12, atol=1e-12)


def test_embed_dimension_mismatch():
    with pytest.raises(InputError):
        embed(init_model("identity", 3), obs([1, 2]))
    with pytest.raises(InputError):
        embed(linear(np.ones((2, 4))), obs([1, 2, 3]))


def test_model_invariants():
    with pytest.raises(InputError):
        init_model("identity", 3, tau=1.0)
    with pytest.raises(InputError):
        init_model("identity", 3, tau=0.0)
    with pytest.raises(InputError):
        init_model("mlp", 3, 2, hidden_dim=0)
    with pytest.raises(InputError):
        init_model("conv", 3)


def test_visual_score_examples():
    m = init_model("identity", 2)
    assert visual_score(m, obs([1, 2]), obs([1, 2])).value == pytest.approx(1.0)
    assert visual_score(m, obs([1, 0]), obs([0, 3])).value == 0.0
    assert visual_score(m, obs([1, 2]), obs([-1, -2])).value == 0.0
    s = visual_score(m, obs([0, 0]), obs([1, 1]))
    assert s == (0.0, True)
    assert not visual_score(m, obs([1, 0]), obs([1, 1])).degenerate


def test_cosine_matrix_degenerate():
    s, d = cosine_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert s.tolist() == [[0.0, 0.0], [1.0, 0.0]]
    assert d.tolist() == [[True, True], [False, False]]


@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite))
def test_visual_score_symmetric(a, b):
    m = init_model("identity", 4)
    assert visual_score(m, obs(a), obs(b)) == visual_score(m, obs(b), obs(a))


@given(
    arrays(float, 4, elements=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3)),
    arrays(float, 4, elements=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3)),
    st.floats(1e-3, 1e3), st.floats(1e-3, 1e3),
)
def test_visual_score_scale_invariant(a, b, s1, s2):
    m = init_model("identity", 4)
    base = visual_score(m, obs(a), obs(b)).value
    assert visual_score(m, obs(s1 * a), obs(s2 * b)).value == pytest.approx(base, abs=1e-12)


@given(st.integers(0, 10_000))
def test_ranking_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    q, G = rng.normal(size=(1, 5)), rng.normal(size=(12, 5))
    s = cosine_matrix(q, G)[0][0]
    keys = np.arange(len(G))
    order = np.lexsort((keys, -s))
    for f in (np.exp, lambda v: 3 * v**3 + 1, np.arctan):
        assert np.array_equal(np.lexsort((keys, -f(s))), order)


def test_classify_boundary():
    m = init_model("identity", 2, tau=0.5)
    assert classify(m, obs([1, 0]), obs([2, 0]))
    assert not classify(m, obs([1, 0]), obs([0, 1]))
    # Threshold set to the exact score: strict comparison says different.
    x, y = obs([1.0, 0.0]), obs([1.0, 1.0])
    s = visual_score(m, x, y).value
    assert not classify(init_model("identity", 2, tau=s), x, y)
    assert classify(init_model("identity", 2, tau=np.nextafter(s, 0)), x, y)


# -- losses and training -----------------------------------------------------


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


def _fd_check(model, Xi, Xj, ci, cj, h=1e-6):
    _, g = loss_all(model, Xi, Xj, ci, cj)
    flat = model.flat()
    ga = np.concatenate([np.ravel(g[k]) for k in model.params])
    gn = np.empty_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = h
        lp = loss_all(model.with_flat(flat + e), Xi, Xj, ci, cj, grad=False)[0]
        lm = loss_all(model.with_flat(flat - e), Xi, Xj, ci, cj, grad=False)[0]
        gn[k] = (lp - lm) / (2 * h)
    return _rel_err(ga, gn).max()


def test_loss_all_gradient_toy():
    # One-dimensional identity embedding: ver_w, ver_b plus a 2-class head.
    rng = np.random.default_rng(3)
    m = init_model("identity", 1, num_classes=2, seed=1)
    m = m.with_flat(rng.normal(size=m.flat().size))
    Xi, Xj = rng.normal(size=(6, 1)), rng.normal(size=(6, 1))
    ci, cj = np.array([0, 1, 0, 1, 0, 1]), np.array([0, 1, 1, 0, 0, 0])
    assert _fd_check(m, Xi, Xj, ci, cj) < 1e-4


@pytest.mark.parametrize("arch", ["linear", "mlp"])
def test_loss_all_gradient_architectures(arch):
    worst = 0.0
    for seed in range(100 // 10):
        rng = np.random.default_rng(seed)
        m = init_model(arch, 3, 2, hidden_dim=3, num_classes=3, seed=seed)
        m = m.with_flat(rng.normal(0, 0.7, m.flat().size))
        Xi, Xj = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        ci, cj = rng.integers(0, 3, 5), rng.integers(0, 3, 5)
        worst = max(worst, _fd_check(m, Xi, Xj, ci, cj))
    assert worst < 1e-4


def _source(noise, persons=40, seed=0):
    sc = campus(seed, persons=persons, noise=noise, nuisance=1.0)
    return simulate(sc.sim, SOURCE_LABELED)


def test_train_epochs_zero_returns_model():
    m = init_model("linear", 16, 8, seed=2)
    assert train_supervised(m, _source(0.5), TrainConfig(epochs=0)) is m


def test_train_requires_two_identities_and_labels():
    rows = [(f"o{i}", 0, i, [1.0, float(i)], 0) for i in range(4)]
    with pytest.raises(TrainingError) as exc:
        train_supervised(init_model("identity", 2), make_dataset(rows, 1, SOURCE_LABELED))
    assert exc.value.exit_code == 2
    rows[0] = ("o0", 0, 0, [1.0, 0.0], 1)
    with pytest.raises(TrainingError):
        train_supervised(init_model("identity", 2), make_dataset(rows, 1, TARGET_EVAL))


def test_training_decreases_loss_and_stays_finite():
    log = []
    m = train_supervised(init_model("linear", 16, 8, seed=0), _source(0.8),
                         TrainConfig(lr=0.05, epochs=8, pairs_per_epoch=1024), log=log)
    assert np.all(np.isfinite(m.flat()))
    assert log[-1] < log[0]
    # Full-set loss non-increasing up to small batch noise.
    assert all(b <= a + 0.05 * abs(a) for a, b in zip(log, log[1:]))


def test_separable_case_rank1():
    m = train_supervised(init_model("linear", 16, 8, seed=0, init="identity"), _source(0.0),
                         TrainConfig(lr=0.05, epochs=5, pairs_per_epoch=1024))
    held_out = simulate(campus(99, persons=60, noise=0.0).sim, TARGET_EVAL)
    assert visual_cmc(m, held_out).rank(1) >= 0.95


def test_checkpoint_roundtrip(tmp_path):
    for m in (init_model("identity", 3, tau=0.3),
              init_model("linear", 4, 2, num_classes=5, seed=1),
              init_model("mlp", 4, 3, hidden_dim=6, num_classes=2, seed=2, tau=0.71)):
        m = m.with_flat(np.random.default_rng(0).normal(size=m.flat().size) / 3)
        p = tmp_path / f"{m.arch}.ckpt"
        write_model(m, p)
        back = read_model(p)
        assert back.equals(m)
        write_model(back, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "m.ckpt"
    write_model(init_model("linear", 2, 2), p)
    head, body = p.read_text().splitlines()
    (tmp_path / "short.ckpt").write_text(head + "\n" + body.rsplit(" ", 1)[0] + "\n")
    with pytest.raises(InputError):
        read_model(tmp_path / "short.ckpt")
    (tmp_path / "bad.ckpt").write_text("nonsense\n")
    with pytest.raises(InputError):
        read_model(tmp_path / "bad.ckpt")


def test_model_rejects_nonfinite():
    m = init_model("identity", 2)
    with pytest.raises(Exception):
        VisualModel("identity", 2, 2, {**m.params, "ver_b": np.array([np.nan])})
