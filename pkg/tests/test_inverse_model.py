import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from deplab.harness import ExperimentConfig, babble_samples
from deplab.inverse_model import (
    ALPHA,
    BETA,
    HEXAPOD_DELAYED,
    HEXAPOD_JOINTS,
    HEXAPOD_LEGS,
    HEXAPOD_SENSORS,
    DelayedSensorConfig,
    DelayLine,
    apply_model,
    build_guided_model,
    delayed_channel,
    extrinsic_signal,
    joint,
    learn_model_offline,
    preset_model,
)

val = st.floats(-100, 100, allow_nan=False)


def leg_columns(side: str) -> set:
    cols = set()
    for leg in HEXAPOD_LEGS:
        if leg[0] == side:
            cols |= {joint(leg, p) for p in (0, 1, 2)}
            cols |= {delayed_channel(leg, p) for p in (ALPHA, BETA)}
    return cols


def test_apply_model_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert np.array_equal(apply_model(np.eye(3), v), v)
    M = np.zeros((3, 3))
    M[0, 0] = -1.0
    assert apply_model(M, np.array([2.0, 1.0, 1.0]))[0] == -2.0
    with pytest.raises(ValueError):
        apply_model(np.eye(3), np.ones(2))


def test_extrinsic_signal_example():
    np.testing.assert_allclose(extrinsic_signal([1.0, 0.0], [0.4, 0.0]), [0.6, 0.0], atol=1e-16)
    with pytest.raises(ValueError):
        extrinsic_signal([1.0], [1.0, 2.0])


@st.composite
def model_and_vectors(draw):
    m, n = draw(st.integers(1, 6)), draw(st.integers(1, 6))
    M = draw(hnp.arrays(np.float64, (m, n), elements=val))
    u = draw(hnp.arrays(np.float64, n, elements=val))
    v = draw(hnp.arrays(np.float64, n, elements=val))
    ydot = draw(hnp.arrays(np.float64, m, elements=val))
    return M, u, v, ydot


@given(model_and_vectors(), val, val)
def test_model_linearity(args, a, b):
    M, u, v, _ = args
    lhs = apply_model(M, a * u + b * v)
    rhs = a * apply_model(M, u) + b * apply_model(M, v)
    scale = np.abs(M) @ (np.abs(a * u) + np.abs(b * v)) + 1.0
    assert np.all(np.abs(lhs - rhs) <= 1e-12 * scale)


@given(model_and_vectors())
def test_extrinsic_closure(args):
    M, u, _, ydot = args
    yt = apply_model(M, u)
    back = ydot + extrinsic_signal(yt, ydot)
    # one rounding of the subtraction and one of the addition
    assert np.all(np.abs(back - yt) <= 2 * np.spacing(np.maximum(np.abs(yt), np.abs(ydot))))


def test_offline_learning_recovers_known_model():
    rng = np.random.default_rng(7)
    for m, n in [(3, 3), (4, 6), (18, 30)]:
        M_star = rng.normal(size=(m, n))
        X = rng.normal(size=(2 * n, n))
        fit = learn_model_offline([(x, M_star @ x) for x in X])
        assert np.linalg.norm(fit.M - M_star) < 1e-8 and not fit.rank_deficient


def test_unit_probes_reconstruct_exactly():
    M_star = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]])
    fit = learn_model_offline([(e, M_star @ e) for e in np.eye(3)])
    np.testing.assert_allclose(fit.M, M_star, atol=1e-12)
    assert fit.residual < 1e-12


def test_rank_deficient_samples_fall_back_to_ridge():
    x = np.array([1.0, 1.0, 0.0])
    with pytest.warns(RuntimeWarning):
        fit = learn_model_offline([(x, x), (2 * x, 2 * x), (-x, -x)])
    assert fit.rank_deficient and np.all(np.isfinite(fit.M))


def test_babbling_on_lagged_identity_plant_learns_identity():
    cfg = ExperimentConfig.from_dict({"name": "b", "duration": 1.0, "plant": {"type": "linear", "n": 3},
                                      "plasticity": {"rule": "dep"}})
    fit = learn_model_offline(babble_samples(cfg, duration=20.0)[0])
    assert np.all(np.abs(fit.M - np.eye(3)) < 0.05)


def test_guided_model_construction():
    assert not build_guided_model([], 3, 4).any()
    M = build_guided_model([(0, 1, -1), {"row": 2, "col": 3, "sign": 1}, (0, 1, -1)], 3, 4)
    assert M[0, 1] == -1 and M[2, 3] == 1 and np.count_nonzero(M) == 2
    with pytest.raises(IndexError):
        build_guided_model([(3, 0, 1)], 3, 4)
    with pytest.raises(ValueError):
        build_guided_model([(0, 0, 1), (0, 0, -1)], 3, 4)


def test_hexapod_m1_structure():
    M = preset_model("hexapod-m1")
    assert M.shape == (HEXAPOD_JOINTS, HEXAPOD_SENSORS)
    assert np.count_nonzero(M < 0) == 4
    assert np.array_equal(np.diag(M[:, :HEXAPOD_JOINTS]), np.ones(HEXAPOD_JOINTS))
    # delayed forward/backward channel feeds the up/down motor row of its leg
    for leg in HEXAPOD_LEGS:
        assert M[joint(leg, BETA), delayed_channel(leg, ALPHA)] == 1.0
    # no left-right links
    for side, other in (("L", "R"), ("R", "L")):
        rows = [joint(leg, p) for leg in HEXAPOD_LEGS if leg[0] == side for p in (0, 1, 2)]
        assert not M[np.ix_(rows, sorted(leg_columns(other)))].any()


def test_hexapod_m2_structure():
    M = preset_model("hexapod-m2")
    for k in (1, 2, 3):
        assert M[joint(f"L{k}", ALPHA), joint(f"R{k}", ALPHA)] == -1
        assert M[joint(f"R{k}", ALPHA), joint(f"L{k}", ALPHA)] == -1
    for side in "LR":
        assert M[joint(f"{side}1", ALPHA), delayed_channel(f"{side}2", ALPHA)] == 1
        assert M[joint(f"{side}2", ALPHA), delayed_channel(f"{side}3", ALPHA)] == 1
    assert not np.array_equal(M, preset_model("hexapod-m1"))


def test_presets_by_name():
    assert np.array_equal(preset_model("identity", 2, 3), np.eye(2, 3))
    with pytest.raises(KeyError):
        preset_model("hexapod-m3")


def test_delay_config_validation():
    assert DelayedSensorConfig((0,), 0.2).steps(0.02) == 10
    with pytest.raises(ValueError):
        DelayedSensorConfig((0,), 0.21).steps(0.02)
    with pytest.raises(IndexError):
        DelayLine(DelayedSensorConfig((5,), 0.2), 3, 0.02)
    assert len(HEXAPOD_DELAYED) == 12


@given(st.integers(0, 15), st.integers(1, 60),
       st.lists(st.integers(0, 3), min_size=1, max_size=4, unique=True))
def test_delayed_channels_are_exact_copies(d, T, idx):
    rng = np.random.default_rng(d * 1000 + T)
    X = rng.uniform(-1, 1, size=(T, 4))
    line = DelayLine(DelayedSensorConfig(tuple(idx), d * 0.02), 4, 0.02)
    out = np.array([line.push(x) for x in X])
    assert out.shape == (T, 4 + len(idx))
    assert np.array_equal(out[:, :4], X)
    for t in range(T):
        assert np.array_equal(out[t, 4:], X[max(t - d, 0), idx])
