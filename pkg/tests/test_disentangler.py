import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fcx.core.stats import variance_of
from fcx.disentangler import (
    DisentanglerFamilySpec,
    DistillConfig,
    Standardizer,
    build_decomposition,
    decompose,
    distill,
    distill_features,
    export_decomposition,
    load_decomposition,
    residual_curve,
    significance,
    weighted_complexity_order,
)
from fcx.errors import DegenerateFeature, EmptyInput, ShapeMismatch, ValidationError
from fcx.zoo import build_task_net, build_teacher

SMALL = DisentanglerFamilySpec((1, 2), 1.0, (4, 4, 4))


@pytest.fixture(scope="module")
def small_family():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(24, 1, 8, 8))
    teacher = build_task_net(3, 5, (1, 8, 8), (4, 4, 4), width=4)
    f = teacher(x)
    fam = distill_features(f, x, SMALL, DistillConfig(epochs=4, batch_size=8, seed=1))
    return x, f, fam


# --- decomposition identities ------------------------------------------------------

def test_perfect_shallow_fit(rng):
    f = rng.normal(size=(5, 2, 3, 3))
    dec = build_decomposition([4, 7], np.stack([f, f]), f)
    np.testing.assert_allclose(dec.components[0], f, rtol=0, atol=2.0 ** -40)
    assert not dec.components[1].any() and not dec.residual.any()


def test_component_is_difference(rng):
    A, B = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    A, B = np.round(A, 3), np.round(B, 3)
    dec = build_decomposition([4, 7], np.stack([A, A + B]), A + B)
    np.testing.assert_allclose(dec.components[1], B, atol=1e-12)


@given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 10 ** 6),
       st.floats(1e-6, 1e6))
def test_telescoping_is_exact(L, n, seed, scale):
    r = np.random.default_rng(seed)
    phi = r.normal(size=(L, n, 3, 2, 2)) * scale
    f = r.normal(size=(n, 3, 2, 2)) * scale
    dec = build_decomposition(list(range(4, 4 + 3 * L, 3)), phi, f)
    total = np.zeros_like(f)
    for c in dec.components:
        total = total + c
    assert np.array_equal(total + dec.residual, dec.feature)
    assert np.array_equal(dec.telescoped(), dec.feature)
    # any order of summation gives the same bits
    rev = dec.residual
    for c in dec.components[::-1]:
        rev = rev + c
    assert np.array_equal(rev, dec.feature)


def test_telescoping_on_trained_family(small_family):
    x, f, fam = small_family
    dec = decompose(fam, f, x)
    assert np.array_equal(dec.telescoped() - dec.feature, np.zeros_like(dec.feature))


def test_decompose_shape_mismatch(small_family):
    x, f, fam = small_family
    with pytest.raises(ShapeMismatch):
        decompose(fam, f[:, :2], x)


# --- significance ---------------------------------------------------------------------

def test_significance_single_component(rng):
    f = rng.normal(size=(6, 4))
    st_ = significance(build_decomposition([4, 7], np.stack([f, f]), f))
    assert st_.rho == [1.0, 0.0] and st_.var_residual == 0.0


def test_significance_hand_case():
    # two samples, scalar feature f = [0, 4]; phi4 = [1, 2], phi7 = [0, 3]
    f = np.array([[0.0], [4.0]])
    phi = np.array([[[1.0], [2.0]], [[0.0], [3.0]]])
    st_ = significance(build_decomposition([4, 7], phi, f))
    # Var f = 4; c1 = [1, 2] -> 0.25; c2 = [-1, 1] -> 1; residual [0, 1] -> 0.25
    assert st_.var_feature == 4.0
    assert abs(st_.rho[0] - 0.0625) < 1e-12
    assert abs(st_.rho[1] - 0.25) < 1e-12
    assert abs(st_.residual_share - 0.0625) < 1e-12
    assert abs(weighted_complexity_order(st_) - (4 * 0.0625 + 7 * 0.25) / 0.3125) < 1e-12


@settings(max_examples=25)
@given(hnp.arrays(np.float64, (3, 5, 2), elements=st.floats(-10, 10)),
       st.sampled_from([1e-3, 0.5, 7.0, 2.0 ** 10]))
def test_rho_is_scale_invariant(stack, s):
    phi, f = stack[:2], stack[2]
    if variance_of(f) < 1e-6:
        return
    a = significance(build_decomposition([4, 7], phi, f))
    b = significance(build_decomposition([4, 7], phi * s, f * s))
    np.testing.assert_allclose(a.rho, b.rho, rtol=1e-9, atol=1e-12)
    assert all(r >= 0 for r in a.rho)


def test_significance_errors():
    f = np.ones((4, 3))
    with pytest.raises(DegenerateFeature):
        significance(build_decomposition([4], f[None], f))
    with pytest.raises(EmptyInput):
        significance(build_decomposition([4], f[None, :1], f[:1]))


def test_residual_curve_perfect_and_single(rng):
    f = rng.normal(size=(5, 3))
    curve = residual_curve(build_decomposition([4, 7], np.stack([f, f]), f))
    assert curve == [(4, 0.0), (7, 0.0)]
    assert len(residual_curve(build_decomposition([4], f[None] * 0, f))) == 1


# --- training -------------------------------------------------------------------------

def test_distill_requires_frozen_teacher(rng):
    t = build_teacher("small-conv", 1, (1, 8, 8), num_classes=2, widths=(2, 2, 2))
    with pytest.raises(ValidationError):
        distill(t, SMALL, rng.normal(size=(2, 1, 8, 8)))


def test_distill_makes_progress(small_family):
    _, _, fam = small_family
    assert all(fin <= init for init, fin in zip(fam.init_loss, fam.final_loss))
    assert all(net.frozen for net in fam.nets)


def test_distill_is_bit_reproducible(small_family):
    x, f, fam = small_family
    again = distill_features(f, x, SMALL, DistillConfig(epochs=4, batch_size=8, seed=1))
    for a, b in zip(fam.nets, again.nets):
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_depths_train_independently(small_family):
    x, f, fam = small_family
    one = distill_features(f, x, DisentanglerFamilySpec((2,), 1.0, (4, 4, 4)),
                           DistillConfig(epochs=4, batch_size=8, seed=1))
    net = one.nets[0]
    assert all(net.params[k].tobytes() == fam.nets[1].params[k].tobytes() for k in net.params)


def test_threads_do_not_change_results(small_family, monkeypatch):
    x, f, fam = small_family
    monkeypatch.setenv("FCX_THREADS", "2")
    again = distill_features(f, x, SMALL, DistillConfig(epochs=4, batch_size=8, seed=1))
    for a, b in zip(fam.nets, again.nets):
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_memorises_repeated_sample(rng):
    x = np.repeat(rng.normal(size=(1, 1, 8, 8)), 8, axis=0)
    f = np.repeat(rng.normal(size=(1, 2, 4, 4)), 8, axis=0)
    fam = distill_features(f, x, DisentanglerFamilySpec((1,), 1.0, (4, 4, 4)),
                           DistillConfig(epochs=300, batch_size=8, lr=1e-2, standardize=False))
    assert fam.final_loss[0] < 1e-4 * max(1.0, float(np.mean(f ** 2)))


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_target_is_fit(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(16, 1, 8, 8))
    f = build_task_net(0, seed, (1, 8, 8), (4, 4, 4), width=4)(x)
    cfg = DistillConfig(epochs=1500, batch_size=16, lr=5e-3, seed=seed, tol=1e-9,
                        patience=10 ** 6)
    fam = distill_features(f, x, DisentanglerFamilySpec((1,), 1.0, (16, 16, 16)), cfg)
    [(_, ratio)] = residual_curve(decompose(fam, f, x))
    assert ratio < 1e-3


def test_standardizer_round_trip(rng):
    f = rng.normal(3.0, 2.0, size=(10, 3, 2, 2))
    s = Standardizer.fit(f)
    z = s.apply(f)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(0, 2, 3)), 1, atol=1e-12)
    np.testing.assert_allclose(s.invert(z), f, atol=1e-12)
    flat = Standardizer.fit(np.ones((4, 2)))
    assert np.all(flat.std == 1.0)


def test_family_spec_validation():
    assert DisentanglerFamilySpec.from_depths([4, 7, 13]).m_values == (1, 2, 4)
    with pytest.raises(ValidationError):
        DisentanglerFamilySpec((2, 1))


def test_export_round_trip(small_family, tmp_path):
    x, f, fam = small_family
    dec = decompose(fam, f, x, dataset_id="abc")
    p1 = export_decomposition(dec, tmp_path / "d.ckpt")
    back = load_decomposition(p1)
    assert back.dataset_id == "abc" and back.depths == dec.depths
    np.testing.assert_allclose(back.phi, dec.phi, rtol=1e-6, atol=1e-6)
    assert np.array_equal(back.telescoped(), back.feature)
    p2 = export_decomposition(back, tmp_path / "e.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
