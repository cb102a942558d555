import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quiet import diff as D
from quiet import qcore
from quiet.diff import Tensor
from quiet.errors import ContractError, DimensionError
from quiet.layers import (ComplexTensor, EncoderParams, FusionConfig, GruParams, MeasurementBank,
                          compose_density, contextualize, encode_modality, fuse, fuse_trimodal,
                          gru_step, incompatibility_report, init_phase, interfere, measure,
                          mixture_weights)

seeds = st.integers(0, 2**32 - 1)


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def complex_oracle(f_a, f_b, cos_phi, alpha_sq):
    phi = np.arccos(cos_phi)
    z_a = np.sqrt(f_a).astype(complex)
    z_b = np.sqrt(f_b) * np.exp(1j * phi)
    return np.abs(np.sqrt(alpha_sq) * z_a + np.sqrt(1 - alpha_sq) * z_b) ** 2


# -- phases and encoder -------------------------------------------------------------


@given(seeds, st.integers(1, 64))
def test_phase_half_planes(seed, dim):
    pos, neg, neu = (init_phase(p, dim, seed) for p in (1, -1, 0))
    assert np.all((pos > 0) & (pos < np.pi))
    assert np.all((neg > -np.pi) & (neg < 0))
    assert np.all((neu > -np.pi) & (neu < np.pi))


def test_phase_deterministic():
    np.testing.assert_array_equal(init_phase(1, 16, 3), init_phase(1, 16, 3))


def identity_encoder(d, phase=0.0):
    return EncoderParams(Tensor(np.eye(d), True), Tensor(np.zeros(d), True),
                         Tensor(np.full((3, d), phase), True))


def test_encoder_345():
    z = encode_modality(np.array([3.0, 4.0]), identity_encoder(2))
    np.testing.assert_allclose(z.re.value, [0.6, 0.8], atol=1e-12)
    np.testing.assert_allclose(z.im.value, [0.0, 0.0], atol=1e-12)


@given(seeds, st.integers(1, 12), st.integers(1, 12), st.sampled_from([-1, 0, 1]))
def test_encoder_states_are_normalized(seed, d_in, d_e, prior):
    rng = np.random.default_rng(seed)
    enc = EncoderParams.init(d_in, d_e, rng)
    enc.phase.value = rng.uniform(-10, 10, size=enc.phase.shape)
    z = encode_modality(rng.normal(size=d_in) * rng.uniform(0, 100), enc, prior)
    assert abs(qcore.born_probabilities(z.to_vector()).sum() - 1.0) <= 1e-9


def test_encoder_zero_input_is_uniform():
    enc = EncoderParams.init(5, 4, np.random.default_rng(0))
    z = encode_modality(np.zeros(5), enc)
    r2 = z.re.value ** 2 + z.im.value ** 2
    np.testing.assert_allclose(r2, np.full(4, 0.25), atol=1e-12)
    assert abs(r2.sum() - 1.0) <= 1e-9


def test_encoder_prior_selects_phase_row():
    enc = identity_encoder(2)
    enc.phase.value = np.array([[-1.0, -1.0], [0.0, 0.0], [1.0, 1.0]])
    x = np.array([[[3.0, 4.0], [3.0, 4.0]]])
    z = encode_modality(x, enc, np.array([[-1, 1]]))
    np.testing.assert_allclose(z.im.value[0, 0], np.array([0.6, 0.8]) * math.sin(-1.0), atol=1e-12)
    np.testing.assert_allclose(z.im.value[0, 1], np.array([0.6, 0.8]) * math.sin(1.0), atol=1e-12)


def test_encoder_dim_mismatch():
    with pytest.raises(DimensionError):
        encode_modality(np.ones(3), identity_encoder(2))


# -- recurrent cell -----------------------------------------------------------------


def test_gru_zero_weights():
    p = GruParams.zeros(6, 4)
    u = np.random.default_rng(0).normal(size=6)
    np.testing.assert_array_equal(gru_step(np.zeros(4), u, p).value, np.zeros(4))
    v = np.array([0.4, -0.2, 0.9, -0.7])
    np.testing.assert_allclose(gru_step(v, u, p).value, 0.5 * v, rtol=1e-15)


@given(seeds, st.floats(0.1, 20.0))
def test_gru_stays_in_cube(seed, scale):
    rng = np.random.default_rng(seed)
    p = GruParams.init(6, 5, rng)
    for t in p.tensors():
        t.value = t.value * scale
    h = rng.uniform(-0.999, 0.999, size=5)
    out = gru_step(h, scale * rng.normal(size=6), p).value
    # tanh rounds to exactly 1.0 once saturated, so the open bound needs moderate weights
    assert np.all(np.abs(out) <= 1.0)
    if scale <= 3.0:
        assert np.all(np.abs(out) < 1.0)


def random_states(rng, B, L, d):
    return ComplexTensor(Tensor(rng.normal(size=(B, L, d))), Tensor(rng.normal(size=(B, L, d))))


def test_contextualize_single_step_is_unit():
    rng = np.random.default_rng(1)
    h = contextualize(random_states(rng, 2, 1, 3), GruParams.init(6, 4, rng)).value
    assert h.shape == (2, 1, 4)
    np.testing.assert_allclose(np.linalg.norm(h, axis=-1), 1.0, atol=1e-12)


def test_contextualize_zero_weights_hits_floor():
    rng = np.random.default_rng(2)
    h = contextualize(random_states(rng, 1, 3, 3), GruParams.zeros(6, 4)).value
    assert np.all(np.isfinite(h))
    np.testing.assert_array_equal(h, np.zeros((1, 3, 4)))


def test_contextualize_deterministic():
    rng = np.random.default_rng(3)
    s, p = random_states(rng, 2, 3, 3), GruParams.init(6, 4, rng)
    assert np.array_equal(contextualize(s, p).value, contextualize(s, p).value)


def test_left_padding_matches_unpadded_run():
    rng = np.random.default_rng(4)
    p = GruParams.init(6, 4, rng)
    short = random_states(rng, 1, 2, 3)
    pad = ComplexTensor(Tensor(np.concatenate([np.zeros((1, 1, 3)), short.re.value], axis=1)),
                        Tensor(np.concatenate([np.zeros((1, 1, 3)), short.im.value], axis=1)))
    mask = np.array([[False, True, True]])
    np.testing.assert_allclose(contextualize(pad, p, mask).value[:, 1:], contextualize(short, p).value,
                               atol=1e-15)


# -- density composition ------------------------------------------------------------


def test_pure_state_density():
    h = unit_rows(np.random.default_rng(5), 1, 4)
    rho = compose_density(Tensor(h[None]), Tensor(np.zeros(4))).value[0]
    np.testing.assert_allclose(rho, np.outer(h[0], h[0]), atol=1e-15)
    assert abs(np.trace(rho) - 1.0) <= 1e-12


def test_uniform_mixture_of_orthogonal_states():
    hs = Tensor(np.eye(3)[None, :2])
    rho = compose_density(hs, Tensor(np.zeros(4))).value[0]
    np.testing.assert_allclose(rho, np.diag([0.5, 0.5, 0.0]), atol=1e-15)


@given(seeds, st.integers(1, 4), st.integers(2, 10))
@settings(max_examples=50)
def test_density_invariants(seed, L, d):
    rng = np.random.default_rng(seed)
    hs = unit_rows(rng, L, d)[None]
    rho = compose_density(Tensor(hs), Tensor(rng.normal(size=4) * 3)).value[0]
    assert qcore.DensityMatrix(rho).violations() == []


def test_mixture_ignores_padding():
    mask = np.array([[False, False, True, True], [True, True, True, True]])
    w = mixture_weights(Tensor(np.array([0.3, -0.2, 1.0, 0.5])), mask).value
    assert w[0, 0] == 0 and w[0, 1] == 0
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-15)
    e = np.exp([1.0, 0.5])
    np.testing.assert_allclose(w[0, 2:], e / e.sum(), atol=1e-15)


def test_mixture_too_long_sequence():
    with pytest.raises(DimensionError):
        mixture_weights(Tensor(np.zeros(2)), np.ones((1, 3), bool))


# -- interference fusion ------------------------------------------------------------


def test_interfere_absent_path():
    for c in (-1.0, -0.3, 0.0, 0.8):
        out = interfere(np.array([1.0]), np.array([0.0]), FusionConfig(cos_phi=c))
        assert out.value[0] == pytest.approx(0.5, abs=1e-15)


def test_interfere_constructive():
    out = interfere(np.array([0.5]), np.array([0.5]), FusionConfig(cos_phi=1.0))
    assert out.value[0] == pytest.approx(1.0, abs=1e-15)


def test_interfere_default_phase():
    out = interfere(np.array([0.5]), np.array([0.5]), FusionConfig())
    assert out.value[0] == pytest.approx(0.35, abs=1e-15)


@given(seeds, st.floats(-1.0, 1.0), st.floats(0.0, 1.0), st.integers(1, 20))
def test_interfere_matches_complex_amplitudes(seed, cos_phi, alpha_sq, n):
    rng = np.random.default_rng(seed)
    f_a, f_b = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    got = interfere(f_a, f_b, FusionConfig(cos_phi=cos_phi, alpha_sq=alpha_sq)).value
    want = complex_oracle(f_a, f_b, cos_phi, alpha_sq)
    assert np.all(np.abs(got - want) <= 1e-10 * np.maximum(np.abs(want), 1e-300) + 1e-15)


@given(seeds, st.floats(-1.0, 1.0), st.floats(0.0, 1.0))
def test_interfere_symmetry_and_lower_bound(seed, cos_phi, alpha_sq):
    rng = np.random.default_rng(seed)
    f_a, f_b = rng.uniform(0, 1, 8), rng.uniform(0, 1, 8)
    half = FusionConfig(cos_phi=cos_phi)
    np.testing.assert_allclose(interfere(f_a, f_b, half).value, interfere(f_b, f_a, half).value,
                               rtol=1e-14, atol=1e-16)
    cfg = FusionConfig(cos_phi=cos_phi, alpha_sq=alpha_sq)
    bound = (np.sqrt(alpha_sq * f_a) - np.sqrt((1 - alpha_sq) * f_b)) ** 2
    assert np.all(interfere(f_a, f_b, cfg).value >= bound - 1e-14)


def test_interfere_rejects_negative_input():
    with pytest.raises(ContractError):
        interfere(np.array([-0.1]), np.array([0.5]), FusionConfig())


def test_fusion_config_ranges():
    with pytest.raises(ContractError):
        FusionConfig(cos_phi=1.5)
    with pytest.raises(ContractError):
        FusionConfig(alpha_sq=-0.1)
    with pytest.raises(ContractError):
        FusionConfig(mode="sum")


def test_trimodal_identical_pure_states():
    e1 = np.zeros((1, 3, 3))
    e1[0, 0, 0] = 1.0
    rho = Tensor(e1)
    f = fuse_trimodal(rho, rho, rho, FusionConfig()).value[0]
    want = np.zeros(9)
    want[[0, 3, 6]] = 1 / math.sqrt(3)
    np.testing.assert_allclose(f, want, atol=1e-15)


@given(seeds, st.integers(2, 8))
@settings(max_examples=40)
def test_trimodal_zero_phase_equals_concat(seed, d):
    rng = np.random.default_rng(seed)
    rhos = [Tensor(qcore.mix_density(list(unit_rows(rng, 3, d)), rng.dirichlet(np.ones(3))).entries[None])
            for _ in range(3)]
    a = fuse_trimodal(*rhos, FusionConfig(cos_phi=0.0)).value
    b = fuse_trimodal(*rhos, FusionConfig(cos_phi=0.7, mode="concat")).value
    np.testing.assert_allclose(a, b, atol=1e-15)
    f = fuse_trimodal(*rhos, FusionConfig()).value
    assert abs(np.linalg.norm(f) - 1.0) <= 1e-12


def test_fuse_reduced_modality_sets():
    rng = np.random.default_rng(6)
    r = {m: Tensor(qcore.mix_density(list(unit_rows(rng, 2, 4)), [0.3, 0.7]).entries[None])
         for m in ("text", "video", "audio")}
    one = fuse({"audio": r["audio"]}, FusionConfig()).value[0]
    np.testing.assert_allclose(one, np.diag(r["audio"].value[0]) / np.linalg.norm(np.diag(r["audio"].value[0])))
    two = fuse({"text": r["text"], "audio": r["audio"]}, FusionConfig()).value[0]
    pair = interfere(np.diag(r["text"].value[0]), np.diag(r["audio"].value[0]), FusionConfig()).value
    np.testing.assert_allclose(two, pair / np.linalg.norm(pair), atol=1e-15)
    assert fuse(r, FusionConfig()).shape == (1, 12)


def test_trainable_phase_gradient():
    rng = np.random.default_rng(7)
    f_a, f_b = Tensor(rng.uniform(0.1, 1, 5)), Tensor(rng.uniform(0.1, 1, 5))
    c = Tensor(np.array(-0.3), True, "cos_phi")
    err = D.finite_diff_check(lambda: D.sum(D.square(interfere(f_a, f_b, FusionConfig(), c))), [c])
    assert err < 1e-8


# -- measurement --------------------------------------------------------------------


def bank(rows):
    return MeasurementBank("sar", Tensor(np.asarray(rows, dtype=float), True))


def test_measure_basic_projections():
    e1, e2 = np.eye(2)
    assert measure(bank([e1]), e1).value[0] == pytest.approx(1.0)
    assert measure(bank([e2]), e1).value[0] == 0.0
    assert measure(bank([e1 + e2]), e1).value[0] == pytest.approx(0.5, abs=1e-15)


@given(seeds, st.integers(1, 16))
def test_orthonormal_bank_is_complete(seed, d):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    f = unit_rows(rng, 1, d)[0]
    m = measure(bank(Q.T), f).value
    assert abs(m.sum() - 1.0) <= 1e-9
    assert np.all((m >= 0) & (m <= 1 + 1e-12))


@given(seeds)
def test_raw_bank_rows_are_normalized_on_use(seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(7, 5)) * rng.uniform(0.1, 10, size=(7, 1))
    f = unit_rows(rng, 3, 5)
    m = measure(bank(raw), f).value
    assert np.all((m >= 0) & (m <= 1 + 1e-12))


def test_bank_degenerate_row_detected():
    assert bank([[0.0, 0.0], [1.0, 0.0]]).degenerate_rows() == [0]


def test_incompatibility_self_pairs_zero():
    b = MeasurementBank.init("sar", 10, 6, np.random.default_rng(8))
    rep = incompatibility_report(b, b, 50, indexwise=True)
    assert all(p["commutator_norm"] == 0.0 for p in rep["pairs"])
    assert all(abs(p["relative_entropy"]) <= 1e-9 for p in rep["pairs"])


def test_incompatibility_orthogonal_axes_commute():
    rep = incompatibility_report(bank([[1.0, 0, 0]]), bank([[0, 1.0, 0]]), 5)
    assert rep["mean_commutator_norm"] == 0.0 and rep["nonzero_fraction"] == 0.0


def test_incompatibility_random_banks():
    rng = np.random.default_rng(9)
    a = MeasurementBank.init("sar", 40, 8, rng)
    b = MeasurementBank.init("sen", 40, 8, rng)
    rep = incompatibility_report(a, b, 800, rng_seed=1)
    assert rep["pair_count"] == 800 and len(rep["pairs"]) == 800
    assert rep["nonzero_fraction"] >= 0.99
    assert min(p["relative_entropy"] for p in rep["pairs"]) >= -1e-9
    assert rep == incompatibility_report(a, b, 800, rng_seed=1)


# -- per-layer gradient checks ------------------------------------------------------


def test_layer_parameters_pass_gradient_check():
    rng = np.random.default_rng(10)
    enc = EncoderParams.init(5, 3, rng, "enc")
    gru = GruParams.init(6, 3, rng, "gru")
    mix = Tensor(rng.normal(size=4) * 0.1, True, "mix")
    bnk = MeasurementBank.init("sar", 4, 3, rng)
    x = rng.normal(size=(2, 3, 5))
    priors = np.array([[0, 1, -1], [1, 1, 0]])
    mask = np.array([[False, True, True], [True, True, True]])

    def fn():
        z = encode_modality(x, enc, priors)
        h = contextualize(z, gru, mask)
        rho = compose_density(h, mix, mask)
        f = fuse({"text": rho}, FusionConfig())
        return D.sum(D.log(measure(bnk, f) + 0.1))

    params = enc.tensors() + gru.tensors() + [mix, bnk.vectors]
    assert D.finite_diff_check(fn, params) < 1e-4
