import numpy as np
import pytest

from segmilcbm import milmodel
from segmilcbm.errors import ConfigError, SchemaError
from segmilcbm.milmodel import ModelParams


def matmul_oracle(H, W):
    """Naive triple loop: out[i, c] = sum_d H[i, d] * W[c, d]."""
    n, d = H.shape
    c = W.shape[0]
    out = np.zeros((n, c))
    for i in range(n):
        for j in range(c):
            s = 0.0
            for k in range(d):
                s += H[i, k] * W[j, k]
            out[i, j] = s
    return out


def linear_params(att_score, w_cls=None, num_concepts=2, T=1.0):
    D = len(att_score)
    w_c = np.eye(num_concepts, D)
    if w_cls is None:
        w_cls = np.eye(2, num_concepts)
    return ModelParams(
        w_c=w_c,
        att_hidden=None,
        att_score=np.asarray(att_score, dtype=float),
        w_cls=np.asarray(w_cls, dtype=float),
        b_cls=np.zeros(w_cls.shape[0]),
        temperature=T,
        attention="linear",
    )


def test_concept_project_identity():
    params = milmodel.init_params(num_classes=2, dim=3, num_concepts=3, seed=0)
    params.w_c = np.eye(3)
    H = np.random.default_rng(0).normal(size=(4, 3))
    assert np.allclose(milmodel.concept_project(params, H), H)


def test_concept_project_zero():
    params = milmodel.init_params(num_classes=2, dim=3, num_concepts=5, seed=0)
    assert np.allclose(milmodel.concept_project(params, np.zeros((2, 3))), 0.0)


def test_concept_project_matches_triple_loop():
    rng = np.random.default_rng(42)
    H = rng.normal(size=(2, 3))
    W = rng.normal(size=(4, 3))
    params = milmodel.init_params(num_classes=2, dim=3, num_concepts=4, seed=0)
    params.w_c = W
    assert np.allclose(milmodel.concept_project(params, H), matmul_oracle(H, W), atol=1e-12)


def test_concept_project_shape_mismatch():
    params = milmodel.init_params(num_classes=2, dim=3, num_concepts=4, seed=0)
    with pytest.raises(SchemaError):
        milmodel.concept_project(params, np.zeros((2, 5)))


def test_normalize_rows_examples():
    out = milmodel.normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]]))
    assert np.allclose(out[0], [0.6, 0.8])
    assert np.array_equal(out[1], [0.0, 0.0])
    assert np.array_equal(out[2], [1.0, 0.0])


def test_normalize_rows_tiny_norm_maps_to_zero():
    out = milmodel.normalize_rows(np.array([[1e-13, 0.0]]))
    assert np.array_equal(out, [[0.0, 0.0]])


def test_attention_uniform_when_scores_equal():
    params = linear_params([1.0, 0.0])
    H = np.tile([[2.0, 5.0]], (4, 1))
    assert np.allclose(milmodel.attention_weights(params, H), 0.25)


def test_attention_closed_form_two_thirds():
    params = linear_params([1.0])
    H = np.array([[np.log(2.0)], [0.0]])
    alpha = milmodel.attention_weights(params, H)
    assert np.allclose(alpha, [2 / 3, 1 / 3])


def test_attention_shift_invariance():
    rng = np.random.default_rng(1)
    params = linear_params([1.0])
    e = rng.normal(size=5)
    base = milmodel.attention_weights(params, e[:, None])
    shifted = milmodel.attention_weights(params, (e + 123.4)[:, None])
    assert np.allclose(base, shifted, atol=1e-12)


def test_attention_sums_to_one_for_random_params():
    rng = np.random.default_rng(2)
    for kind in ("mlp", "linear", "uniform"):
        params = milmodel.init_params(
            num_classes=3, dim=6, num_concepts=4, attention=kind, attention_hidden=8, seed=3
        )
        for _ in range(50):
            H = rng.normal(size=(int(rng.integers(1, 6)), 6)) * 10
            alpha = milmodel.attention_weights(params, H)
            assert abs(alpha.sum() - 1.0) < 1e-9
            assert np.all(alpha >= 0)


def test_temperature_limits():
    params = linear_params([1.0])
    H = np.array([[3.0], [1.0], [2.0]])
    hot = ModelParams(**{**params.__dict__, "temperature": 1e12})
    assert np.allclose(milmodel.attention_weights(hot, H), 1 / 3, atol=1e-9)
    cold = ModelParams(**{**params.__dict__, "temperature": 1e-4})
    alpha = milmodel.attention_weights(cold, H)
    assert np.allclose(alpha, [1.0, 0.0, 0.0], atol=1e-6)


def test_forward_single_instance():
    params = milmodel.init_params(num_classes=2, dim=3, num_concepts=4, seed=5)
    H = np.random.default_rng(3).normal(size=(1, 3))
    trace = milmodel.forward(params, H)
    assert np.allclose(trace.alpha, [1.0])
    assert np.allclose(trace.c_agg, trace.z_hat[0])


def test_forward_permutation_equivariance_and_invariance():
    rng = np.random.default_rng(4)
    params = milmodel.init_params(num_classes=3, dim=5, num_concepts=4, seed=6)
    H = rng.normal(size=(6, 5))
    perm = rng.permutation(6)
    base = milmodel.forward(params, H)
    shuffled = milmodel.forward(params, H[perm])
    assert np.allclose(shuffled.logits, base.logits, atol=1e-9)
    assert np.allclose(shuffled.c_agg, base.c_agg, atol=1e-9)
    assert np.allclose(shuffled.alpha, base.alpha[perm], atol=1e-12)
    assert np.allclose(shuffled.z, base.z[perm], atol=1e-12)


def test_forward_replicating_every_instance_preserves_aggregate():
    # Copies of an instance share its attention score, so k-fold replication
    # of the whole bag splits each alpha_i into k equal parts and the
    # weighted sum of identical normalized rows is unchanged.
    rng = np.random.default_rng(5)
    params = milmodel.init_params(num_classes=2, dim=4, num_concepts=3, seed=7)
    H = rng.normal(size=(3, 4))
    base = milmodel.forward(params, H)
    for k in (2, 5):
        rep = milmodel.forward(params, np.repeat(H, k, axis=0))
        assert np.allclose(rep.c_agg, base.c_agg, atol=1e-12)
        assert np.allclose(rep.logits, base.logits, atol=1e-12)


def test_forward_duplicated_single_instance_bag():
    rng = np.random.default_rng(6)
    params = milmodel.init_params(num_classes=2, dim=4, num_concepts=3, seed=8)
    H = rng.normal(size=(1, 4))
    base = milmodel.forward(params, H)
    dup = milmodel.forward(params, np.tile(H, (4, 1)))
    assert np.allclose(dup.c_agg, base.c_agg, atol=1e-12)
    assert np.allclose(dup.logits, base.logits, atol=1e-12)


def test_logits_depend_on_H_only_through_zhat_and_alpha():
    # Two different embedding matrices that produce the same normalized
    # activations and the same attention weights give identical logits.
    params = linear_params([0.0, 0.0], num_concepts=2)
    H1 = np.array([[1.0, 0.0], [0.0, 2.0]])
    H2 = np.array([[5.0, 0.0], [0.0, 7.0]])  # same directions, same (zero) scores
    t1 = milmodel.forward(params, H1)
    t2 = milmodel.forward(params, H2)
    assert np.allclose(t1.z_hat, t2.z_hat)
    assert np.allclose(t1.alpha, t2.alpha)
    assert np.allclose(t1.logits, t2.logits)


def test_raw_aggregation_mode_uses_unnormalized_rows():
    params = linear_params([0.0, 0.0], num_concepts=2)
    params.aggregate_normalized = False
    H = np.array([[3.0, 0.0], [0.0, 4.0]])
    trace = milmodel.forward(params, H)
    assert np.allclose(trace.c_agg, [1.5, 2.0])


def test_explain_orders_instances_by_alpha():
    params = linear_params([1.0], num_concepts=2)
    H = np.array([[np.log(9.0)], [0.0]])
    trace = milmodel.forward(params, H)
    record = milmodel.explain(trace, ["c0", "c1"], top_m=1)
    assert record["instances"][0]["alpha"] == pytest.approx(0.9)
    assert record["instances"][0]["instance"] == 0


def test_explain_full_ranking_and_ties():
    params = milmodel.init_params(num_classes=2, dim=3, num_concepts=3, seed=9)
    params.w_c = np.eye(3)
    H = np.array([[0.5, 0.5, 0.0]])
    trace = milmodel.forward(params, H)
    record = milmodel.explain(trace, ["a", "b", "c"], top_m=3)
    names = [n for n, _ in record["instances"][0]["top_concepts"]]
    assert names == ["a", "b", "c"]  # tie between a and b broken by id


def test_explain_zero_row_yields_empty_concepts():
    params = milmodel.init_params(num_classes=2, dim=2, num_concepts=2, seed=10)
    params.w_c = np.array([[1.0, 0.0], [0.0, 1.0]])
    H = np.array([[0.0, 0.0], [1.0, 1.0]])
    trace = milmodel.forward(params, H)
    record = milmodel.explain(trace, ["a", "b"], top_m=2)
    zero_entries = [r for r in record["instances"] if r["instance"] == 0]
    assert zero_entries[0]["top_concepts"] == []


def test_explain_top_m_out_of_range():
    params = milmodel.init_params(num_classes=2, dim=2, num_concepts=2, seed=11)
    trace = milmodel.forward(params, np.ones((1, 2)))
    with pytest.raises(ConfigError):
        milmodel.explain(trace, ["a", "b"], top_m=3)


def test_init_params_is_seed_deterministic_and_validates():
    a = milmodel.init_params(num_classes=2, dim=4, num_concepts=3, seed=13)
    b = milmodel.init_params(num_classes=2, dim=4, num_concepts=3, seed=13)
    for (_, x), (_, y) in zip(a.tensor_items(), b.tensor_items()):
        assert np.array_equal(x, y)
    c = milmodel.init_params(num_classes=2, dim=4, num_concepts=3, seed=14)
    assert not np.array_equal(a.w_c, c.w_c)
    milmodel.validate_params(a)


def test_validate_params_rejects_bad_temperature():
    params = milmodel.init_params(num_classes=2, dim=2, num_concepts=2, seed=0)
    params.temperature = 0.0
    with pytest.raises(ConfigError):
        milmodel.validate_params(params)
