import os
import subprocess
import sys

import numpy as np
import pytest

from segmilcbm import kernels
from segmilcbm.errors import ConfigError
from segmilcbm.kernels import numpy_backend
from segmilcbm.training import backward, pack_bags, prepare_bags

from oracles import finite_difference_grads, max_rel_error, random_instance_case

compiled = pytest.importorskip("segmilcbm.kernels.compiled_backend")


def packed_case(rng, attention, agg_norm, lam):
    params, data, bags = random_instance_case(rng, attention, agg_norm)
    prepared = prepare_bags(bags, with_clip=lam != 0.0)
    packed = pack_bags(prepared, range(len(prepared)))
    return params, data, bags, packed


@pytest.mark.parametrize("attention", ["mlp", "linear", "uniform"])
@pytest.mark.parametrize("agg_norm", [True, False])
def test_compiled_matches_numpy_backend(attention, agg_norm):
    rng = np.random.default_rng([17, int(agg_norm), len(attention)])
    for lam in (0.0, 0.25):
        for _ in range(5):
            params, _, _, packed = packed_case(rng, attention, agg_norm, lam)
            H_all, offsets, clip_all, labels = packed
            (ce_n, cos_n, ok_n), g_n = numpy_backend.batch_backward(
                params, H_all, offsets, clip_all, labels, lam
            )
            (ce_c, cos_c, ok_c), g_c = compiled.batch_backward(
                params, H_all, offsets, clip_all, labels, lam
            )
            assert ce_c == pytest.approx(ce_n, rel=1e-12, abs=1e-12)
            assert cos_c == pytest.approx(cos_n, rel=1e-12, abs=1e-12)
            assert ok_c == ok_n
            assert set(g_c) == set(g_n)
            for name in g_n:
                assert np.allclose(g_c[name], g_n[name], rtol=1e-10, atol=1e-12), name
            logits_n = numpy_backend.forward_many(params, H_all, offsets)
            logits_c = compiled.forward_many(params, H_all, offsets)
            assert np.allclose(logits_c, logits_n, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("attention,agg_norm", [("mlp", True), ("linear", False)])
def test_compiled_gradients_match_finite_differences(attention, agg_norm):
    rng = np.random.default_rng(321)
    params, data, bags = random_instance_case(rng, attention, agg_norm)
    _, grads = backward(params, bags, lambda_concept=0.3, backend=compiled)
    fd = finite_difference_grads(params, data, 0.3)
    for name, g in grads.tensors.items():
        assert max_rel_error(g, fd[name]) < 1e-4


def test_zero_lambda_never_touches_clip_in_compiled_kernel():
    rng = np.random.default_rng(7)
    params, _, _, packed = packed_case(rng, "mlp", True, 0.0)
    H_all, offsets, _, labels = packed
    (_, cos_sum, _), _ = compiled.batch_backward(params, H_all, offsets, None, labels, 0.0)
    assert cos_sum == 0.0


def test_backend_selection_env_and_name():
    assert kernels.get_backend("numpy").NAME == "numpy"
    assert kernels.get_backend("compiled").NAME == "compiled"
    assert kernels.get_backend("auto").NAME in ("numpy", "compiled")
    with pytest.raises(ConfigError):
        kernels.get_backend("gpu")


def test_env_var_forces_numpy_fallback():
    code = (
        "from segmilcbm.kernels import get_backend; print(get_backend('auto').NAME)"
    )
    env = dict(os.environ, SEGMILCBM_KERNEL="numpy")
    out = subprocess.run(
        [sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True
    )
    assert out.stdout.strip() == "numpy"
