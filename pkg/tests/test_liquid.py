import math

import numpy as np
import pytest

from ltfe import diffcore as dc
from ltfe.errors import DomainError, NumericalError, ShapeError
from ltfe.liquid import (KernelState, OdeConfig, VectorFieldParams, adjust_feature, evolve_kernels,
                         horizon, rk4_solve)
from ltfe.temporal import TemporalEncoding
from oracles import conv2d_loops, rk4_scalar


def encoding(vectors):
    ts = [dc.tensor(np.asarray(v, dtype=float)) for v in vectors]
    return TemporalEncoding(ts, ts, ts)


def decay(w, h):
    return -w


@pytest.fixture
def field(rng):
    vf = VectorFieldParams.init(3 * 3 * 2 * 2, 4, 6, rng)
    # a non-zero output layer so the field actually moves the kernel
    return VectorFieldParams(**{**{n: t.data for n, t in vf.tensors().items()},
                                "w_out": 0.1 * rng.standard_normal((6, 36)),
                                "b_out": 0.05 * rng.standard_normal(36)})


class TestHorizon:
    def test_examples(self):
        enc = encoding([[2.0, 0.0], [0.0, 4.0], [1.0, 0.0]])
        assert horizon(enc, 2).item() == 1.0
        assert horizon(enc, 1).item() == 0.5
        assert horizon(enc, 3).item() == 0.25

    def test_all_zero(self):
        enc = encoding(np.zeros((4, 3)))
        assert all(horizon(enc, t).item() == 0.0 for t in range(1, 5))

    def test_bounds(self, rng):
        for _ in range(200):
            t_len = int(rng.integers(1, 6))
            enc = encoding(np.abs(rng.standard_normal((t_len, 3))) * rng.uniform(0, 5))
            taus = [horizon(enc, t).item() for t in range(1, t_len + 1)]
            assert all(0.0 <= x <= 1.0 for x in taus)
            assert max(taus) == 1.0

    @pytest.mark.parametrize("t", [0, 4])
    def test_step_range(self, t):
        with pytest.raises(DomainError):
            horizon(encoding(np.ones((3, 2))), t)


class TestRk4:
    def test_zero_horizon(self, rng, field):
        w0 = KernelState(rng.standard_normal((3, 3, 2, 2)))
        out = rk4_solve(field, w0, np.ones(4), 0.0)
        assert out.weights.data.tobytes() == w0.weights.data.tobytes()

    def test_exponential_decay(self):
        out = rk4_solve(decay, np.array([1.0]), None, 1.0, OdeConfig(steps=10))
        assert abs(out.data[0] - math.exp(-1)) < 1e-6
        assert out.data[0] == rk4_scalar(lambda y: -y, 1.0, 1.0, 10)

    def test_order(self):
        errs = [abs(rk4_solve(decay, np.array([1.0]), None, 1.0, OdeConfig(steps=n)).data[0] - math.exp(-1))
                for n in (10, 20, 40, 80)]
        ratios = [a / b for a, b in zip(errs, errs[1:])]
        assert all(12 <= r <= 20 for r in ratios)
        orders = [math.log2(r) for r in ratios]
        assert all(abs(p - 4.0) <= 0.3 for p in orders)

    def test_tau_range(self, field):
        w0 = KernelState.zeros(3, 2, 2)
        for tau in (-0.1, 1.5):
            with pytest.raises(DomainError):
                rk4_solve(field, w0, np.ones(4), tau)

    def test_blow_up(self):
        with pytest.raises(NumericalError):
            rk4_solve(lambda w, h: w * w * 1e200, np.array([1e200]), None, 1.0)

    def test_config_validation(self):
        with pytest.raises(DomainError):
            OdeConfig(steps=0)
        with pytest.raises(DomainError):
            OdeConfig(eps_norm=0.0)


class TestAdjust:
    def test_zero_kernel(self, rng):
        f0 = rng.standard_normal((5, 5, 2))
        np.testing.assert_array_equal(adjust_feature(f0, KernelState.zeros(3, 2, 2)).data, f0)

    def test_identity_kernel(self, rng):
        f0 = rng.standard_normal((5, 5, 2))
        np.testing.assert_array_equal(adjust_feature(f0, KernelState.identity(3, 2)).data, 2 * f0)

    @pytest.mark.parametrize("padding", ["circular", "reflect"])
    def test_conv_oracle(self, rng, padding):
        f0 = rng.standard_normal((6, 5, 2))
        w = rng.standard_normal((3, 3, 2, 2))
        out = adjust_feature(f0, KernelState(w), padding).data
        np.testing.assert_allclose(out, conv2d_loops(f0, w, padding) + f0, rtol=0, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            adjust_feature(np.zeros((4, 4, 3)), KernelState.zeros(3, 2, 2))

    def test_kernel_validation(self):
        with pytest.raises(ShapeError):
            KernelState(np.zeros((2, 2, 1, 1)))
        with pytest.raises(NumericalError):
            KernelState(np.full((1, 1, 1, 1), np.inf))


class TestEvolveKernels:
    def test_zero_field(self, rng):
        vf = VectorFieldParams.init(36, 4, 6, rng)
        w0 = KernelState(rng.standard_normal((3, 3, 2, 2)))
        enc = encoding(np.abs(rng.standard_normal((3, 4))))
        ks = evolve_kernels(enc, vf, w0)
        assert len(ks) == 3
        assert all(k.weights.data.tobytes() == w0.weights.data.tobytes() for k in ks)
        f0 = rng.standard_normal((5, 5, 2))
        ref = dc.conv2d(f0, w0.weights) + f0
        assert all(adjust_feature(f0, k).data.tobytes() == ref.data.tobytes() for k in ks)

    def test_single_step(self, rng, field):
        w0 = KernelState.identity(3, 2, 0.1)
        enc = encoding([np.abs(rng.standard_normal(4))])
        (k,) = evolve_kernels(enc, field, w0)
        ref = rk4_solve(field, w0, enc.encodings[0], 1.0)
        assert k.weights.data.tobytes() == ref.weights.data.tobytes()

    def test_compositional_and_restart(self, rng, field):
        w0 = KernelState.identity(3, 2, 0.1)
        enc = encoding(np.abs(rng.standard_normal((3, 4))))
        ks = evolve_kernels(enc, field, w0)
        for t in (3, 1, 2):
            ref = rk4_solve(field, w0, enc.encodings[t - 1], horizon(enc, t), OdeConfig())
            assert ks[t - 1].weights.data.tobytes() == ref.weights.data.tobytes()
        assert len({k.weights.data.tobytes() for k in ks}) == 3

    def test_grad_check(self, rng, field):
        cfg = OdeConfig(steps=2)
        f0 = rng.standard_normal((6, 6, 2))
        enc_raw = np.abs(rng.standard_normal((3, 4)))
        names = list(field.tensors())

        def loss(ts):
            vf = VectorFieldParams(**dict(zip(names, ts[:5])))
            enc = encoding([])
            enc = TemporalEncoding([ts[6 + i] for i in range(3)], [], [])
            ks = evolve_kernels(enc, vf, KernelState(ts[5]), cfg)
            return dc.sum(dc.tanh(adjust_feature(ts[9], ks[1])))

        start = [t.data for t in field.tensors().values()] + \
                [0.1 * rng.standard_normal((3, 3, 2, 2))] + list(enc_raw) + [f0]
        assert dc.grad_check(loss, start) < 1e-4
