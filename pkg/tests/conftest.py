from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lpa import tensor as tc
from lpa.denoiser import ArchConfig, Denoiser

settings.register_profile("lpa", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lpa")


def rel_err(a, n, floor: float = 1e-7) -> float:
    a, n = np.asarray(a, dtype=float), np.asarray(n, dtype=float)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numeric_grad(f, arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of scalar f() w.r.t. arr[index], restoring the entry afterwards."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def fd_check(build, inputs: list[tc.Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients over all inputs.

    ``build(*inputs)`` returns a Tensor; it is reduced to a scalar by a fixed
    random projection so every output entry contributes.
    """
    out = build(*inputs)
    proj = np.random.default_rng(123).standard_normal(out.shape)

    def scalar(result):
        return float((result.data * proj).sum())

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = build(*inputs)
    out.backward(proj)
    worst = 0.0
    for t in inputs:
        num = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = num.reshape(-1)
        for i in range(flat.size):
            gflat[i] = numeric_grad(lambda: scalar(build(*inputs)), flat, i, h)
        worst = max(worst, rel_err(t.grad, num))
    return worst


# (name, build, input shapes) for every differentiable kernel op
GRAD_OPS = [
    ("add", lambda a, b: tc.add(a, b), [(3, 4), (4,)]),
    ("sub", lambda a, b: tc.sub(a, b), [(3, 4), (3, 4)]),
    ("mul", lambda a, b: tc.mul(a, b), [(2, 3, 4), (3, 1)]),
    ("scale", lambda a: tc.scale(a, -1.7), [(3, 4)]),
    ("batched_matmul", tc.matmul, [(2, 3, 4), (2, 4, 5)]),
    ("linear", tc.linear, [(2, 3, 4), (4, 5), (5,)]),
    ("softmax", lambda a: tc.softmax_rows(a), [(4, 6)]),
    ("softmax_masked", lambda a: tc.softmax_rows(a, np.array([True, False, True, True, False])), [(3, 5)]),
    ("silu", tc.silu, [(3, 5)]),
    ("conv_s1", lambda x, w, b: tc.conv2d(x, w, b), [(2, 5, 4, 3), (3, 3, 3, 2), (2,)]),
    ("conv_s2", lambda x, w, b: tc.conv2d(x, w, b, stride=2), [(2, 6, 5, 2), (3, 3, 2, 3), (3,)]),
    ("group_norm", lambda x, g, b: tc.group_norm(x, g, b, 2), [(2, 3, 3, 4), (4,), (4,)]),
    ("upsample", tc.upsample2x, [(1, 2, 3, 2)]),
    ("concat", lambda a, b: tc.concat([a, b], -1), [(2, 3, 2), (2, 3, 4)]),
    ("reshape", lambda a: tc.reshape(a, (6, 2)), [(3, 4)]),
    ("transpose", lambda a: tc.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    ("mean", tc.mean, [(3, 4)]),
    ("mse", tc.mse, [(3, 4), (3, 4)]),
]

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def random_model() -> Denoiser:
    """Randomly initialised (untrained but non-zero) denoiser."""
    return Denoiser(ArchConfig(), seed=7)
