"""Shared helpers: central finite differences and small datasets."""

import numpy as np
import pytest

from moegt.data import generate_synthetic, split
from moegt.tensor import Tape, Tensor

FD_STEP = 1e-5

# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


def numeric_grad(f, x: np.ndarray, eps: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``f(x)`` with respect to each entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def tape_grads(build, arrays):
    """Gradients of ``sum(build(*tensors))`` for fresh tensors made from ``arrays``."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*ts)
    return tape.gradient(out, ts)


def check_op_gradient(build, arrays, weights=None, tol=1e-4):
    """Compare reverse-mode and finite-difference gradients of ``sum(w * build(...))``."""
    rng = np.random.default_rng(123)
    with Tape():
        probe = build(*[Tensor(a) for a in arrays]).data
    w = rng.standard_normal(probe.shape) if weights is None else weights

    def scalar(*ts):
        return (build(*ts) * Tensor(w))

    analytic = tape_grads(scalar, arrays)
    for idx, a in enumerate(arrays):
        def f(x, idx=idx):
            args = [Tensor(v) for v in arrays]
            args[idx] = Tensor(x)
            return float((build(*args).data * w).sum())
        num = numeric_grad(f, a)
        err = rel_error(analytic[idx], num)
        assert err < tol, f"input {idx}: relative error {err:.2e}"


@pytest.fixture(scope="session")
def small_events():
    return generate_synthetic(150, 150, seed=11)


@pytest.fixture(scope="session")
def small_split(small_events):
    return split(small_events, (0.8, 0.2), seed=0)


def degenerate_mgt(gt):
    """A 1-expert, top-1 MGT whose attention, norms, head and expert copy the given GT."""
    import dataclasses

    from moegt.models import TransformerModel

    cfg = dataclasses.replace(gt.config, kind="mgt", experts=1, top_k=1, expert_size=gt.config.ffn_size,
                              expert_activation="relu")
    mgt = TransformerModel.init(cfg, np.random.default_rng(0))
    for name, t in mgt.params.items():
        src = name.replace(".experts.0.", ".ffn.")
        if src in gt.params:
            t.data = gt.params[src].data.copy()
    return mgt
