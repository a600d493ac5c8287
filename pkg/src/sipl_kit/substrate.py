"""Differentiable-computation contract and its verification oracle.

Every learnable piece of the toolkit is built on torch tensors under a fixed
policy: weights live in 32-bit floats, row-major, channel-last for images and
token-major (L x C) for flattened feature blocks. Gradient correctness is not
taken on faith: ``grad_check`` re-runs any differentiable scalar function in
64-bit arithmetic and compares analytic gradients against central finite
differences. ``PRIMITIVES`` is the closed set of primitive ops the models are
allowed to rely on; each entry can synthesize random check cases so the whole
set stays under test.

Determinism contract: single-threaded execution, all randomness derived from
named substreams of one root seed. ``SIPL_KIT_THREADS`` caps internal
parallelism (default 1).
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NonFiniteGradient

DTYPE = torch.float32
CHECK_DTYPE = torch.float64


def thread_cap() -> int:
    raw = os.environ.get("SIPL_KIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def apply_thread_cap() -> int:
    n = thread_cap()
    torch.set_num_threads(n)
    return n


def derive_seed(root_seed: int, stream: str) -> int:
    """Stable 63-bit seed for a named substream of one root seed."""
    digest = hashlib.sha256(f"{root_seed}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def substream_rng(root_seed: int, stream: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, stream)))


def torch_generator(root_seed: int, stream: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(root_seed, stream))
    return g


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class CheckReport:
    """Outcome of one central-difference gradient check."""

    max_rel_err: float
    passed: bool
    tol: float
    eps: float
    per_param: dict = field(default_factory=dict)
    entries_checked: int = 0

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:g}, eps {self.eps:g}, {self.entries_checked} entries)"
        )


# Denominator floor for the relative error. Entries whose analytic and numeric
# gradients are both below this magnitude compare absolutely; without a floor,
# identically-zero gradients would divide finite-difference noise (~1e-12 in
# 64-bit) by itself and spuriously fail.
REL_ERR_FLOOR = 1e-6


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-4,
               max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> CheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is a deterministic scalar-valued callable of no arguments that reads
    the tensors in ``params``; each must be a float64 leaf with
    ``requires_grad=True``. For every checked entry i the numeric gradient is
    (f(p + eps*e_i) - f(p - eps*e_i)) / (2*eps), and the relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR).

    ``max_entries_per_param`` subsamples entry indices (deterministically from
    ``rng``) for large parameters; by default every entry is checked.
    """
    if not (1e-6 < eps < 1e-2):
        raise ValueError(f"eps must lie in (1e-6, 1e-2), got {eps}")
    params = list(params)
    for p in params:
        if p.dtype != CHECK_DTYPE:
            raise ValueError("grad_check requires float64 parameters")
        if not p.requires_grad:
            raise ValueError("grad_check parameters must require grad")

    for p in params:
        if p.grad is not None:
            p.grad = None
    value = f()
    if value.ndim != 0:
        raise ValueError("f must return a scalar")
    if not torch.isfinite(value):
        raise NonFiniteGradient("function value is not finite")
    value.backward()

    analytic = []
    for idx, p in enumerate(params):
        g = p.grad
        if g is None:
            g = torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"analytic gradient of parameter {idx} is not finite")
        analytic.append(g.detach().clone())

    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))

    max_rel = 0.0
    per_param = {}
    total_entries = 0
    with torch.no_grad():
        for idx, p in enumerate(params):
            flat = p.view(-1)
            n = flat.numel()
            if max_entries_per_param is not None and n > max_entries_per_param:
                entries = rng.choice(n, size=max_entries_per_param, replace=False)
                entries = [int(e) for e in entries]
            else:
                entries = range(n)
            g_flat = analytic[idx].view(-1)
            worst = 0.0
            for e in entries:
                orig = flat[e].item()
                flat[e] = orig + eps
                f_plus = float(f())
                flat[e] = orig - eps
                f_minus = float(f())
                flat[e] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                if not np.isfinite(numeric):
                    # nan would silently vanish in the max() below
                    raise NonFiniteGradient(
                        f"numeric difference of parameter {idx} entry {e} is not finite")
                a = float(g_flat[e])
                denom = max(abs(a), abs(numeric), REL_ERR_FLOOR)
                rel = abs(a - numeric) / denom
                worst = max(worst, rel)
                total_entries += 1
            per_param[idx] = worst
            max_rel = max(max_rel, worst)

    return CheckReport(
        max_rel_err=max_rel,
        passed=max_rel < tol,
        tol=tol,
        eps=eps,
        per_param=per_param,
        entries_checked=total_entries,
    )


def module_grad_check(module: torch.nn.Module, loss_fn, eps: float = 1e-5,
                      tol: float = 1e-4, max_entries_per_param: int | None = None,
                      rng: np.random.Generator | None = None) -> CheckReport:
    """Run ``grad_check`` over every parameter of a module.

    The module is converted to float64 in place; ``loss_fn(module)`` must
    return the scalar loss. Callers normally pass a throwaway copy.
    """
    module = module.double()
    params = [p for _, p in sorted(module.named_parameters())]
    return grad_check(lambda: loss_fn(module), params, eps=eps, tol=tol,
                      max_entries_per_param=max_entries_per_param, rng=rng)


# ---------------------------------------------------------------------------
# The closed primitive set


@dataclass
class Primitive:
    """One required differentiable primitive plus a random case generator.

    ``build_case(rng)`` returns ``(f, params)`` ready for ``grad_check``:
    float64 leaf parameters and a scalar-valued closure exercising the op.
    """

    name: str
    build_case: callable


def _leaf(rng, *shape):
    arr = rng.standard_normal(shape)
    return torch.tensor(arr, dtype=CHECK_DTYPE, requires_grad=True)


def _case_matmul(rng):
    m, k, n = (int(rng.integers(2, 6)) for _ in range(3))
    a, b = _leaf(rng, m, k), _leaf(rng, k, n)
    return (lambda: (a @ b).square().mean()), [a, b]


def _case_add(rng):
    shape = tuple(int(rng.integers(2, 6)) for _ in range(2))
    a, b = _leaf(rng, *shape), _leaf(rng, *shape)
    return (lambda: (a + b).square().mean()), [a, b]


def _case_mul(rng):
    shape = tuple(int(rng.integers(2, 6)) for _ in range(2))
    a, b = _leaf(rng, *shape), _leaf(rng, *shape)
    return (lambda: (a * b).sin().mean()), [a, b]


def _case_scale(rng):
    a = _leaf(rng, int(rng.integers(3, 8)))
    s = float(rng.uniform(0.5, 2.0))
    return (lambda: (s * a).square().sum()), [a]


def _conv_case(rng, stride):
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    hw = int(rng.integers(5, 9))
    x = _leaf(rng, 1, c_in, hw, hw)
    w = _leaf(rng, c_out, c_in, 3, 3)
    b = _leaf(rng, c_out)
    def f():
        y = F.conv2d(x, w, b, stride=stride, padding=1)
        return y.square().mean()
    return f, [x, w, b]


def _case_conv_s1(rng):
    return _conv_case(rng, 1)


def _case_conv_s2(rng):
    return _conv_case(rng, 2)


def _case_conv_transpose(rng):
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    hw = int(rng.integers(3, 6))
    x = _leaf(rng, 1, c_in, hw, hw)
    w = _leaf(rng, c_in, c_out, 2, 2)
    b = _leaf(rng, c_out)
    def f():
        y = F.conv_transpose2d(x, w, b, stride=2)
        return y.square().mean()
    return f, [x, w, b]


def _case_softmax(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 6)))
    a = _leaf(rng, *shape)
    t = torch.tensor(rng.standard_normal(shape), dtype=CHECK_DTYPE)
    return (lambda: (torch.softmax(a, dim=-1) * t).sum()), [a]


def _case_layernorm(rng):
    tokens, c = int(rng.integers(2, 5)), int(rng.integers(3, 8))
    x = _leaf(rng, tokens, c)
    w, b = _leaf(rng, c), _leaf(rng, c)
    return (lambda: F.layer_norm(x, (c,), w, b).square().mean()), [x, w, b]


def _case_gelu(rng):
    a = _leaf(rng, int(rng.integers(3, 10)))
    return (lambda: F.gelu(a).sum()), [a]


def _case_relu(rng):
    # Offset away from the kink at 0 where the derivative is undefined and
    # finite differences disagree with any one-sided convention.
    a = torch.tensor(rng.standard_normal(6) + np.sign(rng.standard_normal(6)) * 0.5,
                     dtype=CHECK_DTYPE, requires_grad=True)
    return (lambda: F.relu(a).square().sum()), [a]


def _case_mean(rng):
    a = _leaf(rng, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    return (lambda: (a.mean() - 0.3).square()), [a]


def _case_abs(rng):
    # Same kink caveat as relu: keep entries away from 0.
    raw = rng.standard_normal(8)
    raw = raw + np.sign(raw) * 0.5
    a = torch.tensor(raw, dtype=CHECK_DTYPE, requires_grad=True)
    return (lambda: a.abs().mean()), [a]


PRIMITIVES = [
    Primitive("matmul", _case_matmul),
    Primitive("add", _case_add),
    Primitive("mul", _case_mul),
    Primitive("scale", _case_scale),
    Primitive("conv2d_stride1", _case_conv_s1),
    Primitive("conv2d_stride2", _case_conv_s2),
    Primitive("conv_transpose2d", _case_conv_transpose),
    Primitive("softmax_last_axis", _case_softmax),
    Primitive("layernorm_channels", _case_layernorm),
    Primitive("gelu", _case_gelu),
    Primitive("relu", _case_relu),
    Primitive("mean_reduction", _case_mean),
    Primitive("absolute_value", _case_abs),
]
