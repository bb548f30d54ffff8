"""Brute-force reference implementations and the finite-difference checker.

Nothing here shares code with the vectorised paths it validates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, NumericError
from .tensor import Tensor, backward


def naive_conv3d(x, weight, bias=None, stride=(1, 1, 1), padding=(0, 0, 0), groups=1) -> np.ndarray:
    """Cross-correlation by explicit loops over every output and kernel tap.

    Takes and returns plain arrays for a single ``[C, T, H, W]`` sample.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight, dtype=np.float64)
    if bias is not None:
        bias = np.asarray(bias.data if isinstance(bias, Tensor) else bias, dtype=np.float64)
    c_in, t_in, h_in, w_in = x.shape
    c_out, cg, kt, kh, kw = w.shape
    if c_in % groups or c_out % groups:
        raise ConfigurationError(f"groups={groups} does not divide channels ({c_in}, {c_out})")
    if cg != c_in // groups:
        raise DimensionError(f"axis C: weight expects {cg * groups} input channels, got {c_in}")
    st, sh, sw = stride
    pt, ph, pw = padding
    t_out = (t_in + 2 * pt - kt) // st + 1
    h_out = (h_in + 2 * ph - kh) // sh + 1
    w_out = (w_in + 2 * pw - kw) // sw + 1
    if min(t_out, h_out, w_out) < 1:
        raise DimensionError("kernel does not fit the padded input")
    og = c_out // groups
    out = np.zeros((c_out, t_out, h_out, w_out))
    for co in range(c_out):
        g = co // og
        for to in range(t_out):
            for ho in range(h_out):
                for wo in range(w_out):
                    acc = 0.0 if bias is None else float(bias[co])
                    for ci in range(cg):
                        cin = g * cg + ci
                        for a in range(kt):
                            ti = to * st + a - pt
                            if ti < 0 or ti >= t_in:
                                continue
                            for b in range(kh):
                                hi = ho * sh + b - ph
                                if hi < 0 or hi >= h_in:
                                    continue
                                for d in range(kw):
                                    wi = wo * sw + d - pw
                                    if wi < 0 or wi >= w_in:
                                        continue
                                    acc += x[cin, ti, hi, wi] * w[co, ci, a, b, d]
                    out[co, to, ho, wo] = acc
    return out


def naive_linear(x, weight, bias=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    out = np.zeros(weight.shape[0])
    for i in range(weight.shape[0]):
        acc = 0.0 if bias is None else float(bias[i])
        for j in range(weight.shape[1]):
            acc += weight[i, j] * x[j]
        out[i] = acc
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float = 0.0
    worst_parameter: str | None = None
    checked: int = 0
    skipped_kinks: int = 0
    per_parameter: dict[str, float] = field(default_factory=dict)
    unchecked: list[str] = field(default_factory=list)  # every candidate entry sat on a kink

    def as_dict(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "worst_parameter": self.worst_parameter,
                "checked": self.checked, "skipped_kinks": self.skipped_kinks,
                "per_parameter": dict(self.per_parameter), "unchecked": list(self.unchecked)}


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _probe(loss_fn, flat: np.ndarray, i: int, offsets, name: str) -> list[float]:
    orig = flat[i]
    values = []
    for off in offsets:
        flat[i] = orig + off
        values.append(loss_fn().item())
    flat[i] = orig
    if not all(math.isfinite(v) for v in values):
        raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
    return values


def straddles_kink(f_h: tuple[float, float], f_half: tuple[float, float], f0: float, h: float,
                   tol: float) -> bool:
    """True when ``f`` is visibly not smooth on ``[x-h, x+h]``.

    Two tests with complementary blind spots: central differences at ``h`` and
    ``h/2`` disagree when a kink lies away from ``x``; second differences stop
    scaling as ``h^2`` when a kink lies near ``x``. Both discrepancies are
    measured relative to the derivative estimate, so ``tol`` is in the same
    units as the final relative error.
    """
    up, down = f_h
    up2, down2 = f_half
    cd_h, cd_half = (up - down) / (2 * h), (up2 - down2) / h
    scale = max(abs(cd_h), abs(cd_half), 1e-8)
    # differences of loss values carry rounding noise of a few ulps of |f|
    noise = 64 * np.finfo(np.float64).eps * max(abs(f0), abs(up), abs(down)) / h
    curvature = abs((up - 2 * f0 + down) - 4 * (up2 - 2 * f0 + down2)) / h
    return abs(cd_h - cd_half) > tol * scale + noise or curvature > tol * scale + noise


def finite_diff_check(build: Callable[[int], tuple[Callable[[], Tensor], Sequence[tuple[str, Tensor]]]],
                      seed: int, h: float = 1e-4, samples_per_param: int = 3,
                      kink_tol: float | None = 1e-5, max_tries: int = 12) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``build(seed)`` returns ``(loss_fn, named_params)``; ``loss_fn()`` must
    recompute the scalar loss from the current parameter values. Up to
    ``samples_per_param`` entries of every parameter are perturbed by ``±h``.

    Piecewise-linear ops (relu, max) make the loss non-differentiable on a
    measure-zero set, and a ``±h`` probe that straddles such a kink measures
    a blend of two slopes instead of the derivative. With ``kink_tol`` set,
    entries for which :func:`straddles_kink` fires are counted in
    ``skipped_kinks`` and replaced by another entry of the same parameter (at
    most ``max_tries * samples_per_param`` candidates). The test only looks at
    loss values, never at the analytic gradient, so a wrong gradient cannot be
    skipped; kinks weaker than ``kink_tol`` stay in and can only add error.
    """
    loss_fn, named = build(seed)
    named = list(named)
    report = GradCheckReport()
    if not named:
        return report
    for name, p in named:
        if p.data.dtype != np.float64:
            raise ContractError(f"finite-difference check needs double precision; {name} is {p.data.dtype}")
        p.grad = None
    loss = loss_fn()
    base = loss.item()
    if not math.isfinite(base):
        raise NumericError(f"non-finite loss {base}")
    grads = backward(loss, [p for _, p in named])
    rng = np.random.default_rng(seed)
    for (name, p), grad in zip(named, grads):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        want = min(samples_per_param, flat.size)
        budget = flat.size if kink_tol is None else min(flat.size, max_tries * want)
        candidates = rng.permutation(flat.size)[:budget]
        worst, accepted = 0.0, 0
        for i in (int(v) for v in candidates):
            if accepted == want:
                break
            if kink_tol is None:
                up, down = _probe(loss_fn, flat, i, (h, -h), name)
            else:
                up, down, up2, down2 = _probe(loss_fn, flat, i, (h, -h, h / 2, -h / 2), name)
                if straddles_kink((up, down), (up2, down2), base, h, kink_tol):
                    report.skipped_kinks += 1
                    continue
            numeric = (up - down) / (2 * h)
            worst = max(worst, relative_error(float(gflat[i]), numeric))
            accepted += 1
            report.checked += 1
        if accepted == 0:
            report.unchecked.append(name)
            p.grad = None
            continue
        report.per_parameter[name] = worst
        if report.worst_parameter is None or worst > report.max_rel_error:
            report.max_rel_error = worst
            report.worst_parameter = name
        p.grad = None
    return report
