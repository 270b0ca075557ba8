"""Selective state-space scanning.

The continuous system h' = A h + B x, y = C h + D x is discretized with a
zero-order hold and driven with input-dependent parameters: B, C and the
step size come from linear projections of the current input vector, and
the step size can additionally be shifted by an external gate signal
before the softplus. The scan itself is a strictly causal first-order
recursion, run per channel against a shared diagonal state.

Two implementations are kept deliberately separate so they can check each
other: :func:`selective_scan` runs the recursion (with a hand-written
adjoint for the tape), while :func:`scan_matrix_oracle` materializes the
full L x L causal mixing matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractViolation

_SERIES_CUTOFF = 1e-6  # |dt * a| below this switches B-bar to its series form
_ORACLE_MAX_LEN = 512


@dataclass
class ContinuousParams:
    """Continuous-time parameters for one channel group.

    a: (Z,) diagonal transition (<= 0 at init for stability);
    w_b, w_c: (Z, C) input projections; w_delta: (C,) step-size projection;
    theta: scalar step-size bias; w_gate: scalar gate projection;
    d: (C,) per-channel feedthrough. All fields are tape tensors.
    """

    a: Tensor
    w_b: Tensor
    w_c: Tensor
    w_delta: Tensor
    theta: Tensor
    w_gate: Tensor
    d: Tensor

    def __post_init__(self) -> None:
        if self.a.data.ndim != 1 or self.a.data.size < 1:
            raise ContractViolation("state dimension Z must be >= 1")

    @property
    def state_dim(self) -> int:
        return self.a.data.size

    @property
    def channels(self) -> int:
        return self.d.data.size

    def tensors(self) -> list[Tensor]:
        return [self.a, self.w_b, self.w_c, self.w_delta, self.theta, self.w_gate, self.d]


def init_continuous_params(
    channels: int, state_dim: int, rng: np.random.Generator
) -> ContinuousParams:
    """Stable-scan initialization.

    The diagonal transition starts at -(1..Z); the step-size bias is drawn
    so that softplus(theta) lands log-uniformly in [0.001, 0.1].
    """
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1)))
    theta = np.log(np.expm1(dt))  # softplus inverse
    scale = 1.0 / np.sqrt(channels)
    return ContinuousParams(
        a=Tensor(-np.arange(1.0, state_dim + 1.0)),
        w_b=Tensor(rng.normal(0.0, scale, size=(state_dim, channels))),
        w_c=Tensor(rng.normal(0.0, scale, size=(state_dim, channels))),
        w_delta=Tensor(rng.normal(0.0, scale, size=(channels,))),
        theta=Tensor(theta),
        w_gate=Tensor(0.01),
        d=Tensor(np.ones(channels)),
    )


@dataclass
class ScanParams:
    """Discrete per-timestep parameters: arrays over a length-L sequence."""

    a_bar: np.ndarray  # (L, Z), in (0, 1] when a <= 0
    b_bar: np.ndarray  # (L, Z)
    c: np.ndarray  # (L, Z)
    delta: np.ndarray  # (L,), strictly positive
    d: np.ndarray  # (C,)


def discretize_zoh(
    a: np.ndarray, b: np.ndarray, delta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of a diagonal system.

    a_bar = exp(delta*a); b_bar = (delta*a)^-1 (exp(delta*a) - 1) * delta*b,
    with the near-zero branch replaced by the two-term series
    delta*b*(1 + delta*a/2) to avoid dividing by ~0.
    """
    if delta <= 0:
        raise ContractViolation(f"ZOH step must be positive, got {delta}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = delta * a
    a_bar = np.exp(da)
    small = np.abs(da) < _SERIES_CUTOFF
    phi = np.where(small, 1.0 + da / 2.0, np.expm1(da) / np.where(small, 1.0, da))
    return a_bar, phi * delta * b


def selective_params(
    x_t: np.ndarray, params: ContinuousParams, gate_t: float = 0.0
) -> ScanParams:
    """Input-dependent parameterization for a single timestep.

    B_t and C_t are projections of the input vector; the step size is
    softplus(theta + w_delta . x_t + w_gate * gate_t), then the diagonal
    system is discretized per state dimension.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    b_t = params.w_b.data @ x_t
    c_t = params.w_c.data @ x_t
    pre = float(params.theta.data) + float(params.w_delta.data @ x_t)
    pre += float(params.w_gate.data) * gate_t
    delta = float(np.log1p(np.exp(pre))) if pre <= 30.0 else pre + float(
        np.log1p(np.exp(-pre))
    )
    a_bar, b_bar = discretize_zoh(params.a.data, b_t, delta)
    return ScanParams(
        a_bar=a_bar[None, :],
        b_bar=b_bar[None, :],
        c=c_t[None, :],
        delta=np.array([delta]),
        d=params.d.data.copy(),
    )


# ---------------------------------------------------------------------------
# Fused recursion primitive
# ---------------------------------------------------------------------------


def _phi_pair(da: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """phi(u) = (e^u - 1)/u and its derivative, with series branches near 0."""
    small = np.abs(da) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, da)
    phi = np.where(small, 1.0 + da / 2.0, np.expm1(da) / safe)
    dphi = np.where(
        small,
        0.5 + da / 3.0,
        (np.exp(da) * (da - 1.0) + 1.0) / (safe * safe),
    )
    return phi, dphi


def _scan_core(
    x, b_proj, c_proj, delta, a, d
) -> Tensor:
    """Batched causal recursion with a hand-written adjoint.

    Shapes: x (P, L, C); b_proj, c_proj (P, L, Z); delta (P, L); a (P, Z);
    d (P, C). Per path p and channel c:

        h_t = exp(delta_t a) * h_{t-1} + phi(delta_t a) delta_t B_t x_t[c]
        y_t[c] = C_t . h_t + d[c] x_t[c]

    Forward stores the state history so the backward sweep can run the
    adjoint recursion in reverse without re-simulation.
    """
    x, b_proj, c_proj = as_tensor(x), as_tensor(b_proj), as_tensor(c_proj)
    delta, a, d = as_tensor(delta), as_tensor(a), as_tensor(d)
    p, l, c = x.shape
    z = a.shape[1]

    da = delta.data[:, :, None] * a.data[:, None, :]  # (P, L, Z)
    a_bar = np.exp(da)
    phi, dphi = _phi_pair(da)
    b_bar = phi * delta.data[:, :, None] * b_proj.data  # (P, L, Z)

    drive = x.data[:, :, :, None] * b_bar[:, :, None, :]  # (P, L, C, Z)
    hist = np.empty((p, l, c, z))
    h = np.zeros((p, c, z))
    for t in range(l):
        h = a_bar[:, t, None, :] * h + drive[:, t]
        hist[:, t] = h

    y = np.einsum("plcz,plz->plc", hist, c_proj.data)
    y += x.data * d.data[:, None, :]
    out = Tensor(y)

    tape = ad.active_tape()
    if tape is None or not any(
        tape.is_traced(t) for t in (x, b_proj, c_proj, delta, a, d)
    ):
        return out

    memo: dict = {"key": None, "state": None}

    def _adjoint(g):
        """Shared reverse sweep, computed once per incoming cotangent."""
        if memo["key"] is g:
            return memo["state"]
        state: dict = {}
        g_hist = g[:, :, :, None] * c_proj.data[:, :, None, :]  # dL/dh direct
        d_drive = np.empty((p, l, c, z))
        d_a_bar = np.empty((p, l, z))
        lam = np.zeros((p, c, z))
        for t in range(l - 1, -1, -1):
            lam += g_hist[:, t]
            prev = hist[:, t - 1] if t > 0 else np.zeros((p, c, z))
            d_a_bar[:, t] = (lam * prev).sum(axis=1)
            d_drive[:, t] = lam
            lam = lam * a_bar[:, t, None, :]
        d_b_bar = (d_drive * x.data[:, :, :, None]).sum(axis=2)  # (P, L, Z)
        # b_bar = phi(da) * delta * B ; a_bar = exp(da) ; da = delta * a
        d_da = d_a_bar * a_bar + d_b_bar * dphi * delta.data[:, :, None] * b_proj.data
        state["d_x"] = (d_drive * b_bar[:, :, None, :]).sum(axis=3) + g * d.data[
            :, None, :
        ]
        state["d_b_proj"] = d_b_bar * phi * delta.data[:, :, None]
        state["d_c_proj"] = np.einsum("plcz,plc->plz", hist, g)
        state["d_delta"] = (d_da * a.data[:, None, :]).sum(axis=2) + (
            d_b_bar * phi * b_proj.data
        ).sum(axis=2)
        state["d_a"] = (d_da * delta.data[:, :, None]).sum(axis=1)
        state["d_d"] = (g * x.data).sum(axis=1)
        memo["key"] = g
        memo["state"] = state
        return state

    return ad.record(
        out,
        (x, b_proj, c_proj, delta, a, d),
        (
            lambda g: _adjoint(g)["d_x"],
            lambda g: _adjoint(g)["d_b_proj"],
            lambda g: _adjoint(g)["d_c_proj"],
            lambda g: _adjoint(g)["d_delta"],
            lambda g: _adjoint(g)["d_a"],
            lambda g: _adjoint(g)["d_d"],
        ),
    )


def _parameterize_batch(
    xs: list[Tensor], params: list[ContinuousParams], gates: list[Tensor | None]
) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Project a batch of sequences onto stacked scan inputs."""
    bs, cs, pres = [], [], []
    for x, pr, gate in zip(xs, params, gates):
        bs.append(ad.matmul(x, ad.transpose(pr.w_b, (1, 0))))
        cs.append(ad.matmul(x, ad.transpose(pr.w_c, (1, 0))))
        l = x.shape[0]
        pre = ad.add(
            ad.reshape(ad.matmul(x, ad.reshape(pr.w_delta, (-1, 1))), (l,)),
            pr.theta,
        )
        if gate is not None:
            pre = ad.add(pre, ad.mul(pr.w_gate, gate))
        pres.append(pre)
    return (
        ad.stack(xs),
        ad.stack(bs),
        ad.stack(cs),
        ad.softplus(ad.stack(pres)),
        ad.stack([pr.a for pr in params]),
        ad.stack([pr.d for pr in params]),
    )


def selective_scan(
    x, params: ContinuousParams, gates=None
) -> Tensor:
    """Run the selective scan over a (L, C) sequence; returns (L, C).

    ``gates`` is an optional length-L signal added (through its scalar
    projection) to the pre-softplus step size. h_0 = 0; the output at t
    depends only on inputs up to t.
    """
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractViolation(f"scan input must be (L, C) with L >= 1, got {x.shape}")
    gate_t = as_tensor(gates) if gates is not None else None
    xb, bb, cb, db, ab, dd = _parameterize_batch([x], [params], [gate_t])
    out = _scan_core(xb, bb, cb, db, ab, dd)
    return ad.reshape(out, x.shape)


def mixing_matrix(
    a_bar: np.ndarray, b_bar: np.ndarray, c: np.ndarray
) -> np.ndarray:
    """Causal L x L matrix with M[t, s] = c_t . (prod_{k=s+1..t} a_bar_k) b_bar_s."""
    l = a_bar.shape[0]
    m = np.zeros((l, l))
    for t in range(l):
        # prods[s] = product of a_bar over k = s+1 .. t  (ones when s = t)
        prods = np.ones_like(a_bar[: t + 1])
        if t > 0:
            prods[:t] = np.cumprod(a_bar[t:0:-1], axis=0)[::-1]
        m[t, : t + 1] = np.einsum("z,sz->s", c[t], prods * b_bar[: t + 1])
    return m


def scan_matrix_oracle(
    x: np.ndarray, params: ContinuousParams, gates: np.ndarray | None = None
) -> np.ndarray:
    """Brute-force reference: materialize the causal mixing matrix.

    Test-only; capped at L <= 512 because of the O(L^2) cost. The whole
    parameterization is recomputed here with plain numpy so the two scan
    routes share no code.
    """
    x = np.asarray(x, dtype=np.float64)
    l, _ = x.shape
    if l > _ORACLE_MAX_LEN:
        raise ContractViolation(f"matrix oracle capped at L={_ORACLE_MAX_LEN}")
    pre = x @ params.w_delta.data + float(params.theta.data)
    if gates is not None:
        pre = pre + float(params.w_gate.data) * np.asarray(gates, dtype=np.float64)
    delta = np.where(
        pre > 30.0,
        pre + np.log1p(np.exp(-np.abs(pre))),
        np.log1p(np.exp(np.minimum(pre, 30.0))),
    )
    da = delta[:, None] * params.a.data[None, :]
    a_bar = np.exp(da)
    small = np.abs(da) < _SERIES_CUTOFF
    phi = np.where(small, 1.0 + da / 2.0, np.expm1(da) / np.where(small, 1.0, da))
    b_bar = phi * delta[:, None] * (x @ params.w_b.data.T)
    c_seq = x @ params.w_c.data.T
    m = mixing_matrix(a_bar, b_bar, c_seq)
    return m @ x + x * params.d.data[None, :]


# ---------------------------------------------------------------------------
# Four-directional image scan
# ---------------------------------------------------------------------------


def _flatten_paths(f: Tensor, h: int, w: int) -> list[Tensor]:
    """The four 1-D orderings of a (C, H, W) image, each (H*W, C)."""
    row = ad.reshape(ad.transpose(f, (1, 2, 0)), (h * w, -1))
    col = ad.reshape(ad.transpose(f, (2, 1, 0)), (h * w, -1))
    return [row, ad.flip(row, 0), col, ad.flip(col, 0)]


def _unflatten_path(y: Tensor, path: int, c: int, h: int, w: int) -> Tensor:
    if path in (1, 3):
        y = ad.flip(y, 0)
    if path < 2:
        return ad.transpose(ad.reshape(y, (h, w, c)), (2, 0, 1))
    return ad.transpose(ad.reshape(y, (w, h, c)), (2, 1, 0))


def _flatten_gate(g: Tensor, path: int) -> Tensor:
    flat = ad.reshape(g if path < 2 else ad.transpose(g, (1, 0)), (-1,))
    return ad.flip(flat, 0) if path in (1, 3) else flat


def scan_image_4dir(
    f, params: list[ContinuousParams], gates=None
) -> Tensor:
    """Sum of selective scans along four 1-D traversals of an image.

    Paths (in fixed order): row-major forward, row-major reverse,
    column-major forward, column-major reverse. Each path gets its own
    parameter set. When gate maps are supplied, the horizontal map feeds
    the two row-major paths and the vertical map the two column-major
    ones; absent gates behave exactly like all-zero gates.
    """
    f = as_tensor(f)
    c, h, w = f.shape
    if len(params) != 4:
        raise ContractViolation("scan_image_4dir needs one parameter set per path")
    if gates is not None:
        for g in (gates.g_h, gates.g_v):
            if as_tensor(g).shape != (h, w):
                raise ContractViolation(
                    f"gate map shape {as_tensor(g).shape} != image plane ({h}, {w})"
                )
    xs = _flatten_paths(f, h, w)
    if gates is None:
        gate_seqs: list[Tensor | None] = [None] * 4
    else:
        g_h, g_v = as_tensor(gates.g_h), as_tensor(gates.g_v)
        gate_seqs = [
            _flatten_gate(g_h, 0),
            _flatten_gate(g_h, 1),
            _flatten_gate(g_v, 2),
            _flatten_gate(g_v, 3),
        ]
    stacked = _parameterize_batch(xs, params, gate_seqs)
    ys = _scan_core(*stacked)
    total = None
    for path in range(4):
        y = _unflatten_path(_take(ys, path), path, c, h, w)
        total = y if total is None else ad.add(total, y)
    return total


def _take(batched: Tensor, index: int) -> Tensor:
    """Select one path from a (P, L, C) batch."""
    out = Tensor(batched.data[index])

    def vjp(g):
        full = np.zeros_like(batched.data)
        full[index] = g
        return full

    return ad.record(out, (batched,), (vjp,))
