"""Selective state-space model: input-dependent parameters, ZOH discretization
and the sequential scan.

Shapes follow the token-sequence convention ``[..., L, D]`` (sequence length
``L``, ``D`` channels); the state has ``N`` entries per channel and the state
matrix is diagonal, stored as ``A_log`` with ``A = -exp(A_log)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor

# below this |dt*A| the ZOH input coefficient switches to its Taylor expansion
TAYLOR_CUTOFF = 1e-6


@dataclass
class SSMParams:
    A_log: Tensor    # [D, N]
    D_skip: Tensor   # [D]
    W_B: Tensor      # [D, N]
    W_C: Tensor      # [D, N]
    W_dt: Tensor     # [D, 1]
    dt_bias: Tensor  # [D]

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def state_size(self) -> int:
        return self.A_log.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"A_log": self.A_log, "D_skip": self.D_skip, "W_B": self.W_B,
                "W_C": self.W_C, "W_dt": self.W_dt, "dt_bias": self.dt_bias}

    def A(self) -> Tensor:
        return -T.exp(self.A_log)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_ssm_params(D: int, N: int, rng: np.random.Generator,
                    dt_min: float = 1e-3, dt_max: float = 1e-1) -> SSMParams:
    """S4D-real style init: A = -(1..N) per channel, D_skip = 1, dt log-uniform."""
    if D < 1 or N < 1:
        raise ContractError(f"need D >= 1 and N >= 1, got D={D}, N={N}")
    bound = 1.0 / np.sqrt(D)
    A_log = np.tile(np.log(np.arange(1, N + 1, dtype=np.float64)), (D, 1))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=D))
    return SSMParams(
        A_log=Tensor(A_log, requires_grad=True),
        D_skip=Tensor(np.ones(D), requires_grad=True),
        W_B=Tensor(rng.uniform(-bound, bound, (D, N)), requires_grad=True),
        W_C=Tensor(rng.uniform(-bound, bound, (D, N)), requires_grad=True),
        W_dt=Tensor(rng.uniform(-bound, bound, (D, 1)), requires_grad=True),
        dt_bias=Tensor(inverse_softplus(dt), requires_grad=True),
    )


def selective_params(x: Tensor, p: SSMParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent ``B``, ``C`` (``[..., L, N]``) and step sizes ``dt`` (``[..., L, D]``)."""
    if x.shape[-1] != p.channels:
        raise DimensionError(f"token channels {x.shape[-1]} != SSM channels {p.channels}")
    B_seq = x @ p.W_B
    C_seq = x @ p.W_C
    dt_seq = T.softplus(p.dt_bias + x @ p.W_dt)
    return B_seq, C_seq, dt_seq


def _zoh_input_coeff(z: np.ndarray, A: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """(exp(dt*A) - 1) / A, with the first-order Taylor form near z = dt*A = 0."""
    small = np.abs(z) < TAYLOR_CUTOFF
    exact = np.divide(np.expm1(z), A, out=np.zeros_like(z), where=~small)
    return np.where(small, dt * (1.0 + 0.5 * z), exact)


def discretize(A_diag, B_t, dt) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of a diagonal system.

    ``A_diag`` is ``[D, N]``, ``B_t`` is ``[N]`` and ``dt`` is ``[D]``; returns
    ``Abar = exp(dt*A)`` and ``Bbar = ((exp(dt*A) - 1) / A) * B``, both ``[D, N]``.
    """
    A = np.asarray(getattr(A_diag, "data", A_diag), dtype=np.float64)
    B = np.asarray(getattr(B_t, "data", B_t), dtype=np.float64)
    d = np.asarray(getattr(dt, "data", dt), dtype=np.float64)
    if np.any(d <= 0):
        raise ContractError("discretize needs strictly positive dt")
    z = d[..., None] * A
    return np.exp(z), _zoh_input_coeff(z, A, d[..., None]) * B[..., None, :]


def scan_kernel(x: Tensor, dt: Tensor, A: Tensor, B_seq: Tensor, C_seq: Tensor, D_skip: Tensor) -> Tensor:
    """Fused discretize-and-scan with a hand-written reverse pass.

    x, dt: ``[..., L, D]``; A: ``[D, N]`` (negative); B_seq, C_seq: ``[..., L, N]``;
    D_skip: ``[D]``. Returns y ``[..., L, D]`` with
    ``h_t = Abar_t * h_{t-1} + Bbar_t * x_t``, ``y_t = <C_t, h_t> + D_skip * x_t``.
    """
    lead = x.shape[:-2]
    L, D = x.shape[-2:]
    N = A.shape[-1]
    if dt.shape != x.shape or A.shape != (D, N) or D_skip.shape != (D,):
        raise DimensionError(f"scan shapes x {x.shape}, dt {dt.shape}, A {A.shape}, D_skip {D_skip.shape}")
    if B_seq.shape != lead + (L, N) or C_seq.shape != lead + (L, N):
        raise DimensionError(f"scan B {B_seq.shape} / C {C_seq.shape} do not match x {x.shape} and N={N}")
    if L < 1:
        raise ContractError("scan needs at least one token")
    if np.any(dt.data <= 0):
        raise ContractError("scan needs strictly positive dt")

    # time-major [L, batch, D(, N)] so per-step slices are contiguous
    xs = np.moveaxis(x.data.reshape((-1, L, D)), 1, 0)
    dts = np.moveaxis(dt.data.reshape((-1, L, D)), 1, 0)
    Bs = np.moveaxis(B_seq.data.reshape((-1, L, N)), 1, 0)
    Cs = np.moveaxis(C_seq.data.reshape((-1, L, N)), 1, 0)
    Ad = A.data
    dte = dts[..., None]
    z = dte * Ad
    Abar = np.exp(z)
    if not np.all((Abar >= 0.0) & (Abar <= 1.0)):
        raise NumericError("discretized state decay left [0, 1]; is A negative?")
    coeff = _zoh_input_coeff(z, Ad, dte)
    Bbar = coeff * Bs[:, :, None, :]
    u = Bbar * xs[..., None]

    H = np.empty_like(u)
    h = np.zeros(u.shape[1:])
    for t in range(L):
        h = Abar[t] * h + u[t]
        H[t] = h
    y = np.einsum("lbdn,lbn->lbd", H, Cs) + D_skip.data * xs
    out = np.moveaxis(y, 0, 1).reshape(x.shape)

    def bw(g):
        gy = np.moveaxis(g.reshape((-1, L, D)), 1, 0)
        gH = gy[..., None] * Cs[:, :, None, :]
        GH = np.empty_like(gH)
        gh = np.zeros(gH.shape[1:])
        for t in range(L - 1, -1, -1):
            gh = gH[t] + Abar[t + 1] * gh if t + 1 < L else gH[t].copy()
            GH[t] = gh
        gC = np.einsum("lbdn,lbd->lbn", H, gy)
        Hprev = np.concatenate([np.zeros((1,) + H.shape[1:]), H[:-1]], axis=0)
        gAbar = GH * Hprev
        gx = (GH * Bbar).sum(-1) + D_skip.data * gy
        gBbar = GH * xs[..., None]
        gB = (gBbar * coeff).sum(axis=2)
        gcoeff = gBbar * Bs[:, :, None, :]
        small = np.abs(z) < TAYLOR_CUTOFF
        dcoeff_ddt = np.where(small, 1.0 + z, Abar)
        dcoeff_dA = np.where(small, 0.5 * dte * dte,
                             np.divide(z * Abar - np.expm1(z), Ad * Ad, out=np.zeros_like(z), where=~small))
        gdt = (gAbar * Abar * Ad + gcoeff * dcoeff_ddt).sum(-1)
        gA = (gAbar * Abar * dte + gcoeff * dcoeff_dA).sum(axis=(0, 1))
        gD = (gy * xs).sum(axis=(0, 1))

        def back(arr, last):
            return np.moveaxis(arr, 0, 1).reshape(lead + (L, last))

        return back(gx, D), back(gdt, D), gA, back(gB, N), back(gC, N), gD

    return T.custom_op(out, (x, dt, A, B_seq, C_seq, D_skip), bw, "selective_scan")


def selective_scan(x: Tensor, p: SSMParams) -> Tensor:
    """Run the selective SSM over a token sequence ``[..., L, D]``."""
    if x.shape[-2] < 1:
        raise ContractError("selective_scan needs L >= 1")
    B_seq, C_seq, dt_seq = selective_params(x, p)
    return scan_kernel(x, dt_seq, p.A(), B_seq, C_seq, p.D_skip)
