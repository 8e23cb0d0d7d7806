"""One latent linear Hawkes (LLH) layer in its diagonal, zero-order-hold form.

State update over an interval of length ``dt`` that ends at step ``i``::

    lam_bar = exp(lam_i * dt)
    x_left[i]  = lam_bar * x_right[i-1] + (lam_bar - 1) * (B @ u_held)
    x_right[i] = x_left[i] + E @ alpha[k_i]

Arrays carry the window start as row 0 (``x_right[0] = x0``), so a batch of
``S`` steps has ``S + 1`` state rows.  Inputs ``u`` of ``None`` mean "identically
zero", which is what the first layer sees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FORWARD, BACKWARD = "forward", "backward"
UNIT_SCALE_BIAS = math.log(math.e - 1.0)  # softplus(b) == 1


@dataclass(eq=False)
class LLHLayerParams:
    """Trainable tensors of one layer; complex matrices are split into real leaves.

    ``Re(lambda) = -exp(lambda_log_neg_real)`` keeps every mode stable.
    ``D`` is diagonal (length ``H``).
    """

    lambda_log_neg_real: Tensor
    lambda_imag: Tensor
    B_re: Tensor
    B_im: Tensor
    C_re: Tensor
    C_im: Tensor
    D: Tensor
    E_re: Tensor
    E_im: Tensor
    x0_re: Tensor
    x0_im: Tensor
    W_prime: Tensor
    b_prime: Tensor
    input_dependent: bool = True
    zoh_mode: str = BACKWARD

    @classmethod
    def init(
        cls, P: int, H: int, R: int, rng: np.random.Generator, input_dependent=True, zoh_mode=BACKWARD,
        timescale_range=None,
    ):
        """``timescale_range=(lo, hi)`` multiplies mode ``p`` of the default
        eigenvalues by a factor log-spaced from ``hi`` down to ``lo``; modes
        scaled by ``lo`` remember ~``2 / lo`` time units.  ``None`` keeps every
        factor at 1.
        """
        if zoh_mode not in (FORWARD, BACKWARD):
            raise ValueError(f"zoh_mode must be 'forward' or 'backward', got {zoh_mode!r}")
        part = math.sqrt(0.5 / P)
        scale = np.ones(P)
        if timescale_range is not None:
            lo, hi = timescale_range
            if not 0 < lo <= hi:
                raise ValueError("timescale_range needs 0 < lo <= hi")
            scale = np.geomspace(hi, lo, P)

        def leaf(x):
            return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)

        return cls(
            lambda_log_neg_real=leaf(np.log(0.5 * scale)),
            lambda_imag=leaf(math.pi * np.arange(P) * scale),
            B_re=leaf(rng.normal(0, part, (P, H))),
            B_im=leaf(rng.normal(0, part, (P, H))),
            C_re=leaf(rng.normal(0, part, (H, P))),
            C_im=leaf(rng.normal(0, part, (H, P))),
            D=leaf(np.zeros(H)),
            E_re=leaf(rng.normal(0, part, (P, R))),
            E_im=leaf(rng.normal(0, part, (P, R))),
            x0_re=leaf(np.zeros(P)),
            x0_im=leaf(np.zeros(P)),
            W_prime=leaf(np.zeros((P, H))),
            b_prime=leaf(np.full(P, UNIT_SCALE_BIAS)),
            input_dependent=input_dependent,
            zoh_mode=zoh_mode,
        )

    TENSOR_FIELDS = (
        "lambda_log_neg_real", "lambda_imag", "B_re", "B_im", "C_re", "C_im", "D",
        "E_re", "E_im", "x0_re", "x0_im", "W_prime", "b_prime",
    )

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in self.TENSOR_FIELDS}

    @property
    def P(self) -> int:
        return self.lambda_imag.shape[0]

    @property
    def H(self) -> int:
        return self.D.shape[0]

    def lam(self) -> Tensor:
        return ad.complex_from_parts(-ad.exp(self.lambda_log_neg_real), self.lambda_imag)

    def B(self) -> Tensor:
        return ad.complex_from_parts(self.B_re, self.B_im)

    def C(self) -> Tensor:
        return ad.complex_from_parts(self.C_re, self.C_im)

    def E(self) -> Tensor:
        return ad.complex_from_parts(self.E_re, self.E_im)

    def x0(self) -> Tensor:
        return ad.complex_from_parts(self.x0_re, self.x0_im)


@dataclass(eq=False)
class LayerStates:
    """Per-step states with the window start as row 0.

    ``lam_eff[:, i]`` is the eigenvalue vector used on the interval that ends
    at step ``i + 1``.
    """

    right_limits: Tensor
    left_limits: Tensor
    lam_eff: Tensor
    y_left: Tensor
    y_right: Optional[Tensor] = None


def effective_lambda(params: LLHLayerParams, u_prev=None) -> Tensor:
    """``softplus(W' u + b') * lambda`` with input dependence, else ``lambda``.

    ``u_prev`` of ``None`` stands for a zero input.
    """
    lam = params.lam()
    if not params.input_dependent:
        return lam
    if u_prev is None:
        scale = ad.softplus(params.b_prime)
    else:
        scale = ad.softplus(ad.as_tensor(u_prev) @ params.W_prime.T + params.b_prime)
    return scale * lam


def discretize(lam_eff, dt):
    """Zero-order hold: ``(exp(lam * dt), exp(lam * dt) - 1)``."""
    dt = ad.as_tensor(dt)
    if np.any(dt.data < 0):
        raise ValueError("dt must be nonnegative")
    lam_bar = ad.exp(ad.as_tensor(lam_eff) * dt)
    return lam_bar, lam_bar - 1.0


def project_input(params: LLHLayerParams, u) -> Optional[Tensor]:
    return None if u is None else ad.as_tensor(u) @ params.B().T


def layer_output(params: LLHLayerParams, x, u) -> Tensor:
    """Real output ``2 Re(C x) + D * u`` (conjugate-pair convention)."""
    y = 2.0 * ad.real(x @ params.C().T)
    if u is not None:
        y = y + u * params.D
    return y


def evolve_state(params: LLHLayerParams, x_right, u_held, delta, lam_eff=None) -> Tensor:
    """Left limit ``delta`` after a right limit, with no impulse on the way."""
    delta = ad.as_tensor(delta)
    if lam_eff is None:
        lam_eff = effective_lambda(params, None)
    lam_bar, factor = discretize(lam_eff, delta.reshape(delta.shape + (1,)) if delta.ndim else delta)
    x = lam_bar * x_right
    bu = project_input(params, u_held)
    if bu is not None:
        x = x + factor * bu
    return x


def layer_forward(params: LLHLayerParams, impulses, u_left, dt, u_right=None) -> LayerStates:
    """Right/left limits at every step via one scan.

    Shapes: ``impulses (..., S, P)`` complex, ``dt (..., S)``, ``u_left`` and
    ``u_right`` ``(..., S + 1, H)`` or ``None``.  The held input on the
    interval ending at step ``i`` is ``u_left[i]`` (backward ZOH) or
    ``u_right[i - 1]`` (forward ZOH); the dynamics on that interval are
    conditioned on ``u_left[i - 1]``.
    """
    impulses = ad.as_tensor(impulses)
    dt = ad.as_tensor(dt)
    if impulses.shape[:-1] != dt.shape:
        raise ValueError(f"length mismatch: impulses {impulses.shape} vs dt {dt.shape}")
    for u in (u_left, u_right):
        if u is not None and u.shape[:-1] != dt.shape[:-1] + (dt.shape[-1] + 1,):
            raise ValueError(f"u shape {u.shape} does not match dt {dt.shape}")
    cond = None if u_left is None else u_left[..., :-1, :]
    lam_eff = effective_lambda(params, cond)
    if lam_eff.shape != dt.shape + (params.P,):
        lam_eff = ad.broadcast_to(lam_eff, dt.shape + (params.P,))
    lam_bar, factor = discretize(lam_eff, dt.reshape(dt.shape + (1,)))
    if params.zoh_mode == BACKWARD:
        held = None if u_left is None else u_left[..., 1:, :]
    else:
        held = None if u_right is None else u_right[..., :-1, :]
    bu = project_input(params, held)
    inject = impulses if bu is None else factor * bu + impulses
    x0 = params.x0()
    xs = ad.scan(lam_bar, inject, x0)
    lead = xs.shape[:-2]
    x0_row = ad.broadcast_to(x0, lead + (1, params.P))
    right = ad.concat([x0_row, xs], axis=-2)
    left = ad.concat([x0_row, xs - impulses], axis=-2)
    y_left = layer_output(params, left, u_left)
    y_right = None
    if params.zoh_mode == FORWARD:
        y_right = layer_output(params, right, u_right)
    return LayerStates(right, left, lam_eff, y_left, y_right)
