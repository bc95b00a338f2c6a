"""Strain invariants and closed-form benchmark hyperelastic models.

Energies are written once as JAX functions of a single 3x3 deformation gradient;
stress and tangent come from exact automatic differentiation. The Ogden model is
the exception: its principal-stretch form is differentiated spectrally so that
repeated stretches (including F = I) are handled without singular eigenvector
derivatives.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np

from .errors import DomainError, NonPositiveJacobian, UnknownModel

log = logging.getLogger(__name__)

MODEL_IDS = ("NH", "IH", "HW", "GT", "AB", "OG", "AI45", "AI60", "HZ")

AB_CHAIN_SEGMENTS = 28.0
OG_MU = 1.3
OG_ETA = 1.3
HZ_K1 = 0.9
HZ_K2 = 0.8


# --------------------------------------------------------------------------
# kinematics
# --------------------------------------------------------------------------

def det3(A):
    return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))


def fiber_directions(angles) -> jnp.ndarray:
    """Unit in-plane fiber vectors (cos a, sin a, 0), shape (n_f, 3)."""
    angles = jnp.atleast_1d(jnp.asarray(angles, dtype=float))
    return jnp.stack([jnp.cos(angles), jnp.sin(angles), jnp.zeros_like(angles)], axis=-1)


def invariant_terms(F, fiber_dirs=None):
    """Traceable invariants of a single F: (I1, I2, I3, J, I1t, I2t, Iat)."""
    C = F.T @ F
    I1 = jnp.trace(C)
    I2 = 0.5 * (I1 ** 2 - jnp.sum(C * C))
    I3 = det3(C)
    J = det3(F)
    Jm23 = J ** (-2.0 / 3.0)
    I1t = Jm23 * I1
    I2t = Jm23 * Jm23 * I2
    if fiber_dirs is None or len(fiber_dirs) == 0:
        Iat = jnp.zeros(0, dtype=F.dtype)
    else:
        Iat = Jm23 * jnp.einsum("fi,ij,fj->f", fiber_dirs, C, fiber_dirs)
    return I1, I2, I3, J, I1t, I2t, Iat


@dataclass(frozen=True)
class InvariantSet:
    I1: float
    I2: float
    I3: float
    J: float
    Itilde1: float
    Itilde2: float
    Itilde_a: tuple

    def shifted(self) -> np.ndarray:
        """Features that vanish at F = I: Ĩ1-3, Ĩ2-3, (J-1)^2, (Ĩa-1)^2..."""
        return np.array([self.Itilde1 - 3.0, self.Itilde2 - 3.0, (self.J - 1.0) ** 2,
                         *[(a - 1.0) ** 2 for a in self.Itilde_a]])


def _check_det(F: np.ndarray) -> np.ndarray:
    J = np.linalg.det(F)
    if np.any(~(J > 0)):
        raise NonPositiveJacobian(f"det F = {np.min(J):.3e}")
    return J


def invariants(F, fiber_dirs=()) -> InvariantSet:
    F = np.asarray(F, dtype=float)
    _check_det(F)
    dirs = np.asarray(fiber_dirs, dtype=float).reshape(-1, 3)
    vals = invariant_terms(jnp.asarray(F), jnp.asarray(dirs) if len(dirs) else None)
    I1, I2, I3, J, I1t, I2t, Iat = (np.asarray(v) for v in vals)
    return InvariantSet(float(I1), float(I2), float(I3), float(J), float(I1t), float(I2t),
                        tuple(float(a) for a in Iat))


# --------------------------------------------------------------------------
# inverse Langevin
# --------------------------------------------------------------------------

_SMALL = 1e-2


def langevin(x):
    """coth(x) - 1/x, with a series branch near zero."""
    x = jnp.asarray(x, dtype=float)
    small = jnp.abs(x) < _SMALL
    xs = jnp.where(small, 1.0, x)
    series = x / 3.0 - x ** 3 / 45.0 + 2.0 * x ** 5 / 945.0
    return jnp.where(small, series, 1.0 / jnp.tanh(xs) - 1.0 / xs)


def _dlangevin(x):
    small = jnp.abs(x) < _SMALL
    xs = jnp.where(small, 1.0, x)
    series = 1.0 / 3.0 - x ** 2 / 15.0 + 2.0 * x ** 4 / 189.0
    return jnp.where(small, series, 1.0 / xs ** 2 - 1.0 / jnp.sinh(xs) ** 2)


def _inv_langevin_solve(y):
    s = jnp.sign(y)
    a = jnp.abs(y)
    lo = 3.0 * a
    hi = 1.0 / (1.0 - a)
    x0 = jnp.clip(a * (3.0 - a ** 2) / (1.0 - a ** 2), lo, hi)

    def body(_, state):
        x, lo, hi = state
        r = langevin(x) - a
        lo = jnp.where(r < 0, x, lo)
        hi = jnp.where(r > 0, x, hi)
        step = x - r / _dlangevin(x)
        inside = (step > lo) & (step < hi)
        x = jnp.where(r == 0, x, jnp.where(inside, step, 0.5 * (lo + hi)))
        return x, lo, hi

    x, _, _ = jax.lax.fori_loop(0, 60, body, (x0, lo, hi))
    return s * x


@jax.custom_jvp
def inverse_langevin_jax(y):
    """Traceable inverse Langevin function, exact to round-off, any derivative order."""
    return _inv_langevin_solve(y)


@inverse_langevin_jax.defjvp
def _inverse_langevin_jvp(primals, tangents):
    (y,), (dy,) = primals, tangents
    x = inverse_langevin_jax(y)
    return x, dy / _dlangevin(x)


def inverse_langevin(y: float) -> float:
    if not abs(y) < 1.0:
        raise DomainError(f"inverse Langevin requires |y| < 1, got {y}")
    return float(inverse_langevin_jax(jnp.asarray(float(y))))


# --------------------------------------------------------------------------
# constitutive model interface
# --------------------------------------------------------------------------

class ConstitutiveModel:
    """Hyperelastic law defined by a traceable single-F energy.

    ``energy``, ``stress`` and ``tangent`` accept F of shape (..., 3, 3) and
    return arrays of shape (...), (..., 3, 3) and (..., 3, 3, 3, 3).
    """

    def energy_single(self, F):
        raise NotImplementedError

    @cached_property
    def _energy_batch(self):
        return jax.jit(jax.vmap(self.energy_single))

    @cached_property
    def _stress_batch(self):
        return jax.jit(jax.vmap(jax.grad(self.energy_single)))

    @cached_property
    def _tangent_batch(self):
        return jax.jit(jax.vmap(jax.hessian(self.energy_single)))

    @staticmethod
    def _apply(fn, F, out_shape):
        F = np.asarray(F, dtype=float)
        lead = F.shape[:-2]
        flat = F.reshape(-1, 3, 3)
        _check_det(flat)
        out = np.asarray(fn(jnp.asarray(flat)))
        return out.reshape(lead + out_shape)

    def energy(self, F):
        out = self._apply(self._energy_batch, F, ())
        return float(out) if out.ndim == 0 else out

    def stress(self, F):
        return self._apply(self._stress_batch, F, (3, 3))

    def tangent(self, F):
        return self._apply(self._tangent_batch, F, (3, 3, 3, 3))


def _ab_series(lam_c):
    n = AB_CHAIN_SEGMENTS
    rn = jnp.sqrt(n)
    beta = inverse_langevin_jax(lam_c / rn)
    return 2.5 * rn * (beta * lam_c - rn * jnp.log(jnp.sinh(beta) / beta))


def _ab_offset() -> float:
    return float(_ab_series(jnp.asarray(1.0)))


def _energy_from_invariants(model_id: str, J, I1t, I2t, Iat, c_ab: float):
    i1 = I1t - 3.0
    i2 = I2t - 3.0
    vol = (J - 1.0) ** 2
    if model_id == "NH":
        return 0.5 * i1 + 1.5 * vol
    if model_id == "IH":
        return 0.5 * i1 + i2 + i1 ** 2 + 1.5 * vol
    if model_id == "HW":
        return 0.5 * i1 + i2 + 0.7 * i1 * i2 + 0.2 * i1 ** 3 + 1.5 * vol
    if model_id == "GT":
        return 0.5 * i1 + jnp.log(I2t / 3.0) + 1.5 * vol
    if model_id == "AB":
        return _ab_series(jnp.sqrt(I1t / 3.0)) - c_ab + 1.5 * vol
    if model_id in ("AI45", "AI60"):
        return 0.5 * i1 + 0.75 * vol + 0.5 * (Iat[0] - 1.0) ** 2
    if model_id == "HZ":
        fib = jnp.exp(HZ_K2 * (Iat[0] - 1.0) ** 2) + jnp.exp(HZ_K2 * (Iat[1] - 1.0) ** 2) - 2.0
        return 0.5 * i1 + HZ_K1 / (2.0 * HZ_K2) * fib + vol
    raise UnknownModel(model_id)


FIBER_ANGLES = {
    "AI45": (np.pi / 4,),
    "AI60": (np.pi / 3,),
    "HZ": (np.pi / 6, -np.pi / 6),
}


class BenchmarkModel(ConstitutiveModel):
    """One of the nine hard-coded ground-truth laws, selected by ``model_id``."""

    def __init__(self, model_id: str):
        if model_id not in MODEL_IDS:
            raise UnknownModel(f"unknown model {model_id!r}; expected one of {MODEL_IDS}")
        self.model_id = model_id
        self.fiber_angles = FIBER_ANGLES.get(model_id, ())
        self.c_ab = _ab_offset() if model_id == "AB" else 0.0

    def __repr__(self):
        return f"BenchmarkModel({self.model_id!r})"

    @cached_property
    def fiber_dirs(self):
        if not self.fiber_angles:
            return None
        a = np.asarray(self.fiber_angles, dtype=float)
        return np.stack([np.cos(a), np.sin(a), np.zeros_like(a)], axis=-1)

    def energy_single(self, F):
        _, _, _, J, I1t, I2t, Iat = invariant_terms(F, self.fiber_dirs)
        return _energy_from_invariants(self.model_id, J, I1t, I2t, Iat, self.c_ab)


class OgdenModel(BenchmarkModel):
    """W = mu/eta (l1^eta + l2^eta + l3^eta - 3), verbatim (no volumetric term).

    The reference configuration is not stress-free: P(I) = mu * I.
    """

    def __init__(self):
        super().__init__("OG")
        self.mu = OG_MU
        self.eta = OG_ETA
        log.warning("Ogden benchmark has nonzero reference stress P(I) = %.2f I", self.mu)

    def energy_single(self, F):
        c = jnp.linalg.eigvalsh(F.T @ F)
        return self.mu / self.eta * (jnp.sum(c ** (0.5 * self.eta)) - 3.0)

    def _spectral(self, F):
        F = np.asarray(F, dtype=float)
        lead = F.shape[:-2]
        F = F.reshape(-1, 3, 3)
        _check_det(F)
        c, Q = np.linalg.eigh(np.einsum("nki,nkj->nij", F, F))
        return lead, F, c, Q

    def energy(self, F):
        lead, _, c, _ = self._spectral(F)
        W = self.mu / self.eta * (np.sum(c ** (0.5 * self.eta), axis=-1) - 3.0)
        W = W.reshape(lead)
        return float(W) if W.ndim == 0 else W

    def _second_pk(self, c, Q):
        q = 0.5 * self.eta - 1.0
        return self.mu * np.einsum("nap,np,nbp->nab", Q, c ** q, Q)

    def stress(self, F):
        lead, F, c, Q = self._spectral(F)
        P = F @ self._second_pk(c, Q)
        return P.reshape(lead + (3, 3))

    def tangent(self, F):
        lead, F, c, Q = self._spectral(F)
        q = 0.5 * self.eta - 1.0
        S = self._second_pk(c, Q)
        g = c ** q
        cp, cq = c[:, :, None], c[:, None, :]
        diff = cp - cq
        close = np.abs(diff) <= 1e-6 * np.maximum(np.abs(cp), np.abs(cq))
        safe = np.where(close, 1.0, diff)
        # divided differences of g(c) = c^q, limit g' on (near-)coincident eigenvalues
        gamma = np.where(close, q * (0.5 * (cp + cq)) ** (q - 1.0),
                         (g[:, :, None] - g[:, None, :]) / safe)
        # dS_mj/dC_ab, contracted with dC_ab/dF_kl = delta_al F_kb + F_ka delta_bl
        D = self.mu * np.einsum("nmp,njq,npq,nap,nbq->nmjab", Q, Q, gamma, Q, Q)
        dS = np.einsum("nmjlb,nkb->nmjkl", D, F) + np.einsum("nmjal,nka->nmjkl", D, F)
        Ct = np.einsum("ik,nlj->nijkl", np.eye(3), S) + np.einsum("nim,nmjkl->nijkl", F, dS)
        return Ct.reshape(lead + (3, 3, 3, 3))


def get_model(model_id: str) -> BenchmarkModel:
    if model_id == "OG":
        return OgdenModel()
    return BenchmarkModel(model_id)
