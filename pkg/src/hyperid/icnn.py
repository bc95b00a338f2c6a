"""Input-convex strain energy network with built-in physical corrections.

The energy is ``W(F) = W_NN(z0(F)) + W0 + H : E`` where ``z0`` are shifted
invariants, ``W0`` and ``H`` zero the energy and stress at F = I and are
recomputed from the current parameters on every call.

Parameters are a plain pytree::

    {"A": [A1, ..., AN], "B": [B1, ..., BN], "c": [c1, ..., cN], "zeta": (n_fibers,)}
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from .errors import SchemaError
from .materials import ConstitutiveModel, invariant_terms

MODES = ("convex_smooth", "unconstrained_relu")
MODEL_FORMAT_VERSION = "1"


@dataclass(frozen=True)
class IcnnArchitecture:
    hidden_sizes: tuple = (64, 64, 64)
    n_fibers: int = 0
    c_G: float = 1.0
    c_F: float = 1.0 / 12.0
    mode: str = "convex_smooth"
    dropout_rate: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(d) for d in self.hidden_sizes))
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("hidden_sizes must be a nonempty list of positive ints")
        if self.c_G <= 0 or self.c_F <= 0:
            raise ValueError("c_G and c_F must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.n_fibers not in (0, 1, 2):
            raise ValueError("n_fibers must be 0, 1 or 2")

    @property
    def n_features(self) -> int:
        return 3 + self.n_fibers


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def fiber_angles(zeta):
    """alpha = pi / (1 + exp(-zeta)), in (0, pi)."""
    zeta = jnp.asarray(zeta)
    if not jnp.issubdtype(zeta.dtype, jnp.floating):
        zeta = zeta.astype(float)
    return jnp.pi * jax.nn.sigmoid(zeta)


def fiber_dirs_from_zeta(zeta):
    a = fiber_angles(zeta)
    return jnp.stack([jnp.cos(a), jnp.sin(a), jnp.zeros_like(a)], axis=-1)


def invariants_layer(F, zeta):
    """z0 = [Ĩ1-3, Ĩ2-3, (J-1)^2, (Ĩa_1-1)^2, ...]; exactly zero at F = I."""
    zeta = jnp.atleast_1d(jnp.asarray(zeta)).astype(F.dtype)
    dirs = fiber_dirs_from_zeta(zeta) if zeta.shape[0] else None
    _, _, _, J, I1t, I2t, Iat = invariant_terms(F, dirs)
    iso = jnp.stack([I1t - 3.0, I2t - 3.0, (J - 1.0) ** 2])
    return jnp.concatenate([iso, (Iat - 1.0) ** 2])


def _G(x, c_G):
    return c_G * jax.nn.softplus(x)


def _F(x, c_F):
    return c_F * jax.nn.softplus(x) ** 2


def network(params, arch: IcnnArchitecture, z0, masks=None):
    """Scalar network output for one feature vector. ``masks`` scale hidden layers."""
    A, B, c = params["A"], params["B"], params["c"]
    n_hidden = len(arch.hidden_sizes)
    z = z0
    if arch.mode == "convex_smooth":
        for k in range(n_hidden):
            z = _F(_G(A[k], arch.c_G) @ z + B[k] @ z0 + c[k], arch.c_F)
            if masks is not None:
                z = z * masks[k]
        out = _G(A[-1], arch.c_G) @ z + _G(B[-1], arch.c_G) @ z0 + c[-1]
    else:
        for k in range(n_hidden):
            z = jax.nn.relu(A[k] @ z + B[k] @ z0 + c[k])
            if masks is not None:
                z = z * masks[k]
        out = A[-1] @ z + B[-1] @ z0 + c[-1]
    return out[0]


def w_nn(params, arch, F, masks=None):
    return network(params, arch, invariants_layer(F, params["zeta"]), masks)


def corrections(params, arch):
    """(W0, H): energy and stress offsets evaluated at F = I with dropout off."""
    I = jnp.eye(3, dtype=params["c"][-1].dtype)
    W_ref, dW = jax.value_and_grad(lambda F: w_nn(params, arch, F))(I)
    H = -0.5 * (dW + dW.T)
    return -W_ref, H


def energy_with(params, arch, F, W0, H, masks=None):
    E = 0.5 * (F.T @ F - jnp.eye(3, dtype=F.dtype))
    return w_nn(params, arch, F, masks) + W0 + jnp.sum(H * E)


def energy(params, arch, F, masks=None):
    W0, H = corrections(params, arch)
    return energy_with(params, arch, F, W0, H, masks)


def stress(params, arch, F):
    return jax.grad(energy, argnums=2)(params, arch, F)


def tangent(params, arch, F):
    return jax.hessian(energy, argnums=2)(params, arch, F)


def dropout_masks(key, arch: IcnnArchitecture, batch_shape=()):
    """Inverted-dropout masks for every hidden layer, leading dims ``batch_shape``."""
    keep = 1.0 - arch.dropout_rate
    keys = jax.random.split(key, len(arch.hidden_sizes))
    return [jax.random.bernoulli(k, keep, batch_shape + (d,)).astype(float) / keep
            for k, d in zip(keys, arch.hidden_sizes)]


def forward(params, arch, F, training: bool = False, dropout_seed: int = 0):
    """Raw network value W_NN(F); dropout is active only when ``training``."""
    F = jnp.asarray(F, dtype=float)
    masks = None
    if training and arch.dropout_rate > 0:
        masks = dropout_masks(jax.random.PRNGKey(dropout_seed), arch)
    return float(w_nn(params, arch, F, masks))


def init_parameters(arch: IcnnArchitecture, seed: int):
    """Fan-in uniform weights, zero biases, zeta uniform in (-2, 2)."""
    rng = np.random.default_rng(seed)
    sizes = list(arch.hidden_sizes) + [1]
    n_in = arch.n_features
    A, B, c = [], [], []
    prev = n_in
    for d in sizes:
        ba = 1.0 / math.sqrt(prev)
        bb = 1.0 / math.sqrt(n_in)
        A.append(jnp.asarray(rng.uniform(-ba, ba, (d, prev))))
        B.append(jnp.asarray(rng.uniform(-bb, bb, (d, n_in))))
        c.append(jnp.zeros(d))
        prev = d
    zeta = jnp.asarray(rng.uniform(-2.0, 2.0, arch.n_fibers))
    return {"A": A, "B": B, "c": c, "zeta": zeta}


# --------------------------------------------------------------------------
# model wrapper and files
# --------------------------------------------------------------------------

class IcnnModel(ConstitutiveModel):
    """A trained network usable anywhere an analytic model is (FEM, evaluation)."""

    def __init__(self, params, arch: IcnnArchitecture, provenance: dict | None = None):
        self.params = jax.tree_util.tree_map(jnp.asarray, params)
        self.arch = arch
        self.provenance = dict(provenance or {})

    def energy_single(self, F):
        return energy(self.params, self.arch, F)

    @property
    def fiber_angles(self) -> np.ndarray:
        return np.asarray(fiber_angles(self.params["zeta"]))

    def corrections(self):
        W0, H = corrections(self.params, self.arch)
        return float(W0), np.asarray(H)

    def to_dict(self) -> dict:
        p = jax.tree_util.tree_map(lambda x: np.asarray(x).tolist(), self.params)
        return {
            "version": MODEL_FORMAT_VERSION,
            "architecture": asdict(self.arch),
            "parameters": p,
            "fiber_angles": self.fiber_angles.tolist(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "IcnnModel":
        if doc.get("version") != MODEL_FORMAT_VERSION:
            raise SchemaError("model.version", f"unsupported version {doc.get('version')!r}")
        try:
            arch = IcnnArchitecture(**doc["architecture"])
            raw = doc["parameters"]
            params = {
                "A": [np.array(a, dtype=float) for a in raw["A"]],
                "B": [np.array(b, dtype=float) for b in raw["B"]],
                "c": [np.array(v, dtype=float) for v in raw["c"]],
                "zeta": np.array(raw["zeta"], dtype=float).reshape(-1),
            }
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError("model", str(exc)) from exc
        return cls(params, arch, doc.get("provenance"))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "IcnnModel":
        path = Path(path)
        if not path.exists():
            raise SchemaError(path.name, "file missing")
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
