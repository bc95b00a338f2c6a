import numpy as np
import pytest

import hyperid  # noqa: F401  (enables double precision before any jax use)
from hyperid.mesh import Mesh


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_F(rng, scale=0.2, plane=False) -> np.ndarray:
    """Random deformation gradient near identity with det F > 0."""
    while True:
        F = np.eye(3) + scale * rng.uniform(-1, 1, (3, 3))
        if plane:
            F[2, :2] = F[:2, 2] = 0.0
            F[2, 2] = 1.0
        if np.linalg.det(F) > 0.3:
            return F


def unit_triangle() -> Mesh:
    return Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                {"left": [0, 2], "bottom": [0, 1], "hyp": [1, 2]})


def two_triangles() -> Mesh:
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return Mesh(nodes, np.array([[0, 1, 2], [0, 2, 3]]),
                {"left": [0, 3], "right": [1, 2], "bottom": [0, 1], "top": [2, 3]})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def relu_kink_params(sign=-1.0, offset=0.01):
    """One-neuron ReLU network W = sign * relu(Ĩ1 - 3 - offset) + tiny skip terms.

    With ``sign`` < 0 it is concave across the kink, so midpoint convexity fails;
    with either sign the stress jumps where Ĩ1 - 3 = offset.
    """
    import jax.numpy as jnp

    from hyperid.icnn import IcnnArchitecture

    arch = IcnnArchitecture(hidden_sizes=(1,), mode="unconstrained_relu", dropout_rate=0.0)
    params = {
        "A": [jnp.array([[1.0, 0.0, 0.0]]), jnp.array([[sign]])],
        "B": [jnp.zeros((1, 3)), jnp.array([[1e-3, 1e-3, 1e-3]])],
        "c": [jnp.array([-offset]), jnp.zeros(1)],
        "zeta": jnp.zeros(0),
    }
    return arch, params


def kink_stretch(offset=0.01) -> float:
    """Uniaxial stretch at which Ĩ1 - 3 equals ``offset`` (plane strain, diag(l, 1, 1))."""
    from scipy.optimize import brentq

    return brentq(lambda l: l ** (-2 / 3) * (l * l + 2) - 3 - offset, 1.0, 2.0, xtol=1e-15)


def midpoint_gap(params, arch, za, zb, masks=None) -> float:
    """W(mid) - mean(W(za), W(zb)); positive values break midpoint convexity."""
    from hyperid.icnn import network

    f = lambda z: float(network(params, arch, z, masks))  # noqa: E731
    return f(0.5 * (za + zb)) - 0.5 * (f(za) + f(zb))


def fd_tangent_error(params, arch, F, h=1e-6) -> float:
    """Relative max difference between the exact tangent and central differences of stress."""
    from hyperid import icnn

    C = np.asarray(icnn.tangent(params, arch, F))
    fd = np.zeros((3, 3, 3, 3))
    for k in range(3):
        for l in range(3):
            E = np.zeros((3, 3))
            E[k, l] = h
            fd[:, :, k, l] = (np.asarray(icnn.stress(params, arch, F + E))
                              - np.asarray(icnn.stress(params, arch, F - E))) / (2 * h)
    return float(np.abs(C - fd).max() / max(np.abs(fd).max(), 1e-300))


def fd_stress_error(params, arch, F, h=1e-6) -> float:
    from hyperid import icnn

    P = np.asarray(icnn.stress(params, arch, F))
    fd = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            E = np.zeros((3, 3))
            E[i, j] = h
            fd[i, j] = (float(icnn.energy(params, arch, F + E))
                        - float(icnn.energy(params, arch, F - E))) / (2 * h)
    return float(np.abs(P - fd).max() / max(np.abs(fd).max(), 1e-300))


# --------------------------------------------------------------------------
# acceptance verdicts, echoed in the terminal summary
# --------------------------------------------------------------------------

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """record(k, ok, detail) prints one line per criterion and keeps it for the summary."""
    store = request.config.stash[VERDICTS]

    def record(k: int, ok: bool, detail: str) -> bool:
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        store[k] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(VERDICTS, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for k in sorted(store):
            terminalreporter.write_line(store[k])
