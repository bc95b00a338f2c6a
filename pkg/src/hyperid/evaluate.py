"""Scoring of learned models: deformation paths, FEM redeployment, invariant clouds."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SpecimenConfig, boundary_conditions, generate_specimen
from .errors import (DegenerateTruth, ElementInversion, NoConvergence, NonPositiveJacobian,
                     UnknownPath)
from .fem import solve_quasistatic
from .materials import invariant_terms
from .mesh import Mesh

log = logging.getLogger(__name__)

PATH_IDS = ("UT", "UC", "BT", "BC", "SS", "PS")
P_LABELS = ("P11", "P12", "P21", "P22")


def deformation_path(path_id: str, gamma: float) -> np.ndarray:
    """Plane-strain F(gamma) for one of the six evaluation paths."""
    g = float(gamma)
    if not 0.0 <= g <= 1.0:
        raise ValueError(f"gamma {g} outside [0, 1]")
    s = 1.0 + g
    blocks = {
        "UT": [[s, 0.0], [0.0, 1.0]],
        "UC": [[1.0 / s, 0.0], [0.0, 1.0]],
        "BT": [[s, 0.0], [0.0, s]],
        "BC": [[1.0 / s, 0.0], [0.0, 1.0 / s]],
        "SS": [[1.0, g], [0.0, 1.0]],
        "PS": [[s, 0.0], [0.0, 1.0 / s]],
    }
    if path_id not in blocks:
        raise UnknownPath(path_id)
    F = np.eye(3)
    F[:2, :2] = blocks[path_id]
    return F


@dataclass
class PathCurve:
    path_id: str
    gammas: np.ndarray
    W: np.ndarray
    P: np.ndarray  # (n, 4): P11, P12, P21, P22
    label: str = "model"

    def __post_init__(self):
        n = len(self.gammas)
        if len(self.W) != n or self.P.shape != (n, 4):
            raise ValueError("inconsistent curve lengths")


@dataclass
class PathPair:
    """One path evaluated for a learned model and for the ground truth."""

    pred: PathCurve
    truth: PathCurve
    member: str = "model"
    accepted: bool = True

    @property
    def path_id(self) -> str:
        return self.pred.path_id

    def relative_rmse(self) -> float:
        return relative_rmse(self.pred.W, self.truth.W)


def path_curve(model, path_id: str, gammas, label: str = "model") -> PathCurve:
    gammas = np.asarray(gammas, dtype=float)
    F = np.array([deformation_path(path_id, g) for g in gammas])
    W = np.asarray(model.energy(F), dtype=float)
    P = np.asarray(model.stress(F), dtype=float)[:, :2, :2].reshape(-1, 4)
    return PathCurve(path_id, gammas, W, P, label)


def evaluate_paths(model, truth, gammas, paths=PATH_IDS, member: str = "model",
                   accepted: bool = True) -> list[PathPair]:
    return [PathPair(path_curve(model, p, gammas, "pred"), path_curve(truth, p, gammas, "true"),
                     member, accepted)
            for p in paths]


def relative_rmse(pred, truth) -> float:
    """||pred - truth||_2 / ||truth||_2 over the sampled points."""
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    denom = math.sqrt(float(np.mean(truth ** 2)))
    if denom == 0.0:
        raise DegenerateTruth("truth is identically zero")
    return math.sqrt(float(np.mean((pred - truth) ** 2))) / denom


def r_squared(pred, truth) -> float:
    """Coefficient of determination about the identity line."""
    pred, truth = np.asarray(pred, dtype=float).ravel(), np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape or truth.size < 2:
        raise ValueError("pred and truth need equal length >= 2")
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateTruth("truth has zero variance")
    return 1.0 - float(np.sum((pred - truth) ** 2)) / ss_tot


def fiber_angle_error(alpha, alpha_true) -> float:
    """Angular distance between fiber orientations, modulo pi (radians)."""
    d = (float(alpha) - float(alpha_true)) % math.pi
    return min(d, math.pi - d)


# --------------------------------------------------------------------------
# invariant clouds
# --------------------------------------------------------------------------

def _element_invariants(F: np.ndarray):
    """(I1t, I2t, J) per deformation gradient of a (..., 3, 3) stack."""
    flat = F.reshape(-1, 3, 3)
    C = np.einsum("nki,nkj->nij", flat, flat)
    I1 = np.trace(C, axis1=1, axis2=2)
    I2 = 0.5 * (I1 ** 2 - np.einsum("nij,nij->n", C, C))
    J = np.linalg.det(flat)
    with np.errstate(invalid="ignore", divide="ignore"):
        Jm23 = np.where(J > 0, np.abs(J) ** (-2.0 / 3.0), np.nan)
    shape = F.shape[:-2]
    return (Jm23 * I1).reshape(shape), (Jm23 ** 2 * I2).reshape(shape), J.reshape(shape)


def invariant_cloud(mesh: Mesh, snapshots, strict: bool = False) -> np.ndarray:
    """(n_t, n_e, 3) array of (I1t - 3, I2t - 3, (J - 1)^2).

    Elements with det F <= 0 give NaN rows, or raise NonPositiveJacobian when
    ``strict``.
    """
    u = np.asarray(snapshots, dtype=float)
    if u.ndim == 2:
        u = u[None]
    F = mesh.geometry.deformation_gradients(u)
    I1t, I2t, J = _element_invariants(F)
    bad = np.argwhere(~(J > 0))
    if bad.size:
        if strict:
            raise NonPositiveJacobian(f"element {bad[0][1]} at snapshot {bad[0][0]}")
        log.warning("%d element states with non-positive J", len(bad))
    cloud = np.stack([I1t - 3.0, I2t - 3.0, (J - 1.0) ** 2], axis=-1)
    cloud[~(J > 0)] = np.nan
    return cloud


def path_cloud(gammas, paths=PATH_IDS) -> dict:
    out = {}
    for p in paths:
        F = np.array([deformation_path(p, g) for g in gammas])
        I1t, I2t, J = _element_invariants(F)
        out[p] = np.stack([I1t - 3.0, I2t - 3.0, (J - 1.0) ** 2], axis=-1)
    return out


# --------------------------------------------------------------------------
# FEM redeployment
# --------------------------------------------------------------------------

@dataclass
class DeployScore:
    deltas: np.ndarray  # steps that both simulations reached
    i1_true: np.ndarray  # (n_t, n_e)
    i1_pred: np.ndarray
    J_true: np.ndarray
    J_pred: np.ndarray
    reaction_true: np.ndarray  # top reaction, with delta = 0 prepended
    reaction_pred: np.ndarray
    r2: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    label: str = "model"
    cloud_true: np.ndarray | None = None  # (n_t, n_e, 3) invariants of the truth run


def _simulate(mesh, bcs, model, deltas, name, errors):
    """Solve step by step so a failure keeps the steps reached before it."""
    try:
        return solve_quasistatic(mesh, bcs, model, deltas), len(deltas)
    except (NoConvergence, ElementInversion) as exc:
        step = exc.step if exc.step is not None else 0
        errors[name] = f"{type(exc).__name__} at step {step}: {exc}"
        log.warning("%s simulation stopped at step %s", name, step)
        if step == 0:
            return None, 0
        return solve_quasistatic(mesh, bcs, model, deltas[:step]), step


def deploy_and_score(trained, truth, config: SpecimenConfig | None = None,
                     mesh: Mesh | None = None, label: str = "model") -> DeployScore:
    """Run the validation test with both models and compare element invariants."""
    config = config or SpecimenConfig(kind="validation", target_node_count=2000)
    mesh = mesh or generate_specimen(config)
    deltas = tuple(config.schedule())
    bcs = boundary_conditions(config)
    errors: dict = {}
    res_t, n_t = _simulate(mesh, bcs, truth, deltas, "truth", errors)
    res_p, n_p = _simulate(mesh, bcs, trained, deltas, "trained", errors)
    n = min(n_t, n_p)
    top = None
    ref = res_t or res_p
    if ref is not None:
        top = list(ref.group_names).index("top_y") if "top_y" in ref.group_names else 0
    geom = mesh.geometry
    if n == 0:
        empty = np.zeros((0, mesh.n_elements))
        return DeployScore(np.zeros(0), empty, empty, empty, empty, np.zeros(1), np.zeros(1),
                           {"I1": float("nan"), "J": float("nan")}, errors, label)
    I1t_t, I2t_t, J_t = _element_invariants(geom.deformation_gradients(res_t.displacements[:n]))
    I1t_p, _, J_p = _element_invariants(geom.deformation_gradients(res_p.displacements[:n]))
    r2 = {"I1": r_squared(I1t_p, I1t_t), "J": r_squared(J_p, J_t)}
    R_t = np.concatenate([[0.0], res_t.reactions[:n, top]])
    R_p = np.concatenate([[0.0], res_p.reactions[:n, top]])
    cloud = np.stack([I1t_t - 3.0, I2t_t - 3.0, (J_t - 1.0) ** 2], axis=-1)
    return DeployScore(np.asarray(deltas[:n]), I1t_t, I1t_p, J_t, J_p, R_t, R_p, r2, errors,
                       label, cloud)


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------

@dataclass
class CloudSet:
    label: str
    cloud: np.ndarray  # (n_t, n_e, 3) or (n, 3) for paths


def _fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.17g}"


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) if isinstance(v, float) else v
                        for v in r])


def _plot(path: Path, draw):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "hyperid"
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _curve_rows(c: PathCurve):
    for g, W, P in zip(c.gammas, c.W, c.P):
        yield [c.path_id, float(g), float(W), *map(float, P)]


def write_paths_table(pairs, path) -> Path:
    """Combined table: one row per (member, path, gamma)."""
    header = ["member", "accepted", "path_id", "gamma", "W_true", "W_pred"]
    for lab in P_LABELS:
        header += [f"{lab}_true", f"{lab}_pred"]
    rows = []
    for pair in pairs:
        t, p = pair.truth, pair.pred
        for k, g in enumerate(t.gammas):
            row = [pair.member, str(int(pair.accepted)), t.path_id, float(g),
                   float(t.W[k]), float(p.W[k])]
            for j in range(4):
                row += [float(t.P[k, j]), float(p.P[k, j])]
            rows.append(row)
    path = Path(path)
    _write_csv(path, header, rows)
    return path


def emit_report(results, out_dir) -> Path:
    """Write CSV tables and SVG plots for each result plus an ``index.json``.

    ``results`` may hold PathPair, DeployScore and CloudSet items.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []

    def add(name, kind, **meta):
        artifacts.append({"file": name, "kind": kind, **meta})

    for item in results:
        if isinstance(item, PathPair):
            stem = f"path_{item.member}_{item.path_id}"
            for c, tag in ((item.truth, "true"), (item.pred, "pred")):
                name = f"{stem}_{tag}.csv"
                _write_csv(out / name, ["path_id", "gamma", "W", *P_LABELS], _curve_rows(c))
                add(name, "path_curve", member=item.member, path_id=item.path_id, curve=tag,
                    accepted=item.accepted)

            def draw(ax, item=item):
                ax.plot(item.truth.gammas, item.truth.W, "k-", label="truth")
                ax.plot(item.pred.gammas, item.pred.W, "C0--" if item.accepted else "C3:",
                        label=item.member)
                ax.set_xlabel("gamma")
                ax.set_ylabel("W")
                ax.set_title(item.path_id)
                ax.legend()
            _plot(out / f"{stem}.svg", draw)
            add(f"{stem}.svg", "path_plot", member=item.member, path_id=item.path_id)
        elif isinstance(item, DeployScore):
            stem = f"deploy_{item.label}"
            _write_csv(out / f"scores_{item.label}.csv", ["invariant", "r_squared"],
                       [[k, float(v)] for k, v in sorted(item.r2.items())])
            add(f"scores_{item.label}.csv", "scores", label=item.label)
            d = np.concatenate([[0.0], item.deltas])
            _write_csv(out / f"{stem}_reactions.csv", ["delta", "R_true", "R_pred"],
                       [[float(a), float(b), float(c)]
                        for a, b, c in zip(d, item.reaction_true, item.reaction_pred)])
            add(f"{stem}_reactions.csv", "reactions", label=item.label)
            rows = [[e, t, float(item.i1_true[t, e]), float(item.i1_pred[t, e]),
                     float(item.J_true[t, e]), float(item.J_pred[t, e])]
                    for t in range(item.i1_true.shape[0]) for e in range(item.i1_true.shape[1])]
            _write_csv(out / f"{stem}_elements.csv",
                       ["element", "t", "I1_true", "I1_pred", "J_true", "J_pred"], rows)
            add(f"{stem}_elements.csv", "element_invariants", label=item.label)

            def draw_scatter(ax, item=item):
                ax.plot(item.i1_true.ravel(), item.i1_pred.ravel(), ".", ms=1, label="I1t")
                ax.plot(item.J_true.ravel(), item.J_pred.ravel(), ".", ms=1, label="J")
                lo = min(np.nanmin(item.J_true, initial=1.0), np.nanmin(item.i1_true, initial=3.0))
                hi = max(np.nanmax(item.J_true, initial=1.0), np.nanmax(item.i1_true, initial=3.0))
                ax.plot([lo, hi], [lo, hi], "k-", lw=0.8)
                ax.set_xlabel("truth")
                ax.set_ylabel("prediction")
                ax.legend()
            _plot(out / f"{stem}_scatter.svg", draw_scatter)
            add(f"{stem}_scatter.svg", "deploy_scatter", label=item.label)

            def draw_reaction(ax, item=item, d=d):
                ax.plot(d, item.reaction_true, "k-", label="truth")
                ax.plot(d, item.reaction_pred, "C0--", label=item.label)
                ax.set_xlabel("delta")
                ax.set_ylabel("top reaction")
                ax.legend()
            _plot(out / f"{stem}_reactions.svg", draw_reaction)
            add(f"{stem}_reactions.svg", "reaction_plot", label=item.label)
        elif isinstance(item, CloudSet):
            c = np.asarray(item.cloud)
            if c.ndim == 2:
                c = c[:, None, :]
            rows = [[e, t, *map(float, c[t, e])]
                    for t in range(c.shape[0]) for e in range(c.shape[1])]
            name = f"cloud_{item.label}.csv"
            _write_csv(out / name, ["element", "t", "i1_shift", "i2_shift", "j_shift_sq"], rows)
            add(name, "cloud", label=item.label)
        else:
            raise TypeError(f"cannot report {type(item).__name__}")

    (out / "index.json").write_text(json.dumps({"version": "1", "artifacts": artifacts},
                                               indent=1) + "\n", encoding="utf-8")
    return out
