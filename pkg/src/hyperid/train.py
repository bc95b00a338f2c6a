"""Unsupervised training of the energy network from displacements and reactions.

The loss at each snapshot is the squared force imbalance at every free DOF plus
the squared mismatch between each measured reaction and the summed nodal forces
of its constraint group. Gradients with respect to the network weights and the
fiber-angle variables are exact (reverse mode through the stress, itself an
exact derivative of the energy).
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import optax

from . import icnn
from .data import SnapshotDataset
from .errors import AllMembersFailed, ElementInversion, NonFiniteLoss, SchemaError
from .fem import assemble_forces, group_layout, residual_check, split_forces
from .icnn import IcnnArchitecture, IcnnModel

log = logging.getLogger(__name__)

REPORT_VERSION = "1"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    base_lr: float = 0.001
    max_lr: float = 0.1
    lr_up_steps: int = 50
    lr_down_steps: int = 50
    dropout: float = 0.2
    ensemble_size: int = 5
    acceptance_margin: float = 0.2
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    reaction_weight: float = 1.0
    objective: str = "log"
    precision: str = "float32"

    def __post_init__(self):
        if self.objective not in ("log", "plain"):
            raise ValueError("objective must be 'log' or 'plain'")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        for name in ("epochs", "base_lr", "max_lr", "lr_up_steps", "lr_down_steps",
                     "ensemble_size", "adam_eps", "reaction_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.acceptance_margin < 0:
            raise ValueError("acceptance_margin must be >= 0")


def cyclic_lr(epoch, cfg: TrainConfig):
    """Triangular wave between base_lr and max_lr, one step per epoch."""
    period = cfg.lr_up_steps + cfg.lr_down_steps
    pos = epoch % period
    span = cfg.max_lr - cfg.base_lr
    up = cfg.base_lr + span * pos / cfg.lr_up_steps
    down = cfg.max_lr - span * (pos - cfg.lr_up_steps) / cfg.lr_down_steps
    if isinstance(epoch, (int, np.integer)):
        return float(up if pos <= cfg.lr_up_steps else down)
    return jnp.where(pos <= cfg.lr_up_steps, up, down)


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

class _StressFunction:
    def __init__(self, fn):
        self.stress = fn


def physics_loss(ds: SnapshotDataset, model_eval, reaction_weight: float = 1.0) -> float:
    """Force-balance loss of a dataset under a constitutive model (or stress function)."""
    model = model_eval if hasattr(model_eval, "stress") else _StressFunction(model_eval)
    total = 0.0
    for t in range(ds.n_snapshots):
        try:
            free_res, sums = residual_check(ds.mesh, ds.displacements[t], model, ds.partition)
        except ElementInversion as exc:
            raise ElementInversion(exc.element_index, step=t) from exc
        total += float(np.sum(free_res ** 2))
        total += reaction_weight * float(np.sum((ds.reactions[t] - sums) ** 2))
    return total


class LossProblem:
    """Precomputed data and the jitted loss for one dataset and architecture.

    ``dtype`` is the compute precision inside the loss; parameters stay float64
    and gradients come back as float64.
    """

    def __init__(self, ds: SnapshotDataset, arch: IcnnArchitecture, reaction_weight=1.0,
                 dtype=jnp.float64):
        self.arch = arch
        self.dtype = jnp.dtype(dtype)
        geom = ds.mesh.geometry
        F = geom.deformation_gradients(ds.displacements)
        J = np.linalg.det(F)
        bad = np.argwhere(~(J > 0))
        if bad.size:
            t, e = bad[0]
            raise ElementInversion(e, step=int(t))
        self.n_snapshots, self.n_elements = F.shape[:2]
        self.F = jnp.asarray(F, dtype=self.dtype)
        self.R = jnp.asarray(ds.reactions, dtype=self.dtype)
        self.geom = (jnp.asarray(geom.grad_N, dtype=self.dtype),
                     jnp.asarray(geom.area, dtype=self.dtype),
                     jnp.asarray(geom.elements))
        self.n_nodes = geom.n_nodes
        self.free = jnp.asarray(ds.partition.free)
        self.layout = tuple(jnp.asarray(a) for a in group_layout(ds.partition))
        self.n_groups = ds.partition.n_groups
        self.reaction_weight = float(reaction_weight)
        self.loss = jax.jit(self._loss)
        self.value_and_grad = jax.jit(jax.value_and_grad(self._loss))
        self._steps = {}

    def _loss(self, params, key=None):
        """Loss of all snapshots; ``key`` switches dropout on (one mask per element)."""
        arch, dt = self.arch, self.dtype
        params = jax.tree_util.tree_map(lambda x: x.astype(dt), params)
        W0, H = icnn.corrections(params, arch)
        stress = jax.grad(icnn.energy_with, argnums=2)
        F = self.F.reshape(-1, 3, 3)
        if key is None:
            P = jax.vmap(lambda Fe: stress(params, arch, Fe, W0, H))(F)
        else:
            masks = [m.astype(dt) for m in icnn.dropout_masks(key, arch, (F.shape[0],))]
            P = jax.vmap(lambda Fe, m: stress(params, arch, Fe, W0, H, m))(F, masks)
        P = P.reshape(self.n_snapshots, self.n_elements, 3, 3)

        def snapshot_loss(P_t, R_t):
            f = assemble_forces(P_t, *self.geom, n_nodes=self.n_nodes)
            free_res, sums = split_forces(f, self.free, self.layout, self.n_groups)
            return jnp.sum(free_res ** 2) + self.reaction_weight * jnp.sum((R_t - sums) ** 2)

        per = jax.vmap(snapshot_loss)(P, self.R)
        total = per[0]
        for t in range(1, self.n_snapshots):  # fixed ascending order
            total = total + per[t]
        return total

    def step_fn(self, cfg: "TrainConfig"):
        """Jitted Adam step for ``cfg``, compiled once and shared by ensemble members."""
        sig = (cfg.base_lr, cfg.max_lr, cfg.lr_up_steps, cfg.lr_down_steps,
               cfg.adam_b1, cfg.adam_b2, cfg.adam_eps, cfg.objective)
        if sig in self._steps:
            return self._steps[sig]
        opt = optimizer(cfg)
        log_obj = cfg.objective == "log"

        def objective(params, key):
            value = self._loss(params, key)
            return (jnp.log(value) if log_obj else value), value

        @jax.jit
        def step(params, state, key):
            (_, value), grads = jax.value_and_grad(objective, has_aux=True)(params, key)
            updates, state = opt.update(grads, state, params)
            return optax.apply_updates(params, updates), state, value

        self._steps[sig] = (opt, step)
        return opt, step


def optimizer(cfg: "TrainConfig"):
    return optax.adam(lambda count: cyclic_lr(count, cfg), b1=cfg.adam_b1,
                      b2=cfg.adam_b2, eps=cfg.adam_eps)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    initial_eval_loss: float = float("nan")
    final_eval_loss: float = float("nan")

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(np.asarray(self.loss, dtype=float))


def _arch_with_dropout(arch: IcnnArchitecture, cfg: TrainConfig) -> IcnnArchitecture:
    if arch.dropout_rate == cfg.dropout:
        return arch
    return IcnnArchitecture(**{**asdict(arch), "dropout_rate": cfg.dropout})


def train_one(ds: SnapshotDataset, arch: IcnnArchitecture, cfg: TrainConfig,
              member_seed: int, problem: LossProblem | None = None,
              exact: LossProblem | None = None):
    """Train one network from a seeded random start. Returns (params, history).

    Recorded losses are the physics loss itself, whatever the objective; the
    initial and final values are re-evaluated in float64 with dropout off.
    """
    arch = _arch_with_dropout(arch, cfg)
    if problem is None or problem.arch != arch:
        problem = LossProblem(ds, arch, cfg.reaction_weight, cfg.precision)
    if problem.dtype == jnp.float64:
        exact = problem
    elif exact is None or exact.arch != arch:
        exact = LossProblem(ds, arch, cfg.reaction_weight, jnp.float64)
    opt, step = problem.step_fn(cfg)
    params = icnn.init_parameters(arch, member_seed)
    state = opt.init(params)

    history = TrainHistory()
    history.initial_eval_loss = float(exact.loss(params))
    base_key = jax.random.key(member_seed, impl="rbg")
    use_dropout = arch.dropout_rate > 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        key = jax.random.fold_in(base_key, epoch) if use_dropout else None
        params, state, value = step(params, state, key)
        value = float(value)
        if not math.isfinite(value):
            raise NonFiniteLoss(epoch)
        history.loss.append(value)
        history.lr.append(cyclic_lr(epoch, cfg))
        history.wall.append(time.perf_counter() - t0)
    history.final_eval_loss = float(exact.loss(params))
    if not math.isfinite(history.final_eval_loss):
        raise NonFiniteLoss(cfg.epochs)
    return jax.tree_util.tree_map(np.asarray, params), history


@dataclass
class MemberResult:
    seed: int
    final_loss: float
    accepted: bool = False
    params: dict | None = None
    history: TrainHistory | None = None
    error: str | None = None


@dataclass
class EnsembleReport:
    members: list
    best_index: int
    acceptance_margin: float
    arch: IcnnArchitecture | None = None
    config: TrainConfig | None = None

    @property
    def accepted(self) -> list:
        return [i for i, m in enumerate(self.members) if m.accepted]

    def model(self, index: int | None = None) -> IcnnModel:
        i = self.best_index if index is None else index
        m = self.members[i]
        return IcnnModel(m.params, self.arch, {"seed": m.seed, "final_loss": m.final_loss})


def acceptance(losses, margin: float) -> tuple[list[bool], int]:
    """Accept members within ``(1 + margin) * min`` of the lowest finite loss."""
    losses = np.asarray(losses, dtype=float)
    finite = np.isfinite(losses)
    if not finite.any():
        raise AllMembersFailed("every ensemble member failed")
    best = int(np.argmin(np.where(finite, losses, np.inf)))
    limit = (1.0 + margin) * losses[best]
    return [bool(f and l <= limit) for f, l in zip(finite, losses)], best


def build_problems(ds: SnapshotDataset, arch: IcnnArchitecture, cfg: TrainConfig):
    """(training problem, float64 evaluation problem), shareable across members."""
    arch = _arch_with_dropout(arch, cfg)
    train_p = LossProblem(ds, arch, cfg.reaction_weight, cfg.precision)
    if train_p.dtype == jnp.float64:
        return train_p, train_p
    return train_p, LossProblem(ds, arch, cfg.reaction_weight, jnp.float64)


def _train_member(args):
    ds, arch, cfg, seed, problems = args
    problems = problems or (None, None)
    try:
        params, hist = train_one(ds, arch, cfg, seed, *problems)
        return MemberResult(seed, hist.final_eval_loss, params=params, history=hist)
    except (NonFiniteLoss, ElementInversion, FloatingPointError) as exc:
        log.warning("member seed %d rejected: %s", seed, exc)
        return MemberResult(seed, float("nan"), error=str(exc))


def _n_workers(n_members: int) -> int:
    try:
        cap = int(os.environ.get("EUCLID_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_members))


def train_ensemble(ds: SnapshotDataset, arch: IcnnArchitecture, cfg: TrainConfig,
                   progress=None) -> EnsembleReport:
    arch = _arch_with_dropout(arch, cfg)
    seeds = [cfg.seed + k for k in range(cfg.ensemble_size)]
    workers = _n_workers(len(seeds))
    if workers > 1:
        ctx = get_context("spawn")
        with ProcessPoolExecutor(workers, mp_context=ctx) as pool:
            results = list(pool.map(_train_member,
                                     [(ds, arch, cfg, s, None) for s in seeds]))
    else:
        problems = build_problems(ds, arch, cfg)
        results = []
        for s in seeds:
            results.append(_train_member((ds, arch, cfg, s, problems)))
            if progress:
                progress(results[-1])
    flags, best = acceptance([r.final_loss for r in results], cfg.acceptance_margin)
    for r, f in zip(results, flags):
        r.accepted = f
    return EnsembleReport(results, best, cfg.acceptance_margin, arch, cfg)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def write_ensemble(report: EnsembleReport, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    members = []
    for i, m in enumerate(report.members):
        entry = {"index": i, "seed": m.seed,
                 "final_loss": m.final_loss if math.isfinite(m.final_loss) else None,
                 "accepted": m.accepted, "model_file": None, "history_file": None,
                 "error": m.error}
        if m.params is not None:
            name = f"member_{i:03d}.json"
            report.model(i).save(out / name)
            entry["model_file"] = name
            hname = f"history_{i:03d}.csv"
            with open(out / hname, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["epoch", "loss", "lr", "wall_seconds"])
                for e, (l, lr, wt) in enumerate(zip(m.history.loss, m.history.lr,
                                                    m.history.wall)):
                    w.writerow([e, f"{l:.17g}", f"{lr:.17g}", f"{wt:.6f}"])
            entry["history_file"] = hname
            entry["initial_loss"] = m.history.initial_eval_loss
        members.append(entry)
    doc = {
        "version": REPORT_VERSION,
        "acceptance_margin": report.acceptance_margin,
        "best_index": report.best_index,
        "architecture": asdict(report.arch) if report.arch else None,
        "train_config": asdict(report.config) if report.config else None,
        "members": members,
    }
    if extra:
        doc.update(extra)
    (out / "ensemble.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return out


def read_ensemble(run_dir) -> tuple[dict, list]:
    """Load the ensemble index and every member model that has a file."""
    run = Path(run_dir)
    index = run / "ensemble.json"
    if not index.exists():
        raise SchemaError("ensemble.json", "file missing")
    doc = json.loads(index.read_text(encoding="utf-8"))
    if doc.get("version") != REPORT_VERSION:
        raise SchemaError("ensemble.json.version", f"unsupported {doc.get('version')!r}")
    models = []
    for m in doc["members"]:
        models.append(IcnnModel.load(run / m["model_file"]) if m["model_file"] else None)
    return doc, models
