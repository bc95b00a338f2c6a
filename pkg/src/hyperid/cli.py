"""Command-line entry point: generate, train, evaluate, deploy, report.

Exit codes: 0 success, 2 usage or configuration error, 3 pipeline failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, data, evaluate, train
from .errors import HyperIdError, MissingModel, SchemaError, UnknownModel
from .icnn import IcnnArchitecture, IcnnModel
from .materials import MODEL_IDS, get_model

log = logging.getLogger("hyperid")

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE = 0, 2, 3
FIBER_COUNT = {"AI45": 1, "AI60": 1, "HZ": 2}


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model: str = "NH"
    fine_nodes: int = 6000
    coarse_nodes: int = 1441
    validation_nodes: int = 2000
    hole_radius: float = 0.2
    biaxial_ratio: float = 0.5
    sigma_u: float = 0.0
    noise_seed: int = 0
    krr_bandwidth: float = 0.05
    krr_ridge: float | None = None
    newton_tol: float = 1e-10
    gamma_max: float = 1.0
    n_gamma: int = 51
    train: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)

    def train_config(self) -> train.TrainConfig:
        try:
            return train.TrainConfig(**self.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train section: {exc}") from exc

    def architecture(self, n_fibers: int | None = None) -> IcnnArchitecture:
        kw = dict(self.arch)
        if n_fibers is not None:
            kw.setdefault("n_fibers", n_fibers)
        try:
            return IcnnArchitecture(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"arch section: {exc}") from exc


def load_config(path) -> RunConfig:
    """Read a YAML (or JSON) run configuration; unknown keys are an error."""
    if path is None:
        return RunConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**doc)
    if not isinstance(cfg.train, dict) or not isinstance(cfg.arch, dict):
        raise ConfigError("train and arch sections must be mappings")
    if cfg.sigma_u < 0:
        raise ConfigError("sigma_u must be >= 0")
    return cfg


def _override(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    for name, attr in (("model", "model"), ("noise", "sigma_u"), ("seed", "noise_seed"),
                       ("fine_nodes", "fine_nodes"), ("coarse_nodes", "coarse_nodes"),
                       ("validation_nodes", "validation_nodes"), ("gamma_max", "gamma_max")):
        v = getattr(args, name, None)
        if v is not None:
            changes[attr] = v
    tr = dict(cfg.train)
    for name, key in (("ensemble", "ensemble_size"), ("epochs", "epochs"),
                      ("accept_margin", "acceptance_margin")):
        v = getattr(args, name, None)
        if v is not None:
            tr[key] = v
    if getattr(args, "command", None) == "train" and args.seed is not None:
        tr["seed"] = args.seed
        changes.pop("noise_seed", None)
    changes["train"] = tr
    out = replace(cfg, **changes)
    if out.sigma_u < 0:
        raise ConfigError("--noise must be >= 0")
    return out


def _echo(out_dir: Path, cfg: RunConfig, command: str):
    doc = {"command": command, "version": __version__, **asdict(cfg)}
    (out_dir / "run_config.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _mse(a: data.SnapshotDataset, b: data.SnapshotDataset) -> float:
    return float(np.mean((a.displacements - b.displacements) ** 2))


def cmd_generate(cfg: RunConfig, out: Path) -> Path:
    model = get_model(cfg.model)
    spec = data.SpecimenConfig(kind="training", target_node_count=cfg.fine_nodes,
                               hole_radius=cfg.hole_radius, biaxial_ratio=cfg.biaxial_ratio)
    fine = data.generate_specimen(spec)
    log.info("fine mesh %d nodes; simulating %s", fine.n_nodes, cfg.model)
    raw = data.run_experiment(fine, spec, model, newton_tol=cfg.newton_tol)
    ds = raw
    extra = {"fine_node_target": cfg.fine_nodes, "coarse_node_target": cfg.coarse_nodes}
    if cfg.sigma_u > 0:
        noisy = data.add_noise(raw, cfg.sigma_u, cfg.noise_seed)
        ds = data.denoise_krr(noisy, cfg.krr_bandwidth, cfg.krr_ridge)
        extra["mse_noisy_vs_raw"] = _mse(noisy, raw)
        extra["mse_denoised_vs_raw"] = _mse(ds, raw)
        log.info("denoising MSE %.3e -> %.3e", extra["mse_noisy_vs_raw"],
                 extra["mse_denoised_vs_raw"])
    coarse = data.generate_specimen(replace(spec, target_node_count=cfg.coarse_nodes))
    proj = data.project_to_coarse(ds, coarse)
    proj = proj.evolve("projected", provenance={**extra, "sigma_u": cfg.sigma_u,
                                                "seed": cfg.noise_seed, "model_id": cfg.model})
    data.write_dataset(proj, out)
    _echo(out, cfg, "generate")
    return out


def cmd_train(cfg: RunConfig, data_dir: Path, out: Path) -> Path:
    ds = data.read_dataset(data_dir)
    model_id = ds.provenance.get("model_id")
    arch = cfg.architecture(FIBER_COUNT.get(model_id, 0))
    tcfg = cfg.train_config()
    if tcfg.reaction_weight != 1.0:
        log.warning("reaction weight %g differs from the unweighted loss", tcfg.reaction_weight)
    log.info("training %d members x %d epochs on %d nodes, %d snapshots",
             tcfg.ensemble_size, tcfg.epochs, ds.mesh.n_nodes, ds.n_snapshots)

    def progress(r):
        log.info("member seed %d: final loss %.6g%s", r.seed, r.final_loss,
                 f" ({r.error})" if r.error else "")
    report = train.train_ensemble(ds, arch, tcfg, progress=progress)
    train.write_ensemble(report, out, extra={"dataset": str(data_dir), "model_id": model_id})
    _echo(out, cfg, "train")
    best = report.members[report.best_index]
    log.info("best member %d (seed %d), loss %.6g; accepted %s", report.best_index, best.seed,
             best.final_loss, report.accepted)
    return out


def _load_members(run_dir: Path):
    doc, models = train.read_ensemble(run_dir)
    if not any(m is not None for m in models):
        raise MissingModel(f"no member models in {run_dir}")
    return doc, models


def _truth_id(cfg: RunConfig, doc: dict, explicit: str | None = None) -> str:
    """An explicit --model wins, then the id recorded by train, then the config."""
    return explicit or doc.get("model_id") or cfg.model


def _member_pairs(cfg: RunConfig, doc: dict, models: list, truth):
    gammas = np.linspace(0.0, cfg.gamma_max, cfg.n_gamma)
    pairs, rows = [], []
    for entry, m in zip(doc["members"], models):
        if m is None:
            continue
        name = f"member_{entry['index']:03d}"
        ps = evaluate.evaluate_paths(m, truth, gammas, member=name, accepted=entry["accepted"])
        pairs += ps
        for p in ps:
            rows.append({"member": name, "accepted": entry["accepted"], "path_id": p.path_id,
                         "relative_rmse_W": p.relative_rmse()})
        if len(getattr(truth, "fiber_angles", ())) and m.arch.n_fibers:
            err = [evaluate.fiber_angle_error(a, b)
                   for a, b in zip(sorted(m.fiber_angles), sorted(truth.fiber_angles))]
            rows.append({"member": name, "accepted": entry["accepted"], "path_id": "fiber",
                         "fiber_angles_deg": [float(np.degrees(a)) for a in m.fiber_angles],
                         "fiber_angle_error_deg": [float(np.degrees(e)) for e in err]})
    return pairs, rows


def _write_evaluation(out: Path, pairs, rows, extra_items=()):
    out.mkdir(parents=True, exist_ok=True)
    evaluate.write_paths_table(pairs, out / "paths.csv")
    evaluate.emit_report(list(pairs) + list(extra_items), out)
    (out / "summary.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")


def cmd_evaluate(cfg: RunConfig, run_dir: Path, out: Path, truth_id: str | None = None) -> list:
    doc, models = _load_members(run_dir)
    truth = get_model(_truth_id(cfg, doc, truth_id))
    pairs, rows = _member_pairs(cfg, doc, models, truth)
    _write_evaluation(out, pairs, rows)
    _echo(out, cfg, "evaluate")
    return rows


def _deploy_best(cfg: RunConfig, doc: dict, models: list, truth) -> evaluate.DeployScore:
    best = models[doc["best_index"]]
    if best is None:
        raise MissingModel("best member model file missing")
    spec = data.SpecimenConfig(kind="validation", target_node_count=cfg.validation_nodes)
    score = evaluate.deploy_and_score(best, truth, spec, label="best")
    log.info("R2 I1 %.4f, J %.4f", score.r2["I1"], score.r2["J"])
    return score


def cmd_deploy(cfg: RunConfig, run_dir: Path, out: Path,
               truth_id: str | None = None) -> evaluate.DeployScore:
    doc, models = _load_members(run_dir)
    score = _deploy_best(cfg, doc, models, get_model(_truth_id(cfg, doc, truth_id)))
    evaluate.emit_report([score], out)
    _echo(out, cfg, "deploy")
    return score


def cmd_report(cfg: RunConfig, run_dir: Path, data_dir: Path | None, out: Path,
               deploy: bool = True, truth_id: str | None = None) -> Path:
    doc, models = _load_members(run_dir)
    truth = get_model(_truth_id(cfg, doc, truth_id))
    pairs, rows = _member_pairs(cfg, doc, models, truth)
    items = []
    if data_dir is not None:
        ds = data.read_dataset(data_dir)
        items.append(evaluate.CloudSet("training",
                                       evaluate.invariant_cloud(ds.mesh, ds.displacements)))
    for pid, c in evaluate.path_cloud(np.linspace(0.0, cfg.gamma_max, cfg.n_gamma)).items():
        items.append(evaluate.CloudSet(f"path_{pid}", c))
    if deploy:
        score = _deploy_best(cfg, doc, models, truth)
        items.append(score)
        if score.cloud_true is not None:
            items.append(evaluate.CloudSet("validation", score.cloud_true))
    _write_evaluation(out, pairs, rows, items)
    _echo(out, cfg, "report")
    return out


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate, add noise, denoise and project a dataset")
    g.add_argument("--model", help=f"benchmark id, one of {', '.join(MODEL_IDS)}")
    g.add_argument("--noise", type=float, help="displacement noise std (0 disables)")
    g.add_argument("--seed", type=int, help="noise seed")
    g.add_argument("--fine-nodes", type=int)
    g.add_argument("--coarse-nodes", type=int)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train an ensemble of networks on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ensemble", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--accept-margin", type=float)

    for name, helptext in (("evaluate", "compare members with the truth along six paths"),
                           ("deploy", "redeploy the best member on the validation plate"),
                           ("report", "paths, invariant clouds and redeployment together")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--run", required=True, help="directory written by train")
        e.add_argument("--out", required=True)
        e.add_argument("--model", help="ground-truth id (default: from the run)")
        e.add_argument("--gamma-max", type=float)
        if name != "evaluate":
            e.add_argument("--validation-nodes", type=int)
        if name == "report":
            e.add_argument("--data", help="training dataset for the invariant cloud")
            e.add_argument("--no-deploy", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("jax").setLevel(logging.WARNING)
    try:
        cfg = _override(load_config(args.config), args)
        if cfg.model not in MODEL_IDS:
            raise UnknownModel(f"unknown model id {cfg.model!r}; expected one of {MODEL_IDS}")
        out = Path(args.out)
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, Path(args.data), out)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, Path(args.run), out, args.model)
        elif args.command == "deploy":
            cmd_deploy(cfg, Path(args.run), out, args.model)
        elif args.command == "report":
            cmd_report(cfg, Path(args.run), Path(args.data) if args.data else None, out,
                       deploy=not args.no_deploy, truth_id=args.model)
    except (ConfigError, UnknownModel) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HyperIdError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
