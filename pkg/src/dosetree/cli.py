"""Command-line entry points: fit, simulate, recommend.

Configuration is a single YAML file (versioned, documented in the README);
``--seed`` and ``--out`` override the config. Exit codes: 0 success, 1 usage
error, 2 data error, 3 pipeline error. On failure a machine-readable
``error.json`` is written to the output directory.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd
import yaml

from .data import Dataset, DoseScaler, StageData, load_csv, warfarin_reward
from .dtr import Policy, fit_dtr, recommend as dtr_recommend
from .effectcurve import DEFAULT_CANDIDATES, SmootherConfig
from .errors import DoseTreeError, ParseError, SchemaError
from .nuisance import RegressorConfig
from .pipeline import PipelineConfig, StageFit
from .sim import ScenarioSpec, run_comparison
from .tao import AnnealSchedule, DoseTree, TaoConfig

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_PIPELINE = 3

POLICY_SCHEMA_VERSION = 1
CONFIG_VERSION = 1


# ---------------------------------------------------------------- serialization

def policy_to_dict(policy: Policy):
    stages = []
    for fit in policy.stage_fits:
        stages.append({
            "feature_names": list(fit.feature_names),
            "scaler": {"a_min": fit.scaler.a_min, "a_max": fit.scaler.a_max},
            "tree": fit.tree.to_dict(list(fit.feature_names)),
        })
    return {
        "schema_version": POLICY_SCHEMA_VERSION,
        "direction": policy.direction,
        "psi": policy.psi,
        "stages": stages,
    }


def policy_from_dict(payload):
    if payload.get("schema_version") != POLICY_SCHEMA_VERSION:
        raise SchemaError(
            f"unsupported policy schema version {payload.get('schema_version')}")
    fits = []
    for stage in payload["stages"]:
        names = tuple(stage["feature_names"])
        scaler = DoseScaler(stage["scaler"]["a_min"], stage["scaler"]["a_max"])
        tree = DoseTree.from_dict(stage["tree"], list(names))
        fits.append(StageFit(tree=tree, scaler=scaler, feature_names=names,
                             outcome_model=None, grid=None, diagnostics={}))
    return Policy(tuple(fits), direction=payload["direction"],
                  psi=payload["psi"])


def tree_to_dot(tree: DoseTree, feature_names, scaler: DoseScaler,
                name="dose_tree"):
    lines = [f"digraph {name} {{", "  node [shape=box];"]
    counter = [0]

    def walk(node):
        nid = f"n{counter[0]}"
        counter[0] += 1
        if node.is_leaf:
            dose = float(scaler.unscale(node.dose))
            lines.append(
                f'  {nid} [label="dose = {dose:.4g}\\nn = {node.n_samples}"];')
            return nid
        fname = feature_names[node.rule.feature]
        lines.append(f'  {nid} [label="{fname} <= {node.rule.threshold:.4g}"];')
        left = walk(node.left)
        right = walk(node.right)
        lines.append(f'  {nid} -> {left} [label="yes"];')
        lines.append(f'  {nid} -> {right} [label="no"];')
        return nid

    walk(tree.root)
    lines.append("}")
    return "\n".join(lines) + "\n"


def _sha256(path: Path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, config_text, seed, artifacts):
    manifest = {
        "schema_version": CONFIG_VERSION,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "artifacts": {name: _sha256(out_dir / name) for name in sorted(artifacts)},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- config plumbing

def _load_config(path):
    text = Path(path).read_text()
    cfg = yaml.safe_load(text)
    if not isinstance(cfg, dict):
        raise click.UsageError("config must be a YAML mapping")
    if cfg.get("version") != CONFIG_VERSION:
        raise click.UsageError(
            f"config version must be {CONFIG_VERSION}, got {cfg.get('version')}")
    return cfg, text


def _require(cfg, key):
    if key not in cfg:
        raise click.UsageError(f"config is missing required key {key!r}")
    return cfg[key]


def _pipeline_config(node, seed):
    node = node or {}
    candidates = tuple(node.get("bandwidth_candidates", DEFAULT_CANDIDATES))
    smoother = SmootherConfig(
        bandwidth=node.get("bandwidth", "auto"),
        kernel=node.get("smoothing_kernel", "epanechnikov"),
        candidates=candidates,
    )
    tao = TaoConfig(
        height=int(node.get("height", 2)),
        n0=node.get("n0"),
        max_sweeps=int(node.get("max_sweeps", 50)),
        tol=float(node.get("tol", 1e-9)),
        restarts=int(node.get("restarts", 40)),
        seed=seed,
    )
    anneal = AnnealSchedule(
        alpha0=node.get("alpha0"),
        deterministic=bool(node.get("deterministic", False)),
    )
    regressor = RegressorConfig(
        n_estimators=int(node.get("n_estimators", 200)),
        max_depth=int(node.get("max_depth", 4)),
        learning_rate=float(node.get("learning_rate", 0.1)),
        seed=seed % (2 ** 31),
    )
    curve_regressor = RegressorConfig(
        n_estimators=int(node.get("curve_n_estimators", 800)),
        max_depth=int(node.get("curve_max_depth", 6)),
        learning_rate=float(node.get("curve_learning_rate", 0.05)),
        early_stopping=0,
        seed=seed % (2 ** 31),
    )
    return PipelineConfig(
        grid_size=int(node.get("grid_size", 100)),
        n_leaf=node.get("n_leaf"),
        combine=node.get("combine", "min"),
        kernel_passes=int(node.get("kernel_passes", 2)),
        smoother=smoother,
        tao=tao,
        anneal=anneal,
        regressor=regressor,
        curve_regressor=curve_regressor,
        seed=seed,
    )


def _load_data(section):
    path = _require(section, "data")
    if not Path(path).exists():
        raise FileNotFoundError(f"data file not found: {path}")
    stages = _require(section, "stages")
    direction = section.get("direction", "minimize")
    reward = section.get("reward")
    schemas = []
    for stage in stages:
        schemas.append({
            "covariates": list(_require(stage, "covariates")),
            "dose": _require(stage, "dose"),
            "outcome": _require(stage, "outcome"),
            "direction": direction,
            "reward": reward,
        })
    datasets = tuple(load_csv(path, schema) for schema in schemas)
    return datasets[0] if len(datasets) == 1 else StageData(datasets)


def _fail(out_dir: Path, exc, code):
    record = {"error": type(exc).__name__, "message": str(exc)}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "error.json").write_text(
            json.dumps(record, indent=2, sort_keys=True) + "\n")
    except OSError:
        pass
    click.echo(f"error: {record['error']}: {record['message']}", err=True)
    sys.exit(code)


def _guarded(out_dir, fn):
    try:
        fn()
    except click.UsageError:
        raise
    except (SchemaError, ParseError, FileNotFoundError, ValueError) as exc:
        _fail(out_dir, exc, EXIT_DATA)
    except (DoseTreeError, Exception) as exc:
        _fail(out_dir, exc, EXIT_PIPELINE)


# ---------------------------------------------------------------- commands

@click.group()
def cli():
    """Dose decision trees for continuous-dosage treatment regimes."""


def _common_options(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(exists=False))(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="override the config seed")(fn)
    fn = click.option("--out", "out_dir", default="out",
                      type=click.Path(file_okay=False))(fn)
    fn = click.option("--threads", type=int, default=0,
                      help="worker count; 0 = auto")(fn)
    return fn


def _resolve_seed(cfg, seed):
    if seed is not None:
        return int(seed)
    if "seed" not in cfg:
        raise click.UsageError("a seed is mandatory (config key 'seed' or --seed)")
    return int(cfg["seed"])


@cli.command("fit")
@_common_options
def cmd_fit(config_path, seed, out_dir, threads):
    """Fit a dose-tree policy from a CSV dataset."""
    if not Path(config_path).exists():
        raise click.UsageError(f"config not found: {config_path}")
    cfg, text = _load_config(config_path)
    seed = _resolve_seed(cfg, seed)
    out = Path(out_dir)

    def run():
        section = _require(cfg, "fit")
        data = _load_data(section)
        pipeline_cfg = _pipeline_config(section.get("pipeline"), seed)
        psi = section.get("psi", "sum")
        policy = fit_dtr(data, pipeline_cfg, psi=psi)
        out.mkdir(parents=True, exist_ok=True)
        artifacts = []

        payload = policy_to_dict(policy)
        (out / "policy.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n")
        artifacts.append("policy.json")

        diagnostics = {}
        for t, fit in enumerate(policy.stage_fits, start=1):
            dot_name = f"tree_stage{t}.dot"
            (out / dot_name).write_text(
                tree_to_dot(fit.tree, list(fit.feature_names), fit.scaler,
                            name=f"stage{t}"))
            artifacts.append(dot_name)
            if fit.leaf_curves is not None:
                csv_name = f"leaf_curves_stage{t}.csv"
                _write_leaf_curves(out / csv_name, fit)
                artifacts.append(csv_name)
            diagnostics[f"stage{t}"] = fit.diagnostics
        (out / "diagnostics.json").write_text(
            json.dumps(diagnostics, indent=2, sort_keys=True, default=float)
            + "\n")
        artifacts.append("diagnostics.json")
        _write_manifest(out, text, seed, artifacts)

    _guarded(out, run)


def _write_leaf_curves(path, fit: StageFit):
    lines = ["leaf,dose,value"]
    doses = fit.scaler.unscale(fit.grid.points)
    for leaf_id, row in enumerate(fit.leaf_curves):
        for dose, val in zip(doses, row):
            lines.append(f"{leaf_id},{dose:.10g},{val:.10g}")
    Path(path).write_text("\n".join(lines) + "\n")


@cli.command("simulate")
@_common_options
def cmd_simulate(config_path, seed, out_dir, threads):
    """Replicated scenario comparison of dosetree, CART and random dosing."""
    if not Path(config_path).exists():
        raise click.UsageError(f"config not found: {config_path}")
    cfg, text = _load_config(config_path)
    seed = _resolve_seed(cfg, seed)
    out = Path(out_dir)

    def run():
        section = _require(cfg, "simulate")
        spec = ScenarioSpec(
            scenario=int(_require(section, "scenario")),
            n=int(section.get("n", 500)),
            p=int(section.get("p", 10)),
            seed=seed,
            c0=float(section.get("c0", ScenarioSpec.__dataclass_fields__["c0"].default)),
            noise_as_variance=bool(section.get("noise_as_variance", True)),
        )
        replications = int(section.get("replications", 20))
        n_test = int(section.get("n_test", 1000))
        methods = tuple(section.get("methods", ["dosetree", "cart", "random"]))
        pipeline_cfg = _pipeline_config(section.get("pipeline"), seed)
        n_jobs = threads if threads > 0 else 1
        reports = run_comparison(spec, pipeline_cfg, methods=methods,
                                 replications=replications, n_test=n_test,
                                 seed=seed, threads=n_jobs)
        out.mkdir(parents=True, exist_ok=True)
        _write_results(out, reports, replications)
        _write_manifest(out, text, seed, ["results.csv", "results.txt"])

    _guarded(out, run)


def _write_results(out: Path, reports, replications):
    degenerate = replications == 1
    stages = len(next(iter(reports.values())).rmse_mean)
    cols = ["method", "regret_mean", "regret_sd"]
    for s in range(1, stages + 1):
        cols += [f"rmse_s{s}_mean", f"rmse_s{s}_sd"]
    cols.append("degenerate_sd")
    rows = []
    for method, rep in reports.items():
        row = [method, f"{rep.regret_mean:.6g}", f"{rep.regret_sd:.6g}"]
        for m, sd in zip(rep.rmse_mean, rep.rmse_sd):
            row += [f"{m:.6g}", f"{sd:.6g}"]
        row.append(str(degenerate).lower())
        rows.append(row)
    (out / "results.csv").write_text(
        "\n".join([",".join(cols)] + [",".join(r) for r in rows]) + "\n")
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text_lines = [fmt.format(*cols)] + [fmt.format(*r) for r in rows]
    if degenerate:
        text_lines.append("note: single replication; SDs are degenerate (0)")
    (out / "results.txt").write_text("\n".join(text_lines) + "\n")


@cli.command("recommend")
@_common_options
def cmd_recommend(config_path, seed, out_dir, threads):
    """Emit per-subject, per-stage recommended doses for a saved policy."""
    if not Path(config_path).exists():
        raise click.UsageError(f"config not found: {config_path}")
    cfg, text = _load_config(config_path)
    out = Path(out_dir)

    def run():
        section = _require(cfg, "recommend")
        policy_path = Path(_require(section, "policy"))
        history_path = Path(_require(section, "history"))
        for path in (policy_path, history_path):
            if not path.exists():
                raise FileNotFoundError(f"file not found: {path}")
        substitute = bool(section.get("substitute_recommended", False))
        policy = policy_from_dict(json.loads(policy_path.read_text()))
        frame = pd.read_csv(history_path)
        stages = _require(section, "stages")
        covs, doses, rewards = [], [], []
        for t, stage in enumerate(stages, start=1):
            cov_cols = list(_require(stage, "covariates"))
            for col in cov_cols:
                if col not in frame.columns:
                    raise SchemaError(f"missing history column {col!r}")
            covs.append(frame[cov_cols].to_numpy(dtype=float)
                        if len(frame) else np.empty((0, len(cov_cols))))
            if t < len(stages):
                dose_col = _require(stage, "dose")
                outcome_col = _require(stage, "outcome")
                for col in (dose_col, outcome_col):
                    if col not in frame.columns:
                        raise SchemaError(f"missing history column {col!r}")
                doses.append(frame[dose_col].to_numpy(dtype=float))
                reward_vals = frame[outcome_col].to_numpy(dtype=float)
                if section.get("reward") == "warfarin" and len(reward_vals):
                    reward_vals = warfarin_reward(reward_vals)
                rewards.append(reward_vals)
        out.mkdir(parents=True, exist_ok=True)
        header = ",".join(f"dose_s{t}" for t in range(1, policy.n_stages + 1))
        if len(frame) == 0:
            (out / "doses.csv").write_text(header + "\n")
            return
        result = dtr_recommend(policy, covs, doses or None, rewards or None,
                               substitute_recommended=substitute)
        lines = [header]
        for row in result:
            lines.append(",".join(f"{v:.10g}" for v in row))
        (out / "doses.csv").write_text("\n".join(lines) + "\n")

    _guarded(out, run)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        sys.exit(EXIT_USAGE)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_USAGE)
    except click.exceptions.Abort:
        sys.exit(EXIT_USAGE)
    return 0


if __name__ == "__main__":
    main()
