"""Command-line front end.

Subcommands: analyze, calibrate, train, plan, simulate, replay. Every run
writes its outputs plus a ``manifest.json`` (command, fully resolved
config, seed) into the output directory; ``replay`` re-executes a
manifest and must reproduce the other outputs byte for byte.

Config layering: values from the config file, overridden by DYNSPARSE_*
environment variables (SEED, OUT, THREADS), overridden by flags.

Exit codes: 0 success, 2 config error, 3 infeasible plan, 4 numerical
failure, 1 anything else.
"""

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, serialize
from .attention import (
    analyze_distribution,
    attention_scores,
    critical_kv_oracle,
)
from .cpmodel import (
    AlphaMatrix,
    ClusterSpec,
    InfeasiblePlanError,
    choose_placement,
    head_loads,
    solve_hybrid,
)
from .cpsim import make_devices, measured_alpha, run_hybrid_sparse_cp, verify_equivalence
from .dispatcher import CostProfileTable, calibrate
from .grid import TokenGrid
from .grouping import build_groups, overlap_ratio
from .synthetic import smooth_qk
from .validate import NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4

ENV_PREFIX = "DYNSPARSE_"


class ConfigError(Exception):
    pass


def _load_schema(name: str) -> dict:
    with resources.files("dynsparse.schemas").joinpath(name).open() as fh:
        return json.load(fh)


def load_config(path, schema_name: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    validate_against_schema(data, schema_name, origin=str(path))
    return data


def validate_against_schema(data, schema_name: str, origin: str = "<config>") -> None:
    from referencing import Registry, Resource

    schema = _load_schema(schema_name)
    registry = Registry().with_resources([
        (name, Resource.from_contents(_load_schema(name)))
        for name in ("cluster.schema.json",)
    ])
    validator = jsonschema.Draft202012Validator(schema, registry=registry)
    errors = sorted(validator.iter_errors(data), key=str)
    if errors:
        raise ConfigError(f"config {origin} violates schema: {errors[0].message}")


def _apply_overrides(args):
    """Environment then flags; returns (seed_override, out_dir, threads)."""
    seed = os.environ.get(ENV_PREFIX + "SEED")
    out = os.environ.get(ENV_PREFIX + "OUT")
    threads = os.environ.get(ENV_PREFIX + "THREADS")
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if getattr(args, "out", None) is not None:
        out = args.out
    if getattr(args, "threads", None) is not None:
        threads = args.threads
    if out is None:
        raise ConfigError("no output directory: pass --out or set DYNSPARSE_OUT")
    return (
        int(seed) if seed is not None else None,
        Path(out),
        int(threads) if threads is not None else None,
    )


def _write(out_dir: Path, name: str, text: str, outputs: list) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text)
    outputs.append(name)


def _write_manifest(out_dir: Path, command: str, config: dict, seed, outputs: list) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "outputs": sorted(outputs),
        "package_version": __version__,
    }
    (out_dir / "manifest.json").write_text(serialize.canonical_json(manifest))


# --- commands ---------------------------------------------------------------


def _synthetic_scores(spec: dict, seed: int):
    grid = TokenGrid(*spec["grid"])
    s = grid.size
    rng = np.random.default_rng(seed)
    kind = spec["kind"]
    if kind == "uniform":
        scores = np.full((s, s), 1.0 / s)
        q = k = None
    elif kind == "onehot":
        scores = np.zeros((s, s))
        scores[np.arange(s), rng.integers(0, s, s)] = 1.0
        q = k = None
    elif kind == "random":
        q = rng.standard_normal((s, spec["d_k"]))
        k = rng.standard_normal((s, spec["d_k"]))
        scores = attention_scores(q, k)
    else:  # smooth
        q, k = smooth_qk(grid, spec["d_k"], rng)
        scores = attention_scores(q, k)
    return grid, scores, q, k


def cmd_analyze(config: dict, out_dir: Path, seed) -> list:
    outputs = []
    theta = config.get("theta", 0.9)
    run_seed = seed if seed is not None else config.get("seed", 0)
    if "synthetic" in config:
        grid, scores, q, k = _synthetic_scores(config["synthetic"], run_seed)
    else:
        from .trainer import load_model_checkpoint

        ckpt = Path(config["checkpoint"])
        if not ckpt.exists():
            raise ConfigError(f"checkpoint {ckpt} does not exist")
        model, cfg = load_model_checkpoint(ckpt)
        grid = cfg.token_grid
        rng = np.random.default_rng(run_seed)
        from .synthetic import smooth_latents
        import torch

        latent = torch.tensor(
            smooth_latents(grid, cfg.channels, 1, rng), dtype=torch.float32
        )
        t = torch.zeros(1)
        with torch.no_grad():
            x = model.input_proj(latent) + model.time_mlp(t.reshape(-1, 1, 1))
            bi = config.get("block", 0)
            for j in range(bi):
                blk = model.blocks[j]
                x_ln = blk.ln1(x)
                x = x + blk.proj(blk.attention(x_ln))
                x = x + blk.mlp(blk.ln2(x))
            x_ln = model.blocks[bi].ln1(x)[0].double().numpy()
        w_q, w_k = model.block_score_weights(bi)
        head = config.get("head", 0)
        d_k = cfg.d_k
        q = (x_ln @ w_q.T)[:, head * d_k:(head + 1) * d_k]
        k = (x_ln @ w_k.T)[:, head * d_k:(head + 1) * d_k]
        scores = attention_scores(q, k)

    report = analyze_distribution(scores, grid, theta=theta)
    if "group_dims" in config and q is not None:
        plan = build_groups(grid, tuple(config["group_dims"]))
        oracle = critical_kv_oracle(scores, theta)
        ratios = []
        for g, members in enumerate(plan.members):
            if members.size < 2:
                continue
            proxy_pos = int(np.searchsorted(members, plan.proxies[g]))
            ratios.append(overlap_ratio([oracle.indices[m] for m in members], proxy_pos))
        report["group_overlap"] = {
            "dims": list(config["group_dims"]),
            "mean_ratio": float(np.mean(ratios)),
            "theta": theta,
        }
    _write(out_dir, "analysis.json", serialize.canonical_json(report), outputs)
    hist = report["histogram"]
    lines = ["bin_lo,bin_hi,count"]
    for i, count in enumerate(hist["counts"]):
        lines.append(f"{hist['edges'][i]!r},{hist['edges'][i + 1]!r},{count}")
    _write(out_dir, "histogram.csv", "\n".join(lines) + "\n", outputs)
    return outputs


def cmd_calibrate(config: dict, out_dir: Path, seed) -> list:
    outputs = []
    run_seed = seed if seed is not None else config.get("seed", 0)
    table = calibrate(
        config["lengths"],
        config["sparsities"],
        reps=config.get("reps", 5),
        d_k=config.get("d_k", 64),
        d_lr=config.get("d_lr", 16),
        seed=run_seed,
        dtype=np.float32 if config.get("dtype", "float32") == "float32" else np.float64,
        index_width=config.get("index_width", 4),
        time_source=config.get("time_source", "wallclock"),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "cost_table.csv")
    outputs.append("cost_table.csv")
    crossovers = {
        str(length): table.crossover(length) for length in table.lengths()
    }
    _write(out_dir, "crossovers.json", serialize.canonical_json(crossovers), outputs)
    return outputs


def cmd_train(config: dict, out_dir: Path, seed, threads) -> list:
    from .trainer import ToyDiTConfig, TwoStageTrainer

    outputs = []
    cfg_dict = dict(config)
    table_path = cfg_dict.pop("dispatch_table", None)
    force_full = cfg_dict.pop("force_full", False)
    save_ckpt = cfg_dict.pop("save_checkpoint", True)
    if seed is not None:
        cfg_dict["seed"] = seed
    if threads is not None:
        cfg_dict["threads"] = threads
    cfg = ToyDiTConfig.from_json(cfg_dict)
    table = CostProfileTable.from_csv(table_path) if table_path else None
    trainer = TwoStageTrainer(cfg, dispatch_table=table, force_full=force_full)
    state = trainer.run()

    lines = ["iteration,stage,task_loss,mean_predictor_loss"]
    for i, loss in enumerate(state.task_losses, start=1):
        stage = 1 if state.transition_iteration is None or i <= state.transition_iteration else 2
        pred = float(np.mean([
            state.predictor_losses[bi][i - 1]
            if i - 1 < len(state.predictor_losses[bi]) else np.nan
            for bi in range(cfg.blocks)
        ]))
        lines.append(f"{i},{stage},{loss!r},{pred!r}")
    _write(out_dir, "losses.csv", "\n".join(lines) + "\n", outputs)
    _write(out_dir, "profile_series.json",
           serialize.canonical_json(state.profile_series), outputs)
    _write(out_dir, "decisions.json",
           serialize.canonical_json(state.decision_log), outputs)
    summary = {
        "iterations": state.iteration,
        "stage": state.stage,
        "transition_iteration": state.transition_iteration,
        "final_task_loss": state.task_losses[-1] if state.task_losses else None,
        "sparse_iterations": state.sparse_iterations,
    }
    _write(out_dir, "summary.json", serialize.canonical_json(summary), outputs)
    if save_ckpt:
        trainer.save_checkpoint(out_dir / "checkpoint")
        outputs.append("checkpoint/model.json")
    return outputs


def cmd_plan(profile: dict, cluster_cfg: dict, out_dir: Path) -> list:
    outputs = []
    cluster = ClusterSpec.from_json(cluster_cfg)
    loads = head_loads(profile["head_sparsity"], profile["seq_len"], profile["head_dim"])
    n = cluster.n_devices
    alpha_values = profile.get("alpha")
    if alpha_values is None:
        alpha_values = [[1.0 if i != j else 0.0 for j in range(n)] for i in range(n)]
    alpha = AlphaMatrix(values=np.asarray(alpha_values, dtype=np.float64))
    config = solve_hybrid(
        loads, alpha, cluster, profile["seq_len"], profile["head_dim"],
        alpha_iteration=profile.get("alpha_iteration"),
        profile_iteration=profile.get("iteration"),
    )
    recommended = choose_placement(config, cluster, alpha,
                                   profile["seq_len"], profile["head_dim"])
    payload = config.to_json()
    payload["placement_by_traffic"] = recommended
    _write(out_dir, "cp_config.json", serialize.canonical_json(payload), outputs)
    lines = ["g_h,g_s,placement,feasible,objective,binding_constraint"]
    for ev in config.evaluations:
        lines.append(
            f"{ev.g_h},{ev.g_s},{ev.placement},{int(ev.feasible)},"
            f"{ev.objective!r},{ev.binding_constraint or ''}"
        )
    _write(out_dir, "evaluations.csv", "\n".join(lines) + "\n", outputs)
    return outputs


def cmd_simulate(config: dict, out_dir: Path, seed) -> list:
    outputs = []
    run_seed = seed if seed is not None else config.get("seed", 0)
    cluster = ClusterSpec.from_json(config["cluster"])
    s, h, d = config["seq_len"], config["heads"], config["head_dim"]
    g_h, g_s = config["g_h"], config["g_s"]
    if g_h * g_s != cluster.n_devices:
        raise ConfigError("g_h * g_s must equal the cluster device count")
    rng = np.random.default_rng(run_seed)
    q = rng.standard_normal((h, s, d))
    k = rng.standard_normal((h, s, d))
    v = rng.standard_normal((h, s, d))

    index_sets = []
    for head in range(h):
        scores = attention_scores(q[head], k[head])
        index_sets.append(critical_kv_oracle(scores, config["theta"]).indices)

    from .attention import CriticalIndexSet, sparse_attention
    from .cpmodel import balance_heads, hcp_comm, scp_comm

    sparsities = [
        1.0 - np.mean([idx.size for idx in per_head]) / s for per_head in index_sets
    ]
    loads = head_loads(sparsities, s, d)
    plan = balance_heads(loads, g_h)
    from .cpmodel import CPConfig

    cp_config = CPConfig(
        g_h=g_h, g_s=g_s, placement=config["placement"], plan=plan,
        objective=0.0, per_device_comp=[], per_device_comm=[], per_device_mem=[],
    )
    devices = make_devices(q, k, v, cluster, cp_config)
    output, log = run_hybrid_sparse_cp(
        devices, cp_config, cluster, index_sets,
        index_width=config.get("index_width", 4),
    )

    reference = np.stack([
        sparse_attention(q[head], k[head], v[head], CriticalIndexSet(index_sets[head]))
        for head in range(h)
    ])
    equivalence = verify_equivalence(output, reference, tol=1e-6)

    # closed-form byte check per device
    formula_checks = []
    s_span = s // g_s
    head_counts = plan.head_counts(g_h)
    for dev in devices:
        entry = {"rank": dev.rank}
        if g_h > 1:
            expect = hcp_comm(h, int(head_counts[dev.position]), s_span, d,
                              g_h, cluster.elem_width)
            got = max(log.sent_by(dev.rank, "hcp_fwd"),
                      log.received_by(dev.rank, "hcp_fwd"))
            got += max(log.sent_by(dev.rank, "output_redistribute"),
                       log.received_by(dev.rank, "output_redistribute"))
            entry["hcp_formula"] = expect
            entry["hcp_ledger"] = got
            entry["hcp_match"] = bool(abs(expect - got) < 0.5)
        if g_s > 1:
            group_spans = [None] * g_s
            for other in devices:
                if other.position == dev.position:
                    group_spans[other.group] = other.span_rows
            alpha = measured_alpha(index_sets, dev.heads, group_spans)
            expect = scp_comm(alpha, dev.group, dev.heads.size, d, s, g_s,
                              cluster.elem_width)
            got = max(log.sent_by(dev.rank, "scp_kv"),
                      log.received_by(dev.rank, "scp_kv"))
            entry["scp_formula"] = expect
            entry["scp_ledger"] = got
            entry["scp_match"] = bool(abs(expect - got) < 0.5)
        formula_checks.append(entry)

    _write(out_dir, "ledger.json", serialize.canonical_json(log.to_json()), outputs)
    _write(out_dir, "equivalence.json", serialize.canonical_json({
        "equivalence": equivalence,
        "formula_checks": formula_checks,
        "head_sparsity": [float(x) for x in sparsities],
    }), outputs)
    return outputs


# --- driver -----------------------------------------------------------------


def _dispatch(command: str, args, config_payload=None):
    """Run one command; returns (resolved config, outputs)."""
    seed, out_dir, threads = _apply_overrides(args)
    if command == "analyze":
        config = config_payload or load_config(args.config, "analysis.schema.json")
        outputs = cmd_analyze(config, out_dir, seed)
    elif command == "calibrate":
        config = config_payload or load_config(args.config, "calibration.schema.json")
        outputs = cmd_calibrate(config, out_dir, seed)
    elif command == "train":
        config = config_payload or load_config(args.config, "train.schema.json")
        outputs = cmd_train(config, out_dir, seed, threads)
    elif command == "plan":
        if config_payload:
            config = config_payload
        else:
            config = {
                "profile": load_config(args.profile, "plan_profile.schema.json"),
                "cluster": load_config(args.cluster, "cluster.schema.json"),
            }
        outputs = cmd_plan(config["profile"], config["cluster"], out_dir)
    elif command == "simulate":
        config = config_payload or load_config(args.config, "scenario.schema.json")
        outputs = cmd_simulate(config, out_dir, seed)
    else:
        raise ConfigError(f"unknown command {command!r}")
    _write_manifest(out_dir, command, config, seed, outputs)
    return config, outputs


def cmd_replay(args) -> None:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from exc
    command = manifest["command"]
    replay_args = argparse.Namespace(
        seed=manifest["seed"], out=args.out, threads=getattr(args, "threads", None),
        config=None, profile=None, cluster=None,
    )
    _dispatch(command, replay_args, config_payload=manifest["config"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynsparse",
        description="dynamic-sparsity attention engine: analysis, training, planning, simulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None)

    common(sub.add_parser("analyze", help="attention statistics reports"))
    common(sub.add_parser("calibrate", help="build the dispatch cost table"))
    common(sub.add_parser("train", help="two-stage toy training run"))
    plan = sub.add_parser("plan", help="solve the hybrid CP configuration")
    plan.add_argument("--profile", required=True, help="sparsity profile JSON")
    plan.add_argument("--cluster", required=True, help="cluster spec JSON")
    plan.add_argument("--seed", type=int, default=None)
    plan.add_argument("--out", default=None)
    plan.add_argument("--threads", type=int, default=None)
    common(sub.add_parser("simulate", help="run the CP simulator on a scenario"))
    replay = sub.add_parser("replay", help="re-run a command from its manifest")
    replay.add_argument("manifest", help="path to a manifest.json")
    replay.add_argument("--out", default=None)
    replay.add_argument("--threads", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            cmd_replay(args)
        else:
            _dispatch(args.command, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasiblePlanError as exc:
        print(f"infeasible plan: {exc} (binding: {exc.binding_constraint})",
              file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FloatingPointError, ZeroDivisionError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
