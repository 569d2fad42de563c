"""Command-line orchestration.

Subcommands: make-fixture, detect, simulate, train, backtest, ablate,
stats. Every command writes a manifest.json (inputs, resolved config, seed,
version) next to its outputs, uses exit code 0 on success, 2 on validation
errors, and 3 on numerical failures, and renders matplotlib figures
alongside its CSV/JSON artifacts.

Option precedence: command-line flag > config-file key > built-in default.
The config file is flat `key = value` lines; keys match option names with
underscores.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .agents import (
    Policy,
    TrainConfig,
    TrainError,
    ablation_env_config,
    cem_train,
    equal_weight_policy,
    reinforce_train,
    sharpe_optimal_static,
)
from .dataio import (
    PanelError,
    ReturnPanel,
    compute_features,
    default_spread_pairs,
    load_return_panel,
)
from .env import EnvConfig, EnvError, env_new, estimate_regime_stats
from .fixtures import synthetic_panel, write_panel_csv
from .mcsim import (
    DEFAULT_MACRO_COEFFS,
    McConfig,
    McError,
    RegimeReturnPools,
    TransitionMatrix,
    run_monte_carlo,
)
from .metrics import MetricError, backtest as run_backtest
from .regimes import (
    RegimeFitError,
    RegimeModel,
    crisis_alignment,
    gmm_fit,
    hmm_fit,
    kmeans_fit,
    posterior as regime_posterior,
)
from .stats import StatsError, regime_stats_report

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

_VALIDATION_ERRORS = (
    PanelError, McError, EnvError, StatsError, RegimeFitError,
    FileNotFoundError, ValueError,
)


def _read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flag > config file > default."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        file_vals = _read_config_file(args.config)
        for key, val in file_vals.items():
            if key not in merged:
                raise ValueError(f"unknown config key {key!r}")
            default = merged[key]
            if isinstance(default, bool):
                merged[key] = val.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                merged[key] = int(val)
            elif isinstance(default, float):
                merged[key] = float(val)
            elif isinstance(default, list):
                merged[key] = [v.strip() for v in val.split(",") if v.strip()]
            else:
                merged[key] = val
    for key in defaults:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            merged[key] = flag_val
    return merged


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: dict, inputs: list) -> None:
    clean = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()}
    doc = {
        "schema_version": 1,
        "command": command,
        "package_version": __version__,
        "config": clean,
        "config_hash": hashlib.sha256(
            json.dumps(clean, sort_keys=True).encode()
        ).hexdigest(),
        "inputs": {str(p): _sha256(p) for p in inputs},
    }
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _fit_model(kind: str, X, k: int, seed: int):
    if kind == "kmeans":
        return kmeans_fit(X, k, seed=seed)
    if kind == "gmm":
        return gmm_fit(X, k, seed=seed)
    if kind == "hmm":
        return hmm_fit(X, k, seed=seed)
    raise ValueError(f"unknown model kind {kind!r}")


def aligned_panel_posterior(panel: ReturnPanel, model: RegimeModel, window: int):
    """Posterior on the panel's features plus the feature-aligned sub-panel."""
    X = compute_features(panel, window=window)
    post = regime_posterior(model, X)
    sub = ReturnPanel(
        years=list(X.years),
        asset_names=list(panel.asset_names),
        returns=panel.returns[window - 1:],
    )
    return sub, post


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- commands


def cmd_make_fixture(args) -> int:
    defaults = {"years": 70, "seed": 0, "start_year": 1950, "out": "synth.csv"}
    cfg = _resolve(args, defaults)
    panel, labels = synthetic_panel(
        n_years=cfg["years"], seed=cfg["seed"], start_year=cfg["start_year"]
    )
    write_panel_csv(panel, cfg["out"])
    print(f"wrote {cfg['out']} ({panel.n_years} years x {panel.n_assets} assets)")
    return EXIT_OK


def cmd_detect(args) -> int:
    defaults = {
        "input": None, "model": "hmm", "k": 3, "window": 5, "seed": 0,
        "out": "detect_out", "crisis_years": "",
    }
    cfg = _resolve(args, defaults)
    if not cfg["input"]:
        raise ValueError("--input is required")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    panel = load_return_panel(cfg["input"])
    X = compute_features(panel, window=cfg["window"])
    model = _fit_model(cfg["model"], X, cfg["k"], cfg["seed"])
    post = regime_posterior(model, X)

    (out_dir / "regimes.json").write_text(model.to_json())
    post.to_csv(out_dir / "posterior.csv", X.years)

    crisis = _parse_int_list(cfg["crisis_years"]) if cfg["crisis_years"] else []
    align = crisis_alignment(post.labels, X.years, crisis)
    (out_dir / "crisis_alignment.json").write_text(align.to_json())

    from .plots import save_posterior_heatmap

    save_posterior_heatmap(out_dir / "posterior.png", post.probs, X.years, post.labels)
    _write_manifest(out_dir, "detect", cfg, [cfg["input"]])
    print(f"detect: {cfg['model']} K={cfg['k']} loglik={post.loglik:.4f} -> {out_dir}")
    return EXIT_OK


def _strategy_weights(name: str, panel: ReturnPanel, seed: int) -> np.ndarray:
    if name == "equal":
        return np.full(panel.n_assets, 1.0 / panel.n_assets)
    if name == "sharpe":
        return sharpe_optimal_static(panel, seed=seed)
    path = Path(name)
    if not path.exists():
        raise ValueError(f"strategy {name!r}: not 'equal', 'sharpe', or a weights file")
    doc = json.loads(path.read_text())
    w = np.asarray(doc["weights"] if isinstance(doc, dict) else doc, dtype=float)
    if w.shape != (panel.n_assets,):
        raise ValueError("strategy weights length does not match panel assets")
    return w / w.sum()


def cmd_simulate(args) -> int:
    defaults = {
        "regimes": None, "input": None, "horizon": [10, 20, 30], "paths": 2000,
        "strategy": ["equal"], "macro": False, "seed": 0, "out": "simulate_out",
        "window": 5, "threads": 1,
    }
    cfg = _resolve(args, defaults)
    if not cfg["input"] or not cfg["regimes"]:
        raise ValueError("--input and --regimes are required")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    panel = load_return_panel(cfg["input"])
    model = RegimeModel.from_json(Path(cfg["regimes"]).read_text())
    sub, post = aligned_panel_posterior(panel, model, cfg["window"])
    labels = post.labels

    pools = RegimeReturnPools.from_labels(sub.returns, labels)
    if model.kind == "hmm":
        transition = TransitionMatrix(model.transition)
    else:
        counts = np.full((post.K, post.K), 1e-9)
        for a, b in zip(labels[:-1], labels[1:]):
            counts[a, b] += 1.0
        transition = TransitionMatrix(counts / counts.sum(axis=1, keepdims=True))

    macro_kwargs = {}
    if cfg["macro"]:
        if post.K != 2:
            raise ValueError("--macro requires a two-regime model")
        pairs = default_spread_pairs(panel.asset_names)
        if len(pairs) < 2:
            have = {a for p in pairs for a in p}
            raise ValueError(
                "--macro needs corporate/treasury and equity/bill columns; "
                f"missing spread assets (found only {sorted(have) or 'none'})"
            )
        idx = {name: i for i, name in enumerate(panel.asset_names)}
        (corp, tsy), (eq, bill) = pairs[0], pairs[1]
        macro_kwargs = {
            "macro_coeffs": DEFAULT_MACRO_COEFFS,
            "macro_risk_premium_pair": (idx[eq], idx[bill]),
            "macro_yield_spread_pair": (idx[corp], idx[tsy]),
        }

    from .plots import save_terminal_histogram

    all_blocks = {}
    for strategy in cfg["strategy"]:
        weights = _strategy_weights(strategy, sub, cfg["seed"])
        stem = strategy if strategy in ("equal", "sharpe") else Path(strategy).stem
        for horizon in cfg["horizon"]:
            mc_cfg = McConfig(
                horizon_years=int(horizon),
                n_paths=cfg["paths"],
                transition=transition,
                pools=pools,
                strategy_weights=weights,
                seed=cfg["seed"],
                initial_regime=0,
                **macro_kwargs,
            )
            summary = run_monte_carlo(mc_cfg, n_workers=cfg["threads"])
            key = f"{stem}_{horizon}y"
            all_blocks[key] = json.loads(summary.to_json())
            (out_dir / f"summary_{key}.json").write_text(summary.to_json())
            np.savetxt(
                out_dir / f"terminal_{key}.csv",
                summary.terminal_returns,
                delimiter=",",
                header="terminal_return",
                comments="",
                fmt="%.17g",
            )
            save_terminal_histogram(
                out_dir / f"terminal_{key}.png", summary.terminal_returns, int(horizon)
            )
    (out_dir / "summary.json").write_text(
        json.dumps({"schema_version": 1, "runs": all_blocks}, indent=2, sort_keys=True)
    )
    _write_manifest(out_dir, "simulate", cfg, [cfg["input"], cfg["regimes"]])
    print(f"simulate: {len(all_blocks)} run(s) -> {out_dir}")
    return EXIT_OK


def _env_config_from(cfg: dict, n_regimes: int) -> EnvConfig:
    return EnvConfig(
        lambda_cost=cfg["lambda_cost"],
        reward_mode=cfg["reward_mode"],
        seed=cfg["seed"],
    )


def _build_env_factory(panel, model, window, env_cfg: EnvConfig):
    sub, post = aligned_panel_posterior(panel, model, window)
    stats = estimate_regime_stats(sub, post)

    def factory(cfg: EnvConfig = env_cfg):
        return env_new(cfg, sub, post, stats)

    return factory, sub, post


def cmd_train(args) -> int:
    defaults = {
        "input": None, "regimes": None, "trainer": "reinforce", "steps": 50_000,
        "lr": 0.05, "seed": 0, "out": "train_out", "window": 5,
        "reward_mode": "sharpe_step", "lambda_cost": 0.002,
        "penalty_weight": 0.1, "delta": 0.99, "eta": 0.05,
    }
    cfg = _resolve(args, defaults)
    if not cfg["input"] or not cfg["regimes"]:
        raise ValueError("--input and --regimes are required")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    panel = load_return_panel(cfg["input"])
    model = RegimeModel.from_json(Path(cfg["regimes"]).read_text())
    env_cfg = _env_config_from(cfg, model.K)
    factory, _, _ = _build_env_factory(panel, model, cfg["window"], env_cfg)

    train_cfg = TrainConfig(
        total_steps=cfg["steps"], learning_rate=cfg["lr"], seed=cfg["seed"],
        penalty_weight=cfg["penalty_weight"], delta=cfg["delta"], eta=cfg["eta"],
    )
    if cfg["trainer"] == "reinforce":
        policy = reinforce_train(factory, train_cfg, progress_path=out_dir / "progress.csv")
        import csv as _csv

        from .plots import save_training_progress

        with open(out_dir / "progress.csv", newline="") as fh:
            rows = [
                (int(r["iteration"]), float(r["mean_return"]),
                 float(r["penalty"]), float(r["parameter_norm"]))
                for r in _csv.DictReader(fh)
            ]
        save_training_progress(out_dir / "progress.png", rows)
    elif cfg["trainer"] == "cem":
        policy = cem_train(factory, train_cfg)
    else:
        raise ValueError(f"unknown trainer {cfg['trainer']!r}")

    (out_dir / "policy.json").write_text(policy.to_json())
    _write_manifest(out_dir, "train", cfg, [cfg["input"], cfg["regimes"]])
    print(f"train: {cfg['trainer']} -> {out_dir / 'policy.json'}")
    return EXIT_OK


def _load_policy(name: str, env) -> Policy:
    if name == "equal_weight":
        return equal_weight_policy(env.n_assets, env.n_regimes)
    if name == "sharpe_opt":
        w = sharpe_optimal_static(env.panel)
        # Encode static weights as constant logits via the bias column.
        theta = np.zeros((env.n_assets, env.n_assets + env.n_regimes + 1))
        theta[:, -1] = np.log(np.maximum(w, 1e-12))
        return Policy(theta=theta)
    return Policy.from_json(Path(name).read_text())


def cmd_backtest(args) -> int:
    defaults = {
        "input": None, "regimes": None, "policy": "equal_weight",
        "out": "backtest_out", "window": 5, "seed": 0,
        "reward_mode": "sharpe_step", "lambda_cost": 0.002,
        "no_shock": False, "no_reset": False, "cagr_window": 10,
        "crisis_years": "",
    }
    cfg = _resolve(args, defaults)
    if not cfg["input"] or not cfg["regimes"]:
        raise ValueError("--input and --regimes are required")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    panel = load_return_panel(cfg["input"])
    model = RegimeModel.from_json(Path(cfg["regimes"]).read_text())
    env_cfg = replace(
        _env_config_from(cfg, model.K),
        no_shock=cfg["no_shock"], no_reset=cfg["no_reset"],
    )
    factory, sub, _ = _build_env_factory(panel, model, cfg["window"], env_cfg)
    env = factory()
    policy = _load_policy(cfg["policy"], env)

    report = run_backtest(policy, env, cagr_window=cfg["cagr_window"])
    crisis = _parse_int_list(cfg["crisis_years"]) if cfg["crisis_years"] else []
    (out_dir / "report.json").write_text(report.to_json())
    report.wealth_to_csv(out_dir / "wealth.csv")
    report.cagr_to_csv(out_dir / "rolling_cagr.csv", crisis_years=crisis)
    env.export_trace(out_dir / "trace.csv")

    from .plots import save_rolling_cagr, save_wealth_curve

    label = (
        cfg["policy"] if cfg["policy"] in ("equal_weight", "sharpe_opt")
        else Path(cfg["policy"]).stem
    )
    save_wealth_curve(out_dir / "wealth.png", {label: report.wealth_curve}, sub.years)
    save_rolling_cagr(out_dir / "rolling_cagr.png", {label: report.rolling_cagr}, crisis)
    inputs = [cfg["input"], cfg["regimes"]]
    if cfg["policy"] not in ("equal_weight", "sharpe_opt"):
        inputs.append(cfg["policy"])
    _write_manifest(out_dir, "backtest", cfg, inputs)
    sharpe_txt = "undefined" if report.sharpe is None else f"{report.sharpe:.4f}"
    print(f"backtest: sharpe={sharpe_txt} maxdd={report.max_drawdown:.4f} -> {out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    defaults = {
        "input": None, "regimes": None, "variants": ["noclip", "nocost", "noreset"],
        "seeds": "0", "steps": 20_000, "lr": 0.05, "out": "ablate_out",
        "window": 5, "reward_mode": "sharpe_step", "lambda_cost": 0.002,
        "seed": 0, "trainer": "reinforce",
    }
    cfg = _resolve(args, defaults)
    if not cfg["input"] or not cfg["regimes"]:
        raise ValueError("--input and --regimes are required")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    panel = load_return_panel(cfg["input"])
    model = RegimeModel.from_json(Path(cfg["regimes"]).read_text())
    base_env_cfg = _env_config_from(cfg, model.K)
    sub, post = aligned_panel_posterior(panel, model, cfg["window"])
    stats = estimate_regime_stats(sub, post)

    def make_env(variant: str):
        return env_new(ablation_env_config(base_env_cfg, variant), sub, post, stats)

    seeds = _parse_int_list(cfg["seeds"]) if isinstance(cfg["seeds"], str) else cfg["seeds"]
    train_cfg = TrainConfig(total_steps=cfg["steps"], learning_rate=cfg["lr"])
    trainer = reinforce_train if cfg["trainer"] == "reinforce" else cem_train

    from .agents import run_ablations

    results = run_ablations(make_env, train_cfg, cfg["variants"], seeds, trainer=trainer)

    aggregate = {"schema_version": 1, "variants": {}}
    for variant, per_seed in results.items():
        rows = []
        for seed, report in per_seed.items():
            (out_dir / f"report_{variant}_seed{seed}.json").write_text(report.to_json())
            rows.append({
                "seed": seed,
                "sharpe": report.sharpe,
                "sortino": report.sortino,
                "max_drawdown": report.max_drawdown,
                "final_log_value": report.final_log_value,
            })
        defined = [r["sharpe"] for r in rows if r["sharpe"] is not None]
        aggregate["variants"][variant] = {
            "per_seed": rows,
            "mean_sharpe": float(np.mean(defined)) if defined else None,
            "mean_max_drawdown": float(np.mean([r["max_drawdown"] for r in rows])),
        }
    (out_dir / "aggregate.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True))

    from .plots import save_wealth_curve

    curves = {
        variant: per_seed[seeds[0]].wealth_curve
        for variant, per_seed in results.items()
    }
    save_wealth_curve(out_dir / "ablation_wealth.png", curves, sub.years)
    _write_manifest(out_dir, "ablate", cfg, [cfg["input"], cfg["regimes"]])
    print(f"ablate: {len(results)} variant(s) x {len(seeds)} seed(s) -> {out_dir}")
    return EXIT_OK


def cmd_stats(args) -> int:
    defaults = {
        "input": None, "regimes": None, "out": "stats_out", "window": 5,
        "bins": 5, "crra_gamma": 3.0, "cara_alpha": 3.0,
    }
    cfg = _resolve(args, defaults)
    if not cfg["input"] or not cfg["regimes"]:
        raise ValueError("--input and --regimes are required")
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    panel = load_return_panel(cfg["input"])
    model = RegimeModel.from_json(Path(cfg["regimes"]).read_text())
    sub, post = aligned_panel_posterior(panel, model, cfg["window"])
    # Statistics are computed on the equal-weight portfolio return series.
    series = sub.returns.mean(axis=1)
    report = regime_stats_report(
        post.labels, series, bins=cfg["bins"],
        crra_gamma=cfg["crra_gamma"], cara_alpha=cfg["cara_alpha"],
    )
    (out_dir / "stats.json").write_text(report.to_json())
    _write_manifest(out_dir, "stats", cfg, [cfg["input"], cfg["regimes"]])
    print(
        f"stats: F={report.f_stat:.4f} p={report.f_p_value:.4f} "
        f"MI={report.mutual_info_nats:.4f} -> {out_dir}"
    )
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regimefolio",
        description="Regime-aware market simulation and portfolio-policy engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, opts):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        for flags, kwargs in opts:
            p.add_argument(*flags, **kwargs)
        p.set_defaults(func=func)
        return p

    add("make-fixture", cmd_make_fixture, [
        (["--years"], dict(type=int)), (["--seed"], dict(type=int)),
        (["--start-year"], dict(type=int, dest="start_year")),
        (["--out"], dict()),
    ])
    add("detect", cmd_detect, [
        (["--input"], dict()), (["--model"], dict(choices=["kmeans", "gmm", "hmm"])),
        (["--k"], dict(type=int)), (["--window"], dict(type=int)),
        (["--seed"], dict(type=int)), (["--out"], dict()),
        (["--crisis-years"], dict(dest="crisis_years")),
    ])
    add("simulate", cmd_simulate, [
        (["--regimes"], dict()), (["--input"], dict()),
        (["--horizon"], dict(type=int, action="append")),
        (["--paths"], dict(type=int)),
        (["--strategy"], dict(action="append")),
        (["--macro"], dict(action="store_const", const=True)),
        (["--seed"], dict(type=int)), (["--out"], dict()),
        (["--window"], dict(type=int)), (["--threads"], dict(type=int)),
    ])
    add("train", cmd_train, [
        (["--input"], dict()), (["--regimes"], dict()),
        (["--trainer"], dict(choices=["reinforce", "cem"])),
        (["--steps"], dict(type=int)), (["--lr"], dict(type=float)),
        (["--seed"], dict(type=int)), (["--out"], dict()),
        (["--window"], dict(type=int)),
        (["--reward-mode"], dict(dest="reward_mode",
                                 choices=["sharpe_step", "regime_aware"])),
        (["--lambda-cost"], dict(type=float, dest="lambda_cost")),
        (["--penalty-weight"], dict(type=float, dest="penalty_weight")),
        (["--delta"], dict(type=float)), (["--eta"], dict(type=float)),
    ])
    add("backtest", cmd_backtest, [
        (["--input"], dict()), (["--regimes"], dict()),
        (["--policy"], dict(help="policy.json path, 'equal_weight', or 'sharpe_opt'")),
        (["--out"], dict()), (["--window"], dict(type=int)),
        (["--seed"], dict(type=int)),
        (["--reward-mode"], dict(dest="reward_mode",
                                 choices=["sharpe_step", "regime_aware"])),
        (["--lambda-cost"], dict(type=float, dest="lambda_cost")),
        (["--no-shock"], dict(action="store_const", const=True, dest="no_shock")),
        (["--no-reset"], dict(action="store_const", const=True, dest="no_reset")),
        (["--cagr-window"], dict(type=int, dest="cagr_window")),
        (["--crisis-years"], dict(dest="crisis_years")),
    ])
    add("ablate", cmd_ablate, [
        (["--input"], dict()), (["--regimes"], dict()),
        (["--variants"], dict(type=lambda s: [v for v in s.split(",") if v])),
        (["--seeds"], dict()),
        (["--steps"], dict(type=int)), (["--lr"], dict(type=float)),
        (["--out"], dict()), (["--window"], dict(type=int)),
        (["--reward-mode"], dict(dest="reward_mode",
                                 choices=["sharpe_step", "regime_aware"])),
        (["--lambda-cost"], dict(type=float, dest="lambda_cost")),
        (["--seed"], dict(type=int)),
        (["--trainer"], dict(choices=["reinforce", "cem"])),
    ])
    add("stats", cmd_stats, [
        (["--input"], dict()), (["--regimes"], dict()),
        (["--out"], dict()), (["--window"], dict(type=int)),
        (["--bins"], dict(type=int)),
        (["--crra-gamma"], dict(type=float, dest="crra_gamma")),
        (["--cara-alpha"], dict(type=float, dest="cara_alpha")),
    ])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainError, MetricError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
