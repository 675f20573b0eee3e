"""Command-line surface: generate data, train, evaluate, gradient-check,
and export the learned concept graph.

Exit codes: 0 success, 2 config/validation problem, 3 numerical failure,
4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from .concepts import CONCEPTS, MODALITIES, OBS_CHANNELS
from .container import dump_json, read_json
from .data import (
    DatasetBundle,
    ScenarioConfig,
    load_bundle,
    save_bundle,
    synth_generate,
)
from .errors import (
    BundleFormatError,
    CchmmError,
    ConfigError,
    GradientError,
    NonFiniteError,
    SingularMatrixError,
    TrainingAbort,
    ValidationError,
)
from .evaluation import (
    forecast_truth,
    graph_recovery,
    historical_average_forecast,
    metrics,
    model_forecast,
    persistence_forecast,
)
from .losses import total_loss
from .model import CCHMM, ModelSpec, load_checkpoint, save_checkpoint
from .report import write_forecast_outputs, write_graph_outputs, write_loss_curves
from .training import TrainConfig, VARIANT_FLAGS, fit

GRADCHECK_TOLERANCE = 1e-4

_SCENARIO_KEYS = {f.name for f in dataclasses.fields(ScenarioConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_PATH_KEYS = {"data", "out", "checkpoint"}
_ALL_KEYS = _SCENARIO_KEYS | _TRAIN_KEYS | _PATH_KEYS


def _load_config(path: str | None, overrides: list[str] | None) -> dict:
    cfg: dict = {}
    if path:
        doc = read_json(path)
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg.update(doc)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like key=value")
        key, raw = item.split("=", 1)
        try:
            cfg[key] = json.loads(raw)
        except json.JSONDecodeError:
            cfg[key] = raw
    for key in cfg:
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown config key '{key}'")
    if "CCHMM_SEED" in os.environ:
        try:
            cfg["seed"] = int(os.environ["CCHMM_SEED"])
        except ValueError as e:
            raise ConfigError(f"CCHMM_SEED must be an integer: {e}") from e
    return cfg


def _build_dataclass(cls, cfg: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for name, f in fields.items():
        if name not in cfg:
            continue
        value = cfg[name]
        if f.type in ("int",) and not isinstance(value, bool):
            value = int(value)
        elif f.type in ("float",):
            value = float(value)
        elif f.type in ("bool",) and not isinstance(value, bool):
            raise ConfigError(f"config key '{name}' must be a JSON boolean")
        kwargs[name] = value
    return cls(**kwargs)


def _write_run_info(out_dir: str, command: str, argv: list[str]) -> None:
    info = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "started_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    dump_json(os.path.join(out_dir, "run_info.json"), info)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _load_config(args.config, args.set)
    scenario = _build_dataclass(ScenarioConfig, {k: v for k, v in cfg.items() if k in _SCENARIO_KEYS})
    scenario.validate()
    bundle = synth_generate(scenario)
    os.makedirs(args.out, exist_ok=True)
    save_bundle(bundle, args.out)
    dump_json(os.path.join(args.out, "config.json"), scenario.to_dict())
    _write_run_info(args.out, "generate", sys.argv[1:])
    print(f"wrote dataset: {args.out} "
          f"(regions={bundle.n_regions}, steps={bundle.timesteps})")
    return 0


def _apply_variant_flag(config: TrainConfig, variant: str | None) -> TrainConfig:
    if not variant:
        return config
    flag = variant.replace("-", "_")
    if flag not in VARIANT_FLAGS:
        raise ConfigError(
            f"unknown variant '{variant}'; expected one of "
            + ", ".join(f.replace("_", "-") for f in VARIANT_FLAGS)
        )
    return dataclasses.replace(config, **{flag: True})


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    train_cfg = _build_dataclass(TrainConfig, {k: v for k, v in cfg.items() if k in _TRAIN_KEYS})
    train_cfg = _apply_variant_flag(train_cfg, args.variant)
    train_cfg.active_variant()  # reject conflicting flags early
    bundle = load_bundle(args.data)

    os.makedirs(args.out, exist_ok=True)
    dump_json(os.path.join(args.out, "config.json"), train_cfg.to_dict())
    _write_run_info(args.out, "train", sys.argv[1:])

    log_path = os.path.join(args.out, "log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        def on_record(rec: dict) -> None:
            log.write(json.dumps(rec) + "\n")
            log.flush()
            if rec["split"] == "val":
                print(f"epoch {rec['epoch']:3d} val total={rec['total']:.4f} "
                      f"mae={rec['mae']:.4f}", flush=True)

        result = fit(bundle, train_cfg, on_record=on_record)

    save_checkpoint(os.path.join(args.out, "checkpoint_best"), result.model)
    save_checkpoint(os.path.join(args.out, "checkpoint_final"), result.final_model)
    a_final = result.final_model.adjacency().data
    dump_json(os.path.join(args.out, "A_final.json"), {
        "concepts": list(result.final_model.spec.concepts),
        "matrix": [[repr(float(v)) for v in row] for row in a_final],
        "best_epoch": result.best_epoch,
    })
    write_loss_curves(args.out, result.history)
    print(f"best epoch {result.best_epoch} (val mae {result.best_val_mae:.4f}); "
          f"run dir: {args.out}")
    return 0


def _check_compatible(model: CCHMM, bundle: DatasetBundle) -> None:
    if model.spec.cond_dim != bundle.cond_dim:
        raise ConfigError(
            f"checkpoint expects {model.spec.cond_dim} condition channels, "
            f"dataset has {bundle.cond_dim}"
        )


def cmd_eval(args) -> int:
    bundle = load_bundle(args.data)
    history = args.history
    split = args.split
    truth = forecast_truth(bundle, split, history)

    report: dict = {"split": split, "history_steps": history, "baselines": {}}
    preds_for_figures = None
    figure_tag = None

    base_preds = {
        "persistence": persistence_forecast(bundle, split, history),
        "historical_average": historical_average_forecast(bundle, split, history),
    }
    for name, preds in base_preds.items():
        report["baselines"][name] = metrics(preds, truth).to_dict()

    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        _check_compatible(model, bundle)
        preds = model_forecast(model, bundle, split, history)
        model_report = metrics(preds, truth)
        report["model"] = model_report.to_dict()
        pers = report["baselines"]["persistence"]["per_modality"]
        report["improvement_vs_persistence"] = {
            m: 1.0 - model_report.per_modality[m]["mae"] / pers[m]["mae"]
            for m in MODALITIES
        }
        if bundle.ground_truth is not None:
            learned = model.adjacency().data
            report["graph_recovery"] = graph_recovery(learned, bundle.ground_truth)
        preds_for_figures, figure_tag = preds, "model"
    elif args.baseline:
        if args.baseline not in base_preds:
            raise ConfigError(f"unknown baseline '{args.baseline}'")
        preds_for_figures, figure_tag = base_preds[args.baseline], args.baseline
    else:
        raise ConfigError("eval needs --checkpoint or --baseline")

    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        write_forecast_outputs(args.out, preds_for_figures, truth, figure_tag)
        if args.checkpoint and bundle.ground_truth is not None:
            write_graph_outputs(args.out, model.adjacency().data,
                                list(model.spec.concepts), reference=bundle.ground_truth)
        _write_run_info(args.out, "eval", sys.argv[1:])
    return 0


def _gradcheck_model() -> tuple[CCHMM, dict]:
    n, d, steps, cond_dim = 3, 4, 2, 4
    spec = ModelSpec(cond_dim=cond_dim, latent_dim=d)
    model = CCHMM.init(spec, seed=5)
    rng = np.random.default_rng(6)
    inputs = {
        "cond": rng.uniform(-1, 1, size=(steps, n, cond_dim)),
        "obs": {m: rng.uniform(-1, 1, size=(steps, n, OBS_CHANNELS[m])) for m in MODALITIES},
        "cond_next": rng.uniform(-1, 1, size=(n, cond_dim)),
        "g_hat": np.eye(n) + 0.25 * (np.ones((n, n)) - np.eye(n)),
    }
    return model, inputs


def cmd_gradcheck(args) -> int:
    if args.size != "small":
        raise ConfigError(f"unsupported gradcheck size '{args.size}'")
    model, inputs = _gradcheck_model()
    g_hat = ad.constant(inputs["g_hat"])

    def build():
        ro = model.rollout(inputs["cond"], inputs["obs"], inputs["cond_next"],
                           g_hat, mode="train", rng=np.random.default_rng(17))
        loss, _ = total_loss(ro, inputs["obs"], model.adjacency(), lam=1.0)
        return loss

    report = ad.check_gradients(build, model.params, eps=1e-5)
    for name in sorted(report["per_leaf"], key=report["per_leaf"].get, reverse=True)[:10]:
        print(f"{report['per_leaf'][name]:.3e}  {name}")
    print(f"max relative error {report['max_rel_err']:.3e} "
          f"(worst group: {report['worst_leaf']})")
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        dump_json(args.out, {
            "max_rel_err": repr(report["max_rel_err"]),
            "worst_leaf": report["worst_leaf"],
            "per_leaf": {k: repr(v) for k, v in report["per_leaf"].items()},
        })
    if report["max_rel_err"] >= GRADCHECK_TOLERANCE:
        print(f"FAIL: gradient check exceeded {GRADCHECK_TOLERANCE:g} "
              f"in group {report['worst_leaf']}", file=sys.stderr)
        return 4
    print("PASS")
    return 0


def cmd_export_graph(args) -> int:
    model = load_checkpoint(args.checkpoint)
    matrix = model.adjacency().data
    labels = list(model.spec.concepts)
    out = args.out
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    stem, _ = os.path.splitext(out)
    if args.format == "json":
        dump_json(out, {
            "concepts": labels,
            "matrix": [[repr(float(v)) for v in row] for row in matrix],
        })
    else:
        from .report import write_csv

        rows = [[labels[i]] + [repr(float(v)) for v in matrix[i]] for i in range(len(labels))]
        write_csv(out, ["from\\to"] + labels, rows)
    write_graph_outputs(os.path.dirname(out) or ".", matrix, labels,
                        name=os.path.basename(stem))
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cchmm",
        description="Causal conditional HMM for multimodal traffic forecasting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--variant", help="ablation variant: "
                   + ", ".join(f.replace("_", "-") for f in VARIANT_FLAGS))
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["persistence", "historical_average"])
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--history", type=int, default=6)
    p.add_argument("--out", help="directory for report, plot data, figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--size", default="small")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-graph", help="export the learned concept graph")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", default="json", choices=["json", "csv"])
    p.add_argument("--out", required=True, help="output file path")
    p.set_defaults(func=cmd_export_graph)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValidationError, BundleFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingAbort, NonFiniteError, SingularMatrixError, GradientError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except CchmmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
