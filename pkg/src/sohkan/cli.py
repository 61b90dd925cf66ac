"""Command-line front end: simulate | ingest | train | extract | soh | report.

Every command writes its artifacts to `--out` and finishes with `manifest-<command>.json`, which
lists all outputs with their hashes. A run is complete iff its manifest exists.
"""

import argparse
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger

from sohkan.data_utils import CycleDataset, SplitData, export_pairs_csv, load_csv, prepare_splits, save_csv
from sohkan.kan import KanModel, SplineGrid, init_model, load_model, save_model
from sohkan.plotting import SvgPlot
from sohkan.script_utils import PipelineConfig, RunManifest, load_config
from sohkan.soh_analysis import (
    SohCurve,
    baseline_ir_soh,
    build_soh_report,
    closed_form_curve,
    estimate_a2_offset,
    load_oracle_csv,
    save_oracle_csv,
    save_soh_curves,
    soh_from_a2,
)
from sohkan.symbolic import (
    OrientationError,
    SymbolicFit,
    fit_dictionary,
    load_fits,
    sample_a2,
    save_curve_csv,
    save_fits,
)
from sohkan.thermal_sim import simulate_life
from sohkan.trainer import evaluate_rmse, predict_temperatures, save_predictions, save_train_report, train
from sohkan.utils import configure_logging, log_system_stats, write_json


# Published results on the VAH17 cell, logged next to ours for comparison only
PUBLISHED_REFERENCE = {
    "dataset": "VAH17",
    "n_eol": 997,
    "test_rmse_c": 0.67,
    "cubic_r2": 0.997,
    "crossing_cycle_70": {"spline_a2": 895, "power_form_2": 790, "power_form_3": 948, "baseline_ir": 967},
    "baseline_soh_at_eol_percent": 69.14,
}


def _prepare(cfg: PipelineConfig, dataset: CycleDataset, horizon_n: int | None = None) -> SplitData:
    horizon_n = horizon_n or cfg.train.horizon_n
    offsets = cfg.split_offsets() if horizon_n == cfg.train.horizon_n else None
    return prepare_splits(
        dataset,
        horizon_n,
        offsets=offsets,
        cc_current=cfg.analysis.cc_current,
        cc_tolerance=cfg.analysis.cc_tolerance,
    )


def run_simulate(cfg: PipelineConfig, out_dir: Path) -> tuple[CycleDataset, SohCurve, list[Path]]:
    cfg.check_simulated_cc_phase()
    dataset, oracle = simulate_life(cfg.thermal, cfg.profile, cfg.schedule, progress=cfg.train.progress)
    outputs = [save_csv(dataset, out_dir / "dataset.csv"), save_oracle_csv(oracle, out_dir / "oracle_soh.csv")]
    return dataset, oracle, outputs


def run_ingest(cfg: PipelineConfig, dataset: CycleDataset, out_dir: Path) -> tuple[SplitData, list[Path]]:
    splits = _prepare(cfg, dataset)
    normalization = {
        "t_min": splits.norm.t_min,
        "t_max": splits.norm.t_max,
        "delta_t": splits.norm.delta,
        "t_bar_ambient": splits.t_bar_ambient,
        "horizon_N": splits.horizon_n,
        "offsets": splits.offsets.as_dict(),
        "n_eol": splits.n_eol,
    }
    outputs = [
        write_json(normalization, out_dir / "normalization.json"),
        export_pairs_csv(splits.pairs, out_dir / "pairs.csv"),
    ]
    return splits, outputs


def run_train(cfg: PipelineConfig, splits: SplitData, out_dir: Path) -> tuple[KanModel, dict, list[Path]]:
    train_cfg = cfg.train
    grid = SplineGrid(intervals=train_cfg.grid_intervals, order=train_cfg.spline_order)
    model = init_model(grid, splits.norm, seed=train_cfg.seed, meta={"horizon_N": splits.horizon_n, "E": splits.n_eol})
    model, report = train(model, splits.train, splits.validation, train_cfg, pairs_test=splits.test)

    steps = np.arange(1, report.steps + 1)
    loss_plot = SvgPlot("Training and validation loss", x_label="step", y_label="log10 loss")
    loss_plot.line("train", steps, np.log10(report.train_loss)).line("validation", steps, np.log10(report.val_loss))

    cycles, true_temps, pred_temps = predict_temperatures(model, splits.test, splits.norm)
    pred_plot = SvgPlot("Test split: horizon temperature", x_label="cycle", y_label="temperature (°C)")
    pred_plot.line("true", cycles, true_temps).line("predicted", cycles, pred_temps)

    summary = report.summary()
    outputs = [
        save_model(model, out_dir / "model.json"),
        save_train_report(report, out_dir / "train_report.csv"),
        write_json(summary, out_dir / "train_summary.json"),
        save_predictions(model, splits.test, splits.norm, out_dir / "predictions.csv"),
        loss_plot.save(out_dir / "loss.svg"),
        pred_plot.save(out_dir / "predictions.svg"),
    ]
    return model, summary, outputs


def run_extract(cfg: PipelineConfig, model: KanModel, out_dir: Path) -> tuple[list[SymbolicFit], list[Path]]:
    curve = sample_a2(model, cfg.analysis.n_samples)
    fits = fit_dictionary(curve)

    plot = SvgPlot("Learned cycle activation A2", x_label="k/E", y_label="A2")
    plot.line("A2 (spline)", curve.k_bar, curve.values)
    best = fits[0]
    if not best.failed:
        plot.line(f"{best.form} (R2={best.r2:.4f})", curve.k_bar, best.predict(curve.k_bar))

    outputs = [
        save_fits(fits, out_dir / "fits.json"),
        save_curve_csv(curve, out_dir / "a2_curve.csv"),
        plot.save(out_dir / "a2_curve.svg"),
    ]
    return fits, outputs


def run_soh(
    cfg: PipelineConfig,
    model: KanModel,
    fits: list[SymbolicFit],
    dataset: CycleDataset,
    out_dir: Path,
    oracle: SohCurve | None = None,
) -> tuple[dict, list[Path]]:
    n_eol = dataset.n_eol
    if n_eol < 1:
        raise ValueError("SoH analysis needs at least two cycles")

    splits = _prepare(cfg, dataset, horizon_n=model.meta.get("horizon_N"))
    curves: dict[str, SohCurve] = {}
    if oracle is not None:
        curves["oracle"] = oracle
    curves["baseline_ir"] = baseline_ir_soh(dataset, threshold=cfg.analysis.ir_step_threshold)

    cycle_curve = sample_a2(model, n_eol + 1)
    offset = estimate_a2_offset(model, splits.train, splits.t_bar_ambient, horizon_n=splits.horizon_n)
    for handling in ("raw", "anchored"):
        try:
            curve = soh_from_a2(cycle_curve, handling, offset=offset.offset)
        except OrientationError as exc:
            logger.warning(f"No {handling} spline SoH: {exc}")
            continue
        curves[curve.source] = curve

    for fit in fits:
        if fit.is_power and not fit.failed:
            try:
                curves[f"power_form_{fit.degree}"] = closed_form_curve(fit, n_eol)
            except OrientationError as exc:
                logger.warning(f"No closed-form SoH for {fit.form}: {exc}")

    primary = "spline_a2" if cfg.analysis.offset_handling == "raw" else "spline_a2_anchored"
    if primary not in curves:
        raise OrientationError(
            f"The {cfg.analysis.offset_handling} A2 curve crosses zero; offset calibration required"
        )

    reference = "oracle" if oracle is not None else "baseline_ir"
    report = build_soh_report(curves, reference, threshold=cfg.analysis.threshold_percent, fits=fits)
    cubic = next((fit for fit in fits if fit.form == "power_3"), None)
    report = {
        "primary_source": primary,
        "offset_handling": cfg.analysis.offset_handling,
        "n_eol": n_eol,
        "test_rmse_c": evaluate_rmse(model, splits.test, splits.norm),
        "cubic_r2": cubic.r2 if cubic is not None else None,
        "a2_offset": {
            "offset": offset.offset,
            "slope": offset.slope,
            "intercept": offset.intercept,
            "gamma": offset.gamma,
            "degenerate": offset.degenerate,
        },
        **report,
        "published_reference": PUBLISHED_REFERENCE,
    }

    soh_plot = SvgPlot("Power-based state of health", x_label="cycle", y_label="SoH (%)")
    for source, curve in curves.items():
        soh_plot.line(source, curve.cycles, curve.soh_percent)
    error_plot = SvgPlot(f"SoH error against {reference}", y_label="error (percentage points)")
    for source, stats in report["error_distribution"].items():
        error_plot.boxplot(source, stats)

    outputs = [
        save_soh_curves(list(curves.values()), out_dir / "soh.csv"),
        write_json(report, out_dir / "report.json"),
        soh_plot.save(out_dir / "soh.svg"),
        error_plot.save(out_dir / "soh_errors.svg"),
    ]
    return report, outputs


def _finish(command: str, cfg: PipelineConfig, inputs: list[str], outputs: list[Path], out_dir: Path, start: float):
    manifest = RunManifest(
        command=command,
        config=cfg.snapshot(),
        inputs=inputs,
        seed=cfg.train.seed,
        wall_time=time.perf_counter() - start,
    )
    for pfout in outputs:
        manifest.add_output(pfout)
    pfmanifest = manifest.write(out_dir)
    logger.success(f"{command} finished: {len(outputs)} outputs, manifest at {pfmanifest}")


def cmd_simulate(cfg: PipelineConfig, out_dir: Path, **_) -> list[Path]:
    return run_simulate(cfg, out_dir)[2]


def cmd_ingest(cfg: PipelineConfig, out_dir: Path, dataset: str, **_) -> list[Path]:
    return run_ingest(cfg, load_csv(dataset), out_dir)[1]


def cmd_train(cfg: PipelineConfig, out_dir: Path, dataset: str, **_) -> list[Path]:
    return run_train(cfg, _prepare(cfg, load_csv(dataset)), out_dir)[2]


def cmd_extract(cfg: PipelineConfig, out_dir: Path, model: str, **_) -> list[Path]:
    return run_extract(cfg, load_model(model), out_dir)[1]


def cmd_soh(
    cfg: PipelineConfig, out_dir: Path, model: str, fits: str, dataset: str, oracle: str | None = None, **_
) -> list[Path]:
    oracle_curve = load_oracle_csv(oracle) if oracle else None
    return run_soh(cfg, load_model(model), load_fits(fits), load_csv(dataset), out_dir, oracle=oracle_curve)[1]


def cmd_report(cfg: PipelineConfig, out_dir: Path, dataset: str | None = None, **_) -> list[Path]:
    """simulate (unless --dataset is given) -> ingest -> train -> extract -> soh"""
    if dataset:
        data, oracle, outputs = load_csv(dataset), None, []
    else:
        data, oracle, outputs = run_simulate(cfg, out_dir)

    splits, ingest_outputs = run_ingest(cfg, data, out_dir)
    model, _, train_outputs = run_train(cfg, splits, out_dir)
    fits, extract_outputs = run_extract(cfg, model, out_dir)
    _, soh_outputs = run_soh(cfg, model, fits, data, out_dir, oracle=oracle)
    return outputs + ingest_outputs + train_outputs + extract_outputs + soh_outputs


COMMANDS = {
    "simulate": (cmd_simulate, "Simulate a battery life and write the telemetry plus the oracle SoH"),
    "ingest": (cmd_ingest, "Normalize a telemetry CSV and export the horizon pairs"),
    "train": (cmd_train, "Train the KAN on a telemetry CSV"),
    "extract": (cmd_extract, "Fit closed forms to the learned cycle activation"),
    "soh": (cmd_soh, "Compute and compare SoH curves"),
    "report": (cmd_report, "Run the full pipeline end to end"),
}

REQUIRED_INPUTS = {
    "ingest": ("dataset",),
    "train": ("dataset",),
    "extract": ("model",),
    "soh": ("model", "fits", "dataset"),
}


def _config_overrides(args: dict[str, Any]) -> dict[str, dict[str, Any]]:
    return {
        "profile": {"n_cycles": args.pop("cycles")},
        "train": {
            "seed": args.pop("seed"),
            "steps": args.pop("steps"),
            "lambda": args.pop("lam"),
            "nu1": args.pop("nu1"),
            "nu2": args.pop("nu2"),
            "batch_size": args.pop("batch_size"),
            "learning_rate": args.pop("learning_rate"),
            "horizon_N": args.pop("horizon"),
            "progress": args.pop("progress") or None,
        },
        "analysis": {
            "offset_handling": args.pop("offset_handling"),
            "threshold_percent": args.pop("threshold"),
        },
    }


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    common.add_argument("-c", "--config", type=str, help="YAML or key=value config file. Flags override its values.")
    common.add_argument("-o", "--out", type=str, default="output/", help="Output directory, created if missing.")
    common.add_argument("--seed", type=int, help="Seed of initialization and batch shuffling.")
    common.add_argument("--cycles", type=int, help="End-of-life cycle E of the simulation.")
    common.add_argument("--steps", type=int, help="Number of optimizer steps.")
    common.add_argument("--lambda", dest="lam", type=float, help="Overall regularization weight.")
    common.add_argument("--nu1", type=float, help="Weight of the L1 activation magnitudes.")
    common.add_argument("--nu2", type=float, help="Weight of the activation entropy.")
    common.add_argument("--batch-size", type=int, help="Mini-batch size, capped at the training set size.")
    common.add_argument("--learning-rate", type=float, help="Adam learning rate.")
    common.add_argument("--horizon", type=int, help="Prediction horizon N in samples.")
    common.add_argument("--offset-handling", choices=("raw", "anchored"), help="How A2 is used for SoH.")
    common.add_argument("--threshold", type=float, help="SoH threshold (%%) of the milestone cycles.")
    common.add_argument("--progress", action="store_true", help="Show progress bars.")
    common.add_argument("--dataset", type=str, help="Telemetry CSV (cycle,t_s,temp_c,current_a,voltage_v,ambient_c).")
    common.add_argument("--model", type=str, help="Model JSON written by `train`.")
    common.add_argument("--fits", type=str, help="Fits JSON written by `extract`.")
    common.add_argument("--oracle", type=str, help="Oracle SoH CSV written by `simulate`, used as error reference.")

    parser = argparse.ArgumentParser(
        prog="sohkan",
        description="Learn a battery's long-horizon thermal map with a KAN and derive a closed-form SoH formula.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        subparsers.add_parser(
            name, parents=[common], help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    start = time.perf_counter()
    try:
        configure_logging()
        log_system_stats()
        missing = [f"--{name}" for name in REQUIRED_INPUTS.get(command, ()) if not args.get(name)]
        if missing:
            raise ValueError(f"`{command}` requires {', '.join(missing)}")

        cfg = load_config(args.pop("config")).with_overrides(_config_overrides(args))
        out_dir = Path(args.pop("out"))
        out_dir.mkdir(parents=True, exist_ok=True)
        inputs = [args[name] for name in ("dataset", "model", "fits", "oracle") if args.get(name)]

        outputs = COMMANDS[command][0](cfg, out_dir, **args)
        _finish(command, cfg, inputs, outputs, out_dir, start)
    except Exception as exc:
        logger.opt(exception=exc).debug("Traceback")
        logger.error(f"{command} failed: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
