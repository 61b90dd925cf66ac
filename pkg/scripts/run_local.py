from pathlib import Path

from loguru import logger

from sohkan.cli import cmd_report
from sohkan.script_utils import load_config
from sohkan.utils import PROJECT_ROOT, configure_logging, log_system_stats, write_json


def main(
    pipeline_config: str,
    output_path: str,
    dataset: str | None = None,
):
    if not pipeline_config or not Path(pipeline_config).is_file():
        raise FileNotFoundError("pipeline_config file not found")

    configure_logging()
    log_system_stats()
    cfg = load_config(pipeline_config)
    out_dir = Path(output_path)
    out_dir.mkdir(parents=True, exist_ok=True)

    outputs = cmd_report(cfg, out_dir, dataset=dataset)
    write_json(cfg.snapshot(), out_dir / "config.json")
    logger.success(f"Wrote {len(outputs)} files to {out_dir}")


if __name__ == "__main__":
    import argparse

    cparser = argparse.ArgumentParser(formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    cparser.add_argument(
        "-c",
        "--pipeline_config",
        type=str,
        default=str(PROJECT_ROOT / "configs" / "example-config-local.yaml"),
        help="Path to the pipeline YAML config file.",
    )
    cparser.add_argument(
        "-o",
        "--output_path",
        default="output/",
        type=str,
        help="Output directory for all artifacts of the run.",
    )
    cparser.add_argument(
        "-d",
        "--dataset",
        type=str,
        help="Telemetry CSV to use instead of a simulated battery life, e.g. a converted measured dataset.",
    )

    cli_kwargs = vars(cparser.parse_args())
    main(**cli_kwargs)
