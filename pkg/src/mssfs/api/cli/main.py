"""
MSSFS 命令列入口

用法：
    python app.py --command fit --data data.csv --out results/ --config run.json
"""

import argparse
from pathlib import Path
from typing import List, Optional

import structlog

from simple_config import settings
from src.mssfs.api.cli.commands import COMMANDS, RunContext, command_dispatch
from src.mssfs.api.cli.config import load_run_config
from src.mssfs.core.exceptions import MssfsError, get_error_report
from src.mssfs.infrastructure.parallel import resolve_threads
from src.mssfs.infrastructure.storage.results_writer import write_metadata

logger = structlog.get_logger()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mssfs", description="多程序狀態空間模型（回饋與切換）：模擬、估計、濾波、平滑與預測"
    )
    parser.add_argument("--command", required=True, choices=COMMANDS, help="要執行的指令")
    parser.add_argument("--config", type=Path, help="JSON 執行設定檔")
    parser.add_argument("--data", type=Path, help="長格式資料檔（CSV）")
    parser.add_argument("--out", type=Path, help="輸出目錄")
    parser.add_argument("--seed", type=int, help="亂數種子，覆蓋設定檔")
    parser.add_argument("--threads", type=int, help="平行工作數，覆蓋設定檔")
    parser.add_argument("--verbose", action="store_true", help="錯誤報告附上除錯資訊")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """解析參數並執行指令，回傳結束代碼"""
    args = build_parser().parse_args(argv)
    out_dir = args.out or Path(settings.default_output_dir)
    verbose = args.verbose or settings.debug

    try:
        config = load_run_config(args.config)
    except MssfsError as e:
        report = get_error_report(e, verbose)
        logger.error("Configuration failed", **report)
        write_metadata(report, out_dir / "error.json")
        return e.exit_code

    seed = args.seed if args.seed is not None else config.seed
    threads = resolve_threads(args.threads or config.threads or settings.default_threads)
    ctx = RunContext(
        command=args.command,
        config=config,
        out_dir=out_dir,
        data_path=args.data,
        seed=seed,
        threads=threads,
    )
    return command_dispatch(ctx, verbose)
