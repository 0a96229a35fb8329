#!/usr/bin/env python3
"""
多车道模糊驾驶员交通仿真器 命令行入口
子命令: run (单个实验) / sweep (扫参) / verify (性质检查) / plot (从 CSV 重新绘图)
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime
from typing import List, Optional

from config import (
    LOG_DIR, LOG_FORMAT, LOG_LEVEL, OUTPUT_DIR, SWEEP_EMISSION_RATES,
    SWEEP_INFLUENCE_RADII, SWEEP_LONG_FRACTIONS, SWEEP_OBSTACLES, WORKERS,
)
from analysis import emit_outputs, plot_from_csv, sweep_row, write_sweep_summary
from errors import ConfigError
from scenario import ExperimentConfig, load_experiment, run, sweep_configs
from verification import default_suites, run_suites

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2


def setup_logging(level: str = LOG_LEVEL, log_dir: str = LOG_DIR, command: str = "run") -> str:
    """设置日志配置: 带时间戳的日志文件 + 控制台输出"""
    os.makedirs(log_dir, exist_ok=True)

    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    log_filename = os.path.join(log_dir, f"traffic_{command}_{timestamp}.log")

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(log_filename, encoding="utf-8"),
            logging.StreamHandler(sys.stdout),
        ],
        force=True,
    )
    logger.info(f"日志文件: {log_filename}")
    return log_filename


def print_banner():
    """打印启动横幅"""
    banner = """
    ╔══════════════════════════════════════════════════════════════╗
    ║              多车道模糊驾驶员交通仿真器 v1.0.0                 ║
    ║                                                              ║
    ║  • run     运行一个实验并输出时间序列/基本图/互协方差          ║
    ║  • sweep   按 λ × p × ρ × 障碍物 扫参                         ║
    ║  • verify  性质检查与验收实验 (自由流/三相/障碍物/长车比例)  ║
    ║  • plot    从已有 CSV 重新绘制 SVG                            ║
    ╚══════════════════════════════════════════════════════════════╝
    """
    print(banner)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="多车道模糊驾驶员交通仿真器")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="日志级别 (默认 %(default)s)")
    parser.add_argument("--log-dir", default=LOG_DIR, help="日志目录 (默认 %(default)s)")
    parser.add_argument("--no-banner", action="store_true", help="不打印启动横幅")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="运行一个实验")
    p_run.add_argument("--config", help="实验文件 (JSON)，缺省使用 config.py 的默认值")
    p_run.add_argument("--seed", type=int, help="覆盖实验文件中的随机种子")
    p_run.add_argument("--output", default=OUTPUT_DIR, help="输出目录 (默认 %(default)s)")
    p_run.add_argument("--workers", type=int, default=WORKERS, help="并行进程数")
    p_run.add_argument("--iterations", type=int, help="覆盖迭代步数")
    p_run.add_argument("--repetitions", type=int, help="覆盖重复次数")

    p_sweep = sub.add_parser("sweep", help="扫参实验")
    p_sweep.add_argument("--config", help="基准实验文件 (JSON)")
    p_sweep.add_argument("--output", default=OUTPUT_DIR, help="输出根目录 (默认 %(default)s)")
    p_sweep.add_argument("--workers", type=int, default=WORKERS, help="并行进程数")
    p_sweep.add_argument("--rates", type=float, nargs="+", default=SWEEP_EMISSION_RATES, help="发车率 λ")
    p_sweep.add_argument("--fractions", type=float, nargs="+", default=SWEEP_LONG_FRACTIONS, help="长车比例 p")
    p_sweep.add_argument("--radii", type=float, nargs="+", default=SWEEP_INFLUENCE_RADII,
                         help="影响半径 ρ，-1 表示开放式收费")
    p_sweep.add_argument("--obstacles", nargs="+", default=SWEEP_OBSTACLES,
                         choices=["none", "left", "right"], help="障碍物位置")
    p_sweep.add_argument("--lanes", type=int, nargs="+", help="车道数 M (缺省取基准实验的值)")
    p_sweep.add_argument("--iterations", type=int, help="覆盖迭代步数")
    p_sweep.add_argument("--repetitions", type=int, help="覆盖重复次数")

    p_verify = sub.add_parser("verify", help="运行性质检查")
    p_verify.add_argument("--cases", type=int, default=1000, help="随机用例数 (元自动机等价、GWAF)")
    p_verify.add_argument("--repetitions", type=int, default=20,
                          help="碰撞检查与验收实验的重复次数 (三相检查至少 50 次)")
    p_verify.add_argument("--iterations", type=int, default=1000, help="碰撞检查与验收实验的迭代步数")
    p_verify.add_argument("--workers", type=int, default=2, help="确定性检查与验收实验的并行进程数")
    p_verify.add_argument("--only", nargs="+", help="只运行指定的检查")

    p_plot = sub.add_parser("plot", help="从 CSV 重新绘图")
    p_plot.add_argument("--input", default=OUTPUT_DIR, help="包含 CSV 的输出目录 (默认 %(default)s)")
    p_plot.add_argument("--smooth", type=int, default=1, help="cc(t) 的滑动平均窗口宽度")
    return parser


def _base_config(path: Optional[str]) -> ExperimentConfig:
    if path:
        return load_experiment(path)
    return ExperimentConfig()


def _overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    changes = {}
    for key in ("seed", "iterations", "repetitions"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    return replace(cfg, **changes) if changes else cfg


def command_run(args: argparse.Namespace) -> int:
    cfg = _overrides(_base_config(args.config), args).validate()
    logger.info(f"🚀 实验 [{cfg.name}]: L={cfg.road_length}, M={cfg.lanes}, λ={cfg.emission_rate}, "
                f"p={cfg.long_fraction}, ρ={cfg.influence_radius}, 障碍物={cfg.obstacle}, "
                f"{cfg.iterations} 步 × {cfg.repetitions} 次, 种子 {cfg.seed}")
    results = run(cfg, workers=args.workers)
    emit_outputs(results, args.output, cfg.lanes)
    logger.info(f"✅ 实验 [{cfg.name}] 完成，输出目录: {args.output}")
    return EXIT_OK


def command_sweep(args: argparse.Namespace) -> int:
    base = _overrides(_base_config(args.config), args)
    configs = sweep_configs(base, args.rates, args.fractions, args.radii, args.obstacles,
                            args.lanes or (base.lanes,))
    for cfg in configs:
        cfg.validate()
    logger.info(f"🚀 扫参共 {len(configs)} 个实验点")
    rows = []
    for n, cfg in enumerate(configs, 1):
        logger.info(f"📊 [{n}/{len(configs)}] {cfg.name}")
        results = run(cfg, workers=args.workers)
        outputs = emit_outputs(results, os.path.join(args.output, cfg.name), cfg.lanes)
        rows.append(sweep_row(cfg, results, outputs["diagram"]))
    summary_path = os.path.join(args.output, "sweep_summary.csv")
    write_sweep_summary(rows, summary_path)
    logger.info(f"✅ 扫参完成，汇总: {summary_path}")
    return EXIT_OK


def command_verify(args: argparse.Namespace) -> int:
    suites = default_suites(args.cases, args.repetitions, args.iterations, args.workers)
    if args.only:
        unknown = sorted(set(args.only) - set(suites))
        if unknown:
            raise ConfigError(f"未知的检查项: {unknown}，可用: {list(suites)}")
    results = run_suites(suites, args.only)
    for name, ok in results.items():
        print(f"{'✅' if ok else '❌'} {name}")
    return EXIT_OK if all(results.values()) else EXIT_FAILURE


def command_plot(args: argparse.Namespace) -> int:
    if args.smooth < 1:
        raise ConfigError(f"平滑窗口宽度至少为 1: {args.smooth}")
    for name in ("fundamental_diagram.csv", "cross_covariance.csv"):
        if not os.path.exists(os.path.join(args.input, name)):
            raise ConfigError(f"{args.input} 中缺少 {name}")
    paths = plot_from_csv(args.input, args.smooth)
    logger.info(f"✅ 已重新绘制: {paths}")
    return EXIT_OK


COMMANDS = {
    "run": command_run,
    "sweep": command_sweep,
    "verify": command_verify,
    "plot": command_plot,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse 在参数错误时以 2 退出，--help 时以 0 退出
        return int(e.code or 0)

    if not args.no_banner:
        print_banner()
    setup_logging(args.log_level, args.log_dir, args.command)

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"❌ 配置错误: {e}")
        return EXIT_CONFIG_ERROR
    except KeyboardInterrupt:
        logger.warning("⚠️ 程序被中断")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"❌ 运行失败: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
