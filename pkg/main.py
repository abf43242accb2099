#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
组配准 - 命令行入口
多模态组配准、评估、体模合成、绘图数据导出与验收基准
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

# 添加项目路径到系统路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.cli import cmd_benchmark, cmd_evaluate, cmd_plotdata, cmd_register, cmd_synth
from app.config import APP_DESCRIPTION, APP_NAME, APP_VERSION, LOG_DIR, LOG_LEVEL
from app.data.database import RunLedger
from app.errors import EXIT_OK, exit_code_for
from app.io.run_config import RunConfig
from app.utils.reporter import ProgressReporter, setup_logging

logger = logging.getLogger(__name__)


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    return config.with_overrides(seed=args.seed, threads=args.threads)


def _ledger(args: argparse.Namespace) -> Optional[RunLedger]:
    if args.no_ledger:
        return None
    return RunLedger(args.ledger) if args.ledger else RunLedger()


def run_register(args: argparse.Namespace, reporter: ProgressReporter) -> int:
    cmd_register(args.inputs, args.out, _load_config(args), args.modalities, reporter, _ledger(args))
    return EXIT_OK


def run_evaluate(args: argparse.Namespace, reporter: ProgressReporter) -> int:
    cmd_evaluate(args.labels, args.out, args.transforms, args.ground_truth, args.foreground,
                 _load_config(args), args.group_id, reporter, _ledger(args))
    return EXIT_OK


def run_synth(args: argparse.Namespace, reporter: ProgressReporter) -> int:
    cmd_synth(args.out, _load_config(args), reporter, _ledger(args))
    return EXIT_OK


def run_plotdata(args: argparse.Namespace, reporter: ProgressReporter) -> int:
    ledger = RunLedger(args.ledger) if (args.ledger or args.group_sizes) else None
    cmd_plotdata(args.out, args.source, ledger, reporter=reporter)
    return EXIT_OK


def run_benchmark(args: argparse.Namespace, reporter: ProgressReporter) -> int:
    seed = args.seed if args.seed is not None else 0
    cmd_benchmark(args.out, args.suite, seed, args.criteria, reporter)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='groupreg', description=APP_DESCRIPTION)
    parser.add_argument('--version', action='version', version=f"{APP_NAME} {APP_VERSION}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON运行配置文件')
    common.add_argument('--seed', type=int, help='随机种子（覆盖配置文件）')
    common.add_argument('--threads', type=int, help='线程数（覆盖环境变量GROUPREG_THREADS）')
    common.add_argument('--log-level', default=LOG_LEVEL, help='日志级别，默认INFO')
    common.add_argument('--log-dir', default=None, help=f'日志目录（例如{LOG_DIR}），缺省只输出到控制台')
    common.add_argument('--ledger', help='运行记录数据库路径，默认data/runs.db')
    common.add_argument('--no-ledger', action='store_true', help='不写入运行记录数据库')

    sub = parser.add_subparsers(dest='command', required=True)

    p_reg = sub.add_parser('register', parents=[common], help='对一组图像做组配准')
    p_reg.add_argument('inputs', nargs='+', help='图像文件（.grc/.nii/.nii.gz）或synth输出目录')
    p_reg.add_argument('--modalities', nargs='+', help='每幅图像的模态标签，与输入顺序一致')
    p_reg.add_argument('--out', required=True, help='输出目录')
    p_reg.set_defaults(handler=run_register)

    p_eval = sub.add_parser('evaluate', parents=[common], help='计算DSC/ASSD/gWI/负雅可比比例')
    p_eval.add_argument('--labels', nargs='+', required=True, help='标签文件或synth输出目录')
    p_eval.add_argument('--transforms', nargs='+', help='预测的前向变换或register输出目录；缺省为恒等变换')
    p_eval.add_argument('--ground-truth', nargs='+', help='真值变换或synth输出目录')
    p_eval.add_argument('--foreground', help='未形变解剖标签文件（gWI前景）')
    p_eval.add_argument('--group-id', default='group0', help='写入CSV与数据库的组编号')
    p_eval.add_argument('--out', required=True, help='输出CSV文件')
    p_eval.set_defaults(handler=run_evaluate)

    p_synth = sub.add_parser('synth', parents=[common], help='生成多模态合成体模组')
    p_synth.add_argument('--out', required=True, help='输出目录')
    p_synth.set_defaults(handler=run_synth)

    p_plot = sub.add_parser('plotdata', parents=[common], help='导出绘图用CSV')
    p_plot.add_argument('--source', help='状态文件(.grs)、轨迹CSV或register输出目录')
    p_plot.add_argument('--group-sizes', action='store_true', help='从运行记录数据库导出指标-组规模曲线')
    p_plot.add_argument('--out', required=True, help='输出目录')
    p_plot.set_defaults(handler=run_plotdata)

    p_bench = sub.add_parser('benchmark', parents=[common], help='运行验收基准')
    p_bench.add_argument('--suite', choices=('quick', 'full'), default='quick', help='基准规模')
    p_bench.add_argument('--criteria', nargs='+', type=int, help='只运行指定编号的准则')
    p_bench.add_argument('--out', required=True, help='输出CSV文件')
    p_bench.set_defaults(handler=run_benchmark)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """解析参数并执行子命令，返回退出码"""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(args.log_level, args.log_dir)
    except ValueError as e:
        parser.error(str(e))
    reporter = ProgressReporter(args.command)
    try:
        return args.handler(args, reporter)
    except KeyboardInterrupt:
        reporter.announce_error("已中断")
        return 1
    except Exception as e:
        reporter.announce_error(str(e))
        logger.debug("异常详情", exc_info=True)
        return exit_code_for(e)


if __name__ == '__main__':
    sys.exit(main())
