#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
组配准启动器
检查依赖与目录后再转交 main.py
"""

import importlib
import sys
from pathlib import Path
from typing import List, Tuple

# 添加项目路径
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

# (导入名, 用途, 是否必需)
DEPENDENCIES: List[Tuple[str, str, bool]] = [
    ('numpy', '数组运算', True),
    ('scipy.ndimage', '插值、滤波与距离变换', True),
    ('scipy.optimize', '跨模态类别匹配', True),
    ('PIL', 'Pillow预览图', True),
    ('nibabel', 'NIfTI读写', True),
    ('sqlite3', 'SQLite运行记录', True),
    ('pytest', '运行测试', False),
]

WORK_DIRS = ('data', 'logs', 'output')


def check_dependencies() -> List[str]:
    """逐个尝试导入依赖，返回缺失的必需模块"""
    print("正在检查依赖库...")
    missing = []
    for name, purpose, required in DEPENDENCIES:
        try:
            module = importlib.import_module(name)
        except ImportError:
            mark = '✗' if required else '⚠'
            print(f"{mark} {name}（{purpose}）未安装{'' if required else '，可选'}")
            if required:
                missing.append(name.split('.')[0])
            continue
        version = getattr(module, '__version__', '')
        print(f"✓ {name} {version}（{purpose}）")
    return missing


def prepare_directories():
    """创建数据、日志与输出目录"""
    for name in WORK_DIRS:
        (project_root / name).mkdir(parents=True, exist_ok=True)
    print(f"✓ 工作目录已准备: {', '.join(WORK_DIRS)}")


def main(argv=None):
    """检查环境后执行命令行；不带参数时显示帮助"""
    print("组配准启动器")
    print("=" * 40)

    missing = check_dependencies()
    if missing:
        print(f"\n缺少必要的依赖库: {', '.join(sorted(set(missing)))}")
        print("请运行: pip install -r requirements.txt")
        return 2

    prepare_directories()

    from main import main as cli_main
    argv = sys.argv[1:] if argv is None else argv
    return cli_main(list(argv) or ['--help'])


if __name__ == '__main__':
    sys.exit(main())
