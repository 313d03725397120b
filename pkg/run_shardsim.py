#!/usr/bin/env python3
"""
shardsim 启动脚本
从项目根目录运行，参数同 shardsim 命令
"""

import sys

from shardsim.cli import main

if __name__ == "__main__":
    sys.exit(main())
