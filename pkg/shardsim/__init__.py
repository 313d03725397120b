"""
shardsim 包
分布式混合精度训练机制的确定性桌面模拟
"""

__version__ = "0.1.0"
