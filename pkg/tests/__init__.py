"""
shardsim 测试
"""
