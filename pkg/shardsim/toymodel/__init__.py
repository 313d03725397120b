"""
桌面规模的模型组件：稀疏注意力掩码、嵌入方案、带逐块缩放钩子的残差栈、
gumbel-softmax 松弛、logit-Laplace 损失与 ELB 目标
"""
