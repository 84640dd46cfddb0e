import torch

# small-tensor workloads: a single thread is faster and keeps timing-based
# acceptance checks stable
torch.set_num_threads(1)
