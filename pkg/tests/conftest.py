import torch

# determinism claims hold in single-threaded mode; keep reductions ordered
torch.set_num_threads(1)
