"""Print the width of Gaussian-initialized kernels at each scale."""

import numpy as np

from mipgrid.grids import FactorGridVM
from mipgrid.mipgen import init_gaussian, mean_second_moment

rng = np.random.default_rng(0)
grid = FactorGridVM.random((16, 16, 16), 4, rng)
bank = init_gaussian(4, 3, (1.0, 1.5, 2.5, 4.0), grid)
for s in range(bank.scales):
    print(f"scale {s}: mean second moment {mean_second_moment(bank, s):.4f}")
