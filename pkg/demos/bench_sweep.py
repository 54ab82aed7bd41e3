"""Time the flow layer over the iteration and resolution grids.

Only relative trends mean anything here; absolute times depend on the machine.
"""

from repflownet.bench import bench_grid, to_csv

print(to_csv(bench_grid([56], [32], [10, 20, 30, 50])), end="")
print(to_csv(bench_grid([28, 56, 112], [32], [10])).split("\n", 1)[1], end="")
