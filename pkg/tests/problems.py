"""The generated problem suite shared by the correctness and determinism tests."""
from dataclasses import dataclass

from d3m.problem import generate_grid_problem

from oracles import helmholtz_k


@dataclass(frozen=True)
class Case:
    name: str
    dims: tuple
    domains: int
    negatives: int = 0  # 0 selects the Laplacian
    partitioner: str = "grid"
    rhs: str = "ones"

    def system(self, seed=0):
        if self.negatives:
            k = helmholtz_k(self.dims, self.negatives)
            return generate_grid_problem(self.dims, "helmholtz", k=k, seed=seed, rhs=self.rhs)
        return generate_grid_problem(self.dims, "laplacian", seed=seed, rhs=self.rhs)


CORRECTNESS_SUITE = (
    Case("chain40-lap", (40,), 2),
    Case("chain400-helm", (400,), 8, negatives=6, partitioner="bfs", rhs="random"),
    Case("chain2000-helm", (2000,), 16, negatives=40),
    Case("sq20-lap", (20, 20), 4),
    Case("sq30-helm", (30, 30), 9, negatives=5),
    Case("rect48x32-helm", (48, 32), 6, negatives=12, rhs="random"),
    Case("sq60-lap-bfs", (60, 60), 12, partitioner="bfs"),
    Case("sq64-helm", (64, 64), 16, negatives=20),
    Case("rect100x50-helm", (100, 50), 25, negatives=8, partitioner="bfs", rhs="random"),
    Case("sq100-lap", (100, 100), 32),
    Case("sq120-helm", (120, 120), 36, negatives=30),
    Case("sq141-helm", (141, 141), 64, negatives=10, rhs="random"),
    Case("rect200x100-lap", (200, 100), 2),
    Case("cube8-lap", (8, 8, 8), 8),
    Case("cube10-helm", (10, 10, 10), 8, negatives=5, rhs="random"),
    Case("cube12-helm", (12, 12, 12), 27, negatives=15),
    Case("box16x12x10-helm", (16, 12, 10), 12, negatives=9, partitioner="bfs"),
    Case("cube16-lap", (16, 16, 16), 64),
    Case("cube18-helm", (18, 18, 18), 27, negatives=25, rhs="random"),
    Case("cube20-helm", (20, 20, 20), 64, negatives=12),
    Case("box27x27x27-lap", (27, 27, 27), 64),
)

# smaller problems for repeated randomized execution
DETERMINISM_SUITE = (
    Case("chain5", (5,), 2, partitioner="bfs"),
    Case("chain60-helm", (60,), 6, negatives=5),
    Case("sq16-helm", (16, 16), 8, negatives=5, rhs="random"),
    Case("sq24-lap-bfs", (24, 24), 9, partitioner="bfs"),
    Case("cube8-helm", (8, 8, 8), 8, negatives=6),
    Case("box10x8x6-lap", (10, 8, 6), 12),
)

# criterion-6 problem: 3-D grid, 64 domains, mean interface size above 150
SCALING_CASE = Case("cube24-helm", (24, 24, 24), 64, negatives=10)
