from flowplan import bench, dataset, env, flow, mlp, planner, sampler, trainer, utils

__all__ = [
    "env",
    "mlp",
    "flow",
    "dataset",
    "trainer",
    "sampler",
    "planner",
    "bench",
    "utils",
]
