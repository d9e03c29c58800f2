"""Async wrappers for pose refinement."""

from __future__ import annotations

import asyncio
from collections.abc import AsyncIterator, Sequence

from featlm.errors import InvalidArgumentError
from featlm.lie import SE3Pose
from featlm.residual import RefinementProblem
from featlm.solver import RefinementConfig, RefinementTrace, refine_pose


async def async_refine(
    problem: RefinementProblem,
    init: SE3Pose,
    cfg: RefinementConfig | None = None,
) -> tuple[SE3Pose, RefinementTrace]:
    """Run :func:`featlm.refine_pose` in the default executor."""
    loop = asyncio.get_running_loop()
    return await loop.run_in_executor(None, refine_pose, problem, init, cfg)


async def async_refine_many(
    problems: Sequence[RefinementProblem],
    inits: Sequence[SE3Pose],
    cfg: RefinementConfig | None = None,
) -> AsyncIterator[tuple[int, SE3Pose, RefinementTrace]]:
    """
    Async generator yielding ``(index, pose, trace)`` as refinements finish.

    Usage:
        async for index, pose, trace in async_refine_many(problems, inits):
            print(index, pose)
    """
    if len(problems) != len(inits):
        raise InvalidArgumentError(f"{len(problems)} problems but {len(inits)} initial poses")
    loop = asyncio.get_running_loop()

    async def run(index: int) -> tuple[int, SE3Pose, RefinementTrace]:
        pose, trace = await loop.run_in_executor(
            None, refine_pose, problems[index], inits[index], cfg
        )
        return index, pose, trace

    tasks = [asyncio.ensure_future(run(i)) for i in range(len(problems))]
    try:
        for finished in asyncio.as_completed(tasks):
            yield await finished
    finally:
        for task in tasks:
            task.cancel()
