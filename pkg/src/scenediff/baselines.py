"""Reference predictors used to calibrate learned-model metrics."""

from __future__ import annotations

import numpy as np


def constant_velocity_predict(scene, t_obs, ctx=None):
    """Extrapolate each agent from its last observed state at fixed velocity.

    Velocity comes from the displacement over the last two observed steps
    (falling back to the context velocity, then to rest). History is copied
    through; headings are held constant during extrapolation. Returns an
    (A, T, 3) grid in the scene's frame.
    """
    A, T = scene.valid.shape
    anchor = t_obs - 1
    out = scene.states.copy()
    for a in range(A):
        if not scene.valid[a, anchor]:
            continue
        p1 = scene.states[a, anchor, :2]
        if anchor > 0 and scene.valid[a, anchor - 1]:
            v = (p1 - scene.states[a, anchor - 1, :2]) / scene.dt
        elif ctx is not None:
            v = ctx.velocity[a, anchor]
        else:
            v = np.zeros(2)
        heading = scene.states[a, anchor, 2]
        steps = np.arange(1, T - anchor)
        out[a, anchor + 1 :, :2] = p1[None] + v[None] * (steps[:, None] * scene.dt)
        out[a, anchor + 1 :, 2] = heading
    return out
