"""Deterministic toy imitation environments with scripted experts.

Three point-mass tasks in normalized coordinates, integrated with
position += clamp(action) * dt:

- ``forked_paths``: reach a goal behind a wall segment; passing requires a
  discrete left/right choice, so balanced demonstrations are bimodal.
- ``multi_goal``: three interchangeable goals around the start.
- ``line_reach``: 1-D reach task, unimodal by construction.

Dynamics are pure functions of (spec, state, action); experts are
waypoint-following proportional controllers with optional action jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, ParameterError, Rng

DT = 0.1
POSITION_BOUND = 1.0


@dataclass(frozen=True)
class EnvSpec:
    name: str
    d_obs: int
    d_action: int
    max_steps: int = 60
    dt: float = DT
    tolerance: float = 0.05
    action_low: tuple = (-1.0,)
    action_high: tuple = (1.0,)
    goals: tuple = ()           # tuple of goal positions
    wall_y: float = 0.0         # forked_paths only
    wall_half_width: float = 0.3
    start: tuple = (0.0,)
    modes: tuple = (0,)

    def action_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.action_low), np.array(self.action_high)


@dataclass
class EnvState:
    position: np.ndarray
    step: int = 0
    done: bool = False
    success: bool = False
    wall_hit: bool = False


_FORKED = EnvSpec(
    name="forked_paths", d_obs=2, d_action=2,
    action_low=(-1.0, -1.0), action_high=(1.0, 1.0),
    goals=((0.0, 1.0),), start=(0.0, -1.0), modes=(0, 1),
)
_MULTI = EnvSpec(
    name="multi_goal", d_obs=2, d_action=2,
    action_low=(-1.0, -1.0), action_high=(1.0, 1.0),
    goals=((0.0, 0.85), (-0.75, -0.5), (0.75, -0.5)),
    start=(0.0, 0.0), modes=(0, 1, 2),
)
_LINE = EnvSpec(
    name="line_reach", d_obs=1, d_action=1,
    action_low=(-1.0,), action_high=(1.0,),
    goals=((1.0,),), start=(0.0,), modes=(0,),
)

ENV_NAMES = ("forked_paths", "multi_goal", "line_reach")


def make_env_spec(name: str) -> EnvSpec:
    try:
        return {"forked_paths": _FORKED, "multi_goal": _MULTI, "line_reach": _LINE}[name]
    except KeyError:
        raise ParameterError(f"unknown env '{name}' (choose from {ENV_NAMES})") from None


def env_reset(spec: EnvSpec) -> tuple[EnvState, np.ndarray]:
    pos = np.array(spec.start, dtype=np.float64)
    state = EnvState(position=pos)
    return state, pos.copy()


def _hits_wall(spec: EnvSpec, old: np.ndarray, new: np.ndarray) -> bool:
    """Does the motion segment cross the wall segment at y = wall_y?"""
    y0, y1 = old[1] - spec.wall_y, new[1] - spec.wall_y
    if y0 == y1:
        return y1 == 0.0 and abs(new[0]) <= spec.wall_half_width
    if y0 * y1 > 0.0:
        return False
    t = y0 / (y0 - y1)
    x_cross = old[0] + t * (new[0] - old[0])
    return abs(x_cross) <= spec.wall_half_width


def env_step(spec: EnvSpec, state: EnvState, action: np.ndarray):
    """Advance one step; returns (state', observation, done).  Pure: the
    input state is never mutated."""
    if state.done:
        raise ContractError("env_step called on a terminal state")
    lo, hi = spec.action_bounds()
    act = np.clip(np.asarray(action, dtype=np.float64), lo, hi)
    new_pos = np.clip(state.position + act * spec.dt, -POSITION_BOUND, POSITION_BOUND)

    wall_hit = spec.name == "forked_paths" and _hits_wall(spec, state.position, new_pos)
    if wall_hit:
        # stop on the wall at the crossing point
        y0 = state.position[1] - spec.wall_y
        t = y0 / (y0 - (new_pos[1] - spec.wall_y)) if new_pos[1] != state.position[1] else 1.0
        new_pos = state.position + t * (new_pos - state.position)

    step = state.step + 1
    success = (not wall_hit) and any(
        np.linalg.norm(new_pos - np.array(g)) <= spec.tolerance for g in spec.goals)
    done = wall_hit or success or step >= spec.max_steps
    new_state = EnvState(position=new_pos, step=step, done=done,
                         success=success, wall_hit=wall_hit)
    return new_state, new_pos.copy(), done


# ---------------------------------------------------------------------------
# scripted experts

_KP = 3.0
_WAYPOINT_RADIUS = 0.08
_JITTER_FRACTION = 0.02  # of the action range, per dimension


def _expert_waypoints(spec: EnvSpec, mode: int) -> list:
    if spec.name == "forked_paths":
        side = -1.0 if mode == 0 else 1.0
        return [np.array([side * 0.65, -0.15]),
                np.array([side * 0.65, 0.15]),
                np.array(spec.goals[0])]
    if spec.name == "multi_goal":
        return [np.array(spec.goals[mode])]
    return [np.array(spec.goals[0])]


class ExpertController:
    """Waypoint-following proportional controller, one episode at a time."""

    def __init__(self, spec: EnvSpec, mode: int, jitter_scale: float = 1.0):
        if mode not in spec.modes:
            raise ParameterError(f"mode {mode} invalid for {spec.name} (modes {spec.modes})")
        self.spec = spec
        self.mode = mode
        self.jitter_scale = jitter_scale
        self.waypoints = _expert_waypoints(spec, mode)
        self._index = 0

    def reset(self):
        self._index = 0

    def action(self, position: np.ndarray, rng: Rng) -> np.ndarray:
        while (self._index < len(self.waypoints) - 1
               and np.linalg.norm(position - self.waypoints[self._index]) < _WAYPOINT_RADIUS):
            self._index += 1
        target = self.waypoints[self._index]
        act = _KP * (target - position)
        lo, hi = self.spec.action_bounds()
        if self.jitter_scale > 0.0:
            std = self.jitter_scale * _JITTER_FRACTION * (hi - lo)
            act = act + std * rng.gaussian(act.shape)
        return np.clip(act, lo, hi)


@dataclass
class Episode:
    """One demonstration: (observation, action) pairs plus provenance."""

    observations: np.ndarray  # (L, d_obs)
    actions: np.ndarray       # (L, d_action)
    mode_label: int | None = None
    success: bool = False

    def __len__(self):
        return self.observations.shape[0]


def scripted_expert(spec: EnvSpec, mode: int, rng: Rng, jitter_scale: float = 1.0) -> Episode:
    """Roll the proportional expert through one episode."""
    controller = ExpertController(spec, mode, jitter_scale)
    state, obs = env_reset(spec)
    observations, actions = [], []
    done = False
    while not done:
        act = controller.action(state.position, rng)
        observations.append(obs)
        actions.append(act)
        state, obs, done = env_step(spec, state, act)
    return Episode(
        observations=np.array(observations), actions=np.array(actions),
        mode_label=mode, success=state.success)


def classify_mode(spec: EnvSpec, trajectory: np.ndarray,
                  success: bool = True, wall_hit: bool = False) -> int | None:
    """Which solution mode a trajectory realized, or None if unclassifiable.

    forked_paths: sign of x at the first y=0 crossing (0 = left, 1 = right);
    wall hits and non-crossing trajectories are unclassified.
    multi_goal: index of the goal reached.  line_reach: 0 on success.
    """
    trajectory = np.asarray(trajectory)
    if spec.name == "forked_paths":
        if wall_hit:
            return None
        ys = trajectory[:, 1] - spec.wall_y
        for i in range(len(ys) - 1):
            if ys[i] < 0.0 <= ys[i + 1]:
                t = ys[i] / (ys[i] - ys[i + 1])
                x_cross = trajectory[i, 0] + t * (trajectory[i + 1, 0] - trajectory[i, 0])
                return 0 if x_cross < 0.0 else 1
        return None
    if spec.name == "multi_goal":
        if not success:
            return None
        final = trajectory[-1]
        dists = [np.linalg.norm(final - np.array(g)) for g in spec.goals]
        return int(np.argmin(dists))
    return 0 if success else None


__all__ = [
    "ENV_NAMES", "EnvSpec", "EnvState", "Episode", "ExpertController",
    "classify_mode", "env_reset", "env_step", "make_env_spec", "scripted_expert",
]
