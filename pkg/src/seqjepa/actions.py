"""Relative-transformation actions and their per-kind codecs.

An action is the parameter vector of the transformation mapping one view
to the next. Each kind has a fixed codec: how to compute the relative
action between two latent states, how to compose a sequence of actions,
and how to invert one. Composite kinds (several factors conditioned at
once) are written "kind_a+kind_b" and operate slice-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quat

ACTION_DIMS = {
    "rotation_quat": 4,
    "hue_delta": 1,
    "position_delta": 2,
    "crop_params": 4,
    "jitter_params": 4,
    "blur_param": 1,
    "saccade": 2,
}

# half-width of the position range, used to normalize position deltas
POSITION_EXTENT = 0.5


class CodecError(ValueError):
    """Mismatched or unknown action kinds."""


def split_kind(kind: str) -> list[str]:
    parts = kind.split("+")
    for p in parts:
        if p not in ACTION_DIMS:
            raise CodecError(f"unknown action kind {p!r}")
    return parts


def action_dim(kind: str) -> int:
    return sum(ACTION_DIMS[p] for p in split_kind(kind))


@dataclass(frozen=True)
class Action:
    kind: str
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.shape != (action_dim(self.kind),):
            raise CodecError(
                f"action of kind {self.kind!r} needs {action_dim(self.kind)} "
                f"values, got shape {vals.shape}"
            )
        for part, sl in _slices(self.kind):
            if part == "rotation_quat":
                n = np.linalg.norm(vals[sl])
                if abs(n - 1.0) > 1e-6:
                    raise CodecError(f"rotation quaternion norm {n} not unit")


def _slices(kind: str):
    out = []
    i = 0
    for part in split_kind(kind):
        d = ACTION_DIMS[part]
        out.append((part, slice(i, i + d)))
        i += d
    return out


def wrap_unit(x: float) -> float:
    """Wrap into [-0.5, 0.5)."""
    return float((x + 0.5) % 1.0 - 0.5)


def identity_action(kind: str) -> Action:
    chunks = []
    for part in split_kind(kind):
        if part == "rotation_quat":
            chunks.append(quat.IDENTITY)
        else:
            chunks.append(np.zeros(ACTION_DIMS[part]))
    return Action(kind, np.concatenate(chunks))


def _relative_part(t_i, t_j, part: str) -> np.ndarray:
    if part == "rotation_quat":
        q_i = quat.from_z_angle(t_i.angle)
        q_j = quat.from_z_angle(t_j.angle)
        return quat.qnormalize(quat.qmult(q_j, quat.qconj(q_i)))
    if part == "hue_delta":
        return np.array([wrap_unit(t_j.hue - t_i.hue)])
    if part == "position_delta":
        return np.array(
            [
                (t_j.position[0] - t_i.position[0]) / POSITION_EXTENT,
                (t_j.position[1] - t_i.position[1]) / POSITION_EXTENT,
            ]
        )
    if part == "crop_params":
        return np.array(
            [
                t_j.position[0] - t_i.position[0],
                t_j.position[1] - t_i.position[1],
                t_j.scale * t_j.aspect - t_i.scale * t_i.aspect,
                t_j.scale / t_j.aspect - t_i.scale / t_i.aspect,
            ]
        )
    if part == "jitter_params":
        return np.array(
            [
                t_j.brightness - t_i.brightness,
                t_j.contrast - t_i.contrast,
                t_j.saturation - t_i.saturation,
                wrap_unit(t_j.hue - t_i.hue),
            ]
        )
    if part == "blur_param":
        return np.array([t_j.blur_sigma - t_i.blur_sigma])
    if part == "saccade":
        return np.array(
            [(t_j.cx - t_i.cx) / t_i.extent, (t_j.cy - t_i.cy) / t_i.extent]
        )
    raise CodecError(f"unknown action kind {part!r}")


def relative_action(t_i, t_j, kind: str) -> Action:
    """Action transforming the view at latents t_i into the one at t_j."""
    chunks = [_relative_part(t_i, t_j, part) for part in split_kind(kind)]
    return Action(kind, np.concatenate(chunks))


def _compose_part(a: np.ndarray, b: np.ndarray, part: str) -> np.ndarray:
    """Composition: apply a, then b."""
    if part == "rotation_quat":
        return quat.qnormalize(quat.qmult(b, a))
    if part == "hue_delta":
        return np.array([wrap_unit(a[0] + b[0])])
    if part == "jitter_params":
        out = a + b
        out[3] = wrap_unit(out[3])
        return out
    return a + b


def compose_actions(actions: list[Action]) -> Action:
    """Fold a homogeneous action sequence into the overall action."""
    if not actions:
        raise CodecError("cannot compose an empty action sequence")
    kind = actions[0].kind
    if any(a.kind != kind for a in actions):
        kinds = sorted({a.kind for a in actions})
        raise CodecError(f"cannot compose heterogeneous kinds {kinds}")
    acc = actions[0].values.copy()
    for nxt in actions[1:]:
        chunks = [
            _compose_part(acc[sl], nxt.values[sl], part)
            for part, sl in _slices(kind)
        ]
        acc = np.concatenate(chunks)
    return Action(kind, acc)


def inverse_action(a: Action) -> Action:
    chunks = []
    for part, sl in _slices(a.kind):
        v = a.values[sl]
        if part == "rotation_quat":
            chunks.append(quat.qconj(v))
        elif part in ("hue_delta",):
            chunks.append(np.array([wrap_unit(-v[0])]))
        elif part == "jitter_params":
            out = -v
            out[3] = wrap_unit(out[3])
            chunks.append(out)
        else:
            chunks.append(-v)
    return Action(a.kind, np.concatenate(chunks))
