"""Episode containers and batching helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .actions import Action


@dataclass
class Episode:
    """A sequence of M+1 views with the M relative actions between them.

    ``actions[i]`` maps views[i] to views[i+1]; ``cumulative_action`` is the
    composition of all M actions, i.e. the transformation from the first
    view straight to the last.
    """

    views: np.ndarray  # (M+1, C, H, W), float32 in [0, 1]
    actions: list[Action]
    latents: list[Any]
    cumulative_action: Action
    source_id: int
    class_id: int

    def __post_init__(self):
        if len(self.actions) != self.views.shape[0] - 1:
            raise ValueError(
                f"{len(self.actions)} actions for {self.views.shape[0]} views"
            )

    @property
    def M(self) -> int:
        return len(self.actions)


def batch_views(episodes: Sequence[Episode]) -> np.ndarray:
    """Stack views into (B, M+1, C, H, W)."""
    return np.stack([ep.views for ep in episodes]).astype(np.float32)


def batch_actions(episodes: Sequence[Episode]) -> np.ndarray:
    """Stack raw action vectors into (B, M, action_dim)."""
    return np.stack(
        [[a.values for a in ep.actions] for ep in episodes]
    ).astype(np.float32)
