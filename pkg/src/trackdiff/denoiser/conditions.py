"""Per-track conditioning embeddings with explicit null (dropped) slots."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..schedule import NUM_TRACKS

__all__ = ["ConditionSet", "cfg_combine"]


@dataclass(frozen=True)
class ConditionSet:
    """Embeddings for (mixture, submixture, source).

    ``values`` has shape ``(..., 3, D)`` and ``present`` shape ``(..., 3)``.
    Slots with ``present == False`` are null; their ``values`` rows are
    ignored by every consumer.
    """

    values: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        if self.values.shape[:-1] != self.present.shape or self.present.shape[-1] != NUM_TRACKS:
            raise ValueError(
                f"condition shapes disagree: values {self.values.shape}, present {self.present.shape}"
            )

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def null(cls, dim: int, batch_shape: tuple = ()) -> "ConditionSet":
        return cls(
            np.zeros(batch_shape + (NUM_TRACKS, dim)),
            np.zeros(batch_shape + (NUM_TRACKS,), dtype=bool),
        )

    @classmethod
    def of(
        cls,
        mix: Optional[np.ndarray] = None,
        sub: Optional[np.ndarray] = None,
        src: Optional[np.ndarray] = None,
        dim: Optional[int] = None,
    ) -> "ConditionSet":
        """Build from individual track embeddings; ``None`` means null.

        Embeddings may carry leading batch axes as long as they agree.
        """
        slots = [mix, sub, src]
        given = [np.asarray(s, dtype=np.float64) for s in slots if s is not None]
        if given:
            dims = {g.shape[-1] for g in given}
            if len(dims) != 1 or (dim is not None and dim not in dims):
                raise ValueError(f"embedding dimensions disagree: {sorted(dims)}")
            dim = dims.pop()
            batch_shape = np.broadcast_shapes(*(g.shape[:-1] for g in given))
        elif dim is None:
            raise ValueError("dim is required when every slot is null")
        else:
            batch_shape = ()
        values = np.zeros(batch_shape + (NUM_TRACKS, dim))
        present = np.zeros(batch_shape + (NUM_TRACKS,), dtype=bool)
        for k, s in enumerate(slots):
            if s is not None:
                values[..., k, :] = s
                present[..., k] = True
        return cls(values, present)

    @property
    def is_null(self) -> bool:
        return not bool(np.any(self.present))

    def unconditional(self) -> "ConditionSet":
        return ConditionSet(self.values, np.zeros_like(self.present))

    def dropout(self, rng: np.random.Generator, p: float) -> "ConditionSet":
        """Independently null each slot with probability ``p``."""
        keep = rng.random(self.present.shape) >= p
        return ConditionSet(self.values, self.present & keep)


def cfg_combine(v_cond, v_uncond, scale: float) -> np.ndarray:
    """Classifier-free guidance: ``v_uncond + scale * (v_cond - v_uncond)``."""
    v_cond = np.asarray(v_cond, dtype=np.float64)
    v_uncond = np.asarray(v_uncond, dtype=np.float64)
    if v_cond.shape != v_uncond.shape:
        raise ValueError(f"shape mismatch: {v_cond.shape} vs {v_uncond.shape}")
    if scale == 1.0:
        return v_cond.copy()
    if scale == 0.0:
        return v_uncond.copy()
    return v_uncond + scale * (v_cond - v_uncond)
