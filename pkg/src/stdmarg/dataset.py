"""Per-patient trial data container."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyArm, NonPositiveFollowup, DataError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Outcomes ``y``, covariates ``x`` (n x p), arm indices ``z`` and follow-up ``t``.

    ``x`` is already expanded (indicators for categorical covariates).  ``t``
    defaults to ones.  ``n_arms`` defaults to ``max(z) + 1`` but may be given
    explicitly when an arm happens to be empty in a particular sample.
    """

    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    t: Optional[np.ndarray] = None
    n_arms: Optional[int] = None
    covariate_names: Optional[Sequence[str]] = None
    arm_labels: Optional[Sequence[str]] = None
    _has_followup: bool = field(default=False, repr=False)

    def __post_init__(self):
        y = _frozen(np.ravel(self.y))
        n = y.shape[0]
        if n == 0:
            raise DataError("dataset is empty")
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(n, -1) if x.size else np.zeros((n, 0))
        if x.shape[0] != n:
            raise DimensionMismatch(f"x has {x.shape[0]} rows, y has {n}")
        z = np.asarray(self.z)
        if z.shape != (n,):
            raise DimensionMismatch(f"z has shape {z.shape}, expected ({n},)")
        if not np.all(np.equal(np.mod(z, 1), 0)) or np.any(z < 0):
            raise DataError("arm indices must be non-negative integers")
        z = z.astype(np.int64)
        z.setflags(write=False)
        has_followup = self.t is not None
        t = np.ones(n) if self.t is None else np.ravel(np.asarray(self.t, dtype=float))
        if t.shape != (n,):
            raise DimensionMismatch(f"t has shape {t.shape}, expected ({n},)")
        if not np.all(t > 0):
            bad = int(np.flatnonzero(~(t > 0))[0])
            raise NonPositiveFollowup(f"follow-up time must be > 0 (row {bad}: {t[bad]})")
        k = int(z.max()) + 1 if self.n_arms is None else int(self.n_arms)
        if k < 2:
            raise DataError("need at least two arms")
        if z.max() >= k:
            raise DataError(f"arm index {z.max()} out of range for {k} arms")
        names = self.covariate_names
        if names is not None and len(names) != x.shape[1]:
            raise DimensionMismatch("covariate_names length does not match x")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "n_arms", k)
        object.__setattr__(self, "_has_followup", has_followup and not np.all(t == 1.0))
        if names is not None:
            object.__setattr__(self, "covariate_names", tuple(names))
        if self.arm_labels is not None:
            object.__setattr__(self, "arm_labels", tuple(str(a) for a in self.arm_labels))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def unit_followup(self) -> bool:
        """True when every follow-up time equals one."""
        return not self._has_followup

    def arm_mask(self, z: int) -> np.ndarray:
        if not 0 <= z < self.n_arms:
            raise EmptyArm(f"arm {z} is not one of the {self.n_arms} arms")
        mask = self.z == z
        if not mask.any():
            raise EmptyArm(f"arm {self.arm_name(z)} has no patients")
        return mask

    def arm_name(self, z: int) -> str:
        if self.arm_labels is not None and 0 <= z < len(self.arm_labels):
            return self.arm_labels[z]
        return str(z)
