"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .sem import EnvironmentData


def split_environments(X, y, environments) -> list[EnvironmentData]:
    """Group rows by environment label, preserving first-appearance order."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-dimensional, got shape {X.shape}")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError("y must be a vector with one entry per row of X")
    labels = np.asarray(environments)
    if labels.ndim != 1 or labels.shape[0] != X.shape[0]:
        raise ValueError("environments must be a label per sample")
    out = []
    seen = {}
    for label in labels:
        if label not in seen:
            seen[label] = True
            mask = labels == label
            out.append(EnvironmentData(x=X[mask], y=y[mask], env_id=str(label)))
    if len(out) < 2:
        raise ValueError(
            f"need at least two distinct environments, got {len(out)}"
        )
    return out
