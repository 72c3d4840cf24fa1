"""Repeat phoneme-rate vectors by integer durations to reach frame rate."""
from __future__ import annotations

import numpy as np
import torch


def _as_int_durations(durations) -> np.ndarray:
    d = np.asarray(durations.detach().cpu() if isinstance(durations, torch.Tensor) else durations)
    if d.ndim != 1:
        raise ValueError(f"durations must be 1-D, got shape {d.shape}")
    if d.size and not np.issubdtype(d.dtype, np.integer):
        if not np.all(d == np.round(d)):
            raise ValueError("durations must be integers")
        d = d.astype(np.int64)
    if np.any(d < 0):
        raise ValueError(f"negative duration in {d.tolist()}")
    return d.astype(np.int64)


def expand(seq, durations):
    """Repeat ``seq[k]`` ``durations[k]`` times along the first axis.

    ``seq`` may be a list, numpy array or torch tensor; the result has the
    same kind. Zero durations drop the element.

    >>> expand(["a", "b", "c"], [2, 1, 3])
    ['a', 'a', 'b', 'c', 'c', 'c']
    """
    d = _as_int_durations(durations)
    if len(seq) != len(d):
        raise ValueError(f"sequence length {len(seq)} != durations length {len(d)}")
    if isinstance(seq, torch.Tensor):
        return torch.repeat_interleave(seq, torch.from_numpy(d).to(seq.device), dim=0)
    if isinstance(seq, np.ndarray):
        return np.repeat(seq, d, axis=0)
    return [item for item, n in zip(seq, d) for _ in range(n)]


def expand_batch(x: torch.Tensor, durations: torch.Tensor, lengths=None):
    """Batched ``expand`` for padded tensors.

    x: (B, K, C); durations: (B, K) integer with zeros on padding.
    Returns the padded (B, max_T, C) result and a (B, max_T) validity mask.
    """
    rows = []
    for b in range(x.shape[0]):
        k = x.shape[1] if lengths is None else int(lengths[b])
        rows.append(expand(x[b, :k], durations[b, :k]))
    max_t = max((r.shape[0] for r in rows), default=0)
    out = x.new_zeros(x.shape[0], max_t, *x.shape[2:])
    mask = torch.zeros(x.shape[0], max_t, dtype=torch.bool, device=x.device)
    for b, r in enumerate(rows):
        out[b, : r.shape[0]] = r
        mask[b, : r.shape[0]] = True
    return out, mask
