"""Merging the binary few-shot prediction with the base learner's multi-class mask.

Output ids: 0 background, 1 the episode's novel class, ``d + 1`` for dense base id
``d``. The shift keeps the novel label from colliding with base id 1; every mask
carries a table translating output ids back to original class ids.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TAU = 0.9


@dataclass
class GeneralizedMask:
    labels: np.ndarray
    id_table: dict | None = None

    def to_original(self) -> np.ndarray:
        if self.id_table is None:
            raise ValueError("generalized mask has no id translation table")
        lut = np.zeros(max(self.id_table) + 1, dtype=np.int64)
        for k, v in self.id_table.items():
            lut[k] = v
        return lut[self.labels]


def id_table(novel_class: int | None, base_lookup) -> dict:
    """Output id -> original class id; ``base_lookup[d]`` is the original id of dense id d."""
    table = {0: 0}
    if novel_class is not None:
        table[1] = int(novel_class)
    for dense in range(1, len(base_lookup)):
        table[dense + 1] = int(base_lookup[dense])
    return table


def _check(p_f1, m_b, tau):
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    p_f1 = np.asarray(p_f1)
    m_b = np.asarray(m_b).astype(np.int64)
    if p_f1.shape != m_b.shape:
        raise ValueError(f"shape mismatch {p_f1.shape} vs {m_b.shape}")
    return p_f1, m_b


def fuse_generalized(p_f1, m_b, tau: float = DEFAULT_TAU, novel_class: int | None = None,
                     base_lookup=None) -> GeneralizedMask:
    """Novel where the final foreground probability exceeds tau, otherwise the base
    label where the base learner sees a base class, otherwise background."""
    p_f1, m_b = _check(p_f1, m_b, tau)
    out = np.where(m_b != 0, m_b + 1, 0)
    out = np.where(p_f1 > tau, 1, out)
    table = None if base_lookup is None else id_table(novel_class, base_lookup)
    return GeneralizedMask(out, table)


def fuse_generalized_alt(p_f1, m_b, tau: float = DEFAULT_TAU, novel_class: int | None = None,
                         base_lookup=None) -> GeneralizedMask:
    """Base label wherever the base learner sees a base class; novel only in the
    remaining pixels whose final foreground probability exceeds tau."""
    p_f1, m_b = _check(p_f1, m_b, tau)
    out = np.where(p_f1 > tau, 1, 0)
    out = np.where(m_b != 0, m_b + 1, out)
    table = None if base_lookup is None else id_table(novel_class, base_lookup)
    return GeneralizedMask(out, table)


SCHEMES = {"main": fuse_generalized, "alt": fuse_generalized_alt}
