"""
Performance-driven rank shrinking.

Each training step scores the active rank slots of every adapter by a
first-order loss sensitivity and folds the scores into a per-slot EMA. At
epoch boundaries every adapter keeps the smallest set of slots whose sorted
EMA covers a fraction rho of the total; the rest are erased for good.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from adapters import AdapterState, InvariantError, PrefixMask
from config import PdrsConfig

logger = logging.getLogger(__name__)

# Slack on the uncovered-mass budget so decimal rho (0.9 stored as 0.90000000000000002) still
# accepts exact coverage like 9/10; scales with 1 - rho, so rho = 1 gets none
UNCOVERED_RTOL = 1e-9


class MissingGradientError(RuntimeError):
    """Raised when an adapter has no gradient for the current step."""


def slot_importance(
    state: AdapterState,
    grads: Optional[Tuple[np.ndarray, np.ndarray]],
    mask: PrefixMask
) -> np.ndarray:
    """
    Loss sensitivity of the active slots.

    s_i = 0.5 * (|<A_eff[i, :], dL/dA[i, :]>| + |<B_eff[:, i], dL/dB[:, i]>|)
    for i < b.

    Args:
        state: Adapter whose factors were used in the step
        grads: (dA, dB), or None for the gradients stored on A and B
        mask: Prefix mask of the step

    Returns:
        Array of length mask.b

    Raises:
        MissingGradientError: If either gradient is absent
    """
    dA, dB = grads if grads is not None else (state.A.grad, state.B.grad)
    if dA is None or dB is None:
        raise MissingGradientError(f"adapter {state.adapter_id} has no gradient; was it in the graph?")
    b = mask.b
    a_side = np.abs(np.sum(state.A.data[:b] * dA[:b], axis=1))
    b_side = np.abs(np.sum(state.B.data[:, :b] * dB[:, :b], axis=0))
    return 0.5 * (a_side + b_side)


def ema_update(ema: np.ndarray, s: np.ndarray, beta: float, active: Sequence[int]) -> np.ndarray:
    """
    Return a copy of ema with active slots moved towards s.

    s is aligned with active: s[j] is the score of slot active[j].
    """
    out = np.array(ema, dtype=np.float64, copy=True)
    idx = np.asarray(active, dtype=np.int64)
    out[idx] = beta * out[idx] + (1.0 - beta) * np.asarray(s, dtype=np.float64)
    return out


def coverage_select(ema: np.ndarray, rho: float, floor: int = 1) -> int:
    """
    Smallest k whose top-k EMA mass reaches a fraction rho of the total.

    Tested as "the mass left outside the top k is at most (1 - rho) of the
    total", summed from the smallest slots up, so a tiny positive slot is
    never rounded away. At rho = 1 every slot with positive EMA is kept.

    Returns len(ema) unchanged when the total is zero. The result is clamped
    to [floor, len(ema)].
    """
    ema = np.asarray(ema, dtype=np.float64)
    r = ema.size
    if r < 1:
        raise InvariantError("coverage_select needs at least one slot")
    # tail[k] = EMA mass outside the top k slots
    tail = np.append(np.cumsum(np.sort(ema))[::-1], 0.0)
    total = tail[0]
    if total <= 0.0:
        return r
    budget = (1.0 - rho) * total * (1.0 + UNCOVERED_RTOL)
    hits = np.nonzero(tail[1:] <= budget)[0]
    k = int(hits[0]) + 1 if hits.size else r
    return int(min(max(k, floor), r))


@dataclass
class ShrinkRow:
    epoch: int
    adapter_id: str
    stage: int
    kind: str
    r_before: int
    r_after: int
    params_freed: int


@dataclass
class ShrinkReport:
    epoch: int
    rows: List[ShrinkRow] = field(default_factory=list)

    @property
    def changes(self) -> List[ShrinkRow]:
        return [row for row in self.rows if row.r_after != row.r_before]

    @property
    def params_freed(self) -> int:
        return sum(row.params_freed for row in self.rows)

    def to_frame(self) -> pd.DataFrame:
        columns = ['epoch', 'adapter_id', 'stage', 'kind', 'r_before', 'r_after', 'params_freed']
        return pd.DataFrame([vars(row) for row in self.rows], columns=columns)


def permute_slots(state: AdapterState, perm: np.ndarray) -> None:
    """Reorder rank slots in place: A rows, B columns and EMA together."""
    state.A.data[...] = state.A.data[perm]
    state.B.data[...] = state.B.data[:, perm]
    state.ema_scores = state.ema_scores[perm]


def truncate_rank(state: AdapterState, keep: int) -> None:
    """Erase slots >= keep and set r_curr = keep."""
    if not 1 <= keep <= state.r_curr:
        raise InvariantError(f"{state.adapter_id}: cannot truncate rank {state.r_curr} to {keep}")
    state.A.data[keep:] = 0.0
    state.B.data[:, keep:] = 0.0
    state.ema_scores[keep:] = 0.0
    state.alive = np.arange(state.r_init) < keep
    state.r_curr = keep


def shrink_epoch(
    adapters: Sequence[AdapterState],
    cfg: PdrsConfig,
    epoch: int = 0,
    optimizer=None
) -> ShrinkReport:
    """
    Apply the coverage criterion to every non-dormant adapter.

    The highest-EMA slots are moved to the front (stable order among ties)
    before cropping, so the survivors form the prefix the next epoch samples
    from. Adapters whose EMA sums to zero are left untouched.

    Args:
        adapters: Adapters to shrink
        cfg: Coverage thresholds and rank floor
        epoch: Epoch number recorded in the report
        optimizer: Optional SGD whose slot momentum follows the permutation

    Returns:
        ShrinkReport with one row per adapter
    """
    report = ShrinkReport(epoch=epoch)
    for state in adapters:
        if state.dormant:
            continue
        r_before = state.r_curr
        ema = state.ema_scores[:r_before]
        r_after = r_before
        if ema.sum() > 0.0:
            rho = cfg.rho_shared if state.kind == 'shared' else cfg.rho_task
            r_after = coverage_select(ema, rho, cfg.rank_floor)
            order = np.argsort(-ema, kind='stable')
            perm = np.concatenate([order, np.arange(r_before, state.r_init)])
            permute_slots(state, perm)
            truncate_rank(state, r_after)
            if optimizer is not None:
                optimizer.permute_slots(state.adapter_id, perm)
                optimizer.clear_slots(state.adapter_id, r_after)

        report.rows.append(ShrinkRow(
            epoch=epoch,
            adapter_id=state.adapter_id,
            stage=state.stage,
            kind=state.label,
            r_before=r_before,
            r_after=r_after,
            params_freed=(r_before - r_after) * (state.in_features + state.out_features),
        ))

    if report.changes:
        logger.info(
            f"Epoch {epoch}: shrank {len(report.changes)} adapter(s), "
            f"freed {report.params_freed} parameters"
        )
    else:
        logger.info(f"Epoch {epoch}: no rank changes")
    return report


def adapter_parameter_count(adapters: Sequence[AdapterState], mode: str = 'dora') -> int:
    """Sum of live adapter parameters over non-dormant adapters."""
    return sum(state.trainable_count(mode) for state in adapters if not state.dormant)
