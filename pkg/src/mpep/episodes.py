"""Treatment-episode coding from prescription reimbursement dates.

Each reimbursement on day ``d`` implies a provisional treatment episode
``[d - 60, d - 12]`` (closed, integer days).  Reimbursements less than
62 days apart belong to the same continuous episode; the time between
them counts as on-treatment.  Everything else inside the follow-up
window is off-treatment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

EPISODE_START_OFFSET = 60
EPISODE_END_OFFSET = 12
MERGE_GAP = 62


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class TreatmentEpisode:
    start: int
    end: int

    def __post_init__(self):
        if self.start > self.end:
            raise EpisodeError(f"episode start {self.start} after end {self.end}")

    @property
    def days(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class EpisodeCoding:
    episodes: tuple[TreatmentEpisode, ...]
    t_on: int
    t_off: int

    def __iter__(self):
        # allows ``episodes, t_on, t_off = code_treatment_episodes(...)``
        return iter((list(self.episodes), self.t_on, self.t_off))


def _check_days(days: Sequence[int], followup_start: int, followup_end: int):
    if len(days) == 0:
        raise EpisodeError("no reimbursement dates")
    if followup_end < followup_start:
        raise EpisodeError("follow-up window is empty")
    for a, b in zip(days, days[1:]):
        if b == a:
            raise EpisodeError(f"duplicate reimbursement day {a}")
        if b < a:
            raise EpisodeError(f"reimbursement days not sorted ({a} before {b})")
    if days[-1] > followup_end:
        raise EpisodeError(
            f"reimbursement day {days[-1]} after follow-up end {followup_end}")


def code_treatment_episodes(reimbursement_days: Sequence[int], followup_end: int,
                            followup_start: int = 0) -> EpisodeCoding:
    """Code on/off-treatment time from sorted reimbursement days.

    Parameters
    ----------
    reimbursement_days : sequence of int
        Strictly increasing day indices.
    followup_end : int
        Last day of follow-up (inclusive).
    followup_start : int
        First day of follow-up (inclusive), default 0.

    Returns
    -------
    EpisodeCoding
        Episodes clipped to the follow-up window, with on- and
        off-treatment day counts.  Unpacks as ``(episodes, t_on, t_off)``.
    """
    days = [int(d) for d in reimbursement_days]
    _check_days(days, followup_start, followup_end)

    merged: list[list[int]] = []
    prev = None
    for d in days:
        start, end = d - EPISODE_START_OFFSET, d - EPISODE_END_OFFSET
        if prev is not None and d - prev < MERGE_GAP:
            merged[-1][1] = end
        else:
            merged.append([start, end])
        prev = d

    episodes = []
    for start, end in merged:
        start = max(start, followup_start)
        end = min(end, followup_end)
        if start <= end:
            episodes.append(TreatmentEpisode(start, end))

    window = followup_end - followup_start + 1
    t_on = sum(ep.days for ep in episodes)
    return EpisodeCoding(tuple(episodes), t_on, window - t_on)


def code_union(lists: Iterable[Sequence[int]], followup_end: int,
               followup_start: int = 0) -> EpisodeCoding:
    """Code the sorted union of several reimbursement lists for one person."""
    days = sorted({int(d) for lst in lists for d in lst})
    return code_treatment_episodes(days, followup_end, followup_start)
