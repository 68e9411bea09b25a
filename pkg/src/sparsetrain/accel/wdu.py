"""Work redistribution between PE tiles."""

from dataclasses import dataclass


@dataclass(frozen=True)
class TileState:
    """Progress of one tile through its assigned output coordinates.

    ``start``, ``position`` and ``end`` are ``(iter, x, y)`` tuples. ``assigned``
    counts the jobs the tile currently owns and ``remaining`` those it has not
    started yet, the in-flight one excluded.
    """

    pe: int
    start: tuple
    position: tuple
    end: tuple
    assigned: int
    remaining: int
    done: bool

    def __post_init__(self):
        if self.remaining < 0 or self.remaining > self.assigned:
            raise ValueError(f"remaining={self.remaining} outside [0, {self.assigned}]")
        if not self.start <= self.position <= self.end:
            raise ValueError(f"position {self.position} outside {self.start}..{self.end}")
        if self.done and self.remaining:
            raise ValueError("a done tile has no remaining work")

    @property
    def iter(self):
        return self.position[0]

    @property
    def x(self):
        return self.position[1]

    @property
    def y(self):
        return self.position[2]

    @property
    def remaining_fraction(self):
        return self.remaining / self.assigned if self.assigned else 0.0


@dataclass(frozen=True)
class RedistributionCommand:
    source: int  # busy tile giving work away
    target: int  # idle tile receiving it
    keep: int  # jobs the source keeps after its in-flight one
    moved: int
    transfer_bytes: int


def wdu_step(states, cfg, transfer_bytes=None):
    """One arbitration round.

    When some tile is idle, pick the tile with the most unstarted work (ties go
    to the lexicographically smallest state tuple, then the lower PE id). If its
    remaining fraction exceeds the threshold, hand the lower half of that
    remaining work to the first idle tile. ``transfer_bytes(state, moved)``
    prices the input data the receiver needs.
    """
    idle = [s for s in states if s.done]
    if not idle:
        return None
    busy = [s for s in states if not s.done and s.remaining > 0]
    if not busy:
        return None
    src = min(busy, key=lambda s: (-s.remaining, s.position, s.pe))
    if src.remaining_fraction <= cfg.wr_threshold:
        return None
    moved = src.remaining // 2
    if moved < 1:
        return None
    dst = min(idle, key=lambda s: s.pe)
    cost = 0 if transfer_bytes is None else int(transfer_bytes(src, moved))
    return RedistributionCommand(src.pe, dst.pe, src.remaining - moved, moved, cost)
