"""Communication accounting.

A communication round is one directed transfer, either all participating
clients to the server or the server to all participating clients.  Rounds are
counted once per direction regardless of cohort size; message counts and byte
volumes are tracked alongside for transparency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

UPLOAD = "client->server"
DOWNLOAD = "server->client"

BYTES_PER_ENTRY = 8


@dataclass(frozen=True)
class CommEvent:
    iter: int
    direction: str
    participants: int
    payload_shape: tuple[int, int]
    skipped: bool = False

    def __post_init__(self):
        if self.direction not in (UPLOAD, DOWNLOAD):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.participants < 0:
            raise ValueError("participants must be non-negative")

    @property
    def bytes(self) -> int:
        d, m = self.payload_shape
        return self.participants * d * m * BYTES_PER_ENTRY


@dataclass
class CommLog:
    kind: str
    events: list[CommEvent] = field(default_factory=list)
    zeta_seq: list[int] | None = None
    iterations: int = 0

    @property
    def rounds(self) -> int:
        return len(self.events)

    @property
    def messages(self) -> int:
        return sum(e.participants for e in self.events)

    @property
    def bytes(self) -> int:
        return sum(e.bytes for e in self.events)

    def extend(self, events) -> None:
        self.events.extend(events)

    def check(self) -> None:
        """Assert the protocol invariants for this log's trainer kind."""
        if self.kind in ("rfrec", "fcf"):
            if self.rounds != 2 * self.iterations:
                raise AssertionError(
                    f"{self.kind}: {self.rounds} events for {self.iterations} iterations"
                )
            for k in range(self.iterations):
                up, down = self.events[2 * k], self.events[2 * k + 1]
                if (up.direction, down.direction) != (UPLOAD, DOWNLOAD):
                    raise AssertionError(f"{self.kind}: bad direction order at iteration {k}")
        elif self.kind == "rfrecf":
            if self.zeta_seq is None or len(self.zeta_seq) != self.iterations:
                raise AssertionError("rfrecf: zeta sequence length != iterations")
            expected = count_transitions(self.zeta_seq)
            if self.rounds != expected:
                raise AssertionError(
                    f"rfrecf: {self.rounds} events but {expected} zeta transitions"
                )
            last = None
            for e in self.events:
                if e.direction == last:
                    raise AssertionError("rfrecf: consecutive events in the same direction")
                last = e.direction
        else:
            raise ValueError(f"unknown trainer kind {self.kind!r}")


def count_transitions(zeta_seq) -> int:
    """Number of ``k`` with ``zeta[k-1] != zeta[k]``, taking ``zeta[-1] = 0``."""
    prev = 0
    count = 0
    for z in zeta_seq:
        count += z != prev
        prev = z
    return count
