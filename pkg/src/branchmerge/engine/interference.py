"""Detection of engineers stepping on each other in a shared working tree.

Files are tracked by absolute path, so engineers in separate worktrees can
never collide here; the detector reports nothing for physically isolated runs
without needing to know which mode it is in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path


class InterferenceKind(str, Enum):
    CONCURRENT_WRITE = "concurrent_write"
    STALE_READ = "stale_read"
    OVERWRITE = "overwrite"


@dataclass(frozen=True)
class InterferenceEvent:
    time: int
    engineers: tuple[str, str]
    file: str
    kind: InterferenceKind

    def to_dict(self) -> dict:
        return {"engineers": list(self.engineers), "type": self.kind.value}


@dataclass
class InterferenceDetector:
    # absolute path -> engineer -> logical time of their latest uncommitted write
    dirty: dict[Path, dict[str, int]] = field(default_factory=dict)
    events: list[InterferenceEvent] = field(default_factory=list)

    def on_write(self, time: int, engineer: str, path: Path, rel: str, *, whole_file: bool) -> list[InterferenceEvent]:
        found = []
        writers = self.dirty.setdefault(path, {})
        for other in sorted(writers):
            if other == engineer:
                continue
            pair = (engineer, other)
            found.append(InterferenceEvent(time, pair, rel, InterferenceKind.CONCURRENT_WRITE))
            if whole_file:
                found.append(InterferenceEvent(time, pair, rel, InterferenceKind.OVERWRITE))
        writers[engineer] = time
        self.events.extend(found)
        return found

    def on_read(
        self, time: int, engineer: str, root: Path, since: int, rel_of: dict[Path, str] | None = None
    ) -> list[InterferenceEvent]:
        """A run of the tests under ``root`` reads every file there.

        Files another engineer changed after ``since`` (when the reader's task
        began) and has not committed are stale from the reader's point of view.
        """
        found = []
        for path in sorted(self.dirty):
            if not path.is_relative_to(root):
                continue
            for other, t in sorted(self.dirty[path].items()):
                if other != engineer and t >= since:
                    rel = (rel_of or {}).get(path) or path.relative_to(root).as_posix()
                    found.append(InterferenceEvent(time, (engineer, other), rel, InterferenceKind.STALE_READ))
        self.events.extend(found)
        return found

    def on_settled(self, engineer: str, paths: list[Path] | None = None) -> None:
        """Forget ``engineer``'s pending writes (committed or discarded)."""
        for path in list(self.dirty):
            if paths is None or path in paths:
                self.dirty[path].pop(engineer, None)
                if not self.dirty[path]:
                    del self.dirty[path]

    def counts(self) -> dict[str, int]:
        out = {k.value: 0 for k in InterferenceKind}
        for e in self.events:
            out[e.kind.value] += 1
        return out
