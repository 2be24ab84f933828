"""Manager context: history condensation and prompt templates."""

from __future__ import annotations

import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from branchmerge.agents.base import AgentTurn
from branchmerge.history import StructuredArtifacts, condensation_due

MAX_SUMMARY_LINES = 200
_PLACEHOLDER = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


@dataclass(frozen=True)
class SummaryRecord:
    turns_summarized: int
    lines: tuple[str, ...] = ()

    def to_message(self) -> dict:
        body = "\n".join(self.lines)
        return {"role": "user", "content": f"Earlier turns ({self.turns_summarized}), summarized:\n{body}"}


@dataclass(frozen=True)
class CondensedHistory:
    turns: tuple[AgentTurn, ...] = ()
    summary: SummaryRecord | None = None
    artifacts: StructuredArtifacts | None = None

    def append(self, turn: AgentTurn) -> CondensedHistory:
        return replace(self, turns=(*self.turns, turn))


def summarize_turn(index: int, turn: AgentTurn) -> str:
    parts = []
    for action in turn.outputs:
        if action.kind.value == "emit_json" and isinstance(action.payload.get("document"), dict):
            parts.append("emit " + ",".join(sorted(action.payload["document"])))
        else:
            parts.append(action.kind.value)
    return f"#{index} {turn.agent_id} ({turn.iterations_consumed} it): {'; '.join(parts)}"


def condense_history(
    history: CondensedHistory | Sequence[AgentTurn], keep: StructuredArtifacts, window: int = 10
) -> CondensedHistory:
    """Fold all but the newest ``window`` turns into one summary record.

    The summarizer is a deterministic one-line-per-turn digest. ``keep`` is
    attached as is and never rewritten, so structured state survives any
    number of condensations unchanged.
    """
    h = history if isinstance(history, CondensedHistory) else CondensedHistory(tuple(history))
    if not condensation_due(len(h.turns), window):
        return replace(h, artifacts=keep)
    old, recent = h.turns[:-window], h.turns[-window:]
    start = h.summary.turns_summarized if h.summary else 0
    lines = (*(h.summary.lines if h.summary else ()), *(summarize_turn(start + i, t) for i, t in enumerate(old)))
    return CondensedHistory(recent, SummaryRecord(start + len(old), lines[-MAX_SUMMARY_LINES:]), keep)


# -- prompt templates ---------------------------------------------------------

TEMPLATE_NAMES = (
    "manager_system",
    "manager_delegate",
    "manager_assign",
    "manager_review",
    "manager_final_review",
    "engineer_system",
    "engineer_implement",
    "engineer_resolve",
)


def render(template: str, values: Mapping[str, str]) -> str:
    """Substitute ``{name}`` placeholders; unknown names are left as they are."""
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), m.group(0)), template)


@dataclass(frozen=True)
class PromptBook:
    templates: Mapping[str, str]

    @classmethod
    def bundled(cls) -> PromptBook:
        root = resources.files("branchmerge") / "templates"
        return cls({name: (root / f"{name}.txt").read_text(encoding="utf-8") for name in TEMPLATE_NAMES})

    @classmethod
    def from_dir(cls, path: str | Path) -> PromptBook:
        """Bundled templates overridden by any ``<name>.txt`` found in ``path``."""
        base = dict(cls.bundled().templates)
        for name in TEMPLATE_NAMES:
            f = Path(path) / f"{name}.txt"
            if f.is_file():
                base[name] = f.read_text(encoding="utf-8")
        return cls(base)

    def messages(self, role: str, kind: str, values: Mapping[str, str]) -> list[dict]:
        system = render(self.templates[f"{role}_system"], values)
        user = render(self.templates[f"{role}_{kind}"], values)
        return [{"role": "system", "content": system}, {"role": "user", "content": user}]
