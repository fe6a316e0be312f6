"""Few-shot prompt construction for one target record.

The wording lives in plain-text templates (``templates/*.txt``) with named
placeholders, so a dataset can override any piece by pointing
:meth:`PromptTemplate.load` at a directory holding replacement files.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .dataset import Cell, FeatureSpec, FeatureStats, Table, format_cell
from .walk import NeighborSet

DEFAULT_MAX_CHARS = 16000
CORRELATION_THRESHOLD = 0.3
MAX_CORRELATIONS = 15


class NoUsableNeighbors(LookupError):
    """No neighbour observes any of the target's missing features."""


def _read_default(name: str) -> str:
    return resources.files("llmforest").joinpath("templates").joinpath(name).read_text(encoding="utf-8").strip("\n")


@dataclass(frozen=True)
class PromptTemplate:
    system: str
    user: str
    setup: str
    strategies: tuple[str, ...]
    instruction: str
    subject: str = "patient"

    @classmethod
    def default(cls) -> "PromptTemplate":
        return cls(
            system=_read_default("system.txt"),
            user=_read_default("user.txt"),
            setup=_read_default("setup.txt"),
            strategies=tuple(s for s in _read_default("strategies.txt").splitlines() if s.strip()),
            instruction=_read_default("instruction.txt"),
        )

    @classmethod
    def load(cls, directory: str | Path | None, subject: str | None = None) -> "PromptTemplate":
        """Defaults overridden by any ``<component>.txt`` found in ``directory``."""
        template = cls.default()
        if directory is not None:
            directory = Path(directory)
            for name in ("system", "user", "setup", "instruction"):
                path = directory / f"{name}.txt"
                if path.exists():
                    template = replace(template, **{name: path.read_text(encoding="utf-8").strip("\n")})
            path = directory / "strategies.txt"
            if path.exists():
                lines = path.read_text(encoding="utf-8").splitlines()
                template = replace(template, strategies=tuple(s for s in lines if s.strip()))
        return replace(template, subject=subject) if subject else template


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    user_text: str
    target: int
    missing_features: tuple[str, ...]
    neighbor_ids: tuple[int, ...] = ()
    neighbor_rows: tuple[Mapping[str, Cell], ...] = field(default=(), repr=False)

    def messages(self) -> list[dict]:
        return [
            {"role": "system", "content": self.system_text},
            {"role": "user", "content": self.user_text},
        ]


def row_to_text(row: Sequence[Cell], schema: Sequence[FeatureSpec], subject: str = "patient",
                with_missing: bool = True) -> str:
    """``"{feature}: {value}; "`` per observed cell, then the missing-feature sentence.

    >>> from llmforest.dataset import FeatureSpec
    >>> row_to_text([63.0, None], [FeatureSpec("Age"), FeatureSpec("BMI")])
    'Age: 63; the patient has missing features: {BMI}.'
    """
    parts = [f"{spec.name}: {format_cell(v, sig=4)};" for v, spec in zip(row, schema) if v is not None]
    missing = [spec.name for v, spec in zip(row, schema) if v is None]
    if missing and with_missing:
        parts.append(f"the {subject} has missing features: {{{', '.join(missing)}}}.")
    return " ".join(parts)


def correlation_lines(stats: FeatureStats, threshold: float = CORRELATION_THRESHOLD,
                      limit: int = MAX_CORRELATIONS) -> list[str]:
    corr = stats.correlation
    d = len(stats.names)
    pairs = [(a, b) for a in range(d) for b in range(a + 1, d) if abs(corr[a, b]) >= threshold]
    pairs.sort(key=lambda ab: (-abs(corr[ab]), ab))
    return [f"{stats.names[a]} is correlated with {stats.names[b]} ({corr[a, b]:.2f})" for a, b in pairs[:limit]]


def distribution_lines(stats: FeatureStats) -> list[str]:
    lines = []
    for k, name in enumerate(stats.names):
        if stats.numeric[k]:
            lines.append(f"{name} has mean = {format_cell(stats.means[k], sig=4)}")
        else:
            lines.append(f"{name} is most often {format_cell(stats.modes[k])} ({stats.mode_shares[k]:.0%})")
    return lines


def _correlations_text(stats: FeatureStats) -> str:
    corr = correlation_lines(stats)
    text = "Patterns seen in the observed data: " + ("; ".join(corr) + "." if corr else "no strong correlations.")
    return text + " Feature distributions: " + "; ".join(distribution_lines(stats)) + "."


def _descriptions_text(table: Table) -> str:
    lines = [table.description] if table.description else []
    described = [c for c in table.columns if c.description]
    if described:
        lines.append("Feature descriptions, as <Feature Name>: <description>:")
        lines.extend(f"{c.name}: {c.description}" for c in described)
    return "\n".join(lines) if lines else "No dataset description is available."


def usable_neighbors(table: Table, target: int, neighbors: NeighborSet) -> list[int]:
    """Neighbours observing at least one of the target's missing features."""
    missing = table.mask[target]
    return [i for i in neighbors.entries if (missing & ~table.mask[i]).any()]


def build_prompt(
    target: int,
    neighbors: NeighborSet,
    stats: FeatureStats,
    table: Table,
    template: PromptTemplate | None = None,
    max_chars: int = DEFAULT_MAX_CHARS,
) -> PromptBundle:
    """Assemble the system and user messages for ``target``.

    Raises :class:`NoUsableNeighbors` when filtering or the length budget
    leaves no neighbour record.
    """
    template = template or PromptTemplate.default()
    schema = table.columns
    missing = tuple(c.name for c, m in zip(schema, table.mask[target]) if m)
    kept = usable_neighbors(table, target, neighbors)
    subject = template.subject
    strategies = "\n".join(f"({k}) {s}" for k, s in enumerate(template.strategies, start=1))
    system_text = template.system.format(
        setup=template.setup.format(subject=subject, target=target),
        strategies=f"Choose whichever approach suits each missing feature. Options include, "
                   f"in no particular order:\n{strategies}",
    )
    fixed = dict(
        correlations=_correlations_text(stats),
        descriptions=_descriptions_text(table),
        target=f"Please infer the missing values in {subject} {target}'s record: "
               f"{row_to_text(table.values[target], schema, subject)}",
        instruction=template.instruction.format(features=", ".join(missing)),
    )

    while kept:
        blocks = [f"The records of the similar {subject}s for {subject} {target} are:"]
        blocks += [
            f"Similar {subject} records {k} are {row_to_text(table.values[i], schema, subject, with_missing=False)}"
            for k, i in enumerate(kept, start=1)
        ]
        user_text = template.user.format(neighbors="\n".join(blocks), **fixed)
        if len(system_text) + len(user_text) <= max_chars:
            break
        kept.pop()  # ranked best-first, so the weakest neighbour goes
    else:
        raise NoUsableNeighbors(target)

    rows = tuple(
        {c.name: v for c, v in zip(schema, table.values[i]) if v is not None} for i in kept
    )
    return PromptBundle(system_text, user_text, target, missing, tuple(kept), rows)
