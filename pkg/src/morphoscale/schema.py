"""Campaign decision trees and the global answer index.

A campaign is a DAG of questions. Each answer may name a follow-up
question; volunteers who give that answer are then asked the follow-up.
Several campaigns share one global answer index, so a single vote vector
can describe a galaxy labelled in any of them.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class SchemaError(ValueError):
    """Raised when a campaign is invalid where a valid one is required."""


@dataclass(frozen=True)
class Answer:
    id: str
    label: str = ""
    child_question: str | None = None


@dataclass(frozen=True)
class Question:
    id: str
    label: str = ""
    answers: tuple[Answer, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))

    @property
    def answer_ids(self) -> tuple[str, ...]:
        return tuple(a.id for a in self.answers)


@dataclass(frozen=True)
class Campaign:
    id: str
    questions: tuple[Question, ...] = ()
    roots: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "questions", tuple(self.questions))
        object.__setattr__(self, "roots", tuple(self.roots))

    def question(self, qid: str) -> Question:
        for q in self.questions:
            if q.id == qid:
                return q
        raise KeyError(f"campaign {self.id!r} has no question {qid!r}")

    @property
    def question_ids(self) -> tuple[str, ...]:
        return tuple(q.id for q in self.questions)

    def edges(self) -> list[tuple[str, str, str]]:
        """All (parent question, answer, child question) triples."""
        return [
            (q.id, a.id, a.child_question)
            for q in self.questions
            for a in q.answers
            if a.child_question is not None
        ]

    def n_answers(self) -> int:
        return sum(len(q.answers) for q in self.questions)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str

    def __str__(self):
        return f"{self.kind}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    campaign_id: str
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def _find_cycle(adjacency: dict[str, list[str]], order: Sequence[str]) -> list[str] | None:
    white, grey, black = 0, 1, 2
    colour = {node: white for node in order}
    for start in order:
        if colour[start] != white:
            continue
        colour[start] = grey
        path = [start]
        stack = [iter(adjacency[start])]
        while stack:
            child = next(stack[-1], None)
            if child is None:
                colour[path.pop()] = black
                stack.pop()
                continue
            if colour[child] == grey:
                return path[path.index(child):] + [child]
            if colour[child] == white:
                colour[child] = grey
                path.append(child)
                stack.append(iter(adjacency[child]))
    return None


def validate_campaign(campaign: Campaign) -> ValidationReport:
    """Check a campaign against the DAG invariants.

    Violations are returned as data. Kinds: ``empty-id``, ``duplicate-id``,
    ``duplicate-answer``, ``no-answers``, ``empty-roots``, ``unknown-root``,
    ``unknown-child``, ``cycle``, ``unreachable``.
    """
    violations: list[Violation] = []
    if not campaign.id:
        violations.append(Violation("empty-id", "campaign id is empty"))

    seen: set[str] = set()
    for q in campaign.questions:
        if not q.id:
            violations.append(Violation("empty-id", "question with empty id"))
        if q.id in seen:
            violations.append(Violation("duplicate-id", f"question {q.id!r} declared more than once"))
        seen.add(q.id)
        answer_seen: set[str] = set()
        for a in q.answers:
            if not a.id:
                violations.append(Violation("empty-id", f"question {q.id!r} has an answer with empty id"))
            if a.id in answer_seen:
                violations.append(
                    Violation("duplicate-answer", f"answer {a.id!r} repeated in question {q.id!r}")
                )
            answer_seen.add(a.id)
        if not q.answers:
            violations.append(Violation("no-answers", f"question {q.id!r} has no answers"))

    if not campaign.roots:
        violations.append(Violation("empty-roots", "campaign declares no root questions"))
    for r in campaign.roots:
        if r not in seen:
            violations.append(Violation("unknown-root", f"root {r!r} is not a declared question"))

    # de-duplicated node list in declaration order
    order = list(dict.fromkeys(q.id for q in campaign.questions))
    adjacency: dict[str, list[str]] = {qid: [] for qid in order}
    for parent, aid, child in campaign.edges():
        if child not in adjacency:
            violations.append(
                Violation("unknown-child", f"answer {parent!r}/{aid!r} points to unknown question {child!r}")
            )
            continue
        adjacency[parent].append(child)

    cycle = _find_cycle(adjacency, order)
    if cycle is not None:
        violations.append(Violation("cycle", " -> ".join(cycle)))

    reached: set[str] = set()
    frontier = [r for r in campaign.roots if r in adjacency]
    while frontier:
        node = frontier.pop()
        if node in reached:
            continue
        reached.add(node)
        frontier.extend(adjacency[node])
    for qid in order:
        if qid not in reached and campaign.roots:
            violations.append(Violation("unreachable", f"question {qid!r} is not reachable from any root"))

    return ValidationReport(campaign.id, tuple(violations))


def require_valid(campaign: Campaign) -> None:
    report = validate_campaign(campaign)
    if not report.ok:
        details = "; ".join(str(v) for v in report.violations)
        raise SchemaError(f"campaign {campaign.id!r} is invalid: {details}")


def question_order(campaign: Campaign) -> list[Question]:
    """Topologically sort questions, parents before children.

    Ties are broken by declaration order (Kahn's algorithm with the
    declaration index as priority), so the result is deterministic.
    """
    positions = {q.id: i for i, q in enumerate(campaign.questions)}
    indegree = {q.id: 0 for q in campaign.questions}
    children: dict[str, list[str]] = {q.id: [] for q in campaign.questions}
    for parent, _, child in campaign.edges():
        if child not in indegree:
            raise SchemaError(f"unknown child question {child!r}")
        children[parent].append(child)
        indegree[child] += 1

    heap = [positions[qid] for qid, d in indegree.items() if d == 0]
    heapq.heapify(heap)
    out: list[Question] = []
    while heap:
        q = campaign.questions[heapq.heappop(heap)]
        out.append(q)
        for child in children[q.id]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(heap, positions[child])
    if len(out) != len(campaign.questions):
        raise SchemaError(f"campaign {campaign.id!r} contains a cycle")
    return out


@dataclass(frozen=True)
class GlobalAnswerIndex:
    """Bijection between (campaign, question, answer) and a flat index.

    Ordering: campaigns in input order, questions in declaration order,
    answers in declaration order.
    """

    entries: tuple[tuple[str, str, str], ...] = ()
    question_slices: dict[tuple[str, str], slice] = field(default_factory=dict)
    _lookup: dict[tuple[str, str, str], int] = field(default_factory=dict, repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.entries)

    def __len__(self):
        return len(self.entries)

    def index_of(self, campaign_id: str, question_id: str, answer_id: str) -> int:
        return self._lookup[(campaign_id, question_id, answer_id)]

    def key_of(self, i: int) -> tuple[str, str, str]:
        return self.entries[i]

    def slice_of(self, campaign_id: str, question_id: str) -> slice:
        return self.question_slices[(campaign_id, question_id)]

    @property
    def questions(self) -> list[tuple[str, str]]:
        return list(self.question_slices)

    def campaign_questions(self, campaign_id: str) -> list[tuple[str, str]]:
        return [key for key in self.question_slices if key[0] == campaign_id]

    def campaign_mask(self, campaign_id: str):
        """Boolean mask over the global index selecting one campaign's answers."""
        mask = np.zeros(self.size, dtype=bool)
        for key in self.campaign_questions(campaign_id):
            mask[self.question_slices[key]] = True
        return mask

    @property
    def campaign_ids(self) -> list[str]:
        return list(dict.fromkeys(cid for cid, _ in self.question_slices))


def build_global_index(campaigns: Iterable[Campaign]) -> GlobalAnswerIndex:
    campaigns = list(campaigns)
    seen_ids: set[str] = set()
    entries: list[tuple[str, str, str]] = []
    slices: dict[tuple[str, str], slice] = {}
    for campaign in campaigns:
        require_valid(campaign)
        if campaign.id in seen_ids:
            raise SchemaError(f"campaign id {campaign.id!r} appears twice")
        seen_ids.add(campaign.id)
        for q in campaign.questions:
            start = len(entries)
            entries.extend((campaign.id, q.id, a.id) for a in q.answers)
            slices[(campaign.id, q.id)] = slice(start, len(entries))
    lookup = {key: i for i, key in enumerate(entries)}
    return GlobalAnswerIndex(tuple(entries), slices, lookup)


# -- file format --------------------------------------------------------------

def campaign_to_dict(campaign: Campaign) -> dict:
    questions = []
    for q in campaign.questions:
        answers = []
        for a in q.answers:
            entry = {"id": a.id, "label": a.label}
            if a.child_question is not None:
                entry["child_question"] = a.child_question
            answers.append(entry)
        questions.append({"id": q.id, "label": q.label, "answers": answers})
    return {"id": campaign.id, "roots": list(campaign.roots), "questions": questions}


def campaign_from_dict(doc: dict) -> Campaign:
    try:
        questions = tuple(
            Question(
                id=str(q["id"]),
                label=str(q.get("label", "")),
                answers=tuple(
                    Answer(
                        id=str(a["id"]),
                        label=str(a.get("label", "")),
                        child_question=None if a.get("child_question") is None else str(a["child_question"]),
                    )
                    for a in q["answers"]
                ),
            )
            for q in doc["questions"]
        )
        return Campaign(id=str(doc["id"]), questions=questions, roots=tuple(str(r) for r in doc["roots"]))
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed campaign document: {exc!r}") from exc


def dumps_campaigns(campaigns: Sequence[Campaign]) -> str:
    return json.dumps([campaign_to_dict(c) for c in campaigns], indent=2, ensure_ascii=False) + "\n"


def loads_campaigns(text: str) -> list[Campaign]:
    doc = json.loads(text)
    if not isinstance(doc, list):
        raise SchemaError("schema file must hold a top-level list of campaigns")
    return [campaign_from_dict(c) for c in doc]


def load_campaigns(path: str | Path) -> list[Campaign]:
    return loads_campaigns(Path(path).read_text(encoding="utf-8"))


def save_campaigns(campaigns: Sequence[Campaign], path: str | Path) -> None:
    Path(path).write_text(dumps_campaigns(campaigns), encoding="utf-8")
