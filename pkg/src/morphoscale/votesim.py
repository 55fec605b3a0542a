"""Synthetic volunteer votes over campaign decision trees.

Random streams
--------------
All sampling uses NumPy's ``PCG64`` bit generator. Galaxy ``i`` (its
position in the truth list) gets its own generator seeded with
``SeedSequence([seed, i])``, so each galaxy is independent of execution
order. Within a galaxy the draws happen in this order:

1. if ``volunteer_range`` is set, the root volunteer count via
   ``Generator.integers(lo, hi + 1)``;
2. if ``rho_mode == "sample"``, one ``Generator.dirichlet(alpha_star_q)``
   per question, in :func:`~morphoscale.schema.question_order`;
3. for each volunteer in turn, a depth-first walk: roots in declaration
   order, and after each answer its follow-up question (if any) before
   moving on. Each answer is one ``Generator.random()`` uniform ``u``
   mapped to the first answer whose cumulative probability exceeds ``u``.

Ports to other languages reproduce step 3 exactly given the PCG64 stream.
``dirichlet`` and ``integers`` follow NumPy's algorithms, which are not
guaranteed stable across NumPy releases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from morphoscale.schema import Campaign, GlobalAnswerIndex, SchemaError, build_global_index, question_order, require_valid

RhoMode = Literal["fixed", "sample"]


class SimulationError(ValueError):
    pass


@dataclass
class GroundTruthGalaxy:
    """True answer distributions for one galaxy.

    ``alpha_star`` maps question id to Dirichlet concentrations. ``rho``
    optionally fixes the per-question answer probabilities; in ``fixed``
    mode it takes precedence, and when absent the Dirichlet mean
    ``alpha_star / sum(alpha_star)`` is used.
    """

    galaxy_id: str
    campaign_id: str
    alpha_star: dict[str, np.ndarray] = field(default_factory=dict)
    rho: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.alpha_star = {q: np.asarray(v, dtype=np.float64) for q, v in self.alpha_star.items()}
        for q, a in self.alpha_star.items():
            if np.any(a <= 0) or not np.all(np.isfinite(a)):
                raise SimulationError(f"alpha_star for {q!r} must be positive and finite")
        if self.rho is not None:
            self.rho = {q: np.asarray(v, dtype=np.float64) for q, v in self.rho.items()}
            for q, r in self.rho.items():
                if np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
                    raise SimulationError(f"rho for {q!r} must be non-negative and sum to 1")

    def expected_fractions(self, qid: str) -> np.ndarray:
        if self.rho is not None and qid in self.rho:
            return self.rho[qid]
        a = self.alpha_star[qid]
        return a / a.sum()


@dataclass(frozen=True)
class SimulationConfig:
    volunteers_at_root: int = 40
    seed: int = 0
    rho_mode: RhoMode = "fixed"
    volunteer_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.volunteers_at_root < 1:
            raise SimulationError("volunteers_at_root must be positive")
        if self.rho_mode not in ("fixed", "sample"):
            raise SimulationError(f"unknown rho_mode {self.rho_mode!r}")
        if self.volunteer_range is not None:
            lo, hi = self.volunteer_range
            if not 1 <= lo <= hi:
                raise SimulationError(f"invalid volunteer range {self.volunteer_range}")


@dataclass
class GalaxyVotes:
    galaxy_id: str
    campaign_id: str
    K: np.ndarray


def galaxy_rng(seed: int, position: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), position])))


def sample_galaxy_votes(
    campaign: Campaign,
    truth: GroundTruthGalaxy,
    config: SimulationConfig,
    rng: np.random.Generator,
    index: GlobalAnswerIndex | None = None,
) -> np.ndarray:
    """Simulate every volunteer's path through ``campaign`` for one galaxy.

    Returns the galaxy's vote vector over ``index`` (by default an index
    built from this campaign alone). Answers outside the campaign stay zero.
    """
    require_valid(campaign)
    if truth.campaign_id != campaign.id:
        raise SimulationError(f"truth for {truth.galaxy_id!r} names campaign {truth.campaign_id!r}, not {campaign.id!r}")
    if index is None:
        index = build_global_index([campaign])

    ordered = question_order(campaign)
    fixed_rho = config.rho_mode == "fixed"
    for q in campaign.questions:
        has_rho = truth.rho is not None and q.id in truth.rho
        if q.id not in truth.alpha_star and not (fixed_rho and has_rho):
            raise SimulationError(f"truth for {truth.galaxy_id!r} is missing question {q.id!r}")
        width = truth.rho[q.id].size if (fixed_rho and has_rho) else truth.alpha_star[q.id].size
        if width != len(q.answers):
            raise SimulationError(f"truth for question {q.id!r} has {width} values, expected {len(q.answers)}")

    if config.volunteer_range is None:
        n_volunteers = config.volunteers_at_root
    else:
        lo, hi = config.volunteer_range
        n_volunteers = int(rng.integers(lo, hi + 1))

    if fixed_rho:
        rho = {q.id: truth.expected_fractions(q.id) for q in ordered}
    else:
        rho = {q.id: rng.dirichlet(truth.alpha_star[q.id]) for q in ordered}
    cdf = {qid: np.cumsum(r) / r.sum() for qid, r in rho.items()}

    questions = {q.id: q for q in campaign.questions}
    offsets = {q.id: index.slice_of(campaign.id, q.id).start for q in campaign.questions}
    K = np.zeros(index.size, dtype=np.int64)

    for _ in range(n_volunteers):
        stack = list(reversed(campaign.roots))
        while stack:
            qid = stack.pop()
            c = cdf[qid]
            choice = min(int(np.searchsorted(c, rng.random(), side="right")), c.size - 1)
            K[offsets[qid] + choice] += 1
            child = questions[qid].answers[choice].child_question
            if child is not None:
                stack.append(child)
    return K


def sample_dataset(
    campaigns: Sequence[Campaign],
    truths: Sequence[GroundTruthGalaxy],
    config: SimulationConfig,
    index: GlobalAnswerIndex | None = None,
) -> list[GalaxyVotes]:
    """Simulate votes for every truth record, in the order given."""
    by_id = {c.id: c for c in campaigns}
    if index is None:
        index = build_global_index(campaigns)
    out = []
    for position, truth in enumerate(truths):
        if truth.campaign_id not in by_id:
            raise SimulationError(f"unknown campaign {truth.campaign_id!r} for galaxy {truth.galaxy_id!r}")
        rng = galaxy_rng(config.seed, position)
        K = sample_galaxy_votes(by_id[truth.campaign_id], truth, config, rng, index)
        out.append(GalaxyVotes(truth.galaxy_id, truth.campaign_id, K))
    return out


def random_truths(
    campaign: Campaign,
    n_galaxies: int,
    rng: np.random.Generator,
    prior_alpha: float = 1.0,
    concentration: float = 20.0,
    prefix: str | None = None,
) -> list[GroundTruthGalaxy]:
    """Draw per-galaxy ground truths for a campaign.

    Each galaxy gets ``rho_q ~ Dirichlet(prior_alpha)`` per question and
    ``alpha_star_q = concentration * rho_q``.
    """
    prefix = campaign.id if prefix is None else prefix
    truths = []
    for i in range(n_galaxies):
        rho = {q.id: rng.dirichlet(np.full(len(q.answers), prior_alpha)) for q in campaign.questions}
        # dirichlet can return exact zeros for tiny prior_alpha
        rho = {q: np.clip(r, 1e-9, None) / np.clip(r, 1e-9, None).sum() for q, r in rho.items()}
        alpha = {q: concentration * r for q, r in rho.items()}
        truths.append(GroundTruthGalaxy(f"{prefix}-{i:05d}", campaign.id, alpha, rho))
    return truths


# -- files ---------------------------------------------------------------------

def votes_to_record(galaxy: GalaxyVotes, index: GlobalAnswerIndex) -> dict:
    votes: dict[str, dict[str, int]] = {}
    for cid, qid in index.campaign_questions(galaxy.campaign_id):
        sl = index.slice_of(cid, qid)
        counts = galaxy.K[sl]
        if counts.sum() == 0:
            continue
        votes[qid] = {index.key_of(sl.start + j)[2]: int(c) for j, c in enumerate(counts)}
    return {"galaxy_id": galaxy.galaxy_id, "campaign_id": galaxy.campaign_id, "votes": votes}


def record_to_votes(record: dict, index: GlobalAnswerIndex) -> GalaxyVotes:
    cid = record["campaign_id"]
    K = np.zeros(index.size, dtype=np.int64)
    for qid, answers in record.get("votes", {}).items():
        for aid, count in answers.items():
            try:
                i = index.index_of(cid, qid, aid)
            except KeyError:
                raise SchemaError(f"galaxy {record['galaxy_id']!r}: unknown answer {cid}/{qid}/{aid}") from None
            if int(count) != count or count < 0:
                raise SchemaError(f"galaxy {record['galaxy_id']!r}: invalid count {count!r}")
            K[i] = int(count)
    return GalaxyVotes(str(record["galaxy_id"]), cid, K)


def write_votes(galaxies: Iterable[GalaxyVotes], index: GlobalAnswerIndex, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in galaxies:
            fh.write(json.dumps(votes_to_record(g, index), sort_keys=True) + "\n")


def read_votes(path: str | Path, index: GlobalAnswerIndex) -> list[GalaxyVotes]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(record_to_votes(json.loads(line), index))
    return out


def truth_to_record(truth: GroundTruthGalaxy) -> dict:
    record = {
        "galaxy_id": truth.galaxy_id,
        "campaign_id": truth.campaign_id,
        "alpha_star": {q: [float(x) for x in a] for q, a in truth.alpha_star.items()},
    }
    if truth.rho is not None:
        record["rho"] = {q: [float(x) for x in r] for q, r in truth.rho.items()}
    return record


def record_to_truth(record: dict) -> GroundTruthGalaxy:
    return GroundTruthGalaxy(
        galaxy_id=str(record["galaxy_id"]),
        campaign_id=str(record["campaign_id"]),
        alpha_star={q: np.asarray(v, dtype=np.float64) for q, v in record.get("alpha_star", {}).items()},
        rho=None if record.get("rho") is None else {q: np.asarray(v) for q, v in record["rho"].items()},
    )


def write_truths(truths: Iterable[GroundTruthGalaxy], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in truths:
            fh.write(json.dumps(truth_to_record(t), sort_keys=True) + "\n")


def read_truths(path: str | Path) -> list[GroundTruthGalaxy]:
    with open(path, encoding="utf-8") as fh:
        return [record_to_truth(json.loads(line)) for line in fh if line.strip()]
