"""Rollout strategy planners and the autoregressive executor.

A plan is a list of steps; each step names the in-context example pairs
``(in, out)``, the question condition index and the frame it predicts.
Frames are indexed from 0.  Steps only reference frames that are given or
predicted by an earlier step, which :func:`check_plan` verifies by replay.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .prompt_norm import compute_stats, denormalize, normalize

PLAN_HEADER = "# vicon rollout plan v1"


@dataclass
class PlanStep:
    example_pairs: list[tuple[int, int]]
    question_in: int
    question_out: int
    stride: int

    def __post_init__(self):
        self.example_pairs = [(int(a), int(b)) for a, b in self.example_pairs]


@dataclass
class RolloutPlan:
    steps: list[PlanStep] = field(default_factory=list)
    gaps: set[int] = field(default_factory=set)
    available: list[int] = field(default_factory=list)

    @property
    def covered(self) -> set[int]:
        return {s.question_out for s in self.steps}

    def __len__(self) -> int:
        return len(self.steps)


# ---------------------------------------------------- full temporal data

def gen_single_step(D: int, R: int, T: int) -> RolloutPlan:
    """Fixed examples (0,1)..(D-1,D); predict frame i from frame i-1."""
    if R <= D:
        raise ValueError(f"insufficient examples: need R >= D+1, got D={D}, R={R}")
    if T < R:
        raise ValueError(f"need T >= R, got R={R}, T={T}")
    examples = [(j, j + 1) for j in range(D)]
    steps = [PlanStep(list(examples), i - 1, i, 1) for i in range(R, T)]
    return RolloutPlan(steps, set(), list(range(R)))


def gen_flexible_step(D: int, R: int, M: int, T: int) -> RolloutPlan:
    """Warm up strides 1..M from frame R-1, then advance at stride M."""
    if R < M + 1:
        raise ValueError(f"flexible strategy requires R >= M+1, got R={R}, M={M}")
    if T < R:
        raise ValueError(f"need T >= R, got R={R}, T={T}")
    examples = {}
    for s in range(1, M + 1):
        nd = min(D, R - s)
        outs = list(range(R - nd, R))
        reps = math.ceil(D / nd)
        outs = sorted((outs * reps)[:D])
        examples[s] = [(o - s, o) for o in outs]
    steps = []
    for i in range(R, T):
        s = min(i - R + 1, M)
        steps.append(PlanStep(list(examples[s]), i - s, i, s))
    return RolloutPlan(steps, set(), list(range(R)))


# ------------------------------------------------- imperfect measurements

def get_available_pairs(D: int, dt: int, Fa: Iterable[int]) -> list[tuple[int, int]]:
    """All stride-``dt`` pairs inside ``Fa``, tiled up to ``D`` when short.

    The tiled list is sorted by input index, which is how the published
    example listings are ordered.
    """
    fa = sorted(Fa)
    pairs = [(fa[i], fa[j]) for i in range(len(fa)) for j in range(i + 1, len(fa))
             if fa[j] - fa[i] == dt]
    if not pairs:
        return []
    if len(pairs) < D:
        reps = math.ceil(D / len(pairs))
        pairs = sorted((pairs * reps)[:D])
    return pairs


def gen_single_step_with_drops(D: int, S: int, T: int, Fa: Iterable[int]) -> RolloutPlan:
    fa = sorted(set(Fa))
    if not fa:
        raise ValueError("no available frames")
    start = fa[-1]
    targets = range(start + 1, T)
    pairs = get_available_pairs(D, S, fa)
    if not pairs:
        return RolloutPlan([], set(targets), fa)
    have = set(fa)
    steps, gaps = [], set()
    for i in targets:
        if i - S not in have:
            gaps.add(i)
            continue
        steps.append(PlanStep(list(pairs), i - S, i, S))
        have.add(i)
    return RolloutPlan(steps, gaps, fa)


def gen_flexible_with_drops(D: int, M: int, T: int, Fa: Iterable[int]) -> RolloutPlan:
    """Per target, the largest pooled stride whose condition frame exists."""
    fa = sorted(set(Fa))
    if not fa:
        raise ValueError("no available frames")
    start = fa[-1]
    targets = range(start + 1, T)
    pools = {}
    for dt in range(1, M + 1):
        pairs = get_available_pairs(D, dt, fa)
        if pairs:
            pools[dt] = pairs
    if not pools:
        return RolloutPlan([], set(targets), fa)
    max_pooled = max(pools)
    have = set(fa)
    steps, gaps = [], set()
    for i in targets:
        limit = min(i - start, M, max_pooled)
        chosen = next((s for s in sorted(pools, reverse=True) if s <= limit and i - s in have),
                      None)
        if chosen is None:
            gaps.add(i)
            continue
        steps.append(PlanStep(list(pools[chosen]), i - chosen, i, chosen))
        have.add(i)
    return RolloutPlan(steps, gaps, fa)


def make_plan(strategy: str, D: int, T: int, Fa: Iterable[int], s_max: int = 1) -> RolloutPlan:
    """Dispatch to the complete-data planners when ``Fa`` is ``0..R-1``."""
    fa = sorted(set(Fa))
    complete = fa == list(range(len(fa)))
    R = len(fa)
    if strategy == "single":
        if complete and R > D:
            return gen_single_step(D, R, T)
        return gen_single_step_with_drops(D, 1, T, fa)
    if strategy == "flexible":
        if complete and R >= s_max + 1:
            return gen_flexible_step(D, R, s_max, T)
        return gen_flexible_with_drops(D, s_max, T, fa)
    raise ValueError(f"unknown strategy {strategy!r}; expected 'single' or 'flexible'")


def apply_drops(spec: str | None, I0: int = 10, rng: np.random.Generator | None = None) -> list[int]:
    """Available initial indices after a drop spec.

    ``None``/"none" keeps all, "half-rate" keeps even indices, "random-k"
    removes ``k`` uniformly chosen indices, "drop:2,5,9" removes those listed.
    """
    frames = list(range(I0))
    if spec in (None, "", "none"):
        return frames
    if spec == "half-rate":
        return frames[::2]
    m = re.fullmatch(r"random-(\d+)", spec)
    if m:
        k = int(m.group(1))
        if not 0 <= k < I0:
            raise ValueError(f"cannot drop {k} of {I0} frames")
        rng = rng if rng is not None else np.random.default_rng(0)
        gone = set(rng.choice(I0, size=k, replace=False).tolist())
        return [f for f in frames if f not in gone]
    m = re.fullmatch(r"drop:([\d,\s]*)", spec)
    if m:
        gone = {int(x) for x in m.group(1).split(",") if x.strip()}
        return [f for f in frames if f not in gone]
    raise ValueError(f"unknown drops spec {spec!r}")


# ------------------------------------------------------------- validation

def check_plan(plan: RolloutPlan, available: Iterable[int] | None = None) -> list[str]:
    """Replay the plan and list every rule it breaks (empty when valid)."""
    have = set(plan.available if available is None else available)
    problems = []
    last_out = -math.inf
    for n, step in enumerate(plan.steps, 1):
        if step.question_out - step.question_in != step.stride:
            problems.append(f"step {n}: question stride {step.question_out - step.question_in} "
                            f"!= {step.stride}")
        for a, b in step.example_pairs:
            if b - a != step.stride:
                problems.append(f"step {n}: example ({a},{b}) has stride {b - a} != {step.stride}")
            if a not in have or b not in have:
                problems.append(f"step {n}: example ({a},{b}) uses unavailable frames")
        if step.question_in not in have:
            problems.append(f"step {n}: question frame {step.question_in} unavailable")
        if step.question_out <= last_out:
            problems.append(f"step {n}: question_out {step.question_out} not increasing")
        if step.question_out in have:
            problems.append(f"step {n}: frame {step.question_out} already available")
        if not step.example_pairs:
            problems.append(f"step {n}: no example pairs")
        last_out = step.question_out
        have.add(step.question_out)
    if plan.covered & plan.gaps:
        problems.append(f"covered and gaps overlap: {sorted(plan.covered & plan.gaps)}")
    return problems


# ---------------------------------------------------------- plan files

def format_plan(plan: RolloutPlan, comment: str | None = None) -> str:
    lines = [PLAN_HEADER]
    if comment:
        lines.append(f"# {comment}")
    lines.append("# available: " + " ".join(map(str, sorted(plan.available))))
    lines.append("# gaps: " + " ".join(map(str, sorted(plan.gaps))))
    lines.append("Rollout index | Examples (COND, QOI) | Question COND | Predict QOI")
    for n, step in enumerate(plan.steps, 1):
        ex = " ".join(f"({a},{b})" for a, b in step.example_pairs)
        lines.append(f"{n} | {ex} | {step.question_in} | {step.question_out}")
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> RolloutPlan:
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != PLAN_HEADER:
        raise ValueError("not a rollout plan file (bad header)")
    plan = RolloutPlan()
    for line in lines[1:]:
        line = line.strip()
        if line.startswith("# available:"):
            plan.available = [int(x) for x in line.split(":", 1)[1].split()]
        elif line.startswith("# gaps:"):
            plan.gaps = {int(x) for x in line.split(":", 1)[1].split()}
        elif not line or line.startswith("#") or line.startswith("Rollout index"):
            continue
        else:
            idx, ex, qi, qo = (part.strip() for part in line.split("|"))
            pairs = [(int(a), int(b)) for a, b in re.findall(r"\((\d+),(\d+)\)", ex)]
            qi, qo = int(qi), int(qo)
            if int(idx) != len(plan.steps) + 1:
                raise ValueError(f"plan rows out of order at index {idx}")
            plan.steps.append(PlanStep(pairs, qi, qo, qo - qi))
    return plan


def save_plan(plan: RolloutPlan, path, comment: str | None = None) -> None:
    Path(path).write_text(format_plan(plan, comment))


def load_plan(path) -> RolloutPlan:
    return parse_plan(Path(path).read_text())


# --------------------------------------------------------------- execution

Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class StepRecord:
    step: int
    question_in: int
    question_out: int
    stride: int
    n_examples: int
    stats: dict


@dataclass
class RolloutResult:
    predictions: dict[int, np.ndarray]
    records: list[StepRecord]
    gaps: set[int]


class MissingFrameError(KeyError):
    pass


def execute(plan: RolloutPlan, initial_frames: Mapping[int, np.ndarray], predictor: Predictor,
            channel_mask: np.ndarray | None = None) -> RolloutResult:
    """Run ``plan`` autoregressively.

    Each step normalises its prompt with statistics of the example
    conditions, asks ``predictor(conds, qois, question, mask)`` for the
    normalised qoi, and stores the de-normalised frame for later steps.
    """
    frames = {int(k): np.asarray(v) for k, v in initial_frames.items()}
    if channel_mask is None:
        channel_mask = np.ones(next(iter(frames.values())).shape[-1], bool)
    channel_mask = np.asarray(channel_mask, bool)
    preds, records = {}, []

    def fetch(n, idx):
        if idx not in frames:
            raise MissingFrameError(f"plan step {n} references frame {idx}, which is neither "
                                    f"given nor predicted yet")
        return frames[idx]

    for n, step in enumerate(plan.steps, 1):
        conds = np.stack([fetch(n, a) for a, _ in step.example_pairs])
        qois = np.stack([fetch(n, b) for _, b in step.example_pairs])
        question = fetch(n, step.question_in)
        stats = compute_stats(conds, channel_mask)
        out = predictor(normalize(conds, stats), normalize(qois, stats),
                        normalize(question, stats), channel_mask)
        pred = denormalize(np.asarray(out), stats)
        pred = np.where(channel_mask, pred, 0.0).astype(question.dtype)
        frames[step.question_out] = pred
        preds[step.question_out] = pred
        records.append(StepRecord(n, step.question_in, step.question_out, step.stride,
                                  len(step.example_pairs), stats.to_dict()))
    return RolloutResult(preds, records, set(plan.gaps))


def context_pairs(Fa: Sequence[int], stride: int) -> list[tuple[int, int]]:
    fa = set(Fa)
    return [(a, a + stride) for a in sorted(fa) if a + stride in fa]
