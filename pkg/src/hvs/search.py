"""Evolutionary architecture search over a frozen supernet with
compatibility-aware rewards.

R1 = M(q, q)       homogeneous accuracy of the candidate
R2 = M(q, g)       candidate probes against gallery-model gallery embeddings
R3 = R1 * R2
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LabeledDataset, OpenSetSplit
from .nn import EmbeddingModel
from .retrieval import EmbeddingIndex, embed_set, metric_value
from .supernet import ArchDescriptor, SearchSpace, SuperNet, arch_flops, sample_uniform

REWARDS = ("R1", "R2", "R3")
MAX_REJECTIONS = 10_000
# crossover retries before a child may duplicate a member
CHILD_ATTEMPTS = 10
FEASIBLE_COUNT_LIMIT = 4096

_TAG_EVOLVE = 0xE70


class BudgetViolation(ValueError):
    """Candidate exceeds the flop budget and is rejected."""


class SearchConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EvolutionConfig:
    generations: int = 20
    population_size: int = 50
    crossover_size: int = 40
    mutate_prob: float = 0.1
    random_select_prob: float = 0.1
    flop_budget: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.crossover_size > self.population_size:
            raise SearchConfigurationError("crossover_size cannot exceed population_size")
        for p in (self.mutate_prob, self.random_select_prob):
            if not 0 <= p <= 1:
                raise SearchConfigurationError("probabilities must lie in [0, 1]")
        if self.generations < 1 or self.population_size < 1:
            raise SearchConfigurationError("generations and population_size must be positive")

    @property
    def random_count(self) -> int:
        return int(round(self.random_select_prob * self.population_size))

    @property
    def elite_count(self) -> int:
        return max(1, self.population_size - self.crossover_size - self.random_count)


@dataclass
class RewardContext:
    """Validation probes/gallery plus the gallery model's gallery embeddings."""

    probes: LabeledDataset
    gallery: LabeledDataset
    gallery_index: EmbeddingIndex
    metric: str = "top5"
    target: float = 0.1

    @classmethod
    def build(cls, split: OpenSetSplit, gallery_model: EmbeddingModel, metric: str = "top5",
              target: float = 0.1, gallery_per_id: int = 1) -> "RewardContext":
        gallery, probes = split.val_protocol(gallery_per_id)
        return cls(probes, gallery, embed_set(gallery_model, gallery, producer="gallery"), metric, target)


def reward_components(model: EmbeddingModel, ctx: RewardContext) -> tuple[float, float]:
    """``(R1, R2)`` for a concrete query model."""
    # an untrained path may emit zero rows; they just fail to match
    probe = embed_set(model, ctx.probes, producer="query", zero_degenerate=True)
    own_gallery = embed_set(model, ctx.gallery, producer="query", zero_degenerate=True)
    r1 = metric_value(ctx.metric, probe, own_gallery, None, ctx.target)
    r2 = metric_value(ctx.metric, probe, ctx.gallery_index, None, ctx.target)
    return r1, r2


def combine(kind: str, r1: float, r2: float) -> float:
    if kind == "R1":
        return r1
    if kind == "R2":
        return r2
    if kind == "R3":
        return r1 * r2
    raise ValueError(f"unknown reward {kind!r}; expected one of {REWARDS}")


def evaluate_reward(supernet: SuperNet, arch: ArchDescriptor, kind: str, ctx: RewardContext,
                    flop_budget: int | None = None) -> float:
    """Reward of ``arch`` with weights inherited from the supernet."""
    if flop_budget is not None and arch_flops(supernet.space, arch) > flop_budget:
        raise BudgetViolation(f"{arch} needs {arch_flops(supernet.space, arch)} flops > {flop_budget}")
    r1, r2 = reward_components(supernet.view(arch), ctx)
    return combine(kind, r1, r2)


def mutate(arch: ArchDescriptor, mutate_prob: float, space: SearchSpace, rng: np.random.Generator) -> ArchDescriptor:
    """Resample each block/width index independently with probability ``mutate_prob``."""
    n = len(arch)
    flip = rng.random((n, 2)) < mutate_prob
    blocks = rng.integers(len(space.block_kinds), size=n)
    widths = rng.integers(len(space.width_choices), size=n)
    return ArchDescriptor.of((blocks[i] if flip[i, 0] else b, widths[i] if flip[i, 1] else w)
                             for i, (b, w) in enumerate(arch.genes))


def crossover(parent_a: ArchDescriptor, parent_b: ArchDescriptor, rng: np.random.Generator) -> ArchDescriptor:
    """Gene-wise uniform crossover."""
    if len(parent_a) != len(parent_b):
        raise ValueError("parents have different lengths")
    take_a = rng.random((len(parent_a), 2)) < 0.5
    return ArchDescriptor.of((ba if ta else bb, wa if tw else wb)
                             for (ba, wa), (bb, wb), (ta, tw) in zip(parent_a.genes, parent_b.genes, take_a))


def enumerate_space(space: SearchSpace):
    genes = list(itertools.product(range(len(space.block_kinds)), range(len(space.width_choices))))
    for combo in itertools.product(genes, repeat=space.num_layers):
        yield ArchDescriptor.of(combo)


def median_flops(space: SearchSpace, samples: int = 2000, seed: int = 0) -> int:
    """Median sub-network flops (exact for small spaces, sampled otherwise)."""
    if space.size <= samples:
        flops = [arch_flops(space, a) for a in enumerate_space(space)]
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3ED]))
        flops = [arch_flops(space, sample_uniform(space, rng)) for _ in range(samples)]
    return int(np.median(flops))


@dataclass
class Candidate:
    arch: str
    reward: float
    r1: float
    r2: float
    flops: int


@dataclass
class SearchLog:
    reward_kind: str
    flop_budget: int
    generations: list = field(default_factory=list)  # list of list[Candidate]
    top5: list = field(default_factory=list)

    def best_per_generation(self) -> list[float]:
        return [max(c.reward for c in gen) for gen in self.generations]

    def to_dict(self) -> dict:
        return {
            "reward_kind": self.reward_kind,
            "flop_budget": self.flop_budget,
            "generations": [[asdict(c) for c in gen] for gen in self.generations],
            "top5": [asdict(c) for c in self.top5],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


class _Evaluator:
    def __init__(self, supernet, kind, ctx, budget):
        self.supernet, self.kind, self.ctx, self.budget = supernet, kind, ctx, budget
        self.cache: dict[ArchDescriptor, Candidate] = {}

    def __call__(self, arch: ArchDescriptor) -> Candidate:
        cand = self.cache.get(arch)
        if cand is None:
            flops = arch_flops(self.supernet.space, arch)
            if flops > self.budget:
                raise BudgetViolation(str(arch))
            r1, r2 = reward_components(self.supernet.view(arch), self.ctx)
            cand = Candidate(str(arch), combine(self.kind, r1, r2), r1, r2, flops)
            self.cache[arch] = cand
        return cand


def _rank_key(c: Candidate):
    return (-c.reward, c.flops, c.arch)


def evolve(supernet: SuperNet, config: EvolutionConfig, kind: str, ctx: RewardContext) -> SearchLog:
    """Elitist evolutionary search under a flop budget.

    Every generation keeps the ``elite_count`` best distinct architectures
    seen so far unchanged, adds mutated crossover children of the elites and
    ``random_count`` fresh uniform samples.  Each new candidate draws from its
    own seeded stream, so the log depends only on the seed.
    """
    if kind not in REWARDS:
        raise ValueError(f"unknown reward {kind!r}")
    space = supernet.space
    budget = config.flop_budget if config.flop_budget is not None else median_flops(space, seed=config.seed)
    evaluate = _Evaluator(supernet, kind, ctx, budget)
    log = SearchLog(kind, int(budget))

    def stream(gen, idx):
        return np.random.default_rng(np.random.SeedSequence([config.seed, _TAG_EVOLVE, gen, idx]))

    def fresh(rng):
        for _ in range(MAX_REJECTIONS):
            arch = sample_uniform(space, rng)
            if arch_flops(space, arch) <= budget:
                return arch
        raise SearchConfigurationError(
            f"no architecture within {budget} flops after {MAX_REJECTIONS} uniform draws")

    # small spaces: once every feasible arch is a member, duplicates are unavoidable
    feasible = None
    if space.size <= FEASIBLE_COUNT_LIMIT:
        feasible = sum(1 for a in enumerate_space(space) if arch_flops(space, a) <= budget)

    population = [fresh(stream(0, i)) for i in range(config.population_size)]
    log.generations.append([evaluate(a) for a in population])

    for gen in range(1, config.generations):
        ranked = sorted(evaluate.cache.values(), key=_rank_key)
        elites = [ArchDescriptor.parse(c.arch) for c in ranked[:config.elite_count]]
        members = set(elites)
        new = list(elites)
        n_random = min(config.random_count, config.population_size - len(new))
        n_children = config.population_size - len(new) - n_random
        for i in range(n_children):
            rng = stream(gen, i)
            child = None
            attempts = 1 if feasible is not None and len(members) >= feasible else CHILD_ATTEMPTS
            for _ in range(attempts):
                a, b = int(rng.integers(len(elites))), int(rng.integers(len(elites)))
                cand = mutate(crossover(elites[a], elites[b], rng), config.mutate_prob, space, rng)
                if arch_flops(space, cand) > budget:
                    continue
                child = cand
                if cand not in members:
                    break
            if child is None:
                child = fresh(rng)
            members.add(child)
            new.append(child)
        for i in range(n_random):
            new.append(fresh(stream(gen, n_children + i)))
        log.generations.append([evaluate(a) for a in new])

    log.top5 = sorted(evaluate.cache.values(), key=_rank_key)[:5]
    return log


def exhaustive_best(supernet: SuperNet, kind: str, ctx: RewardContext, flop_budget: int | None = None):
    """Best reward over every architecture of a (small) space."""
    best = None
    for arch in enumerate_space(supernet.space):
        if flop_budget is not None and arch_flops(supernet.space, arch) > flop_budget:
            continue
        r = evaluate_reward(supernet, arch, kind, ctx)
        if best is None or r > best[0]:
            best = (r, arch)
    return best
