import itertools

import numpy as np
import pytest

from hvs.data import generate_synthetic, make_open_set_split
from hvs.nn import EmbeddingModel
from hvs.search import (BudgetViolation, EvolutionConfig, RewardContext, SearchConfigurationError, combine,
                        crossover, evaluate_reward, evolve, exhaustive_best, median_flops, mutate,
                        reward_components)
from hvs.supernet import ArchDescriptor, SearchSpace, SuperNet, arch_flops, sample_uniform

from oracles import exhaustive_oracle, reward_oracle


def _randomize_biases(params, seed):
    rng = np.random.default_rng(seed)
    for p in params.values():
        if p.ndim == 1:
            p[:] = rng.uniform(-0.3, 0.3, p.shape)


def _setup(space_kw=None, seed=0, metric="top1"):
    kw = dict(num_layers=2, block_kinds=(0, 1, 3), width_choices=(0.25, 0.5, 1.0), base_width=8,
              embedding_dim=4, input_dim=6)
    kw.update(space_kw or {})
    space = SearchSpace(**kw)
    split = make_open_set_split(generate_synthetic(30, 6, 6, 0.3, seed=seed), seed=seed)
    gallery = EmbeddingModel.init(np.random.default_rng(seed), 6, [1], [8], 4)
    _randomize_biases(gallery.parameters(), seed + 1)
    net = SuperNet.init(space, 10, seed=seed)
    _randomize_biases(net.all_parameters(), seed + 2)
    return space, net.freeze(), RewardContext.build(split, gallery, metric)


class TestMutate:
    def setup_method(self):
        self.space = SearchSpace(num_layers=6, block_kinds=(0, 1, 2, 3), width_choices=(0.5, 1.0),
                                 base_width=8, embedding_dim=4, input_dim=6)

    def test_zero_prob_identity(self):
        rng = np.random.default_rng(0)
        a = sample_uniform(self.space, rng)
        assert all(mutate(a, 0.0, self.space, rng) == a for _ in range(50))

    def test_single_choice_identity(self):
        space = SearchSpace(num_layers=3, block_kinds=(1,), width_choices=(1.0,), base_width=8,
                            embedding_dim=4, input_dim=6)
        a = ArchDescriptor.of([(0, 0)] * 3)
        assert mutate(a, 1.0, space, np.random.default_rng(0)) == a

    @pytest.mark.parametrize("p", [0.1, 0.5])
    def test_changed_fraction_binomial(self, p):
        rng = np.random.default_rng(1)
        a = ArchDescriptor.of([(0, 0)] * 6)
        n = 10_000
        block_changes = width_changes = 0
        for _ in range(n // 6 + 1):
            m = mutate(a, p, self.space, rng)
            block_changes += sum(b != 0 for b, _ in m.genes)
            width_changes += sum(w != 0 for _, w in m.genes)
        trials = (n // 6 + 1) * 6
        for changes, choices in ((block_changes, 4), (width_changes, 2)):
            q = p * (1 - 1 / choices)
            sigma = np.sqrt(trials * q * (1 - q))
            assert abs(changes - trials * q) < 3 * sigma


class TestCrossover:
    def test_same_parent(self):
        a = ArchDescriptor.of([(1, 0), (2, 1), (0, 1)])
        assert crossover(a, a, np.random.default_rng(0)) == a

    def test_genes_from_parents_and_balanced(self):
        rng = np.random.default_rng(2)
        a = ArchDescriptor.of([(0, 0)] * 5)
        b = ArchDescriptor.of([(1, 1)] * 5)
        from_a = 0
        trials = 2000
        for _ in range(trials):
            c = crossover(a, b, rng)
            for bi, wi in c.genes:
                assert bi in (0, 1) and wi in (0, 1)
                from_a += (bi == 0) + (wi == 0)
        n = trials * 10
        assert abs(from_a - n / 2) < 3 * np.sqrt(n / 4)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            crossover(ArchDescriptor.of([(0, 0)]), ArchDescriptor.of([(0, 0)] * 2), np.random.default_rng(0))


class TestConfig:
    def test_defaults(self):
        c = EvolutionConfig()
        assert (c.generations, c.population_size, c.crossover_size, c.mutate_prob, c.random_select_prob) == \
            (20, 50, 40, 0.1, 0.1)
        assert (c.random_count, c.elite_count) == (5, 5)

    @pytest.mark.parametrize("kw", [{"crossover_size": 60}, {"mutate_prob": 1.5}, {"random_select_prob": -0.1},
                                    {"generations": 0}])
    def test_invalid(self, kw):
        with pytest.raises(SearchConfigurationError):
            EvolutionConfig(**kw)


class TestRewards:
    def setup_method(self):
        self.space, self.net, self.ctx = _setup()

    def test_r3_is_product(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            arch = sample_uniform(self.space, rng)
            r1 = evaluate_reward(self.net, arch, "R1", self.ctx)
            r2 = evaluate_reward(self.net, arch, "R2", self.ctx)
            assert evaluate_reward(self.net, arch, "R3", self.ctx) == pytest.approx(r1 * r2, abs=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            arch = sample_uniform(self.space, rng)
            model = self.net.extract_standalone(arch)
            for kind in ("R1", "R2", "R3"):
                expected = reward_oracle(model, self.ctx.probes, self.ctx.gallery,
                                         self.ctx.gallery_index.embeddings, kind, 1)
                assert evaluate_reward(self.net, arch, kind, self.ctx) == expected

    def test_query_equals_gallery(self):
        arch = ArchDescriptor.of([(1, 2), (0, 1)])
        model = self.net.view(arch)
        ctx = RewardContext.build(make_open_set_split(generate_synthetic(30, 6, 6, 0.3, seed=0), seed=0),
                                  model, "top1")
        r1, r2 = reward_components(model, ctx)
        assert r1 == r2
        assert combine("R3", r1, r2) == pytest.approx(r1 ** 2)

    def test_budget_violation(self):
        arch = ArchDescriptor.of([(0, 2), (0, 2)])
        with pytest.raises(BudgetViolation):
            evaluate_reward(self.net, arch, "R1", self.ctx, flop_budget=arch_flops(self.space, arch) - 1)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            combine("R4", 0.1, 0.2)


class TestEvolve:
    def setup_method(self):
        self.space, self.net, self.ctx = _setup(
            {"num_layers": 3, "block_kinds": (0, 1, 2, 3), "width_choices": (0.25, 0.5, 0.75, 1.0)})
        self.config = EvolutionConfig(generations=6, population_size=12, crossover_size=8, seed=5)

    def test_budget_and_log_shape(self):
        log = evolve(self.net, self.config, "R3", self.ctx)
        assert log.flop_budget == median_flops(self.space)
        assert len(log.generations) == 6 and all(len(g) == 12 for g in log.generations)
        for gen in log.generations:
            for c in gen:
                arch = ArchDescriptor.parse(c.arch)
                assert c.flops == arch_flops(self.space, arch) <= log.flop_budget
                assert c.reward == pytest.approx(c.r1 * c.r2, abs=1e-9)
        assert len(log.top5) == 5

    def test_elitism_monotone(self):
        for kind in ("R1", "R2", "R3"):
            best = evolve(self.net, self.config, kind, self.ctx).best_per_generation()
            assert all(a <= b for a, b in zip(best, best[1:]))

    def test_deterministic(self):
        a = evolve(self.net, self.config, "R2", self.ctx).to_json()
        b = evolve(self.net, self.config, "R2", self.ctx).to_json()
        assert a == b

    def test_top5_sorted_and_distinct(self):
        log = evolve(self.net, self.config, "R1", self.ctx)
        rewards = [c.reward for c in log.top5]
        assert rewards == sorted(rewards, reverse=True)
        assert len({c.arch for c in log.top5}) == 5
        seen = max(c.reward for gen in log.generations for c in gen)
        assert rewards[0] == seen

    def test_infeasible_budget(self):
        config = EvolutionConfig(generations=2, population_size=4, crossover_size=2, flop_budget=1)
        with pytest.raises(SearchConfigurationError):
            evolve(self.net, config, "R1", self.ctx)

    def test_unknown_reward(self):
        with pytest.raises(ValueError):
            evolve(self.net, self.config, "R9", self.ctx)


class TestOptimality:
    @pytest.mark.parametrize("kinds,widths", list(itertools.product([(0, 1), (1, 3)], [(0.5, 1.0), (0.25, 1.0)])))
    def test_two_by_two_matches_enumeration(self, kinds, widths):
        space, net, ctx = _setup({"block_kinds": kinds, "width_choices": widths}, seed=len(kinds) + len(widths))
        config = EvolutionConfig(generations=5, population_size=10, crossover_size=6, seed=1)
        log = evolve(net, config, "R3", ctx)
        expected = exhaustive_oracle(net, space, log.flop_budget,
                                     lambda m: reward_oracle(m, ctx.probes, ctx.gallery,
                                                             ctx.gallery_index.embeddings, "R3", 1))
        assert log.top5[0].reward == expected
        assert exhaustive_best(net, "R3", ctx, log.flop_budget)[0] == expected
