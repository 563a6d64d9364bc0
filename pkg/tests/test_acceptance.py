"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines go straight to the
terminal) or ``python tests/test_acceptance.py``.  The experiment criteria
use the default configuration and take roughly half an hour on one core.
"""

import itertools
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hvs.data import generate_synthetic, make_open_set_split  # noqa: E402
from hvs.harness import (ExperimentConfig, chance_level, condition_means, emit_results, make_split,  # noqa: E402
                         run_correlation_study, run_method_comparison, run_reward_ablation)
from hvs.nn import EmbeddingModel  # noqa: E402
from hvs.retrieval import amortized_cost, tar_at_far, topk_from_scores, tpir_from_scores  # noqa: E402
from hvs.search import EvolutionConfig, RewardContext, evolve  # noqa: E402
from hvs.supernet import SearchSpace, SuperNet, sample_uniform  # noqa: E402

from oracles import (exhaustive_oracle, layer_instance_errors, loss_instance_errors, reward_oracle,  # noqa: E402
                     tar_oracle, topk_oracle, tpir_oracle)

_cache = {}


def report(number, title, passed, detail, elapsed=None, limit=None):
    timing = ""
    if elapsed is not None:
        timing = f" [{elapsed:.1f} s" + (f" / limit {limit:.0f} s]" if limit else "]")
    line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}{timing}"
    print(line, flush=True)
    return passed


def _median(per_seed):
    return float(np.median(list(per_seed.values())))


def _comparison_table():
    if "comparison" not in _cache:
        t = time.perf_counter()
        _cache["comparison"] = run_method_comparison(ExperimentConfig())
        _cache["comparison_time"] = time.perf_counter() - t
    return _cache["comparison"], _cache["comparison_time"]


def _randomize_biases(params, rng):
    for p in params.values():
        if p.ndim == 1:
            p[:] = rng.uniform(-0.3, 0.3, p.shape)


# -- criteria ------------------------------------------------------------------------

def criterion_1():
    t = time.perf_counter()
    worst, worst_name = 0.0, ""
    for i in range(100):
        rng = np.random.default_rng(10_000 + i)
        for name, err in {**layer_instance_errors(rng), **loss_instance_errors(rng)}.items():
            if err > worst:
                worst, worst_name = err, name
    elapsed = time.perf_counter() - t
    ok = worst < 1e-3 and elapsed < 30
    return report(1, "gradient suite", ok, f"max relative error {worst:.2e} ({worst_name}) over 100 instances",
                  elapsed, 30)


def criterion_2():
    table, elapsed = _comparison_table()
    config = ExperimentConfig()
    qq = condition_means(table, "method_comparison", "M_qq")
    qg = condition_means(table, "method_comparison", "M_qg")
    chance = float(np.median([chance_level(make_split(config, s)) for s in config.seeds]))
    parts, ok = [], True
    for method in ("bct", "finetune"):
        cond = f"{method}/magnitude0.9"
        good = _median(qg[cond]) > _median(qq[cond])
        ok &= good
        parts.append(f"{method} qg {_median(qg[cond]):.3f} vs qq {_median(qq[cond]):.3f}")
    for method in ("vanilla", "kd"):
        for prune in ("magnitude0.9", "activation0.9"):
            v = _median(qg[f"{method}/{prune}"])
            ok &= v <= 2 * chance
            parts.append(f"{method}/{prune} qg {v:.3f}")
    act = [f"{m}/activation0.9 qg-qq {_median(qg[f'{m}/activation0.9']) - _median(qq[f'{m}/activation0.9']):+.3f}"
           for m in ("bct", "finetune")]
    ok &= elapsed < 300
    per_seed = sum(qg["bct/magnitude0.9"][s] > qq["bct/magnitude0.9"][s] for s in config.seeds)
    act.append(f"bct/magnitude0.9 compatible on {per_seed}/{len(config.seeds)} seeds")
    detail = "; ".join(parts) + f"; 2x chance {2 * chance:.3f}; info: " + ", ".join(act)
    return report(2, "compatibility rule", ok, detail, elapsed, 300)


def criterion_3():
    config = ExperimentConfig()
    t = time.perf_counter()
    reports = [run_correlation_study(config, 40, seed) for seed in (0, 1, 2)]
    elapsed = time.perf_counter() - t
    margins = [r.margin for r in reports]
    med = float(np.median(margins))
    ok = med >= 0.1 and elapsed < 900
    detail = "margins " + ", ".join(f"{r.corr_bct:.3f}-{r.corr_vanilla:.3f}={r.margin:.3f}" for r in reports)
    return report(3, "correlation study", ok, f"{detail}; median {med:.3f} (need >= 0.100)", elapsed, 900)


def criterion_4():
    config = ExperimentConfig()
    t = time.perf_counter()
    table = run_reward_ablation(config)
    elapsed = time.perf_counter() - t
    means = {c: _median(v) for c, v in condition_means(table, "reward_ablation", "M_qg").items()}
    r3, r1, van = means["bct+R3"], means["bct+R1"], means["vanilla+R1"]
    ok = r3 >= r1 and r3 >= van and r3 - van >= 0.01 and elapsed < 1200
    detail = ", ".join(f"{c} {v:.3f}" for c, v in means.items()) + f"; R3 - vanilla {100 * (r3 - van):+.1f} pp"
    return report(4, "reward ablation", ok, detail, elapsed, 1200)


def criterion_5():
    space = SearchSpace(input_dim=32, embedding_dim=16)
    net = SuperNet.init(space, 100, seed=0)
    rng = np.random.default_rng(5)
    _randomize_biases(net.all_parameters(), rng)
    t = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        arch = sample_uniform(space, rng)
        x = rng.standard_normal((int(rng.integers(1, 9)), 32)).astype(np.float32)
        mismatches += not np.array_equal(net.subnet_forward(arch, x), net.extract_standalone(arch).embed(x))
    elapsed = time.perf_counter() - t
    ok = mismatches == 0 and elapsed < 10
    return report(5, "weight sharing", ok, f"{mismatches} mismatches over 1000 (arch, input) pairs", elapsed, 10)


def _small_spaces():
    kinds = [c for n in (1, 2, 3) for c in itertools.combinations((0, 1, 2, 3), n)]
    widths = [c for n in (1, 2, 3) for c in itertools.combinations((0.25, 0.5, 1.0), n)]
    return list(itertools.product(kinds, widths))


def criterion_6():
    split = make_open_set_split(generate_synthetic(42, 6, 6, 0.3, seed=6), seed=6)
    grng = np.random.default_rng(6)
    gallery = EmbeddingModel.init(grng, 6, [1], [8], 4)
    _randomize_biases(gallery.parameters(), grng)
    ctx = RewardContext.build(split, gallery, "top1")
    t = time.perf_counter()
    spaces = _small_spaces()
    misses = []
    for i, (kinds, widths) in enumerate(spaces):
        space = SearchSpace(num_layers=2, block_kinds=kinds, width_choices=widths, base_width=8,
                            embedding_dim=4, input_dim=6)
        net = SuperNet.init(space, 10, seed=i)
        _randomize_biases(net.all_parameters(), np.random.default_rng(i))
        net.freeze()
        for kind in ("R1", "R2", "R3"):
            log = evolve(net, EvolutionConfig(seed=i), kind, ctx)
            best = exhaustive_oracle(net, space, log.flop_budget,
                                     lambda m: reward_oracle(m, ctx.probes, ctx.gallery,
                                                             ctx.gallery_index.embeddings, kind, 1))
            if log.top5[0].reward != best:
                misses.append((kinds, widths, kind, log.top5[0].reward, best))
    elapsed = time.perf_counter() - t
    ok = not misses and elapsed < 120
    detail = f"{len(spaces) * 3 - len(misses)}/{len(spaces) * 3} (space, reward) pairs match enumeration"
    if misses:
        detail += f"; first miss {misses[0]}"
    return report(6, "evolution optimality", ok, detail, elapsed, 120)


def criterion_7():
    rng = np.random.default_rng(7)
    t = time.perf_counter()
    bad = {"topk": 0, "tpir": 0, "tar": 0}

    def grid(shape):
        return rng.integers(-4, 5, size=shape) / 4.0

    for _ in range(200):
        p, g = rng.integers(1, 21, size=2)
        scores, pl, gl = grid((p, g)), rng.integers(0, 6, p), rng.integers(0, 6, g)
        k = int(rng.integers(1, 21))
        bad["topk"] += topk_from_scores(scores, pl, gl, k) != topk_oracle(scores.tolist(), pl.tolist(), gl.tolist(), k)
        m, n = rng.integers(1, 11, size=2)
        mated, nonmated = grid((m, g)), grid((n, g))
        ml = rng.integers(0, 6, m)
        target = float(rng.choice([0.01, 0.05, 0.1, 0.3, 1.0]))
        bad["tpir"] += tpir_from_scores(mated, ml, nonmated, gl, target) != \
            tpir_oracle(mated.tolist(), ml.tolist(), nonmated.tolist(), gl.tolist(), target)
        gen, imp = grid(int(rng.integers(1, 21))), grid(int(rng.integers(1, 21)))
        bad["tar"] += tar_at_far(gen, imp, target) != tar_oracle(gen.tolist(), imp.tolist(), target)
    elapsed = time.perf_counter() - t
    ok = not any(bad.values()) and elapsed < 10
    detail = ", ".join(f"{k} {200 - v}/200 exact" for k, v in bad.items())
    return report(7, "metric oracles", ok, detail, elapsed, 10)


def criterion_8():
    t = time.perf_counter()
    fg, fq = 7597, 329
    at0, at_big = amortized_cost(fg, fq, 0), amortized_cost(fg, fq, 1e6)
    ratios = np.concatenate([[0], np.logspace(-3, 6, 200)])
    curve = [amortized_cost(fg, fq, r) for r in ratios]
    monotone = all(a > b for a, b in zip(curve, curve[1:]))
    elapsed = time.perf_counter() - t
    ok = at0 == 7597 and abs(at_big - 329) / 329 < 1e-3 and monotone and elapsed < 1
    return report(8, "cost endpoints", ok, f"cost(0)={at0:g}, cost(1e6)={at_big:.4f}, "
                  f"strictly decreasing over {len(ratios)} ratios: {monotone}", elapsed, 1)


def criterion_9():
    first, _ = _comparison_table()
    t = time.perf_counter()
    second = run_method_comparison(ExperimentConfig())
    elapsed = time.perf_counter() - t
    with tempfile.TemporaryDirectory() as d:
        a = emit_results(first, Path(d) / "a" / "method_comparison.csv")
        b = emit_results(second, Path(d) / "b" / "method_comparison.csv")
        same = [x.read_bytes() == y.read_bytes() for x, y in zip(a, b)]
    ok = all(same)
    return report(9, "determinism", ok, f"CSV identical: {same[0]}, JSON identical: {same[1]} "
                  f"({len(first)} rows)", elapsed)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i}" for i in range(1, 10)])
def test_criterion(criterion, capsys):
    with capsys.disabled():
        passed = criterion()
    assert passed


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    sys.exit(0 if all(results) else 1)
