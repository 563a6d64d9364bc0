"""``hvs`` command line.

Every subcommand accepts ``--config FILE``: a JSON object whose keys (flag
names with dashes or underscores) supply defaults that explicit flags
override.  The experiment commands (``compare``, ``correlate``, ``ablate``)
read an experiment configuration instead and take ``--set key=value``
overrides.  Exit status is 0 only when every job succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (FORMAT_VERSION, DataFormatError, SplitConfigurationError, generate_synthetic,
                   load_split, make_open_set_split, save_dataset, save_split)
from .harness import (ExperimentConfig, cost_curve_csv, emit_results, gallery_summary,
                      run_correlation_study, run_method_comparison, run_reward_ablation)
from .losses import CompositeWeights, ConfigurationError
from .nn import CHECKPOINT_VERSION, CheckpointFormatError, NumericError, ShapeError
from .retrieval import EvalReport, evaluate_pair
from .search import REWARDS, EvolutionConfig, RewardContext, evolve
from .supernet import SearchSpace, SuperNet, train_supernet
from .train import (METHODS, ModelShape, PruneSpec, TrainingError, TrainRecipe, load_checkpoint,
                    prune_model, save_checkpoint, train_gallery, train_query, write_log)

EXPECTED_ERRORS = (ConfigurationError, SplitConfigurationError, DataFormatError, CheckpointFormatError,
                   ShapeError, NumericError, TrainingError, ValueError, OSError)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t)


def _recipe_flags(p: argparse.ArgumentParser, lr: float, epochs: int, clip: float | None = None,
                  augment: float = 0.05) -> None:
    p.add_argument("--loss", choices=("cosface", "norm_softmax"), default="cosface")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--schedule", choices=("cosine", "step", "constant"), default="cosine")
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--augment", type=float, default=augment, help="gaussian feature jitter sigma")
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--kd-temperature", type=float, default=4.0)
    p.add_argument("--max-grad-norm", type=float, default=clip, help="global gradient clip (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0)


def _recipe(args, method: str) -> TrainRecipe:
    return TrainRecipe(method=method, loss=args.loss, weights=CompositeWeights(args.lambda1, args.lambda2),
                       epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, schedule=args.schedule,
                       weight_decay=args.weight_decay, momentum=args.momentum,
                       augment_sigma=args.augment, kd_temperature=args.kd_temperature,
                       max_grad_norm=args.max_grad_norm, seed=args.seed)


def _log_path(out) -> Path:
    return Path(out).with_suffix(".log.json")


# -- data / training subcommands ------------------------------------------------------

def cmd_gen_data(args) -> int:
    ds = generate_synthetic(args.identities, args.per_id, args.dim, args.noise, args.seed, args.latent_dim)
    split = make_open_set_split(ds, train_frac=args.train_frac, val_frac=1.0 - args.train_frac,
                                gallery_per_id=args.gallery_per_id, nonmated_id_frac=args.nonmated_frac,
                                seed=args.seed, test_id_frac=args.test_frac)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "dataset.hvsd", ds)
    save_split(out / "split.hvss", split)
    counts = {name: len(split.part(name)) for name in
              ("train", "val", "test_gallery", "test_probe_mated", "test_probe_nonmated")}
    print(json.dumps({"dataset": str(out / "dataset.hvsd"), "split": str(out / "split.hvss"), **counts}))
    return 0


def cmd_train_gallery(args) -> int:
    split = load_split(args.split)
    shape = ModelShape(_ints(args.kinds), _ints(args.widths))
    recipe = _recipe(args, "vanilla")
    model, clf, log = train_gallery(split.train, shape, recipe, args.embedding_dim)
    save_checkpoint(args.out, model, clf)
    write_log(_log_path(args.out), log, recipe=recipe.to_dict(), flops=model.flops())
    print(f"wrote {args.out} ({model.describe()}, final loss {log.epochs[-1]['loss']:.4f})")
    return 0


def cmd_prune(args) -> int:
    split = load_split(args.split)
    gallery, clf = load_checkpoint(args.checkpoint)
    spec = PruneSpec(args.method, args.fraction)
    pruned = prune_model(gallery, spec, split.train.features[:args.calibration_size])
    save_checkpoint(args.out, pruned, clf)
    Path(_log_path(args.out)).write_text(json.dumps(
        {"prune": {"method": spec.method, "fraction": spec.fraction}, "widths": list(pruned.widths),
         "flops": pruned.flops(), "epochs": []}, indent=1) + "\n")
    print(f"wrote {args.out} ({pruned.describe()})")
    return 0


def cmd_train_query(args) -> int:
    split = load_split(args.split)
    gallery, gclf = load_checkpoint(args.gallery_ckpt, frozen=True) if args.gallery_ckpt else (None, None)
    spec = PruneSpec(args.prune_method, args.prune_fraction) if args.prune_fraction is not None else None
    calib = split.train.features[:args.calibration_size]
    if args.kinds:
        shape = ModelShape(_ints(args.kinds), _ints(args.widths))
    elif spec is not None and gallery is not None:
        shape = ModelShape.of(prune_model(gallery, spec, calib))
    else:
        raise ConfigurationError("give --kinds/--widths or a gallery checkpoint with --prune-fraction")
    recipe = _recipe(args, args.method)
    model, clf, log = train_query(split.train, shape, recipe, gallery, gclf, spec, calib)
    save_checkpoint(args.out, model, clf)
    write_log(_log_path(args.out), log, recipe=recipe.to_dict(), flops=model.flops())
    print(f"wrote {args.out} ({model.describe()}, final loss {log.epochs[-1]['loss']:.4f})")
    return 0


def _space(args, input_dim: int, embedding_dim: int) -> SearchSpace:
    d = {"input_dim": input_dim, "embedding_dim": embedding_dim}
    if args.space:
        d.update(json.loads(Path(args.space).read_text()))
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return SearchSpace(**d)


def cmd_train_supernet(args) -> int:
    split = load_split(args.split)
    gclf = None
    embedding_dim = args.embedding_dim
    if args.gallery_ckpt:
        gallery, gclf = load_checkpoint(args.gallery_ckpt, frozen=True)
        embedding_dim = gallery.embedding_dim
    method = "bct" if gclf is not None and args.lambda2 > 0 else "vanilla"
    space = _space(args, split.dataset.dim, embedding_dim)
    recipe = _recipe(args, method)
    train, _ = split.train.compact()
    net = SuperNet.init(space, train.class_count, args.seed, recipe)
    log = train_supernet(net, split.train, recipe, args.warmup, gclf)
    net.save(args.out)
    write_log(_log_path(args.out), log, recipe=recipe.to_dict(), space=space.to_dict(), warmup=args.warmup)
    print(f"wrote {args.out} ({method} supernet, final loss {log.epochs[-1]['loss']:.4f})")
    return 0


def cmd_search(args) -> int:
    split = load_split(args.split)
    net = SuperNet.load(args.supernet_ckpt).freeze()
    gallery, _ = load_checkpoint(args.gallery_ckpt, frozen=True)
    config = EvolutionConfig(args.generations, args.population, args.crossover, args.mutate, args.random,
                             args.budget, args.seed)
    ctx = RewardContext.build(split, gallery, args.metric, args.target)
    log = evolve(net, config, args.reward.upper(), ctx)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(log.to_json() + "\n")
    top5 = out.with_name(out.stem + ".top5.json")
    top5.write_text(json.dumps(log.to_dict()["top5"], indent=1) + "\n")
    best = log.top5[0]
    print(f"best {best.arch} reward {best.reward:.4f} flops {best.flops} (budget {log.flop_budget})")
    return 0


def cmd_eval(args) -> int:
    split = load_split(args.split)
    query, _ = load_checkpoint(args.query_model)
    gallery, _ = load_checkpoint(args.gallery_model)
    report = evaluate_pair(query, gallery, split, args.metric, args.target)
    print(EvalReport.CSV_HEADER)
    print(report.to_csv_row())
    print(report.to_json())
    if args.out:
        base = Path(args.out)
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(base.with_suffix(".csv"), "w", newline="") as f:
            f.write(EvalReport.CSV_HEADER + "\n" + report.to_csv_row() + "\n")
        base.with_suffix(".json").write_text(report.to_json() + "\n")
    return 0


def cmd_cost_curve(args) -> int:
    text = cost_curve_csv(args.fg, args.fq, _floats(args.ratios))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as f:
            f.write(text)
    sys.stdout.write(text)
    return 0


# -- experiment subcommands -------------------------------------------------------------

def _experiment_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    config = config.with_overrides(args.set or [])
    if args.seeds:
        config = config.with_overrides([f"seeds={json.dumps(list(_ints(args.seeds)))}"])
    if args.out_dir:
        config = config.with_overrides([f"output_dir={json.dumps(args.out_dir)}"])
    return config


def _finish(config: ExperimentConfig, args, written: list[Path]) -> int:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json() + "\n")
    if args.plots:
        from .plots import render_all
        written += render_all(out)
    for p in written:
        print(f"wrote {p}")
    return 0


def cmd_compare(args) -> int:
    config = _experiment_config(args)
    table = run_method_comparison(config)
    out = Path(config.output_dir)
    written = list(emit_results(table, out / "method_comparison.csv"))
    summaries = [gallery_summary(config, s) for s in config.seeds]
    (out / "gallery.json").write_text(json.dumps(summaries, indent=1) + "\n")
    flops = {r.arch: r.flops for r in table.rows}
    lines = ["arch,ratio,gallery_flops,query_flops,amortized_flops"]
    for arch, fq in sorted(flops.items()):
        for line in cost_curve_csv(summaries[0]["gallery_flops"], fq).splitlines()[1:]:
            lines.append(f"{arch},{line}")
    (out / "cost_curves.csv").write_text("\n".join(lines) + "\n")
    written += [out / "gallery.json", out / "cost_curves.csv"]
    return _finish(config, args, written)


def cmd_correlate(args) -> int:
    config = _experiment_config(args)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = [run_correlation_study(config, args.n_archs, seed) for seed in config.seeds]
    scatter = "".join(r.scatter_csv() if i == 0 else r.scatter_csv().split("\n", 1)[1]
                      for i, r in enumerate(reports))
    with open(out / "correlation_scatter.csv", "w", newline="") as f:
        f.write(scatter)
    margins = [r.margin for r in reports]
    summary = {"studies": [r.summary() for r in reports],
               "median_margin": None if np.isnan(np.median(margins)) else round(float(np.median(margins)), 6)}
    (out / "correlation.json").write_text(json.dumps(summary, indent=1) + "\n")
    return _finish(config, args, [out / "correlation_scatter.csv", out / "correlation.json"])


def cmd_ablate(args) -> int:
    config = _experiment_config(args)
    table = run_reward_ablation(config)
    written = list(emit_results(table, Path(config.output_dir) / "reward_ablation.csv"))
    return _finish(config, args, written)


def cmd_report(args) -> int:
    from .plots import render_all
    for p in render_all(Path(args.results_dir)):
        print(f"wrote {p}")
    return 0


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvs", description="Compatibility-aware heterogeneous visual search.")
    parser.add_argument("--version", action="version",
                        version=f"hvs {__version__} (checkpoint format {CHECKPOINT_VERSION}, "
                                f"data format {FORMAT_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of flag defaults")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset and its open-set split")
    p.add_argument("--identities", type=int, default=140)
    p.add_argument("--per-id", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--latent-dim", type=int, default=None)
    p.add_argument("--train-frac", type=float, default=5 / 6)
    p.add_argument("--test-frac", type=float, default=1 / 7)
    p.add_argument("--gallery-per-id", type=int, default=2)
    p.add_argument("--nonmated-frac", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = add("train-gallery", cmd_train_gallery, "train the gallery model")
    p.add_argument("--split", required=True)
    p.add_argument("--kinds", default="1,1")
    p.add_argument("--widths", default="256,256")
    p.add_argument("--embedding-dim", type=int, default=16)
    _recipe_flags(p, lr=1.0, epochs=80, augment=0.2)
    p.add_argument("--out", required=True)

    p = add("prune", cmd_prune, "structured pruning of a gallery checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, help="split whose train part supplies the calibration batch")
    p.add_argument("--method", choices=("magnitude", "activation"), default="magnitude")
    p.add_argument("--fraction", type=float, default=0.9)
    p.add_argument("--calibration-size", type=int, default=256)
    p.add_argument("--out", required=True)

    p = add("train-query", cmd_train_query, "train a query model")
    p.add_argument("--split", required=True)
    p.add_argument("--method", choices=METHODS, default="bct")
    p.add_argument("--gallery-ckpt")
    p.add_argument("--kinds", default="")
    p.add_argument("--widths", default="")
    p.add_argument("--prune-method", choices=("magnitude", "activation"), default="magnitude")
    p.add_argument("--prune-fraction", type=float, default=None)
    p.add_argument("--calibration-size", type=int, default=256)
    _recipe_flags(p, lr=0.1, epochs=60, clip=1.0)
    p.add_argument("--out", required=True)

    p = add("train-supernet", cmd_train_supernet, "train a weight-sharing supernet")
    p.add_argument("--split", required=True)
    p.add_argument("--space", help="JSON file with search-space fields")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--gallery-ckpt", help="enables the compatibility term")
    p.add_argument("--embedding-dim", type=int, default=16)
    _recipe_flags(p, lr=0.3, epochs=400, clip=1.0)
    p.add_argument("--out", required=True)

    p = add("search", cmd_search, "evolutionary search over a trained supernet")
    p.add_argument("--split", required=True)
    p.add_argument("--supernet-ckpt", required=True)
    p.add_argument("--gallery-ckpt", required=True)
    p.add_argument("--reward", choices=[r.lower() for r in REWARDS], default="r3")
    p.add_argument("--budget", type=int, default=None, help="flop budget (default: median of the space)")
    p.add_argument("--generations", type=int, default=20)
    p.add_argument("--population", type=int, default=50)
    p.add_argument("--crossover", type=int, default=40)
    p.add_argument("--mutate", type=float, default=0.1)
    p.add_argument("--random", type=float, default=0.1)
    p.add_argument("--metric", default="top5")
    p.add_argument("--target", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="search log JSON; top-5 goes next to it")

    p = add("eval", cmd_eval, "homogeneous and heterogeneous accuracy of a model pair")
    p.add_argument("--query-model", required=True)
    p.add_argument("--gallery-model", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--metric", choices=("top1", "top5", "top10", "tpir", "tar"), default="top1")
    p.add_argument("--target", type=float, default=0.1)
    p.add_argument("--out", help="also write <out>.csv and <out>.json")

    p = add("cost-curve", cmd_cost_curve, "amortized embedding cost versus query/gallery ratio")
    p.add_argument("--fg", type=float, required=True, help="gallery model flops")
    p.add_argument("--fq", type=float, required=True, help="query model flops")
    p.add_argument("--ratios", default="0,0.01,0.1,0.5,1,2,5,10,100,1000,1000000")
    p.add_argument("--out")

    for name, fn, text in (("compare", cmd_compare, "query-training method comparison"),
                           ("correlate", cmd_correlate, "architecture accuracy correlation study"),
                           ("ablate", cmd_ablate, "search reward ablation")):
        p = add(name, fn, text)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        p.add_argument("--seeds", help="comma-separated seeds")
        p.add_argument("--out-dir")
        p.add_argument("--plots", action="store_true", help="also render PNG figures")
        if name == "correlate":
            p.add_argument("--n-archs", type=int, default=None)

    p = sub.add_parser("report", help="render PNG figures from a results directory")
    p.add_argument("results_dir")
    p.set_defaults(func=cmd_report, config=None)
    return parser


def _config_arg(argv) -> tuple[str | None, str | None]:
    """Subcommand name and ``--config`` value, found before full parsing."""
    command = config = None
    it = iter(argv)
    for tok in it:
        if tok == "--config":
            config = next(it, None)
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif command is None and not tok.startswith("-"):
            command = tok
    return command, config


def _apply_flag_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    command, config = _config_arg(argv)
    sub = parser._subparsers._group_actions[0].choices.get(command) if command else None
    if config and sub is not None and command not in ("compare", "correlate", "ablate", "report"):
        values = json.loads(Path(config).read_text())
        if not isinstance(values, dict):
            raise ConfigurationError("--config must hold a JSON object")
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("config", "help"):
                raise ConfigurationError(f"unknown option {key!r} in {config}")
            defaults[dest] = value
            actions[dest].required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_flag_config(parser, argv)
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"hvs: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
