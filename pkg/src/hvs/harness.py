"""Experiment runner: method comparison, architecture/accuracy correlation
study, reward ablation, and CSV/JSON result emission.

Every experiment is a pure function of an ``ExperimentConfig``; all
randomness is derived from the config's seeds, so repeated runs write
byte-identical files.  Independent per-seed jobs may run in worker
processes; rows are collected and appended by the calling process only.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import OpenSetSplit, generate_synthetic, make_open_set_split
from .losses import ConfigurationError
from .nn import EmbeddingModel, count_flops
from .retrieval import amortized_cost, check_compatibility, evaluate_pair
from .search import EvolutionConfig, RewardContext, evolve
from .supernet import ArchDescriptor, SearchSpace, SuperNet, arch_shape, sample_uniform, train_supernet
from .train import (METHODS, ModelShape, PruneSpec, TrainRecipe, load_checkpoint, prune_model,
                    seed_rng, train_gallery, train_query)

# method order of the comparison table
COMPARISON_METHODS = ("vanilla", "finetune", "bct", "kd")
ABLATION_CONDITIONS = (("vanilla", "R1"), ("bct", "R1"), ("bct", "R2"), ("bct", "R3"))
COST_RATIOS = (0, 0.01, 0.1, 0.5, 1, 2, 5, 10, 100, 1000, 10 ** 6)

_TAG_CORRELATION = 0xC0AA


def _default_recipe(**changes) -> dict:
    d = TrainRecipe().to_dict()
    d.update(changes)
    return d


def _merge(base: dict, changes: dict) -> dict:
    out = dict(base)
    for key, value in changes.items():
        if isinstance(out.get(key), dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    """JSON-serializable configuration for every experiment."""

    dataset: dict = field(default_factory=lambda: {
        "num_identities": 140, "samples_per_identity": 20, "input_dim": 32,
        "noise_sigma": 0.2, "latent_dim": 16})
    split: dict = field(default_factory=lambda: {
        "train_frac": 5 / 6, "val_frac": 1 / 6, "test_id_frac": 1 / 7,
        "gallery_per_id": 2, "nonmated_id_frac": 0.25})
    embedding_dim: int = 16
    gallery: dict = field(default_factory=lambda: {
        "kinds": [1, 1], "widths": [256, 256], "checkpoint": None,
        "recipe": _default_recipe(lr=1.0, epochs=80, augment_sigma=0.2)})
    query_recipe: dict = field(default_factory=lambda: _default_recipe(lr=0.1, epochs=60, max_grad_norm=1.0))
    method_overrides: dict = field(default_factory=dict)  # method -> recipe field changes
    prune_specs: list = field(default_factory=lambda: [
        {"method": "magnitude", "fraction": 0.9}, {"method": "activation", "fraction": 0.9}])
    calibration_size: int = 256
    search_space: dict = field(default_factory=lambda: SearchSpace().to_dict())
    supernet: dict = field(default_factory=lambda: {
        "warmup_epochs": 10, "recipe": _default_recipe(lr=0.3, epochs=400, max_grad_norm=1.0)})
    evolution: dict = field(default_factory=lambda: asdict(EvolutionConfig()))
    metric: str = "top1"
    target: float = 0.1
    reward_metric: str = "top5"
    correlation: dict = field(default_factory=lambda: {"n_archs": 40})
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds list must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("seeds must be distinct")
        for m in self.method_overrides:
            if m not in METHODS:
                raise ConfigurationError(f"override for unknown method {m!r}")

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**_merge(cls().to_dict(), d))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, assignments) -> "ExperimentConfig":
        """Apply ``dotted.key=json_value`` assignments."""
        d = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigurationError(f"override {item!r} is not key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigurationError(f"unknown config path {key!r}")
                node = node[p]
            if parts[-1] not in node and node is d:
                raise ConfigurationError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)

    # -- typed views --------------------------------------------------------------

    def gallery_shape(self) -> ModelShape:
        return ModelShape(tuple(self.gallery["kinds"]), tuple(self.gallery["widths"]))

    def gallery_recipe(self, seed: int) -> TrainRecipe:
        return TrainRecipe.from_dict({**self.gallery["recipe"], "method": "vanilla", "seed": seed})

    def query(self, method: str, seed: int) -> TrainRecipe:
        d = {**self.query_recipe, **self.method_overrides.get(method, {}), "method": method, "seed": seed}
        return TrainRecipe.from_dict(d)

    def prunes(self) -> list[PruneSpec]:
        return [PruneSpec(p["method"], float(p["fraction"])) for p in self.prune_specs]

    def space(self) -> SearchSpace:
        s = dict(self.search_space)
        s["input_dim"] = self.dataset["input_dim"]
        s["embedding_dim"] = self.embedding_dim
        return SearchSpace(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})

    def evolution_config(self, seed: int) -> EvolutionConfig:
        return EvolutionConfig(**{**self.evolution, "seed": seed})

    def supernet_recipe(self, method: str, seed: int) -> TrainRecipe:
        return TrainRecipe.from_dict({**self.supernet["recipe"], "method": method, "seed": seed})

    def checkpoint_path(self, seed: int) -> Path | None:
        template = self.gallery.get("checkpoint")
        return Path(str(template).format(seed=seed)) if template else None

    def check_paths(self) -> None:
        for seed in self.seeds:
            path = self.checkpoint_path(seed)
            if path is not None and not path.exists():
                raise ConfigurationError(f"gallery checkpoint {path} does not exist")


# -- result table --------------------------------------------------------------

COLUMNS = ("experiment", "seed", "condition", "arch", "flops", "M_qq", "M_qg", "compatible")


@dataclass(frozen=True)
class Row:
    experiment: str
    seed: int
    condition: str
    arch: str
    flops: int
    M_qq: float
    M_qg: float
    compatible: bool

    def cells(self) -> list[str]:
        return [self.experiment, str(self.seed), self.condition, self.arch, str(self.flops),
                f"{self.M_qq:.6f}", f"{self.M_qg:.6f}", str(self.compatible).lower()]

    @classmethod
    def parse(cls, cells) -> "Row":
        if len(cells) != len(COLUMNS):
            raise ValueError(f"expected {len(COLUMNS)} cells, got {len(cells)}")
        e, seed, cond, arch, flops, qq, qg, comp = cells
        if comp not in ("true", "false"):
            raise ValueError(f"bad compatible cell {comp!r}")
        return cls(e, int(seed), cond, arch, int(flops), float(qq), float(qg), comp == "true")


class ResultTable:
    """Append-only rows of (experiment, seed, condition, arch, flops, M_qq, M_qg, compatible)."""

    def __init__(self, rows=()):
        self._rows: list[Row] = []
        for r in rows:
            self.append(r)

    def append(self, row: Row) -> None:
        if not (0.0 <= row.M_qq <= 1.0 and 0.0 <= row.M_qg <= 1.0):
            raise ValueError(f"accuracy outside [0, 1] in {row}")
        if row.flops <= 0:
            raise ValueError(f"non-positive flops in {row}")
        if row.compatible != check_compatibility(row.M_qg, row.M_qq):
            raise ValueError(f"compatible flag disagrees with the rule in {row}")
        self._rows.append(row)

    def extend(self, rows) -> None:
        for r in rows:
            self.append(r)

    @property
    def rows(self) -> tuple[Row, ...]:
        return tuple(self._rows)

    def __len__(self) -> int:
        return len(self._rows)

    def sorted_rows(self) -> list[Row]:
        # stable: conditions keep their run order inside an (experiment, seed) group
        return sorted(self._rows, key=lambda r: (r.experiment, r.seed))

    def select(self, experiment: str | None = None, condition: str | None = None) -> list[Row]:
        return [r for r in self._rows
                if (experiment is None or r.experiment == experiment)
                and (condition is None or r.condition == condition)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.sorted_rows():
            w.writerow(r.cells())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        return cls(Row.parse(cells) for cells in reader if cells)

    def to_json(self) -> str:
        rows = [dict(zip(COLUMNS, (r.experiment, r.seed, r.condition, r.arch, r.flops,
                                   round(r.M_qq, 6), round(r.M_qg, 6), r.compatible)))
                for r in self.sorted_rows()]
        return json.dumps({"columns": list(COLUMNS), "rows": rows}, indent=1) + "\n"


def emit_results(table: ResultTable, path) -> tuple[Path, Path]:
    """Write ``path`` (CSV) and its ``.json`` mirror."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    json_path = path.with_suffix(".json")
    with open(path, "w", newline="") as f:
        f.write(table.to_csv())
    json_path.write_text(table.to_json())
    return path, json_path


def _number(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def cost_curve_csv(gallery_flops: float, query_flops: float, ratios=COST_RATIOS) -> str:
    lines = ["ratio,gallery_flops,query_flops,amortized_flops"]
    fg, fq = _number(gallery_flops), _number(query_flops)
    for r in ratios:
        lines.append(f"{_number(r)},{fg},{fq},{amortized_cost(gallery_flops, query_flops, r):.6f}")
    return "\n".join(lines) + "\n"


def emit_cost_curve(path, gallery_flops: int, query_flops: int, ratios=COST_RATIOS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(cost_curve_csv(gallery_flops, query_flops, ratios))
    return path


# -- per-seed context -------------------------------------------------------------

@dataclass
class SeedContext:
    seed: int
    split: OpenSetSplit
    gallery: EmbeddingModel
    gallery_classifier: object
    calibration: np.ndarray


def make_split(config: ExperimentConfig, seed: int) -> OpenSetSplit:
    d = config.dataset
    ds = generate_synthetic(d["num_identities"], d["samples_per_identity"], d["input_dim"],
                            d["noise_sigma"], seed, d.get("latent_dim"))
    return make_open_set_split(ds, seed=seed, **config.split)


def prepare_seed(config: ExperimentConfig, seed: int) -> SeedContext:
    """Dataset, split and gallery model (loaded or trained) for one seed."""
    split = make_split(config, seed)
    path = config.checkpoint_path(seed)
    if path is not None:
        if not path.exists():
            raise ConfigurationError(f"gallery checkpoint {path} does not exist")
        gallery, gclf = load_checkpoint(path, frozen=True)
        if gclf is None:
            raise ConfigurationError(f"gallery checkpoint {path} has no classifier")
    else:
        gallery, gclf, _ = train_gallery(split.train, config.gallery_shape(), config.gallery_recipe(seed),
                                         config.embedding_dim)
        gallery.freeze()
        gclf = gclf.copy(frozen=True)
    calib = split.train.features[:config.calibration_size]
    return SeedContext(seed, split, gallery, gclf, calib)


def shape_id(shape: ModelShape) -> str:
    return "-".join(f"k{k}x{w}" for k, w in zip(shape.kinds, shape.widths))


def chance_level(split: OpenSetSplit) -> float:
    """Top-1 hit rate of a random ranking: one over the enrolled identity count."""
    return 1.0 / len(np.unique(split.test_gallery.labels))


def _map_seeds(fn, config: ExperimentConfig):
    args = [(config, s) for s in config.seeds]
    if config.workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_star, [(fn, a) for a in args]))
    return [fn(*a) for a in args]


def _star(item):
    fn, args = item
    return fn(*args)


# -- method comparison --------------------------------------------------------------

def _comparison_rows(config: ExperimentConfig, seed: int) -> list[Row]:
    ctx = prepare_seed(config, seed)
    rows = []
    for spec in config.prunes():
        shape = ModelShape.of(prune_model(ctx.gallery, spec, ctx.calibration))
        for method in COMPARISON_METHODS:
            model, _, _ = train_query(ctx.split.train, shape, config.query(method, seed), ctx.gallery,
                                      ctx.gallery_classifier, spec, ctx.calibration)
            rep = evaluate_pair(model, ctx.gallery, ctx.split, config.metric, config.target)
            rows.append(Row("method_comparison", seed, f"{method}/{spec.method}{spec.fraction:g}",
                            shape_id(shape), count_flops(model), rep.M_qq, rep.M_qg, rep.compatible))
    return rows


def run_method_comparison(config: ExperimentConfig) -> ResultTable:
    """Every query-training method on every pruned gallery architecture."""
    config.check_paths()
    table = ResultTable()
    for rows in _map_seeds(_comparison_rows, config):
        table.extend(rows)
    return table


def gallery_summary(config: ExperimentConfig, seed: int) -> dict:
    """Homogeneous gallery accuracy, chance level and flops for one seed."""
    ctx = prepare_seed(config, seed)
    rep = evaluate_pair(ctx.gallery, ctx.gallery, ctx.split, config.metric, config.target)
    return {"seed": seed, "M_gg": rep.M_gg, "chance": chance_level(ctx.split),
            "gallery_flops": count_flops(ctx.gallery)}


# -- correlation study ----------------------------------------------------------------

@dataclass
class CorrelationReport:
    seed: int
    archs: list
    flops: list
    hom_vanilla: list
    hom_bct: list
    het_bct: list
    corr_bct: float       # corr(hom-BCT, het-BCT)
    corr_vanilla: float   # corr(hom-vanilla, het-BCT)

    @property
    def margin(self) -> float:
        return self.corr_bct - self.corr_vanilla

    def scatter_csv(self) -> str:
        lines = ["seed,arch,flops,hom_vanilla,hom_bct,het_bct"]
        for a, f, hv, hb, xb in zip(self.archs, self.flops, self.hom_vanilla, self.hom_bct, self.het_bct):
            lines.append(f"{self.seed},{a},{f},{hv:.6f},{hb:.6f},{xb:.6f}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        def num(x):
            return None if math.isnan(x) else round(x, 6)
        return {"seed": self.seed, "n_archs": len(self.archs), "corr_hom_bct_het_bct": num(self.corr_bct),
                "corr_hom_vanilla_het_bct": num(self.corr_vanilla)}


def pearson(x, y) -> float:
    """Pearson correlation; NaN with a warning when it is undefined."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size != y.size:
        raise ValueError("length mismatch")
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        warnings.warn("correlation undefined for fewer than two distinct points", RuntimeWarning,
                      stacklevel=2)
        return float("nan")
    xc, yc = x - x.mean(), y - y.mean()
    return float(np.sum(xc * yc) / math.sqrt(np.sum(xc * xc) * np.sum(yc * yc)))


def sample_study_archs(space: SearchSpace, n: int, seed: int) -> list[ArchDescriptor]:
    rng = seed_rng(seed, _TAG_CORRELATION)
    return [sample_uniform(space, rng) for _ in range(n)]


def run_correlation_study(config: ExperimentConfig, n_archs: int | None = None,
                          seed: int | None = None, archs=None) -> CorrelationReport:
    """Train sampled architectures from scratch with vanilla and with BCT."""
    seed = config.seeds[0] if seed is None else seed
    n = config.correlation["n_archs"] if n_archs is None else n_archs
    ctx = prepare_seed(config, seed)
    space = config.space()
    archs = list(archs) if archs is not None else sample_study_archs(space, n, seed)
    out = {"flops": [], "hom_vanilla": [], "hom_bct": [], "het_bct": []}
    for arch in archs:
        shape = arch_shape(space, arch)
        van, _, _ = train_query(ctx.split.train, shape, config.query("vanilla", seed),
                                ctx.gallery, ctx.gallery_classifier)
        bct, _, _ = train_query(ctx.split.train, shape, config.query("bct", seed),
                                ctx.gallery, ctx.gallery_classifier)
        rv = evaluate_pair(van, ctx.gallery, ctx.split, config.metric, config.target)
        rb = evaluate_pair(bct, ctx.gallery, ctx.split, config.metric, config.target)
        out["flops"].append(count_flops(bct))
        out["hom_vanilla"].append(rv.M_qq)
        out["hom_bct"].append(rb.M_qq)
        out["het_bct"].append(rb.M_qg)
    return CorrelationReport(seed, [str(a) for a in archs], out["flops"], out["hom_vanilla"],
                             out["hom_bct"], out["het_bct"],
                             pearson(out["hom_bct"], out["het_bct"]),
                             pearson(out["hom_vanilla"], out["het_bct"]))


# -- reward ablation -----------------------------------------------------------------

def _ablation_rows(config: ExperimentConfig, seed: int) -> list[Row]:
    ctx = prepare_seed(config, seed)
    space = config.space()
    train, _ = ctx.split.train.compact()
    supernets = {}
    for method in sorted({m for m, _ in ABLATION_CONDITIONS}):
        net = SuperNet.init(space, train.class_count, seed, config.supernet_recipe(method, seed))
        train_supernet(net, train, config.supernet_recipe(method, seed), config.supernet["warmup_epochs"],
                       ctx.gallery_classifier if method == "bct" else None)
        supernets[method] = net.freeze()
    reward_ctx = RewardContext.build(ctx.split, ctx.gallery, config.reward_metric, config.target)
    evo = config.evolution_config(seed)
    retrained: dict[ArchDescriptor, tuple] = {}
    rows = []
    for method, reward in ABLATION_CONDITIONS:
        log = evolve(supernets[method], evo, reward, reward_ctx)
        for cand in log.top5:
            arch = ArchDescriptor.parse(cand.arch)
            if arch not in retrained:
                model, _, _ = train_query(train, arch_shape(space, arch), config.query("bct", seed),
                                          ctx.gallery, ctx.gallery_classifier)
                rep = evaluate_pair(model, ctx.gallery, ctx.split, config.metric, config.target)
                retrained[arch] = (count_flops(model), rep.M_qq, rep.M_qg)
            flops, qq, qg = retrained[arch]
            rows.append(Row("reward_ablation", seed, f"{method}+{reward}", str(arch), flops, qq, qg,
                            check_compatibility(qg, qq)))
    return rows


def run_reward_ablation(config: ExperimentConfig) -> ResultTable:
    """Search with each (supernet training, reward) pair; retrain each top-5 with BCT."""
    config.check_paths()
    table = ResultTable()
    for rows in _map_seeds(_ablation_rows, config):
        table.extend(rows)
    return table


def condition_means(table: ResultTable, experiment: str, column: str = "M_qg") -> dict[str, dict[int, float]]:
    """Per condition and seed, the mean of ``column`` over that seed's rows."""
    acc: dict[str, dict[int, list]] = {}
    for r in table.select(experiment):
        acc.setdefault(r.condition, {}).setdefault(r.seed, []).append(getattr(r, column))
    return {c: {s: float(np.mean(v)) for s, v in sorted(per.items())} for c, per in acc.items()}


def median_over_seeds(per_seed: dict[int, float]) -> float:
    return float(np.median(list(per_seed.values())))
