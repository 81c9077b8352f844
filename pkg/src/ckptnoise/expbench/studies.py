"""Pretraining plus the comparison studies run on top of it.

Every study follows the same pattern: a list of :class:`Condition` values is
run for every scenario seed, with the seed fixing the downstream data, the
data order and the noise draws. Conditions therefore differ only in the
intervention under test. Results are keyed by (condition, seed) and sorted
before anything is emitted, so serial and parallel runs give the same bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

from ..perturb import NoiseSpec, derive_substream, perturb_checkpoint
from ..tensorstore import Checkpoint, load_checkpoint, save_checkpoint
from ..toymodel import PARAM_NAMES, Batch, Head, accuracy, init_params, params_to_checkpoint
from ..trainkit import Dataset, FinetuneMethod, MetricTrajectory, Mixout, RecAdam, Vanilla, finetune, train_loop
from .scenario import ScenarioSpec

_PRETRAINED: dict[str, Checkpoint] = {}


def pretrain(scenario: ScenarioSpec) -> Checkpoint:
    """MLM pretraining on the scenario's corpus; deterministic in the scenario."""
    corpus = scenario.pretrain_corpus()
    params = init_params(scenario.model, scenario.world_seed)

    def make_batch(idx):
        return Batch.unmasked(corpus.tokens[idx], corpus.targets[idx])

    params, _ = train_loop(params, make_batch, len(corpus), scenario.pretrain, Head.MLM, scenario.model)
    return params_to_checkpoint(params, {"kind": "pretrained", "pretrain_hash": scenario.pretrain_hash()})


def get_pretrained(scenario: ScenarioSpec, cache_dir: str | Path | None = None) -> Checkpoint:
    """Pretrained checkpoint, memoised in-process and optionally on disk."""
    key = scenario.pretrain_hash()
    if key in _PRETRAINED:
        return _PRETRAINED[key]
    path = Path(cache_dir) / f"pretrained-{key[:16]}.ntk" if cache_dir is not None else None
    if path is not None and path.exists():
        ckpt = load_checkpoint(path)
    else:
        ckpt = pretrain(scenario)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt, path)
    _PRETRAINED[key] = ckpt
    return ckpt


@dataclass(frozen=True)
class Condition:
    """``lam=None`` means no perturbation at all."""

    label: str
    lam: float | None = None
    distribution: str = "uniform"
    scope: str = "matrix"
    method: FinetuneMethod = Vanilla()
    start: str = "pretrained"  # or "random"
    fraction: float = 1.0

    def noise_echo(self) -> dict[str, Any] | None:
        if self.lam is None:
            return None
        return {"lambda": self.lam, "distribution": self.distribution, "scope": self.scope}


@dataclass
class SeedRun:
    accuracy: float
    trajectory: MetricTrajectory
    params_digest: str


@dataclass
class RunResult:
    condition: Condition
    seeds: list[int]
    runs: dict[int, SeedRun]

    @property
    def accuracies(self) -> list[float]:
        return [self.runs[s].accuracy for s in self.seeds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        a = self.accuracies
        return float(np.std(a, ddof=1)) if len(a) > 1 else 0.0

    def same_as(self, other: "RunResult") -> bool:
        """Bit-exact equality of every seed's final parameters and trajectory."""
        return self.seeds == other.seeds and all(
            self.runs[s].params_digest == other.runs[s].params_digest
            and self.runs[s].trajectory.to_dict() == other.runs[s].trajectory.to_dict()
            for s in self.seeds
        )


def subsample(train: Dataset, fraction: float, seed: int) -> Dataset:
    """Deterministic subset of ``round(fraction * n)`` examples, original order kept."""
    n = len(train)
    k = max(1, int(round(fraction * n)))
    if k >= n:
        return train
    idx = np.sort(derive_substream(seed, "fraction").permutation(n)[:k])
    return train.subset(idx)


def _digest(params) -> str:
    h = hashlib.sha256()
    for name in PARAM_NAMES:
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def random_init_seed(seed: int) -> int:
    return int(derive_substream(seed, "random-init").integers(0, 2**63))


def run_one(scenario: ScenarioSpec, pretrained: Checkpoint, cond: Condition, seed: int) -> SeedRun:
    train, eval_ = scenario.downstream_data(seed)
    train = subsample(train, cond.fraction, seed)
    if cond.start == "random":
        start = params_to_checkpoint(init_params(scenario.model, random_init_seed(seed)))
    else:
        start = pretrained
    if cond.lam is not None:
        spec = NoiseSpec(cond.lam, cond.distribution, cond.scope, scenario.exclude, seed)
        start, _ = perturb_checkpoint(start, spec)
    config = replace(scenario.finetune, seed=seed)
    params, traj = finetune(start, cond.method, train, eval_, config, scenario.model)
    return SeedRun(traj.final_accuracy, traj, _digest(params))


def _task(args):
    scenario, pretrained, cond, seed = args
    return cond.label, seed, run_one(scenario, pretrained, cond, seed)


def run_conditions(
    scenario: ScenarioSpec,
    conditions: Sequence[Condition],
    pretrained: Checkpoint | None = None,
    jobs: int = 1,
) -> dict[str, RunResult]:
    labels = [c.label for c in conditions]
    if len(set(labels)) != len(labels):
        raise ValueError(f"condition labels must be unique: {labels}")
    pretrained = pretrained if pretrained is not None else get_pretrained(scenario)
    tasks = [(scenario, pretrained, c, s) for c in conditions for s in scenario.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        done = [_task(t) for t in tasks]
    by_key = {(label, seed): run for label, seed, run in done}
    return {
        c.label: RunResult(c, list(scenario.seeds), {s: by_key[(c.label, s)] for s in scenario.seeds})
        for c in conditions
    }


# --- tables -----------------------------------------------------------------


def _fmt(x: Any) -> str:
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        text = f"{x:.6f}"
        return "0.000000" if text == "-0.000000" else text
    return str(x)


@dataclass
class SummaryTable:
    study: str
    columns: list[str]
    rows: list[dict[str, Any]]
    extra: dict[str, Any] = field(default_factory=dict)
    checks: dict[str, bool] = field(default_factory=dict)
    scenario_hash: str = ""
    seeds: list[int] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row.get(c, "")) for c in self.columns])
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {
            "study": self.study,
            "scenario_hash": self.scenario_hash,
            "seeds": self.seeds,
            "columns": self.columns,
            "rows": self.rows,
            "extra": self.extra,
            "checks": self.checks,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=True)

    def row(self, condition: str, **match) -> dict[str, Any]:
        for r in self.rows:
            if r["condition"] == condition and all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(condition)

    def render(self) -> str:
        """Aligned plain-text rendering."""
        cells = [self.columns] + [[_fmt(r.get(c, "")) for c in self.columns] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        lines = [f"== {self.study} =="]
        for j, row in enumerate(cells):
            lines.append("  ".join(v.rjust(widths[i]) if j else v.ljust(widths[i]) for i, v in enumerate(row)))
            if j == 0:
                lines.append("  ".join("-" * w for w in widths))
        for k, v in self.checks.items():
            lines.append(f"check {k}: {'ok' if v else 'FAILED'}")
        return "\n".join(lines)


ACC_COLUMNS = ["n_seeds", "mean_accuracy", "std_accuracy", "baseline", "mean_paired_diff", "std_paired_diff"]


def _acc_row(res: RunResult, baseline: RunResult | None, **extra) -> dict[str, Any]:
    row: dict[str, Any] = {"condition": res.condition.label, **extra}
    row["n_seeds"] = len(res.seeds)
    row["mean_accuracy"] = res.mean
    row["std_accuracy"] = res.std
    row["per_seed_accuracy"] = res.accuracies
    if baseline is not None:
        diffs = np.subtract(res.accuracies, baseline.accuracies)
        row["baseline"] = baseline.condition.label
        row["mean_paired_diff"] = float(diffs.mean())
        row["std_paired_diff"] = float(diffs.std(ddof=1)) if len(diffs) > 1 else 0.0
        row["per_seed_paired_diff"] = diffs.tolist()
    else:
        row["baseline"] = ""
        row["mean_paired_diff"] = 0.0
        row["std_paired_diff"] = 0.0
        row["per_seed_paired_diff"] = [0.0] * len(res.seeds)
    row["noise"] = res.condition.noise_echo()
    row["method"] = res.condition.method.to_dict()
    return row


def _table(study: str, scenario: ScenarioSpec, columns, rows, **kw) -> SummaryTable:
    return SummaryTable(study, columns, rows, scenario_hash=scenario.content_hash(), seeds=list(scenario.seeds), **kw)


NO_NOISE = Condition("no-noise")


def _lambda0(method: FinetuneMethod = Vanilla(), fraction: float = 1.0, label: str = "lambda=0") -> Condition:
    return Condition(label, lam=0.0, method=method, fraction=fraction)


def run_main_comparison(
    scenario: ScenarioSpec, pretrained: Checkpoint | None = None, jobs: int = 1, extra_lambdas: Sequence[float] = ()
) -> SummaryTable:
    lam = scenario.lam
    conds = [NO_NOISE, Condition(f"lambda={lam:g}", lam=lam), _lambda0()]
    conds += [Condition(f"lambda={x:g}", lam=x) for x in extra_lambdas if x not in (lam, 0.0)]
    res = run_conditions(scenario, conds, pretrained, jobs)
    base = res["no-noise"]
    shown = [c for c in conds if c.label != "lambda=0" or 0.0 in extra_lambdas]
    rows = [_acc_row(res[c.label], None if c is NO_NOISE else base, **{"lambda": c.lam if c.lam is not None else 0.0}) for c in shown]
    return _table(
        "main",
        scenario,
        ["condition", "lambda", *ACC_COLUMNS],
        rows,
        checks={"lambda0_equals_no_noise": res["lambda=0"].same_as(base)},
    )


NOISE_TYPES = [
    Condition("no-noise"),
    Condition("global-gaussian", distribution="gaussian", scope="global"),
    Condition("global-uniform", distribution="uniform", scope="global"),
    Condition("matrix-gaussian", distribution="gaussian", scope="matrix"),
    Condition("matrix-uniform", distribution="uniform", scope="matrix"),
]


def run_noise_type_study(scenario: ScenarioSpec, pretrained: Checkpoint | None = None, jobs: int = 1) -> SummaryTable:
    conds = [c if c.label == "no-noise" else replace(c, lam=scenario.lam) for c in NOISE_TYPES] + [_lambda0()]
    res = run_conditions(scenario, conds, pretrained, jobs)
    base = res["no-noise"]
    rows = [
        _acc_row(res[c.label], None if c.label == "no-noise" else base, distribution=c.distribution if c.lam else "", scope=c.scope if c.lam else "")
        for c in conds[:5]
    ]
    g = np.mean([res["global-gaussian"].accuracies, res["global-uniform"].accuracies], axis=0)
    m = np.mean([res["matrix-gaussian"].accuracies, res["matrix-uniform"].accuracies], axis=0)
    extra = {
        "lambda": scenario.lam,
        "global_minus_matrix_mean": float((g - m).mean()),
        "global_minus_matrix_per_seed": (g - m).tolist(),
        "uniform_minus_gaussian_matrix_mean": float(
            np.mean(np.subtract(res["matrix-uniform"].accuracies, res["matrix-gaussian"].accuracies))
        ),
    }
    return _table(
        "noise-types",
        scenario,
        ["condition", "distribution", "scope", *ACC_COLUMNS],
        rows,
        extra=extra,
        checks={"lambda0_equals_no_noise": res["lambda=0"].same_as(base)},
    )


def _methods(scenario: ScenarioSpec) -> list[tuple[str, FinetuneMethod]]:
    return [("vanilla", Vanilla()), ("mixout", scenario.mixout), ("recadam", scenario.recadam)]


def run_combination_study(scenario: ScenarioSpec, pretrained: Checkpoint | None = None, jobs: int = 1) -> SummaryTable:
    conds = []
    for name, method in _methods(scenario):
        conds.append(Condition(name, method=method))
        conds.append(Condition(f"{name}+noise", lam=scenario.lam, method=method))
    conds += [_lambda0(m, label=f"{n}+lambda=0") for n, m in _methods(scenario)]
    res = run_conditions(scenario, conds, pretrained, jobs)
    rows = []
    checks = {}
    for name, _ in _methods(scenario):
        rows.append(_acc_row(res[name], None, method_name=name, perturbed="no"))
        rows.append(_acc_row(res[f"{name}+noise"], res[name], method_name=name, perturbed="yes"))
        checks[f"{name}_lambda0_equals_no_noise"] = res[f"{name}+lambda=0"].same_as(res[name])
    return _table("combination", scenario, ["condition", "method_name", "perturbed", *ACC_COLUMNS], rows, checks=checks)


def run_data_fraction_study(
    scenario: ScenarioSpec,
    fractions: Sequence[float] | None = None,
    pretrained: Checkpoint | None = None,
    jobs: int = 1,
) -> SummaryTable:
    fractions = tuple(scenario.fractions if fractions is None else fractions)
    conds = []
    for f in fractions:
        conds.append(Condition(f"no-noise@{f:g}", fraction=f))
        conds.append(Condition(f"lambda={scenario.lam:g}@{f:g}", lam=scenario.lam, fraction=f))
        conds.append(_lambda0(fraction=f, label=f"lambda=0@{f:g}"))
    res = run_conditions(scenario, conds, pretrained, jobs)
    rows = []
    checks = {}
    n_train = scenario.downstream.n_train
    for f in fractions:
        base = res[f"no-noise@{f:g}"]
        n_used = len(subsample(Dataset(np.zeros((n_train, 1), dtype=np.int64), np.zeros(n_train, dtype=np.int64)), f, 0))
        for label, b in ((f"no-noise@{f:g}", None), (f"lambda={scenario.lam:g}@{f:g}", base)):
            r = _acc_row(res[label], b, fraction=f, n_train_used=n_used)
            r["condition"] = label.split("@")[0]
            rows.append(r)
        checks[f"lambda0_equals_no_noise@{f:g}"] = res[f"lambda=0@{f:g}"].same_as(base)
    extra = {}
    for cond in ("no-noise", f"lambda={scenario.lam:g}"):
        means = [res[f"{cond}@{f:g}"].mean for f in fractions]
        rho = stats.spearmanr(fractions, means).statistic if len(fractions) > 2 else float("nan")
        extra[f"spearman_{cond}"] = float(rho)
    return _table(
        "data-fraction", scenario, ["condition", "fraction", "n_train_used", *ACC_COLUMNS], rows, extra=extra, checks=checks
    )


GROUPS = ("embeddings", "attention", "ffn", "layernorm", "heads")


def run_norm_tracking(scenario: ScenarioSpec, pretrained: Checkpoint | None = None, jobs: int = 1) -> SummaryTable:
    """Relative L1 change per group and epoch, measured from each run's own start."""
    noisy = f"lambda={scenario.lam:g}"
    conds = [NO_NOISE, Condition(noisy, lam=scenario.lam), _lambda0()]
    res = run_conditions(scenario, conds, pretrained, jobs)
    rows = []
    for label in ("no-noise", noisy):
        r = res[label]
        for epoch in range(scenario.finetune.epochs + 1):
            for g in GROUPS:
                vals = [0.0 if epoch == 0 else r.runs[s].trajectory.l1_change[epoch - 1][g] for s in r.seeds]
                rows.append(
                    {
                        "condition": label,
                        "epoch": epoch,
                        "group": g,
                        "n_seeds": len(vals),
                        "mean_rel_change": float(np.mean(vals)),
                        "std_rel_change": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                        "per_seed": vals,
                    }
                )
    final = {}
    for g in GROUPS:
        a = np.array([res[noisy].runs[s].trajectory.l1_change[-1][g] for s in scenario.seeds])
        b = np.array([res["no-noise"].runs[s].trajectory.l1_change[-1][g] for s in scenario.seeds])
        d = a - b
        final[g] = {
            "noisy_mean": float(a.mean()),
            "no_noise_mean": float(b.mean()),
            "mean_paired_diff": float(d.mean()),
            "std_paired_diff": float(d.std(ddof=1)) if len(d) > 1 else 0.0,
            "direction": "smaller" if d.mean() < 0 else ("larger" if d.mean() > 0 else "equal"),
        }
    flagged = sorted({g for s in scenario.seeds for lab in ("no-noise", noisy) for g in res[lab].runs[s].trajectory.l1_flagged})
    return _table(
        "norm-tracking",
        scenario,
        ["condition", "epoch", "group", "n_seeds", "mean_rel_change", "std_rel_change"],
        rows,
        extra={"final_epoch": final, "zero_l1_groups": flagged},
        checks={"lambda0_equals_no_noise": res["lambda=0"].same_as(res["no-noise"])},
    )


def run_lambda_sweep(
    scenario: ScenarioSpec,
    grid: Sequence[float] | None = None,
    pretrained: Checkpoint | None = None,
    jobs: int = 1,
) -> SummaryTable:
    grid = tuple(scenario.lambda_grid if grid is None else grid)
    conds = [NO_NOISE] + [Condition(f"lambda={x:g}", lam=x) for x in grid]
    if 0.0 not in grid:
        conds.append(_lambda0())
    res = run_conditions(scenario, conds, pretrained, jobs)
    base = res["no-noise"]
    rows = [_acc_row(res[f"lambda={x:g}"], base, **{"lambda": x}) for x in grid]
    best = max(rows, key=lambda r: r["mean_accuracy"])
    return _table(
        "lambda-sweep",
        scenario,
        ["condition", "lambda", *ACC_COLUMNS],
        rows,
        extra={"no_noise_mean": base.mean, "best_lambda": best["lambda"]},
        checks={"lambda0_equals_no_noise": res["lambda=0"].same_as(base)},
    )


def run_sanity_check(scenario: ScenarioSpec, pretrained: Checkpoint | None = None, jobs: int = 1) -> SummaryTable:
    """Pretrained vs random-init finetuning, plus untrained random-model accuracy."""
    res = run_conditions(scenario, [Condition("pretrained"), Condition("random-init", start="random")], pretrained, jobs)
    rows = [_acc_row(res["pretrained"], None), _acc_row(res["random-init"], res["pretrained"])]
    untrained = []
    for s in scenario.seeds:
        _, ev = scenario.downstream_data(s)
        untrained.append(accuracy(init_params(scenario.model, random_init_seed(s)), ev.tokens, ev.labels, scenario.model))
    chance = 1.0 / scenario.downstream.n_classes
    sigma = math.sqrt(chance * (1 - chance) / scenario.downstream.n_eval)
    extra = {
        "untrained_random_mean": float(np.mean(untrained)),
        "untrained_random_per_seed": untrained,
        "chance": chance,
        "binomial_sigma": sigma,
        "pretrained_minus_random": res["pretrained"].mean - res["random-init"].mean,
    }
    return _table("sanity", scenario, ["condition", *ACC_COLUMNS], rows, extra=extra)


STUDIES: dict[str, Callable[..., SummaryTable]] = {
    "main": run_main_comparison,
    "noise-types": run_noise_type_study,
    "combination": run_combination_study,
    "data-fraction": run_data_fraction_study,
    "norm-tracking": run_norm_tracking,
    "lambda-sweep": run_lambda_sweep,
}


def run_study(name: str, scenario: ScenarioSpec, pretrained: Checkpoint | None = None, jobs: int = 1) -> SummaryTable:
    if name not in STUDIES:
        raise KeyError(name)
    return STUDIES[name](scenario, pretrained=pretrained, jobs=jobs)


# --- run directories ----------------------------------------------------------


def run_dir_for(scenario: ScenarioSpec, out_dir: str | Path) -> Path:
    return Path(out_dir) / f"run-{scenario.content_hash()[:16]}"


def write_study(table: SummaryTable, scenario: ScenarioSpec, out_dir: str | Path) -> Path:
    """Write ``<study>.csv`` and ``<study>.json`` and refresh ``manifest.json``."""
    run_dir = run_dir_for(scenario, out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / f"{table.study}.csv").write_text(table.to_csv(), encoding="utf-8")
    (run_dir / f"{table.study}.json").write_text(table.to_json(), encoding="utf-8")
    (run_dir / "scenario.json").write_text(json.dumps(scenario.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else {}
    studies = {s["study"]: s for s in manifest.get("studies", [])}
    studies[table.study] = {"study": table.study, "files": [f"{table.study}.csv", f"{table.study}.json"]}
    manifest = {
        "spec_hash": scenario.content_hash(),
        "seeds": list(scenario.seeds),
        "scenario": "scenario.json",
        "studies": [studies[k] for k in sorted(studies)],
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return run_dir


def load_tables(run_dir: str | Path) -> list[SummaryTable]:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    tables = []
    for entry in manifest["studies"]:
        doc = json.loads((run_dir / f"{entry['study']}.json").read_text(encoding="utf-8"))
        tables.append(
            SummaryTable(
                doc["study"], doc["columns"], doc["rows"], doc.get("extra", {}), doc.get("checks", {}),
                doc.get("scenario_hash", ""), doc.get("seeds", []),
            )
        )
    return tables
