"""Experiment orchestration: desk-scale attack/defense tables, perturbation
profiles, hyper-parameter sweeps and the zero-IWD ball demonstration.

Every experiment is a function of its config. Intermediate cells (one model,
one attacker, one seed) are cached as JSON keyed by a hash of their inputs,
so a rerun resumes instead of recomputing, experiments sharing an output
directory share cells, and the final CSV/JSON reports are byte-identical
across reruns.
"""

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import transport
from .attack import AttackConfig, default_budget, fgsm, iwda_images, pgd
from .data import checkerboard_image, generate_synthetic, load_idx
from .defense import DefenseConfig, TrainConfig, iwdd_train, natural_train
from .errors import PathError, ValidationError
from .models import TrainedModel
from .patches import PatchGrid, as_image, permute_patches

log = logging.getLogger(__name__)

KINDS = ("attack_table", "defense_table", "perturbation_histogram", "ablation_tau",
         "ablation_beta", "theorem1_demo")
ATTACKERS = ("identity", "fgsm", "pgd10", "iwda", "iwda_primal")
SCHEMA_VERSION = 1


@dataclass
class SuiteConfig:
    """Desk-scale data source and classifier."""
    n_classes: int = 4
    per_class_train: int = 250
    per_class_test: int = 50
    size: tuple = (12, 12)
    noise: float = 0.05
    contrast: float = 0.3
    hidden: tuple = (128, 64)
    epochs: int = 30
    learning_rate: float = 0.1
    batch_size: int = 128
    # optional IDX files (relative paths resolve against IWD_DATA_DIR)
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None


@dataclass
class ExperimentConfig:
    kind: str
    seeds: tuple = (0, 1, 2)
    out_dir: str = "runs"
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    n_test: int = 200
    attackers: tuple = ("fgsm", "iwda")
    fgsm_eps: float = 0.05
    pgd_eps: float = 0.1
    pgd_alpha: float = 0.02
    pgd_steps: int = 10
    budget: float = None            # None: half the mean same-class IWD
    attack: dict = field(default_factory=dict)
    defense: dict = field(default_factory=dict)
    defense_epochs: int = 10
    sweep: tuple = ()
    eval_attacks: tuple = ("fgsm", "pgd10", "iwda")
    diameter_samples: int = 64
    diameter_eps: float = 8.0 / 255.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if isinstance(self.suite, dict):
            self.suite = SuiteConfig(**self.suite)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.attackers = tuple(self.attackers)
        self.sweep = tuple(float(v) for v in self.sweep)
        self.eval_attacks = tuple(self.eval_attacks)
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        bad = [a for a in self.attackers + self.eval_attacks if a not in ATTACKERS]
        if bad:
            raise ValidationError(f"unknown attackers {bad}; choose from {ATTACKERS}")
        if self.kind.startswith("ablation") and not self.sweep:
            raise ValidationError("ablations need nonempty sweep values")
        if self.n_test < 1:
            raise ValidationError("n_test must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "suite" in d and isinstance(d["suite"], dict):
            d["suite"] = SuiteConfig(**d["suite"])
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown config fields {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        if not os.path.exists(path):
            raise PathError(f"no such config: {path}")
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config is not valid JSON: {exc}") from exc

    def hash(self):
        body = {k: v for k, v in self.to_dict().items() if k != "out_dir"}
        return config_hash(body)


def config_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# report writing
# ---------------------------------------------------------------------------


def fmt(v):
    """CSV cell: 6 significant digits for floats, '.' decimal, no separators."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.6g" % float(v)
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def _write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def json_text(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def render_row(name, values, digits=2):
    """Percent row as printed in result tables, e.g. ``FGSM | 69.78``."""
    return " | ".join([name] + [f"{v:.{digits}f}" for v in values])


class RunDir:
    """Output directory holding reports, one manifest per experiment kind,
    and a cache of cells and models keyed by a hash of their inputs.

    Cells only depend on their own inputs, so experiments sharing a
    directory reuse each other's work.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = cfg.out_dir
        try:
            os.makedirs(os.path.join(self.root, "cells"), exist_ok=True)
            os.makedirs(os.path.join(self.root, "models"), exist_ok=True)
        except OSError as exc:
            raise PathError(f"cannot create output directory {self.root}: {exc}") from exc
        if not os.access(self.root, os.W_OK):
            raise PathError(f"output directory is not writable: {self.root}")
        self.hash = cfg.hash()
        self.manifest_path = os.path.join(self.root, f"{cfg.kind}.manifest.json")
        config = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
        self.manifest = {"config": config, "config_hash": self.hash, "seeds": list(cfg.seeds),
                         "cells": {}, "models": {}, "reports": {}, "schema": SCHEMA_VERSION}

    def cell(self, name, inputs, compute):
        """Cached ``compute()``; recomputed when the file is missing or does
        not belong to ``inputs``."""
        inputs = json.loads(json_text(inputs))
        key = f"{name}-{config_hash(inputs)}"
        path = os.path.join(self.root, "cells", key + ".json")
        if os.path.exists(path):
            try:
                with open(path) as fh:
                    text = fh.read()
                stored = json.loads(text)
                if stored.get("inputs") == inputs and "value" in stored:
                    self._record("cells", key, text)
                    return stored["value"]
            except (OSError, json.JSONDecodeError, AttributeError):
                pass
            log.info("recomputing invalid cell %s", key)
        text = json_text({"inputs": inputs, "value": _jsonable(compute())})
        _write(path, text)
        self._record("cells", key, text)
        return json.loads(text)["value"]

    def model(self, name, inputs, train):
        key = f"{name}-{config_hash(json.loads(json_text(inputs)))}"
        path = os.path.join(self.root, "models", key + ".bin")
        if not (os.path.exists(path) and os.path.exists(path + ".json")):
            train().save(path)
        m = TrainedModel.load(path)
        self.manifest["models"][key] = m.config_hash()
        return m

    def report(self, name, text):
        path = os.path.join(self.root, name)
        _write(path, text)
        self._record("reports", name, text)
        return path

    def _record(self, section, key, text):
        self.manifest[section][key] = hashlib.sha256(text.encode()).hexdigest()

    def save_manifest(self):
        _write(self.manifest_path, json_text(self.manifest))


# ---------------------------------------------------------------------------
# desk suite
# ---------------------------------------------------------------------------


def _data_path(p):
    if p is None or os.path.isabs(p):
        return p
    root = os.environ.get("IWD_DATA_DIR")
    return os.path.join(root, p) if root else p


def load_suite_data(suite, seed):
    """(train, test) datasets for one seed."""
    if suite.train_images:
        train = load_idx(_data_path(suite.train_images), _data_path(suite.train_labels), split="train")
        test = load_idx(_data_path(suite.test_images), _data_path(suite.test_labels),
                        n_classes=train.n_classes, split="test")
        return train, test
    kw = dict(n_classes=suite.n_classes, size=tuple(suite.size), noise=suite.noise, contrast=suite.contrast)
    train = generate_synthetic(seed, per_class=suite.per_class_train, split="train", **kw)
    test = generate_synthetic(seed, per_class=suite.per_class_test, split="test", **kw)
    return train, test


def train_config(suite, seed, epochs=None):
    return TrainConfig(tuple(suite.hidden), "relu", suite.epochs if epochs is None else epochs,
                       suite.batch_size, suite.learning_rate, seed)


def attack_config(cfg, seed, budget, **over):
    base = {"seed": seed, "eps_w": budget}
    base.update(cfg.attack)
    base.update(over)
    if "grid" in base and isinstance(base["grid"], dict):
        base["grid"] = PatchGrid(**base["grid"])
    return AttackConfig(**base)


def _distances(X, Xa, grid):
    d = (Xa - X).reshape(len(X), -1)
    l2 = np.sqrt((d * d).sum(1))
    linf = np.abs(d).max(1) if d.shape[1] else np.zeros(len(X))
    w = np.array([transport.iwd(X[i], Xa[i], grid).value for i in range(len(X))])
    return l2, linf, w


def attacker_inputs(name, cfg, seed, budget, **over):
    """Everything an attacker's output depends on, for cache keys."""
    if name == "identity":
        return {"attacker": name}
    if name == "fgsm":
        return {"attacker": name, "eps": cfg.fgsm_eps}
    if name == "pgd10":
        return {"attacker": name, "eps": cfg.pgd_eps, "alpha": cfg.pgd_alpha, "steps": cfg.pgd_steps}
    variant = "primal" if name == "iwda_primal" else "dual"
    return {"attacker": name, "config": dataclasses.asdict(attack_config(cfg, seed, budget, variant=variant, **over))}


def run_attacker(name, model, X, Y, idx, cfg, seed, budget, **over):
    """Attack every row of X; returns (X_adv, per-sample record dict)."""
    grid = attack_config(cfg, seed, budget, **over).grid
    budget_ok = None
    if name == "identity":
        Xa = X.copy()
    elif name == "fgsm":
        Xa = fgsm(X, Y, model, cfg.fgsm_eps)
    elif name == "pgd10":
        Xa = pgd(X, Y, model, cfg.pgd_eps, cfg.pgd_alpha, cfg.pgd_steps)
    elif name in ("iwda", "iwda_primal"):
        variant = "primal" if name == "iwda_primal" else "dual"
        acfg = attack_config(cfg, seed, budget, variant=variant, **over)
        results = iwda_images(X, Y, model, acfg, indices=idx)
        Xa = np.stack([r.x_adv for r in results]) if results else X.copy()
        budget_ok = np.array([r.budget_satisfied for r in results], dtype=bool)
    else:
        raise ValidationError(f"unknown attacker {name!r}")
    pred = model.predict(Xa) if len(Xa) else np.zeros(0, dtype=int)
    l2, linf, w = _distances(X, Xa, grid)
    rec = {"index": idx, "label": Y, "pred": pred, "success": pred != Y, "l2": l2, "linf": linf, "iwd": w}
    if budget_ok is not None:
        rec["budget_satisfied"] = budget_ok
    return Xa, rec


class Suite:
    """Per-seed data, natural model and IWD budget, cached in the run dir."""

    def __init__(self, cfg, run):
        self.cfg, self.run = cfg, run
        self._cache = {}

    def inputs(self, seed):
        return {"suite": dataclasses.asdict(self.cfg.suite), "seed": seed}

    def get(self, seed):
        if seed in self._cache:
            return self._cache[seed]
        cfg = self.cfg
        train, test = load_suite_data(cfg.suite, seed)
        model = self.run.model("natural", self.inputs(seed),
                               lambda: natural_train(train, train_config(cfg.suite, seed)))
        budget = cfg.budget
        if budget is None:
            budget = self.run.cell("budget", self.inputs(seed),
                                   lambda: {"budget": default_budget(train, seed=seed)})["budget"]
        n = min(cfg.n_test, len(test))
        entry = (train, test.subset(np.arange(n)), model, float(budget))
        self._cache[seed] = entry
        return entry


def _eligible(model, test):
    ok = model.predict(test.images) == test.labels
    return np.flatnonzero(ok)


def _summary(rec):
    n = len(rec["success"])
    out = {"n": n}
    for k in ("l2", "linf", "iwd"):
        out[f"mean_{k}"] = float(np.mean(rec[k])) if n else 0.0
    out["asr"] = float(np.mean(rec["success"])) if n else 0.0
    if "budget_satisfied" in rec:
        out["budget_rate"] = float(np.mean(rec["budget_satisfied"])) if n else 0.0
    return out


# ---------------------------------------------------------------------------
# experiment kinds
# ---------------------------------------------------------------------------


def _attack_cells(cfg, run, suite, attackers, **over):
    """ASR and distance records per (seed, attacker) on eligible test images."""
    cells = {}
    for seed in cfg.seeds:
        _, test, model, budget = suite.get(seed)
        elig = _eligible(model, test)
        if len(elig) == 0:
            raise ValidationError(f"seed {seed}: the classifier misclassifies every test image")
        for name in attackers:
            inputs = {**suite.inputs(seed), "model": model.config_hash(), "n_test": len(test),
                      **attacker_inputs(name, cfg, seed, budget, **over)}

            def compute(name=name, model=model, test=test, elig=elig, seed=seed, budget=budget):
                _, rec = run_attacker(name, model, test.images[elig], test.labels[elig], elig,
                                      cfg, seed, budget, **over)
                return {"records": rec, "summary": _summary(rec), "budget": budget,
                        "clean_accuracy": len(elig) / len(test)}

            cells[(seed, name)] = run.cell(f"attack-{name}-s{seed}", inputs, compute)
    return cells


def attack_table(cfg, run, suite):
    cells = _attack_cells(cfg, run, suite, cfg.attackers)
    header = ["attacker", "model", "seed", "n_eligible", "asr", "mean_l2", "mean_linf", "mean_iwd"]
    rows = []
    for (seed, name), c in cells.items():
        s = c["summary"]
        rows.append([name, "natural", seed, s["n"], s["asr"], s["mean_l2"], s["mean_linf"], s["mean_iwd"]])
    agg = []
    for name in cfg.attackers:
        asrs = [cells[(s, name)]["summary"]["asr"] for s in cfg.seeds]
        # worst case over seeds: the highest ASR, i.e. the lowest accuracy
        agg.append({"attacker": name, "mean_asr": float(np.mean(asrs)), "worst_case_asr": float(np.max(asrs)),
                    "per_seed": asrs})
    clean = {seed: cells[(seed, cfg.attackers[0])]["clean_accuracy"] for seed in cfg.seeds} if cfg.attackers else {}
    return ({"attack_table.csv": csv_text(header, rows)},
            {"rows": rows, "aggregate": agg, "clean_accuracy": clean,
             "cells": {f"{k[0]}/{k[1]}": v["summary"] for k, v in cells.items()}})


def perturbation_histogram(cfg, run, suite):
    cells = _attack_cells(cfg, run, suite, cfg.attackers)
    header = ["attacker", "seed", "index", "l2", "linf", "iwd", "success"]
    rows = []
    summary = {}
    for (seed, name), c in cells.items():
        r = c["records"]
        for i in range(len(r["index"])):
            rows.append([name, seed, r["index"][i], r["l2"][i], r["linf"][i], r["iwd"][i], r["success"][i]])
    for name in cfg.attackers:
        recs = [cells[(s, name)]["records"] for s in cfg.seeds]
        cat = {k: np.concatenate([np.asarray(r[k], dtype=float) for r in recs]) for k in ("l2", "linf", "iwd")}
        summary[name] = {f"mean_{k}": float(v.mean()) if v.size else 0.0 for k, v in cat.items()}
        summary[name]["asr"] = float(np.mean(np.concatenate([np.asarray(r["success"], dtype=float) for r in recs])))
    srows = [[n, s["mean_l2"], s["mean_linf"], s["mean_iwd"]] for n, s in summary.items()]
    return ({"perturbation_histogram.csv": csv_text(header, rows),
             "perturbation_summary.csv": csv_text(["attacker", "mean_l2", "mean_linf", "mean_iwd"], srows)},
            {"summary": summary,
             "per_seed": {f"{k[0]}/{k[1]}": v["summary"] for k, v in cells.items()},
             "clean_accuracy": {seed: cells[(seed, cfg.attackers[0])]["clean_accuracy"] for seed in cfg.seeds}})


def ablation_tau(cfg, run, suite):
    header = ["tau", "seed", "asr", "mean_iwd", "budget_rate"]
    rows = []
    means = {}
    for tau in cfg.sweep:
        cells = _attack_cells(cfg, run, suite, ("iwda",), tau=tau)
        asrs = []
        for (seed, _), c in cells.items():
            s = c["summary"]
            rows.append([tau, seed, s["asr"], s["mean_iwd"], s.get("budget_rate", 0.0)])
            asrs.append(s["asr"])
        means[tau] = float(np.mean(asrs))
    return ({"ablation_tau.csv": csv_text(header, rows)},
            {"mean_asr": [[t, a] for t, a in means.items()], "rows": rows})


def _defense_model(cfg, run, suite, seed, beta):
    train, _, _, _ = suite.get(seed)
    dkw = dict(cfg.defense)
    dkw.pop("beta", None)
    inner = dkw.pop("attack", {})
    acfg = attack_config(cfg, seed, None, **{"max_iter": 20, "n_critic": 5, **inner})
    dcfg = DefenseConfig(beta=beta, train=train_config(cfg.suite, seed, cfg.defense_epochs), attack=acfg, **dkw)
    inputs = {**suite.inputs(seed), "beta": beta, "train": dataclasses.asdict(dcfg.train),
              "attack": dataclasses.asdict(acfg), "max_skip_fraction": dcfg.max_skip_fraction}
    return run.model("iwdd", inputs, lambda: iwdd_train(train, dcfg))


def _evaluate(cfg, run, model, test, seed, budget, suite):
    """Accuracy per attack on all test samples; misclassified samples stay unattacked."""
    out = {"clean": float(np.mean(model.predict(test.images) == test.labels))}
    elig = _eligible(model, test)
    for name in cfg.eval_attacks:
        def compute(name=name):
            Xa = test.images.copy()
            if len(elig):
                xa, rec = run_attacker(name, model, test.images[elig], test.labels[elig], elig, cfg, seed, budget)
                if "budget_satisfied" in rec:
                    # an IWD attack only counts inside the budget
                    keep = np.asarray(rec["budget_satisfied"])
                    xa[~keep] = test.images[elig][~keep]
                Xa[elig] = xa
            return {"accuracy": float(np.mean(model.predict(Xa) == test.labels))}
        inputs = {**suite.inputs(seed), "model": model.config_hash(), "n_test": len(test),
                  **attacker_inputs(name, cfg, seed, budget)}
        out[name] = run.cell(f"eval-{name}-s{seed}", inputs, compute)["accuracy"]
    return out


def defense_table(cfg, run, suite, betas=None):
    include_natural = betas is None
    betas = (float(cfg.defense.get("beta", 0.1)),) if betas is None else betas
    cols = ["clean", *cfg.eval_attacks]
    header = ["method", "beta", "seed", *cols]
    rows = []
    for seed in cfg.seeds:
        _, test, natural, budget = suite.get(seed)
        if include_natural:
            acc = _evaluate(cfg, run, natural, test, seed, budget, suite)
            rows.append(["natural", "", seed, *[acc[c] for c in cols]])
        for b in betas:
            m = _defense_model(cfg, run, suite, seed, b)
            acc = _evaluate(cfg, run, m, test, seed, budget, suite)
            rows.append(["iwdd", b, seed, *[acc[c] for c in cols]])
    table = {}
    for r in rows:
        key = f"{r[0]}" if r[0] == "natural" else f"{r[0]}(beta={fmt(r[1])})"
        table.setdefault(key, []).append(r[3:])
    means = {k: np.mean(np.asarray(v, dtype=float), axis=0).tolist() for k, v in table.items()}
    return {"defense_table.csv": csv_text(header, rows)}, {"mean": means, "columns": cols, "rows": rows}


def ablation_beta(cfg, run, suite):
    files, rep = defense_table(cfg, run, suite, betas=cfg.sweep)
    return {"ablation_beta.csv": files["defense_table.csv"]}, rep


def estimate_ball_diameter(x, eps, metric="iwd", n=64, seed=0, grid=PatchGrid()):
    """Largest pairwise l2 distance among n sampled points of the eps-ball
    around x; a lower bound on the ball's l2 diameter."""
    if n < 2:
        raise ValidationError("need at least 2 samples")
    if eps < 0:
        raise ValidationError("eps must be >= 0")
    x = as_image(x)
    rng = np.random.default_rng(seed)
    if metric == "iwd":
        k = grid.kernel
        n_tiles = (x.shape[0] // k) * (x.shape[1] // k)
        perms = [np.arange(n_tiles), np.roll(np.arange(n_tiles), 1)]
        perms += [rng.permutation(n_tiles) for _ in range(n - 2)]
        pts = []
        for p in perms:
            y = permute_patches(x, grid, p)
            if transport.iwd(x, y, grid).value > eps + 1e-9:
                raise ValidationError("sampled point left the IWD ball")
            pts.append(y.ravel())
    elif metric == "linf":
        pts = [np.clip(x.ravel() + eps * rng.choice([-1.0, 1.0], size=x.size), 0.0, 1.0) for _ in range(n)]
    else:
        raise ValidationError(f"unknown metric {metric!r}")
    P = np.stack(pts)
    sq = (P * P).sum(1)
    D2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * P @ P.T, 0.0)
    return float(np.sqrt(D2.max()))


def theorem1_demo(cfg, run, suite):
    H, W = (12, 12)
    x = checkerboard_image(H, W, 3)
    m = x.size
    header = ["metric", "eps", "seed", "diameter", "linf_bound"]
    rows = []
    bound = 2.0 * cfg.diameter_eps * np.sqrt(m)
    for seed in cfg.seeds:
        d_iwd = estimate_ball_diameter(x, 0.0, "iwd", cfg.diameter_samples, seed)
        d_inf = estimate_ball_diameter(x, cfg.diameter_eps, "linf", cfg.diameter_samples, seed)
        rows.append(["iwd", 0.0, seed, d_iwd, bound])
        rows.append(["linf", cfg.diameter_eps, seed, d_inf, bound])
    holds = all(r[3] > r[4] for r in rows if r[0] == "iwd")
    return {"theorem1_demo.csv": csv_text(header, rows)}, {"linf_bound": bound, "iwd_exceeds_bound": holds}


RUNNERS = {"attack_table": attack_table, "defense_table": defense_table,
           "perturbation_histogram": perturbation_histogram, "ablation_tau": ablation_tau,
           "ablation_beta": ablation_beta, "theorem1_demo": theorem1_demo}


def run_experiment(cfg):
    """Run (or resume) one experiment; returns the report dict and writes
    ``<kind>.json`` plus CSV files and ``<kind>.manifest.json`` into cfg.out_dir."""
    run = RunDir(cfg)
    suite = Suite(cfg, run)
    files, report = RUNNERS[cfg.kind](cfg, run, suite)
    report = {"kind": cfg.kind, "config_hash": run.hash, "seeds": list(cfg.seeds), **report}
    for name, text in files.items():
        run.report(name, text)
    run.report(f"{cfg.kind}.json", json_text(report))
    run.save_manifest()
    return json.loads(json_text(report))
