"""Command line entry point.

Examples:
    iwd distance a.pgm b.pgm --solver exact
    iwd attack --model natural.bin --data synthetic --tau 0.1 --out report.json
    iwd defend --data synthetic --beta 0.1 --epochs 10 --out iwdd.bin
    iwd eval --model iwdd.bin --attacks clean,fgsm,pgd10,iwda --out table.csv
    iwd experiment --config attack.json --out-dir runs/attack
    iwd ablate tau --values 0.01,0.05,0.1 --out-dir runs/tau

Exit codes: 0 success, 2 validation error, 3 numeric error, 4 I/O error.
"""

import argparse
import json
import logging
import os
import sys

log = logging.getLogger("iwd")


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise SystemExit("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _resolve(path):
    if path is None or os.path.isabs(path) or os.path.exists(path):
        return path
    root = os.environ.get("IWD_DATA_DIR")
    return os.path.join(root, path) if root else path


def _out_path(args, name):
    if name is None:
        return None
    if os.path.isabs(name) or os.path.dirname(name):
        return name
    return os.path.join(args.out_dir, name)


def _ensure_dir(path):
    from .errors import PathError

    d = os.path.dirname(path)
    if d:
        try:
            os.makedirs(d, exist_ok=True)
        except OSError as exc:
            raise PathError(f"cannot create {d}: {exc}") from exc


def _write_text(path, text):
    from .errors import PathError

    _ensure_dir(path)
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise PathError(f"cannot write {path}: {exc}") from exc


def _load_data(args, split):
    """`synthetic` builds the desk suite from --seed; otherwise an IDX image file plus --labels."""
    from .data import load_idx
    from .errors import ValidationError
    from .experiments import SuiteConfig, load_suite_data

    if args.data == "synthetic":
        train, test = load_suite_data(SuiteConfig(), args.seed)
        return train if split == "train" else test
    if not args.labels:
        raise ValidationError("--labels is required with an IDX --data file")
    return load_idx(_resolve(args.data), _resolve(args.labels), split=split)


def _grid(args):
    from .patches import PatchGrid

    return PatchGrid(args.kernel, args.stride)


def _attack_config(args, **over):
    from .attack import AttackConfig

    kw = dict(mode=args.mode, target=args.target, tau=args.tau, lam=args.lam, n_critic=args.n_critic,
              max_iter=args.max_iter, eps_w=args.eps_w, seed=args.seed, grid=_grid(args), variant=args.variant)
    kw.update(over)
    return AttackConfig(**kw)


def cmd_distance(args):
    from . import transport
    from .patches import read_pnm
    from .transport import SinkhornConfig

    x = read_pnm(_resolve(args.image_a))
    y = read_pnm(_resolve(args.image_b))
    scfg = SinkhornConfig(reg_scale=args.reg, max_iter=200_000) if args.solver == "sinkhorn" else None
    res = transport.iwd(x, y, _grid(args), args.solver, scfg, steps=args.steps, seed=args.seed)
    text = json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(_out_path(args, args.out), text)
    sys.stdout.write(text)


def cmd_attack(args):
    import numpy as np

    from .attack import asr_from_flags, default_budget, iwda_images
    from .errors import ValidationError
    from .models import TrainedModel

    model = TrainedModel.load(_resolve(args.model))
    data = _load_data(args, "test")
    n = len(data) if args.limit is None else min(args.limit, len(data))
    if n == 0:
        raise ValidationError("no images to attack")
    eps_w = args.eps_w
    if eps_w is None:
        eps_w = default_budget(_load_data(args, "train") if args.data == "synthetic" else data, _grid(args),
                               seed=args.seed)
    cfg = _attack_config(args, eps_w=eps_w)
    X, Y = data.images[:n], data.labels[:n]
    ok = model.predict(X) == Y if cfg.mode == "untargeted" else np.ones(n, dtype=bool)
    idx = np.flatnonzero(ok)
    results = iwda_images(X[idx], Y[idx], model, cfg, indices=idx)
    records = [{"index": int(i), **r.record()} for i, r in zip(idx, results)]
    report = {"variant": cfg.variant, "mode": cfg.mode, "tau": cfg.tau, "eps_w": eps_w, "seed": cfg.seed,
              "n_images": n, "n_eligible": len(idx),
              "asr": asr_from_flags([r.success for r in results]) if results else 0.0,
              "budget_rate": float(np.mean([r.budget_satisfied for r in results])) if results else 0.0,
              "records": records}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    _write_text(_out_path(args, args.out), text)
    print(f"asr {report['asr']:.4f} over {len(idx)} eligible images -> {_out_path(args, args.out)}")


def cmd_defend(args):
    from .defense import DefenseConfig, TrainConfig, iwdd_train, natural_train
    from .errors import ValidationError

    if args.arch != "mlp":
        raise ValidationError(f"unknown architecture {args.arch!r}; only mlp is available")
    train = _load_data(args, "train")
    tc = TrainConfig(tuple(args.hidden), "relu", args.epochs, args.batch, args.lr, args.seed)
    if args.natural:
        model = natural_train(train, tc)
    else:
        inner = _attack_config(args, max_iter=args.inner_iter, eps_w=args.eps_w)
        model = iwdd_train(train, DefenseConfig(beta=args.beta, train=tc, attack=inner))
    path = _out_path(args, args.out)
    _ensure_dir(path)
    model.save(path)
    print(f"train accuracy {model.provenance['train_accuracy']:.4f} -> {path}")


def cmd_eval(args):
    import numpy as np

    from .attack import default_budget, fgsm, iwda_images, pgd
    from .defense import evaluate_defense
    from .errors import ValidationError
    from .experiments import csv_text
    from .models import TrainedModel

    model = TrainedModel.load(_resolve(args.model))
    data = _load_data(args, "test")
    n = len(data) if args.limit is None else min(args.limit, len(data))
    X, Y = data.images[:n], data.labels[:n]
    eps_w = args.eps_w
    if eps_w is None:
        eps_w = default_budget(_load_data(args, "train") if args.data == "synthetic" else data, _grid(args),
                               seed=args.seed)

    def iwda(Xs, Ys):
        Xa = Xs.copy()
        ok = np.flatnonzero(model.predict(Xs) == Ys)
        res = iwda_images(Xs[ok], Ys[ok], model, _attack_config(args, eps_w=eps_w), indices=ok)
        for i, r in zip(ok, res):
            if r.budget_satisfied:
                Xa[i] = r.x_adv
        return Xa

    available = {"clean": lambda Xs, Ys: Xs,
                 "fgsm": lambda Xs, Ys: fgsm(Xs, Ys, model, args.fgsm_eps),
                 "pgd10": lambda Xs, Ys: pgd(Xs, Ys, model, args.pgd_eps, args.pgd_alpha, 10),
                 "iwda": iwda}
    names = [a.strip() for a in args.attacks.split(",") if a.strip()]
    bad = [a for a in names if a not in available]
    if bad or "clean" not in names:
        raise ValidationError(f"attacks must include clean and come from {sorted(available)}; got {names}")
    rep = evaluate_defense(model, {a: available[a] for a in names}, X, Y)
    text = csv_text(["method"] + names, [[model.provenance.get("method", "model")] +
                                         [rep.adversarial_accuracy[a] for a in names]])
    _write_text(_out_path(args, args.out), text)
    sys.stdout.write(text)


def _run_cfg(cfg):
    from .experiments import run_experiment

    report = run_experiment(cfg)
    print(json.dumps({k: v for k, v in report.items() if k != "cells"}, indent=2, sort_keys=True))


def _with_globals(cfg, args, seeds_given):
    cfg.out_dir = args.out_dir
    if seeds_given:
        cfg.seeds = (args.seed,)
    return cfg


def cmd_experiment(args):
    from .experiments import ExperimentConfig

    if args.config:
        cfg = ExperimentConfig.from_json(_resolve(args.config))
    else:
        cfg = ExperimentConfig(kind=args.kind)
    _run_cfg(_with_globals(cfg, args, args.seed_given))


def cmd_ablate(args):
    from .experiments import ExperimentConfig

    kind = f"ablation_{args.parameter}"
    if args.config:
        cfg = ExperimentConfig.from_json(_resolve(args.config))
        cfg.kind = kind
        if args.values:
            cfg.sweep = tuple(_floats(args.values))
        cfg = ExperimentConfig.from_dict(cfg.to_dict())
    else:
        defaults = {"tau": "0.01,0.05,0.1", "beta": "0.1,1,10"}
        cfg = ExperimentConfig(kind=kind, sweep=_floats(args.values or defaults[args.parameter]),
                               attackers=("iwda",))
    _run_cfg(_with_globals(cfg, args, args.seed_given))


class _SeedAction(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.seed_given = True


def _add_attack_flags(p):
    p.add_argument("--variant", choices=("dual", "primal"), default="dual")
    p.add_argument("--mode", choices=("untargeted", "targeted"), default="untargeted")
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--n-critic", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=400)
    p.add_argument("--eps-w", type=float, default=None, help="IWD budget (default: half the mean same-class IWD)")


def _add_data_flags(p, default="synthetic"):
    p.add_argument("--data", default=default, help="'synthetic' or an IDX image file (relative to IWD_DATA_DIR)")
    p.add_argument("--labels", default=None, help="IDX label file matching --data")
    p.add_argument("--limit", type=int, default=None, help="use only the first N images")


def _add_grid_flags(p):
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--stride", type=int, default=None)


def _global_flags(suppress):
    # subcommands repeat the global flags; their defaults are suppressed so a
    # value given before the verb is not overwritten
    def d(v):
        return argparse.SUPPRESS if suppress else v

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d(0), action=_SeedAction)
    p.add_argument("--threads", type=int, default=d(None))
    p.add_argument("--out-dir", default=d("."))
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser():
    common = _global_flags(True)
    parser = argparse.ArgumentParser(prog="iwd", description="Internal Wasserstein distance tools.",
                                     parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("distance", parents=[common], help="IWD between two PGM/PPM images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--solver", choices=("exact", "sinkhorn", "dual", "brute"), default="exact")
    p.add_argument("--reg", type=float, default=1e-3, help="Sinkhorn regularization as a fraction of max cost")
    p.add_argument("--steps", type=int, default=500, help="critic steps for the dual solver")
    p.add_argument("--out", default=None)
    _add_grid_flags(p)
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("attack", parents=[common], help="IWD attack on a dataset")
    p.add_argument("--model", required=True)
    _add_data_flags(p)
    _add_attack_flags(p)
    _add_grid_flags(p)
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", parents=[common], help="IWDD adversarial training")
    _add_data_flags(p)
    _add_attack_flags(p)
    _add_grid_flags(p)
    p.add_argument("--arch", default="mlp")
    p.add_argument("--hidden", type=int, nargs="+", default=[128, 64])
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--inner-iter", type=int, default=20)
    p.add_argument("--natural", action="store_true", help="train on clean data only")
    p.add_argument("--out", default="model.bin")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("eval", parents=[common], help="accuracy under attacks")
    p.add_argument("--model", required=True)
    _add_data_flags(p)
    _add_attack_flags(p)
    _add_grid_flags(p)
    p.add_argument("--attacks", default="clean,fgsm,pgd10,iwda")
    p.add_argument("--fgsm-eps", type=float, default=0.05)
    p.add_argument("--pgd-eps", type=float, default=0.1)
    p.add_argument("--pgd-alpha", type=float, default=0.02)
    p.add_argument("--out", default="table.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", parents=[common], help="run an experiment config")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--config", help="JSON file mirroring ExperimentConfig")
    g.add_argument("--kind", choices=("attack_table", "defense_table", "perturbation_histogram", "theorem1_demo"))
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("ablate", parents=[common], help="tau or beta sweep")
    p.add_argument("parameter", choices=("tau", "beta"))
    p.add_argument("--values", default=None, help="comma separated sweep values")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "seed_given"):
        args.seed_given = False
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    from .errors import IWDError

    try:
        args.func(args)
    except IWDError as exc:
        print(f"iwd: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"iwd: error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
