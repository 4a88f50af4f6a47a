"""Command-line entry point: ``jrlab {train,eval,attack,sweep,slice,check}``.

Every flag mirrors a config key in kebab-case; ``--config FILE`` supplies a
flat ``key=value`` file and explicit flags override it.  Outputs are CSV plus
a ``manifest.txt`` that can be fed back through ``--config`` to reproduce a
run byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import checks
from .data import Dataset, find_mnist, load_idx, load_mnist5k, synthetic_blobs, split_per_class
from .jacreg import ConfigError
from .nn import CheckpointError, DimensionError, load_model, predict, save_model
from .robust import (
    ATTACK_KINDS,
    AttackConfig,
    AttackConfigError,
    accuracy_under_noise,
    fooling_distances,
    curve_from_distances,
)
from .slices import decision_slice
from .train import TrainConfig, evaluate, parse_key_values, train, build_model

DATA_KEYS = {
    "dataset": "synthetic",
    "data_dir": "",
    "train_images": "",
    "train_labels": "",
    "test_images": "",
    "test_labels": "",
    "synthetic_per_class": "200",
    "synthetic_seed": "0",
}

ATTACK_KEYS = [f for f in AttackConfig.__dataclass_fields__]


class UsageError(Exception):
    pass


def load_datasets(opts: dict) -> tuple[Dataset, Dataset]:
    """Resolve ``dataset=synthetic|mnist|mnist5k|idx`` into (train, test)."""
    kind = opts.get("dataset", "synthetic")
    if kind == "synthetic":
        n = int(opts.get("synthetic_per_class", 200))
        ds = synthetic_blobs(n + max(n // 4, 1), seed=int(opts.get("synthetic_seed", 0)))
        return split_per_class(ds, max(n // 4, 1), seed=0)
    if kind == "mnist":
        found = find_mnist(opts.get("data_dir") or None)
        if found is None:
            raise UsageError("MNIST IDX files not found; set --data-dir or JRLAB_DATA_DIR")
        return found
    if kind == "mnist5k":
        return load_mnist5k(opts.get("data_dir") or None)
    if kind == "idx":
        paths = [opts.get(k) for k in ("train_images", "train_labels", "test_images", "test_labels")]
        if not all(paths):
            raise UsageError("dataset=idx needs train/test image and label paths")
        return load_idx(paths[0], paths[1]), load_idx(paths[2], paths[3])
    raise UsageError(f"unknown dataset {kind!r}; choose synthetic, mnist, mnist5k or idx")


def _resolve(args, valid_keys) -> dict:
    """Merge ``--config`` file values with explicit flags (flags win)."""
    opts = {}
    if getattr(args, "config", None):
        opts.update(parse_key_values(Path(args.config).read_text()))
    for key in valid_keys:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    unknown = sorted(set(opts) - set(valid_keys))
    if unknown:
        raise UsageError(
            f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(sorted(valid_keys))}"
        )
    return opts


def _add_keys(p, keys):
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)


def _split(opts, keys):
    return {k: v for k, v in opts.items() if k in keys}


def _data_opts(opts) -> dict:
    return {**DATA_KEYS, **_split(opts, DATA_KEYS)}


def _write_manifest(path, opts: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in opts.items()))


def _manifest_text(cfg: TrainConfig, data_opts: dict, extra: dict | None = None) -> str:
    lines = [cfg.to_text().rstrip("\n")]
    for k in DATA_KEYS:
        lines.append(f"{k}={data_opts[k]}")
    for k, v in (extra or {}).items():
        lines.append(f"# {k}={v}")
    return "\n".join(lines) + "\n"


def _train_one(cfg: TrainConfig, train_set, test_set):
    model = build_model(cfg, train_set.width, train_set.n_classes)
    return train(model, train_set, cfg, test_set)


def cmd_train(args) -> int:
    opts = _resolve(args, TrainConfig.keys() + list(DATA_KEYS))
    data_opts = _data_opts(opts)
    cfg = TrainConfig.from_mapping(_split(opts, TrainConfig.keys()))
    train_set, test_set = load_datasets(data_opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, history = _train_one(cfg, train_set, test_set)
    save_model(model, out / "model.ckpt")
    history.to_csv(out / "history.csv")
    (out / "manifest.txt").write_text(_manifest_text(cfg, data_opts))
    print(f"final test accuracy {history.test_acc[-1]:.2f}%  ||J||_F {history.jf_norm[-1]:.4f}")
    return 0


def _load_checkpoint(path, width):
    try:
        model = load_model(path)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc
    if model.n_in != width:
        raise UsageError(f"checkpoint expects width {model.n_in}, dataset has {width}")
    return model


def cmd_eval(args) -> int:
    opts = _resolve(args, list(DATA_KEYS) + ["n_eval_jac"])
    _, test_set = load_datasets(_split(opts, DATA_KEYS))
    model = _load_checkpoint(args.checkpoint, test_set.width)
    acc, jf = evaluate(model, test_set, int(opts.get("n_eval_jac", len(test_set))))
    print(f"accuracy {acc:.2f}%")
    print(f"jacobian_frobenius {jf:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["accuracy", "jf_norm", "n"])
            w.writerow([repr(acc), repr(jf), len(test_set)])
    return 0


def _floats(text) -> list[float]:
    return [float(t) for t in str(text).replace(" ", "").split(",") if t]


def _attack_config(opts) -> AttackConfig:
    kw = {}
    for k in ATTACK_KEYS:
        if k in opts:
            typ = AttackConfig.__dataclass_fields__[k].type
            kw[k] = opts[k] if k == "kind" else (int(opts[k]) if typ == "int" else float(opts[k]))
    return AttackConfig(**kw)


def cmd_attack(args) -> int:
    keys = list(DATA_KEYS) + ATTACK_KEYS + ["sigmas", "n_test"]
    opts = _resolve(args, keys)
    opts.setdefault("kind", "pgd")
    if opts["kind"] not in ATTACK_KINDS:
        raise UsageError(f"unknown attack kind {opts.get('kind')!r}; choose from {', '.join(ATTACK_KINDS)}")
    acfg = _attack_config(opts)
    _, test_set = load_datasets(_split(opts, DATA_KEYS))
    model = _load_checkpoint(args.checkpoint, test_set.width)
    n_test = int(opts.get("n_test", 100))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if acfg.kind == "white" and "sigmas" in opts:
        curve = accuracy_under_noise(model, test_set, _floats(opts["sigmas"]), n_test, seed=acfg.seed)
    else:
        d = fooling_distances(model, test_set, acfg, n_test)
        curve = curve_from_distances(acfg.kind, d, acfg.seed)
        with open(out.with_name(out.stem + "_points.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", "distance"])
            for i, (lab, dist) in enumerate(zip(test_set.labels[:n_test], d)):
                w.writerow([i, int(lab), repr(float(dist))])
        print(f"median fooling distance {curve.median_distance():.4f}")
    curve.to_csv(out)
    _write_manifest(out.with_name(out.stem + "_manifest.txt"), {**_data_opts(opts), **opts})
    print(f"wrote {len(curve.abscissa)} rows to {out}")
    return 0


def cmd_sweep(args) -> int:
    keys = TrainConfig.keys() + list(DATA_KEYS) + ["lambdas", "seeds", "sigmas", "n_test"]
    opts = _resolve(args, keys)
    lambdas = _floats(opts.get("lambdas", "0,0.001,0.01,0.1"))
    if not lambdas or min(lambdas) < 0:
        raise UsageError("lambda list must be non-empty and non-negative")
    seeds = [int(s) for s in _floats(opts.get("seeds", "0"))]
    sigmas = _floats(opts.get("sigmas", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.8,1.0"))
    n_test = int(opts.get("n_test", 200))
    data_opts = _data_opts(opts)
    base = _split(opts, TrainConfig.keys())
    train_set, test_set = load_datasets(data_opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pgd = AttackConfig(kind="pgd")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_jr", "seed", "attack", "abscissa", "accuracy", "test_acc", "jf_norm"])
        for lam in lambdas:
            cell = out / f"lambda_{lam:g}"
            cell.mkdir(exist_ok=True)
            for seed in seeds:
                cfg = TrainConfig.from_mapping({**base, "lambda_jr": lam, "seed": seed})
                model, history = _train_one(cfg, train_set, test_set)
                save_model(model, cell / f"model_seed{seed}.ckpt")
                acc, jf = history.test_acc[-1], history.jf_norm[-1]
                noise = accuracy_under_noise(model, test_set, sigmas, n_test, seed=seed)
                for a, v in zip(noise.abscissa, noise.values):
                    w.writerow([lam, seed, "white", repr(float(a)), repr(float(v)), acc, jf])
                d = fooling_distances(model, test_set, pgd, n_test)
                curve = curve_from_distances("pgd", d, seed)
                for a, v in zip(curve.abscissa, curve.accuracy()):
                    w.writerow([lam, seed, "pgd", repr(float(a)), repr(float(v)), acc, jf])
                print(f"lambda {lam:g} seed {seed}: acc {acc:.2f}% ||J||_F {jf:.4f}")
            cfg = TrainConfig.from_mapping({**base, "lambda_jr": lam})
            (cell / "manifest.txt").write_text(
                _manifest_text(cfg, data_opts, {"seeds": ",".join(map(str, seeds))})
            )
    return 0


def cmd_slice(args) -> int:
    opts = _resolve(args, list(DATA_KEYS))
    _, test_set = load_datasets(_split(opts, DATA_KEYS))
    model = _load_checkpoint(args.checkpoint, test_set.width)
    center = test_set.images[int(args.index)]
    directions = None
    mode = args.mode
    if mode == "given-basis":
        if not args.directions:
            raise UsageError("--directions FILE.npy (two rows) is required in given-basis mode")
        directions = np.load(args.directions)
    sl = decision_slice(
        model,
        center,
        mode=mode,
        directions=directions,
        extent=float(args.extent),
        resolution=int(args.resolution),
        seed=int(args.seed),
        norm=test_set.normalizer,
    )
    sl.to_csv(args.out)
    out = Path(args.out)
    _write_manifest(
        out.with_name(out.stem + "_manifest.txt"),
        {**_data_opts(opts), "index": args.index, "mode": mode, "extent": args.extent,
         "resolution": args.resolution, "seed": args.seed},
    )
    pred = predict(model, test_set.normalizer(center)[None, :])[0]
    print(f"center class {sl.center_cell} (direct prediction {pred})")
    print(f"boundary radius {sl.boundary_radius:.4f}")
    return 0


def cmd_check(args) -> int:
    results = checks.run_checks()
    failed = [r for r in results if not r.passed]
    for r in results:
        print(r.line())
        for d in r.details:
            print("    " + d)
    if failed:
        print(f"{len(failed)} check(s) failed: " + ", ".join(r.name for r in failed))
        return 1
    print("all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jrlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config")
    t.add_argument("--out", default="run")
    _add_keys(t, TrainConfig.keys() + list(DATA_KEYS))
    t.add_argument("--dropout", dest="dropout_rate", default=None)
    t.set_defaults(subparser=t, func=cmd_train)

    e = sub.add_parser("eval", help="clean accuracy and test-set ||J||_F")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--csv")
    _add_keys(e, list(DATA_KEYS) + ["n_eval_jac"])
    e.set_defaults(subparser=e, func=cmd_eval)

    a = sub.add_parser("attack", help="robustness curve for one attack")
    a.add_argument("checkpoint")
    a.add_argument("--config")
    a.add_argument("--out", default="attack.csv")
    _add_keys(a, list(DATA_KEYS) + ATTACK_KEYS + ["sigmas", "n_test"])
    a.set_defaults(subparser=a, func=cmd_attack)

    s = sub.add_parser("sweep", help="train and attack across lambda_jr values")
    s.add_argument("--config")
    s.add_argument("--out", default="sweep")
    _add_keys(s, TrainConfig.keys() + list(DATA_KEYS) + ["lambdas", "seeds", "sigmas", "n_test"])
    s.set_defaults(subparser=s, func=cmd_sweep)

    c = sub.add_parser("slice", help="decision-cell cross section around a test point")
    c.add_argument("checkpoint")
    c.add_argument("--config")
    c.add_argument("--index", default=0)
    c.add_argument("--mode", default="random", choices=["random", "given-basis"])
    c.add_argument("--directions")
    c.add_argument("--extent", default=10.0)
    c.add_argument("--resolution", default=101)
    c.add_argument("--seed", default=0)
    c.add_argument("--out", default="slice.csv")
    _add_keys(c, list(DATA_KEYS))
    c.set_defaults(subparser=c, func=cmd_slice)

    k = sub.add_parser("check", help="run the gradient and estimator self-tests")
    k.set_defaults(subparser=k, func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra:
        valid = sorted(a.option_strings[0] for a in args.subparser._actions if a.option_strings)
        print(
            f"jrlab {args.command}: error: unrecognized arguments {' '.join(extra)}; "
            f"valid flags: {' '.join(valid)}",
            file=sys.stderr,
        )
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError, AttackConfigError, DimensionError) as exc:
        print(f"jrlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
