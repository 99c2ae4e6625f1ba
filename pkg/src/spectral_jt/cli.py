"""Command-line entry point: ``spectral-jt <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .em import EMConfig
from .experiments import (
    FAMILIES,
    LEARNERS,
    THREADS_ENV,
    BenchmarkConfig,
    classify_sequences,
    gen_structure,
    parse_splice,
    random_structure,
    run_benchmark,
    summarize,
    train_learner,
)
from .model import random_model, sample
from .spectral import diagnostics, infer_batch, plan_observed_sets


def _params(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, _, val = item.partition("=")
        if not _:
            raise SystemExit(f"--param expects key=value, got {item!r}")
        out[key.strip().replace("-", "_")] = int(val)
    return out


def _emit(doc, out) -> None:
    text = json.dumps(doc, indent=1)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def cmd_gen(a) -> None:
    if a.family == "random":
        spec, tree = random_structure(a.structure_seed)
    else:
        spec, tree = gen_structure(a.family, _params(a.param))
    model = random_model(tree, a.seed) if a.seed is not None else None
    io.write_model(a.out, tree, model, spec)
    print(f"wrote {a.out}: {tree.n_nodes} cliques, treewidth {tree.treewidth}")


def _load_model(path):
    doc = io.read_model(path)
    if doc.model is None:
        raise SystemExit(f"{path} has no potentials; generate it with --seed")
    return doc


def cmd_sample(a) -> None:
    doc = _load_model(a.model)
    X = sample(doc.model, a.n, a.seed)
    io.write_samples(a.out, X, doc.tree.observed)
    print(f"wrote {a.n} rows to {a.out}")


def _em_config(a) -> EMConfig:
    return EMConfig(restarts=a.restarts, tol=a.tol, max_iter=a.max_iter, batch_size=a.batch_size, seed=a.seed)


def cmd_train(a) -> None:
    tree = io.read_model(a.model).tree
    _, X = io.read_samples(a.data, tree.observed)
    plan = plan_observed_sets(tree, n_minus=a.n_minus) if a.learner == "spectral" else None
    _, seconds, info = train_learner(a.learner, tree, X, plan=plan, em_config=_em_config(a), combine=a.combine)
    if a.learner == "spectral":
        io.write_params(a.out, info["params"])
    else:
        io.write_model(a.out, tree, info["model"])
    print(f"trained {a.learner} on {len(X)} rows in {seconds:.3f}s -> {a.out}")


def cmd_infer(a) -> None:
    with open(a.params, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") == "spectral-jt-params/1":
        params = io.params_from_dict(doc)
        observed = params.tree.observed
        predict = lambda X: infer_batch(params, X)
    else:
        model = io.model_from_dict(doc).model
        if model is None:
            raise SystemExit(f"{a.params} is neither learned parameters nor a model with potentials")
        observed = model.tree.observed
        predict = lambda X: np.exp(model.batched.log_likelihood(X))
    _, X = io.read_samples(a.data, observed)
    p = predict(X)
    if a.clamp:
        p = np.clip(p, 0.0, None)
    lines = ["probability"] + [repr(float(v)) for v in p]
    if a.out:
        Path(a.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        print("\n".join(lines))


def cmd_benchmark(a) -> None:
    with open(a.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    if a.out:
        raw["output"] = a.out
    config = BenchmarkConfig.from_dict(raw)
    trials = run_benchmark(config, threads=a.threads)
    for row in summarize(trials):
        print(f"N={row['N']:>7} {row['learner']:<10} median_error={row['median_error']:.4g} "
              f"mean_time={row['mean_time_seconds']:.4g}s failures={row['failures']}")
    if config.output:
        print(f"results in {config.output}")


def _read_class_file(path, fmt):
    if fmt == "splice":
        labels, _, X, skipped = parse_splice(path)
        return labels, X, skipped
    _, X = io.read_samples(path)
    return None, X, 0


def cmd_classify(a) -> None:
    if a.format == "splice":
        labels, X, skipped = _read_class_file(a.train[0], "splice")
        classes = sorted(set(labels))
        train = [X[[l == c for l in labels]] for c in classes]
        test_labels, T, skipped_test = _read_class_file(a.test, "splice")
        truth = [classes.index(l) if l in classes else -1 for l in test_labels]
    else:
        classes = [str(p) for p in a.train]
        train = [_read_class_file(p, "csv")[1] for p in a.train]
        _, T, _ = _read_class_file(a.test, "csv")
        truth = None
        skipped = skipped_test = 0
    res = classify_sequences(train, T, a.learner, k_h=a.k_h, k_o=a.k_o, test_labels=truth, em_config=_em_config(a))
    _emit({
        "classes": classes,
        "labels": [classes[k] for k in res.labels],
        "accuracy": res.accuracy,
        "skipped_records": {"train": skipped, "test": skipped_test},
    }, a.out)


def cmd_diagnostics(a) -> None:
    doc = _load_model(a.model)
    plan = plan_observed_sets(doc.tree, reference=doc.model)
    _emit(diagnostics(doc.model, plan, a.epsilon, a.delta).to_dict(), a.out)


def _add_em(p) -> None:
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=256, help="online EM mini-batch size")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spectral-jt", description="Spectral learning of latent junction trees.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="emit a structure (and random parameters with --seed)")
    p.add_argument("--family", choices=[*FAMILIES, "random"], default="hmm2")
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="length, depth, k_h, k_o")
    p.add_argument("--structure-seed", type=int, default=0, help="seed for --family random")
    p.add_argument("--seed", type=int, default=None, help="draw Dirichlet parameters with this seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("sample", help="draw observed samples from a model file")
    p.add_argument("--model", required=True)
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="learn from samples")
    p.add_argument("--model", required=True, help="model file supplying the structure")
    p.add_argument("--data", required=True)
    p.add_argument("--learner", choices=LEARNERS, default="spectral")
    p.add_argument("--n-minus", type=int, default=1, help="outside anchor sets per node (spectral)")
    p.add_argument("--combine", action="store_true", help="least-squares over all outside sets (spectral)")
    p.add_argument("--out", required=True)
    _add_em(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="joint probability of each row")
    p.add_argument("--params", required=True, help="learned parameters or a model with potentials")
    p.add_argument("--data", required=True)
    p.add_argument("--clamp", action="store_true", help="clip negative estimates at zero")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("benchmark", help="run the synthetic protocol from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, default=None, help=f"worker processes (default: ${THREADS_ENV} or all cores)")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("classify", help="one model per class; label test rows by highest probability")
    p.add_argument("--train", nargs="+", required=True, help="one sample CSV per class, or a single splice file")
    p.add_argument("--test", required=True)
    p.add_argument("--format", choices=("csv", "splice"), default="csv")
    p.add_argument("--learner", choices=LEARNERS, default="spectral")
    p.add_argument("--k-h", type=int, default=2)
    p.add_argument("--k-o", type=int, default=4)
    p.add_argument("--out")
    _add_em(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("diagnostics", help="singular-value quantities of the sample-complexity bound")
    p.add_argument("--model", required=True)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnostics)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
