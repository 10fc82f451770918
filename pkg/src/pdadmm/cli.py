"""Command-line front end: train, benchmark, certify, report.

A JSON config file is the source of truth; flags override individual
fields. Exit codes: 0 success, 1 failed certificates, 2 invalid config or
malformed input, 3 numeric abort.
"""

import os

# Layer-level parallelism is this package's own concurrency; nested BLAS
# threading would distort speedup measurements and can perturb bitwise
# reproducibility. Users can still override by exporting a value.
for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import json
import logging
import sys
import tempfile

import numpy as np

from . import data as data_mod
from .diagnostics import initial_metrics
from .state import HyperParams, NetworkSpec, init_state, save_checkpoint
from .trainer import NonFiniteError, TrainConfig, benchmark, train

logger = logging.getLogger("pdadmm")

EXIT_OK = 0
EXIT_CERT_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_NUMERIC = 3

BENCHMARK_CSV_HEADER = ["layers", "width", "workers", "serial_mean_s", "parallel_mean_s", "speedup"]

_TOP_KEYS = {
    "seed",
    "network",
    "hyperparams",
    "train",
    "dataset",
    "metrics_path",
    "checkpoint_path",
    "benchmark",
}
_NETWORK_KEYS = {"layer_widths", "activation", "loss"}
_HP_KEYS = {
    "rho",
    "nu",
    "tau_init",
    "theta_init",
    "backtrack_growth",
    "backtrack_shrink",
    "fista_max_iters",
    "fista_tol",
    "lipschitz_S",
    "subgrad_bound_M",
}
_TRAIN_KEYS = {
    "epochs",
    "mode",
    "workers",
    "growth_schedule",
    "check_certificates",
    "no_timing",
    "progressive",
    "growth_seed",
}
_DATASET_KEYS = {
    "kind",
    "images",
    "labels",
    "path",
    "label_column",
    "downsample",
    "classes",
    "max_samples",
    "samples",
    "data_seed",
    "cache_dir",
}
_BENCH_KEYS = {"layers", "widths", "workers", "repetitions", "samples", "classes", "output_csv"}


def _check_keys(section, allowed, where):
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path):
    """Parse and structurally validate a config file; unknown keys are
    rejected outright so typos cannot silently fall back to defaults."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config root must be an object")
    _check_keys(cfg, _TOP_KEYS, "config")
    for name, keys in (
        ("network", _NETWORK_KEYS),
        ("hyperparams", _HP_KEYS),
        ("train", _TRAIN_KEYS),
        ("dataset", _DATASET_KEYS),
        ("benchmark", _BENCH_KEYS),
    ):
        if name in cfg:
            if not isinstance(cfg[name], dict):
                raise ValueError(f"config section {name!r} must be an object")
            _check_keys(cfg[name], keys, f"config section {name!r}")
    return cfg


def build_dataset(section, seed):
    """Construct the Dataset named by the config's dataset section."""
    kind = section.get("kind")
    max_samples = section.get("max_samples")
    if kind == "idx":
        images, labels = data_mod.load_idx(section["images"], section["labels"])
        return data_mod.preprocess(
            images,
            labels,
            downsample=section.get("downsample", False),
            classes=section.get("classes"),
            max_samples=max_samples,
        )
    if kind == "csv":
        dataset = data_mod.load_csv(section["path"], section["label_column"])
        if max_samples is not None:
            dataset = data_mod.Dataset(
                features=dataset.features[:, :max_samples],
                labels_onehot=dataset.labels_onehot[:, :max_samples],
                class_names=dataset.class_names,
            )
        return dataset
    if kind == "synthetic":
        n = section.get("samples", 1000)
        data_seed = section.get("data_seed", seed)
        images, labels = data_mod.synthetic_digits(n, data_seed)
        cache_dir = section.get("cache_dir")
        if cache_dir is None:
            cache_dir = tempfile.mkdtemp(prefix="pdadmm-data-")
        os.makedirs(cache_dir, exist_ok=True)
        images_path = os.path.join(cache_dir, f"synthetic-{n}-{data_seed}-images.idx")
        labels_path = os.path.join(cache_dir, f"synthetic-{n}-{data_seed}-labels.idx")
        if not (os.path.exists(images_path) and os.path.exists(labels_path)):
            data_mod.save_idx(images, labels, images_path, labels_path)
        images, labels = data_mod.load_idx(images_path, labels_path)
        return data_mod.preprocess(
            images,
            labels,
            downsample=section.get("downsample", True),
            classes=section.get("classes"),
            max_samples=max_samples,
        )
    raise ValueError(f"dataset kind must be 'idx', 'csv' or 'synthetic', got {kind!r}")


def _resolve_workers(args, train_section):
    if getattr(args, "workers", None) is not None:
        return args.workers
    if "workers" in train_section:
        return int(train_section["workers"])
    env = os.environ.get("PDADMM_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"PDADMM_THREADS must be an integer, got {env!r}") from None
    return 1


def _build_train_setup(args):
    cfg = load_config(args.config)
    for section in ("network", "hyperparams", "train", "dataset"):
        if section not in cfg:
            raise ValueError(f"config is missing the {section!r} section")

    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    hp_kwargs = dict(cfg["hyperparams"])
    if args.rho is not None:
        hp_kwargs["rho"] = args.rho
    if args.nu is not None:
        hp_kwargs["nu"] = args.nu
    hp = HyperParams(**hp_kwargs)

    spec = NetworkSpec(
        layer_widths=tuple(cfg["network"]["layer_widths"]),
        activation=cfg["network"].get("activation", "relu"),
        loss=cfg["network"].get("loss", "softmax_cross_entropy"),
    )
    if spec.activation == "relu" and (hp.lipschitz_S != 1.0 or hp.subgrad_bound_M != 1.0):
        raise ValueError("relu requires lipschitz_S = subgrad_bound_M = 1")

    tsec = cfg["train"]
    growth_schedule = tuple(tuple(item) for item in tsec.get("growth_schedule", ()))
    if tsec.get("progressive"):
        if growth_schedule:
            raise ValueError("give either 'progressive' or an explicit growth_schedule")
        hidden = spec.layer_widths[1:-1]
        if len(hidden) > 5:
            if len(set(hidden)) != 1:
                raise ValueError("progressive training needs uniform hidden widths")
            growth_schedule = ((10, len(hidden) - 5),)
            spec = NetworkSpec(
                layer_widths=(spec.layer_widths[0],) + hidden[:5] + (spec.layer_widths[-1],),
                activation=spec.activation,
                loss=spec.loss,
            )

    config = TrainConfig(
        epochs=args.epochs if args.epochs is not None else int(tsec["epochs"]),
        mode=args.mode if args.mode is not None else tsec.get("mode", "serial"),
        workers=_resolve_workers(args, tsec),
        growth_schedule=growth_schedule,
        check_certificates=bool(tsec.get("check_certificates", True)),
        metrics_path=args.metrics if args.metrics is not None else cfg.get("metrics_path"),
        no_timing=bool(args.no_timing or tsec.get("no_timing", False)),
        growth_seed=int(tsec.get("growth_seed", seed)),
    )
    dataset = build_dataset(cfg["dataset"], seed)
    checkpoint_path = (
        args.checkpoint if args.checkpoint is not None else cfg.get("checkpoint_path")
    )
    return cfg, spec, hp, config, dataset, seed, checkpoint_path


def cmd_train(args):
    try:
        cfg, spec, hp, config, dataset, seed, checkpoint_path = _build_train_setup(args)
        state = init_state(spec, dataset, seed)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    try:
        state, history = train(state, config, hp)
    except (NonFiniteError, FloatingPointError) as exc:
        report = getattr(exc, "report", {})
        print(f"numeric abort: {exc}", file=sys.stderr)
        if report:
            print(json.dumps(report), file=sys.stderr)
        return EXIT_NUMERIC

    final = history[-1] if history else initial_metrics(state, hp)
    summary = {
        "epochs_run": len(history),
        "final_F": final.objective,
        "final_lagrangian": final.lagrangian,
        "final_residual_sq": final.residual_sq_total,
        "final_accuracy": final.accuracy,
    }
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
        summary["checkpoint"] = checkpoint_path
    print(json.dumps(summary))

    if args.certify:
        if not config.metrics_path:
            print("error: --certify needs a metrics path", file=sys.stderr)
            return EXIT_BAD_CONFIG
        records = _read_records(config.metrics_path)
        results = audit_records(records, rho=hp.rho, nu=hp.nu, lipschitz_S=hp.lipschitz_S)
        _print_audit(results)
        if not all(passed for _, passed, _ in results):
            return EXIT_CERT_FAILED
    return EXIT_OK


def cmd_benchmark(args):
    try:
        cfg = load_config(args.config)
        if "hyperparams" not in cfg or "benchmark" not in cfg:
            raise ValueError("config needs 'hyperparams' and 'benchmark' sections")
        hp = HyperParams(**cfg["hyperparams"])
        bench = cfg["benchmark"]
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        output_csv = args.output if args.output is not None else bench.get("output_csv")
        rows = benchmark(
            layer_counts=[int(v) for v in bench["layers"]],
            widths=[int(v) for v in bench["widths"]],
            hp=hp,
            repetitions=int(bench.get("repetitions", 3)),
            workers_list=[int(v) for v in bench.get("workers", [1])],
            n_samples=int(bench.get("samples", 1000)),
            n_classes=int(bench.get("classes", 10)),
            seed=seed,
        )
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    if output_csv:
        with open(output_csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(BENCHMARK_CSV_HEADER)
            for row in rows:
                writer.writerow([row[key] for key in BENCHMARK_CSV_HEADER])
    for row in rows:
        print(
            f"layers={row['layers']} width={row['width']} workers={row['workers']} "
            f"serial={row['serial_mean_s']:.4f}s parallel={row['parallel_mean_s']:.4f}s "
            f"speedup={row['speedup']:.2f}"
        )
    return EXIT_OK


def _read_records(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {line_no}: malformed record: {exc}") from exc
            if not isinstance(record, dict) or "lagrangian" not in record:
                raise ValueError(f"{path}: line {line_no}: not a metrics record")
            records.append(record)
    if not records:
        raise ValueError(f"{path}: no metrics records")
    return records


def audit_records(records, rho=None, nu=None, lipschitz_S=1.0):
    """Replay the convergence certificates over recorded metrics.

    Returns a list of (name, passed, detail) triples covering guaranteed
    descent, the running-minimum rate statement, the dual identity,
    vanishing steps, and finiteness. When penalty parameters are given,
    the recorded descent constants are cross-checked against them.
    """
    results = []
    certs = [r.get("certificates") for r in records]
    if any(c is None for c in certs):
        raise ValueError("certificates were not recorded for this run; "
                         "re-train with check_certificates enabled")

    descent_ok = True
    detail = ""
    prev_lag = None
    for i, (rec, cert) in enumerate(zip(records, certs), start=1):
        lhs = cert["lagrangian_pre"] - rec["lagrangian"]
        if prev_lag is not None and abs(cert["lagrangian_pre"] - prev_lag) > 1e-9 * max(
            1.0, abs(prev_lag)
        ):
            descent_ok = False
            detail = f"record {i}: lagrangian chain broken"
            break
        if not cert["satisfied"] or lhs < cert["rhs"] - 1e-8:
            descent_ok = False
            detail = f"record {i}: drop {lhs:.3e} below bound {cert['rhs']:.3e}"
            break
        prev_lag = rec["lagrangian"]
    results.append(("descent", descent_ok, detail or "drop >= certified bound at every epoch"))

    c_seq = [r.get("c_k") for r in records]
    rate_ok = all(c is not None for c in c_seq) and all(
        b <= a for a, b in zip(c_seq, c_seq[1:])
    )
    detail = "c_k nonincreasing"
    if rate_ok and len(records) >= 20:
        n = len(records)
        m = max(1, n // 10)
        if n * c_seq[n - 1] >= m * c_seq[m - 1]:
            rate_ok = False
            detail = f"k*c_k did not shrink: k={m}: {m * c_seq[m - 1]:.3e}, k={n}: {n * c_seq[n - 1]:.3e}"
    elif rate_ok:
        detail += " (run too short for the k*c_k trend check)"
    results.append(("rate", rate_ok, detail))

    worst_dual = max(c["dual_identity_max"] for c in certs)
    results.append(
        ("dual-identity", worst_dual <= 1e-8, f"max violation {worst_dual:.3e}")
    )

    if len(records) >= 20:
        head = float(np.mean([c["rhs"] for c in certs[:10]]))
        tail = float(np.mean([c["rhs"] for c in certs[-10:]]))
        results.append(
            ("steps-vanish", tail < head, f"mean step quantity {head:.3e} -> {tail:.3e}")
        )

    finite = all(
        np.isfinite(r["F"]) and np.isfinite(r["lagrangian"]) for r in records
    )
    results.append(("bounded", finite, "objective and Lagrangian finite throughout"))

    if rho is not None and nu is not None:
        s2 = lipschitz_S**2
        c1 = 0.5 * nu - 2.0 * nu**2 * s2 / rho
        c2 = 0.5 * rho - 2.0 * nu**2 / rho - 0.5 * nu
        match = all(
            abs(c["C1"] - c1) <= 1e-12 * max(1.0, abs(c1))
            and abs(c["C2"] - c2) <= 1e-12 * max(1.0, abs(c2))
            for c in certs
        )
        results.append(("constants", match, "recorded descent constants match parameters"))
    return results


def _print_audit(results):
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")


def cmd_certify(args):
    try:
        records = _read_records(args.metrics)
        results = audit_records(records, rho=args.rho, nu=args.nu)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    _print_audit(results)
    return EXIT_OK if all(passed for _, passed, _ in results) else EXIT_CERT_FAILED


def cmd_report(args):
    from . import report as report_mod

    try:
        written = []
        if args.metrics:
            records = _read_records(args.metrics)
            written += report_mod.render_metrics_figures(records, args.out_dir)
        if args.benchmark_csv:
            written += report_mod.render_benchmark_figure(args.benchmark_csv, args.out_dir)
        if not written:
            raise ValueError("nothing to report: give --metrics and/or --benchmark-csv")
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    for path in written:
        print(path)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pdadmm",
        description="Layer-parallel ADMM training for feed-forward networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a network and emit metrics")
    p_train.add_argument("--config", required=True, help="JSON config path")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--rho", type=float)
    p_train.add_argument("--nu", type=float)
    p_train.add_argument("--workers", type=int)
    p_train.add_argument("--mode", choices=["serial", "parallel"])
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--metrics", help="metrics JSONL output path")
    p_train.add_argument("--checkpoint", help="final checkpoint path")
    p_train.add_argument("--no-timing", action="store_true", dest="no_timing")
    p_train.add_argument(
        "--certify", action="store_true", help="audit the certificates after training"
    )
    p_train.set_defaults(func=cmd_train)

    p_bench = sub.add_parser("benchmark", help="serial-vs-parallel speedup grid")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--seed", type=int)
    p_bench.add_argument("--output", help="speedup CSV path")
    p_bench.set_defaults(func=cmd_benchmark)

    p_cert = sub.add_parser("certify", help="replay certificates over recorded metrics")
    p_cert.add_argument("--metrics", required=True)
    p_cert.add_argument("--rho", type=float)
    p_cert.add_argument("--nu", type=float)
    p_cert.set_defaults(func=cmd_certify)

    p_report = sub.add_parser("report", help="render figures from recorded outputs")
    p_report.add_argument("--metrics")
    p_report.add_argument("--benchmark-csv", dest="benchmark_csv")
    p_report.add_argument("--out-dir", required=True)
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
