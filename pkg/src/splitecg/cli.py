"""Command line: ``splitecg {preprocess,train,assess,sweep}``.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

from . import ecg
from . import mitigation as Mi
from . import model as M
from . import privacy as Pv
from . import protocol as P
from . import session as S
from . import training as Tr

log = logging.getLogger("splitecg")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or unusable input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _model_config(args) -> M.ModelConfig:
    if args.model == "two-layer":
        return M.build_two_layer()
    if args.model == "three-layer":
        return M.build_three_layer()
    if args.depth is None:
        raise UsageError("--model depth-k needs --depth")
    try:
        return M.build_depth_k(args.depth)
    except M.ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _pool_sizes(beats: list[ecg.Beat]) -> dict[str, int]:
    have = {name: sum(1 for b in beats if b.label == i) for i, name in enumerate(ecg.CLASSES)}
    sizes = {}
    for name, want in ecg.POOL_SIZES.items():
        if have[name] < want:
            log.warning("class %s: only %d of %d beats available, using all of them", name, have[name], want)
        sizes[name] = min(want, have[name])
    return sizes


def _dataset_from_dir(directory: str, seed: int) -> ecg.BeatDataset:
    if not os.path.isdir(directory):
        raise UsageError(f"{directory}: not a directory")
    if not os.listdir(directory) or not [f for f in os.listdir(directory) if f.endswith(".hea")]:
        raise UsageError(f"{directory}: no WFDB records found")
    beats, stats = ecg.load_beats(directory)
    if stats.missing:
        log.warning("missing records: %s", " ".join(stats.missing))
    if not beats:
        raise UsageError(f"{directory}: no usable beats")
    return ecg.build_dataset(beats, seed, _pool_sizes(beats))


def _load_dataset(args) -> ecg.BeatDataset:
    if getattr(args, "synthetic", None):
        return ecg.generate_synthetic(args.synthetic, args.seed)
    path = ecg.dataset_root(args.data)
    if path is None:
        raise UsageError("no dataset: pass --data, set SPLITECG_DATA or use --synthetic N")
    if os.path.isfile(path):
        try:
            return ecg.load_cache(path)
        except (ecg.DatasetError, OSError) as exc:
            raise UsageError(str(exc)) from exc
    return _dataset_from_dir(path, args.seed)


def _sync(args, n_train: int) -> Tr.SyncConfig:
    return Tr.SyncConfig(seed=args.seed, learning_rate=args.lr, batch_size=args.batch,
                         total_batches=Tr.num_batches(n_train, args.batch) if n_train else 1,
                         epochs=args.epochs, exact=args.exact)


def _noise(args, seed_offset: int = 0):
    if args.epsilon is None:
        return None
    return Mi.LaplaceMechanism(Mi.DpConfig(args.epsilon, args.sensitivity, args.seed + seed_offset))


class _MetricsWriter:
    """Appends ``epoch,loss,test_accuracy`` rows as epochs finish."""

    def __init__(self, path: str):
        self.path = path
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "loss", "test_accuracy"])

    def __call__(self, entry: Tr.EpochLog, *_):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([entry.epoch, f"{entry.loss:.10g}", f"{entry.test_accuracy:.10g}"])
        log.info("epoch %d loss %.4f test accuracy %.4f", entry.epoch, entry.loss, entry.test_accuracy)


def _flat_params(params: dict[int, list[np.ndarray]]) -> list[np.ndarray]:
    return [p for i in sorted(params) for p in params[i]]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    if args.synthetic:
        dataset = ecg.generate_synthetic(args.synthetic, args.seed)
    else:
        directory = ecg.dataset_root(args.data)
        if directory is None:
            raise UsageError("no WFDB directory: pass --data or set SPLITECG_DATA")
        dataset = _dataset_from_dir(directory, args.seed)
    out = args.out or "beats.cache"
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    ecg.save_cache(out, dataset)
    train, test = dataset.counts("train"), dataset.counts("test")
    for name in ecg.CLASSES:
        print(f"{name}\ttrain {train[name]}\ttest {test[name]}\ttotal {train[name] + test[name]}")
    print(f"total {len(dataset.train) + len(dataset.test)}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.role in ("client", "server") and not args.addr:
        raise UsageError(f"--role {args.role} needs --addr host:port")
    if args.role == "none" and args.addr:
        raise UsageError("--addr only applies to --role client or server")
    config = _model_config(args)
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "model.cfg"), "w") as fh:
        fh.write(config.to_text())
    metrics = _MetricsWriter(os.path.join(out, "metrics.csv"))

    if args.role == "server":
        result = S.run_server(args.addr, config, _sync(args, 0), checkpoint_dir=out,
                              resume=args.resume, on_epoch=metrics)
        print(f"server finished {result.epochs} epochs, {result.batches} batches")
        return EXIT_OK

    dataset = _load_dataset(args)
    train, test = dataset.arrays("train"), dataset.arrays("test")
    if len(train[0]) == 0:
        raise UsageError("training split is empty")
    if args.role == "client":
        result = S.run_client(args.addr, config, train, test, args.epochs, noise=_noise(args),
                              checkpoint_dir=out, resume=args.resume, on_epoch=metrics)
        final = result.history[-1].test_accuracy if result.history else float("nan")
    else:
        sync = _sync(args, len(train[0]))
        if args.epsilon is None and not args.split_local:
            result = Tr.train_nonsplit(config, train, test, sync, on_epoch=metrics)
        else:
            result = Tr.train_split_local(config, train, test, sync, noise=_noise(args), on_epoch=metrics)
        P.save_checkpoint(os.path.join(out, "model.ckpt"), _flat_params(result.params), args.epochs)
        final = result.final_accuracy
    print(f"final test accuracy {final:.4f}")
    return EXIT_OK


def _client_from_checkpoint(config: M.ModelConfig, path: str) -> M.ModelPart:
    """Client part A from a full-model or client-only checkpoint."""
    try:
        ckpt = P.load_checkpoint(path)
    except (P.CheckpointError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    client, server = M.build_parts(config, 0)
    client_shapes = [p.shape for p in client.parameters()]
    full_shapes = client_shapes + [p.shape for p in server.parameters()]
    got = [p.shape for p in ckpt.params]
    if got not in (client_shapes, full_shapes):
        raise UsageError(f"checkpoint {path} does not fit model {config.name}: expected shapes "
                         f"{client_shapes} (client) or {full_shapes} (full), got {got}")
    for dst, src in zip(client.parameters(), ckpt.params):
        dst[...] = src
    return client


def cmd_assess(args) -> int:
    if not args.checkpoint:
        raise UsageError("assess needs --checkpoint")
    config = _model_config(args)
    client = _client_from_checkpoint(config, args.checkpoint)
    dataset = _load_dataset(args)
    x, y = dataset.arrays("test")
    if len(x) == 0:
        raise UsageError("test split is empty")
    idx = Pv.sample_indices(len(x), args.samples, args.seed)
    noise = _noise(args, 7919)
    report = Pv.channel_leakage(client, x[idx], tap=args.tap, noise=noise,
                                description={"model": config.name, "seed": args.seed})
    out = args.out or "assess"
    os.makedirs(out, exist_ok=True)
    report.to_csv(os.path.join(out, "leakage.csv"))
    firsts = {}
    for i, label in enumerate(y):
        firsts.setdefault(int(label), x[i, 0])
    Pv.export_visual(client, firsts, out, tap=args.tap)
    print(f"max dCor {report.max_dcor:.4f} mean dCor {report.mean_dcor:.4f} min DTW {report.min_dtw:.4f}")
    print(f"total {len(report.channels)} channels, {len(idx)} samples")
    return EXIT_OK


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args) -> int:
    dataset = _load_dataset(args)
    if args.fraction < 1.0:
        dataset = dataset.subset(args.fraction, args.seed)
    seeds = [int(s) for s in args.seeds.split(",")]
    settings = Mi.SweepSettings(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                                sample_count=args.samples, tap=args.tap, exact=args.exact,
                                sensitivity_policy=args.sensitivity)
    if args.kind == "depth":
        axis = [int(v) for v in _float_list(args.axis)] if args.axis else list(Mi.DEPTHS)
        results = Mi.depth_sweep(axis, seeds, dataset, settings, args.workers)
    else:
        axis = _float_list(args.axis) if args.axis else list(Mi.EPSILONS)
        results = Mi.dp_sweep(axis, seeds, dataset, settings, args.workers)
    out = args.out or f"sweep_{args.kind}"
    Mi.write_sweep_csvs(results, out)
    for s in Mi.summarize(results):
        print(f"{args.kind} {s.axis:g}: accuracy {s.accuracy_mean:.4f}±{s.accuracy_std:.4f} "
              f"max dCor {s.max_dcor_mean:.4f}±{s.max_dcor_std:.4f} mean dCor {s.mean_dcor:.4f}")
    failed = [r for r in results if r.error]
    print(f"total {len(results)} runs, {len(failed)} failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0 or math.isinf(value):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitecg", description="Split learning on ECG beats")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training=True):
        p.add_argument("--data", help="WFDB directory or beat cache (default: $SPLITECG_DATA)")
        p.add_argument("--synthetic", type=_positive_int, metavar="N",
                       help="use N synthetic beats per class and split instead of --data")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        if training:
            p.add_argument("--model", choices=["two-layer", "three-layer", "depth-k"], default="two-layer")
            p.add_argument("--depth", type=int)
            p.add_argument("--epochs", type=_positive_int, default=400)
            p.add_argument("--batch", type=_positive_int, default=32)
            p.add_argument("--lr", type=_positive_float, default=0.001)
            p.add_argument("--exact", action="store_true", help="float64 on the wire")
            p.add_argument("--epsilon", type=_positive_float, help="Laplace noise on the split activations")
            p.add_argument("--sensitivity", choices=[Mi.PER_CHANNEL_RANGE, Mi.FIXED_UNIT],
                           default=Mi.PER_CHANNEL_RANGE)

    p = sub.add_parser("preprocess", help="WFDB records to a beat cache")
    common(p, training=False)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="non-split or split training")
    common(p)
    p.add_argument("--role", choices=["none", "client", "server"], default="none")
    p.add_argument("--addr", help="host:port of the server (listen address for --role server)")
    p.add_argument("--split-local", action="store_true",
                   help="run the split procedure in one process (no sockets)")
    p.add_argument("--resume", help="checkpoint to resume from (split roles)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("assess", help="leakage of a trained client part")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=_positive_int)
    p.add_argument("--tap", choices=["wire", "prepool"], default="wire")
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("sweep", help="client-depth or DP sweep")
    common(p)
    p.add_argument("--kind", choices=["depth", "dp"], required=True)
    p.add_argument("--axis", help="comma separated depths or epsilons")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--samples", type=_positive_int)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--tap", choices=["wire", "prepool"], default="wire")
    p.set_defaults(func=cmd_sweep, epochs=50)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ecg.DatasetError, M.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (S.ProtocolError, S.SessionAborted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, S.SessionAborted) and exc.checkpoint:
            print(f"resume with --resume {exc.checkpoint}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # last-resort guard keeps the exit-code contract
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
