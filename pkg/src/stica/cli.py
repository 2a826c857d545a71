"""Command-line entry points: pretrain / probe / retrieve / bench / heatmap.

All artifacts land under the output directory (--out, else $STICA_OUT/<command>,
else runs/<command>), together with an echo of the fully resolved
configuration. Exit codes: 0 ok, 2 config, 3 data, 4 numeric, 5 io.
"""

import argparse
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="stica",
        description="Self-supervised audio-visual pretraining on synthetic data, "
                    "with feature-space cropping and transformer temporal pooling.")
    parser.add_argument("command", choices=["pretrain", "probe", "retrieve",
                                            "bench", "heatmap"])
    parser.add_argument("--config", metavar="PATH", default=None,
                        help="key = value configuration file")
    parser.add_argument("--out", metavar="DIR", default=None,
                        help="output directory (default $STICA_OUT/<command>)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    return parser


def _collect_overrides(extra):
    """Turn leftover `--key value` pairs into override entries."""
    from .config import ConfigError

    overrides = {}
    i = 0
    while i < len(extra):
        flag = extra[i]
        if not flag.startswith("--") or i + 1 >= len(extra):
            raise ConfigError(f"expected `--key value` pairs, got {' '.join(extra[i:])!r}")
        overrides[flag[2:]] = extra[i + 1]
        i += 2
    return overrides


def _resolve_out(command, out_flag):
    if out_flag:
        return out_flag
    root = os.environ.get("STICA_OUT", "runs")
    return os.path.join(root, command)


def _load_model_from(config, path):
    from .training import load_training_checkpoint

    model = config.build_model()
    if path:
        load_training_checkpoint(path, model)
    return model


def _cmd_pretrain(config):
    import numpy as np

    from .training import (SGD, load_training_checkpoint, run_pretraining)

    dataset = config.data_spec()
    from .data import build_dataset

    dataset = build_dataset(dataset)
    model = config.build_model()
    v = config.values
    optimizer = SGD(model.named_parameters(), momentum=v["train.momentum"],
                    weight_decay=v["train.weight_decay"])
    settings = config.train_settings()
    steps_per_epoch = len(dataset.train) // settings.batch_size
    if steps_per_epoch < 1:
        from .config import DataError

        raise DataError(f"train split of {len(dataset.train)} instances cannot fill "
                        f"a batch of {settings.batch_size}")
    schedule = config.schedule(steps_per_epoch)
    rng = np.random.default_rng([v["seed"], 1])
    digest = config.digest()
    start_epoch = start_step = 0
    if v["pretrain.resume"]:
        step, epoch, stored = load_training_checkpoint(
            v["pretrain.resume"], model, optimizer, rng)
        if stored != digest:
            from .config import ConfigError

            raise ConfigError("pretrain.resume checkpoint was written by a different "
                              "configuration (config digest mismatch)")
        start_epoch, start_step = epoch, step
    metrics = run_pretraining(
        model, dataset, optimizer, schedule, config.loss_weights(), config.crop_plan(),
        settings, rng, out_dir=config.out_dir, digest=digest,
        start_epoch=start_epoch, start_step=start_step,
        log=lambda row: print(f"step {row.step} epoch {row.epoch} "
                              f"loss {row.loss_total:.4f}"))
    if metrics:
        print(f"finished: {len(metrics)} steps, final loss {metrics[-1].loss_total:.4f}")
    return EXIT_OK


def _cmd_probe(config):
    import numpy as np

    from .data import build_dataset
    from .evaluation import append_results_csv, finetune_probe

    dataset = build_dataset(config.data_spec())
    v = config.values
    model = _load_model_from(config, v["probe.checkpoint"])
    steps_per_epoch = max(1, len(dataset.train) // v["probe.batch_size"])
    acc = finetune_probe(
        dataset, model, mode=v["probe.mode"],
        use_feature_crops=v["probe.use_feature_crops"],
        plan=config.crop_plan() if v["probe.use_feature_crops"] else None,
        epochs=v["probe.epochs"], batch_size=v["probe.batch_size"],
        schedule=config.probe_schedule(steps_per_epoch),
        momentum=v["probe.momentum"], weight_decay=v["probe.weight_decay"],
        rng=np.random.default_rng([v["seed"], 2]))
    append_results_csv(os.path.join(config.out_dir, "results.csv"),
                       [("probe_accuracy", v["probe.mode"], acc)])
    print(f"probe accuracy ({v['probe.mode']}): {acc:.4f}")
    return EXIT_OK


def _cmd_retrieve(config):
    from .config import parse_int_list
    from .data import build_dataset
    from .evaluation import (append_results_csv, build_retrieval_index,
                             extract_video_embedding, retrieval_recall)

    import numpy as np

    dataset = build_dataset(config.data_spec())
    v = config.values
    model = _load_model_from(config, v["retrieve.checkpoint"])
    num_clips = v["retrieve.num_clips"]
    index = build_retrieval_index(dataset.train, model, num_clips)
    queries = np.stack([extract_video_embedding(i.video, model, num_clips)
                        for i in dataset.test])
    qlabels = np.array([i.class_id for i in dataset.test])
    ks = parse_int_list(v["retrieve.ks"])
    recalls = retrieval_recall(queries, qlabels, index, ks=ks)
    append_results_csv(os.path.join(config.out_dir, "results.csv"),
                       [("recall", k, recalls[k]) for k in ks])
    for k in ks:
        print(f"recall@{k}: {recalls[k]:.4f}")
    return EXIT_OK


def _cmd_bench(config):
    from .config import parse_int_list
    from .evaluation import BENCH_HEADER, crop_cost_benchmark

    v = config.values
    model = config.build_model()
    rows = crop_cost_benchmark(
        model, k_list=tuple(parse_int_list(v["bench.k_list"])),
        repeats=v["bench.repeats"], batch_size=v["bench.batch_size"],
        crop_size=v["bench.crop_size"], warmup=v["bench.warmup"], seed=v["seed"])
    path = os.path.join(config.out_dir, "bench.csv")
    with open(path, "w") as f:
        f.write(BENCH_HEADER + "\n")
        for row in rows:
            f.write(row.csv_row() + "\n")
    for row in rows:
        print(f"{row.strategy} k={row.k}: {row.mean_ms:.1f} ms "
              f"(+/- {row.std_ms:.1f}), {row.peak_bytes} peak bytes")
    print(f"report: {path} (threads = {v['threads']})")
    return EXIT_OK


def _cmd_heatmap(config):
    from .data import build_dataset
    from .evaluation import av_heatmap, write_heatmap_pgm

    dataset = build_dataset(config.data_spec())
    v = config.values
    model = _load_model_from(config, v["heatmap.checkpoint"])
    split = dataset.test if v["heatmap.split"] == "test" else dataset.train
    start = v["heatmap.index"]
    count = v["heatmap.count"]
    if start < 0 or start + count > len(split):
        from .config import DataError

        raise DataError(f"heatmap.index {start} (+{count}) outside the "
                        f"{v['heatmap.split']} split of {len(split)} instances")
    for inst in split[start : start + count]:
        scores = av_heatmap(inst.video, inst.audio, model)
        path = os.path.join(config.out_dir, f"heatmap_{inst.instance_id:06d}.pgm")
        write_heatmap_pgm(path, scores)
        print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "retrieve": _cmd_retrieve,
    "bench": _cmd_bench,
    "heatmap": _cmd_heatmap,
}


def dispatch(config):
    """Run the selected pipeline; artifacts land under config.out_dir."""
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "config.resolved"), "w") as f:
        f.write(config.echo_text())
    return _COMMANDS[config.command](config)


def main(argv=None):
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)

    threads = args.threads
    if threads is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMBA_NUM_THREADS"):
            os.environ[var] = str(threads)

    from .config import ConfigError, DataError, parse_config

    try:
        overrides = _collect_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        if threads is not None:
            overrides["threads"] = str(threads)
        config = parse_config(args.config, overrides, command=args.command)
        config.out_dir = _resolve_out(args.command, args.out)
        return dispatch(config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - map to the documented exit codes
        from .evaluation import BenchmarkError
        from .io_binary import CheckpointError
        from .tensor import NumericError

        if isinstance(e, BenchmarkError):
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(e, NumericError):
            print(f"numeric error: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(e, (CheckpointError, OSError)):
            print(f"io error: {e}", file=sys.stderr)
            return EXIT_IO
        raise
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
