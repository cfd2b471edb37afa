"""
Command-line entry point.

    python main.py gen-data --out data
    python main.py pretrain --data data --out runs/pre
    python main.py probe --data data --ckpt runs/pre/pretrain.ckpt --out runs/probe
    python main.py gradcheck

Every command writes <out>/run.json (resolved configuration, argv, seed, produced
files and headline results) and <out>/run.log. Exit codes: 0 ok, 1 usage or config
error, 2 data/parse/checkpoint error, 3 failed verification.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from core import db
from core.checkpoint import load_checkpoint, save_checkpoint
from core.config import PRESETS, ModelConfig, TrainConfig, config_hash, preset
from core.errors import ConfigError, DataError, HopGraphError, VerificationError
from core.geometry import CLASS_NAMES, load_points, normalize_unit_sphere
from core.model import export_attention, export_feature_distance, export_predicted_hops, model_forward
from core.partition import ground_truth, write_hop_csv
from core.state_store import generate_dataset, load_dataset, split_frame, synthetic_dataset
from core.training import (PROBE_FRACTIONS, SIGMA2_SWEEP, EpochRecord, Metrics, ablate_attention, ablate_sigma, evaluate,
                           gradient_check, linear_probe, metrics_frame, pretrain, probe_fractions)
from ui.formatting import DESK, fmt_acc, fmt_err, fmt_loss, fmt_metrics, fmt_occupancy, verdict

logger = logging.getLogger("hopgraph")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
FLOAT_FORMAT = "%.8g"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--preset", choices=sorted(PRESETS), help="base configuration (default desk; tiny for gradcheck)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker threads for per-sample work")
    common.add_argument("--out", default="outputs", help="output directory")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    m = common.add_argument_group("model overrides")
    m.add_argument("--layers", type=int)
    m.add_argument("--channels", type=int)
    m.add_argument("--k", type=int, help="kNN neighbours per point")
    m.add_argument("--split", type=int, help="voxel split number s")
    m.add_argument("--heads", type=int)
    m.add_argument("--sigma2", type=float, help="Gaussian kernel variance")
    m.add_argument("--lambda", dest="lambdas", type=_csv_list(int), help="per-layer hop switches, e.g. 0,1,1")
    m.add_argument("--kernel-mode", choices=["soft", "argmax"])
    m.add_argument("--loss-mode", choices=["all", "last"])
    m.add_argument("--pool", choices=["max", "max+avg"])

    t = common.add_argument_group("training overrides")
    t.add_argument("--epochs", type=int)
    t.add_argument("--probe-epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--train-fraction", type=float)
    t.add_argument("--points", type=int, help="points per synthetic cloud")

    data = _Parser(add_help=False)
    data.add_argument("--data", help="dataset directory from gen-data; synthesised in memory when omitted")
    data.add_argument("--classes", type=int, default=len(CLASS_NAMES))
    data.add_argument("--per-class", type=int, default=125)

    parser = _Parser(prog="main.py", description="Hop graph self-supervised point cloud learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset to --out")
    p.add_argument("--classes", type=int, default=len(CLASS_NAMES))
    p.add_argument("--per-class", type=int, default=125)

    p = sub.add_parser("partition", parents=[common], help="hop matrix of one XYZ cloud")
    p.add_argument("--input", required=True)
    p.add_argument("--scale", type=float, default=1.2)
    p.add_argument("--out-hops", help="hop CSV path (default <out>/hops.csv)")

    sub.add_parser("pretrain", parents=[common, data], help="self-supervised hop pretraining")

    p = sub.add_parser("probe", parents=[common, data], help="linear probe on a frozen checkpoint")
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("eval", parents=[common, data], help="hop and classification accuracy")
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("ablate-sigma", parents=[common, data], help="pretrain+probe per kernel variance")
    p.add_argument("--values", type=_csv_list(float), default=list(SIGMA2_SWEEP))

    sub.add_parser("ablate-attention", parents=[common, data], help="self-attention vs hop attention settings")

    p = sub.add_parser("probe-fractions", parents=[common, data], help="limited-data linear probing")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--fractions", type=_csv_list(float), default=list(PROBE_FRACTIONS))

    p = sub.add_parser("gradcheck", parents=[common], help="central-difference check of the hop loss")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int)

    p = sub.add_parser("export-attention", parents=[common], help="attention, hop and feature-distance CSVs")
    p.add_argument("--input", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--anchor", type=int, default=0)
    return parser


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    name = args.preset or ("tiny" if args.command == "gradcheck" else "desk")
    model_over = {k: v for k, v in dict(
        layers=args.layers, channels=args.channels, k=args.k, split=args.split, heads=args.heads,
        sigma2=args.sigma2, lambdas=args.lambdas, kernel_mode=args.kernel_mode, loss_mode=args.loss_mode,
        pool=args.pool).items() if v is not None}
    if "layers" in model_over and "lambdas" not in model_over:
        model_over["lambdas"] = (0,) + (1,) * (model_over["layers"] - 1)
    train_over = {k: v for k, v in dict(
        epochs=args.epochs, probe_epochs=args.probe_epochs, batch_size=args.batch_size, lr=args.lr,
        momentum=args.momentum, weight_decay=args.weight_decay, train_fraction=args.train_fraction,
        n_points=args.points, threads=args.threads).items() if v is not None}
    if args.no_augment:
        train_over["use_augment"] = False
    if args.seed is not None:
        model_over["seed"] = train_over["seed"] = args.seed
    return preset(name, model_over, train_over)


def setup_logging(out: Path, level: str) -> list[logging.Handler]:
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    root = logging.getLogger()
    handlers = [logging.StreamHandler(sys.stderr), logging.FileHandler(out / "run.log", mode="w")]
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    root.setLevel(level)
    return handlers


def teardown_logging(handlers: list[logging.Handler]):
    root = logging.getLogger()
    for h in handlers:
        root.removeHandler(h)
        h.close()


def _write_csv(frame: pd.DataFrame, path: Path) -> str:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path.name


def _datasets(args, train):
    if args.data:
        return load_dataset(args.data, "train"), load_dataset(args.data, "test")
    full = synthetic_dataset(args.classes, args.per_class, train.n_points, train.seed)
    frame = split_frame(full, train.seed)
    is_test = (frame["split"] == "test").to_numpy()
    return full.subset(np.flatnonzero(~is_test)), full.subset(np.flatnonzero(is_test))


def _ledger(args, out: Path, seed: int, inputs: dict, outputs: dict):
    db.log_run(out / db.LEDGER_NAME, args.command, seed, inputs, outputs)


# --- commands; each returns (files, results, effective model config)

def cmd_gen_data(args, model, train, out):
    frame = generate_dataset(out, args.classes, args.per_class, train.n_points, train.seed)
    counts = frame["split"].value_counts()
    print(f"{len(frame)} clouds, {args.classes} classes: {counts.get('train', 0)} train / {counts.get('test', 0)} test")
    return ["classes.txt", "split.csv"], {"clouds": len(frame)}, model


def cmd_partition(args, model, train, out):
    cloud = load_points(args.input)
    partition, hop = ground_truth(cloud, model.split, args.scale)
    path = Path(args.out_hops) if args.out_hops else out / "hops.csv"
    write_hop_csv(hop, path)
    print(fmt_occupancy(partition.occupancy(), model.split))
    return [str(path)], {"occupied": int(partition.nonempty_mask.sum()), "parts": partition.n_parts}, model


def cmd_pretrain(args, model, train, out):
    train_set, test_set = _datasets(args, train)
    ckpt = pretrain(train_set, model, train)
    save_checkpoint(ckpt, out / "pretrain.ckpt")
    curve = Metrics(loss_curve=[EpochRecord(**r) for r in ckpt.metadata["curve"]])
    files = ["pretrain.ckpt", _write_csv(metrics_frame(curve), out / "metrics.csv")]
    held_out = evaluate(ckpt, test_set, train.threads)
    print(f"pretrained {train.epochs} epochs: final loss {fmt_loss(ckpt.metadata['final_loss'])}")
    print(fmt_metrics(held_out.summary()))
    results = {"final_loss": ckpt.metadata["final_loss"], **held_out.summary()}
    _ledger(args, out, train.seed, {"model": model.model_dump(mode="json"), "train": train.model_dump(mode="json")}, results)
    return files, results, model


def cmd_probe(args, model, train, out):
    ckpt = load_checkpoint(args.ckpt)
    train_set, test_set = _datasets(args, train)
    probed, metrics = linear_probe(ckpt, train_set, train, test_set)
    save_checkpoint(probed, out / "probe.ckpt")
    labels = list(train_set.class_names)
    conf = pd.DataFrame(metrics.confusion, columns=labels)
    conf.insert(0, "label", labels)
    files = ["probe.ckpt", _write_csv(conf, out / "confusion.csv"),
             _write_csv(metrics_frame(metrics), out / "probe_metrics.csv")]
    print(f"probe on {metrics.n_samples}/{len(train_set)} samples: test accuracy {fmt_acc(metrics.classification_accuracy)}")
    results = {"samples": metrics.n_samples, "train_size": len(train_set), "fraction": train.train_fraction,
               "cls_acc": metrics.classification_accuracy}
    _ledger(args, out, train.seed, {"ckpt": args.ckpt, "train": train.model_dump(mode="json")}, results)
    return files, results, ckpt.config


def cmd_eval(args, model, train, out):
    ckpt = load_checkpoint(args.ckpt)
    _, test_set = _datasets(args, train)
    metrics = evaluate(ckpt, test_set, train.threads)
    row = {"hop_acc": metrics.hop_accuracy, "cls_acc": metrics.classification_accuracy, "mean_loss": metrics.mean_loss}
    row.update({f"hop_acc_layer{i}": a for i, a in enumerate(metrics.per_layer, start=1)})
    files = [_write_csv(pd.DataFrame([row]), out / "eval.csv")]
    summary = metrics.summary()
    results = {**summary, "verdict": verdict(summary, DESK), "thresholds": DESK.to_dict()}
    print(fmt_metrics(summary) + f"  |  {results['verdict']}")
    _ledger(args, out, train.seed, {"ckpt": args.ckpt}, results)
    return files, results, ckpt.config


def cmd_ablate_sigma(args, model, train, out):
    train_set, test_set = _datasets(args, train)
    table = ablate_sigma(train_set, test_set, args.values, model, train)
    print(table.to_string(index=False))
    _ledger(args, out, train.seed, {"values": args.values}, {"rows": table.to_dict("records")})
    return [_write_csv(table, out / "ablate_sigma.csv")], {"rows": len(table)}, model


def cmd_ablate_attention(args, model, train, out):
    train_set, test_set = _datasets(args, train)
    table = ablate_attention(train_set, test_set, model, train)
    print(table.to_string(index=False))
    _ledger(args, out, train.seed, {}, {"rows": table.to_dict("records")})
    return [_write_csv(table, out / "ablate_attention.csv")], {"rows": len(table)}, model


def cmd_probe_fractions(args, model, train, out):
    ckpt = load_checkpoint(args.ckpt)
    train_set, test_set = _datasets(args, train)
    table = probe_fractions(ckpt, train_set, test_set, args.fractions, train)
    print(table.to_string(index=False))
    _ledger(args, out, train.seed, {"ckpt": args.ckpt, "fractions": args.fractions},
            {"rows": table.to_dict("records")})
    return [_write_csv(table, out / "probe_fractions.csv")], {"rows": table.to_dict("records")}, ckpt.config


def cmd_gradcheck(args, model, train, out):
    err = gradient_check(model, n_points=train.n_points, seed=model.seed, eps=args.eps, max_coords=args.max_coords)
    print(f"max relative error {fmt_err(err)} (threshold {fmt_err(DESK.gradcheck_max_error)})")
    if err >= DESK.gradcheck_max_error:
        raise VerificationError(f"gradient check failed: {fmt_err(err)} >= {fmt_err(DESK.gradcheck_max_error)}")
    return [], {"max_rel_error": err}, model


def cmd_export_attention(args, model, train, out):
    ckpt = load_checkpoint(args.ckpt)
    cloud = normalize_unit_sphere(load_points(args.input))
    partition, hop = ground_truth(cloud, ckpt.config.split, ckpt.config.scale_factor)
    output = model_forward(cloud, partition, hop, ckpt.config, ckpt.param_store(), mode="eval")
    files = [_write_csv(export_attention(output), out / "attention.csv"),
             _write_csv(export_predicted_hops(output, hop), out / "predicted_hops.csv"),
             _write_csv(export_feature_distance(output, args.anchor), out / "feature_distance.csv")]
    print(f"exported {len(output.attention)} layers of attention over {int(partition.nonempty_mask.sum())} parts")
    return files, {"loss": output.loss}, ckpt.config


COMMANDS = {
    "gen-data": cmd_gen_data,
    "partition": cmd_partition,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "ablate-sigma": cmd_ablate_sigma,
    "ablate-attention": cmd_ablate_attention,
    "probe-fractions": cmd_probe_fractions,
    "gradcheck": cmd_gradcheck,
    "export-attention": cmd_export_attention,
}


def write_manifest(out: Path, argv, args, model: ModelConfig, train: TrainConfig, files, results):
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "preset": args.preset,
        "seed": train.seed,
        "model_config": model.model_dump(mode="json"),
        "train_config": train.model_dump(mode="json"),
        "config_hash": config_hash(model),
        "files": files,
        "results": results,
    }
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_DATA
    handlers = setup_logging(out, args.log_level)
    try:
        model, train = resolve_configs(args)
        files, results, used = COMMANDS[args.command](args, model, train, out)
        write_manifest(out, argv, args, used, train, files, results)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except HopGraphError as exc:
        logger.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        teardown_logging(handlers)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
