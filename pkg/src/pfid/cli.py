"""Command-line front end: ``pfid {gen-data,train,embed,eval,cluster,transfer,replay}``.

Every command writes a JSON manifest next to its outputs recording the argv,
the resolved configuration, seeds, and SHA-256 checksums of inputs and
outputs.  ``pfid replay MANIFEST`` re-executes a recorded command and checks
that it reproduces the same bytes.

Derived seeds: split ``s`` uses ``seed + s`` and gallery/probe trial ``t``
uses ``seed + 1000 + t``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    SynthConfig,
    atomic_write_text,
    format_feature_rows,
    format_label_mapping,
    generate_synthetic,
    load_feature_file,
)
from .evaluation import EvalReport, run_protocol, split_kind_for, transfer_eval
from .model import (
    NetworkConfig,
    TrainConfig,
    embed,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .pairing import make_split

log = logging.getLogger("pfid")

EVAL_PROTOCOLS = ("classification", "closed", "open", "verification")
CURVE_FILES = {"closed": ("cmc.csv", "rank,accuracy"), "open": ("dir.csv", "far,dir"),
               "verification": ("roc.csv", "far,tar")}
CURVE_KEYS = {"closed": "cmc", "open": "dir", "verification": "roc"}


class CLIError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _range(text: str) -> tuple[int, int]:
    parts = _int_list(text)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected MIN,MAX, got {text!r}")
    if parts[0] < 1 or parts[1] < parts[0]:
        raise argparse.ArgumentTypeError(f"need 1 <= MIN <= MAX, got {text!r}")
    return parts


def _read_dataset(path) -> Dataset:
    if not Path(path).is_file():
        raise CLIError(f"dataset not found: {path}")
    try:
        return load_feature_file(path)
    except ValueError as exc:
        raise CLIError(str(exc)) from None


def _read_checkpoint(path):
    if not Path(path).is_file():
        raise CLIError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CLIError(f"{path}: unreadable checkpoint ({exc})") from None


def _write_manifest(path, args, command: str, config: dict, inputs: list, outputs: list) -> None:
    for out in outputs:
        if not Path(out).is_file() or Path(out).stat().st_size == 0:
            raise CLIError(f"output {out} was not written")
    manifest = {
        "command": command,
        "argv": args.argv,
        "config": config,
        "seeds": {"seed": getattr(args, "seed", None)},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "version": __version__,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _curve_csv(header: str, points) -> str:
    lines = [header]
    for x, y in points:
        x = int(x) if header.startswith("rank") else repr(float(x))
        lines.append(f"{x},{float(y)!r}")
    return "\n".join(lines) + "\n"


def _check_pairs_available(dataset: Dataset) -> None:
    counts = dataset.class_counts
    singles = np.flatnonzero(counts < 2) + 1
    if singles.size:
        names = [dataset.label_map.get(int(d), int(d)) for d in singles]
        raise CLIError(f"identities with fewer than 2 samples cannot be evaluated: {names}")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> None:
    try:
        cfg = SynthConfig(args.ids, tuple(args.range), args.dim, args.nuisance_dim, args.nuisance_scale,
                          args.noise_scale, args.seed)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    ds = generate_synthetic(cfg)
    out = Path(args.out)
    try:
        atomic_write_text(out, format_feature_rows(ds))
    except OSError as exc:
        raise CLIError(f"cannot write {out}: {exc}") from None
    _write_manifest(f"{out}.manifest.json", args, "gen-data", asdict(cfg), [], [out])
    print(f"wrote {len(ds)} samples of {ds.num_classes} identities to {out}")


def _configs_from_args(args, dataset: Dataset):
    tc = TrainConfig(args.epochs, args.pairs, args.lr, args.weight_decay, args.momentum, args.decay_factor,
                     _int_list(args.decay_epochs), args.loss, args.margin, args.seed)
    return tc, dict(hidden_dims=_int_list(args.hidden), embedding_dim=args.embedding_dim, seed=args.seed)


def _train_on(train_set: Dataset, net_kw: dict, tc: TrainConfig):
    cfg = NetworkConfig(train_set.dim, train_set.num_classes, **net_kw)
    return train(train_set, cfg, tc)


def cmd_train(args) -> None:
    ds = _read_dataset(args.dataset)
    try:
        tc, net_kw = _configs_from_args(args, ds)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    holdout = None
    train_set = ds
    if args.holdout != "none":
        plan = make_split(args.holdout, ds.labels, args.test_fraction, args.seed + args.split_index)
        holdout = {"kind": args.holdout, "test_fraction": args.test_fraction, "split_seed": plan.seed}
        train_set = ds.subset(plan.train_indices)
    train_set = train_set.relabeled()
    net, history = _train_on(train_set, net_kw, tc)

    out = Path(args.out)
    extra = {"train_config": asdict(tc), "network_kw": net_kw, "holdout": holdout,
             "dataset_sha256": sha256_file(args.dataset)}
    save_checkpoint(net, out, extra)
    hist_path = out.with_name(out.stem + ".history.csv")
    atomic_write_text(hist_path, "epoch,loss\n" + "".join(f"{e},{v!r}\n" for e, v in enumerate(history)))
    map_path = out.with_name(out.stem + ".labels.csv")
    atomic_write_text(map_path, format_label_mapping(ds))
    _, extra_back = load_checkpoint(out)
    if extra_back != json.loads(json.dumps(extra)):
        raise CLIError("checkpoint failed to round-trip")
    _write_manifest(f"{out}.manifest.json", args, "train", {**extra, "network_config": asdict(net.config)},
                    [args.dataset], [out, hist_path, map_path])
    print(f"trained {tc.loss_mode} model for {tc.epochs} epochs; final loss {history[-1]:.6f}; wrote {out}")


def cmd_embed(args) -> None:
    ds = _read_dataset(args.dataset)
    net, _ = _read_checkpoint(args.checkpoint)
    if ds.dim != net.config.input_dim:
        raise CLIError(f"dataset dim {ds.dim} != checkpoint input dim {net.config.input_dim}")
    vectors = embed(net, ds.features)
    out = Path(args.out)
    atomic_write_text(out, format_feature_rows(Dataset(vectors, ds.labels, ds.num_classes, ds.label_map)))
    _write_manifest(f"{out}.manifest.json", args, "embed", {}, [args.dataset, args.checkpoint], [out])
    print(f"wrote {len(ds)} embeddings to {out}")


def _embedding_sources(args, ds: Dataset):
    """Keyword arguments for run_protocol: fixed network, per-split trainer, or raw features."""
    if not args.checkpoint:
        return lambda protocol: {}
    net, extra = _read_checkpoint(args.checkpoint)
    if ds.dim != net.config.input_dim:
        raise CLIError(f"dataset dim {ds.dim} != checkpoint input dim {net.config.input_dim}")
    if args.no_retrain or "train_config" not in extra:
        return lambda protocol: {"network": net}
    tc = TrainConfig(**extra["train_config"])
    net_kw = extra["network_kw"]
    holdout = extra.get("holdout") or {}
    same_data = extra.get("dataset_sha256") == sha256_file(args.dataset)

    def sources(protocol):
        kind = split_kind_for(protocol)

        def trainer(train_set, plan, split_index):
            if (same_data and holdout.get("kind") == kind and holdout.get("split_seed") == plan.seed
                    and holdout.get("test_fraction") == args.test_fraction):
                return net
            log.info("training a %s model for %s split %d", tc.loss_mode, kind, split_index)
            return _train_on(train_set, net_kw, tc)[0]

        return {"trainer": trainer}

    return sources


def _emit_report(out_dir: Path, report: EvalReport, outputs: list) -> None:
    path = out_dir / f"report_{report.protocol}.json"
    atomic_write_text(path, report.to_json())
    outputs.append(path)
    if report.protocol in CURVE_FILES:
        name, header = CURVE_FILES[report.protocol]
        cpath = out_dir / name
        atomic_write_text(cpath, _curve_csv(header, report.curves[CURVE_KEYS[report.protocol]]))
        outputs.append(cpath)
    print(f"{report.protocol:>14}: {report.formatted()}")


def _protocol_kwargs(args) -> dict:
    return dict(splits=args.splits, trials=args.trials, far=args.far, seed=args.seed,
                test_fraction=args.test_fraction)


def cmd_eval(args) -> None:
    ds = _read_dataset(args.dataset)
    _check_pairs_available(ds)
    sources = _embedding_sources(args, ds)
    protocols = EVAL_PROTOCOLS if args.protocol == "all" else (args.protocol,)
    out_dir = Path(args.out)
    outputs: list = []
    for protocol in protocols:
        try:
            report = run_protocol(ds, protocol, **sources(protocol), **_protocol_kwargs(args))
        except ValueError as exc:
            raise CLIError(f"{protocol}: {exc}") from None
        _emit_report(out_dir, report, outputs)
    inputs = [args.dataset] + ([args.checkpoint] if args.checkpoint else [])
    _write_manifest(out_dir / "manifest.json", args, "eval", {"protocols": list(protocols), **_protocol_kwargs(args)},
                    inputs, outputs)


def cmd_cluster(args) -> None:
    ds = _read_dataset(args.dataset)
    _check_pairs_available(ds)
    out_dir = Path(args.out)
    checkpoints = args.checkpoint or [None]
    models = {}
    for ckpt in checkpoints:
        sub = argparse.Namespace(**{**vars(args), "checkpoint": ckpt})
        name = "features"
        if ckpt:
            _, extra = _read_checkpoint(ckpt)
            name = extra.get("train_config", {}).get("loss_mode", Path(ckpt).stem)
            if name in models:
                name = Path(ckpt).stem
        report = run_protocol(ds, "cluster", restarts=args.restarts, **_embedding_sources(sub, ds)("cluster"),
                              **_protocol_kwargs(args))
        models[name] = {"nmi_mean": report.mean, "nmi_std": report.std, "summary": report.formatted(),
                        "per_split": report.values, "checkpoint": ckpt}
        print(f"{name:>10} NMI: {report.formatted()}")
    k = len(np.unique(ds.labels[make_split("identity", ds.labels, args.test_fraction, args.seed).test_indices]))
    doc = {"protocol": "cluster", "k": k, "restarts": args.restarts,
           "split_seeds": [args.seed + s for s in range(args.splits)],
           "restart_seeds": "split_seed + r for r in range(restarts)", "models": models}
    path = out_dir / "report_cluster.json"
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    inputs = [args.dataset] + [c for c in checkpoints if c]
    _write_manifest(out_dir / "manifest.json", args, "cluster", {"restarts": args.restarts, **_protocol_kwargs(args)},
                    inputs, [path])


def cmd_transfer(args) -> None:
    ds = _read_dataset(args.dataset)
    _check_pairs_available(ds)
    net, extra = _read_checkpoint(args.checkpoint)
    if ds.dim != net.config.input_dim:
        raise CLIError(f"dataset dim {ds.dim} != checkpoint input dim {net.config.input_dim}")
    out_dir = Path(args.out)
    outputs: list = []
    reports = transfer_eval(net, ds, **_protocol_kwargs(args))
    rows = {}
    for protocol, report in reports.items():
        _emit_report(out_dir, report, outputs)
        rows[protocol] = {"mean": report.mean, "std": report.std, "summary": report.formatted()}
    summary = {"trained_on_sha256": extra.get("dataset_sha256"), "evaluated_on": str(args.dataset),
               "loss_mode": extra.get("train_config", {}).get("loss_mode"), "rows": rows}
    path = out_dir / "transfer.json"
    atomic_write_text(path, json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    outputs.append(path)
    _write_manifest(out_dir / "manifest.json", args, "transfer", _protocol_kwargs(args),
                    [args.dataset, args.checkpoint], outputs)


def cmd_replay(args) -> None:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    recorded = manifest["outputs"]
    code = main(manifest["argv"])
    if code != 0:
        raise CLIError(f"replayed command exited with {code}")
    bad = [p for p, digest in recorded.items() if not Path(p).is_file() or sha256_file(p) != digest]
    if bad:
        raise CLIError(f"replay produced different bytes for: {bad}")
    print(f"replay reproduced {len(recorded)} output(s) bit-for-bit")


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfid", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic identity dataset")
    g.add_argument("--ids", type=int, default=40)
    g.add_argument("--range", type=_range, default=(30, 100), help="MIN,MAX samples per identity")
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--nuisance-dim", type=int, default=8)
    g.add_argument("--nuisance-scale", type=float, default=1.0)
    g.add_argument("--noise-scale", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss", choices=("ce", "pfid", "siamese"), default="pfid")
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--pairs", type=int, default=8, help="similar pairs per batch")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--decay-factor", type=float, default=0.1)
    t.add_argument("--decay-epochs", default="25,35")
    t.add_argument("--margin", type=float, default=1.0)
    t.add_argument("--hidden", default="64", help="comma-separated hidden widths")
    t.add_argument("--embedding-dim", type=int, default=32)
    t.add_argument("--holdout", choices=("identity", "stratified", "none"), default="identity")
    t.add_argument("--test-fraction", type=float, default=0.2)
    t.add_argument("--split-index", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="write l2-normalized embeddings as a feature file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_embed)

    def eval_flags(q, checkpoint_required=False):
        q.add_argument("--dataset", required=True)
        q.add_argument("--out", required=True, help="output directory")
        q.add_argument("--splits", type=int, default=5)
        q.add_argument("--trials", type=int, default=100)
        q.add_argument("--far", type=float, default=0.01)
        q.add_argument("--test-fraction", type=float, default=0.2)
        q.add_argument("--seed", type=int, default=0)
        if not checkpoint_required:
            q.add_argument("--no-retrain", action="store_true",
                           help="embed every split with the checkpoint as-is instead of retraining per split")

    v = sub.add_parser("eval", help="run evaluation protocols")
    v.add_argument("--checkpoint", help="omit to evaluate the dataset features directly")
    v.add_argument("--protocol", choices=(*EVAL_PROTOCOLS, "all"), default="all")
    eval_flags(v)
    v.set_defaults(func=cmd_eval)

    c = sub.add_parser("cluster", help="K-means NMI on unseen identities")
    c.add_argument("--checkpoint", action="append", help="repeat to compare models side by side")
    c.add_argument("--restarts", type=int, default=10)
    eval_flags(c)
    c.set_defaults(func=cmd_cluster)

    x = sub.add_parser("transfer", help="evaluate a trained model on another dataset")
    x.add_argument("--checkpoint", required=True)
    eval_flags(x, checkpoint_required=True)
    x.set_defaults(func=cmd_transfer)

    r = sub.add_parser("replay", help="re-run a command from its manifest and verify outputs")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CLIError as exc:
        print(f"pfid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"pfid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
