"""Command-line entry point: ``python -m gcmtal <command> [options]``.

Every command takes a flat ``key=value`` config file (``--config``) plus
``--set key=value`` overrides and prints the effective config as a banner
of the same format, so the banner alone re-creates a run.

Exit codes: 0 success, 2 bad config or usage, 3 bad or missing data,
4 runtime failure (divergence, failed check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from gcmtal.core import ValidationError
from gcmtal.evaluator import EvalConfig, detections_to_lines, evaluate_map
from gcmtal.gcm import GcmConfig
from gcmtal.graphbuild import EDGE_KINDS, GraphParams, build_graph, build_graph_oracle, dump_graph
from gcmtal.heads import HeadConfig
from gcmtal.synthdata import ConfigError, ParseError, SynthConfig, VersionError, generate, load, save
from gcmtal.trainer import (
    CheckpointError,
    DivergenceError,
    TrainConfig,
    dump_checkpoint,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run config: section.key -> dataclass field

_SECTIONS = {
    "graph": GraphParams,
    "gcm": GcmConfig,
    "head": HeadConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "data": SynthConfig,
}
# fields that are derived or shared rather than set per section
_SKIP = {("train", "seed"), ("data", "seed"), ("data", "split"), ("head", "num_classes"),
         ("train", "verify_graph_cache")}
_EXTRA = {
    "run.seed": 0,
    "run.streams": ("rgb",),
    "run.test_videos": 50,
    "run.init_scale": 1.0,
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list, frozenset)):
        items = sorted(v) if isinstance(v, frozenset) else v
        return ",".join(_fmt(x) for x in items)
    if v is None:
        return "none"
    return str(v)


def default_config() -> dict:
    cfg = {}
    for sec, cls in _SECTIONS.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            if (sec, f.name) not in _SKIP:
                cfg[f"{sec}.{f.name}"] = getattr(inst, f.name)
    cfg.update(_EXTRA)
    return cfg


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, frozenset):
            return frozenset(x for x in text.split(",") if x)
        if isinstance(default, tuple):
            items = [x for x in text.split(",") if x]
            if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
                return tuple(float(x) for x in items)
            return tuple(items)
        if default is None:
            if text == "none":
                return None
            return tuple(int(x) for x in text.split(","))
        return text
    except ValueError:
        raise CliError(EXIT_CONFIG, f"config key {key}: cannot parse {text!r}")


def parse_config_text(text: str, base: dict, origin: str = "<config>") -> dict:
    cfg = dict(base)
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{origin}:{no}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        cfg = apply_override(cfg, key, val, f"{origin}:{no}")
    return cfg


def apply_override(cfg: dict, key: str, val: str, origin: str = "--set") -> dict:
    if key not in cfg:
        raise CliError(EXIT_CONFIG, f"{origin}: unknown config key {key!r} "
                                    f"(see `python -m gcmtal inspect --defaults`)")
    out = dict(cfg)
    out[key] = _parse_value(key, val, cfg[key])
    return out


def banner(cfg: dict) -> str:
    lines = ["# effective config"]
    lines += [f"{k}={_fmt(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def _section(cfg: dict, sec: str, **extra):
    cls = _SECTIONS[sec]
    kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith(sec + ".")}
    kw.update(extra)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as err:
        raise CliError(EXIT_CONFIG, f"invalid [{sec}] settings: {err}")


def graph_params(cfg):
    bad = set(cfg["graph.edge_kinds"]) - set(EDGE_KINDS)
    if bad:
        raise CliError(EXIT_CONFIG, f"graph.edge_kinds: unknown kinds {sorted(bad)}")
    return _section(cfg, "graph")


def gcm_config(cfg):
    return _section(cfg, "gcm")


def head_config(cfg, num_classes):
    return _section(cfg, "head", num_classes=num_classes)


def train_config(cfg):
    return _section(cfg, "train", seed=cfg["run.seed"])


def eval_config(cfg):
    return _section(cfg, "eval")


def synth_config(cfg, split):
    videos = cfg["data.videos"] if split == "train" else cfg["run.test_videos"]
    sc = _section(cfg, "data", seed=cfg["run.seed"], split=split)
    sc = dataclasses.replace(sc, videos=videos)
    try:
        sc.validate()
    except ConfigError as err:
        raise CliError(EXIT_CONFIG, f"invalid [data] settings: {err}")
    return sc


# ---------------------------------------------------------------------------
# commands


def _stream_dir(root, stream, split):
    return os.path.join(root, stream, split)


def _load(path):
    if not os.path.isdir(path):
        raise CliError(EXIT_DATA, f"dataset directory {path} not found "
                                  f"(create one with `python -m gcmtal gen-data --out DIR`)")
    try:
        return load(path)
    except FileNotFoundError as err:
        raise CliError(EXIT_DATA, f"missing file: {err.filename}")
    except (ParseError, VersionError) as err:
        raise CliError(EXIT_DATA, str(err))


def cmd_gen_data(args, cfg, out):
    if not args.out:
        raise CliError(EXIT_CONFIG, "gen-data needs --out DIR")
    for stream in cfg["run.streams"]:
        for split in ("train", "test"):
            ds = generate(synth_config(cfg, split), stream)
            save(ds, _stream_dir(args.out, stream, split))
            n = sum(len(u) for u in ds.units.values())
            out(f"wrote {_stream_dir(args.out, stream, split)}: {len(ds.units)} videos, {n} units",
                {"path": _stream_dir(args.out, stream, split), "videos": len(ds.units), "units": n})
    return EXIT_OK


def _dataset_arg(args, split="train"):
    """--data may name a dataset directory or a gen-data root."""
    if args.data is None:
        raise CliError(EXIT_CONFIG, f"{args.command} needs --data DIR")
    if os.path.isfile(os.path.join(args.data, "units.txt")):
        return args.data
    return _stream_dir(args.data, "rgb", split)


def cmd_build_graph(args, cfg, out):
    gp = graph_params(cfg)
    ds = _load(_dataset_arg(args, args.split))
    vids = [args.video] if args.video else ds.video_ids
    for vid in vids:
        if vid not in ds.units:
            raise CliError(EXIT_DATA, f"video {vid!r} not in dataset")
        try:
            g = build_graph(ds.units[vid], gp, workers=args.threads)
        except ValidationError as err:
            raise CliError(EXIT_DATA, f"{vid}: {err}")
        counts = {k: len(g.edges_of_kind(k)) for k in EDGE_KINDS}
        out(f"{vid} nodes={g.node_count} edges={g.edge_count} "
            + " ".join(f"{k}={v}" for k, v in counts.items()) + f" digest={g.digest()}",
            {"video_id": vid, "nodes": g.node_count, "edges": g.edge_count, **counts,
             "digest": g.digest()})
        if args.dump:
            sys.stdout.write(dump_graph(g))
    return EXIT_OK


def _models_from_dir(path):
    if not os.path.isdir(path):
        raise CliError(EXIT_DATA, f"model directory {path} not found")
    models = {}
    for name in sorted(os.listdir(path)):
        if name.endswith(".ckpt"):
            try:
                models[name[:-5]] = load_checkpoint(os.path.join(path, name))
            except CheckpointError as err:
                raise CliError(EXIT_DATA, str(err))
    if not models:
        raise CliError(EXIT_DATA, f"no .ckpt files in {path}")
    return models


def cmd_train(args, cfg, out):
    from gcmtal.heads import DetectorModel
    from gcmtal.trainer import fit, prepare_dataset

    if args.data is None or args.out is None:
        raise CliError(EXIT_CONFIG, "train needs --data DIR and --out DIR")
    os.makedirs(args.out, exist_ok=True)
    gp, gc, tc = graph_params(cfg), gcm_config(cfg), train_config(cfg)
    for stream in cfg["run.streams"]:
        ds = _load(_stream_dir(args.data, stream, "train"))
        hc = head_config(cfg, ds.num_classes)
        if hc.adjacency == "embed_cosine":
            raise CliError(EXIT_CONFIG, "head.adjacency=embed_cosine is library-only")
        try:
            batches = prepare_dataset(ds, gp, hc)
        except ValidationError as err:
            raise CliError(EXIT_DATA, str(err))
        rng = np.random.default_rng([cfg["run.seed"], 99])
        model = DetectorModel(ds.feature_dim, gc, hc, rng, cfg["run.init_scale"])
        log = (lambda line: out(f"[{stream}] {line}", None)) if not args.json_lines else None
        report = fit(batches, model, tc, log_fn=log)
        ckpt = os.path.join(args.out, f"{stream}.ckpt")
        save_checkpoint(model, ckpt)
        out(f"saved {ckpt}", {"stream": stream, "checkpoint": ckpt,
                              "losses": report.losses})
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(banner(cfg))
    return EXIT_OK


def cmd_eval(args, cfg, out):
    from gcmtal.pipeline import detect, detect_two_stream, ground_truth_list
    from gcmtal.trainer import prepare_dataset

    if args.data is None or args.model is None:
        raise CliError(EXIT_CONFIG, "eval needs --model DIR and --data DIR")
    models = _models_from_dir(args.model)
    ec, gp = eval_config(cfg), graph_params(cfg)
    streams = [s for s in cfg["run.streams"] if s in models] or sorted(models)
    batches, ds = {}, None
    for s in streams:
        ds = _load(_stream_dir(args.data, s, "test"))
        hc = models[s].head_cfg
        if ds.feature_dim != models[s].d:
            raise CliError(EXIT_DATA, f"{s}: data dim {ds.feature_dim} != model dim {models[s].d}")
        batches[s] = prepare_dataset(ds, gp, hc, with_targets=False)
    if len(streams) == 2 and set(streams) == {"rgb", "flow"}:
        dets = detect_two_stream(models, batches, ec)
    else:
        dets = detect(models[streams[0]], batches[streams[0]], ec)
    res = evaluate_map(dets, ground_truth_list(ds), ec)
    if args.json_lines:
        print(res.json_lines())
    else:
        print(res.table())
        avg = res.average_map()
        print("average mAP: " + ("n/a" if avg is None else f"{100 * avg:.2f}"))
    if args.detections:
        with open(args.detections, "w") as fh:
            fh.write(detections_to_lines(dets) + "\n")
    return EXIT_OK


def cmd_bench(args, cfg, out):
    from gcmtal.core import ActionUnit, Interval

    gp = graph_params(cfg)
    rng = np.random.default_rng(cfg["run.seed"])
    n, d = args.n, cfg["data.feature_dim"]
    starts = rng.uniform(0.0, n * 0.5, n)
    lengths = rng.uniform(1.0, 20.0, n)
    feats = rng.normal(size=(n, d))
    units = [ActionUnit(i, "bench", Interval(float(s), float(s + l)), f)
             for i, (s, l, f) in enumerate(zip(starts, lengths, feats))]
    t0 = time.perf_counter()
    fast = build_graph(units, gp, workers=args.threads)
    t_fast = time.perf_counter() - t0
    t0 = time.perf_counter()
    slow = build_graph_oracle(units, gp)
    t_oracle = time.perf_counter() - t0
    same = fast == slow
    out(f"n={n} edges={fast.edge_count} sweep={t_fast:.3f}s oracle={t_oracle:.3f}s "
        f"speedup={t_oracle / t_fast:.1f}x identical={same}",
        {"n": n, "edges": fast.edge_count, "sweep_seconds": t_fast,
         "oracle_seconds": t_oracle, "identical": same})
    return EXIT_OK if same else EXIT_RUNTIME


def cmd_inspect(args, cfg, out):
    if args.defaults:
        return EXIT_OK  # the banner already shows them
    if args.path is None:
        raise CliError(EXIT_CONFIG, "inspect needs a PATH or --defaults")
    if os.path.isfile(args.path):
        try:
            sys.stdout.write(dump_checkpoint(load_checkpoint(args.path)))
        except CheckpointError as err:
            raise CliError(EXIT_DATA, str(err))
        return EXIT_OK
    ds = _load(args.path)
    n_units = sum(len(u) for u in ds.units.values())
    n_gts = sum(len(g) for g in ds.ground_truths.values())
    labeled = sum(u.label is not None for us in ds.units.values() for u in us)
    out(f"split={ds.split} stream={ds.stream} dim={ds.feature_dim} classes={ds.num_classes} "
        f"videos={len(ds.units)} units={n_units} labeled_units={labeled} ground_truths={n_gts}",
        {"split": ds.split, "stream": ds.stream, "dim": ds.feature_dim,
         "classes": ds.num_classes, "videos": len(ds.units), "units": n_units,
         "labeled_units": labeled, "ground_truths": n_gts})
    return EXIT_OK


def cmd_gradcheck(args, cfg, out):
    from gcmtal.pipeline import toy_gradcheck

    worst = 0.0
    for head in ("two_gcm", "single_gcm"):
        for adj in ("cosine", "attention"):
            for training in (False, True):
                err = toy_gradcheck(head, adj, training, seed=cfg["run.seed"])
                worst = max(worst, err)
                out(f"head={head} adjacency={adj} training={str(training).lower()} "
                    f"max_rel_err={err:.3e}",
                    {"head": head, "adjacency": adj, "training": training, "max_rel_err": err})
    ok = worst <= args.tol
    out(f"{'PASS' if ok else 'FAIL'} max_rel_err={worst:.3e} tol={args.tol:g}",
        {"pass": ok, "max_rel_err": worst, "tol": args.tol})
    return EXIT_OK if ok else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k}={_fmt(v)}" for k, v in sorted(default_config().items()))
    p = argparse.ArgumentParser(
        prog="gcmtal", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Graph convolutional module toolkit for temporal action localization.",
        epilog="config keys (defaults):\n" + keys)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    common.add_argument("--json-lines", action="store_true", help="machine-readable output")
    common.add_argument("--quiet", action="store_true", help="do not print the config banner")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    s.add_argument("--out", help="output root (gets <stream>/train and <stream>/test)")

    s = sub.add_parser("build-graph", parents=[common], help="build unit graphs of a dataset")
    s.add_argument("--data", help="dataset directory or gen-data root")
    s.add_argument("--split", default="train", choices=("train", "test"))
    s.add_argument("--video", help="only this video id")
    s.add_argument("--dump", action="store_true", help="print every edge")

    s = sub.add_parser("train", parents=[common], help="train one model per stream")
    s.add_argument("--data", help="gen-data root")
    s.add_argument("--out", help="model directory")

    s = sub.add_parser("eval", parents=[common], help="detect and report mAP per tIoU threshold")
    s.add_argument("--model", help="model directory written by train")
    s.add_argument("--data", help="gen-data root")
    s.add_argument("--detections", help="also write detections as JSON lines here")

    s = sub.add_parser("bench", parents=[common], help="time sweep vs brute-force graph build")
    s.add_argument("--n", type=int, default=20000, help="number of units")

    s = sub.add_parser("inspect", parents=[common], help="summarize a dataset or checkpoint")
    s.add_argument("path", nargs="?")
    s.add_argument("--defaults", action="store_true", help="only print the default config")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check on a toy graph")
    s.add_argument("--tol", type=float, default=1e-4)
    return p


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        if not os.path.isfile(args.config):
            raise CliError(EXIT_CONFIG, f"config file {args.config} not found")
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), cfg, args.config)
    for item in args.set:
        if "=" not in item:
            raise CliError(EXIT_CONFIG, f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg = apply_override(cfg, k.strip(), v)
    if args.seed is not None:
        cfg["run.seed"] = args.seed
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG

    def out(text, record):
        if args.json_lines:
            if record is not None:
                print(json.dumps(record, sort_keys=True))
        else:
            print(text)

    try:
        cfg = resolve_config(args)
        if not args.quiet:
            # banner lines start with '#' or are key=value, so the banner re-parses as config
            sys.stdout.write(banner(cfg) if not args.json_lines else
                             json.dumps({k: _fmt(v) for k, v in sorted(cfg.items())}) + "\n")
        return COMMANDS[args.command](args, cfg, out)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except BrokenPipeError:
        # output piped into e.g. `head`; not an error of the run
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
