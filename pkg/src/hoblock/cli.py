"""``hoblock`` command line: one experiment per process, everything seeded from the config.

Exit codes: 0 success, 1 invalid or missing configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .analysis import count_costs, dump_feature_maps, probe_hblock
from .autodiff import load_checkpoint
from .checks import run_gradchecks
from .config import ConfigError, ExperimentConfig, load_config, sub_seed
from .models import build_model
from .synth import Dataset, generate_clips, generate_dataset, normalize_clips
from .tensor import ConfigurationError
from .train import compare_orders, evaluate, train

SUBCOMMANDS = ("gen-data", "train", "eval", "compare-orders", "gradcheck", "costs", "probe-rf", "dump-features")


class UsageError(Exception):
    pass


def _data(cfg: ExperimentConfig):
    if "xor" in cfg.data:
        task = cfg.xor_task()
        tr, te = generate_clips(task, "train"), generate_clips(task, "test")
        return tr[0], tr[1], te[0], te[1]
    root = Path(cfg.data["path"])
    tr, te = Dataset.load(root / "train"), Dataset.load(root / "test")
    return tr.clips, tr.labels, te.clips, te.labels


def _model(cfg: ExperimentConfig, static=False, meta=False, with_plan=True):
    plan = cfg.plan() if with_plan else None
    return build_model(cfg.backbone, plan, seed=sub_seed(cfg.seed, "init"), static=static, dtype=cfg.np_dtype, meta=meta)


def _restored(cfg, args):
    model = _model(cfg)
    if args.checkpoint:
        model.load_state(load_checkpoint(args.checkpoint))
    return model


def _out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    return Path(args.out)


def cmd_gen_data(cfg, args):
    if "xor" not in cfg.data:
        raise UsageError("gen-data needs a data.xor section")
    out = _out(args)
    generate_dataset(cfg.xor_task(), out)
    cfg.write_resolved(out)
    print(f"wrote {out}")


def cmd_train(cfg, args):
    out = _out(args)
    cfg.write_resolved(out)
    model = _model(cfg, static=args.static)
    result = train(model, *_data(cfg), cfg.train_config(), out_dir=out)
    print(f"eval_acc\t{result.eval_acc:.4f}")


def cmd_eval(cfg, args):
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model = _restored(cfg, args)
    *_, test_x, test_y = _data(cfg)
    acc = evaluate(model, normalize_clips(test_x).astype(model.dtype), test_y)
    print(f"eval_acc\t{acc:.4f}")


def cmd_compare(cfg, args):
    out = Path(args.out) if args.out else None
    if out:
        cfg.write_resolved(out)
    report = compare_orders(
        cfg.backbone, cfg.plan(), _data(cfg), cfg.train_config(), sub_seed(cfg.seed, "init"), cfg.np_dtype, out, None
    )
    print(report)
    if out:
        (out / "compare.tsv").write_text(str(report) + "\n")


def cmd_gradcheck(cfg, args):
    reports = run_gradchecks(seed=cfg.seed)
    for name, rep in reports.items():
        print(f"{name}\t{rep.max_rel_err:.3e}\t{'ok' if rep.passed else 'FAIL'}")
    if not all(r.passed for r in reports.values()):
        raise RuntimeError("gradient check failed")


def cmd_costs(cfg, args):
    shape = (1, cfg.backbone.in_channels) + tuple(cfg.backbone.input_shape)
    base = count_costs(_model(cfg, meta=True, with_plan=False), shape)
    ho = count_costs(_model(cfg, meta=True), shape)
    print(ho.table())
    print()
    for conv in ("MAC=1", "MAC=2"):
        b, h = base.total_flops(conv), ho.total_flops(conv)
        print(f"{conv}\tbaseline {b:,d}\thigher-order {h:,d}\tratio {h / b:.4f}")
    print(f"params\tbaseline {base.total_params:,d}\thigher-order {ho.total_params:,d}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ho.to_tsv(out / "costs.tsv")
        base.to_tsv(out / "costs_baseline.tsv")
        cfg.write_resolved(out)


def cmd_probe_rf(cfg, args):
    res = probe_hblock(cfg.hblock.config(), seed=cfg.seed)
    fmt = lambda e: "x".join(map(str, e))  # noqa: E731
    print(f"kernel\t{fmt(res['kernel'])}")
    print(f"context\t{fmt(res['context'])}")
    print(f"generator support\t{fmt(res['generator'])}")
    print(f"block support\t{fmt(res['block'])}")
    if res["generator"] != res["context"]:
        raise RuntimeError("generator support differs from the configured context field")


def cmd_dump(cfg, args):
    if not args.stage:
        raise UsageError("dump-features needs --stage")
    out = _out(args)
    model = _restored(cfg, args)
    *_, test_x, _ = _data(cfg)
    paths = dump_feature_maps(model, normalize_clips(test_x[:1])[0], args.stage, out)
    print(f"wrote {len(paths)} frames to {out}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare-orders": cmd_compare,
    "gradcheck": cmd_gradcheck,
    "costs": cmd_costs,
    "probe-rf": cmd_probe_rf,
    "dump-features": cmd_dump,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoblock", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment JSON")
        p.add_argument("--out", help="output directory")
        if name in ("eval", "dump-features"):
            p.add_argument("--checkpoint", help="checkpoint directory written by train")
        if name == "dump-features":
            p.add_argument("--stage", help="backbone stage, e.g. res3")
        if name == "train":
            p.add_argument("--static", action="store_true", help="train the static-depthwise control instead")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    if not args.config:
        parser.print_usage(sys.stderr)
        print(f"hoblock {args.command}: --config is required", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"hoblock: config not found: {args.config}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"hoblock: invalid config: {exc}", file=sys.stderr)
        return 1
    try:
        HANDLERS[args.command](cfg, args)
    except (UsageError, ConfigurationError) as exc:
        print(f"hoblock {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"hoblock {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
