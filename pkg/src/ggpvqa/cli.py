"""``ggp-train`` command line."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .harness import TrainingAborted, emit_metrics, run_ablation, run_finetune, run_pretrain
from .nn import save_checkpoint


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if overrides:
        cfg = ExperimentConfig.from_flat({**cfg.to_flat(), **overrides})
    if getattr(args, "out", None):
        cfg = cfg.replace(out_dir=str(args.out))
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    res = run_pretrain(cfg, out)
    emit_metrics(res.records, out, cfg, {"fingerprint": {"pretrain": res.fingerprint}})
    print(f"checkpoint: {res.checkpoint}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    res = run_finetune(cfg, args.checkpoint)
    save_checkpoint(res.model, out / "finetune.ckpt.npz", {"seed": cfg.seed, "epoch": cfg.finetune.epochs})
    emit_metrics(res.records, out, cfg, {"fingerprint": {"finetune": res.fingerprint},
                                         "checkpoint": args.checkpoint})
    last = res.records[-1]
    print(f"final validation accuracy: overall {last.acc_overall:.4f} "
          f"open {last.acc_open:.4f} closed {last.acc_closed:.4f}")
    return 0


def cmd_ablation(args) -> int:
    cfg = _config(args)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    report = run_ablation(cfg, seeds, cfg.out_dir)
    print(f"{'row':<14}{'open':>16}{'closed':>16}{'overall':>16}")
    for name, row in report["rows"].items():
        if row["status"] != "ok":
            print(f"{name:<14}  failed")
            continue
        cells = "".join(f"{row[k]['mean']:>9.4f}±{row[k]['std']:<6.4f}"
                        for k in ("acc_open", "acc_closed", "acc_overall"))
        print(f"{name:<14}{cells}")
    for flag in report["flags"]:
        print(f"flag: {flag}")
    return 0 if all(r["status"] == "ok" for r in report["rows"].values()) else 1


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return 0 if run_selftest() else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ggp-train", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="key = value text file or JSON")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("pretrain", help="ITC + ITM + MLM pre-training")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)
    sp = sub.add_parser("finetune", help="answer-generation fine-tuning")
    common(sp)
    sp.add_argument("--checkpoint", help="pre-training checkpoint (omit to start from scratch)")
    sp.set_defaults(func=cmd_finetune)
    sp = sub.add_parser("ablation", help="five-row perturbation ablation over several seeds")
    common(sp)
    sp.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds from config seed")
    sp.set_defaults(func=cmd_ablation)
    sp = sub.add_parser("selftest", help="run quick invariant checks")
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (KeyError, ValueError) as exc:
        parser.error(str(exc))
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        if exc.last_good:
            print(f"last good checkpoint: {exc.last_good}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
