"""Pre-train / fine-tune pipelines, the ablation matrix, and metrics files."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .ggp import PerturbationReport, perturbed_training_step
from .nn import MomentumCopies, MultiModalModel, load_checkpoint, save_checkpoint
from .objectives import EmbeddingQueue, PretrainBatch, mlm_mask, pretrain_loss, vqa_loss
from .optim import AdamW, WarmupSchedule
from .synthdata import gen_pretrain_set, gen_vqa_set, make_rng, pad_ids, stack_grids

log = logging.getLogger(__name__)

CSV_HEADER = ("phase", "epoch", "loss_itc", "loss_itm", "loss_mlm", "loss_lm",
              "acc_open", "acc_closed", "acc_overall", "perturb_norm", "clip_frac")

# Philox stream tags, combined with the run seed
_ORDER_PT, _ORDER_FT, _OBJECTIVE = 10, 11, 12


class TrainingAborted(RuntimeError):
    def __init__(self, msg, last_good: Path | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class MetricsRecord:
    phase: str
    epoch: int
    loss_itc: float | None = None
    loss_itm: float | None = None
    loss_mlm: float | None = None
    loss_lm: float | None = None
    acc_open: float | None = None
    acc_closed: float | None = None
    acc_overall: float | None = None
    perturb_norm: float = 0.0
    clip_frac: float = 0.0

    def row(self) -> list[str]:
        return [_fmt17(getattr(self, k)) for k in CSV_HEADER]


def _fmt17(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def params_hash(params) -> str:
    return _hash(*(params[n].data for n in sorted(params)))


@dataclass
class PhaseResult:
    model: MultiModalModel
    records: list[MetricsRecord]
    fingerprint: dict = field(default_factory=dict)
    checkpoint: Path | None = None
    fresh_params: list[str] = field(default_factory=list)


class _PerturbStats:
    def __init__(self):
        self.norms, self.fracs = [], []

    def add(self, report: PerturbationReport):
        if report.norms:
            self.norms.append(report.mean_norm)
            self.fracs.append(report.mean_clip_fraction)

    def means(self):
        return (float(np.mean(self.norms)) if self.norms else 0.0,
                float(np.mean(self.fracs)) if self.fracs else 0.0)


def _make_optimizer(cfg: ExperimentConfig, model: MultiModalModel, lr: float) -> AdamW:
    o = cfg.optim
    return AdamW(model.params, lr=lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)


# ---------------------------------------------------------------- pretrain

def run_pretrain(cfg: ExperimentConfig, out_dir=None) -> PhaseResult:
    """ITC + ITM + MLM pre-training; writes ``pretrain.ckpt.npz`` when ``out_dir`` is set.

    With ``out_dir`` the checkpoint is refreshed after every epoch so an
    abort leaves the last good one behind.
    """
    pc = cfg.pretrain
    data = gen_pretrain_set(cfg.seed, cfg.data.n_pretrain)
    grids = stack_grids([s for s, _ in data])
    captions = pad_ids([c for _, c in data])
    n = len(data)
    bs = min(pc.batch, n)
    steps_per_epoch = n // bs
    if bs < 2:
        raise ValueError("pre-training needs batches of at least 2 pairs")

    model = MultiModalModel(cfg.model, cfg.seed, with_decoder=False)
    momentum = MomentumCopies(model, cfg.objectives.momentum)
    queue = EmbeddingQueue(cfg.objectives.queue_size, cfg.model.embed_dim)
    opt = _make_optimizer(cfg, model, pc.lr)
    sched = WarmupSchedule(pc.epochs * steps_per_epoch, pc.warmup, pc.lr)
    order_rng = make_rng(cfg.seed, _ORDER_PT)
    obj_rng = make_rng(cfg.seed, _OBJECTIVE)
    oc = cfg.objectives
    fp = {"data": _hash(grids, captions), "init": params_hash(model.params)}
    order_h = hashlib.sha256()

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt = out_dir / "pretrain.ckpt.npz" if out_dir else None
    records: list[MetricsRecord] = []
    step = 0
    for epoch in range(1, pc.epochs + 1):
        perm = order_rng.permutation(n)
        order_h.update(perm.tobytes())
        sums = np.zeros(3)
        stats = _PerturbStats()
        for b in range(steps_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            caps = captions[idx]
            masked, pos = mlm_mask(caps, oc.mask_rate, obj_rng)
            batch = PretrainBatch(grids[idx], caps, masked, pos, int(obj_rng.integers(2 ** 62)))
            parts = {}

            def tracked(m, bt):
                total, bundle = pretrain_loss(m, bt, queue, momentum, oc.temperature, oc.weights)
                parts["bundle"] = bundle
                return total

            try:
                _, report = perturbed_training_step(model, batch, tracked, opt, cfg.ggp, "pretrain",
                                                    sched.lr_at(step))
            except (RuntimeError, FloatingPointError) as exc:
                raise TrainingAborted(f"pre-training aborted at epoch {epoch}, step {step}: {exc}",
                                      ckpt if ckpt and ckpt.exists() else None) from exc
            momentum.update(model)
            bd = parts["bundle"]
            sums += (bd.itc, bd.itm, bd.mlm)
            stats.add(report)
            step += 1
        itc, itm, mlm = sums / steps_per_epoch
        norm, frac = stats.means()
        records.append(MetricsRecord("pretrain", epoch, itc, itm, mlm, perturb_norm=norm, clip_frac=frac))
        log.info("pretrain epoch %d: itc %.4f itm %.4f mlm %.4f", epoch, itc, itm, mlm)
        if ckpt is not None:
            save_checkpoint(model, ckpt, {"seed": cfg.seed, "epoch": epoch})
    fp["order"] = order_h.hexdigest()[:16]
    return PhaseResult(model, records, fp, ckpt)


# ---------------------------------------------------------------- finetune

def _vqa_arrays(samples):
    grids = stack_grids([s.scene for s in samples])
    questions = pad_ids([s.question_ids for s in samples])
    answers = pad_ids([s.answer_ids for s in samples])
    return grids, questions, answers


def evaluate(model: MultiModalModel, samples) -> dict:
    """Exact-match accuracy of greedy answers, split by question type."""
    grids, questions, _ = _vqa_arrays(samples)
    decoded = model.greedy_decode(grids, questions)
    correct = {"open": 0, "closed": 0}
    total = {"open": 0, "closed": 0}
    for s, pred in zip(samples, decoded):
        total[s.question_type] += 1
        correct[s.question_type] += int(tuple(pred) == tuple(s.answer_ids[1:-1]))
    n = total["open"] + total["closed"]
    return {
        "acc_open": correct["open"] / total["open"] if total["open"] else 0.0,
        "acc_closed": correct["closed"] / total["closed"] if total["closed"] else 0.0,
        "acc_overall": (correct["open"] + correct["closed"]) / n,
    }


def run_finetune(cfg: ExperimentConfig, checkpoint=None, evaluate_every: int = 1) -> PhaseResult:
    """Answer-generation fine-tuning, evaluated on the validation split every
    ``evaluate_every`` epochs and always after the last (0: last only)."""
    fc = cfg.finetune
    train, val = gen_vqa_set(cfg.seed, cfg.data.n_train, cfg.data.n_val)
    grids, questions, answers = _vqa_arrays(train)
    model = MultiModalModel(cfg.model, cfg.seed, with_decoder=True)
    fresh: list[str] = []
    if checkpoint is not None:
        fresh = load_checkpoint(model, checkpoint)
        if fresh:
            log.info("fresh-initialized %d parameters absent from checkpoint", len(fresh))
    n = len(train)
    bs = min(fc.batch, n)
    steps_per_epoch = math.ceil(n / bs)
    opt = _make_optimizer(cfg, model, fc.lr)
    sched = WarmupSchedule(fc.epochs * steps_per_epoch, fc.warmup, fc.lr)
    order_rng = make_rng(cfg.seed, _ORDER_FT)
    fp = {"data": _hash(grids, questions, answers, *_vqa_arrays(val)),
          "init": params_hash({k: v for k, v in model.params.items() if k.startswith("decoder.")}),
          "loaded": params_hash({k: v for k, v in model.params.items() if not k.startswith("decoder.")})}
    order_h = hashlib.sha256()

    def loss_fn(m, idx):
        return vqa_loss(m, grids[idx], questions[idx], answers[idx])

    records = []
    step = 0
    for epoch in range(1, fc.epochs + 1):
        perm = order_rng.permutation(n)
        order_h.update(perm.tobytes())
        total = 0.0
        stats = _PerturbStats()
        for b in range(steps_per_epoch):
            idx = perm[b * bs:(b + 1) * bs]
            try:
                value, report = perturbed_training_step(model, idx, loss_fn, opt, cfg.ggp, "finetune",
                                                        sched.lr_at(step))
            except (RuntimeError, FloatingPointError) as exc:
                raise TrainingAborted(f"fine-tuning aborted at epoch {epoch}: {exc}") from exc
            total += value
            stats.add(report)
            step += 1
        norm, frac = stats.means()
        rec = MetricsRecord("finetune", epoch, loss_lm=total / steps_per_epoch, perturb_norm=norm, clip_frac=frac)
        if epoch == fc.epochs or (evaluate_every and epoch % evaluate_every == 0):
            for k, v in evaluate(model, val).items():
                setattr(rec, k, v)
        records.append(rec)
        log.info("finetune epoch %d: lm %.4f overall %s", epoch, rec.loss_lm, rec.acc_overall)
    fp["order"] = order_h.hexdigest()[:16]
    return PhaseResult(model, records, fp, fresh_params=fresh)


# ----------------------------------------------------------------- metrics

def emit_metrics(records: list[MetricsRecord], out_dir, config: ExperimentConfig | None = None,
                 extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``metrics.csv`` (17 significant digits) and ``summary.json``."""
    if not records:
        raise ValueError("no metrics records to write")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())
    final = {}
    for phase in ("pretrain", "finetune"):
        rows = [r for r in records if r.phase == phase]
        if rows:
            final[phase] = asdict(rows[-1])
    summary = {"config": config.to_flat() if config else None, "final": final, **(extra or {})}
    json_path = out_dir / "summary.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_metrics(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k in CSV_HEADER:
                v = row[k]
                if k == "phase":
                    kw[k] = v
                elif k == "epoch":
                    kw[k] = int(v)
                else:
                    kw[k] = float(v) if v != "" else None
            out.append(MetricsRecord(**kw))
    return out


# ------------------------------------------------------------------ ablation

# name -> (perturb in pretraining, perturb in fine-tuning, adaptive magnitude)
ABLATION_ROWS = {
    "baseline": (False, False, True),
    "PT+APM": (True, False, True),
    "FT+APM": (False, True, True),
    "PT+FT fixed": (True, True, False),
    "PT+FT+APM": (True, True, True),
}


def row_config(base: ExperimentConfig, row: str) -> ExperimentConfig:
    pt, ft, apm = ABLATION_ROWS[row]
    return base.replace(**{"ggp.pretrain": pt, "ggp.finetune": ft, "ggp.adaptive": apm})


def _pretrain_key(cfg: ExperimentConfig) -> tuple:
    return (cfg.seed, cfg.ggp.pretrain, cfg.ggp.adaptive if cfg.ggp.pretrain else None)


def _pretrain_job(args):
    flat, out_dir = args
    cfg = ExperimentConfig.from_flat(flat)
    try:
        res = run_pretrain(cfg, out_dir)
    except Exception as exc:  # noqa: BLE001 - reported per cell
        return {"error": f"{type(exc).__name__}: {exc}"}
    return {"checkpoint": str(res.checkpoint), "records": [asdict(r) for r in res.records],
            "fingerprint": res.fingerprint}


def _finetune_job(args):
    flat, ckpt = args
    cfg = ExperimentConfig.from_flat(flat)
    try:
        res = run_finetune(cfg, ckpt, evaluate_every=0)  # rows only use the final score
    except Exception as exc:  # noqa: BLE001
        return {"error": f"{type(exc).__name__}: {exc}"}
    return {"records": [asdict(r) for r in res.records], "fingerprint": res.fingerprint}


def _map(fn, jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs))


def run_ablation(base: ExperimentConfig, seeds, out_dir=None, threads: int | None = None) -> dict:
    """Run every ablation row for every seed and aggregate final validation accuracy.

    Rows whose pre-training is unperturbed share one checkpoint per seed, as
    do rows sharing the same pre-training perturbation settings.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("an ablation needs at least 3 seeds")
    threads = threads or int(os.environ.get("GGP_THREADS", "1"))
    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory()
        out_dir = tmp.name
    out_dir = Path(out_dir)
    try:
        cells = {(row, s): row_config(base.replace(seed=s), row) for s in seeds for row in ABLATION_ROWS}
        pt_keys = sorted({_pretrain_key(c) for c in cells.values()}, key=repr)
        pt_cfgs = {}
        for cfg in cells.values():
            pt_cfgs.setdefault(_pretrain_key(cfg), cfg)
        pt_dirs = {k: out_dir / "pretrain" / f"seed{k[0]}_{'pt' if k[1] else 'nopt'}"
                   f"{'' if k[2] is None else ('_apm' if k[2] else '_fixed')}" for k in pt_keys}
        pt_out = dict(zip(pt_keys, _map(_pretrain_job, [(pt_cfgs[k].to_flat(), str(pt_dirs[k]))
                                                          for k in pt_keys], threads)))
        order = sorted(cells, key=lambda c: (list(ABLATION_ROWS).index(c[0]), c[1]))
        jobs, runnable = [], []
        results = {}
        for cell in order:
            pre = pt_out[_pretrain_key(cells[cell])]
            if "error" in pre:
                results[cell] = {"error": "pre-training failed: " + pre["error"]}
            else:
                runnable.append(cell)
                jobs.append((cells[cell].to_flat(), pre["checkpoint"]))
        for cell, res in zip(runnable, _map(_finetune_job, jobs, threads)):
            results[cell] = res
        for cell in order:
            pre = pt_out[_pretrain_key(cells[cell])]
            if "error" not in results[cell]:
                results[cell]["pretrain_fingerprint"] = pre["fingerprint"]
                results[cell]["pretrain_records"] = pre["records"]
        report = _aggregate(results, seeds)
        report["config"] = base.to_flat()
        write_ablation(report, out_dir)
        return report
    finally:
        if tmp is not None:
            tmp.cleanup()


def _aggregate(results: dict, seeds) -> dict:
    rows = {}
    for row in ABLATION_ROWS:
        cells = [results[(row, s)] for s in seeds]
        failed = [s for s, c in zip(seeds, cells) if "error" in c]
        entry = {"flags": dict(zip(("pt", "ft", "apm"), ABLATION_ROWS[row])), "status": "ok",
                 "per_seed": {}, "curves": []}
        if failed:
            entry["status"] = "failed"
            entry["errors"] = {s: results[(row, s)]["error"] for s in failed}
            rows[row] = entry
            continue
        finals = []
        for s, c in zip(seeds, cells):
            ft = [r for r in c["records"] if r["phase"] == "finetune"]
            last = ft[-1]
            finals.append((last["acc_open"], last["acc_closed"], last["acc_overall"]))
            entry["per_seed"][s] = {"acc_open": last["acc_open"], "acc_closed": last["acc_closed"],
                                    "acc_overall": last["acc_overall"],
                                    "fingerprint": {"pretrain": c["pretrain_fingerprint"],
                                                    "finetune": c["fingerprint"]},
                                    "curve": [r["acc_overall"] for r in ft]}
        arr = np.array(finals)
        for j, k in enumerate(("acc_open", "acc_closed", "acc_overall")):
            entry[k] = {"mean": float(arr[:, j].mean()), "std": float(arr[:, j].std(ddof=1))}
        curves = np.array([entry["per_seed"][s]["curve"] for s in seeds], dtype=float)
        entry["curves"] = curves.mean(axis=0).tolist()
        rows[row] = entry
    flags = []
    ok = lambda r: rows[r]["status"] == "ok"
    if ok("FT+APM") and ok("PT+FT+APM") and \
            rows["FT+APM"]["acc_overall"]["mean"] >= rows["PT+FT+APM"]["acc_overall"]["mean"]:
        flags.append("FT-only mean accuracy >= full configuration")
    return {"seeds": list(seeds), "rows": rows, "flags": flags}


def write_ablation(report: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "pt", "ft", "apm", "status",
                    "acc_open_mean", "acc_open_std", "acc_closed_mean", "acc_closed_std",
                    "acc_overall_mean", "acc_overall_std"])
        for name, e in report["rows"].items():
            vals = []
            for k in ("acc_open", "acc_closed", "acc_overall"):
                vals += [_fmt17(e[k]["mean"]), _fmt17(e[k]["std"])] if k in e else ["", ""]
            f = e["flags"]
            w.writerow([name, int(f["pt"]), int(f["ft"]), int(f["apm"]), e["status"], *vals])
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "seed", "epoch", "acc_overall"])
        for name, e in report["rows"].items():
            for s, cell in e["per_seed"].items():
                for ep, acc in enumerate(cell["curve"], 1):
                    w.writerow([name, s, ep, _fmt17(acc)])
    (out_dir / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")


def run_pipeline(cfg: ExperimentConfig, out_dir) -> tuple[PhaseResult, PhaseResult]:
    """Pre-train, checkpoint, fine-tune, and write metrics for one config."""
    out_dir = Path(out_dir)
    pre = run_pretrain(cfg, out_dir)
    fine = run_finetune(cfg, pre.checkpoint)
    emit_metrics(pre.records + fine.records, out_dir, cfg,
                 {"fingerprint": {"pretrain": pre.fingerprint, "finetune": fine.fingerprint}})
    return pre, fine
