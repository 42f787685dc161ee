"""Command-line entry point: pretrain, probe, ablate, gradcheck, export-attn, gen-data."""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, apply_sets, dump_config, from_dict, load_config
from .data import ImageRecord, load_ppm, read_manifest, synth_dataset, write_dataset
from .eval import export_attention, linear_probe, partial_finetune
from .numerics.suite import run_suite
from .objectives import POOLS, toy_loss_grad_check
from .trainer import METRIC_COLUMNS, PretrainResult, load_checkpoint, pretrain, save_checkpoint
from .vit import EncoderPair

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# metrics


def emit_metrics(run_dir: str | Path, row: dict, filename: str = "metrics.csv") -> Path:
    """Append one row; the header is written when the file is created."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / filename
    fresh = not path.exists() or path.stat().st_size == 0
    if not fresh:
        with path.open(newline="") as f:
            header = next(csv.reader(f))
        if header != list(row):
            raise ValueError(f"{path}: row columns {list(row)} do not match header {header}")
    with path.open("a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if fresh:
            w.writerow(list(row))
        w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])
        f.flush()
    return path


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# orchestration


def build_data(cfg: RunConfig) -> tuple[list[ImageRecord], list[ImageRecord]]:
    d = cfg.data
    if d.source == "manifest":
        return read_manifest(d.manifest), read_manifest(d.val_manifest)
    side = cfg.vit.image_side
    train = synth_dataset(d.n_train, d.classes, side, seed=cfg.seed)
    val = synth_dataset(d.n_val, d.classes, side, seed=cfg.seed, start=d.n_train)
    return train, val


def _prune_checkpoints(ckpt_dir: Path, keep: int) -> None:
    if keep <= 0:
        return
    for old in sorted(ckpt_dir.glob("epoch_*.ckpt"))[:-keep]:
        old.unlink()


def run_pretrain(cfg: RunConfig, out_dir: str | Path, train: Sequence[ImageRecord] | None = None) -> PretrainResult:
    """Pretrain, streaming metrics to ``metrics.csv`` and checkpointing every epoch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    (out / "config.ini").write_text(dump_config(cfg))
    if train is None:
        train, _ = build_data(cfg)
    ckpt_dir = out / "checkpoints"
    meta = cfg.to_dict()

    def on_step(m, _report):
        emit_metrics(out, m.row())

    def on_epoch(epoch, res):
        save_checkpoint(res.pair, res.moments, res.state, meta, ckpt_dir / f"epoch_{epoch:04d}.ckpt")
        _prune_checkpoints(ckpt_dir, cfg.run.keep_checkpoints)

    res = pretrain(
        train, cfg.vit, cfg.train, cfg.loss, cfg.aug, on_step=on_step, on_epoch=on_epoch, wall_clock=cfg.run.wall_clock
    )
    save_checkpoint(res.pair, res.moments, res.state, meta, out / "final.ckpt")
    return res


def probe_accuracy(cfg: RunConfig, pair: EncoderPair, train, val) -> float:
    if cfg.probe.mode == "linear":
        return linear_probe(pair, train, val, cfg.probe, cfg.seed)
    return partial_finetune(pair, train, val, cfg.probe, cfg.seed)


def _aug(**kw) -> dict:
    return {"aug": kw}


SWEEPS: dict[str, list[tuple[str, dict]]] = {
    "table4": [
        ("conmim", {}),
        ("instance_contrast", {"train": {"objective": "instance"}}),
        ("patchcontrast_nomask", {"train": {"mask_ratio": 0.0}}),
    ],
    "table5": [(pool, {"loss": {"negative_pool": pool}}) for pool in POOLS],
    "table7": [
        ("conmim", {}),
        ("strong_both", _aug(full_view="strong", corrupted_view="strong")),
        ("basic_both", _aug(full_view="basic", corrupted_view="basic")),
        ("switch", _aug(full_view="basic", corrupted_view="strong")),
        ("no_momentum", {"train": {"momentum_mode": "copy"}}),
    ],
    "mask": [
        ("random_0.6", {"train": {"mask_ratio": 0.6}}),
        ("random_0.75", {"train": {"mask_ratio": 0.75}}),
        ("random_0.9", {"train": {"mask_ratio": 0.9}}),
        ("block_0.75", {"train": {"mask_ratio": 0.75, "mask_strategy": "block"}}),
    ],
    "temp": [(f"tau_{t}", {"loss": {"temperature": t}}) for t in (0.05, 0.1, 0.2)],
    "momentum": [(f"alpha_{a}", {"train": {"momentum": a}}) for a in (0.99, 0.996, 0.999)],
}

ABLATE_COLUMNS = ("variant", "probe_acc", "final_loss", "pos_key_rank_mean", "steps")


def sweep_configs(cfg: RunConfig, sweep: str) -> list[tuple[str, RunConfig]]:
    """Variant configs; all share the base seed, hence data order and augmentation draws."""
    if sweep not in SWEEPS:
        raise UsageError(f"unknown sweep {sweep!r}; choose from {', '.join(SWEEPS)}")
    return [(name, cfg.with_overrides(**over)) for name, over in SWEEPS[sweep]]


def run_ablate(cfg: RunConfig, sweep: str, out_dir: str | Path, log=print) -> list[dict]:
    out = Path(out_dir)
    summary = out / f"ablate_{sweep}.csv"
    if summary.exists():
        summary.unlink()
    train, val = build_data(cfg)
    rows = []
    for name, vcfg in sweep_configs(cfg, sweep):
        res = run_pretrain(vcfg, out / sweep / name, train)
        last = res.history[-1]
        row = {
            "variant": name,
            "probe_acc": probe_accuracy(vcfg, res.pair, train, val),
            "final_loss": last.loss,
            "pos_key_rank_mean": last.pos_key_rank_mean,
            "steps": res.state.step,
        }
        emit_metrics(out, row, summary.name)
        rows.append(row)
        log(f"{sweep}/{name}: probe_acc={row['probe_acc']:.4f} final_loss={row['final_loss']:.4f}")
    order = sorted(rows, key=lambda r: -r["probe_acc"])
    log("ordering: " + " > ".join(f"{r['variant']}({r['probe_acc']:.4f})" for r in order))
    return rows


def run_gradcheck(instances: int = 8, seed: int = 0, tol: float = 1e-4, log=print) -> bool:
    report = run_suite(instances, seed)
    ok = True
    for op in sorted(report.ops()):
        err = report.max_error(op)
        good = err < tol
        ok &= good
        log(f"{'PASS' if good else 'FAIL'} op {op:<14} max_rel_err={err:.3e}")
    for pool in POOLS:
        err = max(toy_loss_grad_check(seed + i, pool) for i in range(instances))
        good = err < tol
        ok &= good
        log(f"{'PASS' if good else 'FAIL'} conmim_loss[{pool}] max_rel_err={err:.3e}")
    return ok


# ---------------------------------------------------------------------------
# argument handling


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    sets = list(args.set or [])
    if getattr(args, "out", None):
        sets.append(f"run.out_dir={args.out}")
    return apply_sets(cfg, sets) if sets else cfg


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conmim", description="Masked image modeling with denoising patch contrast.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def with_config(sp):
        sp.add_argument("--config", help="run config file ([section] / key = value)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
        sp.add_argument("--out", help="output directory (overrides run.out_dir)")
        return sp

    with_config(sub.add_parser("pretrain", help="run pretraining with per-epoch checkpoints"))
    sp = with_config(sub.add_parser("probe", help="linear or partial probe of a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--random-baseline", action="store_true", help="also probe a random-init encoder")
    sp = with_config(sub.add_parser("ablate", help="run a named controlled sweep"))
    sp.add_argument("sweep", choices=sorted(SWEEPS))
    sp = sub.add_parser("gradcheck", help="finite-difference oracle suite")
    sp.add_argument("--instances", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp = with_config(sub.add_parser("export-attn", help="[CLS] attention grid as CSV"))
    sp.add_argument("--checkpoint", help="checkpoint to read (random init when omitted)")
    sp.add_argument("--block", type=int, required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", help="PPM file")
    src.add_argument("--index", type=int, help="index into the validation split")
    sp.add_argument("--csv", help="write CSV here instead of stdout")
    with_config(sub.add_parser("gen-data", help="write the synthetic dataset and manifests"))
    return p


def _cmd_pretrain(args, log) -> int:
    cfg = _config_from_args(args)
    t0 = time.perf_counter()
    res = run_pretrain(cfg, cfg.run.out_dir)
    last = res.history[-1]
    log(f"pretrained {res.state.step} steps in {time.perf_counter() - t0:.1f}s; final loss {last.loss:.4f}")
    log(f"metrics: {Path(cfg.run.out_dir) / 'metrics.csv'}")
    return 0


def _load_ckpt_config(args):
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _config_from_args(args) if args.config else apply_sets(from_dict(ckpt.config), list(args.set or []))
    return ckpt, cfg


def _cmd_probe(args, log) -> int:
    ckpt, cfg = _load_ckpt_config(args)
    train, val = build_data(cfg)
    acc = probe_accuracy(cfg, ckpt.pair, train, val)
    row = {
        "checkpoint": str(args.checkpoint),
        "mode": cfg.probe.mode,
        "unfrozen_blocks": cfg.probe.unfrozen_blocks,
        "feature_source": cfg.probe.feature_source,
        "accuracy": acc,
    }
    log(f"{cfg.probe.mode} probe accuracy: {acc:.4f}")
    if args.random_baseline:
        base = probe_accuracy(cfg, EncoderPair.create(ckpt.pair.cfg, cfg.seed), train, val)
        row["random_init_accuracy"] = base
        log(f"random-init probe accuracy: {base:.4f}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    emit_metrics(out, row, "probe.csv" if not args.random_baseline else "probe_vs_random.csv")
    return 0


def _cmd_ablate(args, log) -> int:
    cfg = _config_from_args(args)
    run_ablate(cfg, args.sweep, cfg.run.out_dir, log)
    return 0


def _cmd_gradcheck(args, log) -> int:
    return 0 if run_gradcheck(args.instances, args.seed, args.tol, log) else RUNTIME_ERROR


def _cmd_export_attn(args, log) -> int:
    if args.checkpoint:
        ckpt, cfg = _load_ckpt_config(args)
        pair = ckpt.pair
    else:
        cfg = _config_from_args(args)
        pair = EncoderPair.create(cfg.vit, cfg.seed)
    if args.image:
        image = load_ppm(Path(args.image).read_bytes(), args.image)
    else:
        _, val = build_data(cfg)
        if not 0 <= args.index < len(val):
            raise UsageError(f"--index {args.index} outside validation split of {len(val)}")
        image = val[args.index]
    exp = export_attention(pair, image, args.block)
    text = exp.to_csv()
    if args.csv:
        Path(args.csv).write_text(text)
        log(f"wrote {args.csv} (cls self-weight {exp.cls_self:.6f})")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gen_data(args, log) -> int:
    cfg = _config_from_args(args)
    if cfg.data.source != "synth":
        raise UsageError("gen-data needs data.source = synth")
    train, val = build_data(cfg)
    out = Path(cfg.run.out_dir)
    for name, recs in (("train", train), ("val", val)):
        manifest = write_dataset(recs, out / name)
        log(f"{name}: {len(recs)} images -> {manifest}")
    return 0


COMMANDS = {
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "export-attn": _cmd_export_attn,
    "gen-data": _cmd_gen_data,
}


def run_command(argv: Sequence[str] | None = None, log=None) -> int:
    """Parse ``argv`` and dispatch; returns the process exit status."""
    log = log or (lambda msg: print(msg, flush=True))
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return USAGE_ERROR if e.code not in (0, None) else 0
    try:
        return COMMANDS[args.command](args, log)
    except (ConfigError, UsageError) as e:
        print(f"conmim: usage error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except KeyboardInterrupt:
        print("conmim: interrupted", file=sys.stderr)
        return 130
    except Exception as e:  # runtime failure: report and exit nonzero
        print(f"conmim: error: {type(e).__name__}: {e}", file=sys.stderr)
        return RUNTIME_ERROR


def main() -> None:
    sys.exit(run_command())


__all__ = [
    "ABLATE_COLUMNS",
    "METRIC_COLUMNS",
    "SWEEPS",
    "build_data",
    "emit_metrics",
    "main",
    "read_metrics",
    "run_ablate",
    "run_command",
    "run_gradcheck",
    "run_pretrain",
    "sweep_configs",
]
