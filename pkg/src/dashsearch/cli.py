"""Command-line pipeline driver.

Subcommands mirror the pipeline stages: gen-corpus, train-teacher,
align, search, sweep, distill, eval, report. Every command reads one
config file (defaults apply when omitted) plus a few flag overrides, and
exits 0 only on full success.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, default_config, load_config, recall_task
from .corpus import generate_tokens, markov_entropy_rate, train_heldout_split, transition_table
from .evaluation import evaluate_model
from .model import HybridArch, ModelHandle
from .report import SweepRecord, emit_report, write_arch_txt, write_sweep_csv
from .search import run_search
from .sweep import run_sweep
from .training import run_align, run_distill, train_teacher, write_loss_csv


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.reseeded(args.seed)
    if args.lam is not None:
        cfg = dataclasses.replace(cfg, search=dataclasses.replace(cfg.search, lam=args.lam))
    if args.budget_space is not None:
        cfg = dataclasses.replace(cfg, search=dataclasses.replace(cfg.search, space=args.budget_space))
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg


def _corpus(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Regenerate the deterministic corpus and the held-out sequences."""
    tokens = generate_tokens(cfg.corpus, cfg.seed, cfg.corpus_tokens)
    train, heldout_stream = train_heldout_split(tokens)
    seq = cfg.search.seq_len
    n = min(cfg.eval.heldout_batches, max(1, len(heldout_stream) // seq))
    heldout = [heldout_stream[i * seq : (i + 1) * seq] for i in range(n)]
    return train, heldout_stream, heldout


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def cmd_gen_corpus(args) -> int:
    cfg = _load_cfg(args)
    tokens = generate_tokens(cfg.corpus, cfg.seed, cfg.corpus_tokens)
    path = _out(cfg, "corpus.npz")
    np.savez(path, tokens=tokens, seed=cfg.seed)
    entropy = markov_entropy_rate(transition_table(cfg.corpus))
    print(f"wrote {tokens.size} tokens to {path}")
    print(f"markov component entropy rate: {entropy:.4f} nats/token")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_cfg(args)
    train, _, _ = _corpus(cfg)
    params, history = train_teacher(train, cfg.model, cfg.teacher)
    save_checkpoint(
        Checkpoint(cfg.model, params, arch=HybridArch.all_full(cfg.model.n_layers),
                   metadata={"stage": "teacher", "seed": cfg.teacher.seed, "step": cfg.teacher.steps}),
        _out(cfg, "teacher.ckpt"),
    )
    write_loss_csv(history, _out(cfg, "teacher_loss.csv"))
    print(f"teacher trained for {cfg.teacher.steps} steps; final loss "
          f"{history[-1][1]:.4f}" if history else "teacher returned at initialization")
    return 0


def cmd_align(args) -> int:
    cfg = _load_cfg(args)
    train, _, _ = _corpus(cfg)
    teacher = load_checkpoint(_out(cfg, "teacher.ckpt"))
    params, history = run_align(train, teacher.tensors, cfg.model, cfg.align)
    save_checkpoint(
        Checkpoint(cfg.model, params,
                   metadata={"stage": "align", "seed": cfg.align.seed, "step": cfg.align.steps}),
        _out(cfg, "aligned.ckpt"),
    )
    write_loss_csv(history, _out(cfg, "align_loss.csv"))
    if history:
        print(f"alignment loss {history[0][1]:.4f} -> {history[-1][1]:.4f}")
    return 0


def cmd_search(args) -> int:
    cfg = _load_cfg(args)
    train, _, _ = _corpus(cfg)
    aligned = load_checkpoint(_out(cfg, "aligned.ckpt"))
    result = run_search(aligned.tensors, cfg.model, cfg.search, train)
    save_checkpoint(
        Checkpoint(cfg.model, aligned.tensors, arch=result.arch, alpha=result.state.alpha,
                   metadata={"stage": "search", "seed": cfg.search.seed,
                             "lambda": cfg.search.lam, "space": cfg.search.space}),
        _out(cfg, "search.ckpt"),
    )
    with open(_out(cfg, "search_log.csv"), "w") as fh:
        fh.write("step,L_KL,L_cost,L_search,T_arch\n")
        for step, kl, cost, loss, t_arch in result.log:
            fh.write(f"{step},{kl:.10g},{cost:.10g},{loss:.10g},{t_arch:.10g}\n")
    write_arch_txt(result.arch, _out(cfg, "arch.txt"))
    diag = result.diagnostics
    print(f"searched arch: {result.arch.to_string()}")
    print(f"avg entropy {diag.avg_entropy:.4f}, avg top1 {diag.avg_top1:.4f}, "
          f"avg margin {diag.avg_margin:.4f}, ambiguous {diag.ambiguous}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    train, _, heldout = _corpus(cfg)
    aligned = load_checkpoint(_out(cfg, "aligned.ckpt"))
    records = run_sweep(
        cfg.sweep_lambdas, cfg.sweep_seeds, aligned.tensors, cfg.model,
        cfg.search, train, heldout, distill_cfg=cfg.distill, tau=cfg.distill_tau,
    )
    write_sweep_csv(records, _out(cfg, "sweep.csv"))
    with open(_out(cfg, "sweep_archs.csv"), "w") as fh:
        fh.write("lambda,seed,arch\n")
        for rec in records:
            arch = rec.arch.to_string() if rec.arch else ""
            fh.write(f"{rec.lam:.6g},{rec.seed},{arch}\n")
    failures = [r for r in records if r.error]
    for rec in failures:
        print(f"run lambda={rec.lam} seed={rec.seed} failed: {rec.error}", file=sys.stderr)
    print(f"sweep wrote {len(records)} records ({len(failures)} failed)")
    return 1 if failures else 0


def cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    train, _, _ = _corpus(cfg)
    teacher = load_checkpoint(_out(cfg, "teacher.ckpt"))
    aligned = load_checkpoint(_out(cfg, "aligned.ckpt"))
    if args.arch:
        arch = HybridArch.from_string(args.arch)
    else:
        search = load_checkpoint(_out(cfg, "search.ckpt"))
        if search.arch is None:
            print("search checkpoint has no architecture", file=sys.stderr)
            return 1
        arch = search.arch
    params, history = run_distill(
        train, teacher.tensors, aligned.tensors, arch, cfg.model, cfg.distill,
        tau=cfg.distill_tau,
    )
    save_checkpoint(
        Checkpoint(cfg.model, params, arch=arch,
                   metadata={"stage": "distill", "seed": cfg.distill.seed}),
        _out(cfg, "distilled.ckpt"),
    )
    write_loss_csv(history, _out(cfg, "distill_loss.csv"))
    if history:
        print(f"distillation KL {history[0][1]:.4f} -> {history[-1][1]:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    _, _, heldout = _corpus(cfg)
    teacher_ckpt = load_checkpoint(_out(cfg, "teacher.ckpt"))
    student_ckpt = load_checkpoint(_out(cfg, "distilled.ckpt"))
    if student_ckpt.arch is None:
        print("distilled checkpoint has no architecture", file=sys.stderr)
        return 1
    teacher = ModelHandle(cfg.model, teacher_ckpt.tensors, HybridArch.all_full(cfg.model.n_layers))
    student = ModelHandle(cfg.model, student_ckpt.tensors, student_ckpt.arch)
    report = evaluate_model(
        student, teacher, student_ckpt.arch, heldout, cfg.corpus,
        recall_task(cfg, seed=cfg.seed), cfg.model.window, cfg.search.seq_len,
    )
    with open(_out(cfg, "eval.csv"), "w") as fh:
        fh.write(report.CSV_HEADER + "\n" + report.csv_row() + "\n")
    print(report.text())
    return 0


def cmd_report(args) -> int:
    cfg = _load_cfg(args)
    sweep_path = _out(cfg, "sweep.csv")
    archs_path = _out(cfg, "sweep_archs.csv")
    records: list[SweepRecord] = []
    archs: list[tuple[str, HybridArch]] = []
    if os.path.exists(sweep_path):
        with open(sweep_path) as fh:
            next(fh)
            for line in fh:
                parts = line.strip().split(",")
                records.append(SweepRecord(
                    lam=float(parts[0]), seed=int(parts[1]), budget=float(parts[2]),
                    avg_entropy=float(parts[3]), avg_top1=float(parts[4]),
                    avg_margin=float(parts[5]), ambiguous=int(parts[6]),
                    heldout_kl=float(parts[7]),
                ))
    if os.path.exists(archs_path):
        with open(archs_path) as fh:
            next(fh)
            for line in fh:
                lam, seed, arch = line.strip().split(",")
                if arch:
                    archs.append((f"lam={lam} seed={seed}", HybridArch.from_string(arch)))
    written = emit_report(records, archs, cfg.out_dir, cfg.model.window, cfg.search.seq_len)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-teacher": cmd_train_teacher,
    "align": cmd_align,
    "search": cmd_search,
    "sweep": cmd_sweep,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dashsearch",
        description="Differentiable hybrid-attention architecture search pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="INI config file")
        cmd.add_argument("--seed", type=int, default=None, help="master seed override")
        cmd.add_argument("--lambda", dest="lam", type=float, default=None,
                         help="cost coefficient override")
        cmd.add_argument("--budget-space", choices=("binary", "tri"), default=None)
        cmd.add_argument("--out", default=None, help="output directory override")
        if name == "distill":
            cmd.add_argument("--arch", default=None,
                             help="operator mnemonics, e.g. 'L F W F L L L L'")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
