"""Command-line entry point.

Subcommands: synth, search, train, finetune, infer, eval, export-arch.
Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import ConfigurationError, FormatError, IntegrityError, __version__
from .config import (
    ExperimentConfig,
    PRESETS,
    apply_text,
    config_hash,
    to_text,
    validate,
)
from .data import (
    generate_clean_sequence,
    load_paired_root,
    load_sequence,
    save_sequence,
    synthesize_rainy,
)
from .evaluate import evaluate_pairs, infer_sequence, report_table, report_to_text
from .searchspace import CellSpec, derive_cell
from .trainer import (
    derive_macro,
    load_model,
    run_finetune_aas,
    run_search,
    run_train,
    split_pairs,
)


def _add_common(sub, *, data=False, out=False, ckpt=False):
    sub.add_argument("--config", type=Path, default=None, help="dotted-key config file")
    sub.add_argument("--preset", choices=sorted(PRESETS), default=None,
                     help="configuration preset")
    sub.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub.add_argument("--frames", type=int, choices=(3, 5, 7), default=None,
                     help="temporal window size")
    if data:
        sub.add_argument("--data", type=Path, required=True, help="dataset path")
    if out:
        sub.add_argument("--out", type=Path, required=True, help="output path")
    if ckpt:
        sub.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmics",
        description="Searchable collaborative video deraining: synthesise data, "
                    "search architectures, train, fine-tune fusion, and evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"tmics {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a paired synthetic rainy/clean dataset")
    _add_common(s, out=True)

    s = sub.add_parser("search", help="run the architecture search phase")
    _add_common(s, data=True, out=True)

    s = sub.add_parser("train", help="train the derived branches")
    _add_common(s, data=True, out=True)
    s.add_argument("--arch", type=Path, default=None, help="genotype file (one comma-separated line)")
    s.add_argument("--ckpt", type=Path, default=None, help="search checkpoint to derive the genotype from")
    s.add_argument("--macro", choices=("ofm", "tgm"), default=None, help="alignment scheme")

    s = sub.add_parser("finetune", help="fine-tune the fusion attention on a trained checkpoint")
    _add_common(s, data=True, out=True, ckpt=True)

    s = sub.add_parser("infer", help="restore one sequence directory")
    _add_common(s, data=True, out=True, ckpt=True)

    s = sub.add_parser("eval", help="score restored vs. clean fidelity over a paired dataset")
    _add_common(s, data=True)
    s.add_argument("--ckpt", type=Path, default=None, help="checkpoint (omit to score the identity)")
    s.add_argument("--out", type=Path, default=None, help="write the machine-readable report here")

    s = sub.add_parser("export-arch", help="write the derived genotype line from a checkpoint")
    _add_common(s, out=True, ckpt=True)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = PRESETS[args.preset]() if args.preset else ExperimentConfig()
    if args.config is not None:
        apply_text(cfg, Path(args.config).read_text())
    if args.seed is not None:
        cfg.search.seed = args.seed
        cfg.train.seed = args.seed
    if args.frames is not None:
        cfg.data.frames = args.frames
    validate(cfg)
    return cfg


def _cmd_synth(args) -> int:
    cfg = resolve_config(args)
    seed = args.seed if args.seed is not None else 0
    root = Path(args.out)
    sc = cfg.synth
    for i in range(sc.sequences):
        identifier = f"seq{i:02d}"
        clean = generate_clean_sequence(identifier, sc.frames, sc.size, seed * 1009 + i)
        rainy, _ = synthesize_rainy(clean, sc, seed * 1009 + i + 500)
        save_sequence(clean, root / "clean" / identifier)
        save_sequence(rainy, root / "rainy" / identifier)
    manifest = [f"seed = {seed}"]
    manifest += [line for line in to_text(cfg).splitlines() if line.startswith("synth.")]
    (root / "manifest.txt").write_text("\n".join(manifest) + "\n")
    print(f"wrote {sc.sequences} sequences x {sc.frames} frames ({sc.size}x{sc.size}) under {root}")
    return 0


def _cmd_search(args) -> int:
    cfg = resolve_config(args)
    pairs = load_paired_root(args.data)
    train_pairs, val_pairs = split_pairs(pairs, cfg.search.val_fraction)
    result = run_search(cfg, train_pairs, val_pairs, args.out)
    print(f"derived cell: {result.spec.to_line()}")
    print(f"derived alignment: {result.macro}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _cmd_train(args) -> int:
    cfg = resolve_config(args)
    pairs = load_paired_root(args.data)
    if args.arch is not None:
        spec = CellSpec.from_line(Path(args.arch).read_text().strip().splitlines()[0])
        macro = args.macro or (cfg.model.macro if cfg.model.macro in ("ofm", "tgm") else None)
        if macro is None:
            raise ConfigurationError("--arch requires --macro (or a preset with a discrete alignment)")
    elif args.ckpt is not None:
        model, _, _ = load_model(args.ckpt)
        spec = derive_cell(model.micro_logits)
        macro = args.macro or derive_macro(model.macro_logits)
    elif cfg.model.cell_spec:
        spec = CellSpec.from_line(cfg.model.cell_spec)
        macro = args.macro or cfg.model.macro
    else:
        raise ConfigurationError("no genotype: pass --arch, --ckpt, or a preset/config with model.cell_spec")
    result = run_train(cfg, pairs, spec, macro, args.out)
    print(f"trained {spec.to_line()} with {macro} alignment; checkpoint: {result.checkpoint}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = resolve_config(args)
    pairs = load_paired_root(args.data)
    result = run_finetune_aas(cfg, pairs, args.ckpt, args.out)
    print(f"fusion attention fine-tuned; checkpoint: {result.checkpoint}")
    return 0


def _cmd_infer(args) -> int:
    model, mcfg, _ = load_model(args.ckpt)
    seq = load_sequence(args.data)
    w = args.frames if args.frames is not None else mcfg.data.frames
    restored = infer_sequence(model, seq, w)
    save_sequence(restored, args.out)
    print(f"restored {len(restored)} frames into {args.out}")
    return 0


def _cmd_eval(args) -> int:
    pairs = load_paired_root(args.data)
    model = None
    hash_text = ""
    w = args.frames if args.frames is not None else 5
    if args.ckpt is not None:
        model, mcfg, ckpt = load_model(args.ckpt)
        hash_text = ckpt.meta.get("config_hash", config_hash(mcfg))
        if args.frames is None:
            w = mcfg.data.frames
    report = evaluate_pairs(model, pairs, w, hash_text)
    print(report_table(report))
    if args.out is not None:
        Path(args.out).write_text(report_to_text(report))
        print(f"report written to {args.out}")
    return 0


def _cmd_export_arch(args) -> int:
    model, _, _ = load_model(args.ckpt)
    spec = derive_cell(model.micro_logits)
    Path(args.out).write_text(spec.to_line() + "\n")
    print(f"derived cell: {spec.to_line()}")
    print(f"derived alignment: {derive_macro(model.macro_logits)}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "search": _cmd_search,
    "train": _cmd_train,
    "finetune": _cmd_finetune,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "export-arch": _cmd_export_arch,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, FormatError, ConfigurationError, IntegrityError,
            FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
