"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, config as C
from .checkpoint import load_checkpoint
from .compress import CompressionMap, SimilarityKind, build_compression
from .corpus import read_corpus, write_task_file
from .errors import ConfigError, InputError, WPDistillError
from .pipeline import (PRETRAIN_DISTILL, STUDENT_FINETUNE, STUDENT_PRETRAIN, TEACHER_FINETUNE, TEACHER_PRETRAIN,
                       run_glmd, run_hard_label_baseline, run_stage, train_teacher)

log = logging.getLogger("wpdistill")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _defaults_epilog() -> str:
    return "effective defaults (override with --config FILE):\n" + json.dumps(C.default_config(), indent=2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wpdistill", description="Word-prediction distillation with vocabulary compression.",
                     epilog=_defaults_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--output-dir", type=Path, help="override output_dir")
        return p

    p = common(sub.add_parser("make-smoke-data", help="write the seeded synthetic corpus, task files and a config"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--corpus-bytes", type=int, default=100_000)

    common(sub.add_parser("pretrain-teacher", help="masked-LM pre-training of the teacher"))
    common(sub.add_parser("finetune-teacher", help="fine-tune the pre-trained teacher on the cloze task"))

    p = common(sub.add_parser("distill", help="run the three distillation phases"))
    p.add_argument("--rv", type=float, help="vocabulary keep fraction r_v")
    p.add_argument("--no-compress", action="store_true", help="disable vocabulary compression")
    p.add_argument("--tau-sp", type=float, help="temperature of the word-prediction loss (default 15)")
    p.add_argument("--tau-st", type=float, help="temperature of the task soft-target loss (default 1)")
    p.add_argument("--divergence", choices=["kl", "mse"], help="divergence for both soft losses")
    p.add_argument("--divergence-sp", choices=["kl", "mse"], help="divergence for the word-prediction loss")
    p.add_argument("--divergence-st", choices=["kl", "mse"], help="divergence for the task soft-target loss")
    p.add_argument("--no-unmasked", action="store_true", help="only MASKED positions enter the mask vector")
    p.add_argument("--no-mask-vector", action="store_true", help="every position, PAD included, is weighted 1")
    p.add_argument("--no-task-sp", action="store_true", help="skip word-prediction distillation on task data")
    p.add_argument("--add-inter", action="store_true", help="add hidden-state/attention loss in phases 1-2")
    p.add_argument("--add-hard", action="store_true", help="add label cross-entropy in phase 3")
    p.add_argument("--sim", choices=[k.value for k in SimilarityKind], help="token-mapping similarity")
    p.add_argument("--map-teacher", action="store_true", help="also apply token mapping to teacher inputs")
    p.add_argument("--kl-direction", choices=["teacher_ref", "student_ref"])
    p.add_argument("--pretrain-batch-size", type=int, help="batch size of the pre-training distillation phase")

    common(sub.add_parser("baseline", help="hard-label-only student with the same step budget"))

    p = common(sub.add_parser("compress-vocab", help="write a compression map from the pre-trained teacher"))
    p.add_argument("--rv", type=float)
    p.add_argument("--sim", choices=[k.value for k in SimilarityKind])
    p.add_argument("--checkpoint", type=Path, help="pre-trained teacher checkpoint (default from config)")
    p.add_argument("--out", type=Path, help="map file (default OUTPUT_DIR/compression_map.tsv)")

    for name, help_ in (("eval-ppl", "masked-LM perplexity on the validation corpus"),
                        ("eval-task", "cloze-task accuracy on the evaluation split")):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--compression-map", type=Path, help="map file for a compressed student")

    p = common(sub.add_parser("analyze-corr", help="feature-distance vs. loss rank correlations"))
    p.add_argument("--steps", type=int)
    p.add_argument("--snapshot-every", type=int)

    p = common(sub.add_parser("coverage-curve", help="token coverage by corpus-frequency rank"))
    p.add_argument("--dataset", type=Path, action="append",
                   help="dataset file(s); default: task_train and task_eval texts")
    p.add_argument("--out", type=Path)

    common(sub.add_parser("show-config", help="print the effective configuration"))
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.output_dir is not None:
        o["output_dir"] = str(args.output_dir.resolve())
    if args.command == "distill":
        d: dict = {}
        comp: dict = {}
        if args.tau_sp is not None:
            d["tau_sp"] = args.tau_sp
        if args.tau_st is not None:
            d["tau_st"] = args.tau_st
        if args.divergence:
            d["divergence_sp"] = d["divergence_st"] = args.divergence
        if args.divergence_sp:
            d["divergence_sp"] = args.divergence_sp
        if args.divergence_st:
            d["divergence_st"] = args.divergence_st
        if args.no_unmasked:
            d["include_unmasked"] = False
        if args.no_mask_vector:
            d["use_mask_vector"] = False
        if args.add_inter:
            d["add_inter"] = True
        if args.add_hard:
            d["add_hard"] = True
        if args.kl_direction:
            d["kl_direction"] = args.kl_direction
        if args.rv is not None:
            comp["r_v"] = args.rv
            comp["enabled"] = True
        if args.sim:
            comp["similarity"] = args.sim
        if args.map_teacher:
            comp["map_teacher"] = True
        if args.no_compress:
            comp["enabled"] = False
        stages: dict = {}
        if args.no_task_sp:
            stages["task_distill_sp"] = {"steps": 0}
        if args.pretrain_batch_size is not None:
            stages["pretrain_distill"] = {"batch_size": args.pretrain_batch_size}
        if d:
            o["distill"] = d
        if comp:
            o["compression"] = comp
        if stages:
            o["stages"] = stages
    if args.command == "compress-vocab":
        comp = {}
        if args.rv is not None:
            comp["r_v"] = args.rv
        if args.sim:
            comp["similarity"] = args.sim
        if comp:
            o["compression"] = comp
    if args.command == "analyze-corr":
        a = {}
        if args.steps is not None:
            a["steps"] = args.steps
        if args.snapshot_every is not None:
            a["snapshot_every"] = args.snapshot_every
        if a:
            o["analysis"] = a
    return o


def _out(cfg: dict, sub: str | None = None) -> Path:
    out = Path(cfg["output_dir"])
    if sub:
        out = out / sub
    out.mkdir(parents=True, exist_ok=True)
    return out


def _teacher_paths(cfg: dict) -> tuple[Path, Path]:
    tc = cfg["teacher_checkpoint"]
    base = Path(cfg["output_dir"]) / "teacher"
    pre = Path(tc["pretrained"]) if tc["pretrained"] else base / f"ckpt_{TEACHER_PRETRAIN}"
    ft = Path(tc["finetuned"]) if tc["finetuned"] else base / f"ckpt_{TEACHER_FINETUNE}"
    return pre, ft


def _load_teacher(path: Path, field_name: str):
    if not (path / "manifest.json").exists():
        raise ConfigError(field_name, f"no checkpoint at {path}; run the teacher commands first")
    model, _ = load_checkpoint(path)
    return model


def cmd_make_smoke_data(args, cfg) -> None:
    from . import presets
    from .synth import ZipfLanguage, cloze_task, corpus_of_size, cue_sets

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    lang = ZipfLanguage.create(seed=seed)
    (out / "corpus.txt").write_text("\n".join(corpus_of_size(args.corpus_bytes, lang, seed=seed + 1)) + "\n")
    (out / "valid.txt").write_text("\n".join(corpus_of_size(args.corpus_bytes // 10, lang, seed=seed + 2)) + "\n")
    cues = cue_sets(seed=seed)
    sizes = presets.SmokeSizes()
    write_task_file(out / "task_train.tsv", cloze_task(sizes.task_train, lang, cues, seed=seed + 3))
    write_task_file(out / "task_eval.tsv", cloze_task(sizes.task_eval, lang, cues, seed=seed + 4))
    doc = {"seed": seed, "output_dir": "run",
           "data": {"corpus": "corpus.txt", "valid": "valid.txt", "task_train": "task_train.tsv",
                    "task_eval": "task_eval.tsv"}}
    (out / "config.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(out / "config.json")


def cmd_pretrain_teacher(args, cfg) -> None:
    data = C.load_data(cfg)
    out = _out(cfg, "teacher")
    C.save_config(cfg, out / "effective_config.json")
    data.vocab.save(out / "vocab.txt")
    spec = C.stage_spec(cfg, "teacher_stages", TEACHER_PRETRAIN)
    _, _, metrics = train_teacher(C.model_config(cfg, "teacher", len(data.vocab)), data, spec, None, out)
    from .pipeline import write_metrics
    write_metrics(out / "metrics_pretrain.csv", metrics)
    print(out / f"ckpt_{TEACHER_PRETRAIN}")


def cmd_finetune_teacher(args, cfg) -> None:
    data = C.load_data(cfg)
    pre, _ = _teacher_paths(cfg)
    teacher = _load_teacher(pre, "teacher_checkpoint.pretrained")
    teacher.set_verbalizer(data.verbalizer)
    out = _out(cfg, "teacher")
    C.save_config(cfg, out / "effective_config_finetune.json")
    result = run_stage(C.stage_spec(cfg, "teacher_stages", TEACHER_FINETUNE), teacher, data, out_dir=out)
    from .pipeline import write_metrics
    write_metrics(out / "metrics_finetune.csv", result.metrics)
    print(result.checkpoint)


def cmd_distill(args, cfg) -> None:
    data = C.load_data(cfg)
    pre, ft = _teacher_paths(cfg)
    teacher = _load_teacher(pre, "teacher_checkpoint.pretrained")
    teacher_ft = _load_teacher(ft, "teacher_checkpoint.finetuned") if (ft / "manifest.json").exists() else None
    out = _out(cfg, "distill")
    C.save_config(cfg, out / "effective_config.json")
    _, report = run_glmd(teacher, C.model_config(cfg, "student", len(data.vocab)), data, C.distill_config(cfg),
                         C.schedule(cfg), C.compression(cfg), teacher_ft, out)
    print(json.dumps({"initial": report["initial"], "final": report["final"]}))


def cmd_baseline(args, cfg) -> None:
    data = C.load_data(cfg)
    out = _out(cfg, "baseline")
    C.save_config(cfg, out / "effective_config.json")
    _, report = run_hard_label_baseline(C.model_config(cfg, "student", len(data.vocab)), data,
                                        C.stage_spec(cfg, "baseline_stages", STUDENT_PRETRAIN),
                                        C.stage_spec(cfg, "baseline_stages", STUDENT_FINETUNE), out)
    print(json.dumps({"initial": report["initial"], "final": report["final"]}))


def cmd_compress_vocab(args, cfg) -> None:
    corpus = read_corpus(C.require_path(cfg, "corpus"))
    vocab = C.build_vocabulary(cfg, corpus)
    pre = args.checkpoint or _teacher_paths(cfg)[0]
    teacher = _load_teacher(pre, "teacher_checkpoint.pretrained")
    comp = cfg["compression"]
    cmap = build_compression(vocab, teacher.tok_emb, comp["r_v"], SimilarityKind(comp["similarity"]))
    path = args.out or _out(cfg) / "compression_map.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    cmap.save(path)
    print(path)


def _eval_model(args, cfg):
    data = C.load_data(cfg)
    model, _ = load_checkpoint(args.checkpoint)
    cmap = CompressionMap.load(args.compression_map) if args.compression_map else None
    if cmap is None and model.config.vocab != len(data.vocab):
        raise ConfigError("--compression-map", "checkpoint vocabulary is compressed; pass its map file")
    return data, model, cmap


def cmd_eval_ppl(args, cfg) -> None:
    data, model, cmap = _eval_model(args, cfg)
    print(json.dumps({"ppl": analysis.perplexity(model, data.valid_batches(), cmap)}))


def cmd_eval_task(args, cfg) -> None:
    data, model, cmap = _eval_model(args, cfg)
    print(json.dumps({"task_acc": analysis.task_accuracy(model, data.task_eval_batches(), cmap)}))


def cmd_analyze_corr(args, cfg) -> None:
    from .pipeline import init_student

    data = C.load_data(cfg)
    pre, _ = _teacher_paths(cfg)
    teacher = _load_teacher(pre, "teacher_checkpoint.pretrained")
    cmap = None
    comp = C.compression(cfg)
    if comp is not None:
        cmap = build_compression(data.vocab, teacher.tok_emb, comp.r_v, SimilarityKind(comp.similarity))
    student = init_student(C.model_config(cfg, "student", len(data.vocab)), data, cmap)
    spec = C.stage_spec(cfg, "stages", PRETRAIN_DISTILL)
    spec.steps = cfg["analysis"]["steps"]
    out = _out(cfg, "analysis")
    C.save_config(cfg, out / "effective_config.json")
    report = analysis.correlation_run(teacher, student, data, C.distill_config(cfg), spec,
                                      cfg["analysis"]["snapshot_every"], cmap=cmap)
    report.write(out / "correlation.csv", out / "correlation_series.csv")
    print(out / "correlation.csv")


def cmd_coverage_curve(args, cfg) -> None:
    corpus = read_corpus(C.require_path(cfg, "corpus"))
    vocab = C.build_vocabulary(cfg, corpus)
    if args.dataset:
        lines = [line for path in args.dataset for line in read_corpus(path)]
    else:
        from .corpus import read_task_file
        lines = [ex.text for key in ("task_train", "task_eval") for ex in read_task_file(C.require_path(cfg, key))]
    curve = analysis.coverage_curve(vocab, lines)
    path = args.out or _out(cfg, "analysis") / "coverage.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    curve.write(path)
    print(path)


def cmd_show_config(args, cfg) -> None:
    print(json.dumps(cfg, indent=2, sort_keys=True))


COMMANDS = {
    "make-smoke-data": cmd_make_smoke_data,
    "pretrain-teacher": cmd_pretrain_teacher,
    "finetune-teacher": cmd_finetune_teacher,
    "distill": cmd_distill,
    "baseline": cmd_baseline,
    "compress-vocab": cmd_compress_vocab,
    "eval-ppl": cmd_eval_ppl,
    "eval-task": cmd_eval_task,
    "analyze-corr": cmd_analyze_corr,
    "coverage-curve": cmd_coverage_curve,
    "show-config": cmd_show_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s")
        cfg = C.load_config(args.config, _overrides(args))
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WPDistillError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
