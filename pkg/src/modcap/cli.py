"""Command line interface.

Exit codes: 0 success, 1 usage or configuration problems, 2 unreadable
or inconsistent data, 3 numeric failures (divergence, failed gradient
checks).  The resolved configuration echoes to stderr before any long
command so runs are auditable; result payloads go to stdout as JSON.
The CNM_SEED environment variable supplies the default seed when --seed
is not given.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace

from . import __version__
from .config import ModelConfig, TrainConfig, apply_preset, validate_run
from .corpus import (
    CorpusSpec,
    FeatureSynthesizer,
    few_shot_subset,
    generate_corpus,
    load_corpus,
    save_corpus,
)
from .decoder import CaptionModel, beam_search, greedy_decode, sample_decode, strip_sequence
from .errors import (
    ConfigError,
    CorpusSpecError,
    DataError,
    FormatError,
    TrainingError,
)
from .gradcheck import DEFAULT_TOLERANCE, SECTIONS, run_battery
from .tensor import Rng, no_grad
from .trace import render_svg, trace_example, trace_generated
from .training import (
    MODEL_INIT_TAG,
    evaluate_split,
    restore_training,
    teacher_forced_metrics,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

LOG = logging.getLogger("modcap.cli")

DEFAULT_ABLATION = "Module/O,Col/1,Col/S,Col/S+L,CNM#2"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; 2 means unreadable data here, so
    usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get("CNM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"CNM_SEED must be an integer, got {raw!r}") from None


def _seed_of(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _echo_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    doc = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


def _emit(payload: dict, out_path: str | None = None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=1)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
    print(text)


def _build_configs(args, vocab_size: int):
    """Defaults, then the preset, then explicit flags on top."""
    model_cfg = ModelConfig(vocab_size=vocab_size)
    train_cfg = TrainConfig(seed=_seed_of(args))
    if getattr(args, "preset", None):
        model_cfg, train_cfg = apply_preset(args.preset, model_cfg, train_cfg)
    model_over = {}
    if getattr(args, "d_v", None) is not None:
        model_over["d_v"] = args.d_v
        model_over["d_c"] = args.d_v
    for flag in ("d_a", "heads", "m_units", "strategy"):
        value = getattr(args, flag, None)
        if value is not None:
            model_over[flag] = value
    if model_over:
        model_cfg = replace(model_cfg, **model_over)
    train_over = {}
    for flag in ("xe_epochs", "rl_epochs", "batch_size", "lr", "max_len"):
        value = getattr(args, flag, None)
        if value is not None:
            train_over[flag] = value
    if getattr(args, "linguistic", None) is not None:
        train_over["linguistic"] = args.linguistic
    if train_over:
        train_cfg = replace(train_cfg, **train_over)
    validate_run(model_cfg, train_cfg)
    return model_cfg, train_cfg


def _open_run(args):
    """Shared loader for commands that need a checkpoint plus its corpus."""
    corpus = load_corpus(args.data)
    restored = restore_training(args.checkpoint)
    if restored.vocab.tokens != corpus.vocab.tokens:
        raise DataError("checkpoint vocabulary does not match the corpus; "
                        "was the model trained on different data?")
    synth = FeatureSynthesizer(corpus.spec)
    return corpus, restored, synth


def _find_scene(corpus, scene_id: int):
    for scene in corpus.scenes:
        if scene.scene_id == scene_id:
            return scene
    raise DataError(f"scene {scene_id} is not in the corpus")


# -- commands -----------------------------------------------------------------


def cmd_corpus(args) -> int:
    spec = CorpusSpec(n_scenes=args.scenes, k_min=args.k_min, k_max=args.k_max,
                      captions_per_scene=args.captions,
                      noise_sigma=args.noise_sigma, seed=_seed_of(args))
    corpus = generate_corpus(spec)
    save_corpus(corpus, args.out)
    _emit({
        "out": args.out,
        "scenes": len(corpus.scenes),
        "captions": len(corpus.examples),
        "vocab": len(corpus.vocab),
        "splits": {name: len(corpus.scenes_in(name))
                   for name in ("train", "val", "test")},
    })
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = load_corpus(args.data)
    synth = FeatureSynthesizer(corpus.spec)
    if args.resume:
        restored = restore_training(args.out)
        if restored.vocab.tokens != corpus.vocab.tokens:
            raise DataError("checkpoint vocabulary does not match the corpus")
        model, train_cfg = restored.model, restored.train_cfg
        _echo_config(model.cfg, train_cfg)
        state = train(model, corpus, synth, train_cfg,
                      opt=restored.opt, rng=restored.rng,
                      start_epoch=restored.epoch, history=restored.history,
                      checkpoint_path=args.out, max_epochs=args.max_epochs,
                      log_fn=LOG.info)
    else:
        model_cfg, train_cfg = _build_configs(args, len(corpus.vocab))
        _echo_config(model_cfg, train_cfg)
        model = CaptionModel(model_cfg, Rng(train_cfg.seed).derive(MODEL_INIT_TAG))
        examples = None
        if args.few_shot is not None:
            examples = few_shot_subset(corpus.examples_in("train"),
                                       args.few_shot, train_cfg.seed)
        state = train(model, corpus, synth, train_cfg,
                      checkpoint_path=args.out, examples=examples,
                      max_epochs=args.max_epochs, log_fn=LOG.info)
    last = state.history[-1] if state.history else {}
    _emit({
        "checkpoint": args.out,
        "epochs_done": state.epoch,
        "val_token_acc": last.get("val_token_acc"),
        "val_ctrl_agree": last.get("val_ctrl_agree"),
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus, restored, synth = _open_run(args)
    _echo_config(restored.model.cfg, restored.train_cfg)
    mode = "greedy" if args.greedy else "beam"
    report = evaluate_split(restored.model, corpus, synth, args.split,
                            mode=mode, beam_width=args.beam,
                            max_len=args.max_len or restored.train_cfg.max_len)
    report.update(teacher_forced_metrics(restored.model, corpus, synth, args.split))
    _emit(report, args.out)
    return EXIT_OK


def cmd_caption(args) -> int:
    corpus, restored, synth = _open_run(args)
    model = restored.model
    max_len = args.max_len or restored.train_cfg.max_len
    scenes = ([_find_scene(corpus, args.scene)] if args.scene is not None
              else corpus.scenes_in(args.split))
    rng = Rng(_seed_of(args)).derive(313)
    with no_grad():
        for scene in scenes:
            enc = model.encode(*synth.features(scene))
            if args.sample:
                tokens, _ = sample_decode(model, enc, rng, max_len)
            elif args.greedy:
                tokens = greedy_decode(model, enc, max_len)
            else:
                tokens = list(beam_search(model, enc, args.beam, max_len)[0].tokens)
            words = corpus.vocab.decode(strip_sequence(tokens))
            print(f"{scene.scene_id}\t{' '.join(words)}")
    return EXIT_OK


def cmd_trace(args) -> int:
    corpus, restored, synth = _open_run(args)
    _echo_config(restored.model.cfg, restored.train_cfg)
    scene = _find_scene(corpus, args.scene)
    if args.generated:
        doc = trace_generated(restored.model, corpus, synth, scene,
                              max_len=args.max_len or restored.train_cfg.max_len)
    else:
        example = next((e for e in corpus.examples
                        if e.scene_id == scene.scene_id and e.slot == args.slot),
                       None)
        if example is None:
            raise DataError(f"scene {scene.scene_id} has no caption slot {args.slot}")
        doc = trace_example(restored.model, corpus, synth, example)
    if args.svg:
        with open(args.svg, "w") as fh:
            fh.write(render_svg(doc, all_units=args.all_units))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        summary = {"kind": doc["kind"], "out": args.out, "steps": len(doc["steps"])}
        if args.svg:
            summary["svg"] = args.svg
        print(json.dumps(summary, sort_keys=True))
    else:
        print(json.dumps(doc, sort_keys=True, indent=1))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    sections = tuple(s.strip() for s in args.sections.split(","))
    unknown = [s for s in sections if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown gradcheck sections {unknown}; "
                          f"choose from {', '.join(SECTIONS)}")
    results = run_battery(sections=sections, seed=_seed_of(args), tol=args.tol)
    failures = 0
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        failures += 0 if r.ok else 1
        print(f"{status} {r.section:<11} {r.name:<44} {r.error:.3e}")
    print(f"{len(results) - failures}/{len(results)} gradient checks passed "
          f"(tolerance {args.tol:g})")
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


_ABLATION_FIELDS = ("preset", "bleu1", "bleu2", "bleu3", "bleu4", "cider_d",
                    "token_acc", "ctrl_agree", "recall_adjective", "recall_noun",
                    "recall_preposition", "recall_quantifier", "recall_verb",
                    "runtime_seconds")


def cmd_ablate(args) -> int:
    corpus = load_corpus(args.data)
    synth = FeatureSynthesizer(corpus.spec)
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    rows = []
    for preset in presets:
        run_args = argparse.Namespace(**{**vars(args), "preset": preset})
        model_cfg, train_cfg = _build_configs(run_args, len(corpus.vocab))
        _echo_config(model_cfg, train_cfg)
        model = CaptionModel(model_cfg, Rng(train_cfg.seed).derive(MODEL_INIT_TAG))
        started = time.perf_counter()
        train(model, corpus, synth, train_cfg, log_fn=LOG.info)
        runtime = time.perf_counter() - started
        report = evaluate_split(model, corpus, synth, "val",
                                mode="beam", beam_width=args.beam,
                                max_len=train_cfg.max_len)
        forced = teacher_forced_metrics(model, corpus, synth, "val")
        row = {
            "preset": preset,
            "bleu1": report["bleu1"],
            "bleu2": report["bleu2"],
            "bleu3": report["bleu3"],
            "bleu4": report["bleu4"],
            "cider_d": report["cider_d"],
            "token_acc": forced["token_acc"],
            "ctrl_agree": forced["ctrl_agree"],
            "runtime_seconds": round(runtime, 3),
        }
        for name, value in report["pos_recall"].items():
            row[f"recall_{name}"] = value
        rows.append(row)
    rows.sort(key=lambda r: r["preset"])

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablation.csv")
    json_path = os.path.join(args.out, "ablation.json")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_ABLATION_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row[k] is None else row[k])
                             for k in _ABLATION_FIELDS})
    with open(json_path, "w") as fh:
        json.dump({"note": "runtime_seconds is informational and varies "
                           "between runs; every other column is deterministic "
                           "in the seed",
                   "rows": rows}, fh, sort_keys=True, indent=1)
        fh.write("\n")
    _emit({"csv": csv_path, "json": json_path, "presets": [r["preset"] for r in rows]})
    return EXIT_OK


# -- wiring --------------------------------------------------------------------


def _add_seed(p):
    p.add_argument("--seed", type=int, default=None,
                   help="seed (default: CNM_SEED env var, else 0)")


def _add_model_flags(p):
    p.add_argument("--preset", default=None,
                   help="named configuration, e.g. CNM#2 or Col/S+L")
    p.add_argument("--d-v", dest="d_v", type=int, default=None,
                   help="module value width (also sets the LSTM width)")
    p.add_argument("--d-a", dest="d_a", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--m-units", dest="m_units", type=int, default=None)
    p.add_argument("--strategy", choices=("soft", "hard", "uniform"), default=None)
    p.add_argument("--linguistic", action=argparse.BooleanOptionalAction,
                   default=None, help="word-class supervision of the controller")


def _add_train_flags(p):
    p.add_argument("--xe-epochs", dest="xe_epochs", type=int, default=None)
    p.add_argument("--rl-epochs", dest="rl_epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--max-len", dest="max_len", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="modcap",
                     description="Modular caption models on procedural scenes")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="generate a scene corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=500)
    p.add_argument("--k-min", dest="k_min", type=int, default=3)
    p.add_argument("--k-max", dest="k_max", type=int, default=6)
    p.add_argument("--captions", type=int, default=5)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.05)
    _add_seed(p)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint at --out")
    p.add_argument("--few-shot", dest="few_shot", type=int, default=None,
                   help="cap captions per training scene")
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None,
                   help="stop after this many epochs this invocation")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    p.add_argument("--out", default=None, help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("caption", help="decode captions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--sample", action="store_true")
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    _add_seed(p)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("trace", help="record module weights for one caption")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--slot", type=int, default=0, help="gold caption to replay")
    p.add_argument("--generated", action="store_true",
                   help="trace a greedy decode instead of a gold caption")
    p.add_argument("--out", default=None, help="trace JSON path (default stdout)")
    p.add_argument("--svg", default=None, help="also render an SVG here")
    p.add_argument("--all-units", dest="all_units", action="store_true",
                   help="draw every decoder unit, not just the last")
    p.add_argument("--max-len", dest="max_len", type=int, default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--sections", default=",".join(SECTIONS))
    p.add_argument("--tol", type=float, default=DEFAULT_TOLERANCE)
    _add_seed(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score a grid of presets")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for ablation.{csv,json}")
    p.add_argument("--presets", default=DEFAULT_ABLATION)
    p.add_argument("--beam", type=int, default=5)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"modcap: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusSpecError, DataError, FormatError) as exc:
        print(f"modcap: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as exc:
        print(f"modcap: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
