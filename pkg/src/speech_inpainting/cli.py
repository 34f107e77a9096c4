"""Command-line entry point: ``speech-inpainting <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import ModelError
from .dsp import ContractError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

log = logging.getLogger("speech_inpainting")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _records(args):
    from .corpus import build_manifest, read_manifest
    if getattr(args, "manifest", None):
        return read_manifest(args.manifest)
    if getattr(args, "root", None):
        return build_manifest(args.root, args.split)
    raise UsageError("give --manifest or --root")


def _segments(records, max_segments):
    from .corpus import iter_segments
    out = []
    for sid, seg in iter_segments(records):
        if max_segments is not None and len(out) >= max_segments:
            break
        out.append((sid, seg))
    if not out:
        raise ContractError("no 1024 ms segments found in the selected utterances")
    return out


def _stats(path):
    from .dsp import ChannelStats
    if not path:
        raise UsageError("--stats is required")
    return ChannelStats.load(path)


def _train_config(args, **defaults):
    from .training import load_config
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    for key in ("epochs", "lr", "mode", "fill_mode", "loss", "filter_scale"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides, **defaults)


# --------------------------------------------------------------------------
# subcommands

def cmd_prepare_data(args):
    from .corpus import build_manifest, write_manifest
    if args.synthetic:
        from .synth import build_corpus
        build_corpus(Path(args.root) / args.split, n_speakers=args.synthetic,
                     seed=args.seed or 0)
    records = build_manifest(args.root, args.split)
    write_manifest(records, args.out)
    print(f"{len(records)} utterances -> {args.out}")


def cmd_compute_stats(args):
    from .dsp import analyze, compute_stats
    segs = _segments(_records(args), args.max_segments)
    stats = compute_stats(analyze(s)[0] for _, s in segs)
    stats.save(args.out)
    print(f"statistics over {len(segs)} segments -> {args.out}")


def cmd_build_vocab(args):
    from .corpus import build_vocabulary
    vocab = build_vocabulary(_records(args), size=args.size)
    vocab.save(args.out)
    note = " (short vocabulary)" if vocab.short else ""
    print(f"{len(vocab)} words -> {args.out}{note}")


def cmd_pretrain_vgg(args):
    from .corpus import Vocabulary, read_alignments, word_sample_set
    from .feature_loss import save_extractor
    from .training import pretrain_extractor
    cfg = _train_config(args, phase="PretrainVGG", checkpoint_dir=args.out_dir,
                        log_path=str(Path(args.out_dir) / "pretrain_log.jsonl"))
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.load(args.vocab)
    stats = _stats(args.stats)
    records = _records(args)
    x, y = word_sample_set(records, read_alignments(args.alignments), vocab, stats,
                           seed=cfg.seed, max_per_word=args.max_per_word)
    result = pretrain_extractor(cfg, x, y, vocab.words)
    out = Path(args.out_dir) / "speechvgg.npz"
    save_extractor(result.model, out, vocab.words)
    print(f"extractor trained on {len(x)} word samples -> {out}")


def cmd_train(args):
    from .feature_loss import load_extractor
    from .training import LossKind, segment_magnitudes, train_inpainter
    from .unet import save_weights
    cfg = _train_config(args, phase="TrainInpainter", checkpoint_dir=args.out_dir,
                        log_path=str(Path(args.out_dir) / "train_log.jsonl"))
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    stats = _stats(args.stats)
    extractor = None
    if cfg.loss is LossKind.DEEP_FEATURE:
        if not args.extractor:
            raise ModelError("deep-feature loss needs --extractor")
        extractor, _ = load_extractor(args.extractor)
    segs = _segments(_records(args), args.max_segments)
    data = segment_magnitudes([s for _, s in segs], stats)
    result = train_inpainter(cfg, data, extractor, resume=args.resume)
    out = Path(args.out_dir) / "unet.npz"
    save_weights(result.model, out, extra={"steps": result.state.step})
    print(f"inpainter trained for {result.state.step} steps -> {out}")


def _parse_models(pairs):
    from .unet import load_weights
    models = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--model expects SCENARIO=PATH, got {pair!r}")
        label, path = pair.split("=", 1)
        models[label] = load_weights(path)
    return models


def cmd_evaluate(args):
    from .evaluation import EvalConfig, build_conditions, render_report, run_grid
    from .masks import EVAL_SIZES, MaskKind
    sizes = [float(s) for s in _csv_list(args.sizes)] if args.sizes else list(EVAL_SIZES)
    kinds = [MaskKind(k) for k in _csv_list(args.intrusions)] if args.intrusions \
        else list(MaskKind)
    scenarios = _csv_list(args.scenarios) if args.scenarios else ["Gaps", "Noise"]
    conditions = build_conditions(kinds, sizes, scenarios)
    models = _parse_models(args.model)
    stats = _stats(args.stats) if args.stats else None
    segs = _segments(_records(args), args.max_segments)
    cfg = EvalConfig(seed=args.seed or 0, workers=args.workers or 1,
                     use_pesq=not args.no_pesq, lws_iterations=args.lws_iterations,
                     composite=args.composite)
    records = run_grid(conditions, segs, models, stats, cfg, out_csv=args.out_csv)
    print(render_report(records))
    if any(r.note.startswith("error") for r in records):
        log.warning("some conditions failed; see the log")


def cmd_inpaint(args):
    from .evaluation import inpaint_file, save_report_json
    from .masks import Mask, MaskSpec
    from .unet import load_weights
    model = load_weights(args.model)
    if args.mask_file:
        mask = Mask.load(args.mask_file)
    else:
        mask = MaskSpec(args.mask_kind, args.coverage, args.seed or 0)
    report = inpaint_file(args.input, model, mask, args.output, stats=_stats(args.stats),
                          reference_wav=args.reference, composite=not args.no_composite,
                          lws_iterations=args.lws_iterations)
    if args.report:
        save_report_json(report, args.report)
    print(json.dumps(report, indent=2))


def cmd_report(args):
    from .evaluation import records_from_csv, render_report
    print(render_report(records_from_csv(args.csv), out_dir=args.out_dir))


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="speech-inpainting",
                description="Spectrogram speech inpainting experiments.")
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--device-hint", default="cpu",
                   help="preferred torch device; computation currently runs on the CPU")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(sp, split_default="train-clean-100"):
        sp.add_argument("--manifest", help="JSON-lines manifest")
        sp.add_argument("--root", help="LibriSpeech-layout corpus root")
        sp.add_argument("--split", default=split_default)

    sp = sub.add_parser("prepare-data", help="scan a corpus and write a manifest")
    sp.add_argument("--root", required=True)
    sp.add_argument("--split", default="train-clean-100")
    sp.add_argument("--out", required=True)
    sp.add_argument("--synthetic", type=int, metavar="N_SPEAKERS",
                    help="first synthesize an N-speaker corpus under ROOT/SPLIT")
    sp.set_defaults(func=cmd_prepare_data)

    sp = sub.add_parser("compute-stats", help="per-channel log-magnitude statistics")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-segments", type=int)
    sp.set_defaults(func=cmd_compute_stats)

    sp = sub.add_parser("build-vocab", help="most frequent long words")
    data_args(sp)
    sp.add_argument("--size", type=int, default=1000)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_vocab)

    sp = sub.add_parser("pretrain-vgg", help="train the word-classifier extractor")
    data_args(sp)
    sp.add_argument("--alignments", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--max-per-word", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(func=cmd_pretrain_vgg)

    sp = sub.add_parser("train", help="train the inpainting U-Net")
    data_args(sp)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--extractor")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--mode", choices=["Informed", "Blind"])
    sp.add_argument("--fill-mode", dest="fill_mode",
                    choices=["Zeros", "WhiteNoise", "AdditiveNoise"])
    sp.add_argument("--loss", choices=["DeepFeature", "Pixel"])
    sp.add_argument("--filter-scale", dest="filter_scale", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--max-segments", type=int)
    sp.add_argument("--resume", help="run-state file to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="score a condition grid")
    data_args(sp, split_default="dev-clean")
    sp.add_argument("--stats")
    sp.add_argument("--sizes", help="comma list, e.g. 0.1,0.2")
    sp.add_argument("--intrusions", help="comma list of Time,TimeFreq,Random")
    sp.add_argument("--scenarios", help="comma list, e.g. Gaps,Noise,LPC,Informed")
    sp.add_argument("--model", action="append", metavar="SCENARIO=PATH")
    sp.add_argument("--max-segments", type=int)
    sp.add_argument("--out-csv")
    sp.add_argument("--no-pesq", action="store_true")
    sp.add_argument("--composite", action="store_true")
    sp.add_argument("--lws-iterations", type=int, default=100)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("inpaint", help="restore a single file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--stats", required=True)
    sp.add_argument("--mask-file")
    sp.add_argument("--mask-kind", default="Time", choices=["Time", "TimeFreq", "Random"])
    sp.add_argument("--coverage", type=float, default=0.2)
    sp.add_argument("--reference")
    sp.add_argument("--report")
    sp.add_argument("--no-composite", action="store_true")
    sp.add_argument("--lws-iterations", type=int, default=100)
    sp.set_defaults(func=cmd_inpaint)

    sp = sub.add_parser("report", help="render a results CSV as a table and plots")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.device_hint != "cpu":
        log.warning("device hint %r ignored; running on the CPU", args.device_hint)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (ContractError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
