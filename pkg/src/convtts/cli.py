"""Command-line surface: corpus generation, training, synthesis, benchmarking,
and diagnostics (attention error proxies, speaker-embedding PCA).

Every configuration key can be overridden from the environment with
CONVTTS_<KEY> (key names upper-cased, non-alphanumerics collapsed to _).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .audio import write_wav
from .bench import throughput_bench, write_bench_csv
from .config import ModelConfig
from .corpus import ToySpec, make_toy_corpus, read_alignment, read_manifest
from .diagnostics import (attention_diagnostics, read_attention_csv,
                          speaker_pca, write_pca_csv)
from .infer import InferenceEngine
from .model import Model
from .text import PhonemeDict, encode_utterance
from .train import Trainer, prepare_dataset, resume_trainer


def _load_config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else ModelConfig.desk()
    return cfg.with_env_overrides(os.environ)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_corpus(args):
    cfg = _load_config(args)
    out = _out_dir(args)
    spec = ToySpec(alphabet_size=args.alphabet, utterances=args.utterances,
                   speakers=args.speakers)
    make_toy_corpus(out, spec, cfg.spectro(), seed=args.seed)
    print(f"wrote {args.utterances} utterances to {out}")
    return 0


def cmd_train(args):
    out = _out_dir(args)
    lexicon = PhonemeDict.load(args.lexicon) if args.lexicon else None
    if args.resume:
        model, _, _ = Model.load(args.resume)
        items, _ = prepare_dataset(args.corpus, model, holdout=args.holdout,
                                   set_stats=False)
        trainer = resume_trainer(args.resume, items, lexicon=lexicon)
    else:
        cfg = _load_config(args)
        model = Model(cfg, seed=args.seed)
        items, _ = prepare_dataset(args.corpus, model, holdout=args.holdout)
        trainer = Trainer(model, items, seed=args.seed, lexicon=lexicon)
    model.config.save(out / "model.cfg")
    trainer.run(args.steps, metrics_path=out / "metrics.csv",
                checkpoint_dir=out, quiet=args.quiet)
    trainer.save_checkpoint(out / "latest.ckpt")
    print(f"trained {args.steps} steps; checkpoint at {out / 'latest.ckpt'}")
    return 0


def cmd_synth(args):
    out = _out_dir(args)
    model, _, _ = Model.load(args.checkpoint)
    engine = InferenceEngine(model)
    seq = encode_utterance(args.text, model.table, speaker_id=args.speaker)
    result = engine.synthesize(seq, constraint=args.constraint == "on",
                               max_steps=args.max_steps, gl_seed=args.seed)
    write_wav(out / "out.wav", result.wave)
    for i, record in enumerate(result.records):
        record.to_csv(out / f"attention_layer{i}.csv")
    np.save(out / "mel.npy", result.mel)
    np.save(out / "linear.npy", result.linear)
    status = "truncated at max_steps" if result.truncated else "completed"
    print(f"synthesized {result.steps} decoder steps ({status}); "
          f"audio at {out / 'out.wav'}")
    return 0


def cmd_bench(args):
    out = _out_dir(args)
    model, _, _ = Model.load(args.checkpoint)
    engine = InferenceEngine(model, dtype=np.float32)
    if args.corpus:
        entries = read_manifest(args.corpus)[: args.utterances]
        seqs = [encode_utterance(e.text, model.table, speaker_id=e.speaker_id)
                for e in entries]
    else:
        seqs = [encode_utterance(args.text, model.table, speaker_id=args.speaker)]
    streams = [int(s) for s in args.streams.split(",")]
    rows = throughput_bench(engine, seqs, streams, duration=args.seconds,
                            gl_iterations=args.gl_iterations)
    write_bench_csv(rows, out / "bench.csv")
    for row in rows:
        print(f"streams={row.streams} qps={row.qps:.3f} "
              f"qps_audio={row.qps_audio:.3f} p50={row.p50_ms:.1f}ms "
              f"p95={row.p95_ms:.1f}ms p99={row.p99_ms:.1f}ms")
    return 0


def cmd_diag(args):
    records = [read_attention_csv(p) for p in args.records]
    alignments = None
    if args.alignments:
        if len(args.alignments) != len(records):
            raise ValueError("need one alignment per record")
        alignments = [read_alignment(p) for p in args.alignments]
    report = attention_diagnostics(records, alignments=alignments,
                                   reduction_factor=args.reduction_factor,
                                   stall_threshold=args.stall_threshold,
                                   jump_threshold=args.jump_threshold)
    print(report.summary())
    if args.out_dir:
        _out_dir(args).joinpath("attention_report.txt").write_text(
            report.summary() + "\n", encoding="utf-8")
    return 0


def cmd_pca(args):
    out = _out_dir(args)
    model, _, _ = Model.load(args.checkpoint)
    if model.speaker_embed is None:
        raise ValueError("checkpoint has no speaker embeddings (single-speaker model)")
    coords, explained = speaker_pca(model.speaker_embed.weight.data, seed=args.seed)
    write_pca_csv(coords, out / "speaker_pca.csv")
    total = max(float(np.var(model.speaker_embed.weight.data
                             - model.speaker_embed.weight.data.mean(0)).sum()), 1e-30)
    print(f"wrote {out / 'speaker_pca.csv'}; leading eigenvalues "
          f"{explained[0]:.5f}, {explained[1]:.5f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convtts",
        description="Fully-convolutional attention-based TTS at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="model configuration file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default="out", help="artifact directory")

    p = sub.add_parser("corpus", help="generate the synthetic aligned corpus")
    common(p)
    p.add_argument("--utterances", type=int, default=200)
    p.add_argument("--alphabet", type=int, default=8)
    p.add_argument("--speakers", type=int, default=1)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="train a model on a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--holdout", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--lexicon", help="pronunciation dictionary file")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize text from a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--speaker", type=int, default=0)
    p.add_argument("--constraint", choices=("on", "off"), default="on")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="concurrent-stream throughput benchmark")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--streams", default="1,2,4")
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--corpus", help="draw utterances from this corpus")
    p.add_argument("--utterances", type=int, default=8)
    p.add_argument("--text", default="HELLO.")
    p.add_argument("--speaker", type=int, default=0)
    p.add_argument("--gl-iterations", type=int)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("diag", help="attention error proxies from record CSVs")
    p.add_argument("--records", nargs="+", required=True)
    p.add_argument("--alignments", nargs="*")
    p.add_argument("--reduction-factor", type=int, default=4)
    p.add_argument("--stall-threshold", type=int, default=10)
    p.add_argument("--jump-threshold", type=int, default=4)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("pca", help="speaker-embedding principal components")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_pca)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
