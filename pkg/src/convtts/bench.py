"""Concurrent-stream synthesis throughput harness.

Each stream is an OS process running the fused inference path over its own
mutable state; folded model weights are shared read-only (copy-on-write
under fork).  Reports raw and audio-normalized queries per second plus
latency percentiles per stream count.
"""

from __future__ import annotations

import hashlib
import multiprocessing as mp
import os
import time
from dataclasses import dataclass

import numpy as np

from .infer import InferenceEngine


@dataclass
class BenchRow:
    streams: int
    queries: int
    wall_seconds: float
    qps: float                 # completed queries / wall seconds
    qps_audio: float           # audio seconds synthesized / wall second
    p50_ms: float
    p95_ms: float
    p99_ms: float
    digest: str                # sha256 of the first query's audio samples

    def csv_row(self):
        return (f"{self.streams},{self.queries},{self.wall_seconds:.6f},"
                f"{self.qps:.6f},{self.qps_audio:.6f},"
                f"{self.p50_ms:.3f},{self.p95_ms:.3f},{self.p99_ms:.3f}")


CSV_HEADER = "streams,queries,wall_seconds,qps,qps_audio,p50_ms,p95_ms,p99_ms"


def synthesis_digest(engine: InferenceEngine, seq, **kwargs) -> str:
    res = engine.synthesize(seq, **kwargs)
    return hashlib.sha256(res.wave.samples.tobytes()).hexdigest()


def _stream_worker(engine, utterances, duration, start_evt, out_q, worker_id,
                   gl_iterations):
    start_evt.wait()
    deadline = time.perf_counter() + duration
    latencies = []
    audio_seconds = 0.0
    digest = ""
    i = 0
    while time.perf_counter() < deadline:
        seq = utterances[i % len(utterances)]
        t0 = time.perf_counter()
        res = engine.synthesize(seq, gl_iterations=gl_iterations)
        latencies.append(time.perf_counter() - t0)
        audio_seconds += res.wave.duration
        if i == 0:
            digest = hashlib.sha256(res.wave.samples.tobytes()).hexdigest()
        i += 1
    out_q.put((worker_id, latencies, audio_seconds, digest))


def _context():
    if hasattr(os, "fork"):
        return mp.get_context("fork")
    return mp.get_context()


def throughput_bench(model_or_engine, utterances, stream_counts,
                     duration=5.0, dtype=None, gl_iterations=None):
    """Run the stream sweep; returns one BenchRow per stream count.

    Streams never share mutable state: each worker process owns its decode
    buffers, and weights are only read.
    """
    if isinstance(model_or_engine, InferenceEngine):
        engine = model_or_engine
    else:
        engine = InferenceEngine(model_or_engine, dtype=dtype)
    if not utterances:
        raise ValueError("need at least one utterance to benchmark")
    ctx = _context()
    rows = []
    for n in stream_counts:
        if n < 1:
            raise ValueError("stream counts must be >= 1")
        out_q = ctx.Queue()
        start = ctx.Event()
        procs = [
            ctx.Process(target=_stream_worker,
                        args=(engine, utterances, duration, start, out_q, w,
                              gl_iterations))
            for w in range(n)
        ]
        for p in procs:
            p.start()
        t0 = time.perf_counter()
        start.set()
        results = [out_q.get() for _ in range(n)]
        wall = time.perf_counter() - t0
        for p in procs:
            p.join(timeout=duration + 120)
        latencies = np.concatenate([np.asarray(r[1]) for r in results
                                    if r[1]]) if any(r[1] for r in results) else np.asarray([0.0])
        queries = int(sum(len(r[1]) for r in results))
        audio = float(sum(r[2] for r in results))
        digest = next((r[3] for r in sorted(results) if r[3]), "")
        rows.append(BenchRow(
            streams=n, queries=queries, wall_seconds=wall,
            qps=queries / wall, qps_audio=audio / wall,
            p50_ms=float(np.percentile(latencies, 50) * 1e3),
            p95_ms=float(np.percentile(latencies, 95) * 1e3),
            p99_ms=float(np.percentile(latencies, 99) * 1e3),
            digest=digest))
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.csv_row() + "\n")
