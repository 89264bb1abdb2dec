"""Optimization loop: Adam with dual gradient clipping, learning-rate
annealing, deterministic length-bucketed batching, and checkpoint cadence.

All randomness (batch order, dropout, per-iteration phoneme substitution)
is derived from (seed, step), so a run can be resumed from a checkpoint
bit-for-bit and identical seeds give identical loss traces.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import dataset_position_ratio, read_manifest, utterance_features
from .model import Model, Targets
from .text import (PhonemeDict, SymbolSequence, encode_mixed, encode_utterance,
                   normalize_text)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the last checkpoint stays intact."""


def clip_gradients(grads: dict, max_value: float, max_norm: float):
    """Clamp each gradient elementwise, then rescale all to the norm budget.

    Returns (grads, pre-rescale norm, post-rescale norm).  Mutates in place.
    """
    if max_value > 0:
        for g in grads.values():
            np.clip(g, -max_value, max_value, out=g)
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    clipped = total
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
        clipped = max_norm
    return grads, total, clipped


class Adam:
    """Adam with first/second moment accumulators and a mutable lr."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.step_count = 0

    def apply(self, grads: dict):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def anneal(self, rate, interval):
        """lr <- lr * rate every `interval` steps; no-op when disabled."""
        if rate > 0 and interval > 0 and self.step_count % interval == 0:
            self.lr *= rate

    def state_arrays(self):
        out = {"opt.scalars": np.asarray([float(self.step_count), self.lr])}
        for name, _ in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays):
        scalars = arrays["opt.scalars"]
        self.step_count = int(scalars[0])
        self.lr = float(scalars[1])
        for name, p in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].astype(p.data.dtype, copy=True)
            self.v[name] = arrays[f"opt.v.{name}"].astype(p.data.dtype, copy=True)


@dataclass
class TrainItem:
    seq: SymbolSequence          # character-level encoding
    targets: Targets
    text: str                    # normalized text, for per-step re-encoding
    alignment_path: str | None = None


def prepare_dataset(corpus_dir, model: Model, holdout=0, set_stats=True):
    """Load a corpus, compute normalization stats, and build train items.

    The last ``holdout`` utterances are kept out of training (and out of the
    statistics).  Returns (train_items, holdout_items).
    """
    corpus_dir = Path(corpus_dir)
    cfg = model.config
    spectro = cfg.spectro()
    entries = read_manifest(corpus_dir)
    if holdout >= len(entries):
        raise ValueError("holdout leaves no training data")
    split = len(entries) - holdout

    seqs, mels, linears, lengths = [], [], [], []
    for entry in entries:
        seq = encode_utterance(entry.text, model.table, speaker_id=entry.speaker_id)
        mel, linear, n_frames = utterance_features(corpus_dir, entry, spectro,
                                                   floor=cfg.log_floor)
        seqs.append(seq)
        mels.append(mel)
        linears.append(linear)
        lengths.append(n_frames)

    if set_stats:
        train_mel = np.concatenate(mels[:split])
        train_lin = np.concatenate(linears[:split])
        model.stats.mel_mean = train_mel.mean(axis=0)
        model.stats.mel_std = np.maximum(train_mel.std(axis=0), 1e-3)
        model.stats.lin_mean = train_lin.mean(axis=0)
        model.stats.lin_std = np.maximum(train_lin.std(axis=0), 1e-3)
        ratio = dataset_position_ratio(corpus_dir, entries[:split], spectro,
                                       [len(s.ids) for s in seqs[:split]])
        model.set_position_ratio(ratio)

    items = []
    for i, entry in enumerate(entries):
        mel_n = model.stats.normalize_mel(mels[i]).astype(model.dtype)
        lin_n = model.stats.normalize_linear(linears[i]).astype(model.dtype)
        targets = model.prepare_targets(mel_n, lin_n, n_real=lengths[i])
        align = corpus_dir / "align" / entry.audio_path.replace(".wav", ".csv")
        items.append(TrainItem(seq=seqs[i], targets=targets,
                               text=normalize_text(entry.text),
                               alignment_path=str(align) if align.exists() else None))
    return items[:split], items[split:]


class Trainer:
    """Deterministic training loop over prepared items."""

    METRIC_COLUMNS = ("mel_l1", "done_bce", "linear_l1", "total", "lr")

    def __init__(self, model: Model, items, seed=0, lexicon: PhonemeDict | None = None):
        if not items:
            raise ValueError("no training items")
        self.model = model
        self.items = items
        self.seed = int(seed)
        self.lexicon = lexicon
        cfg = model.config
        self.adam = Adam(model.params(), cfg.learning_rate,
                         cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
        # bucket by encoder length so batches pad as little as possible
        order = np.argsort([len(it.seq.ids) for it in items], kind="stable")
        bs = max(1, cfg.batch_size)
        self.batches = [order[i : i + bs] for i in range(0, len(order), bs)]

    # -- determinism helpers ------------------------------------------------

    def _batch_for(self, step):
        n = len(self.batches)
        epoch, slot = divmod(step, n)
        perm = np.random.default_rng([self.seed, 7, epoch]).permutation(n)
        return self.batches[perm[slot]]

    def _step_rng(self, step):
        return np.random.default_rng([self.seed, 11, step])

    def _sequence_for(self, item: TrainItem, step, index):
        """Per-iteration phoneme substitution for mixed-input models."""
        cfg = self.model.config
        if not (cfg.mixed_inputs and self.lexicon is not None
                and cfg.phoneme_probability > 0):
            return item.seq
        mixed = encode_mixed(item.text, self.lexicon, self.model.table,
                             cfg.phoneme_probability,
                             rng_seed=[self.seed, 13, step, index])
        return SymbolSequence(mixed.ids, item.seq.speaker_id, mixed.source_text)

    # -- the step -------------------------------------------------------------

    def train_step(self):
        """Forward, backward, clip, Adam update, anneal; returns the breakdown."""
        cfg = self.model.config
        step = self.adam.step_count
        batch = self._batch_for(step)
        rng = self._step_rng(step)
        self.model.zero_grads()
        agg = {}
        total = 0.0
        scale = 1.0 / len(batch)
        for index in batch:
            item = self.items[index]
            seq = self._sequence_for(item, step, int(index))
            loss, breakdown, _, _ = self.model.forward_teacher(
                seq, item.targets, training=True, rng=rng)
            (loss * scale).backward()
            for k, v in breakdown.items():
                agg[k] = agg.get(k, 0.0) + v * scale
            total += float(loss.data) * scale
        if not np.isfinite(total):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: {agg}")
        grads = {}
        for name, p in self.adam.params:
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        clip_gradients(grads, cfg.gradient_clip_value, cfg.max_gradient_norm)
        self.adam.apply(grads)
        self.adam.anneal(cfg.anneal_rate, cfg.anneal_interval)
        agg["total"] = total
        agg["lr"] = self.adam.lr
        return agg

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, path):
        self.model.save(path, extra_arrays=self.adam.state_arrays(),
                        extra_meta={"trainer": {"seed": self.seed}})

    def restore_optimizer(self, extras):
        self.adam.load_state(extras)

    # -- the loop ---------------------------------------------------------------

    def run(self, steps, metrics_path=None, checkpoint_dir=None, quiet=True):
        """Train for ``steps`` more steps, logging metrics and checkpoints."""
        cfg = self.model.config
        metrics_fh = None
        if metrics_path is not None:
            new_file = not Path(metrics_path).exists()
            metrics_fh = open(metrics_path, "a", encoding="utf-8")
            if new_file:
                metrics_fh.write("step," + ",".join(self.METRIC_COLUMNS)
                                 + ",wall_time\n")
        ckdir = None
        if checkpoint_dir is not None:
            ckdir = Path(checkpoint_dir)
            ckdir.mkdir(parents=True, exist_ok=True)
        history = []
        try:
            for _ in range(steps):
                t0 = time.perf_counter()
                breakdown = self.train_step()
                wall = time.perf_counter() - t0
                step = self.adam.step_count
                history.append(breakdown)
                if metrics_fh is not None:
                    row = [str(step)]
                    row += [repr(float(breakdown.get(c, 0.0)))
                            for c in self.METRIC_COLUMNS]
                    row.append(f"{wall:.6f}")
                    metrics_fh.write(",".join(row) + "\n")
                if not quiet and step % 100 == 0:
                    print(f"step {step}: total={breakdown['total']:.4f} "
                          f"mel={breakdown['mel_l1']:.4f}")
                if ckdir is not None and step % cfg.checkpoint_interval == 0:
                    self.save_checkpoint(ckdir / "latest.ckpt")
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        if ckdir is not None:
            self.save_checkpoint(ckdir / "latest.ckpt")
        return history


def resume_trainer(checkpoint_path, items, lexicon=None):
    """Rebuild a Trainer from a training checkpoint, bit-for-bit."""
    model, extras, meta = Model.load(checkpoint_path)
    seed = meta.get("trainer", {}).get("seed", 0)
    trainer = Trainer(model, items, seed=seed, lexicon=lexicon)
    if "opt.scalars" in extras:
        trainer.restore_optimizer(extras)
    return trainer
