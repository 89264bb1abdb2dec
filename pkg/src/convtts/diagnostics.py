"""Attention-path error proxies and the speaker-embedding PCA diagnostic.

The error counters are mechanical proxies computed from argmax paths
(regressions and stalls stand in for repeats, jumps for skips);
mispronunciation is not mechanically detectable and only shows up as
coverage anomalies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .blocks import AttentionRecord


@dataclass
class ErrorReport:
    utterances: int
    regressions: int             # repeat proxy: argmax position decreased
    stalls: int                  # repeat proxy: no advance for > stall_threshold steps
    jumps: int                   # skip proxy: advance > jump_threshold in one step
    coverage: float | None       # fraction of symbols ever argmax-attended
    mean_abs_deviation: float | None  # vs ground-truth alignment, encoder steps

    @property
    def total_proxies(self) -> int:
        return self.regressions + self.stalls + self.jumps

    def summary(self) -> str:
        lines = [
            f"utterances: {self.utterances}",
            f"repeat_proxy_regressions: {self.regressions}",
            f"repeat_proxy_stalls: {self.stalls}",
            f"skip_proxy_jumps: {self.jumps}",
        ]
        if self.coverage is not None:
            lines.append(f"coverage: {self.coverage:.4f}")
        if self.mean_abs_deviation is not None:
            lines.append(f"mean_abs_deviation: {self.mean_abs_deviation:.4f}")
        lines.append("note: mechanical proxies from argmax paths, not listening tests")
        return "\n".join(lines)


def _path_counts(path, stall_threshold, jump_threshold, regression_tolerance):
    regressions = int(np.sum(np.diff(path) < -regression_tolerance))
    jumps = int(np.sum(np.diff(path) > jump_threshold))
    stalls = 0
    run = 0
    for d in np.diff(path):
        if d <= 0:
            run += 1
            if run == stall_threshold:
                stalls += 1
        else:
            run = 0
    return regressions, stalls, jumps


def _expected_symbols(alignment, n_steps, reduction_factor):
    """Ground-truth encoder symbol for each decoder step (frame-range lookup)."""
    starts = alignment[:, 1]
    ends = alignment[:, 2]
    expected = np.zeros(n_steps, dtype=np.int64)
    for t in range(n_steps):
        center = t * reduction_factor + reduction_factor / 2.0
        hit = np.searchsorted(starts, center, side="right") - 1
        hit = min(max(hit, 0), len(alignment) - 1)
        if center > ends[-1]:
            hit = len(alignment) - 1
        expected[t] = alignment[hit, 0]
    return expected


def attention_diagnostics(records, alignments=None, reduction_factor=None,
                          stall_threshold=10, jump_threshold=4,
                          regression_tolerance=0) -> ErrorReport:
    """Count attention error proxies over one or many attention records.

    ``records`` is an AttentionRecord or a list of them (one per utterance);
    ``alignments`` optionally supplies matching ground-truth alignment arrays
    of (symbol_index, start_frame, end_frame) rows, in which case coverage
    and mean deviation are reported (reduction_factor required).
    """
    if isinstance(records, AttentionRecord):
        records = [records]
    if not records:
        raise ValueError("no attention records to analyze")
    if alignments is not None:
        if reduction_factor is None:
            raise ValueError("alignments need reduction_factor to map frames")
        if len(alignments) != len(records):
            raise ValueError("one alignment per record required")

    regressions = stalls = jumps = 0
    coverages = []
    deviations = []
    for i, rec in enumerate(records):
        path = np.asarray(rec.argmax_path)
        if path.size == 0:
            raise ValueError("empty attention record")
        r, s, j = _path_counts(path, stall_threshold, jump_threshold,
                               regression_tolerance)
        regressions += r
        stalls += s
        jumps += j
        if alignments is not None:
            aln = np.asarray(alignments[i])
            n_sym = len(aln)
            coverages.append(len(set(int(p) for p in path if p < n_sym)) / n_sym)
            expected = _expected_symbols(aln, len(path), reduction_factor)
            deviations.append(np.abs(path - expected).mean())
    return ErrorReport(
        utterances=len(records),
        regressions=regressions, stalls=stalls, jumps=jumps,
        coverage=float(np.mean(coverages)) if coverages else None,
        mean_abs_deviation=float(np.mean(deviations)) if deviations else None)


def read_attention_csv(path) -> AttentionRecord:
    """Inverse of AttentionRecord.to_csv."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_enc = sum(1 for h in header if h.startswith("enc"))
        weights = []
        argmax = []
        for row in reader:
            weights.append([float(v) for v in row[:n_enc]])
            argmax.append(int(row[n_enc]))
    return AttentionRecord(weights=np.asarray(weights),
                           argmax_path=np.asarray(argmax, dtype=np.int64))


# -- speaker embedding PCA ----------------------------------------------------


def _power_iteration(mat, rng, iters=500, tol=1e-12):
    v = rng.standard_normal(mat.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm < 1e-30:
            return v, 0.0
        w /= norm
        if np.linalg.norm(w - v) < tol:
            v = w
            break
        v = w
        lam = norm
    lam = float(v @ (mat @ v))
    return v, lam


def speaker_pca(embeddings: np.ndarray, seed=0):
    """Top-2 principal components via power iteration with deflation.

    Returns (coords (S, 2), explained (2,)) where ``explained`` holds the
    two leading eigenvalues of the covariance of the mean-centered rows.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError("need a (speakers, dims) matrix with >= 2 speakers")
    x = emb - emb.mean(axis=0)
    cov = (x.T @ x) / x.shape[0]
    rng = np.random.default_rng(seed)
    v1, lam1 = _power_iteration(cov, rng)
    cov2 = cov - lam1 * np.outer(v1, v1)
    v2, lam2 = _power_iteration(cov2, rng)
    coords = np.stack([x @ v1, x @ v2], axis=1)
    return coords, np.asarray([lam1, lam2])


def write_pca_csv(coords, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("speaker_id,pc1,pc2\n")
        for sid, (a, b) in enumerate(coords):
            fh.write(f"{sid},{a!r},{b!r}\n")


def two_means_1d(values: np.ndarray, iters=100):
    """Two-cluster 1-D k-means; returns (labels, centers)."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    c = np.asarray([lo, hi])
    labels = np.zeros(len(v), dtype=np.int64)
    for _ in range(iters):
        labels = (np.abs(v[:, None] - c[None, :])).argmin(axis=1)
        new = np.asarray([v[labels == k].mean() if np.any(labels == k) else c[k]
                          for k in (0, 1)])
        if np.allclose(new, c):
            break
        c = new
    return labels, c


def cluster_purity(labels, groups) -> float:
    """Best-case agreement between 2-way labels and binary ground truth."""
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    match = np.mean(labels == groups)
    return float(max(match, 1.0 - match))
