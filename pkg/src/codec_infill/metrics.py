"""Objective signal metrics: DTW alignment, MCD, F0 and energy distances.

Generated and reference signals can differ in length, so every distance
first time-aligns the two feature tracks with dynamic time warping
(symmetric step set {(1,0), (0,1), (1,1)}, Euclidean local distance) and
then averages the pointwise measure along the alignment path.

Front-end constants: Hann window of 640 samples, hop 160, FFT 1024,
40 HTK-spaced triangular mel bands, log floor 1e-10, cepstral
coefficients 1..13 (the gain coefficient 0 is excluded).  The F0
extractor is a normalized-autocorrelation peak search restricted to
80..600 Hz with a 0.3 voicing threshold; energy is the RMS of the
magnitude spectrogram per frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct, rfft
from scipy.signal import get_window

from .errors import InvalidInputError

MCD_SCALE = 10.0 / np.log(10.0)


@dataclass
class SpectrogramConfig:
    window_length: int = 640
    hop: int = 160
    fft_size: int = 1024
    mel_bands: int = 40
    mfcc_order: int = 13
    sample_rate: int = 16000
    log_floor: float = 1e-10

    def __post_init__(self):
        if not (self.hop <= self.window_length <= self.fft_size):
            raise InvalidInputError("need hop <= window_length <= fft_size")


@dataclass
class F0Config:
    f_min: float = 80.0
    f_max: float = 600.0
    window_length: int = 640
    hop: int = 160
    sample_rate: int = 16000
    voicing_threshold: float = 0.3

    def __post_init__(self):
        if not (0 < self.f_min < self.f_max < self.sample_rate / 2):
            raise InvalidInputError("need 0 < f_min < f_max < Nyquist")


# ---------------------------------------------------------------------------
# Dynamic time warping
# ---------------------------------------------------------------------------


def _pairwise_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _as_feature_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def dtw_align(a, b, distance=None) -> tuple[list[tuple[int, int]], float]:
    """Minimal-cost monotone alignment of two feature sequences.

    ``distance`` is a per-pair callable; when omitted, Euclidean distance
    is used (vectorized).  Returns the path as (i, j) pairs from (0, 0)
    to (n-1, m-1), and its total cost.  Backtracking prefers the diagonal
    step on ties, so identical sequences align along the diagonal.
    """
    a_mat, b_mat = _as_feature_matrix(a), _as_feature_matrix(b)
    n, m = len(a_mat), len(b_mat)
    if n == 0 or m == 0:
        raise InvalidInputError("cannot align an empty sequence")
    if distance is None:
        local = _pairwise_euclidean(a_mat, b_mat)
    else:
        local = np.array(
            [[float(distance(a_mat[i], b_mat[j])) for j in range(m)] for i in range(n)]
        )
    cost = np.full((n, m), np.inf)
    cost[0, 0] = local[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = cost[i - 1, j - 1]
            if i > 0:
                best = min(best, cost[i - 1, j])
            if j > 0:
                best = min(best, cost[i, j - 1])
            cost[i, j] = local[i, j] + best
    path = []
    i, j = n - 1, m - 1
    while True:
        path.append((i, j))
        if i == 0 and j == 0:
            break
        moves = []
        if i > 0 and j > 0:
            moves.append((cost[i - 1, j - 1], (i - 1, j - 1)))
        if i > 0:
            moves.append((cost[i - 1, j], (i - 1, j)))
        if j > 0:
            moves.append((cost[i, j - 1], (i, j - 1)))
        i, j = min(moves, key=lambda t: t[0])[1]
    path.reverse()
    return path, float(cost[n - 1, m - 1])


# ---------------------------------------------------------------------------
# Spectral front-end
# ---------------------------------------------------------------------------


def _frame_signal(wav: np.ndarray, window_length: int, hop: int) -> np.ndarray:
    wav = np.asarray(wav, dtype=np.float64)
    if len(wav) < window_length:
        raise InvalidInputError(f"signal shorter than one window ({window_length} samples)")
    count = 1 + (len(wav) - window_length) // hop
    idx = np.arange(window_length)[None, :] + hop * np.arange(count)[:, None]
    return wav[idx]


def magnitude_spectrogram(wav, cfg: SpectrogramConfig) -> np.ndarray:
    """(frames, bins) magnitudes of the Hann-windowed short-time FFT."""
    frames = _frame_signal(wav, cfg.window_length, cfg.hop)
    window = get_window("hann", cfg.window_length, fftbins=True)
    return np.abs(rfft(frames * window, n=cfg.fft_size, axis=1))


def mel_filterbank(cfg: SpectrogramConfig) -> np.ndarray:
    """HTK-style triangular filters, (mel_bands, fft bins)."""

    def to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    n_bins = cfg.fft_size // 2 + 1
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_bins)
    points = from_mel(np.linspace(to_mel(0.0), to_mel(cfg.sample_rate / 2.0), cfg.mel_bands + 2))
    bank = np.zeros((cfg.mel_bands, n_bins))
    for b in range(cfg.mel_bands):
        lo, mid, hi = points[b], points[b + 1], points[b + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[b] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def mfcc(wav, cfg: SpectrogramConfig | None = None) -> np.ndarray:
    """Cepstral coefficients 1..mfcc_order per frame, (frames, order)."""
    cfg = cfg or SpectrogramConfig()
    mag = magnitude_spectrogram(wav, cfg)
    mel = mag @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(mel, cfg.log_floor))
    ceps = dct(logmel, type=2, norm="ortho", axis=1)
    return ceps[:, 1 : cfg.mfcc_order + 1]


def energy_track(wav, cfg: SpectrogramConfig | None = None) -> np.ndarray:
    """Per-frame RMS over the frequency bins of the magnitude spectrogram."""
    cfg = cfg or SpectrogramConfig()
    mag = magnitude_spectrogram(wav, cfg)
    return np.sqrt((mag * mag).mean(axis=1))


def f0_track(wav, cfg: F0Config | None = None) -> np.ndarray:
    """Per-frame fundamental frequency; 0 marks unvoiced frames.

    Normalized autocorrelation over the lag range for [f_min, f_max];
    frames whose peak falls below the voicing threshold report 0.  Among
    the local maxima of the autocorrelation that come within 5% of the
    global peak, the smallest lag wins, which resolves period multiples
    to the fundamental.
    """
    cfg = cfg or F0Config()
    frames = _frame_signal(wav, cfg.window_length, cfg.hop)
    lag_min = int(np.ceil(cfg.sample_rate / cfg.f_max))
    lag_max = int(np.floor(cfg.sample_rate / cfg.f_min))
    lag_max = min(lag_max, cfg.window_length - 1)
    out = np.zeros(len(frames))
    for i, frame in enumerate(frames):
        frame = frame - frame.mean()
        energy = float(frame @ frame)
        if energy <= 0.0:
            continue
        raw = np.correlate(frame, frame, mode="full")[cfg.window_length - 1 :]
        sq = frame * frame
        forward = np.concatenate([[0.0], np.cumsum(sq)])
        tail = energy - forward  # sum of squares from each lag onward
        lags = np.arange(lag_min, lag_max + 1)
        e1 = tail[0] - tail[cfg.window_length - lags]  # first window_length - lag samples
        e2 = tail[lags]
        denom = np.sqrt(e1 * e2)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(denom > 0, raw[lags] / denom, 0.0)
        peak = float(r.max())
        if peak < cfg.voicing_threshold:
            continue
        left = np.concatenate([[-np.inf], r[:-1]])
        right = np.concatenate([r[1:], [-np.inf]])
        is_local_max = (r >= left) & (r >= right)
        candidates = np.nonzero(is_local_max & (r >= max(cfg.voicing_threshold, 0.95 * peak)))[0]
        best_lag = int(lags[candidates[0]])
        out[i] = cfg.sample_rate / best_lag
    return out


# ---------------------------------------------------------------------------
# Path-aggregated distances
# ---------------------------------------------------------------------------


def aligned_distance(feat_ref, feat_gen) -> float:
    """DTW-align two tracks, then mean Euclidean distance over the path."""
    ref, gen = _as_feature_matrix(feat_ref), _as_feature_matrix(feat_gen)
    path, _ = dtw_align(ref, gen)
    diffs = [np.linalg.norm(ref[i] - gen[j]) for i, j in path]
    return float(np.mean(diffs))


def mcd(mfcc_ref, mfcc_gen) -> float:
    """Mel-cepstral distortion averaged along the DTW path.

    Per aligned pair: (10 / ln 10) * sqrt(0.5 * sum_i (m_g_i - m_r_i)^2)
    over the kept cepstral coefficients.
    """
    ref, gen = _as_feature_matrix(mfcc_ref), _as_feature_matrix(mfcc_gen)
    path, _ = dtw_align(ref, gen)
    values = [
        MCD_SCALE * np.sqrt(0.5 * float(((ref[i] - gen[j]) ** 2).sum())) for i, j in path
    ]
    return float(np.mean(values))


def f0_distance(wav_ref, wav_gen, cfg: F0Config | None = None) -> float:
    return aligned_distance(f0_track(wav_ref, cfg), f0_track(wav_gen, cfg))


def energy_distance(wav_ref, wav_gen, cfg: SpectrogramConfig | None = None) -> float:
    return aligned_distance(energy_track(wav_ref, cfg), energy_track(wav_gen, cfg))


def mcd_distance(wav_ref, wav_gen, cfg: SpectrogramConfig | None = None) -> float:
    return mcd(mfcc(wav_ref, cfg), mfcc(wav_gen, cfg))


# ---------------------------------------------------------------------------
# Symbol error rate
# ---------------------------------------------------------------------------


def levenshtein(ref, hyp) -> int:
    n, m = len(ref), len(hyp)
    row = np.arange(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        prev = row.copy()
        row[0] = i
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            row[j] = min(prev[j - 1] + (0 if same else 1), prev[j] + 1, row[j - 1] + 1)
    return int(row[m])


def symbol_error_rate(ref, hyp) -> float:
    """Edit distance between transcripts over max(1, |ref|)."""
    return levenshtein(ref, hyp) / max(1, len(ref))
