"""Recording ingestion, resampling, envelope extraction, window samplers,
augmentation, and batch composition.

Everything downstream runs at 64 Hz with 3 s windows (192 samples). A match
window and its mismatch imposter come from the same recording and may overlap
by strictly less than 35%. The whole pipeline is a deterministic function of
(recording bytes, seed): every consumer owns an RngState split off the master
seed by a stable key, so parallel preparation cannot perturb results.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .errors import SamplingError, ShapeError, UnsupportedRateError, ZeroVarianceError
from .rng import RngState

TARGET_FS = 64
WINDOW_SAMPLES = 192  # 3 s at 64 Hz
MAX_OVERLAP = 0.35


# ---------------------------------------------------------------------------
# filtering and resampling


def design_lowpass_fir(cutoff_hz: float, fs: float, ntaps: int) -> np.ndarray:
    """Hamming-windowed sinc low-pass with unit DC gain.

    ``ntaps`` is forced odd so the filter is symmetric and can be applied
    zero-phase by compensating the (ntaps-1)/2 group delay.
    """
    if ntaps % 2 == 0:
        ntaps += 1
    m = np.arange(ntaps) - (ntaps - 1) / 2
    fc = cutoff_hz / fs
    h = 2 * fc * np.sinc(2 * fc * m)
    h *= np.hamming(ntaps)
    return h / h.sum()


def lowpass_filter(signal: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Zero-phase FIR along axis 0.

    The signal is extended by odd reflection about its end values before
    filtering, which keeps constants exact and continues oscillations almost
    smoothly, so boundary transients stay far below the stopband floor.
    """
    x = np.asarray(signal, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    delay = (len(taps) - 1) // 2
    pad = min(delay, x.shape[0] - 1)
    padded = np.pad(x, ((pad, pad), (0, 0)), mode="reflect", reflect_type="odd")
    if pad < delay:  # very short signals: top up with edge replication
        padded = np.pad(padded, ((delay - pad, delay - pad), (0, 0)), mode="edge")
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        out[:, c] = np.convolve(padded[:, c], taps, mode="valid")
    return out[:, 0] if squeeze else out


def resample_to_64hz(signal: np.ndarray, fs_in: int) -> np.ndarray:
    """Anti-aliased decimation to 64 Hz for integer-ratio input rates.

    The filter is a windowed sinc with cutoff 0.9 * 32 Hz and fs_in + 1 taps
    (one second of filter), applied zero-phase; decimation keeps every
    (fs_in/64)-th sample starting at index 0, so N' = ceil(N * 64 / fs_in).
    fs_in == 64 bypasses the filter entirely.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"resample expects [N, C], got shape {x.shape}")
    fs = int(fs_in)
    if fs != fs_in or fs < TARGET_FS or fs % TARGET_FS != 0:
        raise UnsupportedRateError(
            f"unsupported rate {fs_in}: need an integer multiple of {TARGET_FS} Hz"
        )
    q = fs // TARGET_FS
    if q == 1:
        return x.copy()
    taps = design_lowpass_fir(0.9 * (TARGET_FS / 2), fs, fs + 1)
    return lowpass_filter(x, taps)[::q]


ENVELOPE_CUTOFF_HZ = 25.0


def extract_envelope(audio: np.ndarray, fs_audio: int, standardize: bool = True,
                     recording_id: str | None = None) -> np.ndarray:
    """Speech envelope at 64 Hz: rectify, 25 Hz low-pass, resample, standardize.

    The low-pass uses fs_audio/8 + 1 taps. Standardization is per recording to
    zero mean, unit variance; silent input raises ZeroVarianceError naming the
    recording.
    """
    x = np.asarray(audio, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 1:
        raise ShapeError(f"audio must be [M, 1], got shape {x.shape}")
    fs = int(fs_audio)
    if fs < TARGET_FS or fs % TARGET_FS != 0:
        raise UnsupportedRateError(
            f"unsupported audio rate {fs_audio}: need an integer multiple of {TARGET_FS} Hz"
        )
    rect = np.abs(x)
    taps = design_lowpass_fir(ENVELOPE_CUTOFF_HZ, fs, fs // 8 + 1)
    smooth = lowpass_filter(rect, taps)
    env = resample_to_64hz(smooth, fs)
    if standardize:
        sd = env.std()
        if sd < 1e-12:
            who = f" (recording {recording_id})" if recording_id else ""
            raise ZeroVarianceError(f"envelope has zero variance{who}")
        env = (env - env.mean()) / sd
    return env


# ---------------------------------------------------------------------------
# recordings


@dataclass
class Recording:
    """One subject's EEG matrix plus the stimulus waveform that evoked it."""

    subject_id: str
    eeg: np.ndarray  # [N, channels] at fs_eeg
    stimulus: np.ndarray  # [M, 1] at fs_audio
    fs_eeg: int
    fs_audio: int

    def validate(self):
        if self.fs_eeg <= 0 or self.fs_audio <= 0:
            raise ValueError("sample rates must be positive")
        if self.eeg.ndim != 2:
            raise ShapeError(f"eeg must be [N, C], got {self.eeg.shape}")
        if self.stimulus.ndim != 2 or self.stimulus.shape[1] != 1:
            raise ShapeError(f"stimulus must be [M, 1], got {self.stimulus.shape}")
        dur_eeg = self.eeg.shape[0] / self.fs_eeg
        dur_audio = self.stimulus.shape[0] / self.fs_audio
        tol = 1.0 / min(self.fs_eeg, self.fs_audio) + 1e-9
        if abs(dur_eeg - dur_audio) > tol:
            raise ValueError(
                f"recording {self.subject_id!r}: eeg covers {dur_eeg:.4f}s but stimulus covers "
                f"{dur_audio:.4f}s (more than one sample apart)"
            )


def save_recording(rec: Recording, path):
    rec.validate()
    meta = {"subject_id": rec.subject_id, "fs_eeg": int(rec.fs_eeg), "fs_audio": int(rec.fs_audio)}
    serialize.save_recording_container(path, meta, rec.eeg, rec.stimulus)


def load_recording(path) -> Recording:
    meta, eeg, stimulus = serialize.load_recording_container(path)
    rec = Recording(
        subject_id=str(meta["subject_id"]),
        eeg=eeg,
        stimulus=stimulus,
        fs_eeg=int(meta["fs_eeg"]),
        fs_audio=int(meta["fs_audio"]),
    )
    rec.validate()
    return rec


def write_manifest(paths, manifest_path):
    """One recording path per line, relative to the manifest's directory."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    lines = ["# recording manifest"]
    for p in paths:
        lines.append(os.path.relpath(os.path.abspath(p), base))
    tmp = str(manifest_path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, manifest_path)


def read_manifest(manifest_path) -> list[str]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    with open(manifest_path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            out.append(os.path.normpath(os.path.join(base, line)))
    return out


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class Window:
    """Half-open sample interval [start, start+length) at 64 Hz."""

    start: int
    length: int = WINDOW_SAMPLES

    def __post_init__(self):
        if self.start < 0:
            raise ValueError(f"window start must be >= 0, got {self.start}")
        if self.length < 1:
            raise ValueError("window length must be >= 1")

    @property
    def end(self) -> int:
        return self.start + self.length


def overlap_fraction(a: Window, b: Window) -> float:
    """Shared fraction of two equal-length windows, in [0, 1]."""
    if a.length != b.length:
        raise ShapeError(f"overlap_fraction needs equal lengths, got {a.length} and {b.length}")
    inter = min(a.end, b.end) - max(a.start, b.start)
    return max(0, inter) / a.length


def draw_shifts(rng: RngState, n: int) -> np.ndarray:
    """The sampler's shift law: Uniform(1.0 s, 2.0 s) expressed in 64 Hz samples.

    Continuous values in (64, 128); window starts round these to whole samples.
    """
    return rng.uniform(1.0, 2.0, n) * TARGET_FS


def sample_match_windows(rec_len_samples: int, window: int = WINDOW_SAMPLES,
                         rng: RngState | None = None) -> list[Window]:
    """Sliding starts: s0 = 0, each next start a random 1-2 s further on."""
    if rng is None:
        raise ValueError("sample_match_windows needs an RngState")
    if rec_len_samples < window:
        return []
    out = []
    start = 0
    while start + window <= rec_len_samples:
        out.append(Window(start, window))
        start += int(round(float(draw_shifts(rng, 1)[0])))
    return out


def _min_separation(length: int, max_overlap: float) -> int:
    """Smallest |start delta| with overlap strictly below ``max_overlap``."""
    return int(math.floor(length * (1.0 - max_overlap))) + 1


def sample_mismatch(match: Window, rec_len_samples: int, rng: RngState,
                    max_overlap: float = MAX_OVERLAP, max_tries: int = 1000) -> Window:
    """Rejection-sample a window overlapping the match by less than ``max_overlap``.

    Fails loudly when no start position can satisfy the constraint or when
    ``max_tries`` uniform draws all land too close.
    """
    last_start = rec_len_samples - match.length
    if last_start < 0:
        raise SamplingError(f"recording of {rec_len_samples} samples cannot hold a {match.length}-sample window")
    need = _min_separation(match.length, max_overlap)
    if max(match.start, last_start - match.start) < need:
        raise SamplingError(
            f"no mismatch window with overlap < {max_overlap} exists: recording length "
            f"{rec_len_samples}, match start {match.start}, needs a start at least {need} samples away"
        )
    for _ in range(max_tries):
        cand = Window(int(rng.integers(0, last_start + 1)), match.length)
        if overlap_fraction(match, cand) < max_overlap:
            return cand
    raise SamplingError(f"mismatch sampling exhausted {max_tries} tries")


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    n_time_masks: int = 2
    max_time_mask_frac: float = 0.1
    n_channel_masks: int = 2
    max_channel_mask_frac: float = 0.1
    max_warp_samples: int = 9
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.max_time_mask_frac < 1.0 or not 0.0 <= self.max_channel_mask_frac < 1.0:
            raise ValueError("mask fractions must be in [0, 1)")
        if self.n_time_masks < 0 or self.n_channel_masks < 0 or self.max_warp_samples < 0:
            raise ValueError("mask/warp counts must be >= 0")


def _warp_time(x: np.ndarray, pivot: int, shift: int) -> np.ndarray:
    """Piecewise-linear time warp moving ``pivot`` to ``pivot + shift``.

    Endpoints stay fixed; every channel is re-sampled with linear
    interpolation. Degenerate shifts that would pin the pivot to an endpoint
    fall back to the identity.
    """
    n = x.shape[0]
    target = pivot + shift
    if shift == 0 or target < 1 or target > n - 2:
        return x.copy()
    out_idx = np.arange(n, dtype=np.float64)
    src = np.empty(n, dtype=np.float64)
    left = out_idx[: target + 1]
    src[: target + 1] = left * (pivot / target)
    right = out_idx[target + 1 :]
    src[target + 1 :] = pivot + (right - target) * ((n - 1 - pivot) / (n - 1 - target))
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (src - lo)[:, None]
    return (1.0 - w) * x[lo] + w * x[hi]


def specaug(eeg_window: np.ndarray, cfg: AugmentConfig, rng: RngState) -> np.ndarray:
    """Time warp plus time- and channel-span masking of one EEG window.

    Masked spans are filled with the post-warp window mean (a scalar), which
    keeps the window's standardized statistics closer than zero-filling.
    Disabled config returns the input bit-identically. Shape is preserved.
    """
    x = np.asarray(eeg_window, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"specaug expects [T, C], got {x.shape}")
    if not cfg.enabled:
        return x
    n_t, n_c = x.shape

    w_max = cfg.max_warp_samples
    if w_max > 0 and n_t > 2 * w_max:
        pivot = int(rng.integers(w_max, n_t - w_max + 1))
        shift = int(rng.integers(-w_max, w_max + 1))
        x = _warp_time(x, pivot, shift)
    else:
        x = x.copy()

    fill = x.mean()
    max_t = int(cfg.max_time_mask_frac * n_t)
    for _ in range(cfg.n_time_masks):
        span = int(rng.integers(0, max_t + 1))
        start = int(rng.integers(0, n_t - span + 1))
        if span > 0:
            x[start : start + span, :] = fill
    max_c = int(cfg.max_channel_mask_frac * n_c)
    for _ in range(cfg.n_channel_masks):
        span = int(rng.integers(0, max_c + 1))
        start = int(rng.integers(0, n_c - span + 1))
        if span > 0:
            x[:, start : start + span] = fill
    return x


# ---------------------------------------------------------------------------
# pairs and batches


@dataclass
class WindowPair:
    """One training instance: EEG window, matched and mismatched envelopes."""

    eeg_window: np.ndarray  # [192, eeg_channels]
    match_env: np.ndarray  # [192, 1]
    mismatch_env: np.ndarray  # [192, 1]
    match_window: Window
    mismatch_window: Window
    subject_id: str
    label: int  # 1 -> slot A holds the match, 0 -> slot B

    def slots(self):
        """(stim_a, stim_b) in the order fixed by ``label``."""
        if self.label == 1:
            return self.match_env, self.mismatch_env
        return self.mismatch_env, self.match_env


@dataclass
class PreparedRecording:
    """A recording after resampling/envelope extraction, all at 64 Hz."""

    subject_id: str
    eeg: np.ndarray  # [N, C] at 64 Hz
    envelope: np.ndarray  # [N, 1] at 64 Hz

    @property
    def n_samples(self) -> int:
        return self.eeg.shape[0]


def prepare_recording(rec: Recording, envelope_fn=None) -> PreparedRecording:
    """Resample EEG to 64 Hz and extract the stimulus feature.

    ``envelope_fn(audio, fs_audio, recording_id=...)`` defaults to
    :func:`extract_envelope`; swap in another extractor (e.g. a subband
    variant) without touching the samplers.
    """
    rec.validate()
    eeg = resample_to_64hz(rec.eeg, rec.fs_eeg)
    fn = envelope_fn or extract_envelope
    env = fn(rec.stimulus, rec.fs_audio, recording_id=rec.subject_id)
    n = min(eeg.shape[0], env.shape[0])
    return PreparedRecording(rec.subject_id, eeg[:n], env[:n])


def make_pairs(prep: PreparedRecording, rng: RngState, window: int = WINDOW_SAMPLES,
               max_overlap: float = MAX_OVERLAP) -> list[WindowPair]:
    """Fig-2-style sampler: sliding match windows, rejection-sampled imposters,
    slot order fixed by a fair coin per pair."""
    pairs = []
    for match in sample_match_windows(prep.n_samples, window, rng):
        mismatch = sample_mismatch(match, prep.n_samples, rng, max_overlap)
        label = int(rng.integers(0, 2))
        pairs.append(
            WindowPair(
                eeg_window=prep.eeg[match.start : match.end].copy(),
                match_env=prep.envelope[match.start : match.end].copy(),
                mismatch_env=prep.envelope[mismatch.start : mismatch.end].copy(),
                match_window=match,
                mismatch_window=mismatch,
                subject_id=prep.subject_id,
                label=label,
            )
        )
    return pairs


def make_pairs_fixed_stride(prep: PreparedRecording, rng: RngState,
                            window: int = WINDOW_SAMPLES) -> list[WindowPair]:
    """Baseline-style sampler: non-overlapping windows at a fixed one-window
    stride, imposter = the neighbouring window. An approximation of the
    reference generation scheme; kept deliberately free of randomness except
    the slot-ordering coin."""
    n_windows = prep.n_samples // window
    pairs = []
    for i in range(n_windows):
        match = Window(i * window, window)
        j = i + 1 if i + 1 < n_windows else i - 1
        if j < 0:
            break
        mismatch = Window(j * window, window)
        label = int(rng.integers(0, 2))
        pairs.append(
            WindowPair(
                eeg_window=prep.eeg[match.start : match.end].copy(),
                match_env=prep.envelope[match.start : match.end].copy(),
                mismatch_env=prep.envelope[mismatch.start : mismatch.end].copy(),
                match_window=match,
                mismatch_window=mismatch,
                subject_id=prep.subject_id,
                label=label,
            )
        )
    return pairs


@dataclass
class SampleBatch:
    eeg: np.ndarray  # [B, 192, C]
    stim_a: np.ndarray  # [B, 192, 1]
    stim_b: np.ndarray  # [B, 192, 1]
    labels: np.ndarray  # [B]
    subject_ids: list[str] = field(default_factory=list)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.eeg, self.stim_a, self.stim_b, self.labels.astype(np.float64)):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update("|".join(self.subject_ids).encode("utf-8"))
        return h.hexdigest()


def pairs_to_batch(pairs: list[WindowPair]) -> SampleBatch:
    """Materialize pairs using their stored labels (frozen val/test path)."""
    eeg = np.stack([p.eeg_window for p in pairs])
    slot_a, slot_b = zip(*(p.slots() for p in pairs))
    return SampleBatch(
        eeg=eeg,
        stim_a=np.stack(slot_a),
        stim_b=np.stack(slot_b),
        labels=np.array([p.label for p in pairs], dtype=np.int64),
        subject_ids=[p.subject_id for p in pairs],
    )


def compose_batch(pool: dict[str, list[WindowPair]], batch_size: int = 64,
                  subjects_per_batch: int = 8, rng: RngState | None = None) -> SampleBatch:
    """Draw ``subjects_per_batch`` distinct subjects and an equal share of
    pairs from each; slot order is re-randomized by a fair coin per pair so
    batch labels stay balanced regardless of the pool."""
    if rng is None:
        raise ValueError("compose_batch needs an RngState")
    if batch_size % subjects_per_batch != 0:
        raise ValueError(f"batch_size {batch_size} not divisible by subjects_per_batch {subjects_per_batch}")
    per_subject = batch_size // subjects_per_batch
    eligible = sorted(s for s, pairs in pool.items() if len(pairs) >= per_subject)
    if len(eligible) < subjects_per_batch:
        raise SamplingError(
            f"need {subjects_per_batch} subjects with >= {per_subject} pairs each, "
            f"only {len(eligible)} of {len(pool)} qualify"
        )
    chosen = rng.choice(np.array(eligible, dtype=object), size=subjects_per_batch, replace=False)
    eeg, slot_a, slot_b, labels, subject_ids = [], [], [], [], []
    for subject in chosen:
        pairs = pool[subject]
        idx = rng.choice(len(pairs), size=per_subject, replace=False)
        for i in idx:
            p = pairs[int(i)]
            coin = int(rng.integers(0, 2))
            a, b = (p.match_env, p.mismatch_env) if coin == 1 else (p.mismatch_env, p.match_env)
            eeg.append(p.eeg_window)
            slot_a.append(a)
            slot_b.append(b)
            labels.append(coin)
            subject_ids.append(p.subject_id)
    return SampleBatch(
        eeg=np.stack(eeg),
        stim_a=np.stack(slot_a),
        stim_b=np.stack(slot_b),
        labels=np.array(labels, dtype=np.int64),
        subject_ids=subject_ids,
    )


def augment_batch(batch: SampleBatch, cfg: AugmentConfig, rng: RngState) -> SampleBatch:
    """SpecAug over the EEG windows only; stimulus envelopes pass through."""
    if not cfg.enabled:
        return batch
    eeg = np.stack([specaug(batch.eeg[i], cfg, rng) for i in range(batch.eeg.shape[0])])
    return SampleBatch(eeg, batch.stim_a, batch.stim_b, batch.labels, batch.subject_ids)


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class PairDataset:
    """Per-split window pairs; train is grouped by subject for the sampler."""

    train: dict[str, list[WindowPair]]
    val: list[WindowPair]
    test: list[WindowPair]

    def summary(self) -> dict:
        return {
            "train_pairs": sum(len(v) for v in self.train.values()),
            "train_subjects": len(self.train),
            "val_pairs": len(self.val),
            "test_pairs": len(self.test),
        }


def parse_split(spec: str) -> tuple[float, float, float]:
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"split must be train:val:test fractions, got {spec!r}")
    fracs = tuple(float(p) for p in parts)
    if any(f < 0 for f in fracs) or sum(fracs) <= 0:
        raise ValueError(f"split fractions must be non-negative and not all zero: {spec!r}")
    total = sum(fracs)
    return tuple(f / total for f in fracs)


def _allocate(n: int, fracs) -> list[int]:
    """Largest-remainder allocation with at least one item per nonzero split."""
    nonzero = [i for i, f in enumerate(fracs) if f > 0]
    if len(nonzero) > n:
        raise ValueError(f"cannot split {n} recordings into {len(nonzero)} non-empty parts")
    quotas = [f * n for f in fracs]
    counts = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(fracs)), key=lambda i: -(quotas[i] - counts[i]))
    for i in range(n - sum(counts)):
        counts[order[i % len(fracs)]] += 1
    for i in nonzero:
        while counts[i] == 0:
            j = max(range(len(counts)), key=lambda m: counts[m])
            counts[j] -= 1
            counts[i] += 1
    return counts


def build_pair_dataset(recordings: list[Recording], seed: int,
                       split: tuple[float, float, float] = (0.6, 0.2, 0.2),
                       window: int = WINDOW_SAMPLES, sampler: str = "random") -> PairDataset:
    """Prepare recordings, split them per subject, and sample window pairs.

    The split is at recording granularity within each subject, so every split
    sees every subject. ``sampler`` selects the randomized scheme or the
    fixed-stride baseline approximation (training pairs only; val/test always
    use the randomized scheme so comparisons share frozen evaluation sets).
    """
    if sampler not in ("random", "fixed"):
        raise ValueError(f"unknown sampler {sampler!r}")
    master = RngState(seed)
    by_subject: dict[str, list[Recording]] = {}
    for rec in recordings:
        by_subject.setdefault(rec.subject_id, []).append(rec)

    train: dict[str, list[WindowPair]] = {}
    val: list[WindowPair] = []
    test: list[WindowPair] = []
    for subject in sorted(by_subject):
        recs = by_subject[subject]
        order = master.split(("split-order", subject)).permutation(len(recs))
        counts = _allocate(len(recs), split)
        roles = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
        for slot, rec_idx in enumerate(order):
            role = roles[slot]
            rec = recs[int(rec_idx)]
            prep = prepare_recording(rec)
            rng = master.split(("pairs", subject, slot, role))
            if role == "train" and sampler == "fixed":
                pairs = make_pairs_fixed_stride(prep, rng, window)
            else:
                pairs = make_pairs(prep, rng, window)
            if role == "train":
                train.setdefault(subject, []).extend(pairs)
            elif role == "val":
                val.extend(pairs)
            else:
                test.extend(pairs)
    return PairDataset(train=train, val=val, test=test)


def pairs_hash(pairs: list[WindowPair]) -> str:
    """Content hash of an ordered pair list (frozen-set comparisons in tests)."""
    h = hashlib.sha256()
    for p in pairs:
        h.update(np.ascontiguousarray(p.eeg_window).tobytes())
        h.update(np.ascontiguousarray(p.match_env).tobytes())
        h.update(np.ascontiguousarray(p.mismatch_env).tobytes())
        h.update(f"{p.subject_id}|{p.label}|{p.match_window.start}|{p.mismatch_window.start}".encode())
    return h.hexdigest()
