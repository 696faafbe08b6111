"""Spectral feature extraction: band-pass filtering, sliding-window log-power
spectra, band powers, and phase-locking-value coherence.

All per-second features are computed over the same trailing 90-s window so
that the regression inputs and the weighting inputs are co-registered in
time. Frequency analysis follows a fixed recipe: each 90-s window is split
into consecutive non-overlapping 512-sample sub-windows, each sub-window is
tapered, zero-padded by ``pad_factor`` and transformed; linear power is
averaged across sub-windows and converted to dB with a fixed floor.

The per-bin transform is evaluated as an explicit DFT restricted to the
retained bins (a matrix product), which is algebraically identical to an
FFT of the padded sub-window but much faster when only the 1-30 Hz bins
are needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import signal as sps

from .errors import ValidationError
from .io_utils import atomic_write_text, fmt_float, provenance_comment, read_csv_rows
from .session import ANALYSIS_WINDOW_S, WEIGHTING_CHANNELS, EegSession

#: Analysis band edges in Hz (inclusive on both ends, by bin center).
BANDS = {
    "delta": (1.0, 3.0),
    "theta": (4.0, 7.0),
    "alpha": (8.0, 12.0),
    "beta": (13.0, 30.0),
}


@dataclass
class FeatureConfig:
    """Knobs for the per-second feature extraction pipeline."""

    window_s: int = ANALYSIS_WINDOW_S
    step_s: int = 1
    subwin_len: int = 512
    pad_factor: int = 2
    taper: str = "hamming"  # "hamming" or "rectangular"
    subwin_overlap: float = 0.0  # fraction of subwin_len shared between tiles
    power_floor: float = 1e-12
    spectrum_lo_hz: float = 1.0
    spectrum_hi_hz: float = 30.0
    prefilter: bool = True  # apply the 1-30 Hz band-pass before analysis
    plv_band: str = "alpha"
    plv_edge_frac: float = 0.025
    all_bands: bool = False  # also emit delta/alpha/beta powers and PLV

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.pad_factor not in (2, 4):
            raise ValidationError(f"pad_factor must be 2 or 4, got {self.pad_factor}")
        if self.subwin_len < 2 or self.subwin_len & (self.subwin_len - 1):
            raise ValidationError(f"subwin_len must be a power of two, got {self.subwin_len}")
        if self.taper not in ("hamming", "rectangular"):
            raise ValidationError(f"unknown taper {self.taper!r}")
        if not 0.0 <= self.subwin_overlap < 1.0:
            raise ValidationError(f"subwin_overlap must be in [0, 1), got {self.subwin_overlap}")
        if self.step_s < 1:
            raise ValidationError("step_s must be a positive integer number of seconds")


@dataclass
class SpectralFrame:
    """Log-power spectrum of one channel over one analysis window."""

    t_s: int
    channel: str
    log_power_db: np.ndarray
    bin_hz: np.ndarray


@dataclass
class FeatureFrame:
    """All per-second features for one window-end time ``t_s``.

    ``oz_spectrum`` is the regression input; ``theta_powers`` (one value per
    channel, montage order) and ``alpha_plv`` (one value per channel pair,
    in `weighting_pairs` order) together form the weighting input.
    """

    t_s: int
    oz_spectrum: np.ndarray
    theta_powers: np.ndarray
    alpha_plv: np.ndarray
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def weighting_vector(self) -> np.ndarray:
        return np.concatenate([self.theta_powers, self.alpha_plv])


def weighting_pairs() -> list[tuple[str, str]]:
    """The 45 channel pairs used for coherence, in fixed enumeration order."""
    chans = WEIGHTING_CHANNELS
    return [(chans[i], chans[j]) for i in range(len(chans)) for j in range(i + 1, len(chans))]


# ---------------------------------------------------------------------------
# filtering


def _butter_bandpass(low_hz: float, high_hz: float, rate: float):
    nyq = rate / 2.0
    if not (0.0 < low_hz < high_hz < nyq):
        raise ValidationError(
            f"band ({low_hz}, {high_hz}) Hz invalid for sample rate {rate} Hz"
        )
    return sps.butter(4, [low_hz / nyq, high_hz / nyq], btype="band")


def bandpass_matrix(samples: np.ndarray, rate: float, low_hz: float, high_hz: float) -> np.ndarray:
    """Zero-phase 4th-order band-pass of each column of ``samples``."""
    b, a = _butter_bandpass(low_hz, high_hz, rate)
    return sps.filtfilt(b, a, np.asarray(samples, dtype=np.float64), axis=0)


def bandpass_filter(session: EegSession, low_hz: float, high_hz: float) -> EegSession:
    """Band-pass every channel of a session (forward-backward, zero phase).

    Rejects non-finite samples, reporting the offending channel and index.
    """
    if session.n_samples == 0:
        raise ValidationError("empty session")
    bad = ~np.isfinite(session.samples)
    if bad.any():
        s, c = np.argwhere(bad)[0]
        raise ValidationError(
            f"non-finite sample at channel {session.channel_names[c]!r}, index {s}"
        )
    filtered = bandpass_matrix(session.samples, session.sample_rate_hz, low_hz, high_hz)
    return EegSession(
        subject_id=session.subject_id,
        session_id=session.session_id,
        sample_rate_hz=session.sample_rate_hz,
        channel_names=session.channel_names,
        samples=filtered,
        events=list(session.events),
        provenance=dict(session.provenance),
    )


# ---------------------------------------------------------------------------
# windowed spectra


def _taper_vector(name: str, length: int) -> np.ndarray:
    if name == "hamming":
        return np.hamming(length)
    return np.ones(length)


def spectrum_bin_hz(rate: float, subwin_len: int, pad_factor: int,
                    lo_hz: float, hi_hz: float) -> np.ndarray:
    """Centers of the retained frequency bins on the zero-padded grid."""
    padded = subwin_len * pad_factor
    k = np.arange(padded // 2 + 1)
    f = k * rate / padded
    return f[(f >= lo_hz) & (f <= hi_hz)]


_DFT_CACHE: dict = {}


def _dft_matrices(rate: float, subwin_len: int, pad_factor: int, taper: str,
                  lo_hz: float, hi_hz: float):
    """Tapered cos/sin DFT matrices for the retained bins, plus bin scaling.

    Power scaling is ``c_k / (padded_len * sum(w^2))`` with ``c_k = 2`` for
    interior bins (1 for DC/Nyquist), which makes the one-sided per-bin
    powers sum to the tapered sub-window's mean square.
    """
    key = (rate, subwin_len, pad_factor, taper, lo_hz, hi_hz)
    hit = _DFT_CACHE.get(key)
    if hit is not None:
        return hit
    padded = subwin_len * pad_factor
    k = np.arange(padded // 2 + 1)
    f = k * rate / padded
    keep = (f >= lo_hz) & (f <= hi_hz)
    k_sel = k[keep]
    freqs = f[keep]
    w = _taper_vector(taper, subwin_len)
    phase = -2.0 * np.pi * np.outer(np.arange(subwin_len), k_sel) / padded
    # single precision: the batched products run on sgemm, and the ~1e-4 dB
    # rounding is far below every downstream tolerance
    cos_m = np.ascontiguousarray((np.cos(phase) * w[:, None]), dtype=np.float32)
    sin_m = np.ascontiguousarray((np.sin(phase) * w[:, None]), dtype=np.float32)
    c_k = np.where((k_sel == 0) | (k_sel == padded // 2), 1.0, 2.0)
    scale = (c_k / (padded * np.sum(w * w))).astype(np.float32)
    out = (freqs, cos_m, sin_m, scale)
    _DFT_CACHE[key] = out
    return out


def subwindow_spectrum(subwin: np.ndarray, rate: float, pad_factor: int = 2,
                       taper: str = "hamming") -> tuple[np.ndarray, np.ndarray]:
    """One-sided linear power spectrum of a single sub-window, all bins.

    With the rectangular taper the powers sum exactly to the sub-window's
    mean square (one-sided scaling, zero padding accounted for).
    """
    x = np.asarray(subwin, dtype=np.float64)
    n = x.size
    padded = n * pad_factor
    w = _taper_vector(taper, n)
    spec = np.fft.rfft(x * w, n=padded)
    k = np.arange(padded // 2 + 1)
    c_k = np.where((k == 0) | (k == padded // 2), 1.0, 2.0)
    power = c_k * (spec.real**2 + spec.imag**2) / (padded * np.sum(w * w))
    freqs = k * rate / padded
    return freqs, power


def _window_starts(t_end_s, window_s: int, rate: float, n_samples: int) -> np.ndarray:
    t = np.asarray(t_end_s, dtype=np.int64)
    starts = ((t - window_s) * rate).astype(np.int64)
    ends = (t * rate).astype(np.int64)
    if t.size and (starts.min() < 0 or ends.max() > n_samples):
        raise ValidationError(
            f"analysis window of {window_s} s does not fit the signal for "
            f"t in [{t.min()}, {t.max()}] s"
        )
    return starts


def _mean_window_power(samples: np.ndarray, rate: float, t_end_s, cfg: FeatureConfig,
                       lo_hz: float, hi_hz: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear power per (window, bin), averaged over sub-windows.

    Returns ``(bin_hz, power)`` with ``power`` of shape [n_windows, n_bins].
    """
    cfg.validate()
    x = np.ascontiguousarray(samples, dtype=np.float32)
    window_len = int(round(cfg.window_s * rate))
    if x.size < window_len:
        raise ValidationError(
            f"signal of {x.size} samples shorter than one {cfg.window_s} s window"
        )
    hop = max(1, int(round(cfg.subwin_len * (1.0 - cfg.subwin_overlap))))
    n_sub = 1 + (window_len - cfg.subwin_len) // hop
    starts = _window_starts(t_end_s, cfg.window_s, rate, x.size)

    freqs, cos_m, sin_m, scale = _dft_matrices(
        rate, cfg.subwin_len, cfg.pad_factor, cfg.taper, lo_hz, hi_hz
    )
    n_bins = freqs.size
    out = np.empty((starts.size, n_bins))
    itemsize = x.itemsize

    gaps = np.diff(starts)
    uniform = starts.size <= 1 or (gaps.min() == gaps.max() and gaps[0] > 0)
    if uniform:
        step = int(gaps[0]) if starts.size > 1 else 1
        view = np.lib.stride_tricks.as_strided(
            x[starts[0]:], shape=(starts.size, n_sub, cfg.subwin_len),
            strides=(step * itemsize, hop * itemsize, itemsize),
        )
    else:
        view = None

    # chunk windows so the gathered sub-window block stays modest in memory
    per_window = n_sub * cfg.subwin_len
    chunk = max(1, int(4_000_000 / max(per_window, 1)))
    for c0 in range(0, starts.size, chunk):
        c1 = min(c0 + chunk, starts.size)
        if view is not None:
            tiles = np.ascontiguousarray(view[c0:c1]).reshape(-1, cfg.subwin_len)
        else:
            tiles = np.stack([
                np.lib.stride_tricks.as_strided(
                    x[s:], shape=(n_sub, cfg.subwin_len), strides=(hop * itemsize, itemsize)
                ) for s in starts[c0:c1]
            ]).reshape(-1, cfg.subwin_len)
        re = tiles @ cos_m
        im = tiles @ sin_m
        power = (re * re + im * im) * scale
        out[c0:c1] = power.reshape(c1 - c0, n_sub, n_bins).mean(axis=1)
    return freqs, out


def _to_db(power: np.ndarray, floor: float) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(power, floor))


def sliding_log_spectrum(channel_samples: np.ndarray, sample_rate_hz: float,
                         window_s: int = ANALYSIS_WINDOW_S, step_s: int = 1,
                         subwin_len: int = 512, pad_factor: int = 2,
                         taper: str = "hamming", power_floor: float = 1e-12,
                         channel: str = "") -> list[SpectralFrame]:
    """Per-second log-power spectra of one channel over a sliding window.

    One frame is produced for each window end time ``t_s = window_s,
    window_s + step_s, ...`` up to the signal end; bins outside 1-30 Hz
    are dropped.
    """
    cfg = FeatureConfig(window_s=window_s, step_s=step_s, subwin_len=subwin_len,
                        pad_factor=pad_factor, taper=taper, power_floor=power_floor)
    x = np.asarray(channel_samples, dtype=np.float64)
    duration = int(math.floor(x.size / sample_rate_hz))
    if duration < window_s:
        raise ValidationError(
            f"signal of {x.size} samples is shorter than the {window_s} s window"
        )
    t_grid = np.arange(window_s, duration + 1, step_s, dtype=np.int64)
    freqs, power = _mean_window_power(x, sample_rate_hz, t_grid, cfg,
                                      cfg.spectrum_lo_hz, cfg.spectrum_hi_hz)
    db = _to_db(power, power_floor)
    return [
        SpectralFrame(t_s=int(t), channel=channel, log_power_db=db[i], bin_hz=freqs)
        for i, t in enumerate(t_grid)
    ]


def band_power(frame: SpectralFrame, band) -> float:
    """Mean log power (dB) over the bins whose centers fall in ``band``.

    ``band`` is a name from `BANDS` or an explicit ``(lo_hz, hi_hz)`` pair.
    """
    if isinstance(band, str):
        try:
            lo, hi = BANDS[band]
        except KeyError:
            raise ValidationError(f"unknown band {band!r}") from None
    else:
        lo, hi = band
    mask = (frame.bin_hz >= lo) & (frame.bin_hz <= hi)
    if not mask.any():
        raise ValidationError(f"band ({lo}, {hi}) Hz selects no spectral bins")
    return float(np.mean(frame.log_power_db[mask]))


# ---------------------------------------------------------------------------
# phase locking value


def plv(samples_a: np.ndarray, samples_b: np.ndarray, band,
        sample_rate_hz: float, window_s: float | None = None,
        edge_frac: float = 0.025) -> float:
    """Phase-locking value between two channels within a frequency band.

    Both signals are band-passed, instantaneous phase is taken from the
    analytic signal, and the magnitude of the time-averaged unit phasor of
    the phase difference is returned. A fraction of samples at each end is
    excluded because the analytic signal is unreliable near the edges.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("inputs must be equal-length 1-D arrays")
    if isinstance(band, str):
        band = BANDS[band]
    lo, hi = band
    if window_s is not None:
        need = int(round(window_s * sample_rate_hz))
        if a.size < need:
            raise ValidationError(f"need at least {need} samples for a {window_s} s window")
        a = a[:need]
        b = b[:need]
    coeffs = _butter_bandpass(lo, hi, sample_rate_hz)
    fa = sps.filtfilt(*coeffs, a)
    fb = sps.filtfilt(*coeffs, b)
    if np.max(np.abs(fa)) == 0.0 or np.max(np.abs(fb)) == 0.0:
        raise ValidationError("all-zero signal in band; phase undefined")
    pa = np.angle(sps.hilbert(fa))
    pb = np.angle(sps.hilbert(fb))
    edge = int(math.floor(edge_frac * pa.size))
    sl = slice(edge, pa.size - edge if edge else None)
    dphi = pa[sl] - pb[sl]
    return float(np.abs(np.mean(np.exp(1j * dphi))))


def _windowed_plv_matrix(phases: np.ndarray, rate: float, t_end_s,
                         window_s: int) -> np.ndarray:
    """PLV of every channel pair over each trailing window.

    ``phases`` is [n_samples, n_channels] of instantaneous phase from the
    session-level analytic signal; windows then average phasors directly,
    with no per-window transform edges. Returns [n_t, n_pairs].
    """
    n, m = phases.shape
    starts = _window_starts(t_end_s, window_s, rate, n)
    window_len = int(round(window_s * rate))
    phasors = np.exp(1j * phases)
    n_pairs = m * (m - 1) // 2
    out = np.empty((len(starts), n_pairs))
    col = 0
    for i in range(m):
        # cross phasors for all later channels at once: e^{i(phi_i - phi_j)}
        cross = phasors[:, i][:, None] * np.conj(phasors[:, i + 1:])
        csum = np.concatenate([np.zeros((1, cross.shape[1]), dtype=complex),
                               np.cumsum(cross, axis=0)])
        means = (csum[starts + window_len] - csum[starts]) / window_len
        out[:, col:col + cross.shape[1]] = np.abs(means)
        col += cross.shape[1]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# per-second feature frames


def _band_mean_db(samples: np.ndarray, rate: float, t_grid, cfg: FeatureConfig,
                  band: tuple[float, float]) -> np.ndarray:
    """Mean-over-bins dB power of one channel in ``band`` for each window."""
    _, power = _mean_window_power(samples, rate, t_grid, cfg, band[0], band[1])
    return _to_db(power, cfg.power_floor).mean(axis=1)


def extract_features(session: EegSession, cfg: FeatureConfig | None = None) -> list[FeatureFrame]:
    """One `FeatureFrame` per second from t = ``window_s`` to the session end.

    The Oz log spectrum feeds the regression sub-models; the 30-channel
    theta powers plus the 45 alpha-band coherence values feed the weight
    model. All features for time t are computed from the window ending
    at t. Coherence uses the session-level analytic signal, so windows
    carry no per-window transform transients.
    """
    cfg = cfg or FeatureConfig()
    cfg.validate()
    session.validate()
    rate = session.sample_rate_hz
    duration = int(math.floor(session.duration_s))
    t_grid = np.arange(cfg.window_s, duration + 1, cfg.step_s, dtype=np.int64)

    samples = session.samples
    if cfg.prefilter:
        samples = bandpass_matrix(samples, rate, cfg.spectrum_lo_hz, cfg.spectrum_hi_hz)

    oz = samples[:, session.channel_index("Oz")]
    _, oz_power = _mean_window_power(oz, rate, t_grid, cfg,
                                     cfg.spectrum_lo_hz, cfg.spectrum_hi_hz)
    oz_db = _to_db(oz_power, cfg.power_floor)

    n_ch = len(session.channel_names)
    theta = np.empty((t_grid.size, n_ch))
    for c in range(n_ch):
        theta[:, c] = _band_mean_db(samples[:, c], rate, t_grid, cfg, BANDS["theta"])

    w_idx = [session.channel_index(ch) for ch in WEIGHTING_CHANNELS]
    plv_blocks: dict[str, np.ndarray] = {}
    plv_bands = list(BANDS) if cfg.all_bands else [cfg.plv_band]
    for bname in plv_bands:
        filtered = bandpass_matrix(samples[:, w_idx], rate, *BANDS[bname])
        phases = np.angle(sps.hilbert(filtered, axis=0))
        plv_blocks[bname] = _windowed_plv_matrix(phases, rate, t_grid, cfg.window_s)

    extra_powers: dict[str, np.ndarray] = {}
    if cfg.all_bands:
        for bname in ("delta", "alpha", "beta"):
            block = np.empty((t_grid.size, n_ch))
            for c in range(n_ch):
                block[:, c] = _band_mean_db(samples[:, c], rate, t_grid, cfg, BANDS[bname])
            extra_powers[bname] = block

    frames = []
    for i, t in enumerate(t_grid):
        extra = {}
        for bname, block in extra_powers.items():
            extra[f"pow_{bname}"] = block[i]
        for bname, block in plv_blocks.items():
            if bname != cfg.plv_band:
                extra[f"plv_{bname}"] = block[i]
        frames.append(FeatureFrame(
            t_s=int(t),
            oz_spectrum=oz_db[i],
            theta_powers=theta[i],
            alpha_plv=plv_blocks[cfg.plv_band][i],
            extra=extra,
        ))
    return frames


def oz_spectra_at(session: EegSession, t_end_s, cfg: FeatureConfig | None = None) -> np.ndarray:
    """Oz log spectra for selected window-end seconds only.

    Fast path for trial-aligned regression features: identical values to
    the corresponding `extract_features` frames, without computing the
    full per-second feature set.
    """
    cfg = cfg or FeatureConfig()
    cfg.validate()
    oz = session.channel("Oz")
    rate = session.sample_rate_hz
    if cfg.prefilter:
        oz = bandpass_matrix(oz[:, None], rate, cfg.spectrum_lo_hz, cfg.spectrum_hi_hz)[:, 0]
    _, power = _mean_window_power(oz, rate, np.asarray(t_end_s, dtype=np.int64), cfg,
                                  cfg.spectrum_lo_hz, cfg.spectrum_hi_hz)
    return _to_db(power, cfg.power_floor)


# ---------------------------------------------------------------------------
# features.csv


def feature_columns(session: EegSession, cfg: FeatureConfig) -> list[str]:
    bins = spectrum_bin_hz(session.sample_rate_hz, cfg.subwin_len, cfg.pad_factor,
                           cfg.spectrum_lo_hz, cfg.spectrum_hi_hz)
    cols = ["t_s"]
    cols += [f"oz_p_{hz:.4g}" for hz in bins]
    cols += [f"theta_{ch}" for ch in session.channel_names]
    cols += [f"plvA_{a}_{b}" for a, b in weighting_pairs()]
    if cfg.all_bands:
        for bname in ("delta", "alpha", "beta"):
            cols += [f"pow_{bname}_{ch}" for ch in session.channel_names]
        for bname in ("delta", "theta", "beta"):
            cols += [f"plv_{bname}_{a}_{b}" for a, b in weighting_pairs()]
    return cols


def write_features_csv(path, frames: list[FeatureFrame], session: EegSession,
                       cfg: FeatureConfig, provenance: dict) -> None:
    cols = feature_columns(session, cfg)
    lines = [provenance_comment(provenance).rstrip("\n"), ",".join(cols)]
    for fr in frames:
        vals = [str(fr.t_s)]
        vals += [fmt_float(v) for v in fr.oz_spectrum]
        vals += [fmt_float(v) for v in fr.theta_powers]
        vals += [fmt_float(v) for v in fr.alpha_plv]
        if cfg.all_bands:
            for bname in ("delta", "alpha", "beta"):
                vals += [fmt_float(v) for v in fr.extra[f"pow_{bname}"]]
            for bname in ("delta", "theta", "beta"):
                vals += [fmt_float(v) for v in fr.extra[f"plv_{bname}"]]
        lines.append(",".join(vals))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_features_csv(path) -> list[FeatureFrame]:
    header, rows = read_csv_rows(path)
    oz_idx = [i for i, c in enumerate(header) if c.startswith("oz_p_")]
    theta_idx = [i for i, c in enumerate(header) if c.startswith("theta_")]
    plv_idx = [i for i, c in enumerate(header) if c.startswith("plvA_")]
    frames = []
    for row in rows:
        vals = np.array([float(v) for v in row])
        frames.append(FeatureFrame(
            t_s=int(float(row[0])),
            oz_spectrum=vals[oz_idx],
            theta_powers=vals[theta_idx],
            alpha_plv=vals[plv_idx],
        ))
    return frames
