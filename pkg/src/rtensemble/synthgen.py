"""Seeded generator of synthetic driving sessions with known ground truth.

Each session couples a hidden per-second fatigue level in [0, 1] to both
behavior and EEG: reaction times grow with fatigue, posterior-channel
theta amplitude grows with fatigue, and the alpha-band coupling of the
weighting channels rises with fatigue around an archetype-specific base
level. Three subject archetypes (optimal / suboptimal / poor) differ in
their baselines and in how strongly fatigue drives them, which plants
distinct EEG-RT relationships for the clustering and ensemble stages to
recover.

Determinism: every random stream derives from the master seed via
``SeedSequence(master_seed, spawn_key=(archetype_id, session_index, role))``
where ``role`` enumerates fatigue, events, the shared alpha source, and
each EEG channel. Sessions and channels can therefore be generated in any
order, or individually, with identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import signal as sps

from .errors import ValidationError
from .io_utils import atomic_write_text, config_digest, fmt_float, provenance_comment, write_json
from .session import DEFAULT_CHANNELS, WEIGHTING_CHANNELS, EegSession, TrialEvent, save_session

MIN_DURATION_S = 400.0

# role indices for per-stream sub-seeds
_ROLE_FATIGUE = 1000
_ROLE_EVENTS = 1001
_ROLE_ALPHA_COMMON = 1002

# oscillator synthesis bands (Hz) and base amplitudes (arbitrary microvolt-ish units)
_SYNTH_BANDS = {"delta": (1.0, 3.0), "theta": (4.0, 7.0), "alpha": (8.0, 12.0), "beta": (13.0, 30.0)}
_PINK_AMP = 4.0
_DELTA_AMP = 1.2
_THETA_BASE_AMP = 1.0
_ALPHA_AMP = 2.0
_ALPHA_PRIVATE_AMP = 1.0
_BETA_AMP = 0.7

#: How strongly fatigue drives theta on each channel, as a fraction of the
#: archetype's posterior theta gain (occipital strongest, frontal weakest).
_POSTERIOR_WEIGHT = {
    "O1": 1.0, "O2": 1.0, "Oz": 1.0,
    "P3": 0.8, "Pz": 0.8, "P4": 0.8, "T5": 0.6, "T6": 0.6,
    "CP3": 0.6, "CPz": 0.6, "CP4": 0.6, "TP7": 0.5, "TP8": 0.5,
    "Cz": 0.4, "C3": 0.35, "C4": 0.35, "T3": 0.25, "T4": 0.25,
    "FC3": 0.2, "FCz": 0.2, "FC4": 0.2, "FT7": 0.2, "FT8": 0.2,
    "F3": 0.12, "Fz": 0.12, "F4": 0.12, "F7": 0.12, "F8": 0.12,
    "Fp1": 0.1, "Fp2": 0.1,
}


@dataclass
class SubjectArchetype:
    """Planted subject profile: how fatigue maps to behavior and EEG."""

    archetype_id: int
    rt_baseline_s: float
    fatigue_rt_gain: float  # RT multiplier slope per unit fatigue
    theta_gain_posterior: float  # dB of posterior theta per unit fatigue
    alpha_plv_level: float  # base alpha coupling of the weighting channels
    spectral_slope: float  # 1/f background exponent
    rt_noise_sigma: float  # lognormal sigma on trial RTs
    fatigue_center: float = 0.5  # dwell center of the latent state
    fatigue_span: tuple[float, float] = (0.05, 0.95)

    def validate(self) -> None:
        if self.rt_baseline_s <= 0:
            raise ValidationError("rt_baseline_s must be positive")
        if not 0.0 <= self.alpha_plv_level <= 1.0:
            raise ValidationError("alpha_plv_level must be in [0, 1]")
        lo, hi = self.fatigue_span
        if not 0.0 <= lo < hi <= 1.0:
            raise ValidationError(f"bad fatigue_span {self.fatigue_span}")


def default_archetypes() -> dict[int, SubjectArchetype]:
    return {
        1: SubjectArchetype(1, rt_baseline_s=0.55, fatigue_rt_gain=0.9,
                            theta_gain_posterior=5.0, alpha_plv_level=0.30,
                            spectral_slope=1.0, rt_noise_sigma=0.10,
                            fatigue_center=0.18, fatigue_span=(0.02, 0.50)),
        2: SubjectArchetype(2, rt_baseline_s=0.70, fatigue_rt_gain=5.2,
                            theta_gain_posterior=7.0, alpha_plv_level=0.55,
                            spectral_slope=1.1, rt_noise_sigma=0.12,
                            fatigue_center=0.60, fatigue_span=(0.05, 0.85)),
        3: SubjectArchetype(3, rt_baseline_s=0.85, fatigue_rt_gain=9.0,
                            theta_gain_posterior=10.0, alpha_plv_level=0.80,
                            spectral_slope=1.2, rt_noise_sigma=0.15,
                            fatigue_center=0.78, fatigue_span=(0.05, 1.0)),
    }


@dataclass
class FatigueDynamics:
    """Bounded random walk with drift toward a resampled dwell target.

    Every session opens with an alert stretch (low target) before the walk
    heads for the archetype's dwell zone, so each session contains fast
    reference trials for its own RT-ratio baseline.
    """

    step_sigma: float = 0.03
    step_cap: float = 0.1
    dwell_mean_s: float = 55.0
    pull: float = 0.12
    alert_start_s: float = 40.0
    target_jitter: float = 0.4  # dwell-target spread as a fraction of the span
    two_state: bool = False


@dataclass
class GeneratorConfig:
    seed: int = 0
    duration_s: float = 480.0
    sample_rate_hz: float = 500.0
    channel_names: tuple[str, ...] = DEFAULT_CHANNELS
    archetypes: dict[int, SubjectArchetype] = field(default_factory=default_archetypes)
    trial_gap_s: tuple[float, float] = (5.0, 10.0)
    dynamics: FatigueDynamics = field(default_factory=FatigueDynamics)
    drift_profile: bool = False  # low start, upward drift after 300 s
    plv_state_gain: float = 0.35  # alpha coupling added per unit fatigue above center

    def validate(self) -> None:
        if self.duration_s < MIN_DURATION_S:
            raise ValidationError(
                f"duration_s must be at least {MIN_DURATION_S}, got {self.duration_s}"
            )
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample_rate_hz must be positive")
        lo, hi = self.trial_gap_s
        if not 0 < lo < hi:
            raise ValidationError(f"bad trial_gap_s {self.trial_gap_s}")
        for arch in self.archetypes.values():
            arch.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_names"] = list(self.channel_names)
        d["archetypes"] = {str(k): asdict(v) for k, v in self.archetypes.items()}
        return d

    def digest(self) -> str:
        return config_digest(self.to_dict())


@dataclass
class GroundTruth:
    archetype_id: int  # 0 for a state-blended drift session
    fatigue_per_s: np.ndarray  # fatigue level at integer seconds 0..floor(duration)
    session_seed: tuple


def _rng(cfg: GeneratorConfig, archetype_id: int, session_index: int, role: int):
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(archetype_id, session_index, role))
    return np.random.default_rng(ss)


# ---------------------------------------------------------------------------
# latent fatigue


def simulate_fatigue(cfg: GeneratorConfig, arch: SubjectArchetype | None,
                     rng: np.random.Generator) -> np.ndarray:
    """Per-second fatigue path in [0, 1].

    Default profile: random walk pulled toward dwell targets resampled
    around the archetype's center. Drift profile: the target stays low for
    the first 300 s, then ramps to a high level, so the state after the
    initial weighting window no longer resembles it.
    """
    n = int(math.floor(cfg.duration_s)) + 1
    dyn = cfg.dynamics
    if arch is not None:
        lo, hi = arch.fatigue_span
        center = arch.fatigue_center
    else:
        lo, hi = 0.02, 0.98
        center = 0.5

    f = np.empty(n)
    if cfg.drift_profile:
        targets = np.empty(n)
        start = lo + 0.1 * (hi - lo)
        end = lo + 0.92 * (hi - lo)
        ramp_from = 300.0
        for t in range(n):
            if t <= ramp_from:
                targets[t] = start
            else:
                frac = min(1.0, (t - ramp_from) / max(cfg.duration_s - ramp_from, 1.0))
                targets[t] = start + frac * (end - start)
        f[0] = start
        pull = max(dyn.pull, 0.06)
    else:
        span = hi - lo
        alert = lo + 0.1 * span
        if dyn.two_state:
            choices = np.array([lo + 0.15 * span, lo + 0.85 * span])
        else:
            choices = None
        targets = np.empty(n)
        target = alert
        alert_end = int(dyn.alert_start_s)
        for t in range(n):
            retarget = (t == alert_end + 1
                        or (t > alert_end and rng.random() < 1.0 / max(dyn.dwell_mean_s, 1.0)))
            if retarget:
                if choices is not None:
                    target = choices[rng.integers(2)]
                else:
                    # dwell targets concentrate around the archetype center
                    target = np.clip(center + dyn.target_jitter * span * (rng.random() - 0.5),
                                     lo, hi)
            targets[t] = target
        f[0] = np.clip(alert + 0.1 * span * rng.random(), lo, hi)
        pull = dyn.pull

    steps = rng.standard_normal(n)
    for t in range(1, n):
        step = pull * (targets[t] - f[t - 1]) + dyn.step_sigma * steps[t]
        step = np.clip(step, -dyn.step_cap, dyn.step_cap)
        f[t] = np.clip(f[t - 1] + step, lo, hi)
    return f


# ---------------------------------------------------------------------------
# state-dependent parameter curves


def _blend_weights(f: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Triangular interpolation weights over archetype centers, [n, k]."""
    k = centers.size
    w = np.zeros((f.size, k))
    below = f <= centers[0]
    above = f >= centers[-1]
    w[below, 0] = 1.0
    w[above, -1] = 1.0
    mid = ~(below | above)
    idx = np.searchsorted(centers, f[mid], side="right") - 1
    idx = np.clip(idx, 0, k - 2)
    span = centers[idx + 1] - centers[idx]
    frac = (f[mid] - centers[idx]) / span
    rows = np.flatnonzero(mid)
    w[rows, idx] = 1.0 - frac
    w[rows, idx + 1] = frac
    return w


class _StateParams:
    """Archetype parameters, possibly blended across archetypes by state."""

    def __init__(self, cfg: GeneratorConfig, arch: SubjectArchetype | None):
        self.cfg = cfg
        self.arch = arch
        if arch is None:
            ordered = [cfg.archetypes[k] for k in sorted(cfg.archetypes)]
            self.centers = np.array([a.fatigue_center for a in ordered])
            self.rt_baseline = np.array([a.rt_baseline_s for a in ordered])
            self.rt_gain = np.array([a.fatigue_rt_gain for a in ordered])
            self.theta_gain = np.array([a.theta_gain_posterior for a in ordered])
            self.plv_level = np.array([a.alpha_plv_level for a in ordered])
            self.noise_sigma = np.array([a.rt_noise_sigma for a in ordered])
            self.slope = float(np.mean([a.spectral_slope for a in ordered]))
            self.plv_center = float(np.mean(self.centers))
        else:
            self.slope = arch.spectral_slope
            self.plv_center = arch.fatigue_center

    def _mix(self, f: np.ndarray, values: np.ndarray) -> np.ndarray:
        f = np.atleast_1d(np.asarray(f, dtype=np.float64))
        return _blend_weights(f, self.centers) @ values

    def rt_mean(self, f) -> np.ndarray:
        f = np.atleast_1d(np.asarray(f, dtype=np.float64))
        if self.arch is not None:
            return self.arch.rt_baseline_s * (1.0 + self.arch.fatigue_rt_gain * f)
        return self._mix(f, self.rt_baseline) * (1.0 + self._mix(f, self.rt_gain) * f)

    def rt_sigma(self, f) -> np.ndarray:
        f = np.atleast_1d(np.asarray(f, dtype=np.float64))
        if self.arch is not None:
            return np.full_like(f, self.arch.rt_noise_sigma)
        return self._mix(f, self.noise_sigma)

    def theta_gain_db(self, f) -> np.ndarray:
        f = np.atleast_1d(np.asarray(f, dtype=np.float64))
        if self.arch is not None:
            return np.full_like(f, self.arch.theta_gain_posterior)
        return self._mix(f, self.theta_gain)

    def alpha_mix(self, f) -> np.ndarray:
        f = np.atleast_1d(np.asarray(f, dtype=np.float64))
        base = (np.full_like(f, self.arch.alpha_plv_level)
                if self.arch is not None else self._mix(f, self.plv_level))
        lam = base + self.cfg.plv_state_gain * (f - self.plv_center)
        return np.clip(lam, 0.02, 0.98)


# ---------------------------------------------------------------------------
# EEG synthesis


def _pink_noise(rng: np.random.Generator, n: int, rate: float, slope: float) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    shaping = np.ones_like(freqs)
    nz = freqs > 0
    shaping[nz] = np.maximum(freqs[nz], 1.0) ** (-slope / 2.0)
    shaping[0] = 0.0
    x = np.fft.irfft(spec * shaping, n=n)
    rms = np.sqrt(np.mean(x * x))
    return x / rms if rms > 0 else x


def _narrowband(rng: np.random.Generator, n: int, rate: float,
                band: tuple[float, float]) -> np.ndarray:
    nyq = rate / 2.0
    b, a = sps.butter(2, [band[0] / nyq, band[1] / nyq], btype="band")
    x = sps.filtfilt(b, a, rng.standard_normal(n))
    rms = np.sqrt(np.mean(x * x))
    return x / rms if rms > 0 else x


def _synthesize_channel(cfg: GeneratorConfig, params: _StateParams, name: str,
                        rng: np.random.Generator, fatigue_samples: np.ndarray,
                        alpha_common: np.ndarray) -> np.ndarray:
    n = fatigue_samples.size
    rate = cfg.sample_rate_hz
    x = _PINK_AMP * _pink_noise(rng, n, rate, params.slope)
    x += _DELTA_AMP * _narrowband(rng, n, rate, _SYNTH_BANDS["delta"])
    x += _BETA_AMP * _narrowband(rng, n, rate, _SYNTH_BANDS["beta"])

    gain_db = params.theta_gain_db(fatigue_samples) * _POSTERIOR_WEIGHT[name]
    theta_amp = _THETA_BASE_AMP * 10.0 ** (gain_db * fatigue_samples / 20.0)
    x += theta_amp * _narrowband(rng, n, rate, _SYNTH_BANDS["theta"])

    alpha_private = _narrowband(rng, n, rate, _SYNTH_BANDS["alpha"])
    if name in WEIGHTING_CHANNELS:
        lam = params.alpha_mix(fatigue_samples)
        alpha = lam * alpha_common + np.sqrt(1.0 - lam * lam) * alpha_private
        x += _ALPHA_AMP * alpha
    else:
        x += _ALPHA_PRIVATE_AMP * alpha_private
    return x


# ---------------------------------------------------------------------------
# sessions and corpora


def _simulate_events(cfg: GeneratorConfig, params: _StateParams,
                     fatigue_per_s: np.ndarray, rng: np.random.Generator) -> list[TrialEvent]:
    lo, hi = cfg.trial_gap_s
    events = []
    t = rng.uniform(lo, hi)
    sec_grid = np.arange(fatigue_per_s.size, dtype=np.float64)
    while t < cfg.duration_s - 1.5 * hi:
        f = float(np.interp(t, sec_grid, fatigue_per_s))
        mean_rt = float(params.rt_mean(f))
        sigma = float(params.rt_sigma(f))
        rt = mean_rt * float(rng.lognormal(0.0, sigma)) if sigma > 0 else mean_rt
        onset = t
        response = onset + rt
        offset = response + rng.uniform(0.5, 1.5)
        events.append(TrialEvent(
            deviation_onset_s=onset,
            response_onset_s=response,
            response_offset_s=offset,
            rt_s=rt,
        ))
        t = onset + rng.uniform(lo, hi)
    return events


def generate_session(archetype: SubjectArchetype | None, cfg: GeneratorConfig,
                     session_index: int = 0, subject_id: str | None = None,
                     channels: tuple[str, ...] | None = None
                     ) -> tuple[EegSession, GroundTruth]:
    """Generate one session; ``archetype=None`` yields a state-blended one.

    A blended session interpolates all archetype parameters by the current
    fatigue level, so its EEG-RT relationship moves through the planted
    regimes as the state drifts; archetype sessions use a single fixed
    parameter set. ``channels`` may restrict synthesis to a subset (values
    are identical to the corresponding channels of a full render).
    """
    cfg.validate()
    aid = 0 if archetype is None else archetype.archetype_id
    params = _StateParams(cfg, archetype)
    n_samples = int(round(cfg.duration_s * cfg.sample_rate_hz))

    fatigue_per_s = simulate_fatigue(cfg, archetype, _rng(cfg, aid, session_index, _ROLE_FATIGUE))
    sec_grid = np.arange(fatigue_per_s.size, dtype=np.float64)
    sample_times = np.arange(n_samples) / cfg.sample_rate_hz
    fatigue_samples = np.interp(sample_times, sec_grid, fatigue_per_s)

    events = _simulate_events(cfg, params, fatigue_per_s,
                              _rng(cfg, aid, session_index, _ROLE_EVENTS))

    alpha_common = _narrowband(_rng(cfg, aid, session_index, _ROLE_ALPHA_COMMON),
                               n_samples, cfg.sample_rate_hz, _SYNTH_BANDS["alpha"])

    render = channels or cfg.channel_names
    samples = np.zeros((n_samples, len(render)))
    for out_col, name in enumerate(render):
        ch_role = cfg.channel_names.index(name)
        chan_rng = _rng(cfg, aid, session_index, ch_role)
        samples[:, out_col] = _synthesize_channel(
            cfg, params, name, chan_rng, fatigue_samples, alpha_common
        )
    # quantize like the on-disk format so in-memory and loaded sessions agree
    samples = samples.astype(np.float32).astype(np.float64)

    session_id = f"a{aid}s{session_index:03d}"
    session = EegSession(
        subject_id=subject_id or f"sub{aid}n{session_index // 2:02d}",
        session_id=session_id,
        sample_rate_hz=cfg.sample_rate_hz,
        channel_names=tuple(render),
        samples=samples,
        events=events,
        provenance={
            "generator_seed": cfg.seed,
            "archetype_id": aid,
            "session_index": session_index,
            "config_hash": cfg.digest(),
        },
    )
    truth = GroundTruth(archetype_id=aid, fatigue_per_s=fatigue_per_s,
                        session_seed=(cfg.seed, aid, session_index))
    return session, truth


def generate_corpus(n_sessions: tuple[int, ...], cfg: GeneratorConfig,
                    channels: tuple[str, ...] | None = None
                    ) -> list[tuple[EegSession, GroundTruth]]:
    """Generate ``n_sessions[i]`` sessions of archetype ``i+1`` each.

    Session sub-seeds depend only on (master seed, archetype, index), so
    the corpus content is independent of generation order.
    """
    cfg.validate()
    if len(n_sessions) != len(cfg.archetypes):
        raise ValidationError(
            f"{len(n_sessions)} counts for {len(cfg.archetypes)} archetypes"
        )
    if any(n < 2 for n in n_sessions):
        raise ValidationError("need at least 2 sessions per archetype")
    out = []
    for aid in sorted(cfg.archetypes):
        arch = cfg.archetypes[aid]
        for idx in range(n_sessions[aid - 1]):
            out.append(generate_session(arch, cfg, session_index=idx, channels=channels))
    return out


def generate_drift_sessions(n: int, cfg: GeneratorConfig,
                            channels: tuple[str, ...] | None = None,
                            start_index: int = 0) -> list[tuple[EegSession, GroundTruth]]:
    """State-blended sessions under the drift profile (for hold-out tests)."""
    drift_cfg = GeneratorConfig(**{**cfg.__dict__, "drift_profile": True})
    out = []
    for idx in range(start_index, start_index + n):
        out.append(generate_session(None, drift_cfg, session_index=idx,
                                    subject_id=f"drift{idx:02d}", channels=channels))
    return out


# ---------------------------------------------------------------------------
# corpus on disk


def manifest_lines(corpus: list[tuple[EegSession, GroundTruth]]) -> list[str]:
    lines = ["session_id,subject_id,archetype_id,n_trials,duration_s"]
    for session, truth in corpus:
        lines.append(",".join([
            session.session_id,
            session.subject_id,
            str(truth.archetype_id),
            str(len(session.events)),
            fmt_float(session.duration_s),
        ]))
    return lines


def save_corpus(directory, corpus: list[tuple[EegSession, GroundTruth]],
                cfg: GeneratorConfig) -> None:
    from pathlib import Path

    directory = Path(directory)
    provenance = {"seed": cfg.seed, "config_hash": cfg.digest()}
    for session, truth in corpus:
        sdir = directory / session.session_id
        save_session(sdir, session)
        write_json(sdir / "truth.json", {
            "archetype_id": truth.archetype_id,
            "fatigue_per_s": [float(v) for v in truth.fatigue_per_s],
            "session_seed": list(truth.session_seed),
            "provenance": provenance,
        })
    body = provenance_comment(provenance) + "\n".join(manifest_lines(corpus)) + "\n"
    atomic_write_text(directory / "manifest.csv", body)
