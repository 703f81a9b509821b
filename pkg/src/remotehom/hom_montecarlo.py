"""Pulse-train Monte-Carlo synthesis of two-source interference histograms.

Each excitation pulse may yield one photon per source; photon pairs are
formed between the two sources only (same-pulse pairs build the central
peak, pairs offset by whole repetition periods build the side peaks).
Same-source accidentals are outside the model, which is why the
perpendicular central peak equals the side peaks. For the parallel
configuration a same-pulse coincidence survives with probability
(1 - m)/2, where m is the dephasing-broadened overlap evaluated at the
instantaneous detuning of that pulse; all other pairings survive with
probability 1/2. Averaged over the wandering statistics, the parallel
suppression therefore reproduces the Voigt-averaged overlap without ever
evaluating it, which is this module's role as an independent check of
the closed form.

Determinism: the pulse train is cut into fixed-size shards; every random
stream is keyed by (seed, polarization, shard index, purpose), so merged
histograms are bit-identical for any worker count or execution order.
Wandering and blinking restart from their stationary distributions at
shard boundaries, and photon pairings never cross a shard boundary
(both effects are negligible at the default shard size of 65536 pulses
against correlation times of microseconds or less).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .units_core import make_rng
from .wavepacket import WavepacketProfile, emission_profile
from .overlap_analytics import SourcePair, mwo_voigt_averaged
from .spectral_noise import _ou_path_uniform

__all__ = [
    "Polarization",
    "HomExperimentConfig",
    "CoincidenceHistogram",
    "VisibilityEstimate",
    "simulate_histogram",
    "estimate_visibility",
    "analytic_prediction",
    "write_histogram_csv",
    "write_visibility_json",
]

SHARD_SIZE = 65536


class Polarization(Enum):
    PARALLEL = "parallel"
    PERPENDICULAR = "perpendicular"


@dataclass(frozen=True)
class HomExperimentConfig:
    """Pulse-train and detection settings for one interference run.

    n_pulses below ~1e4 gives estimates dominated by shot noise; the
    statistical contracts in this package assume at least that many.
    """

    n_pulses: int
    rep_period_ns: float = 12.2
    jitter_sigma_ps: float = 12.0
    g2: float = 0.0
    blink_on_prob: float = 0.9
    blink_dwell_ns: float = 100.0
    bin_width_ps: float = 50.0
    window_peaks: int = 3

    def __post_init__(self) -> None:
        if self.n_pulses < 1:
            raise ValueError("n_pulses must be >= 1")
        if self.rep_period_ns <= 0 or self.bin_width_ps <= 0:
            raise ValueError("rep_period_ns and bin_width_ps must be > 0")
        if not 0.0 <= self.g2 < 1.0:
            raise ValueError(f"g2 must be in [0, 1), got {self.g2}")
        if not 0.0 <= self.blink_on_prob <= 1.0:
            raise ValueError("blink_on_prob must be in [0, 1]")
        if self.blink_on_prob < 1.0 and self.blink_dwell_ns < self.rep_period_ns:
            raise ValueError("blink_dwell_ns must be >= rep_period_ns")
        if self.jitter_sigma_ps < 0 or self.window_peaks < 1:
            raise ValueError("jitter must be >= 0 and window_peaks >= 1")


@dataclass(frozen=True)
class CoincidenceHistogram:
    """Binned coincidence counts vs detection-time difference (ns)."""

    bin_centers: np.ndarray
    counts: np.ndarray
    polarization: Polarization

    def __post_init__(self) -> None:
        c = np.asarray(self.bin_centers, dtype=float)
        n = np.asarray(self.counts)
        object.__setattr__(self, "bin_centers", c)
        object.__setattr__(self, "counts", n)
        if c.ndim != 1 or c.shape != n.shape or c.size < 1:
            raise ValueError("bin_centers and counts must be matching 1-d arrays")
        if c.size > 1:
            d = np.diff(c)
            if not np.allclose(d, d[0], rtol=1e-9, atol=0.0):
                raise ValueError("bins must be uniform")
        if np.any(n < 0):
            raise ValueError("counts must be non-negative")


@dataclass(frozen=True)
class VisibilityEstimate:
    """Interference visibility 1 - A_par/A_perp with Poisson uncertainty."""

    v_tpi: float
    sigma: float
    a_par: float
    a_perp: float


# Stream purpose codes; every use of randomness gets its own sub-stream so
# that switching one mechanism on or off (e.g. blinking) leaves all other
# draws untouched, enabling tightly paired comparisons at one seed.
_P_BLINK_A, _P_BLINK_B = 0, 1
_P_EMIT_A, _P_EMIT_B = 2, 3
_P_FREQ_A, _P_FREQ_B = 4, 5
_P_SIDEBAND_A, _P_SIDEBAND_B = 6, 7
_P_ACCEPT, _P_TIMES, _P_JITTER, _P_G2 = 8, 9, 10, 11


def _blink_chain(rng: np.random.Generator, n: int, p_on: float,
                 rep_period_ns: float, dwell_ns: float) -> np.ndarray:
    """Stationary two-state Markov chain sampled at pulse resolution.

    The stationary on-probability is p_on; dwell_ns is the correlation
    time of the chain, so P(off->on) = p_on * T / dwell per pulse and
    P(on->off) = (1 - p_on) * T / dwell.
    """
    if p_on >= 1.0:
        return np.ones(n, dtype=bool)
    if p_on <= 0.0:
        return np.zeros(n, dtype=bool)
    to_on = p_on * rep_period_ns / dwell_ns
    to_off = (1.0 - p_on) * rep_period_ns / dwell_ns
    start_on = bool(rng.random() < p_on)
    pieces = []
    covered = 0
    state = start_on
    mean_cycle = 1.0 / to_on + 1.0 / to_off
    while covered < n:
        n_cyc = max(8, int(1.3 * (n - covered) / mean_cycle))
        lens_a = rng.geometric(to_off if state else to_on, n_cyc)
        lens_b = rng.geometric(to_on if state else to_off, n_cyc)
        lens = np.column_stack([lens_a, lens_b]).ravel()
        vals = np.tile([state, not state], n_cyc)
        pieces.append(np.repeat(vals, lens))
        covered += int(lens.sum())
        # after an even number of segments the state is back where it started
    return np.concatenate(pieces)[:n]


def _sample_times(profile_cdf: np.ndarray, grid: np.ndarray,
                  rng: np.random.Generator, n: int) -> np.ndarray:
    return np.interp(rng.random(n), profile_cdf, grid)


def _simulate_shard(pair: SourcePair, cfg: HomExperimentConfig, pol: Polarization,
                    seed: int, shard: int, n_shard: int, edges: np.ndarray,
                    cdf_a: np.ndarray, grid_a: np.ndarray,
                    cdf_b: np.ndarray, grid_b: np.ndarray) -> np.ndarray:
    pol_code = 0 if pol is Polarization.PARALLEL else 1
    key = (pol_code, shard)
    T = cfg.rep_period_ns
    jit = cfg.jitter_sigma_ps / 1000.0

    on_a = _blink_chain(make_rng(seed, *key, _P_BLINK_A), n_shard,
                        cfg.blink_on_prob, T, cfg.blink_dwell_ns)
    on_b = _blink_chain(make_rng(seed, *key, _P_BLINK_B), n_shard,
                        cfg.blink_on_prob, T, cfg.blink_dwell_ns)
    present_a = on_a & (make_rng(seed, *key, _P_EMIT_A).random(n_shard) < pair.a.brightness)
    present_b = on_b & (make_rng(seed, *key, _P_EMIT_B).random(n_shard) < pair.b.brightness)

    def ou(which_seed: int, params) -> np.ndarray:
        sig = params.delta_omega.value
        if sig == 0.0:
            return np.zeros(n_shard)
        rng = make_rng(seed, *key, which_seed)
        x0 = sig * rng.standard_normal()
        if n_shard == 1:
            return np.array([x0])
        lam = math.exp(-T / params.tau_c_ns)
        rest = _ou_path_uniform(sig, lam, x0, rng.standard_normal(n_shard - 1))
        return np.concatenate([[x0], rest])

    x_a = ou(_P_FREQ_A, pair.a)
    x_b = ou(_P_FREQ_B, pair.b)

    p_sb_a, p_sb_b = pair.effective_sidebands
    sb_a = make_rng(seed, *key, _P_SIDEBAND_A).random(n_shard) < p_sb_a
    sb_b = make_rng(seed, *key, _P_SIDEBAND_B).random(n_shard) < p_sb_b

    ga, gb = pair.a.gamma.value, pair.b.gamma.value
    Ga, Gb = pair.a.total_linewidth.value, pair.b.total_linewidth.value
    gsum, Gsum = ga + gb, Ga + Gb

    rng_accept = make_rng(seed, *key, _P_ACCEPT)
    rng_times = make_rng(seed, *key, _P_TIMES)
    rng_jitter = make_rng(seed, *key, _P_JITTER)
    rng_g2 = make_rng(seed, *key, _P_G2)

    taus = []

    def record(n_events: int, offset_ns: float) -> None:
        if n_events == 0:
            return
        t_a = _sample_times(cdf_a, grid_a, rng_times, n_events)
        t_b = _sample_times(cdf_b, grid_b, rng_times, n_events)
        delt = t_b - t_a
        if jit > 0:
            delt = delt + jit * rng_jitter.standard_normal(n_events) \
                        - jit * rng_jitter.standard_normal(n_events)
        taus.append(delt + offset_ns)

    # central peak: same-pulse cross-source pairs, interference-sensitive
    both = present_a & present_b
    u = rng_accept.random(n_shard)
    if pol is Polarization.PARALLEL:
        delta = pair.mean_detuning.value + x_a - x_b
        m = pair.s_classical * Gsum * gsum / (Gsum * Gsum + 4.0 * delta * delta)
        m = np.where(sb_a | sb_b, 0.0, m)
        accept = both & (u < 0.5 * (1.0 - m))
    else:
        accept = both & (u < 0.5)
    record(int(accept.sum()), 0.0)

    # side peaks: cross-source pairs offset by whole periods, no interference
    for off in range(1, cfg.window_peaks + 1):
        if off >= n_shard:
            break
        for sign in (1, -1):
            if sign > 0:
                pairs_ok = present_a[:-off] & present_b[off:]
            else:
                pairs_ok = present_a[off:] & present_b[:-off]
            u = rng_accept.random(pairs_ok.size)
            record(int((pairs_ok & (u < 0.5)).sum()), sign * off * T)

    # residual multiphoton: per pulse and window, a fully distinguishable
    # extra coincidence candidate with probability g2, surviving 1/2
    if cfg.g2 > 0.0:
        for off in range(-cfg.window_peaks, cfg.window_peaks + 1):
            n_slots = n_shard - abs(off)
            if n_slots <= 0:
                continue
            if off == 0:
                slots = both
            elif off > 0:
                slots = present_a[:n_slots] & present_b[off:]
            else:
                slots = present_a[-off:] & present_b[:n_slots]
            inj = slots & (rng_g2.random(n_slots) < cfg.g2) \
                        & (rng_g2.random(n_slots) < 0.5)
            record(int(inj.sum()), off * T)

    if taus:
        all_tau = np.concatenate(taus)
    else:
        all_tau = np.empty(0)
    counts, _ = np.histogram(all_tau, bins=edges)
    return counts.astype(np.int64)


def simulate_histogram(pair: SourcePair, cfg: HomExperimentConfig, pol: Polarization,
                       seed: int, workers: int = 1) -> CoincidenceHistogram:
    """Synthesize one coincidence histogram for the given polarization.

    Deterministic per (pair, cfg, pol, seed); `workers` only controls how
    many shards run concurrently and never changes the result.
    """
    profile_a = emission_profile(pair.a)
    profile_b = emission_profile(pair.b)
    cdf_a, grid_a = profile_a.intensity_cdf(), profile_a.t_grid
    cdf_b, grid_b = profile_b.intensity_cdf(), profile_b.t_grid

    T = cfg.rep_period_ns
    half_span = (cfg.window_peaks + 0.5) * T
    n_bins = max(1, int(round(2.0 * half_span / (cfg.bin_width_ps / 1000.0))))
    edges = np.linspace(-half_span, half_span, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])

    n_shards = (cfg.n_pulses + SHARD_SIZE - 1) // SHARD_SIZE

    def run(shard: int) -> np.ndarray:
        lo = shard * SHARD_SIZE
        n_shard = min(SHARD_SIZE, cfg.n_pulses - lo)
        return _simulate_shard(pair, cfg, pol, seed, shard, n_shard, edges,
                               cdf_a, grid_a, cdf_b, grid_b)

    total = np.zeros(n_bins, dtype=np.int64)
    if workers > 1 and n_shards > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for counts in pool.map(run, range(n_shards)):
                total += counts
    else:
        for shard in range(n_shards):
            total += run(shard)
    return CoincidenceHistogram(centers, total, pol)


def estimate_visibility(h_par: CoincidenceHistogram, h_perp: CoincidenceHistogram,
                        rep_period_ns: float = 12.2) -> VisibilityEstimate:
    """Visibility 1 - A_par/A_perp from the central peaks of the two histograms.

    The central integration window is one repetition period centered on
    zero delay. Uncertainty comes from Poisson propagation of the two
    areas. Raises ValueError when the histograms are binned differently
    or the perpendicular central peak is empty.
    """
    if h_par.bin_centers.shape != h_perp.bin_centers.shape or \
            not np.allclose(h_par.bin_centers, h_perp.bin_centers, rtol=1e-12, atol=1e-12):
        raise ValueError("histograms must share identical binning")
    window = np.abs(h_par.bin_centers) < rep_period_ns / 2.0
    a_par = float(np.sum(h_par.counts[window]))
    a_perp = float(np.sum(h_perp.counts[window]))
    if a_perp <= 0:
        raise ValueError("empty perpendicular central peak; cannot normalize")
    ratio = a_par / a_perp
    if a_par > 0:
        sigma = ratio * math.sqrt(1.0 / a_par + 1.0 / a_perp)
    else:
        sigma = 1.0 / a_perp
    return VisibilityEstimate(v_tpi=1.0 - ratio, sigma=sigma, a_par=a_par, a_perp=a_perp)


def analytic_prediction(pair: SourcePair) -> float:
    """Closed-form prediction of the measured visibility for a pair.

    The Voigt-averaged overlap degraded by the sideband fractions:
    (1 - p_a)(1 - p_b) * M_voigt. A filter on the pair removes the
    sidebands, so the factors become 1.
    """
    p_a, p_b = pair.effective_sidebands
    return (1.0 - p_a) * (1.0 - p_b) * mwo_voigt_averaged(pair)


def write_histogram_csv(h: CoincidenceHistogram, path: str | Path,
                        config_hash: Optional[str] = None) -> None:
    """Write `bin_center_ns, counts` rows, tagged with the producing config."""
    with Path(path).open("w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("bin_center_ns,counts\n")
        for c, n in zip(h.bin_centers, h.counts):
            fh.write(f"{float(c)!r},{int(n)}\n")


def write_visibility_json(est: VisibilityEstimate, path: str | Path,
                          config_hash: str, seed: int) -> None:
    """Write the visibility summary as deterministic (sorted-key) JSON."""
    payload = {
        "v_tpi": est.v_tpi,
        "sigma": est.sigma,
        "a_par": est.a_par,
        "a_perp": est.a_perp,
        "config_hash": config_hash,
        "seed": int(seed),
    }
    with Path(path).open("w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
