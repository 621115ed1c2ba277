"""End-to-end acceptance criteria.

Each test prints one PASS/FAIL line (run with -s or -rA to see them all).
Statistical criteria use pinned seeds; the derivations behind the chosen
sample counts live in the test bodies as comments.
"""

import math
import struct

import numpy as np
import pytest
from scipy.stats import norm

from spectrelab import attacker, stats, uarch, wire
from spectrelab.attacker import (Calibration, ExtractionPlan, Session,
                                 break_aslr, calibrate, leak_range,
                                 value_threshold_search)
from spectrelab.stats import HistogramSpec
from spectrelab.uarch import SecretStore, avx_penalty, thrash_probability
from spectrelab.victim import Victim, VictimConfig
from spectrelab.wire import LatencyModel, LoopbackTransport, RequestPacket

# Base latency large enough that Gaussian noise never hits the rtt >= 0
# clamp, keeping the effective signal at the full hit/miss delta.
BASE_NS = 100_000.0
LOCAL = 15_600.0
CLOUD = 52_300.0

SECRET_64 = np.random.default_rng(20_240_001).integers(
    0, 256, size=8, dtype=np.uint8).tobytes()


def make_session(seed, sigma_ns, secret=SECRET_64, **overrides):
    overrides.setdefault("latency", LatencyModel(base_ns=BASE_NS,
                                                 sigma_ns=sigma_ns))
    if secret is not None:
        overrides.setdefault("secrets",
                             SecretStore.with_secret(b"\x00" * 16, secret))
    cfg = VictimConfig(**overrides)
    seq = np.random.SeedSequence(seed)
    v_rng, a_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    victim = Victim(cfg, rng=v_rng)
    return Session(LoopbackTransport(victim, cfg.latency, a_rng)), victim


def truth_bits(victim, start, nbits):
    secrets = victim.config.secrets
    return [secrets.bit(start + i) for i in range(nbits)]


def report(num, name, ok):
    print(f"[criterion {num:2d}] {name}: {'PASS' if ok else 'FAIL'}")


def run_recovery(channel, n_per_bit, seed, sigma_ns=LOCAL):
    session, victim = make_session(seed, sigma_ns)
    start = victim.config.secrets.bitstream_length
    plan = ExtractionPlan(channel=channel, measurements_per_bit=n_per_bit,
                          target_bit_range=(start, start + 64))
    calib = calibrate(session, plan, n=4_000_000)
    result = leak_range(session, plan, calib)
    flips = int(np.sum(np.array(result.bits)
                       != np.array(truth_bits(victim, start, 64))))
    return flips, result


class TestCriterion1CacheRecovery:
    def test_cache_end_to_end_local_preset(self):
        # signal 80 ns vs mean s.e. 15.6 ns at N=1e6: per-bit error ~0.5 %,
        # so ~1 flip is expected across 192 reads; tolerance is <= 1.
        flips = sum(run_recovery("cache", 1_000_000, seed)[0]
                    for seed in (106, 107, 108))
        ok = flips <= 1
        report(1, f"cache channel 64-bit recovery, {flips} flips/3 runs", ok)
        assert ok


class TestCriterion2AvxRecovery:
    def test_avx_end_to_end_and_rate_ratio(self):
        flips = 0
        avx_rpb = cache_rpb = None
        for seed in (204, 205, 206):
            f, result = run_recovery("avx", 250_000, seed)
            flips += f
            avx_rpb = result.requests_per_bit
        _, cache_result = run_recovery("cache", 1_000_000, 106)
        cache_rpb = cache_result.requests_per_bit
        ratio = cache_rpb / avx_rpb
        ok = flips <= 1 and 3.0 <= ratio <= 5.0
        report(2, f"avx recovery {flips} flips/3 runs, "
                  f"request ratio {ratio:.2f}x", ok)
        assert ok


class TestCriterion3ByteD:
    def test_byte_d_with_histogram_modes(self, tmp_path):
        # modes need bins finer than the 80 ns gap, so this criterion runs
        # at a reduced sigma where the histogram separation is visible
        spec = HistogramSpec(bin_width_ns=10.0, smoothing_window=11)
        ok_all = True
        for seed in (301, 302, 303):
            session, victim = make_session(
                seed, sigma_ns=20.0, secret=b"d",
                latency=LatencyModel(base_ns=10_000.0, sigma_ns=20.0))
            start = victim.config.secrets.bitstream_length
            plan = ExtractionPlan(measurements_per_bit=100_000,
                                  target_bit_range=(start, start + 8),
                                  histogram=spec)
            calib = calibrate(session, plan, n=100_000)
            modes = []

            def sink(pos, rtts):
                hist = stats.histogram(rtts, spec)
                stats.write_histogram_csv(
                    tmp_path / f"s{seed}_bit{pos}.csv", hist)
                modes.append(hist.mode_ns())

            result = leak_range(session, plan, calib, sample_sink=sink)
            bits_ok = result.bits == [0, 1, 1, 0, 0, 1, 0, 0]
            modes_ok = all(
                (mode < calib.threshold_ns) == bool(bit)
                for mode, bit in zip(modes, result.bits))
            ok_all = ok_all and bits_ok and modes_ok
        report(3, "byte 'd' = 01100100 with mode-side histograms, 3 seeds",
               ok_all)
        assert ok_all


def calibrate_with_retry(session, n, channel="cache", retries=3):
    # the 4 sigma / sqrt(N) gate is itself a noisy statistic near the
    # operating point; a failed calibration is detectable and retryable
    for attempt in range(retries):
        try:
            return calibrate(session, ExtractionPlan(), n=n, channel=channel)
        except attacker.CalibrationError:
            if attempt == retries - 1:
                raise


def fit_required_n(sigma_ns, cells, seed, mitigation_noise_ns=0.0,
                   cal_n=4_000_000):
    """Probit fit of the bit-error sweep: BER(N) = Phi(-a sqrt(N)).
    Returns the N required for 1 % error, (Phi^-1(0.99)/a)^2.
    Calibrates once per condition; all sweep cells share the threshold."""
    cal_session, _ = make_session(
        seed - 1, sigma_ns, mitigation_noise_sigma_ns=mitigation_noise_ns)
    calib = calibrate_with_retry(cal_session, cal_n)
    slopes = []
    for i, (n_per_bit, nbits) in enumerate(cells):
        secret = np.random.default_rng(seed + 7 * i).integers(
            0, 256, size=nbits // 8, dtype=np.uint8).tobytes()
        session, victim = make_session(
            seed + i, sigma_ns, secret=secret,
            mitigation_noise_sigma_ns=mitigation_noise_ns)
        start = victim.config.secrets.bitstream_length
        plan = ExtractionPlan(measurements_per_bit=n_per_bit,
                              target_bit_range=(start, start + nbits))
        result = leak_range(session, plan, calib)
        ber = stats.error_rate(result.bits, truth_bits(victim, start, nbits))
        if 0.0 < ber < 0.5:            # usable probit cell
            slopes.append(-norm.ppf(ber) / math.sqrt(n_per_bit))
    assert len(slopes) >= 2, "sweep produced too few usable cells"
    a = float(np.mean(slopes))
    return (norm.ppf(0.99) / a) ** 2


class TestCriterion4CloudScaling:
    def test_required_n_scales_with_sigma_squared(self):
        cells_local = [(100_000, 256), (400_000, 128), (1_600_000, 64)]
        cells_cloud = [(100_000, 256), (400_000, 128), (1_600_000, 64)]
        n_local = fit_required_n(LOCAL, cells_local, seed=401)
        # the cloud sigma needs more calibration samples to clear the
        # 4 sigma / sqrt(N) distinguishability gate
        n_cloud = fit_required_n(CLOUD, cells_cloud, seed=451,
                                 cal_n=40_000_000)
        ratio = n_cloud / n_local
        expected = (CLOUD / LOCAL) ** 2          # ~11.2
        ok = expected / 2 <= ratio <= expected * 2
        report(4, f"cloud/local required-N ratio {ratio:.1f} "
                  f"(expected ~{expected:.1f})", ok)
        assert ok


class TestCriterion5Aslr:
    def test_hundred_trials_local_preset(self):
        M, probes = 20, 1_000_000
        trial_rng = np.random.default_rng(500)
        successes = 0
        for trial in range(100):
            offset = int(trial_rng.integers(0, 1 << M))
            session, _ = make_session(1000 + trial, LOCAL, secret=None,
                                      valid_aslr_offset=offset,
                                      aslr_space_bits=M)
            try:
                calib = calibrate_with_retry(session, 4_000_000,
                                             channel="aslr")
                result = break_aslr(session, M, probes, calib=calib)
            except (attacker.CalibrationError, attacker.ExtractionError):
                continue
            if result.offset == offset and len(result.rounds) == M:
                successes += 1
        ok = successes >= 95
        report(5, f"layout offset recovery {successes}/100 trials, "
                  f"{M} rounds each", ok)
        assert ok


class TestCriterion6AvxPowerModel:
    def test_penalty_curve_and_transmit_deltas(self):
        curve_ok = (avx_penalty(0) == 0
                    and avx_penalty(499_999.0) == 0
                    and avx_penalty(1_000_000.0) == 366
                    and avx_penalty(2_000_000.0) == 366)
        ramp = [avx_penalty(t) for t in np.arange(500_000.0, 1_000_001.0,
                                                  1000.0)]
        curve_ok = curve_ok and all(b - a >= 0 for a, b in zip(ramp, ramp[1:]))
        curve_ok = curve_ok and max(
            b - a for a, b in zip(ramp, ramp[1:])) <= 2

        session, victim = make_session(601, 0.0)
        _, warm_up = victim.handle_request(
            RequestPacket(wire.OP_TRANSMIT_AVX, 0, 1))
        _, warm = victim.handle_request(
            RequestPacket(wire.OP_TRANSMIT_AVX, 0, 2))
        victim.handle_request(RequestPacket(wire.OP_ADVANCE_CLOCK,
                                            2_000_000, 3))
        _, cold = victim.handle_request(
            RequestPacket(wire.OP_TRANSMIT_AVX, 0, 4))
        deltas_ok = (warm_up == 1000 + 576 and warm == 1000 + 210
                     and cold == 1000 + 576 and cold - warm == 366)
        ok = curve_ok and deltas_ok
        report(6, "power-down penalty curve and 210/576 transmit costs", ok)
        assert ok


class TestCriterion7Thrash:
    def test_model_point_and_empirical_curve(self):
        model_ok = thrash_probability(590_000) >= 0.99
        rng = np.random.default_rng(700)
        state = uarch.MicroarchState()
        empirical_ok = True
        last = -1.0
        for size in (50_000, 150_000, 300_000, 590_000, 1_000_000):
            hits = 0
            for _ in range(10_000):
                state.cache.flag_cached = True
                hits += state.thrash(size, rng)
            freq = hits / 10_000
            empirical_ok &= abs(freq - thrash_probability(size)) < 0.02
            empirical_ok &= freq > last
            last = freq
        ok = model_ok and empirical_ok
        report(7, "eviction probability model and empirical curve", ok)
        assert ok


class TestCriterion8Mitigations:
    def test_barrier_reduces_to_chance(self):
        secret = np.random.default_rng(800).integers(
            0, 256, size=125, dtype=np.uint8).tobytes()    # 1000 bits
        session, victim = make_session(801, 0.0, secret=secret,
                                       mitigation_barrier=True,
                                       latency=LatencyModel.noiseless())
        start = victim.config.secrets.bitstream_length
        plan = ExtractionPlan(measurements_per_bit=50,
                              target_bit_range=(start, start + 1000))
        calib = calibrate(session, plan, n=1000)
        result = leak_range(session, plan, calib)
        accuracy = 1.0 - stats.error_rate(result.bits,
                                          truth_bits(victim, start, 1000))
        ok = 0.45 <= accuracy <= 0.55
        report(8, f"speculation barrier: recovery accuracy "
                  f"{accuracy:.1%} (chance level)", ok)
        assert ok

    def test_noise_mitigation_inflates_required_n(self):
        # server-side noise at 10x the local sigma; its clamp at zero
        # server time halves the effective signal and leaves a ~90 us
        # standard deviation, so the required N grows by far more than
        # the raw 101x variance ratio
        n_base = fit_required_n(
            LOCAL, [(100_000, 256), (400_000, 128)], seed=860)
        n_mitigated = fit_required_n(
            LOCAL, [(4_000_000, 96), (16_000_000, 48)], seed=870,
            mitigation_noise_ns=10 * LOCAL, cal_n=200_000_000)
        ratio = n_mitigated / n_base
        ok = ratio >= 50.0
        report(8, f"noise mitigation: required-N ratio {ratio:.0f}x "
                  f"(needs >= 50x)", ok)
        assert ok


class TestCriterion9NonInterference:
    def test_leak_responses_are_secret_independent(self):
        secret_a = bytes(range(64, 128))
        secret_b = bytes(b ^ 0xFF for b in secret_a)
        va = Victim(VictimConfig(
            secrets=SecretStore.with_secret(b"\x00" * 16, secret_a)), seed=9)
        vb = Victim(VictimConfig(
            secrets=SecretStore.with_secret(b"\x00" * 16, secret_b)), seed=9)
        rng = np.random.default_rng(901)
        leak_ops = [wire.OP_LEAK_CACHE, wire.OP_LEAK_AVX]
        trace = [(leak_ops[rng.integers(2)], int(rng.integers(0, 800)))
                 for _ in range(5000)]
        cycles_a = [va.handle_request(RequestPacket(op, arg, i))[1]
                    for i, (op, arg) in enumerate(trace)]
        cycles_b = [vb.handle_request(RequestPacket(op, arg, i))[1]
                    for i, (op, arg) in enumerate(trace)]
        same_leaks = cycles_a == cycles_b

        # a transmit after an out-of-bounds leak of a differing bit does
        # depend on the secret: that asymmetry is the covert channel
        probe = RequestPacket(wire.OP_TRANSMIT_CACHE, 0, 0)
        for v in (va, vb):
            v.handle_request(RequestPacket(wire.OP_RESET, 0, 0))
            for _ in range(10):
                v.handle_request(RequestPacket(wire.OP_LEAK_CACHE, 0, 0))
            v.handle_request(RequestPacket(wire.OP_DOWNLOAD, 10**9, 0))
            v.handle_request(RequestPacket(wire.OP_LEAK_CACHE, 128, 0))
        _, ta = va.handle_request(probe)
        _, tb = vb.handle_request(probe)
        transmit_differs = ta != tb
        ok = same_leaks and transmit_differs
        report(9, "leak responses identical across secrets; transmit "
                  "timing differs", ok)
        assert ok


class TestCriterion10Statistics:
    def test_dispersion_sigma_and_codec(self):
        rng = np.random.default_rng(1001)
        disp_ok = True
        for name, sigma in wire.PRESET_SIGMAS_NS.items():
            model = LatencyModel.preset(name)
            noise = model.noise(rng, size=100_000)
            _, std, frac = stats.dispersion(noise)
            disp_ok &= frac >= 0.888
            disp_ok &= abs(std - sigma) / sigma < 0.02

        codec_ok = True
        ops = sorted(wire.VALID_OPCODES)
        args = rng.integers(0, 2**63, size=100_000)
        nonces = rng.integers(0, 2**63, size=100_000)
        which = rng.integers(0, len(ops), size=100_000)
        for i in range(100_000):
            packet = RequestPacket(ops[which[i]], int(args[i]),
                                   int(nonces[i]))
            if wire.decode_request(packet.encode()) != packet:
                codec_ok = False
                break
        ok = disp_ok and codec_ok
        report(10, "three-sigma bound, sigma estimates, codec round trip",
               ok)
        assert ok


class TestCriterion11ValueThreshold:
    def test_noiseless_sixteen_rounds(self):
        session, _ = make_session(1101, 0.0, secret=None,
                                  value_secret=47_802,
                                  latency=LatencyModel.noiseless())
        plan = ExtractionPlan(measurements_per_bit=50)
        calib = calibrate(session, plan, n=1000, channel="value")
        result = value_threshold_search(session, 16, plan, calib)
        ok = result.value == 47_802 and len(result.rounds) == 16
        report(11, "noiseless 16-bit value in 16 rounds", ok)
        assert ok

    def test_local_preset_hundred_trials(self):
        # per-round decision quality at N=1e5 under sigma=15.6 us:
        # z = 40 ns / (15.6 us / sqrt(1e5)) ~ 0.81, so each round errs
        # ~21 % of the time and P(all 16 correct) ~ 2 %.  The >= 95/100
        # bar is far beyond what this operating point can deliver; the
        # test states the requirement faithfully and reports the outcome.
        cal_session, _ = make_session(1150, LOCAL, secret=None,
                                      value_secret=1)
        calib = calibrate(cal_session, ExtractionPlan(), n=4_000_000)
        trial_rng = np.random.default_rng(1100)
        plan = ExtractionPlan(measurements_per_bit=100_000)
        successes = 0
        for trial in range(100):
            secret = int(trial_rng.integers(0, 1 << 16))
            session, _ = make_session(1200 + trial, LOCAL, secret=None,
                                      value_secret=secret)
            result = value_threshold_search(session, 16, plan, calib)
            successes += result.value == secret
        ok = successes >= 95
        report(11, f"16-bit value under local preset {successes}/100 "
                   f"exact trials (needs >= 95)", ok)
        assert ok
