"""Wire protocol, latency model, and transports.

Both directions use fixed 17-byte little-endian frames:

    request  = opcode(1) | arg(8) | nonce(8)
    response = status(1) | nonce(8) | payload(8)

The loopback transport synthesizes round-trip times from the latency
model; the UDP transport measures wall-clock time on a real socket.
"""

from __future__ import annotations

import math
import socket
import struct
import time
from dataclasses import dataclass

import numpy as np

PACKET_LEN = 17
DEFAULT_PORT = 43210

_FRAME = struct.Struct("<BQQ")
_U64_MASK = (1 << 64) - 1

OP_LEAK_CACHE = 0x01
OP_LEAK_AVX = 0x02
OP_TRANSMIT_CACHE = 0x03
OP_TRANSMIT_AVX = 0x04
OP_DOWNLOAD = 0x05
OP_ASLR_PROBE = 0x06
OP_TIMING_FN = 0x07
OP_VALUE_CMP = 0x08
OP_ADVANCE_CLOCK = 0x09
OP_RESET = 0x0A

OP_NAMES = {
    OP_LEAK_CACHE: "LEAK_CACHE",
    OP_LEAK_AVX: "LEAK_AVX",
    OP_TRANSMIT_CACHE: "TRANSMIT_CACHE",
    OP_TRANSMIT_AVX: "TRANSMIT_AVX",
    OP_DOWNLOAD: "DOWNLOAD",
    OP_ASLR_PROBE: "ASLR_PROBE",
    OP_TIMING_FN: "TIMING_FN",
    OP_VALUE_CMP: "VALUE_CMP",
    OP_ADVANCE_CLOCK: "ADVANCE_CLOCK",
    OP_RESET: "RESET",
}
VALID_OPCODES = frozenset(OP_NAMES)

STATUS_OK = 0x00
STATUS_BAD_OPCODE = 0x01
STATUS_BAD_ARG = 0x02


class WireError(Exception):
    pass


class CodecError(WireError):
    """Malformed frame.  Carries the nonce when one could be recovered."""

    def __init__(self, message: str, nonce: int | None = None):
        super().__init__(message)
        self.nonce = nonce


class RequestTimeout(WireError):
    """No response within the timeout; safe to retry."""


@dataclass(frozen=True)
class RequestPacket:
    opcode: int
    arg: int = 0
    nonce: int = 0

    def encode(self) -> bytes:
        return encode_request(self)


@dataclass(frozen=True)
class ResponsePacket:
    status: int
    nonce: int
    payload: int = 0

    def encode(self) -> bytes:
        return encode_response(self)


def encode_request(packet: RequestPacket) -> bytes:
    if packet.opcode not in VALID_OPCODES:
        raise CodecError(f"unknown opcode {packet.opcode:#04x}", packet.nonce)
    if not 0 <= packet.arg <= _U64_MASK or not 0 <= packet.nonce <= _U64_MASK:
        raise CodecError("arg/nonce out of 64-bit range", packet.nonce)
    return _FRAME.pack(packet.opcode, packet.arg, packet.nonce)


def decode_request(data: bytes) -> RequestPacket:
    if len(data) != PACKET_LEN:
        nonce = None
        if len(data) >= PACKET_LEN:
            nonce = int.from_bytes(data[9:17], "little")
        raise CodecError(f"bad frame length {len(data)}", nonce)
    opcode, arg, nonce = _FRAME.unpack(data)
    if opcode not in VALID_OPCODES:
        raise CodecError(f"unknown opcode {opcode:#04x}", nonce)
    return RequestPacket(opcode, arg, nonce)


def encode_response(packet: ResponsePacket) -> bytes:
    return _FRAME.pack(packet.status, packet.nonce, packet.payload)


def decode_response(data: bytes) -> ResponsePacket:
    if len(data) != PACKET_LEN:
        raise CodecError(f"bad frame length {len(data)}")
    status, nonce, payload = _FRAME.unpack(data)
    return ResponsePacket(status, nonce, payload)


# ---------------------------------------------------------------------------
# Latency model
# ---------------------------------------------------------------------------

# Measured latency standard deviations for the three deployment scenarios.
PRESET_SIGMAS_NS = {
    "local": 15_600.0,
    "cloud": 52_300.0,
    "arm": 128_500.0,
}


@dataclass
class LatencyModel:
    """One-way base latency plus additive noise on the round trip.

    Gaussian by default; a zero-mean lognormal with matched standard
    deviation is available for heavy-tail experiments.
    """

    base_ns: float = 10_000.0
    sigma_ns: float = 15_600.0
    name: str = "local"
    distribution: str = "gaussian"   # or "lognormal"
    _LOGNORMAL_SHAPE = 0.5

    def __post_init__(self):
        if self.sigma_ns < 0:
            raise ValueError("sigma must be non-negative")
        if self.distribution not in ("gaussian", "lognormal"):
            raise ValueError(f"unknown distribution {self.distribution!r}")

    @classmethod
    def preset(cls, name: str, base_ns: float = 10_000.0,
               distribution: str = "gaussian") -> "LatencyModel":
        try:
            sigma = PRESET_SIGMAS_NS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}") from None
        return cls(base_ns=base_ns, sigma_ns=sigma, name=name,
                   distribution=distribution)

    @classmethod
    def noiseless(cls, base_ns: float = 10_000.0) -> "LatencyModel":
        return cls(base_ns=base_ns, sigma_ns=0.0, name="noiseless")

    def noise(self, rng: np.random.Generator, size=None):
        if self.sigma_ns == 0.0:
            return 0.0 if size is None else np.zeros(size)
        if self.distribution == "gaussian":
            return rng.normal(0.0, self.sigma_ns, size=size)
        s = self._LOGNORMAL_SHAPE
        raw_var = (math.exp(s * s) - 1.0) * math.exp(s * s)
        scale = self.sigma_ns / raw_var ** 0.5
        mean = math.exp(s * s / 2.0)
        return scale * (rng.lognormal(0.0, s, size=size) - mean)

    def rtt(self, server_ns, rng: np.random.Generator, size=None):
        """Round-trip time for a request the victim spent ``server_ns`` on."""
        raw = 2.0 * self.base_ns + server_ns + self.noise(rng, size=size)
        return np.maximum(raw, 0.0) if size is not None else max(raw, 0.0)


@dataclass(frozen=True)
class Sample:
    """One round-trip measurement."""

    sequence: int
    rtt_ns: float


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

class LoopbackTransport:
    """In-process transport: requests go straight to a victim instance and
    the round-trip time is synthesized from the latency model.  Fully
    deterministic under a seeded generator.
    """

    def __init__(self, victim, latency: LatencyModel, rng: np.random.Generator):
        self.victim = victim
        self.latency = latency
        self.rng = rng

    def request(self, packet: RequestPacket) -> tuple[ResponsePacket, float]:
        response, server_cycles = self.victim.handle_request(packet)
        server_ns = server_cycles * self.victim.config.cycle_time_ns
        return response, self.latency.rtt(server_ns, self.rng)

    def close(self) -> None:
        pass


class UDPTransport:
    """Datagram transport with wall-clock round-trip measurement.

    Responses are matched by nonce, so reordered or duplicated datagrams
    cannot pair a measurement with the wrong request.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 timeout_s: float = 1.0):
        self.addr = (host, port)
        self.timeout_s = timeout_s
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.settimeout(timeout_s)

    def request(self, packet: RequestPacket) -> tuple[ResponsePacket, float]:
        payload = packet.encode()
        start = time.monotonic_ns()
        deadline = start + int(self.timeout_s * 1e9)
        self.sock.sendto(payload, self.addr)
        while True:
            remaining = (deadline - time.monotonic_ns()) / 1e9
            if remaining <= 0:
                raise RequestTimeout(f"no response from {self.addr}")
            self.sock.settimeout(remaining)
            try:
                data, _ = self.sock.recvfrom(2048)
            except socket.timeout:
                raise RequestTimeout(f"no response from {self.addr}") from None
            elapsed = time.monotonic_ns() - start
            response = decode_response(data)
            if response.nonce == packet.nonce:
                return response, float(elapsed)
            # stale datagram from an earlier request; keep waiting

    def close(self) -> None:
        self.sock.close()


def send_request(transport, packet: RequestPacket,
                 sequence: int = 0) -> tuple[ResponsePacket, Sample]:
    """Issue one request and wrap the measured round trip as a Sample."""
    response, rtt_ns = transport.request(packet)
    return response, Sample(sequence=sequence, rtt_ns=rtt_ns)
