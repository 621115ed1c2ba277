#!/usr/bin/env python3
"""Print the SIMD power-down penalty curve and the two transmit costs.

The vector unit answers in 210 cycles while warm and 576 cycles from a
full power-down; between 0.5 ms and 1 ms of idle time the penalty ramps
linearly. This curve is what makes the AVX covert channel readable: a
speculative 256-bit operation keeps the unit warm only when the leaked
bit is 1.

Run:  python3 demos/power_state_curve.py
"""

from spectrelab.uarch import (DEFAULT_MAX_PENALTY_CYCLES,
                              DEFAULT_WARM_CYCLES, avx_penalty)
from spectrelab.victim import Victim, VictimConfig
from spectrelab.wire import RequestPacket, OP_TRANSMIT_AVX, OP_ADVANCE_CLOCK


def main():
    print("idle time -> extra cycles over the warm 210-cycle response")
    for idle_us in (0, 250, 499, 500, 625, 750, 875, 999, 1000, 1500):
        p = avx_penalty(idle_us * 1000.0)
        bar = "#" * (p // 8)
        print(f"  {idle_us:5d} us : {p:4d}  {bar}")

    victim = Victim(VictimConfig(), seed=0)
    _, first = victim.handle_request(RequestPacket(OP_TRANSMIT_AVX, 0, 1))
    _, warm = victim.handle_request(RequestPacket(OP_TRANSMIT_AVX, 0, 2))
    victim.handle_request(RequestPacket(OP_ADVANCE_CLOCK, 2_000_000, 3))
    _, cold = victim.handle_request(RequestPacket(OP_TRANSMIT_AVX, 0, 4))
    cold_cycles = DEFAULT_WARM_CYCLES + DEFAULT_MAX_PENALTY_CYCLES
    handler = first - cold_cycles
    print(f"\ntransmit costs (handler overhead {handler} cycles):")
    print(f"  first use : {first} cycles ({cold_cycles} + handler)")
    print(f"  warm      : {warm} cycles ({DEFAULT_WARM_CYCLES} + handler)")
    print(f"  after 2ms : {cold} cycles, delta {cold - warm} cycles "
          f"= {(cold - warm) * 0.5:.0f} ns at 2 GHz")


if __name__ == "__main__":
    main()
