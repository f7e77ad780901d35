"""Shared fixture builders for the test suite."""

import struct

import numpy as np


def ieee_to_ibm_word(value):
    """Encode a float as an IBM 32-bit word (inverse helper for fixtures).

    Only needs to cover values exactly representable in both formats,
    which is all the fixtures use.
    """
    if value == 0.0:
        return 0
    sign = 0
    if value < 0:
        sign = 1
        value = -value
    exponent = 64
    mantissa = value
    while mantissa >= 1.0:
        mantissa /= 16.0
        exponent += 1
    while mantissa < 1.0 / 16.0:
        mantissa *= 16.0
        exponent -= 1
    frac = int(round(mantissa * (1 << 24)))
    if frac == 1 << 24:
        frac >>= 4
        exponent += 1
    return (sign << 31) | (exponent << 24) | frac


def write_segy(path, traces, fmt=5, ns=None, interval_us=4000,
               inline_byte=189, crossline_byte=193, extra_tail=b""):
    """Write a minimal rev1 big-endian SEG-Y file.

    `traces` is a list of (inline, crossline, samples) tuples; every sample
    vector must share one length unless `ns` overrides the declared count.
    """
    if ns is None:
        ns = len(traces[0][2])
    buf = bytearray()
    buf += b" " * 3200
    binary = bytearray(400)
    struct.pack_into(">H", binary, 3216 - 3200, interval_us)
    struct.pack_into(">H", binary, 3220 - 3200, ns)
    struct.pack_into(">H", binary, 3224 - 3200, fmt)
    buf += binary
    for il, xl, samples in traces:
        hdr = bytearray(240)
        struct.pack_into(">H", hdr, 114, len(samples))
        struct.pack_into(">i", hdr, inline_byte - 1, il)
        struct.pack_into(">i", hdr, crossline_byte - 1, xl)
        buf += hdr
        if fmt == 5:
            buf += np.asarray(samples, dtype=">f4").tobytes()
        else:
            words = [ieee_to_ibm_word(float(v)) for v in samples]
            buf += np.asarray(words, dtype=">u4").tobytes()
    buf += extra_tail
    with open(path, "wb") as fh:
        fh.write(bytes(buf))
    return path
