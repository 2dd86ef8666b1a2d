# cython: language_level=3
"""Compiled XOR kernels for parity math."""

from libc.stdint cimport uint8_t, uint64_t
from libc.string cimport memcpy


cdef void _xor_inplace(uint8_t* dst, const uint8_t* src, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i = 0
    cdef Py_ssize_t words = n // 8
    cdef uint64_t a, b
    for i in range(words):
        memcpy(&a, dst + i * 8, 8)
        memcpy(&b, src + i * 8, 8)
        a ^= b
        memcpy(dst + i * 8, &a, 8)
    for i in range(words * 8, n):
        dst[i] ^= src[i]


def xor_into(dst, src):
    """XOR ``src`` into the writable buffer ``dst`` in place."""
    cdef uint8_t[::1] d = dst
    cdef const uint8_t[::1] s = src
    cdef Py_ssize_t n = d.shape[0]
    if s.shape[0] != n:
        raise ValueError(f"length mismatch: {n} != {s.shape[0]}")
    if n == 0:
        return
    with nogil:
        _xor_inplace(&d[0], &s[0], n)


def xor_blocks(blocks):
    """Return the byte-wise XOR of equally sized buffers."""
    blocks = list(blocks)
    if not blocks:
        raise ValueError("xor_blocks needs at least one buffer")
    out = bytearray(blocks[0])
    cdef uint8_t[::1] d = out
    cdef const uint8_t[::1] s
    cdef Py_ssize_t n = len(out)
    for b in blocks[1:]:
        s = b
        if s.shape[0] != n:
            raise ValueError(f"length mismatch: {n} != {s.shape[0]}")
        if n:
            with nogil:
                _xor_inplace(&d[0], &s[0], n)
    return bytes(out)
