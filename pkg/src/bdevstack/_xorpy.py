"""Pure-Python XOR kernels, used when the compiled core is unavailable."""


def xor_into(dst, src):
    """XOR ``src`` into the writable buffer ``dst`` in place."""
    n = len(dst)
    if len(src) != n:
        raise ValueError(f"length mismatch: {n} != {len(src)}")
    if n == 0:
        return
    acc = int.from_bytes(dst, "little") ^ int.from_bytes(src, "little")
    dst[:] = acc.to_bytes(n, "little")


def xor_blocks(blocks):
    """Return the byte-wise XOR of equally sized buffers."""
    it = iter(blocks)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("xor_blocks needs at least one buffer") from None
    n = len(first)
    acc = int.from_bytes(first, "little")
    for b in it:
        if len(b) != n:
            raise ValueError(f"length mismatch: {n} != {len(b)}")
        acc ^= int.from_bytes(b, "little")
    return acc.to_bytes(n, "little")
