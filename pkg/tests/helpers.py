"""Independent fixtures and brute-force oracles used across the test suite."""

import struct

import numpy as np

# "PASS/FAIL" lines appended by the acceptance suite, printed in the terminal summary
ACCEPTANCE = []


def write_nifti1(path, data_xyzt, datatype=16, magic=b"n+1\x00", scl=(0.0, 0.0), pixdim=(1.0, 1.0, 1.0),
                 vox_offset=352, truncate=0):
    """Write a single-file NIfTI-1 by packing the 348-byte header field by field.

    ``data_xyzt`` is indexed ``[x, y, z]`` or ``[x, y, z, t]``; it is written
    with x varying fastest, as the format requires.
    """
    np_types = {2: "<u1", 4: "<i2", 8: "<i4", 16: "<f4", 64: "<f8", 128: "<u1"}
    arr = np.asarray(data_xyzt)
    dims = list(arr.shape)
    ndim = len(dims)
    dim = [ndim] + dims + [1] * (7 - ndim)
    bitpix = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64, 128: 24}[datatype]

    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)  # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(vox_offset))
    struct.pack_into("<ff", hdr, 112, *scl)
    hdr[344:348] = magic

    # x fastest: Fortran order over (x, y, z, t)
    payload = np.asarray(arr, dtype=np_types[datatype]).tobytes(order="F")
    body = bytes(hdr) + b"\x00" * (vox_offset - 348) + payload
    if truncate:
        body = body[:-truncate]
    with open(path, "wb") as fh:
        fh.write(body)


def rotate_plane_loops(plane, angle):
    """Brute-force rotation of a square or rectangular ``plane[u, v]``.

    90 degrees sends ``(u, v)`` to ``(S-1-v, u)``; 180 sends it to
    ``(Su-1-u, Sv-1-v)``.
    """
    su, sv = plane.shape
    if angle == 180:
        out = np.empty_like(plane)
        for u in range(su):
            for v in range(sv):
                out[su - 1 - u, sv - 1 - v] = plane[u, v]
        return out
    assert su == sv
    out = plane
    for _ in range(angle // 90):
        nxt = np.empty_like(out)
        for u in range(su):
            for v in range(sv):
                nxt[su - 1 - v, u] = out[u, v]
        out = nxt
    return out


def conv3d_naive(x, w, b, stride, padding):
    """Seven nested loops (batch/out/in folded into numpy sums only at the innermost point)."""
    n, c, d, h, wd = x.shape
    o, _, kz, ky, kx = w.shape
    xp = np.zeros((n, c, d + 2 * padding, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + d, padding:padding + h, padding:padding + wd] = x
    do = (d + 2 * padding - kz) // stride + 1
    ho = (h + 2 * padding - ky) // stride + 1
    wo = (wd + 2 * padding - kx) // stride + 1
    y = np.zeros((n, o, do, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for z in range(do):
                for yy in range(ho):
                    for xx in range(wo):
                        acc = b[oc]
                        for ic in range(c):
                            for a in range(kz):
                                for bb in range(ky):
                                    for e in range(kx):
                                        acc += w[oc, ic, a, bb, e] * xp[bi, ic, z * stride + a, yy * stride + bb, xx * stride + e]
                        y[bi, oc, z, yy, xx] = acc
    return y


def central_diff(f, arr, idx, h=1e-5):
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
