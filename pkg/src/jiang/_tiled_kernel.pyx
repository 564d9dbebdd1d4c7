# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled tiled-attention forward: one query block streams over key/value
blocks with a running (max, denominator, accumulator) softmax state. All
scratch is caller-provided block-sized buffers; nothing scales with T*T."""

from libc.math cimport exp, sqrt, INFINITY

ctypedef fused real:
    float
    double


def tiled_forward(real[:, :, ::1] q, real[:, :, ::1] k, real[:, :, ::1] v,
                  real[:, :, ::1] out, real[:, ::1] scores,
                  real[::1] m, real[::1] l, real[:, ::1] acc,
                  int block_q, int block_kv, bint causal):
    cdef Py_ssize_t heads = q.shape[0]
    cdef Py_ssize_t t_count = q.shape[1]
    cdef Py_ssize_t d_head = q.shape[2]
    cdef real inv_scale = <real>(1.0 / sqrt(<double>d_head))
    cdef Py_ssize_t h, q0, k0, bq, bk, kv_stop, r, c, d
    cdef real s, bm, nm, alpha, p, row_sum

    for h in range(heads):
        for q0 in range(0, t_count, block_q):
            bq = min(<Py_ssize_t>block_q, t_count - q0)
            for r in range(bq):
                m[r] = -INFINITY
                l[r] = 0.0
                for d in range(d_head):
                    acc[r, d] = 0.0
            kv_stop = min(t_count, q0 + bq) if causal else t_count
            for k0 in range(0, kv_stop, block_kv):
                bk = min(<Py_ssize_t>block_kv, kv_stop - k0)
                for r in range(bq):
                    for c in range(bk):
                        if causal and k0 + c > q0 + r:
                            scores[r, c] = -INFINITY
                            continue
                        s = 0.0
                        for d in range(d_head):
                            s += q[h, q0 + r, d] * k[h, k0 + c, d]
                        scores[r, c] = s * inv_scale
                for r in range(bq):
                    bm = -INFINITY
                    for c in range(bk):
                        if scores[r, c] > bm:
                            bm = scores[r, c]
                    nm = m[r] if m[r] > bm else bm
                    if nm == -INFINITY:
                        continue  # row fully masked so far; state stays empty
                    alpha = 0.0 if m[r] == -INFINITY else <real>exp(m[r] - nm)
                    l[r] = alpha * l[r]
                    for d in range(d_head):
                        acc[r, d] = alpha * acc[r, d]
                    row_sum = 0.0
                    for c in range(bk):
                        if scores[r, c] == -INFINITY:
                            continue
                        p = <real>exp(scores[r, c] - nm)
                        row_sum += p
                        for d in range(d_head):
                            acc[r, d] += p * v[h, k0 + c, d]
                    l[r] += row_sum
                    m[r] = nm
            for r in range(bq):
                for d in range(d_head):
                    out[h, q0 + r, d] = acc[r, d] / l[r]
