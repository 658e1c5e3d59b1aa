"""Fused single-sample integer inference engine.

Same arithmetic as quant.forward_int8 (one whole-network kernel compiled
with numba instead of layer-by-layer numpy), so outputs must agree bit for
bit; the test suite asserts that. Built lazily: importing this module does
not import numba, and make_engine returns None when numba is unavailable.
"""

from __future__ import annotations

import numpy as np

from .quant import ADD_LEFT_SHIFT, QuantizedModel

_kernel = None


def _build_kernel():
    from numba import njit

    @njit(cache=True, inline="always")
    def fpm(x, m0, shift):
        ab = x * m0
        if ab >= 0:
            high = (ab + (1 << 30)) >> 31
        else:
            high = -((-ab + (1 << 30)) >> 31)
        if shift > 0:
            half = np.int64(1) << (shift - 1)
            if high >= 0:
                high = (high + half) >> shift
            else:
                high = -((-high + half) >> shift)
        return high

    @njit(cache=True, inline="always")
    def requant(acc, m0, shift, zout):
        q = fpm(acc, m0, shift) + zout
        if q < 0:
            q = 0
        elif q > 255:
            q = 255
        return np.uint8(q)

    @njit(cache=True)
    def conv(x, zin, w, b, stride, m0, shift, zout):
        length, cin = x.shape
        k, _, cout = w.shape
        out_len = (length + stride - 1) // stride
        pad = k // 2
        out = np.empty((out_len, cout), dtype=np.uint8)
        acc = np.empty(cout, dtype=np.int64)
        for t in range(out_len):
            base = t * stride - pad
            for o in range(cout):
                acc[o] = b[o]
            for j in range(k):
                s = base + j
                if 0 <= s < length:
                    for c in range(cin):
                        xv = np.int64(x[s, c]) - zin
                        if xv != 0:
                            for o in range(cout):
                                acc[o] += xv * np.int64(w[j, c, o])
            for o in range(cout):
                out[t, o] = requant(acc[o], m0, shift, zout)
        return out

    @njit(cache=True)
    def dense(x, zin, w, b, m0, shift, zout):
        n, cout = w.shape
        out = np.empty(cout, dtype=np.uint8)
        for o in range(cout):
            acc = np.int64(b[o])
            for c in range(n):
                acc += (np.int64(x[c]) - zin) * np.int64(w[c, o])
            out[o] = requant(acc, m0, shift, zout)
        return out

    @njit(cache=True)
    def add2(q1, z1, m01, sh1, q2, z2, m02, sh2, m0o, sho, zo):
        length, c = q1.shape
        out = np.empty((length, c), dtype=np.uint8)
        for t in range(length):
            for o in range(c):
                s1 = fpm((np.int64(q1[t, o]) - z1) << ADD_LEFT_SHIFT, m01, sh1)
                s2 = fpm((np.int64(q2[t, o]) - z2) << ADD_LEFT_SHIFT, m02, sh2)
                out[t, o] = requant(s1 + s2, m0o, sho, zo)
        return out

    @njit(cache=True)
    def forward(xq, in_z,
                stem_w, stem_b, stem_m0, stem_sh, stem_z,
                body_w, body_b, body_m0, body_sh, body_z,
                gap_m0, gap_sh, gap_z,
                red_w, red_b, red_m0, red_sh, red_z,
                exp_w, exp_b, pre_m0, pre_sh, pre_z,
                luts,
                mul_m0, mul_sh, mul_z,
                res_m01, res_sh1, res_m02, res_sh2, res_m0o, res_sho, res_z,
                ra_w, ra_b, ra_m0, ra_sh, ra_z,
                rb_w, rb_b, rb_m0, rb_sh, rb_z,
                radd_m01, radd_sh1, radd_m02, radd_sh2, radd_m0o, radd_sho, radd_z,
                head_w, head_b, head_scale):
        blocks = body_w.shape[0]
        filters = stem_w.shape[2]
        h = conv(xq.reshape(-1, 1), in_z, stem_w, stem_b, 1,
                 stem_m0, stem_sh, stem_z)
        z_h = stem_z
        for i in range(blocks):
            length = h.shape[0]
            u = conv(h, z_h, body_w[i], body_b[i], 1,
                     body_m0[i], body_sh[i], body_z[i])

            gacc = np.empty(filters, dtype=np.int64)
            for o in range(filters):
                gacc[o] = -length * body_z[i]
            for t in range(length):
                for o in range(filters):
                    gacc[o] += np.int64(u[t, o])
            s = np.empty(filters, dtype=np.uint8)
            for o in range(filters):
                s[o] = requant(gacc[o], gap_m0[i], gap_sh[i], gap_z[i])

            r = dense(s, gap_z[i], red_w[i], red_b[i],
                      red_m0[i], red_sh[i], red_z[i])
            pre = dense(r, red_z[i], exp_w[i], exp_b[i],
                        pre_m0[i], pre_sh[i], pre_z[i])
            gate = np.empty(filters, dtype=np.int64)
            for o in range(filters):
                gate[o] = luts[i, pre[o]]

            sc = np.empty((length, filters), dtype=np.uint8)
            for t in range(length):
                for o in range(filters):
                    acc = (np.int64(u[t, o]) - body_z[i]) * gate[o]
                    sc[t, o] = requant(acc, mul_m0[i], mul_sh[i], mul_z[i])

            h2 = add2(h, z_h, res_m01[i], res_sh1[i],
                      sc, mul_z[i], res_m02[i], res_sh2[i],
                      res_m0o[i], res_sho[i], res_z[i])
            a = conv(h2, res_z[i], ra_w[i], ra_b[i], 2,
                     ra_m0[i], ra_sh[i], ra_z[i])
            b2 = conv(h2, res_z[i], rb_w[i], rb_b[i], 2,
                      rb_m0[i], rb_sh[i], rb_z[i])
            h = add2(a, ra_z[i], radd_m01[i], radd_sh1[i],
                     b2, rb_z[i], radd_m02[i], radd_sh2[i],
                     radd_m0o[i], radd_sho[i], radd_z[i])
            z_h = radd_z[i]

        acc = np.int64(head_b)
        idx = 0
        for t in range(h.shape[0]):
            for o in range(filters):
                acc += (np.int64(h[t, o]) - z_h) * np.int64(head_w[idx])
                idx += 1
        return head_scale * acc

    return forward


class FastEngine:
    """Packs a QuantizedModel into flat arrays for the fused kernel."""

    def __init__(self, qm: QuantizedModel):
        global _kernel
        if _kernel is None:
            _kernel = _build_kernel()
        cfg = qm.cfg
        a, m, w, b = qm.activations, qm.multipliers, qm.weights, qm.biases
        blocks = cfg.blocks

        def stack_w(fmt):
            return np.stack([w[fmt.format(i)].q for i in range(blocks)])

        def stack_b(fmt):
            return np.stack([b[fmt.format(i)].q.astype(np.int64) for i in range(blocks)])

        def m0s(fmt):
            return np.array([m[fmt.format(i)].m0 for i in range(blocks)], dtype=np.int64)

        def shs(fmt):
            return np.array([m[fmt.format(i)].right_shift for i in range(blocks)], dtype=np.int64)

        def zs(fmt):
            return np.array([a[fmt.format(i)].zero_point for i in range(blocks)], dtype=np.int64)

        sm = m["stem"]
        self.input_len = cfg.input_len
        self.args = (
            np.int64(a["input"].zero_point),
            w["stem.w"].q, b["stem.b"].q.astype(np.int64),
            np.int64(sm.m0), np.int64(sm.right_shift), np.int64(a["stem"].zero_point),
            stack_w("block{}.body.w"), stack_b("block{}.body.b"),
            m0s("block{}.body"), shs("block{}.body"), zs("block{}.body"),
            m0s("block{}.gap"), shs("block{}.gap"), zs("block{}.gap"),
            stack_w("block{}.se_reduce.w"), stack_b("block{}.se_reduce.b"),
            m0s("block{}.se_reduce"), shs("block{}.se_reduce"), zs("block{}.se_reduce"),
            stack_w("block{}.se_expand.w"), stack_b("block{}.se_expand.b"),
            m0s("block{}.se_pre"), shs("block{}.se_pre"), zs("block{}.se_pre"),
            np.stack(qm.luts),
            m0s("block{}.se_mul"), shs("block{}.se_mul"), zs("block{}.se_mul"),
            m0s("block{}.res_add.in1"), shs("block{}.res_add.in1"),
            m0s("block{}.res_add.in2"), shs("block{}.res_add.in2"),
            m0s("block{}.res_add.out"), shs("block{}.res_add.out"), zs("block{}.res_add"),
            stack_w("block{}.red_a.w"), stack_b("block{}.red_a.b"),
            m0s("block{}.red_a"), shs("block{}.red_a"), zs("block{}.red_a"),
            stack_w("block{}.red_b.w"), stack_b("block{}.red_b.b"),
            m0s("block{}.red_b"), shs("block{}.red_b"), zs("block{}.red_b"),
            m0s("block{}.red_add.in1"), shs("block{}.red_add.in1"),
            m0s("block{}.red_add.in2"), shs("block{}.red_add.in2"),
            m0s("block{}.red_add.out"), shs("block{}.red_add.out"), zs("block{}.red_add"),
            w["head.w"].q.reshape(-1), np.int64(b["head.b"].q[0]),
            np.float64(qm.head_scale),
        )

    def __call__(self, q_in: np.ndarray) -> float:
        return float(_kernel(np.ascontiguousarray(q_in, dtype=np.uint8), *self.args))

    def warmup(self) -> None:
        self(np.zeros(self.input_len, dtype=np.uint8))


def make_engine(qm: QuantizedModel):
    """FastEngine for qm, or None when numba is not installed."""
    try:
        import numba  # noqa: F401
    except ImportError:
        return None
    return FastEngine(qm)
