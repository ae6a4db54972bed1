"""Independent reference computations for the test suite.

Everything here is written as plain loops over Python scalars and shares no
code with the package beyond reading its data types, so a bug in a
vectorised implementation cannot be mirrored here.
"""

from __future__ import annotations

import math
import struct


# -- PE byte utilities ---------------------------------------------------------

def checksum_oracle(data: bytes) -> int:
    """Word-by-word PE checksum with carry folded after every addition."""
    e_lfanew = struct.unpack_from("<I", data, 0x3C)[0]
    field = e_lfanew + 4 + 20 + 64
    total = 0
    for i in range(0, len(data), 2):
        if field <= i < field + 4:
            continue
        lo = data[i]
        hi = data[i + 1] if i + 1 < len(data) else 0
        total += lo | (hi << 8)
        total = (total & 0xFFFF) + (total >> 16)
    return (total + len(data)) & 0xFFFFFFFF


def diff_oracle(a: bytes, b: bytes) -> int:
    count = 0
    for i in range(min(len(a), len(b))):
        if a[i] != b[i]:
            count += 1
    return count + abs(len(a) - len(b))


# -- detector -----------------------------------------------------------------

def _sig(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def scalar_forward(weights, x, trace: bool = False):
    """Straight-line evaluation of embed, gated conv, max-pool, two dense layers.

    With ``trace`` also returns the activation pattern (argmax per filter,
    sign of every relu input, clamp membership) used to tell stable
    finite-difference coordinates from kinks.
    """
    c = weights.config
    emb = weights.embedding.tolist()
    wr, br = weights.conv_relu.tolist(), weights.conv_relu_bias.tolist()
    wg, bg = weights.conv_gate.tolist(), weights.conv_gate_bias.tolist()
    w1, b1 = weights.fc1.tolist(), weights.fc1_bias.tolist()
    wo, bo = weights.fc_out.tolist(), weights.fc_out_bias.tolist()
    z = [emb[int(b)] for b in x]
    T = (c.k - c.kernel_size) // c.stride + 1

    pattern = []
    h = []
    for f in range(c.conv_filters):
        best, best_t = None, None
        for t in range(T):
            a = br[f]
            g = bg[f]
            for j in range(c.kernel_size):
                for d in range(c.embed_dim):
                    zz = z[t * c.stride + j][d]
                    a += zz * wr[j][d][f]
                    g += zz * wg[j][d][f]
            pattern.append(a > 0)
            val = max(a, 0.0) * _sig(g)
            if best is None or val > best:
                best, best_t = val, t
        h.append(best)
        pattern.append(("argmax", f, best_t))
    out = bo[0]
    for u_idx in range(c.hidden_units):
        u = b1[u_idx]
        for f in range(c.conv_filters):
            u += h[f] * w1[f][u_idx]
        pattern.append(u > 0)
        out += max(u, 0.0) * wo[u_idx][0]
    y = _sig(out)
    pattern.append(1e-7 < y < 1 - 1e-7)
    if trace:
        return y, tuple(pattern)
    return y


def bce_oracle(y: float, label: int) -> float:
    y = min(max(y, 1e-7), 1 - 1e-7)
    return -(label * math.log(y) + (1 - label) * math.log(1 - y))


def finite_difference(weights, x, label: int, h: float = 1e-4):
    """Central differences of the loss for every flat parameter coordinate,
    plus a mask of coordinates whose activation pattern is unchanged at +-h."""
    theta = weights.flat()
    _, base = scalar_forward(weights, x, trace=True)
    grads, stable = [], []
    for i in range(theta.size):
        plus = theta.copy()
        plus[i] += h
        minus = theta.copy()
        minus[i] -= h
        yp, pp = scalar_forward(weights.unflatten(plus), x, trace=True)
        ym, pm = scalar_forward(weights.unflatten(minus), x, trace=True)
        grads.append((bce_oracle(yp, label) - bce_oracle(ym, label)) / (2 * h))
        stable.append(pp == base and pm == base)
    return grads, stable


# -- counting ------------------------------------------------------------------

def occupancy_hit_rate(space: int, draws: int) -> float:
    """Chance that ``draws`` uniform draws with replacement hit one fixed point."""
    return 1.0 - (1.0 - 1.0 / space) ** draws


def stratified_split_counts(n_malware: int, n_benign: int, ratio: float, holdout: int) -> dict:
    rest = n_malware - holdout
    train_m = int(round(rest * ratio))
    train_b = int(round(n_benign * ratio))
    return {
        ("train", "malware"): train_m,
        ("validation", "malware"): rest - train_m,
        ("holdout", "malware"): holdout,
        ("train", "benign"): train_b,
        ("validation", "benign"): n_benign - train_b,
    }
