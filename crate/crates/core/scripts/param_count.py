#!/usr/bin/env python3
"""Counts model parameters by walking the layer list.

Usage: param_count.py IN_BANDS BASE DEPTH RANK MODE
"""
import sys


def conv(cin, cout, k, bias=True):
    return cout * cin * k * k + (cout if bias else 0)


def normed_conv3(cin, cout):
    # 3x3 kernel without bias, then per-channel scale and shift
    return conv(cin, cout, 3, bias=False) + 2 * cout


def count(in_bands, base, depth, rank, mode):
    ch = [base * 2**i for i in range(depth)]
    total = 0
    cin = in_bands
    for c in ch:
        total += normed_conv3(cin, c)  # stride-1 conv
        total += normed_conv3(c, c)  # stride-2 conv
        cin = c
    for c in ch:
        if mode in ("spectral", "both"):
            total += rank * c + rank + c * rank + c
        if mode in ("spatial", "both"):
            total += conv(2, 1, 7)
    for i in reversed(range(depth)):
        below = ch[i] if i == depth - 1 else ch[i + 1]
        total += normed_conv3(below + ch[i], ch[i])
    total += conv(base, in_bands, 1)
    return total


if __name__ == "__main__":
    args = sys.argv[1:] or ["8", "8", "2", "4", "both"]
    print(count(int(args[0]), int(args[1]), int(args[2]), int(args[3]), args[4]))
