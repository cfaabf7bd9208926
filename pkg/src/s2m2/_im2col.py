"""Compiled im2col / col2im for channels-last convolution.

Column layout: cols[b, oh, ow, (i * kw + j) * C + c] = x[b, oh*s + i - pt, ow*s + j - pl, c],
zero where the tap falls into padding.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(x, kh, kw, stride, pt, pl, ho, wo):
    batch, height, width, channels = x.shape
    cols = np.empty((batch, ho, wo, kh * kw * channels))
    for b in range(batch):
        for oh in range(ho):
            for ow in range(wo):
                for i in range(kh):
                    h = oh * stride + i - pt
                    for j in range(kw):
                        w = ow * stride + j - pl
                        base = (i * kw + j) * channels
                        if 0 <= h < height and 0 <= w < width:
                            for c in range(channels):
                                cols[b, oh, ow, base + c] = x[b, h, w, c]
                        else:
                            for c in range(channels):
                                cols[b, oh, ow, base + c] = 0.0
    return cols


@njit(cache=True)
def col2im(dcols, height, width, kh, kw, stride, pt, pl):
    batch, ho, wo, k = dcols.shape
    channels = k // (kh * kw)
    dx = np.zeros((batch, height, width, channels))
    for b in range(batch):
        for oh in range(ho):
            for ow in range(wo):
                for i in range(kh):
                    h = oh * stride + i - pt
                    if h < 0 or h >= height:
                        continue
                    for j in range(kw):
                        w = ow * stride + j - pl
                        if w < 0 or w >= width:
                            continue
                        base = (i * kw + j) * channels
                        for c in range(channels):
                            dx[b, h, w, c] += dcols[b, oh, ow, base + c]
    return dx
