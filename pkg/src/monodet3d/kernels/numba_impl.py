"""Numba-jitted loop implementations of the hot kernels.

Same contracts as numpy_impl; plain nested loops that numba compiles per
signature. cache=True keeps compiled artifacts across processes.
"""

import numpy as np
from numba import njit


def _output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    # floor division: trailing samples a stride-2 kernel cannot reach are dropped
    span = size + 2 * pad - kernel
    if span < 0:
        raise ValueError(
            f"conv2d: kernel {kernel} does not fit extent {size} with pad {pad}"
        )
    return span // stride + 1


@njit(cache=True)
def _conv2d_forward_jit(x, w, stride, pad, oh, ow):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    y = np.zeros((cout, oh, ow), dtype=np.float64)
    for co in range(cout):
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    wv = w[co, ci, i, j]
                    for a in range(oh):
                        ia = a * stride + i - pad
                        if ia < 0 or ia >= h:
                            continue
                        for b in range(ow):
                            jb = b * stride + j - pad
                            if 0 <= jb < wd:
                                y[co, a, b] += wv * x[ci, ia, jb]
    return y


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    oh = _output_extent(h, kh, stride, pad)
    ow = _output_extent(wd, kw, stride, pad)
    return _conv2d_forward_jit(
        np.ascontiguousarray(x), np.ascontiguousarray(w), stride, pad, oh, ow
    )


@njit(cache=True)
def _conv2d_grad_input_jit(g, w, h, wd, stride, pad):
    cout, oh, ow = g.shape
    _, cin, kh, kw = w.shape
    dx = np.zeros((cin, h, wd), dtype=np.float64)
    for co in range(cout):
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    wv = w[co, ci, i, j]
                    for a in range(oh):
                        ia = a * stride + i - pad
                        if ia < 0 or ia >= h:
                            continue
                        for b in range(ow):
                            jb = b * stride + j - pad
                            if 0 <= jb < wd:
                                dx[ci, ia, jb] += wv * g[co, a, b]
    return dx


def conv2d_grad_input(g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    _, h, wd = x_shape
    return _conv2d_grad_input_jit(
        np.ascontiguousarray(g), np.ascontiguousarray(w), h, wd, stride, pad
    )


@njit(cache=True)
def _conv2d_grad_weight_jit(g, x, cout, cin, kh, kw, stride, pad):
    _, oh, ow = g.shape
    _, h, wd = x.shape
    dw = np.zeros((cout, cin, kh, kw), dtype=np.float64)
    for co in range(cout):
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for a in range(oh):
                        ia = a * stride + i - pad
                        if ia < 0 or ia >= h:
                            continue
                        for b in range(ow):
                            jb = b * stride + j - pad
                            if 0 <= jb < wd:
                                acc += g[co, a, b] * x[ci, ia, jb]
                    dw[co, ci, i, j] = acc
    return dw


def conv2d_grad_weight(g: np.ndarray, x: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    cout, cin, kh, kw = w_shape
    return _conv2d_grad_weight_jit(
        np.ascontiguousarray(g), np.ascontiguousarray(x), cout, cin, kh, kw, stride, pad
    )


@njit(cache=True)
def _jv_assign_jit(cost):
    nr, nc = cost.shape
    u = np.zeros(nr, dtype=np.float64)
    v = np.zeros(nc + 1, dtype=np.float64)
    row_of = np.full(nc + 1, -1, dtype=np.int64)
    minv = np.empty(nc, dtype=np.float64)
    way = np.empty(nc, dtype=np.int64)
    used = np.empty(nc + 1, dtype=np.bool_)
    for i in range(nr):
        row_of[nc] = i
        j0 = nc
        for j in range(nc):
            minv[j] = np.inf
            way[j] = nc
            used[j] = False
        used[nc] = False
        while True:
            used[j0] = True
            i0 = row_of[j0]
            delta = np.inf
            j1 = -1
            for j in range(nc):
                if used[j]:
                    continue
                cur = cost[i0, j] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(nc + 1):
                if used[j]:
                    u[row_of[j]] += delta
                    v[j] -= delta
                elif j < nc:
                    minv[j] -= delta
            j0 = j1
            if row_of[j0] < 0:
                break
        while j0 != nc:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
    col_of = np.full(nr, -1, dtype=np.int64)
    for j in range(nc):
        if row_of[j] >= 0:
            col_of[row_of[j]] = j
    return col_of, u, v[:nc]


def jv_assign(cost: np.ndarray):
    return _jv_assign_jit(np.ascontiguousarray(cost, dtype=np.float64))


@njit(cache=True)
def _fill_convex_polygon_jit(img, poly, color):
    k = poly.shape[0]
    h, w = img.shape[1], img.shape[2]
    xmin, xmax = poly[0, 0], poly[0, 0]
    ymin, ymax = poly[0, 1], poly[0, 1]
    for a in range(1, k):
        xmin = min(xmin, poly[a, 0])
        xmax = max(xmax, poly[a, 0])
        ymin = min(ymin, poly[a, 1])
        ymax = max(ymax, poly[a, 1])
    x0 = max(int(np.floor(xmin)), 0)
    x1 = min(int(np.ceil(xmax)), w)
    y0 = max(int(np.floor(ymin)), 0)
    y1 = min(int(np.ceil(ymax)), h)
    for r in range(y0, y1):
        py = r + 0.5
        for c in range(x0, x1):
            px = c + 0.5
            inside = True
            for a in range(k):
                b = (a + 1) % k
                ex = poly[b, 0] - poly[a, 0]
                ey = poly[b, 1] - poly[a, 1]
                if ex * (py - poly[a, 1]) - ey * (px - poly[a, 0]) < -1e-12:
                    inside = False
                    break
            if inside:
                img[0, r, c] = color[0]
                img[1, r, c] = color[1]
                img[2, r, c] = color[2]


def fill_convex_polygon(img: np.ndarray, poly: np.ndarray, color: np.ndarray) -> None:
    k = poly.shape[0]
    if k < 3:
        return
    area2 = 0.0
    for a in range(k):
        b = (a + 1) % k
        area2 += poly[a, 0] * poly[b, 1] - poly[b, 0] * poly[a, 1]
    p = np.ascontiguousarray(poly[::-1] if area2 < 0.0 else poly, dtype=np.float64)
    _fill_convex_polygon_jit(img, p, np.asarray(color, dtype=np.float64))
