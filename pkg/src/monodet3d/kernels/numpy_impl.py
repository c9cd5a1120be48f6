"""Pure-numpy implementations of the hot kernels.

conv2d uses im2col plus BLAS matmul; the assignment solver runs the
shortest-augmenting-path loop with vectorized column sweeps.
"""

import numpy as np


def _output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    # floor division: trailing samples a stride-2 kernel cannot reach are dropped
    span = size + 2 * pad - kernel
    if span < 0:
        raise ValueError(
            f"conv2d: kernel {kernel} does not fit extent {size} with pad {pad}"
        )
    return span // stride + 1


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, pad : pad + h, pad : pad + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return cols.reshape(cin * kh * kw, oh * ow)


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Cross-correlation of x [Cin,H,W] with kernels w [Cout,Cin,kh,kw]."""
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    oh = _output_extent(h, kh, stride, pad)
    ow = _output_extent(wd, kw, stride, pad)
    cols = _im2col(_pad(x, pad), kh, kw, stride, oh, ow)
    y = w.reshape(cout, cin * kh * kw) @ cols
    return y.reshape(cout, oh, ow)


def conv2d_grad_input(g: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    cout, oh, ow = g.shape
    _, cin, kh, kw = w.shape
    _, h, wd = x_shape
    colsg = w.reshape(cout, cin * kh * kw).T @ g.reshape(cout, oh * ow)
    colsg = colsg.reshape(cin, kh, kw, oh, ow)
    dxp = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride] += colsg[:, i, j]
    if pad == 0:
        return dxp
    return dxp[:, pad : pad + h, pad : pad + wd]


def conv2d_grad_weight(g: np.ndarray, x: np.ndarray, w_shape, stride: int, pad: int) -> np.ndarray:
    cout, oh, ow = g.shape
    _, cin, kh, kw = w_shape
    cols = _im2col(_pad(x, pad), kh, kw, stride, oh, ow)
    gw = g.reshape(cout, oh * ow) @ cols.T
    return gw.reshape(cout, cin, kh, kw)


def jv_assign(cost: np.ndarray):
    """Minimum-cost row-to-column assignment, rows <= columns.

    Shortest augmenting path with dual potentials. Returns
    (col_of_row, u, v) where the duals satisfy c[i,j] - u[i] - v[j] >= 0
    with equality on assigned pairs.
    """
    nr, nc = cost.shape
    u = np.zeros(nr, dtype=np.float64)
    v = np.zeros(nc + 1, dtype=np.float64)  # index nc is the virtual column
    row_of = np.full(nc + 1, -1, dtype=np.int64)
    for i in range(nr):
        row_of[nc] = i
        j0 = nc
        minv = np.full(nc, np.inf)
        way = np.full(nc, nc, dtype=np.int64)
        used = np.zeros(nc + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            cur = cost[i0] - u[i0] - v[:nc]
            upd = ~used[:nc] & (cur < minv)
            minv[upd] = cur[upd]
            way[upd] = j0
            masked = np.where(used[:nc], np.inf, minv)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[~used[:nc]] -= delta
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


def fill_convex_polygon(img: np.ndarray, poly: np.ndarray, color: np.ndarray) -> None:
    """Paint pixels of img [3,H,W] whose centers lie inside a convex polygon.

    poly is [K,2] of (x, y) vertices in continuous image coordinates; any
    winding is accepted. Edits img in place.
    """
    k = poly.shape[0]
    if k < 3:
        return
    area2 = 0.0
    for a in range(k):
        b = (a + 1) % k
        area2 += poly[a, 0] * poly[b, 1] - poly[b, 0] * poly[a, 1]
    if area2 < 0.0:
        poly = poly[::-1]
    h, w = img.shape[1], img.shape[2]
    x0 = max(int(np.floor(poly[:, 0].min())), 0)
    x1 = min(int(np.ceil(poly[:, 0].max())), w)
    y0 = max(int(np.floor(poly[:, 1].min())), 0)
    y1 = min(int(np.ceil(poly[:, 1].max())), h)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    inside = np.ones(gx.shape, dtype=bool)
    for a in range(k):
        b = (a + 1) % k
        ex, ey = poly[b, 0] - poly[a, 0], poly[b, 1] - poly[a, 1]
        inside &= ex * (gy - poly[a, 1]) - ey * (gx - poly[a, 0]) >= -1e-12
    for c in range(3):
        img[c, y0:y1, x0:x1][inside] = color[c]
