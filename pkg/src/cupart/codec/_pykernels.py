"""Pure-Python/numpy versions of the per-CTU RDO kernels.

Mirrors ``_ckernels.pyx`` operation for operation so that both backends
return bitwise-identical costs: block statistics are exact integers and the
leaf cost uses libm ``log2`` through :func:`math.log2`.
"""

import math

import numpy as np

NULL = 255
BACKEND = "python"


def cu_stats(block, int_x, int_y, size):
    """Exact ``(SSE, SAD)`` of a square CU about its own mean."""
    blk = block[int_y:int_y + size, int_x:int_x + size].astype(np.int64)
    n = size * size
    s = int(blk.sum())
    q = int((blk * blk).sum())
    nsad = int(np.abs(n * blk - s).sum())
    return (n * q - s * s) / n, nsad / n


def leaf_cost(block, x, y, size, lam, header, coef):
    sse, sad = cu_stats(block, x, y, size)
    return sse + lam * (header + coef * math.log2(1.0 + sad))


def _child_cell(cell, q):
    return 1 + q if cell == 0 else 5 + 4 * (cell - 1) + q


def _canonical(best_split):
    lab = np.full(21, NULL, dtype=np.uint8)
    lab[0] = best_split[0]
    if lab[0]:
        for i in range(4):
            lab[1 + i] = best_split[1 + i]
            if lab[1 + i]:
                for j in range(4):
                    lab[5 + 4 * i + j] = best_split[5 + 4 * i + j]
    return lab


def oracle_ctu(block, lam, header, flag, coef):
    """Full top-down check / bottom-up compare over all 85 CUs.

    Returns ``(J, labels[21], evaluated_cu_count)``.
    """
    best = np.zeros(21, dtype=np.uint8)
    count = [0]

    def visit(cell, x, y, size):
        jp = leaf_cost(block, x, y, size, lam, header, coef)
        count[0] += 1
        if size == 8:
            return jp
        h = size // 2
        js = 0.0
        for q in range(4):
            cx, cy = x + h * (q % 2), y + h * (q // 2)
            if h == 8:
                jc = leaf_cost(block, cx, cy, h, lam, header, coef)
                count[0] += 1
            else:
                jc = visit(_child_cell(cell, q), cx, cy, h)
            js = jc if q == 0 else js + jc
        js = js + lam * flag
        if js < jp:
            best[cell] = 1
            return js
        return jp

    j = visit(0, 0, 0, 64)
    return j, _canonical(best), count[0]


def guided_ctu(block, decisions, lam, header, flag, coef):
    """Encode one CTU following per-cell decisions (0 no split, 1 split, 2 check).

    Uncertain cells compare the parent CU against its four children, each
    child resolved by its own decision.
    """
    best = np.zeros(21, dtype=np.uint8)
    count = [0]

    def children(cell, x, y, size):
        h = size // 2
        js = 0.0
        for q in range(4):
            cx, cy = x + h * (q % 2), y + h * (q // 2)
            if h == 8:
                jc = leaf_cost(block, cx, cy, h, lam, header, coef)
                count[0] += 1
            else:
                jc = visit(_child_cell(cell, q), cx, cy, h)
            js = jc if q == 0 else js + jc
        return js + lam * flag

    def visit(cell, x, y, size):
        dec = int(decisions[cell])
        if dec < 0 or dec > 2:
            raise ValueError(f"no usable decision for cell {cell}")
        if dec == 0:
            count[0] += 1
            return leaf_cost(block, x, y, size, lam, header, coef)
        if dec == 1:
            best[cell] = 1
            return children(cell, x, y, size)
        jp = leaf_cost(block, x, y, size, lam, header, coef)
        count[0] += 1
        js = children(cell, x, y, size)
        if js < jp:
            best[cell] = 1
            return js
        return jp

    j = visit(0, 0, 0, 64)
    return j, _canonical(best), count[0]
