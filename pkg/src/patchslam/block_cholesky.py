"""Sparse Cholesky over 6x6 blocks for the reduced camera matrix.

The matrix is handed over as its upper-triangle block pattern (a <= b).
Factorization is right-looking with dynamically inserted fill blocks, so a
loop edge joining distant frames costs a thin extra border instead of dense
fill.  Natural (temporal) ordering is kept: patch-graph problems are banded
plus a handful of long-range blocks, where the elimination fill is linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularSystem

BLOCK = 6


@dataclass
class BlockCholeskyFactor:
    n: int
    diag_inv: np.ndarray                  # (n, 6, 6) inverses of the diagonal factors
    row_cols: list[np.ndarray]            # columns left of the diagonal, per row
    row_blocks: list[np.ndarray]          # matching L[i, c] stacks, per row
    col_rows: list[np.ndarray]            # rows below the diagonal, per column
    col_blocks: list[np.ndarray]          # matching L[r, j] stacks, per column
    block_count: int = 0                  # diagonal + strictly-lower blocks

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve S x = rhs for rhs of shape (n, 6)."""
        y = np.empty_like(rhs)
        for j in range(self.n):
            acc = rhs[j]
            if len(self.row_cols[j]):
                acc = acc - np.einsum("mab,mb->a", self.row_blocks[j], y[self.row_cols[j]])
            y[j] = self.diag_inv[j] @ acc
        x = np.empty_like(y)
        for j in range(self.n - 1, -1, -1):
            acc = y[j]
            if len(self.col_rows[j]):
                acc = acc - np.einsum("mba,mb->a", self.col_blocks[j], x[self.col_rows[j]])
            x[j] = self.diag_inv[j].T @ acc
        return x


def block_cholesky(keys: np.ndarray, blocks: np.ndarray, n: int) -> BlockCholeskyFactor:
    """Factor a symmetric positive-definite block matrix S = L L^T.

    keys:   (w, 2) upper-triangle block coordinates (a, b) with a <= b
    blocks: (w, 6, 6) the corresponding S_ab blocks
    """
    work: dict[tuple[int, int], np.ndarray] = {}
    pending: list[list[int]] = [[] for _ in range(n)]
    for (a, b), blk in zip(keys, blocks):
        a, b = int(a), int(b)
        if a == b:
            work[(a, a)] = blk.copy()
        else:
            # store the lower mirror; S_ba = S_ab^T
            work[(b, a)] = blk.T.copy()
            pending[a].append(b)

    diag_inv = np.empty((n, BLOCK, BLOCK))
    row_cols: list[list[int]] = [[] for _ in range(n)]
    row_blocks: list[list[np.ndarray]] = [[] for _ in range(n)]
    col_rows: list[np.ndarray] = [np.zeros(0, dtype=int)] * n
    col_blocks: list[np.ndarray] = [np.zeros((0, BLOCK, BLOCK))] * n
    total = n

    for j in range(n):
        d = work.pop((j, j), None)
        if d is None:
            raise SingularSystem(f"missing diagonal block {j}")
        try:
            ljj = np.linalg.cholesky(d)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"diagonal block {j} is not positive definite") from exc
        inv = np.linalg.inv(ljj)
        diag_inv[j] = inv

        rows = sorted(set(pending[j]))
        if not rows:
            continue
        stack = np.stack([work.pop((i, j)) for i in rows]) @ inv.T
        col_rows[j] = np.array(rows, dtype=int)
        col_blocks[j] = stack
        total += len(rows)
        for pos, i in enumerate(rows):
            row_cols[i].append(j)
            row_blocks[i].append(stack[pos])
        # right-looking update of the trailing submatrix (creates fill)
        outer = stack[:, None] @ stack.swapaxes(-1, -2)[None, :]
        for p, i in enumerate(rows):
            row_outer = outer[p]
            for q in range(p + 1):
                k = rows[q]
                blk = work.get((i, k))
                if blk is None:
                    work[(i, k)] = -row_outer[q].copy()
                    if i != k:
                        pending[k].append(i)
                else:
                    blk -= row_outer[q]

    return BlockCholeskyFactor(
        n, diag_inv,
        [np.array(c, dtype=int) for c in row_cols],
        [np.stack(b) if b else np.zeros((0, BLOCK, BLOCK)) for b in row_blocks],
        col_rows, col_blocks, total)
