import numpy as np


def rowwise_matvec(X, M):
    """``X @ M.T`` for a batch of row vectors, accumulated elementwise.

    Avoids BLAS so that each row's result is independent of how many rows
    are processed together (bit-identical ensembles under any partition).
    """
    X = np.asarray(X, dtype=float)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    out = np.zeros(X.shape[:-1] + (M.shape[0],))
    for j in range(M.shape[1]):
        out += X[..., j:j + 1] * M[:, j]
    return out
