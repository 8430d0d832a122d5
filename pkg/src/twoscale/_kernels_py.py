"""NumPy implementations of the tensor-grid kernels (reference / fallback)."""
import numpy as np

REACTION_CODES = {"zero": 0, "linear": 1, "truncated-bilinear": 2}


def weighted_reaction(V, W, code, k, cap, wx, wy):
    """``wx_q wy_r eta(V_qr, W_qr)`` on a tensor grid of quadrature points."""
    if code == 0:
        H = np.zeros_like(V)
    elif code == 1:
        H = k * (V + W)
    else:
        H = k * np.clip(V, 0.0, cap) * np.clip(W, 0.0, cap)
    H *= wx[:, None]
    H *= wy[None, :]
    return H


def tensor_sq_error(F, X, Y, wx, wy):
    """``sum_qr wx_q wy_r (sum_k X_qk Y_rk - F_qr)^2``."""
    D = X @ Y.T
    D -= F
    D *= D
    return float(wx @ D @ wy)
