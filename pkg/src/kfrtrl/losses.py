"""Next-symbol cross-entropy in bits (base 2)."""

import numpy as np

LN2 = float(np.log(2.0))


def xent_loss_and_grad(logits, target):
    """Cross-entropy of a softmax readout against one target symbol.

    Returns (loss in bits, dL/dlogits). The gradient is the usual
    softmax-minus-onehot, scaled by 1/ln 2 so it matches the bit-valued
    loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    v = logits.shape[0]
    if not 0 <= target < v:
        raise ValueError(f"target {target} out of range for {v} symbols")
    shifted = logits - logits.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    log_probs = shifted - log_z
    loss = -log_probs[target] / LN2
    grad = np.exp(log_probs) / LN2
    grad[target] -= 1.0 / LN2
    return float(loss), grad
