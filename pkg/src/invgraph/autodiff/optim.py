"""Adam optimizer with bias correction, operating in place on parameter tensors."""

import numpy as np

from .tensor import AutodiffError, Tensor


class AdamState:
    """Per-parameter first/second moment accumulators plus a shared step count."""

    def __init__(self, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step = 0
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied in place to each parameter.

    `grads` aligns with `params`; entries may be Tensors or ndarrays.
    NaN gradients are an error naming the offending parameter.
    """
    if len(params) != len(grads):
        raise AutodiffError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        gd = g.data if isinstance(g, Tensor) else np.asarray(g)
        if gd.shape != p.data.shape:
            raise AutodiffError(
                f"adam_step: grad shape {gd.shape} != param shape {p.data.shape} "
                f"for parameter {p.name or i}")
        if np.any(np.isnan(gd)):
            raise AutodiffError(f"adam_step: NaN gradient for parameter {p.name or i}")
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * gd
        v *= state.beta2
        v += (1.0 - state.beta2) * (gd * gd)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


class Adam:
    """Convenience wrapper tying an AdamState to a fixed parameter list."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(self.params, beta1, beta2, epsilon)

    def step(self, grads):
        adam_step(self.params, grads, self.state, self.lr)

    def step_from(self, tape, grad_map):
        """Update from a tape.backward() gradient map (missing leaves get zero)."""
        grads = tape.gradients(grad_map, self.params)
        adam_step(self.params, grads, self.state, self.lr)
