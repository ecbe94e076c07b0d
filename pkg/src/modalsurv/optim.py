from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a name -> Tensor mapping.

    Moments keep the dtype of their parameter so float32 training state
    survives a checkpoint round-trip unchanged.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def describe(self) -> dict:
        return {
            "name": "adam",
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "rule": "m=b1*m+(1-b1)*g; v=b2*v+(1-b2)*g^2; p-=lr*(m/(1-b1^t))/(sqrt(v/(1-b2^t))+eps)",
        }

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            dtype = p.data.dtype
            g = p.grad.astype(dtype, copy=False)
            if self.weight_decay:
                g = g + dtype.type(self.weight_decay) * p.data
            m = self.m[k] = dtype.type(self.beta1) * self.m[k] + dtype.type(1 - self.beta1) * g
            v = self.v[k] = dtype.type(self.beta2) * self.v[k] + dtype.type(1 - self.beta2) * (g * g)
            update = (m / dtype.type(c1)) / (np.sqrt(v / dtype.type(c2)) + dtype.type(self.eps))
            p.data = p.data - dtype.type(self.lr) * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays, step_count):
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=self.params[k].data.dtype)
        self.step_count = int(step_count)
