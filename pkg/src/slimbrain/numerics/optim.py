from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict.

    Decay is applied as ``theta *= 1 - lr * wd`` before the moment update.
    Parameters whose ``grad`` is ``None`` are skipped (their moments are kept).
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        st = self.state
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        st.step += 1
        t = st.step
        bc1 = 1.0 - st.beta1**t
        bc2 = 1.0 - st.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            dt = p.data.dtype.type
            if name not in st.m:
                st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            m, v = st.m[name], st.v[name]
            if st.weight_decay:
                p.data *= dt(1.0 - st.lr * st.weight_decay)
            m *= dt(st.beta1)
            m += dt(1.0 - st.beta1) * g
            v *= dt(st.beta2)
            v += dt(1.0 - st.beta2) * g * g
            denom = np.sqrt(v / dt(bc2)) + dt(st.eps)
            p.data -= dt(st.lr / bc1) * m / denom

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.state.step], dtype=np.float32)}
        for name in self.state.m:
            out[f"m/{name}"] = self.state.m[name]
            out[f"v/{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.state.step = int(arrays["step"][0])
        self.state.m = {k[2:]: np.array(v, dtype=self.params[k[2:]].data.dtype) for k, v in arrays.items() if k.startswith("m/")}
        self.state.v = {k[2:]: np.array(v, dtype=self.params[k[2:]].data.dtype) for k, v in arrays.items() if k.startswith("v/")}
